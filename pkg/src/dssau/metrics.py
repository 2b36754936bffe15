"""Overlap and surface-distance metrics on label masks.

Surface metrics work on boundary pixels: class pixels with at least one
4-neighbour outside the class (the image border counts as outside).
Distances are Euclidean between pixel centres, scaled by the mask spacing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import DimensionError, UndefinedMetricError

FOREGROUND = (1, 2)


@dataclass
class LabelMask:
    labels: np.ndarray  # (H, W) ints; 0 background, 1 PS, 2 FH
    spacing: float = 1.0  # mm per pixel

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 2 or 0 in self.labels.shape:
            raise DimensionError(f"label mask must be a non-empty 2-D array, got {self.labels.shape}")
        if self.labels.size and self.labels.min() < 0:
            raise ValueError("negative label")
        if self.spacing <= 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def region(self, cls: int) -> np.ndarray:
        return self.labels == cls

    def boundary(self, cls: int) -> np.ndarray:
        return boundary_of(self.region(cls))

    def fitted_ellipse(self, cls: int):
        from .biometry import fit_region

        return fit_region(self.region(cls))


def _as_mask(m) -> LabelMask:
    return m if isinstance(m, LabelMask) else LabelMask(np.asarray(m))


def _pair(a, b) -> tuple:
    a, b = _as_mask(a), _as_mask(b)
    if a.labels.shape != b.labels.shape:
        raise DimensionError(f"mask extents differ: {a.labels.shape} vs {b.labels.shape}")
    return a, b


def dsc(a, b, cls: int) -> float:
    """``2|A n B| / (|A| + |B|)``; 1.0 when both are empty."""
    a, b = _pair(a, b)
    ra, rb = a.region(cls), b.region(cls)
    total = int(ra.sum()) + int(rb.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((ra & rb).sum()) / total


def pooled_dsc(a, b, classes=FOREGROUND) -> float:
    """Dice over all foreground pixels, each counted for its own class."""
    a, b = _pair(a, b)
    inter = sum(int((a.region(c) & b.region(c)).sum()) for c in classes)
    total = sum(int(a.region(c).sum()) + int(b.region(c).sum()) for c in classes)
    return 1.0 if total == 0 else 2.0 * inter / total


def boundary_of(region: np.ndarray) -> np.ndarray:
    """``(N, 2)`` row/col coordinates of boundary pixels of a boolean region."""
    padded = np.pad(region, 1, constant_values=False)
    interior = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return np.argwhere(region & ~interior)


def boundary(mask, cls: int) -> np.ndarray:
    return boundary_of(_as_mask(mask).region(cls))


def _directed(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    # exact: nearest-neighbour search on integer coordinates
    d, _ = cKDTree(dst).query(src, k=1)
    return d


def _surfaces(a, b, cls: int) -> tuple:
    a, b = _pair(a, b)
    pa, pb = boundary(a, cls), boundary(b, cls)
    if len(pa) == 0 or len(pb) == 0:
        raise UndefinedMetricError(f"class {cls} is empty in {'both masks' if len(pa) == len(pb) else 'one mask'}")
    return pa, pb, a.spacing


def hausdorff(a, b, cls: int) -> float:
    pa, pb, sp = _surfaces(a, b, cls)
    return float(max(_directed(pa, pb).max(), _directed(pb, pa).max())) * sp


def asd(a, b, cls: int) -> float:
    pa, pb, sp = _surfaces(a, b, cls)
    return 0.5 * float(_directed(pa, pb).mean() + _directed(pb, pa).mean()) * sp
