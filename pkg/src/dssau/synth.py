"""Synthetic two-structure ultrasound-like scenes with exact masks.

Each scene holds an elongated bright ellipse (symphysis, label 1) and a
larger ellipse further along its long axis (head, label 2), rendered with
multiplicative speckle and a smooth intensity gradient. The manifest keeps
the true ellipse parameters so biometry has an analytic ground truth.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .biometry import FH, PS, Ellipse, aop_from_ellipses, hsd_from_point
from .io import write_image, write_mask

MAX_TRIES = 1000


def rasterize(ellipses, size: int) -> np.ndarray:
    """Label map: pixel centre inside ellipse ``i`` gets label ``i + 1``; later ellipses win."""
    yy, xx = np.mgrid[:size, :size].astype(np.float64)
    lab = np.zeros((size, size), np.int64)
    for label, e in enumerate(ellipses, 1):
        c, s = math.cos(e.angle), math.sin(e.angle)
        dx, dy = xx - e.center[0], yy - e.center[1]
        u = (dx * c + dy * s) / e.semi_major
        v = (-dx * s + dy * c) / e.semi_minor
        lab[u * u + v * v <= 1.0] = label
    return lab


def _sample_geometry(rng: np.random.Generator, size: int) -> tuple:
    n = float(size)
    theta = math.radians(rng.uniform(15.0, 45.0))
    u = np.array([math.cos(theta), math.sin(theta)])
    ps = Ellipse(
        center=(float(rng.uniform(0.2, 0.35) * n), float(rng.uniform(0.2, 0.35) * n)),
        semi_major=float(rng.uniform(0.13, 0.18) * n),
        semi_minor=float(rng.uniform(0.05, 0.065) * n),
        angle=theta,
    )
    apex = np.asarray(ps.center) + ps.semi_major * u
    a = float(rng.uniform(0.2, 0.26) * n)
    b = float(rng.uniform(0.75, 0.95) * a)
    off = math.radians(rng.uniform(-20.0, 20.0))
    v = np.array([math.cos(theta + off), math.sin(theta + off)])
    centre = apex + (rng.uniform(0.08, 0.2) * n + b) * v
    fh = Ellipse(center=tuple(float(x) for x in centre), semi_major=a, semi_minor=b, angle=float(rng.uniform(0, math.pi)))
    return ps, fh


def _valid(ps: Ellipse, fh: Ellipse, size: int) -> bool:
    margin = 2
    for e in (ps, fh):
        pts = e.sample(180)
        if pts.min() < margin or pts.max() > size - 1 - margin:
            return False
    lab_ps = rasterize([ps], size) > 0
    lab_fh = rasterize([fh], size) > 0
    from scipy.ndimage import binary_dilation

    if (binary_dilation(lab_ps, iterations=2) & lab_fh).any():
        return False
    return float(np.linalg.norm(fh.to_unit(ps.endpoints()[0]))) > 1.05


def render(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    size = labels.shape[0]
    base = np.array([0.18, 0.8, 0.45])[labels]
    rim = (labels == FH) & ~_erode(labels == FH)
    base = np.where(rim, 0.7, base)
    yy, xx = np.mgrid[:size, :size] / float(size)
    g = rng.uniform(-0.25, 0.25, size=2)
    base = base * (1.0 + g[0] * (xx - 0.5) + g[1] * (yy - 0.5))
    speckle = rng.gamma(shape=6.0, scale=1.0 / 6.0, size=labels.shape)
    return np.clip(base * speckle, 0.0, 1.0).astype(np.float32)


def _erode(region: np.ndarray) -> np.ndarray:
    from scipy.ndimage import binary_erosion

    return binary_erosion(region, iterations=max(1, region.shape[0] // 64))


def make_scene(rng: np.random.Generator, size: int) -> tuple:
    """Return ``(image, labels, manifest)`` for one scene."""
    for _ in range(MAX_TRIES):
        ps, fh = _sample_geometry(rng, size)
        if _valid(ps, fh, size):
            break
    else:
        raise RuntimeError("could not place a valid scene; image size too small?")
    labels = rasterize([ps, fh], size)
    image = render(labels, rng)
    inferior, _ = ps.endpoints()
    manifest = {
        "size": size,
        "ps": asdict(ps),
        "fh": asdict(fh),
        "ps_inferior": [float(x) for x in inferior],
        "aop_deg": aop_from_ellipses(ps, fh, inferior),
        "hsd_px": hsd_from_point(inferior, labels == FH),
    }
    return image, labels, manifest


def ellipses_from_manifest(m: dict) -> tuple:
    def _e(d):
        return Ellipse(center=tuple(d["center"]), semi_major=d["semi_major"], semi_minor=d["semi_minor"], angle=d["angle"])

    return _e(m["ps"]), _e(m["fh"])


def generate(out_dir, n: int, size: int = 256, seed: int = 0) -> list:
    """Write ``n`` scenes as ``images/``, ``masks/`` and ``manifests/`` with shared stems."""
    if size % 32:
        raise ValueError(f"size {size} not divisible by 32")
    out = Path(out_dir)
    for sub in ("images", "masks", "manifests"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    stems = []
    for i in range(n):
        image, labels, manifest = make_scene(rng, size)
        stem = f"case_{i:04d}"
        write_image(out / "images" / f"{stem}.png", image)
        write_mask(out / "masks" / f"{stem}.png", labels)
        (out / "manifests" / f"{stem}.json").write_text(json.dumps(manifest, indent=2))
        stems.append(stem)
    return stems


def generate_arrays(n: int, size: int, seed: int) -> tuple:
    """In-memory variant: ``(images (n, H, W) float32, labels (n, H, W) int64)``."""
    rng = np.random.default_rng(seed)
    scenes = [make_scene(rng, size) for _ in range(n)]
    return np.stack([s[0] for s in scenes]), np.stack([s[1] for s in scenes])
