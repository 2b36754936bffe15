"""Angle of progression and head-symphysis distance from segmentation masks.

Both structures are summarized by least-squares ellipses. The symphysis
long axis is the major axis of its ellipse; its inferior end is the axis
endpoint nearer the head centroid. The angle is measured at that endpoint
between the ray running back along the symphysis axis and the tangent ray
to the head ellipse that opens the angle widest. The distance is measured
from the same endpoint to the nearest head boundary pixel.

Points are ``(x, y) = (column, row)`` in pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BiometryError, DegenerateGeometryError, FitError
from .metrics import LabelMask, boundary_of

PS, FH = 1, 2


@dataclass(frozen=True)
class Ellipse:
    center: tuple
    semi_major: float
    semi_minor: float
    angle: float  # radians of the major axis vs +x, in [0, pi)

    def __post_init__(self):
        if not self.semi_major >= self.semi_minor > 0:
            raise FitError(f"invalid semi-axes {self.semi_major}, {self.semi_minor}")

    @property
    def axis(self) -> np.ndarray:
        return np.array([math.cos(self.angle), math.sin(self.angle)])

    def endpoints(self) -> tuple:
        c = np.asarray(self.center, dtype=float)
        return c + self.semi_major * self.axis, c - self.semi_major * self.axis

    def sample(self, n: int) -> np.ndarray:
        t = np.linspace(0, 2 * np.pi, n, endpoint=False)
        local = np.stack([self.semi_major * np.cos(t), self.semi_minor * np.sin(t)], axis=1)
        return local @ self._rot().T + np.asarray(self.center)

    def _rot(self) -> np.ndarray:
        c, s = math.cos(self.angle), math.sin(self.angle)
        return np.array([[c, -s], [s, c]])

    def to_unit(self, p) -> np.ndarray:
        """Affine map sending this ellipse onto the unit circle."""
        local = (np.asarray(p, dtype=float) - np.asarray(self.center)) @ self._rot()
        return local / np.array([self.semi_major, self.semi_minor])

    def from_unit(self, q) -> np.ndarray:
        return (np.asarray(q) * np.array([self.semi_major, self.semi_minor])) @ self._rot().T + np.asarray(self.center)


@dataclass(frozen=True)
class BiometryResult:
    aop_deg: float
    hsd: float
    ps_ellipse: Ellipse
    fh_ellipse: Ellipse
    ps_inferior: tuple


# -- ellipse fitting --------------------------------------------------------------
def fit_ellipse(points) -> Ellipse:
    """Direct least-squares ellipse fit (numerically stable split form)."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 6:
        raise FitError(f"need at least 6 points of shape (N, 2), got {pts.shape}")
    mean = pts.mean(axis=0)
    centred = pts - mean
    scale = np.sqrt((centred**2).sum(axis=1).mean())
    if scale == 0:
        raise FitError("all points coincide")
    xy = centred / scale
    if np.linalg.matrix_rank(xy, tol=1e-9) < 2:
        raise FitError("points are collinear")
    x, y = xy[:, 0], xy[:, 1]
    d1 = np.stack([x * x, x * y, y * y], axis=1)
    d2 = np.stack([x, y, np.ones_like(x)], axis=1)
    s1, s2, s3 = d1.T @ d1, d1.T @ d2, d2.T @ d2
    try:
        t = -np.linalg.solve(s3, s2.T)
    except np.linalg.LinAlgError as e:
        raise FitError("degenerate point set") from e
    m = s1 + s2 @ t
    m = np.stack([m[2] / 2, -m[1], m[0] / 2])
    _, vecs = np.linalg.eig(m)
    vecs = np.real(vecs)
    cond = 4 * vecs[0] * vecs[2] - vecs[1] ** 2
    ok = np.flatnonzero(cond > 0)
    if len(ok) == 0:
        raise FitError("no elliptical solution")
    a1 = vecs[:, ok[0]]
    coeffs = np.concatenate([a1, t @ a1])
    e = _conic_to_ellipse(coeffs)
    return Ellipse(
        center=tuple(np.asarray(e.center) * scale + mean),
        semi_major=e.semi_major * scale,
        semi_minor=e.semi_minor * scale,
        angle=e.angle,
    )


def _conic_to_ellipse(c: np.ndarray) -> Ellipse:
    A, B, C, D, E, F = c
    q = np.array([[A, B / 2], [B / 2, C]])
    try:
        x0, y0 = np.linalg.solve(2 * q, [-D, -E])
    except np.linalg.LinAlgError as e:
        raise FitError("conic has no centre") from e
    f0 = A * x0 * x0 + B * x0 * y0 + C * y0 * y0 + D * x0 + E * y0 + F
    lam, vec = np.linalg.eigh(q)
    sq = -f0 / lam
    if not (sq > 0).all():
        raise FitError("conic is not a real ellipse")
    axes = np.sqrt(sq)
    major = int(np.argmax(axes))
    v = vec[:, major]
    angle = math.atan2(v[1], v[0]) % math.pi
    return Ellipse(center=(x0, y0), semi_major=float(axes[major]), semi_minor=float(axes[1 - major]), angle=angle)


def edge_points(region: np.ndarray) -> np.ndarray:
    """Midpoints of pixel edges separating the region from its complement, ``(x, y)``."""
    padded = np.pad(region.astype(bool), 1)
    pts = []
    dv = padded[1:, :] != padded[:-1, :]  # between padded rows r and r+1
    r, c = np.nonzero(dv)
    pts.append(np.stack([c - 1.0, r - 0.5], axis=1))
    dh = padded[:, 1:] != padded[:, :-1]
    r, c = np.nonzero(dh)
    pts.append(np.stack([c - 0.5, r - 1.0], axis=1))
    return np.concatenate(pts)


def fit_region(region: np.ndarray) -> Ellipse:
    if not region.any():
        raise BiometryError("structure absent from mask")
    return fit_ellipse(edge_points(region))


# -- measurements --------------------------------------------------------------
def _region(m, cls: int) -> np.ndarray:
    if isinstance(m, LabelMask):
        return m.region(cls)
    a = np.asarray(m)
    return a.astype(bool) if a.dtype == bool else a == cls


def _spacing(*masks) -> float:
    for m in masks:
        if isinstance(m, LabelMask):
            return m.spacing
    return 1.0


def _inferior(ps: Ellipse, fh_region: np.ndarray) -> tuple:
    rows, cols = np.nonzero(fh_region)
    centroid = np.array([cols.mean(), rows.mean()])
    e1, e2 = ps.endpoints()
    if np.linalg.norm(e1 - centroid) <= np.linalg.norm(e2 - centroid):
        return e1, e2
    return e2, e1


def aop_from_ellipses(ps: Ellipse, fh: Ellipse, inferior=None) -> float:
    """Angle in degrees at the symphysis inferior end (see module docstring)."""
    if inferior is None:
        e1, e2 = ps.endpoints()
        c = np.asarray(fh.center)
        inferior, superior = (e1, e2) if np.linalg.norm(e1 - c) <= np.linalg.norm(e2 - c) else (e2, e1)
    else:
        e1, e2 = ps.endpoints()
        superior = e2 if np.allclose(inferior, e1) else e1
    p = np.asarray(inferior, dtype=float)
    back = superior - p
    back /= np.linalg.norm(back)

    u = fh.to_unit(p)
    r = float(np.linalg.norm(u))
    if r <= 1.0:
        raise DegenerateGeometryError("symphysis endpoint lies inside the head ellipse; no tangent exists")
    base = math.atan2(u[1], u[0])
    half = math.acos(1.0 / r)
    best = -1.0
    for phi in (base + half, base - half):
        t = fh.from_unit([math.cos(phi), math.sin(phi)])
        ray = t - p
        ray /= np.linalg.norm(ray)
        best = max(best, math.degrees(math.acos(float(np.clip(back @ ray, -1.0, 1.0)))))
    return best


def hsd_from_point(point, fh, spacing: float | None = None) -> float:
    """Distance from ``point`` (x, y) to the nearest head boundary pixel centre."""
    region = _region(fh, FH)
    pts = boundary_of(region)
    if len(pts) == 0:
        raise BiometryError("head absent from mask")
    sp = _spacing(fh) if spacing is None else spacing
    p = np.asarray(point, dtype=float)
    d = np.sqrt(((pts[:, ::-1] - p) ** 2).sum(axis=1))
    return float(d.min()) * sp


def measure(ps, fh=None, spacing: float | None = None) -> BiometryResult:
    """Full measurement. ``ps`` and ``fh`` may be the same three-class mask."""
    fh = ps if fh is None else fh
    ps_region, fh_region = _region(ps, PS), _region(fh, FH)
    if not ps_region.any() or not fh_region.any():
        raise BiometryError("both structures must be present")
    sp = _spacing(ps, fh) if spacing is None else spacing
    ps_e, fh_e = fit_region(ps_region), fit_region(fh_region)
    inferior, _ = _inferior(ps_e, fh_region)
    aop = aop_from_ellipses(ps_e, fh_e, inferior)
    hsd = hsd_from_point(inferior, fh_region, sp)
    return BiometryResult(aop, hsd, ps_e, fh_e, tuple(float(v) for v in inferior))


def compute_aop(ps, fh=None) -> float:
    return measure(ps, fh).aop_deg


def compute_hsd(ps, fh=None, spacing: float | None = None) -> float:
    return measure(ps, fh, spacing).hsd


def biometry_error(pred: BiometryResult, gt: BiometryResult) -> tuple:
    return abs(pred.aop_deg - gt.aop_deg), abs(pred.hsd - gt.hsd)
