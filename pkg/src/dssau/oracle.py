"""Independent verification instruments.

``dense_attention`` is a loop-based reference for the dense limit of the
sparse mechanism, ``grad_check`` compares backward against central
differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .attention import frozen_routing
from .autodiff import Tensor, no_grad
from .errors import DimensionError


def dense_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, heads: int) -> np.ndarray:
    """``softmax(Q K^T / sqrt(d)) V`` per head, no sparsity.

    Accepts ``(N, C)`` or ``(B, N, C)`` arrays and computes in float64.
    """
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    squeeze = q.ndim == 2
    if squeeze:
        q, k, v = q[None], k[None], v[None]
    if q.shape[-1] != k.shape[-1] or k.shape[:-1] != v.shape[:-1] or q.shape[-1] % heads:
        raise DimensionError(f"dense_attention: shapes {q.shape}, {k.shape}, {v.shape} with {heads} heads")
    B, N, C = q.shape
    d = C // heads
    out = np.zeros((B, N, v.shape[-1]))
    dv = v.shape[-1] // heads
    for b in range(B):
        for h in range(heads):
            qh = q[b, :, h * d : (h + 1) * d]
            kh = k[b, :, h * d : (h + 1) * d]
            vh = v[b, :, h * dv : (h + 1) * dv]
            for i in range(N):
                s = kh @ qh[i] / np.sqrt(d)
                w = np.exp(s - s.max())
                w /= w.sum()
                out[b, i, h * dv : (h + 1) * dv] = w @ vh
    return out[0] if squeeze else out


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_parameter: dict = field(default_factory=dict)
    coordinates: int = 0

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def relative_error(analytic: float, numeric: float, floor: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor] | dict,
    h: float = 1e-4,
    coords_per_param: int = 10,
    seed: int = 0,
    floor: float = 1e-6,
    freeze_routing: bool = True,
) -> GradCheckReport:
    """Worst relative error between backward and central differences.

    ``f`` builds a scalar from the current parameter values. For each
    parameter tensor ``coords_per_param`` coordinates are sampled (all of
    them for smaller tensors). With ``freeze_routing`` the discrete top-k
    choices made at the base point are replayed during the perturbed
    evaluations; the selection itself has zero derivative.
    Relative errors use ``max(|a|, |n|, floor)`` as denominator.
    """
    if isinstance(params, dict):
        named = list(params.items())
    else:
        named = [(str(i), p) for i, p in enumerate(params)]
    rng = np.random.default_rng(seed)
    for _, p in named:
        p.grad = None

    recorder = None
    if freeze_routing:
        with frozen_routing() as recorder:
            loss = f()
    else:
        loss = f()
    loss.backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in named}

    def evaluate() -> float:
        with no_grad():
            if recorder is None:
                return float(f().item())
            with frozen_routing(recorder, replay=True):
                return float(f().item())

    report = GradCheckReport(max_rel_error=0.0)
    for name, p in named:
        n = p.size
        coords = np.arange(n) if n <= coords_per_param else rng.choice(n, size=coords_per_param, replace=False)
        worst = 0.0
        p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            fp = evaluate()
            flat[c] = orig - h
            fm = evaluate()
            flat[c] = orig
            numeric = (fp - fm) / (2 * h)
            worst = max(worst, relative_error(float(analytic[name].reshape(-1)[c]), numeric, floor))
        report.per_parameter[name] = worst
        report.coordinates += len(coords)
        report.max_rel_error = max(report.max_rel_error, worst)
    return report


# -- cost accounting -------------------------------------------------------------
@dataclass
class CostReport:
    """Multiply-accumulate and parameter counts, per module.

    ``flops`` is ``2 * macs``. Only convolutions, linear maps and the
    attention score/value products are counted; top-k, gather, norms,
    softmax, interpolation and elementwise ops count as zero.
    """

    macs: int = 0
    params: int = 0
    per_module: dict = field(default_factory=dict)  # name -> (macs, params)

    @property
    def flops(self) -> int:
        return 2 * self.macs

    def add(self, name: str, macs: int, params: int) -> None:
        m, p = self.per_module.get(name, (0, 0))
        self.per_module[name] = (m + int(macs), p + int(params))
        self.macs += int(macs)
        self.params += int(params)

    def format(self) -> str:
        lines = [f"{'module':<24}{'MACs':>16}{'params':>14}"]
        for name, (m, p) in self.per_module.items():
            lines.append(f"{name:<24}{m:>16,d}{p:>14,d}")
        lines.append(f"{'total':<24}{self.macs:>16,d}{self.params:>14,d}")
        lines.append(f"GMACs {self.macs / 1e9:.3f}  GFLOPs {self.flops / 1e9:.3f}  params(M) {self.params / 1e6:.3f}")
        return "\n".join(lines)


def _conv(hw: int, c_in: int, c_out: int, k: int, groups: int = 1, bias: bool = True) -> tuple:
    per_out = (c_in // groups) * k * k
    return hw * c_out * per_out, c_out * per_out + (c_out if bias else 0)


def attention_macs(side: int, dim: int, regions: int, k1: int, lam: float) -> int:
    """Score and aggregation products of one attention layer on a ``side x side`` map."""
    from .attention import retained_count

    hw = side * side
    r2 = regions * regions
    n = hw // r2
    k2 = retained_count(lam, k1 * n)
    return r2 * r2 * dim + hw * k1 * n * dim + hw * k2 * dim


def _block(report: CostReport, name: str, side: int, dim: int, cfg, k1: int) -> None:
    from .model import stage_attention

    att = stage_attention(cfg, dim, side, k1)
    hw = side * side
    hidden = cfg.mlp_ratio * dim
    m, p = _conv(hw, dim, dim, 3, groups=dim)
    report.add(name, m, p + 4 * dim)  # position conv, two norms
    report.add(name, 3 * hw * dim * dim, 3 * dim * dim)
    report.add(name, attention_macs(side, dim, att.regions, att.k1, cfg.lam), 0)
    m, p = _conv(hw, dim, dim, 5, groups=dim)
    report.add(name, m, p)
    report.add(name, 2 * hw * dim * hidden, 2 * dim * hidden + hidden + dim)


def count_cost(cfg, image_size: int = 256) -> CostReport:
    """Analytic cost of the network described by ``cfg`` at ``image_size`` square input."""
    from .model import SKIP_SCALES

    rep = CostReport()
    w = cfg.widths
    cd = cfg.decoder_width
    sides = [image_size // f for f in (4, 8, 16, 32)]
    half = image_size // 2

    m1, p1 = _conv(half * half, cfg.in_channels, w[0] // 2, 3)
    m2, p2 = _conv(sides[0] ** 2, w[0] // 2, w[0], 3)
    rep.add("embed", m1 + m2, p1 + p2 + 2 * (w[0] // 2) + 2 * w[0])
    for i in range(4):
        if i:
            m, p = _conv(sides[i] ** 2, w[i - 1], w[i], 3)
            rep.add(f"merge{i}", m, p + 2 * w[i])
        for _ in range(cfg.depths[i]):
            _block(rep, f"encoder{i + 1}", sides[i], w[i], cfg, cfg.k1_schedule[i])

    s4 = sides[3] ** 2
    for b in cfg.ppm_bins:
        m, p = _conv(b * b, w[3], cd, 1)
        rep.add("ppm", m, p)
    m, p = _conv(s4, w[3] + len(cfg.ppm_bins) * cd, cd, 3)
    rep.add("ppm", m, p)

    for j in range(4):
        side = sides[3 - j]
        if j:
            scale = SKIP_SCALES[3 - j]
            if scale in cfg.skips:
                m, p = _conv(side * side, w[3 - j], cd, 1)
                rep.add("skips", m, p)
            if j == 1:
                m, p = _conv(side * side, cd, cd, 1)
                rep.add("skips", m, p)
        for _ in range(cfg.depths[j]):
            _block(rep, f"decoder{j + 5}", side, cd, cfg, cfg.k1_schedule[3 - j])

    m, p = _conv(sides[0] ** 2, 4 * cd if cfg.mff else cd, cd, 1)
    rep.add("head", m, p)
    m, p = _conv(image_size * image_size, cd, cfg.num_classes, 3)
    rep.add("head", m, p)
    return rep


def cost_sweep(cfg, image_size: int = 256, lams=(1 / 4, 1 / 8, 1 / 16), schedules=((2, 8, 32, 64), (1, 4, 16, 64))) -> dict:
    """GMACs for each (k1 schedule, lambda) pair."""
    return {
        (tuple(s), lam): count_cost(cfg.with_(k1_schedule=tuple(s), lam=lam), image_size).macs / 1e9
        for s in schedules
        for lam in lams
    }
