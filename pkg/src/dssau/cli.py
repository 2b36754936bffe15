"""Command-line entry point: ``dssau <command> [options]``."""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from . import io
from .errors import BiometryError, ConfigError, DataError, FitError, FormatError, UndefinedMetricError
from .io import RunConfig

REFERENCE_PARAMS_M = 29.25
REFERENCE_GFLOPS = 7.15
PARAM_TOL, FLOP_TOL = 0.20, 0.15


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _out(args, default: str) -> Path:
    p = Path(args.out or default)
    p.mkdir(parents=True, exist_ok=True)
    return p


# -- commands -----------------------------------------------------------------------------
def cmd_gen_synth(args) -> int:
    from .synth import generate

    out = _out(args, "synth")
    stems = generate(out, args.n, args.size, args.seed or 0)
    print(f"wrote {len(stems)} cases to {out}")
    return 0


def cmd_train(args) -> int:
    from .train import load_dataset, single_threaded, train

    cfg = _config(args)
    out = _out(args, cfg.out_dir)
    data = load_dataset(cfg.train_dir, cfg.image_size)
    val = load_dataset(cfg.val_dir, cfg.image_size) if cfg.val_dir else None
    (out / "config.txt").write_text(cfg.dump())
    with open(out / "log.txt", "w") as logf, single_threaded(args.deterministic):

        def log(line: str) -> None:
            logf.write(line + "\n")
            if "val_dsc" in line:
                print(line, flush=True)

        result = train(cfg, data, val, log=log)
    io.save_weights(out / "weights.dssw", result.model.state_dict())
    print(f"trained {cfg.steps} steps in {result.seconds:.1f}s; weights at {out / 'weights.dssw'}")
    return 0


def _load_model(weights: Path, cfg: RunConfig):
    from .model import DSSAUNet

    model = DSSAUNet(cfg.model_config(), cfg.image_size)
    model.load_state_dict(io.load_weights(weights))
    return model


def cmd_infer(args) -> int:
    from .train import predict, single_threaded

    weights = Path(args.weights)
    if not args.config and (weights.parent / "config.txt").exists():
        args.config = str(weights.parent / "config.txt")
    cfg = _config(args)
    model = _load_model(weights, cfg)
    out = _out(args, "predictions")
    paths = [Path(p) for p in args.images]
    images = np.stack([io.read_image(p, cfg.image_size) for p in paths])
    with single_threaded(args.deterministic):
        masks = predict(model, images, cfg.batch)
    for p, m in zip(paths, masks):
        io.write_mask(out / f"{p.stem}.png", m)
    print(f"wrote {len(paths)} masks to {out}")
    return 0


def _fmt(v: float, pct: bool = False) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "n/a"
    return f"{100 * v:.2f}" if pct else f"{v:.3f}"


def eval_report(pred_dir, gt_dir, spacing: float = 1.0) -> str:
    """Per-case and mean metrics, columns AoP, HSD, DSC, HD, ASD (errors vs ground truth)."""
    from .biometry import biometry_error, measure
    from .metrics import FOREGROUND, LabelMask, asd, dsc, hausdorff, pooled_dsc
    from .train import pair_files

    pairs = pair_files(Path(pred_dir), Path(gt_dir))
    rows = []
    resolution = None
    for stem, pp, gp in pairs:
        pred = LabelMask(io.read_mask(pp), spacing)
        gt = LabelMask(io.read_mask(gp), spacing)
        if pred.labels.shape != gt.labels.shape:
            raise DataError(f"{stem}: prediction {pred.labels.shape} vs ground truth {gt.labels.shape}")
        resolution = gt.labels.shape
        per_dsc = [dsc(pred, gt, c) for c in FOREGROUND]
        hd, sd = [], []
        for c in FOREGROUND:
            try:
                hd.append(hausdorff(pred, gt, c))
                sd.append(asd(pred, gt, c))
            except UndefinedMetricError:
                hd.append(math.nan)
                sd.append(math.nan)
        try:
            d_aop, d_hsd = biometry_error(measure(pred), measure(gt))
        except (BiometryError, FitError):
            d_aop = d_hsd = math.nan
        rows.append((stem, d_aop, d_hsd, float(np.mean(per_dsc)), float(np.mean(hd)), float(np.mean(sd)), per_dsc, pooled_dsc(pred, gt)))

    head = f"# resolution {resolution[1]}x{resolution[0]}  spacing {spacing} mm/px  cases {len(rows)}"
    cols = f"{'case':<16}{'AoP(deg)':>10}{'HSD(mm)':>10}{'DSC(%)':>9}{'HD(mm)':>10}{'ASD(mm)':>10}{'DSC_PS':>9}{'DSC_FH':>9}{'DSC_pool':>10}"
    lines = [head, cols]
    for stem, a, h, d, hd, sd, pc, pool in rows:
        lines.append(
            f"{stem:<16}{_fmt(a):>10}{_fmt(h):>10}{_fmt(d, True):>9}{_fmt(hd):>10}{_fmt(sd):>10}"
            f"{_fmt(pc[0], True):>9}{_fmt(pc[1], True):>9}{_fmt(pool, True):>10}"
        )

    def mean(i, j=None):
        vals = [r[i] if j is None else r[i][j] for r in rows]
        vals = [v for v in vals if not math.isnan(v)]
        return float(np.mean(vals)) if vals else math.nan

    lines.append(
        f"{'mean':<16}{_fmt(mean(1)):>10}{_fmt(mean(2)):>10}{_fmt(mean(3), True):>9}{_fmt(mean(4)):>10}{_fmt(mean(5)):>10}"
        f"{_fmt(mean(6, 0), True):>9}{_fmt(mean(6, 1), True):>9}{_fmt(mean(7), True):>10}"
    )
    return "\n".join(lines)


def cmd_eval(args) -> int:
    try:
        report = eval_report(args.pred, args.gt, args.spacing)
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    print(report)
    if args.out:
        Path(args.out).write_text(report + "\n")
    return 0


def cmd_biometry(args) -> int:
    from .biometry import measure
    from .metrics import LabelMask

    for p in args.masks:
        try:
            r = measure(LabelMask(io.read_mask(p), args.spacing))
        except (BiometryError, FitError) as e:
            print(f"{Path(p).name}: {e}")
            continue
        print(f"{Path(p).name}: AoP {r.aop_deg:.2f} deg  HSD {r.hsd:.3f} mm  inferior ({r.ps_inferior[0]:.1f}, {r.ps_inferior[1]:.1f})")
    return 0


def cmd_flops(args) -> int:
    from .oracle import cost_sweep, count_cost

    cfg = _config(args)
    mcfg = cfg.model_config()
    rep = count_cost(mcfg, cfg.image_size)
    print(rep.format())
    if cfg.image_size == 256:
        dp = rep.params / 1e6 / REFERENCE_PARAMS_M - 1
        df = rep.macs / 1e9 / REFERENCE_GFLOPS - 1
        ok = abs(dp) <= PARAM_TOL and abs(df) <= FLOP_TOL
        print(f"reference: {REFERENCE_PARAMS_M} M params ({dp:+.1%}, tol {PARAM_TOL:.0%}), "
              f"{REFERENCE_GFLOPS} G multiply-adds ({df:+.1%}, tol {FLOP_TOL:.0%}) -> {'PASS' if ok else 'FAIL'}")
    if args.sweep:
        sweep = cost_sweep(mcfg, cfg.image_size)
        scheds = sorted({s for s, _ in sweep}, reverse=True)
        print(f"{'lambda':<8}" + "".join(f"{'k1=' + '/'.join(map(str, s)):>18}" for s in scheds))
        for lam in (1 / 4, 1 / 8, 1 / 16):
            print(f"1/{round(1 / lam):<6}" + "".join(f"{sweep[(s, lam)]:>18.4f}" for s in scheds))
    return 0


def gradcheck_tiny(seed: int = 0, coords: int = 10):
    """Finite-difference check of a tiny network at 64x64 in float64."""
    from .autodiff import Tensor
    from .model import DSSAUNet, ModelConfig
    from .oracle import grad_check

    cfg = ModelConfig(channels=24, depths=(1, 1, 1, 1), decoder_width=16, head_dim=8, ppm_bins=(1, 2), seed=seed)
    net = DSSAUNet(cfg, 64, np.random.default_rng(seed)).astype(np.float64)
    rng = np.random.default_rng(seed + 1)
    x = Tensor(rng.normal(size=(1, 64, 64, 3)))
    r = Tensor(rng.normal(size=(1, 64, 64, 3)))
    return grad_check(lambda: (net(x) * r).sum(), dict(net.named_parameters()), coords_per_param=coords, seed=seed)


def cmd_gradcheck(args) -> int:
    rep = gradcheck_tiny(args.seed or 0, args.coords)
    ok = rep.passed(args.tol)
    print(f"{'PASS' if ok else 'FAIL'}: worst relative error {rep.max_rel_error:.3e} over {rep.coordinates} coordinates (tol {args.tol:g})")
    return 0 if ok else 1


# -- parser ---------------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration file (key = value)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--deterministic", action="store_true", help="single-threaded numerics")
    common.add_argument("--spacing", type=float, default=1.0, help="millimetres per pixel")
    common.add_argument("--out", help="output directory or file")

    p = argparse.ArgumentParser(prog="dssau", description="Sparse-attention U-Net for two-structure ultrasound segmentation.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", parents=[common], help="train from a run configuration")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("infer", parents=[common], help="predict label masks")
    s.add_argument("--weights", required=True)
    s.add_argument("images", nargs="+")
    s.set_defaults(fn=cmd_infer)

    s = sub.add_parser("eval", parents=[common], help="compare predicted and reference masks")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("biometry", parents=[common], help="angle of progression and head distance from masks")
    s.add_argument("masks", nargs="+")
    s.set_defaults(fn=cmd_biometry)

    s = sub.add_parser("gen-synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--n", type=int, default=10)
    s.add_argument("--size", type=int, default=256)
    s.set_defaults(fn=cmd_gen_synth)

    s = sub.add_parser("flops", parents=[common], help="parameter and multiply-add counts")
    s.add_argument("--sweep", action="store_true", help="lambda x k1 schedule table")
    s.set_defaults(fn=cmd_flops)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of a tiny network")
    s.add_argument("--coords", type=int, default=10)
    s.add_argument("--tol", type=float, default=1e-3)
    s.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (FormatError, DataError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
