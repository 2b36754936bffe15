"""Data loading, augmentation, the training loop and batched inference."""

from __future__ import annotations

import contextlib
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy import ndimage

from .autodiff import Adam, Tensor, no_grad
from .errors import DataError, TrainingDivergedError
from .io import RunConfig, read_image, read_mask
from .losses import hybrid_loss_from_logits
from .metrics import FOREGROUND, dsc
from .model import DSSAUNet

MEAN, STD = 0.5, 0.25
FLIP_P = 0.5
MAX_ROTATION = 15.0
CONTRAST = (0.8, 1.25)


@contextlib.contextmanager
def single_threaded(enabled: bool = True):
    """Pin BLAS/OpenMP pools to one thread so float reductions are reproducible."""
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


# -- data ---------------------------------------------------------------------------
@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N, H, W) int64
    names: list = field(default_factory=list)

    def __post_init__(self):
        if self.images.shape != self.labels.shape:
            raise DataError(f"images {self.images.shape} and masks {self.labels.shape} differ")
        if self.images.shape[1] % 32 or self.images.shape[2] % 32:
            raise DataError(f"image extent {self.images.shape[1:]} not divisible by 32")
        if not self.names:
            self.names = [f"case_{i:04d}" for i in range(len(self.images))]

    def __len__(self) -> int:
        return len(self.images)


def pair_files(image_dir: Path, mask_dir: Path) -> list:
    imgs = {p.stem: p for p in sorted(image_dir.glob("*.png")) + sorted(image_dir.glob("*.pgm"))}
    masks = {p.stem: p for p in sorted(mask_dir.glob("*.png")) + sorted(mask_dir.glob("*.pgm"))}
    orphans = sorted(imgs.keys() ^ masks.keys())
    if orphans:
        raise DataError(f"unpaired files: {', '.join(orphans)}")
    if not imgs:
        raise DataError(f"no images found in {image_dir}")
    return [(s, imgs[s], masks[s]) for s in sorted(imgs)]


def load_dataset(root, size: Optional[int] = None) -> Dataset:
    root = Path(root)
    triples = pair_files(root / "images", root / "masks")
    images = np.stack([read_image(p, size) for _, p, _ in triples])
    labels = np.stack([read_mask(m, size) for _, _, m in triples])
    return Dataset(images, labels, [s for s, _, _ in triples])


def to_input(images: np.ndarray) -> np.ndarray:
    """Grayscale ``(N, H, W)`` -> normalized three-channel ``(N, H, W, 3)`` float32."""
    x = (np.asarray(images, np.float32) - MEAN) / STD
    return np.repeat(x[..., None], 3, axis=-1)


def augment(img: np.ndarray, lab: np.ndarray, rng: np.random.Generator) -> tuple:
    """Random flips, rotation and contrast gain applied jointly to image and mask."""
    if rng.random() < FLIP_P:
        img, lab = img[:, ::-1], lab[:, ::-1]
    if rng.random() < FLIP_P:
        img, lab = img[::-1], lab[::-1]
    angle = rng.uniform(-MAX_ROTATION, MAX_ROTATION)
    img = ndimage.rotate(img, angle, reshape=False, order=1, mode="nearest")
    lab = ndimage.rotate(lab, angle, reshape=False, order=0, mode="constant", cval=0)
    gain = rng.uniform(*CONTRAST)
    m = img.mean()
    img = np.clip((img - m) * gain + m, 0.0, 1.0)
    return np.ascontiguousarray(img, np.float32), np.ascontiguousarray(lab)


# -- loop -----------------------------------------------------------------------------
@dataclass
class TrainResult:
    model: DSSAUNet
    losses: list
    val_dsc: list  # (step, mean foreground DSC)
    seconds: float


def train(
    cfg: RunConfig,
    data: Dataset,
    val: Optional[Dataset] = None,
    log: Optional[Callable[[str], None]] = None,
    model: Optional[DSSAUNet] = None,
) -> TrainResult:
    t0 = time.perf_counter()
    size = data.images.shape[1]
    model = model or DSSAUNet(cfg.model_config(), size, np.random.default_rng(cfg.seed))
    opt = Adam(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed + 1)
    losses, val_scores = [], []
    for step in range(1, cfg.steps + 1):
        idx = rng.choice(len(data), size=cfg.batch, replace=len(data) < cfg.batch)
        pairs = [(data.images[i], data.labels[i]) for i in idx]
        if cfg.augment:
            pairs = [augment(im, lb, rng) for im, lb in pairs]
        x = Tensor(to_input(np.stack([p[0] for p in pairs])))
        y = np.stack([p[1] for p in pairs])

        opt.zero_grad()
        loss = hybrid_loss_from_logits(model(x), y)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDivergedError(step, value)
        loss.backward()
        opt.step()
        losses.append(value)
        if log:
            log(f"step {step} loss {value:.6f}")
        if val is not None and (step % cfg.eval_every == 0 or step == cfg.steps):
            score = mean_foreground_dsc(predict(model, val.images, cfg.batch), val.labels)
            val_scores.append((step, score))
            if log:
                log(f"step {step} val_dsc {score:.4f}")
    return TrainResult(model, losses, val_scores, time.perf_counter() - t0)


def predict(model: DSSAUNet, images: np.ndarray, batch: int = 4) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(images), batch):
            logits = model(Tensor(to_input(images[i : i + batch])))
            out.append(np.argmax(logits.data, axis=-1))
    return np.concatenate(out)


def mean_foreground_dsc(pred: np.ndarray, gt: np.ndarray) -> float:
    """Per-case DSC of each foreground class, averaged over classes and cases."""
    return float(np.mean([[dsc(p, g, c) for c in FOREGROUND] for p, g in zip(pred, gt)]))
