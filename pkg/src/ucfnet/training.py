"""SGD-with-momentum training on saliency pairs."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import kvconfig, ops
from .checkpoint import Checkpoint, save_checkpoint
from .layers import BatchNorm2d, RunContext
from .model import Network, NonFiniteError
from .synth import SamplePair
from .tensor import DTYPE, RngStream, ShapeError

log = logging.getLogger(__name__)

DATA_STREAM = 0xDA7A


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 5000
    batch_size: int = 8
    lr: float = 1e-2
    momentum: float = 0.9
    decay_factor: float = 0.5
    decay_interval: int = 1000
    seed: int = 0
    reduction: str = "mean"
    checkpoint_interval: int = 0
    augment: bool = True
    bn_recalibrate: bool = True

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if self.decay_interval < 1:
            raise ValueError("decay interval must be at least 1")
        if self.reduction not in ("sum", "mean"):
            raise ValueError(f"unknown loss reduction {self.reduction!r}")

    def lr_at(self, iteration: int) -> float:
        return self.lr * self.decay_factor ** (iteration // self.decay_interval)

    KEYS = frozenset(
        "iterations batch_size lr momentum decay_factor decay_interval seed reduction "
        "checkpoint_interval augment bn_recalibrate".split()
    )

    def to_dict(self) -> dict[str, str]:
        return {k: kvconfig.fmt(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, values: dict[str, str], base: "TrainConfig | None" = None) -> "TrainConfig":
        merged = asdict(base or cls())
        types = {f.name: f.type for f in fields(cls)}
        for key, raw in values.items():
            if key not in cls.KEYS:
                continue
            kind = types[key]
            if kind in ("bool", bool):
                merged[key] = kvconfig.as_bool(raw)
            elif kind in ("int", int):
                merged[key] = int(raw)
            elif kind in ("float", float):
                merged[key] = float(raw)
            else:
                merged[key] = str(raw)
        return cls(**merged)


def sgd_step(params: dict, grads: dict, velocity: dict, lr: float, momentum: float) -> None:
    """Classical momentum, in place: ``v <- mu * v + g``; ``w <- w - lr * v``."""
    for name, w in params.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ShapeError(f"{name}: gradient {g.shape} vs parameter {w.shape}")
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(w)
        v *= momentum
        v += g
        w -= lr * v


# --- data preparation ------------------------------------------------------

def augment(image, gt) -> list[tuple[np.ndarray, np.ndarray]]:
    """The eight rotations (0, 90, 180, 270 degrees clockwise) x {plain, mirrored}."""
    if image.shape[0] != image.shape[1]:
        raise ValueError(f"augmentation needs square images, got {image.shape[:2]}")
    return [augment_one(image, gt, i) for i in range(8)]


def augment_one(image, gt, index: int):
    rot, mirror = index % 4, index // 4
    img, lab = image, gt
    if mirror:
        img, lab = img[:, ::-1], lab[:, ::-1]
    return np.rot90(img, -rot, axes=(0, 1)).copy(), np.rot90(lab, -rot, axes=(0, 1)).copy()


def preprocess(image, side: int | None, mean=(127.5, 127.5, 127.5), scale: float = 1.0 / 255.0) -> np.ndarray:
    """``(H, W, 3)`` raster -> ``(1, 3, side, side)`` tensor: resize, subtract mean, scale.

    ``side=None`` keeps the native size.
    """
    x = np.asarray(image, dtype=DTYPE).transpose(2, 0, 1)[None]
    if side is not None and x.shape[2:] != (side, side):
        x = ops.interpolate(x, side, side, "bilinear")
    x = x - np.asarray(mean, dtype=DTYPE)[None, :, None, None]
    return x * scale


def preprocess_gt(gt, side: int) -> np.ndarray:
    """Resize a label map and re-binarize it at 0.5; returns ``(side, side)`` in {0, 1}."""
    g = np.asarray(gt, dtype=DTYPE)[None, None]
    if g.shape[2:] != (side, side):
        g = ops.interpolate(g, side, side, "bilinear")
    return (g[0, 0] >= 0.5).astype(DTYPE)


def dataset_mean(pairs) -> tuple[float, float, float]:
    if not pairs:
        raise ValueError("empty dataset")
    total = np.zeros(3)
    count = 0
    for p in pairs:
        total += p.image.reshape(-1, 3).sum(axis=0)
        count += p.image.shape[0] * p.image.shape[1]
    return tuple(float(v) for v in total / count)


def recalibrate_batchnorm(network: Network, x, batch_size: int = 8) -> None:
    """Re-estimate batch-norm running statistics on the deterministic test-time path.

    Running statistics gathered during training see dropout-masked inputs,
    while inference sees the ``p``-scaled activations; re-estimating removes
    that shift.
    """
    bns = [l for l in network.layers if isinstance(l, BatchNorm2d)]
    for bn in bns:
        bn.begin_calibration()
    ctx = RunContext("calibrate")
    for start in range(0, x.shape[0], batch_size):
        network.forward(x[start:start + batch_size], ctx)
    for bn in bns:
        bn.end_calibration()


# --- loop ------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[tuple[int, float, float]]


def write_loss_log(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "lr", "loss"])
        for it, lr, loss in rows:
            w.writerow([it, repr(lr), repr(loss)])


def train(
    network: Network,
    dataset: list[SamplePair],
    cfg: TrainConfig,
    checkpoint_path=None,
    log_path=None,
) -> TrainResult:
    """Run ``cfg.iterations`` SGD steps on random (optionally augmented) mini-batches."""
    if not dataset:
        raise ValueError("training set is empty")
    side = network.config.input_side
    mean = network.config.input_mean
    images = [preprocess(p.image, side, mean)[0] for p in dataset]
    labels = [preprocess_gt(p.gt, side) for p in dataset]
    variants = 8 if cfg.augment else 1
    params = network.named_params()
    velocity: dict[str, np.ndarray] = {}
    rows: list[tuple[int, float, float]] = []
    for it in range(cfg.iterations):
        gen = RngStream(cfg.seed, (DATA_STREAM, it)).generator()
        picks = gen.integers(0, len(dataset) * variants, size=cfg.batch_size)
        xb, yb = [], []
        for pick in picks:
            idx, aug = divmod(int(pick), variants)
            img, lab = images[idx].transpose(1, 2, 0), labels[idx]
            if aug:
                img, lab = augment_one(img, lab, aug)
            xb.append(img.transpose(2, 0, 1))
            yb.append(lab)
        x = np.ascontiguousarray(np.stack(xb))
        y = np.stack(yb)
        lr = cfg.lr_at(it)
        try:
            logits = network.forward(x, RunContext("train", cfg.seed, it), check_finite=True)
        except NonFiniteError as exc:
            raise FloatingPointError(f"iteration {it}: {exc}") from exc
        loss, grad = ops.cross_entropy_loss(logits, y, cfg.reduction)
        pixel_loss = loss / y.size if cfg.reduction == "sum" else loss
        if not math.isfinite(pixel_loss):
            raise FloatingPointError(f"iteration {it}: non-finite loss {pixel_loss}")
        network.backward(grad)
        grads = network.named_grads()
        for name, g in grads.items():
            if not np.isfinite(g).all():
                raise FloatingPointError(f"iteration {it}: non-finite gradient in {name}")
        sgd_step(params, grads, velocity, lr, cfg.momentum)
        rows.append((it, lr, pixel_loss))
        if it % 50 == 0:
            log.info("iteration %d lr %.3g loss %.5f", it, lr, pixel_loss)
        done = it + 1
        if checkpoint_path and cfg.checkpoint_interval and done % cfg.checkpoint_interval == 0:
            save_checkpoint(checkpoint_path, Checkpoint.capture(network, velocity, done, cfg.seed))
    if cfg.bn_recalibrate:
        recalibrate_batchnorm(network, np.stack(images), cfg.batch_size)
    ckpt = Checkpoint.capture(network, velocity, cfg.iterations, cfg.seed)
    if checkpoint_path:
        save_checkpoint(checkpoint_path, ckpt)
    if log_path:
        write_loss_log(rows, log_path)
    return TrainResult(ckpt, rows)
