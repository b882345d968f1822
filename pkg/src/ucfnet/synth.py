"""Synthetic single-object saliency data and its on-disk layout.

Each sample is one hard-edged ellipse, rectangle or triangle of a solid
colour over a noisy, differently coloured background.  Sample ``i`` depends
only on ``(seed, i)`` and the spec.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .netpbm import read_image, write_image
from .tensor import RngStream

MIN_SIDE = 16
MAX_TRIES = 200


class SynthError(RuntimeError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    count: int = 100
    side: int = 64
    kinds: tuple[str, ...] = ("ellipse", "rectangle", "triangle")
    min_fraction: float = 0.05
    max_fraction: float = 0.40
    contrast: float = 80.0
    noise: float = 20.0
    seed: int = 0

    def __post_init__(self):
        if self.side < MIN_SIDE:
            raise ValueError(f"image side must be at least {MIN_SIDE}, got {self.side}")
        if self.count < 0:
            raise ValueError("count must be non-negative")
        unknown = set(self.kinds) - {"ellipse", "rectangle", "triangle"}
        if unknown or not self.kinds:
            raise ValueError(f"unknown shape kinds {sorted(unknown)}")


@dataclass(frozen=True)
class SamplePair:
    image: np.ndarray  # (H, W, 3) uint8
    gt: np.ndarray  # (H, W) uint8 in {0, 1}


def _grid(side):
    c = np.arange(side) + 0.5
    return np.meshgrid(c, c, indexing="ij")


def _ellipse(gen, side):
    yy, xx = _grid(side)
    cy, cx = gen.uniform(0.25, 0.75, 2) * side
    ry, rx = gen.uniform(0.12, 0.4, 2) * side
    theta = gen.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _rectangle(gen, side):
    yy, xx = _grid(side)
    h, w = gen.uniform(0.2, 0.65, 2) * side
    top, left = gen.uniform(0, side - h), gen.uniform(0, side - w)
    return (yy >= top) & (yy < top + h) & (xx >= left) & (xx < left + w)


def _triangle(gen, side):
    yy, xx = _grid(side)
    pts = gen.uniform(0.05, 0.95, (3, 2)) * side

    def edge(a, b):
        return (b[1] - a[1]) * (yy - a[0]) - (b[0] - a[0]) * (xx - a[1])

    e = [edge(pts[0], pts[1]), edge(pts[1], pts[2]), edge(pts[2], pts[0])]
    return ((e[0] >= 0) & (e[1] >= 0) & (e[2] >= 0)) | ((e[0] <= 0) & (e[1] <= 0) & (e[2] <= 0))


_SHAPES = {"ellipse": _ellipse, "rectangle": _rectangle, "triangle": _triangle}


def generate_one(spec: SynthSpec, index: int) -> SamplePair:
    gen = RngStream(spec.seed, (0x5EED, index)).generator()
    side = spec.side
    for _ in range(MAX_TRIES):
        kind = spec.kinds[gen.integers(len(spec.kinds))]
        mask = _SHAPES[kind](gen, side)
        frac = mask.mean()
        if spec.min_fraction <= frac <= spec.max_fraction:
            break
    else:
        raise SynthError(f"sample {index}: no shape within the area bounds after {MAX_TRIES} tries")
    for _ in range(MAX_TRIES):
        bg_color = gen.uniform(0, 255, 3)
        fg_color = gen.uniform(0, 255, 3)
        noise = gen.uniform(-spec.noise, spec.noise, (side, side, 3))
        img = np.clip(np.where(mask[..., None], fg_color, bg_color + noise), 0, 255)
        img = np.rint(img).astype(np.uint8)
        fg_mean = img[mask].mean(axis=0)
        bg_mean = img[~mask].mean(axis=0)
        if np.linalg.norm(fg_mean - bg_mean) >= spec.contrast:
            return SamplePair(img, mask.astype(np.uint8))
    raise SynthError(f"sample {index}: contrast floor {spec.contrast} not met after {MAX_TRIES} tries")


def generate(spec: SynthSpec) -> list[SamplePair]:
    return [generate_one(spec, i) for i in range(spec.count)]


def contrast_of(pair: SamplePair) -> float:
    m = pair.gt.astype(bool)
    return float(np.linalg.norm(pair.image[m].mean(axis=0) - pair.image[~m].mean(axis=0)))


# --- directory layout ------------------------------------------------------

def write_dataset(pairs, out_dir) -> Path:
    """Write ``images/NNNN.ppm``, ``gt/NNNN.pgm`` (0/255) and ``manifest.csv``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "gt").mkdir(parents=True, exist_ok=True)
    rows = []
    for i, pair in enumerate(pairs):
        name = f"{i:04d}"
        write_image(out / "images" / f"{name}.ppm", pair.image)
        write_image(out / "gt" / f"{name}.pgm", pair.gt.astype(np.uint8) * 255)
        rows.append((name, f"images/{name}.ppm", f"gt/{name}.pgm"))
    with open(out / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["name", "image", "gt"])
        writer.writerows(rows)
    return out


def read_dataset(root) -> list[SamplePair]:
    root = Path(root)
    manifest = root / "manifest.csv"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.csv in {root}")
    pairs = []
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            image = read_image(root / row["image"])
            gt = read_image(root / row["gt"])
            if image.shape[:2] != gt.shape:
                raise ValueError(f"{row['name']}: image {image.shape[:2]} and gt {gt.shape} differ")
            pairs.append(SamplePair(image, (gt >= 128).astype(np.uint8)))
    return pairs
