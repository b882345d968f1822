"""Saliency evaluation: PR curves, adaptive-threshold F-measure and MAE.

Conventions: a pixel is predicted foreground iff ``S >= T``; an empty
prediction has precision 1 when the ground truth is empty too and 0
otherwise; an empty ground truth has recall 1 and is excluded from the
pooled PR curve.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .netpbm import read_image

BETA2 = 0.3
THRESHOLDS = np.arange(256)


def _check(S, G):
    S = np.asarray(S, dtype=np.float64)
    G = np.asarray(G)
    if S.shape != G.shape:
        raise ValueError(f"saliency {S.shape} and ground truth {G.shape} differ in shape")
    return S, G.astype(bool)


def precision_recall(S, G, threshold: float) -> tuple[float, float]:
    S, G = _check(S, G)
    pred = S >= threshold
    tp = np.count_nonzero(pred & G)
    fp = np.count_nonzero(pred & ~G)
    fn = np.count_nonzero(~pred & G)
    if tp + fp == 0:
        precision = 1.0 if not G.any() else 0.0
    else:
        precision = tp / (tp + fp)
    recall = 1.0 if tp + fn == 0 else tp / (tp + fn)
    return float(precision), float(recall)


def pr_curve(S, G) -> np.ndarray:
    """``(256, 2)`` array of (precision, recall) at thresholds ``t / 255``."""
    S, G = _check(S, G)
    levels = THRESHOLDS / 255.0
    fg = np.sort(S[G])
    bg = np.sort(S[~G])
    # pixels with S >= level, counted by binary search on the sorted values
    tp = fg.size - np.searchsorted(fg, levels, side="left")
    fp = bg.size - np.searchsorted(bg, levels, side="left")
    positives = fg.size
    predicted = tp + fp
    out = np.empty((256, 2))
    empty_precision = 1.0 if positives == 0 else 0.0
    out[:, 0] = np.where(predicted > 0, tp / np.maximum(predicted, 1), empty_precision)
    out[:, 1] = tp / positives if positives else 1.0
    return out


def adaptive_threshold(S) -> float:
    """Twice the mean saliency, clamped to [0, 1]."""
    return float(min(max(2.0 * float(np.mean(S)), 0.0), 1.0))


def f_measure(precision: float, recall: float, beta2: float = BETA2) -> float:
    denom = beta2 * precision + recall
    if denom == 0:
        return 0.0
    return (1.0 + beta2) * precision * recall / denom


def mae(S, G) -> float:
    S = np.asarray(S, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    if S.shape != G.shape:
        raise ValueError(f"saliency {S.shape} and ground truth {G.shape} differ in shape")
    return float(np.abs(S - G).mean())


@dataclass
class ImageScore:
    name: str
    threshold: float
    precision: float
    recall: float
    fbeta: float
    mae: float
    empty_gt: bool = False


@dataclass
class EvalReport:
    images: list[ImageScore]
    pr: np.ndarray  # (256, 2) mean precision / recall over non-empty ground truths
    beta2: float = BETA2
    excluded: list[str] = field(default_factory=list)

    @property
    def mean_fbeta(self) -> float:
        return float(np.mean([s.fbeta for s in self.images])) if self.images else 0.0

    @property
    def mean_mae(self) -> float:
        return float(np.mean([s.mae for s in self.images])) if self.images else 0.0


def score_image(name: str, S, G, beta2: float = BETA2) -> ImageScore:
    T = adaptive_threshold(S)
    p, r = precision_recall(S, G, T)
    return ImageScore(name, T, p, r, f_measure(p, r, beta2), mae(S, G), not np.asarray(G).any())


def evaluate_maps(named_maps, beta2: float = BETA2) -> EvalReport:
    """``named_maps`` yields ``(name, S, G)`` with ``S`` in [0, 1] and binary ``G``."""
    scores, curves, excluded = [], [], []
    for name, S, G in named_maps:
        score = score_image(name, S, G, beta2)
        scores.append(score)
        if score.empty_gt:
            excluded.append(name)
        else:
            curves.append(pr_curve(S, G))
    pr = np.mean(curves, axis=0) if curves else np.full((256, 2), np.nan)
    return EvalReport(scores, pr, beta2, excluded)


def _stems(root: Path) -> dict[str, Path]:
    return {p.stem: p for p in sorted(root.glob("*.pgm"))}


def evaluate_dir(pred_dir, gt_dir, beta2: float = BETA2) -> EvalReport:
    """Evaluate ``pred_dir/*.pgm`` saliency maps against same-named ``gt_dir/*.pgm``."""
    preds, gts = _stems(Path(pred_dir)), _stems(Path(gt_dir))
    for name in sorted(set(preds) | set(gts)):
        if name not in preds:
            raise FileNotFoundError(f"missing prediction for {name} in {pred_dir}")
        if name not in gts:
            raise FileNotFoundError(f"missing ground truth for {name} in {gt_dir}")

    def items():
        for name in sorted(preds):
            S = read_image(preds[name]).astype(np.float64) / 255.0
            G = read_image(gts[name]) >= 128
            yield name, S, G

    return evaluate_maps(items(), beta2)


def write_report(report: EvalReport, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "per_image.csv", out / "summary.csv", out / "pr_curve.csv"]
    with open(paths[0], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["name", "T", "precision", "recall", "fbeta", "mae"])
        for s in report.images:
            w.writerow([s.name, repr(s.threshold), repr(s.precision), repr(s.recall), repr(s.fbeta), repr(s.mae)])
    with open(paths[1], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mean_fbeta", "mean_mae", "n_images"])
        w.writerow([repr(report.mean_fbeta), repr(report.mean_mae), len(report.images)])
    with open(paths[2], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "precision", "recall"])
        for t, (p, r) in zip(THRESHOLDS, report.pr):
            w.writerow([int(t), repr(float(p)), repr(float(r))])
    return paths
