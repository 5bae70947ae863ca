"""Tolerance-based precision/recall/F1, PR curves, reports and overlays.

A predicted crack pixel counts as correct when a ground-truth crack pixel lies
within Euclidean distance ``tol``; a ground-truth pixel counts as found when a
predicted pixel lies within ``tol``. Both counts come from binary dilation with
the exact disk {(dx, dy): dx^2 + dy^2 <= tol^2}.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from . import __version__

PR_THRESHOLDS = tuple(round(i / 100, 2) for i in range(1, 100))


def binarize(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """``prob >= threshold`` (the boundary counts as crack)."""
    return np.asarray(prob) >= threshold


def disk(tol: float) -> np.ndarray:
    r = int(math.floor(tol))
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return (yy * yy + xx * xx) <= tol * tol


def dilate(mask: np.ndarray, tol: float) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if tol < 1 or not mask.any():
        return mask.copy()
    return ndimage.binary_dilation(mask, structure=disk(tol))


@dataclass
class ToleranceConfusion:
    matched_pred: int
    pred_total: int
    matched_gt: int
    gt_total: int
    tol: float = 2

    def __add__(self, other: "ToleranceConfusion") -> "ToleranceConfusion":
        return ToleranceConfusion(
            self.matched_pred + other.matched_pred,
            self.pred_total + other.pred_total,
            self.matched_gt + other.matched_gt,
            self.gt_total + other.gt_total,
            self.tol,
        )


def confusion_with_tolerance(pred: np.ndarray, gt: np.ndarray, tol: float = 2) -> ToleranceConfusion:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground-truth shape {gt.shape}")
    return ToleranceConfusion(
        matched_pred=int((pred & dilate(gt, tol)).sum()),
        pred_total=int(pred.sum()),
        matched_gt=int((gt & dilate(pred, tol)).sum()),
        gt_total=int(gt.sum()),
        tol=tol,
    )


def pr_re_f1(c: ToleranceConfusion) -> tuple[float, float, float]:
    if c.pred_total == 0 and c.gt_total == 0:
        return 1.0, 1.0, 1.0
    pr = c.matched_pred / c.pred_total if c.pred_total else 0.0
    re = c.matched_gt / c.gt_total if c.gt_total else 0.0
    f1 = 2 * pr * re / (pr + re) if pr + re > 0 else 0.0
    return pr, re, f1


def tolerance_curve(prob: np.ndarray, gt: np.ndarray, thresholds: Sequence[float], tol: float = 2) -> list[ToleranceConfusion]:
    """Confusions at many thresholds from a single pair of dilations.

    A GT pixel is matched at threshold t iff the largest probability inside its
    tolerance disk is >= t, so one grey dilation covers every threshold.
    """
    prob = np.asarray(prob, dtype=np.float64)
    gt = np.asarray(gt, dtype=bool)
    near_gt = dilate(gt, tol)
    if tol >= 1:
        local_max = ndimage.maximum_filter(prob, footprint=disk(tol), mode="constant", cval=-np.inf)
    else:
        local_max = prob
    gt_max = local_max[gt]
    p_all = prob.ravel()
    p_near = prob[near_gt]
    n_gt = int(gt.sum())
    return [
        ToleranceConfusion(int((p_near >= t).sum()), int((p_all >= t).sum()), int((gt_max >= t).sum()), n_gt, tol)
        for t in thresholds
    ]


@dataclass
class ImageResult:
    name: str
    pr: float
    re: float
    f1: float
    seconds: float = 0.0


@dataclass
class MetricsReport:
    threshold: float
    tolerance: float
    per_image: list = field(default_factory=list)
    macro: dict = field(default_factory=dict)
    micro: dict = field(default_factory=dict)
    pr_curve: list = field(default_factory=list)
    params: Optional[int] = None
    flops: Optional[int] = None
    total_seconds: float = 0.0

    def to_dict(self) -> dict:
        return {
            "version": __version__,
            "threshold": self.threshold,
            "tolerance": self.tolerance,
            "per_image": [vars(r).copy() for r in self.per_image],
            "macro": self.macro,
            "micro": self.micro,
            "pr_curve": self.pr_curve,
            "params": self.params,
            "flops": self.flops,
            "mean_forward_seconds": _mean([r.seconds for r in self.per_image]),
            "total_seconds": self.total_seconds,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def _mean(xs) -> float:
    xs = list(xs)
    return float(sum(xs) / len(xs)) if xs else 0.0


def _triple(pr: float, re: float, f1: float) -> dict:
    return {"pr": pr, "re": re, "f1": f1}


def summarize(names: Sequence[str], probs: Sequence[np.ndarray], gts: Sequence[np.ndarray],
              threshold: float = 0.5, tol: float = 2, seconds: Optional[Sequence[float]] = None) -> MetricsReport:
    """Per-image, macro and micro metrics plus the macro PR curve."""
    if not names:
        raise ValueError("cannot evaluate an empty split")
    seconds = seconds or [0.0] * len(names)
    thresholds = list(PR_THRESHOLDS)
    curve_pr = np.zeros(len(thresholds))
    curve_re = np.zeros(len(thresholds))
    report = MetricsReport(threshold=threshold, tolerance=tol)
    pooled = ToleranceConfusion(0, 0, 0, 0, tol)
    for name, prob, gt, sec in zip(names, probs, gts, seconds):
        c = confusion_with_tolerance(binarize(prob, threshold), gt, tol)
        pooled = pooled + c
        report.per_image.append(ImageResult(name, *pr_re_f1(c), seconds=sec))
        for k, ck in enumerate(tolerance_curve(prob, gt, thresholds, tol)):
            pr, re, _ = pr_re_f1(ck)
            curve_pr[k] += pr
            curve_re[k] += re
    n = len(report.per_image)
    report.macro = _triple(*(_mean(getattr(r, k) for r in report.per_image) for k in ("pr", "re", "f1")))
    report.micro = _triple(*pr_re_f1(pooled))
    report.pr_curve = [{"t": t, "pr": float(p / n), "re": float(r / n)} for t, p, r in zip(thresholds, curve_pr, curve_re)]
    return report


def render_overlay(pred: np.ndarray, gt: np.ndarray, tol: float = 2, background: Optional[np.ndarray] = None) -> np.ndarray:
    """H x W x 3 uint8: green matched prediction, red unmatched prediction, blue missed GT.

    ``background`` (H x W x 3 uint8 or 3 x H x W float in [0, 1]) fills the
    remaining pixels; black otherwise.
    """
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground-truth shape {gt.shape}")
    if background is None:
        out = np.zeros((*pred.shape, 3), dtype=np.uint8)
    else:
        bg = np.asarray(background)
        if bg.ndim == 3 and bg.shape[0] == 3 and bg.shape[-1] != 3:
            bg = bg.transpose(1, 2, 0)
        if bg.dtype != np.uint8:
            bg = np.clip(np.round(bg * 255), 0, 255).astype(np.uint8)
        out = bg.copy()
    hit = pred & dilate(gt, tol)
    missed = gt & ~dilate(pred, tol)
    out[missed] = (0, 0, 255)
    out[pred & ~hit] = (255, 0, 0)
    out[hit] = (0, 255, 0)
    return out


def evaluate_set(source, samples, threshold: float = 0.5, tol: float = 2) -> MetricsReport:
    """Evaluate a model, or a directory of predicted masks, on loaded samples.

    A directory must hold ``<image stem>.png`` per sample; pixel values are
    read as probabilities (value / 255), so 0/255 masks work directly.
    """
    from pathlib import Path

    from .data import DataError
    from .inference import timed_predict
    from .model import Model, count_flops, count_params

    if not samples:
        raise ValueError("cannot evaluate an empty split")
    t_start = time.perf_counter()
    probs, seconds = [], []
    if isinstance(source, Model):
        source.eval()
        for s in samples:
            prob, sec = timed_predict(source, s.image)
            probs.append(prob)
            seconds.append(sec)
    else:
        from PIL import Image

        root = Path(source)
        for s in samples:
            f = root / f"{s.name}.png"
            if not f.is_file():
                raise DataError(f"missing prediction for {s.name}: {f}")
            t0 = time.perf_counter()
            with Image.open(f) as im:
                prob = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
            if prob.shape != s.mask.shape:
                raise DataError(f"{f}: size {prob.shape} != ground truth {s.mask.shape}")
            probs.append(prob)
            seconds.append(time.perf_counter() - t0)
    report = summarize([s.name for s in samples], probs, [s.mask > 0.5 for s in samples], threshold, tol, seconds)
    if isinstance(source, Model):
        report.params = count_params(source)
        h, w = samples[0].mask.shape
        report.flops = count_flops(source, (1, 3, h + (-h % 16), w + (-w % 16)))
    report.total_seconds = time.perf_counter() - t_start
    return report
