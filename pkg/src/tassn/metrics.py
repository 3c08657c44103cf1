"""3D keypoint evaluation: end-point error, PCK curves and their normalized area."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_THRESHOLDS = np.arange(0.0, 51.0, 1.0)


@dataclass(frozen=True)
class PckCurve:
    thresholds: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.thresholds, dtype=np.float64)
        v = np.asarray(self.values, dtype=np.float64)
        if t.ndim != 1 or t.shape != v.shape or len(t) < 1:
            raise ValueError("thresholds and values must be equal-length 1-D arrays")
        if np.any(np.diff(t) <= 0):
            raise ValueError("thresholds must be strictly ascending")
        object.__setattr__(self, "thresholds", t)
        object.__setattr__(self, "values", v)


def keypoint_errors(pred, gt) -> np.ndarray:
    """Euclidean distance per keypoint; inputs ``(..., K, 3)``."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[-1] != 3:
        raise ValueError(f"pose shapes {pred.shape} and {gt.shape} do not match (..., K, 3)")
    return np.linalg.norm(pred - gt, axis=-1)


def epe(pred, gt) -> float:
    """Mean end-point error in mm over all keypoints (and frames, if batched)."""
    return float(keypoint_errors(pred, gt).mean())


def pck_curve(preds, gts, thresholds=DEFAULT_THRESHOLDS) -> PckCurve:
    """Fraction of (frame, keypoint) pairs with error <= each threshold."""
    preds = [np.asarray(p) for p in preds] if isinstance(preds, (list, tuple)) else [np.asarray(preds)]
    gts = [np.asarray(g) for g in gts] if isinstance(gts, (list, tuple)) else [np.asarray(gts)]
    if not preds or len(preds) != len(gts):
        raise ValueError("pck_curve needs aligned, non-empty prediction and ground-truth lists")
    errs = np.concatenate([keypoint_errors(p, g).reshape(-1) for p, g in zip(preds, gts)])
    if errs.size == 0:
        raise ValueError("pck_curve got no keypoints")
    t = np.asarray(thresholds, dtype=np.float64)
    values = (errs[None, :] <= t[:, None]).mean(axis=1)
    return PckCurve(t, values)


def auc(curve: PckCurve, lo: float, hi: float) -> float:
    """Trapezoidal area of the curve over ``[lo, hi]`` divided by ``hi - lo``."""
    t, v = curve.thresholds, curve.values
    if not lo < hi or lo < t[0] or hi > t[-1]:
        raise ValueError(f"AUC range [{lo}, {hi}] outside curve range [{t[0]}, {t[-1]}]")
    inner = (t > lo) & (t < hi)
    xs = np.concatenate([[lo], t[inner], [hi]])
    ys = np.interp(xs, t, v)
    return float(np.sum(0.5 * (ys[1:] + ys[:-1]) * np.diff(xs)) / (hi - lo))


def summarize(preds, gts) -> dict[str, float]:
    curve = pck_curve(preds, gts)
    p = np.concatenate([np.asarray(x).reshape(-1, 3) for x in (preds if isinstance(preds, list) else [preds])])
    g = np.concatenate([np.asarray(x).reshape(-1, 3) for x in (gts if isinstance(gts, list) else [gts])])
    return {"epe_mm": epe(p, g), "auc_0_50": auc(curve, 0.0, 50.0), "auc_20_50": auc(curve, 20.0, 50.0)}


def write_pck_csv(path, curve: PckCurve) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold_mm", "pck"])
        for t, v in zip(curve.thresholds, curve.values):
            w.writerow([f"{t:g}", f"{v:.6f}"])


def write_summary_csv(path, summary: dict[str, float]) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k in ("epe_mm", "auc_0_50", "auc_20_50"):
            w.writerow([k, f"{summary[k]:.6f}"])
