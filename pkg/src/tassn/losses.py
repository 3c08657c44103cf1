"""Training objectives: heatmap, silhouette, temporal consistency and their weighted total."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from . import autodiff as ad


@dataclass(frozen=True)
class LossWeights:
    lambda_s: float = 0.1
    lambda_h: float = 1.0
    lambda_p: float = 10.0
    lambda_m: float = 10.0

    def __post_init__(self):
        for name in ("lambda_s", "lambda_h", "lambda_p", "lambda_m"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ad.ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def heatmap_loss(h, h_gt) -> ad.Tensor:
    """``(1/K) sum_k ||H^k - H_gt^k||_F^2`` for ``(K, H, W)`` maps.

    Leading batch axes are averaged, so ``(B, K, H, W)`` gives the batch mean.
    """
    h, h_gt = ad.as_tensor(h), ad.as_tensor(h_gt)
    _same_shape("heatmap_loss", h, h_gt)
    if h.ndim < 3:
        raise ad.ShapeError(f"heatmap_loss expects (..., K, H, W), got {h.shape}")
    per_map = ad.sum(ad.square(h - h_gt), axis=(-2, -1))
    return ad.mean(per_map)


def silhouette_loss(s, s_gt) -> ad.Tensor:
    """``||s - s_gt||_F^2`` per ``(H, W)`` map, averaged over leading axes."""
    s, s_gt = ad.as_tensor(s), ad.as_tensor(s_gt)
    _same_shape("silhouette_loss", s, s_gt)
    if s.ndim < 2:
        raise ad.ShapeError(f"silhouette_loss expects (..., H, W), got {s.shape}")
    per_map = ad.sum(ad.square(s - s_gt), axis=(-2, -1))
    return ad.mean(per_map) if s.ndim > 2 else per_map


def _temporal(op, fwd: Sequence, bwd: Sequence, n: int | None) -> ad.Tensor:
    if len(fwd) != len(bwd):
        raise ValueError(f"{op}: {len(fwd)} forward vs {len(bwd)} backward estimates")
    if not fwd:
        raise ValueError(f"{op}: no estimates")
    n = len(fwd) - 1 if n is None else n
    if n <= 0:
        raise ValueError(f"{op}: divisor n must be positive")
    terms = []
    for a, b in zip(fwd, bwd):
        a, b = ad.as_tensor(a), ad.as_tensor(b)
        _same_shape(op, a, b)
        d = ad.square(a - b)
        # per-sample Frobenius norm, averaged over any leading batch axis
        terms.append(ad.mean(ad.sum(d, axis=(-2, -1))) if d.ndim > 2 else ad.sum(d))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / n)


def temporal_pose_loss(p_fwd: Sequence, p_bwd: Sequence, n: int | None = None) -> ad.Tensor:
    """``(1/n) sum_i ||p_i - p~_i||_F^2`` over frames ``t..t+n`` (``n + 1`` terms).

    ``n`` defaults to ``len(p_fwd) - 1``.
    """
    return _temporal("temporal_pose_loss", p_fwd, p_bwd, n)


def temporal_mesh_loss(m_fwd: Sequence, m_bwd: Sequence, n: int | None = None) -> ad.Tensor:
    """Mesh counterpart of :func:`temporal_pose_loss`."""
    return _temporal("temporal_mesh_loss", m_fwd, m_bwd, n)


def consistency_loss(w: LossWeights, pose_term, mesh_term) -> ad.Tensor:
    return ad.as_tensor(mesh_term) * w.lambda_m + ad.as_tensor(pose_term) * w.lambda_p


def total_loss(w: LossWeights, loss_m, loss_h, loss_c) -> ad.Tensor:
    return ad.as_tensor(loss_m) * w.lambda_s + ad.as_tensor(loss_h) * w.lambda_h + ad.as_tensor(loss_c)
