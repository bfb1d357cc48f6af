"""Flow-matching interpolation and loss, the dispersion loss, and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numcore as nc
from .backbone import DeltaSet
from .numcore import Tensor


@dataclass(frozen=True)
class LossWeights:
    shared: float = 0.1
    distinct: float = 0.1

    def __post_init__(self):
        if self.shared < 0 or self.distinct < 0:
            raise ValueError("loss weights must be non-negative")


REFERENCE_WEIGHTS = LossWeights(0.1, 0.1)


def _check_t(t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError(f"t outside [0, 1]: {t}")
    return t


def interpolate(z0, z1, t):
    """z_t = (1 - t) z0 + t z1. ``t`` is a scalar or one value per leading-axis item."""
    t = _check_t(t)
    a, b = np.asarray(getattr(z0, "data", z0)), np.asarray(getattr(z1, "data", z1))
    if a.shape != b.shape:
        raise nc.ShapeError(f"interpolate: shape mismatch {a.shape} vs {b.shape}")
    if t.ndim == 1:
        t = t.reshape((-1,) + (1,) * (a.ndim - 1))
    if isinstance(z0, Tensor) or isinstance(z1, Tensor):
        tt = Tensor(np.broadcast_to(t, a.shape))
        return nc.as_tensor(z0) * (1.0 - tt) + nc.as_tensor(z1) * tt
    return (1.0 - t) * a + t * b


def flow_loss(v_pred: Tensor, z0, z1) -> Tensor:
    """Element-mean squared error against the target velocity ``z1 - z0``."""
    target = np.asarray(getattr(z1, "data", z1)) - np.asarray(getattr(z0, "data", z0))
    if v_pred.shape != target.shape:
        raise nc.ShapeError(f"flow_loss: prediction {v_pred.shape} vs target {target.shape}")
    return nc.mean(nc.square(v_pred - Tensor(target)))


def flatten_deltas(deltas: DeltaSet, which: str, mode: str = "concat") -> Tensor:
    """One row per batch item: every token (and block) concatenated, or the token mean."""
    d = deltas.shared if which == "shared" else deltas.distinct
    B = d.shape[0]
    if mode == "token_mean":
        token_axis = d.ndim - 2
        d = nc.mean(d, axis=token_axis)
    elif mode != "concat":
        raise ValueError(f"unknown flatten mode {mode!r}")
    return nc.reshape(d, (B, d.size // B))


def dispersion_loss(vectors: Tensor, user_ids: Sequence[int] | None = None) -> Tensor:
    """Mean over anchors u of log sum_{u' != u} exp(-||x_u - x_u'||_2).

    ``vectors`` is (B, n), one flattened modulation direction per row.
    Rows sharing a user id are not each other's negatives.
    """
    B = vectors.shape[0]
    ids = list(range(B)) if user_ids is None else list(user_ids)
    if len(ids) != B:
        raise ValueError(f"{len(ids)} user ids for {B} rows")
    if len(set(ids)) < 2:
        raise ValueError("dispersion loss needs at least two distinct users in the batch")
    rows = nc.split(vectors, B, axis=0)
    dist: dict[tuple[int, int], Tensor] = {}
    for a in range(B):
        for b in range(a + 1, B):
            if ids[a] != ids[b]:
                dist[a, b] = nc.l2_distance(rows[a], rows[b])
    per_anchor = []
    for a in range(B):
        negs = [dist[min(a, b), max(a, b)] for b in range(B) if ids[b] != ids[a]]
        per_anchor.append(nc.logsumexp(nc.neg(nc.stack(negs))))
    return nc.mean(nc.stack(per_anchor))


def total_loss(flow: Tensor, disp_shared, disp_distinct, weights: LossWeights) -> Tensor:
    """flow + lambda_shared * disp_shared + lambda_distinct * disp_distinct."""
    out = flow
    for term, lam in ((disp_shared, weights.shared), (disp_distinct, weights.distinct)):
        if term is not None and lam != 0.0:
            out = out + nc.scale(term, lam)
    return out
