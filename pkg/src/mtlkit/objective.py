"""Joint training objective: multi-label cross-entropy for lesions,
softmax cross-entropy for body locations, plus L2 regularization.

Both losses are batch means over numerically stable closed forms:
log sigmoid(s) = -softplus(-s) and log softmax(t)_v = t_v - logsumexp(t),
so logits up to |1e4| stay finite. Location labels are 1-based
(v in {1..Q}), matching the dataset contract.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import BadLabel
from .tensor import Tensor, _accumulate, _result


@dataclass
class LossBreakdown:
    lesion_loss: float
    location_loss: float
    reg: float
    total: float


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Stable elementwise logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(x: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax for a 2-D array (or a single row)."""
    x = np.asarray(x, dtype=np.float64)
    shifted = x - x.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=-1, keepdims=True)


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def sigmoid_activations(lesion_logits) -> Tensor:
    """Per-label sigmoid scores in (0, 1); not part of the loss graph."""
    data = lesion_logits.data if isinstance(lesion_logits, Tensor) else lesion_logits
    return Tensor(sigmoid(data))


def softmax_activations(location_logits) -> Tensor:
    """Row-stochastic location scores; shift-invariant by construction."""
    data = location_logits.data if isinstance(location_logits, Tensor) else location_logits
    return Tensor(softmax(data))


def lesion_loss(lesion_logits: Tensor, u) -> Tensor:
    """Batch-mean multi-label cross-entropy against binary targets u (BxP)."""
    u = np.asarray(u, dtype=np.float64)
    if u.shape != lesion_logits.shape:
        raise BadLabel(f"label shape {u.shape} does not match logits {lesion_logits.shape}")
    if not np.isin(u, (0.0, 1.0)).all():
        raise BadLabel("lesion labels must be binary")
    s = lesion_logits.data
    bsz = s.shape[0]
    # -[u log a + (1-u) log(1-a)] = u*softplus(-s) + (1-u)*softplus(s)
    per_elem = u * _softplus(-s) + (1.0 - u) * _softplus(s)
    value = per_elem.sum() / bsz

    def bwd(g):
        _accumulate(lesion_logits, float(g) * (sigmoid(s) - u) / bsz)

    return _result(np.float64(value), (lesion_logits,), bwd)


def location_loss(location_logits: Tensor, v) -> Tensor:
    """Batch-mean softmax cross-entropy; v holds 1-based class indices."""
    t = location_logits.data
    bsz, q = t.shape
    v = np.asarray(v)
    if v.shape != (bsz,):
        raise BadLabel(f"expected {bsz} location labels, got shape {v.shape}")
    if ((v < 1) | (v > q)).any():
        raise BadLabel(f"location labels must lie in 1..{q}")
    idx = v.astype(np.intp) - 1
    shifted = t - t.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1)) + t.max(axis=1)
    value = (lse - t[np.arange(bsz), idx]).sum() / bsz

    def bwd(g):
        grad = softmax(t)
        grad[np.arange(bsz), idx] -= 1.0
        _accumulate(location_logits, float(g) * grad / bsz)

    return _result(np.float64(value), (location_logits,), bwd)


def regularization(net, gamma: float) -> float:
    """Quadratic penalty gamma * sum of squared parameters (display value)."""
    return gamma * sum(float((p.tensor.data ** 2).sum()) for p in net.parameters())


def joint_loss(net, batch, u, v, gamma: float, aux_weight: float = 1.0,
               decoupled_reg: bool = True):
    """Sum of both task losses plus L2 regularization.

    Returns (LossBreakdown, scalar loss node). With decoupled_reg the
    quadratic penalty is applied by the optimizer as weight decay and only
    reported here; otherwise it joins the differentiated objective.
    """
    if gamma < 0:
        raise BadLabel(f"gamma must be nonnegative, got {gamma}")
    les_logits, loc_logits, _, _ = net.forward(batch)
    les = lesion_loss(les_logits, u)
    loc = location_loss(loc_logits, v)
    node = T.add(les, loc) if aux_weight == 1.0 else T.add(les, T.scale(loc, aux_weight))
    reg = gamma * sum(float((p.tensor.data ** 2).sum()) for p in net.parameters())
    if not decoupled_reg and gamma > 0:
        penalty = None
        for p in net.parameters():
            sq = T.scale(T.sum_squares(p.tensor), gamma)
            penalty = sq if penalty is None else T.add(penalty, sq)
        node = T.add(node, penalty)
    breakdown = LossBreakdown(
        lesion_loss=float(les.data),
        location_loss=float(loc.data),
        reg=reg,
        total=float(les.data) + float(loc.data) + reg,
    )
    return breakdown, node
