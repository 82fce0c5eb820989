"""Ranking losses over a g-by-m table of slice scores.

``scores[i, j]`` is the predicted score of the j-th sampled slice of
volume i, rows in ascending slice order. The order term is a logistic
loss on consecutive score gaps (larger index must score higher); the
distance term is a smooth-L1 penalty on changes between consecutive gaps
(equidistant slices must have equidistant scores). Both terms are summed,
not averaged, and depend only on within-row differences, so adding a
constant to a row leaves every value unchanged.

Each loss has an analytic fast path (value + gradient w.r.t. the score
table) and a graph path built from diffcore ops; tests assert agreement.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import SIG_EPS, Node, smooth_l1_deriv, smooth_l1_value, stable_sigmoid


@dataclass
class LossReport:
    """Loss terms and the gradient of the total w.r.t. the score table."""

    order: float
    dist: float
    total: float
    grad: np.ndarray  # (g, m)


def _check_table(scores, min_m: int) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise dc.ShapeError(f"score table must be 2-D (g, m), got {scores.ndim}-D")
    if scores.shape[1] < min_m:
        raise dc.ShapeError(f"score table needs m >= {min_m} slices per volume, got m={scores.shape[1]}")
    return scores


def order_loss(scores) -> tuple[float, np.ndarray]:
    """Logistic loss on forward score gaps; returns (value, d/dscores)."""
    scores = _check_table(scores, 2)
    gaps = scores[:, 1:] - scores[:, :-1]
    h = stable_sigmoid(gaps)
    value = float(-np.log(np.clip(h, SIG_EPS, 1.0 - SIG_EPS)).sum())
    dgap = h - 1.0
    grad = np.zeros_like(scores)
    grad[:, 1:] += dgap
    grad[:, :-1] -= dgap
    return value, grad


def distance_loss(scores) -> tuple[float, np.ndarray]:
    """Smooth-L1 penalty on gap changes; returns (value, d/dscores)."""
    scores = _check_table(scores, 3)
    second = np.diff(scores, n=2, axis=1)  # (g, m-2)
    value = float(smooth_l1_value(second).sum())
    df = smooth_l1_deriv(second)
    grad = np.zeros_like(scores)
    grad[:, :-2] += df
    grad[:, 1:-1] -= 2.0 * df
    grad[:, 2:] += df
    return value, grad


def total_loss(scores, dist_weight: float = 1.0) -> LossReport:
    """Order plus distance loss. With m == 2 the distance term is defined as 0.

    ``dist_weight`` scales the distance term in the total and its gradient
    (1.0 is the plain unweighted sum; 0.0 disables the term for ablations).
    The reported ``dist`` is always the unweighted value.
    """
    scores = _check_table(scores, 2)
    o_val, o_grad = order_loss(scores)
    if scores.shape[1] == 2:
        d_val = 0.0
        d_grad = np.zeros_like(scores)
    else:
        d_val, d_grad = distance_loss(scores)
    if dist_weight == 1.0:
        total = o_val + d_val
        grad = o_grad + d_grad
    else:
        total = o_val + dist_weight * d_val
        grad = o_grad + dist_weight * d_grad
    return LossReport(order=o_val, dist=d_val, total=total, grad=grad)


# ---------------------------------------------------------------------------
# graph path: same losses assembled from diffcore ops, for cross-checking
# and for end-to-end gradient verification through the network


def order_loss_graph(scores: Node) -> Node:
    g, m = scores.value.shape
    if m < 2:
        raise ValueError(f"order loss needs m >= 2, got m={m}")
    gaps = dc.sub(dc.slice_axis(scores, 1, 1, m), dc.slice_axis(scores, 1, 0, m - 1))
    h = dc.clip(dc.sigmoid(gaps), SIG_EPS, 1.0 - SIG_EPS)
    return dc.neg(dc.sum_all(dc.log(h)))


def distance_loss_graph(scores: Node) -> Node:
    g, m = scores.value.shape
    if m < 3:
        raise ValueError(f"distance loss needs m >= 3, got m={m}")
    gaps = dc.sub(dc.slice_axis(scores, 1, 1, m), dc.slice_axis(scores, 1, 0, m - 1))
    second = dc.sub(dc.slice_axis(gaps, 1, 1, m - 1), dc.slice_axis(gaps, 1, 0, m - 2))
    return dc.sum_all(dc.smooth_l1(second))


def total_loss_graph(scores: Node, dist_weight: float = 1.0) -> Node:
    g, m = scores.value.shape
    order = order_loss_graph(scores)
    if m == 2 or dist_weight == 0.0:
        return order
    dist = distance_loss_graph(scores)
    if dist_weight != 1.0:
        dist = dc.scale(dist, dist_weight)
    return dc.add(order, dist)
