"""Redundancy-reduction loss and the in-batch contrastive loss."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .exceptions import ContractError, DegenerateBatchError, DimensionError
from .tensor import Tensor

DEFAULT_LAMBDA = 10.0


def _check_views(y1: Tensor, y2: Tensor) -> None:
    if y1.ndim != 2 or y1.shape != y2.shape:
        raise DimensionError(f"views must be equal 2-D shapes, got {y1.shape} and {y2.shape}")
    if y1.shape[0] < 2:
        raise DegenerateBatchError(f"cross-correlation needs batch >= 2, got {y1.shape[0]}")


def cross_correlation(y1: Tensor, y2: Tensor, eps: float = T.NORM_EPS) -> Tensor:
    """Correlation between every column of ``y1`` and every column of ``y2``.

    Entry (i, j) is ``<y1[:, i], y2[:, j]> / ((|y1[:, i]| + eps) (|y2[:, j]| + eps))``,
    i.e. cosine similarity along the batch axis. Inputs are expected to be
    centered already; :func:`barlow_twins_loss` takes care of that.
    """
    _check_views(y1, y2)
    return T.matmul(T.transpose(T.l2_normalize_columns(y1, eps)), T.l2_normalize_columns(y2, eps))


def barlow_twins_terms(c: Tensor, lambd: float) -> Tensor:
    """``sum_i (1 - C_ii) + lambd * sum_{i != j} C_ij^2`` for a square ``c``."""
    d = c.shape[0]
    off_mask = Tensor(1.0 - np.eye(d))
    on = T.sub(float(d), T.sum(T.diagonal(c)))
    off = T.sum(T.square(T.mul(c, off_mask)))
    return T.add(on, T.mul_scalar(off, lambd))


def barlow_twins_loss(y1: Tensor, y2: Tensor, lambd: float = DEFAULT_LAMBDA) -> Tensor:
    """Barlow Twins objective on two (batch, dim) views.

    Both views are mean-centered over the batch before correlating, so the
    caller does not need to pre-center.
    """
    if lambd < 0:
        raise ContractError(f"lambda must be >= 0, got {lambd}")
    _check_views(y1, y2)
    c = cross_correlation(T.mean_center_columns(y1), T.mean_center_columns(y2))
    return barlow_twins_terms(c, lambd)


def in_batch_contrastive_loss(context_out: Tensor, targets, item_weights: Tensor) -> Tensor:
    """Softmax cross-entropy over dot products with the batch's own targets.

    Row ``r`` scores its context against every target embedding in the batch;
    column ``r`` is the positive. Repeated targets stay separate columns.
    """
    targets = np.asarray(targets)
    if context_out.ndim != 2 or targets.shape != (context_out.shape[0],):
        raise DimensionError(
            f"context {context_out.shape} does not pair with {targets.shape} targets"
        )
    if context_out.shape[1] != item_weights.shape[1]:
        raise DimensionError(
            f"context dim {context_out.shape[1]} != item embedding dim {item_weights.shape[1]}"
        )
    items = T.embedding(item_weights, targets)
    logits = T.matmul(context_out, T.transpose(items))
    return T.softmax_cross_entropy(logits, np.arange(targets.shape[0]))


def mean_abs_off_diagonal(c: np.ndarray) -> float:
    """Diagnostic: average |C_ij| over i != j."""
    d = c.shape[0]
    if d < 2:
        return 0.0
    return float((np.abs(c).sum() - np.abs(np.diagonal(c)).sum()) / (d * d - d))
