"""Input checks shared by the estimator wrappers."""

from __future__ import annotations

import numpy as np
from sklearn.utils import check_array, column_or_1d

from .data import MASK_INDEX
from .exceptions import DataError


def check_sequences(X, n_items: int | None = None, seq_len: int | None = None) -> np.ndarray:
    """Validate a padded index matrix and return it as ``int64``.

    Rows hold item indices in ``[0, n_items]`` with the mask index only in a
    trailing padding run, and at least one real item.
    """
    X = check_array(X, dtype=None, ensure_2d=True, ensure_all_finite=True)
    if X.dtype.kind == "f":
        if not np.all(X == np.round(X)):
            raise DataError("item indices must be integers")
    elif X.dtype.kind not in "iu":
        raise DataError(f"item indices must be integers, got dtype {X.dtype}")
    X = X.astype(np.int64)
    if seq_len is not None and X.shape[1] != seq_len:
        raise DataError(f"expected sequences of length {seq_len}, got {X.shape[1]}")
    if X.min() < 0 or (n_items is not None and X.max() > n_items):
        raise DataError(f"item indices must lie in [0, {n_items if n_items is not None else 'V'}]")
    rl = real_lengths(X)
    if np.any(rl == 0):
        raise DataError("every sequence needs at least one item")
    pad = np.arange(X.shape[1])[None, :] >= rl[:, None]
    if np.any(X[~pad] == MASK_INDEX):
        raise DataError("mask index inside the real prefix; pad only at the tail")
    return X


def real_lengths(X: np.ndarray) -> np.ndarray:
    """Position after the last non-mask item of each row."""
    nz = X != MASK_INDEX
    return np.where(nz.any(axis=1), X.shape[1] - np.argmax(nz[:, ::-1], axis=1), 0)


def check_targets(y, n_rows: int, n_items: int | None = None) -> np.ndarray:
    """Next-item targets: one index in ``[1, n_items]`` per row."""
    y = column_or_1d(y).astype(np.int64)
    if len(y) != n_rows:
        raise DataError(f"got {len(y)} targets for {n_rows} sequences")
    if y.min() < 1 or (n_items is not None and y.max() > n_items):
        raise DataError("targets must be real item indices (>= 1)")
    return y
