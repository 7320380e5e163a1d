"""Stochastic views of item sequences.

All transforms act only on the real (non-padded) prefix of each row, so
padding stays at the mask index and ``real_length`` never changes. The batch
functions take ``items`` (b, length) and ``real_length`` (b,) arrays and
return a new array; the single-sequence functions wrap them.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import MASK_INDEX, UserSequence
from .exceptions import ConfigError

KINDS = ("random_mask", "segment_mask", "permute")


def rng_stream(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, *keys)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, keys)])))


@dataclass(frozen=True)
class AugmentationSpec:
    kind: str = "segment_mask"
    p: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown augmentation {self.kind!r}; expected one of {KINDS}")
        if self.kind != "permute" and not 0.0 < self.p < 1.0:
            raise ConfigError(f"{self.kind} needs p in (0, 1), got {self.p}")

    def to_json(self) -> dict:
        return {"kind": self.kind, "p": self.p, "seed": self.seed}

    @classmethod
    def from_json(cls, obj: dict) -> AugmentationSpec:
        return cls(obj["kind"], float(obj.get("p", 0.2)), int(obj.get("seed", 0)))


def _prefix_mask(items: np.ndarray, real_length: np.ndarray) -> np.ndarray:
    return np.arange(items.shape[1])[None, :] < np.asarray(real_length)[:, None]


def random_mask_batch(items, real_length, p: float, rng: np.random.Generator) -> np.ndarray:
    items = np.asarray(items)
    hit = (rng.random(items.shape) < p) & _prefix_mask(items, real_length)
    return np.where(hit, MASK_INDEX, items)


def segment_lengths(real_length, p: float) -> np.ndarray:
    # tiny slack so products like 0.29 * 100 floor to 29
    return np.floor(p * np.asarray(real_length) + 1e-9).astype(np.int64)


def segment_mask_batch(items, real_length, p: float, rng: np.random.Generator, return_starts=False):
    """Mask ``floor(p * real_length)`` contiguous positions per row.

    The start is uniform on ``[0, real_length - m]``; rows with ``m == 0``
    pass through unchanged.
    """
    items = np.asarray(items)
    rl = np.asarray(real_length)
    m = segment_lengths(rl, p)
    starts = rng.integers(0, rl - m + 1)
    pos = np.arange(items.shape[1])[None, :]
    hit = (pos >= starts[:, None]) & (pos < (starts + m)[:, None])
    out = np.where(hit, MASK_INDEX, items)
    return (out, starts) if return_starts else out


def permute_batch(items, real_length, rng: np.random.Generator) -> np.ndarray:
    """Uniformly shuffle each row's real prefix.

    Sorting i.i.d. uniform keys yields every ordering with equal
    probability; padding keys are +inf so the tail stays put.
    """
    items = np.asarray(items)
    keys = rng.random(items.shape)
    keys[~_prefix_mask(items, real_length)] = np.inf
    order = np.argsort(keys, axis=1, kind="stable")
    return np.take_along_axis(items, order, axis=1)


def augment_batch(items, real_length, spec: AugmentationSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.kind == "random_mask":
        return random_mask_batch(items, real_length, spec.p, rng)
    if spec.kind == "segment_mask":
        return segment_mask_batch(items, real_length, spec.p, rng)
    return permute_batch(items, real_length, rng)


def make_views(items, real_length, spec: AugmentationSpec, epoch: int = 0, batch_index: int = 0):
    """Two independently augmented copies of a batch (same transform kind)."""
    items = np.asarray(items)
    if items.ndim != 2 or items.shape[0] == 0:
        raise ValueError(f"make_views needs a non-empty 2-D batch, got shape {items.shape}")
    return tuple(
        augment_batch(items, real_length, spec, rng_stream(spec.seed, epoch, batch_index, view))
        for view in (0, 1)
    )


def _one(seq: UserSequence, fn, *args) -> UserSequence:
    out = fn(seq.items[None, :], np.array([seq.real_length]), *args)[0]
    return replace(seq, items=out, labels=dict(seq.labels))


def random_mask(seq: UserSequence, p: float, rng: np.random.Generator) -> UserSequence:
    return _one(seq, random_mask_batch, p, rng)


def segment_mask(seq: UserSequence, p: float, rng: np.random.Generator) -> UserSequence:
    return _one(seq, segment_mask_batch, p, rng)


def permute(seq: UserSequence, rng: np.random.Generator) -> UserSequence:
    return _one(seq, permute_batch, rng)
