"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` when at
least one operand requires a gradient. Outside a tape, ops are plain numpy
forward computations, which is what evaluation code relies on for speed.

>>> x = Tensor([[1.0, 2.0]], requires_grad=True)
>>> with Tape() as tape:
...     loss = sum(mul(x, x))
>>> backward(tape, loss)
>>> x.grad
array([[2., 4.]])
"""

from __future__ import annotations

import builtins
import os
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ContractError, DimensionError, NormalizationError

NORM_EPS = 1e-12

_DEBUG = os.environ.get("SEQTWINS_DEBUG", "") not in ("", "0")
_TAPES: list[Tape] = []


def set_debug(flag: bool) -> None:
    """Toggle non-finite checks after every forward op."""
    global _DEBUG
    _DEBUG = bool(flag)


class Tensor:
    """A float64 array plus an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> Tensor:
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return mul_scalar(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)


@dataclass
class _Record:
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered log of differentiable operations.

    Use as a context manager; nested tapes are allowed and only the
    innermost one records.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> Tape:
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.records)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], grad_fn) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(data)):
        if all(np.all(np.isfinite(t.data)) for t in inputs):
            raise FloatingPointError("non-finite output from finite inputs")
    needs = bool(_TAPES) and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, needs)
    if needs:
        _TAPES[-1].records.append(_Record(out, inputs, grad_fn))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

    Leaves are tensors that require a gradient but were not produced by an op
    on ``tape``. Existing ``.grad`` values are added to, not replaced.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(r.output) for r in tape.records}
    if id(loss) not in produced and not loss.requires_grad:
        raise ContractError("loss is not reachable from the tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    if id(loss) not in produced:
        leaves[id(loss)] = loss
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        for t, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in produced:
                leaves[key] = t
    for key, t in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        t.grad = g.copy() if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def mul_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _emit(a.data * s, (a,), lambda g: (g * s,))


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    return _emit(np.where(keep, a.data, 0.0), (a,), lambda g: (g * keep,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _emit(ad * ad, (a,), lambda g: (2.0 * g * ad,))


# ---------------------------------------------------------------------------
# reductions and reshaping


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    shape = a.shape
    if axis is None:
        return _emit(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
    out = a.data.sum(axis=axis)
    return _emit(
        out, (a,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)
    )


def mean(a: Tensor) -> Tensor:
    return mul_scalar(sum(a), 1.0 / a.size)


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _emit(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    orig = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {orig} into {shape}") from None
    return _emit(out, (a,), lambda g: (g.reshape(orig),))


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Stack along axis 0."""
    tensors = tuple(tensors)
    tails = {t.shape[1:] for t in tensors}
    if len(tails) != 1:
        raise DimensionError(f"concat_rows: trailing shapes differ {sorted(tails)}")
    bounds = np.cumsum([0] + [t.shape[0] for t in tensors])
    return _emit(
        np.concatenate([t.data for t in tensors], axis=0),
        tensors,
        lambda g: tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(tensors))),
    )


def rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` of ``a``."""
    shape = a.shape

    def grad_fn(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _emit(a.data[start:stop], (a,), grad_fn)


def diagonal(a: Tensor) -> Tensor:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"diagonal needs a square matrix, got {a.shape}")
    return _emit(np.diagonal(a.data).copy(), (a,), lambda g: (np.diag(g),))


# ---------------------------------------------------------------------------
# linear algebra and layers


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _emit(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` laid out (in, out)."""
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def embedding(weight: Tensor, indices) -> Tensor:
    """Row lookup: output shape is ``indices.shape + (d,)``."""
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ContractError("embedding indices must be integers")
    n = weight.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"embedding index out of range [0, {n - 1}]")
    flat = idx.reshape(-1)
    d = weight.shape[1]

    def grad_fn(g):
        gw = np.zeros(weight.shape)
        np.add.at(gw, flat, g.reshape(-1, d))
        return (gw,)

    return _emit(weight.data[idx], (weight,), grad_fn)


def conv1d(x: Tensor, kernels: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-padded 1-D cross-correlation.

    ``x`` is (batch, c_in, length), ``kernels`` is (c_out, c_in, width) with
    odd width; zeros pad both ends so the output keeps ``length``.
    """
    if x.ndim != 3 or kernels.ndim != 3:
        raise DimensionError(f"conv1d expects 3-D input and kernels, got {x.shape}, {kernels.shape}")
    b, c_in, length = x.shape
    c_out, k_in, w = kernels.shape
    if k_in != c_in:
        raise DimensionError(f"conv1d: input has {c_in} channels, kernels expect {k_in}")
    if w % 2 == 0:
        raise ContractError(f"conv1d kernel width must be odd, got {w}")
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"conv1d: bias shape {bias.shape} != ({c_out},)")
    pad = w // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad)))
    # cols[b, t, c, k] = xp[b, c, t + k]
    cols = sliding_window_view(xp, w, axis=2).transpose(0, 2, 1, 3).reshape(b * length, c_in * w)
    kmat = kernels.data.reshape(c_out, c_in * w)
    out = cols @ kmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(b, length, c_out).transpose(0, 2, 1)

    def grad_fn(g):
        g2 = g.transpose(0, 2, 1).reshape(b * length, c_out)
        gk = (g2.T @ cols).reshape(c_out, c_in, w)
        gcols = (g2 @ kmat).reshape(b, length, c_in, w)
        gxp = np.zeros((b, c_in, length + 2 * pad))
        for k in range(w):
            gxp[:, :, k : k + length] += gcols[:, :, :, k].transpose(0, 2, 1)
        gx = gxp[:, :, pad : pad + length]
        gb = g.sum(axis=(0, 2)) if bias is not None else None
        return (gx, gk, gb)

    inputs = (x, kernels) if bias is None else (x, kernels, bias)
    return _emit(np.ascontiguousarray(out), inputs, grad_fn)


def maxpool1d(x: Tensor, window: int) -> Tensor:
    """Non-overlapping max pool along the last axis; remainder dropped.

    Ties resolve to the lowest index, so the gradient goes there.
    """
    if window < 1:
        raise ContractError(f"pool window must be >= 1, got {window}")
    b, c, length = x.shape
    n = length // window
    if n == 0:
        raise DimensionError(f"pool window {window} exceeds length {length}")
    blocks = x.data[:, :, : n * window].reshape(b, c, n, window)
    arg = blocks.argmax(axis=3)
    out = np.take_along_axis(blocks, arg[..., None], axis=3)[..., 0]

    def grad_fn(g):
        gb = np.zeros((b, c, n, window))
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=3)
        gx = np.zeros((b, c, length))
        gx[:, :, : n * window] = gb.reshape(b, c, n * window)
        return (gx,)

    return _emit(out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# batch statistics and losses


def mean_center_columns(x: Tensor) -> Tensor:
    """Subtract the per-column mean taken over the batch (row) axis."""
    if x.ndim != 2:
        raise DimensionError(f"mean_center_columns expects 2-D input, got {x.shape}")
    out = x.data - x.data.mean(axis=0, keepdims=True)
    return _emit(out, (x,), lambda g: (g - g.mean(axis=0, keepdims=True),))


def l2_normalize_columns(x: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Divide each column by ``norm + eps``.

    With ``eps=0`` a zero column raises :class:`NormalizationError`.
    """
    if x.ndim != 2:
        raise DimensionError(f"l2_normalize_columns expects 2-D input, got {x.shape}")
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=0))
    if eps <= 0 and np.any(norm == 0):
        raise NormalizationError("zero-norm column with no epsilon floor")
    denom = norm + eps
    out = xd / denom

    def grad_fn(g):
        safe = np.where(norm > 0, norm, 1.0)
        coef = (g * xd).sum(axis=0) / (denom * denom * safe)
        coef = np.where(norm > 0, coef, 0.0)
        return (g / denom - xd * coef,)

    return _emit(out, (x,), grad_fn)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row softmax.

    A 1-D ``logits`` is treated as a single row.
    """
    z = logits.data
    squeeze = z.ndim == 1
    if squeeze:
        z = z[None, :]
    if z.ndim != 2:
        raise DimensionError(f"logits must be 1-D or 2-D, got {logits.shape}")
    t = np.atleast_1d(np.asarray(targets))
    if t.shape != (z.shape[0],):
        raise DimensionError(f"{t.shape[0]} targets for {z.shape[0]} rows")
    if t.size and (t.min() < 0 or t.max() >= z.shape[1]):
        raise IndexError("target class out of range")
    rows_ = np.arange(z.shape[0])
    lsm = log_softmax(z)
    loss = -lsm[rows_, t].mean()

    def grad_fn(g):
        p = np.exp(lsm)
        p[rows_, t] -= 1.0
        p *= g / z.shape[0]
        return (p[0] if squeeze else p,)

    return _emit(np.array(loss), (logits,), grad_fn)


# ---------------------------------------------------------------------------
# verification helper


def numerical_gradient(fn: Callable[[], float], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``fn()`` w.r.t. ``param.data``.

    ``param.data`` is perturbed in place and restored.
    """
    flat = param.data.reshape(-1)
    out = np.zeros(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn()
        flat[i] = orig - h
        down = fn()
        flat[i] = orig
        out[i] = (up - down) / (2 * h)
    return out.reshape(param.shape)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise ``|a - b| / max(|a|, |b|)``; 0 when both vanish."""
    scale = builtins.max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)
