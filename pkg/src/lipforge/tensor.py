"""Dense float64 tensors with a small reverse-mode gradient tape.

Every differentiable op is a module-level function.  When a
:class:`GradientTape` is active and at least one input is tracked by it, the
op records a vector-Jacobian product closure.  Recording order is a
topological order, so :func:`backward` just walks the record in reverse.

Broadcasting is limited to adding a bias vector over rows (and over the
channel axis of conv outputs).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "GradientTape",
    "DimensionError",
    "ContractError",
    "counters",
    "as_tensor",
    "backward",
    "matmul",
    "add",
    "add_bias",
    "mul",
    "transpose",
    "scale",
    "tsum",
    "relu",
    "silu",
    "gelu",
    "threshold",
    "reshape",
    "conv2d",
    "im2col",
    "softmax_cross_entropy",
    "margin",
    "l2_norm",
]


class DimensionError(ValueError):
    """Operand shapes do not compose."""


class ContractError(ValueError):
    """A documented precondition was violated."""


@dataclass
class OpCounters:
    """Global tallies used to assert cost claims (e.g. calibration is gradient-free)."""

    forward_samples: int = 0
    backward_passes: int = 0

    def reset(self) -> None:
        self.forward_samples = 0
        self.backward_passes = 0


counters = OpCounters()


class Tensor:
    """Immutable dense float64 array.

    ``shape`` is a tuple of extents; ``data`` is the underlying read-only
    C-contiguous (row-major) ndarray.
    """

    __slots__ = ("data", "__weakref__")

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64, order="C", copy=True)
        arr.setflags(write=False)
        self.data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Skip the defensive copy for arrays freshly produced by an op.
        t = cls.__new__(cls)
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        arr.setflags(write=False)
        t.data = arr
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, data={np.array2string(self.data, threshold=8)})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_local = threading.local()


def _tape_stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


class GradientTape:
    """Records differentiable ops executed inside its ``with`` block.

    A tape is single use: after :func:`backward` it cannot be replayed.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple, Callable]] = []
        self._tracked: dict[int, Tensor] = {}
        self._watched: list[Tensor] = []
        self._used = False

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            if id(t) not in self._tracked:
                self._tracked[id(t)] = t
                self._watched.append(t)

    def __enter__(self) -> "GradientTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def _record(self, out: Tensor, parents: tuple, vjp: Callable) -> None:
        if any(id(p) in self._tracked for p in parents):
            self._tracked[id(out)] = out
            self._records.append((out, parents, vjp))

    def gradient(self, loss: Tensor, sources: Sequence[Tensor]) -> list[Tensor]:
        grads = backward(self, loss)
        return [grads[s] for s in sources]


def _record(out: Tensor, parents: tuple, vjp: Callable) -> Tensor:
    stack = _tape_stack()
    if stack:
        stack[-1]._record(out, parents, vjp)
    return out


def backward(tape: GradientTape, loss: Tensor) -> dict:
    """Return ``{watched tensor: d loss / d tensor}`` for every watched leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape._used:
        raise ContractError("gradient tape already consumed")
    tape._used = True
    counters.backward_passes += 1

    adj: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for out, parents, vjp in reversed(tape._records):
        g = adj.pop(id(out), None)
        if g is None:
            continue
        for p, gp in zip(parents, vjp(g)):
            if gp is None or id(p) not in tape._tracked:
                continue
            if id(p) in adj:
                adj[id(p)] = adj[id(p)] + gp
            else:
                adj[id(p)] = gp
    return {
        t: Tensor._wrap(adj.get(id(t), np.zeros(t.shape)).reshape(t.shape))
        for t in tape._watched
    }


# -- primitives ---------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data
    out = Tensor._wrap(A @ B)
    return _record(out, (a, b), lambda g: (g @ B.T, A.T @ g))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    out = Tensor._wrap(a.data + b.data)
    return _record(out, (a, b), lambda g: (g, g))


def add_bias(x: Tensor, bias: Tensor, axis: int = -1) -> Tensor:
    """Add a 1-D ``bias`` along ``axis`` of ``x`` (rows for dense, channels for conv)."""
    axis = axis % x.data.ndim
    if bias.data.ndim != 1 or x.shape[axis] != bias.shape[0]:
        raise DimensionError(f"add_bias: bias {bias.shape} does not fit axis {axis} of {x.shape}")
    view = [1] * x.data.ndim
    view[axis] = -1
    out = Tensor._wrap(x.data + bias.data.reshape(view))
    reduce_axes = tuple(i for i in range(x.data.ndim) if i != axis)
    return _record(out, (x, bias), lambda g: (g, g.sum(axis=reduce_axes)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    A, B = a.data, b.data
    out = Tensor._wrap(A * B)
    return _record(out, (a, b), lambda g: (g * B, g * A))


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got {x.shape}")
    out = Tensor._wrap(x.data.T)
    return _record(out, (x,), lambda g: (g.T,))


def scale(x: Tensor, c: float) -> Tensor:
    out = Tensor._wrap(x.data * c)
    return _record(out, (x,), lambda g: (g * c,))


def tsum(x: Tensor) -> Tensor:
    shape = x.shape
    out = Tensor._wrap(np.array(x.data.sum()))
    return _record(out, (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0
    out = Tensor._wrap(np.where(keep, x.data, 0.0))
    return _record(out, (x,), lambda g: (g * keep,))


def silu(x: Tensor) -> Tensor:
    X = x.data
    sig = 0.5 * (1.0 + np.tanh(0.5 * X))
    out = Tensor._wrap(X * sig)
    return _record(out, (x,), lambda g: (g * (sig * (1.0 + X * (1.0 - sig))),))


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    X = x.data
    cdf = 0.5 * (1.0 + erf(X * _INV_SQRT2))
    out = Tensor._wrap(X * cdf)
    pdf = _INV_SQRT2PI * np.exp(-0.5 * X * X)
    return _record(out, (x,), lambda g: (g * (cdf + X * pdf),))


def threshold(x: Tensor, c_th: float) -> Tensor:
    """Zero every element with ``|x| <= c_th``; pass the rest through.

    The gradient is the 0/1 keep mask.  ``c_th == 0`` is the identity and
    returns ``x`` itself so the result is bit-identical.
    """
    if not c_th >= 0:
        raise ContractError(f"threshold must be non-negative, got {c_th}")
    if c_th == 0:
        return x
    keep = np.abs(x.data) > c_th
    out = Tensor._wrap(np.where(keep, x.data, 0.0))
    return _record(out, (x,), lambda g: (g * keep,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        arr = x.data.reshape(tuple(shape))
    except ValueError as e:
        raise DimensionError(f"reshape: {src} -> {tuple(shape)}: {e}") from None
    out = Tensor._wrap(arr)
    return _record(out, (x,), lambda g: (g.reshape(src),))


def _conv_out(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Lower a (N, C, H, W) array to patch rows of shape (N*OH*OW, C*kh*kw)."""
    n, c, h, w = x.shape
    oh, ow = _conv_out(h, kh, stride, padding), _conv_out(w, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise DimensionError(f"im2col: kernel {kh}x{kw} larger than padded input {h}x{w}")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : stride * (oh - 1) + 1 : stride, : stride * (ow - 1) + 1 : stride]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)


def _col2im(cols: np.ndarray, x_shape, kh, kw, stride, padding) -> np.ndarray:
    n, c, h, w = x_shape
    oh, ow = _conv_out(h, kh, stride, padding), _conv_out(w, kw, stride, padding)
    cols = cols.reshape(n, oh, ow, c, kh, kw)
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += (
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return xp[:, :, padding : padding + h, padding : padding + w]


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation via im2col.  x: (N,C,H,W), kernels: (F,C,kh,kw)."""
    if x.data.ndim != 4 or kernels.data.ndim != 4 or x.shape[1] != kernels.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernels {kernels.shape}")
    if bias.shape != (kernels.shape[0],):
        raise DimensionError(f"conv2d: bias {bias.shape} for {kernels.shape[0]} filters")
    n = x.shape[0]
    f, c, kh, kw = kernels.shape
    cols = im2col(x.data, kh, kw, stride, padding)
    oh = _conv_out(x.shape[2], kh, stride, padding)
    ow = _conv_out(x.shape[3], kw, stride, padding)
    wmat = kernels.data.reshape(f, -1)
    y = cols @ wmat.T + bias.data
    out = Tensor._wrap(y.reshape(n, oh, ow, f).transpose(0, 3, 1, 2))
    x_shape, k_shape = x.shape, kernels.shape

    def vjp(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, f)
        dk = (g2.T @ cols).reshape(k_shape)
        dx = _col2im(g2 @ wmat, x_shape, kh, kw, stride, padding)
        return dx, dk, g2.sum(axis=0)

    return _record(out, (x, kernels, bias), vjp)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Cross-entropy of softmax(logits) against integer ``labels``.

    ``reduction`` is ``"mean"``, ``"sum"`` or ``"none"`` (per-sample vector).
    """
    z = logits.data
    if z.ndim != 2:
        raise DimensionError(f"cross-entropy expects (N, K) logits, got {logits.shape}")
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (z.shape[0],):
        raise DimensionError(f"cross-entropy: {y.shape} labels for {z.shape[0]} rows")
    n = z.shape[0]
    logp = _log_softmax(z)
    per = -logp[np.arange(n), y]
    onehot = np.zeros_like(z)
    onehot[np.arange(n), y] = 1.0
    probs = np.exp(logp)

    if reduction == "none":
        out = Tensor._wrap(per)
        return _record(out, (logits,), lambda g: (g[:, None] * (probs - onehot),))
    if reduction == "sum":
        out = Tensor._wrap(np.array(per.sum()))
        return _record(out, (logits,), lambda g: (g * (probs - onehot),))
    if reduction == "mean":
        out = Tensor._wrap(np.array(per.mean()))
        return _record(out, (logits,), lambda g: (g * (probs - onehot) / n,))
    raise ContractError(f"unknown reduction {reduction!r}")


def margin(logits: Tensor, labels, kappa: float = 0.0) -> Tensor:
    """Per-sample ``max(z_true - max_{j != true} z_j, -kappa)``."""
    z = logits.data
    y = np.asarray(labels, dtype=np.int64)
    n = z.shape[0]
    rows = np.arange(n)
    other = z.copy()
    other[rows, y] = -np.inf
    runner = other.argmax(axis=1)
    raw = z[rows, y] - z[rows, runner]
    active = raw > -kappa
    out = Tensor._wrap(np.where(active, raw, -kappa))

    def vjp(g):
        d = np.zeros_like(z)
        ga = g * active
        d[rows, y] += ga
        d[rows, runner] -= ga
        return (d,)

    return _record(out, (logits,), vjp)


def l2_norm(x) -> float:
    """Euclidean norm of the flattened data."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    return float(np.sqrt(np.sum(data.reshape(-1) ** 2)))
