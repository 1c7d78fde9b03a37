"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Values are immutable once wrapped in a Tensor; each operation records the
closure needed to push gradients back to its inputs.  A single backward()
call on a scalar result fills ``grad`` on every reachable leaf that has
``requires_grad`` set.  Graphs are one-shot: backward on the same result
twice is rejected.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Rng",
    "no_record",
    "add",
    "sub",
    "mul",
    "matmul",
    "relu",
    "sigmoid",
    "tanh",
    "dropout",
    "conv2d",
    "conv2d_output_shape",
    "transpose",
    "stack_rows",
]

_MASK64 = (1 << 64) - 1

# When False, operations compute values only and the result is a constant
# leaf (no parents, no backward closure).
_RECORDING = True


@contextlib.contextmanager
def no_record():
    """Disable graph recording inside the block (inference / evaluation)."""
    global _RECORDING
    prev = _RECORDING
    _RECORDING = False
    try:
        yield
    finally:
        _RECORDING = prev


def _ensure_finite(data: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(data)):
        raise ValueError(f"{what} contains non-finite values (NaN or Inf)")


class Tensor:
    """An n-dimensional float64 array that can participate in backward passes.

    ``data`` is stored row-major; ``grad`` (same shape) is populated by
    ``backward()`` on leaves with ``requires_grad``.  Constructors reject
    NaN/Inf.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_done")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _ensure_finite(arr, "Tensor data")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Optional[Callable] = None
        self._done = False

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"],
                 backward_fn: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._done = False
        if _RECORDING and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward_fn = backward_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward_fn = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return _index(self, idx)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # -- backward ----------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode pass from a scalar result.

        Fills ``grad`` on every ``requires_grad`` leaf in the recorded graph
        (adding to any gradient already present).  A second call on the same
        tensor is rejected.
        """
        if self.data.size != 1:
            raise ValueError(
                f"backward() requires a scalar, got shape {self.data.shape}")
        if self._done:
            raise RuntimeError(
                "backward() already ran on this tensor; rebuild the graph")
        self._done = True

        order = _toposort(self)
        # buffer entries: [array, owned]; "owned" means exclusively ours, so
        # in-place accumulation and handover to .grad are safe without a copy
        buffers: dict[int, list] = {id(self): [np.ones_like(self.data), True]}

        def accumulate(node: "Tensor", contribution: np.ndarray,
                       owned: bool = False) -> None:
            entry = buffers.get(id(node))
            if entry is None:
                buffers[id(node)] = [contribution, owned]
            else:
                if not entry[1]:
                    entry[0] = np.array(entry[0], dtype=np.float64, copy=True)
                    entry[1] = True
                entry[0] += contribution

        for node in order:
            entry = buffers.pop(id(node), None)
            if entry is None:
                continue
            grad_out, owned = entry
            if node._backward_fn is not None:
                node._backward_fn(grad_out, accumulate)
            elif node.requires_grad:
                if node.grad is None:
                    self_owned = owned and isinstance(grad_out, np.ndarray)
                    node.grad = grad_out if self_owned else np.array(
                        grad_out, dtype=np.float64, copy=True)
                else:
                    node.grad += grad_out


def _toposort(root: Tensor) -> list[Tensor]:
    """Iterative DFS topological order, returned output-first."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


# -- helpers ---------------------------------------------------------------


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise and linear ops ---------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def backward(g, acc):
        if a.requires_grad:
            r = _unbroadcast(g, a.data.shape)
            acc(a, r, owned=r is not g)
        if b.requires_grad:
            r = _unbroadcast(g, b.data.shape)
            acc(b, r, owned=r is not g)

    return Tensor._from_op(out, (a, b), backward)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def backward(g, acc):
        acc(a, -g, owned=True)

    return Tensor._from_op(-a.data, (a,), backward)


def sub(a, b) -> Tensor:
    return add(a, neg(_as_tensor(b)))


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def backward(g, acc):
        if a.requires_grad:
            acc(a, _unbroadcast(g * b.data, a.data.shape), owned=True)
        if b.requires_grad:
            acc(b, _unbroadcast(g * a.data, b.data.shape), owned=True)

    return Tensor._from_op(out, (a, b), backward)


def matmul(a, b) -> Tensor:
    """[m,n] @ [n,p] -> [m,p], or matrix-vector [m,n] @ [n] -> [m]."""
    a, b = _as_tensor(a), _as_tensor(b)
    if (a.data.ndim != 2 or b.data.ndim not in (1, 2)
            or a.data.shape[1] != b.data.shape[0]):
        raise ValueError(
            f"matmul: non-conforming shapes {a.data.shape} and {b.data.shape}")
    out = a.data @ b.data

    if b.data.ndim == 1:
        def backward(g, acc):
            if a.requires_grad:
                acc(a, np.multiply.outer(g, b.data), owned=True)
            if b.requires_grad:
                acc(b, a.data.T @ g, owned=True)
    else:
        def backward(g, acc):
            if a.requires_grad:
                acc(a, g @ b.data.T, owned=True)
            if b.requires_grad:
                acc(b, a.data.T @ g, owned=True)

    return Tensor._from_op(out, (a, b), backward)


def tensor_sum(a) -> Tensor:
    """Sum of all elements, as a 0-d scalar tensor."""
    a = _as_tensor(a)
    out = np.asarray(a.data.sum())

    def backward(g, acc):
        acc(a, np.broadcast_to(g, a.data.shape))

    return Tensor._from_op(out, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(shape)

    def backward(g, acc):
        r = g.reshape(a.data.shape)
        acc(a, r, owned=r.base is None and r is not g)

    return Tensor._from_op(out, (a,), backward)


def _index(a, idx) -> Tensor:
    """Basic (non-repeating) numpy indexing; backward scatters into zeros."""
    a = _as_tensor(a)
    out = a.data[idx]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)

    def backward(g, acc):
        full = np.zeros_like(a.data)
        full[idx] = g
        acc(a, full, owned=True)

    return Tensor._from_op(out, (a,), backward)


def relu(a) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is taken as 0."""
    a = _as_tensor(a)
    out = np.maximum(a.data, 0.0)

    def backward(g, acc):
        # out > 0 iff a.data > 0, so the saved output doubles as the mask
        acc(a, g * (out > 0), owned=True)

    return Tensor._from_op(out, (a,), backward)


def transpose(a) -> Tensor:
    """2-D transpose (a view; the underlying data is shared)."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError(f"transpose expects a 2-D tensor, got shape {a.data.shape}")

    def backward(g, acc):
        acc(a, g.T)

    return Tensor._from_op(a.data.T, (a,), backward)


def stack_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equal-length 1-D tensors into a [T, n] matrix."""
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("stack_rows needs at least one tensor")
    for t in tensors:
        if t.data.shape != tensors[0].data.shape or t.data.ndim != 1:
            raise ValueError(
                f"stack_rows needs equal-length 1-D tensors, got shapes "
                f"{[t.data.shape for t in tensors]}")
    out = np.stack([t.data for t in tensors])

    def backward(g, acc):
        for row, t in enumerate(tensors):
            if t.requires_grad:
                acc(t, g[row])

    return Tensor._from_op(out, tuple(tensors), backward)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    # Split by sign to avoid exp overflow warnings on large negatives.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g, acc):
        acc(a, g * out * (1.0 - out), owned=True)

    return Tensor._from_op(out, (a,), backward)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)

    def backward(g, acc):
        acc(a, g * (1.0 - out * out), owned=True)

    return Tensor._from_op(out, (a,), backward)


def dropout(a, rate: float, training: bool, rng: Optional["Rng"] = None) -> Tensor:
    """Inverted dropout: zero with probability ``rate``, scale rest by 1/(1-rate).

    Inference mode (``training=False``) is the identity.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    a = _as_tensor(a)
    if not training or rate == 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs an Rng")
    keep = rng.random(a.data.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    factor = keep * scale
    out = a.data * factor

    def backward(g, acc):
        acc(a, g * factor, owned=True)

    return Tensor._from_op(out, (a,), backward)


# -- convolution -------------------------------------------------------------


def conv2d_output_shape(h: int, w: int, k: int, stride: int, padding: int) -> tuple[int, int]:
    return ((h + 2 * padding - k) // stride + 1,
            (w + 2 * padding - k) // stride + 1)


def _im2col(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    """[N,C,Hp,Wp] -> [C*k*k, N*H'*W'] patch matrix (copies)."""
    n, c, hp, wp = xp.shape
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, :, :]          # [N,C,H',W',k,k]
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, n * ho * wo)
    return np.ascontiguousarray(cols)


def _col2im(dcols: np.ndarray, xp_shape: tuple, k: int, stride: int) -> np.ndarray:
    """Scatter-add the patch-matrix gradient back onto the padded input."""
    n, c, hp, wp = xp_shape
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    dxp = np.zeros(xp_shape, dtype=np.float64)
    d = dcols.reshape(c, k, k, n, ho, wo).transpose(3, 0, 1, 2, 4, 5)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += d[:, :, i, j]
    return dxp


def conv2d(x, weight, bias, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``x`` is [C_in,H,W] or batched [N,C_in,H,W]; ``weight`` is
    [C_out,C_in,k,k] with odd square k; ``bias`` is [C_out].  Output spatial
    extents follow floor((H + 2*padding - k)/stride) + 1.  Implemented as
    im2col + one GEMM so results are deterministic for a fixed BLAS.
    """
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ValueError(f"conv2d: input must be 3-D or 4-D, got shape {x.data.shape}")
    wd = weight.data
    if wd.ndim != 4 or wd.shape[2] != wd.shape[3]:
        raise ValueError(f"conv2d: weight must be [C_out,C_in,k,k], got {wd.shape}")
    k = wd.shape[2]
    if k % 2 != 1:
        raise ValueError(f"conv2d: kernel size must be odd, got {k}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: need stride >= 1 and padding >= 0, got {stride}, {padding}")
    n, cin, h, w = xd.shape
    if cin != wd.shape[1]:
        raise ValueError(
            f"conv2d: input has {cin} channels but weight expects {wd.shape[1]} "
            f"(input {x.data.shape}, weight {wd.shape})")
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ValueError(
            f"conv2d: padded extents ({h + 2 * padding}x{w + 2 * padding}) "
            f"smaller than kernel {k}")
    if bias.data.shape != (wd.shape[0],):
        raise ValueError(
            f"conv2d: bias shape {bias.data.shape} does not match {wd.shape[0]} filters")

    cout = wd.shape[0]
    if padding:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = xd
    ho, wo = conv2d_output_shape(h, w, k, stride, padding)
    cols = _im2col(xp, k, stride)                       # [Cin*k*k, N*Ho*Wo]
    wmat = wd.reshape(cout, cin * k * k)
    ymat = wmat @ cols + bias.data[:, None]             # [Cout, N*Ho*Wo]
    out = ymat.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)
    if squeeze:
        out = out[0]
    out = np.ascontiguousarray(out)

    def backward(g, acc):
        gd = g[None] if squeeze else g
        gmat = np.ascontiguousarray(gd.transpose(1, 0, 2, 3)).reshape(cout, n * ho * wo)
        if bias.requires_grad:
            acc(bias, gmat.sum(axis=1), owned=True)
        if weight.requires_grad:
            acc(weight, (gmat @ cols.T).reshape(wd.shape), owned=True)
        if x.requires_grad:
            dcols = wmat.T @ gmat
            dxp = _col2im(dcols, xp.shape, k, stride)
            if padding:
                dxp = dxp[:, :, padding:padding + h, padding:padding + w]
            acc(x, dxp[0] if squeeze else dxp, owned=True)

    return Tensor._from_op(out, (x, weight, bias), backward)


# -- deterministic randomness -------------------------------------------------


class Rng:
    """Counter-based deterministic random stream (Philox).

    The (seed, stream) pair fully determines the value sequence, independent
    of platform; ``split`` derives an independent stream from the same seed.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        self._gen = np.random.Generator(
            np.random.Philox(key=np.array([self.seed, self.stream], dtype=np.uint64)))

    def split(self, stream: int) -> "Rng":
        """Independent stream derived from the same seed."""
        return Rng(self.seed, stream)

    def random(self, size=None) -> np.ndarray:
        """Uniform doubles in [0, 1)."""
        return self._gen.random(size)

    def uniform(self, low: float, high: float, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None):
        """Uniform integers in [low, high]."""
        return self._gen.integers(low, high, size=size, endpoint=True)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
