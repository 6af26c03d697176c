"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every operation records its parents and a closure mapping the output
gradient to one gradient per parent. ``backward`` walks the recorded graph
in reverse topological order and returns gradients for the requested leaves
without writing anything onto the tensors themselves, so several graphs may
share the same parameter leaves safely.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Tensor:
    """A dense float64 array plus the bookkeeping needed for backprop."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: tuple, backward: Callable) -> Tensor:
    tracked = any(p.requires_grad for p in parents)
    if not tracked:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); the gradient is passed only where a was above the floor."""
    keep = a.data >= floor
    return _node(np.where(keep, a.data, floor), (a,), lambda g: (g * keep,))


# -- reductions and shape ----------------------------------------------------

def tsum(a: Tensor, axis=None) -> Tensor:
    out = a.data.sum(axis=axis)

    def backward(g):
        g = np.asarray(g)
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), backward)


def mean(a: Tensor, axis=None) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    total = tsum(a, axis)
    return _node(total.data / count, (total,), lambda g: (g / count,))


def reshape(a: Tensor, shape) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def take_rows(a: Tensor, cols: np.ndarray) -> Tensor:
    """Pick a[i, cols[i]] for every row i of a 2-D tensor."""
    cols = np.asarray(cols, dtype=np.int64)
    rows = np.arange(a.shape[0])

    def backward(g):
        out = np.zeros(a.shape)
        out[rows, cols] = g
        return (out,)

    return _node(a.data[rows, cols], (a,), backward)


def index(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)

    def backward(g):
        out = np.zeros(a.shape)
        np.add.at(out, idx, g)
        return (out,)

    return _node(a.data[idx], (a,), backward)


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _node(a.data @ b.data, (a, b), backward)


def pad_input(x: np.ndarray, k: int, padding: str) -> tuple[np.ndarray, int]:
    """Zero-pad NCHW data for a k×k kernel; returns the padded array and the pad width."""
    if padding == "same":
        if k % 2 == 0:
            raise ValueError("same padding requires an odd kernel size")
        p = (k - 1) // 2
        return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))), p
    if padding == "valid":
        return x, 0
    raise ValueError(f"unknown padding {padding!r}")


def im2col(xp: np.ndarray, k: int) -> np.ndarray:
    """Patches of padded NCHW data as (N, C·k·k, Ho·Wo), channel-major like OIkk weights."""
    n, c, hp, wp = xp.shape
    ho, wo = hp - k + 1, wp - k + 1
    # Windows of the output size slid over the k×k offsets keep the copy row-contiguous.
    return sliding_window_view(xp, (ho, wo), axis=(2, 3)).reshape(n, c * k * k, ho * wo)


# Multi-channel convolutions over a full minibatch run faster in frequency space;
# single images or single-channel inputs are cheaper as im2col + matmul.
FFT_MIN_CHANNELS = 4
FFT_MIN_BATCH = 24


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: str = "valid") -> Tensor:
    """Stride-1 cross-correlation of NCHW input with OIkk square kernels."""
    k = w.shape[-1]
    xp, p = pad_input(x.data, k, padding)
    n, c, hp, wp = xp.shape
    if c >= FFT_MIN_CHANNELS and n >= FFT_MIN_BATCH:
        return _conv2d_fft(x, w, b, xp, p)
    co = w.shape[0]
    ho, wo = hp - k + 1, wp - k + 1
    cols = im2col(xp, k)
    out = np.matmul(w.data.reshape(co, c * k * k), cols).reshape(n, co, ho, wo)
    parents = (x, w) if b is None else (x, w, b)
    if b is not None:
        out += b.data[None, :, None, None]

    def backward(g):
        g3 = g.reshape(n, co, ho * wo)
        gw = None
        if w.requires_grad:
            gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gx = None
        if x.requires_grad:
            size = (hp, wp)
            gx = _input_grad_fft(np.fft.rfft2(g, s=size), np.fft.rfft2(w.data, s=size), size, p)
        grads = (gx, gw)
        if b is not None:
            grads += (g3.sum(axis=(0, 2)),)
        return grads

    return _node(out, parents, backward)


def _input_grad_fft(gf: np.ndarray, wf: np.ndarray, size: tuple[int, int], p: int) -> np.ndarray:
    """Full convolution of the output gradient with the kernel, from their transforms.

    The transform size equals the padded input size, so nothing wraps around.
    """
    n, co, fh, fw = gf.shape
    c = wf.shape[1]
    prod = np.matmul(gf.reshape(n, co, fh * fw).transpose(2, 0, 1),
                     wf.reshape(co, c, fh * fw).transpose(2, 0, 1))
    gxp = np.fft.irfft2(prod.transpose(1, 2, 0).reshape(n, c, fh, fw), s=size)
    return gxp[:, :, p:size[0] - p, p:size[1] - p] if p else gxp


def _conv2d_fft(x: Tensor, w: Tensor, b: Tensor | None, xp: np.ndarray, p: int) -> Tensor:
    n, c, hp, wp = xp.shape
    co, _, k, _ = w.shape
    size = (hp, wp)
    xf = np.fft.rfft2(xp, s=size)
    fh, fw = xf.shape[2:]
    xf = xf.reshape(n, c, fh * fw).transpose(2, 0, 1)
    # Correlation is convolution with the flipped kernel; the valid part starts at k-1.
    flipped = np.fft.rfft2(w.data[:, :, ::-1, ::-1], s=size).reshape(co, c, fh * fw).transpose(2, 1, 0)
    full = np.fft.irfft2(np.matmul(xf, flipped).transpose(1, 2, 0).reshape(n, co, fh, fw), s=size)
    out = np.ascontiguousarray(full[:, :, k - 1:, k - 1:])
    parents = (x, w) if b is None else (x, w, b)
    if b is not None:
        out += b.data[None, :, None, None]

    def backward(g):
        gf = np.fft.rfft2(g, s=size)
        gw = gx = None
        if w.requires_grad:
            # Cross-correlation of each input map with the output gradient, summed over the batch.
            gflat = gf.reshape(n, co, fh * fw).transpose(2, 0, 1)
            prod = np.matmul(gflat.conj().transpose(0, 2, 1), xf)
            gw = np.fft.irfft2(prod.transpose(1, 2, 0).reshape(co, c, fh, fw), s=size)[:, :, :k, :k]
        if x.requires_grad:
            gx = _input_grad_fft(gf, np.fft.rfft2(w.data, s=size), size, p)
        grads = (gx, gw)
        if b is not None:
            grads += (g.sum(axis=(0, 2, 3)),)
        return grads

    return _node(out, parents, backward)


# -- probability -------------------------------------------------------------

def softmax(z: Tensor, axis: int = -1) -> Tensor:
    shifted = z.data - z.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (z,), backward)


def log_softmax(z: Tensor, axis: int = -1) -> Tensor:
    shifted = z.data - z.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _node(out, (z,), backward)


# -- reverse pass ------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def grad(loss: Tensor, wrt: Iterable[Tensor], allow_unused: bool = False) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to each tensor in ``wrt``.

    Raises ValueError if the loss is not a scalar, or if none of the requested
    tensors feed into it (a disconnected graph). Individual unused leaves get
    a zero gradient only when ``allow_unused`` is set.
    """
    wrt = list(wrt)
    if loss.data.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if loss.requires_grad:
        for node in reversed(_topo_order(loss)):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    reached = [id(t) in grads for t in wrt]
    if wrt and not any(reached):
        raise ValueError("disconnected graph: loss does not depend on any requested tensor")
    if not all(reached) and not allow_unused:
        missing = [t.name or repr(t) for t, r in zip(wrt, reached) if not r]
        raise ValueError(f"disconnected graph: no path to {', '.join(missing)}")
    out = []
    for t, r in zip(wrt, reached):
        g = grads[id(t)] if r else np.zeros_like(t.data)
        out.append(np.asarray(g, dtype=np.float64).reshape(t.shape))
    return out
