"""Minimal reverse-mode autodiff tensor on top of numpy.

Every op returns a new :class:`Tensor`; when any input requires a gradient the
result remembers its parents and a closure that pushes the output gradient
back to them.  ``backward`` walks the graph once in reverse topological order
and then consumes it.
"""
from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand extents are incompatible with the requested op."""


class GraphError(RuntimeError):
    """Misuse of the gradient tape (non-scalar loss, reused graph, stale grads)."""


class ParameterError(ValueError):
    pass


class Rng:
    """Seeded generator backed by numpy's PCG64 bit generator.

    PCG64 is a documented, platform-independent algorithm, so the same seed
    gives the same stream everywhere numpy runs.
    """

    algorithm = "PCG64"

    def __init__(self, seed: int):
        if seed < 0:
            raise ParameterError("seed must be a non-negative integer")
        self.seed = int(seed)
        self.gen = np.random.Generator(np.random.PCG64(self.seed))

    def spawn(self, offset: int) -> "Rng":
        """Independent child stream, deterministic in (seed, offset)."""
        return Rng(int(np.random.SeedSequence([self.seed, offset]).generate_state(1)[0]))

    def normal(self, size, std: float = 1.0) -> np.ndarray:
        return self.gen.standard_normal(size) * std

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def random(self, size) -> np.ndarray:
        return self.gen.random(size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self.gen.choice(n, size=size, replace=replace)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 _parents: tuple = (), _op: str = ""):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._op = _op
        self._consumed = False

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def _accum(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        """Populate ``.grad`` on every tracked tensor reachable from this scalar.

        The tape is consumed: a second call raises :class:`GraphError`.  Leaves
        still holding a gradient from an earlier pass must be reset first
        (``zero_grad``); accumulation across passes is deliberately refused.
        """
        if self.data.size != 1:
            raise GraphError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise GraphError("graph already consumed by a previous backward()")
        if not self.requires_grad:
            raise GraphError("loss does not depend on any tensor requiring grad")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        leaves = [n for n in order if not n._parents]
        leaf_ids = {id(n) for n in leaves}
        stale = [n for n in leaves if n.grad is not None]
        if stale:
            raise GraphError(f"{len(stale)} leaf tensor(s) hold gradients from an earlier "
                             "backward(); call zero_grad() before reusing them")
        for n in order:
            if n._parents:
                n.grad = None

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        for node in order:
            node._backward = None
            node._parents = ()
            node._consumed = True
        # the loss keeps its grad; intermediate grads are dropped to free memory
        for node in order:
            if node is not self and id(node) not in leaf_ids:
                node.grad = None

    # arithmetic ---------------------------------------------------------
    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, _lift(other, self))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, _lift(-1.0, self))

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype), dtype=like.dtype)


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str,
            backward: Callable[[np.ndarray], None]) -> Tensor:
    track = any(p.requires_grad for p in parents)
    out = Tensor(data, dtype=data.dtype, requires_grad=track,
                 _parents=tuple(parents) if track else (), _op=op)
    if track:
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))
    return _result(a.data + b.data, (a, b), "add", bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.shape))
    return _result(a.data - b.data, (a, b), "sub", bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))
    return _result(a.data * b.data, (a, b), "mul", bw)


def tsum(a: Tensor) -> Tensor:
    def bw(g):
        a._accum(np.broadcast_to(g, a.shape))
    return _result(np.asarray(a.data.sum(), dtype=a.dtype), (a,), "sum", bw)


def tmean(a: Tensor) -> Tensor:
    n = a.data.size

    def bw(g):
        a._accum(np.broadcast_to(g / n, a.shape))
    return _result(np.asarray(a.data.mean(), dtype=a.dtype), (a,), "mean", bw)


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0

    def bw(g):
        a._accum(g * pos)
    return _result(np.where(pos, a.data, 0).astype(a.dtype), (a,), "relu", bw)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(a.dtype)

    def bw(g):
        a._accum(g * s * (1 - s))
    return _result(s, (a,), "sigmoid", bw)


def _check4(x: Tensor, name: str):
    if x.data.ndim != 4:
        raise ShapeError(f"{name} expects a 4-D tensor [N,C,H,W], got shape {x.shape}")


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Patch matrix [k*k*C, N*H*W] of a same-padded input, rows ordered (di, dj, c)."""
    n, c, h, w = x.shape
    p = k // 2
    xt = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))).transpose(1, 0, 2, 3)
    cols = np.empty((k, k, c, n, h, w), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[i, j] = xt[:, :, i:i + h, j:j + w]
    return cols.reshape(k * k * c, n * h * w)


def _correlate(x: np.ndarray, w: np.ndarray, cols: Optional[np.ndarray] = None) -> np.ndarray:
    """Same-padded stride-1 cross-correlation: x[N,C,H,W] * w[F,C,k,k] -> [N,F,H,W]."""
    n, c, h, wd = x.shape
    f, _, k, _ = w.shape
    if k == 1:
        out = w[:, :, 0, 0] @ x.transpose(1, 0, 2, 3).reshape(c, -1)
    else:
        if cols is None:
            cols = _im2col(x, k)
        out = w.transpose(0, 2, 3, 1).reshape(f, -1) @ cols
    return out.reshape(f, n, h, wd).transpose(1, 0, 2, 3)


def _kernel_grad(x: np.ndarray, g: np.ndarray, k: int, cols: Optional[np.ndarray] = None) -> np.ndarray:
    n, c, h, wd = x.shape
    f = g.shape[1]
    gf = g.transpose(1, 0, 2, 3).reshape(f, -1)
    if k == 1:
        return (gf @ x.transpose(1, 0, 2, 3).reshape(c, -1).T)[:, :, None, None]
    if cols is None:
        cols = _im2col(x, k)
    return (gf @ cols.T).reshape(f, k, k, c).transpose(0, 3, 1, 2)


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Stride-1 cross-correlation with zero 'same' padding (odd kernels only)."""
    _check4(x, "conv2d input")
    if kernel.data.ndim != 4:
        raise ShapeError(f"conv2d kernel must be [F,C,k,k], got {kernel.shape}")
    f, c, kh, kw = kernel.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d kernel must be square with odd size, got {kh}x{kw}")
    if x.shape[1] != c:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels but kernel expects {c}")
    if bias is not None and bias.shape != (f,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {f} filters")

    cols = _im2col(x.data, kh) if kh > 1 else None
    out = _correlate(x.data, kernel.data, cols)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = out.astype(x.dtype, copy=False)
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def bw(g):
        if x.requires_grad:
            # adjoint of same-padded correlation: correlate with the flipped, transposed kernel
            wt = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            x._accum(_correlate(g, np.ascontiguousarray(wt)))
        if kernel.requires_grad:
            kernel._accum(_kernel_grad(x.data, g, kh, cols))
        if bias is not None and bias.requires_grad:
            bias._accum(g.sum(axis=(0, 2, 3)))
    return _result(out, parents, "conv2d", bw)


def maxpool2d(x: Tensor, window: int = 2) -> Tensor:
    """Non-overlapping max pooling; gradient goes to the first maximum of each window."""
    _check4(x, "maxpool2d input")
    n, c, h, w = x.shape
    if h % window or w % window:
        raise ShapeError(f"maxpool2d: spatial extent {h}x{w} not divisible by {window}")
    ho, wo = h // window, w // window
    blocks = (x.data.reshape(n, c, ho, window, wo, window)
              .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, window * window))
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = (gb.reshape(n, c, ho, wo, window, window)
              .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w))
        x._accum(gx)
    return _result(out, (x,), "maxpool2d", bw)


def upsample2d(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling by an integer factor."""
    _check4(x, "upsample2d input")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def bw(g):
        x._accum(g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)))
    return _result(out, (x,), "upsample2d", bw)


class NormState:
    """Running per-channel statistics of one batch-norm layer."""

    __slots__ = ("mean", "var")

    def __init__(self, channels: int, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)

    def copy(self) -> "NormState":
        s = NormState.__new__(NormState)
        s.mean = self.mean.copy()
        s.var = self.var.copy()
        return s


BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: NormState,
                mode: str = "train", eps: float = BN_EPS, momentum: float = BN_MOMENTUM) -> Tensor:
    """Per-channel batch normalisation over (N, H, W).

    Train mode uses batch statistics and moves the running estimates
    (the running variance is the unbiased estimate); eval mode uses the
    running estimates only.
    """
    _check4(x, "batchnorm2d input")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: gamma/beta must have shape ({c},)")
    if mode not in ("train", "eval"):
        raise ParameterError(f"unknown mode {mode!r}")
    xd = x.data
    g_ = gamma.data[None, :, None, None]
    b_ = beta.data[None, :, None, None]

    if mode == "eval":
        inv = 1.0 / np.sqrt(state.var.astype(xd.dtype) + eps)
        xhat = (xd - state.mean.astype(xd.dtype)[None, :, None, None]) * inv[None, :, None, None]
        out = (g_ * xhat + b_).astype(xd.dtype, copy=False)

        def bw_eval(g):
            if x.requires_grad:
                x._accum(g * g_ * inv[None, :, None, None])
            if gamma.requires_grad:
                gamma._accum((g * xhat).sum(axis=(0, 2, 3)))
            if beta.requires_grad:
                beta._accum(g.sum(axis=(0, 2, 3)))
        return _result(out, (x, gamma, beta), "batchnorm2d", bw_eval)

    m = n * h * w
    if m < 2:
        raise ShapeError("batchnorm2d: train mode needs at least 2 values per channel "
                         "(batch variance is degenerate)")
    mu = xd.mean(axis=(0, 2, 3))
    var = xd.var(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
    out = (g_ * xhat + b_).astype(xd.dtype, copy=False)

    state.mean[:] = (1 - momentum) * state.mean + momentum * mu
    state.var[:] = (1 - momentum) * state.var + momentum * var * (m / (m - 1))

    def bw(g):
        if gamma.requires_grad:
            gamma._accum((g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            beta._accum(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gxhat = g * g_
            s1 = gxhat.mean(axis=(0, 2, 3), keepdims=True)
            s2 = (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
            x._accum(inv[None, :, None, None] * (gxhat - s1 - xhat * s2))
    return _result(out, (x, gamma, beta), "batchnorm2d", bw)


def dropout(x: Tensor, rate: float = 0.2, mode: str = "train", rng: Optional[Rng] = None) -> Tensor:
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must satisfy 0 <= rate < 1, got {rate}")
    if mode == "eval" or rate == 0.0:
        return x
    if rng is None:
        raise ParameterError("train-mode dropout needs an Rng")
    keep = (rng.random(x.shape) >= rate)
    scale = np.asarray(1.0 / (1.0 - rate), dtype=x.dtype)
    mask = keep.astype(x.dtype) * scale

    def bw(g):
        x._accum(g * mask)
    return _result(x.data * mask, (x,), "dropout", bw)


def mse_loss(x: Tensor, x_hat: Tensor, weight: Optional[np.ndarray] = None) -> Tensor:
    """Mean squared error over all elements.

    ``weight`` (broadcastable to x) restricts the loss to selected pixels;
    the mean is then taken over the weighted element count.
    """
    if x.shape != x_hat.shape:
        raise ShapeError(f"mse_loss: shapes differ {x.shape} vs {x_hat.shape}")
    diff = x_hat.data - x.data
    if weight is None:
        n = diff.size
        w = None
    else:
        w = np.broadcast_to(np.asarray(weight, dtype=x.dtype), x.shape)
        n = max(float(w.sum()), 1.0)
    sq = diff * diff if w is None else diff * diff * w
    out = np.asarray(sq.sum() / n, dtype=x.dtype)

    def bw(g):
        d = 2.0 * diff / n if w is None else 2.0 * diff * w / n
        if x_hat.requires_grad:
            x_hat._accum(g * d)
        if x.requires_grad:
            x._accum(-g * d)
    return _result(out, (x, x_hat), "mse", bw)


def zero_grads(tensors: Iterable[Tensor]):
    for t in tensors:
        t.grad = None
