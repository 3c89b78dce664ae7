"""Dense float64 tensors with tape-style reverse-mode automatic differentiation.

Every operation builds a new `Tensor` that remembers its parents and a
backward closure, tagged with a monotonically increasing execution id.
`Tensor.backward()` visits the reachable graph in exact reverse execution
order and accumulates gradients additively, so fan-out sums as it must.
Graphs are built fresh per forward pass and never reused.

Image tensors are laid out H x W x C; row-major flattening of that layout is
the horizontal raster order the attention kernels scan in.
"""

from __future__ import annotations

import itertools
import threading
from collections import Counter
from contextlib import contextmanager

import numpy as np

from .errors import ConfigError, ShapeError

_ids = itertools.count()

op_counts: Counter = Counter()


def reset_op_counts() -> None:
    op_counts.clear()


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation paths)."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """A float64 array plus an optional same-shape gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # keeps 0-d scalars 0-d
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, seed=None) -> None:
        """Backpropagate from this tensor.

        `seed` defaults to ones (the usual case is a scalar loss). Nodes are
        visited strictly in reverse order of creation, so every node's
        gradient is complete before its own backward closure runs.
        """
        if seed is None:
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=np.float64)
            if seed.shape != self.data.shape:
                raise ShapeError(f"seed shape {seed.shape} != tensor shape {self.data.shape}")
        nodes = []
        seen = set()
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node._parents)
        nodes.sort(key=lambda n: n._id, reverse=True)
        _accumulate(self, seed)
        for node in nodes:
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar (same-shape elementwise, matrix product)
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def make_op(data, parents, backward, name: str | None = None) -> Tensor:
    """Create an op result wired into the graph.

    `backward(grad)` must push gradient contributions into the parents via
    `accumulate`. Extension modules (the WKV kernels) use this hook.
    """
    if name:
        op_counts[name] += 1
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


accumulate = _accumulate


def _same_shape(a: Tensor, b: Tensor, opname: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{opname}: shape {a.data.shape} vs {b.data.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return make_op(a.data + b.data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return make_op(a.data - b.data, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        _accumulate(a, g * bd)
        _accumulate(b, g * ad)

    return make_op(ad * bd, (a, b), backward, "mul")


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, -g)

    return make_op(-a.data, (a,), backward, "neg")


def scale(x: Tensor, s: Tensor) -> Tensor:
    """Multiply by a scalar tensor (one learnable element)."""
    if s.data.size != 1:
        raise ShapeError(f"scale: scalar expected, got shape {s.data.shape}")
    xd, sv = x.data, float(s.data.reshape(()))

    def backward(g):
        _accumulate(x, g * sv)
        _accumulate(s, np.full(s.data.shape, (g * xd).sum()))

    return make_op(xd * sv, (x, s), backward, "scale")


def mul_const(x: Tensor, c: float) -> Tensor:
    def backward(g):
        _accumulate(x, g * c)

    return make_op(x.data * c, (x,), backward, "mul_const")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: {a.data.shape} x {b.data.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        _accumulate(a, g @ bd.T)
        _accumulate(b, ad.T @ g)

    return make_op(ad @ bd, (a, b), backward, "matmul")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    y = np.empty_like(xd)
    pos = xd >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    y[~pos] = ex / (1.0 + ex)

    def backward(g):
        _accumulate(x, g * y * (1.0 - y))

    return make_op(y, (x,), backward, "sigmoid")


def squared_relu(x: Tensor) -> Tensor:
    r = np.maximum(x.data, 0.0)

    def backward(g):
        _accumulate(x, g * 2.0 * r)

    return make_op(r * r, (x,), backward, "squared_relu")


def abs_(x: Tensor) -> Tensor:
    sgn = np.sign(x.data)

    def backward(g):
        _accumulate(x, g * sgn)

    return make_op(np.abs(x.data), (x,), backward, "abs")


def mean(x: Tensor) -> Tensor:
    n = x.data.size

    def backward(g):
        _accumulate(x, np.full(x.data.shape, float(g) / n))

    return make_op(x.data.mean(), (x,), backward, "mean")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row standardization over the last axis, then affine."""
    xd = x.data
    C = xd.shape[-1]
    if gamma.data.shape != (C,) or beta.data.shape != (C,):
        raise ShapeError(f"layer_norm: affine shape {gamma.data.shape}/{beta.data.shape} vs C={C}")
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv
    out = gamma.data * xh + beta.data

    def backward(g):
        _accumulate(gamma, (g * xh).reshape(-1, C).sum(axis=0))
        _accumulate(beta, g.reshape(-1, C).sum(axis=0))
        dxh = g * gamma.data
        m1 = dxh.mean(axis=-1, keepdims=True)
        m2 = (dxh * xh).mean(axis=-1, keepdims=True)
        _accumulate(x, inv * (dxh - m1 - xh * m2))

    return make_op(out, (x, gamma, beta), backward, "layer_norm")


def _check_image(x: Tensor, opname: str) -> None:
    if x.data.ndim != 3:
        raise ShapeError(f"{opname}: expected H x W x C, got {x.data.shape}")


_einsum_paths: dict = {}


def _einsum(eq: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    key = (eq, a.shape, b.shape)
    path = _einsum_paths.get(key)
    if path is None:
        path = np.einsum_path(eq, a, b, optimize="optimal")[0]
        _einsum_paths[key] = path
    return np.einsum(eq, a, b, optimize=path)


def _windows(arr: np.ndarray, k: int) -> np.ndarray:
    """Zero-pad to `same` and return the (H, W, C, k, k) sliding view."""
    p = (k - 1) // 2
    padded = np.pad(arr, ((p, p), (p, p), (0, 0)))
    return np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(0, 1))


def depthwise_conv2d(x: Tensor, kernel: Tensor) -> Tensor:
    """Per-channel k x k convolution, zero same-padding, odd k only."""
    _check_image(x, "depthwise_conv2d")
    kd = kernel.data
    if kd.ndim != 3 or kd.shape[0] != kd.shape[1]:
        raise ShapeError(f"depthwise_conv2d: kernel {kd.shape}")
    k = kd.shape[0]
    if k % 2 == 0:
        raise ConfigError(f"depthwise_conv2d: kernel size must be odd, got {k}")
    if kd.shape[2] != x.data.shape[2]:
        raise ShapeError(f"depthwise_conv2d: channels {kd.shape[2]} vs {x.data.shape[2]}")
    win = _windows(x.data, k)
    out = _einsum("hwcij,ijc->hwc", win, kd)

    def backward(g):
        _accumulate(kernel, _einsum("hwcij,hwc->ijc", win, g))
        gwin = _windows(g, k)
        kflip = kd[::-1, ::-1]
        _accumulate(x, _einsum("hwcij,ijc->hwc", gwin, kflip))

    return make_op(out, (x, kernel), backward, "depthwise_conv2d")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Dense k x k convolution (H x W x Cin) -> (H x W x Cout), same padding."""
    _check_image(x, "conv2d")
    kd = kernel.data
    if kd.ndim != 4 or kd.shape[0] != kd.shape[1]:
        raise ShapeError(f"conv2d: kernel {kd.shape}")
    k = kd.shape[0]
    if k % 2 == 0:
        raise ConfigError(f"conv2d: kernel size must be odd, got {k}")
    if kd.shape[2] != x.data.shape[2]:
        raise ShapeError(f"conv2d: in-channels {kd.shape[2]} vs {x.data.shape[2]}")
    parents = [x, kernel]
    if bias is not None and bias.data.shape != (kd.shape[3],):
        raise ShapeError(f"conv2d: bias {bias.data.shape} vs Cout={kd.shape[3]}")

    if k == 1:  # pointwise: plain matrix product
        H, W, Cin = x.data.shape
        mat = kd[0, 0]
        out = x.data.reshape(-1, Cin) @ mat
        out = out.reshape(H, W, -1)

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            _accumulate(kernel, (x.data.reshape(-1, Cin).T @ g2)[None, None])
            _accumulate(x, (g2 @ mat.T).reshape(x.data.shape))
            if bias is not None:
                _accumulate(bias, g2.sum(axis=0))

    else:
        win = _windows(x.data, k)
        out = _einsum("hwcij,ijco->hwo", win, kd)

        def backward(g):
            _accumulate(kernel, _einsum("hwcij,hwo->ijco", win, g))
            gwin = _windows(g, k)
            kflip = kd[::-1, ::-1]
            _accumulate(x, _einsum("hwoij,ijco->hwc", gwin, kflip))
            if bias is not None:
                _accumulate(bias, g.reshape(-1, g.shape[-1]).sum(axis=0))

    if bias is not None:
        out = out + bias.data
        parents.append(bias)
    return make_op(out, parents, backward, "conv2d")


def pixel_unshuffle(x: Tensor, r: int = 2) -> Tensor:
    """Space-to-depth: H x W x C -> H/r x W/r x r*r*C."""
    _check_image(x, "pixel_unshuffle")
    H, W, C = x.data.shape
    if H % r or W % r:
        raise ShapeError(f"pixel_unshuffle: {H}x{W} not divisible by {r}")
    h, w = H // r, W // r
    out = x.data.reshape(h, r, w, r, C).transpose(0, 2, 1, 3, 4).reshape(h, w, r * r * C)

    def backward(g):
        gx = g.reshape(h, w, r, r, C).transpose(0, 2, 1, 3, 4).reshape(H, W, C)
        _accumulate(x, gx)

    return make_op(out, (x,), backward, "pixel_unshuffle")


def pixel_shuffle(x: Tensor, r: int = 2) -> Tensor:
    """Depth-to-space: H x W x r*r*C -> H*r x W*r x C. Inverse of pixel_unshuffle."""
    _check_image(x, "pixel_shuffle")
    h, w, rrC = x.data.shape
    if rrC % (r * r):
        raise ShapeError(f"pixel_shuffle: channels {rrC} not divisible by {r * r}")
    C = rrC // (r * r)
    out = x.data.reshape(h, w, r, r, C).transpose(0, 2, 1, 3, 4).reshape(h * r, w * r, C)

    def backward(g):
        gx = g.reshape(h, r, w, r, C).transpose(0, 2, 1, 3, 4).reshape(h, w, rrC)
        _accumulate(x, gx)

    return make_op(out, (x,), backward, "pixel_shuffle")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check_image(a, "concat_channels")
    _check_image(b, "concat_channels")
    if a.data.shape[:2] != b.data.shape[:2]:
        raise ShapeError(f"concat_channels: spatial {a.data.shape[:2]} vs {b.data.shape[:2]}")
    c1 = a.data.shape[2]

    def backward(g):
        _accumulate(a, g[:, :, :c1])
        _accumulate(b, g[:, :, c1:])

    return make_op(np.concatenate([a.data, b.data], axis=2), (a, b), backward, "concat_channels")


def slice_channels(x: Tensor, lo: int, hi: int) -> Tensor:
    def backward(g):
        gx = np.zeros_like(x.data)
        gx[..., lo:hi] = g
        _accumulate(x, gx)

    return make_op(x.data[..., lo:hi].copy(), (x,), backward, "slice_channels")


def reshape(x: Tensor, shape) -> Tensor:
    orig = x.data.shape

    def backward(g):
        _accumulate(x, g.reshape(orig))

    return make_op(x.data.reshape(shape), (x,), backward, "reshape")


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Row permutation/selection; backward scatter-adds."""
    idx = np.asarray(idx)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        _accumulate(x, gx)

    return make_op(x.data[idx], (x,), backward, "gather_rows")


def shift2d(x: Tensor, dy: int, dx: int) -> Tensor:
    """out[h, w] = x[h - dy, w - dx], zero-filled at the borders."""
    _check_image(x, "shift2d")
    H, W, _ = x.data.shape
    out = np.zeros_like(x.data)
    ys = slice(max(dy, 0), H + min(dy, 0))
    xs = slice(max(dx, 0), W + min(dx, 0))
    ys_src = slice(max(-dy, 0), H + min(-dy, 0))
    xs_src = slice(max(-dx, 0), W + min(-dx, 0))
    out[ys, xs] = x.data[ys_src, xs_src]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[ys_src, xs_src] = g[ys, xs]
        _accumulate(x, gx)

    return make_op(out, (x,), backward, "shift2d")


def select(x: Tensor, index) -> Tensor:
    """Single-element pick as a scalar tensor."""
    index = tuple(index)

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        _accumulate(x, gx)

    return make_op(x.data[index], (x,), backward, "select")


def _reflect_indices(n: int, before: int, after: int) -> np.ndarray:
    # reflect without repeating the edge sample: n=4, before=2 -> [2,1,0,1,2,3,...]
    idx = np.arange(-before, n + after)
    period = 2 * (n - 1) if n > 1 else 1
    idx = np.abs(idx) % period
    return np.where(idx >= n, period - idx, idx)


def pad_reflect2d(x: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    _check_image(x, "pad_reflect2d")
    H, W, _ = x.data.shape
    iy = _reflect_indices(H, top, bottom)
    ix = _reflect_indices(W, left, right)
    out = x.data[iy][:, ix]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (iy[:, None], ix[None, :]), g)
        _accumulate(x, gx)

    return make_op(out, (x,), backward, "pad_reflect2d")


def crop2d(x: Tensor, h0: int, h1: int, w0: int, w1: int) -> Tensor:
    _check_image(x, "crop2d")

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[h0:h1, w0:w1] = g
        _accumulate(x, gx)

    return make_op(x.data[h0:h1, w0:w1].copy(), (x,), backward, "crop2d")
