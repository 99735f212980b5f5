"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

A Tensor wraps an ndarray and records the op that produced it; calling
``backward()`` on a scalar walks the tape in reverse topological order and
accumulates gradients into every ancestor with ``requires_grad``.  The tape
is built per forward pass and freed after backward; there is no support for
higher-order derivatives or general broadcasting (tensor ops require equal
shapes, scalars are always fine).

Spatial data is channel-first ``(C, H, W)``, row-major.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, FormatError


class Tensor:
    """A node of the differentiation graph."""

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def backward(self):
        """Populate ``grad`` on every requires_grad ancestor of this scalar."""
        if self.data.size != 1:
            raise ContractError(f"backward() requires a scalar loss, got shape {self.shape}")
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        _accum(self, np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        # free the tape; interior grads are only needed during the sweep
        for node in topo:
            if node._parents:
                node._parents = ()
                node._backward = None
                node.grad = None

    # operator sugar; scalars are accepted everywhere
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _accum(t, g):
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(shape, fan_in, rng):
    """Trainable tensor with uniform fan-in init, ±1/sqrt(fan_in)."""
    bound = 1.0 / math.sqrt(max(1, fan_in))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _node(data, parents, backward_fn):
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _check_same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b):
    if not isinstance(b, Tensor) and not isinstance(a, Tensor):
        raise ContractError("add with no tensor operand")
    if not isinstance(b, Tensor) or b.data.ndim == 0:
        a = as_tensor(a)
        s = b.data if isinstance(b, Tensor) else float(b)

        def back(g):
            if a.requires_grad:
                _accum(a, g)
            if isinstance(b, Tensor) and b.requires_grad:
                _accum(b, np.sum(g))

        parents = (a, b) if isinstance(b, Tensor) else (a,)
        return _node(a.data + s, parents, back)
    if not isinstance(a, Tensor) or a.data.ndim == 0:
        return add(b, a)
    _check_same_shape(a, b, "add")

    def back(g):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, g)

    return _node(a.data + b.data, (a, b), back)


def sub(a, b):
    if isinstance(b, Tensor):
        return add(a, mul(b, -1.0))
    return add(a, -float(b))


def mul(a, b):
    if not isinstance(b, Tensor) or b.data.ndim == 0:
        a = as_tensor(a)
        s = b.data if isinstance(b, Tensor) else float(b)

        def back(g):
            if a.requires_grad:
                _accum(a, g * s)
            if isinstance(b, Tensor) and b.requires_grad:
                _accum(b, np.sum(g * a.data))

        parents = (a, b) if isinstance(b, Tensor) else (a,)
        return _node(a.data * s, parents, back)
    if not isinstance(a, Tensor) or a.data.ndim == 0:
        return mul(b, a)
    _check_same_shape(a, b, "mul")

    def back(g):
        if a.requires_grad:
            _accum(a, g * b.data)
        if b.requires_grad:
            _accum(b, g * a.data)

    return _node(a.data * b.data, (a, b), back)


def div(a, b):
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / float(b))
    a = as_tensor(a)
    if a.data.ndim != 0:
        _check_same_shape(a, b, "div")

    def back(g):
        if a.requires_grad:
            _accum(a, (g / b.data) if a.data.ndim else np.sum(g / b.data))
        if b.requires_grad:
            _accum(b, -g * a.data / (b.data * b.data))

    return _node(a.data / b.data, (a, b), back)


def absolute(a):
    """Elementwise |a|; subgradient 0 at exactly 0, sign(a) elsewhere."""
    a = as_tensor(a)

    def back(g):
        _accum(a, g * np.sign(a.data))

    return _node(np.abs(a.data), (a,), back)


def relu(a):
    a = as_tensor(a)

    def back(g):
        _accum(a, g * (a.data > 0))

    return _node(np.maximum(a.data, 0.0), (a,), back)


def leaky_relu(a, slope=0.01):
    a = as_tensor(a)

    def back(g):
        _accum(a, g * np.where(a.data > 0, 1.0, slope))

    return _node(np.where(a.data > 0, a.data, slope * a.data), (a,), back)


def sigmoid(a):
    a = as_tensor(a)
    y = 1.0 / (1.0 + np.exp(-a.data))

    def back(g):
        _accum(a, g * y * (1.0 - y))

    return _node(y, (a,), back)


def exp(a):
    a = as_tensor(a)
    y = np.exp(a.data)

    def back(g):
        _accum(a, g * y)

    return _node(y, (a,), back)


def log(a):
    a = as_tensor(a)

    def back(g):
        _accum(a, g / a.data)

    return _node(np.log(a.data), (a,), back)


def clamp(a, lo, hi):
    """Elementwise clip; gradient is zero where the input is outside (lo, hi)."""
    a = as_tensor(a)
    inside = (a.data > lo) & (a.data < hi)

    def back(g):
        _accum(a, g * inside)

    return _node(np.clip(a.data, lo, hi), (a,), back)


def maximum(a, b):
    """Elementwise max of two same-shape tensors; ties route the gradient to a."""
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "maximum")
    take_a = a.data >= b.data

    def back(g):
        if a.requires_grad:
            _accum(a, g * take_a)
        if b.requires_grad:
            _accum(b, g * ~take_a)

    return _node(np.where(take_a, a.data, b.data), (a, b), back)


def select_abs_max(a, b):
    """Pick per element the value of larger magnitude, sign preserved.

    Ties on magnitude keep the larger signed value, so the selection is a
    total order and folding over a set is permutation invariant.
    """
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "select_abs_max")
    aa, ab = np.abs(a.data), np.abs(b.data)
    take_a = (aa > ab) | ((aa == ab) & (a.data >= b.data))

    def back(g):
        if a.requires_grad:
            _accum(a, g * take_a)
        if b.requires_grad:
            _accum(b, g * ~take_a)

    return _node(np.where(take_a, a.data, b.data), (a, b), back)


# ---------------------------------------------------------------------------
# shape ops and reductions


def reshape(a, shape):
    a = as_tensor(a)
    orig = a.data.shape

    def back(g):
        _accum(a, g.reshape(orig))

    return _node(a.data.reshape(shape), (a,), back)


def concat(parts, axis=0):
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat of zero tensors")
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accum(p, g[tuple(idx)])

    return _node(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), back)


def tsum(a):
    a = as_tensor(a)

    def back(g):
        _accum(a, np.full_like(a.data, float(g)))

    return _node(np.sum(a.data), (a,), back)


def tmean(a):
    a = as_tensor(a)
    n = a.data.size

    def back(g):
        _accum(a, np.full_like(a.data, float(g) / n))

    return _node(np.mean(a.data), (a,), back)


def tvariance(a):
    """Population variance over all elements."""
    a = as_tensor(a)
    n = a.data.size
    mu = np.mean(a.data)

    def back(g):
        _accum(a, float(g) * 2.0 * (a.data - mu) / n)

    return _node(np.var(a.data), (a,), back)


def channel_mean(a):
    """(C, H, W) -> (C,) spatial mean per channel."""
    a = as_tensor(a)
    if a.data.ndim != 3:
        raise DimensionError(f"channel_mean expects rank 3, got {a.data.shape}")
    _, h, w = a.data.shape

    def back(g):
        _accum(a, np.repeat(g / (h * w), h * w).reshape(a.data.shape))

    return _node(a.data.mean(axis=(1, 2)), (a,), back)


# ---------------------------------------------------------------------------
# linear and convolutional layers


def forward_dense(x, weights, bias):
    """y[i] = sum_j weights[i, j] * x[j] + bias[i]."""
    x, weights, bias = as_tensor(x), as_tensor(weights), as_tensor(bias)
    if x.data.ndim != 1 or weights.data.ndim != 2:
        raise DimensionError("forward_dense expects a vector input and a matrix weight")
    m, n = weights.data.shape
    if x.data.shape[0] != n or bias.data.shape != (m,):
        raise DimensionError(
            f"forward_dense: weights {weights.data.shape}, input {x.data.shape}, bias {bias.data.shape}"
        )

    def back(g):
        if x.requires_grad:
            _accum(x, weights.data.T @ g)
        if weights.requires_grad:
            _accum(weights, np.outer(g, x.data))
        if bias.requires_grad:
            _accum(bias, g)

    return _node(weights.data @ x.data + bias.data, (x, weights, bias), back)


def matmul2d(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul2d: {a.data.shape} @ {b.data.shape}")

    def back(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _node(a.data @ b.data, (a, b), back)


def _conv_patches(x_pad, kh, kw, stride):
    # (C, Hp, Wp) -> (C, H', W', kh, kw) strided view
    v = sliding_window_view(x_pad, (kh, kw), axis=(1, 2))
    return v[:, ::stride, ::stride]


def conv2d(x, kernels, stride=1, padding=0):
    """Cross-correlation of (C_in, H, W) with kernels (C_out, C_in, kh, kw)."""
    x, kernels = as_tensor(x), as_tensor(kernels)
    if x.data.ndim != 3 or kernels.data.ndim != 4:
        raise DimensionError("conv2d expects (C,H,W) input and (O,C,kh,kw) kernels")
    c_in, h, w = x.data.shape
    c_out, c_k, kh, kw = kernels.data.shape
    if c_k != c_in:
        raise DimensionError(f"conv2d: input has {c_in} channels, kernels expect {c_k}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    x_pad = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    h_out = (hp - kh) // stride + 1
    w_out = (wp - kw) // stride + 1
    patches = _conv_patches(x_pad, kh, kw, stride)[:, :h_out, :w_out]
    y = np.einsum("cxyij,ocij->oxy", patches, kernels.data)

    def back(g):
        if kernels.requires_grad:
            _accum(kernels, np.einsum("cxyij,oxy->ocij", patches, g))
        if x.requires_grad:
            gx_pad = np.zeros_like(x_pad)
            for i in range(kh):
                for j in range(kw):
                    gx_pad[:, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += np.einsum(
                        "oxy,oc->cxy", g, kernels.data[:, :, i, j]
                    )
            if padding:
                gx_pad = gx_pad[:, padding:-padding, padding:-padding]
            _accum(x, gx_pad)

    return _node(y, (x, kernels), back)


def conv_transpose2d(x, kernels, stride=2, padding=0, output_padding=0):
    """Transposed conv of (C_in, H, W) with kernels (C_in, C_out, kh, kw).

    Output spatial size is (H - 1) * stride - 2 * padding + kh + output_padding,
    where output_padding may be per-axis (oph, opw).  With kernels shared with
    a forward conv2d this is its exact adjoint.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if x.data.ndim != 3 or kernels.data.ndim != 4:
        raise DimensionError("conv_transpose2d expects (C,H,W) input and (C,O,kh,kw) kernels")
    c_in, h, w = x.data.shape
    c_k, c_out, kh, kw = kernels.data.shape
    if c_k != c_in:
        raise DimensionError(f"conv_transpose2d: input has {c_in} channels, kernels expect {c_k}")
    oph, opw = output_padding if isinstance(output_padding, tuple) else (output_padding, output_padding)
    if not (0 <= oph < stride and 0 <= opw < stride):
        raise DimensionError(f"conv_transpose2d: output_padding {output_padding} not in [0, {stride})")
    h_out = (h - 1) * stride - 2 * padding + kh + oph
    w_out = (w - 1) * stride - 2 * padding + kw + opw
    if h_out <= 0 or w_out <= 0:
        raise DimensionError("conv_transpose2d: non-positive output size")
    hp, wp = h_out + 2 * padding, w_out + 2 * padding
    y_pad = np.zeros((c_out, hp, wp))
    for i in range(kh):
        for j in range(kw):
            y_pad[:, i : i + stride * h : stride, j : j + stride * w : stride] += np.einsum(
                "cxy,co->oxy", x.data, kernels.data[:, :, i, j]
            )
    y = y_pad[:, padding : padding + h_out, padding : padding + w_out]

    def back(g):
        g_pad = np.pad(g, ((0, 0), (padding, padding), (padding, padding)))
        patches = _conv_patches(g_pad, kh, kw, stride)[:, :h, :w]
        if x.requires_grad:
            _accum(x, np.einsum("oxyij,coij->cxy", patches, kernels.data))
        if kernels.requires_grad:
            _accum(kernels, np.einsum("oxyij,cxy->coij", patches, x.data))

    return _node(y, (x, kernels), back)


def avg_pool2d(x, p):
    """Mean over disjoint p x p blocks, ceil mode (edge blocks may be partial)."""
    x = as_tensor(x)
    if x.data.ndim != 3:
        raise DimensionError("avg_pool2d expects (C,H,W)")
    c, h, w = x.data.shape
    ri = np.arange(0, h, p)
    ci = np.arange(0, w, p)
    sums = np.add.reduceat(np.add.reduceat(x.data, ri, axis=1), ci, axis=2)
    rc = np.minimum(ri + p, h) - ri
    cc = np.minimum(ci + p, w) - ci
    counts = np.outer(rc, cc)[None, :, :]
    y = sums / counts

    def back(g):
        gx = np.repeat(np.repeat(g / counts, p, axis=1), p, axis=2)
        _accum(x, gx[:, :h, :w])

    return _node(y, (x,), back)


def upsample_nearest(x, p, out_h, out_w):
    """Repeat each pixel p x p, then crop to (out_h, out_w)."""
    x = as_tensor(x)
    c, h, w = x.data.shape
    if h * p < out_h or w * p < out_w:
        raise DimensionError("upsample_nearest: target larger than repeated input")
    y = np.repeat(np.repeat(x.data, p, axis=1), p, axis=2)[:, :out_h, :out_w]

    def back(g):
        g_full = np.zeros((c, h * p, w * p))
        g_full[:, :out_h, :out_w] = g
        ri = np.arange(0, h * p, p)
        ci = np.arange(0, w * p, p)
        _accum(x, np.add.reduceat(np.add.reduceat(g_full, ri, axis=1), ci, axis=2))

    return _node(y, (x,), back)


def transpose2d(a):
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError("transpose2d expects a matrix")

    def back(g):
        _accum(a, g.T)

    return _node(a.data.T, (a,), back)


def mean_stack(parts):
    """Elementwise mean of same-shape tensors, exactly permutation invariant
    and exactly idempotent on identical inputs.

    The mean is taken of sorted offsets from the elementwise minimum: both
    the base and the sorted sum are order-free, and identical inputs give
    offsets of exactly zero.
    """
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("mean_stack of zero tensors")
    for p in parts[1:]:
        _check_same_shape(parts[0], p, "mean_stack")
    n = len(parts)
    stacked = np.stack([p.data for p in parts], axis=0)
    base = stacked.min(axis=0)
    y = np.sort(stacked - base, axis=0).sum(axis=0) / n + base

    def back(g):
        share = g / n
        for p in parts:
            if p.requires_grad:
                _accum(p, share)

    return _node(y, tuple(parts), back)


def softmax_rows(a):
    """Row-wise softmax of a matrix, numerically stabilised."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError("softmax_rows expects a matrix")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def back(g):
        dot = np.sum(g * y, axis=1, keepdims=True)
        _accum(a, (g - dot) * y)

    return _node(y, (a,), back)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """Bias-corrected Adam moments for a fixed list of parameters."""

    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)
    step_count: int = 0
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params, learning_rate=1e-4):
        return cls(
            first_moment=[np.zeros_like(p.data) for p in params],
            second_moment=[np.zeros_like(p.data) for p in params],
            learning_rate=learning_rate,
        )


def adam_step(params, grads, state):
    """One in-place Adam update; returns (params, state) for convenience."""
    if len(params) != len(state.first_moment):
        raise DimensionError("adam_step: state tracks a different parameter count")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise DimensionError(f"adam_step: grad {g.shape} vs param {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params, state


def zero_grads(params):
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# parameter checkpoints ("MXW1"): for each parameter, u64 name length,
# name bytes (utf-8), u64 rank, u64 dims, float64 values; all little-endian.

WEIGHTS_MAGIC = b"MXW1"


def save_checkpoint(path, named_arrays):
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        for name, arr in named_arrays.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)
            a = np.asarray(arr, dtype="<f8")  # tobytes() always emits C order
            fh.write(struct.pack("<Q", a.ndim))
            for d in a.shape:
                fh.write(struct.pack("<Q", d))
            fh.write(a.tobytes())


def load_checkpoint(path):
    out = {}
    with open(path, "rb") as fh:
        if fh.read(4) != WEIGHTS_MAGIC:
            raise FormatError(f"{path}: bad checkpoint magic")
        while True:
            head = fh.read(8)
            if not head:
                break
            if len(head) != 8:
                raise FormatError(f"{path}: truncated record header")
            (nlen,) = struct.unpack("<Q", head)
            name = fh.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<Q", fh.read(8))
            dims = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
            count = int(np.prod(dims)) if rank else 1
            payload = fh.read(8 * count)
            if len(payload) != 8 * count:
                raise FormatError(f"{path}: truncated payload for '{name}'")
            out[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)
    return out
