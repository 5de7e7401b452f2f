"""Dense tensors with reverse-mode automatic differentiation.

The engine is define-by-run: every operation on `Tensor` records its inputs
and a backward closure, and `Tensor.backward()` walks the recorded graph once
in reverse topological order. Values are numpy arrays (float32 for training,
float64 when callers want tight gradient checks); the dtype of results follows
the operands.

Only the primitives the network and its losses need are provided. Anything a
caller can express as a composition of primitives (dense layers, batch
normalization, transposed convolution) is built that way so its gradient
comes from the chain rule instead of a hand-derived formula.
"""

from __future__ import annotations

import hashlib
import itertools

import numpy as np

__all__ = [
    "Tensor",
    "Rng",
    "ShapeError",
    "DegenerateBatchError",
    "BnState",
    "as_tensor",
    "conv1d",
    "tconv1d",
    "dense",
    "batchnorm1d",
    "relu",
    "global_avg_pool",
    "softmax",
    "dropout",
    "upsample_repeat",
    "upsample_zeros",
]

_node_counter = itertools.count()

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Operand shapes are incompatible; the message names the offending axis."""


class DegenerateBatchError(ValueError):
    """Batch statistics were requested over a single element."""


class Tensor:
    """A node in the differentiation graph wrapping an ndarray.

    `grad` is populated by `backward()` for every tensor with
    `requires_grad=True` that lies on a path to the loss; it accumulates
    across backward calls until `zero_grad` style resets by the caller.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        if isinstance(data, Tensor):
            raise TypeError("wrap ndarrays or scalars, not Tensors")
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_counter)
        self._parents = _parents
        self._backward = _backward

    # -- introspection ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.grad is not None})"

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    # -- graph ------------------------------------------------------------

    def accumulate_grad(self, g, fresh=False):
        """Add `g` into this tensor's grad buffer.

        `fresh=True` promises that `g` is a newly materialized array no other
        node will store, letting us adopt it without a defensive copy.
        """
        if self.grad is None:
            if fresh and isinstance(g, np.ndarray) and g.dtype == self.data.dtype:
                self.grad = g
            else:
                self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, release=True):
        """Fill `grad` of every reachable requires-grad tensor.

        The loss must be scalar. Each graph node's backward closure runs
        exactly once, in reverse topological order. With `release` (the
        default) the graph is torn down as the sweep proceeds: interior
        nodes drop their grad buffers, parent links and closures, so memory
        is reclaimed promptly (op closures otherwise form reference cycles
        with their output tensors). Pass release=False to keep the graph,
        e.g. to inspect intermediate gradients.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.data.shape}")
        topo = []
        visited = set()
        stack = [(self, iter(self._parents))]
        visited.add(id(self))
        while stack:
            node, parents = stack[-1]
            advanced = False
            for p in parents:
                if id(p) not in visited and (p.requires_grad or p._parents):
                    visited.add(id(p))
                    stack.append((p, iter(p._parents)))
                    advanced = True
                    break
            if not advanced:
                topo.append(node)
                stack.pop()
        self.accumulate_grad(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()
            if release and node._parents:
                node.grad = None
                node._parents = ()
                node._backward = None

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return pow_scalar(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    """Reduce `grad` back to `shape` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _make(out_data, parents, backward):
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(out_data)
    return Tensor(out_data, requires_grad=True, _parents=tuple(parents), _backward=backward)


# -- elementwise arithmetic ------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = _make(a.data + b.data, (a, b), None)
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                g = _unbroadcast(out.grad, a.data.shape)
                a.accumulate_grad(g, fresh=g is not out.grad)
            if b.requires_grad:
                g = _unbroadcast(out.grad, b.data.shape)
                b.accumulate_grad(g, fresh=g is not out.grad)
        out._backward = _bw
    return out


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = _make(a.data - b.data, (a, b), None)
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                g = _unbroadcast(out.grad, a.data.shape)
                a.accumulate_grad(g, fresh=g is not out.grad)
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(-out.grad, b.data.shape), fresh=True)
        out._backward = _bw
    return out


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = _make(a.data * b.data, (a, b), None)
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(out.grad * b.data, a.data.shape), fresh=True)
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(out.grad * a.data, b.data.shape), fresh=True)
        out._backward = _bw
    return out


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = _make(a.data / b.data, (a, b), None)
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(out.grad / b.data, a.data.shape), fresh=True)
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(-out.grad * a.data / (b.data * b.data), b.data.shape), fresh=True)
        out._backward = _bw
    return out


def pow_scalar(a, exponent):
    a = as_tensor(a)
    e = float(exponent)
    out = _make(a.data ** e, (a,), None)
    if out.requires_grad:
        def _bw():
            a.accumulate_grad(out.grad * e * a.data ** (e - 1.0), fresh=True)
        out._backward = _bw
    return out


def exp(a):
    a = as_tensor(a)
    out = _make(np.exp(a.data), (a,), None)
    if out.requires_grad:
        def _bw():
            a.accumulate_grad(out.grad * out.data, fresh=True)
        out._backward = _bw
    return out


def log(a):
    a = as_tensor(a)
    out = _make(np.log(a.data), (a,), None)
    if out.requires_grad:
        def _bw():
            a.accumulate_grad(out.grad / a.data, fresh=True)
        out._backward = _bw
    return out


def sqrt(a):
    a = as_tensor(a)
    out = _make(np.sqrt(a.data), (a,), None)
    if out.requires_grad:
        def _bw():
            a.accumulate_grad(out.grad * 0.5 / out.data, fresh=True)
        out._backward = _bw
    return out


def clamp_min(a, floor):
    """max(a, floor); the gradient passes only where a > floor."""
    a = as_tensor(a)
    f = float(floor)
    out = _make(np.maximum(a.data, f), (a,), None)
    if out.requires_grad:
        mask = a.data > f
        def _bw():
            a.accumulate_grad(out.grad * mask, fresh=True)
        out._backward = _bw
    return out


def relu(a):
    a = as_tensor(a)
    out = _make(np.maximum(a.data, 0), (a,), None)
    if out.requires_grad:
        mask = a.data > 0
        def _bw():
            a.accumulate_grad(out.grad * mask, fresh=True)
        out._backward = _bw
    return out


# -- reductions and shape ops ----------------------------------------------


def reduce_sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)
    out = _make(out_data, (a,), None)
    if out.requires_grad:
        def _bw():
            g = out.grad
            if axis is not None and not keepdims:
                axes = axis if isinstance(axis, tuple) else (axis,)
                g = np.expand_dims(g, tuple(ax % a.data.ndim for ax in axes))
            a.accumulate_grad(np.broadcast_to(g, a.data.shape))
        out._backward = _bw
    return out


def reduce_mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.data.shape[ax]
    return mul(reduce_sum(a, axis, keepdims), 1.0 / count)


def reshape(a, shape):
    a = as_tensor(a)
    out = _make(a.data.reshape(shape), (a,), None)
    if out.requires_grad:
        def _bw():
            a.accumulate_grad(out.grad.reshape(a.data.shape), fresh=True)
        out._backward = _bw
    return out


def transpose(a, axes=None):
    a = as_tensor(a)
    out = _make(a.data.transpose(axes), (a,), None)
    if out.requires_grad:
        inv = None if axes is None else np.argsort(axes)
        def _bw():
            a.accumulate_grad(out.grad.transpose(inv), fresh=True)
        out._backward = _bw
    return out


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeError(
            f"matmul inner axes disagree: {a.data.shape} vs {b.data.shape}"
        )
    out = _make(a.data @ b.data, (a, b), None)
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                g = out.grad @ np.swapaxes(b.data, -1, -2) if b.data.ndim > 1 else np.outer(out.grad, b.data)
                a.accumulate_grad(_unbroadcast(g, a.data.shape), fresh=True)
            if b.requires_grad:
                g = np.swapaxes(a.data, -1, -2) @ out.grad if a.data.ndim > 1 else np.outer(a.data, out.grad)
                b.accumulate_grad(_unbroadcast(g, b.data.shape), fresh=True)
        out._backward = _bw
    return out


# -- network primitives ------------------------------------------------------


def _pad_rows(xb, padding):
    """Zero-pad the length axis of a channels-last [B, L, C] array."""
    if padding == 0:
        return xb
    b, length, c = xb.shape
    out = np.zeros((b, length + 2 * padding, c), dtype=xb.dtype)
    out[:, padding : padding + length] = xb
    return out


def _im2col(xp, ksize, stride, lout):
    """[B, Lp, C] -> [B*lout, K*C] windows; each row is one contiguous block."""
    win = np.lib.stride_tricks.sliding_window_view(xp, ksize, axis=1)  # [B, Lw, C, K]
    win = win[:, ::stride][:, :lout]
    return win.transpose(0, 1, 3, 2).reshape(xp.shape[0] * lout, ksize * xp.shape[2])


def _col2im(gcols4, lp, stride, ksize):
    """Adjoint of _im2col: scatter-add [B, lout, K, C] into [B, Lp, C].

    Windows at a fixed kernel offset never overlap, so one vectorized
    slice-add per offset covers everything.
    """
    b, lout, _, c = gcols4.shape
    gxp = np.zeros((b, lp, c), dtype=gcols4.dtype)
    for k in range(ksize):
        gxp[:, k : k + stride * lout : stride, :] += gcols4[:, :, k, :]
    return gxp


def _check_conv_args(cin, kernels, length, stride, padding):
    if kernels.ndim != 3:
        raise ShapeError(f"kernels must be [C_out, C_in, K], got shape {kernels.shape}")
    cout, k_cin, ksize = kernels.shape
    if k_cin != cin:
        raise ShapeError(
            f"channel axis mismatch: input has {cin} channels, kernels expect {k_cin}"
        )
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if length + 2 * padding < ksize:
        raise ShapeError(
            f"length axis too short: L={length} with padding={padding} cannot fit kernel K={ksize}"
        )
    return cout, ksize


def _as_batched_any(x, channels_last):
    """Promote rank 2 to rank 3; report whether it was promoted."""
    if x.ndim == 2:
        return x[None], True
    if x.ndim == 3:
        return x, False
    expected = "[L, C] or [B, L, C]" if channels_last else "[C, L] or [B, C, L]"
    raise ShapeError(f"expected a {expected} array, got shape {x.shape}")


def conv1d(x, kernels, bias=None, stride=1, padding=0, channels_last=False):
    """Cross-correlate x with kernels [C_out, C_in, K], plus optional bias.

    x is [B, C_in, L] (or [C_in, L]); with channels_last=True the length axis
    comes first, [B, L, C_in], which is the layout the network uses
    internally because it turns im2col into contiguous block copies. Output
    length is floor((L + 2*padding - K) / stride) + 1; differentiable in x,
    kernels and bias.
    """
    x = as_tensor(x)
    kernels = as_tensor(kernels)
    xb, squeezed = _as_batched_any(x.data, channels_last)
    if not channels_last:
        xb = np.ascontiguousarray(xb.transpose(0, 2, 1))
    b_, length, cin = xb.shape
    cout, ksize = _check_conv_args(cin, kernels.data, length, stride, padding)
    lout = (length + 2 * padding - ksize) // stride + 1
    xp = _pad_rows(xb, padding)
    cols = _im2col(xp, ksize, stride, lout)
    wm = kernels.data.transpose(2, 1, 0).reshape(ksize * cin, cout)
    out_cl = (cols @ wm).reshape(b_, lout, cout)
    if bias is not None:
        bias = as_tensor(bias)
        out_cl += bias.data.reshape(1, 1, cout)
    out_data = out_cl if channels_last else np.ascontiguousarray(out_cl.transpose(0, 2, 1))
    if squeezed:
        out_data = out_data[0]
    parents = (x, kernels) if bias is None else (x, kernels, bias)
    out = _make(out_data, parents, None)
    if out.requires_grad:
        def _bw():
            g = out.grad if not squeezed else out.grad[None]
            if not channels_last:
                g = np.ascontiguousarray(g.transpose(0, 2, 1))
            gmat = g.reshape(b_ * lout, cout)
            if kernels.requires_grad:
                gw = (cols.T @ gmat).reshape(ksize, cin, cout).transpose(2, 1, 0)
                kernels.accumulate_grad(gw, fresh=False)
            if bias is not None and bias.requires_grad:
                bias.accumulate_grad(g.sum(axis=(0, 1)), fresh=True)
            if x.requires_grad:
                gcols4 = (gmat @ wm.T).reshape(b_, lout, ksize, cin)
                gxp = _col2im(gcols4, length + 2 * padding, stride, ksize)
                gx = gxp[:, padding : padding + length] if padding else gxp
                if not channels_last:
                    gx = np.ascontiguousarray(gx.transpose(0, 2, 1))
                x.accumulate_grad(gx[0] if squeezed else gx, fresh=True)
        out._backward = _bw
    return out


def upsample_zeros(x, stride):
    """Stretch the length axis by inserting stride-1 zeros between samples."""
    x = as_tensor(x)
    if stride == 1:
        return x
    xb, squeezed = _as_batched_any(x.data, channels_last=False)
    b_, c, length = xb.shape
    out_len = (length - 1) * stride + 1
    out_data = np.zeros((b_, c, out_len), dtype=xb.dtype)
    out_data[:, :, ::stride] = xb
    if squeezed:
        out_data = out_data[0]
    out = _make(out_data, (x,), None)
    if out.requires_grad:
        def _bw():
            g = out.grad if not squeezed else out.grad[None]
            gx = g[:, :, ::stride]
            x.accumulate_grad(gx[0] if squeezed else gx, fresh=True)
        out._backward = _bw
    return out


def tconv1d(x, kernels, bias=None, stride=1, padding=0, out_pad=0, channels_last=False):
    """Transposed convolution, equivalent to zero-upsampling by `stride`
    followed by a convolution.

    Output length is (L-1)*stride + K - 2*padding + out_pad, inverting the
    conv1d length formula; `out_pad` (0 <= out_pad < stride) disambiguates
    lengths that conv1d's floor division collapsed together. Implemented as
    the adjoint of conv1d (one GEMM plus scatter-add), which skips the
    multiplications against the upsampled zeros.
    """
    x = as_tensor(x)
    kernels = as_tensor(kernels)
    xb, squeezed = _as_batched_any(x.data, channels_last)
    if not channels_last:
        xb = np.ascontiguousarray(xb.transpose(0, 2, 1))
    b_, lin, cin = xb.shape
    if kernels.data.ndim != 3:
        raise ShapeError(f"kernels must be [C_out, C_in, K], got shape {kernels.data.shape}")
    cout, k_cin, ksize = kernels.data.shape
    if k_cin != cin:
        raise ShapeError(
            f"channel axis mismatch: input has {cin} channels, kernels expect {k_cin}"
        )
    if padding > ksize - 1:
        raise ShapeError(f"padding={padding} exceeds K-1={ksize - 1} on the length axis")
    if not 0 <= out_pad < max(stride, 1):
        raise ShapeError(f"out_pad must satisfy 0 <= out_pad < stride, got {out_pad}")
    lout = (lin - 1) * stride + ksize - 2 * padding + out_pad
    # adjoint kernel: swap channel roles and flip the tap axis
    am = kernels.data[:, :, ::-1].transpose(2, 0, 1).reshape(ksize * cout, cin)
    xmat = xb.reshape(b_ * lin, cin)
    gcols4 = (xmat @ am.T).reshape(b_, lin, ksize, cout)
    outp = _col2im(gcols4, lout + 2 * padding, stride, ksize)
    out_cl = outp[:, padding : padding + lout] if padding else outp
    if bias is not None:
        bias = as_tensor(bias)
        out_cl += bias.data.reshape(1, 1, cout)
    out_data = out_cl if channels_last else np.ascontiguousarray(out_cl.transpose(0, 2, 1))
    if squeezed:
        out_data = out_data[0]
    parents = (x, kernels) if bias is None else (x, kernels, bias)
    out = _make(out_data, parents, None)
    if out.requires_grad:
        def _bw():
            g = out.grad if not squeezed else out.grad[None]
            if not channels_last:
                g = np.ascontiguousarray(g.transpose(0, 2, 1))
            gp = _pad_rows(g, padding)
            cols_g = _im2col(gp, ksize, stride, lin)
            if kernels.requires_grad:
                gam = cols_g.T @ xmat
                gw = np.ascontiguousarray(
                    gam.reshape(ksize, cout, cin).transpose(1, 2, 0)[:, :, ::-1]
                )
                kernels.accumulate_grad(gw, fresh=True)
            if bias is not None and bias.requires_grad:
                bias.accumulate_grad(g.sum(axis=(0, 1)), fresh=True)
            if x.requires_grad:
                gx = (cols_g @ am).reshape(b_, lin, cin)
                if not channels_last:
                    gx = np.ascontiguousarray(gx.transpose(0, 2, 1))
                x.accumulate_grad(gx[0] if squeezed else gx, fresh=True)
        out._backward = _bw
    return out


def pad_length(x, before, after):
    """Zero-pad the length axis asymmetrically."""
    x = as_tensor(x)
    spec = [(0, 0)] * (x.data.ndim - 1) + [(before, after)]
    out = _make(np.pad(x.data, spec), (x,), None)
    if out.requires_grad:
        length = x.data.shape[-1]
        def _bw():
            x.accumulate_grad(out.grad[..., before : before + length], fresh=True)
        out._backward = _bw
    return out


def upsample_repeat(x, target_len, axis=-1):
    """Repeat a length-1 axis to `target_len` (nearest-neighbour upsample)."""
    x = as_tensor(x)
    if x.data.shape[axis] != 1:
        raise ShapeError(
            f"upsample_repeat expects length 1 on axis {axis}, got {x.data.shape[axis]}"
        )
    reps = [1] * x.data.ndim
    reps[axis] = target_len
    out = _make(np.tile(x.data, reps), (x,), None)
    if out.requires_grad:
        def _bw():
            x.accumulate_grad(out.grad.sum(axis=axis, keepdims=True), fresh=True)
        out._backward = _bw
    return out


def dense(x, weight, bias=None):
    """Affine map weight @ x + bias for x [n_in] or [B, n_in], weight [n_out, n_in]."""
    x = as_tensor(x)
    weight = as_tensor(weight)
    n_in = x.data.shape[-1]
    if weight.data.shape[1] != n_in:
        raise ShapeError(
            f"inner dimension mismatch: input has {n_in} features, weight expects {weight.data.shape[1]}"
        )
    out = matmul(x, transpose(weight))
    if bias is not None:
        out = add(out, bias)
    return out


def global_avg_pool(x, channels_last=False):
    """Average over the length axis: [.., C, L] -> [.., C, 1].

    With channels_last=True the length axis is the second-to-last.
    """
    return reduce_mean(as_tensor(x), axis=-2 if channels_last else -1, keepdims=True)


def softmax(x, axis=-1):
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=axis, keepdims=True)
    out = _make(probs, (x,), None)
    if out.requires_grad:
        def _bw():
            g = out.grad
            dot = (g * probs).sum(axis=axis, keepdims=True)
            x.accumulate_grad(probs * (g - dot), fresh=True)
        out._backward = _bw
    return out


def logsumexp(x, axis=-1):
    """log(sum(exp(x))) along `axis`, shifted by a detached max for stability."""
    x = as_tensor(x)
    shift = x.data.max(axis=axis, keepdims=True)
    return add(log(reduce_sum(exp(sub(x, Tensor(shift))), axis=axis)),
               Tensor(np.squeeze(shift, axis=axis)))


def dropout(x, p, rng_stream, training):
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    draw_dtype = x.data.dtype if x.data.dtype in (np.float32, np.float64) else np.float64
    mask = (rng_stream.random(x.data.shape, dtype=draw_dtype) >= p).astype(x.data.dtype)
    mask *= 1.0 / (1.0 - p)
    return mul(x, Tensor(mask))


# -- batch normalization -----------------------------------------------------


class BnState:
    """Running first/second moments for one batchnorm layer."""

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=DEFAULT_DTYPE):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps


def batchnorm1d(x, gamma, beta, state, training, channels_last=False):
    """Normalize per channel over batch and length, then apply gamma/beta.

    x is [B, C, L] (channel axis 1) or, with channels_last=True, [B, L, C].
    Train mode uses batch statistics and refreshes the running moments with
    an exponential moving average; eval mode applies the stored moments. The
    train path is a single fused node: its backward applies the closed-form
    batchnorm gradient instead of chaining a dozen elementwise ops.
    """
    x = as_tensor(x)
    gamma = as_tensor(gamma)
    beta = as_tensor(beta)
    xb, squeezed = _as_batched_any(x.data, channels_last)
    if channels_last:
        b_, length, c = xb.shape
        axes = (0, 1)
        cshape = (1, 1, c)
    else:
        b_, c, length = xb.shape
        axes = (0, 2)
        cshape = (1, c, 1)
    if not training:
        rm = state.running_mean.reshape(cshape)
        rv = state.running_var.reshape(cshape)
        scale = (1.0 / np.sqrt(rv + state.eps)).astype(xb.dtype)
        normed = mul(sub(x, Tensor(rm if not squeezed else rm[0])),
                     Tensor(scale if not squeezed else scale[0]))
        gshape = cshape if not squeezed else cshape[1:]
        return add(mul(normed, reshape(gamma, gshape)), reshape(beta, gshape))

    n = b_ * length
    if n <= 1:
        raise DegenerateBatchError(
            f"batchnorm needs more than one value per channel, got batch*length={n}"
        )
    mean = xb.mean(axis=axes, keepdims=True)
    centered = xb - mean
    var = np.mean(centered * centered, axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = centered * inv
    gview = gamma.data.reshape(cshape)
    out_data = xhat * gview + beta.data.reshape(cshape)

    mom = state.momentum
    state.running_mean = ((1 - mom) * state.running_mean + mom * mean.reshape(c)).astype(state.running_mean.dtype)
    state.running_var = ((1 - mom) * state.running_var + mom * (var.reshape(c) * (n / (n - 1)))).astype(state.running_var.dtype)

    out = _make(out_data[0] if squeezed else out_data, (x, gamma, beta), None)
    if out.requires_grad:
        def _bw():
            g = out.grad if not squeezed else out.grad[None]
            if beta.requires_grad:
                beta.accumulate_grad(g.sum(axis=axes), fresh=True)
            if gamma.requires_grad:
                gamma.accumulate_grad((g * xhat).sum(axis=axes), fresh=True)
            if x.requires_grad:
                gh = g * gview
                term = gh.sum(axis=axes, keepdims=True) + xhat * (gh * xhat).sum(axis=axes, keepdims=True)
                gx = inv * (gh - term / n)
                x.accumulate_grad(gx[0] if squeezed else gx, fresh=True)
        out._backward = _bw
    return out


# -- deterministic randomness -------------------------------------------------


class Rng:
    """Seeded random source with independent named substreams.

    Substream keys are derived from (seed, name) with BLAKE2b and fed to
    numpy's counter-based Philox generator, so consuming one stream never
    perturbs another and the same seed reproduces every stream bit for bit.
    """

    def __init__(self, seed):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF

    def stream(self, name):
        digest = hashlib.blake2b(
            f"{self.seed}/{name}".encode("utf-8"), digest_size=16
        ).digest()
        key = int.from_bytes(digest, "little")
        return np.random.Generator(np.random.Philox(key=key))
