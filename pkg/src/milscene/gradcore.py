"""Dense tensors with hand-derived backward passes.

Only the operations the FUSE/MIL model needs are provided. Every op accepts
an optional leading batch axis; convolution and pooling ops work on the last
three axes ``(C, H, W)``.
"""

from __future__ import annotations

from collections import OrderedDict
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels


class DimensionError(ValueError):
    pass


class Tensor:
    """An ndarray plus the bookkeeping needed for reverse-mode gradients."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if any(_needs_grad(p) for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ----------------------------------------------------------------------------
# structural ops


def add(*xs: Tensor) -> Tensor:
    if not xs:
        raise ValueError("add() needs at least one tensor")
    shape = xs[0].shape
    for x in xs[1:]:
        if x.shape != shape:
            raise DimensionError(f"add: shapes {shape} and {x.shape} differ")
    data = xs[0].data.copy()
    for x in xs[1:]:
        data += x.data
    return _node(data, xs, lambda g: tuple(g for _ in xs))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return _node(np.asarray(x.data.mean()), (x,), lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))


def scale(x: Tensor, factor: float) -> Tensor:
    return _node(x.data * factor, (x,), lambda g: (g * factor,))


def inner(x: Tensor, weight: np.ndarray) -> Tensor:
    """Scalar ``sum(x * weight)`` with a constant weight; the usual probe for gradient checks."""
    weight = np.asarray(weight, dtype=x.dtype)
    if weight.shape != x.shape:
        raise DimensionError(f"inner: x shape {x.shape} vs weight shape {weight.shape}")
    return _node(np.asarray((x.data * weight).sum()), (x,), lambda g: (g * weight,))


# ----------------------------------------------------------------------------
# convolution and pooling


def pointwise_conv(x: Tensor, w: Tensor) -> Tensor:
    """1x1 convolution: ``out[o,h,w] = sum_i w[o,i] x[i,h,w]``."""
    if x.data.ndim < 3 or w.data.ndim != 2 or w.shape[1] != x.shape[-3]:
        raise DimensionError(f"pointwise_conv: x shape {x.shape} incompatible with w shape {w.shape}")
    lead = x.shape[:-2]
    h, wd = x.shape[-2:]
    xf = x.data.reshape(lead + (h * wd,))
    out = np.matmul(w.data, xf).reshape(lead[:-1] + (w.shape[0], h, wd))

    def backward(g):
        gf = g.reshape(g.shape[:-2] + (h * wd,))
        gx = np.matmul(w.data.T, gf).reshape(x.shape) if _needs_grad(x) else None
        gw = None
        if _needs_grad(w):
            gw = np.matmul(gf, np.swapaxes(xf, -1, -2))
            if gw.ndim > 2:
                gw = gw.reshape(-1, *w.shape).sum(axis=0)
        return gx, gw

    return _node(out, (x, w), backward)


def _axis_pads(k: int, padding: str) -> tuple[int, int]:
    if padding == "same":
        left = (k - 1) // 2
        return left, k - 1 - left
    if padding == "valid":
        return 0, 0
    raise ValueError(f"unknown padding {padding!r}")


def _chan_dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Sum of ``a * b`` over every axis except the channel axis (-3)."""
    if a.ndim == 3:
        return np.einsum("chw,chw->c", a, b)
    return np.einsum("bchw,bchw->c", a, b)


def _chan_sum(a: np.ndarray) -> np.ndarray:
    c = a.shape[-3]
    return np.moveaxis(a, -3, 0).reshape(c, -1).sum(axis=1) if a.ndim > 3 else a.reshape(c, -1).sum(axis=1)


def axis_depthwise_conv(x: Tensor, k: Tensor, axis: str, padding: str = "same") -> Tensor:
    """Per-channel 1-D cross-correlation along frequency (H) or time (W).

    ``k`` has shape ``(C, K)``: ``out[c, h] = sum_j k[c, j] x[c, h + j - left]``
    with zeros outside the input. Same padding keeps the shape; valid padding
    shrinks the axis by ``K - 1``.
    """
    if axis not in ("frequency", "time"):
        raise ValueError(f"axis must be 'frequency' or 'time', got {axis!r}")
    if x.data.ndim not in (3, 4) or k.data.ndim != 2 or k.shape[0] != x.shape[-3]:
        raise DimensionError(f"axis_depthwise_conv: x shape {x.shape} incompatible with kernel shape {k.shape}")
    along_h = axis == "frequency"
    n_taps = k.shape[1]
    extent = x.shape[-2] if along_h else x.shape[-1]
    if padding == "valid" and n_taps > extent:
        raise DimensionError(f"axis_depthwise_conv: kernel length {n_taps} exceeds {axis} extent {extent}")
    left, right = _axis_pads(n_taps, padding)
    out_len = extent + left + right - n_taps + 1
    x4 = np.ascontiguousarray(x.data if x.data.ndim == 4 else x.data[None])
    kd = np.ascontiguousarray(k.data, dtype=x.dtype)
    out = _kernels.dw_forward(x4, kd, along_h, left, out_len)
    if x.data.ndim == 3:
        out = out[0]

    def backward(g):
        need_x = _needs_grad(x)
        g4 = np.ascontiguousarray(g if g.ndim == 4 else g[None], dtype=x.dtype)
        gx, gk = _kernels.dw_backward(g4, x4, kd, along_h, left, need_x)
        if need_x and x.data.ndim == 3:
            gx = gx[0]
        return (gx if need_x else None), gk.astype(k.dtype)

    return _node(out, (x, k), backward)


def maxpool2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 max pooling over the last two axes.

    Odd trailing rows/columns are dropped; ties go to the first element of the
    window in row-major order.
    """
    if x.data.ndim not in (3, 4):
        raise DimensionError(f"maxpool2 expects (C, H, W) or (B, C, H, W), got {x.shape}")
    h, w = x.shape[-2:]
    if h < 2 or w < 2:
        raise DimensionError(f"maxpool2: spatial extent {(h, w)} is smaller than 2x2")
    x4 = np.ascontiguousarray(x.data if x.data.ndim == 4 else x.data[None])
    out, arg = _kernels.maxpool_forward(x4)

    def backward(g):
        g4 = np.ascontiguousarray(g if g.ndim == 4 else g[None])
        gx = _kernels.maxpool_backward(g4, arg, h, w)
        return (gx if x.data.ndim == 4 else gx[0],)

    return _node(out if x.data.ndim == 4 else out[0], (x,), backward)


# ----------------------------------------------------------------------------
# normalization


BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    relu: bool = False,
) -> Tensor:
    """Per-channel batch normalization of a ``(B, C, H, W)`` tensor.

    In train mode the running statistics are updated in place (momentum 0.1,
    unbiased variance). Eval mode normalizes with the running statistics.
    ``relu=True`` fuses a trailing ReLU, saving two passes over the data.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"batchnorm expects (B, C, H, W), got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batchnorm: affine shapes {gamma.shape}/{beta.shape} vs {c} channels")
    m = x.data.size // c
    xd = np.ascontiguousarray(x.data)
    if train:
        mu, var = _kernels.bn_stats(xd)
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_mean *= 1 - BN_MOMENTUM
        running_mean += BN_MOMENTUM * mu
        running_var *= 1 - BN_MOMENTUM
        running_var += BN_MOMENTUM * unbiased
    else:
        mu, var = running_mean.astype(np.float64), running_var.astype(np.float64)
    inv = 1.0 / np.sqrt(var + BN_EPS)
    gam = gamma.data.astype(np.float64)
    xhat, out = _kernels.bn_apply(xd, mu, inv, gam, beta.data.astype(np.float64), relu)

    def backward(g):
        gx, gg, gb = _kernels.bn_backward(
            np.ascontiguousarray(g, dtype=x.dtype), xhat, out, gam, inv, relu, train, _needs_grad(x)
        )
        return (gx if _needs_grad(x) else None), gg.astype(gamma.dtype), gb.astype(beta.dtype)

    return _node(out, (x, gamma, beta), backward)


# ----------------------------------------------------------------------------
# dense layers and activations


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``W x + b`` applied along the last axis; ``w`` is ``(C, d)``."""
    if w.data.ndim != 2 or x.shape[-1] != w.shape[1] or b.shape != (w.shape[0],):
        raise DimensionError(f"dense: x shape {x.shape}, w shape {w.shape}, b shape {b.shape}")
    out = x.data @ w.data.T + b.data

    def backward(g):
        gx = g @ w.data if _needs_grad(x) else None
        g2 = g.reshape(-1, g.shape[-1])
        gw = g2.T @ x.data.reshape(-1, x.shape[-1])
        return gx, gw, g2.sum(axis=0)

    return _node(out, (x, w, b), backward)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax_rows_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def activate(x: Tensor, kind: str) -> Tensor:
    if kind == "sigmoid":
        s = _sigmoid(x.data)
        return _node(s, (x,), lambda g: (g * s * (1 - s),))
    if kind == "relu":
        mask = x.data > 0
        return _node(x.data * mask, (x,), lambda g: (g * mask,))
    if kind == "softmax_rows":
        if x.data.ndim < 2:
            raise DimensionError(f"softmax_rows needs rank >= 2 input, got {x.shape}")
        p = softmax_rows_np(x.data)

        def backward(g):
            return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

        return _node(p, (x,), backward)
    raise ValueError(f"unknown activation {kind!r}")


def reduce_max_rows(x: Tensor) -> tuple[Tensor, np.ndarray]:
    """Column-wise max over the row axis (-2). Ties go to the lowest row."""
    if x.data.ndim < 2 or x.shape[-2] == 0:
        raise DimensionError(f"reduce_max_rows needs a non-empty (N, C) input, got {x.shape}")
    arg = np.argmax(x.data, axis=-2)
    vals = np.take_along_axis(x.data, arg[..., None, :], axis=-2)[..., 0, :]

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        np.put_along_axis(gx, arg[..., None, :], g[..., None, :], axis=-2)
        return (gx,)

    return _node(vals, (x,), backward), arg


# ----------------------------------------------------------------------------
# parameters and optimizer


class ParamSet:
    """Ordered named tensors plus one momentum buffer per trainable entry.

    Non-trainable entries (batch-norm running statistics) live here too so a
    checkpoint captures the whole model state.
    """

    def __init__(self):
        self.entries: OrderedDict[str, Tensor] = OrderedDict()
        self.momentum: dict[str, np.ndarray] = {}

    def add(self, name: str, data: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self.entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(data), requires_grad=trainable, name=name)
        self.entries[name] = t
        if trainable:
            self.momentum[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __iter__(self):
        return iter(self.entries.items())

    def __len__(self):
        return len(self.entries)

    def trainable(self) -> Iterable[tuple[str, Tensor]]:
        return ((n, t) for n, t in self.entries.items() if t.requires_grad)

    def zero_grad(self):
        for t in self.entries.values():
            t.grad = None

    def astype(self, dtype) -> ParamSet:
        out = ParamSet()
        for name, t in self.entries.items():
            out.add(name, t.data.astype(dtype), trainable=t.requires_grad)
            if name in self.momentum:
                out.momentum[name] = self.momentum[name].astype(dtype)
        return out

    def copy(self) -> ParamSet:
        return self.astype(None)


def sgd_step(params: ParamSet, lr: float, momentum: float, weight_decay: float):
    """SGD with heavy-ball momentum and coupled L2 weight decay."""
    for name, p in params.trainable():
        if p.grad is None:
            raise ValueError(f"sgd_step: parameter {name!r} has no gradient")
    for name, p in params.trainable():
        v = params.momentum[name]
        v *= momentum
        v += p.grad + weight_decay * p.data
        p.data -= lr * v
        p.grad = None


# ----------------------------------------------------------------------------
# finite-difference verification


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-4,
    analytic: Sequence[np.ndarray] | None = None,
    joint: bool = False,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``fn`` maps the input tensors to a scalar tensor. For each input the error
    is ``max|a - n| / (max|a| + max|n| + 1e-8)``; the maximum over inputs is
    returned. With ``joint`` the maxima in the denominator run over all inputs
    together, so an input whose gradient is structurally zero (e.g. a weight
    that a following batch norm makes scale-invariant) is judged against the
    whole gradient rather than against its own rounding noise. ``analytic``
    overrides the backward pass (used to inject faults).
    """
    for t in inputs:
        t.grad = None
        t.data = np.ascontiguousarray(t.data)
    out = fn(*inputs)
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("grad_check: non-finite function value")
    if analytic is None:
        out.backward()
        analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]
    diffs, scales = [], []
    for t, a in zip(inputs, analytic):
        num = np.zeros_like(t.data, dtype=np.float64)
        flat = t.data.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(fn(*inputs).data)
            flat[i] = orig - eps
            fm = float(fn(*inputs).data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError("grad_check: non-finite function value")
            nflat[i] = (fp - fm) / (2 * eps)
        a = np.asarray(a, dtype=np.float64)
        if not np.all(np.isfinite(a)):
            raise FloatingPointError("grad_check: non-finite analytic gradient")
        diffs.append(float(np.abs(a - num).max()))
        scales.append(float(np.abs(a).max() + np.abs(num).max()))
    if joint:
        return max(diffs) / (max(scales) + 1e-8)
    return max(d / (s + 1e-8) for d, s in zip(diffs, scales))
