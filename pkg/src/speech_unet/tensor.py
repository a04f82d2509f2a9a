"""Minimal reverse-mode autodiff over batched 1-D feature maps.

Every array flowing through the network has shape ``(batch, channels, length)``.
Operations record their parents and a closure mapping the output gradient to
the parents' gradients; :meth:`Tensor.backward` walks that record in reverse
topological order.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Tensor:
    """A node in the computation record.

    Leaves created with ``requires_grad=True`` accumulate into ``.grad``
    across backward calls; interior nodes never hold gradients.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._backward is None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def backward(self, grad=None):
        backward(self, grad)


def _result(data, parents, fn):
    parents = tuple(parents)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = fn
    return out


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check3(t, what="input"):
    if t.data.ndim != 3:
        raise ValueError(f"{what} must be (batch, channels, length), got shape {t.shape}")
    b, c, n = t.shape
    if b < 1 or n < 1:
        raise ValueError(f"{what} has an empty batch or length: {t.shape}")


def backward(loss, grad=None):
    """Propagate gradients from ``loss`` to every reachable leaf.

    ``grad`` seeds the output gradient; it defaults to ones, which is only
    allowed for single-element outputs. Repeated calls accumulate.
    """
    if not loss.requires_grad:
        raise RuntimeError("backward() called on a node that is not attached to any trainable input")
    if grad is None:
        if loss.data.size != 1:
            raise RuntimeError("grad must be given for non-scalar outputs")
        grad = np.ones_like(loss.data)
    else:
        grad = np.asarray(grad, dtype=loss.dtype)
        if grad.shape != loss.shape:
            raise ValueError(f"seed gradient shape {grad.shape} != output shape {loss.shape}")

    # iterative DFS: the decoder is deep enough to make recursion awkward
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    grads = {id(loss): grad}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.grad is None:
                node.grad = np.array(g, dtype=node.dtype, copy=True)
            else:
                node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# --------------------------------------------------------------------------
# convolution kernels (plain arrays)


def _correlate(xp, w, stride, dilation):
    """Valid cross-correlation of padded ``xp`` (B, C, Lp) with ``w`` (O, C, f)."""
    f = w.shape[2]
    span = dilation * (f - 1) + 1
    win = sliding_window_view(xp, span, axis=2)[:, :, ::stride, ::dilation]
    out = np.tensordot(win, w, axes=([1, 3], [1, 2]))
    return np.ascontiguousarray(out.transpose(0, 2, 1))


def _weight_grad(xp, dy, f, stride, dilation):
    span = dilation * (f - 1) + 1
    win = sliding_window_view(xp, span, axis=2)[:, :, ::stride, ::dilation]
    win = win[:, :, : dy.shape[2]]
    return np.tensordot(dy, win, axes=([0, 2], [0, 2]))


def _input_grad(dy, w, stride, dilation, padded_len):
    """Adjoint of :func:`_correlate` with respect to the padded input."""
    b, o, lout = dy.shape
    f = w.shape[2]
    span = dilation * (f - 1) + 1
    if stride > 1:
        up = np.zeros((b, o, (lout - 1) * stride + 1), dtype=dy.dtype)
        up[:, :, ::stride] = dy
    else:
        up = dy
    up = np.pad(up, ((0, 0), (0, 0), (span - 1, span - 1)))
    wt = np.ascontiguousarray(w[:, :, ::-1].transpose(1, 0, 2))
    full = _correlate(up, wt, 1, dilation)
    dxp = np.zeros((b, w.shape[1], padded_len), dtype=dy.dtype)
    dxp[:, :, : full.shape[2]] = full
    return dxp


def conv_output_length(length, f, stride=1, dilation=1, padding=(0, 0)):
    return (length + padding[0] + padding[1] - dilation * (f - 1) - 1) // stride + 1


def same_padding(f, dilation=1):
    """Left/right padding that preserves length at stride 1; the extra sample goes right."""
    total = dilation * (f - 1)
    return total // 2, total - total // 2


@dataclass
class ConvParams:
    """Weights ``(c_out, c_in, f)``, bias ``(c_out,)`` and the layer geometry."""

    weight: Tensor
    bias: Tensor | None = None
    stride: int = 1
    dilation: int = 1
    padding: tuple[int, int] = (0, 0)

    def __post_init__(self):
        self.weight = _as_tensor(self.weight)
        if self.bias is not None:
            self.bias = _as_tensor(self.bias)
        if self.weight.data.ndim != 3 or self.weight.shape[2] < 1:
            raise ValueError(f"weight must be (c_out, c_in, f) with f >= 1, got {self.weight.shape}")
        if self.bias is not None and self.bias.shape != (self.weight.shape[0],):
            raise ValueError(f"bias shape {self.bias.shape} does not match c_out={self.weight.shape[0]}")
        if self.stride < 1 or self.dilation < 1:
            raise ValueError("stride and dilation must be >= 1")
        if min(self.padding) < 0:
            raise ValueError("padding must be non-negative")

    @property
    def c_out(self):
        return self.weight.shape[0]

    @property
    def c_in(self):
        return self.weight.shape[1]

    @property
    def f(self):
        return self.weight.shape[2]

    @property
    def span(self):
        return self.dilation * (self.f - 1) + 1

    def param_count(self):
        return self.weight.data.size + (0 if self.bias is None else self.bias.data.size)

    def tensors(self):
        return [t for t in (self.weight, self.bias) if t is not None]


def conv1d(x, params):
    """Strided, dilated, zero-padded 1-D cross-correlation plus bias."""
    x = _as_tensor(x)
    _check3(x)
    w, b = params.weight, params.bias
    if x.shape[1] != params.c_in:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, layer expects {params.c_in}")
    left, right = params.padding
    padded_len = x.shape[2] + left + right
    if padded_len < params.span:
        raise ValueError(f"padded length {padded_len} shorter than one window ({params.span})")
    s, d = params.stride, params.dilation
    xp = np.pad(x.data, ((0, 0), (0, 0), (left, right))) if left or right else x.data
    y = _correlate(xp, w.data, s, d)
    if b is not None:
        y += b.data[None, :, None]
    length = x.shape[2]

    def grad_fn(g):
        gx = gw = gb = None
        if x.requires_grad:
            gx = _input_grad(g, w.data, s, d, padded_len)[:, :, left : left + length]
        if w.requires_grad:
            gw = _weight_grad(xp, g, params.f, s, d)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2))
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _result(y, parents, grad_fn)


def transposed_conv1d(x, params):
    """Adjoint of :func:`conv1d` with the weight's channel axes swapped, plus bias.

    ``params.weight`` is ``(c_out, c_in, f)``; the output length is
    ``(L - 1) * stride + span - left - right``.
    """
    x = _as_tensor(x)
    _check3(x)
    w, b = params.weight, params.bias
    if x.shape[1] != params.c_in:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, layer expects {params.c_in}")
    s, d, f = params.stride, params.dilation, params.f
    left, right = params.padding
    bsz, _, length = x.shape
    full_len = (length - 1) * s + params.span
    if full_len - left - right < 1:
        raise ValueError("padding removes the whole output")
    taps = np.tensordot(w.data, x.data, axes=([1], [1]))  # (O, f, B, L)
    full = np.zeros((bsz, params.c_out, full_len), dtype=np.result_type(x.data, w.data))
    stop = (length - 1) * s + 1
    for k in range(f):
        full[:, :, k * d : k * d + stop : s] += taps[:, k].transpose(1, 0, 2)
    y = full[:, :, left : full_len - right]
    if b is not None:
        y = y + b.data[None, :, None]
    else:
        y = np.ascontiguousarray(y)

    def grad_fn(g):
        gfull = np.pad(g, ((0, 0), (0, 0), (left, right))) if left or right else g
        gx = gw = gb = None
        if x.requires_grad:
            wt = np.ascontiguousarray(w.data.transpose(1, 0, 2))
            gx = _correlate(gfull, wt, s, d)
        if w.requires_grad:
            gw = _weight_grad(gfull, x.data, f, s, d).transpose(1, 0, 2)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2))
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _result(y, parents, grad_fn)


def maxpool1d(x, window=2, stride=2):
    """Max over sliding windows; ties route the gradient to the leftmost maximum."""
    x = _as_tensor(x)
    _check3(x)
    length = x.shape[2]
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be >= 1")
    if length < window:
        raise ValueError(f"length {length} shorter than pooling window {window}")
    win = sliding_window_view(x.data, window, axis=2)[:, :, ::stride]
    arg = win.argmax(axis=3)
    y = np.take_along_axis(win, arg[..., None], axis=3)[..., 0]
    pos = arg + np.arange(win.shape[2])[None, None, :] * stride

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        if stride >= window:
            np.put_along_axis(gx, pos, g, axis=2)
        else:
            bi, ci, _ = np.indices(pos.shape)
            np.add.at(gx, (bi, ci, pos), g)
        return (gx,)

    return _result(np.ascontiguousarray(y), (x,), grad_fn)


def concat_channels(*tensors):
    """Stack along the channel axis; earlier arguments take the leading channels."""
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("nothing to concatenate")
    b, _, n = tensors[0].shape
    for t in tensors:
        if t.data.ndim != 3 or t.shape[0] != b or t.shape[2] != n:
            raise ValueError(f"cannot concatenate shapes {[t.shape for t in tensors]}")
    y = np.concatenate([t.data for t in tensors], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])

    def grad_fn(g):
        return tuple(g[:, lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _result(y, tensors, grad_fn)


def permute_channels(x, order):
    """Reorder channels so that output channel ``i`` is input channel ``order[i]``."""
    x = _as_tensor(x)
    order = np.asarray(order)
    if sorted(order.tolist()) != list(range(x.shape[1])):
        raise ValueError("order must be a permutation of the channel indices")
    inverse = np.argsort(order)

    def grad_fn(g):
        return (g[:, inverse],)

    return _result(x.data[:, order], (x,), grad_fn)


def leaky_relu(x, slope=0.2):
    """``max(x, slope * x)``; the subgradient at 0 takes the positive branch."""
    x = _as_tensor(x)
    if not 0.0 <= slope <= 1.0:
        raise ValueError("slope must lie in [0, 1]")
    pos = x.data >= 0
    y = np.where(pos, x.data, x.data * x.dtype.type(slope))

    def grad_fn(g):
        return (np.where(pos, g, g * g.dtype.type(slope)),)

    return _result(y, (x,), grad_fn)


def l1_loss(pred, target, mask=None):
    """Mean absolute error, optionally restricted to ``mask`` (same shape, 0/1).

    The subgradient at exact equality is 0.
    """
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    if mask is None:
        count = diff.size
        weights = None
        total = np.abs(diff).sum(dtype=np.float64)
    else:
        weights = np.broadcast_to(np.asarray(mask, dtype=pred.dtype), pred.shape)
        count = float(weights.sum())
        if count <= 0:
            raise ValueError("mask selects no elements")
        total = (np.abs(diff) * weights).sum(dtype=np.float64)
    loss = np.asarray(total / count, dtype=pred.dtype)

    def grad_fn(g):
        sg = np.sign(diff) * (g / pred.dtype.type(count))
        if weights is not None:
            sg = sg * weights
        return sg, -sg

    return _result(loss, (pred, target), grad_fn)


# --------------------------------------------------------------------------
# optimisation


@dataclass
class OptimizerState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def optimizer_step(params, grads, state):
    """One bias-corrected adaptive-moment update, in place on ``params``.

    ``params`` and ``grads`` are parallel lists of arrays; a ``None`` gradient
    counts as zero. Returns ``state`` with the step counter advanced.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise ValueError("optimizer state was built for a different parameter list")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape or m.shape != p.shape:
            raise ValueError(f"shape mismatch in optimizer: param {p.shape}, grad {g.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
    return state


class Adam:
    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.state = OptimizerState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        optimizer_step([p.data for p in self.params], [p.grad for p in self.params], self.state)
