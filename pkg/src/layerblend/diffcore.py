"""Reverse-mode automatic differentiation on float64 numpy arrays.

The module provides the handful of differentiable operations the encoder,
the layer combiner, and the classification head compose: matrix products,
stable softmax / log-softmax, layer normalisation, masked max and weighted
reductions, dropout, GELU, plus an Adam optimizer and a central
finite-difference gradient checker.

Conventions:
  * every tensor is float64, row-major;
  * gradients accumulate into ``Tensor.grad`` across ``backward`` calls and
    must be cleared explicitly (``zero_grads``) between optimizer steps;
  * max reductions route their subgradient to the first maximal position;
  * masked weighted sums zero out excluded positions without renormalising
    the weights.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError, InvalidMaskError

Array = np.ndarray

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

# When True (see no_grad), newly created tensors never join a graph.
_GRAD_ENABLED = True


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph construction inside the block (pure inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A float64 array plus an optional position in a computation graph."""

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad) and _GRAD_ENABLED
        self.grad: Array | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Array], Sequence[Array | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; the module-level functions do the real work
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(values: Array, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(values)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    squeezed = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if squeezed:
        grad = grad.sum(axis=squeezed, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.values + b.values

    def backward(g: Array):
        return _unbroadcast(g, a.values.shape), _unbroadcast(g, b.values.shape)

    return _node(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.values * b.values

    def backward(g: Array):
        return (
            _unbroadcast(g * b.values, a.values.shape),
            _unbroadcast(g * a.values, b.values.shape),
        )

    return _node(out, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.values, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    """Multiply by a plain python constant (no gradient bookkeeping for c)."""
    a = as_tensor(a)
    return _node(a.values * c, (a,), lambda g: (g * c,))


def add_const(a, const: Array) -> Tensor:
    """Add a non-trainable array that broadcasts over ``a``."""
    a = as_tensor(a)
    return _node(a.values + const, (a,), lambda g: (g,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.values.reshape(shape)

    def backward(g: Array):
        return (g.reshape(a.values.shape),)

    return _node(out, (a,), backward)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    out = a.values.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g: Array):
        return (g.transpose(inverse),)

    return _node(out, (a,), backward)


def getitem(a, idx) -> Tensor:
    """Index with any numpy basic or advanced index; gradients scatter-add."""
    a = as_tensor(a)
    out = np.array(a.values[idx])

    def backward(g: Array):
        buf = np.zeros_like(a.values)
        np.add.at(buf, idx, g)
        return (buf,)

    return _node(out, (a,), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    parents = tuple(as_tensor(t) for t in tensors)
    out = np.stack([p.values for p in parents], axis=axis)

    def backward(g: Array):
        # slices that received no gradient (common when a strategy reads a
        # single early layer) propagate None so backward skips whole blocks
        pieces = np.moveaxis(g, axis, 0)
        return tuple(
            pieces[i] if pieces[i].any() else None for i in range(len(parents))
        )

    return _node(out, parents, backward)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.values.sum(axis=axis, keepdims=keepdims)

    def backward(g: Array):
        if axis is None:
            return (np.broadcast_to(g, a.values.shape).copy(),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp, a.values.shape).copy(),)

    return _node(out, (a,), backward)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.values.mean(axis=axis, keepdims=keepdims)
    count = a.values.size if axis is None else a.values.shape[axis]

    def backward(g: Array):
        if axis is None:
            return (np.broadcast_to(g / count, a.values.shape).copy(),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp / count, a.values.shape).copy(),)

    return _node(out, (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    if av.ndim < 2 or bv.ndim < 2:
        raise DimensionError(
            f"matmul needs at least 2-d operands, got {av.shape} x {bv.shape}"
        )
    if av.shape[-1] != bv.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {av.shape} x {bv.shape}"
        )
    out = av @ bv

    if bv.ndim == 2 and av.ndim > 2:
        # batched data times a flat weight matrix: collapse the batch into
        # one big GEMM instead of many tiny ones
        k, n = bv.shape

        def backward(g: Array):
            g2 = g.reshape(-1, n)
            ga = (g2 @ bv.T).reshape(av.shape)
            gb = av.reshape(-1, k).T @ g2
            return ga, gb

    else:

        def backward(g: Array):
            ga = g @ np.swapaxes(bv, -1, -2)
            gb = np.swapaxes(av, -1, -2) @ g
            return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _node(out, (a, b), backward)


# ---------------------------------------------------------------------------
# nonlinearities


def _check_axis(shape: tuple[int, ...], axis: int, op: str) -> int:
    ndim = len(shape)
    if not -ndim <= axis < ndim:
        raise DimensionError(f"{op}: axis {axis} invalid for shape {shape}")
    axis %= ndim
    if shape[axis] == 0:
        raise DimensionError(f"{op}: axis {axis} of shape {shape} is empty")
    return axis


def softmax(x, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``; rows sum to one."""
    x = as_tensor(x)
    axis = _check_axis(x.values.shape, axis, "softmax")
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    np.exp(shifted, out=shifted)
    shifted /= shifted.sum(axis=axis, keepdims=True)
    out = shifted

    def backward(g: Array):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return ((g - inner) * out,)

    return _node(out, (x,), backward)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _check_axis(x.values.shape, axis, "log_softmax")
    m = x.values.max(axis=axis, keepdims=True)
    shifted = x.values - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g: Array):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, (x,), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    h = x.values.shape[-1]
    if gamma.values.shape != (h,) or beta.values.shape != (h,):
        raise DimensionError(
            f"layer_norm affine shapes {gamma.values.shape}/{beta.values.shape} "
            f"do not match last dimension {h} of {x.values.shape}"
        )
    mu = x.values.mean(axis=-1, keepdims=True)
    xc = x.values - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.values + beta.values

    def backward(g: Array):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gamma.values
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgamma, dbeta

    return _node(out, (x, gamma, beta), backward)


def gelu(x) -> Tensor:
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.values * _INV_SQRT2))
    out = x.values * cdf

    def backward(g: Array):
        pdf = np.exp(-0.5 * x.values * x.values) * _INV_SQRT_2PI
        return (g * (cdf + x.values * pdf),)

    return _node(out, (x,), backward)


def dropout(x, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when ``p == 0``. Train-mode only."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability must be in [0, 1), got {p}")
    x = as_tensor(x)
    if p == 0.0:
        return x
    keep = rng.random(x.values.shape, dtype=np.float32) >= p
    scale = 1.0 / (1.0 - p)
    out = np.where(keep, x.values * scale, 0.0)

    def backward(g: Array):
        return (np.where(keep, g * scale, 0.0),)

    return _node(out, (x,), backward)


# ---------------------------------------------------------------------------
# masked reductions


def _normalize_mask(mask, shape: tuple[int, ...], axis: int) -> Array | None:
    """Expand ``mask`` to ``shape``.

    Accepted forms: a 1-d mask over the reduced axis, a mask over all
    position axes (``shape[:-1]``), or anything numpy can broadcast to
    ``shape``.
    """
    if mask is None:
        return None
    m = np.asarray(mask, dtype=bool)
    if m.shape == (shape[axis],):
        view = [1] * len(shape)
        view[axis] = shape[axis]
        m = m.reshape(view)
    elif m.shape == tuple(shape[:-1]):
        m = m[..., None]
    try:
        return np.broadcast_to(m, shape)
    except ValueError:
        raise DimensionError(
            f"mask of shape {np.asarray(mask).shape} does not fit data of shape "
            f"{shape} reduced over axis {axis}"
        ) from None


def max_reduce(x, axis: int, mask=None) -> Tensor:
    """Maximum over ``axis`` restricted to masked-in positions.

    Excluded positions behave like -inf; the subgradient flows to the first
    maximal included position of each output element.
    """
    x = as_tensor(x)
    axis = _check_axis(x.values.shape, axis, "max_reduce")
    m = _normalize_mask(mask, x.values.shape, axis)
    if m is None:
        work = x.values
    else:
        counts = m.sum(axis=axis)
        if not counts.all():
            raise InvalidMaskError(
                "max_reduce mask excludes every position along the reduced axis"
            )
        work = np.where(m, x.values, -np.inf)
    idx = np.expand_dims(work.argmax(axis=axis), axis)
    out = np.take_along_axis(work, idx, axis=axis).squeeze(axis)

    def backward(g: Array):
        buf = np.zeros_like(x.values)
        np.put_along_axis(buf, idx, np.expand_dims(g, axis), axis=axis)
        return (buf,)

    return _node(out, (x,), backward)


def weighted_reduce(x, weights, axis: int, mask=None) -> Tensor:
    """Sum of ``weights[s] * slice_s`` over masked-in positions of ``axis``.

    Excluded positions contribute zero; the weights are not renormalised.
    Gradients flow to both the data and the weight vector.
    """
    x, weights = as_tensor(x), as_tensor(weights)
    axis = _check_axis(x.values.shape, axis, "weighted_reduce")
    n = x.values.shape[axis]
    if weights.values.shape != (n,):
        raise DimensionError(
            f"weighted_reduce needs weights of shape ({n},) for data "
            f"{x.values.shape} on axis {axis}, got {weights.values.shape}"
        )
    m = _normalize_mask(mask, x.values.shape, axis)
    view = [1] * x.values.ndim
    view[axis] = n
    w = weights.values.reshape(view)
    w_eff = w if m is None else np.where(m, w, 0.0)
    out = (x.values * w_eff).sum(axis=axis)
    other_axes = tuple(i for i in range(x.values.ndim) if i != axis)

    def backward(g: Array):
        g_exp = np.expand_dims(g, axis)
        dx = g_exp * w_eff
        dw_full = x.values * g_exp
        if m is not None:
            dw_full = np.where(m, dw_full, 0.0)
        dw = dw_full.sum(axis=other_axes)
        return dx, dw

    return _node(out, (x, weights), backward)


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits``."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(
            f"cross_entropy expects (N, C) logits and (N,) labels, got "
            f"{logits.shape} and {labels.shape}"
        )
    logp = log_softmax(logits, axis=-1)
    picked = getitem(logp, (np.arange(labels.shape[0]), labels))
    return neg(reduce_mean(picked))


# ---------------------------------------------------------------------------
# backward engine


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor.

    ``loss`` must be scalar. Gradients add onto whatever ``grad`` already
    holds; call ``zero_grads`` between optimizer steps.
    """
    if loss.values.size != 1:
        raise ContractError(
            f"backward requires a scalar loss, got shape {loss.shape}"
        )
    if not loss.requires_grad:
        return

    # iterative post-order topological sort over grad-requiring ancestry
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    flowing: dict[int, Array] = {id(loss): np.ones_like(loss.values)}
    for node in reversed(order):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            if key in flowing:
                flowing[key] = flowing[key] + pg
            else:
                flowing[key] = pg


def zero_grads(params: Mapping[str, Tensor] | Sequence[Tensor]) -> None:
    values = params.values() if isinstance(params, Mapping) else params
    for p in values:
        p.grad = None


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """First/second moment accumulators, shape-aligned with the parameters."""

    step: int = 0
    m: dict[str, Array] = field(default_factory=dict)
    v: dict[str, Array] = field(default_factory=dict)


def init_adam_state(params: Mapping[str, Tensor]) -> AdamState:
    state = AdamState()
    for name, p in params.items():
        state.m[name] = np.zeros_like(p.values)
        state.v[name] = np.zeros_like(p.values)
    return state


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, Array],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One Adam update with bias correction, in place on the parameters."""
    if set(grads) != set(params) or set(state.m) != set(params):
        raise ContractError(
            "adam_step: parameter, gradient, and state name sets disagree"
        )
    state.step += 1
    t = state.step
    corr1 = 1.0 - beta1**t
    corr2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.values.shape:
            raise ContractError(
                f"adam_step: gradient shape {g.shape} misaligned with "
                f"parameter {name!r} of shape {p.values.shape}"
            )
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.values -= lr * (m / corr1) / (np.sqrt(v / corr2) + eps)
    return state


class Adam:
    """Optimizer facade that reads gradients off the parameters themselves."""

    def __init__(self, params: Mapping[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = init_adam_state(self.params)

    def step(self) -> None:
        grads = {
            name: p.grad if p.grad is not None else np.zeros_like(p.values)
            for name, p in self.params.items()
        }
        adam_step(self.params, grads, self.state, self.lr,
                  self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        zero_grads(self.params)


# ---------------------------------------------------------------------------
# gradient checking


def finite_difference_check(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
) -> float:
    """Max guarded relative error between analytic and numeric gradients.

    ``f`` must be a deterministic map from the parameters to a scalar loss
    (disable dropout). Parameter values are perturbed in place and restored
    bit-for-bit; gradients are left zeroed.

    The per-coordinate error is ``|a - n| / max(|a|, |n|, 1)`` so that
    near-zero gradients are compared absolutely instead of blowing up.
    """
    zero_grads(params)
    backward(f(params))
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.values))
        for name, p in params.items()
    }
    worst = 0.0
    for name, p in params.items():
        flat = p.values.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(params).item()
            flat[i] = orig - eps
            fm = f(params).item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            a = a_flat[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1.0)
            if err > worst:
                worst = err
    zero_grads(params)
    return worst
