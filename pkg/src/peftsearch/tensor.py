"""Dense float64 tensors with reverse-mode autodiff.

Small by design: just the primitives needed to train an encoder with
bottleneck adapters and to expose per-parameter gradients to the pruning
criteria. No broadcasting beyond bias-style adds, no views, no GPU.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

_GELU_C = math.sqrt(2.0 / math.pi)


class Tensor:
    """A node in the computation graph.

    ``data`` is always a float64 ndarray. ``grad`` is ``None`` until a
    backward pass populates it; it then has the same shape as ``data``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, _parents=(), _backward_fn=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward_fn = _backward_fn

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _needs_grad(t: Tensor) -> bool:
    # Leaves without requires_grad (frozen weights, inputs) never need a
    # gradient; interior nodes always do so flow can continue upstream.
    return t.requires_grad or bool(t._parents)


class Tape:
    """Reverse-replay schedule: every recorded op exactly once, in reverse."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "Tape":
        order = []
        seen = set()
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
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)


def backward(loss: Tensor, params=()):
    """Populate gradient slots of everything reachable from ``loss``.

    ``params`` not reachable from the loss end up with exact-zero grads.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    tape = Tape.trace(loss)
    for t in tape.nodes:
        t.grad = None
    for p in params:
        p.grad = np.zeros_like(p.data)
    loss.grad = np.ones_like(loss.data)
    for t in reversed(tape.nodes):
        if t._backward_fn is None or t.grad is None:
            continue
        needs = tuple(_needs_grad(p) for p in t._parents)
        grads = t._backward_fn(t.grad, needs)
        for parent, g, need in zip(t._parents, grads, needs):
            if g is None or not need:
                continue
            if parent.grad is None:
                parent.grad = g
            else:
                parent.grad = parent.grad + g


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Stacked operands must share leading dimensions."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    if a.data.ndim > 2 and b.data.ndim > 2:
        if a.data.shape[:-2] != b.data.shape[:-2]:
            raise ValueError(f"matmul leading dimensions disagree: {a.shape} vs {b.shape}")
    out_data = a.data @ b.data

    def bwd(g, needs):
        ga = gb = None
        if needs[0]:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        if needs[1]:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return ga, gb

    return Tensor(out_data, _parents=(a, b), _backward_fn=bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def bwd(g, needs):
        ga = _unbroadcast(g, a.data.shape) if needs[0] else None
        gb = _unbroadcast(g, b.data.shape) if needs[1] else None
        return ga, gb

    return Tensor(out_data, _parents=(a, b), _backward_fn=bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def bwd(g, needs):
        ga = _unbroadcast(g * b.data, a.data.shape) if needs[0] else None
        gb = _unbroadcast(g * a.data, b.data.shape) if needs[1] else None
        return ga, gb

    return Tensor(out_data, _parents=(a, b), _backward_fn=bwd)


def scale(a: Tensor, s: float) -> Tensor:
    def bwd(g, needs):
        return (g * s if needs[0] else None,)

    return Tensor(a.data * s, _parents=(a,), _backward_fn=bwd)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def bwd(g, needs):
        return (g.reshape(a.data.shape) if needs[0] else None,)

    return Tensor(a.data.reshape(shape), _parents=(a,), _backward_fn=bwd)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def bwd(g, needs):
        return (g.transpose(inverse) if needs[0] else None,)

    return Tensor(a.data.transpose(axes), _parents=(a,), _backward_fn=bwd)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bwd(g, needs):
        return (g * mask if needs[0] else None,)

    return Tensor(np.where(mask, x.data, 0.0), _parents=(x,), _backward_fn=bwd)


def gelu(x: Tensor) -> Tensor:
    # tanh approximation with constant sqrt(2/pi); derivative is exact for
    # this approximation.
    v = x.data
    v2 = v * v
    u = v2 * v
    u *= 0.044715
    u += v
    u *= _GELU_C
    t = np.tanh(u, out=u)
    out_data = 1.0 + t
    out_data *= v
    out_data *= 0.5

    def bwd(g, needs):
        if not needs[0]:
            return (None,)
        # d/dv of 0.5*v*(1+t): 0.5*(1+t) + 0.5*v*(1-t^2)*dinner
        dinner = v2 * (3 * 0.044715)
        dinner += 1.0
        dinner *= _GELU_C
        dinner *= 1.0 - t * t
        dinner *= v
        dinner += 1.0 + t
        dinner *= 0.5
        dinner *= g
        return (dinner,)

    return Tensor(out_data, _parents=(x,), _backward_fn=bwd)


def activation(x: Tensor, kind: str) -> Tensor:
    """Elementwise nonlinearity; ``kind`` is one of ``relu`` or ``gelu``."""
    if kind == "relu":
        return relu(x)
    if kind == "gelu":
        return gelu(x)
    raise ValueError(f"unknown activation kind {kind!r}")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g, needs):
        if not needs[0]:
            return (None,)
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return Tensor(y, _parents=(x,), _backward_fn=bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = xhat * gamma.data + beta.data

    def bwd(g, needs):
        gx = ggamma = gbeta = None
        if needs[1]:
            ggamma = _unbroadcast(g * xhat, gamma.data.shape)
        if needs[2]:
            gbeta = _unbroadcast(g, beta.data.shape)
        if needs[0]:
            gh = g * gamma.data
            m1 = gh.mean(axis=-1, keepdims=True)
            m2 = (gh * xhat).mean(axis=-1, keepdims=True)
            gx = inv * (gh - m1 - xhat * m2)
        return gx, ggamma, gbeta

    return Tensor(out_data, _parents=(x, gamma, beta), _backward_fn=bwd)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.min(initial=0) < 0 or ids.max(initial=0) >= table.data.shape[0]:
        raise ValueError("embedding id out of range")
    out_data = table.data[ids]

    def bwd(g, needs):
        if not needs[0]:
            return (None,)
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return Tensor(out_data, _parents=(table,), _backward_fn=bwd)


def mean(a: Tensor, axis: int) -> Tensor:
    n = a.data.shape[axis]

    def bwd(g, needs):
        if not needs[0]:
            return (None,)
        return (np.expand_dims(g, axis).repeat(n, axis=axis) / n,)

    return Tensor(a.data.mean(axis=axis), _parents=(a,), _backward_fn=bwd)


def total(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""

    def bwd(g, needs):
        return (np.full_like(a.data, float(g)) if needs[0] else None,)

    return Tensor(a.data.sum(), _parents=(a,), _backward_fn=bwd)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log likelihood over rows of ``logits``."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise ValueError(f"logits must be 2-d, got shape {logits.shape}")
    n, c = logits.data.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match {n} logit rows")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError("label index out of range")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    nll = -np.log(probs[np.arange(n), labels])
    out_data = nll.mean()

    def bwd(g, needs):
        if not needs[0]:
            return (None,)
        grad = probs.copy()
        grad[np.arange(n), labels] -= 1.0
        return (grad * (float(g) / n),)

    return Tensor(out_data, _parents=(logits,), _backward_fn=bwd)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0


def adam_step(params, grads, state: AdamState, lr, betas=(0.9, 0.999), eps=1e-8):
    """One Adam update in place on ``params`` (list of Tensors)."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ValueError("optimizer state does not match parameter list")
    b1, b2 = betas
    state.step += 1
    t = state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError("gradient shape does not match parameter")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)


class Adam:
    """Stateful wrapper around :func:`adam_step` reading ``p.grad``."""

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def step(self):
        grads = [p.grad for p in self.params]
        adam_step(self.params, grads, self.state, self.lr, self.betas, self.eps)
