"""Reverse-mode automatic differentiation over dense float64 arrays.

Define-by-run: every op returns a new Tensor node that remembers its inputs
and a closure mapping the output gradient to input gradients. ``backward()``
seeds the (scalar) loss with 1 and walks the graph once in reverse
topological order, so each node's gradient is complete before it is pushed
to its parents. Tensors double as the graph nodes (op kind, parents, value,
gradient).

Only the primitives the sequence models actually need are implemented; there
is no broadcasting beyond bias rows and scalar weights, and no GPU path.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "AdamHyper",
    "ShapeMismatchError",
    "GraphError",
    "DegeneratePointError",
    "forward_primitive",
    "matmul",
    "add",
    "mul",
    "concat",
    "relu",
    "sigmoid",
    "tanh",
    "abs_diff",
    "softmax",
    "dropout_mask_apply",
    "make_dropout_mask",
    "scalar_scale",
    "log",
    "clamp",
    "pick",
    "tensor_sum",
    "mean",
    "normalize_rows",
    "cross_entropy",
    "mse",
    "adam_step",
    "zero_grads",
    "grad_check",
    "register_gradcheck_graph",
    "run_registered_gradchecks",
    "GRADCHECK_GRAPHS",
]


class ShapeMismatchError(ValueError):
    """Operands with incompatible shapes for the requested op."""


class GraphError(RuntimeError):
    """Misuse of the graph machinery (non-scalar loss, step before backward)."""


class DegeneratePointError(RuntimeError):
    """A kinked op (relu, abs_diff) was evaluated exactly at its kink during
    a gradient check; the caller must perturb the point."""


# Kink bookkeeping is only needed while grad_check runs; normal training
# forwards skip the extra equality scans.
_TRACK_KINKS = False

# -log(0) guard for losses; keeps evaluation finite when a clipped mixture
# assigns exactly zero mass to the true target.
LOG_FLOOR = 1e-12


class Tensor:
    """A dense float64 array plus the bookkeeping needed to backprop through it."""

    __slots__ = ("data", "grad", "parents", "op", "backward_fn", "kink")

    def __init__(self, data, parents=(), op="leaf", backward_fn=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.parents = tuple(parents)
        self.op = op
        self.backward_fn = backward_fn
        self.kink = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Flat view of the stored values."""
        return self.data.reshape(-1)

    def backward(self) -> None:
        """Populate ``.grad`` on every node reachable from this scalar loss.

        Frozen parameters keep an exactly-zero gradient. Each node is visited
        once; gradients of shared subexpressions accumulate.
        """
        if self.size != 1:
            raise GraphError(f"backward requires a scalar loss, got shape {self.shape}")
        order = _topo_order(self)
        for node in order:
            node.grad = np.zeros_like(node.data)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node.backward_fn is None:
                continue
            contribs = node.backward_fn(node.grad)
            for parent, contrib in zip(node.parents, contribs):
                if contrib is None:
                    continue
                if isinstance(parent, Parameter) and not parent.trainable:
                    continue
                parent.grad += contrib

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape})"


class Parameter(Tensor):
    """A leaf tensor with Adam state; ``trainable=False`` freezes it bitwise."""

    __slots__ = ("trainable", "m", "v", "step")

    def __init__(self, data, trainable=True):
        super().__init__(data, op="parameter")
        self.trainable = bool(trainable)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0


def _topo_order(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    order: list[Tensor] = []
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
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, (g, s) in enumerate(zip(grad.shape, shape)):
        if s == 1 and g != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# primitives


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def backward_fn(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor(out, (a, b), "matmul", backward_fn)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeMismatchError(f"add: incompatible shapes {a.shape} and {b.shape}") from None

    def backward_fn(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return Tensor(out, (a, b), "add", backward_fn)


def mul(a, b) -> Tensor:
    """Elementwise product; either operand may be a scalar-shaped tensor."""
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeMismatchError(f"mul: incompatible shapes {a.shape} and {b.shape}") from None

    def backward_fn(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return Tensor(out, (a, b), "mul", backward_fn)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = tuple(_as_tensor(p) for p in parts)
    if not parts:
        raise ShapeMismatchError("concat: needs at least one input")
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        shapes = [p.shape for p in parts]
        raise ShapeMismatchError(f"concat: incompatible shapes {shapes}") from None
    widths = [p.shape[axis] for p in parts]
    split_at = np.cumsum(widths)[:-1]

    def backward_fn(g):
        return tuple(np.split(g, split_at, axis=axis))

    return Tensor(out, parts, "concat", backward_fn)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.maximum(x.data, 0.0), (x,), "relu",
                 lambda g: (g * (x.data > 0.0),))
    if _TRACK_KINKS and np.any(x.data == 0.0):
        out.kink = True
    return out


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    d = x.data
    s = np.empty_like(d)
    pos = d >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    s[~pos] = ex / (1.0 + ex)
    return Tensor(s, (x,), "sigmoid", lambda g: (g * s * (1.0 - s),))


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    t = np.tanh(x.data)
    return Tensor(t, (x,), "tanh", lambda g: (g * (1.0 - t * t),))


def abs_diff(a, b) -> Tensor:
    """Full-wave rectified difference |a - b|; subgradient 0 at the kink."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"abs_diff: shapes must match, got {a.shape} and {b.shape}")
    d = a.data - b.data
    sign = np.sign(d)
    out = Tensor(np.abs(d), (a, b), "abs_diff",
                 lambda g: (g * sign, -g * sign))
    if _TRACK_KINKS and np.any(d == 0.0):
        out.kink = True
    return out


def softmax(x) -> Tensor:
    """Row-wise softmax over the last axis, max-shifted for stability."""
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return Tensor(y, (x,), "softmax", backward_fn)


def dropout_mask_apply(x, mask) -> Tensor:
    """Multiply by a precomputed (already scaled) dropout mask."""
    x = _as_tensor(x)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != x.shape:
        raise ShapeMismatchError(
            f"dropout_mask_apply: mask shape {mask.shape} does not match input {x.shape}")
    return Tensor(x.data * mask, (x,), "dropout_mask_apply", lambda g: (g * mask,))


def make_dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout mask: zero with probability ``rate``, else 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    keep = rng.random(shape) >= rate
    return keep.astype(np.float64) / (1.0 - rate)


def scalar_scale(x, scale: float, shift: float = 0.0) -> Tensor:
    x = _as_tensor(x)
    return Tensor(scale * x.data + shift, (x,), "scalar_scale",
                  lambda g: (g * scale,))


def log(x) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data <= 0.0):
        raise ValueError("log: requires strictly positive inputs")
    return Tensor(np.log(x.data), (x,), "log", lambda g: (g / x.data,))


def clamp(x, lo: float | None = None, hi: float | None = None) -> Tensor:
    x = _as_tensor(x)
    out = np.clip(x.data, lo, hi)
    passed = np.ones_like(x.data, dtype=bool)
    if lo is not None:
        passed &= x.data > lo
    if hi is not None:
        passed &= x.data < hi
    return Tensor(out, (x,), "clamp", lambda g: (g * passed,))


def pick(x, index) -> Tensor:
    """Select one column per row of a 2-D tensor: out[i] = x[i, index[i]]."""
    x = _as_tensor(x)
    idx = np.asarray(index, dtype=np.int64)
    if x.data.ndim != 2 or idx.ndim != 1 or idx.shape[0] != x.shape[0]:
        raise ShapeMismatchError(
            f"pick: need a (batch, m) tensor and (batch,) indices, got {x.shape} and {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
        raise IndexError(f"pick: index out of range for {x.shape[1]} columns")
    rows = np.arange(x.shape[0])
    out = x.data[rows, idx]

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        gx[rows, idx] = g
        return (gx,)

    return Tensor(out, (x,), "pick", backward_fn)


def tensor_sum(x) -> Tensor:
    x = _as_tensor(x)
    return Tensor(x.data.sum(), (x,), "sum",
                  lambda g: (np.ones_like(x.data) * g,))


def mean(x) -> Tensor:
    x = _as_tensor(x)
    return scalar_scale(tensor_sum(x), 1.0 / x.size)


def normalize_rows(x, fallback) -> Tensor:
    """Scale each row of ``x`` to sum to 1; rows with zero mass copy ``fallback``."""
    x, fallback = _as_tensor(x), _as_tensor(fallback)
    if x.shape != fallback.shape or x.data.ndim != 2:
        raise ShapeMismatchError(
            f"normalize_rows: need matching 2-D shapes, got {x.shape} and {fallback.shape}")
    s = x.data.sum(axis=1, keepdims=True)
    good = s > 0.0
    safe = np.where(good, s, 1.0)
    y = np.where(good, x.data / safe, fallback.data)

    def backward_fn(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        gx = np.where(good, (g - dot) / safe, 0.0)
        gf = np.where(good, 0.0, g)
        return gx, gf

    return Tensor(y, (x, fallback), "normalize_rows", backward_fn)


_PRIMITIVES: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "concat": lambda *xs: concat(xs),
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "abs_diff": abs_diff,
    "softmax": softmax,
    "dropout_mask_apply": dropout_mask_apply,
    "scalar_scale": scalar_scale,
}


def forward_primitive(kind: str, *inputs, **kwargs) -> Tensor:
    """Apply a primitive by name; the returned Tensor is the new graph node."""
    if kind not in _PRIMITIVES:
        raise ValueError(f"unknown primitive {kind!r}; known: {sorted(_PRIMITIVES)}")
    return _PRIMITIVES[kind](*inputs, **kwargs)


# ---------------------------------------------------------------------------
# losses


def cross_entropy(probs: Tensor, targets) -> Tensor:
    """Mean negative log probability of integer targets under ``probs`` rows.

    The log argument is shifted by LOG_FLOOR rather than clamped: the value
    stays finite when a clipped mixture zeroes the target, and the gradient
    keeps pointing back toward positive mass instead of dying at zero.
    """
    targets = np.asarray(targets, dtype=np.int64)
    picked = pick(probs, targets)
    shifted = scalar_scale(picked, 1.0, LOG_FLOOR)
    return scalar_scale(tensor_sum(log(shifted)), -1.0 / picked.size)


def mse(pred: Tensor, target) -> Tensor:
    """Mean squared error against a constant target array."""
    pred = _as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if target.shape != pred.shape:
        raise ShapeMismatchError(f"mse: target shape {target.shape} does not match {pred.shape}")
    d = add(pred, Tensor(-target))
    return scalar_scale(tensor_sum(mul(d, d)), 1.0 / d.size)


# ---------------------------------------------------------------------------
# optimization


@dataclass(frozen=True)
class AdamHyper:
    """Adam hyperparameters with the conventional defaults."""

    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0.0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError(f"betas must lie in (0, 1), got {self.beta1}, {self.beta2}")
        if self.epsilon <= 0.0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")


def adam_step(params: Sequence[Parameter], hyper: AdamHyper) -> None:
    """Bias-corrected Adam update on trainable parameters.

    Frozen parameters are skipped, as are parameters that did not appear in
    this step's graph (grad still None); calling before any backward at all
    is an error.
    """
    live = [p for p in params if p.trainable]
    if live and all(p.grad is None for p in live):
        raise GraphError("adam_step called before backward populated gradients")
    for p in live:
        if p.grad is None:
            continue
        p.step += 1
        p.m = hyper.beta1 * p.m + (1.0 - hyper.beta1) * p.grad
        p.v = hyper.beta2 * p.v + (1.0 - hyper.beta2) * (p.grad * p.grad)
        m_hat = p.m / (1.0 - hyper.beta1 ** p.step)
        v_hat = p.v / (1.0 - hyper.beta2 ** p.step)
        p.data -= hyper.learning_rate * m_hat / (np.sqrt(v_hat) + hyper.epsilon)


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(fn: Callable[[], Tensor], params: Sequence[Parameter], eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` rebuilds and returns the scalar loss from the parameters' current
    values. Raises DegeneratePointError if the forward pass evaluates relu or
    abs_diff exactly at the kink, since the two-sided difference is then
    meaningless.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    params = list(params)

    global _TRACK_KINKS
    _TRACK_KINKS = True
    try:
        loss = fn()
    finally:
        _TRACK_KINKS = False
    if loss.size != 1:
        raise GraphError("grad_check requires a scalar-valued function")
    kinked = sorted({node.op for node in _topo_order(loss) if node.kink})
    if kinked:
        raise DegeneratePointError(
            f"forward pass hit non-differentiable points in {kinked}; perturb the inputs")

    zero_grads(params)
    loss.backward()
    analytic = [np.array(p.grad, copy=True) for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        if not p.trainable:
            continue
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(fn().data)
            flat[i] = orig - eps
            f_minus = float(fn().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            err = abs(gflat[i] - numeric) / max(1.0, abs(gflat[i]))
            worst = max(worst, err)
    return worst


GRADCHECK_GRAPHS: dict[str, Callable] = {}


def register_gradcheck_graph(name: str):
    """Decorator registering builder(rng) -> (fn, params) for the check suite."""

    def deco(builder):
        GRADCHECK_GRAPHS[name] = builder
        return builder

    return deco


def run_registered_gradchecks(seed: int = 0, eps: float = 1e-5) -> dict[str, float]:
    """Gradient-check every registered graph; returns name -> max relative error."""
    results = {}
    for name in sorted(GRADCHECK_GRAPHS):
        rng = np.random.default_rng(seed)
        fn, params = GRADCHECK_GRAPHS[name](rng)
        results[name] = grad_check(fn, params, eps)
    return results


@register_gradcheck_graph("elementwise_chain")
def _build_elementwise_chain(rng):
    a = Parameter(rng.normal(size=(3, 4)))
    b = Parameter(rng.normal(size=(3, 4)))
    w = Parameter(rng.normal(size=(4, 2)) * 0.5)
    mask = make_dropout_mask((3, 4), 0.25, rng)

    def fn():
        d = abs_diff(a, b)
        h = dropout_mask_apply(tanh(d), mask)
        z = matmul(sigmoid(h), w)
        return mean(mul(z, z))

    return fn, [a, b, w]


@register_gradcheck_graph("softmax_cross_entropy")
def _build_softmax_ce(rng):
    w = Parameter(rng.normal(size=(5, 4)) * 0.5)
    x = rng.normal(size=(6, 5))
    targets = rng.integers(0, 4, size=6)

    def fn():
        return cross_entropy(softmax(matmul(Tensor(x), w)), targets)

    return fn, [w]


@register_gradcheck_graph("clipped_mixture")
def _build_clipped_mixture(rng):
    w = Parameter(rng.normal(size=(5, 4)) * 0.5)
    w_base = Parameter(np.asarray(0.6))
    w_off = Parameter(np.asarray(0.4))
    x = rng.normal(size=(6, 5))
    offsets = rng.normal(size=(6, 4)) * 0.4
    targets = rng.integers(0, 4, size=6)

    def fn():
        base = softmax(matmul(Tensor(x), w))
        pre = add(mul(base, w_base), mul(Tensor(offsets), w_off))
        return cross_entropy(normalize_rows(clamp(pre, 0.0, 1.0), base), targets)

    return fn, [w, w_base, w_off]


