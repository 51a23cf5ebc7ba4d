"""Double-precision numeric kernels and a small reverse-mode gradient engine.

Everything here is deterministic: reductions run in a fixed order, so two
evaluations at the same point are bit-identical. The engine covers exactly
the operations the loss heads and the graph encoder need (matmul, add,
scale, ReLU, fused softmax cross-entropy, row normalization, inner product,
log-sum-exp) rather than aiming at general-purpose autodiff.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import NumericalError, ValidationError

Array = np.ndarray


# ---------------------------------------------------------------------------
# scalar / array kernels
# ---------------------------------------------------------------------------

def stable_log_sum_exp(values: Sequence[float]) -> float:
    """max(v) + log(sum(exp(v - max(v)))), left-to-right summation.

    Never overflows for inputs of magnitude up to ~1e6 because every
    exponent is shifted to be <= 0.
    """
    vals = [float(v) for v in values]
    if not vals:
        raise ValidationError("empty reduction")
    m = max(vals)
    return m + math.log(sum(math.exp(v - m) for v in vals))


def l2_normalize(v: Array, eps: float = 1e-12) -> Array:
    """v / max(||v||, eps). The eps guard keeps the zero vector finite."""
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    return v / max(norm, eps)


def ensure_finite(name: str, arr: Array) -> Array:
    arr = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values in '{name}'")
    return arr


# ---------------------------------------------------------------------------
# reverse-mode engine
# ---------------------------------------------------------------------------

class Var:
    """One node of a reverse-mode computation graph over float64 arrays.

    ``data`` holds the forward value, ``grad`` is filled during
    :func:`backward`. ``_vjp`` maps the output cotangent to one cotangent
    per parent, in parent order.
    """

    __slots__ = ("data", "grad", "parents", "_vjp")

    def __init__(self, data, parents=(), vjp=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.parents = tuple(parents)
        self._vjp = vjp

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Var(shape={self.data.shape})"


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _unbroadcast(grad: Array, shape: tuple) -> Array:
    """Sum a cotangent back down to the shape it was broadcast from."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Var(a.data + b.data, (a, b), vjp)


def scale(a, s: float) -> Var:
    a = as_var(a)
    s = float(s)

    def vjp(g):
        return (g * s,)

    return Var(a.data * s, (a,), vjp)


def neg(a) -> Var:
    return scale(a, -1.0)


def sub(a, b) -> Var:
    return add(a, neg(b))


def _swap(x: Array) -> Array:
    return np.swapaxes(x, -1, -2)


def matmul(a, b) -> Var:
    """np.matmul with broadcasting over leading (stack) dimensions."""
    a, b = as_var(a), as_var(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValidationError("matmul requires operands with ndim >= 2")

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, _swap(b.data)), a.data.shape)
        gb = _unbroadcast(np.matmul(_swap(a.data), g), b.data.shape)
        return ga, gb

    return Var(np.matmul(a.data, b.data), (a, b), vjp)


def transpose(a, axes: Sequence[int] | None = None) -> Var:
    a = as_var(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return (np.transpose(g, inverse),)

    return Var(np.transpose(a.data, axes), (a,), vjp)


def relu(a) -> Var:
    a = as_var(a)
    mask = a.data > 0

    def vjp(g):
        return (g * mask,)

    return Var(np.where(mask, a.data, 0.0), (a,), vjp)


def sum_along(a, axis=None, keepdims: bool = False) -> Var:
    a = as_var(a)
    in_shape = a.data.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, in_shape).copy(),)
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, in_shape).copy(),)

    return Var(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def mean_along(a, axis=None) -> Var:
    a = as_var(a)
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.data.shape[i] for i in axes]))
    return scale(sum_along(a, axis=axis), 1.0 / count)


def take_row(a, index: int) -> Var:
    a = as_var(a)
    if a.data.ndim != 2:
        raise ValidationError("take_row expects a 2-d operand")

    def vjp(g):
        out = np.zeros_like(a.data)
        out[index] = g
        return (out,)

    return Var(a.data[index], (a,), vjp)


def dot(a, b) -> Var:
    """Inner product of two 1-d vectors; returns a 0-d Var."""
    a, b = as_var(a), as_var(b)
    if a.data.ndim != 1 or b.data.ndim != 1:
        raise ValidationError("dot expects 1-d operands")

    def vjp(g):
        return g * b.data, g * a.data

    return Var(np.asarray(a.data @ b.data), (a, b), vjp)


def stack(items: Iterable[Var]) -> Var:
    """Stack 0-d Vars into a 1-d Var."""
    items = [as_var(v) for v in items]
    if not items:
        raise ValidationError("empty reduction")

    def vjp(g):
        return tuple(np.asarray(g[k]) for k in range(len(items)))

    return Var(np.array([v.data for v in items]), tuple(items), vjp)


def logsumexp(a) -> Var:
    """Stable log-sum-exp of a 1-d Var; returns a 0-d Var."""
    a = as_var(a)
    if a.data.ndim != 1 or a.data.size == 0:
        raise ValidationError("logsumexp expects a non-empty 1-d operand")
    m = a.data.max()
    exps = np.exp(a.data - m)
    total = exps.sum()
    softmax = exps / total

    def vjp(g):
        return (g * softmax,)

    return Var(np.asarray(m + np.log(total)), (a,), vjp)


def normalize(a, eps: float = 1e-12) -> Var:
    """Unit-normalize along the last axis with an eps-guarded denominator.

    Accepts a 1-d vector or a 2-d matrix of row vectors.
    """
    a = as_var(a)
    if a.data.ndim not in (1, 2):
        raise ValidationError("normalize expects a 1-d or 2-d operand")
    norms = np.linalg.norm(a.data, axis=-1, keepdims=True)
    denom = np.maximum(norms, eps)
    out = a.data / denom
    live = norms >= eps  # rows below eps see a constant denominator

    def vjp(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return ((g - out * inner * live) / denom,)

    return Var(out, (a,), vjp)


def softmax_cross_entropy(logits, label: int) -> Var:
    """Fused -log softmax(logits)[label] = logsumexp(logits) - logits[label]."""
    logits = as_var(logits)
    if logits.data.ndim != 1:
        raise ValidationError("softmax_cross_entropy expects 1-d logits")
    c = logits.data.shape[0]
    if not 0 <= label < c:
        raise ValidationError(f"label {label} out of range for {c} classes")
    m = logits.data.max()
    exps = np.exp(logits.data - m)
    total = exps.sum()
    softmax = exps / total

    def vjp(g):
        grad = softmax.copy()
        grad[label] -= 1.0
        return (g * grad,)

    value = (m + np.log(total)) - logits.data[label]
    return Var(np.asarray(value), (logits,), vjp)


def _topological_order(root: Var) -> list[Var]:
    seen: set[int] = set()
    order: list[Var] = []
    stack: list[tuple[Var, bool]] = [(root, False)]
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
            stack.append((parent, False))
    return order  # parents precede consumers


def backward(root: Var) -> None:
    """Accumulate gradients of a scalar root into every reachable node."""
    if root.data.shape != ():
        raise ValidationError("backward requires a scalar (0-d) root")
    order = _topological_order(root)
    for node in order:
        node.grad = np.zeros_like(node.data)
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._vjp is None:
            continue
        cotangents = node._vjp(node.grad)
        for parent, cot in zip(node.parents, cotangents):
            parent.grad += cot  # grad buffers are owned, never aliased by cot


# ---------------------------------------------------------------------------
# gradient evaluation and checking
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GradEvaluation:
    """Scalar loss value plus one gradient array per named parameter."""

    value: float
    gradients: dict[str, Array]


LossFn = Callable[[Mapping[str, Array]], GradEvaluation]


def grad_eval(build: Callable[[Mapping[str, Var]], Var],
              params: Mapping[str, Array]) -> GradEvaluation:
    """Evaluate ``build`` on leaf Vars made from ``params`` and backprop.

    Parameters never touched by the graph get zero gradients, so the
    result always carries exactly one entry per parameter.
    """
    leaves = {name: Var(ensure_finite(name, value)) for name, value in params.items()}
    out = build(leaves)
    if not isinstance(out, Var):
        raise ValidationError("loss builder must return a Var")
    if not np.isfinite(out.data):
        raise NumericalError("loss evaluated to a non-finite value")
    backward(out)
    gradients = {
        name: (leaf.grad.copy() if leaf.grad is not None else np.zeros_like(leaf.data))
        for name, leaf in leaves.items()
    }
    return GradEvaluation(value=float(out.data), gradients=gradients)


def finite_diff_grad_check(loss: LossFn,
                           point: Mapping[str, Array],
                           step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    The denominator is max(1, |numeric|) so near-zero gradients do not
    blow the ratio up. Raises NumericalError naming the offending
    coordinate if the loss is non-finite at any probe point.
    """
    if step <= 0:
        raise ValidationError("step must be positive")
    base_point = {k: np.asarray(v, dtype=np.float64) for k, v in point.items()}
    base = loss(base_point)
    if not math.isfinite(base.value):
        raise NumericalError("non-finite loss at the base point")
    worst = 0.0
    for name, arr in base_point.items():
        analytic = base.gradients[name]
        if analytic.shape != arr.shape:
            raise ValidationError(
                f"gradient shape {analytic.shape} does not match parameter "
                f"'{name}' shape {arr.shape}")
        for idx in np.ndindex(arr.shape):
            probes = []
            for sign in (+1.0, -1.0):
                shifted = {k: v.copy() for k, v in base_point.items()}
                shifted[name][idx] += sign * step
                value = loss(shifted).value
                if not math.isfinite(value):
                    raise NumericalError(
                        f"non-finite loss probing '{name}' at coordinate {idx}")
                probes.append(value)
            numeric = (probes[0] - probes[1]) / (2.0 * step)
            err = abs(float(analytic[idx]) - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
