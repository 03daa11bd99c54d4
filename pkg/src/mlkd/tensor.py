"""Dense float64 tensors with reverse-mode gradients.

The graph is built as operations execute: every operation returns a new
``Tensor`` holding references to its inputs and one vector-Jacobian-product
closure per differentiable input.  ``GradTape`` walks that graph once,
backwards, to accumulate gradients of a scalar with respect to marked
parameters.  ``finite_diff_check`` is the independent oracle: it never looks
at the graph, only re-evaluates the function at shifted points.

Conventions:
  * all arithmetic is float64; datasets may live in float32 but are promoted
    on entry (gradient-check tolerances are unreachable in single precision);
  * tensors produced by operations are never mutated; the training loop may
    rebind the ``data`` array of leaf parameters between graph constructions;
  * every public operation verifies its output is finite and raises
    ``NumericError`` naming the operation otherwise;
  * broadcasting is supported only as far as the losses need it
    (scalars, trailing bias vectors, and keepdims-style column vectors).
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import (
    ContractError,
    DegenerateInputError,
    DistributionError,
    NumericError,
    ParameterError,
    ShapeError,
)

LOG_CLAMP = 1e-12  # floor for every log argument; keeps KL finite


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    return arr


class Tensor:
    """A dense float64 array plus the graph edges needed for backprop."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjps", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjps: tuple[Callable[[np.ndarray], np.ndarray] | None, ...] = ()
        self._op = "leaf"

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(
                f"item() requires a scalar tensor, got shape {self.shape}"
            )
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """A constant view of this tensor's values, cut off from the graph."""
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, grad={self.requires_grad})"

    # -- arithmetic sugar ----------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by operation '{op}'")


def _make_node(data: np.ndarray, op: str, parents: Sequence[Tensor],
               vjps: Sequence[Callable[[np.ndarray], np.ndarray] | None]) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjps = tuple(vjps)
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise operations --------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data
    return _make_node(data, "add", (a, b), (
        lambda g: _unbroadcast(g, a.shape),
        lambda g: _unbroadcast(g, b.shape),
    ))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data
    return _make_node(data, "sub", (a, b), (
        lambda g: _unbroadcast(g, a.shape),
        lambda g: _unbroadcast(-g, b.shape),
    ))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data
    return _make_node(data, "mul", (a, b), (
        lambda g: _unbroadcast(g * b.data, a.shape),
        lambda g: _unbroadcast(g * a.data, b.shape),
    ))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data
    return _make_node(data, "div", (a, b), (
        lambda g: _unbroadcast(g / b.data, a.shape),
        lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
    ))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make_node(-a.data, "neg", (a,), (lambda g: -g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)
    return _make_node(data, "exp", (a,), (lambda g: g * data,))


def log(a) -> Tensor:
    a = as_tensor(a)
    data = np.log(a.data)
    return _make_node(data, "log", (a,), (lambda g: g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    data = np.sqrt(a.data)
    return _make_node(data, "sqrt", (a,), (lambda g: g * 0.5 / data,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make_node(a.data * a.data, "square", (a,), (lambda g: g * 2.0 * a.data,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make_node(np.where(mask, a.data, 0.0), "relu", (a,),
                      (lambda g: g * mask,))


def softplus(a) -> Tensor:
    """log(1 + e^x), computed stably for large |x|."""
    a = as_tensor(a)
    data = np.logaddexp(0.0, a.data)
    with np.errstate(over="ignore"):
        sig = np.where(a.data >= 0,
                       1.0 / (1.0 + np.exp(-np.abs(a.data))),
                       np.exp(-np.logaddexp(0.0, -a.data)))
    return _make_node(data, "softplus", (a,), (lambda g: g * sig,))


def clamp_min(a, floor: float) -> Tensor:
    """max(a, floor); gradient passes only where a > floor."""
    a = as_tensor(a)
    mask = a.data > floor
    return _make_node(np.where(mask, a.data, floor), "clamp_min", (a,),
                      (lambda g: g * mask,))


# -- reductions and structure ------------------------------------------


def tsum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g: np.ndarray) -> np.ndarray:
        if axis is None:
            return np.broadcast_to(g, a.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.shape).copy()

    return _make_node(data, "sum", (a,), (vjp,))


def tmean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul requires 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    data = a.data @ b.data
    return _make_node(data, "matmul", (a, b), (
        lambda g: g @ b.data.T,
        lambda g: a.data.T @ g,
    ))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _make_node(a.data.T, "transpose", (a,), (lambda g: g.T,))


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Stack 2-D tensors along axis 0; gradient slices back per block."""
    tensors = [as_tensor(t) for t in tensors]
    widths = {t.shape[1] for t in tensors if t.data.ndim == 2}
    if any(t.data.ndim != 2 for t in tensors) or len(widths) != 1:
        raise ShapeError(
            f"concat_rows needs 2-D tensors of equal width, got "
            f"{[t.shape for t in tensors]}"
        )
    data = np.concatenate([t.data for t in tensors], axis=0)
    offsets = np.cumsum([0] + [t.shape[0] for t in tensors])
    vjps = []
    for idx in range(len(tensors)):
        lo, hi = offsets[idx], offsets[idx + 1]
        vjps.append(lambda g, lo=lo, hi=hi: g[lo:hi])
    return _make_node(data, "concat_rows", tuple(tensors), tuple(vjps))


# -- backward pass ------------------------------------------------------


class GradTape:
    """Single-use record of the operations reachable from a scalar output.

    The tape is the topologically ordered list of graph nodes behind the
    output; ``gradients`` replays it once in reverse.  Gradients are linear
    in the output seed and a constant's gradient is zero by construction.
    """

    def __init__(self, output: Tensor):
        if output.data.size != 1:
            raise ContractError(
                f"gradient target must be scalar, got shape {output.shape}"
            )
        self._output = output
        self._order = self._toposort(output)
        self._used = False

    @staticmethod
    def _toposort(root: Tensor) -> list[Tensor]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                stack.append((parent, False))
        return order

    def gradients(self, params: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradient of the recorded scalar w.r.t. each parameter tensor."""
        if self._used:
            raise ContractError("GradTape is single-use; build a new one")
        self._used = True

        grads: dict[int, np.ndarray] = {id(self._output): np.ones_like(self._output.data)}
        for node in reversed(self._order):
            g = grads.get(id(node))
            if g is None:
                continue
            for parent, vjp in zip(node._parents, node._vjps):
                if vjp is None or not parent.requires_grad:
                    continue
                contribution = vjp(g)
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + contribution
                else:
                    grads[key] = contribution

        out = []
        for p in params:
            g = grads.get(id(p))
            out.append(np.zeros_like(p.data) if g is None else g)
        return out


def grad(scalar_fn: Callable[[list[Tensor]], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of ``scalar_fn(params)`` with respect to each parameter.

    Parameters are marked as differentiable in place; the function is
    evaluated once and the resulting graph is swept backwards.
    """
    params = list(params)
    for p in params:
        p.requires_grad = True
    out = scalar_fn(params)
    if not isinstance(out, Tensor):
        raise ContractError("scalar_fn must return a Tensor")
    if out.data.size != 1:
        raise ContractError(f"scalar_fn must return a scalar, got shape {out.shape}")
    _check_finite(out.data, "grad target")
    return GradTape(out).gradients(params)


def finite_diff_check(scalar_fn: Callable[[list[Tensor]], Tensor],
                      params: Sequence[Tensor],
                      step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Central differences are taken element by element, so this is the
    independent oracle for ``grad``: it shares no code with the backward
    pass.  Points where the function has a kink (ReLU at zero, hinge at its
    threshold, tied maxima) are excluded by contract, not detected; callers
    must evaluate at generic points.

    Cost is two function evaluations per parameter element, so inputs are
    limited to fewer than 1e5 total elements.
    """
    if not (0.0 < step <= 1e-2):
        raise ParameterError(f"step must be in (0, 1e-2], got {step}")
    params = list(params)
    total = sum(p.size for p in params)
    if total >= 10**5:
        raise ParameterError(
            f"finite_diff_check limited to < 1e5 parameter elements, got {total}"
        )

    analytic = grad(scalar_fn, params)

    def evaluate() -> float:
        value = scalar_fn(params)
        _check_finite(value.data, "finite_diff_check evaluation")
        return value.item()

    worst = 0.0
    for p, ana in zip(params, analytic):
        ana_flat = ana.reshape(-1)
        for i in range(p.size):
            index = np.unravel_index(i, p.shape)
            keep = p.data[index]
            p.data[index] = keep + step
            f_plus = evaluate()
            p.data[index] = keep - step
            f_minus = evaluate()
            p.data[index] = keep
            numeric = (f_plus - f_minus) / (2.0 * step)
            rel = abs(ana_flat[i] - numeric) / (abs(numeric) + 1e-8)
            if rel > worst:
                worst = rel
    return worst


# -- shared numeric building blocks -------------------------------------


def softmax_rows(m: Tensor, tau: float) -> Tensor:
    """Row-wise softmax of ``m / tau`` with per-row max subtraction.

    Each output row sums to 1 within 1e-12; adding a constant to a row of
    the input leaves the output unchanged.
    """
    if tau <= 0:
        raise ParameterError(f"softmax temperature must be > 0, got {tau}")
    m = as_tensor(m)
    if m.data.ndim != 2:
        raise ShapeError(f"softmax_rows expects an N x K tensor, got {m.shape}")
    scaled = mul(m, 1.0 / tau)
    shift = Tensor(scaled.data.max(axis=1, keepdims=True))  # constant, no grad
    e = exp(sub(scaled, shift))
    return div(e, tsum(e, axis=1, keepdims=True))


def log_softmax_rows(m: Tensor, tau: float = 1.0) -> Tensor:
    """Row-wise log softmax of ``m / tau``, numerically stable."""
    if tau <= 0:
        raise ParameterError(f"softmax temperature must be > 0, got {tau}")
    m = as_tensor(m)
    if m.data.ndim != 2:
        raise ShapeError(f"log_softmax_rows expects an N x K tensor, got {m.shape}")
    scaled = mul(m, 1.0 / tau)
    shift = Tensor(scaled.data.max(axis=1, keepdims=True))
    centered = sub(scaled, shift)
    lse = log(tsum(exp(centered), axis=1, keepdims=True))
    return sub(centered, lse)


def l2_normalize_rows(a: Tensor) -> Tensor:
    """Scale each row to unit Euclidean norm; zero rows are degenerate."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"l2_normalize_rows expects an N x D tensor, got {a.shape}")
    norms_sq = np.sum(a.data * a.data, axis=1)
    zero = np.where(norms_sq == 0.0)[0]
    if zero.size:
        raise DegenerateInputError(f"zero-norm row at index {int(zero[0])}")
    return div(a, sqrt(tsum(square(a), axis=1, keepdims=True)))


def cosine_similarity_matrix(a: Tensor, b: Tensor) -> Tensor:
    """All-pairs cosine similarities: out[i, j] = cos(a_i, b_j)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(
            f"cosine_similarity_matrix expects N x D and M x D, got {a.shape}, {b.shape}"
        )
    for name, t in (("a", a), ("b", b)):
        norms_sq = np.sum(t.data * t.data, axis=1)
        zero = np.where(norms_sq == 0.0)[0]
        if zero.size:
            raise DegenerateInputError(
                f"zero-norm row at index {int(zero[0])} of argument '{name}'"
            )
    return matmul(l2_normalize_rows(a), transpose(l2_normalize_rows(b)))


def kl_divergence_rows(p: Tensor, q: Tensor) -> Tensor:
    """Mean over rows of sum_k p log(p / q); q is floored at 1e-12.

    Both arguments must hold one probability distribution per row.  The
    result is a scalar tensor, nonnegative by Gibbs' inequality, and zero
    exactly when p equals q (within the clamp tolerance).
    """
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape or p.data.ndim != 2:
        raise ShapeError(f"kl_divergence_rows expects equal N x K shapes, got {p.shape}, {q.shape}")
    for name, t in (("p", p), ("q", q)):
        if np.any(t.data < 0):
            raise DistributionError(f"argument '{name}' has negative entries")
        sums = t.data.sum(axis=1)
        bad = np.where(np.abs(sums - 1.0) > 1e-6)[0]
        if bad.size:
            raise DistributionError(
                f"row {int(bad[0])} of argument '{name}' sums to {sums[bad[0]]:.9f}, not 1"
            )
    log_ratio = sub(log(clamp_min(p, LOG_CLAMP)), log(clamp_min(q, LOG_CLAMP)))
    per_row = tsum(mul(p, log_ratio), axis=1)
    return tmean(per_row)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape))


def parameter(data) -> Tensor:
    """A leaf tensor marked as trainable."""
    return Tensor(data, requires_grad=True)
