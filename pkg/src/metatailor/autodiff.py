"""Dense-tensor computation graph with re-entrant reverse-mode differentiation.

Every operation records, for each differentiable operand, a closure that maps
the incoming output-gradient to that operand's gradient contribution. The
closures are written in terms of the same ops, so gradients are themselves
graph nodes: calling :func:`gradient` with ``create_graph=True`` yields
tensors that can be differentiated again. That re-taping is what makes
second-order training (outer gradients flowing through inner updates)
possible without symbolic Hessians.

All arithmetic is in 64-bit floats. Non-finite results are errors, never
silently propagated.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractViolation, NumericFault

Array = np.ndarray

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Suspend graph recording; ops inside compute values only."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A dense float64 array that may participate in a computation graph.

    ``_parents`` holds ``(parent, vjp)`` pairs, where ``vjp`` maps the
    gradient at this node to the contribution for ``parent``. Leaves have no
    parents. Completed values are immutable by convention: only a training
    loop that owns a leaf may update ``data`` in place, and never while a
    graph referencing it is still being differentiated.
    """

    __slots__ = ("data", "requires_grad", "_parents", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericFault("non-finite values in tensor literal", op_kind="leaf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._op = "leaf"

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self, requires_grad: bool = False) -> "Tensor":
        """Copy of the value, severed from the graph."""
        return Tensor(self.data.copy(), requires_grad=requires_grad)

    def __repr__(self) -> str:
        return f"Tensor(op={self._op}, shape={self.shape}, grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return negate(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(data) -> Tensor:
    """Non-differentiable tensor (e.g. masks, normalization statistics)."""
    return Tensor(data, requires_grad=False)


def _node(op: str, data: Array, parents: Sequence[tuple]) -> Tensor:
    """Build a graph node, checking finiteness and honoring no_grad."""
    if not np.all(np.isfinite(data)):
        raise NumericFault(f"op '{op}' produced non-finite values", op_kind=op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out._op = op
    kept = ()
    if _GRAD_ENABLED:
        kept = tuple((p, vjp) for (p, vjp) in parents if p.requires_grad)
    out._parents = kept
    out.requires_grad = bool(kept)
    return out


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ContractViolation(
            f"{op}: shapes {a.shape} and {b.shape} do not conform "
            "(elementwise ops require equal shapes or a scalar operand)"
        )


def _unbroadcast(op: str, g: Tensor, target: Tensor) -> Tensor:
    # Only scalar-vs-array broadcasting is permitted, so the reduction is
    # either identity or a full sum.
    if target.shape == g.shape:
        return g
    return sum_all(g)


# -- elementwise arithmetic --------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    return _node(
        "add",
        a.data + b.data,
        [(a, lambda g: _unbroadcast("add", g, a)), (b, lambda g: _unbroadcast("add", g, b))],
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    return _node(
        "sub",
        a.data - b.data,
        [
            (a, lambda g: _unbroadcast("sub", g, a)),
            (b, lambda g: negate(_unbroadcast("sub", g, b))),
        ],
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    with np.errstate(over="ignore", invalid="ignore"):
        data = a.data * b.data
    return _node(
        "mul",
        data,
        [
            (a, lambda g: _unbroadcast("mul", mul(g, b), a)),
            (b, lambda g: _unbroadcast("mul", mul(g, a), b)),
        ],
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data
    return _node(
        "div",
        data,
        [
            (a, lambda g: _unbroadcast("div", div(g, b), a)),
            (b, lambda g: _unbroadcast("div", negate(div(mul(g, a), mul(b, b))), b)),
        ],
    )


def negate(a: Tensor) -> Tensor:
    return _node("negate", -a.data, [(a, lambda g: negate(g))])


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a python constant (not a graph node)."""
    factor = float(factor)
    return _node("scale", a.data * factor, [(a, lambda g: scale(g, factor))])


def abs_(a: Tensor) -> Tensor:
    # d|x|/dx = sign(x) almost everywhere; the sign is a constant w.r.t. the
    # graph, which keeps second derivatives (zero a.e.) correct.
    s = constant(np.sign(a.data))
    return _node("abs", np.abs(a.data), [(a, lambda g: mul(g, s))])


def clip_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor) elementwise; gradient is masked where the floor binds."""
    floor = float(floor)
    mask = constant((a.data > floor).astype(np.float64))
    return _node("clip_min", np.maximum(a.data, floor), [(a, lambda g: mul(g, mask))])


# -- transcendental ----------------------------------------------------------


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        data = np.exp(a.data)
    out = _node("exp", data, [])
    if _GRAD_ENABLED and a.requires_grad:
        out._parents = ((a, lambda g: mul(g, out)),)
        out.requires_grad = True
    return out


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)
    return _node("log", data, [(a, lambda g: div(g, a))])


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        data = np.sqrt(a.data)
    out = _node("sqrt", data, [])
    if _GRAD_ENABLED and a.requires_grad:
        out._parents = ((a, lambda g: div(g, scale(out, 2.0))),)
        out.requires_grad = True
    return out


def sin(a: Tensor) -> Tensor:
    return _node("sin", np.sin(a.data), [(a, lambda g: mul(g, cos(a)))])


def cos(a: Tensor) -> Tensor:
    return _node("cos", np.cos(a.data), [(a, lambda g: negate(mul(g, sin(a))))])


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    val = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = _node("sigmoid", val, [])
    if _GRAD_ENABLED and a.requires_grad:
        one = constant(np.float64(1.0))
        out._parents = ((a, lambda g: mul(g, mul(out, sub(one, out)))),)
        out.requires_grad = True
    return out


def tanh(a: Tensor) -> Tensor:
    out = _node("tanh", np.tanh(a.data), [])
    if _GRAD_ENABLED and a.requires_grad:
        one = constant(np.float64(1.0))
        out._parents = ((a, lambda g: mul(g, sub(one, mul(out, out)))),)
        out.requires_grad = True
    return out


def softplus(a: Tensor, alpha: float = 1.0) -> Tensor:
    """ln(1 + exp(alpha x)) / alpha, evaluated without overflow.

    Uses the identity softplus(x) = max(x, 0) + log1p(exp(-|x|)) so that
    large pre-activations (wide hidden layers) stay finite. The derivative
    is the logistic function of alpha*x.
    """
    if alpha <= 0:
        raise ContractViolation("softplus: alpha must be positive")
    ax = alpha * a.data
    val = (np.maximum(ax, 0.0) + np.log1p(np.exp(-np.abs(ax)))) / alpha
    return _node("softplus", val, [(a, lambda g: mul(g, sigmoid(scale(a, alpha))))])


# -- structural ops ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractViolation(f"matmul: shapes {a.shape} @ {b.shape} do not conform")
    with np.errstate(over="ignore", invalid="ignore"):
        data = a.data @ b.data
    return _node(
        "matmul",
        data,
        [
            (a, lambda g: matmul(g, transpose(b))),
            (b, lambda g: matmul(transpose(a), g)),
        ],
    )


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ContractViolation("transpose: expects a 2-D tensor")
    return _node("transpose", a.data.T.copy(), [(a, lambda g: transpose(g))])


def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.shape
    return _node("reshape", a.data.reshape(shape).copy(), [(a, lambda g: reshape(g, old))])


def broadcast_row(a: Tensor, rows: int) -> Tensor:
    """Replicate a length-d vector (shape (d,) or (1, d)) across `rows` rows."""
    if a.data.ndim == 1:
        base = a.data[None, :]
    elif a.data.ndim == 2 and a.shape[0] == 1:
        base = a.data
    else:
        raise ContractViolation(f"broadcast_row: expects (d,) or (1, d), got {a.shape}")
    out_shape = a.shape
    return _node(
        "broadcast_row",
        np.repeat(base, rows, axis=0),
        [(a, lambda g: reshape(sum_rows(g), out_shape))],
    )


def sum_rows(a: Tensor) -> Tensor:
    """Sum over rows (axis 0) of a 2-D tensor, keeping shape (1, d)."""
    if a.data.ndim != 2:
        raise ContractViolation("sum_rows: expects a 2-D tensor")
    rows = a.shape[0]
    return _node(
        "sum_rows", a.data.sum(axis=0, keepdims=True), [(a, lambda g: broadcast_row(g, rows))]
    )


def repeat_rows(a: Tensor, k: int) -> Tensor:
    """Repeat each row k times in place (row i maps to rows ik..ik+k-1)."""
    if a.data.ndim != 2:
        raise ContractViolation("repeat_rows: expects a 2-D tensor")
    return _node(
        "repeat_rows", np.repeat(a.data, k, axis=0), [(a, lambda g: group_sum_rows(g, k))]
    )


def group_sum_rows(a: Tensor, k: int) -> Tensor:
    """Sum each group of k consecutive rows; inverse adjoint of repeat_rows."""
    if a.data.ndim != 2 or a.shape[0] % k != 0:
        raise ContractViolation(f"group_sum_rows: rows {a.shape} not divisible by k={k}")
    n = a.shape[0] // k
    d = a.shape[1]
    return _node(
        "group_sum_rows",
        a.data.reshape(n, k, d).sum(axis=1),
        [(a, lambda g: repeat_rows(g, k))],
    )


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2 or not (0 <= start <= stop <= a.shape[1]):
        raise ContractViolation(f"slice_cols: bad range [{start}:{stop}] for shape {a.shape}")
    total = a.shape[1]
    return _node(
        "slice_cols",
        a.data[:, start:stop].copy(),
        [(a, lambda g: embed_cols(g, start, total))],
    )


def embed_cols(a: Tensor, start: int, total: int) -> Tensor:
    """Place a (b, w) block into columns [start, start+w) of a (b, total) zero tensor."""
    if a.data.ndim != 2 or start + a.shape[1] > total:
        raise ContractViolation("embed_cols: block does not fit")
    width = a.shape[1]
    out = np.zeros((a.shape[0], total))
    out[:, start : start + width] = a.data
    return _node("embed_cols", out, [(a, lambda g: slice_cols(g, start, start + width))])


# -- reductions --------------------------------------------------------------


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _node(
        "sum",
        np.asarray(a.data.sum()),
        [(a, lambda g: _spread(g, shape))],
    )


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    shape = a.shape
    return _node(
        "mean",
        np.asarray(a.data.mean()),
        [(a, lambda g: _spread(scale(g, 1.0 / n), shape))],
    )


def _spread(g: Tensor, shape: tuple) -> Tensor:
    """Broadcast a scalar gradient to `shape` (adjoint of a full reduction)."""
    ones = constant(np.ones(shape))
    return mul(ones, g)


# -- spec-facing dispatcher --------------------------------------------------

_APPLY_TABLE: dict[str, Callable] = {
    "matmul": lambda ops, kw: matmul(ops[0], ops[1]),
    "add": lambda ops, kw: add(ops[0], ops[1]),
    "sub": lambda ops, kw: sub(ops[0], ops[1]),
    "mul_elementwise": lambda ops, kw: mul(ops[0], ops[1]),
    "scale": lambda ops, kw: scale(ops[0], kw["factor"]),
    "softplus": lambda ops, kw: softplus(ops[0], kw.get("alpha", 1.0)),
    "tanh": lambda ops, kw: tanh(ops[0]),
    "sum": lambda ops, kw: sum_all(ops[0]),
    "mean": lambda ops, kw: mean_all(ops[0]),
    "abs": lambda ops, kw: abs_(ops[0]),
    "negate": lambda ops, kw: negate(ops[0]),
    "broadcast_row": lambda ops, kw: broadcast_row(ops[0], kw["rows"]),
}


def apply(op_kind: str, operands: Sequence[Tensor], **kwargs) -> Tensor:
    """Uniform entry point over the core op vocabulary.

    Extra parameters (``factor`` for scale, ``alpha`` for softplus, ``rows``
    for broadcast_row) are passed by keyword.
    """
    if op_kind not in _APPLY_TABLE:
        raise ContractViolation(f"apply: unknown op kind '{op_kind}'")
    return _APPLY_TABLE[op_kind](list(operands), kwargs)


# -- reverse-mode differentiation --------------------------------------------


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
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
        for parent, _ in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order  # parents before children


def gradient(
    output: Tensor, wrt: Sequence[Tensor], create_graph: bool = False
) -> list[Tensor]:
    """Reverse-mode gradients of a scalar `output` w.r.t. each tensor in `wrt`.

    Tensors unreachable from `output` get a zero gradient of matching shape.
    With ``create_graph=True`` the returned tensors are themselves graph
    nodes, so they can be differentiated again (needed whenever an outer
    gradient must flow through an inner one).
    """
    if output.shape != ():
        raise ContractViolation(
            f"gradient: output must be scalar, got shape {output.shape}"
        )

    def backward() -> dict[int, Tensor]:
        grads: dict[int, Tensor] = {id(output): constant(np.float64(1.0))}
        for node in reversed(_toposort(output)):
            g = grads.get(id(node))
            if g is None:
                continue
            for parent, vjp in node._parents:
                contribution = vjp(g)
                prev = grads.get(id(parent))
                grads[id(parent)] = contribution if prev is None else add(prev, contribution)
        return grads

    if create_graph:
        grads = backward()
    else:
        with no_grad():
            grads = backward()

    results = []
    for t in wrt:
        g = grads.get(id(t))
        if g is None:
            g = constant(np.zeros(t.shape))
        results.append(g)
    return results


def finite_diff_check(
    f: Callable[[Tensor], Tensor], point: Tensor, step: float = 1e-5
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error per coordinate is |analytic - numeric| / (|analytic| + 1e-8);
    the maximum over coordinates is returned. `f` must map a tensor to a
    scalar tensor and be evaluable in a `step`-neighborhood of `point`.
    """
    if step <= 0:
        raise ContractViolation("finite_diff_check: step must be positive")
    p = Tensor(point.data.copy(), requires_grad=True)
    analytic = gradient(f(p), [p])[0].data
    numeric = np.zeros_like(p.data)
    flat = p.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(f(p).data)
            flat[i] = orig - step
            lo = float(f(p).data)
            flat[i] = orig
            num_flat[i] = (hi - lo) / (2.0 * step)
    if not np.all(np.isfinite(numeric)):
        raise NumericFault("finite_diff_check: non-finite function values near point")
    rel = np.abs(analytic - numeric) / (np.abs(analytic) + 1e-8)
    return float(rel.max()) if rel.size else 0.0
