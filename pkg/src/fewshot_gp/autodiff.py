"""Reverse-mode automatic differentiation over dense float64 matrices.

Every value is a 2-D ``numpy`` array. Operations are recorded on the active
:class:`Tape` (creation order is a valid topological order), and
:func:`backward` walks the tape in reverse accumulating adjoints.

Only the primitives needed to differentiate the few-shot GP losses are
provided: MLP algebra, the pairwise squared distance matrix, and the
Cholesky-based linear solve / log-determinant used by the GP posterior.

    >>> with Tape() as tape:
    ...     w = tape.leaf(np.array([[1.0, 2.0]]))
    ...     loss = sum_(w * w)
    >>> backward(tape, loss)[w]
    array([[2., 4.]])
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.linalg.lapack import dpotrf

__all__ = [
    "AutodiffError",
    "ShapeError",
    "NonFiniteError",
    "CholeskyError",
    "Node",
    "Tape",
    "constant",
    "backward",
    "add",
    "subtract",
    "multiply",
    "divide",
    "matmul",
    "negate",
    "relu",
    "exp",
    "log",
    "softplus",
    "maximum",
    "sum_",
    "mean",
    "transpose",
    "concat",
    "dot",
    "sqdist",
    "cholesky",
    "triangular_solve",
    "cholesky_solve",
    "logdet_spd",
    "factorize_spd",
    "kink_monitor",
    "FDResult",
    "finite_difference_check",
]

JITTER_START = 1e-10
JITTER_MAX = 1e-6


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError, ValueError):
    def __init__(self, primitive: str, *shapes: tuple[int, ...]):
        self.primitive = primitive
        self.shapes = shapes
        joined = " and ".join(str(s) for s in shapes)
        super().__init__(f"{primitive}: incompatible shapes {joined}")


class NonFiniteError(AutodiffError, FloatingPointError):
    def __init__(self, primitive: str, where: str = "output"):
        self.primitive = primitive
        super().__init__(f"{primitive}: non-finite values in {where}")


class CholeskyError(AutodiffError, np.linalg.LinAlgError):
    """Raised when a matrix stays non-PD after the full jitter escalation."""

    def __init__(self, minor: int, jitter: float):
        self.minor = minor
        self.jitter = jitter
        super().__init__(
            f"cholesky failed: leading minor of order {minor} not positive "
            f"definite (last jitter {jitter:g})"
        )


# --------------------------------------------------------------------------
# graph
# --------------------------------------------------------------------------

_TAPES: list["Tape"] = []
_KINK_LOG: list[list[bytes]] = []


class Node:
    """A matrix value in the graph, optionally carrying an adjoint."""

    __slots__ = ("value", "op", "parents", "requires_grad", "_vjp", "_grad")
    __array_ufunc__ = None  # make ndarray <op> Node defer to Node's reflected operators

    def __init__(self, value, op="const", parents=(), vjp=None, requires_grad=False):
        self.value = value
        self.op = op
        self.parents = parents
        self._vjp = vjp
        self.requires_grad = requires_grad
        self._grad = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    def item(self) -> float:
        return float(self.value[0, 0])

    def __repr__(self) -> str:
        return f"Node(op={self.op}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return negate(self)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Records nodes in creation order while active.

    With ``recording=False`` the tape appends nothing and primitives keep no
    parent links, so a forward pass costs O(1) extra memory per primitive.
    """

    def __init__(self, recording: bool = True):
        self.recording = recording
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def leaf(self, value) -> Node:
        """Wrap a parameter value as a differentiable leaf."""
        value = _as_matrix(value, "leaf")
        _check_finite(value, "leaf", "input")
        node = Node(value, "leaf", requires_grad=self.recording)
        if self.recording:
            self.nodes.append(node)
        return node

    def __len__(self) -> int:
        return len(self.nodes)


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _as_matrix(value, primitive: str) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim != 2:
        raise ShapeError(primitive, arr.shape)
    return arr


def _check_finite(value: np.ndarray, primitive: str, where: str = "output") -> None:
    # one reduction on the fast path; the sum of finite entries can still overflow
    if not math.isfinite(np.add.reduce(value, axis=None)) and not np.isfinite(value).all():
        raise NonFiniteError(primitive, where)


def constant(value) -> Node:
    value = _as_matrix(value, "constant")
    _check_finite(value, "constant", "input")
    return Node(value)


def _lift(x, primitive: str) -> Node:
    if isinstance(x, Node):
        return x
    value = _as_matrix(x, primitive)
    _check_finite(value, primitive, "input")
    return Node(value)


def _record(primitive: str, value: np.ndarray, parents: Sequence[Node], vjp) -> Node:
    """Create the output node; link parents only when some parent needs a gradient."""
    _check_finite(value, primitive)
    tape = _active_tape()
    if tape is None or not tape.recording or not any(p.requires_grad for p in parents):
        return Node(value, primitive)
    node = Node(value, primitive, tuple(parents), vjp, requires_grad=True)
    tape.nodes.append(node)
    return node


def backward(tape: Tape, output: Node) -> dict[Node, np.ndarray]:
    """Accumulate d(output)/d(node) for every recorded node.

    Returns a map from each leaf on ``tape`` to its gradient.
    """
    if not tape.recording:
        raise AutodiffError("backward: tape is in inference mode")
    if output.value.shape != (1, 1):
        raise ShapeError("backward", output.value.shape, (1, 1))
    if not output.requires_grad:
        return {n: np.zeros_like(n.value) for n in tape.nodes if n.op == "leaf"}
    for node in tape.nodes:
        node._grad = None
    output._grad = np.ones((1, 1))
    for node in reversed(tape.nodes):
        g = node._grad
        if g is None or node._vjp is None:
            continue
        for parent, pg in zip(node.parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            parent._grad = pg if parent._grad is None else parent._grad + pg
    return {n: n.grad for n in tape.nodes if n.op == "leaf"}


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------


def _broadcast_shape(primitive: str, a: np.ndarray, b: np.ndarray) -> None:
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ShapeError(primitive, a.shape, b.shape)


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def add(a, b) -> Node:
    a, b = _lift(a, "add"), _lift(b, "add")
    _broadcast_shape("add", a.value, b.value)
    sa, sb = a.value.shape, b.value.shape
    return _record(
        "add", a.value + b.value, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def subtract(a, b) -> Node:
    a, b = _lift(a, "subtract"), _lift(b, "subtract")
    _broadcast_shape("subtract", a.value, b.value)
    sa, sb = a.value.shape, b.value.shape
    return _record(
        "subtract", a.value - b.value, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def multiply(a, b) -> Node:
    a, b = _lift(a, "multiply"), _lift(b, "multiply")
    _broadcast_shape("multiply", a.value, b.value)
    av, bv = a.value, b.value
    return _record(
        "multiply", av * bv, (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def divide(a, b) -> Node:
    a, b = _lift(a, "divide"), _lift(b, "divide")
    _broadcast_shape("divide", a.value, b.value)
    av, bv = a.value, b.value
    out = av / bv
    return _record(
        "divide", out, (a, b),
        lambda g: (
            _unbroadcast(g / bv, av.shape),
            _unbroadcast(-g * out / bv, bv.shape),
        ),
    )


def negate(a) -> Node:
    a = _lift(a, "negate")
    return _record("negate", -a.value, (a,), lambda g: (-g,))


def relu(a) -> Node:
    a = _lift(a, "relu")
    x = a.value
    if _KINK_LOG:
        _KINK_LOG[-1].append(np.sign(x).tobytes())
    mask = x > 0  # subgradient 0 at exactly 0
    return _record("relu", np.where(mask, x, 0.0), (a,), lambda g: (g * mask,))


def maximum(a, floor: float) -> Node:
    """Elementwise ``max(a, floor)`` for a scalar floor; gradient 0 where clamped."""
    a = _lift(a, "maximum")
    x = a.value
    if _KINK_LOG:
        _KINK_LOG[-1].append(np.sign(x - floor).tobytes())
    mask = x > floor
    return _record("maximum", np.where(mask, x, floor), (a,), lambda g: (g * mask,))


def exp(a) -> Node:
    a = _lift(a, "exp")
    with np.errstate(over="ignore"):  # overflow is reported by the finiteness check
        out = np.exp(a.value)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Node:
    a = _lift(a, "log")
    x = a.value
    if (x <= 0).any():
        raise NonFiniteError("log", "input (non-positive argument)")
    return _record("log", np.log(x), (a,), lambda g: (g / x,))


def softplus(a) -> Node:
    a = _lift(a, "softplus")
    x = a.value
    out = np.logaddexp(0.0, x)
    sig = np.exp(-np.logaddexp(0.0, -x))
    return _record("softplus", out, (a,), lambda g: (g * sig,))


# --------------------------------------------------------------------------
# reductions and structure
# --------------------------------------------------------------------------


def sum_(a, axis: int | None = None) -> Node:
    a = _lift(a, "sum")
    shape = a.value.shape
    if axis is None:
        out = np.array([[a.value.sum()]])
    else:
        out = a.value.sum(axis=axis, keepdims=True)
    return _record("sum", out, (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a, axis: int | None = None) -> Node:
    a = _lift(a, "mean")
    shape = a.value.shape
    n = a.value.size if axis is None else shape[axis]
    if axis is None:
        out = np.array([[a.value.mean()]])
    else:
        out = a.value.mean(axis=axis, keepdims=True)
    return _record("mean", out, (a,), lambda g: (np.broadcast_to(g / n, shape).copy(),))


def transpose(a) -> Node:
    a = _lift(a, "transpose")
    return _record("transpose", a.value.T.copy(), (a,), lambda g: (g.T,))


def concat(nodes: Sequence, axis: int = 1) -> Node:
    """Concatenate along ``axis`` (0 stacks rows, 1 joins columns)."""
    nodes = [_lift(n, "concat") for n in nodes]
    other = 1 - axis
    ref = nodes[0].value.shape[other]
    for n in nodes[1:]:
        if n.value.shape[other] != ref:
            raise ShapeError("concat", nodes[0].value.shape, n.value.shape)
    sizes = [n.value.shape[axis] for n in nodes]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([n.value for n in nodes], axis=axis)
    return _record(
        "concat", out, nodes,
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def matmul(a, b) -> Node:
    a, b = _lift(a, "matmul"), _lift(b, "matmul")
    av, bv = a.value, b.value
    if av.shape[1] != bv.shape[0]:
        raise ShapeError("matmul", av.shape, bv.shape)
    return _record("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def dot(a, b) -> Node:
    """Frobenius inner product of two equal-shape matrices, as a 1x1 node."""
    a, b = _lift(a, "dot"), _lift(b, "dot")
    av, bv = a.value, b.value
    if av.shape != bv.shape:
        raise ShapeError("dot", av.shape, bv.shape)
    out = np.array([[np.sum(av * bv)]])
    return _record("dot", out, (a, b), lambda g: (g[0, 0] * bv, g[0, 0] * av))


def sqdist(a, b) -> Node:
    """Pairwise squared Euclidean distances between rows: ``out[i, j] = |a_i - b_j|^2``.

    Computed from explicit differences so identical rows give exactly 0.
    """
    a, b = _lift(a, "sqdist"), _lift(b, "sqdist")
    av, bv = a.value, b.value
    if av.shape[1] != bv.shape[1]:
        raise ShapeError("sqdist", av.shape, bv.shape)
    diff = av[:, None, :] - bv[None, :, :]
    out = np.einsum("ijk,ijk->ij", diff, diff)

    def vjp(g):
        gd = 2.0 * g[:, :, None] * diff
        return gd.sum(axis=1), -gd.sum(axis=0)

    return _record("sqdist", out, (a, b), vjp)


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------


def factorize_spd(a: np.ndarray, jitter: bool = True) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``a``; returns ``(L, jitter_used)``.

    The matrix is factorized as given first. On failure the diagonal jitter
    starts at 1e-10 and grows x10 up to 1e-6 before giving up.
    """
    n = a.shape[0]
    if a.shape != (n, n):
        raise ShapeError("cholesky", a.shape)
    c, info = dpotrf(a, lower=1, clean=1)
    if info == 0:
        return c, 0.0
    eps = JITTER_START
    while jitter and eps <= JITTER_MAX * (1 + 1e-9):
        c, info = dpotrf(a + eps * np.eye(n), lower=1, clean=1)
        if info == 0:
            return c, eps
        eps *= 10.0
    raise CholeskyError(int(info), eps / 10.0 if jitter else 0.0)


def _sym(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def cholesky_solve(a, b, jitter: bool = True) -> Node:
    """Solve ``A X = B`` for symmetric PD ``A`` via its Cholesky factor.

    The adjoint uses the linear-solve rule: with ``Gb = A^-1 G``, the
    gradient for ``B`` is ``Gb`` and for ``A`` is ``-sym(Gb X^T)``.
    """
    a, b = _lift(a, "cholesky_solve"), _lift(b, "cholesky_solve")
    av, bv = a.value, b.value
    if av.shape[0] != av.shape[1] or av.shape[1] != bv.shape[0]:
        raise ShapeError("cholesky_solve", av.shape, bv.shape)
    L, _ = factorize_spd(av, jitter)
    x = cho_solve((L, True), bv)

    def vjp(g):
        gb = cho_solve((L, True), g)
        return -_sym(gb @ x.T), gb

    return _record("cholesky_solve", x, (a, b), vjp)


def logdet_spd(a, jitter: bool = True) -> Node:
    """``log det A`` for symmetric PD ``A``; gradient ``A^-1``."""
    a = _lift(a, "logdet")
    L, _ = factorize_spd(a.value, jitter)
    out = np.array([[2.0 * np.log(np.diag(L)).sum()]])

    def vjp(g):
        inv = cho_solve((L, True), np.eye(L.shape[0]))
        return (g[0, 0] * _sym(inv),)

    return _record("logdet", out, (a,), vjp)


def cholesky(a, jitter: bool = True) -> Node:
    """Lower Cholesky factor as a differentiable node (symmetric adjoint)."""
    a = _lift(a, "cholesky")
    L, _ = factorize_spd(a.value, jitter)

    def vjp(g):
        p = np.tril(L.T @ g)
        p[np.diag_indices_from(p)] *= 0.5
        # L^-T P L^-1 as two triangular solves
        y = solve_triangular(L, p.T, lower=True, trans=1).T
        s = solve_triangular(L, y, lower=True, trans=1)
        return (_sym(s),)

    return _record("cholesky", L, (a,), vjp)


def triangular_solve(l, b, lower: bool = True) -> Node:
    """Solve ``L X = B`` for triangular ``L``."""
    l, b = _lift(l, "triangular_solve"), _lift(b, "triangular_solve")
    lv, bv = l.value, b.value
    if lv.shape[0] != lv.shape[1] or lv.shape[1] != bv.shape[0]:
        raise ShapeError("triangular_solve", lv.shape, bv.shape)
    x = solve_triangular(lv, bv, lower=lower)
    tri = np.tril if lower else np.triu

    def vjp(g):
        gb = solve_triangular(lv, g, lower=lower, trans=1)
        return -tri(gb @ x.T), gb

    return _record("triangular_solve", x, (l, b), vjp)


# --------------------------------------------------------------------------
# finite-difference checking
# --------------------------------------------------------------------------


@contextmanager
def kink_monitor() -> Iterator[list[bytes]]:
    """Collect the sign pattern of every non-smooth primitive evaluated inside."""
    log: list[bytes] = []
    _KINK_LOG.append(log)
    try:
        yield log
    finally:
        _KINK_LOG.pop()


@dataclass
class FDResult:
    max_rel_error: float
    n_checked: int
    excluded: list[tuple[str, tuple[int, int]]] = field(default_factory=list)
    worst: tuple[str, tuple[int, int]] | None = None
    # (name, index, g_ad, g_fd, relative error) for every scored scalar
    scored: list[tuple] = field(default_factory=list, repr=False)

    def __float__(self) -> float:
        return self.max_rel_error


def finite_difference_check(
    loss: Callable[[Mapping[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    eps: float = 3e-3,
) -> FDResult:
    """Compare ``grads`` against finite differences of ``loss``.

    The numerical derivative uses the fourth-order central stencil
    ``(f(-2h) - 8 f(-h) + 8 f(h) - f(2h)) / 12h`` with ``h = eps``, which keeps
    truncation error negligible at step sizes large enough to drown out the
    loss's own rounding noise. That noise is a few ulps of the loss, so a
    gradient that is exactly zero (say a bias whose shift cancels in every
    pairwise distance) reads as ``noise / h`` and scores against the 1e-8
    floor; small steps such as 1e-5 therefore fail on such scalars even when
    the analytic gradient is right. The relative error per scalar is
    ``|g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8)``. A scalar whose perturbation
    changes the sign pattern of any ReLU or clamp (including one sitting
    exactly on a kink) is reported in ``excluded`` rather than scored.
    """
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    with kink_monitor() as base_log:
        loss(work)
    base = list(base_log)

    worst, worst_at, excluded, scored = 0.0, None, [], []
    for name, arr in work.items():
        g_ad = np.asarray(grads[name], dtype=np.float64)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            vals, kinked = [], False
            for step in (-2.0, -1.0, 1.0, 2.0):
                arr[idx] = orig + step * eps
                with kink_monitor() as trace:
                    vals.append(loss(work))
                kinked = kinked or trace != base
            arr[idx] = orig
            if kinked:
                excluded.append((name, idx))
                continue
            g_fd = (8.0 * (vals[2] - vals[1]) - (vals[3] - vals[0])) / (12.0 * eps)
            g = g_ad[idx]
            err = abs(g - g_fd) / max(abs(g), abs(g_fd), 1e-8)
            scored.append((name, idx, float(g), float(g_fd), float(err)))
            if worst_at is None or err > worst:
                worst, worst_at = err, (name, idx)
    return FDResult(worst, len(scored), excluded, worst_at, scored)
