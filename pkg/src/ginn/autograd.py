"""Tape-based reverse-mode autodiff over 2-D float64 arrays.

Every primitive records a node on the tape owned by its inputs. Backward rules
are themselves written with the primitives, so running ``grad`` with
``create_graph=True`` records the backward pass and a second ``grad`` call can
differentiate through it (needed for gradient penalties).

Tensors are always 2-D; scalars are ``1 x 1``. Broadcasting is limited to
adding a ``1 x c`` row to every row of a matrix.

Example
-------
>>> tape = Tape()
>>> x = tape.variable(np.array([[3.0]]))
>>> y = square(x)
>>> (dx,) = grad(tape, y, [x], create_graph=True)
>>> float(dx.value)
6.0
>>> (ddx,) = grad(tape, square(dx), [x])
>>> float(ddx.value)
24.0
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import GraphError, NumericError

BackwardFn = Callable[["Tensor", tuple, "Tensor", tuple], tuple]


class Tensor:
    """A value, optionally recorded on a tape (``node`` is its position)."""

    __slots__ = ("value", "tape", "node", "name")

    def __init__(self, value, tape: "Tape | None" = None, node: int | None = None, name=None):
        value = np.asarray(value, dtype=np.float64)
        if value.ndim == 0:
            value = value.reshape(1, 1)
        elif value.ndim == 1:
            value = value.reshape(1, -1)
        elif value.ndim != 2:
            raise ValueError(f"tensors are 2-D, got shape {value.shape}")
        self.value = value
        self.tape = tape
        self.node = node
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise ValueError("item() needs a 1x1 tensor")
        return float(self.value[0, 0])

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def __repr__(self):
        where = f"node={self.node}" if self.node is not None else "const"
        return f"Tensor(shape={self.shape}, {where})"

    def __add__(self, other):
        return add(self, _wrap(other, self.shape))

    def __sub__(self, other):
        return sub(self, _wrap(other, self.shape))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)


def _wrap(x, shape) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.broadcast_to(np.asarray(x, dtype=float), shape))


def constant(value) -> Tensor:
    return Tensor(value)


@dataclass
class _Node:
    op: str
    inputs: tuple
    output: Tensor | None
    backward: BackwardFn | None


@dataclass
class Tape:
    """Ordered record of operations; inputs always precede outputs."""

    nodes: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.nodes)

    def variable(self, value, name: str | None = None) -> Tensor:
        """Record a leaf tensor."""
        t = Tensor(np.array(value, dtype=np.float64), self, len(self.nodes), name)
        self.nodes.append(_Node("leaf", (), t, None))
        return t

    def watch(self, t: Tensor, name: str | None = None) -> Tensor:
        """Leaf on this tape holding ``t``'s value (``t`` itself is untouched)."""
        return self.variable(t.value, name or t.name)


def _record(op: str, inputs: tuple, value: np.ndarray, backward: BackwardFn) -> Tensor:
    if not np.isfinite(value).all():
        raise NumericError(f"non-finite output in '{op}'")
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif t.tape is not tape:
                raise GraphError(f"'{op}' mixes tensors from different tapes")
    if tape is None:
        return Tensor(value)
    out = Tensor(value, tape, len(tape.nodes))
    tape.nodes.append(_Node(op, inputs, out, backward))
    return out


def _check_same(op, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"'{op}': shape mismatch {a.shape} vs {b.shape}")


def _ones(r, c) -> Tensor:
    return Tensor(np.ones((r, c)))


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"'matmul': cannot multiply {a.shape} by {b.shape}")

    def backward(g, ins, out, needs):
        a, b = ins
        return (
            matmul(g, transpose(b)) if needs[0] else None,
            matmul(transpose(a), g) if needs[1] else None,
        )

    return _record("matmul", (a, b), a.value @ b.value, backward)


def transpose(a: Tensor) -> Tensor:
    return _record("transpose", (a,), a.value.T, lambda g, ins, out, needs: (transpose(g),))


def spmm(S: sp.spmatrix, x: Tensor) -> Tensor:
    """Sparse (constant) times dense."""
    if S.shape[1] != x.shape[0]:
        raise ValueError(f"'spmm': cannot multiply {S.shape} by {x.shape}")

    def backward(g, ins, out, needs):
        return (spmm(S.T, g),)

    return _record("spmm", (x,), np.asarray(S @ x.value), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same("add", a, b)
    return _record("add", (a, b), a.value + b.value, lambda g, ins, out, needs: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same("sub", a, b)
    return _record(
        "sub", (a, b), a.value - b.value,
        lambda g, ins, out, needs: (g, scale(g, -1.0) if needs[1] else None),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same("mul", a, b)

    def backward(g, ins, out, needs):
        a, b = ins
        return (mul(g, b) if needs[0] else None, mul(g, a) if needs[1] else None)

    return _record("mul", (a, b), a.value * b.value, backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same("div", a, b)

    def backward(g, ins, out, needs):
        a, b = ins
        ga = div(g, b) if needs[0] else None
        gb = scale(div(mul(g, out), b), -1.0) if needs[1] else None
        return ga, gb

    with np.errstate(divide="ignore", invalid="ignore"):
        value = a.value / b.value
    return _record("div", (a, b), value, backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record("scale", (a,), a.value * c, lambda g, ins, out, needs: (scale(g, c),))


def add_row(a: Tensor, row: Tensor) -> Tensor:
    """Add a ``1 x c`` row to every row of ``a``."""
    if row.shape != (1, a.shape[1]):
        raise ValueError(f"'add_row': expected row of shape (1, {a.shape[1]}), got {row.shape}")

    def backward(g, ins, out, needs):
        return g, (matmul(_ones(1, g.shape[0]), g) if needs[1] else None)

    return _record("add_row", (a, row), a.value + row.value, backward)


def relu(a: Tensor) -> Tensor:
    # subgradient 0 at exactly 0
    def backward(g, ins, out, needs):
        return (mul(g, Tensor((ins[0].value > 0).astype(float))),)

    return _record("relu", (a,), np.maximum(a.value, 0.0), backward)


def sigmoid(a: Tensor) -> Tensor:
    def backward(g, ins, out, needs):
        return (mul(g, mul(out, sub(_ones(*out.shape), out))),)

    x = a.value
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    value = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record("sigmoid", (a,), value, backward)


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        value = np.log(a.value)
    return _record("log", (a,), value, lambda g, ins, out, needs: (div(g, ins[0]),))


def square(a: Tensor) -> Tensor:
    return _record(
        "square", (a,), a.value * a.value,
        lambda g, ins, out, needs: (mul(g, scale(ins[0], 2.0)),),
    )


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        value = np.sqrt(a.value)
    return _record("sqrt", (a,), value, lambda g, ins, out, needs: (div(scale(g, 0.5), out),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    def backward(g, ins, out, needs):
        v = ins[0].value
        return (mul(g, Tensor(((v > lo) & (v < hi)).astype(float))),)

    return _record("clip", (a,), np.clip(a.value, lo, hi), backward)


def _expand(g: Tensor, shape) -> Tensor:
    """Broadcast a 1x1 tensor to ``shape`` through products with ones."""
    r, c = shape
    return matmul(matmul(_ones(r, 1), g), _ones(1, c))


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return _record(
        "sum", (a,), np.array([[a.value.sum()]]),
        lambda g, ins, out, needs: (_expand(g, ins[0].shape),),
    )


def mean(a: Tensor) -> Tensor:
    n = a.value.size
    return _record(
        "mean", (a,), np.array([[a.value.mean()]]),
        lambda g, ins, out, needs: (scale(_expand(g, ins[0].shape), 1.0 / n),),
    )


def row_norm(a: Tensor) -> Tensor:
    """Euclidean norm of each row, shape ``r x 1``. Gradient is 0 at a zero row."""

    def backward(g, ins, out, needs):
        x = ins[0]
        safe = add(out, Tensor((out.value == 0).astype(float)))
        coef = div(g, safe)
        return (mul(x, matmul(coef, _ones(1, x.shape[1]))),)

    value = np.sqrt(np.einsum("ij,ij->i", a.value, a.value))[:, None]
    return _record("row_norm", (a,), value, backward)


# ---------------------------------------------------------------------------
# differentiation


def grad(
    tape: Tape,
    output: Tensor,
    wrt: Sequence[Tensor],
    create_graph: bool = False,
) -> list[Tensor]:
    """Gradients of the scalar ``output`` with respect to each of ``wrt``.

    With ``create_graph`` the backward computation is recorded on ``tape`` so
    the returned gradients can be differentiated again. Tensors that do not
    influence ``output`` get a zero gradient.
    """
    if output.tape is not tape or output.node is None:
        raise GraphError("output is not recorded on this tape")
    if output.shape != (1, 1):
        raise ValueError(f"grad needs a scalar (1x1) output, got {output.shape}")
    targets = {}
    for w in wrt:
        if w.tape is not tape or w.node is None:
            raise GraphError(f"tensor {w!r} is not recorded on this tape")
        targets[w.node] = w

    last = output.node
    nodes = tape.nodes
    relevant = np.zeros(last + 1, dtype=bool)
    for k in range(last + 1):
        if k in targets:
            relevant[k] = True
        else:
            for t in nodes[k].inputs:
                if t.node is not None and t.tape is tape and t.node <= last and relevant[t.node]:
                    relevant[k] = True
                    break

    grads: dict[int, Tensor] = {last: _ones(1, 1)}
    for k in range(last, -1, -1):
        if not relevant[k] or k not in grads:
            continue
        node = nodes[k]
        if node.backward is None:
            continue
        g = grads[k] if k in targets else grads.pop(k)
        ins = node.inputs
        needs = tuple(
            t.tape is tape and t.node is not None and relevant[t.node] for t in ins
        )
        if not any(needs):
            continue
        if create_graph:
            results = node.backward(g, ins, node.output, needs)
        else:
            results = node.backward(
                g.detach() if g.tape is not None else g,
                tuple(t.detach() for t in ins),
                node.output.detach(),
                needs,
            )
        for t, gi, need in zip(ins, results, needs):
            if not need or gi is None:
                continue
            prev = grads.get(t.node)
            grads[t.node] = gi if prev is None else add(prev, gi)

    out = []
    for w in wrt:
        g = grads.get(w.node)
        out.append(g if g is not None else Tensor(np.zeros(w.shape)))
    return out


@dataclass
class GradCheckReport:
    max_rel_error: float
    failures: list = field(default_factory=list)
    checked: int = 0
    skipped: int = 0

    @property
    def ok(self) -> bool:
        return not self.failures


def check_gradients(
    f: Callable[..., Tensor],
    points: Sequence[Sequence[np.ndarray]],
    step: float = 1e-5,
    tol: float = 1e-6,
    kink_guard: bool = False,
    floor: float = 1e-4,
) -> GradCheckReport:
    """Compare ``grad`` with central finite differences.

    ``f`` maps tensors to a scalar tensor. Each entry of ``points`` is a list
    of arrays, one per argument of ``f``. The relative error of a coordinate
    is ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``. With
    ``kink_guard``, coordinates with ``|x| < 10 * step`` are skipped (ReLU-type
    kinks at the origin).
    """
    worst = 0.0
    report = GradCheckReport(0.0)
    for point in points:
        arrays = [np.array(p, dtype=np.float64, ndmin=2) for p in point]
        tape = Tape()
        args = [tape.variable(a) for a in arrays]
        analytic = [g.value for g in grad(tape, f(*args), args)]
        for ai, a in enumerate(arrays):
            for idx in np.ndindex(a.shape):
                if kink_guard and abs(a[idx]) < 10 * step:
                    report.skipped += 1
                    continue
                vals = []
                for sign in (1.0, -1.0):
                    shifted = [x.copy() for x in arrays]
                    shifted[ai][idx] += sign * step
                    vals.append(f(*[Tensor(x) for x in shifted]).item())
                numeric = (vals[0] - vals[1]) / (2 * step)
                ana = analytic[ai][idx]
                err = abs(ana - numeric) / max(abs(ana), abs(numeric), floor)
                report.checked += 1
                worst = max(worst, err)
                if err > tol:
                    report.failures.append((ai, idx, ana, numeric, err))
    report.max_rel_error = worst
    return report
