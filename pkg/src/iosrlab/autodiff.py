"""Minimal reverse-mode tape over dense float64 arrays.

Every training objective in this package is expressed through the fixed
primitive set below, so a single finite-difference oracle can certify all
analytic gradients. The tape is a Wengert list: operations append records
in execution order and ``backward`` replays them once in reverse.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible; raised before any computation."""


class DomainError(ValueError):
    """A primitive was evaluated outside its domain (e.g. log of <= 0)."""

    def __init__(self, message: str, index=None, value=None):
        super().__init__(message)
        self.index = index
        self.value = value


class TapeError(RuntimeError):
    """Tape misuse: backward on a non-scalar, or on a consumed tape."""


class NonFiniteError(RuntimeError):
    """A function evaluation produced a non-finite value.

    Carries the perturbation (parameter name, flat index, signed step) that
    produced it, when known.
    """

    def __init__(self, message: str, param=None, index=None, step=None):
        super().__init__(message)
        self.param = param
        self.index = index
        self.step = step


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """A float64 array plus gradient bookkeeping.

    ``requires_grad`` marks tracked leaves (parameters). Derived tensors
    carry ``needs_grad`` when any ancestor is tracked; adjoints are only
    ever materialized along such paths.
    """

    __slots__ = ("data", "requires_grad", "needs_grad", "grad", "tape")

    def __init__(self, data, requires_grad: bool = False, tape: "Tape | None" = None):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.needs_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.tape = tape
        if requires_grad and tape is None:
            raise TapeError("a tracked parameter must belong to a tape")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def value(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = "param" if self.requires_grad else ("node" if self.needs_grad else "const")
        return f"Tensor({flag}, shape={self.data.shape})"

    # Operator sugar; all arithmetic funnels through the module primitives.
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    out: Tensor
    # (input tensor, vjp) pairs, only for inputs on a tracked path
    pulls: list[tuple[Tensor, Callable[[np.ndarray], np.ndarray]]]


class Tape:
    """Ordered record of primitive applications with their backward rules."""

    def __init__(self):
        self.records: list[_Record] = []
        self.parameters: list[Tensor] = []
        self.consumed = False

    def parameter(self, data) -> Tensor:
        p = Tensor(data, requires_grad=True, tape=self)
        self.parameters.append(p)
        return p

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Accumulate gradients of ``loss`` into every tracked parameter.

        Returns a map from ``id(parameter)`` to its gradient array. Gradients
        add onto any existing ``.grad`` (callers reset between steps).
        """
        if loss.data.shape != ():
            raise TapeError(f"backward expects a scalar loss, got shape {loss.data.shape}")
        if self.consumed:
            raise TapeError("tape already consumed by a previous backward")
        if loss.tape is not self and loss.needs_grad:
            raise TapeError("loss does not belong to this tape")
        self.consumed = True

        adjoint: dict[int, np.ndarray] = {id(loss): np.ones(())}
        for rec in reversed(self.records):
            up = adjoint.pop(id(rec.out), None)
            if up is None:
                continue
            for src, vjp in rec.pulls:
                contrib = vjp(up)
                key = id(src)
                if key in adjoint:
                    adjoint[key] = adjoint[key] + contrib
                else:
                    adjoint[key] = contrib

        grads: dict[int, np.ndarray] = {}
        for p in self.parameters:
            g = adjoint.get(id(p))
            if g is None:
                g = np.zeros_like(p.data)
            g = np.broadcast_to(g, p.data.shape).astype(np.float64, copy=True)
            p.grad = g if p.grad is None else p.grad + g
            grads[id(p)] = p.grad
        return grads


def _result(tape_inputs: Sequence[Tensor], out_data: np.ndarray, pulls) -> Tensor:
    """Wrap ``out_data``; record on the tape only along tracked paths."""
    tape = None
    for t in tape_inputs:
        if t.needs_grad:
            if tape is None:
                tape = t.tape
            elif t.tape is not tape:
                raise TapeError("operands belong to different tapes")
    out = Tensor(out_data)
    if tape is not None:
        out.needs_grad = True
        out.tape = tape
        tape.records.append(_Record(out, [(t, f) for t, f in pulls if t.needs_grad]))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` after scalar/row broadcasting."""
    if shape == ():
        return np.sum(grad)
    if grad.shape == shape:
        return grad
    # (k,) broadcast over the rows of (n, k)
    if len(shape) == 1 and grad.ndim == 2 and grad.shape[1] == shape[0]:
        return grad.sum(axis=0)
    raise ShapeError(f"cannot reduce gradient {grad.shape} to {shape}")


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    sa, sb = a.data.shape, b.data.shape
    if sa == sb or sa == () or sb == ():
        return
    # vector against matrix rows
    if len(sa) == 1 and len(sb) == 2 and sb[1] == sa[0]:
        return
    if len(sb) == 1 and len(sa) == 2 and sa[1] == sb[0]:
        return
    raise ShapeError(f"incompatible shapes {sa} and {sb}")


def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _check_broadcast(a, b)
    out = a.data + b.data
    return _result(
        (a, b),
        out,
        [
            (a, lambda up: _unbroadcast(up, a.data.shape)),
            (b, lambda up: _unbroadcast(up, b.data.shape)),
        ],
    )


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _check_broadcast(a, b)
    out = a.data - b.data
    return _result(
        (a, b),
        out,
        [
            (a, lambda up: _unbroadcast(up, a.data.shape)),
            (b, lambda up: _unbroadcast(-up, b.data.shape)),
        ],
    )


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _check_broadcast(a, b)
    out = a.data * b.data
    return _result(
        (a, b),
        out,
        [
            (a, lambda up: _unbroadcast(up * b.data, a.data.shape)),
            (b, lambda up: _unbroadcast(up * a.data, b.data.shape)),
        ],
    )


def neg(a) -> Tensor:
    a = constant(a)
    return _result((a,), -a.data, [(a, lambda up: -up)])


def matmul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul needs (n,m)@(m,k), got {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data
    return _result(
        (a, b),
        out,
        [
            (a, lambda up: up @ b.data.T),
            (b, lambda up: a.data.T @ up),
        ],
    )


def transpose(a) -> Tensor:
    a = constant(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.data.shape}")
    return _result((a,), a.data.T.copy(), [(a, lambda up: up.T)])


def stack_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Stack 1-d tensors into the rows of a matrix."""
    ts = [constant(t) for t in tensors]
    if not ts:
        raise ShapeError("stack_rows of an empty sequence")
    width = ts[0].data.shape
    if len(width) != 1 or any(t.data.shape != width for t in ts):
        raise ShapeError("stack_rows expects 1-d tensors of equal length")
    out = np.stack([t.data for t in ts], axis=0)

    def pull(i):
        return lambda up: up[i]

    return _result(tuple(ts), out, [(t, pull(i)) for i, t in enumerate(ts)])


def exp(a) -> Tensor:
    a = constant(a)
    out = np.exp(a.data)
    return _result((a,), out, [(a, lambda up: up * out)])


def log(a) -> Tensor:
    a = constant(a)
    bad = np.flatnonzero(a.data <= 0.0)
    if bad.size:
        i = int(bad[0])
        raise DomainError(
            f"log of non-positive value {a.data.reshape(-1)[i]!r} at flat index {i}",
            index=i,
            value=float(a.data.reshape(-1)[i]),
        )
    out = np.log(a.data)
    return _result((a,), out, [(a, lambda up: up / a.data)])


def sqrt(a) -> Tensor:
    a = constant(a)
    bad = np.flatnonzero(a.data < 0.0)
    if bad.size:
        i = int(bad[0])
        raise DomainError(f"sqrt of negative value at flat index {i}", index=i)
    out = np.sqrt(a.data)
    safe = np.maximum(out, 1e-150)
    return _result((a,), out, [(a, lambda up: up / (2.0 * safe))])


def reciprocal(a) -> Tensor:
    a = constant(a)
    bad = np.flatnonzero(a.data == 0.0)
    if bad.size:
        i = int(bad[0])
        raise DomainError(f"reciprocal of zero at flat index {i}", index=i)
    out = 1.0 / a.data
    return _result((a,), out, [(a, lambda up: -up * out * out)])


def tensor_sum(a) -> Tensor:
    a = constant(a)
    out = np.sum(a.data)
    return _result((a,), out, [(a, lambda up: np.full(a.data.shape, float(up)))])


def mean(a) -> Tensor:
    a = constant(a)
    n = a.data.size
    if n == 0:
        raise ShapeError("mean of an empty tensor")
    out = np.mean(a.data)
    return _result((a,), out, [(a, lambda up: np.full(a.data.shape, float(up) / n))])


def l2_norm(a) -> Tensor:
    a = constant(a)
    if a.data.ndim != 1:
        raise ShapeError(f"l2_norm expects a vector, got shape {a.data.shape}")
    r = float(np.linalg.norm(a.data))
    if r == 0.0:
        raise DomainError("l2_norm of the zero vector", index=0)
    return _result((a,), np.asarray(r), [(a, lambda up: float(up) * a.data / r)])


def normalize(a) -> Tensor:
    """L2-normalize a vector, or each row of a matrix.

    The backward projects the upstream gradient onto the complement of the
    normalized direction, so it is orthogonal to the input row.
    """
    a = constant(a)
    if a.data.ndim == 1:
        r = np.linalg.norm(a.data)
        if r == 0.0:
            raise DomainError("normalize of the zero vector (instance 0)", index=0)
        unit = a.data / r

        def pull_vec(up):
            return (up - unit * np.dot(unit, up)) / r

        return _result((a,), unit, [(a, pull_vec)])
    if a.data.ndim == 2:
        r = np.linalg.norm(a.data, axis=1)
        zero = np.flatnonzero(r == 0.0)
        if zero.size:
            raise DomainError(f"normalize of a zero-norm row (instance {int(zero[0])})", index=int(zero[0]))
        unit = a.data / r[:, None]

        def pull_mat(up):
            coef = np.einsum("ij,ij->i", unit, up)
            return (up - unit * coef[:, None]) / r[:, None]

        return _result((a,), unit, [(a, pull_mat)])
    raise ShapeError(f"normalize expects a vector or matrix, got shape {a.data.shape}")


def dot(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    if a.data.ndim != 1 or a.data.shape != b.data.shape:
        raise ShapeError(f"dot expects equal-length vectors, got {a.data.shape}, {b.data.shape}")
    out = np.dot(a.data, b.data)
    return _result(
        (a, b),
        out,
        [
            (a, lambda up: float(up) * b.data),
            (b, lambda up: float(up) * a.data),
        ],
    )


def rows_dot(a, b) -> Tensor:
    """Row-wise inner products of two equal-shape matrices -> vector."""
    a, b = constant(a), constant(b)
    if a.data.ndim != 2 or a.data.shape != b.data.shape:
        raise ShapeError(f"rows_dot expects equal-shape matrices, got {a.data.shape}, {b.data.shape}")
    out = np.einsum("ij,ij->i", a.data, b.data)
    return _result(
        (a, b),
        out,
        [
            (a, lambda up: up[:, None] * b.data),
            (b, lambda up: up[:, None] * a.data),
        ],
    )


def _sigmoid_grad_factor(s: np.ndarray) -> np.ndarray:
    # Module-level so gradient-mutation tests can interpose on backward only.
    return s * (1.0 - s)


def sigmoid(a) -> Tensor:
    a = constant(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _result((a,), out, [(a, lambda up: up * _sigmoid_grad_factor(out))])


def masked_softmax(a, mask) -> Tensor:
    """Softmax over the index set where ``mask`` is True; 0 elsewhere.

    ``a`` is a logit vector or a matrix of row-wise logits; ``mask`` is a
    boolean vector over the last axis, shared by all rows. Uses a stable
    log-sum-exp. Entries outside the mask are excluded from the
    denominator, not driven to zero through -inf logits.
    """
    a = constant(a)
    m = np.asarray(mask, dtype=bool)
    if a.data.ndim not in (1, 2) or m.ndim != 1 or a.data.shape[-1] != m.shape[0]:
        raise ShapeError(f"masked_softmax got logits {a.data.shape} with mask {m.shape}")
    if not m.any():
        raise DomainError("masked_softmax with an empty mask")
    x = np.atleast_2d(a.data)
    sel = x[:, m]
    peak = sel.max(axis=1, keepdims=True)
    ex = np.exp(sel - peak)
    probs_sel = ex / ex.sum(axis=1, keepdims=True)
    out = np.zeros_like(x)
    out[:, m] = probs_sel
    if a.data.ndim == 1:
        out = out[0]

    def pull(up):
        p = np.atleast_2d(out)
        u = np.atleast_2d(up)
        inner = np.einsum("ij,ij->i", u, p)
        g = p * (u - inner[:, None])
        return g[0] if a.data.ndim == 1 else g

    return _result((a,), out, [(a, pull)])


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to [lo, hi]; gradient passes only strictly inside the interval."""
    a = constant(a)
    if lo is None and hi is None:
        raise ShapeError("clamp needs at least one bound")
    out = np.clip(a.data, lo, hi)
    inside = np.ones(a.data.shape, dtype=bool)
    if lo is not None:
        inside &= a.data > lo
    if hi is not None:
        inside &= a.data < hi
    return _result((a,), out, [(a, lambda up: up * inside)])


def relu(a) -> Tensor:
    return clamp(a, lo=0.0)


def take_per_row(a, cols) -> Tensor:
    """Gather one column per row: out[i] = a[i, cols[i]]."""
    a = constant(a)
    idx = np.asarray(cols, dtype=np.intp)
    if a.data.ndim != 2 or idx.ndim != 1 or idx.shape[0] != a.data.shape[0]:
        raise ShapeError(f"take_per_row got matrix {a.data.shape} with cols {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[1]):
        raise ShapeError("take_per_row column index out of range")
    rows = np.arange(a.data.shape[0])
    out = a.data[rows, idx]

    def pull(up):
        g = np.zeros_like(a.data)
        np.add.at(g, (rows, idx), up)
        return g

    return _result((a,), out, [(a, pull)])


# ---------------------------------------------------------------------------
# Finite-difference oracle


@dataclass
class FiniteDiffReport:
    """Outcome of a gradient check.

    ``max_rel_error`` covers only coordinates where central differences were
    stable; coordinates excluded as non-smooth (clamp kinks and the like)
    are listed with a reason instead of counting as failures.
    """

    max_rel_error: float
    per_param: dict[str, float]
    excluded: list[tuple[str, int, str]] = field(default_factory=list)

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def _relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))


def finite_diff_check(
    f: Callable[[dict[str, Tensor]], Tensor],
    point: dict[str, np.ndarray],
    h: float = 1e-4,
) -> FiniteDiffReport:
    """Compare the tape's gradients of ``f`` against central differences.

    ``f`` maps named parameter tensors to a scalar tensor. The numeric side
    uses forward evaluations only (untracked constants), so it is independent
    of every backward rule it certifies. Relative error per coordinate is
    |analytic - numeric| / max(1, |analytic|, |numeric|). A coordinate whose
    difference quotient is unstable under step halving sits on a kink and is
    excluded rather than failed.
    """
    point = {k: _as_array(v) for k, v in point.items()}

    tape = Tape()
    params = {k: tape.parameter(v.copy()) for k, v in point.items()}
    out = f(params)
    if not isinstance(out, Tensor) or out.data.shape != ():
        raise TapeError("finite_diff_check expects f to produce a scalar tensor")
    if not np.isfinite(out.data):
        raise NonFiniteError("f is non-finite at the base point")
    tape.backward(out)
    analytic = {k: params[k].grad if params[k].grad is not None else np.zeros_like(v) for k, v in point.items()}

    def eval_at(values: dict[str, np.ndarray], name: str, index: int, step: float) -> float:
        frozen = {k: Tensor(v) for k, v in values.items()}
        val = f(frozen)
        v = float(val.data) if isinstance(val, Tensor) else float(val)
        if not np.isfinite(v):
            raise NonFiniteError(
                f"f is non-finite at {name}[{index}] with step {step:+g}",
                param=name,
                index=index,
                step=step,
            )
        return v

    base_value = float(out.data)

    def central(name: str, flat: np.ndarray, i: int, step: float) -> tuple[float, float, float]:
        orig = flat[i]
        shifted = {k: (v.copy() if k == name else v) for k, v in point.items()}
        view = shifted[name].reshape(-1)
        view[i] = orig + step
        plus = eval_at(shifted, name, i, +step)
        view[i] = orig - step
        minus = eval_at(shifted, name, i, -step)
        quotient = (plus - minus) / (2.0 * step)
        return quotient, (plus - base_value) / step, (base_value - minus) / step

    per_param: dict[str, float] = {}
    excluded: list[tuple[str, int, str]] = []
    worst = 0.0
    for name, base in point.items():
        flat = base.reshape(-1)
        ana_flat = analytic[name].reshape(-1)
        param_worst = 0.0
        for i in range(flat.size):
            numeric, fwd, bwd = central(name, flat, i, h)
            err = _relative_error(float(ana_flat[i]), numeric)
            if err > 1e-6:
                # One-sided quotients that disagree mean the point straddles a
                # kink (clamp boundary, rectifier zero): the central quotient
                # averages two different slopes there and proves nothing.
                if abs(fwd - bwd) / max(1.0, abs(fwd), abs(bwd)) > 0.05:
                    excluded.append((name, i, "non-smooth at this point"))
                    continue
                # A stable quotient shrinks its error O(h^2) under halving;
                # residual non-smoothness keeps disagreeing with itself.
                refined, _, _ = central(name, flat, i, h / 2.0)
                if _relative_error(numeric, refined) > 1e-3:
                    excluded.append((name, i, "non-smooth at this point"))
                    continue
                err = _relative_error(float(ana_flat[i]), refined)
            param_worst = max(param_worst, err)
        per_param[name] = param_worst
        worst = max(worst, param_worst)
    return FiniteDiffReport(max_rel_error=worst, per_param=per_param, excluded=excluded)
