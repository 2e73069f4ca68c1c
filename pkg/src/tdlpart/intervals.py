"""Symbolic interval analysis over affine index expressions.

A :class:`SymInterval` is a half-open range ``[lo, hi)`` whose endpoints are
affine forms in symbolic extents ``X_v`` (one per index variable, plus
``tensor:dim`` symbols for whole-dimension opaque slices).

Scalar multiplication and interval addition are carried out on the closed
integer hull ``[lo, hi - 1]`` and converted back, so an interval always
describes exactly the set of integer coordinates it stands for.  For example
``[0, X) + [0, Y)`` is ``[0, X + Y - 1)`` and ``2 * [0, X)`` is ``[0, 2X - 1)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping, Optional, Union

from .errors import NonAffineError, UnboundSymbol
from .tdl import Affine, OpaqueCall, OperatorDef, TensorAccess, walk

Number = Union[int, Fraction]
Form = tuple[tuple[str, Fraction], ...]


def _form(coeffs: Mapping[str, Number]) -> Form:
    return tuple(sorted((s, Fraction(c)) for s, c in coeffs.items() if c != 0))


def _add_forms(a: Form, b: Form, sign: int = 1) -> Form:
    out = dict(a)
    for s, c in b:
        out[s] = out.get(s, Fraction(0)) + sign * c
    return _form(out)


def _scale_form(a: Form, k: Fraction) -> Form:
    return _form({s: c * k for s, c in a})


def _fmt_form(form: Form, const: Fraction) -> str:
    parts = []
    for s, c in form:
        coef = "" if c == 1 else ("-" if c == -1 else f"{c}*")
        parts.append(f"{coef}X_{s}")
    if const or not parts:
        parts.append(str(const))
    return " + ".join(parts).replace("+ -", "- ")


@dataclass(frozen=True)
class SymInterval:
    lo: Form
    lo_const: Fraction
    hi: Form
    hi_const: Fraction

    # -- constructors -----------------------------------------------------

    @staticmethod
    def make(lo: Mapping[str, Number], lo_const: Number,
             hi: Mapping[str, Number], hi_const: Number) -> "SymInterval":
        return SymInterval(_form(lo), Fraction(lo_const), _form(hi), Fraction(hi_const))

    @staticmethod
    def zv(symbol: str, l: Number = 0, u: Number = 1) -> "SymInterval":
        """``[l * X, u * X)``; the default is the full range of ``symbol``."""
        return SymInterval.make({symbol: l}, 0, {symbol: u}, 0)

    @staticmethod
    def point(k: Number) -> "SymInterval":
        return SymInterval((), Fraction(k), (), Fraction(k) + 1)

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other) -> "SymInterval":
        if isinstance(other, SymInterval):
            return SymInterval(
                _add_forms(self.lo, other.lo), self.lo_const + other.lo_const,
                _add_forms(self.hi, other.hi), self.hi_const + other.hi_const - 1)
        k = _scalar(other)
        return SymInterval(self.lo, self.lo_const + k, self.hi, self.hi_const + k)

    __radd__ = __add__

    def __neg__(self) -> "SymInterval":
        return self * -1

    def __sub__(self, other) -> "SymInterval":
        if isinstance(other, SymInterval):
            return self + (-other)
        return self + (-_scalar(other))

    def __rsub__(self, other) -> "SymInterval":
        return (-self) + _scalar(other)

    def __mul__(self, other) -> "SymInterval":
        if isinstance(other, SymInterval):
            raise NonAffineError("product of two intervals is not affine")
        k = _scalar(other)
        if k == 0:
            return SymInterval.point(0)
        # closed hull [lo, hi - 1] scaled, then back to half-open
        top_form, top_const = self.hi, self.hi_const - 1
        if k > 0:
            return SymInterval(
                _scale_form(self.lo, k), self.lo_const * k,
                _scale_form(top_form, k), top_const * k + 1)
        return SymInterval(
            _scale_form(top_form, k), top_const * k,
            _scale_form(self.lo, k), self.lo_const * k + 1)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "SymInterval":
        if isinstance(other, SymInterval):
            raise NonAffineError("division by an interval is not affine")
        k = _scalar(other)
        if k == 0:
            raise ZeroDivisionError("interval divided by zero")
        return self * (1 / k)

    def _compare(self, other):
        raise NonAffineError("comparison between intervals is not supported")

    __lt__ = __le__ = __gt__ = __ge__ = _compare

    # -- queries ----------------------------------------------------------

    @property
    def symbols(self) -> set[str]:
        return {s for s, _ in self.lo} | {s for s, _ in self.hi}

    def is_full(self, symbol: str) -> bool:
        return self == SymInterval.zv(symbol)

    def hull(self, other: "SymInterval") -> "SymInterval":
        """Smallest interval containing both, when their symbolic parts agree."""
        if self.lo != other.lo or self.hi != other.hi:
            raise NonAffineError(
                f"cannot order intervals {self} and {other} symbolically")
        return SymInterval(self.lo, min(self.lo_const, other.lo_const),
                           self.hi, max(self.hi_const, other.hi_const))

    def concretize(self, bounds: Mapping[str, int]) -> tuple[int, int]:
        return (math.ceil(_evaluate(self.lo, self.lo_const, bounds)),
                math.ceil(_evaluate(self.hi, self.hi_const, bounds)))

    def to_json(self) -> dict:
        return {
            "lower": {"coeffs": {s: float(c) for s, c in self.lo}, "const": float(self.lo_const)},
            "upper": {"coeffs": {s: float(c) for s, c in self.hi}, "const": float(self.hi_const)},
            "text": str(self),
        }

    def __str__(self) -> str:
        return f"[{_fmt_form(self.lo, self.lo_const)}, {_fmt_form(self.hi, self.hi_const)})"


def _scalar(x) -> Fraction:
    if isinstance(x, (int, Fraction)):
        return Fraction(x)
    if isinstance(x, float):
        return Fraction(x).limit_denominator(10**9)
    raise TypeError(f"unsupported operand {x!r}")


def _evaluate(form: Form, const: Fraction, bounds: Mapping[str, int]) -> Fraction:
    total = const
    for s, c in form:
        if s not in bounds:
            raise UnboundSymbol(f"symbol X_{s} has no concrete value")
        total += c * bounds[s]
    return total


def concretize(interval: SymInterval, bounds: Mapping[str, int]) -> tuple[int, int]:
    return interval.concretize(bounds)


def interval_arith(op: str, interval: SymInterval, rhs) -> SymInterval:
    """Apply ``op`` (one of ``+ - * /``) with a scalar or interval right operand."""
    if op == "+":
        return interval + rhs
    if op == "-":
        return interval - rhs
    if op == "*":
        return interval * rhs
    if op == "/":
        return interval / rhs
    raise ValueError(f"unknown interval operator {op!r}")


def slice_symbol(tensor: str, dim: int) -> str:
    return f"{tensor}:{dim}"


AccessMap = dict[str, tuple[SymInterval, ...]]


def image(index: Affine, init: Mapping[str, SymInterval]) -> SymInterval:
    """Interval of values taken by an affine index expression."""
    result: Optional[SymInterval] = None
    for v, c in index.terms:
        term = init.get(v, SymInterval.zv(v)) * c
        result = term if result is None else result + term
    if result is None:
        return SymInterval.point(index.const)
    return result + index.const


def eval_access(d: OperatorDef, init: Optional[Mapping[str, SymInterval]] = None) -> AccessMap:
    """Per input dimension, the coordinates read when index variables range over ``init``.

    Variables missing from ``init`` range over their full extent.  Whole-dimension
    opaque slices ``:`` read ``[0, X_{tensor:dim})``.  Input tensors that are never
    read map to empty intervals.
    """
    init = dict(init or {})
    found: dict[str, list[Optional[SymInterval]]] = {}
    for node in walk(d.body):
        if isinstance(node, TensorAccess):
            dims = [image(ix, init) for ix in node.indices]
        elif isinstance(node, OpaqueCall):
            dims = [SymInterval.zv(slice_symbol(node.tensor, k)) if s is None else image(s, init)
                    for k, s in enumerate(node.slots)]
        else:
            continue
        prev = found.get(node.tensor)
        if prev is None:
            found[node.tensor] = dims
        else:
            found[node.tensor] = [a.hull(b) for a, b in zip(prev, dims)]
    out: AccessMap = {}
    for name, rank in d.params:
        if name in found:
            out[name] = tuple(found[name])
        else:
            out[name] = tuple(SymInterval((), Fraction(0), (), Fraction(0)) for _ in range(rank))
    return out
