"""Quasi-affine index expressions.

An expression is an integer linear combination of iterator names plus a
constant, optionally extended with ``(expr) // k`` and ``(expr) % k`` terms for
compile-time constants ``k``. That is exactly what strip-mining, fusion and
grouping produce, and it keeps every access map brute-force evaluable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Union

import numpy as np

Ranges = Mapping[str, tuple[int, int]]  # inclusive (min, max) per iterator


def _merge_linear(pairs) -> tuple[tuple[str, int], ...]:
    acc: dict[str, int] = {}
    for name, c in pairs:
        acc[name] = acc.get(name, 0) + c
    return tuple(sorted((n, c) for n, c in acc.items() if c != 0))


def _merge_nonlinear(items) -> tuple[tuple[int, str, "Expr", int], ...]:
    acc: dict[tuple[str, Expr, int], int] = {}
    for c, op, inner, k in items:
        key = (op, inner, k)
        acc[key] = acc.get(key, 0) + c
    out = [(c, op, inner, k) for (op, inner, k), c in acc.items() if c != 0]
    out.sort(key=lambda t: (t[1], str(t[2]), t[3], t[0]))
    return tuple(out)


_ROLE_ORDER = ("g", "co", "h", "w", "ci", "kh", "kw")


def _name_key(name: str) -> tuple:
    # print iterators in conventional loop order: g, co, h, w, ci, kh, kw
    base = name.split("_")[0].rstrip("0123456789")
    rank = _ROLE_ORDER.index(base) if base in _ROLE_ORDER else len(_ROLE_ORDER)
    return (rank, name)


@dataclass(frozen=True)
class Expr:
    terms: tuple[tuple[str, int], ...] = ()
    const: int = 0
    nonlinear: tuple[tuple[int, str, "Expr", int], ...] = ()

    # construction -----------------------------------------------------

    @staticmethod
    def var(name: str) -> "Expr":
        return Expr(((name, 1),))

    @staticmethod
    def constant(value: int) -> "Expr":
        return Expr(const=int(value))

    @staticmethod
    def lift(x: "ExprLike") -> "Expr":
        if isinstance(x, Expr):
            return x
        if isinstance(x, str):
            return Expr.var(x)
        if isinstance(x, (int, np.integer)):
            return Expr.constant(int(x))
        raise TypeError(f"cannot build an expression from {x!r}")

    def __add__(self, other: "ExprLike") -> "Expr":
        o = Expr.lift(other)
        return Expr(
            _merge_linear(self.terms + o.terms),
            self.const + o.const,
            _merge_nonlinear(self.nonlinear + o.nonlinear),
        )

    __radd__ = __add__

    def __neg__(self) -> "Expr":
        return self * -1

    def __sub__(self, other: "ExprLike") -> "Expr":
        return self + (-Expr.lift(other))

    def __rsub__(self, other: "ExprLike") -> "Expr":
        return Expr.lift(other) - self

    def __mul__(self, k: int) -> "Expr":
        if not isinstance(k, (int, np.integer)):
            raise TypeError("expressions only scale by integer constants")
        k = int(k)
        if k == 0:
            return Expr()
        return Expr(
            tuple((n, c * k) for n, c in self.terms),
            self.const * k,
            tuple((c * k, op, inner, d) for c, op, inner, d in self.nonlinear),
        )

    __rmul__ = __mul__

    def floordiv(self, k: int) -> "Expr":
        if k <= 0:
            raise ValueError("divisor must be positive")
        if k == 1:
            return self
        if self.is_constant:
            return Expr.constant(self.const // k)
        return Expr(nonlinear=((1, "//", self, k),))

    def mod(self, k: int) -> "Expr":
        if k <= 0:
            raise ValueError("modulus must be positive")
        if k == 1:
            return Expr()
        if self.is_constant:
            return Expr.constant(self.const % k)
        return Expr(nonlinear=((1, "%", self, k),))

    # queries ----------------------------------------------------------

    @property
    def is_constant(self) -> bool:
        return not self.terms and not self.nonlinear

    @property
    def is_linear(self) -> bool:
        return not self.nonlinear

    def coeff(self, name: str) -> int:
        for n, c in self.terms:
            if n == name:
                return c
        return 0

    def vars(self) -> frozenset[str]:
        out = {n for n, _ in self.terms}
        for _, _, inner, _ in self.nonlinear:
            out |= inner.vars()
        return frozenset(out)

    def is_var(self, name: str) -> bool:
        return self.terms == ((name, 1),) and self.const == 0 and not self.nonlinear

    # rewriting --------------------------------------------------------

    def subs(self, mapping: Mapping[str, "ExprLike"]) -> "Expr":
        out = Expr.constant(self.const)
        for n, c in self.terms:
            out = out + (Expr.lift(mapping[n]) if n in mapping else Expr.var(n)) * c
        for c, op, inner, k in self.nonlinear:
            new_inner = inner.subs(mapping)
            part = new_inner.floordiv(k) if op == "//" else new_inner.mod(k)
            out = out + part * c
        return out

    def bounds(self, ranges: Ranges) -> tuple[float, float]:
        lo = hi = float(self.const)
        for n, c in self.terms:
            if n not in ranges:
                return -math.inf, math.inf
            a, b = ranges[n]
            lo += min(c * a, c * b)
            hi += max(c * a, c * b)
        for c, op, inner, k in self.nonlinear:
            ilo, ihi = inner.bounds(ranges)
            if op == "%":
                tlo, thi = (0, k - 1) if ilo >= 0 else (-math.inf, math.inf)
            else:
                tlo = math.floor(ilo / k) if math.isfinite(ilo) else -math.inf
                thi = math.floor(ihi / k) if math.isfinite(ihi) else math.inf
            lo += min(c * tlo, c * thi)
            hi += max(c * tlo, c * thi)
        return lo, hi

    def simplify(self, ranges: Ranges) -> "Expr":
        """Fold ``//`` and ``%`` terms whose quotient is decided by ``ranges``."""
        out = Expr(self.terms, self.const)
        for c, op, inner, k in self.nonlinear:
            inner = inner.simplify(ranges)
            quot = Expr(
                tuple((n, v // k) for n, v in inner.terms if v % k == 0),
                inner.const // k,
            )
            rem = Expr(
                tuple((n, v) for n, v in inner.terms if v % k != 0),
                inner.const % k,
                inner.nonlinear,
            )
            rlo, rhi = rem.bounds(ranges)
            if math.isfinite(rlo) and math.isfinite(rhi) and math.floor(rlo / k) == math.floor(rhi / k):
                m = math.floor(rlo / k)
                folded = quot + m if op == "//" else rem - k * m
                out = out + folded * c
            else:
                part = inner.floordiv(k) if op == "//" else inner.mod(k)
                out = out + part * c
        return out

    def evaluate(self, values: Mapping[str, Union[int, np.ndarray]]):
        total = self.const
        for n, c in self.terms:
            total = total + c * values[n]
        for c, op, inner, k in self.nonlinear:
            v = inner.evaluate(values)
            total = total + c * (v // k if op == "//" else v % k)
        return total

    # printing ---------------------------------------------------------

    def __str__(self) -> str:
        items: list[tuple[int, str]] = [(c, n) for n, c in sorted(self.terms, key=lambda t: _name_key(t[0]))]
        for c, op, inner, k in self.nonlinear:
            s = str(inner)
            if len(inner.terms) + len(inner.nonlinear) > 1 or inner.const:
                s = f"({s})"
            items.append((c, f"{s} {op} {k}"))
        parts: list[str] = []
        for c, text in items:
            mag = abs(c)
            body = text if mag == 1 else f"{mag}*{text}"
            if not parts:
                parts.append(body if c > 0 else f"-{body}")
            else:
                parts.append(f"+ {body}" if c > 0 else f"- {body}")
        if self.const or not parts:
            if not parts:
                parts.append(str(self.const))
            else:
                parts.append(f"+ {self.const}" if self.const > 0 else f"- {-self.const}")
        return " ".join(parts)

    def __repr__(self) -> str:
        return f"Expr({str(self)!r})"


ExprLike = Union[Expr, str, int]
