"""Model-term mini-grammar.

::

    term := atom | atom ":" atom
    atom := NAME | "log(" NAME ")" | NAME "^" INT

A term describes both a design column and how it is aggregated: the
transformation is applied to each subject first, and only the transformed
values are ever summed over a pool.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Mapping, Union

import numpy as np

from .errors import DomainError, ParseError, UnknownVariable


@dataclass(frozen=True)
class Var:
    name: str

    def render(self) -> str:
        return self.name


@dataclass(frozen=True)
class Log:
    name: str

    def render(self) -> str:
        return f"log({self.name})"


@dataclass(frozen=True)
class Power:
    name: str
    k: int

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("power must be an integer >= 2")

    def render(self) -> str:
        return f"{self.name}^{self.k}"


Factor = Union[Var, Log, Power]


@dataclass(frozen=True)
class Product:
    left: Factor
    right: Factor

    def __post_init__(self):
        for f in (self.left, self.right):
            if not isinstance(f, (Var, Log, Power)):
                raise TypeError("Product factors must be Var, Log or Power")

    def render(self) -> str:
        return f"{self.left.render()}:{self.right.render()}"


TermSpec = Union[Var, Log, Power, Product]


def variables(t: TermSpec) -> tuple[str, ...]:
    if isinstance(t, Product):
        return variables(t.left) + variables(t.right)
    return (t.name,)


def max_power(t: TermSpec) -> int:
    """Highest integer power of a single covariate appearing in ``t``."""
    if isinstance(t, Product):
        if variables(t.left) == variables(t.right):
            return max_power(t.left) + max_power(t.right)
        return max(max_power(t.left), max_power(t.right))
    if isinstance(t, Power):
        return t.k
    return 1


# --- parsing ---------------------------------------------------------------

_NAME = re.compile(r"[A-Za-z_][A-Za-z0-9_.]*")
_INT = re.compile(r"[0-9]+")


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def error(self, message, pos=None):
        raise ParseError(message, self.text, self.pos if pos is None else pos)

    def skip_ws(self):
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def peek(self) -> str:
        self.skip_ws()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def expect(self, ch: str):
        if self.peek() != ch:
            found = self.peek() or "end of input"
            self.error(f"expected {ch!r}, found {found!r}")
        self.pos += 1

    def name(self) -> str:
        self.skip_ws()
        m = _NAME.match(self.text, self.pos)
        if not m:
            self.error("expected a variable name")
        self.pos = m.end()
        return m.group()

    def atom(self) -> Factor:
        self.skip_ws()
        start = self.pos
        ident = self.name()
        if ident == "log" and self.peek() == "(":
            self.pos += 1
            inner = self.name()
            self.expect(")")
            return Log(inner)
        if self.peek() == "^":
            self.pos += 1
            self.skip_ws()
            m = _INT.match(self.text, self.pos)
            if not m:
                self.error("expected an integer exponent")
            k = int(m.group())
            if k < 2:
                self.error("exponent must be >= 2", start)
            self.pos = m.end()
            return Power(ident, k)
        return Var(ident)

    def term(self) -> TermSpec:
        left = self.atom()
        if self.peek() == ":":
            self.pos += 1
            right = self.atom()
            t = Product(left, right)
        else:
            t = left
        if self.peek():
            self.error(f"unexpected {self.peek()!r}")
        return t


def parse_term_spec(text: str) -> TermSpec:
    """Parse one term, e.g. ``"log(age):marker"``.

    Raises :class:`~clrpool.errors.ParseError` carrying the offset into
    ``text`` where parsing failed.
    """
    return _Parser(text).term()


def parse_terms(texts) -> list[TermSpec]:
    return [t if isinstance(t, (Var, Log, Power, Product)) else parse_term_spec(t)
            for t in texts]


def render(t: TermSpec) -> str:
    return t.render()


# --- evaluation ------------------------------------------------------------

def _lookup(values: Mapping[str, float], name: str):
    try:
        return values[name]
    except KeyError:
        raise UnknownVariable(f"unknown variable {name!r}") from None


def _eval_factor(values, f: Factor) -> float:
    x = float(_lookup(values, f.name))
    if isinstance(f, Var):
        return x
    if isinstance(f, Log):
        if not x > 0:
            raise DomainError(f"log({f.name}) undefined for value {x!r}")
        return math.log(x)
    return x ** f.k


def evaluate_term(subject, t: TermSpec) -> float:
    """Per-subject value of ``t``.

    ``subject`` is a :class:`~clrpool.cohort.Subject` or any mapping of
    covariate name to value.
    """
    values = getattr(subject, "covariates", subject)
    if isinstance(t, Product):
        return _eval_factor(values, t.left) * _eval_factor(values, t.right)
    return _eval_factor(values, t)


def _eval_factor_columns(columns, f: Factor) -> np.ndarray:
    x = np.asarray(_lookup(columns, f.name), dtype=float)
    if isinstance(f, Var):
        return x
    if isinstance(f, Log):
        bad = ~(x > 0)
        if bad.any():
            raise DomainError(
                f"log({f.name}) undefined for {int(bad.sum())} non-positive value(s)"
            )
        # math.log per element keeps the vector path bit-identical to evaluate_term
        return np.fromiter((math.log(v) for v in x.ravel()), float, x.size).reshape(x.shape)
    # likewise for powers: numpy's integer power can differ from C pow in the last bit
    return np.fromiter((v ** f.k for v in x.ravel().tolist()), float, x.size).reshape(x.shape)


def evaluate_columns(columns: Mapping[str, np.ndarray], t: TermSpec) -> np.ndarray:
    """Vectorized :func:`evaluate_term` over aligned covariate arrays."""
    if isinstance(t, Product):
        return _eval_factor_columns(columns, t.left) * _eval_factor_columns(columns, t.right)
    return _eval_factor_columns(columns, t).copy()
