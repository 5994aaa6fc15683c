"""
Scalar-field expressions over (x, y, z).

Expressions are parsed by a small recursive-descent parser into :mod:`sympy`
trees, so that gradients and Hessians are exact symbolic derivatives. The
accepted grammar is deliberately tiny::

    expr   := term (("+" | "-") term)*
    term   := unary (("*" | "/") unary)*
    unary  := ("-" | "+") unary | power
    power  := atom ("^" unary)?
    atom   := NUMBER | VARIABLE | FUNCTION "(" expr ")" | "(" expr ")"

with variables ``x, y, z`` and functions ``exp, log, sqrt, sin, cos, tanh``.
``^`` is right associative and binds tighter than unary minus, so ``-x^2``
means ``-(x^2)``.
"""

from __future__ import annotations

import re
from typing import Callable, Sequence

import numpy as np
import sympy

X, Y, Z = sympy.symbols("x y z", real=True)
COORDS = (X, Y, Z)

VARIABLES = {"x": X, "y": Y, "z": Z}
FUNCTIONS = {
    "exp": sympy.exp,
    "log": sympy.log,
    "sqrt": sympy.sqrt,
    "sin": sympy.sin,
    "cos": sympy.cos,
    "tanh": sympy.tanh,
}

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^()]))"
)


class ExpressionError(ValueError):
    """Raised for malformed expressions; ``column`` is 1-based."""

    def __init__(self, message: str, text: str, column: int):
        self.text = text
        self.column = column
        super().__init__(f"{message} at column {column} in {text!r}")


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    n = len(text)
    while pos < n:
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            col = pos + len(text[pos:]) - len(text[pos:].lstrip()) + 1
            raise ExpressionError(f"unexpected character {text[col - 1]!r}", text, col)
        kind = m.lastgroup
        tokens.append((kind, m.group(kind), m.start(kind) + 1))
        pos = m.end()
    tokens.append(("end", "", n + 1))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value: str):
        kind, val, col = self.take()
        if val != value:
            found = "end of expression" if kind == "end" else repr(val)
            raise ExpressionError(f"expected {value!r}, found {found}", self.text, col)

    def parse(self) -> sympy.Expr:
        node = self.expr()
        kind, val, col = self.peek()
        if kind != "end":
            raise ExpressionError(f"unexpected token {val!r}", self.text, col)
        return node

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-"):
            op = self.take()[1]
            rhs = self.term()
            node = node + rhs if op == "+" else node - rhs
        return node

    def term(self):
        node = self.unary()
        while self.peek()[1] in ("*", "/"):
            op = self.take()[1]
            rhs = self.unary()
            node = node * rhs if op == "*" else node / rhs
        return node

    def unary(self):
        if self.peek()[1] == "-":
            self.take()
            return -self.unary()
        if self.peek()[1] == "+":
            self.take()
            return self.unary()
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[1] == "^":
            self.take()
            return base ** self.unary()
        return base

    def atom(self):
        kind, val, col = self.take()
        if kind == "num":
            return sympy.Rational(val) if re.fullmatch(r"\d+", val) else sympy.Float(val, 17)
        if kind == "name":
            if val in FUNCTIONS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return FUNCTIONS[val](arg)
            if val in VARIABLES:
                if self.peek()[1] == "(":
                    raise ExpressionError(f"{val!r} is not a function", self.text, col)
                return VARIABLES[val]
            raise ExpressionError(f"unknown identifier {val!r}", self.text, col)
        if val == "(":
            node = self.expr()
            self.expect(")")
            return node
        found = "end of expression" if kind == "end" else repr(val)
        raise ExpressionError(f"unexpected {found}", self.text, col)


def parse_expression(text: str) -> sympy.Expr:
    """Parse ``text`` into a sympy expression in the symbols x, y, z.

    Raises:
        ExpressionError: on any syntax error or unknown identifier.
    """
    if not isinstance(text, str):
        raise ExpressionError("expression must be a string", str(text), 1)
    if text.strip() == "":
        raise ExpressionError("empty expression", text, 1)
    return _Parser(text).parse()


def gradient(expr: sympy.Expr) -> list[sympy.Expr]:
    return [sympy.diff(expr, v) for v in COORDS]


def hessian(expr: sympy.Expr) -> list[list[sympy.Expr]]:
    return [[sympy.diff(expr, a, b) for b in COORDS] for a in COORDS]


def compile_fields(exprs: Sequence[sympy.Expr]) -> Callable[..., list[np.ndarray]]:
    """Vectorize a list of expressions into one numpy callable.

    The returned function takes coordinate arrays ``(x, y, z)`` of a common
    shape and returns a list of float arrays of that shape, constants
    included (they are broadcast).
    """
    exprs = [sympy.sympify(e) for e in exprs]
    fn = sympy.lambdify(COORDS, exprs, modules="numpy", cse=True)

    def evaluate(x, y, z):
        x, y, z = np.broadcast_arrays(
            np.asarray(x, dtype=float), np.asarray(y, dtype=float), np.asarray(z, dtype=float)
        )
        with np.errstate(invalid="ignore", divide="ignore"):
            out = fn(x, y, z)
        res = []
        for v in out:
            v = np.asarray(v, dtype=float)
            res.append(v if v.shape == x.shape else np.full(x.shape, v))
        return res

    return evaluate
