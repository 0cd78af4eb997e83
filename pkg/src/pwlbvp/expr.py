"""Small expression DSL for user-defined fields and boundary functions.

Grammar (whitespace insignificant, '^' right-associative, unary minus binds
tighter than '^'):

    expr   := term (('+'|'-') term)*
    term   := factor (('*'|'/') factor)*
    factor := unary ('^' factor)?
    unary  := '-' unary | atom
    atom   := number | ident | ident '(' expr ')' | '(' expr ')'

Variables are ``t`` and ``x1 .. xn``; functions are sin, cos, exp, log, tanh,
sqrt, abs. Evaluation is checked: log/sqrt of a negative number, division by
zero and fractional powers of negative bases raise :class:`EvalError` instead
of producing silent non-finite values.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .exceptions import EvalError, ParseError

FUNCTIONS = {
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
    "log": np.log,
    "tanh": np.tanh,
    "sqrt": np.sqrt,
    "abs": np.abs,
}

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<ident>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/^()]))"
)


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    arg: object


@dataclass(frozen=True)
class Bin:
    op: str
    left: object
    right: object


@dataclass(frozen=True)
class Call:
    fn: str
    arg: object


Expression = (Num, Var, Neg, Bin, Call)


def _tokenize(text: str):
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            stripped = text[pos:].lstrip()
            if not stripped:
                break
            at = len(text) - len(stripped)
            raise ParseError(f"unexpected character {stripped[0]!r}", at, expected=("number", "identifier", "operator"))
        if m.group("num") is not None:
            tokens.append(("num", m.group("num"), m.start("num")))
        elif m.group("ident") is not None:
            tokens.append(("ident", m.group("ident"), m.start("ident")))
        else:
            tokens.append(("op", m.group("op"), m.start("op")))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def advance(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect_op(self, op: str):
        kind, val, pos = self.peek()
        if kind != "op" or val != op:
            raise ParseError(f"expected {op!r}, found {val or 'end of input'!r}", pos, expected=(op,))
        return self.advance()

    def parse(self):
        node = self.expr()
        kind, val, pos = self.peek()
        if kind != "end":
            raise ParseError(f"unexpected trailing input {val!r}", pos, expected=("end of input",))
        return node

    def expr(self):
        node = self.term()
        while True:
            kind, val, _ = self.peek()
            if kind == "op" and val in "+-":
                self.advance()
                node = Bin(val, node, self.term())
            else:
                return node

    def term(self):
        node = self.factor()
        while True:
            kind, val, _ = self.peek()
            if kind == "op" and val in "*/":
                self.advance()
                node = Bin(val, node, self.factor())
            else:
                return node

    def factor(self):
        node = self.unary()
        kind, val, _ = self.peek()
        if kind == "op" and val == "^":
            self.advance()
            node = Bin("^", node, self.factor())  # right-associative
        return node

    def unary(self):
        kind, val, _ = self.peek()
        if kind == "op" and val == "-":
            self.advance()
            return Neg(self.unary())
        return self.atom()

    def atom(self):
        kind, val, pos = self.advance()
        if kind == "num":
            return Num(float(val))
        if kind == "ident":
            k2, v2, _ = self.peek()
            if k2 == "op" and v2 == "(":
                if val not in FUNCTIONS:
                    raise ParseError(f"unknown function {val!r}", pos, expected=tuple(sorted(FUNCTIONS)))
                self.advance()
                arg = self.expr()
                self.expect_op(")")
                return Call(val, arg)
            return Var(val)
        if kind == "op" and val == "(":
            node = self.expr()
            self.expect_op(")")
            return node
        raise ParseError(
            f"expected a value, found {val or 'end of input'!r}",
            pos,
            expected=("number", "identifier", "'('", "'-'"),
        )


def parse_expression(text: str):
    """Parse the DSL text into an expression tree."""
    return _Parser(text).parse()


def _check_finite(value, what: str):
    if np.any(~np.isfinite(np.asarray(value))):
        raise EvalError(f"{what} produced a non-finite value")
    return value


def eval_expression(expr, t, x) -> np.ndarray:
    """Evaluate at time(s) t and state(s) x (shape (..., n)).

    Scalars broadcast; a batched x yields a batched result.
    """
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)

    def ev(node):
        if isinstance(node, Num):
            return np.asarray(node.value)
        if isinstance(node, Var):
            if node.name == "t":
                return t
            m = re.fullmatch(r"x(\d+)", node.name)
            if m:
                i = int(m.group(1))
                if x.ndim == 0 or not 1 <= i <= x.shape[-1]:
                    raise EvalError(f"unbound variable {node.name!r} (state has {x.shape[-1] if x.ndim else 0} components)")
                return x[..., i - 1]
            raise EvalError(f"unbound variable {node.name!r}")
        if isinstance(node, Neg):
            return -ev(node.arg)
        if isinstance(node, Call):
            a = ev(node.arg)
            if node.fn == "log" and np.any(a <= 0):
                raise EvalError("log of a non-positive value")
            if node.fn == "sqrt" and np.any(a < 0):
                raise EvalError("sqrt of a negative value")
            return _check_finite(FUNCTIONS[node.fn](a), f"{node.fn}()")
        if isinstance(node, Bin):
            a = ev(node.left)
            b = ev(node.right)
            if node.op == "+":
                return _check_finite(a + b, "'+'")
            if node.op == "-":
                return _check_finite(a - b, "'-'")
            if node.op == "*":
                return _check_finite(a * b, "'*'")
            if node.op == "/":
                if np.any(b == 0):
                    raise EvalError("division by zero")
                return _check_finite(a / b, "'/'")
            if node.op == "^":
                bb = np.asarray(b)
                if np.any((np.asarray(a) < 0) & (bb != np.round(bb))):
                    raise EvalError("fractional power of a negative base")
                return _check_finite(np.power(a, b), "'^'")
        raise EvalError(f"cannot evaluate node {node!r}")

    return np.asarray(ev(expr), dtype=float)


_PRECEDENCE = {"+": 1, "-": 1, "*": 2, "/": 2, "^": 3}


def pretty(expr) -> str:
    """Render the tree back to DSL text; a fixed point of parse o pretty."""

    def render(node, parent_prec: int) -> str:
        if isinstance(node, Num):
            v = node.value
            s = repr(int(v)) if float(v).is_integer() and abs(v) < 1e16 else repr(v)
            return s
        if isinstance(node, Var):
            return node.name
        if isinstance(node, Call):
            return f"{node.fn}({render(node.arg, 0)})"
        if isinstance(node, Neg):
            s = f"-{render(node.arg, 4)}"
            return f"({s})" if parent_prec >= 3 else s
        if isinstance(node, Bin):
            prec = _PRECEDENCE[node.op]
            if node.op == "^":
                # right-associative: parenthesize an equal-precedence left child
                left = render(node.left, prec + 1)
                right = render(node.right, prec)
            else:
                # left-associative: parenthesize an equal-precedence right child
                left = render(node.left, prec)
                right = render(node.right, prec + 1)
            s = f"{left}{node.op}{right}"
            return f"({s})" if prec < parent_prec else s
        raise ValueError(f"unknown node {node!r}")

    return render(expr, 0)
