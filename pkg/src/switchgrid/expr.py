"""Scalar coefficient expressions.

Grammar (EBNF)::

    expr    = term { ("+" | "-") term } ;
    term    = unary { ("*" | "/") unary } ;
    unary   = "-" unary | power ;
    power   = atom [ "^" unary ] ;              (* right-associative *)
    atom    = number | name | call | "(" expr ")" ;
    call    = func "(" expr { "," expr } ")" ;
    name    = "t" | "x1" | ... | "xk" ;
    func    = "exp" | "log" | "sqrt" | "abs" | "sin" | "cos" | "tanh"
            | "min" | "max" ;                   (* min/max take two args *)
    number  = digits [ "." digits ] [ ("e" | "E") [ "+" | "-" ] digits ] ;

Evaluation follows IEEE-754 double semantics through numpy, so it works on
scalars and on arrays of node coordinates alike.  NaN and inf propagate.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

__all__ = [
    "Expr",
    "Num",
    "Var",
    "Neg",
    "BinOp",
    "Call",
    "ExprError",
    "parse",
    "evaluate",
    "free_vars",
    "to_text",
    "FUNCTIONS",
]


class ExprError(ValueError):
    """Parse failure; ``offset`` is the byte offset into the source text."""

    def __init__(self, kind: str, message: str, offset: int):
        super().__init__(f"{kind}: {message} (at offset {offset})")
        self.kind = kind
        self.offset = offset


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    operand: "Expr"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple


Expr = Union[Num, Var, Neg, BinOp, Call]

FUNCTIONS = {
    "exp": (1, np.exp),
    "log": (1, np.log),
    "sqrt": (1, np.sqrt),
    "abs": (1, np.abs),
    "sin": (1, np.sin),
    "cos": (1, np.cos),
    "tanh": (1, np.tanh),
    "min": (2, np.minimum),
    "max": (2, np.maximum),
}

_BINARY = {
    "+": np.add,
    "-": np.subtract,
    "*": np.multiply,
    "/": np.divide,
    "^": np.power,
}

_TOKEN = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>[-+*/^(),])
    """,
    re.VERBOSE,
)


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise ExprError("syntax error", f"unexpected character {text[pos]!r}", pos)
        kind = m.lastgroup
        if kind != "ws":
            tokens.append((kind, m.group(), pos))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str, k: int):
        self.tokens = _tokenize(text)
        self.pos = 0
        self.k = k

    def peek(self):
        return self.tokens[self.pos]

    def take(self):
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, value: str):
        kind, text, off = self.take()
        if text != value or kind != "op":
            found = text or "end of input"
            raise ExprError("syntax error", f"expected {value!r}, found {found!r}", off)

    def parse_expr(self) -> Expr:
        node = self.parse_term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            node = BinOp(op, node, self.parse_term())
        return node

    def parse_term(self) -> Expr:
        node = self.parse_unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            node = BinOp(op, node, self.parse_unary())
        return node

    def parse_unary(self) -> Expr:
        if self.peek()[:2] == ("op", "-"):
            self.take()
            return Neg(self.parse_unary())
        return self.parse_power()

    def parse_power(self) -> Expr:
        base = self.parse_atom()
        if self.peek()[:2] == ("op", "^"):
            self.take()
            return BinOp("^", base, self.parse_unary())
        return base

    def parse_atom(self) -> Expr:
        kind, text, off = self.take()
        if kind == "num":
            return Num(float(text))
        if kind == "name":
            if self.peek()[:2] == ("op", "("):
                return self.parse_call(text, off)
            return self.make_var(text, off)
        if (kind, text) == ("op", "("):
            node = self.parse_expr()
            self.expect(")")
            return node
        found = text or "end of input"
        raise ExprError("syntax error", f"unexpected {found!r}", off)

    def parse_call(self, name: str, off: int) -> Expr:
        if name not in FUNCTIONS:
            raise ExprError("unknown identifier", f"no function named {name!r}", off)
        self.expect("(")
        args = [self.parse_expr()]
        while self.peek()[:2] == ("op", ","):
            self.take()
            args.append(self.parse_expr())
        self.expect(")")
        arity = FUNCTIONS[name][0]
        if len(args) != arity:
            raise ExprError(
                "arity mismatch", f"{name} takes {arity} argument(s), got {len(args)}", off
            )
        return Call(name, tuple(args))

    def make_var(self, name: str, off: int) -> Var:
        if name == "t":
            return Var(name)
        m = re.fullmatch(r"x([1-9]\d*)", name)
        if m and int(m.group(1)) <= self.k:
            return Var(name)
        raise ExprError("unknown identifier", f"{name!r} (state dimension is {self.k})", off)


def parse(text: str, k: int) -> Expr:
    """Parse ``text`` into an expression tree over ``t`` and ``x1..xk``."""
    if not text or not text.strip():
        raise ExprError("syntax error", "empty expression", 0)
    p = _Parser(text, k)
    node = p.parse_expr()
    kind, tok, off = p.peek()
    if kind != "end":
        raise ExprError("syntax error", f"unexpected trailing {tok!r}", off)
    return node


def evaluate(e: Expr, t, x: Sequence):
    """Evaluate ``e`` at time ``t`` and state ``x`` (``x[j-1]`` is ``xj``).

    Components of ``x`` may be numpy arrays; the result then broadcasts.
    Scalar inputs give a numpy float64.
    """
    with np.errstate(all="ignore"):
        return _eval(e, np.float64(t) if np.isscalar(t) else t, x)


def _eval(e: Expr, t, x):
    if isinstance(e, Num):
        return np.float64(e.value)
    if isinstance(e, Var):
        if e.name == "t":
            return t
        return np.asarray(x[int(e.name[1:]) - 1], dtype=np.float64)[()]
    if isinstance(e, Neg):
        return np.negative(_eval(e.operand, t, x))
    if isinstance(e, BinOp):
        return _BINARY[e.op](_eval(e.left, t, x), _eval(e.right, t, x))
    if isinstance(e, Call):
        return FUNCTIONS[e.func][1](*(_eval(a, t, x) for a in e.args))
    raise TypeError(f"not an expression node: {e!r}")


def free_vars(e: Expr) -> frozenset[str]:
    if isinstance(e, Num):
        return frozenset()
    if isinstance(e, Var):
        return frozenset([e.name])
    if isinstance(e, Neg):
        return free_vars(e.operand)
    if isinstance(e, BinOp):
        return free_vars(e.left) | free_vars(e.right)
    return frozenset().union(*(free_vars(a) for a in e.args))


_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "neg": 3, "^": 4}


def _prec(e: Expr) -> int:
    if isinstance(e, BinOp):
        return _PREC[e.op]
    if isinstance(e, Neg):
        return _PREC["neg"]
    return 5


def to_text(e: Expr) -> str:
    """Render with the minimum parentheses needed to reparse to the same tree."""
    if isinstance(e, Num):
        return repr(e.value)
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Call):
        return f"{e.func}({', '.join(to_text(a) for a in e.args)})"
    if isinstance(e, Neg):
        inner = to_text(e.operand)
        # operand of unary minus binds at least as tight as "neg" itself
        return f"-{inner}" if _prec(e.operand) >= _PREC["neg"] else f"-({inner})"
    p = _PREC[e.op]
    left, right = to_text(e.left), to_text(e.right)
    if e.op == "^":
        # left operand must be an atom; right side re-enters at unary level
        if _prec(e.left) <= p:
            left = f"({left})"
        if _prec(e.right) < _PREC["neg"]:
            right = f"({right})"
    else:
        if _prec(e.left) < p:
            left = f"({left})"
        if _prec(e.right) <= p:
            right = f"({right})"
    return f"{left} {e.op} {right}"
