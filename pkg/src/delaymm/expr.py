"""Arithmetic expressions for rate functions and initial data.

Grammar, loosest binding first::

    expr    := term (('+' | '-') term)*
    term    := unary (('*' | '/') unary)*
    unary   := '-' unary | power
    power   := atom ('^' unary)?          # right associative
    atom    := number | name | name '(' expr (',' expr)* ')' | '(' expr ')'

Variables are ``x``, ``a`` and ``t``; ``pi`` is the only named constant.
Evaluation is vectorised over numpy arrays and broadcasts only over the
variables an expression actually uses, so a constant expression evaluates
to a 0-d value whatever the sampling grid.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Union

import numpy as np

VARIABLES = ("x", "a", "t")
CONSTANTS = {"pi": math.pi}
FUNCTIONS = {
    "sin": (1, 1),
    "cos": (1, 1),
    "exp": (1, 1),
    "sqrt": (1, 1),
    "abs": (1, 1),
    "min": (2, None),
    "max": (2, None),
}


class ExprError(ValueError):
    pass


class ExprSyntaxError(ExprError):
    """Malformed source text. ``offset`` is the 1-based column of the error."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class ExprDomainError(ExprError):
    pass


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Const:
    name: str


@dataclass(frozen=True)
class Neg:
    operand: "Node"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple


Node = Union[Num, Var, Const, Neg, BinOp, Call]


@dataclass(frozen=True)
class RateExpr:
    """A parsed expression together with its source text."""

    tree: Node
    source: str

    def __call__(self, x=0.0, a=0.0, t=0.0):
        return eval_expr(self, x, a, t)

    @property
    def variables(self) -> frozenset:
        return _variables(self.tree)

    @property
    def is_constant(self) -> bool:
        return not self.variables

    def node_count(self) -> int:
        return _count(self.tree)

    def __str__(self) -> str:
        return to_source(self)


_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^(),]))"
)


def _tokenize(src: str):
    pos = 0
    tokens = []
    n = len(src)
    while pos < n:
        if src[pos:].strip() == "":
            break
        m = _TOKEN.match(src, pos)
        if m is None or m.end() == pos:
            # skip leading whitespace for an accurate column
            while pos < n and src[pos].isspace():
                pos += 1
            raise ExprSyntaxError(f"unexpected character {src[pos]!r}", pos + 1)
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), start + 1))
        pos = m.end()
    tokens.append(("end", "", len(src) + 1))
    return tokens


class _Parser:
    def __init__(self, src: str):
        self.tokens = _tokenize(src)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value: str):
        kind, text, off = self.peek()
        if text != value or kind != "op":
            what = "end of input" if kind == "end" else repr(text)
            raise ExprSyntaxError(f"expected {value!r}, found {what}", off)
        self.take()

    def parse(self) -> Node:
        node = self.expr()
        kind, text, off = self.peek()
        if kind != "end":
            raise ExprSyntaxError(f"unexpected token {text!r}", off)
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            node = BinOp(op, node, self.unary())
        return node

    def unary(self) -> Node:
        if self.peek()[0] == "op" and self.peek()[1] == "-":
            self.take()
            return Neg(self.unary())
        return self.power()

    def power(self) -> Node:
        base = self.atom()
        if self.peek()[0] == "op" and self.peek()[1] == "^":
            self.take()
            return BinOp("^", base, self.unary())
        return base

    def atom(self) -> Node:
        kind, text, off = self.take()
        if kind == "num":
            return Num(float(text))
        if kind == "name":
            if self.peek()[0] == "op" and self.peek()[1] == "(":
                if text not in FUNCTIONS:
                    raise ExprError(f"unknown function {text!r} at offset {off}")
                self.take()
                args = [self.expr()]
                while self.peek()[0] == "op" and self.peek()[1] == ",":
                    self.take()
                    args.append(self.expr())
                self.expect(")")
                lo, hi = FUNCTIONS[text]
                if len(args) < lo or (hi is not None and len(args) > hi):
                    want = str(lo) if hi == lo else f"at least {lo}"
                    raise ExprError(
                        f"{text}() takes {want} argument(s), got {len(args)}"
                    )
                return Call(text, tuple(args))
            if text in VARIABLES:
                return Var(text)
            if text in CONSTANTS:
                return Const(text)
            if text in FUNCTIONS:
                raise ExprError(f"function {text!r} used without arguments")
            raise ExprError(f"unknown identifier {text!r} at offset {off}")
        if kind == "op" and text == "(":
            node = self.expr()
            self.expect(")")
            return node
        what = "end of input" if kind == "end" else repr(text)
        raise ExprSyntaxError(f"unexpected {what}", off)


def parse_rate_expression(src: str) -> RateExpr:
    if not src or not src.strip():
        raise ExprSyntaxError("empty expression", 1)
    return RateExpr(_Parser(src).parse(), src.strip())


def _variables(node: Node) -> frozenset:
    if isinstance(node, Var):
        return frozenset([node.name])
    if isinstance(node, Neg):
        return _variables(node.operand)
    if isinstance(node, BinOp):
        return _variables(node.left) | _variables(node.right)
    if isinstance(node, Call):
        out = frozenset()
        for arg in node.args:
            out |= _variables(arg)
        return out
    return frozenset()


def _count(node: Node) -> int:
    if isinstance(node, Neg):
        return 1 + _count(node.operand)
    if isinstance(node, BinOp):
        return 1 + _count(node.left) + _count(node.right)
    if isinstance(node, Call):
        return 1 + sum(_count(arg) for arg in node.args)
    return 1


def to_source(e: RateExpr | Node) -> str:
    """Fully parenthesised source text; reparsing gives the same tree."""
    node = e.tree if isinstance(e, RateExpr) else e
    if isinstance(node, Num):
        return repr(node.value)
    if isinstance(node, (Var, Const)):
        return node.name
    if isinstance(node, Neg):
        return f"(-{to_source(node.operand)})"
    if isinstance(node, BinOp):
        return f"({to_source(node.left)}{node.op}{to_source(node.right)})"
    args = ", ".join(to_source(arg) for arg in node.args)
    return f"{node.func}({args})"


def _domain_error(msg, mask, env):
    mask = np.asarray(mask)
    shape = np.broadcast_shapes(mask.shape, *(v.shape for v in env.values()))
    idx = tuple(np.argwhere(np.broadcast_to(mask, shape))[0])
    where = ", ".join(
        f"{name}={float(np.broadcast_to(val, shape)[idx]):.17g}"
        for name, val in env.items()
    )
    raise ExprDomainError(f"{msg} at {where}")


def _eval(node: Node, env):
    if isinstance(node, Num):
        return np.float64(node.value)
    if isinstance(node, Var):
        return env[node.name]
    if isinstance(node, Const):
        return np.float64(CONSTANTS[node.name])
    if isinstance(node, Neg):
        return -_eval(node.operand, env)
    if isinstance(node, BinOp):
        left = _eval(node.left, env)
        right = _eval(node.right, env)
        if node.op == "+":
            return left + right
        if node.op == "-":
            return left - right
        if node.op == "*":
            return left * right
        if node.op == "/":
            bad = np.asarray(right) == 0.0
            if np.any(bad):
                _domain_error("division by zero", np.broadcast_to(bad, np.broadcast(left, right).shape), env)
            return left / right
        # power: negative base needs an integral exponent
        lb, rb = np.broadcast_arrays(np.asarray(left, float), np.asarray(right, float))
        bad = (lb < 0) & (rb != np.round(rb))
        bad |= (lb == 0) & (rb < 0)
        if np.any(bad):
            _domain_error("power of negative or zero base", bad, env)
        with np.errstate(over="ignore"):
            return np.power(left, right)
    args = [_eval(arg, env) for arg in node.args]
    f = node.func
    if f == "sqrt":
        bad = np.asarray(args[0]) < 0
        if np.any(bad):
            _domain_error("sqrt of negative value", bad, env)
        return np.sqrt(args[0])
    if f == "sin":
        return np.sin(args[0])
    if f == "cos":
        return np.cos(args[0])
    if f == "exp":
        with np.errstate(over="ignore"):
            return np.exp(args[0])
    if f == "abs":
        return np.abs(args[0])
    out = args[0]
    red = np.minimum if f == "min" else np.maximum
    for arg in args[1:]:
        out = red(out, arg)
    return out


def eval_expr(e: RateExpr, x=0.0, a=0.0, t=0.0):
    """Evaluate ``e`` at ``(x, a, t)``; array arguments broadcast together.

    Raises ExprDomainError naming the offending variable values when an
    operation leaves its domain or the result is not finite.
    """
    env = {
        "x": np.asarray(x, dtype=float),
        "a": np.asarray(a, dtype=float),
        "t": np.asarray(t, dtype=float),
    }
    with np.errstate(invalid="ignore"):
        val = _eval(e.tree, env)
    val = np.asarray(val, dtype=float)
    if not np.all(np.isfinite(val)):
        _domain_error("non-finite value", ~np.isfinite(val), env)
    return val if val.ndim else float(val)
