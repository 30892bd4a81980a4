"""Tiny arithmetic grammar for config expressions.

Grammar::

    expr  := term (('+' | '-') term)*
    term  := unary (('*' | '/') unary)*
    unary := ('+' | '-') unary | power
    power := atom ('^' unary)?
    atom  := NUMBER | NAME | FUNC '(' expr ')' | '(' expr ')'

Names are coordinates (``x``, ``y``), unknowns (``u_1`` .. ``u_m``), momenta
(``p``, ``p_1``, ``p_2``) and the constant ``pi`` (or ``π``).  Functions are
``sin cos tanh exp sqrt``.  Expressions evaluate elementwise on numpy arrays
and differentiate symbolically.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Mapping, Union

import numpy as np

FUNCTIONS = {
    "sin": np.sin,
    "cos": np.cos,
    "tanh": np.tanh,
    "exp": np.exp,
    "sqrt": np.sqrt,
}

_TOKEN = re.compile(
    r"\s*(?:(?P<num>\d+\.?\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_π][A-Za-z_0-9]*|π)|(?P<op>[-+*/^()]))"
)


class ExpressionError(ValueError):
    pass


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Call:
    func: str
    arg: "Node"


@dataclass(frozen=True)
class Neg:
    arg: "Node"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Node"
    right: "Node"


Node = Union[Num, Var, Call, Neg, BinOp]


def _tokenize(text: str) -> list[tuple[str, str]]:
    tokens = []
    pos = 0
    text = text.strip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            raise ExpressionError(f"unexpected character {text[pos]!r} at {pos} in {text!r}")
        kind = m.lastgroup
        tokens.append((kind, m.group(kind)))
        pos = m.end()
        while pos < len(text) and text[pos].isspace():
            pos += 1
    return tokens


class _Parser:
    def __init__(self, text: str, names: frozenset[str] | None):
        self.text = text
        self.tokens = _tokenize(text)
        self.pos = 0
        self.names = names

    def peek(self) -> tuple[str, str] | None:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def take(self, value: str | None = None) -> tuple[str, str]:
        tok = self.peek()
        if tok is None:
            raise ExpressionError(f"unexpected end of expression {self.text!r}")
        if value is not None and tok[1] != value:
            raise ExpressionError(f"expected {value!r}, got {tok[1]!r} in {self.text!r}")
        self.pos += 1
        return tok

    def parse(self) -> Node:
        node = self.expr()
        if self.peek() is not None:
            raise ExpressionError(f"trailing input {self.peek()[1]!r} in {self.text!r}")
        return node

    def expr(self) -> Node:
        node = self.term()
        while (tok := self.peek()) is not None and tok[1] in "+-" and tok[0] == "op":
            self.take()
            node = BinOp(tok[1], node, self.term())
        return node

    def term(self) -> Node:
        node = self.unary()
        while (tok := self.peek()) is not None and tok[1] in "*/" and tok[0] == "op":
            self.take()
            node = BinOp(tok[1], node, self.unary())
        return node

    def unary(self) -> Node:
        tok = self.peek()
        if tok is not None and tok[0] == "op" and tok[1] in "+-":
            self.take()
            arg = self.unary()
            if tok[1] == "+":
                return arg
            return Num(-arg.value) if isinstance(arg, Num) else Neg(arg)
        return self.power()

    def power(self) -> Node:
        base = self.atom()
        tok = self.peek()
        if tok is not None and tok[1] == "^":
            self.take()
            return BinOp("^", base, self.unary())
        return base

    def atom(self) -> Node:
        kind, value = self.take()
        if kind == "num":
            return Num(float(value))
        if kind == "name":
            if value in FUNCTIONS:
                self.take("(")
                arg = self.expr()
                self.take(")")
                return Call(value, arg)
            if value in ("pi", "π"):
                return Num(math.pi)
            if self.names is not None and value not in self.names:
                raise ExpressionError(f"unknown name {value!r} in {self.text!r}")
            return Var(value)
        if value == "(":
            node = self.expr()
            self.take(")")
            return node
        raise ExpressionError(f"unexpected {value!r} in {self.text!r}")


def parse(text: str, names: frozenset[str] | set[str] | None = None) -> Node:
    """Parse ``text``; if ``names`` is given, any other variable is an error."""
    return _Parser(text, frozenset(names) if names is not None else None).parse()


def variables(node: Node) -> set[str]:
    if isinstance(node, Var):
        return {node.name}
    if isinstance(node, Num):
        return set()
    if isinstance(node, (Neg, Call)):
        return variables(node.arg)
    return variables(node.left) | variables(node.right)


def evaluate(node: Node, env: Mapping[str, np.ndarray | float]):
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        try:
            return env[node.name]
        except KeyError:
            raise ExpressionError(f"no value bound for {node.name!r}") from None
    if isinstance(node, Neg):
        return -evaluate(node.arg, env)
    if isinstance(node, Call):
        return FUNCTIONS[node.func](evaluate(node.arg, env))
    left = evaluate(node.left, env)
    right = evaluate(node.right, env)
    if node.op == "+":
        return left + right
    if node.op == "-":
        return left - right
    if node.op == "*":
        return left * right
    if node.op == "/":
        return left / right
    return left**right


def _simplify(node: Node) -> Node:
    if isinstance(node, Neg) and isinstance(node.arg, Num):
        return Num(-node.arg.value)
    if not isinstance(node, BinOp):
        return node
    l, r = node.left, node.right
    lz = isinstance(l, Num) and l.value == 0.0
    rz = isinstance(r, Num) and r.value == 0.0
    lo = isinstance(l, Num) and l.value == 1.0
    ro = isinstance(r, Num) and r.value == 1.0
    if node.op == "+":
        if lz:
            return r
        if rz:
            return l
    elif node.op == "-":
        if rz:
            return l
        if lz:
            return _simplify(Neg(r))
    elif node.op == "*":
        if lz or rz:
            return Num(0.0)
        if lo:
            return r
        if ro:
            return l
    elif node.op == "/":
        if lz:
            return Num(0.0)
        if ro:
            return l
    if isinstance(l, Num) and isinstance(r, Num):
        return Num(float(evaluate(node, {})))
    return node


def diff(node: Node, var: str) -> Node:
    """Symbolic partial derivative of ``node`` with respect to ``var``."""
    if isinstance(node, Num):
        return Num(0.0)
    if isinstance(node, Var):
        return Num(1.0 if node.name == var else 0.0)
    if isinstance(node, Neg):
        return _simplify(Neg(diff(node.arg, var)))
    if isinstance(node, Call):
        inner = diff(node.arg, var)
        if isinstance(inner, Num) and inner.value == 0.0:
            return Num(0.0)
        a = node.arg
        if node.func == "sin":
            outer: Node = Call("cos", a)
        elif node.func == "cos":
            outer = Neg(Call("sin", a))
        elif node.func == "tanh":
            outer = BinOp("-", Num(1.0), BinOp("^", Call("tanh", a), Num(2.0)))
        elif node.func == "exp":
            outer = Call("exp", a)
        else:
            outer = BinOp("/", Num(0.5), Call("sqrt", a))
        return _simplify(BinOp("*", outer, inner))
    l, r = node.left, node.right
    dl, dr = diff(l, var), diff(r, var)
    if node.op in "+-":
        return _simplify(BinOp(node.op, dl, dr))
    if node.op == "*":
        return _simplify(BinOp("+", _simplify(BinOp("*", dl, r)), _simplify(BinOp("*", l, dr))))
    if node.op == "/":
        num = _simplify(BinOp("-", _simplify(BinOp("*", dl, r)), _simplify(BinOp("*", l, dr))))
        return _simplify(BinOp("/", num, BinOp("^", r, Num(2.0))))
    # power
    if not (var in variables(r)):
        if isinstance(dl, Num) and dl.value == 0.0:
            return Num(0.0)
        expo = _simplify(BinOp("-", r, Num(1.0)))
        return _simplify(BinOp("*", _simplify(BinOp("*", r, BinOp("^", l, expo))), dl))
    raise ExpressionError("derivative of a variable exponent is not supported")


_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "^": 4}


def unparse(node: Node) -> str:
    """Canonical source text; ``parse(unparse(n)) == n`` for parsed trees."""
    return _unparse(node, 0)


def _num(value: float) -> str:
    if value == math.pi:
        return "pi"
    text = repr(float(value))
    return text[:-2] if text.endswith(".0") else text


def _unparse(node: Node, parent: int) -> str:
    if isinstance(node, Num):
        text = _num(node.value)
        # sign bit, so -0.0 is wrapped too
        return f"({text})" if math.copysign(1.0, node.value) < 0 else text
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Call):
        return f"{node.func}({_unparse(node.arg, 0)})"
    if isinstance(node, Neg):
        text = "-" + _unparse(node.arg, 3)
        return f"({text})" if parent >= 3 else text
    prec = _PREC[node.op]
    if node.op == "^":
        text = f"{_unparse(node.left, 5)}^{_unparse(node.right, 3)}"
    else:
        # left-associative: right operand needs parens at equal precedence
        text = f"{_unparse(node.left, prec)} {node.op} {_unparse(node.right, prec + 1)}"
    return f"({text})" if prec < parent else text


class Expression:
    """A parsed expression bound to its source text."""

    def __init__(self, source: str, names: set[str] | frozenset[str] | None = None):
        self.tree = parse(source, names)
        self.source = unparse(self.tree)

    @classmethod
    def from_tree(cls, tree: Node) -> "Expression":
        obj = cls.__new__(cls)
        obj.tree = tree
        obj.source = unparse(tree)
        return obj

    def __call__(self, **env):
        return evaluate(self.tree, env)

    def diff(self, var: str) -> "Expression":
        return Expression.from_tree(diff(self.tree, var))

    @property
    def names(self) -> set[str]:
        return variables(self.tree)

    def __eq__(self, other) -> bool:
        return isinstance(other, Expression) and self.tree == other.tree

    def __hash__(self) -> int:
        return hash(self.tree)

    def __repr__(self) -> str:
        return f"Expression({self.source!r})"
