"""Small expression language for chart functions.

Grammar (recursive descent)::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := ('+' | '-') unary | power
    power  := atom ('^' unary)?
    atom   := number | var | func '(' expr (',' expr)* ')' | '(' expr ')'

Variables are ``y1 .. y{k}``.  Functions: abs, sqrt, sin, cos (one argument)
and min, max (two arguments).  Expressions are differentiated symbolically so
that charts given as text have exact gradients and Hessians.
"""
from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

UNARY_FUNCS = ("abs", "sqrt", "sin", "cos")
BINARY_FUNCS = ("min", "max")


class ExpressionError(ValueError):
    """Syntax or semantic error, carrying a 1-based line and column."""

    def __init__(self, message: str, line: int = 1, column: int = 1):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


# --- AST ---------------------------------------------------------------------

class Node:
    def eval(self, Y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def diff(self, k: int) -> "Node":
        raise NotImplementedError


@dataclass(frozen=True)
class Const(Node):
    value: float

    def eval(self, Y):
        return np.full(Y.shape[0], self.value)

    def diff(self, k):
        return ZERO


@dataclass(frozen=True)
class Var(Node):
    index: int

    def eval(self, Y):
        return Y[:, self.index].astype(float)

    def diff(self, k):
        return ONE if k == self.index else ZERO


ZERO = Const(0.0)
ONE = Const(1.0)


def _is(node: Node, value: float) -> bool:
    return isinstance(node, Const) and node.value == value


def add(a: Node, b: Node) -> Node:
    if _is(a, 0.0):
        return b
    if _is(b, 0.0):
        return a
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value + b.value)
    return Bin("+", a, b)


def sub(a: Node, b: Node) -> Node:
    if _is(b, 0.0):
        return a
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value - b.value)
    return Bin("-", a, b)


def mul(a: Node, b: Node) -> Node:
    if _is(a, 0.0) or _is(b, 0.0):
        return ZERO
    if _is(a, 1.0):
        return b
    if _is(b, 1.0):
        return a
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value * b.value)
    return Bin("*", a, b)


def div(a: Node, b: Node) -> Node:
    if _is(a, 0.0):
        return ZERO
    if _is(b, 1.0):
        return a
    return Bin("/", a, b)


def neg(a: Node) -> Node:
    if isinstance(a, Const):
        return Const(-a.value)
    return Neg(a)


@dataclass(frozen=True)
class Neg(Node):
    arg: Node

    def eval(self, Y):
        return -self.arg.eval(Y)

    def diff(self, k):
        return neg(self.arg.diff(k))


@dataclass(frozen=True)
class Bin(Node):
    op: str
    left: Node
    right: Node

    def eval(self, Y):
        a = self.left.eval(Y)
        b = self.right.eval(Y)
        if self.op == "+":
            return a + b
        if self.op == "-":
            return a - b
        if self.op == "*":
            return a * b
        if self.op == "/":
            return a / b
        # '^': integer exponents keep negative bases well defined
        return np.power(a, b)

    def diff(self, k):
        a, b = self.left, self.right
        da, db = a.diff(k), b.diff(k)
        if self.op == "+":
            return add(da, db)
        if self.op == "-":
            return sub(da, db)
        if self.op == "*":
            return add(mul(da, b), mul(a, db))
        if self.op == "/":
            return div(sub(mul(da, b), mul(a, db)), mul(b, b))
        if isinstance(b, Const):
            return mul(mul(Const(b.value), Bin("^", a, Const(b.value - 1.0))), da)
        # general power a^b = exp(b log a), only meaningful for a > 0
        return mul(self, add(mul(db, Func("log", a)), div(mul(b, da), a)))


@dataclass(frozen=True)
class Func(Node):
    name: str
    arg: Node

    def eval(self, Y):
        x = self.arg.eval(Y)
        if self.name == "abs":
            return np.abs(x)
        if self.name == "sqrt":
            return np.sqrt(x)
        if self.name == "sin":
            return np.sin(x)
        if self.name == "cos":
            return np.cos(x)
        if self.name == "sign":
            return np.sign(x)
        if self.name == "log":
            return np.log(x)
        raise AssertionError(self.name)

    def diff(self, k):
        da = self.arg.diff(k)
        if _is(da, 0.0):
            return ZERO
        if self.name == "abs":
            return mul(Func("sign", self.arg), da)
        if self.name == "sqrt":
            return div(da, mul(Const(2.0), self))
        if self.name == "sin":
            return mul(Func("cos", self.arg), da)
        if self.name == "cos":
            return neg(mul(Func("sin", self.arg), da))
        if self.name == "sign":
            return ZERO
        if self.name == "log":
            return div(da, self.arg)
        raise AssertionError(self.name)


@dataclass(frozen=True)
class Select(Node):
    """min/max with the derivative taken from the selected branch."""

    name: str
    left: Node
    right: Node

    def _mask(self, Y):
        a = self.left.eval(Y)
        b = self.right.eval(Y)
        return (a <= b) if self.name == "min" else (a >= b)

    def eval(self, Y):
        a = self.left.eval(Y)
        b = self.right.eval(Y)
        return np.minimum(a, b) if self.name == "min" else np.maximum(a, b)

    def diff(self, k):
        return Pick(self, self.left.diff(k), self.right.diff(k))


@dataclass(frozen=True)
class Pick(Node):
    selector: Select
    left: Node
    right: Node

    def eval(self, Y):
        mask = self.selector._mask(Y)
        return np.where(mask, self.left.eval(Y), self.right.eval(Y))

    def diff(self, k):
        return Pick(self.selector, self.left.diff(k), self.right.diff(k))


# --- tokenizer and parser ----------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:(?P<num>\d+\.?\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/^(),]))"
)


@dataclass
class Token:
    kind: str
    text: str
    pos: int


def tokenize(text: str, line: int = 1, col0: int = 1) -> list[Token]:
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        mt = _TOKEN.match(text, pos)
        if mt is None or mt.end() == pos:
            j = pos
            while j < len(text) and text[j].isspace():
                j += 1
            raise ExpressionError(f"unexpected character {text[j]!r}", line, col0 + j)
        kind = mt.lastgroup
        tokens.append(Token(kind, mt.group(kind), mt.start(kind)))
        pos = mt.end()
    tokens.append(Token("end", "", len(text)))
    return tokens


class Parser:
    def __init__(self, text: str, nvars: int, line: int = 1, col0: int = 1):
        self.text = text
        self.nvars = nvars
        self.line = line
        self.col0 = col0
        self.tokens = tokenize(text, line, col0)
        self.i = 0

    def error(self, msg: str, tok: Token | None = None):
        tok = tok or self.peek()
        raise ExpressionError(msg, self.line, self.col0 + tok.pos)

    def peek(self) -> Token:
        return self.tokens[self.i]

    def take(self) -> Token:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, text: str) -> Token:
        tok = self.peek()
        if tok.text != text:
            self.error(f"expected {text!r}, found {tok.text or 'end of input'!r}")
        return self.take()

    def parse(self) -> Node:
        node = self.expr()
        if self.peek().kind != "end":
            self.error(f"unexpected token {self.peek().text!r}")
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.peek().text in ("+", "-"):
            op = self.take().text
            rhs = self.term()
            node = add(node, rhs) if op == "+" else sub(node, rhs)
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.peek().text in ("*", "/"):
            op = self.take().text
            rhs = self.unary()
            node = mul(node, rhs) if op == "*" else div(node, rhs)
        return node

    def unary(self) -> Node:
        if self.peek().text == "-":
            self.take()
            return neg(self.unary())
        if self.peek().text == "+":
            self.take()
            return self.unary()
        return self.power()

    def power(self) -> Node:
        base = self.atom()
        if self.peek().text == "^":
            self.take()
            exponent = self.unary()
            if isinstance(base, Const) and isinstance(exponent, Const):
                return Const(base.value ** exponent.value)
            return Bin("^", base, exponent)
        return base

    def atom(self) -> Node:
        tok = self.peek()
        if tok.kind == "num":
            self.take()
            return Const(float(tok.text))
        if tok.kind == "name":
            self.take()
            name = tok.text
            if name in UNARY_FUNCS or name in BINARY_FUNCS:
                self.expect("(")
                args = [self.expr()]
                while self.peek().text == ",":
                    self.take()
                    args.append(self.expr())
                self.expect(")")
                want = 1 if name in UNARY_FUNCS else 2
                if len(args) != want:
                    self.error(f"{name} takes {want} argument(s), got {len(args)}", tok)
                if want == 1:
                    return Func(name, args[0])
                return Select(name, args[0], args[1])
            mt = re.fullmatch(r"y([1-9][0-9]*)", name)
            if mt is None:
                self.error(f"unknown identifier {name!r}", tok)
            k = int(mt.group(1))
            if k > self.nvars:
                self.error(f"variable {name} out of range (only y1..y{self.nvars})", tok)
            return Var(k - 1)
        if tok.text == "(":
            self.take()
            node = self.expr()
            self.expect(")")
            return node
        self.error(f"unexpected {tok.text or 'end of input'!r}")


class Expression:
    """Parsed scalar expression in k variables with symbolic derivatives."""

    def __init__(self, text: str, nvars: int, line: int = 1, col0: int = 1):
        self.text = text
        self.nvars = nvars
        self.root = Parser(text, nvars, line, col0).parse()
        self._grad = [self.root.diff(k) for k in range(nvars)]
        self._hess = [[g.diff(l) for l in range(nvars)] for g in self._grad]

    def __call__(self, Y: np.ndarray) -> np.ndarray:
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        return self.root.eval(Y)

    def gradient(self, Y: np.ndarray) -> np.ndarray:
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        return np.stack([g.eval(Y) for g in self._grad], axis=-1)

    def hessian(self, Y: np.ndarray) -> np.ndarray:
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        rows = [np.stack([h.eval(Y) for h in row], axis=-1) for row in self._hess]
        return np.stack(rows, axis=-2)
