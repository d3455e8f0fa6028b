"""Expression language for contact Hamiltonians ``H(t, q, p, z)``.

Expressions are parsed into a small immutable tree and compiled to a
vectorised forward-mode evaluator that returns the value together with the
exact first partials with respect to the state coordinates ``(q, p, z)``.

Grammar (whitespace is insignificant)::

    expr   = term { ("+" | "-") term } ;
    term   = unary { ("*" | "/") unary } ;
    unary  = ("-" | "+") unary | power ;
    power  = atom [ "^" unary ] ;                (* right associative *)
    atom   = number | variable | "pi"
           | func "(" expr ")"
           | "cutoff" "(" number "," number ")"
           | "(" expr ")" ;
    variable = "t" | "z" | "q" digits | "p" digits ;
    func   = "sin" | "cos" | "exp" | "log" | "tanh" | "sqrt" | "sabs" ;

``sabs(x) = sqrt(x^2 + 1e-6)`` is a smooth stand-in for ``|x|``.
``cutoff(R0, w)`` is the radial bump produced by :func:`compactify`; it is
accepted by the parser so that compactified expressions round-trip.

State arrays use the column layout ``[q1..qn, p1..pn, z]``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from .contact import ContactPoint

SABS_EPS = 1e-3

FUNCTIONS = ("sin", "cos", "exp", "log", "tanh", "sqrt", "sabs")


class ExpressionError(ValueError):
    """Base class for parse-time errors; ``offset`` is a byte offset into the source."""

    def __init__(self, message: str, offset: int = -1):
        self.offset = offset
        if offset >= 0:
            message = f"{message} (at offset {offset})"
        super().__init__(message)


class ParseError(ExpressionError):
    pass


class ArityError(ExpressionError):
    pass


class IndexOutOfRangeError(ExpressionError):
    pass


class DomainError(ArithmeticError):
    """Raised during evaluation when a sub-expression leaves its domain."""

    def __init__(self, message: str, offset: int, snippet: str):
        self.offset = offset
        self.snippet = snippet
        super().__init__(f"{message} in '{snippet}' (at offset {offset})")


# ---------------------------------------------------------------------------
# Syntax tree


@dataclass(frozen=True)
class Const:
    value: float
    pos: int = 0

    def to_source(self) -> str:
        text = repr(float(self.value))
        return f"({text})" if self.value < 0 or text.startswith("-") else text


@dataclass(frozen=True)
class Var:
    name: str
    column: int  # -1 for time
    pos: int = 0

    def to_source(self) -> str:
        return self.name


@dataclass(frozen=True)
class Neg:
    arg: "Node"
    pos: int = 0

    def to_source(self) -> str:
        return f"(-{self.arg.to_source()})"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Node"
    right: "Node"
    pos: int = 0

    def to_source(self) -> str:
        return f"({self.left.to_source()} {self.op} {self.right.to_source()})"


@dataclass(frozen=True)
class Call:
    func: str
    arg: "Node"
    pos: int = 0

    def to_source(self) -> str:
        return f"{self.func}({self.arg.to_source()})"


@dataclass(frozen=True)
class Cutoff:
    """Smooth radial plateau: 1 for ``|y| <= r0``, 0 for ``|y| >= r0 + width``."""

    r0: float
    width: float
    pos: int = 0

    def to_source(self) -> str:
        return f"cutoff({float(self.r0)!r}, {float(self.width)!r})"


Node = Union[Const, Var, Neg, BinOp, Call, Cutoff]


def _children(node):
    if isinstance(node, Neg):
        return (node.arg,)
    if isinstance(node, BinOp):
        return (node.left, node.right)
    if isinstance(node, Call):
        return (node.arg,)
    return ()


def _walk(node):
    yield node
    for child in _children(node):
        yield from _walk(child)


# ---------------------------------------------------------------------------
# Tokenizer / parser

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^(),]))"
)


def _tokenize(src: str):
    tokens = []
    pos = 0
    while pos < len(src):
        if src[pos:].strip() == "":
            break
        m = _TOKEN.match(src, pos)
        if m is None or m.end() == pos:
            bad = pos + (len(src[pos:]) - len(src[pos:].lstrip()))
            raise ParseError(f"unexpected character {src[bad]!r}", bad)
        kind = m.lastgroup
        text = m.group(kind)
        tokens.append((kind, text, m.start(kind)))
        pos = m.end()
    tokens.append(("end", "", len(src)))
    return tokens


class _Parser:
    def __init__(self, src: str, dim: int):
        self.src = src
        self.dim = dim
        self.tokens = _tokenize(src)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, text: str):
        kind, value, pos = self.take()
        if value != text or kind == "end":
            found = "end of input" if kind == "end" else repr(value)
            raise ParseError(f"expected {text!r}, found {found}", pos)

    def parse(self) -> Node:
        node = self.expr()
        kind, value, pos = self.peek()
        if kind != "end":
            raise ParseError(f"unexpected token {value!r}", pos)
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            _, op, pos = self.take()
            node = _fold(BinOp(op, node, self.term(), pos))
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            _, op, pos = self.take()
            node = _fold(BinOp(op, node, self.unary(), pos))
        return node

    def unary(self) -> Node:
        kind, value, pos = self.peek()
        if kind == "op" and value in ("-", "+"):
            self.take()
            arg = self.unary()
            return arg if value == "+" else _fold(Neg(arg, pos))
        return self.power()

    def power(self) -> Node:
        base = self.atom()
        kind, value, pos = self.peek()
        if kind == "op" and value == "^":
            self.take()
            return _fold(BinOp("^", base, self.unary(), pos))
        return base

    def atom(self) -> Node:
        kind, value, pos = self.take()
        if kind == "num":
            return Const(float(value), pos)
        if kind == "op" and value == "(":
            node = self.expr()
            self.expect(")")
            return node
        if kind == "name":
            return self.named(value, pos)
        found = "end of input" if kind == "end" else repr(value)
        raise ParseError(f"unexpected {found}", pos)

    def args(self, name: str, pos: int) -> list:
        self.expect("(")
        if self.peek()[1] == ")":
            self.take()
            return []
        out = [self.expr()]
        while self.peek()[1] == ",":
            self.take()
            out.append(self.expr())
        self.expect(")")
        return out

    def named(self, name: str, pos: int) -> Node:
        if name in FUNCTIONS or name == "cutoff":
            if self.peek()[1] != "(":
                raise ParseError(f"function {name!r} must be called", pos)
            args = self.args(name, pos)
            if name == "cutoff":
                if len(args) != 2:
                    raise ArityError(f"cutoff takes 2 arguments, got {len(args)}", pos)
                if not all(isinstance(a, Const) for a in args):
                    raise ParseError("cutoff arguments must be numeric constants", pos)
                r0, width = (a.value for a in args)
                if r0 <= 0 or width <= 0:
                    raise ParseError("cutoff arguments must be positive", pos)
                return Cutoff(r0, width, pos)
            if len(args) != 1:
                raise ArityError(f"{name} takes 1 argument, got {len(args)}", pos)
            return _fold(Call(name, args[0], pos))
        if name == "t":
            return Var("t", -1, pos)
        if name == "z":
            return Var("z", 2 * self.dim, pos)
        if name == "pi":
            return Const(math.pi, pos)
        m = re.fullmatch(r"([qp])(\d+)", name)
        if m:
            idx = int(m.group(2))
            if idx < 1 or idx > self.dim:
                raise IndexOutOfRangeError(
                    f"variable {name!r} out of range for dimension {self.dim}", pos
                )
            column = idx - 1 if m.group(1) == "q" else self.dim + idx - 1
            return Var(name, column, pos)
        raise ParseError(f"unknown identifier {name!r}", pos)


def _fold(node: Node) -> Node:
    """Collapse constant sub-trees; leaves anything that would raise untouched."""
    if not isinstance(node, (Neg, BinOp, Call)):
        return node
    if not all(isinstance(c, Const) for c in _children(node)):
        return node
    fn = _compile(node, "")
    try:
        value, _ = fn(np.zeros(1), np.zeros((1, 1)))
    except DomainError:
        return node
    value = float(np.asarray(value).reshape(-1)[0])
    if not math.isfinite(value):
        return node
    return Const(value, node.pos)


# ---------------------------------------------------------------------------
# Forward-mode compilation
#
# A compiled node maps (t, Y) with Y of shape (B, D) to (value, grad) where
# grad has shape (B, D) or is None when the node is constant in the state.

JetFn = Callable[[np.ndarray, np.ndarray], tuple]


def _scale(grad, factor):
    if grad is None:
        return None
    factor = np.asarray(factor)
    if factor.ndim == 0:
        return grad * factor
    return grad * factor[:, None]


def _add(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


def _neg(a):
    return None if a is None else -a


def _snippet(src: str, node: Node) -> str:
    return node.to_source()


def _compile(node: Node, src: str) -> JetFn:
    if isinstance(node, Const):
        value = float(node.value)
        return lambda t, Y: (value, None)

    if isinstance(node, Var):
        if node.column < 0:
            def time_var(t, Y):
                return np.broadcast_to(np.asarray(t, dtype=float), (Y.shape[0],)), None
            return time_var
        col = node.column

        def state_var(t, Y):
            grad = np.zeros_like(Y)
            grad[:, col] = 1.0
            return Y[:, col], grad
        return state_var

    if isinstance(node, Neg):
        inner = _compile(node.arg, src)

        def neg(t, Y):
            v, g = inner(t, Y)
            return -v, _neg(g)
        return neg

    if isinstance(node, Cutoff):
        return _compile_cutoff(node.r0, node.width)

    if isinstance(node, BinOp):
        left = _compile(node.left, src)
        right = _compile(node.right, src)
        op = node.op
        where = (node.pos, _snippet(src, node))
        if op == "+":
            def add(t, Y):
                a, ga = left(t, Y)
                b, gb = right(t, Y)
                return a + b, _add(ga, gb)
            return add
        if op == "-":
            def sub(t, Y):
                a, ga = left(t, Y)
                b, gb = right(t, Y)
                return a - b, _add(ga, _neg(gb))
            return sub
        if op == "*":
            def mul(t, Y):
                a, ga = left(t, Y)
                b, gb = right(t, Y)
                return a * b, _add(_scale(ga, b), _scale(gb, a))
            return mul
        if op == "/":
            def div(t, Y):
                a, ga = left(t, Y)
                b, gb = right(t, Y)
                if np.any(np.asarray(b) == 0):
                    raise DomainError("division by zero", *where)
                val = a / b
                return val, _add(_scale(ga, 1.0 / b), _scale(gb, -val / b))
            return div
        if op == "^":
            if isinstance(node.right, Const):
                return _compile_const_power(left, node.right.value, where)

            def gpow(t, Y):
                a, ga = left(t, Y)
                b, gb = right(t, Y)
                if np.any(np.asarray(a) <= 0):
                    raise DomainError("non-positive base with variable exponent", *where)
                loga = np.log(a)
                val = np.exp(b * loga)
                return val, _add(_scale(gb, val * loga), _scale(ga, val * b / a))
            return gpow
        raise AssertionError(op)

    if isinstance(node, Call):
        return _compile_call(node, _compile(node.arg, src), (node.pos, _snippet(src, node)))

    raise TypeError(f"unknown node {node!r}")


def _compile_const_power(left: JetFn, c: float, where) -> JetFn:
    integral = float(c).is_integer()

    def cpow(t, Y):
        a, ga = left(t, Y)
        arr = np.asarray(a)
        if c == 0:
            return np.ones_like(arr, dtype=float), None
        if integral:
            if c < 0 and np.any(arr == 0):
                raise DomainError("zero raised to a negative power", *where)
        else:
            if np.any(arr < 0):
                raise DomainError("negative base with fractional exponent", *where)
            if c < 1 and ga is not None and np.any(arr == 0):
                raise DomainError("derivative of fractional power at zero", *where)
        val = np.power(a, c)
        return val, _scale(ga, c * np.power(a, c - 1))
    return cpow


def _compile_call(node: Call, inner: JetFn, where) -> JetFn:
    name = node.func
    if name == "sin":
        def f(t, Y):
            a, ga = inner(t, Y)
            return np.sin(a), _scale(ga, np.cos(a))
    elif name == "cos":
        def f(t, Y):
            a, ga = inner(t, Y)
            return np.cos(a), _scale(ga, -np.sin(a))
    elif name == "exp":
        def f(t, Y):
            a, ga = inner(t, Y)
            val = np.exp(a)
            return val, _scale(ga, val)
    elif name == "log":
        def f(t, Y):
            a, ga = inner(t, Y)
            if np.any(np.asarray(a) <= 0):
                raise DomainError("log of non-positive value", *where)
            return np.log(a), _scale(ga, 1.0 / a)
    elif name == "tanh":
        def f(t, Y):
            a, ga = inner(t, Y)
            val = np.tanh(a)
            return val, _scale(ga, 1.0 - val * val)
    elif name == "sqrt":
        def f(t, Y):
            a, ga = inner(t, Y)
            arr = np.asarray(a)
            if np.any(arr < 0) or (ga is not None and np.any(arr == 0)):
                raise DomainError("sqrt outside its smooth domain", *where)
            val = np.sqrt(a)
            return val, _scale(ga, 0.5 / val) if ga is not None else None
    elif name == "sabs":
        def f(t, Y):
            a, ga = inner(t, Y)
            val = np.sqrt(a * a + SABS_EPS**2)
            return val, _scale(ga, a / val)
    else:
        raise AssertionError(name)
    return f


def _bump(s):
    pos = s > 0
    safe = np.where(pos, s, 1.0)
    sig = np.where(pos, np.exp(-1.0 / safe), 0.0)
    dsig = np.where(pos, sig / (safe * safe), 0.0)
    return sig, dsig


def cutoff_profile(r, r0: float, width: float):
    """Radial cutoff ``chi(r)`` and its derivative; exactly 1 below ``r0`` and 0 beyond ``r0 + width``."""
    r = np.asarray(r, dtype=float)
    s1, d1 = _bump((r0 + width - r) / width)
    s2, d2 = _bump((r - r0) / width)
    denom = s1 + s2
    chi = s1 / denom
    dchi = -(d1 * s2 + s1 * d2) / (width * denom * denom)
    return chi, dchi


def _compile_cutoff(r0: float, width: float) -> JetFn:
    def f(t, Y):
        r = np.sqrt(np.einsum("ij,ij->i", Y, Y))
        chi, dchi = cutoff_profile(r, r0, width)
        safe = np.where(r > 0, r, 1.0)
        grad = Y * (np.where(r > 0, dchi / safe, 0.0))[:, None]
        return chi, grad
    return f


# ---------------------------------------------------------------------------
# Public objects


@dataclass(frozen=True)
class JetValue:
    """Value of ``H`` and its first partials at one point."""

    value: float
    d_q: np.ndarray
    d_p: np.ndarray
    d_z: float


class HamiltonianExpr:
    """Immutable parsed Hamiltonian with a compiled forward-mode evaluator."""

    def __init__(self, ast: Node, dim: int, support_radius: Optional[float] = None,
                 source: Optional[str] = None):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.ast = ast
        self.dim = int(dim)
        self.support_radius = support_radius
        self.source = source if source is not None else ast.to_source()
        self._fn = _compile(ast, self.source)

    def __getstate__(self):
        return {"ast": self.ast, "dim": self.dim,
                "support_radius": self.support_radius, "source": self.source}

    def __setstate__(self, state):
        self.__init__(**state)

    def __repr__(self):
        return f"HamiltonianExpr({self.source!r}, dim={self.dim})"

    @property
    def state_dim(self) -> int:
        return 2 * self.dim + 1

    def jet(self, t, Y):
        """Vectorised evaluation.

        ``Y`` has shape ``(B, 2n+1)`` and ``t`` is a scalar or shape ``(B,)``.
        Returns ``(value, grad)`` with shapes ``(B,)`` and ``(B, 2n+1)``.
        """
        Y = np.asarray(Y, dtype=float)
        if Y.ndim != 2 or Y.shape[1] != self.state_dim:
            raise ValueError(f"expected states of shape (B, {self.state_dim}), got {Y.shape}")
        val, grad = self._fn(t, Y)
        B = Y.shape[0]
        val = np.broadcast_to(np.asarray(val, dtype=float), (B,)).copy()
        grad = np.zeros_like(Y) if grad is None else np.array(grad, dtype=float)
        return val, grad

    def value(self, t, Y) -> np.ndarray:
        return self.jet(t, Y)[0]

    def __call__(self, t: float, y) -> float:
        arr = y.as_array() if isinstance(y, ContactPoint) else np.asarray(y, dtype=float)
        return float(self.jet(t, arr[None, :])[0][0])

    def variables(self) -> set:
        names = {n.name for n in _walk(self.ast) if isinstance(n, Var)}
        if any(isinstance(n, Cutoff) for n in _walk(self.ast)):
            names |= {f"q{i}" for i in range(1, self.dim + 1)}
            names |= {f"p{i}" for i in range(1, self.dim + 1)} | {"z"}
        return names

    def uses(self, name: str) -> bool:
        return name in self.variables()

    def to_source(self) -> str:
        return self.ast.to_source()


def parse(src: str, dim: int) -> HamiltonianExpr:
    """Parse ``src`` into a :class:`HamiltonianExpr` over ``dim`` degrees of freedom."""
    if not isinstance(src, str) or not src.strip():
        raise ParseError("empty expression", 0)
    if dim < 1:
        raise ValueError("dim must be >= 1")
    ast = _Parser(src, dim).parse()
    return HamiltonianExpr(ast, dim, source=src)


def eval_with_partials(H: HamiltonianExpr, t: float, y: ContactPoint) -> JetValue:
    arr = y.as_array()
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite state")
    val, grad = H.jet(float(t), arr[None, :])
    n = H.dim
    g = grad[0]
    return JetValue(float(val[0]), g[:n].copy(), g[n:2 * n].copy(), float(g[2 * n]))


def compactify(H: HamiltonianExpr, R0: float, w: float) -> HamiltonianExpr:
    """Multiply ``H`` by a smooth radial cutoff supported in ``|(q, p, z)| <= R0 + w``."""
    if not (R0 > 0 and w > 0):
        raise ValueError("compactify needs R0 > 0 and w > 0")
    ast = BinOp("*", H.ast, Cutoff(float(R0), float(w)))
    return HamiltonianExpr(ast, H.dim, support_radius=float(R0) + float(w))
