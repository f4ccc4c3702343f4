"""Arithmetic expressions over x1..xd, p1..pd, u with exact first derivatives.

Grammar (standard precedence, ``^`` binds tighter than unary minus)::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := ('+' | '-') unary | power
    power  := atom ('^' ['-'] INTEGER)?
    atom   := NUMBER | NAME | NAME '(' expr ')' | '(' expr ')'

Derivatives come from forward-mode jets carried through every node, so they
are exact up to floating point.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

FUNCTIONS = ("sin", "cos", "exp")
CONSTANTS = {"pi": np.pi}

_VAR_RE = re.compile(r"^(x|p)([1-9])$")


class ExpressionError(ValueError):
    pass


class ExpressionSyntaxError(ExpressionError):
    def __init__(self, offset: int, expected: set[str], found: str):
        self.offset = offset
        self.expected = frozenset(expected)
        self.found = found
        exp = ", ".join(sorted(self.expected))
        super().__init__(f"syntax error at offset {offset}: found {found!r}, expected one of {{{exp}}}")


class UnknownIdentifierError(ExpressionError):
    def __init__(self, name: str, offset: int):
        self.name = name
        self.offset = offset
        super().__init__(f"unknown identifier {name!r} at offset {offset}")


class EvaluationError(ArithmeticError):
    def __init__(self, subexpression: str):
        self.subexpression = subexpression
        super().__init__(f"non-finite value in subexpression {subexpression!r}")


# -- jets -------------------------------------------------------------------

class Jet:
    """Value plus gradient with respect to the model variables.

    ``grad`` has shape ``(n_vars,) + val.shape``.
    """

    __slots__ = ("val", "grad")

    def __init__(self, val, grad):
        self.val = val
        self.grad = grad


def _add(a, b, sign=1.0):
    a_jet, b_jet = isinstance(a, Jet), isinstance(b, Jet)
    if a_jet and b_jet:
        return Jet(a.val + sign * b.val, a.grad + sign * b.grad)
    if a_jet:
        return Jet(a.val + sign * b, a.grad)
    if b_jet:
        return Jet(a + sign * b.val, sign * b.grad)
    return a + sign * b


def _mul(a, b):
    if not isinstance(a, Jet) and not isinstance(b, Jet):
        return a * b
    if not isinstance(a, Jet):
        return Jet(a * b.val, a * b.grad)
    if not isinstance(b, Jet):
        return Jet(a.val * b, a.grad * b)
    return Jet(a.val * b.val, a.grad * b.val + a.val * b.grad)


def _div(a, b):
    if not isinstance(b, Jet):
        if isinstance(a, Jet):
            return Jet(a.val / b, a.grad / b)
        return a / b
    q = (a.val if isinstance(a, Jet) else a) / b.val
    grad = -q * b.grad / b.val
    if isinstance(a, Jet):
        grad = grad + a.grad / b.val
    return Jet(q, grad)


def _pow(a, n: int):
    if not isinstance(a, Jet):
        return a ** float(n)
    if n == 0:
        return Jet(np.ones_like(a.val), np.zeros_like(a.grad))
    return Jet(a.val ** float(n), n * a.val ** float(n - 1) * a.grad)


def _call(fn: str, a):
    if not isinstance(a, Jet):
        return getattr(np, fn)(a)
    if fn == "sin":
        return Jet(np.sin(a.val), np.cos(a.val) * a.grad)
    if fn == "cos":
        return Jet(np.cos(a.val), -np.sin(a.val) * a.grad)
    e = np.exp(a.val)
    return Jet(e, e * a.grad)


# -- syntax tree ------------------------------------------------------------

class Node:
    text: str = ""

    def evaluate(self, env):
        out = self._evaluate(env)
        val = out.val if isinstance(out, Jet) else out
        if not np.all(np.isfinite(val)):
            raise EvaluationError(self.text)
        return out

    def _evaluate(self, env):  # pragma: no cover - abstract
        raise NotImplementedError

    def variables(self) -> set[str]:
        return set()


@dataclass(eq=False)
class Num(Node):
    value: float
    text: str = ""

    def _evaluate(self, env):
        return self.value


@dataclass(eq=False)
class Var(Node):
    name: str
    text: str = ""

    def _evaluate(self, env):
        return env[self.name]

    def variables(self):
        return {self.name}


@dataclass(eq=False)
class Neg(Node):
    arg: Node
    text: str = ""

    def _evaluate(self, env):
        return _mul(-1.0, self.arg.evaluate(env))

    def variables(self):
        return self.arg.variables()


@dataclass(eq=False)
class BinOp(Node):
    op: str
    left: Node
    right: Node
    text: str = ""

    def _evaluate(self, env):
        a = self.left.evaluate(env)
        b = self.right.evaluate(env)
        if self.op == "+":
            return _add(a, b)
        if self.op == "-":
            return _add(a, b, -1.0)
        if self.op == "*":
            return _mul(a, b)
        return _div(a, b)

    def variables(self):
        return self.left.variables() | self.right.variables()


@dataclass(eq=False)
class Pow(Node):
    base: Node
    exponent: int
    text: str = ""

    def _evaluate(self, env):
        return _pow(self.base.evaluate(env), self.exponent)

    def variables(self):
        return self.base.variables()


@dataclass(eq=False)
class Call(Node):
    fn: str
    arg: Node
    text: str = ""

    def _evaluate(self, env):
        return _call(self.fn, self.arg.evaluate(env))

    def variables(self):
        return self.arg.variables()


# -- parser -----------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/^(),]))"
)

_ATOM_START = {"number", "identifier", "'('", "'-'", "'+'"}


@dataclass
class _Token:
    kind: str  # num | name | op | end
    text: str
    offset: int  # byte offset


def tokenize(text: str) -> list[_Token]:
    tokens = []
    pos = 0
    while True:
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.end() == pos:
            rest = text[pos:]
            if rest.strip() == "":
                break
            skip = len(rest) - len(rest.lstrip())
            off = len(text[: pos + skip].encode())
            raise ExpressionSyntaxError(off, {"number", "identifier", "operator"}, rest.lstrip()[0])
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append(_Token(kind, m.group(kind), len(text[:start].encode())))
        pos = m.end()
    tokens.append(_Token("end", "", len(text.encode())))
    return tokens


class _Parser:
    def __init__(self, text: str, allowed: set[str] | None):
        self.text = text
        self.tokens = tokenize(text)
        self.i = 0
        self.allowed = allowed
        self._byte_text = text.encode()

    @property
    def tok(self) -> _Token:
        return self.tokens[self.i]

    def _slice(self, start: int) -> str:
        end = self.tokens[self.i - 1]
        stop = end.offset + len(end.text.encode())
        return self._byte_text[start:stop].decode()

    def fail(self, expected):
        found = self.tok.text if self.tok.kind != "end" else "end of input"
        raise ExpressionSyntaxError(self.tok.offset, set(expected), found)

    def accept(self, op: str) -> bool:
        if self.tok.kind == "op" and self.tok.text == op:
            self.i += 1
            return True
        return False

    def parse(self) -> Node:
        node = self.expr()
        if self.tok.kind != "end":
            self.fail({"'+'", "'-'", "'*'", "'/'", "'^'", "end of input"})
        return node

    def expr(self) -> Node:
        start = self.tok.offset
        node = self.term()
        while self.tok.kind == "op" and self.tok.text in "+-":
            op = self.tok.text
            self.i += 1
            node = BinOp(op, node, self.term())
            node.text = self._slice(start)
        return node

    def term(self) -> Node:
        start = self.tok.offset
        node = self.unary()
        while self.tok.kind == "op" and self.tok.text in "*/":
            op = self.tok.text
            self.i += 1
            node = BinOp(op, node, self.unary())
            node.text = self._slice(start)
        return node

    def unary(self) -> Node:
        start = self.tok.offset
        if self.accept("-"):
            node = Neg(self.unary())
            node.text = self._slice(start)
            return node
        if self.accept("+"):
            return self.unary()
        return self.power()

    def power(self) -> Node:
        start = self.tok.offset
        node = self.atom()
        if self.accept("^"):
            neg = self.accept("-")
            if self.tok.kind != "num" or not re.fullmatch(r"\d+", self.tok.text):
                self.fail({"integer"})
            n = int(self.tok.text)
            self.i += 1
            node = Pow(node, -n if neg else n)
            node.text = self._slice(start)
        return node

    def atom(self) -> Node:
        tok = self.tok
        if tok.kind == "num":
            self.i += 1
            return Num(float(tok.text), text=tok.text)
        if tok.kind == "name":
            self.i += 1
            if tok.text in FUNCTIONS:
                if not self.accept("("):
                    self.fail({"'('"})
                arg = self.expr()
                if not self.accept(")"):
                    self.fail({"')'"})
                node = Call(tok.text, arg)
                node.text = self._slice(tok.offset)
                return node
            if tok.text in CONSTANTS:
                return Num(CONSTANTS[tok.text], text=tok.text)
            if tok.text == "u" or _VAR_RE.match(tok.text):
                if self.allowed is not None and tok.text not in self.allowed:
                    raise UnknownIdentifierError(tok.text, tok.offset)
                return Var(tok.text, text=tok.text)
            raise UnknownIdentifierError(tok.text, tok.offset)
        if self.accept("("):
            node = self.expr()
            if not self.accept(")"):
                self.fail({"')'", "'+'", "'-'", "'*'", "'/'", "'^'"})
            return node
        self.fail(_ATOM_START)


def variable_names(dim: int) -> list[str]:
    return [f"x{i + 1}" for i in range(dim)] + [f"p{i + 1}" for i in range(dim)] + ["u"]


class Expression:
    """A parsed expression bound to the variable layout x1..xd, p1..pd, u."""

    def __init__(self, text: str, dim: int | None = None, allowed: set[str] | None = None):
        if not text or not text.strip():
            raise ExpressionSyntaxError(0, _ATOM_START, "end of input")
        self.text = text
        self.tree = _Parser(text, allowed).parse()
        used = self.tree.variables()
        inferred = max([int(v[1:]) for v in used if v != "u"], default=1)
        if dim is None:
            dim = inferred
        elif inferred > dim:
            bad = sorted(v for v in used if v != "u" and int(v[1:]) > dim)[0]
            raise UnknownIdentifierError(bad, self.text.find(bad))
        self.dim = dim
        self.names = variable_names(dim)
        self.used = used

    def __repr__(self):
        return f"Expression({self.text!r}, dim={self.dim})"

    def _env(self, x, p, u, jets: bool):
        d = self.dim
        x = np.asarray(x, dtype=float)
        p = np.asarray(p, dtype=float)
        u = np.asarray(u, dtype=float)
        shape = np.broadcast_shapes(x.shape[:-1], p.shape[:-1], u.shape)
        cols = [np.broadcast_to(x[..., i], shape) for i in range(d)]
        cols += [np.broadcast_to(p[..., i], shape) for i in range(d)]
        cols.append(np.broadcast_to(u, shape))
        if not jets:
            return dict(zip(self.names, cols)), shape
        nv = len(cols)
        env = {}
        for k, (name, col) in enumerate(zip(self.names, cols)):
            if name not in self.used:
                continue
            grad = np.zeros((nv,) + shape)
            grad[k] = 1.0
            env[name] = Jet(col, grad)
        return env, shape

    def value(self, x, p, u) -> np.ndarray:
        env, shape = self._env(x, p, u, jets=False)
        with np.errstate(all="ignore"):
            out = self.tree.evaluate(env)
        return np.broadcast_to(np.asarray(out, dtype=float), shape)

    def jet(self, x, p, u) -> tuple[np.ndarray, np.ndarray]:
        """Return (value, gradient) with gradient shape (2d+1, *shape) in x, p, u order."""
        env, shape = self._env(x, p, u, jets=True)
        with np.errstate(all="ignore"):
            out = self.tree.evaluate(env)
        nv = 2 * self.dim + 1
        if not isinstance(out, Jet):
            return np.broadcast_to(np.asarray(out, dtype=float), shape), np.zeros((nv,) + shape)
        val = np.broadcast_to(out.val, shape)
        grad = np.broadcast_to(out.grad, (nv,) + shape)
        if not np.all(np.isfinite(grad)):
            raise EvaluationError(self.text)
        return val, grad


def parse_function_of_x(text: str, dim: int) -> Expression:
    """Parse a function of position only (potentials, initial data)."""
    return Expression(text, dim, allowed={f"x{i + 1}" for i in range(dim)})
