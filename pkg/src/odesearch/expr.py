"""Symbolic expression trees: parsing, printing, evaluation, complexity.

Two operator alphabets are used throughout the package.  The *discovery*
grammar is what the search may propose: {+, -, *, /, **, sin, log, exp, abs,
unary minus} over variables ``x_0..x_{D-1}`` and the constant-placeholder
token ``C``.  The *simulation* grammar is a superset reserved for ground-truth
systems; it additionally allows cos, sqrt, sgn, cot and numeric literals.

Numeric evaluation never raises on domain violations: any sample whose value
is undefined (log of a non-positive number, division by zero, a negative base
raised to a fractional power, overflow past float range) comes back as NaN.
"""

from __future__ import annotations

import itertools
import math
import re
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

DISCOVERY = "discovery"
SIMULATION = "simulation"

BINARY_OPS = ("add", "sub", "mul", "div", "pow")
UNARY_OPS = ("neg", "sin", "cos", "log", "exp", "abs", "sqrt", "sgn", "cot")
DISCOVERY_UNARY = ("neg", "sin", "log", "exp", "abs")

# function-call spellings accepted by the parser (case-insensitive)
_FUNC_ALIASES = {
    "sin": "sin", "cos": "cos", "log": "log", "exp": "exp", "abs": "abs",
    "sqrt": "sqrt", "sgn": "sgn", "sign": "sgn", "cot": "cot",
}
_SIMULATION_ONLY_UNARY = frozenset(UNARY_OPS) - frozenset(DISCOVERY_UNARY)


class ExprError(Exception):
    """Base class for expression-layer failures."""


class ExprSyntaxError(ExprError):
    """Text is not a well-formed infix expression."""


class UnknownSymbolError(ExprError):
    """Identifier is not a variable, operator, or the constant token C."""


class DimError(ExprError):
    """Variable index is out of range for the system dimension."""


class GrammarError(ExprError):
    """Operator or literal is not part of the selected grammar."""


class ArityError(ExprError):
    """Constant vector length does not match the placeholder count."""


@dataclass(frozen=True)
class Variable:
    index: int


@dataclass(frozen=True)
class Const:
    """Constant placeholder.

    ``init`` is the optimizer starting value (1.0 for a bare ``C``, the pinned
    literal value when the source text spelled out a number under the
    discovery grammar).  It is metadata, not structure, so it is excluded
    from equality.
    """

    slot: int
    init: float = field(default=1.0, compare=False)


@dataclass(frozen=True)
class Literal:
    value: float


@dataclass(frozen=True)
class Unary:
    op: str
    child: "Expr"


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Expr"
    right: "Expr"


Expr = Union[Variable, Const, Literal, Unary, Binary]


# ---------------------------------------------------------------------------
# tree utilities
# ---------------------------------------------------------------------------

def complexity(e: Expr) -> int:
    """Node count of the expression tree (every node counts as 1)."""
    if isinstance(e, Binary):
        return 1 + complexity(e.left) + complexity(e.right)
    if isinstance(e, Unary):
        return 1 + complexity(e.child)
    return 1


def iter_nodes(e: Expr):
    """Yield all nodes in preorder (root first, left before right)."""
    stack = [e]
    while stack:
        node = stack.pop()
        yield node
        if isinstance(node, Binary):
            stack.append(node.right)
            stack.append(node.left)
        elif isinstance(node, Unary):
            stack.append(node.child)


def placeholder_count(e: Expr) -> int:
    return sum(1 for n in iter_nodes(e) if isinstance(n, Const))


def placeholder_inits(e: Expr) -> tuple[float, ...]:
    """Optimizer starting values, ordered by slot."""
    pairs = sorted((n.slot, n.init) for n in iter_nodes(e) if isinstance(n, Const))
    return tuple(v for _, v in pairs)


def contains_variable(e: Expr) -> bool:
    return any(isinstance(n, Variable) for n in iter_nodes(e))


def canonicalize_slots(e: Expr) -> Expr:
    """Renumber placeholder slots 0..n-1 in left-to-right depth-first order."""
    counter = itertools.count()

    def walk(node: Expr) -> Expr:
        if isinstance(node, Const):
            return Const(next(counter), init=node.init)
        if isinstance(node, Unary):
            return Unary(node.op, walk(node.child))
        if isinstance(node, Binary):
            return Binary(node.op, walk(node.left), walk(node.right))
        return node

    return walk(e)


def subtree_at(e: Expr, index: int) -> Expr:
    """Return the subtree rooted at preorder position ``index``."""
    for i, node in enumerate(iter_nodes(e)):
        if i == index:
            return node
    raise IndexError(index)


def replace_at(e: Expr, index: int, replacement: Expr) -> Expr:
    """Rebuild ``e`` with the subtree at preorder position ``index`` swapped out.

    Slots are not renumbered; call :func:`canonicalize_slots` afterwards.
    """
    counter = itertools.count()

    def walk(node: Expr) -> Expr:
        if next(counter) == index:
            return replacement
        if isinstance(node, Unary):
            return Unary(node.op, walk(node.child))
        if isinstance(node, Binary):
            left = walk(node.left)
            return Binary(node.op, left, walk(node.right))
        return node

    out = walk(e)
    if index >= complexity(e):
        raise IndexError(index)
    return out


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:"
    r"(?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>\*\*|[+\-*/^()])"
    r"|(?P<bad>\S)"
    r")"
)
_VARIABLE = re.compile(r"x_(\d+)\Z")


def _tokenize(text: str) -> list[tuple[str, object]]:
    tokens: list[tuple[str, object]] = []
    pos, end = 0, len(text)
    while pos < end:
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            break  # trailing whitespace
        pos = m.end()
        if m.group("num") is not None:
            tokens.append(("num", float(m.group("num"))))
        elif m.group("name") is not None:
            tokens.append(("name", m.group("name")))
        elif m.group("op") is not None:
            op = m.group("op")
            tokens.append(("op", "**" if op == "^" else op))
        else:
            raise ExprSyntaxError(f"unexpected character {m.group('bad')!r} at position {m.start('bad')}")
    return tokens


class _Parser:
    """Recursive-descent parser with Python's arithmetic precedence:
    ``**`` binds tightest (right-associative), then unary minus, then
    ``*``/``/``, then ``+``/``-``.
    """

    def __init__(self, tokens: list[tuple[str, object]], dim: int, grammar: str):
        self.tokens = tokens
        self.pos = 0
        self.dim = dim
        self.grammar = grammar
        self.n_slots = 0

    def peek_op(self) -> str | None:
        if self.pos < len(self.tokens) and self.tokens[self.pos][0] == "op":
            return self.tokens[self.pos][1]  # type: ignore[return-value]
        return None

    def advance(self) -> tuple[str, object]:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def run(self) -> Expr:
        if not self.tokens:
            raise ExprSyntaxError("empty expression")
        e = self.expression()
        if self.pos != len(self.tokens):
            raise ExprSyntaxError(f"unexpected input after position {self.pos}")
        return e

    def expression(self) -> Expr:
        node = self.term()
        while self.peek_op() in ("+", "-"):
            op = self.advance()[1]
            node = Binary("add" if op == "+" else "sub", node, self.term())
        return node

    def term(self) -> Expr:
        node = self.unary()
        while self.peek_op() in ("*", "/"):
            op = self.advance()[1]
            node = Binary("mul" if op == "*" else "div", node, self.unary())
        return node

    def unary(self) -> Expr:
        if self.peek_op() == "+":
            self.advance()
            return self.unary()
        if self.peek_op() == "-":
            self.advance()
            return Unary("neg", self.unary())
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        if self.peek_op() == "**":
            self.advance()
            return Binary("pow", base, self.unary())
        return base

    def atom(self) -> Expr:
        if self.pos >= len(self.tokens):
            raise ExprSyntaxError("unexpected end of expression")
        kind, value = self.advance()
        if kind == "num":
            return self.number(float(value))
        if kind == "op" and value == "(":
            e = self.expression()
            if self.peek_op() != ")":
                raise ExprSyntaxError("missing closing parenthesis")
            self.advance()
            return e
        if kind == "name":
            return self.symbol(str(value))
        raise ExprSyntaxError(f"unexpected token {value!r}")

    def number(self, value: float) -> Expr:
        if self.grammar == SIMULATION:
            return Literal(value)
        # discovery grammar: a spelled-out number becomes a placeholder pinned
        # to that value as its optimizer start
        slot = self.n_slots
        self.n_slots += 1
        return Const(slot, init=value)

    def symbol(self, name: str) -> Expr:
        m = _VARIABLE.match(name)
        if m:
            index = int(m.group(1))
            if index >= self.dim:
                raise DimError(f"variable {name} out of range for dim={self.dim}")
            return Variable(index)
        lower = name.lower()
        if self.peek_op() == "(":
            op = _FUNC_ALIASES.get(lower)
            if op is None:
                raise UnknownSymbolError(f"unknown function {name!r}")
            if self.grammar == DISCOVERY and op in _SIMULATION_ONLY_UNARY:
                raise GrammarError(f"{op} is not in the discovery grammar")
            self.advance()  # "("
            child = self.expression()
            if self.peek_op() != ")":
                raise ExprSyntaxError(f"missing closing parenthesis after {name}")
            self.advance()
            return Unary(op, child)
        if lower == "c":
            slot = self.n_slots
            self.n_slots += 1
            return Const(slot)
        raise UnknownSymbolError(f"unknown symbol {name!r}")


def parse(text: str, dim: int, grammar: str = DISCOVERY) -> Expr:
    """Parse one infix equation into an expression tree.

    Variables are spelled ``x_0..x_{dim-1}``, constants as the token ``C``
    (case-insensitive); ``**`` and ``^`` both denote power and ``Abs``/``abs``
    are interchangeable.  Placeholder slots are numbered in left-to-right
    depth-first order.
    """
    if grammar not in (DISCOVERY, SIMULATION):
        raise ValueError(f"unknown grammar {grammar!r}")
    if dim < 1:
        raise ValueError("dim must be >= 1")
    return _Parser(_tokenize(text), dim, grammar).run()


# ---------------------------------------------------------------------------
# printing
# ---------------------------------------------------------------------------

_PREC_ADD, _PREC_MUL, _PREC_NEG, _PREC_POW, _PREC_ATOM = 1, 2, 3, 4, 5
_FUNC_NAMES = {"abs": "Abs"}  # everything else prints lowercase


def _format_value(value: float) -> tuple[str, int]:
    text = repr(float(value))
    return text, (_PREC_NEG if text.startswith("-") else _PREC_ATOM)


def _render(e: Expr, constants: Sequence[float] | None) -> tuple[str, int]:
    if isinstance(e, Variable):
        return f"x_{e.index}", _PREC_ATOM
    if isinstance(e, Const):
        if constants is None:
            return "C", _PREC_ATOM
        return _format_value(constants[e.slot])
    if isinstance(e, Literal):
        if constants is None:
            return "C", _PREC_ATOM
        return _format_value(e.value)
    if isinstance(e, Unary):
        text, prec = _render(e.child, constants)
        if e.op == "neg":
            if prec < _PREC_NEG:
                text = f"({text})"
            return f"-{text}", _PREC_NEG
        return f"{_FUNC_NAMES.get(e.op, e.op)}({text})", _PREC_ATOM
    assert isinstance(e, Binary)
    lt, lp = _render(e.left, constants)
    rt, rp = _render(e.right, constants)
    if e.op in ("add", "sub"):
        if lp < _PREC_ADD:
            lt = f"({lt})"
        if rp <= _PREC_ADD:
            rt = f"({rt})"
        return f"{lt} {'+' if e.op == 'add' else '-'} {rt}", _PREC_ADD
    if e.op in ("mul", "div"):
        if lp < _PREC_MUL:
            lt = f"({lt})"
        if rp <= _PREC_MUL:
            rt = f"({rt})"
        return f"{lt}{'*' if e.op == 'mul' else '/'}{rt}", _PREC_MUL
    # pow: base needs parens unless atomic; exponent chains stay bare so the
    # printed form re-parses right-associatively
    if lp <= _PREC_POW:
        lt = f"({lt})"
    if rp < _PREC_POW:
        rt = f"({rt})"
    return f"{lt}**{rt}", _PREC_POW


def to_masked_string(e: Expr) -> str:
    """Canonical infix rendering with every placeholder and literal printed
    as the bare token ``C``.  Deterministic; re-parses to the same tree up to
    slot renumbering.
    """
    return _render(e, None)[0]


def render_with_constants(e: Expr, constants: Sequence[float]) -> str:
    """Infix rendering with fitted constant values inlined at full precision."""
    values = tuple(float(v) for v in constants)
    if len(values) != placeholder_count(e):
        raise ArityError(
            f"expected {placeholder_count(e)} constants, got {len(values)}"
        )
    return _render(e, values)[0]


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _nanify(v):
    return np.where(np.isfinite(v), v, np.nan)


def _build_vector(e: Expr) -> Callable:
    """Compile to a numpy evaluator f(X, c).  Every op that can leave the
    float range masks its own non-finite outputs so a transient overflow
    poisons the sample instead of washing out downstream.
    """
    if isinstance(e, Variable):
        i = e.index
        return lambda X, c: X[:, i]
    if isinstance(e, Const):
        k = e.slot
        return lambda X, c: c[k]
    if isinstance(e, Literal):
        v = e.value
        return lambda X, c: v
    if isinstance(e, Unary):
        f = _build_vector(e.child)
        return {
            "neg": lambda X, c: -f(X, c),
            "sin": lambda X, c: np.sin(f(X, c)),
            "cos": lambda X, c: np.cos(f(X, c)),
            "log": lambda X, c: _nanify(np.log(f(X, c))),
            "exp": lambda X, c: _nanify(np.exp(f(X, c))),
            "abs": lambda X, c: np.abs(f(X, c)),
            "sqrt": lambda X, c: np.sqrt(f(X, c)),
            "sgn": lambda X, c: np.sign(f(X, c)),
            "cot": lambda X, c: _nanify(np.cos(f(X, c)) / np.sin(f(X, c))),
        }[e.op]
    assert isinstance(e, Binary)
    fl, fr = _build_vector(e.left), _build_vector(e.right)
    return {
        "add": lambda X, c: _nanify(fl(X, c) + fr(X, c)),
        "sub": lambda X, c: _nanify(fl(X, c) - fr(X, c)),
        "mul": lambda X, c: _nanify(fl(X, c) * fr(X, c)),
        "div": lambda X, c: _nanify(fl(X, c) / fr(X, c)),
        "pow": lambda X, c: _nanify(np.power(fl(X, c), fr(X, c))),
    }[e.op]


def compile_vector(e: Expr) -> Callable:
    """Compile once, evaluate many: returns f(X, constants) -> (N,) array."""
    built = _build_vector(e)

    def call(X: np.ndarray, constants: Sequence[float]) -> np.ndarray:
        with np.errstate(all="ignore"):
            out = built(X, constants)
        if np.ndim(out) == 0:
            value = float(out)
            out = np.full(X.shape[0], value if math.isfinite(value) else math.nan)
        return np.asarray(out, dtype=float)

    return call


_NAN = math.nan


def _build_scalar(e: Expr) -> Callable:
    """Compile to a pure-Python evaluator f(x, c) -> float (hot path for the
    ODE right-hand side, where inputs are single states).  Matches the vector
    semantics: any domain violation or overflow yields NaN.
    """
    if isinstance(e, Variable):
        i = e.index
        return lambda x, c: x[i]
    if isinstance(e, Const):
        k = e.slot
        return lambda x, c: c[k]
    if isinstance(e, Literal):
        v = e.value
        return lambda x, c: v
    if isinstance(e, Unary):
        f = _build_scalar(e.child)
        if e.op == "neg":
            return lambda x, c: -f(x, c)
        if e.op == "abs":
            return lambda x, c: abs(f(x, c))
        if e.op == "sgn":
            def sgn(x, c):
                v = f(x, c)
                if v != v:
                    return _NAN
                return 0.0 if v == 0 else math.copysign(1.0, v)
            return sgn
        if e.op == "cot":
            def cot(x, c):
                v = f(x, c)
                try:
                    out = math.cos(v) / math.sin(v)
                except (ValueError, ZeroDivisionError):
                    return _NAN
                return out if math.isfinite(out) else _NAN
            return cot
        fn = {"sin": math.sin, "cos": math.cos, "log": math.log,
              "exp": math.exp, "sqrt": math.sqrt}[e.op]

        def unary(x, c, fn=fn):
            try:
                out = fn(f(x, c))
            except (ValueError, OverflowError):
                return _NAN
            return out if math.isfinite(out) else _NAN
        return unary
    assert isinstance(e, Binary)
    fl, fr = _build_scalar(e.left), _build_scalar(e.right)
    if e.op == "pow":
        def power(x, c):
            try:
                out = fl(x, c) ** fr(x, c)
            except (ValueError, OverflowError, ZeroDivisionError):
                return _NAN
            if isinstance(out, complex) or not math.isfinite(out):
                return _NAN
            return out
        return power
    if e.op == "div":
        def div(x, c):
            try:
                out = fl(x, c) / fr(x, c)
            except ZeroDivisionError:
                return _NAN
            return out if math.isfinite(out) else _NAN
        return div
    op = {"add": lambda a, b: a + b, "sub": lambda a, b: a - b,
          "mul": lambda a, b: a * b}[e.op]

    def binary(x, c, op=op):
        out = op(fl(x, c), fr(x, c))
        return out if math.isfinite(out) else _NAN
    return binary


def compile_scalar(e: Expr) -> Callable:
    return _build_scalar(e)


def evaluate(e: Expr, constants: Sequence[float], X) -> np.ndarray:
    """Pointwise evaluation over the rows of ``X`` (shape N x D).

    Domain violations never raise; the affected samples come back NaN.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError("X must be a 2-D array of shape (N, D)")
    values = tuple(float(v) for v in constants)
    n = placeholder_count(e)
    if len(values) != n:
        raise ArityError(f"expected {n} constants, got {len(values)}")
    return compile_vector(e)(X, values)


# ---------------------------------------------------------------------------
# seed expressions
# ---------------------------------------------------------------------------

def _seed_shapes(dim: int) -> list[tuple]:
    """All discovery-grammar trees of complexity exactly 3 that contain at
    least one variable: binary ops over {C, x_i} leaves, plus nested unary
    chains over a variable.
    """
    shapes: list[tuple] = []
    for op in BINARY_OPS:
        for i in range(dim):
            shapes.append(("bin", op, None, i))  # C op x_i
            shapes.append(("bin", op, i, None))  # x_i op C
            for j in range(dim):
                shapes.append(("bin", op, i, j))
    for outer in DISCOVERY_UNARY:
        for inner in DISCOVERY_UNARY:
            for i in range(dim):
                shapes.append(("un", outer, inner, i))
    return shapes


def _leaf(index: int | None) -> Expr:
    return Const(0) if index is None else Variable(index)


def random_seed_expr(rng: np.random.Generator, dim: int) -> Expr:
    """Draw a complexity-3 starter equation uniformly from the discovery
    grammar (always containing at least one variable)."""
    shapes = _seed_shapes(dim)
    shape = shapes[int(rng.integers(len(shapes)))]
    if shape[0] == "bin":
        _, op, left, right = shape
        e: Expr = Binary(op, _leaf(left), _leaf(right))
    else:
        _, outer, inner, i = shape
        e = Unary(outer, Unary(inner, Variable(i)))
    return canonicalize_slots(e)
