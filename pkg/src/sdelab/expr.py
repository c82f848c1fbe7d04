"""Closed expression language for coefficients, densities and Lyapunov candidates.

The grammar is fixed: decimal constants, coordinates ``x1 .. xd``, the binary
operators ``+ - * /``, powers with constant exponent (``^`` or ``**``), the
functions ``exp``, ``ln``, ``sqrt``, ``norm2(x)`` (squared Euclidean norm of
the full point), and the piecewise primitives ``max`` / ``min``.  There are no
user-defined functions, so symbolic differentiation is total on the smooth
part of the grammar.

Differentiating through ``max``/``min`` requires the caller to pass
``piecewise=True`` and produces a branch-selection node ``selge(a, b, p, q)``
(= ``p`` where ``a >= b``, else ``q``).  At exact ties the first branch wins,
matching the convention that piecewise candidates like ``max(norm2(x), N0^2)``
are differentiated from their max-branch.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Union

import numpy as np

__all__ = [
    "ExprError",
    "ExprSyntaxError",
    "DomainError",
    "NonDifferentiableError",
    "Expr",
    "Const",
    "Coord",
    "Add",
    "Sub",
    "Mul",
    "Div",
    "Pow",
    "Exp",
    "Ln",
    "Sqrt",
    "Norm2",
    "Max",
    "Min",
    "SelGe",
    "CallableField",
    "parse_expr",
    "to_source",
    "differentiate",
    "gradient",
    "eval_expr",
    "evaluate",
    "const",
    "coord",
    "add",
    "sub",
    "mul",
    "div",
    "powc",
]


class ExprError(Exception):
    """Base class for expression language errors."""


class ExprSyntaxError(ExprError):
    """Raised by the parser; carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


class DomainError(ExprError):
    """Evaluation hit a point outside the domain of a subexpression."""

    def __init__(self, message: str, node: "Expr", point=None):
        super().__init__(message)
        self.node = node
        self.point = point


class NonDifferentiableError(ExprError):
    """A max/min node sits on the differentiation path and no piecewise flag was given."""


# ---------------------------------------------------------------------------
# AST nodes


@dataclass(frozen=True)
class Expr:
    """Base node; all concrete nodes are frozen dataclasses (safe to share)."""

    def __add__(self, other):
        return add(self, _as_expr(other))

    def __radd__(self, other):
        return add(_as_expr(other), self)

    def __sub__(self, other):
        return sub(self, _as_expr(other))

    def __rsub__(self, other):
        return sub(_as_expr(other), self)

    def __mul__(self, other):
        return mul(self, _as_expr(other))

    def __rmul__(self, other):
        return mul(_as_expr(other), self)

    def __truediv__(self, other):
        return div(self, _as_expr(other))

    def __rtruediv__(self, other):
        return div(_as_expr(other), self)

    def __neg__(self):
        return mul(Const(-1.0), self)

    def __pow__(self, exponent):
        return powc(self, float(exponent))


@dataclass(frozen=True)
class Const(Expr):
    value: float


@dataclass(frozen=True)
class Coord(Expr):
    axis: int  # 0-based


@dataclass(frozen=True)
class Add(Expr):
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Sub(Expr):
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Mul(Expr):
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Div(Expr):
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Pow(Expr):
    base: Expr
    exponent: float  # constant (rational) exponent


@dataclass(frozen=True)
class Exp(Expr):
    arg: Expr


@dataclass(frozen=True)
class Ln(Expr):
    arg: Expr


@dataclass(frozen=True)
class Sqrt(Expr):
    arg: Expr


@dataclass(frozen=True)
class Norm2(Expr):
    """Squared Euclidean norm of the full coordinate vector."""


@dataclass(frozen=True)
class Max(Expr):
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Min(Expr):
    left: Expr
    right: Expr


@dataclass(frozen=True)
class SelGe(Expr):
    """Branch select: ``then`` where ``a >= b``, else ``orelse``.

    Only produced by :func:`differentiate` for max/min nodes; the surface
    syntax ``selge(a, b, p, q)`` exists so printed derivatives re-parse.
    """

    a: Expr
    b: Expr
    then: Expr
    orelse: Expr


@dataclass(frozen=True)
class CallableField:
    """Tabulated/callable scalar field used where no closed form exists.

    ``value`` maps an ``(n, d)`` array to ``(n,)``; ``grad`` to ``(n, d)``;
    ``hess`` to ``(n, d, d)``.  Gradients/Hessians are only required by the
    operations that consume them.
    """

    value: Callable[[np.ndarray], np.ndarray]
    grad: Optional[Callable[[np.ndarray], np.ndarray]] = None
    hess: Optional[Callable[[np.ndarray], np.ndarray]] = None


def _as_expr(x) -> Expr:
    if isinstance(x, Expr):
        return x
    if isinstance(x, (int, float)):
        return Const(float(x))
    raise TypeError(f"cannot coerce {x!r} to an expression")


def children(e: Expr) -> tuple:
    if isinstance(e, (Add, Sub, Mul, Div, Max, Min)):
        return (e.left, e.right)
    if isinstance(e, Pow):
        return (e.base,)
    if isinstance(e, (Exp, Ln, Sqrt)):
        return (e.arg,)
    if isinstance(e, SelGe):
        return (e.a, e.b, e.then, e.orelse)
    return ()


def walk(e: Expr) -> Iterator[Expr]:
    yield e
    for c in children(e):
        yield from walk(c)


# ---------------------------------------------------------------------------
# smart constructors (light constant folding keeps derivatives readable)


def const(v: float) -> Const:
    return Const(float(v))


def coord(axis: int) -> Coord:
    return Coord(axis)


def _is_const(e: Expr, v: Optional[float] = None) -> bool:
    return isinstance(e, Const) and (v is None or e.value == v)


def add(a: Expr, b: Expr) -> Expr:
    if _is_const(a, 0.0):
        return b
    if _is_const(b, 0.0):
        return a
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value + b.value)
    return Add(a, b)


def sub(a: Expr, b: Expr) -> Expr:
    if _is_const(b, 0.0):
        return a
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value - b.value)
    return Sub(a, b)


def mul(a: Expr, b: Expr) -> Expr:
    if _is_const(a, 0.0) or _is_const(b, 0.0):
        return Const(0.0)
    if _is_const(a, 1.0):
        return b
    if _is_const(b, 1.0):
        return a
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value * b.value)
    return Mul(a, b)


def div(a: Expr, b: Expr) -> Expr:
    if _is_const(a, 0.0) and not _is_const(b, 0.0):
        return Const(0.0)
    if _is_const(b, 1.0):
        return a
    return Div(a, b)


def powc(base: Expr, exponent: float) -> Expr:
    if exponent == 1.0:
        return base
    if exponent == 0.0:
        return Const(1.0)
    if isinstance(base, Const):
        return Const(float(base.value) ** exponent)
    return Pow(base, float(exponent))


# ---------------------------------------------------------------------------
# parser

_TOKEN_RE = re.compile(
    r"""
    (?P<num>\d+\.\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?|\d+(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<pow>\*\*|\^)
  | (?P<op>[-+*/(),])
  | (?P<ws>\s+)
""",
    re.VERBOSE,
)

_FUNCTIONS = ("exp", "ln", "sqrt", "norm2", "max", "min", "selge")


class _Token:
    __slots__ = ("kind", "text", "offset")

    def __init__(self, kind, text, offset):
        self.kind = kind
        self.text = text
        self.offset = offset

    def __repr__(self):  # pragma: no cover - debug aid
        return f"Token({self.kind}, {self.text!r}, {self.offset})"


def _tokenize(src: str) -> list:
    tokens = []
    pos = 0
    while pos < len(src):
        m = _TOKEN_RE.match(src, pos)
        if m is None:
            raise ExprSyntaxError(f"unexpected character {src[pos]!r}", pos)
        kind = m.lastgroup
        if kind != "ws":
            text = m.group()
            if kind == "pow":
                kind = "op"
                text = "^"
            tokens.append(_Token(kind, text, pos))
        pos = m.end()
    tokens.append(_Token("end", "", len(src)))
    return tokens


class _Parser:
    def __init__(self, tokens, dimension: int):
        self.tokens = tokens
        self.i = 0
        self.d = dimension

    def peek(self) -> _Token:
        return self.tokens[self.i]

    def next(self) -> _Token:
        t = self.tokens[self.i]
        self.i += 1
        return t

    def expect(self, text: str) -> _Token:
        t = self.next()
        if t.text != text:
            raise ExprSyntaxError(f"expected {text!r}, found {t.text!r}", t.offset)
        return t

    # expr := term (('+'|'-') term)*
    def expr(self) -> Expr:
        node = self.term()
        while self.peek().text in ("+", "-"):
            op = self.next().text
            rhs = self.term()
            node = Add(node, rhs) if op == "+" else Sub(node, rhs)
        return node

    # term := unary (('*'|'/') unary)*
    def term(self) -> Expr:
        node = self.unary()
        while self.peek().text in ("*", "/"):
            op = self.next().text
            rhs = self.unary()
            node = Mul(node, rhs) if op == "*" else Div(node, rhs)
        return node

    # unary := '-' unary | power
    def unary(self) -> Expr:
        if self.peek().text == "-":
            t = self.next()
            inner = self.unary()
            if isinstance(inner, Const):
                return Const(-inner.value)
            return Mul(Const(-1.0), inner)
        return self.power()

    # power := atom ('^' exponent)?
    def power(self) -> Expr:
        base = self.atom()
        if self.peek().text == "^":
            self.next()
            exponent = self.exponent()
            return Pow(base, exponent)
        return base

    def exponent(self) -> float:
        # constant exponent: number, signed number, or parenthesized p/q
        t = self.peek()
        neg = False
        if t.text == "-":
            self.next()
            neg = True
            t = self.peek()
        if t.kind == "num":
            self.next()
            val = float(t.text)
        elif t.text == "(":
            self.next()
            val = self._const_arith()
            self.expect(")")
        else:
            raise ExprSyntaxError("exponent must be a numeric constant", t.offset)
        return -val if neg else val

    def _const_arith(self) -> float:
        t = self.next()
        neg = False
        if t.text == "-":
            neg = True
            t = self.next()
        if t.kind != "num":
            raise ExprSyntaxError("exponent must be a numeric constant", t.offset)
        val = float(t.text)
        if self.peek().text == "/":
            self.next()
            den = self.next()
            if den.kind != "num":
                raise ExprSyntaxError("exponent must be a numeric constant", den.offset)
            val = val / float(den.text)
        return -val if neg else val

    def atom(self) -> Expr:
        t = self.next()
        if t.kind == "num":
            return Const(float(t.text))
        if t.kind == "name":
            if t.text in _FUNCTIONS:
                return self.call(t)
            m = re.fullmatch(r"x(\d+)", t.text)
            if m:
                idx = int(m.group(1))
                if idx < 1 or idx > self.d:
                    raise ExprSyntaxError(
                        f"coordinate {t.text} out of range for dimension {self.d}", t.offset
                    )
                return Coord(idx - 1)
            raise ExprSyntaxError(f"unknown function or symbol {t.text!r}", t.offset)
        if t.text == "(":
            node = self.expr()
            self.expect(")")
            return node
        raise ExprSyntaxError(f"unexpected token {t.text!r}", t.offset)

    def call(self, tok: _Token) -> Expr:
        name = tok.text
        self.expect("(")
        if name == "norm2":
            t = self.next()
            if t.text != "x":
                raise ExprSyntaxError("norm2 takes the full point: norm2(x)", t.offset)
            self.expect(")")
            return Norm2()
        args = [self.expr()]
        while self.peek().text == ",":
            self.next()
            args.append(self.expr())
        self.expect(")")
        arity = {"exp": 1, "ln": 1, "sqrt": 1, "max": 2, "min": 2, "selge": 4}[name]
        if len(args) != arity:
            raise ExprSyntaxError(f"{name} takes {arity} argument(s), got {len(args)}", tok.offset)
        if name == "exp":
            return Exp(args[0])
        if name == "ln":
            return Ln(args[0])
        if name == "sqrt":
            return Sqrt(args[0])
        if name == "max":
            return Max(args[0], args[1])
        if name == "min":
            return Min(args[0], args[1])
        return SelGe(args[0], args[1], args[2], args[3])


def parse_expr(src: str, dimension: int) -> Expr:
    """Parse ``src`` into an AST; coordinates must be ``x1 .. x<dimension>``.

    Raises :class:`ExprSyntaxError` with the byte offset on malformed input,
    out-of-range coordinates, or unknown function names.
    """
    if dimension < 1:
        raise ValueError("dimension must be >= 1")
    parser = _Parser(_tokenize(src), dimension)
    node = parser.expr()
    tail = parser.peek()
    if tail.kind != "end":
        raise ExprSyntaxError(f"trailing input {tail.text!r}", tail.offset)
    return node


# ---------------------------------------------------------------------------
# printer


def _fmt_float(v: float) -> str:
    if v == math.inf:
        return "1e400"  # not expected; keep printable
    r = repr(float(v))
    return r


def to_source(e: Expr) -> str:
    """Canonical printer; ``parse_expr(to_source(t), d)`` reproduces ``t``."""
    if isinstance(e, Const):
        if e.value < 0:
            return f"(-{_fmt_float(-e.value)})"
        return _fmt_float(e.value)
    if isinstance(e, Coord):
        return f"x{e.axis + 1}"
    if isinstance(e, Add):
        return f"({to_source(e.left)} + {to_source(e.right)})"
    if isinstance(e, Sub):
        return f"({to_source(e.left)} - {to_source(e.right)})"
    if isinstance(e, Mul):
        return f"({to_source(e.left)} * {to_source(e.right)})"
    if isinstance(e, Div):
        return f"({to_source(e.left)} / {to_source(e.right)})"
    if isinstance(e, Pow):
        base = to_source(e.base)
        if isinstance(e.base, Pow):
            base = f"({base})"
        if e.exponent < 0:
            return f"{base}^(-{_fmt_float(-e.exponent)})"
        return f"{base}^{_fmt_float(e.exponent)}"
    if isinstance(e, Exp):
        return f"exp({to_source(e.arg)})"
    if isinstance(e, Ln):
        return f"ln({to_source(e.arg)})"
    if isinstance(e, Sqrt):
        return f"sqrt({to_source(e.arg)})"
    if isinstance(e, Norm2):
        return "norm2(x)"
    if isinstance(e, Max):
        return f"max({to_source(e.left)}, {to_source(e.right)})"
    if isinstance(e, Min):
        return f"min({to_source(e.left)}, {to_source(e.right)})"
    if isinstance(e, SelGe):
        return (
            f"selge({to_source(e.a)}, {to_source(e.b)}, "
            f"{to_source(e.then)}, {to_source(e.orelse)})"
        )
    raise TypeError(f"unknown node {e!r}")


# ---------------------------------------------------------------------------
# differentiation


def differentiate(e: Expr, axis: int, piecewise: bool = False) -> Expr:
    """Exact symbolic derivative along the 0-based ``axis``.

    max/min nodes on the differentiation path raise
    :class:`NonDifferentiableError` unless ``piecewise=True``, in which case
    branch derivatives are combined with a selector (ties take the first
    branch).
    """
    if isinstance(e, Const):
        return Const(0.0)
    if isinstance(e, Coord):
        return Const(1.0 if e.axis == axis else 0.0)
    if isinstance(e, Add):
        return add(differentiate(e.left, axis, piecewise), differentiate(e.right, axis, piecewise))
    if isinstance(e, Sub):
        return sub(differentiate(e.left, axis, piecewise), differentiate(e.right, axis, piecewise))
    if isinstance(e, Mul):
        return add(
            mul(differentiate(e.left, axis, piecewise), e.right),
            mul(e.left, differentiate(e.right, axis, piecewise)),
        )
    if isinstance(e, Div):
        num = sub(
            mul(differentiate(e.left, axis, piecewise), e.right),
            mul(e.left, differentiate(e.right, axis, piecewise)),
        )
        return div(num, powc(e.right, 2.0))
    if isinstance(e, Pow):
        du = differentiate(e.base, axis, piecewise)
        return mul(mul(Const(e.exponent), powc(e.base, e.exponent - 1.0)), du)
    if isinstance(e, Exp):
        return mul(differentiate(e.arg, axis, piecewise), e)
    if isinstance(e, Ln):
        return div(differentiate(e.arg, axis, piecewise), e.arg)
    if isinstance(e, Sqrt):
        return div(differentiate(e.arg, axis, piecewise), mul(Const(2.0), e))
    if isinstance(e, Norm2):
        return mul(Const(2.0), Coord(axis))
    if isinstance(e, Max):
        if not piecewise:
            raise NonDifferentiableError(
                "max node on differentiation path; pass piecewise=True to take branch derivatives"
            )
        da = differentiate(e.left, axis, piecewise)
        db = differentiate(e.right, axis, piecewise)
        if da == db:
            return da
        return SelGe(e.left, e.right, da, db)
    if isinstance(e, Min):
        if not piecewise:
            raise NonDifferentiableError(
                "min node on differentiation path; pass piecewise=True to take branch derivatives"
            )
        da = differentiate(e.left, axis, piecewise)
        db = differentiate(e.right, axis, piecewise)
        if da == db:
            return da
        # min selects the first branch at ties: value is `left` where right >= left
        return SelGe(e.right, e.left, da, db)
    if isinstance(e, SelGe):
        dthen = differentiate(e.then, axis, piecewise)
        dorelse = differentiate(e.orelse, axis, piecewise)
        if dthen == dorelse:
            return dthen
        return SelGe(e.a, e.b, dthen, dorelse)
    raise TypeError(f"unknown node {e!r}")


def gradient(e: Expr, dimension: int, piecewise: bool = False) -> list:
    return [differentiate(e, k, piecewise) for k in range(dimension)]


# ---------------------------------------------------------------------------
# evaluation


def evaluate(e: Expr, points: np.ndarray) -> np.ndarray:
    """Vectorized evaluation at ``points`` of shape ``(n, d)`` (or ``(d,)``).

    Out-of-domain points produce ``nan``/``inf`` entries (callers sample grids
    and must mask); use :func:`eval_expr` for strict scalar evaluation.
    """
    pts = np.asarray(points, dtype=float)
    single = pts.ndim == 1
    if single:
        pts = pts[None, :]
    with np.errstate(all="ignore"):
        out = _eval(e, pts)
        out = np.broadcast_to(np.asarray(out, dtype=float), (pts.shape[0],)).copy()
    return out[0] if single else out


def _eval(e: Expr, pts: np.ndarray):
    if isinstance(e, Const):
        return e.value
    if isinstance(e, Coord):
        return pts[:, e.axis]
    if isinstance(e, Add):
        return _eval(e.left, pts) + _eval(e.right, pts)
    if isinstance(e, Sub):
        return _eval(e.left, pts) - _eval(e.right, pts)
    if isinstance(e, Mul):
        return _eval(e.left, pts) * _eval(e.right, pts)
    if isinstance(e, Div):
        return _eval(e.left, pts) / _eval(e.right, pts)
    if isinstance(e, Pow):
        base = _eval(e.base, pts)
        if float(e.exponent).is_integer():
            return np.power(base, e.exponent)
        # fractional exponent of a negative base is a domain failure -> nan
        return np.power(np.asarray(base, dtype=float), e.exponent)
    if isinstance(e, Exp):
        return np.exp(_eval(e.arg, pts))
    if isinstance(e, Ln):
        return np.log(_eval(e.arg, pts))
    if isinstance(e, Sqrt):
        return np.sqrt(_eval(e.arg, pts))
    if isinstance(e, Norm2):
        return np.einsum("ij,ij->i", pts, pts)
    if isinstance(e, Max):
        return np.maximum(_eval(e.left, pts), _eval(e.right, pts))
    if isinstance(e, Min):
        return np.minimum(_eval(e.left, pts), _eval(e.right, pts))
    if isinstance(e, SelGe):
        a = _eval(e.a, pts)
        b = _eval(e.b, pts)
        return np.where(a >= b, _eval(e.then, pts), _eval(e.orelse, pts))
    raise TypeError(f"unknown node {e!r}")


def eval_expr(e: Expr, point) -> float:
    """Strict scalar evaluation; raises :class:`DomainError` with the offending node."""
    pt = np.asarray(point, dtype=float)
    if pt.ndim != 1:
        raise ValueError("eval_expr expects a single point")
    val = evaluate(e, pt)
    if not np.isfinite(val):
        bad = _locate_domain_failure(e, pt)
        raise DomainError(
            f"expression undefined at {pt.tolist()}: offending node {to_source(bad)}", bad, pt
        )
    return float(val)


def _locate_domain_failure(e: Expr, pt: np.ndarray) -> Expr:
    for c in children(e):
        v = evaluate(c, pt)
        if not np.isfinite(v):
            return _locate_domain_failure(c, pt)
    if isinstance(e, Ln) and evaluate(e.arg, pt) <= 0:
        return e
    if isinstance(e, Div) and evaluate(e.right, pt) == 0:
        return e
    if isinstance(e, Sqrt) and evaluate(e.arg, pt) < 0:
        return e
    return e


def fold_const(e: Expr) -> Optional[float]:
    """Value of a constant expression, or None when it mentions coordinates."""
    for node in walk(e):
        if isinstance(node, (Coord, Norm2)):
            return None
    return float(evaluate(e, np.zeros(1)))


PointFunction = Union[Expr, CallableField, Callable[[np.ndarray], np.ndarray]]


def as_point_function(f: PointFunction) -> Callable[[np.ndarray], np.ndarray]:
    """Adapt an AST, CallableField, or raw callable to ``(n, d) -> (n,)``."""
    if isinstance(f, Expr):
        return lambda pts: evaluate(f, pts)
    if isinstance(f, CallableField):
        return f.value
    if callable(f):
        return f
    raise TypeError(f"not a point function: {f!r}")
