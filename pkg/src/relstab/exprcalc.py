"""Scalar expressions over phase-space coordinates.

Expressions are small immutable trees built from constants, coordinate
references, sums, products, non-negative integer powers, negation and the
unary functions ``sin``, ``cos`` and ``exp``.  They are parsed from text,
printed back to re-parseable text, differentiated exactly and compiled to
Python closures for fast evaluation, either on plain floats (``math``
backend) or on numpy arrays holding a batch of points (``numpy`` backend).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from relstab.errors import EvaluationError, ExprSyntaxError

FUNCTIONS = ("sin", "cos", "exp")


class Expr:
    """Base class of all expression nodes."""

    __slots__ = ()

    def __add__(self, other):
        return add(self, as_expr(other))

    def __radd__(self, other):
        return add(as_expr(other), self)

    def __sub__(self, other):
        return add(self, neg(as_expr(other)))

    def __rsub__(self, other):
        return add(as_expr(other), neg(self))

    def __mul__(self, other):
        return mul(self, as_expr(other))

    def __rmul__(self, other):
        return mul(as_expr(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, k: int):
        return power(self, k)

    def __call__(self, z) -> float:
        return evaluate(self, z)


@dataclass(frozen=True, eq=True)
class Const(Expr):
    value: float


@dataclass(frozen=True, eq=True)
class Var(Expr):
    index: int


@dataclass(frozen=True, eq=True)
class Add(Expr):
    terms: tuple


@dataclass(frozen=True, eq=True)
class Mul(Expr):
    factors: tuple


@dataclass(frozen=True, eq=True)
class Pow(Expr):
    base: Expr
    exponent: int


@dataclass(frozen=True, eq=True)
class Neg(Expr):
    arg: Expr


@dataclass(frozen=True, eq=True)
class Func(Expr):
    name: str
    arg: Expr


ZERO = Const(0.0)
ONE = Const(1.0)


def as_expr(x) -> Expr:
    if isinstance(x, Expr):
        return x
    return Const(float(x))


def is_const(e: Expr, value: float | None = None) -> bool:
    if not isinstance(e, Const):
        return False
    return value is None or e.value == value


# -- smart constructors: constant folding and zero dropping only ------------


def add(*terms: Expr) -> Expr:
    flat: list[Expr] = []
    total = 0.0
    for t in terms:
        parts = t.terms if isinstance(t, Add) else (t,)
        for p in parts:
            if isinstance(p, Const):
                total += p.value
            else:
                flat.append(p)
    if total != 0.0:
        flat.append(Const(total))
    if not flat:
        return ZERO
    if len(flat) == 1:
        return flat[0]
    return Add(tuple(flat))


def mul(*factors: Expr) -> Expr:
    flat: list[Expr] = []
    coeff = 1.0
    for f in factors:
        parts = f.factors if isinstance(f, Mul) else (f,)
        for p in parts:
            if isinstance(p, Const):
                coeff *= p.value
            else:
                flat.append(p)
    if coeff == 0.0:
        return ZERO
    if not flat:
        return Const(coeff)
    if coeff == -1.0:
        return neg(flat[0] if len(flat) == 1 else Mul(tuple(flat)))
    if coeff != 1.0:
        flat.insert(0, Const(coeff))
    if len(flat) == 1:
        return flat[0]
    return Mul(tuple(flat))


def neg(e: Expr) -> Expr:
    if isinstance(e, Const):
        return Const(-e.value)
    if isinstance(e, Neg):
        return e.arg
    return Neg(e)


def power(e: Expr, k: int) -> Expr:
    if int(k) != k or k < 0:
        raise ValueError(f"exponent must be a non-negative integer, got {k!r}")
    k = int(k)
    if k == 0:
        return ONE
    if k == 1:
        return e
    if isinstance(e, Const):
        return Const(e.value**k)
    return Pow(e, k)


def func(name: str, e: Expr) -> Expr:
    if name not in FUNCTIONS:
        raise ValueError(f"unknown function {name!r}")
    if isinstance(e, Const):
        return Const(getattr(math, name)(e.value))
    return Func(name, e)


def var(index: int) -> Var:
    return Var(int(index))


# -- parsing -----------------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^()]))"
)


@dataclass
class _Token:
    kind: str
    text: str
    offset: int


def _tokenize(text: str) -> list[_Token]:
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            start = pos + len(text[pos:]) - len(text[pos:].lstrip())
            raise ExprSyntaxError(f"unexpected character {text[start]!r}", _byte(text, start))
        kind = m.lastgroup
        tokens.append(_Token(kind, m.group(kind), m.start(kind)))
        pos = m.end()
    tokens.append(_Token("end", "", len(text)))
    return tokens


def _byte(text: str, offset: int) -> int:
    return len(text[:offset].encode("utf-8"))


class _Parser:
    def __init__(self, text: str, coords: Sequence[str]):
        self.text = text
        self.index = {name: i for i, name in enumerate(coords)}
        self.tokens = _tokenize(text)
        self.pos = 0

    def error(self, msg: str, tok: _Token | None = None):
        tok = tok or self.peek()
        raise ExprSyntaxError(msg, _byte(self.text, tok.offset))

    def peek(self) -> _Token:
        return self.tokens[self.pos]

    def take(self) -> _Token:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def accept(self, op: str) -> bool:
        tok = self.peek()
        if tok.kind == "op" and tok.text == op:
            self.pos += 1
            return True
        return False

    def expect(self, op: str):
        if not self.accept(op):
            tok = self.peek()
            found = tok.text or "end of input"
            self.error(f"expected {op!r}, found {found!r}")

    def parse(self) -> Expr:
        e = self.expr()
        if self.peek().kind != "end":
            self.error(f"unexpected {self.peek().text!r}")
        return e

    def expr(self) -> Expr:
        e = self.term()
        while True:
            if self.accept("+"):
                e = add(e, self.term())
            elif self.accept("-"):
                e = add(e, neg(self.term()))
            else:
                return e

    def term(self) -> Expr:
        e = self.unary()
        while True:
            if self.accept("*"):
                e = mul(e, self.unary())
            elif self.peek().kind == "op" and self.peek().text == "/":
                tok = self.take()
                d = self.unary()
                if not isinstance(d, Const):
                    self.error("division by a non-constant expression", tok)
                if d.value == 0.0:
                    self.error("division by zero", tok)
                e = mul(e, Const(1.0 / d.value))
            else:
                return e

    def unary(self) -> Expr:
        if self.accept("-"):
            return neg(self.unary())
        if self.accept("+"):
            return self.unary()
        return self.power()

    def power(self) -> Expr:
        e = self.atom()
        while self.peek().kind == "op" and self.peek().text == "^":
            self.take()
            paren = self.accept("(")
            tok = self.take()
            if tok.kind != "num" or not re.fullmatch(r"\d+", tok.text):
                self.error("exponent must be a non-negative integer literal", tok)
            if paren:
                self.expect(")")
            e = power(e, int(tok.text))
        return e

    def atom(self) -> Expr:
        tok = self.take()
        if tok.kind == "num":
            return Const(float(tok.text))
        if tok.kind == "name":
            if tok.text in FUNCTIONS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return func(tok.text, arg)
            if tok.text not in self.index:
                self.error(f"unknown identifier {tok.text!r}", tok)
            return Var(self.index[tok.text])
        if tok.kind == "op" and tok.text == "(":
            e = self.expr()
            self.expect(")")
            return e
        self.error(f"unexpected {tok.text or 'end of input'!r}", tok)


def parse(text: str, coords: Sequence[str]) -> Expr:
    """Parse ``text`` into an expression over the named coordinates.

    Precedence from tightest: ``^`` (integer literal exponents only), unary
    minus, ``*`` and ``/``, then ``+`` and ``-``.  Division is accepted only
    by nonzero constant expressions.

    Raises
    ------
    ExprSyntaxError
        With the byte offset of the offending token.
    """
    return _Parser(text, coords).parse()


# -- printing ----------------------------------------------------------------


def to_string(e: Expr, coords: Sequence[str]) -> str:
    """Print ``e`` with explicit ``*`` and full parenthesization."""
    if isinstance(e, Const):
        s = repr(float(e.value))
        return f"({s})" if e.value < 0 or s.startswith("-") else s
    if isinstance(e, Var):
        return coords[e.index]
    if isinstance(e, Add):
        return "(" + " + ".join(to_string(t, coords) for t in e.terms) + ")"
    if isinstance(e, Mul):
        return "(" + " * ".join(to_string(f, coords) for f in e.factors) + ")"
    if isinstance(e, Pow):
        base = to_string(e.base, coords)
        if not base.startswith("("):
            base = f"({base})"
        return f"{base}^{e.exponent}"
    if isinstance(e, Neg):
        return f"(-{to_string(e.arg, coords)})"
    if isinstance(e, Func):
        return f"{e.name}({to_string(e.arg, coords)})"
    raise TypeError(f"not an expression: {e!r}")


# -- structure ---------------------------------------------------------------


def free_indices(e: Expr) -> frozenset:
    if isinstance(e, Var):
        return frozenset((e.index,))
    if isinstance(e, Const):
        return frozenset()
    return frozenset().union(*(free_indices(c) for c in children(e)))


def children(e: Expr) -> tuple:
    if isinstance(e, Add):
        return e.terms
    if isinstance(e, Mul):
        return e.factors
    if isinstance(e, (Pow,)):
        return (e.base,)
    if isinstance(e, (Neg, Func)):
        return (e.arg,)
    return ()


def max_index(e: Expr) -> int:
    idx = free_indices(e)
    return max(idx) if idx else -1


def substitute(e: Expr, replacements: Sequence[Expr]) -> Expr:
    """Replace every ``Var(i)`` by ``replacements[i]`` (a pull-back)."""
    if isinstance(e, Const):
        return e
    if isinstance(e, Var):
        return replacements[e.index]
    if isinstance(e, Add):
        return add(*(substitute(t, replacements) for t in e.terms))
    if isinstance(e, Mul):
        return mul(*(substitute(f, replacements) for f in e.factors))
    if isinstance(e, Pow):
        return power(substitute(e.base, replacements), e.exponent)
    if isinstance(e, Neg):
        return neg(substitute(e.arg, replacements))
    if isinstance(e, Func):
        return func(e.name, substitute(e.arg, replacements))
    raise TypeError(f"not an expression: {e!r}")


def linear_form(coeffs: Sequence[float], offset: float = 0.0) -> Expr:
    """``sum_i coeffs[i] * z_i + offset``, zero coefficients dropped."""
    terms = [mul(Const(float(c)), Var(i)) for i, c in enumerate(coeffs) if c != 0.0]
    return add(*terms, Const(float(offset)))


def quadratic_form(matrix, scale: float = 1.0) -> Expr:
    """``scale * z^T M z`` for a symmetric matrix ``M``."""
    m = np.asarray(matrix, dtype=float)
    terms = []
    for i in range(m.shape[0]):
        if m[i, i] != 0.0:
            terms.append(mul(Const(scale * m[i, i]), power(Var(i), 2)))
        for j in range(i + 1, m.shape[0]):
            c = m[i, j] + m[j, i]
            if c != 0.0:
                terms.append(mul(Const(scale * c), Var(i), Var(j)))
    return add(*terms)


# -- differentiation ---------------------------------------------------------


def differentiate(e: Expr, i: int) -> Expr:
    """Exact partial derivative with respect to coordinate ``i``."""
    if isinstance(e, Const):
        return ZERO
    if isinstance(e, Var):
        return ONE if e.index == i else ZERO
    if i not in free_indices(e):
        return ZERO
    if isinstance(e, Add):
        return add(*(differentiate(t, i) for t in e.terms))
    if isinstance(e, Mul):
        fs = e.factors
        terms = []
        for k, f in enumerate(fs):
            df = differentiate(f, i)
            if is_const(df, 0.0):
                continue
            terms.append(mul(*fs[:k], df, *fs[k + 1 :]))
        return add(*terms)
    if isinstance(e, Pow):
        db = differentiate(e.base, i)
        return mul(Const(float(e.exponent)), power(e.base, e.exponent - 1), db)
    if isinstance(e, Neg):
        return neg(differentiate(e.arg, i))
    if isinstance(e, Func):
        da = differentiate(e.arg, i)
        if e.name == "sin":
            outer = func("cos", e.arg)
        elif e.name == "cos":
            outer = neg(func("sin", e.arg))
        else:
            outer = e
        return mul(outer, da)
    raise TypeError(f"not an expression: {e!r}")


def gradient_exprs(e: Expr, ndim: int) -> list[Expr]:
    return [differentiate(e, i) for i in range(ndim)]


def hessian_exprs(e: Expr, ndim: int, grad: Sequence[Expr] | None = None) -> list[list[Expr]]:
    """Second partials, each unordered pair differentiated once."""
    grad = grad if grad is not None else gradient_exprs(e, ndim)
    out = [[ZERO] * ndim for _ in range(ndim)]
    for i in range(ndim):
        for j in range(i, ndim):
            d = differentiate(grad[i], j)
            out[i][j] = d
            out[j][i] = d
    return out


# -- compilation and evaluation ----------------------------------------------


def _emit(e: Expr) -> str:
    if isinstance(e, Const):
        return repr(float(e.value))
    if isinstance(e, Var):
        return f"z[{e.index}]"
    if isinstance(e, Add):
        return "(" + " + ".join(_emit(t) for t in e.terms) + ")"
    if isinstance(e, Mul):
        return "(" + " * ".join(_emit(f) for f in e.factors) + ")"
    if isinstance(e, Pow):
        if e.exponent == 2:
            b = _emit(e.base)
            return f"({b} * {b})" if isinstance(e.base, Var) else f"({b} ** 2)"
        return f"({_emit(e.base)} ** {e.exponent})"
    if isinstance(e, Neg):
        return f"(-{_emit(e.arg)})"
    if isinstance(e, Func):
        return f"{e.name}({_emit(e.arg)})"
    raise TypeError(f"not an expression: {e!r}")


_NAMESPACES = {
    "math": {"sin": math.sin, "cos": math.cos, "exp": math.exp},
    "numpy": {"sin": np.sin, "cos": np.cos, "exp": np.exp},
}


def compile_exprs(exprs: Sequence[Expr], backend: str = "math") -> Callable:
    """Compile expressions into one closure ``f(z) -> tuple``.

    With the ``numpy`` backend ``z`` may be an array of shape ``(ndim, batch)``
    and each output broadcasts over the batch axis.
    """
    body = ", ".join(_emit(e) for e in exprs)
    src = f"def _compiled(z):\n    return ({body}{',' if len(exprs) == 1 else ''})\n"
    ns = dict(_NAMESPACES[backend])
    exec(compile(src, "<relstab-expr>", "exec"), ns)
    return ns["_compiled"]


def evaluate(e: Expr, z) -> float:
    """Evaluate at a single point."""
    f = _scalar_cache(e)
    try:
        value = f(tuple(float(v) for v in z))[0]
    except OverflowError as exc:
        raise EvaluationError(f"overflow while evaluating expression: {exc}") from exc
    except IndexError as exc:
        raise EvaluationError("point has fewer coordinates than the expression uses") from exc
    if not math.isfinite(value):
        raise EvaluationError("expression evaluated to a non-finite value")
    return value


_cache: dict = {}


def _scalar_cache(e: Expr):
    f = _cache.get(id(e))
    if f is None or f[0] is not e:
        if len(_cache) > 4096:
            _cache.clear()
        f = (e, compile_exprs([e]))
        _cache[id(e)] = f
    return f[1]


def gradient(e: Expr, z) -> np.ndarray:
    return CompiledFunction(e, len(z)).gradient(z)


def hessian(e: Expr, z) -> np.ndarray:
    return CompiledFunction(e, len(z)).hessian(z)


@dataclass
class CompiledFunction:
    """Value, gradient and Hessian of one expression, compiled for reuse.

    ``*_batch`` methods take points stacked as columns, shape ``(ndim, B)``.
    """

    expr: Expr
    ndim: int
    grad_exprs: list = field(init=False, repr=False)
    hess_exprs: list = field(init=False, repr=False)

    def __post_init__(self):
        if max_index(self.expr) >= self.ndim:
            raise ValueError("expression references a coordinate beyond ndim")
        self.grad_exprs = gradient_exprs(self.expr, self.ndim)
        self.hess_exprs = hessian_exprs(self.expr, self.ndim, self.grad_exprs)
        n = self.ndim
        upper = [self.hess_exprs[i][j] for i in range(n) for j in range(i, n)]
        self._iu = np.triu_indices(n)
        self._val = compile_exprs([self.expr])
        self._grad = compile_exprs(self.grad_exprs)
        self._hess = compile_exprs(upper)
        self._val_b = compile_exprs([self.expr], "numpy")
        self._grad_b = compile_exprs(self.grad_exprs, "numpy")
        self._hess_b = compile_exprs(upper, "numpy")
        self.hessian_is_constant = all(isinstance(h, Const) for h in upper)

    def _call(self, f, z):
        try:
            return f(tuple(float(v) for v in z))
        except OverflowError as exc:
            raise EvaluationError(f"overflow while evaluating expression: {exc}") from exc

    def value(self, z) -> float:
        v = self._call(self._val, z)[0]
        if not math.isfinite(v):
            raise EvaluationError("expression evaluated to a non-finite value")
        return v

    def gradient(self, z) -> np.ndarray:
        g = np.array(self._call(self._grad, z), dtype=float)
        if not np.all(np.isfinite(g)):
            raise EvaluationError("gradient evaluated to a non-finite value")
        return g

    def hessian(self, z) -> np.ndarray:
        upper = self._call(self._hess, z)
        h = np.empty((self.ndim, self.ndim))
        h[self._iu] = upper
        h.T[self._iu] = upper
        if not np.all(np.isfinite(h)):
            raise EvaluationError("Hessian evaluated to a non-finite value")
        return h

    def value_batch(self, z: np.ndarray) -> np.ndarray:
        return _batch_call(self._val_b, z)[0]

    def gradient_batch(self, z: np.ndarray) -> np.ndarray:
        return _batch_call(self._grad_b, z)

    def hessian_batch(self, z: np.ndarray) -> np.ndarray:
        """Shape ``(B, ndim, ndim)``."""
        upper = np.moveaxis(_batch_call(self._hess_b, z), 0, -1)
        h = np.empty(z.shape[1:] + (self.ndim, self.ndim))
        h[..., self._iu[0], self._iu[1]] = upper
        h[..., self._iu[1], self._iu[0]] = upper
        return h


def _batch_call(f, z: np.ndarray) -> np.ndarray:
    with np.errstate(over="raise", invalid="raise"):
        try:
            values = f(z)
            out = np.empty((len(values),) + z.shape[1:])
            for k, v in enumerate(values):
                out[k] = v
        except FloatingPointError as exc:
            raise EvaluationError(f"overflow while evaluating expression: {exc}") from exc
    return out
