"""
Closed-form expression language for drift and noise maps.

Grammar (lowest to highest precedence)::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := '-' unary | power
    power  := atom ('^' unary)?
    atom   := NUMBER | VAR | FUNC '(' expr (',' expr)* ')' | '(' expr ')'

Variables are ``t``, ``x<i>_<j>`` (coordinate j of subsystem i) and
``u<i>_<j>`` (control coordinate j of subsystem i), all indices 1-based.
Functions: ``sin cos exp tanh sqrt abs`` (unary) and ``min max`` (binary).

Expressions evaluate on floats or numpy arrays alike, so the same AST drives
the scalar validators and the vectorized path integrator.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Callable, Mapping, Union

import numpy as np

__all__ = [
    "Expr", "Num", "Var", "Neg", "BinOp", "Call",
    "ExprSyntaxError", "ExprEvalError", "ExprDomainError",
    "parse_expr", "to_text", "eval_expr", "compile_expr",
    "variables", "split_var", "affine_form",
]

FUNCTIONS = {"sin": 1, "cos": 1, "exp": 1, "tanh": 1, "sqrt": 1, "abs": 1,
             "min": 2, "max": 2}

_VAR_RE = re.compile(r"^(?:t|([xu])([1-9][0-9]*)_([1-9][0-9]*))$")


class ExprSyntaxError(ValueError):
    """Malformed expression text; ``pos`` is the 0-based character offset."""

    def __init__(self, message, text="", pos=0):
        self.text = text
        self.pos = pos
        super().__init__(f"{message} at position {pos} in {text!r}")


class ExprEvalError(ValueError):
    pass


class ExprDomainError(ExprEvalError):
    """Raised for sqrt of a negative, division by zero, or non-finite results."""

    def __init__(self, message, subexpr):
        self.subexpr = subexpr
        super().__init__(f"{message} in subexpression {to_text(subexpr)!r}")


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
    name: str
    args: tuple


Expr = Union[Num, Var, Neg, BinOp, Call]


def split_var(name):
    """Return ``(kind, i, j)`` for ``x<i>_<j>``/``u<i>_<j>``, or ``('t', 0, 0)``."""
    m = _VAR_RE.match(name)
    if m is None:
        raise ExprSyntaxError(f"unknown variable {name!r}", name, 0)
    if name == "t":
        return ("t", 0, 0)
    return (m.group(1), int(m.group(2)), int(m.group(3)))


# --------------------------------------------------------------------------
# parsing

_TOKEN_RE = re.compile(r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>[-+*/^(),])
""", re.VERBOSE)


def _tokenize(text):
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ExprSyntaxError(f"unexpected character {text[pos]!r}", text, pos)
        kind = m.lastgroup
        if kind != "ws":
            tokens.append((kind, m.group(), pos))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value):
        kind, tok, pos = self.take()
        if tok != value:
            found = "end of input" if kind == "end" else repr(tok)
            raise ExprSyntaxError(f"expected {value!r}, found {found}", self.text, pos)

    def parse(self):
        e = self.expr()
        kind, tok, pos = self.peek()
        if kind != "end":
            raise ExprSyntaxError(f"unexpected token {tok!r}", self.text, pos)
        return e

    def expr(self):
        left = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            left = BinOp(op, left, self.term())
        return left

    def term(self):
        left = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            left = BinOp(op, left, self.unary())
        return left

    def unary(self):
        if self.peek()[:2] == ("op", "-"):
            self.take()
            return Neg(self.unary())
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[:2] == ("op", "^"):
            self.take()
            return BinOp("^", base, self.unary())
        return base

    def atom(self):
        kind, tok, pos = self.take()
        if kind == "num":
            return Num(float(tok))
        if kind == "name":
            if self.peek()[:2] == ("op", "("):
                if tok not in FUNCTIONS:
                    raise ExprSyntaxError(f"unknown function {tok!r}", self.text, pos)
                self.take()
                args = [self.expr()]
                while self.peek()[:2] == ("op", ","):
                    self.take()
                    args.append(self.expr())
                self.expect(")")
                if len(args) != FUNCTIONS[tok]:
                    raise ExprSyntaxError(
                        f"{tok} takes {FUNCTIONS[tok]} argument(s), got {len(args)}",
                        self.text, pos)
                return Call(tok, tuple(args))
            if tok in FUNCTIONS:
                raise ExprSyntaxError(f"function {tok!r} needs arguments", self.text, pos)
            if _VAR_RE.match(tok) is None:
                raise ExprSyntaxError(f"unknown variable {tok!r}", self.text, pos)
            return Var(tok)
        if (kind, tok) == ("op", "("):
            e = self.expr()
            self.expect(")")
            return e
        found = "end of input" if kind == "end" else repr(tok)
        raise ExprSyntaxError(f"unexpected {found}", self.text, pos)


def parse_expr(text: str) -> Expr:
    """Parse ``text`` into an expression tree.

    >>> parse_expr("x1_1 + 2*u2_1")
    BinOp(op='+', left=Var(name='x1_1'), right=BinOp(op='*', left=Num(value=2.0), right=Var(name='u2_1')))
    """
    if not isinstance(text, str) or not text.strip():
        raise ExprSyntaxError("empty expression", str(text), 0)
    return _Parser(text).parse()


# --------------------------------------------------------------------------
# printing

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "^": 4}


def _fmt(e):
    if isinstance(e, Num):
        return repr(float(e.value)), 5
    if isinstance(e, Var):
        return e.name, 5
    if isinstance(e, Call):
        return f"{e.name}({', '.join(_fmt(a)[0] for a in e.args)})", 5
    if isinstance(e, Neg):
        s, p = _fmt(e.operand)
        return "-" + (s if p >= 3 else f"({s})"), 3
    s_l, p_l = _fmt(e.left)
    s_r, p_r = _fmt(e.right)
    if e.op == "^":
        if p_l < 5:
            s_l = f"({s_l})"
        if p_r < 3:
            s_r = f"({s_r})"
        return f"{s_l}^{s_r}", 4
    p = _PREC[e.op]
    if p_l < p:
        s_l = f"({s_l})"
    if p_r <= p:
        s_r = f"({s_r})"
    return f"{s_l} {e.op} {s_r}", p


def to_text(e: Expr) -> str:
    """Render an expression so that ``parse_expr(to_text(e)) == e``."""
    return _fmt(e)[0]


# --------------------------------------------------------------------------
# evaluation

def _check(value, node):
    if not np.all(np.isfinite(value)):
        raise ExprDomainError("non-finite value", node)
    return value


def _compile(e):
    if isinstance(e, Num):
        v = float(e.value)
        return lambda env: v
    if isinstance(e, Var):
        name = e.name

        def var(env):
            try:
                return env[name]
            except KeyError:
                raise ExprEvalError(f"unbound variable {name!r}") from None
        return var
    if isinstance(e, Neg):
        f = _compile(e.operand)
        return lambda env: -f(env)
    if isinstance(e, Call):
        fs = [_compile(a) for a in e.args]
        name = e.name
        if name == "sqrt":
            def sqrt(env, f=fs[0]):
                a = f(env)
                if np.any(np.asarray(a) < 0):
                    raise ExprDomainError("sqrt of negative argument", e)
                return np.sqrt(a)
            return sqrt
        if name in ("min", "max"):
            g = np.minimum if name == "min" else np.maximum
            return lambda env: g(fs[0](env), fs[1](env))
        if name == "exp":
            def exp(env, f=fs[0]):
                with np.errstate(over="ignore"):
                    return _check(np.exp(f(env)), e)
            return exp
        g = {"sin": np.sin, "cos": np.cos, "tanh": np.tanh, "abs": np.abs}[name]
        return lambda env: g(fs[0](env))
    fl, fr = _compile(e.left), _compile(e.right)
    op = e.op
    if op == "+":
        return lambda env: fl(env) + fr(env)
    if op == "-":
        return lambda env: fl(env) - fr(env)
    if op == "*":
        return lambda env: fl(env) * fr(env)
    if op == "/":
        def div(env):
            num, den = fl(env), fr(env)
            if np.any(np.asarray(den) == 0):
                raise ExprDomainError("division by zero", e)
            return num / den
        return div

    def power(env):
        with np.errstate(all="ignore"):
            val = np.power(np.asarray(fl(env), dtype=float), fr(env))
        return _check(val, e)
    return power


def compile_expr(e: Expr) -> Callable[[Mapping], object]:
    """Compile ``e`` into a callable ``f(env)``; env values may be arrays.

    The returned value is checked for finiteness; domain violations raise
    :class:`ExprDomainError` naming the offending subexpression.
    """
    f = _compile(e)

    def run(env):
        return _check(f(env), e)
    return run


def eval_expr(e: Expr, env: Mapping) -> float:
    return compile_expr(e)(env)


def variables(e: Expr) -> set:
    if isinstance(e, Var):
        return {e.name}
    if isinstance(e, Num):
        return set()
    if isinstance(e, Neg):
        return variables(e.operand)
    if isinstance(e, Call):
        out = set()
        for a in e.args:
            out |= variables(a)
        return out
    return variables(e.left) | variables(e.right)


def affine_form(e: Expr):
    """Return ``(coeffs, const)`` if ``e`` is affine in its variables, else None.

    ``coeffs`` maps variable names to float coefficients. Subtrees without
    variables are folded numerically; any dependence on ``t`` counts as
    non-affine since it makes the coefficients time-varying.
    """
    if not variables(e):
        try:
            return {}, float(eval_expr(e, {}))
        except ExprEvalError:
            return None
    if isinstance(e, Var):
        if e.name == "t":
            return None
        return {e.name: 1.0}, 0.0
    if isinstance(e, Neg):
        inner = affine_form(e.operand)
        if inner is None:
            return None
        return {k: -c for k, c in inner[0].items()}, -inner[1]
    if isinstance(e, BinOp):
        a, b = affine_form(e.left), affine_form(e.right)
        if a is None or b is None:
            return None
        if e.op in ("+", "-"):
            s = 1.0 if e.op == "+" else -1.0
            coeffs = dict(a[0])
            for k, c in b[0].items():
                coeffs[k] = coeffs.get(k, 0.0) + s * c
            return coeffs, a[1] + s * b[1]
        if e.op == "*":
            if not a[0]:
                return {k: a[1] * c for k, c in b[0].items()}, a[1] * b[1]
            if not b[0]:
                return {k: b[1] * c for k, c in a[0].items()}, a[1] * b[1]
            return None
        if e.op == "/" and not b[0] and b[1] != 0:
            return {k: c / b[1] for k, c in a[0].items()}, a[1] / b[1]
        return None
    return None
