"""Small arithmetic expression language for problem data.

Hamiltonians, terminal payoffs, impulse costs and bump terms enter the
library as infix strings over a declared variable set (t, x1..xn, p1..pn,
xi1..xin, plus whatever extra names a caller admits).  The grammar is
deliberately tiny:

    expr   := term  (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := '-' unary | power
    power  := atom ('^' unary)?          # right associative
    atom   := NUMBER | NAME | NAME '(' expr {',' expr} ')' | '(' expr ')'

so '^' binds above '*' and '/', which bind above binary '+' and '-', and a
unary minus binds tighter than a binary minus ("-a - b" is "(-a) - b").
Exponentiation is right associative: "2^3^2" is 2^(3^2) = 512.

Numbers are decimal literals with optional scientific notation.  Functions:
exp, log, sqrt, abs, sin, cos, sign (one argument) and min, max (two).

Evaluation works elementwise on floats or numpy arrays and either returns a
finite result or raises DomainError naming the offending operation and the
first offending argument value.  ASTs are immutable; `to_source` prints a
fully parenthesized form that reparses to an equivalent tree.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np


class ExprError(Exception):
    """Base class for expression failures."""


class ParseError(ExprError):
    def __init__(self, message, pos):
        super().__init__(f"{message} (at position {pos})")
        self.pos = pos


class UndeclaredVariableError(ExprError):
    def __init__(self, name, pos, allowed):
        allowed_list = ", ".join(sorted(allowed)) if allowed else "(none)"
        super().__init__(
            f"undeclared variable '{name}' (at position {pos}); declared: {allowed_list}"
        )
        self.name = name
        self.pos = pos


class DomainError(ExprError):
    def __init__(self, op, value):
        super().__init__(f"domain error in '{op}' for argument {value!r}")
        self.op = op
        self.value = value


# ----------------------------------------------------------------- AST ----

@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    arg: object


@dataclass(frozen=True)
class Bin:
    op: str
    left: object
    right: object


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple


_UNARY_FUNCS = ("exp", "log", "sqrt", "abs", "sin", "cos", "sign")
_BINARY_FUNCS = ("min", "max")
FUNCTION_NAMES = _UNARY_FUNCS + _BINARY_FUNCS

_TOKEN_RE = re.compile(
    r"\s*(?:"
    r"(?P<num>(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^(),])"
    r")"
)


def _tokenize(source):
    tokens = []
    pos = 0
    while pos < len(source):
        m = _TOKEN_RE.match(source, pos)
        if m is None or m.end() == pos:
            # skip leading whitespace before complaining
            stripped = source[pos:].lstrip()
            if not stripped:
                break
            bad_at = len(source) - len(stripped)
            raise ParseError(f"unexpected character {source[bad_at]!r}", bad_at)
        if m.group("num") is not None:
            tokens.append(("num", m.group("num"), m.start("num")))
        elif m.group("name") is not None:
            tokens.append(("name", m.group("name"), m.start("name")))
        else:
            tokens.append(("op", m.group("op"), m.start("op")))
        pos = m.end()
    tokens.append(("end", "", len(source)))
    return tokens


class _Parser:
    def __init__(self, tokens, allowed_vars):
        self.tokens = tokens
        self.i = 0
        self.allowed = frozenset(allowed_vars)

    def peek(self):
        return self.tokens[self.i]

    def advance(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect_op(self, symbol):
        kind, text, pos = self.peek()
        if kind != "op" or text != symbol:
            raise ParseError(f"expected '{symbol}'", pos)
        return self.advance()

    def parse_expr(self):
        node = self.parse_term()
        while True:
            kind, text, _ = self.peek()
            if kind == "op" and text in "+-":
                self.advance()
                node = Bin(text, node, self.parse_term())
            else:
                return node

    def parse_term(self):
        node = self.parse_unary()
        while True:
            kind, text, _ = self.peek()
            if kind == "op" and text in "*/":
                self.advance()
                node = Bin(text, node, self.parse_unary())
            else:
                return node

    def parse_unary(self):
        kind, text, _ = self.peek()
        if kind == "op" and text == "-":
            self.advance()
            return Neg(self.parse_unary())
        return self.parse_power()

    def parse_power(self):
        base = self.parse_atom()
        kind, text, _ = self.peek()
        if kind == "op" and text == "^":
            self.advance()
            return Bin("^", base, self.parse_unary())
        return base

    def parse_atom(self):
        kind, text, pos = self.advance()
        if kind == "num":
            return Num(float(text))
        if kind == "name":
            nxt_kind, nxt_text, _ = self.peek()
            if nxt_kind == "op" and nxt_text == "(":
                return self.parse_call(text, pos)
            if text in FUNCTION_NAMES:
                raise ParseError(f"function '{text}' needs an argument list", pos)
            if text not in self.allowed:
                raise UndeclaredVariableError(text, pos, self.allowed)
            return Var(text)
        if kind == "op" and text == "(":
            node = self.parse_expr()
            self.expect_op(")")
            return node
        raise ParseError(f"unexpected token {text!r}" if text else "unexpected end of input", pos)

    def parse_call(self, func, pos):
        if func not in FUNCTION_NAMES:
            raise ParseError(f"unknown function '{func}'", pos)
        self.expect_op("(")
        args = [self.parse_expr()]
        while True:
            kind, text, _ = self.peek()
            if kind == "op" and text == ",":
                self.advance()
                args.append(self.parse_expr())
            else:
                break
        self.expect_op(")")
        want = 1 if func in _UNARY_FUNCS else 2
        if len(args) != want:
            raise ParseError(f"function '{func}' takes {want} argument(s), got {len(args)}", pos)
        return Call(func, tuple(args))


def parse(source, allowed_vars=()):
    """Parse `source` into an immutable AST.

    Raises ParseError on malformed input and UndeclaredVariableError for any
    name outside `allowed_vars` (function names are always reserved).
    """
    parser = _Parser(_tokenize(source), allowed_vars)
    node = parser.parse_expr()
    kind, text, pos = parser.peek()
    if kind != "end":
        raise ParseError(f"trailing input {text!r}", pos)
    return node


# ----------------------------------------------------------- evaluation ----

def _first_offender(values, mask):
    values, mask = np.broadcast_arrays(np.asarray(values, dtype=float), mask)
    idx = np.argwhere(mask)
    if idx.size == 0:
        return float(np.ravel(values)[0]) if values.size else float("nan")
    return float(values[tuple(idx[0])])


def _check_finite(result, op, argument):
    bad = ~np.isfinite(result)
    if np.any(bad):
        raise DomainError(op, _first_offender(argument, bad))
    return result


def _eval_power(base, expo):
    base, expo = np.broadcast_arrays(
        np.asarray(base, dtype=float), np.asarray(expo, dtype=float)
    )
    neg_frac = (base < 0.0) & (np.mod(expo, 1.0) != 0.0)
    if np.any(neg_frac):
        raise DomainError("^", _first_offender(base, neg_frac))
    zero_neg = (base == 0.0) & (expo < 0.0)
    if np.any(zero_neg):
        raise DomainError("^", 0.0)
    with np.errstate(all="ignore"):
        out = np.power(base, expo)
    return _check_finite(out, "^", base)


def evaluate(node, env):
    """Evaluate an AST against an environment of floats or numpy arrays.

    Array values broadcast elementwise.  Returns a numpy array, or a plain
    float when every input is scalar.
    """
    out = _eval(node, env)
    if np.ndim(out) == 0:
        return float(out)
    return out


def _eval(node, env):
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        try:
            return env[node.name]
        except KeyError:
            raise UndeclaredVariableError(node.name, -1, env.keys()) from None
    if isinstance(node, Neg):
        return np.negative(_eval(node.arg, env))
    if isinstance(node, Bin):
        left = _eval(node.left, env)
        right = _eval(node.right, env)
        if node.op == "+":
            return _check_finite(np.add(left, right), "+", left)
        if node.op == "-":
            return _check_finite(np.subtract(left, right), "-", left)
        if node.op == "*":
            with np.errstate(all="ignore"):
                return _check_finite(np.multiply(left, right), "*", left)
        if node.op == "/":
            zero = np.asarray(right, dtype=float) == 0.0
            if np.any(zero):
                raise DomainError("/", 0.0)
            with np.errstate(all="ignore"):
                return _check_finite(np.divide(left, right), "/", left)
        if node.op == "^":
            return _eval_power(left, right)
        raise ExprError(f"unknown operator {node.op!r}")
    if isinstance(node, Call):
        args = [_eval(a, env) for a in node.args]
        return _eval_call(node.func, args)
    raise ExprError(f"unknown node {node!r}")


def _eval_call(func, args):
    a = np.asarray(args[0], dtype=float)
    if func == "exp":
        with np.errstate(all="ignore"):
            return _check_finite(np.exp(a), "exp", a)
    if func == "log":
        bad = a <= 0.0
        if np.any(bad):
            raise DomainError("log", _first_offender(a, bad))
        return np.log(a)
    if func == "sqrt":
        bad = a < 0.0
        if np.any(bad):
            raise DomainError("sqrt", _first_offender(a, bad))
        return np.sqrt(a)
    if func == "abs":
        return np.abs(a)
    if func == "sin":
        return np.sin(a)
    if func == "cos":
        return np.cos(a)
    if func == "sign":
        return np.sign(a)
    if func == "min":
        return np.minimum(a, args[1])
    if func == "max":
        return np.maximum(a, args[1])
    raise ExprError(f"unknown function {func!r}")


# -------------------------------------------------------------- printing ----

def to_source(node):
    """Print a fully parenthesized form that reparses to an equivalent AST."""
    if isinstance(node, Num):
        return repr(node.value)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Neg):
        return f"(-{to_source(node.arg)})"
    if isinstance(node, Bin):
        return f"({to_source(node.left)} {node.op} {to_source(node.right)})"
    if isinstance(node, Call):
        return f"{node.func}({', '.join(to_source(a) for a in node.args)})"
    raise ExprError(f"unknown node {node!r}")


def variables(node):
    """Set of variable names appearing in the AST."""
    if isinstance(node, Num):
        return set()
    if isinstance(node, Var):
        return {node.name}
    if isinstance(node, Neg):
        return variables(node.arg)
    if isinstance(node, Bin):
        return variables(node.left) | variables(node.right)
    if isinstance(node, Call):
        out = set()
        for a in node.args:
            out |= variables(a)
        return out
    raise ExprError(f"unknown node {node!r}")
