"""Rate expressions over normalized counting variables.

Expressions are written in a tiny arithmetic language: decimal literals,
parameter names, variables ``x_<state>``, the binary operators ``+ - * /``,
unary minus and parentheses.  Python's own tokenizer/parser is reused and the
resulting tree is whitelisted node by node.
"""

from __future__ import annotations

import ast
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Mapping, Sequence, Union

import numpy as np


class ExprError(ValueError):
    """Raised for malformed or unevaluable rate expressions."""

    def __init__(self, message: str, position: int | None = None):
        self.position = position
        if position is not None:
            message = f"{message} (at column {position + 1})"
        super().__init__(message)


@dataclass(frozen=True)
class Num:
    value: Fraction


@dataclass(frozen=True)
class Param:
    name: str


@dataclass(frozen=True)
class Var:
    state: str


@dataclass(frozen=True)
class Neg:
    operand: "Expr"


@dataclass(frozen=True)
class BinOp:
    op: str  # one of + - * /
    left: "Expr"
    right: "Expr"


Expr = Union[Num, Param, Var, Neg, BinOp]

_BINOPS = {ast.Add: "+", ast.Sub: "-", ast.Mult: "*", ast.Div: "/"}
_PRECEDENCE = {"+": 1, "-": 1, "*": 2, "/": 2}


def parse_expr(text: str) -> Expr:
    """Parse ``text`` into an expression tree.

    Identifiers starting with ``x_`` are variables, everything else is a
    parameter name; names are resolved when the model is validated.
    """
    try:
        tree = ast.parse(text.strip(), mode="eval")
    except SyntaxError as exc:
        offset = (exc.offset or 1) - 1
        raise ExprError(f"syntax error in rate expression {text!r}", offset) from None
    source = text.strip()

    def convert(node: ast.AST) -> Expr:
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            return BinOp(_BINOPS[type(node.op)], convert(node.left), convert(node.right))
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            inner = convert(node.operand)
            return Neg(inner) if isinstance(node.op, ast.USub) else inner
        if isinstance(node, ast.Constant) and type(node.value) in (int, float):
            literal = ast.get_source_segment(source, node)
            try:
                return Num(Fraction(literal))
            except (TypeError, ValueError):
                raise ExprError(f"bad numeric literal {literal!r}", node.col_offset) from None
        if isinstance(node, ast.Name):
            if node.id.startswith("x_") and len(node.id) > 2:
                return Var(node.id[2:])
            return Param(node.id)
        raise ExprError(
            f"unsupported construct in rate expression {text!r}",
            getattr(node, "col_offset", None),
        )

    return convert(tree.body)


def _decimal(v: Fraction) -> str:
    """Exact decimal text of ``v``; non-terminating values fall back to a quotient."""
    d = v.denominator
    twos = fives = 0
    while d % 2 == 0:
        d //= 2
        twos += 1
    while d % 5 == 0:
        d //= 5
        fives += 1
    if d != 1:
        return f"({v.numerator} / {v.denominator})"
    if v.denominator == 1:
        return str(v.numerator)
    places = max(twos, fives)
    scaled = v.numerator * 10**places // v.denominator
    sign = "-" if scaled < 0 else ""
    digits = str(abs(scaled)).rjust(places + 1, "0")
    return f"{sign}{digits[:-places]}.{digits[-places:]}"


def to_text(expr: Expr) -> str:
    """Render an expression with minimal parentheses; ``parse_expr`` inverts it."""

    def render(e: Expr, parent: int = 0, right: bool = False) -> str:
        if isinstance(e, Num):
            return _decimal(e.value)
        if isinstance(e, Param):
            return e.name
        if isinstance(e, Var):
            return f"x_{e.state}"
        if isinstance(e, Neg):
            return f"-{render(e.operand, 3)}"
        prec = _PRECEDENCE[e.op]
        s = f"{render(e.left, prec)} {e.op} {render(e.right, prec, True)}"
        # left-associative: a right operand of equal precedence needs brackets
        if prec < parent or (prec == parent and right):
            return f"({s})"
        return s

    return render(expr)


def variables(expr: Expr) -> set[str]:
    if isinstance(expr, Var):
        return {expr.state}
    if isinstance(expr, Neg):
        return variables(expr.operand)
    if isinstance(expr, BinOp):
        return variables(expr.left) | variables(expr.right)
    return set()


def parameters(expr: Expr) -> set[str]:
    if isinstance(expr, Param):
        return {expr.name}
    if isinstance(expr, Neg):
        return parameters(expr.operand)
    if isinstance(expr, BinOp):
        return parameters(expr.left) | parameters(expr.right)
    return set()


def evaluate(expr: Expr, x: Mapping[str, float], params: Mapping[str, float]) -> float:
    """Tree-walking evaluation; slow but obviously correct."""
    if isinstance(expr, Num):
        return float(expr.value)
    if isinstance(expr, Param):
        return float(params[expr.name])
    if isinstance(expr, Var):
        return max(float(x[expr.state]), 0.0)
    if isinstance(expr, Neg):
        return -evaluate(expr.operand, x, params)
    a = evaluate(expr.left, x, params)
    b = evaluate(expr.right, x, params)
    if expr.op == "+":
        return a + b
    if expr.op == "-":
        return a - b
    if expr.op == "*":
        return a * b
    if b == 0.0:
        raise ExprError(f"division by zero in {to_text(expr)!r}")
    return a / b


def compile_rates(
    exprs: Sequence[Expr], states: Sequence[str], params: Mapping[str, Fraction]
) -> Callable[[np.ndarray], np.ndarray]:
    """Compile several expressions into one vectorized function.

    The returned callable takes ``x`` with the state index on the first axis
    (a vector, or an array of shape ``(n_states, ...)``) and returns an array
    with the expression index on the first axis.  Parameters are inlined as
    float constants; negative inputs are clamped to zero.
    """
    index = {s: i for i, s in enumerate(states)}

    def gen(e: Expr) -> str:
        if isinstance(e, Num):
            return repr(float(e.value))
        if isinstance(e, Param):
            return repr(float(params[e.name]))
        if isinstance(e, Var):
            return f"x[{index[e.state]}]"
        if isinstance(e, Neg):
            return f"(-{gen(e.operand)})"
        return f"({gen(e.left)} {e.op} {gen(e.right)})"

    bodies = [gen(e) for e in exprs]
    src = (
        "def _rates(x):\n"
        "    x = _np.maximum(_np.asarray(x, dtype=float), 0.0)\n"
        "    zero = _np.zeros(x.shape[1:])\n"
        f"    return _np.array([{', '.join(b + ' + zero' for b in bodies)}])\n"
    )
    namespace: dict = {"_np": np}
    exec(compile(src, "<rate-expressions>", "exec"), namespace)
    fn = namespace["_rates"]

    def rates(x):
        with np.errstate(divide="raise", invalid="raise"):
            try:
                out = fn(x)
            except (ZeroDivisionError, FloatingPointError) as exc:
                raise ExprError(f"rate evaluation failed: {exc}") from None
        if not np.all(np.isfinite(out)):
            raise ExprError("non-finite rate")
        return out

    rates.source = src
    return rates


def compile_scalar(
    exprs: Sequence[Expr], states: Sequence[str], params: Mapping[str, Fraction],
    combine: Sequence[Sequence[float]] | None = None,
) -> Callable[[Sequence[float]], list[float]]:
    """Plain-float version of :func:`compile_rates` for hot scalar loops.

    With ``combine`` (a matrix of shape ``(n_out, len(exprs))``) the function
    returns ``combine @ rates`` instead of the rates themselves; this is how
    the drift is generated.  Division by zero raises ``ZeroDivisionError``.
    """
    index = {s: i for i, s in enumerate(states)}

    def gen(e: Expr) -> str:
        if isinstance(e, Num):
            return repr(float(e.value))
        if isinstance(e, Param):
            return repr(float(params[e.name]))
        if isinstance(e, Var):
            return f"v{index[e.state]}"
        if isinstance(e, Neg):
            return f"(-{gen(e.operand)})"
        return f"({gen(e.left)} {e.op} {gen(e.right)})"

    lines = ["def _f(x):"]
    for i in range(len(states)):
        lines.append(f"    v{i} = x[{i}] if x[{i}] > 0.0 else 0.0")
    for j, e in enumerate(exprs):
        lines.append(f"    r{j} = {gen(e)}")
    if combine is None:
        outs = [f"r{j}" for j in range(len(exprs))]
    else:
        outs = []
        for row in combine:
            terms = [f"{float(c)!r} * r{j}" for j, c in enumerate(row) if c != 0]
            outs.append(" + ".join(terms) if terms else "0.0")
    lines.append(f"    return [{', '.join(outs)}]")
    namespace: dict = {}
    exec(compile("\n".join(lines) + "\n", "<rate-expressions>", "exec"), namespace)
    return namespace["_f"]


def to_rpn(expr: Expr, states: Sequence[str], params: Mapping[str, Fraction]):
    """Flatten an expression into stack-machine code for the simulator kernel.

    Returns ``(ops, args)`` int/float arrays; opcodes are
    0 push-constant, 1 push-variable, 2 add, 3 sub, 4 mul, 5 div, 6 negate.
    """
    index = {s: i for i, s in enumerate(states)}
    ops: list[int] = []
    args: list[float] = []

    def emit(e: Expr) -> None:
        if isinstance(e, Num):
            ops.append(0); args.append(float(e.value))
        elif isinstance(e, Param):
            ops.append(0); args.append(float(params[e.name]))
        elif isinstance(e, Var):
            ops.append(1); args.append(float(index[e.state]))
        elif isinstance(e, Neg):
            emit(e.operand)
            ops.append(6); args.append(0.0)
        else:
            emit(e.left)
            emit(e.right)
            ops.append({"+": 2, "-": 3, "*": 4, "/": 5}[e.op]); args.append(0.0)

    emit(expr)
    return np.array(ops, dtype=np.int64), np.array(args, dtype=np.float64)


def monomial_degree(expr: Expr) -> int | None:
    """Degree of a pure product of parameters, literals and variables, else None."""
    if isinstance(expr, (Num, Param)):
        return 0
    if isinstance(expr, Var):
        return 1
    if isinstance(expr, BinOp) and expr.op == "*":
        a, b = monomial_degree(expr.left), monomial_degree(expr.right)
        if a is None or b is None:
            return None
        return a + b
    return None
