"""Expression trees: construction, evaluation, prefix serialization, complexity.

An expression is an immutable tree over binary operators, unary operators,
integer/rational powers, variables, constants, and constant placeholders.
A *skeleton* is a tree whose numeric constants are replaced by placeholder
slots; fitting fills the slots with real values later.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterator, Sequence

import numpy as np

BINARY_OPS = ("add", "sub", "mul", "div")
UNARY_OPS = (
    "abs",
    "pow2",
    "pow3",
    "pow5",
    "sqrt",
    "sin",
    "cos",
    "tan",
    "arcsin",
    "log",
    "exp",
)

# Effective integer exponent of the fixed-power unary operators.
POW_UNARY_EXPONENT = {"pow2": 2, "pow3": 3, "pow5": 5}

PLACEHOLDER_TOKEN = "C"


class ExprError(ValueError):
    """Malformed tree construction or contract violation."""


class PrefixParseError(ExprError):
    """Prefix token sequence does not encode a complete valid tree."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (position {position})")
        self.position = position


@dataclass(frozen=True)
class Expr:
    """Base node; concrete kinds are Bin, Una, Pow, Var, Const, Hole."""

    def __post_init__(self):
        if type(self) is Expr:
            raise ExprError("Expr is abstract; construct a concrete node kind")


@dataclass(frozen=True)
class Bin(Expr):
    op: str
    left: Expr
    right: Expr

    def __post_init__(self):
        if self.op not in BINARY_OPS:
            raise ExprError(f"unknown binary operator {self.op!r}")


@dataclass(frozen=True)
class Una(Expr):
    op: str
    child: Expr

    def __post_init__(self):
        if self.op not in UNARY_OPS:
            raise ExprError(f"unknown unary operator {self.op!r}")


@dataclass(frozen=True)
class Pow(Expr):
    """Exponentiation with a constant rational exponent (never a subtree)."""

    base: Expr
    exponent: Fraction

    def __post_init__(self):
        if not isinstance(self.exponent, Fraction):
            object.__setattr__(self, "exponent", Fraction(self.exponent))
        if self.exponent == 0:
            raise ExprError("Pow exponent must be nonzero")


@dataclass(frozen=True)
class Var(Expr):
    index: int  # 1-based

    def __post_init__(self):
        if self.index < 1:
            raise ExprError(f"variable index must be >= 1, got {self.index}")


@dataclass(frozen=True)
class Const(Expr):
    value: float

    def __post_init__(self):
        object.__setattr__(self, "value", float(self.value))
        if not math.isfinite(self.value):
            raise ExprError("constants must be finite")


@dataclass(frozen=True)
class Hole(Expr):
    """Constant placeholder slot in a skeleton."""

    slot: int

    def __post_init__(self):
        if self.slot < 0:
            raise ExprError("placeholder slot ids start at 0")


ZERO = Const(0.0)
ONE = Const(1.0)


def children(e: Expr) -> tuple[Expr, ...]:
    if isinstance(e, Bin):
        return (e.left, e.right)
    if isinstance(e, Una):
        return (e.child,)
    if isinstance(e, Pow):
        return (e.base,)
    return ()


def iter_nodes(e: Expr) -> Iterator[Expr]:
    """Pre-order traversal."""
    stack = [e]
    while stack:
        node = stack.pop()
        yield node
        stack.extend(reversed(children(node)))


def complexity(e: Expr) -> int:
    """Number of symbols: operators + variables + constants/placeholders."""
    return sum(1 for _ in iter_nodes(e))


def max_var_index(e: Expr) -> int:
    """Highest variable index used; 0 if the tree has no variables."""
    return max((n.index for n in iter_nodes(e) if isinstance(n, Var)), default=0)


def placeholder_count(e: Expr) -> int:
    return sum(1 for n in iter_nodes(e) if isinstance(n, Hole))


def is_skeleton(e: Expr) -> bool:
    """True when no instantiated Const appears (placeholders only)."""
    return not any(isinstance(n, Const) for n in iter_nodes(e))


def instantiate(skeleton: Expr, constants: Sequence[float]) -> Expr:
    """Replace each placeholder slot i with Const(constants[i])."""

    def rec(e: Expr) -> Expr:
        if isinstance(e, Hole):
            if e.slot >= len(constants):
                raise ExprError(f"no constant provided for slot {e.slot}")
            return Const(constants[e.slot])
        if isinstance(e, Bin):
            return Bin(e.op, rec(e.left), rec(e.right))
        if isinstance(e, Una):
            return Una(e.op, rec(e.child))
        if isinstance(e, Pow):
            return Pow(rec(e.base), e.exponent)
        return e

    return rec(skeleton)


def skeletonize(e: Expr) -> Expr:
    """Replace every constant with a placeholder, re-slotting in pre-order."""
    counter = [0]

    def rec(node: Expr) -> Expr:
        if isinstance(node, (Const, Hole)):
            slot = counter[0]
            counter[0] += 1
            return Hole(slot)
        if isinstance(node, Bin):
            return Bin(node.op, rec(node.left), rec(node.right))
        if isinstance(node, Una):
            return Una(node.op, rec(node.child))
        if isinstance(node, Pow):
            return Pow(rec(node.base), node.exponent)
        return node

    return rec(e)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def eval_batch(e: Expr, X: np.ndarray) -> np.ndarray:
    """Evaluate on a batch of points; undefined results come back as NaN.

    X has shape (n, d) with d at least the highest variable index. Any
    non-finite intermediate (overflow, division by zero) or domain violation
    (log of a non-positive, sqrt of a negative, arcsin outside [-1, 1])
    poisons the affected rows with NaN.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ExprError(f"expected a 2-d point matrix, got shape {X.shape}")
    need = max_var_index(e)
    if X.shape[1] < need:
        raise ExprError(f"points have {X.shape[1]} variables, expression needs {need}")

    def rec(node: Expr) -> np.ndarray:
        if isinstance(node, Const):
            return np.full(X.shape[0], node.value)
        if isinstance(node, Hole):
            raise ExprError("cannot evaluate a skeleton: placeholder encountered")
        if isinstance(node, Var):
            return X[:, node.index - 1].copy()
        with np.errstate(all="ignore"):
            if isinstance(node, Bin):
                a, b = rec(node.left), rec(node.right)
                if node.op == "add":
                    out = a + b
                elif node.op == "sub":
                    out = a - b
                elif node.op == "mul":
                    out = a * b
                else:
                    out = a / b
                bad = ~np.isfinite(a) | ~np.isfinite(b)
            elif isinstance(node, Una):
                a = rec(node.child)
                bad = ~np.isfinite(a)
                if node.op == "abs":
                    out = np.abs(a)
                elif node.op in POW_UNARY_EXPONENT:
                    out = a ** POW_UNARY_EXPONENT[node.op]
                elif node.op == "sqrt":
                    out = np.sqrt(np.where(a < 0, np.nan, a))
                elif node.op == "sin":
                    out = np.sin(a)
                elif node.op == "cos":
                    out = np.cos(a)
                elif node.op == "tan":
                    out = np.tan(a)
                elif node.op == "arcsin":
                    out = np.arcsin(np.where(np.abs(a) > 1, np.nan, a))
                elif node.op == "log":
                    out = np.log(np.where(a <= 0, np.nan, a))
                else:
                    out = np.exp(a)
            else:
                assert isinstance(node, Pow)
                a = rec(node.base)
                bad = ~np.isfinite(a)
                out = np.power(a, float(node.exponent))
        out = np.where(bad | ~np.isfinite(out), np.nan, out)
        return out

    return rec(e)


def eval_point(e: Expr, point: Sequence[float]) -> float | None:
    """Single-point evaluation; None is the explicit undefined result."""
    y = eval_batch(e, np.asarray(point, dtype=np.float64).reshape(1, -1))
    v = float(y[0])
    return None if math.isnan(v) else v


# ---------------------------------------------------------------------------
# Prefix serialization
# ---------------------------------------------------------------------------

def _format_exponent(q: Fraction) -> str:
    return str(q.numerator) if q.denominator == 1 else f"{q.numerator}/{q.denominator}"


def to_prefix(e: Expr) -> list[str]:
    """Pre-order token list.

    Placeholders emit the single placeholder token 'C'; instantiated
    constants emit their decimal value; a Pow node emits 'pow^<exponent>'.
    """
    out: list[str] = []

    def rec(node: Expr):
        if isinstance(node, Bin):
            out.append(node.op)
            rec(node.left)
            rec(node.right)
        elif isinstance(node, Una):
            out.append(node.op)
            rec(node.child)
        elif isinstance(node, Pow):
            out.append(f"pow^{_format_exponent(node.exponent)}")
            rec(node.base)
        elif isinstance(node, Var):
            out.append(f"x{node.index}")
        elif isinstance(node, Hole):
            out.append(PLACEHOLDER_TOKEN)
        else:
            assert isinstance(node, Const)
            out.append(repr(node.value))

    rec(e)
    return out


def from_prefix(tokens: Sequence[str]) -> Expr:
    """Parse a complete prefix program back into the unique tree it encodes."""
    pos = 0
    slot = 0

    def rec() -> Expr:
        nonlocal pos, slot
        if pos >= len(tokens):
            raise PrefixParseError("unexpected end of token sequence", pos)
        tok = tokens[pos]
        pos += 1
        if tok in BINARY_OPS:
            return Bin(tok, rec(), rec())
        if tok in UNARY_OPS:
            return Una(tok, rec())
        if tok.startswith("pow^"):
            try:
                exponent = Fraction(tok[4:])
            except (ValueError, ZeroDivisionError):
                raise PrefixParseError(f"bad exponent in token {tok!r}", pos - 1) from None
            return Pow(rec(), exponent)
        if tok == PLACEHOLDER_TOKEN:
            hole = Hole(slot)
            slot += 1
            return hole
        if tok.startswith("x") and tok[1:].isdigit():
            index = int(tok[1:])
            if index < 1:
                raise PrefixParseError(f"bad variable token {tok!r}", pos - 1)
            return Var(index)
        try:
            value = float(tok)
        except ValueError:
            raise PrefixParseError(f"unknown token {tok!r}", pos - 1) from None
        return Const(value)

    tree = rec()
    if pos != len(tokens):
        raise PrefixParseError(f"trailing token {tokens[pos]!r}", pos)
    return tree


def parse_prefix_text(text: str) -> Expr:
    return from_prefix(text.split())


def prefix_text(e: Expr) -> str:
    return " ".join(to_prefix(e))


_INFIX = {"add": "+", "sub": "-", "mul": "*", "div": "/"}


def to_infix(e: Expr) -> str:
    """Readable infix form, fully parenthesized except at the leaves."""
    if isinstance(e, Bin):
        return f"({to_infix(e.left)} {_INFIX[e.op]} {to_infix(e.right)})"
    if isinstance(e, Una):
        if e.op in POW_UNARY_EXPONENT:
            return f"{to_infix(e.child)}^{POW_UNARY_EXPONENT[e.op]}"
        return f"{e.op}({to_infix(e.child)})"
    if isinstance(e, Pow):
        return f"{to_infix(e.base)}^{_format_exponent(e.exponent)}"
    if isinstance(e, Var):
        return f"x{e.index}"
    if isinstance(e, Hole):
        return PLACEHOLDER_TOKEN
    assert isinstance(e, Const)
    return f"{e.value:.6g}"


# ---------------------------------------------------------------------------
# Normalization and small-term simplification
# ---------------------------------------------------------------------------

def _is_zero(e: Expr) -> bool:
    return isinstance(e, Const) and e.value == 0.0


def _is_one(e: Expr) -> bool:
    return isinstance(e, Const) and e.value == 1.0


def normalize(e: Expr) -> Expr:
    """Drop additive-identity summands and multiplicative-identity factors.

    Only exact 0 summands and exact 1 factors are removed (sub keeps a
    leading zero, div keeps a unit numerator); semantics on defined points
    are unchanged.
    """
    if isinstance(e, Bin):
        left, right = normalize(e.left), normalize(e.right)
        if e.op == "add":
            if _is_zero(left):
                return right
            if _is_zero(right):
                return left
        elif e.op == "sub":
            if _is_zero(right):
                return left
        elif e.op == "mul":
            if _is_one(left):
                return right
            if _is_one(right):
                return left
        elif e.op == "div":
            if _is_one(right):
                return left
        return Bin(e.op, left, right)
    if isinstance(e, Una):
        return Una(e.op, normalize(e.child))
    if isinstance(e, Pow):
        return Pow(normalize(e.base), e.exponent)
    return e


def _term_coefficient(e: Expr) -> float:
    """Product of the constants that scale a term multiplicatively."""
    if isinstance(e, Const):
        return e.value
    if isinstance(e, Bin):
        if e.op == "mul":
            return _term_coefficient(e.left) * _term_coefficient(e.right)
        if e.op == "div":
            denom = e.right.value if isinstance(e.right, Const) else 1.0
            if denom == 0.0:
                return 1.0
            return _term_coefficient(e.left) / denom
    return 1.0


def simplify_small_terms(e: Expr, eps: float = 1e-6) -> Expr:
    """Drop additive terms whose multiplying constant is below eps.

    Dropped summands are replaced by the additive identity and the result is
    re-normalized; if nothing survives, the constant 0 is returned. Never
    increases complexity.
    """

    def rec(node: Expr) -> Expr:
        if isinstance(node, Bin):
            left, right = rec(node.left), rec(node.right)
            if node.op in ("add", "sub"):
                if abs(_term_coefficient(left)) < eps:
                    left = ZERO
                if abs(_term_coefficient(right)) < eps:
                    right = ZERO
            return Bin(node.op, left, right)
        if isinstance(node, Una):
            return Una(node.op, rec(node.child))
        if isinstance(node, Pow):
            return Pow(rec(node.base), node.exponent)
        return node

    if abs(_term_coefficient(e)) < eps:
        return ZERO
    out = normalize(rec(e))
    if _is_zero(out):
        return ZERO
    return out
