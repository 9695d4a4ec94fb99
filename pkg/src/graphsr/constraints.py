"""Ancestor-stack tracking and nesting constraints for prefix programs.

The same rule table guards both skeleton generation and autoregressive
decoding: while a risky operator is open anywhere above the current
position, the tokens it forbids are removed from play. Feasibility masking
also keeps every partial program completable within the node budget.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .exprs import BINARY_OPS, PLACEHOLDER_TOKEN, UNARY_OPS

TRIG_OPS = frozenset({"sin", "cos", "tan", "arcsin"})

# Forbidden descendants per open ancestor, at any nesting depth while the
# ancestor is open. Generalizes the pathological couplings (trig inside
# trig, exp/log chains) into an editable table.
DEFAULT_CONSTRAINT_RULES: dict[str, frozenset[str]] = {
    **{op: TRIG_OPS for op in TRIG_OPS},
    "exp": frozenset({"exp", "log"}),
    "log": frozenset({"log", "exp"}),
}


class ConstraintTable:
    """Mapping risky-ancestor token -> forbidden descendant tokens."""

    def __init__(self, rules: Mapping[str, Iterable[str]] | None = None):
        src = DEFAULT_CONSTRAINT_RULES if rules is None else rules
        self.rules: dict[str, frozenset[str]] = {
            anc: frozenset(forbidden) for anc, forbidden in src.items()
        }

    def forbidden_below(self, open_ancestors: Iterable[str]) -> frozenset[str]:
        out: frozenset[str] = frozenset()
        for anc in open_ancestors:
            rule = self.rules.get(anc)
            if rule:
                out = out | rule
        return out

    @classmethod
    def from_json(cls, path: str | Path) -> "ConstraintTable":
        with open(path) as fh:
            return cls({k: frozenset(v) for k, v in json.load(fh).items()})

    def to_json(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump({k: sorted(v) for k, v in self.rules.items()}, fh, indent=2)


DEFAULT_TABLE = ConstraintTable()


def token_arity(token: str) -> int:
    if token in BINARY_OPS:
        return 2
    if token in UNARY_OPS or token.startswith("pow^"):
        return 1
    return 0


@dataclass
class AncestorStack:
    """Open ancestor operators with remaining-children counters.

    Stored counters are always 1 or 2; a counter that reaches 0 pops
    immediately (cascading), so the stack is empty exactly when the prefix
    program is complete.
    """

    frames: list[list] = field(default_factory=list)  # [token, remaining]
    nodes_emitted: int = 0

    def push_token(self, token: str) -> None:
        arity = token_arity(token)
        self.nodes_emitted += 1
        if arity > 0:
            self.frames.append([token, arity])
            return
        # Leaf: consume one child of the innermost open ancestor, then
        # close finished subtrees outward.
        if self.frames:
            self.frames[-1][1] -= 1
        while self.frames and self.frames[-1][1] == 0:
            self.frames.pop()
            if self.frames:
                self.frames[-1][1] -= 1

    @property
    def open_tokens(self) -> list[str]:
        return [tok for tok, _ in self.frames]

    @property
    def open_slots(self) -> int:
        """Unfilled tree slots (equals 1 + sum over tokens of arity-1).

        Each frame's counter includes the child subtree currently open
        below it, so the frames overlap by one slot apiece.
        """
        if self.nodes_emitted == 0:
            return 1
        if not self.frames:
            return 0
        return sum(remaining for _, remaining in self.frames) - (len(self.frames) - 1)

    @property
    def complete(self) -> bool:
        return self.nodes_emitted > 0 and not self.frames

    def copy(self) -> "AncestorStack":
        return AncestorStack([f.copy() for f in self.frames], self.nodes_emitted)


def _is_leaf(token: str) -> bool:
    if token == PLACEHOLDER_TOKEN:
        return True
    if token.startswith("x") and token[1:].isdigit():
        return True
    try:
        float(token)
        return True
    except ValueError:
        return False


def ancestor_stack(prefix: Sequence[str]) -> AncestorStack:
    """Full recomputation over a partial prefix program."""
    stack = AncestorStack()
    for token in prefix:
        if token_arity(token) == 0 and not _is_leaf(token):
            raise ValueError(f"not a prefix-program token: {token!r}")
        if stack.complete:
            raise ValueError(f"token {token!r} after program completion")
        stack.push_token(token)
    return stack


def violations(prefix: Sequence[str], table: ConstraintTable = DEFAULT_TABLE) -> list[tuple[int, str, str]]:
    """Scan a prefix program; returns (position, ancestor, token) conflicts."""
    stack = AncestorStack()
    out = []
    for i, token in enumerate(prefix):
        forbidden = table.forbidden_below(stack.open_tokens)
        if token in forbidden:
            culprit = next(a for a in stack.open_tokens if token in table.rules.get(a, ()))
            out.append((i, culprit, token))
        stack.push_token(token)
    return out


@dataclass
class DecodeBudget:
    """Feasibility state for masking: node budget and variable arity."""

    max_nodes: int = 50
    n_vars: int = 10


def allowed_tokens(
    stack: AncestorStack,
    table: ConstraintTable,
    budget: DecodeBudget,
    candidates: Iterable[str],
) -> set[str]:
    """Symbol tokens that may legally extend the partial program.

    EOS handling lives in mask_logits; this covers tree symbols only.
    """
    if stack.complete:
        return set()
    forbidden = table.forbidden_below(stack.open_tokens)
    out = set()
    for token in candidates:
        if token in forbidden:
            continue
        if token.startswith("x") and token[1:].isdigit() and int(token[1:]) > budget.n_vars:
            continue
        slots_after = stack.open_slots - 1 + token_arity(token)
        if stack.nodes_emitted + 1 + slots_after > budget.max_nodes:
            continue
        out.add(token)
    return out


def mask_logits(
    logits: np.ndarray,
    stack: AncestorStack,
    table: ConstraintTable,
    budget: DecodeBudget,
    vocab,
) -> np.ndarray:
    """Return a copy of logits with infeasible tokens at -inf.

    Forbidden nestings, budget-infeasible symbols, and variables beyond the
    declared dimensionality are masked; EOS is masked while the program is
    incomplete, and is the only unmasked token once it completes. BOS/PAD
    never survive. softmax of the result puts exactly zero mass on masked
    entries.
    """
    out = np.array(logits, dtype=np.float64, copy=True)
    mask = np.zeros(out.shape[-1], dtype=bool)
    if stack.complete:
        mask[:] = True
        mask[vocab.eos_id] = False
    else:
        allowed = allowed_tokens(stack, table, budget, vocab.symbol_tokens)
        mask[:] = True
        for token in allowed:
            mask[vocab.token_to_id[token]] = False
    if mask.all():
        raise ValueError("every token is masked; no legal continuation")
    out[..., mask] = -np.inf
    return out
