import numpy as np
import pytest

from graphsr import exprs
from graphsr.constraints import (AncestorStack, DEFAULT_TABLE, DecodeBudget,
                                 allowed_tokens, ancestor_stack, mask_logits,
                                 token_arity, violations)
from graphsr.encoding import Vocabulary
from graphsr.generate import GenConfig, gen_skeleton


def test_stack_single_unary():
    st = ancestor_stack(["sin"])
    assert st.open_tokens == ["sin"]
    assert st.frames[0][1] == 1


def test_stack_closes_subtree():
    st = ancestor_stack(["mul", "sin", "x1"])
    assert st.open_tokens == ["mul"]
    assert st.frames[0][1] == 1  # one operand of mul already consumed


def test_stack_completes():
    st = ancestor_stack(["add", "x1", "x2"])
    assert st.open_tokens == []
    assert st.complete


def test_stack_rejects_tokens_after_completion():
    with pytest.raises(ValueError):
        ancestor_stack(["x1", "x2"])


def test_incremental_equals_full_recompute(rng):
    """Pushing token by token always matches recomputation from scratch."""
    cfg = GenConfig.desk()
    for _ in range(300):
        prefix = exprs.to_prefix(gen_skeleton(cfg, rng))
        inc = AncestorStack()
        for t, token in enumerate(prefix):
            full = ancestor_stack(prefix[: t + 1])
            inc.push_token(token)
            assert inc.frames == full.frames
            assert inc.nodes_emitted == full.nodes_emitted


def test_counters_stay_in_range(rng):
    cfg = GenConfig.desk()
    for _ in range(100):
        prefix = exprs.to_prefix(gen_skeleton(cfg, rng))
        st = AncestorStack()
        for token in prefix:
            st.push_token(token)
            assert all(rem in (1, 2) for _, rem in st.frames)
        assert st.complete


def test_forbidden_table_trig_in_trig():
    st = ancestor_stack(["sin"])
    forbidden = DEFAULT_TABLE.forbidden_below(st.open_tokens)
    assert {"sin", "cos", "tan", "arcsin"} <= forbidden
    assert "exp" not in forbidden


def test_forbidden_table_exp_log():
    assert "exp" in DEFAULT_TABLE.forbidden_below(["exp"])
    assert "log" in DEFAULT_TABLE.forbidden_below(["exp"])
    assert "exp" in DEFAULT_TABLE.forbidden_below(["log"])


def test_exp_forbidden_at_depth():
    # the pathological pattern has another operator in between
    bad = ["exp", "cos", "x1"]
    assert not violations(bad)  # cos under exp is fine
    assert violations(["exp", "mul", "x1", "exp", "x1"])


def test_mask_logits_trig_ancestor():
    vocab = Vocabulary(3)
    st = ancestor_stack(["sin"])
    logits = np.zeros(len(vocab))
    out = mask_logits(logits, st, DEFAULT_TABLE, DecodeBudget(50, 3), vocab)
    probs = np.exp(out - np.max(out[np.isfinite(out)]))
    probs /= probs.sum()
    for tok in ("cos", "sin", "tan", "arcsin"):
        assert probs[vocab.token_to_id[tok]] == 0.0
    assert probs[vocab.token_to_id["exp"]] > 0


def test_mask_logits_start_state():
    vocab = Vocabulary(3)
    st = AncestorStack()
    out = mask_logits(np.zeros(len(vocab)), st, DEFAULT_TABLE, DecodeBudget(50, 3), vocab)
    assert out[vocab.eos_id] == -np.inf
    assert out[vocab.bos_id] == -np.inf
    assert out[vocab.pad_id] == -np.inf
    for tok in ("add", "sin", "x1", "C"):
        assert np.isfinite(out[vocab.token_to_id[tok]])


def test_mask_logits_completion_allows_only_eos():
    vocab = Vocabulary(3)
    st = ancestor_stack(["x1"])
    out = mask_logits(np.zeros(len(vocab)), st, DEFAULT_TABLE, DecodeBudget(50, 3), vocab)
    finite = np.flatnonzero(np.isfinite(out))
    assert list(finite) == [vocab.eos_id]


def test_mask_respects_variable_arity():
    vocab = Vocabulary(5)
    st = AncestorStack()
    out = mask_logits(np.zeros(len(vocab)), st, DEFAULT_TABLE, DecodeBudget(50, 2), vocab)
    assert np.isfinite(out[vocab.token_to_id["x2"]])
    assert out[vocab.token_to_id["x3"]] == -np.inf


def test_budget_masking_forces_completion():
    vocab = Vocabulary(2)
    st = ancestor_stack(["add"])  # 2 slots open, 1 node used
    budget = DecodeBudget(max_nodes=3, n_vars=2)
    allowed = allowed_tokens(st, DEFAULT_TABLE, budget, vocab.symbol_tokens)
    assert allowed  # leaves fit
    assert all(token_arity(t) == 0 for t in allowed)


def test_mask_completeness_random_walk(rng):
    """From any reachable partial state some token stays unmasked."""
    vocab = Vocabulary(3)
    budget = DecodeBudget(max_nodes=25, n_vars=3)
    for _ in range(300):
        st = AncestorStack()
        while not st.complete:
            allowed = allowed_tokens(st, DEFAULT_TABLE, budget, vocab.symbol_tokens)
            assert allowed, f"dead end at {st.frames}"
            token = sorted(allowed)[rng.integers(len(allowed))]
            st.push_token(token)
        assert st.nodes_emitted <= budget.max_nodes
