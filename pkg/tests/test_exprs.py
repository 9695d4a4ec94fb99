import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from graphsr import exprs
from graphsr.exprs import (Bin, Const, Hole, PrefixParseError, Una, Var,
                           complexity, eval_batch, eval_point, from_prefix,
                           parse_prefix_text, prefix_text, simplify_small_terms,
                           to_prefix)
from graphsr.generate import GenConfig, gen_skeleton, sample_constants


def test_eval_basic_arithmetic():
    e = parse_prefix_text("mul x1 sub x2 x3")
    assert eval_point(e, (2, 5, 3)) == 4


def test_eval_domain_violation_is_undefined():
    assert eval_point(parse_prefix_text("log x1"), (-1,)) is None
    assert eval_point(parse_prefix_text("sqrt x1"), (-4,)) is None
    assert eval_point(parse_prefix_text("arcsin x1"), (2,)) is None
    assert eval_point(parse_prefix_text("div x1 x2"), (1, 0)) is None


def test_eval_with_constant():
    e = Bin("add", Una("sin", Var(1)), Const(0.5))
    assert eval_point(e, (0,)) == pytest.approx(0.5)


def test_eval_placeholder_raises():
    with pytest.raises(exprs.ExprError):
        eval_point(Bin("add", Var(1), Hole(0)), (1,))


def test_eval_nonfinite_intermediate_poisons():
    # exp overflows, then division would rescue it; must stay undefined
    e = parse_prefix_text("div 1.0 exp x1")
    assert eval_point(e, (1000.0,)) is None


def test_to_prefix_examples():
    assert to_prefix(Bin("add", Var(1), Hole(0))) == ["add", "x1", "C"]
    assert to_prefix(Una("sin", Bin("mul", Var(1), Var(2)))) == ["sin", "mul", "x1", "x2"]


def test_from_prefix_examples():
    e = from_prefix(["add", "x1", "C"])
    assert e == Bin("add", Var(1), Hole(0))
    with pytest.raises(PrefixParseError):
        from_prefix(["mul", "x1"])  # missing operand
    with pytest.raises(PrefixParseError):
        from_prefix(["sin", "mul", "x1", "x2", "x3"])  # trailing token


def test_from_prefix_error_positions():
    with pytest.raises(PrefixParseError) as err:
        from_prefix(["mul", "x1"])
    assert err.value.position == 2
    with pytest.raises(PrefixParseError) as err:
        from_prefix(["sin", "mul", "x1", "x2", "x3"])
    assert err.value.position == 4


def test_complexity_counts_nodes():
    assert complexity(Var(1)) == 1
    assert complexity(parse_prefix_text("add x1 C")) == 3
    assert complexity(parse_prefix_text("sin mul x1 x2")) == 4


def test_complexity_matches_prefix_length():
    rng = np.random.default_rng(7)
    cfg = GenConfig.desk()
    for _ in range(50):
        sk = gen_skeleton(cfg, rng)
        assert complexity(sk) == len(to_prefix(sk))


def test_prefix_roundtrip_generator_samples(rng):
    cfg = GenConfig.desk()
    for _ in range(500):
        sk = gen_skeleton(cfg, rng)
        assert from_prefix(to_prefix(sk)) == sk


def test_prefix_roundtrip_instantiated(rng):
    cfg = GenConfig.desk()
    for _ in range(100):
        e = sample_constants(gen_skeleton(cfg, rng), rng)
        assert from_prefix(to_prefix(e)) == e


def test_pow_node_roundtrip():
    e = exprs.Pow(Var(1), 9)
    assert to_prefix(e) == ["pow^9", "x1"]
    assert from_prefix(["pow^9", "x1"]) == e
    half = from_prefix(["pow^1/2", "x2"])
    assert half.exponent == exprs.Fraction(1, 2)


def test_simplify_drops_small_terms():
    e = parse_prefix_text("add pow2 x1 mul 1e-12 sin x1")
    out = simplify_small_terms(e, eps=1e-8)
    assert out == parse_prefix_text("pow2 x1")


def test_simplify_keeps_normal_terms():
    e = parse_prefix_text("add pow2 x1 0.5")
    assert simplify_small_terms(e, eps=1e-8) == e


def test_simplify_everything_removed_gives_zero():
    e = parse_prefix_text("add 1e-12 mul 1e-10 x1")
    assert simplify_small_terms(e, eps=1e-8) == Const(0.0)


def test_simplify_never_increases_complexity(rng):
    cfg = GenConfig.desk()
    for _ in range(200):
        e = sample_constants(gen_skeleton(cfg, rng), rng)
        assert complexity(simplify_small_terms(e)) <= complexity(e)


def test_simplify_numeric_equivalence(rng):
    """Injected small bounded terms change values by at most eps."""
    eps = 1e-6
    cfg = GenConfig.desk(max_variables=2)
    for _ in range(500):
        base = sample_constants(gen_skeleton(cfg, rng), rng)
        c = rng.uniform(-eps / 2, eps / 2)
        inner = Una("sin", Var(1)) if rng.random() < 0.5 else Una("cos", Var(2))
        e = Bin("add", base, Bin("mul", Const(c), inner))
        out = simplify_small_terms(e, eps)
        X = rng.uniform(-5, 5, size=(256, 2))
        before = eval_batch(e, X)
        after = eval_batch(out, X)
        ok = np.isfinite(before) & np.isfinite(after)
        y = before[ok]
        assert np.all(np.abs(before[ok] - after[ok]) <= eps * (1 + np.abs(y)))


@given(st.integers(min_value=1, max_value=9))
def test_variable_token_roundtrip(i):
    assert parse_prefix_text(f"x{i}") == Var(i)


@given(st.floats(allow_nan=False, allow_infinity=False, width=32))
def test_constant_token_roundtrip(v):
    e = Const(float(v))
    assert from_prefix(to_prefix(e)) == e


def test_normalize_drops_identities():
    assert exprs.normalize(parse_prefix_text("mul x1 1.0")) == Var(1)
    assert exprs.normalize(parse_prefix_text("add 0.0 x1")) == Var(1)
    assert exprs.normalize(parse_prefix_text("sub x1 0.0")) == Var(1)
    assert exprs.normalize(parse_prefix_text("div x1 1.0")) == Var(1)
    # sub(0, x) and div(1, x) must survive
    assert exprs.normalize(parse_prefix_text("sub 0.0 x1")) == parse_prefix_text("sub 0.0 x1")
    assert exprs.normalize(parse_prefix_text("div 1.0 x1")) == parse_prefix_text("div 1.0 x1")


def test_infix_rendering():
    e = parse_prefix_text("add pow2 x1 mul 2.0 x2")
    assert exprs.to_infix(e) == "(x1^2 + (2 * x2))"
