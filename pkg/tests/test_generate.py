import numpy as np
import pytest

from graphsr import exprs
from graphsr.constraints import violations
from graphsr.generate import (CorpusRecord, Dataset, GenConfig, add_noise,
                              build_corpus, gen_skeleton, read_corpus,
                              sample_constants, sample_points, write_corpus)


def test_defaults_match_frequency_tables():
    cfg = GenConfig()
    assert cfg.max_variables == 10
    assert cfg.max_unary == 5
    assert cfg.max_constants == 5
    assert cfg.max_nodes == 50
    assert cfg.max_binary(10) == 15
    assert cfg.binary_freq == {"add": 1.0, "sub": 0.5, "mul": 1.0, "div": 0.5}
    assert cfg.unary_freq["pow2"] == 1.0 and cfg.unary_freq["tan"] == 0.1


def test_small_budget_respected(rng):
    cfg = GenConfig.desk(max_variables=1, max_unary=1, max_nodes=3, binary_extra=0)
    for _ in range(200):
        sk = gen_skeleton(cfg, rng)
        assert exprs.complexity(sk) <= 3
        assert exprs.max_var_index(sk) <= 1


def test_no_forbidden_nesting(rng):
    cfg = GenConfig.desk()
    for _ in range(2000):
        sk = gen_skeleton(cfg, rng)
        assert violations(exprs.to_prefix(sk)) == []


def test_variables_contiguous_and_bounded(rng):
    cfg = GenConfig.desk(max_variables=3)
    for _ in range(300):
        sk = gen_skeleton(cfg, rng)
        used = sorted({n.index for n in exprs.iter_nodes(sk) if isinstance(n, exprs.Var)})
        assert used == list(range(1, len(used) + 1))
        assert used[-1] <= 3


def test_placeholder_slots_contiguous(rng):
    cfg = GenConfig.desk()
    for _ in range(300):
        sk = gen_skeleton(cfg, rng)
        slots = [n.slot for n in exprs.iter_nodes(sk) if isinstance(n, exprs.Hole)]
        assert slots == list(range(len(slots)))
        assert len(slots) <= cfg.max_constants


def test_add_sub_ratio_matches_frequencies():
    rng = np.random.default_rng(3)
    cfg = GenConfig()
    counts = {"add": 0, "sub": 0}
    for _ in range(3000):
        sk = gen_skeleton(cfg, rng)
        for node in exprs.iter_nodes(sk):
            if isinstance(node, exprs.Bin) and node.op in counts:
                counts[node.op] += 1
    ratio = counts["add"] / max(counts["sub"], 1)
    assert 2.0 * 0.9 <= ratio <= 2.0 * 1.1


def test_sample_constants_distribution():
    rng = np.random.default_rng(11)
    sk = exprs.parse_prefix_text("add C mul C x1")
    draws = []
    for _ in range(50000):
        inst = sample_constants(sk, rng)
        draws.extend(n.value for n in exprs.iter_nodes(inst) if isinstance(n, exprs.Const))
    draws = np.array(draws)
    assert draws.min() >= 0.0 and draws.max() <= 10.0
    assert abs(draws.mean() - 5.0) < 0.1


def test_sample_constants_deterministic():
    sk = exprs.parse_prefix_text("add C mul C x1")
    a = sample_constants(sk, np.random.default_rng(42))
    b = sample_constants(sk, np.random.default_rng(42))
    assert a == b


def test_sample_constants_no_placeholders_unchanged(rng):
    e = exprs.parse_prefix_text("mul x1 x2")
    assert sample_constants(e, rng) == e


def test_sample_points_identity_function(rng):
    ds = sample_points(exprs.Var(1), 200, rng)
    live = ~((ds.X == 0).all(axis=1) & (ds.y == 0))
    assert np.allclose(ds.y[live], ds.X[live, 0])


def test_sample_points_zeroes_undefined_rows(rng):
    ds = sample_points(exprs.Una("log", exprs.Var(1)), 400, rng)
    bad = ds.X[:, 0] <= 0
    # any sampled nonpositive x must have been zeroed wholesale
    assert np.all(ds.y[bad & (ds.X[:, 0] != 0)] == 0) or not np.any(bad)
    zeroed = (ds.X[:, 0] == 0) & (ds.y == 0)
    assert np.all(np.isfinite(ds.y))
    assert zeroed.sum() > 0  # log on U(-a,a) always hits the bad half


def test_sample_points_bounded(rng):
    for _ in range(20):
        ds = sample_points(exprs.Bin("add", exprs.Var(1), exprs.Var(2)), 100, rng)
        assert np.abs(ds.X).max() <= 10.0
        assert 1 <= ds.provenance["k"] <= 5
        assert all(1 <= a <= 10 for a in ds.provenance["alphas"])


def test_add_noise_zero_level_identical(rng):
    ds = sample_points(exprs.Var(1), 50, rng)
    out = add_noise(ds, 0.0, rng)
    assert np.array_equal(out.X, ds.X) and np.array_equal(out.y, ds.y)


def test_add_noise_scale(rng):
    y = rng.normal(0, 3.0, size=10000)
    ds = Dataset(np.zeros((10000, 1)), y)
    noisy = add_noise(ds, 0.1, rng)
    rel = np.std(noisy.y - ds.y) / np.std(ds.y)
    assert abs(rel - 0.1) < 0.02
    assert np.array_equal(noisy.X, ds.X)


def test_add_noise_constant_target_unchanged(rng):
    ds = Dataset(np.zeros((10, 1)), np.full(10, 3.0))
    out = add_noise(ds, 0.1, rng)
    assert np.array_equal(out.y, ds.y)


def test_dataset_rejects_nonfinite():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 1)), np.array([1.0, np.nan]))


def test_generation_deterministic():
    a = build_corpus(GenConfig.desk(), 5, seed=9)
    b = build_corpus(GenConfig.desk(), 5, seed=9)
    assert [exprs.prefix_text(r.skeleton) for r in a] == \
           [exprs.prefix_text(r.skeleton) for r in b]
    assert all(x.constants == y.constants for x, y in zip(a, b))


@pytest.mark.parametrize("data", ["inline", "npz", "none"])
def test_corpus_roundtrip(tmp_path, data):
    records = build_corpus(GenConfig.desk(max_variables=2), 6, seed=4,
                           n_points=32 if data != "none" else None)
    path = tmp_path / "corpus.jsonl"
    write_corpus(records, path, data=data)
    back = read_corpus(path)
    assert len(back) == len(records)
    for orig, loaded in zip(records, back):
        assert exprs.prefix_text(orig.skeleton) == exprs.prefix_text(loaded.skeleton)
        assert orig.constants == pytest.approx(loaded.constants)
        assert orig.seed == loaded.seed
        if data == "none":
            assert loaded.dataset is None
            ds = loaded.materialize(32)
            assert ds.n == 32
        else:
            assert np.allclose(loaded.dataset.X, orig.dataset.X)


def test_corpus_read_reports_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"skeleton_prefix": "add x1", "d": 1, "constants": [], "seed": 0}\n')
    with pytest.raises(ValueError, match="bad.jsonl:1"):
        read_corpus(path)


def test_materialize_deterministic():
    rec = build_corpus(GenConfig.desk(max_variables=1), 1, seed=5)[0]
    a, b = rec.materialize(40), rec.materialize(40)
    assert np.array_equal(a.X, b.X) and np.array_equal(a.y, b.y)
