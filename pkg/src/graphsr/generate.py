"""Random skeleton generation and dataset sampling.

Skeletons are grown as random binary trees decorated with unary operators,
drawn from the operator frequency tables, then validated against the same
nesting constraints the decoder enforces. Data points are sampled in
clusters with per-cluster ranges; rows whose target is undefined are zeroed
wholesale.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from . import exprs
from .constraints import DEFAULT_TABLE, ConstraintTable, violations
from .exprs import Bin, Const, Expr, Hole, Pow, Una, Var

# Operator frequency tables used by the skeleton generator.
BINARY_FREQ = {"add": 1.0, "sub": 0.5, "mul": 1.0, "div": 0.5}
UNARY_FREQ = {
    "abs": 0.1,
    "pow2": 1.0,
    "pow3": 1.0,
    "pow5": 0.1,
    "sqrt": 0.5,
    "sin": 0.5,
    "cos": 0.5,
    "tan": 0.1,
    "arcsin": 0.1,
    "log": 0.1,
    "exp": 0.5,
}


@dataclass(frozen=True)
class GenConfig:
    max_variables: int = 10
    max_unary: int = 5
    binary_extra: int = 5  # max binary operators = n_variables + binary_extra
    max_constants: int = 5
    max_nodes: int = 50
    binary_freq: dict = field(default_factory=lambda: dict(BINARY_FREQ))
    unary_freq: dict = field(default_factory=lambda: dict(UNARY_FREQ))
    const_low: float = 0.0
    const_high: float = 10.0
    leaf_const_prob: float = 0.3
    max_pow_exponent: int = 9  # cap on composed power chains such as (x^3)^3
    max_retries: int = 1000

    def __post_init__(self):
        if any(v < 0 for v in self.binary_freq.values()):
            raise ValueError("binary frequencies must be nonnegative")
        if any(v < 0 for v in self.unary_freq.values()):
            raise ValueError("unary frequencies must be nonnegative")

    @classmethod
    def desk(cls, max_variables: int = 3, max_unary: int = 3, **overrides) -> "GenConfig":
        """Small-problem profile used by the calibration experiments."""
        return replace(cls(max_variables=max_variables, max_unary=max_unary), **overrides)

    def max_binary(self, n_variables: int) -> int:
        return n_variables + self.binary_extra


@dataclass
class Dataset:
    """Sampled points: X is n x d, y is length n, plus sampling provenance."""

    X: np.ndarray
    y: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.X.ndim != 2 or self.y.ndim != 1 or self.X.shape[0] != self.y.shape[0]:
            raise ValueError(f"inconsistent dataset shapes {self.X.shape} / {self.y.shape}")
        if not (np.isfinite(self.X).all() and np.isfinite(self.y).all()):
            raise ValueError("datasets must not contain non-finite entries")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]


def _weighted_choice(rng: np.random.Generator, freq: dict) -> str:
    names = list(freq)
    weights = np.array([freq[n] for n in names], dtype=np.float64)
    total = weights.sum()
    if total <= 0:
        raise ValueError("frequency table sums to zero")
    return names[rng.choice(len(names), p=weights / total)]


def _pow_chain_ok(e: Expr, cap: int) -> bool:
    """Reject composed power chains whose effective exponent exceeds cap."""

    def rec(node: Expr, running: Fraction) -> bool:
        if isinstance(node, Una) and node.op in exprs.POW_UNARY_EXPONENT:
            running = running * exprs.POW_UNARY_EXPONENT[node.op]
            if abs(running) > cap:
                return False
            return rec(node.child, running)
        if isinstance(node, Pow):
            running = running * node.exponent
            if abs(running) > cap:
                return False
            return rec(node.base, running)
        return all(rec(c, Fraction(1)) for c in exprs.children(node))

    return rec(e, Fraction(1))


def _grow_tree(cfg: GenConfig, rng: np.random.Generator) -> Expr:
    """One unvalidated candidate skeleton."""
    k = int(rng.integers(1, cfg.max_variables + 1))
    nb_lo = max(0, k - 1)
    nb = int(rng.integers(nb_lo, cfg.max_binary(k) + 1))

    # Tree shape: repeatedly split a random leaf slot into a binary node.
    # Leaves are indices into a list; rebuild the tree at the end.
    nodes: list = [None]  # None marks an unassigned leaf slot
    kids: dict[int, tuple[int, int]] = {}
    leaves = [0]
    for _ in range(nb):
        slot = leaves.pop(int(rng.integers(len(leaves))))
        left, right = len(nodes), len(nodes) + 1
        nodes.extend([None, None])
        nodes[slot] = _weighted_choice(rng, cfg.binary_freq)
        kids[slot] = (left, right)
        leaves.extend([left, right])

    # Leaf contents: x1..xk each at least once, the rest constants or
    # repeat variables subject to the constant budget.
    rng.shuffle(leaves)
    n_const = 0
    leaf_exprs: dict[int, Expr] = {}
    for i, slot in enumerate(leaves):
        if i < k:
            leaf_exprs[slot] = Var(i + 1)
        elif n_const < cfg.max_constants and rng.random() < cfg.leaf_const_prob:
            leaf_exprs[slot] = Hole(0)
            n_const += 1
        else:
            leaf_exprs[slot] = Var(int(rng.integers(1, k + 1)))

    def build(slot: int) -> Expr:
        if slot in kids:
            l, r = kids[slot]
            return Bin(nodes[slot], build(l), build(r))
        return leaf_exprs[slot]

    tree = build(0)

    # Insert unary operators above randomly chosen subtrees.
    nu = int(rng.integers(0, cfg.max_unary + 1))
    for _ in range(nu):
        op = _weighted_choice(rng, cfg.unary_freq)
        target = int(rng.integers(exprs.complexity(tree)))
        counter = [0]

        def wrap(node: Expr) -> Expr:
            my_id = counter[0]
            counter[0] += 1
            if my_id == target:
                return Una(op, node)
            if isinstance(node, Bin):
                return Bin(node.op, wrap(node.left), wrap(node.right))
            if isinstance(node, Una):
                return Una(node.op, wrap(node.child))
            if isinstance(node, Pow):
                return Pow(wrap(node.base), node.exponent)
            return node

        tree = wrap(tree)
    return tree


def _reslot(skeleton: Expr) -> Expr:
    """Renumber placeholder slots contiguously in pre-order."""
    counter = [0]

    def rec(node: Expr) -> Expr:
        if isinstance(node, Hole):
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

    return rec(skeleton)


def gen_skeleton(
    cfg: GenConfig,
    rng: np.random.Generator,
    table: ConstraintTable = DEFAULT_TABLE,
) -> Expr:
    """Sample one skeleton satisfying all budgets and nesting constraints.

    Resamples internally on violation; raises after cfg.max_retries failed
    attempts so generation stays total.
    """
    for _ in range(cfg.max_retries):
        tree = _grow_tree(cfg, rng)
        if exprs.complexity(tree) > cfg.max_nodes:
            continue
        if not _pow_chain_ok(tree, cfg.max_pow_exponent):
            continue
        if violations(exprs.to_prefix(tree), table):
            continue
        return _reslot(tree)
    raise RuntimeError(f"no valid skeleton within {cfg.max_retries} retries")


def sample_constants(skeleton: Expr, rng: np.random.Generator,
                     low: float = 0.0, high: float = 10.0) -> Expr:
    """Instantiate every placeholder with an independent uniform draw."""
    p = exprs.placeholder_count(skeleton)
    draws = rng.uniform(low, high, size=p)
    return exprs.instantiate(skeleton, draws)


def sample_points(expr: Expr, n: int, rng: np.random.Generator) -> Dataset:
    """Clustered sampling: k ~ U{1..5} clusters, each U(-alpha, alpha) with
    its own alpha ~ U{1..10}; rows with an undefined target are zeroed."""
    d = max(1, exprs.max_var_index(expr))
    k = int(rng.integers(1, 6))
    sizes = [n // k] * k
    for i in range(n % k):
        sizes[i] += 1
    alphas = [int(rng.integers(1, 11)) for _ in range(k)]
    parts = [rng.uniform(-a, a, size=(sz, d)) for sz, a in zip(sizes, alphas)]
    X = np.vstack(parts)
    y = exprs.eval_batch(expr, X)
    bad = ~np.isfinite(y)
    X[bad] = 0.0
    y[bad] = 0.0
    return Dataset(X, y, provenance={"k": k, "alphas": alphas})


def add_noise(ds: Dataset, level: float, rng: np.random.Generator) -> Dataset:
    """Additive Gaussian noise on the target, scaled by its std; X unchanged."""
    if level < 0:
        raise ValueError("noise level must be nonnegative")
    scale = float(np.std(ds.y))
    if level == 0.0 or scale == 0.0:
        return Dataset(ds.X.copy(), ds.y.copy(), dict(ds.provenance))
    noise = level * scale * rng.standard_normal(ds.y.shape)
    return Dataset(ds.X.copy(), ds.y + noise, dict(ds.provenance))


# ---------------------------------------------------------------------------
# Corpus records (JSONL, one record per skeleton)
# ---------------------------------------------------------------------------

@dataclass
class CorpusRecord:
    skeleton: Expr
    d: int
    constants: list[float]
    seed: int
    dataset: Dataset | None = None

    def expression(self) -> Expr:
        return exprs.instantiate(self.skeleton, self.constants)

    def materialize(self, n_points: int) -> Dataset:
        """Dataset attached to the record, regenerated from seed if absent."""
        if self.dataset is not None:
            return self.dataset
        rng = np.random.default_rng(self.seed)
        return sample_points(self.expression(), n_points, rng)


def build_corpus(
    cfg: GenConfig,
    count: int,
    seed: int,
    n_points: int | None = None,
    table: ConstraintTable = DEFAULT_TABLE,
) -> list[CorpusRecord]:
    """Generate skeleton/constants/seed records; datasets attach only when
    n_points is given (they always regenerate deterministically from seed)."""
    records = []
    for child in np.random.SeedSequence(seed).spawn(count):
        sk_ss, data_ss = child.spawn(2)
        rng = np.random.default_rng(sk_ss)
        skeleton = gen_skeleton(cfg, rng, table)
        p = exprs.placeholder_count(skeleton)
        constants = list(rng.uniform(cfg.const_low, cfg.const_high, size=p))
        rec_seed = int(np.random.default_rng(data_ss).integers(2**31))
        rec = CorpusRecord(skeleton, exprs.max_var_index(skeleton), constants, rec_seed)
        if n_points is not None:
            rec.dataset = rec.materialize(n_points)
        records.append(rec)
    return records


def write_corpus(records: Sequence[CorpusRecord], path: str | Path,
                 data: str = "npz") -> None:
    """JSONL corpus with datasets carried inline, in a sidecar npz, or
    regenerated from seed (data='none')."""
    path = Path(path)
    arrays = {}
    with open(path, "w") as fh:
        for i, rec in enumerate(records):
            row = {
                "skeleton_prefix": exprs.prefix_text(rec.skeleton),
                "d": rec.d,
                "constants": [float(c) for c in rec.constants],
                "seed": rec.seed,
            }
            if rec.dataset is not None and data == "inline":
                row["X"] = rec.dataset.X.tolist()
                row["y"] = rec.dataset.y.tolist()
            elif rec.dataset is not None and data == "npz":
                row["dataset_path"] = f"{path.name}.data.npz#{i}"
                arrays[f"X{i}"] = rec.dataset.X
                arrays[f"y{i}"] = rec.dataset.y
            fh.write(json.dumps(row) + "\n")
    if arrays:
        np.savez_compressed(f"{path}.data.npz", **arrays)


def read_corpus(path: str | Path) -> list[CorpusRecord]:
    path = Path(path)
    records = []
    sidecars: dict[str, np.lib.npyio.NpzFile] = {}
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                skeleton = exprs.parse_prefix_text(row["skeleton_prefix"])
            except (ValueError, KeyError) as err:
                raise ValueError(f"{path}:{line_no}: bad corpus record: {err}") from err
            rec = CorpusRecord(skeleton, row["d"], list(row["constants"]), row["seed"])
            if "X" in row:
                rec.dataset = Dataset(np.array(row["X"], dtype=np.float64),
                                      np.array(row["y"], dtype=np.float64))
            elif "dataset_path" in row:
                ref, idx = row["dataset_path"].rsplit("#", 1)
                full = str(path.parent / ref)
                if full not in sidecars:
                    sidecars[full] = np.load(full)
                npz = sidecars[full]
                rec.dataset = Dataset(npz[f"X{idx}"], npz[f"y{idx}"])
            records.append(rec)
    return records
