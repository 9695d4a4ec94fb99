"""Evaluation metrics: goodness of fit, structural recovery, and tree
edit distance between canonicalized expression trees."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import exprs
from .exprs import Bin, Const, Expr, Hole, Pow, Una, Var
from .generate import Dataset

R2_SOLUTION_THRESHOLD = 0.999


def r2(y: np.ndarray, y_hat: np.ndarray) -> float:
    """Coefficient of determination; -inf marks an unusable prediction.

    A constant target is a degenerate case: 1 when the residuals vanish,
    -inf otherwise. Non-finite predictions also map to -inf so failed fits
    sort below every real score.
    """
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {y_hat.shape}")
    if y.size < 2:
        raise ValueError("need at least two points")
    if not np.isfinite(y_hat).all():
        return -math.inf
    ss_res = float(((y - y_hat) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0.0:
        return 1.0 if ss_res == 0.0 else -math.inf
    return 1.0 - ss_res / ss_tot


def _probe_matrix(f: Expr, f_hat: Expr, n_probes: int, budget: int,
                  rng: np.random.Generator, span: float = 5.0):
    """Points where both expressions are defined, resampled up to budget."""
    d = max(1, exprs.max_var_index(f), exprs.max_var_index(f_hat))
    got_f, got_g = [], []
    tries = 0
    while sum(len(a) for a in got_f) < n_probes and tries < budget:
        X = rng.uniform(-span, span, size=(n_probes, d))
        a = exprs.eval_batch(f, X)
        b = exprs.eval_batch(f_hat, X)
        ok = np.isfinite(a) & np.isfinite(b)
        got_f.append(a[ok])
        got_g.append(b[ok])
        tries += 1
    fa = np.concatenate(got_f)[:n_probes]
    fb = np.concatenate(got_g)[:n_probes]
    return fa, fb


def _is_constant(values: np.ndarray, tol: float) -> bool:
    return float(np.std(values)) <= tol * (1.0 + abs(float(np.mean(values))))


def symbolic_solution(f: Expr, f_hat: Expr, n_probes: int = 64,
                      tol: float = 1e-6, budget: int = 32,
                      rng: np.random.Generator | None = None) -> bool:
    """Structural recovery up to an additive or multiplicative constant.

    Numeric check: the prediction must itself be non-constant, and either
    f - f_hat or f / f_hat must be constant (and finite) across random
    probe points. Probes where either side is undefined are resampled.
    """
    rng = rng or np.random.default_rng(20240901)
    fa, fb = _probe_matrix(f, f_hat, n_probes, budget, rng)
    if fa.size < max(8, n_probes // 8):
        return False
    if _is_constant(fb, tol):
        return False
    diff = fa - fb
    if _is_constant(diff, tol):
        return True
    safe = np.abs(fb) > 1e-12
    if safe.sum() < max(8, fa.size // 2):
        return False
    ratio = fa[safe] / fb[safe]
    return bool(np.isfinite(ratio).all() and _is_constant(ratio, tol))


# ---------------------------------------------------------------------------
# Normalized tree edit distance
# ---------------------------------------------------------------------------

@dataclass
class CanonTree:
    label: str
    kids: list

    def size(self) -> int:
        return 1 + sum(k.size() for k in self.kids)


def _structural_key(t: CanonTree):
    return (t.label, tuple(_structural_key(k) for k in t.kids))


def canonical_tree(e: Expr, sort_commutative: bool = True) -> CanonTree:
    """Labelled ordered tree with every constant collapsed to one label.

    add/mul children are put in a deterministic order (toggleable) so that
    argument order alone does not register as edit distance.
    """
    if isinstance(e, Bin):
        kids = [canonical_tree(e.left, sort_commutative),
                canonical_tree(e.right, sort_commutative)]
        if sort_commutative and e.op in ("add", "mul"):
            kids.sort(key=_structural_key)
        return CanonTree(e.op, kids)
    if isinstance(e, Una):
        return CanonTree(e.op, [canonical_tree(e.child, sort_commutative)])
    if isinstance(e, Pow):
        return CanonTree(f"pow^{e.exponent}", [canonical_tree(e.base, sort_commutative)])
    if isinstance(e, Var):
        return CanonTree(f"x{e.index}", [])
    assert isinstance(e, (Const, Hole))
    return CanonTree(exprs.PLACEHOLDER_TOKEN, [])


def tree_edit_distance(t1: CanonTree, t2: CanonTree) -> int:
    """Ordered tree edit distance with unit costs (Zhang-Shasha)."""

    def postorder(t: CanonTree):
        labels, lmost = [], []

        def rec(node: CanonTree) -> int:
            first_leaf = None
            for kid in node.kids:
                leaf = rec(kid)
                if first_leaf is None:
                    first_leaf = leaf
            labels.append(node.label)
            me = len(labels) - 1
            lmost.append(first_leaf if first_leaf is not None else me)
            return lmost[me]

        rec(t)
        return labels, lmost

    l1, lm1 = postorder(t1)
    l2, lm2 = postorder(t2)
    n1, n2 = len(l1), len(l2)
    keyroots1 = [i for i in range(n1) if i == n1 - 1 or lm1[i] not in lm1[i + 1:]]
    keyroots2 = [i for i in range(n2) if i == n2 - 1 or lm2[i] not in lm2[i + 1:]]
    dist = np.zeros((n1, n2), dtype=np.int64)

    def treedist(i: int, j: int) -> None:
        li, lj = lm1[i], lm2[j]
        m, n = i - li + 2, j - lj + 2
        fd = np.zeros((m, n), dtype=np.int64)
        fd[1:, 0] = np.arange(1, m)
        fd[0, 1:] = np.arange(1, n)
        for a in range(1, m):
            for b in range(1, n):
                ia, jb = li + a - 1, lj + b - 1
                if lm1[ia] == li and lm2[jb] == lj:
                    cost = 0 if l1[ia] == l2[jb] else 1
                    fd[a, b] = min(fd[a - 1, b] + 1, fd[a, b - 1] + 1,
                                   fd[a - 1, b - 1] + cost)
                    dist[ia, jb] = fd[a, b]
                else:
                    pa, pb = lm1[ia] - li, lm2[jb] - lj
                    fd[a, b] = min(fd[a - 1, b] + 1, fd[a, b - 1] + 1,
                                   fd[pa, pb] + dist[ia, jb])

    for i in keyroots1:
        for j in keyroots2:
            treedist(i, j)
    return int(dist[n1 - 1, n2 - 1])


def ned(f: Expr, f_hat: Expr, sort_commutative: bool = True) -> float:
    """Edit distance between canonical trees over the ground-truth size,
    clipped to [0, 1]."""
    t_f = canonical_tree(f, sort_commutative)
    t_g = canonical_tree(f_hat, sort_commutative)
    d = tree_edit_distance(t_f, t_g)
    return min(1.0, d / t_f.size())


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    r2: float
    accuracy_solution: bool
    symbolic_solution: bool
    ned: float
    complexity: int

    def row(self) -> dict:
        return asdict(self)


def evaluate(f: Expr, predicted: Expr, ds: Dataset,
             rng: np.random.Generator | None = None) -> EvalReport:
    """All four metrics for one problem instance."""
    y_hat = exprs.eval_batch(predicted, ds.X)
    score = r2(ds.y, y_hat)
    return EvalReport(
        r2=score,
        accuracy_solution=bool(score >= R2_SOLUTION_THRESHOLD),
        symbolic_solution=symbolic_solution(f, predicted, rng=rng),
        ned=ned(f, predicted),
        complexity=exprs.complexity(predicted),
    )


def bootstrap_ci(values: Sequence[float], n_boot: int = 2000, level: float = 0.95,
                 rng: np.random.Generator | None = None) -> tuple[float, float]:
    """Percentile bootstrap interval for the mean."""
    rng = rng or np.random.default_rng(0)
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return (math.nan, math.nan)
    means = rng.choice(v, size=(n_boot, v.size), replace=True).mean(axis=1)
    lo, hi = np.percentile(means, [(1 - level) / 2 * 100, (1 + level) / 2 * 100])
    return float(lo), float(hi)


def aggregate(reports: Sequence[EvalReport], rng: np.random.Generator | None = None) -> dict:
    acc = [float(r.accuracy_solution) for r in reports]
    sym = [float(r.symbolic_solution) for r in reports]
    neds = [r.ned for r in reports]
    compl = [float(r.complexity) for r in reports]
    out = {"n_problems": len(reports)}
    for name, vals in [("accuracy_solution_rate", acc), ("symbolic_solution_rate", sym),
                       ("mean_ned", neds), ("mean_complexity", compl)]:
        if vals:
            out[name] = float(np.mean(vals))
            lo, hi = bootstrap_ci(vals, rng=rng)
            out[f"{name}_ci95"] = [lo, hi]
    return out


def write_report_csv(rows: Sequence[dict], path: str | Path) -> None:
    import csv

    rows = list(rows)
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def write_aggregate_json(agg: dict, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(agg, fh, indent=2)
