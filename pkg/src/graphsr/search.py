"""Inference: constraint-masked beam search, BFGS constant fitting, and
bag-based candidate selection."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import exprs, metrics
from .constraints import (AncestorStack, ConstraintTable, DEFAULT_TABLE,
                          DecodeBudget, mask_logits)
from .generate import Dataset
from .model import GraphSRModel


@dataclass
class Candidate:
    skeleton: exprs.Expr
    constants: np.ndarray
    expression: exprs.Expr
    r2: float
    complexity: int
    log_prob: float
    diagnostics: dict = field(default_factory=dict)

    def sort_key(self):
        # highest fit first, then simpler, then more likely under the model
        return (-self.r2, self.complexity, -self.log_prob, exprs.prefix_text(self.skeleton))


@dataclass
class InferenceResult:
    best: Candidate | None
    candidates: list[Candidate]
    warnings: list[str] = field(default_factory=list)

    @property
    def failed(self) -> bool:
        return self.best is None


# ---------------------------------------------------------------------------
# Beam search
# ---------------------------------------------------------------------------

@dataclass
class _Beam:
    tokens: list[str]
    ids: list[int]
    log_prob: float
    stack: AncestorStack


def beam_search(model: GraphSRModel, ds: Dataset, beam_size: int,
                table: ConstraintTable = DEFAULT_TABLE,
                max_nodes: int = 50,
                length_norm: float = 0.7) -> tuple[list[tuple[list[str], float]], list[str]]:
    """Masked, length-normalized beam search over skeleton tokens.

    Returns (completed sequences with scores, warnings). Every completed
    sequence is a well-formed prefix program free of forbidden nestings by
    construction of the mask.
    """
    vocab = model.vocab
    budget = DecodeBudget(max_nodes=max_nodes, n_vars=min(ds.d, model.cfg.d_max))
    memory = model.build_memory(ds)
    max_steps = min(model.cfg.max_seq_len - 1, max_nodes + 1)

    beams = [_Beam([], [vocab.bos_id], 0.0, AncestorStack())]
    done: list[tuple[list[str], float]] = []
    warnings: list[str] = []
    for _ in range(max_steps):
        if not beams:
            break
        token_ids = np.array([b.ids for b in beams], dtype=np.int64)
        with ad.no_grad():
            logits = model.decode_logits(memory, token_ids)
        last = logits.data[:, -1, :].astype(np.float64)
        pool: list[tuple[float, int, int]] = []  # (score, beam idx, token id)
        for bi, beam in enumerate(beams):
            masked = mask_logits(last[bi], beam.stack, table, budget, vocab)
            logp = masked - _logsumexp(masked)
            for tid in np.flatnonzero(np.isfinite(logp)):
                pool.append((beam.log_prob + logp[tid], bi, int(tid)))
        pool.sort(key=lambda t: -t[0])
        next_beams: list[_Beam] = []
        for score, bi, tid in pool:
            src = beams[bi]
            if tid == vocab.eos_id:
                done.append((src.tokens, score / max(1, len(src.tokens)) ** length_norm))
                continue
            if len(next_beams) >= beam_size:
                continue
            token = vocab.tokens[tid]
            stack = src.stack.copy()
            stack.push_token(token)
            next_beams.append(_Beam(src.tokens + [token], src.ids + [tid], score, stack))
        beams = next_beams
        if len(done) >= 2 * beam_size:
            break
    if not done:
        warnings.append("no beam completed within the step limit")
    done.sort(key=lambda t: -t[1])
    # dedupe identical token sequences, best score first
    seen: set[tuple] = set()
    unique = []
    for tokens, score in done:
        key = tuple(tokens)
        if key not in seen:
            seen.add(key)
            unique.append((tokens, score))
    return unique[:beam_size], warnings


def _logsumexp(x: np.ndarray) -> float:
    m = np.max(x[np.isfinite(x)])
    return float(m + np.log(np.exp(x[np.isfinite(x)] - m).sum()))


# ---------------------------------------------------------------------------
# Constant fitting
# ---------------------------------------------------------------------------

def _numeric_grad(fn, x: np.ndarray, h_scale: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(x)
    for i in range(x.size):
        h = h_scale * max(1.0, abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (fn(xp) - fn(xm)) / (2 * h)
    return g


def bfgs_minimize(fn, x0: np.ndarray, max_iter: int = 200, gtol: float = 1e-12):
    """BFGS with backtracking Armijo line search and central-difference
    gradients; suited to the handful of constants a skeleton carries."""
    x = np.asarray(x0, dtype=np.float64).copy()
    n = x.size
    H = np.eye(n)
    fx = fn(x)
    g = _numeric_grad(fn, x)
    for _ in range(max_iter):
        if not np.isfinite(fx) or not np.isfinite(g).all():
            break
        if np.linalg.norm(g) < gtol:
            break
        p = -H @ g
        if p @ g >= 0:  # not a descent direction: reset curvature
            H = np.eye(n)
            p = -g
        t, c1 = 1.0, 1e-4
        gp = g @ p
        while t > 1e-14:
            fn_new = fn(x + t * p)
            if np.isfinite(fn_new) and fn_new <= fx + c1 * t * gp:
                break
            t *= 0.5
        else:
            break
        x_new = x + t * p
        g_new = _numeric_grad(fn, x_new)
        s, yv = x_new - x, g_new - g
        sy = s @ yv
        if sy > 1e-14:
            rho = 1.0 / sy
            I = np.eye(n)
            H = (I - rho * np.outer(s, yv)) @ H @ (I - rho * np.outer(yv, s)) \
                + rho * np.outer(s, s)
        x, fx, g = x_new, fn_new, g_new
    return x, fx


def fit_constants(skeleton: exprs.Expr, ds: Dataset,
                  rng: np.random.Generator | None = None,
                  restarts: int = 10, init_low: float = 0.0, init_high: float = 10.0,
                  log_prob: float = 0.0, simplify_eps: float = 1e-6,
                  full_ds: Dataset | None = None) -> Candidate:
    """Fit placeholder constants on ds by restarted BFGS over the mean
    squared residual; score the winner on full_ds (defaults to ds)."""
    rng = rng or np.random.default_rng(0)
    score_ds = full_ds if full_ds is not None else ds
    p = exprs.placeholder_count(skeleton)
    if p == 0:
        expr = exprs.instantiate(skeleton, [])
        return _finish_candidate(skeleton, np.zeros(0), expr, score_ds, log_prob, {})

    X, y = ds.X, ds.y

    def objective(c: np.ndarray) -> float:
        pred = exprs.eval_batch(exprs.instantiate(skeleton, c), X)
        resid = pred - y
        bad = ~np.isfinite(resid)
        resid = np.where(bad, 1e3, resid)
        return float((resid ** 2).mean())

    best_c, best_f = None, math.inf
    for _ in range(restarts):
        c0 = rng.uniform(init_low, init_high, size=p)
        c_fit, f_fit = bfgs_minimize(objective, c0)
        if np.isfinite(f_fit) and f_fit < best_f and np.isfinite(c_fit).all():
            best_c, best_f = c_fit, f_fit
    if best_c is None:
        return Candidate(skeleton, np.full(p, np.nan), exprs.instantiate(skeleton, [0.0] * p),
                         -math.inf, exprs.complexity(skeleton), log_prob,
                         {"diverged": True})
    expr = exprs.simplify_small_terms(exprs.instantiate(skeleton, best_c), simplify_eps)
    return _finish_candidate(skeleton, best_c, expr, score_ds, log_prob,
                             {"fit_mse": best_f})


def _finish_candidate(skeleton, constants, expr, ds, log_prob, diagnostics) -> Candidate:
    pred = exprs.eval_batch(expr, ds.X)
    score = metrics.r2(ds.y, pred)
    return Candidate(skeleton, np.asarray(constants, dtype=np.float64), expr, score,
                     exprs.complexity(expr), log_prob, diagnostics)


# ---------------------------------------------------------------------------
# Bagged inference
# ---------------------------------------------------------------------------

def bagged_infer(model: GraphSRModel, ds: Dataset, bags: int = 10, beam: int = 20,
                 points_per_bag: int = 200, seed: int = 0,
                 table: ConstraintTable = DEFAULT_TABLE, max_nodes: int = 50,
                 restarts: int = 10, workers: int = 1) -> InferenceResult:
    """Beam-search each random bag, fit constants, keep the candidate with
    the best fit on the full dataset (ties: lower complexity, then higher
    beam log-probability). Bags run concurrently; results are
    deterministic for a given seed regardless of scheduling."""
    root = np.random.SeedSequence(seed)
    bag_seeds = root.spawn(bags)
    n_take = min(points_per_bag, ds.n)
    warnings: list[str] = []

    def run_bag(i: int) -> tuple[list[tuple[list[str], float]], list[str], Dataset]:
        bag_rng = np.random.default_rng(bag_seeds[i])
        idx = bag_rng.choice(ds.n, size=n_take, replace=False)
        bag_ds = Dataset(ds.X[idx], ds.y[idx])
        seqs, warn = beam_search(model, bag_ds, beam, table, max_nodes)
        return seqs, warn, bag_ds

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            bag_outputs = list(pool.map(run_bag, range(bags)))
    else:
        bag_outputs = [run_bag(i) for i in range(bags)]

    candidates: list[Candidate] = []
    fitted: dict[str, Candidate] = {}
    fit_rng = np.random.default_rng(root.spawn(1)[0])
    for bag_i, (seqs, warn, bag_ds) in enumerate(bag_outputs):
        warnings.extend(warn)
        for tokens, score in seqs:
            try:
                skeleton = exprs.from_prefix(tokens)
            except exprs.PrefixParseError as err:  # mask should prevent this
                warnings.append(f"bag {bag_i}: unparseable beam output: {err}")
                continue
            key = exprs.prefix_text(skeleton)
            if key in fitted:
                continue
            cand = fit_constants(skeleton, bag_ds, fit_rng, restarts=restarts,
                                 log_prob=score, full_ds=ds)
            cand.diagnostics["bag"] = bag_i
            fitted[key] = cand
            candidates.append(cand)
    if not candidates:
        return InferenceResult(None, [], warnings + ["no candidates produced"])
    candidates.sort(key=Candidate.sort_key)
    return InferenceResult(candidates[0], candidates, warnings)
