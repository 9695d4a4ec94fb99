"""Benchmark harness: suite loading, noise/extrapolation evaluation
protocols, ablation grids, and the alignment similarity matrix."""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import exprs, metrics, model as model_mod, search
from .generate import CorpusRecord, Dataset, GenConfig, add_noise, build_corpus
from .model import GraphSRModel, ModelConfig, TrainConfig
from .search import bagged_infer


@dataclass
class Problem:
    id: str
    expression: exprs.Expr
    ranges: list[tuple[float, float]]
    samples: int = 200


@dataclass
class BenchmarkSuite:
    name: str
    problems: list[Problem]


@dataclass
class RunConfig:
    checkpoint: str | Path | None = None
    noise: float = 0.0
    extrapolation: bool = False
    bags: int = 10
    beam: int = 20
    points_per_bag: int = 200
    max_nodes: int = 50
    restarts: int = 10
    trials: int = 10
    train_fraction: float = 0.75
    seed: int = 0
    workers: int = 1
    no_vision: bool = False
    no_alignment: bool = False
    no_consistency: bool = False

    def __post_init__(self):
        if self.noise < 0:
            raise ValueError("noise level must be nonnegative")


def load_suite(path: str | Path) -> BenchmarkSuite:
    """Parse a JSONL suite; malformed entries report their line number."""
    path = Path(path)
    problems: list[Problem] = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                row = json.loads(line)
                pid = row["id"]
                expr = exprs.parse_prefix_text(row["expression"])
                ranges = [(float(lo), float(hi)) for lo, hi in row["ranges"]]
            except (KeyError, ValueError, TypeError) as err:
                raise ValueError(f"{path}:{line_no}: bad suite entry: {err}") from err
            for lo, hi in ranges:
                if not lo < hi:
                    raise ValueError(f"{path}:{line_no}: degenerate range for {pid}")
            d = exprs.max_var_index(expr)
            if len(ranges) < d:
                raise ValueError(f"{path}:{line_no}: {pid} needs {d} ranges")
            problems.append(Problem(pid, expr, ranges, int(row.get("samples", 200))))
    if not problems:
        import warnings as _warnings

        _warnings.warn(f"suite {path} contains no problems")
    return BenchmarkSuite(path.stem, problems)


def records_to_suite(records: Sequence[CorpusRecord], name: str,
                     samples: int = 200, span: float = 5.0) -> BenchmarkSuite:
    """Treat corpus records (with their sampled constants) as problems."""
    problems = []
    for i, rec in enumerate(records):
        expr = rec.expression()
        d = max(1, exprs.max_var_index(expr))
        problems.append(Problem(f"{name}-{i}", expr, [(-span, span)] * d, samples))
    return BenchmarkSuite(name, problems)


def _sample_problem_dataset(problem: Problem, n: int, rng: np.random.Generator,
                            scale: float = 1.0) -> Dataset:
    d = max(1, exprs.max_var_index(problem.expression))
    cols = []
    for j in range(d):
        lo, hi = problem.ranges[j]
        mid, half = (lo + hi) / 2, (hi - lo) / 2 * scale
        cols.append(rng.uniform(mid - half, mid + half, size=n))
    X = np.stack(cols, axis=1)
    y = exprs.eval_batch(problem.expression, X)
    bad = ~np.isfinite(y)
    X[bad] = 0.0
    y[bad] = 0.0
    return Dataset(X, y)


def _file_hash(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _config_hash(cfg: RunConfig) -> str:
    blob = json.dumps({k: str(v) for k, v in vars(cfg).items()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def run_problem(net: GraphSRModel, problem: Problem, cfg: RunConfig,
                trial_seed: int) -> dict:
    """One trial: sample, split, optionally perturb, infer, score."""
    rng = np.random.default_rng(trial_seed)
    ds = _sample_problem_dataset(problem, problem.samples, rng)
    n_train = max(2, int(round(ds.n * cfg.train_fraction)))
    train = Dataset(ds.X[:n_train], ds.y[:n_train])
    test = Dataset(ds.X[n_train:], ds.y[n_train:]) if ds.n - n_train >= 2 else train
    if cfg.noise > 0:
        train = add_noise(train, cfg.noise, rng)
    result = bagged_infer(net, train, bags=cfg.bags, beam=cfg.beam,
                          points_per_bag=cfg.points_per_bag, seed=trial_seed,
                          max_nodes=cfg.max_nodes, restarts=cfg.restarts)
    row = {"problem": problem.id, "trial": trial_seed, "error": ""}
    if result.failed:
        row.update({"error": "; ".join(result.warnings) or "inference failed",
                    "r2": -math.inf, "accuracy_solution": False,
                    "symbolic_solution": False, "ned": 1.0, "complexity": 0,
                    "expression": ""})
        return row
    best = result.best
    report = metrics.evaluate(problem.expression, best.expression, test, rng=rng)
    row.update(report.row())
    row["expression"] = exprs.prefix_text(best.expression)
    row["infix"] = exprs.to_infix(best.expression)
    if cfg.extrapolation:
        ood = _sample_problem_dataset(problem, problem.samples, rng, scale=2.0)
        pred_in = exprs.eval_batch(best.expression, test.X)
        pred_out = exprs.eval_batch(best.expression, ood.X)
        row["mse_in"] = float(np.nanmean((pred_in - test.y) ** 2))
        row["mse_out"] = float(np.nanmean((pred_out - ood.y) ** 2))
    return row


def run_eval(suite: BenchmarkSuite, cfg: RunConfig, out_dir: str | Path,
             net: GraphSRModel | None = None) -> dict:
    """Evaluate a checkpoint on a suite with trial repetition.

    Per-problem failures are recorded and do not stop the run. Emits
    rows CSV, aggregate JSON (with provenance hashes), and a rate plot.
    Returns the aggregate dict (key 'hard_errors' counts failures).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if net is None:
        if cfg.checkpoint is None:
            raise ValueError("run_eval needs a model or a checkpoint path")
        net = model_mod.load_model(cfg.checkpoint)

    trial_root = np.random.SeedSequence(cfg.seed)
    rows: list[dict] = []
    jobs = []
    for problem in suite.problems:
        for t, ss in enumerate(trial_root.spawn(cfg.trials)):
            jobs.append((problem, int(np.random.default_rng(ss).integers(2 ** 31))))

    def run_job(job):
        problem, tseed = job
        try:
            return run_problem(net, problem, cfg, tseed)
        except Exception as err:  # per-problem isolation
            return {"problem": problem.id, "trial": tseed, "error": repr(err),
                    "r2": -math.inf, "accuracy_solution": False,
                    "symbolic_solution": False, "ned": 1.0, "complexity": 0,
                    "expression": ""}

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            rows = list(pool.map(run_job, jobs))
    else:
        rows = [run_job(j) for j in jobs]

    reports = [metrics.EvalReport(r["r2"], r["accuracy_solution"],
                                  r["symbolic_solution"], r["ned"], r["complexity"])
               for r in rows if not r["error"]]
    agg = metrics.aggregate(reports)
    agg["suite"] = suite.name
    agg["hard_errors"] = sum(1 for r in rows if r["error"])
    agg["config_hash"] = _config_hash(cfg)
    if cfg.checkpoint is not None:
        agg["checkpoint_hash"] = _file_hash(cfg.checkpoint)
    metrics.write_report_csv(rows, out_dir / f"{suite.name}_rows.csv")
    metrics.write_aggregate_json(agg, out_dir / f"{suite.name}_aggregate.json")
    _plot_rates(agg, out_dir / f"{suite.name}_rates.png")
    if cfg.extrapolation:
        _write_mse_histograms(rows, out_dir / f"{suite.name}_mse_hist.csv")
    return agg


def _plot_rates(agg: dict, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = ["accuracy_solution_rate", "symbolic_solution_rate"]
    vals = [agg.get(n, 0.0) for n in names]
    errs = []
    for n in names:
        lo, hi = agg.get(f"{n}_ci95", (vals[0], vals[0]))
        errs.append((agg.get(n, 0.0) - lo, hi - agg.get(n, 0.0)))
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.bar(range(len(names)), vals, yerr=np.array(errs).T, capsize=4,
           color=["#4878d0", "#ee854a"])
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(["accuracy", "symbolic"])
    ax.set_ylim(0, 1)
    ax.set_ylabel("solution rate")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _write_mse_histograms(rows: Sequence[dict], path: Path) -> None:
    """Log-MSE histogram data for in/out-of-domain error distributions."""
    edges = np.linspace(-12, 12, 49)
    out_rows = []
    for kind in ("mse_in", "mse_out"):
        vals = np.array([r[kind] for r in rows if kind in r and np.isfinite(r[kind])
                         and r[kind] > 0])
        hist, _ = np.histogram(np.log10(vals), bins=edges) if vals.size else (np.zeros(48), None)
        for lo, hi, c in zip(edges[:-1], edges[1:], hist):
            out_rows.append({"kind": kind, "log10_mse_lo": lo, "log10_mse_hi": hi,
                             "count": int(c)})
    metrics.write_report_csv(out_rows, path)


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------

ABLATION_VARIANTS = ("full", "no_vision", "no_alignment", "no_consistency")


def variant_config(base: ModelConfig, variant: str) -> ModelConfig:
    if variant == "full":
        return base
    if variant not in ("no_vision", "no_alignment", "no_consistency"):
        raise ValueError(f"unknown variant {variant!r}")
    return replace(base, **{variant: True})


def train_variants(corpus: Sequence[CorpusRecord], base_cfg: ModelConfig,
                   tcfg: TrainConfig, vocab, out_dir: str | Path,
                   variants: Sequence[str] = ABLATION_VARIANTS) -> dict[str, Path]:
    """Train each ablation variant from scratch on the same corpus."""
    out_dir = Path(out_dir)
    paths = {}
    for variant in variants:
        vdir = out_dir / variant
        result = model_mod.train(corpus, variant_config(base_cfg, variant), tcfg,
                                 vocab, vdir)
        paths[variant] = result.checkpoint_path
    return paths


def run_ablation(corpus: Sequence[CorpusRecord], base_cfg: ModelConfig,
                 tcfg: TrainConfig, vocab, run_cfg: RunConfig,
                 out_dir: str | Path,
                 factor_grid: dict[str, Sequence[int]] | None = None,
                 eval_gen: GenConfig | None = None,
                 n_eval_problems: int = 50,
                 checkpoints: dict[str, Path] | None = None) -> dict:
    """Module ablations (variant grid) plus factor sweeps.

    Factors default to sweeping the number of constants, unary operators,
    and test points around the standard operating point (3 constants,
    3 unary operators, 200 test points). Every (variant, factor, value)
    cell is isolated: a failure records an error and the grid continues.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if checkpoints is None:
        checkpoints = train_variants(corpus, base_cfg, tcfg, vocab, out_dir / "ckpts")
    if factor_grid is None:
        factor_grid = {"constants": [0, 1, 2, 3, 4, 5],
                       "unary": [0, 1, 2, 3, 4, 5],
                       "points": [50, 100, 200, 400]}
    gen_base = eval_gen or GenConfig.desk()

    rows = []
    summary: dict = {"variants": {}}
    for variant, ckpt in checkpoints.items():
        net = model_mod.load_model(ckpt)
        base_suite = _factor_suite(gen_base, "base", n_eval_problems,
                                   run_cfg.seed, constants=3, unary=3)
        agg = run_eval(base_suite, replace(run_cfg, checkpoint=ckpt),
                       out_dir / variant / "base", net=net)
        summary["variants"][variant] = agg
        for factor, values in factor_grid.items():
            for value in values:
                try:
                    suite = _factor_suite(gen_base, f"{factor}{value}", n_eval_problems,
                                          run_cfg.seed, **{factor: value})
                    cell_cfg = replace(run_cfg, checkpoint=ckpt)
                    if factor == "points":
                        cell_cfg = replace(cell_cfg, points_per_bag=min(value, cell_cfg.points_per_bag))
                    cell = run_eval(suite, cell_cfg, out_dir / variant / f"{factor}_{value}",
                                    net=net)
                    rows.append({"variant": variant, "factor": factor, "value": value,
                                 "accuracy_solution_rate": cell.get("accuracy_solution_rate", 0.0),
                                 "symbolic_solution_rate": cell.get("symbolic_solution_rate", 0.0),
                                 "mean_ned": cell.get("mean_ned", 1.0), "error": ""})
                except Exception as err:
                    rows.append({"variant": variant, "factor": factor, "value": value,
                                 "accuracy_solution_rate": math.nan,
                                 "symbolic_solution_rate": math.nan,
                                 "mean_ned": math.nan, "error": repr(err)})
    metrics.write_report_csv(rows, out_dir / "ablation_grid.csv")
    metrics.write_aggregate_json(summary, out_dir / "ablation_summary.json")
    _plot_ablation(rows, out_dir)
    return summary


def _factor_suite(gen_base: GenConfig, name: str, count: int, seed: int,
                  constants: int = 3, unary: int = 3, points: int = 200) -> BenchmarkSuite:
    import zlib

    cfg = replace(gen_base, max_constants=constants, max_unary=unary)
    records = build_corpus(cfg, count, seed=seed + zlib.crc32(name.encode()) % 100000)
    return records_to_suite(records, name, samples=points)


def _plot_ablation(rows: Sequence[dict], out_dir: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = [r for r in rows if not r["error"]]
    for metric_name in ("accuracy_solution_rate", "symbolic_solution_rate", "mean_ned"):
        factors = sorted({r["factor"] for r in rows})
        if not factors:
            continue
        fig, axes = plt.subplots(1, len(factors), figsize=(4 * len(factors), 3),
                                 squeeze=False)
        for ax, factor in zip(axes[0], factors):
            for variant in ABLATION_VARIANTS:
                pts = sorted([(r["value"], r[metric_name]) for r in rows
                              if r["factor"] == factor and r["variant"] == variant])
                if pts:
                    ax.plot([p[0] for p in pts], [p[1] for p in pts],
                            marker="o", label=variant)
            ax.set_xlabel(factor)
            ax.set_ylabel(metric_name)
        axes[0][-1].legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(out_dir / f"ablation_{metric_name}.png", dpi=120)
        plt.close(fig)


# ---------------------------------------------------------------------------
# Alignment similarity matrix
# ---------------------------------------------------------------------------

def emit_similarity_matrix(net: GraphSRModel, batch: model_mod.Batch,
                           out_dir: str | Path) -> dict[str, np.ndarray]:
    """Cosine similarity between pooled dataset and visual embeddings,
    before and after the contrastive projection; heat-map PNG + CSV."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if net.cfg.no_vision:
        raise ValueError("similarity matrix needs the visual pipeline")
    with ad.no_grad():
        ds_feats = net.dataset_encode(batch.bits)
        vis_feats = net.real_visual_encode(batch.graphs)
        _, _, vis_q = net.quantize(vis_feats)
        mats = {}
        for tag, project in (("before", False), ("after", True)):
            s, v = net.contrastive_embeddings(ds_feats, vis_q, project=project)
            mats[tag] = s.data @ v.data.T
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(8, 3.6))
    for ax, (tag, mat) in zip(axes, mats.items()):
        im = ax.imshow(mat, vmin=-1, vmax=1, cmap="RdBu_r")
        ax.set_title(f"{tag} alignment")
        np.savetxt(out_dir / f"similarity_{tag}.csv", mat, delimiter=",")
    fig.colorbar(im, ax=axes, shrink=0.8)
    fig.savefig(out_dir / "similarity.png", dpi=120)
    plt.close(fig)
    return mats
