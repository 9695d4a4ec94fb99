"""Command-line surface: corpus generation, rendering, training,
inference, evaluation, ablations, and alignment diagnostics."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np


def _data_root() -> Path:
    return Path(os.environ.get("GRAPHSR_DATA_ROOT", "."))


def cmd_gen(args) -> int:
    from .generate import GenConfig, build_corpus, write_corpus

    cfg = GenConfig.desk(max_variables=args.max_vars, max_unary=args.max_unary,
                         max_nodes=args.max_nodes, max_constants=args.max_constants)
    records = build_corpus(cfg, args.count, seed=args.seed,
                           n_points=args.points if args.data != "none" else None)
    out = _data_root() / args.out
    out.parent.mkdir(parents=True, exist_ok=True)
    write_corpus(records, out, data=args.data)
    print(f"wrote {len(records)} skeletons to {out}")
    return 0


def cmd_render(args) -> int:
    from .generate import read_corpus
    from .render import RasterConfig, compose_graph, contact_sheet, dump_graph

    cfg = RasterConfig(height=args.height, width=args.width, patch=args.patch)
    records = read_corpus(_data_root() / args.inp)
    out = _data_root() / args.out
    graphs = []
    for i, rec in enumerate(records):
        g = compose_graph(rec.expression(), args.dmax, cfg)
        dump_graph(g, rec.skeleton, out, f"g{i:05d}", cfg)
        graphs.append(g)
    if args.sheet:
        contact_sheet(graphs[:64], out / args.sheet)
    print(f"rendered {len(records)} graphs into {out}")
    return 0


def cmd_train(args) -> int:
    from . import model as model_mod
    from .encoding import Vocabulary
    from .generate import read_corpus
    from .model import ModelConfig, TrainConfig

    if args.config:
        with open(args.config) as fh:
            raw = json.load(fh)
        cfg = model_mod.config_from_json(raw["model"]) if "model" in raw \
            else model_mod.config_from_json(raw)
        tcfg = TrainConfig(**raw.get("train", {})) if "train" in raw else TrainConfig.desk()
    elif args.profile == "desk":
        cfg, tcfg = ModelConfig.desk(), TrainConfig.desk()
    else:
        cfg, tcfg = ModelConfig(), TrainConfig()
    if args.seed is not None:
        tcfg = TrainConfig(**{**vars(tcfg), "seed": args.seed})
    corpus = read_corpus(_data_root() / args.corpus)
    vocab = Vocabulary(cfg.d_max)
    result = model_mod.train(corpus, cfg, tcfg, vocab, _data_root() / args.out)
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"stage-1 pixel accuracy: {result.stage1_pixel_accuracy:.4f}")
    print(f"validation loss: {result.val_loss:.4f}")
    return 0


def cmd_infer(args) -> int:
    from . import exprs, model as model_mod
    from .generate import read_corpus
    from .search import bagged_infer

    net = model_mod.load_model(_data_root() / args.checkpoint)
    records = read_corpus(_data_root() / args.data)
    results = []
    failures = 0
    for i, rec in enumerate(records):
        ds = rec.materialize(args.points)
        res = bagged_infer(net, ds, bags=args.bags, beam=args.beam,
                           points_per_bag=args.points, seed=args.seed,
                           max_nodes=args.max_nodes, workers=args.workers)
        if res.failed:
            failures += 1
            results.append({"record": i, "failed": True, "warnings": res.warnings})
            continue
        best = res.best
        results.append({
            "record": i,
            "failed": False,
            "expression_infix": exprs.to_infix(best.expression),
            "expression_prefix": exprs.prefix_text(best.expression),
            "skeleton_prefix": exprs.prefix_text(best.skeleton),
            "constants": [float(c) for c in best.constants],
            "r2": best.r2,
            "complexity": best.complexity,
            "log_prob": best.log_prob,
            "per_bag": [
                {"skeleton": exprs.prefix_text(c.skeleton), "r2": c.r2,
                 "complexity": c.complexity, "bag": c.diagnostics.get("bag")}
                for c in res.candidates
            ],
            "warnings": res.warnings,
        })
    out = _data_root() / args.out
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        json.dump(results, fh, indent=2)
    print(f"wrote {len(results)} results to {out} ({failures} failures)")
    return 1 if failures else 0


def cmd_eval(args) -> int:
    from .bench import RunConfig, load_suite, run_eval

    suite = load_suite(_data_root() / args.suite)
    cfg = RunConfig(checkpoint=_data_root() / args.checkpoint, noise=args.noise,
                    extrapolation=args.extrapolation, bags=args.bags, beam=args.beam,
                    points_per_bag=args.points, max_nodes=args.max_nodes,
                    trials=args.trials, seed=args.seed, workers=args.workers)
    agg = run_eval(suite, cfg, _data_root() / args.out)
    print(json.dumps({k: v for k, v in agg.items() if not k.endswith("_ci95")}, indent=2))
    return 1 if agg.get("hard_errors", 0) else 0


def cmd_ablate(args) -> int:
    from .bench import RunConfig, run_ablation
    from .encoding import Vocabulary
    from .generate import GenConfig, read_corpus
    from .model import ModelConfig, TrainConfig

    corpus = read_corpus(_data_root() / args.corpus)
    cfg = ModelConfig.desk()
    tcfg = TrainConfig.desk(seed=args.seed)
    run_cfg = RunConfig(bags=args.bags, beam=args.beam, trials=args.trials,
                        seed=args.seed, max_nodes=args.max_nodes,
                        points_per_bag=args.points)
    summary = run_ablation(corpus, cfg, tcfg, Vocabulary(cfg.d_max), run_cfg,
                           _data_root() / args.out,
                           eval_gen=GenConfig.desk(max_variables=cfg.d_max),
                           n_eval_problems=args.eval_problems)
    print(json.dumps({v: s.get("symbolic_solution_rate")
                      for v, s in summary["variants"].items()}, indent=2))
    return 0


def cmd_simmatrix(args) -> int:
    from . import model as model_mod
    from .bench import emit_similarity_matrix
    from .generate import read_corpus
    from .model import prepare_corpus

    net = model_mod.load_model(_data_root() / args.checkpoint)
    records = read_corpus(_data_root() / args.corpus)[:args.batch]
    batch = prepare_corpus(records, net.cfg, net.vocab)
    emit_similarity_matrix(net, batch, _data_root() / args.out)
    print(f"similarity matrices written to {args.out}")
    return 0


def cmd_plot(args) -> int:
    """Re-render the aggregate plot from a report directory."""
    from .bench import _plot_rates

    report_dir = _data_root() / args.report
    count = 0
    for agg_path in sorted(report_dir.glob("*_aggregate.json")):
        with open(agg_path) as fh:
            agg = json.load(fh)
        _plot_rates(agg, agg_path.with_name(agg_path.name.replace("_aggregate.json", "_rates.png")))
        count += 1
    print(f"re-rendered {count} plots in {report_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="graphsr",
        description="Graph-guided multimodal symbolic regression toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a skeleton corpus (JSONL)")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--max-vars", type=int, default=3)
    p.add_argument("--max-unary", type=int, default=3)
    p.add_argument("--max-nodes", type=int, default=50)
    p.add_argument("--max-constants", type=int, default=5)
    p.add_argument("--points", type=int, default=200)
    p.add_argument("--data", choices=("npz", "inline", "none"), default="npz")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("render", help="rasterize corpus expressions to PGM graphs")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--patch", type=int, default=8)
    p.add_argument("--dmax", type=int, default=3)
    p.add_argument("--sheet", default="")
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("train", help="two-stage training on a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--profile", choices=("desk", "paper"), default="desk")
    p.add_argument("--config", default="", help="JSON file {model: ..., train: ...}")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="bagged inference over datasets")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="corpus JSONL with datasets")
    p.add_argument("--bags", type=int, default=10)
    p.add_argument("--beam", type=int, default=20)
    p.add_argument("--points", type=int, default=200)
    p.add_argument("--max-nodes", type=int, default=50)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a benchmark suite")
    p.add_argument("--suite", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--extrapolation", action="store_true")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--bags", type=int, default=10)
    p.add_argument("--beam", type=int, default=20)
    p.add_argument("--points", type=int, default=200)
    p.add_argument("--max-nodes", type=int, default=50)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare ablation variants")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--bags", type=int, default=4)
    p.add_argument("--beam", type=int, default=6)
    p.add_argument("--points", type=int, default=200)
    p.add_argument("--max-nodes", type=int, default=25)
    p.add_argument("--eval-problems", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("simmatrix", help="alignment similarity heat map")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_simmatrix)

    p = sub.add_parser("plot", help="re-render plots from report CSV/JSON")
    p.add_argument("--report", required=True)
    p.set_defaults(fn=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
