"""Graph-guided multimodal symbolic regression at desk scale."""

from .exprs import (Bin, Const, Expr, Hole, Pow, Una, Var, complexity,
                    eval_batch, eval_point, from_prefix, parse_prefix_text,
                    prefix_text, simplify_small_terms, to_prefix)
from .generate import Dataset, GenConfig, add_noise, build_corpus, gen_skeleton
from .render import GraphTensor, RasterConfig, compose_graph, dep_query, prune
from .encoding import FloatCode, Vocabulary, decode_float, encode_dataset, encode_float
from .model import GraphSRModel, ModelConfig, TrainConfig, train
from .search import Candidate, bagged_infer, beam_search, fit_constants
from .metrics import EvalReport, evaluate, ned, r2, symbolic_solution

__version__ = "0.1.0"
