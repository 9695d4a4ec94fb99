"""Neural components and training: real/virtual visual encoders with a
quantized codebook, the dataset encoder, fusion, and the weight-shared
skeleton decoder, plus every loss term and the two-stage schedule.

Training runs in two stages: the real visual encoder (with its codebook
and reconstruction head) first optimizes quantization + reconstruction,
then freezes; the remaining modules train against the combined skeleton /
virtual-index / alignment / consistency objective. The decoder and fusion
stack are a single parameter set used by both the real-vision-fed and
virtual-vision-fed pipelines.
"""

from __future__ import annotations

import csv
import json
import math
import queue
import threading
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import encoding, exprs, render
from .autodiff import Tensor
from .encoding import Vocabulary
from .generate import CorpusRecord, Dataset
from .render import RasterConfig

NEG_MASK = -1e9  # additive attention mask value; exp underflows to exact 0


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and loss weights; defaults follow the full-scale recipe.

    desk() gives the small-problem profile used for calibration runs.
    """

    d_max: int = 10
    dim: int = 512
    n_heads: int = 8
    dataset_layers: int = 4
    vve_layers: int = 2
    fusion_layers: int = 2
    decoder_layers: int = 12
    rve_layers: int = 4
    m: int = 64
    n_points: int = 200
    codebook_size: int = 512
    beta: float = 0.1
    lambda_cl: float = 0.1
    lambda_cons: float = 0.1
    tau_cl_init: float = 0.07
    gumbel_tau_start: float = 1.0
    gumbel_tau_end: float = 0.05
    alpha: float = 1e3
    ffn_mult: int = 4
    bit_embed_dim: int = 8
    max_seq_len: int = 56
    raster: RasterConfig = field(default_factory=RasterConfig)
    no_vision: bool = False
    no_alignment: bool = False
    no_consistency: bool = False

    def __post_init__(self):
        if self.dim % self.n_heads:
            raise ValueError("n_heads must divide dim")
        if not self.no_vision and self.m != self.raster.n_patches:
            raise ValueError(
                f"m={self.m} must equal the raster patch count {self.raster.n_patches}")

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        base = dict(
            d_max=3, dim=96, n_heads=4, dataset_layers=2, vve_layers=2,
            fusion_layers=1, decoder_layers=2, rve_layers=2, m=16,
            n_points=64, codebook_size=64, ffn_mult=2, max_seq_len=32,
            raster=RasterConfig(height=32, width=32, patch=8),
        )
        base.update(overrides)
        return cls(**base)

    @property
    def bits_per_point(self) -> int:
        return (self.d_max + 1) * encoding.BITS_PER_VALUE


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 300
    stage1_epochs: int = 5
    stage2_epochs: int = 50
    lr_max: float = 1e-4
    lr_min: float = 1e-5
    val_fraction: float = 0.1
    patience: int = 5
    seed: int = 0
    log_every: int = 50

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        base = dict(batch_size=32, stage2_epochs=30, lr_max=3e-4, lr_min=3e-5)
        base.update(overrides)
        return cls(**base)


def _causal_mask(t: int) -> np.ndarray:
    return np.triu(np.full((t, t), NEG_MASK, dtype=np.float64), k=1)


class GraphSRModel:
    """Parameter container plus the forward passes of every component."""

    def __init__(self, cfg: ModelConfig, vocab: Vocabulary, rng: np.random.Generator):
        self.cfg = cfg
        self.vocab = vocab
        self.rng = rng
        self.params: dict[str, Tensor] = {}
        self._build()

    # -- parameter helpers --------------------------------------------------

    def _p(self, name: str, shape, scale: float | None = None) -> Tensor:
        t = ad.parameter(shape, self.rng, scale) if isinstance(shape, tuple) else ad.parameter(shape)
        self.params[name] = t
        return t

    def _zeros(self, name: str, shape) -> Tensor:
        return self._p(name, np.zeros(shape))

    def _ones(self, name: str, shape) -> Tensor:
        return self._p(name, np.ones(shape))

    def _linear_params(self, name: str, d_in: int, d_out: int):
        self._p(f"{name}.w", (d_in, d_out))
        self._zeros(f"{name}.b", d_out)

    def _ln_params(self, name: str, d: int):
        self._ones(f"{name}.g", d)
        self._zeros(f"{name}.b", d)

    def _block_params(self, name: str, cross: bool = False):
        d = self.cfg.dim
        self._ln_params(f"{name}.ln1", d)
        for proj in ("wq", "wk", "wv", "wo"):
            self._linear_params(f"{name}.attn.{proj}", d, d)
        if cross:
            self._ln_params(f"{name}.lnx", d)
            for proj in ("wq", "wk", "wv", "wo"):
                self._linear_params(f"{name}.xattn.{proj}", d, d)
        self._ln_params(f"{name}.ln2", d)
        self._linear_params(f"{name}.ffn.fc1", d, d * self.cfg.ffn_mult)
        self._linear_params(f"{name}.ffn.fc2", d * self.cfg.ffn_mult, d)

    def _build(self):
        cfg = self.cfg
        d = cfg.dim
        if not cfg.no_vision:
            patch_dim = cfg.raster.patch ** 2 * cfg.d_max
            self._linear_params("rve.embed", patch_dim, d)
            self._p("rve.pos", self.rng.standard_normal((cfg.m, d)) * 0.02)
            for i in range(cfg.rve_layers):
                self._block_params(f"rve.blk{i}")
            self._ln_params("rve.out_ln", d)
            self._p("codebook", self.rng.standard_normal((cfg.codebook_size, d)))
            self._linear_params("recon.fc1", d, d * cfg.ffn_mult)
            self._linear_params("recon.fc2", d * cfg.ffn_mult, patch_dim)

        self._p("dsenc.bit_embed", self.rng.standard_normal((2, cfg.bit_embed_dim)) * 0.5)
        self._p("dsenc.bit_pos", self.rng.standard_normal((cfg.bits_per_point, cfg.bit_embed_dim)) * 0.02)
        self._linear_params("dsenc.embed", cfg.bits_per_point * cfg.bit_embed_dim, d)
        for i in range(cfg.dataset_layers):
            self._block_params(f"dsenc.blk{i}")
        self._ln_params("dsenc.out_ln", d)

        if not cfg.no_vision:
            for i in range(cfg.vve_layers):
                self._block_params(f"vve.blk{i}")
            self._p("vve.queries", self.rng.standard_normal((cfg.m, d)) * 0.02)
            for proj in ("wq", "wk", "wv", "wo"):
                self._linear_params(f"vve.xattn.{proj}", d, d)
            self._ln_params("vve.ln", d)
            self._linear_params("vve.cls.fc1", d, d)
            self._linear_params("vve.cls.fc2", d, cfg.codebook_size)
            self._p("fusion.type_embed", self.rng.standard_normal((2, d)) * 0.02)

        for i in range(cfg.fusion_layers):
            self._block_params(f"fusion.blk{i}")
        self._ln_params("fusion.out_ln", d)

        self._p("dec.tok_embed", self.rng.standard_normal((len(self.vocab), d)) * 0.02)
        self._p("dec.pos", self.rng.standard_normal((cfg.max_seq_len, d)) * 0.02)
        for i in range(cfg.decoder_layers):
            self._block_params(f"dec.blk{i}", cross=True)
        self._ln_params("dec.out_ln", d)
        self._linear_params("dec.head", d, len(self.vocab))

        if not cfg.no_vision:
            self._linear_params("cl.proj_s", d, d)
            self._linear_params("cl.proj_v", d, d)
            self._p("cl.log_tau", np.array(math.log(cfg.tau_cl_init)))

    # -- generic layers ------------------------------------------------------

    def _linear(self, name: str, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.params[f"{name}.w"]), self.params[f"{name}.b"])

    def _ln(self, name: str, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def _split_heads(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        h, dh = self.cfg.n_heads, self.cfg.dim // self.cfg.n_heads
        return ad.transpose(ad.reshape(x, (b, t, h, dh)), 1, 2)

    def _merge_heads(self, x: Tensor) -> Tensor:
        b, h, t, dh = x.shape
        return ad.reshape(ad.transpose(x, 1, 2), (b, t, h * dh))

    def _attention(self, name: str, x: Tensor, memory: Tensor | None = None,
                   mask: np.ndarray | None = None) -> Tensor:
        src = x if memory is None else memory
        q = self._split_heads(self._linear(f"{name}.wq", x))
        k = self._split_heads(self._linear(f"{name}.wk", src))
        v = self._split_heads(self._linear(f"{name}.wv", src))
        out = ad.stabilized_attention(q, k, v, self.cfg.alpha, mask)
        return self._linear(f"{name}.wo", self._merge_heads(out))

    def _ffn(self, name: str, x: Tensor) -> Tensor:
        return self._linear(f"{name}.fc2", ad.gelu(self._linear(f"{name}.fc1", x)))

    def _block(self, name: str, x: Tensor, memory: Tensor | None = None,
               self_mask: np.ndarray | None = None) -> Tensor:
        x = ad.add(x, self._attention(f"{name}.attn", self._ln(f"{name}.ln1", x), mask=self_mask))
        if memory is not None:
            x = ad.add(x, self._attention(f"{name}.xattn", self._ln(f"{name}.lnx", x), memory))
        return ad.add(x, self._ffn(f"{name}.ffn", self._ln(f"{name}.ln2", x)))

    # -- real visual encoder --------------------------------------------------

    def patchify(self, graphs: np.ndarray) -> np.ndarray:
        """(B, d_max, H, W) binary graphs -> (B, m, patch*patch*d_max) floats."""
        p = self.cfg.raster.patch
        b, d, h, w = graphs.shape
        gh, gw = h // p, w // p
        out = graphs.reshape(b, d, gh, p, gw, p).transpose(0, 2, 4, 1, 3, 5)
        return np.ascontiguousarray(out.reshape(b, gh * gw, d * p * p), dtype=ad.default_dtype())

    def unpatchify(self, patches: np.ndarray) -> np.ndarray:
        p = self.cfg.raster.patch
        h, w = self.cfg.raster.height, self.cfg.raster.width
        b, m, _ = patches.shape
        gh, gw = h // p, w // p
        out = patches.reshape(b, gh, gw, self.cfg.d_max, p, p).transpose(0, 3, 1, 4, 2, 5)
        return out.reshape(b, self.cfg.d_max, h, w)

    def real_visual_encode(self, graphs: np.ndarray) -> Tensor:
        """ViT-style patch encoder: (B, d_max, H, W) -> (B, m, dim)."""
        x = ad.add(ad.Tensor(self.patchify(graphs)) @ self.params["rve.embed.w"],
                   self.params["rve.embed.b"])
        x = ad.add(x, self.params["rve.pos"])
        for i in range(self.cfg.rve_layers):
            x = self._block(f"rve.blk{i}", x)
        return self._ln("rve.out_ln", x)

    def quantize(self, features: Tensor):
        """Nearest codebook rows (ties to the lowest index).

        Returns (indices, codebook_rows, straight_through_features); the
        straight-through output forwards quantized values and passes
        gradients to the encoder unchanged.
        """
        E = self.params["codebook"]
        f = features.data
        d2 = ((f ** 2).sum(-1, keepdims=True)
              - 2.0 * f @ E.data.T
              + (E.data ** 2).sum(-1))
        ids = d2.argmin(axis=-1)
        rows = ad.embedding(E, ids)
        st = ad.straight_through(features, rows)
        return ids, rows, st

    def quantization_loss(self, features: Tensor, rows: Tensor) -> Tensor:
        commit = ad.l2_distance(features, ad.stop_gradient(rows))
        codebook = ad.l2_distance(ad.stop_gradient(features), rows)
        return ad.add(ad.mul(commit, self.cfg.beta), codebook)

    def recon_logits(self, quantized: Tensor) -> Tensor:
        return self._linear("recon.fc2", ad.gelu(self._linear("recon.fc1", quantized)))

    def reconstruct(self, quantized: Tensor) -> np.ndarray:
        """Per-pixel probabilities (B, d_max, H, W)."""
        logits = self.recon_logits(quantized)
        probs = 1.0 / (1.0 + np.exp(-logits.data.astype(np.float64)))
        return self.unpatchify(probs)

    def losses_rve(self, graphs: np.ndarray) -> dict[str, Tensor]:
        feats = self.real_visual_encode(graphs)
        ids, rows, st = self.quantize(feats)
        l_quan = self.quantization_loss(feats, rows)
        logits = self.recon_logits(st)
        target = self.patchify(graphs)
        l_recon = ad.mul(ad.bce_with_logits(logits, target, reduction="sum"),
                         1.0 / graphs.shape[0])
        return {"quan": l_quan, "recon": l_recon,
                "rve": ad.add(l_quan, l_recon), "ids": ids}

    # -- dataset encoder -------------------------------------------------------

    def dataset_encode(self, bits: np.ndarray) -> Tensor:
        """(B, n, bits_per_point) binary grid -> (B, n, dim) point features.

        Bit position carries a positional embedding; the point axis does
        not, so the encoding is exactly equivariant to point order.
        """
        b, n, nb = bits.shape
        if nb != self.cfg.bits_per_point:
            raise ValueError(f"expected {self.cfg.bits_per_point} bits per point, got {nb}")
        flat = bits.reshape(b * n, nb).astype(np.int64)
        emb = ad.embedding(self.params["dsenc.bit_embed"], flat)  # (b*n, nb, e)
        emb = ad.add(emb, self.params["dsenc.bit_pos"])
        emb = ad.reshape(emb, (b, n, nb * self.cfg.bit_embed_dim))
        x = ad.add(emb @ self.params["dsenc.embed.w"], self.params["dsenc.embed.b"])
        for i in range(self.cfg.dataset_layers):
            x = self._block(f"dsenc.blk{i}", x)
        return self._ln("dsenc.out_ln", x)

    # -- virtual visual encoder -------------------------------------------------

    def vve_logits(self, ds_features: Tensor) -> Tensor:
        """m classification heads over the codebook: (B, n, dim) -> (B, m, K)."""
        x = ds_features
        for i in range(self.cfg.vve_layers):
            x = self._block(f"vve.blk{i}", x)
        b = x.shape[0]
        h, dh = self.cfg.n_heads, self.cfg.dim // self.cfg.n_heads
        queries = ad.reshape(self.params["vve.queries"], (1, self.cfg.m, self.cfg.dim))
        q = ad.transpose(ad.reshape(self._linear("vve.xattn.wq", queries),
                                    (1, self.cfg.m, h, dh)), 1, 2)
        k = self._split_heads(self._linear("vve.xattn.wk", x))
        v = self._split_heads(self._linear("vve.xattn.wv", x))
        att = ad.stabilized_attention(q, k, v, self.cfg.alpha)
        heads = self._linear("vve.xattn.wo", self._merge_heads(att))
        heads = self._ln("vve.ln", heads)
        return self._linear("vve.cls.fc2", ad.gelu(self._linear("vve.cls.fc1", heads)))

    def virtual_features(self, logits: Tensor, tau: float,
                         rng: np.random.Generator | None = None,
                         hard: bool = False):
        """Codebook rows selected by the heads.

        hard=True takes the argmax rows (inference); otherwise a
        Gumbel-softmax mixture keeps the selection differentiable.
        """
        ids = logits.data.argmax(axis=-1)
        if hard:
            return ids, ad.embedding(self.params["codebook"], ids)
        soft = ad.gumbel_softmax(logits, tau, rng or self.rng)
        return ids, ad.matmul(soft, self.params["codebook"])

    def vve_loss(self, logits: Tensor, target_ids: np.ndarray) -> Tensor:
        if target_ids.min() < 0 or target_ids.max() >= self.cfg.codebook_size:
            raise ValueError("codebook index out of range")
        return ad.cross_entropy(logits, target_ids, reduction="mean")

    # -- fusion and decoding -----------------------------------------------------

    def fuse(self, visual: Tensor | None, ds_features: Tensor) -> Tensor:
        if visual is None:
            x = ds_features
        else:
            type_emb = self.params["fusion.type_embed"]
            vis = ad.add(visual, ad.reshape(type_emb[0:1], (1, 1, self.cfg.dim)))
            ds = ad.add(ds_features, ad.reshape(type_emb[1:2], (1, 1, self.cfg.dim)))
            x = ad.concat([vis, ds], axis=1)
        for i in range(self.cfg.fusion_layers):
            x = self._block(f"fusion.blk{i}", x)
        return self._ln("fusion.out_ln", x)

    def decode_logits(self, memory: Tensor, token_ids: np.ndarray) -> Tensor:
        """Causal decoder over teacher tokens: (B, T) ids -> (B, T, V)."""
        b, t = token_ids.shape
        if t > self.cfg.max_seq_len:
            raise ValueError(f"sequence length {t} exceeds max {self.cfg.max_seq_len}")
        x = ad.embedding(self.params["dec.tok_embed"], token_ids.astype(np.int64))
        x = ad.add(x, self.params["dec.pos"][0:t])
        mask = _causal_mask(t)
        for i in range(self.cfg.decoder_layers):
            x = self._block(f"dec.blk{i}", x, memory=memory, self_mask=mask)
        return self._linear("dec.head", self._ln("dec.out_ln", x))

    # -- contrastive alignment ------------------------------------------------------

    def contrastive_embeddings(self, ds_features: Tensor, visual: Tensor,
                               project: bool = True):
        """Pooled, projected, unit-norm embeddings (s, v) of each modality."""
        s = ad.mean(ds_features, axis=1)
        v = ad.mean(visual, axis=1)
        if project:
            s = self._linear("cl.proj_s", s)
            v = self._linear("cl.proj_v", v)
        s = ad.div(s, ad.pow_const(ad.add(ad.sum_(ad.mul(s, s), -1, True), 1e-12), 0.5))
        v = ad.div(v, ad.pow_const(ad.add(ad.sum_(ad.mul(v, v), -1, True), 1e-12), 0.5))
        return s, v

    def contrastive_loss(self, ds_features: Tensor, visual: Tensor) -> Tensor:
        n = ds_features.shape[0]
        if n < 2:
            raise ValueError("contrastive loss needs a batch of at least 2")
        s, v = self.contrastive_embeddings(ds_features, visual)
        tau = ad.exp(self.params["cl.log_tau"])
        logits = ad.div(ad.matmul(s, ad.transpose(v)), tau)
        targets = np.arange(n)
        return ad.add(ad.cross_entropy(logits, targets),
                      ad.cross_entropy(ad.transpose(logits), targets))

    def consistency_loss(self, real_logits: Tensor, virtual_logits: Tensor,
                         keep: np.ndarray) -> Tensor:
        """Mean KL(real || virtual) over the kept (non-pad) positions."""
        if real_logits.shape != virtual_logits.shape:
            raise ValueError("pipelines produced different sequence shapes")
        b, t, vsize = real_logits.shape
        idx = np.flatnonzero(keep.reshape(-1))
        p = ad.reshape(real_logits, (b * t, vsize))[idx]
        q = ad.reshape(virtual_logits, (b * t, vsize))[idx]
        return ad.kl_categorical(p, q)

    # -- combined objective -------------------------------------------------------

    def losses_mmsr(self, batch: "Batch", tau: float,
                    rng: np.random.Generator | None = None) -> dict:
        """Every stage-2 term plus the weighted total."""
        cfg = self.cfg
        ds_feats = self.dataset_encode(batch.bits)
        inputs, targets = batch.teacher_pair()
        keep = targets != self.vocab.pad_id

        if cfg.no_vision:
            memory = self.fuse(None, ds_feats)
            logits = self.decode_logits(memory, inputs)
            l_sp = ad.cross_entropy(logits, targets, ignore_id=self.vocab.pad_id)
            return {"rsp": l_sp, "total": l_sp}

        real_feats = self.real_visual_encode(batch.graphs)
        real_ids, _, real_st = self.quantize(real_feats)
        vlogits = self.vve_logits(ds_feats)
        _, virtual_vis = self.virtual_features(vlogits, tau, rng)

        mem_real = self.fuse(real_st, ds_feats)
        mem_virtual = self.fuse(virtual_vis, ds_feats)
        logits_real = self.decode_logits(mem_real, inputs)
        logits_virtual = self.decode_logits(mem_virtual, inputs)

        l_rsp = ad.cross_entropy(logits_real, targets, ignore_id=self.vocab.pad_id)
        l_vsp = ad.cross_entropy(logits_virtual, targets, ignore_id=self.vocab.pad_id)
        l_vve = self.vve_loss(vlogits, real_ids)
        total = ad.add(ad.add(l_rsp, l_vsp), l_vve)
        out = {"rsp": l_rsp, "vsp": l_vsp, "vve": l_vve,
               "vve_ids": real_ids, "vve_pred": vlogits.data.argmax(-1)}
        if not cfg.no_alignment:
            l_cl = self.contrastive_loss(ds_feats, real_st)
            total = ad.add(total, ad.mul(l_cl, cfg.lambda_cl))
            out["cl"] = l_cl
        if not cfg.no_consistency:
            l_cons = self.consistency_loss(logits_real, logits_virtual, keep)
            total = ad.add(total, ad.mul(l_cons, cfg.lambda_cons))
            out["cons"] = l_cons
        out["total"] = total
        return out

    # -- inference entry point ------------------------------------------------------

    def build_memory(self, ds: Dataset) -> Tensor:
        """Graph-free memory for decoding: the virtual pipeline end to end."""
        bits = encoding.pad_encoded(encoding.encode_dataset(ds), ds.d, self.cfg.d_max)
        with ad.no_grad():
            ds_feats = self.dataset_encode(bits[None, ...])
            if self.cfg.no_vision:
                return self.fuse(None, ds_feats)
            vlogits = self.vve_logits(ds_feats)
            _, virtual_vis = self.virtual_features(vlogits, tau=1.0, hard=True)
            return self.fuse(virtual_vis, ds_feats)

    # -- parameter groups -------------------------------------------------------------

    def stage1_param_names(self) -> list[str]:
        return [k for k in self.params
                if k.startswith(("rve.", "recon.")) or k == "codebook"]

    def stage2_param_names(self) -> list[str]:
        stage1 = set(self.stage1_param_names())
        return [k for k in self.params if k not in stage1]

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        if missing:
            raise ValueError(f"checkpoint missing parameters: {sorted(missing)[:5]}")
        for k, p in self.params.items():
            if tuple(arrays[k].shape) != tuple(p.shape):
                raise ValueError(f"shape mismatch for {k}")
            p.data = arrays[k].astype(p.data.dtype)


# ---------------------------------------------------------------------------
# Batches and corpus preparation
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    graphs: np.ndarray      # (B, d_max, H, W) uint8
    bits: np.ndarray        # (B, n, bits_per_point) uint8
    token_ids: np.ndarray   # (B, T) int64, BOS .. EOS padded with PAD

    def teacher_pair(self):
        return self.token_ids[:, :-1], self.token_ids[:, 1:]


def encode_skeleton_ids(skeleton: exprs.Expr, vocab: Vocabulary, max_len: int) -> np.ndarray:
    tokens = exprs.to_prefix(skeleton)
    ids = [vocab.bos_id] + vocab.encode(tokens) + [vocab.eos_id]
    if len(ids) > max_len:
        raise ValueError(f"skeleton too long for max_seq_len ({len(ids)} > {max_len})")
    return np.array(ids + [vocab.pad_id] * (max_len - len(ids)), dtype=np.int64)


def prepare_record(rec: CorpusRecord, cfg: ModelConfig, vocab: Vocabulary):
    """(graph channels, bit grid, token ids) for one corpus record."""
    expr = rec.expression()
    graph = render.compose_graph(expr, cfg.d_max, cfg.raster)
    ds = rec.materialize(cfg.n_points)
    if ds.n != cfg.n_points:
        idx = np.random.default_rng(rec.seed).choice(ds.n, cfg.n_points, replace=ds.n < cfg.n_points)
        ds = Dataset(ds.X[idx], ds.y[idx])
    bits = encoding.pad_encoded(encoding.encode_dataset(ds), ds.d, cfg.d_max)
    ids = encode_skeleton_ids(rec.skeleton, vocab, cfg.max_seq_len + 1)
    return graph.channels, bits, ids


def prepare_corpus(records: Sequence[CorpusRecord], cfg: ModelConfig, vocab: Vocabulary,
                   workers: int = 4) -> Batch:
    """Render + tokenize a whole corpus with a bounded prefetch pipeline."""
    n = len(records)
    out: list = [None] * n
    work: "queue.Queue[int]" = queue.Queue()
    for i in range(n):
        work.put(i)

    def worker():
        while True:
            try:
                i = work.get_nowait()
            except queue.Empty:
                return
            out[i] = prepare_record(records[i], cfg, vocab)

    threads = [threading.Thread(target=worker) for _ in range(max(1, workers))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    graphs = np.stack([o[0] for o in out])
    bits = np.stack([o[1] for o in out])
    ids = np.stack([o[2] for o in out])
    return Batch(graphs, bits, ids)


# ---------------------------------------------------------------------------
# Two-stage training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint_path: Path
    history: list[dict]
    stage1_pixel_accuracy: float
    val_loss: float


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo:lo + batch_size]


def _loss_scalar(t: Tensor) -> float:
    return float(np.asarray(t.data))


def train(corpus: Sequence[CorpusRecord], cfg: ModelConfig, tcfg: TrainConfig,
          vocab: Vocabulary, out_dir: str | Path,
          log_name: str = "train_log.csv") -> TrainResult:
    """Stage 1 (quantized autoencoding) then stage 2 (multimodal decoding).

    Stage-1 parameters freeze before stage 2; a NaN loss aborts with
    diagnostics. Emits a CSV log and an atomic checkpoint.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(tcfg.seed)
    model = GraphSRModel(cfg, vocab, rng)
    data = prepare_corpus(corpus, cfg, vocab)
    n = data.token_ids.shape[0]
    n_val = max(2, int(n * tcfg.val_fraction)) if n >= 20 else 0
    val = Batch(data.graphs[:n_val], data.bits[:n_val], data.token_ids[:n_val]) if n_val else None
    tr = Batch(data.graphs[n_val:], data.bits[n_val:], data.token_ids[n_val:])
    n_train = tr.token_ids.shape[0]

    history: list[dict] = []
    log_path = out_dir / log_name
    log_fh = open(log_path, "w", newline="")
    log = csv.writer(log_fh)
    log.writerow(["stage", "step", "loss", "quan", "recon", "rsp", "vsp",
                  "vve", "cl", "cons", "lr", "gumbel_tau"])

    def abort_if_nan(value: float, step: int, stage: str, parts: dict):
        if math.isnan(value) or math.isinf(value):
            log_fh.close()
            detail = {k: _loss_scalar(v) for k, v in parts.items() if isinstance(v, Tensor)}
            raise RuntimeError(f"non-finite loss at {stage} step {step}: {detail}")

    # ---- Stage 1: real visual encoder + codebook + reconstruction
    pixel_acc = 1.0
    if not cfg.no_vision:
        steps_per_epoch = max(1, math.ceil(n_train / tcfg.batch_size))
        sched = ad.CosineSchedule(tcfg.lr_max, tcfg.lr_min,
                                  total_steps=tcfg.stage1_epochs * steps_per_epoch)
        opt = ad.Adam({k: model.params[k] for k in model.stage1_param_names()},
                      schedule=sched)
        step = 0
        for _ in range(tcfg.stage1_epochs):
            for idx in _batches(n_train, tcfg.batch_size, rng):
                losses = model.losses_rve(tr.graphs[idx])
                loss = losses["rve"]
                abort_if_nan(_loss_scalar(loss), step, "stage1", losses)
                opt.zero_grad()
                ad.backward(loss)
                opt.step()
                step += 1
                if step % tcfg.log_every == 0 or step == 1:
                    row = {"stage": 1, "step": step, "loss": _loss_scalar(loss),
                           "quan": _loss_scalar(losses["quan"]),
                           "recon": _loss_scalar(losses["recon"]),
                           "lr": opt.current_lr()}
                    history.append(row)
                    log.writerow([1, step, row["loss"], row["quan"], row["recon"],
                                  "", "", "", "", "", row["lr"], ""])
        pixel_acc = stage1_pixel_accuracy(model, tr.graphs[:min(64, n_train)])

    # ---- Stage 2: everything else, stage-1 parameters frozen
    steps_per_epoch = max(1, math.ceil(n_train / tcfg.batch_size))
    total_steps = tcfg.stage2_epochs * steps_per_epoch
    sched = ad.CosineSchedule(tcfg.lr_max, tcfg.lr_min, total_steps=total_steps)
    opt = ad.Adam({k: model.params[k] for k in model.stage2_param_names()},
                  schedule=sched)
    best_val = math.inf
    best_state: dict[str, np.ndarray] | None = None
    bad_epochs = 0
    step = 0
    tau = cfg.gumbel_tau_start
    for epoch in range(tcfg.stage2_epochs):
        for idx in _batches(n_train, tcfg.batch_size, rng):
            frac = min(1.0, step / max(1, total_steps - 1))
            tau = cfg.gumbel_tau_start + frac * (cfg.gumbel_tau_end - cfg.gumbel_tau_start)
            batch = Batch(tr.graphs[idx], tr.bits[idx], tr.token_ids[idx])
            losses = model.losses_mmsr(batch, tau, rng)
            loss = losses["total"]
            abort_if_nan(_loss_scalar(loss), step, "stage2", losses)
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            step += 1
            if step % tcfg.log_every == 0 or step == 1:
                row = {"stage": 2, "step": step, "loss": _loss_scalar(loss),
                       "lr": opt.current_lr(), "gumbel_tau": tau}
                for k in ("rsp", "vsp", "vve", "cl", "cons"):
                    row[k] = _loss_scalar(losses[k]) if k in losses else ""
                history.append(row)
                log.writerow([2, step, row["loss"], "", "", row["rsp"], row["vsp"],
                              row["vve"], row["cl"], row["cons"], row["lr"], tau])
        if val is not None:
            vloss = validation_loss(model, val, cfg, tau)
            if vloss < best_val - 1e-4:
                best_val = vloss
                best_state = model.state_arrays()
                bad_epochs = 0
            else:
                bad_epochs += 1
                if bad_epochs > tcfg.patience:
                    break
    if best_state is not None:
        model.load_state_arrays(best_state)
        val_loss = best_val
    else:
        val_loss = validation_loss(model, tr, cfg, tau) if n_train else math.inf

    log_fh.close()
    ckpt = out_dir / "model.ckpt"
    meta = {"model_config": _config_json(cfg), "train_config": asdict(tcfg),
            "final_gumbel_tau": tau, "val_loss": val_loss}
    ad.save_checkpoint(ckpt, model.state_arrays(), vocab.manifest_hash(), meta=meta)
    vocab.save(out_dir / "vocab.json")
    return TrainResult(ckpt, history, pixel_acc, val_loss)


def validation_loss(model: GraphSRModel, batch: Batch, cfg: ModelConfig,
                    tau: float, chunk: int = 64) -> float:
    total, count = 0.0, 0
    n = batch.token_ids.shape[0]
    rng = np.random.default_rng(0)
    for lo in range(0, n, chunk):
        part = Batch(batch.graphs[lo:lo + chunk], batch.bits[lo:lo + chunk],
                     batch.token_ids[lo:lo + chunk])
        if part.token_ids.shape[0] < 2:
            continue
        losses = model.losses_mmsr(part, tau, rng)
        total += _loss_scalar(losses["total"]) * part.token_ids.shape[0]
        count += part.token_ids.shape[0]
    return total / max(count, 1)


def stage1_pixel_accuracy(model: GraphSRModel, graphs: np.ndarray) -> float:
    with ad.no_grad():
        feats = model.real_visual_encode(graphs)
        _, _, st = model.quantize(feats)
        probs = model.reconstruct(st)
    return float(((probs > 0.5) == (graphs > 0.5)).mean())


def teacher_forced_accuracy(model: GraphSRModel, batch: Batch,
                            virtual: bool = True) -> tuple[float, float]:
    """(token top-1 over non-pad positions, exact-sequence rate)."""
    vocab = model.vocab
    inputs, targets = batch.teacher_pair()
    with ad.no_grad():
        ds_feats = model.dataset_encode(batch.bits)
        if model.cfg.no_vision:
            memory = model.fuse(None, ds_feats)
        elif virtual:
            vlogits = model.vve_logits(ds_feats)
            _, vis = model.virtual_features(vlogits, tau=1.0, hard=True)
            memory = model.fuse(vis, ds_feats)
        else:
            feats = model.real_visual_encode(batch.graphs)
            _, _, st = model.quantize(feats)
            memory = model.fuse(st, ds_feats)
        logits = model.decode_logits(memory, inputs)
    pred = logits.data.argmax(-1)
    keep = targets != vocab.pad_id
    token_acc = float((pred[keep] == targets[keep]).mean())
    exact = float(np.all((pred == targets) | ~keep, axis=1).mean())
    return token_acc, exact


def virtual_index_accuracy(model: GraphSRModel, batch: Batch) -> float:
    with ad.no_grad():
        feats = model.real_visual_encode(batch.graphs)
        ids, _, _ = model.quantize(feats)
        vlogits = model.vve_logits(model.dataset_encode(batch.bits))
    return float((vlogits.data.argmax(-1) == ids).mean())


def _config_json(cfg: ModelConfig) -> dict:
    d = asdict(cfg)
    d["raster"] = asdict(cfg.raster)
    return d


def config_from_json(d: dict) -> ModelConfig:
    d = dict(d)
    d["raster"] = RasterConfig(**d["raster"])
    return ModelConfig(**d)


def load_model(ckpt_path: str | Path, vocab: Vocabulary | None = None) -> GraphSRModel:
    """Rebuild a model from a checkpoint, verifying the vocabulary hash."""
    params, _, vocab_hash, meta = ad.load_checkpoint(ckpt_path)
    cfg = config_from_json(meta["model_config"])
    if vocab is None:
        vocab = Vocabulary(cfg.d_max)
    if vocab.manifest_hash() != vocab_hash:
        raise ValueError("checkpoint was written with a different vocabulary")
    model = GraphSRModel(cfg, vocab, np.random.default_rng(0))
    model.load_state_arrays(params)
    return model
