"""Pruning-based expression visualization.

A multivariate expression is reduced, one variable at a time, to a
univariate curve: subtrees that do not involve the chosen variable collapse
to the neutral element of their parent operation (0 under addition and
subtraction, 1 under multiplication and division), which also strips every
constant. Each pruned curve rasterizes to a binary image and the images
stack along the channel axis.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import exprs
from .exprs import Bin, Const, Expr, Hole, Pow, Una, Var


def dep_query(g: Expr, spec_var: int) -> bool:
    """Does the subtree's value depend on variable x_spec_var?

    Constants and placeholders never do; exponentiation checks its base
    only (the exponent is a constant, never a subtree).
    """
    if isinstance(g, (Const, Hole)):
        return False
    if isinstance(g, Var):
        return g.index == spec_var
    if isinstance(g, Bin):
        return dep_query(g.left, spec_var) or dep_query(g.right, spec_var)
    if isinstance(g, Pow):
        return dep_query(g.base, spec_var)
    assert isinstance(g, Una)
    return dep_query(g.child, spec_var)


def _prune_rec(f: Expr, spec_var: int) -> Expr:
    # Only called on subtrees known to depend on spec_var.
    if isinstance(f, Bin):
        neutral = exprs.ZERO if f.op in ("add", "sub") else exprs.ONE
        left = _prune_rec(f.left, spec_var) if dep_query(f.left, spec_var) else neutral
        right = _prune_rec(f.right, spec_var) if dep_query(f.right, spec_var) else neutral
        return Bin(f.op, left, right)
    if isinstance(f, Pow):
        base = _prune_rec(f.base, spec_var) if dep_query(f.base, spec_var) else exprs.ONE
        return Pow(base, f.exponent)
    if isinstance(f, Una):
        return Una(f.op, _prune_rec(f.child, spec_var))
    return f  # leaf: by the dependency guard this is the specified variable


def prune(f: Expr, spec_var: int, normalized: bool = True) -> Expr:
    """Reduce f to a function of x_spec_var alone.

    Pruned summands become 0, pruned factors become 1, a pruned power base
    becomes 1 with its exponent kept, and unary operators survive over
    pruned operands. When the variable is absent entirely the result is the
    constant 0. With normalized=True the identity summands/factors
    introduced by pruning are dropped again.
    """
    if not dep_query(f, spec_var):
        return exprs.ZERO
    out = _prune_rec(f, spec_var)
    return exprs.normalize(out) if normalized else out


# ---------------------------------------------------------------------------
# Rasterization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RasterConfig:
    height: int = 64
    width: int = 64
    x_max: float = 5.0
    samples: int = 512
    patch: int = 8  # patch grid must tile the raster exactly

    def __post_init__(self):
        if self.height % self.patch or self.width % self.patch:
            raise ValueError("patch size must tile the raster")
        if self.samples < 2:
            raise ValueError("need at least two curve samples")

    @property
    def n_patches(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)


@dataclass
class GraphTensor:
    """Stacked binary channels, one per variable of the source expression."""

    channels: np.ndarray  # (d_max, H, W) uint8 in {0, 1}
    var_indices: list[int]
    x_max: float

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.uint8)
        if self.channels.ndim != 3:
            raise ValueError("expected (d_max, H, W) channels")
        if not np.isin(self.channels, (0, 1)).all():
            raise ValueError("graph pixels must be binary")


def _draw_segment(img: np.ndarray, r0: int, c0: int, r1: int, c1: int) -> None:
    """1-px Bresenham segment, endpoints inclusive."""
    dr, dc = abs(r1 - r0), abs(c1 - c0)
    sr = 1 if r0 < r1 else -1
    sc = 1 if c0 < c1 else -1
    err = dc - dr
    r, c = r0, c0
    while True:
        img[r, c] = 1
        if r == r1 and c == c1:
            break
        e2 = 2 * err
        if e2 > -dr:
            err -= dr
            c += sc
        if e2 < dc:
            err += dc
            r += sr


def render_curve(f_i: Expr, cfg: RasterConfig = RasterConfig()) -> np.ndarray:
    """Rasterize a univariate expression into a binary H x W image.

    Samples on a uniform grid over [-x_max, x_max]; consecutive defined
    samples connect with 1-px segments, undefined samples break the
    polyline. The vertical window is the [p5, p95] band of the finite
    values, widened by 10%, so additive level shifts never change a pixel;
    flat curves draw as the horizontal midline.
    """
    H, W = cfg.height, cfg.width
    img = np.zeros((H, W), dtype=np.uint8)
    idx = exprs.max_var_index(f_i)
    xs = np.linspace(-cfg.x_max, cfg.x_max, cfg.samples)
    if idx == 0:
        ys = exprs.eval_batch(f_i, np.zeros((cfg.samples, 1)))
    else:
        X = np.zeros((cfg.samples, idx))
        X[:, idx - 1] = xs
        ys = exprs.eval_batch(f_i, X)
    finite = np.isfinite(ys)
    if not finite.any():
        return img

    lo, hi = np.percentile(ys[finite], [5.0, 95.0])
    span = hi - lo
    if span <= 1e-12 * max(1.0, abs(hi)):
        mid = H // 2
        cols = np.round(np.arange(cfg.samples)[finite] * (W - 1) / (cfg.samples - 1))
        img[mid, cols.astype(int)] = 1
        # connect gaps along the midline between consecutive defined samples
        where = np.flatnonzero(finite)
        for a, b in zip(where[:-1], where[1:]):
            if b == a + 1:
                c0 = int(round(a * (W - 1) / (cfg.samples - 1)))
                c1 = int(round(b * (W - 1) / (cfg.samples - 1)))
                img[mid, c0:c1 + 1] = 1
        return img
    lo -= 0.05 * span
    hi += 0.05 * span

    rows = np.round((hi - ys) * (H - 1) / (hi - lo))
    rows = np.clip(rows, 0, H - 1)
    cols = np.round(np.arange(cfg.samples) * (W - 1) / (cfg.samples - 1)).astype(int)
    prev = None
    for i in range(cfg.samples):
        if not finite[i]:
            prev = None
            continue
        r, c = int(rows[i]), cols[i]
        if prev is not None:
            _draw_segment(img, prev[0], prev[1], r, c)
        else:
            img[r, c] = 1
        prev = (r, c)
    return img


def compose_graph(f: Expr, d_max: int, cfg: RasterConfig = RasterConfig()) -> GraphTensor:
    """Channel i holds the curve of f pruned to x_i; absent variables and
    channels beyond the expression's dimensionality stay all-zero."""
    d = exprs.max_var_index(f)
    if d > d_max:
        raise ValueError(f"expression uses {d} variables, graph holds {d_max}")
    channels = np.zeros((d_max, cfg.height, cfg.width), dtype=np.uint8)
    for i in range(1, d_max + 1):
        if i <= d and dep_query(f, i):
            channels[i - 1] = render_curve(prune(f, i), cfg)
    return GraphTensor(channels, list(range(1, d_max + 1)), cfg.x_max)


# ---------------------------------------------------------------------------
# Disk formats: one PGM (P5) per channel plus a JSON sidecar
# ---------------------------------------------------------------------------

def write_pgm(img: np.ndarray, path: str | Path) -> None:
    img = np.asarray(img, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write((img * 255).tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P5":
            raise ValueError(f"{path}: not a binary PGM file")
        dims = fh.readline().split()
        fh.readline()  # maxval
        w, h = int(dims[0]), int(dims[1])
        data = np.frombuffer(fh.read(w * h), dtype=np.uint8).reshape(h, w)
    return (data > 127).astype(np.uint8)


def dump_graph(g: GraphTensor, skeleton: Expr, out_dir: str | Path,
               stem: str, cfg: RasterConfig) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i in range(g.channels.shape[0]):
        write_pgm(g.channels[i], out_dir / f"{stem}_x{i + 1}.pgm")
    sidecar = {
        "skeleton": exprs.prefix_text(skeleton),
        "d": exprs.max_var_index(skeleton),
        "cfg": asdict(cfg),
    }
    with open(out_dir / f"{stem}.json", "w") as fh:
        json.dump(sidecar, fh, indent=2)


def contact_sheet(graphs: list[GraphTensor], path: str | Path, cols: int = 8) -> None:
    """PNG montage of first channels, for eyeballing a rendered corpus."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n = len(graphs)
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(cols * 1.2, rows * 1.2))
    for ax in np.atleast_1d(axes).ravel():
        ax.axis("off")
    for i, g in enumerate(graphs):
        ax = np.atleast_1d(axes).ravel()[i]
        ax.imshow(1 - g.channels.max(axis=0), cmap="gray", interpolation="nearest")
    fig.tight_layout(pad=0.1)
    fig.savefig(path, dpi=120)
    plt.close(fig)
