"""Dataset bit-encoding and the shared symbol vocabulary.

Each floating-point value is packed into 17 bits (1 sign, 8 exponent with
bias 127, 8 mantissa), a truncated single-precision layout that preserves
numeric structure across wildly different scales better than min-max or
z-score rescaling. A data row of d variables plus the target becomes
(d+1)*17 binary tokens.
"""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .exprs import BINARY_OPS, PLACEHOLDER_TOKEN, UNARY_OPS
from .generate import Dataset

BITS_PER_VALUE = 17
_BIAS = 127
_MIN_NORMAL = 2.0 ** -126
_MAX_CODE_VALUE = (1.0 + 255.0 / 256.0) * 2.0 ** 127


class FloatCode(NamedTuple):
    sign: int
    exponent: int  # biased, 8 bits
    mantissa: int  # top 8 fraction bits

    def bits(self) -> np.ndarray:
        out = np.zeros(BITS_PER_VALUE, dtype=np.uint8)
        out[0] = self.sign
        for i in range(8):
            out[1 + i] = (self.exponent >> (7 - i)) & 1
            out[9 + i] = (self.mantissa >> (7 - i)) & 1
        return out

    @classmethod
    def from_bits(cls, bits: Sequence[int]) -> "FloatCode":
        bits = list(bits)
        if len(bits) != BITS_PER_VALUE:
            raise ValueError(f"expected {BITS_PER_VALUE} bits, got {len(bits)}")
        e = int("".join(str(int(b)) for b in bits[1:9]), 2)
        m = int("".join(str(int(b)) for b in bits[9:17]), 2)
        return cls(int(bits[0]), e, m)


def encode_float(v: float) -> FloatCode:
    """Truncating 17-bit encoding; zero is the all-zero code.

    Values outside the normal range clamp to the nearest representable
    code (callers are expected to have zeroed pathological rows already).
    """
    v = float(v)
    if not math.isfinite(v):
        raise ValueError("cannot encode a non-finite value")
    if v == 0.0:
        return FloatCode(0, 0, 0)
    sign = 1 if v < 0 else 0
    a = abs(v)
    if a < _MIN_NORMAL:
        return FloatCode(sign, 1, 0)
    if a >= _MAX_CODE_VALUE:
        return FloatCode(sign, 254, 255)
    bits = np.float64(a).view(np.uint64)
    e64 = int(bits >> np.uint64(52)) & 0x7FF
    m52 = int(bits) & ((1 << 52) - 1)
    e = e64 - 1023 + _BIAS
    m = m52 >> 44  # truncate, never round
    if e < 1:
        return FloatCode(sign, 1, 0)
    if e > 254:
        return FloatCode(sign, 254, 255)
    return FloatCode(sign, e, m)


def decode_float(code: FloatCode) -> float:
    if code == (0, 0, 0):
        return 0.0
    frac = 1.0 + code.mantissa / 256.0
    return (-1.0) ** code.sign * frac * 2.0 ** (code.exponent - _BIAS)


def encode_value_bits(v: float) -> np.ndarray:
    return encode_float(v).bits()


def encode_dataset(ds: Dataset) -> np.ndarray:
    """Bit-token grid of shape (n, (d+1)*17): x1..xd then y per row."""
    n, d = ds.X.shape
    out = np.zeros((n, (d + 1) * BITS_PER_VALUE), dtype=np.uint8)
    for i in range(n):
        for j in range(d):
            out[i, j * BITS_PER_VALUE:(j + 1) * BITS_PER_VALUE] = encode_value_bits(ds.X[i, j])
        out[i, d * BITS_PER_VALUE:] = encode_value_bits(ds.y[i])
    return out


def pad_encoded(grid: np.ndarray, d: int, d_max: int) -> np.ndarray:
    """Widen an encoded grid from d to d_max variables.

    Absent variables take the all-zero code; the target block stays last.
    """
    if d > d_max:
        raise ValueError(f"dataset has {d} variables, model takes at most {d_max}")
    if d == d_max:
        return grid
    n = grid.shape[0]
    out = np.zeros((n, (d_max + 1) * BITS_PER_VALUE), dtype=np.uint8)
    out[:, : d * BITS_PER_VALUE] = grid[:, : d * BITS_PER_VALUE]
    out[:, d_max * BITS_PER_VALUE:] = grid[:, d * BITS_PER_VALUE:]
    return out


# ---------------------------------------------------------------------------
# Vocabulary
# ---------------------------------------------------------------------------

FORMAT_VERSION = 1

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"


class Vocabulary:
    """Dense token<->id bijection over the skeleton symbols plus framing."""

    def __init__(self, d_max: int = 10):
        self.d_max = d_max
        self.tokens: list[str] = (
            [PAD, BOS, EOS, PLACEHOLDER_TOKEN]
            + list(BINARY_OPS)
            + list(UNARY_OPS)
            + [f"x{i}" for i in range(1, d_max + 1)]
            + ["0", "1"]
        )
        self.token_to_id = {t: i for i, t in enumerate(self.tokens)}
        if len(self.token_to_id) != len(self.tokens):
            raise ValueError("vocabulary tokens are not unique")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return self.token_to_id[PAD]

    @property
    def bos_id(self) -> int:
        return self.token_to_id[BOS]

    @property
    def eos_id(self) -> int:
        return self.token_to_id[EOS]

    @property
    def symbol_tokens(self) -> list[str]:
        """Tree symbols only: operators, variables, placeholder."""
        return (
            [PLACEHOLDER_TOKEN]
            + list(BINARY_OPS)
            + list(UNARY_OPS)
            + [f"x{i}" for i in range(1, self.d_max + 1)]
        )

    def encode(self, tokens: Sequence[str]) -> list[int]:
        try:
            return [self.token_to_id[t] for t in tokens]
        except KeyError as err:
            raise KeyError(f"token not in vocabulary: {err.args[0]!r}") from None

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def manifest(self) -> dict:
        return {"format_version": FORMAT_VERSION, "d_max": self.d_max, "tokens": self.tokens}

    def manifest_hash(self) -> str:
        blob = json.dumps(self.manifest(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.manifest(), fh, indent=2)

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        with open(path) as fh:
            manifest = json.load(fh)
        if manifest.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported vocabulary format {manifest.get('format_version')}")
        vocab = cls(manifest["d_max"])
        if vocab.tokens != manifest["tokens"]:
            raise ValueError("vocabulary manifest does not match this build's token layout")
        return vocab
