"""Fine (per-timestamp) and coarse (SAX token) encoders.

Both map a segment to a representation matrix: the fine encoder is a small
transformer encoder giving ``j x d`` rows, the coarse encoder discretises the
segment into a SAX word and looks each symbol up in a learned table, giving
``L x d_S`` rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.stats import norm

from . import diffcore as dc
from .config import FineEncoderConfig, SaxConfig
from .diffcore import Tensor
from .errors import ContractError
from .tsdata import Segment, segment_bounds

Params = dict[str, Tensor]


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _param(arr, name: str) -> Tensor:
    return Tensor(arr, requires_grad=True, name=name)


# ------------------------------------------------------------------- fine


def init_fine_params(cfg: FineEncoderConfig, rng: np.random.Generator) -> Params:
    d, ff = cfg.d_model, cfg.d_ff
    p: Params = {
        "in.W": _param(_glorot(rng, cfg.input_dim, d), "in.W"),
        "in.b": _param(np.zeros(d), "in.b"),
    }
    for layer in range(cfg.n_layers):
        pre = f"l{layer}."
        for k in ("Wq", "Wk", "Wv", "Wo"):
            p[pre + k] = _param(_glorot(rng, d, d), pre + k)
        for k in ("bq", "bk", "bv", "bo"):
            p[pre + k] = _param(np.zeros(d), pre + k)
        p[pre + "ln1.g"] = _param(np.ones(d), pre + "ln1.g")
        p[pre + "ln1.b"] = _param(np.zeros(d), pre + "ln1.b")
        p[pre + "ff.W1"] = _param(_glorot(rng, d, ff), pre + "ff.W1")
        p[pre + "ff.b1"] = _param(np.zeros(ff), pre + "ff.b1")
        p[pre + "ff.W2"] = _param(_glorot(rng, ff, d), pre + "ff.W2")
        p[pre + "ff.b2"] = _param(np.zeros(d), pre + "ff.b2")
        p[pre + "ln2.g"] = _param(np.ones(d), pre + "ln2.g")
        p[pre + "ln2.b"] = _param(np.zeros(d), pre + "ln2.b")
    return p


@lru_cache(maxsize=64)
def sinusoidal_encoding(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    rate = np.exp(-math.log(10000.0) * (np.arange(0, d, 2) / d))
    pe = np.zeros((length, d))
    pe[:, 0::2] = np.sin(pos * rate)
    pe[:, 1::2] = np.cos(pos * rate[: d // 2])
    pe.flags.writeable = False
    return pe


def _split_heads(x: Tensor, h: int) -> Tensor:
    *lead, j, d = x.shape
    return dc.swapaxes(dc.reshape(x, (*lead, j, h, d // h)), -2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, j, dh = x.shape
    return dc.reshape(dc.swapaxes(x, -2, -3), (*lead, j, h * dh))


def self_attention(x: Tensor, p: Params, pre: str, n_heads: int) -> Tensor:
    q = _split_heads(x @ p[pre + "Wq"] + p[pre + "bq"], n_heads)
    k = _split_heads(x @ p[pre + "Wk"] + p[pre + "bk"], n_heads)
    v = _split_heads(x @ p[pre + "Wv"] + p[pre + "bv"], n_heads)
    scores = (q @ dc.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(q.shape[-1]))
    ctx = _merge_heads(dc.softmax(scores, axis=-1) @ v)
    return ctx @ p[pre + "Wo"] + p[pre + "bo"]


def fine_encode_batch(
    x: np.ndarray | Tensor,
    cfg: FineEncoderConfig,
    params: Params,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Encode ``(..., j, m)`` segment values into ``(..., j, d)`` embeddings.

    Dropout is applied only when ``rng`` is given.
    """
    x = dc.as_tensor(x)
    j, m = x.shape[-2:]
    if j > cfg.max_len:
        raise ContractError(f"segment length {j} exceeds max_len {cfg.max_len}")
    if m != cfg.input_dim:
        raise ContractError(f"segment has {m} channels, encoder expects {cfg.input_dim}")
    h = x @ params["in.W"] + params["in.b"]
    if cfg.positional:
        h = h + sinusoidal_encoding(j, cfg.d_model)
    for layer in range(cfg.n_layers):
        pre = f"l{layer}."
        a = dc.dropout(self_attention(h, params, pre, cfg.n_heads), cfg.dropout, rng)
        h = dc.layer_norm(h + a, params[pre + "ln1.g"], params[pre + "ln1.b"])
        f = dc.gelu(h @ params[pre + "ff.W1"] + params[pre + "ff.b1"]) @ params[pre + "ff.W2"]
        f = dc.dropout(f + params[pre + "ff.b2"], cfg.dropout, rng)
        h = dc.layer_norm(h + f, params[pre + "ln2.g"], params[pre + "ln2.b"])
    return h


def fine_encode(segment: Segment, cfg: FineEncoderConfig, params: Params) -> Tensor:
    """Per-timestamp representation (``j x d``) of one segment, without dropout."""
    return fine_encode_batch(segment.values, cfg, params)


# ------------------------------------------------------------------ coarse


def paa(values: np.ndarray, frames: int) -> np.ndarray:
    """Frame means of a 1-d series over ``frames`` near-equal contiguous frames."""
    values = np.asarray(values, dtype=np.float64)
    j = values.shape[0]
    if frames > j:
        raise ContractError(f"cannot build {frames} PAA frames from {j} points")
    return np.array([values[s : s + n].mean(axis=0) for s, n in segment_bounds(j, frames)])


def paa_batch(values: np.ndarray, frames: int) -> np.ndarray:
    """``paa`` along axis -2 of a ``(..., j, m)`` array."""
    j = values.shape[-2]
    if frames > j:
        raise ContractError(f"cannot build {frames} PAA frames from {j} points")
    starts = np.array([s for s, _ in segment_bounds(j, frames)])
    sizes = np.array([n for _, n in segment_bounds(j, frames)])
    sums = np.add.reduceat(values, starts, axis=-2)
    return sums / sizes[:, None]


@lru_cache(maxsize=32)
def sax_breakpoints(alphabet_size: int) -> np.ndarray:
    bp = norm.ppf(np.arange(1, alphabet_size) / alphabet_size)
    bp.flags.writeable = False
    return bp


def sax_symbolize(values, alphabet_size: int) -> np.ndarray:
    """Bin index under equiprobable standard-normal breakpoints; bins closed on the left."""
    return np.searchsorted(sax_breakpoints(alphabet_size), np.asarray(values, dtype=np.float64), side="right")


def sax_word(values: np.ndarray, cfg: SaxConfig) -> np.ndarray:
    """Symbols for ``(..., j, m)`` values: per-channel PAA, averaged over channels, then binned."""
    frames = paa_batch(np.asarray(values, dtype=np.float64), cfg.word_length)
    return sax_symbolize(frames.mean(axis=-1), cfg.alphabet_size)


def init_coarse_params(cfg: SaxConfig, rng: np.random.Generator) -> Params:
    return {"table": _param(rng.standard_normal((cfg.alphabet_size, cfg.embed_dim)), "table")}


@dataclass
class CoarseTokens:
    symbols: np.ndarray  # (L,) ints in [0, a)
    tokens: Tensor  # (L, d_S)


def coarse_encode(segment: Segment, cfg: SaxConfig, params: Params) -> CoarseTokens:
    symbols = sax_word(segment.values, cfg)
    return CoarseTokens(symbols, dc.embedding(params["table"], symbols))


def coarse_encode_batch(symbols: np.ndarray, params: Params) -> Tensor:
    return dc.embedding(params["table"], symbols)
