"""Fine-grained fusion, cross-granularity attention and the full segment model."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .config import MUGConfig
from .diffcore import Tensor
from .encoders import (
    Params,
    _glorot,
    _param,
    coarse_encode_batch,
    fine_encode_batch,
    init_coarse_params,
    init_fine_params,
    sax_word,
)
from .errors import ShapeError
from .tsdata import Dataset, TimeSeries, segment_bounds, znormalize

VARIANTS = ("multi", "fine", "coarse")


def fuse_weights(v: Tensor) -> Tensor:
    """Attention weights over the ``j`` rows of ``v`` with the max-pooled row as query."""
    v = dc.as_tensor(v)
    d = v.shape[-1]
    q = dc.reshape(dc.max_pool_rows(v), (*v.shape[:-2], 1, d))
    scores = (q @ dc.swapaxes(v, -1, -2)) * (1.0 / math.sqrt(d))
    return dc.softmax(scores, axis=-1)  # (..., 1, j)


def fine_fuse(v: Tensor) -> Tensor:
    """Collapse ``(..., j, d)`` timestamp embeddings into one ``(..., d)`` vector."""
    v = dc.as_tensor(v)
    out = fuse_weights(v) @ v
    return dc.reshape(out, (*v.shape[:-2], v.shape[-1]))


def init_fusion_params(d: int, d_s: int, d_k: int, d_ff: int, rng: np.random.Generator) -> Params:
    return {
        "Wq": _param(_glorot(rng, d, d_k), "Wq"),
        "Wk": _param(_glorot(rng, d_s, d_k), "Wk"),
        "Wv": _param(_glorot(rng, d_s, d), "Wv"),
        "ln1.g": _param(np.ones(d), "ln1.g"),
        "ln1.b": _param(np.zeros(d), "ln1.b"),
        "ff.W1": _param(_glorot(rng, d, d_ff), "ff.W1"),
        "ff.b1": _param(np.zeros(d_ff), "ff.b1"),
        "ff.W2": _param(_glorot(rng, d_ff, d), "ff.W2"),
        "ff.b2": _param(np.zeros(d), "ff.b2"),
        "ln2.g": _param(np.ones(d), "ln2.g"),
        "ln2.b": _param(np.zeros(d), "ln2.b"),
    }


def cross_attention(v_x: Tensor, tokens: Tensor, params: Params) -> Tensor:
    """Single-head attention with the fused fine vector as query over coarse tokens.

    ``v_x``: ``(..., d)``; ``tokens``: ``(..., L, d_S)``. Returns ``(..., d)``.
    """
    v_x, tokens = dc.as_tensor(v_x), dc.as_tensor(tokens)
    wq, wk, wv = params["Wq"], params["Wk"], params["Wv"]
    d, d_s = v_x.shape[-1], tokens.shape[-1]
    if wq.shape[0] != d or wk.shape[0] != d_s or wv.shape[0] != d_s or wq.shape[1] != wk.shape[1]:
        raise ShapeError(
            f"cross_attention: query dim {d}, token dim {d_s} do not fit "
            f"Wq{wq.shape}, Wk{wk.shape}, Wv{wv.shape}"
        )
    if wv.shape[1] != d:
        raise ShapeError(f"value projection must return the query width {d}, got {wv.shape[1]}")
    if tokens.shape[:-2] != v_x.shape[:-1]:
        raise ShapeError(f"batch shapes differ: v_x {v_x.shape} vs tokens {tokens.shape}")
    q = dc.reshape(v_x, (*v_x.shape[:-1], 1, d)) @ wq
    k = tokens @ wk
    v = tokens @ wv
    att = dc.softmax((q @ dc.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(wq.shape[1])), axis=-1)
    return dc.reshape(att @ v, v_x.shape)


def cross_granularity_block(v_x: Tensor, tokens: Tensor, params: Params) -> Tensor:
    """Post-norm residual block around ``cross_attention`` with a GELU feed-forward."""
    v_x, tokens = dc.as_tensor(v_x), dc.as_tensor(tokens)
    if v_x.ndim == 1:
        out = cross_granularity_block(dc.reshape(v_x, (1, -1)), dc.reshape(tokens, (1, *tokens.shape)), params)
        return dc.reshape(out, (-1,))
    z = dc.layer_norm(v_x + cross_attention(v_x, tokens, params), params["ln1.g"], params["ln1.b"])
    f = dc.gelu(z @ params["ff.W1"] + params["ff.b1"]) @ params["ff.W2"] + params["ff.b2"]
    return dc.layer_norm(z + f, params["ln2.g"], params["ln2.b"])


@dataclass
class SegmentOutputs:
    fine: Tensor  # (B, j, d)
    fused: Tensor  # (B, d)
    tokens: Tensor  # (B, L, d_S)
    multi: Tensor  # (B, d)


class MUGModel:
    """Parameter groups plus the forward pass from segments to representations."""

    def __init__(self, config: MUGConfig, params: dict[str, Params] | None = None, seed: int = 0):
        self.config = config
        if params is None:
            rng = np.random.default_rng(seed)
            c = config
            params = {
                "fine": init_fine_params(c.fine, rng),
                "coarse": init_coarse_params(c.sax, rng),
                "fusion": init_fusion_params(c.fine.d_model, c.sax.embed_dim, c.d_k, c.fusion.d_ff, rng),
            }
        self.params = params

    def parameters(self, groups=("fine", "coarse", "fusion")) -> list[Tensor]:
        return [t for g in groups for t in self.params[g].values()]

    def named_parameters(self):
        for g, ps in self.params.items():
            for name, t in ps.items():
                yield f"{g}/{name}", t

    @property
    def d_model(self) -> int:
        return self.config.fine.d_model

    def symbols(self, values: np.ndarray) -> np.ndarray:
        return sax_word(values, self.config.sax)

    def forward_segments(
        self, values: np.ndarray, symbols: np.ndarray | None = None, rng: np.random.Generator | None = None
    ) -> SegmentOutputs:
        """Run equal-length segments ``(B, j, m)`` through both branches and the block."""
        if symbols is None:
            symbols = self.symbols(values)
        fine = fine_encode_batch(values, self.config.fine, self.params["fine"], rng)
        fused = fine_fuse(fine)
        tokens = coarse_encode_batch(symbols, self.params["coarse"])
        multi = cross_granularity_block(fused, tokens, self.params["fusion"])
        return SegmentOutputs(fine, fused, tokens, multi)

    def segment_representation(self, values: np.ndarray, variant: str = "multi") -> np.ndarray:
        """Numpy ``(B, d)`` representation of segments for one variant, no gradients."""
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        with dc.no_grad():
            if variant == "coarse":
                return coarse_encode_batch(self.symbols(values), self.params["coarse"]).data.mean(axis=-2)
            out = self.forward_segments(values)
        return (out.multi if variant == "multi" else out.fused).data


def prepare_segments(series: list[TimeSeries], k: int) -> tuple[dict[int, np.ndarray], dict[int, np.ndarray]]:
    """Z-normalise each series and cut it into ``k`` segments, grouped by segment length.

    Returns ``(values_by_length, owner_by_length)`` where owner holds the series index of every row.
    """
    vals: dict[int, list[np.ndarray]] = {}
    owner: dict[int, list[int]] = {}
    for i, ts in enumerate(series):
        z = znormalize(ts).values
        for start, n in segment_bounds(len(z), k):
            vals.setdefault(n, []).append(z[start : start + n])
            owner.setdefault(n, []).append(i)
    return (
        {n: np.stack(v) for n, v in vals.items()},
        {n: np.array(o) for n, o in owner.items()},
    )


def represent_series(
    series: list[TimeSeries] | Dataset, model: MUGModel, variant: str = "multi", chunk: int = 256
) -> np.ndarray:
    """Series-level representations ``(N, d)``: the mean of each series' segment vectors."""
    series = list(series)
    vals, owner = prepare_segments(series, model.config.segments)
    dim = model.config.sax.embed_dim if variant == "coarse" else model.d_model
    acc = np.zeros((len(series), dim))
    counts = np.zeros(len(series))
    for n in sorted(vals):
        v, o = vals[n], owner[n]
        for s in range(0, len(v), chunk):
            rep = model.segment_representation(v[s : s + chunk], variant)
            np.add.at(acc, o[s : s + chunk], rep)
            np.add.at(counts, o[s : s + chunk], 1)
    return acc / counts[:, None]


def mug_represent(ts: TimeSeries, model: MUGModel, num_segments: int | None = None) -> np.ndarray:
    """Multi-granularity representation of one series."""
    if num_segments is not None and num_segments != model.config.segments:
        model = MUGModel(_with_segments(model.config, num_segments), model.params)
    return represent_series([ts], model, "multi")[0]


def _with_segments(cfg: MUGConfig, k: int) -> MUGConfig:
    return MUGConfig(fine=cfg.fine, sax=cfg.sax, fusion=cfg.fusion, segments=k)
