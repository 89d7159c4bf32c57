"""Toy causal transformer decoder with layer-range execution.

Architecture: additive sinusoidal absolute positions on the input sequence,
pre-norm blocks (RMS norm -> multi-head causal attention -> residual, RMS
norm -> SiLU-gated feed-forward -> residual), final RMS norm and a linear
vocabulary head. No biases anywhere.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from .tensor import MASKED_SCORE, Rng, ShapeError, as_matrix, check_finite, rms_norm, seeded_gaussian, silu, softmax_rows


class ConfigError(ValueError):
    pass


class CacheError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 8
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 128
    vocab_size: int = 256
    max_seq_len: int = 512
    norm_eps: float = 1e-6
    positional: bool = True

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_model", "d_ff", "vocab_size", "max_seq_len"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not self.norm_eps >= 0:
            raise ConfigError("norm_eps must be non-negative")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown model config key(s): {', '.join(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class LayerWeights:
    attn_norm: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ffn_norm: np.ndarray
    w_gate: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray


LAYER_TENSORS = tuple(f.name for f in fields(LayerWeights))


def shape_table(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Expected shape of every tensor, keyed in checkpoint declaration order."""
    d, ff = config.d_model, config.d_ff
    per_layer = {
        "attn_norm": (d,), "wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d),
        "ffn_norm": (d,), "w_gate": (d, ff), "w_up": (d, ff), "w_down": (ff, d),
    }
    table = {"tok_emb": (config.vocab_size, d)}
    for i in range(config.n_layers):
        for name in LAYER_TENSORS:
            table[f"layers.{i}.{name}"] = per_layer[name]
    table["final_norm"] = (d,)
    table["lm_head"] = (d, config.vocab_size)
    return table


@dataclass(frozen=True)
class DecoderWeights:
    config: ModelConfig
    tok_emb: np.ndarray
    layers: tuple[LayerWeights, ...]
    final_norm: np.ndarray
    lm_head: np.ndarray

    def __post_init__(self):
        got = dict(self.named_tensors())
        expected = shape_table(self.config)
        if list(got) != list(expected):
            raise ConfigError("weights do not match the configured layer count")
        for name, shape in expected.items():
            arr = got[name]
            if arr.shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {arr.shape}")
            check_finite(arr, name)
            arr.setflags(write=False)

    def named_tensors(self):
        yield "tok_emb", self.tok_emb
        for i, layer in enumerate(self.layers):
            for name in LAYER_TENSORS:
                yield f"layers.{i}.{name}", getattr(layer, name)
        yield "final_norm", self.final_norm
        yield "lm_head", self.lm_head

    @classmethod
    def from_tensors(cls, config: ModelConfig, tensors: dict[str, np.ndarray]) -> "DecoderWeights":
        layers = tuple(
            LayerWeights(**{name: tensors[f"layers.{i}.{name}"] for name in LAYER_TENSORS})
            for i in range(config.n_layers)
        )
        return cls(config, tensors["tok_emb"], layers, tensors["final_norm"], tensors["lm_head"])


def init_weights(config: ModelConfig, seed: int) -> DecoderWeights:
    """Seeded weights: N(0, 1) embeddings, N(0, 1/d_model) projections, unit gains."""
    rng = Rng(seed)
    scale = 1.0 / math.sqrt(config.d_model)
    tensors = {}
    for name, shape in shape_table(config).items():
        if len(shape) == 1:
            tensors[name] = np.ones(shape)
        else:
            std = 1.0 if name == "tok_emb" else scale
            tensors[name] = seeded_gaussian(rng, shape[0], shape[1], 0.0, std)
    return DecoderWeights.from_tensors(config, tensors)


def positional_encoding(positions, d_model: int) -> np.ndarray:
    """Sinusoidal table: channel 2i is sin(p / 10000**(2i/d)), channel 2i+1 the cosine."""
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    i = np.arange(0, d_model, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i / d_model)
    pe = np.zeros((pos.shape[0], d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return pe


@dataclass(frozen=True)
class KVCache:
    """Per-layer key/value rows for ``length`` already-processed positions."""

    keys: dict[int, np.ndarray] = field(default_factory=dict)
    values: dict[int, np.ndarray] = field(default_factory=dict)
    length: int = 0

    @property
    def layers(self) -> tuple[int, ...]:
        return tuple(sorted(self.keys))


@dataclass(frozen=True)
class CapturePolicy:
    """Which attention rows ``forward_range`` records.

    ``rows``: ``"last"`` keeps the head-averaged row of the final query
    position per layer, ``"full"`` also keeps the head-averaged matrix over
    all new query rows, ``"none"`` records nothing.
    """

    rows: str = "last"
    per_head: bool = False

    def __post_init__(self):
        if self.rows not in ("last", "full", "none"):
            raise ValueError(f"unknown capture mode {self.rows!r}")


CAPTURE_LAST = CapturePolicy()
CAPTURE_NONE = CapturePolicy(rows="none")


@dataclass
class AttentionTrace:
    """Attention captured during one ``forward_range`` call.

    ``last_rows[layer]`` has one entry per key position (cached + new); the
    query is the last new position, at absolute index ``query_position``.
    """

    query_position: int = -1
    last_rows: dict[int, np.ndarray] = field(default_factory=dict)
    full: dict[int, np.ndarray] = field(default_factory=dict)
    per_head_rows: dict[int, np.ndarray] = field(default_factory=dict)

    def merged_with(self, other: "AttentionTrace") -> "AttentionTrace":
        if self.last_rows and other.last_rows and self.query_position != other.query_position:
            raise ValueError("cannot merge traces for different query positions")
        return AttentionTrace(
            query_position=max(self.query_position, other.query_position),
            last_rows={**self.last_rows, **other.last_rows},
            full={**self.full, **other.full},
            per_head_rows={**self.per_head_rows, **other.per_head_rows},
        )


@dataclass
class CostCounter:
    """Analytic work counters, incremented as layers and heads execute."""

    layer_applications: int = 0
    head_projections: int = 0
    flops: int = 0

    def snapshot(self) -> tuple[int, int, int]:
        return self.layer_applications, self.head_projections, self.flops


def layer_flops(config: ModelConfig, new_rows: int, context: int) -> int:
    d, ff = config.d_model, config.d_ff
    proj = 4 * 2 * new_rows * d * d
    attn = 2 * 2 * new_rows * context * d
    mlp = 3 * 2 * new_rows * d * ff
    return proj + attn + mlp


class Decoder:
    """A decoder stack over immutable weights; shareable across threads."""

    def __init__(self, weights: DecoderWeights):
        self.weights = weights
        self.config = weights.config

    @classmethod
    def random(cls, config: ModelConfig, seed: int) -> "Decoder":
        return cls(init_weights(config, seed))

    def embed_tokens(self, token_ids) -> np.ndarray:
        ids = np.asarray(token_ids, dtype=np.int64).reshape(-1)
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise ValueError(f"token id out of range [0, {self.config.vocab_size})")
        return self.weights.tok_emb[ids].copy()

    def positions(self, start: int, count: int) -> np.ndarray:
        if not self.config.positional:
            return np.zeros((count, self.config.d_model))
        return positional_encoding(np.arange(start, start + count), self.config.d_model)

    def embed_generated(self, token_id: int, position: int) -> np.ndarray:
        """Input row for a generated token at absolute ``position``."""
        if position >= self.config.max_seq_len:
            raise ValueError(f"position {position} exceeds max_seq_len={self.config.max_seq_len}")
        return self.embed_tokens([token_id]) + self.positions(position, 1)

    def forward_range(
        self,
        hidden,
        layer_lo: int,
        layer_hi: int,
        cache: KVCache | None = None,
        capture: CapturePolicy = CAPTURE_LAST,
        counter: CostCounter | None = None,
    ) -> tuple[np.ndarray, KVCache, AttentionTrace]:
        """Apply layers ``[layer_lo, layer_hi)`` to the new rows in ``hidden``.

        New rows attend to every cached position and to preceding new rows.
        Returns the new hidden rows, a cache extended by those rows, and the
        captured attention.
        """
        cfg = self.config
        h = as_matrix(hidden, "hidden")
        if h.shape[1] != cfg.d_model:
            raise ShapeError(f"hidden width {h.shape[1]} != d_model {cfg.d_model}")
        if not 0 <= layer_lo <= layer_hi <= cfg.n_layers:
            raise ValueError(f"layer range [{layer_lo}, {layer_hi}) outside [0, {cfg.n_layers}]")
        cache = cache if cache is not None else KVCache()
        offset = cache.length
        if offset and set(cache.layers) != set(range(layer_lo, layer_hi)):
            raise CacheError(f"cache covers layers {cache.layers}, expected [{layer_lo}, {layer_hi})")
        for layer in cache.layers:
            if cache.keys[layer].shape[1] != cfg.d_model:
                raise CacheError("cache width does not match d_model")
        t = h.shape[0]
        if offset + t > cfg.max_seq_len:
            raise ValueError(f"sequence length {offset + t} exceeds max_seq_len={cfg.max_seq_len}")
        trace = AttentionTrace(query_position=offset + t - 1)
        if layer_lo == layer_hi:
            return h, cache, trace

        # Additive causal mask; row i sits at absolute position offset + i.
        key_pos = np.arange(offset + t)
        query_pos = np.arange(offset, offset + t)[:, None]
        mask = np.where(key_pos[None, :] > query_pos, MASKED_SCORE, 0.0)

        keys, values = dict(cache.keys), dict(cache.values)
        for layer in range(layer_lo, layer_hi):
            h, k_all, v_all = self._layer(h, layer, keys.get(layer), values.get(layer), mask, capture, trace)
            keys[layer], values[layer] = k_all, v_all
            if counter is not None:
                counter.layer_applications += 1
                counter.flops += layer_flops(cfg, t, offset + t)
        check_finite(h, "hidden")
        return h, KVCache(keys, values, offset + t), trace

    def _layer(self, h, layer, k_cached, v_cached, mask, capture, trace):
        cfg = self.config
        w = self.weights.layers[layer]
        n_h, d_h = cfg.n_heads, cfg.d_head
        t = h.shape[0]

        x = rms_norm(h, w.attn_norm, cfg.norm_eps)
        q = x @ w.wq
        k_new = x @ w.wk
        v_new = x @ w.wv
        k_all = k_new if k_cached is None else np.concatenate([k_cached, k_new])
        v_all = v_new if v_cached is None else np.concatenate([v_cached, v_new])
        s = k_all.shape[0]

        qh = q.reshape(t, n_h, d_h).transpose(1, 0, 2)
        kh = k_all.reshape(s, n_h, d_h).transpose(1, 0, 2)
        vh = v_all.reshape(s, n_h, d_h).transpose(1, 0, 2)
        scores = qh @ kh.transpose(0, 2, 1) / math.sqrt(d_h) + mask
        probs = softmax_rows(scores)
        attn = (probs @ vh).transpose(1, 0, 2).reshape(t, cfg.d_model)
        h = h + attn @ w.wo

        x = rms_norm(h, w.ffn_norm, cfg.norm_eps)
        h = h + (silu(x @ w.w_gate) * (x @ w.w_up)) @ w.w_down

        if capture.rows != "none":
            trace.last_rows[layer] = probs[:, -1, :].mean(axis=0)
            if capture.rows == "full":
                trace.full[layer] = probs.mean(axis=0)
            if capture.per_head:
                trace.per_head_rows[layer] = probs[:, -1, :].copy()
        return h, k_all, v_all

    def project_logits(self, hidden_last_row, counter: CostCounter | None = None) -> np.ndarray:
        v = np.asarray(hidden_last_row, dtype=np.float64)
        if v.shape != (self.config.d_model,):
            raise ShapeError(f"expected a vector of length {self.config.d_model}, got shape {v.shape}")
        if counter is not None:
            counter.head_projections += 1
            counter.flops += 2 * self.config.d_model * self.config.vocab_size
        return rms_norm(v, self.weights.final_norm, self.config.norm_eps) @ self.weights.lm_head
