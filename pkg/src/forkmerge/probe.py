"""Hand-built single-head decoders whose attention is known in closed form.

Probe inputs carry one-hot modality tags of magnitude ``tag_scale``: video
rows on channel 0, audio rows on channel 1, text rows (every token
embedding) on channel 2. Positional encoding must be disabled so rows keep
exactly that form.

Only the last layer is active. Its attention score from a text query to a
key row is ``video_score`` on a reference-magnitude video row,
``audio_score`` on an audio row and 0 on anything else (including zeroed
rows). Values copy the normalized video/audio tags into channels 3 and 4,
and the vocabulary head reads those channels into ``video_token`` and
``audio_token``. Earlier layers are exact identities.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .decoder import ConfigError, DecoderWeights, ModelConfig, shape_table

VIDEO_TAG, AUDIO_TAG, TEXT_TAG = 0, 1, 2
VIDEO_OUT, AUDIO_OUT = 3, 4


@dataclass(frozen=True)
class ProbeSpec:
    video_score: float = 0.0
    audio_score: float = 0.0
    tag_scale: float = 1.0
    video_token: int | None = None
    audio_token: int | None = None
    video_readout: float = 1.0
    audio_readout: float = 1.0


def normalized_tag(config: ModelConfig, magnitude: float) -> float:
    """Value a lone channel of ``magnitude`` takes after unit-gain RMS norm."""
    if magnitude == 0:
        return 0.0
    return magnitude / math.sqrt(magnitude * magnitude / config.d_model + config.norm_eps)


def build_probe_model(config: ModelConfig, spec: ProbeSpec) -> DecoderWeights:
    if config.n_heads != 1:
        raise ConfigError("probe model needs n_heads == 1")
    if config.n_layers not in (1, 2):
        raise ConfigError("probe model needs n_layers of 1 or 2")
    if config.d_model < 5:
        raise ConfigError("probe model needs d_model >= 5")
    if config.positional:
        raise ConfigError("probe model needs positional encoding disabled")
    if spec.tag_scale <= 0:
        raise ConfigError("tag_scale must be positive")
    for tok in (spec.video_token, spec.audio_token):
        if tok is not None and not 0 <= tok < config.vocab_size:
            raise ConfigError(f"probe token {tok} outside vocabulary of {config.vocab_size}")
    if spec.video_token is not None and spec.video_token == spec.audio_token:
        raise ConfigError("video_token and audio_token must differ")

    tensors = {name: (np.ones(shape) if len(shape) == 1 else np.zeros(shape))
               for name, shape in shape_table(config).items()}
    tensors["tok_emb"][:, TEXT_TAG] = spec.tag_scale

    d = config.d_model
    unit = normalized_tag(config, spec.tag_scale)
    key_gain = math.sqrt(d) / (unit * unit)
    last = f"layers.{config.n_layers - 1}"
    tensors[f"{last}.wq"][TEXT_TAG, 0] = 1.0
    tensors[f"{last}.wk"][VIDEO_TAG, 0] = spec.video_score * key_gain
    tensors[f"{last}.wk"][AUDIO_TAG, 0] = spec.audio_score * key_gain
    tensors[f"{last}.wv"][VIDEO_TAG, VIDEO_OUT] = 1.0
    tensors[f"{last}.wv"][AUDIO_TAG, AUDIO_OUT] = 1.0
    tensors[f"{last}.wo"][VIDEO_OUT, VIDEO_OUT] = 1.0
    tensors[f"{last}.wo"][AUDIO_OUT, AUDIO_OUT] = 1.0
    if spec.video_token is not None:
        tensors["lm_head"][VIDEO_OUT, spec.video_token] = spec.video_readout
    if spec.audio_token is not None:
        tensors["lm_head"][AUDIO_OUT, spec.audio_token] = spec.audio_readout
    return DecoderWeights.from_tensors(config, tensors)
