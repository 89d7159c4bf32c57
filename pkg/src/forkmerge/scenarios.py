"""Synthetic scenarios built on probe models.

``video_skew`` has the last text token scoring video keys well above audio
keys. ``planted_signal`` adds a vocabulary readout in which the correct
answer (``audio_token``) can only be reached through the audio rows, while
the skewed attention pulls plain decoding toward ``video_token``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .decoder import Decoder, ModelConfig
from .fusion import ModalityLayout, MultimodalInput, assemble_token_wise
from .probe import AUDIO_TAG, VIDEO_TAG, ProbeSpec, build_probe_model, normalized_tag
from .tensor import Rng

VIDEO_SKEW = ProbeSpec(video_score=2.0, audio_score=0.0, tag_scale=1.0,
                       video_token=1, audio_token=2, video_readout=1.0, audio_readout=4.0)


def probe_config(n_layers: int = 2, d_model: int = 8, vocab_size: int = 16, norm_eps: float = 1.0,
                 max_seq_len: int = 128) -> ModelConfig:
    # norm_eps of order tag_scale**2 keeps row magnitude visible after normalization
    return ModelConfig(n_layers=n_layers, n_heads=1, d_model=d_model, d_ff=4, vocab_size=vocab_size,
                       max_seq_len=max_seq_len, norm_eps=norm_eps, positional=False)


def probe_model(spec: ProbeSpec = VIDEO_SKEW, config: ModelConfig | None = None) -> Decoder:
    return Decoder(build_probe_model(config or probe_config(), spec))


def probe_rows(count: int, channel: int, d_model: int, scale: float) -> np.ndarray:
    rows = np.zeros((count, d_model))
    rows[:, channel] = scale
    return rows


def probe_input(model: Decoder, M: int, N: int, L: int, tag_scale: float = 1.0, text_ids=None) -> MultimodalInput:
    d = model.config.d_model
    if text_ids is None:
        text_ids = [i % model.config.vocab_size for i in range(L)]
    return assemble_token_wise(probe_rows(M, VIDEO_TAG, d, tag_scale), probe_rows(N, AUDIO_TAG, d, tag_scale),
                               text_ids, model)


def probe_masses(config: ModelConfig, spec: ProbeSpec, layout: ModalityLayout,
                 video_magnitude: float, audio_magnitude: float) -> tuple[float, float, float]:
    """Closed-form last-layer masses of the probe's last text query.

    ``*_magnitude`` is the tag size each video/audio row carries when it
    reaches the probe layer (0 for zeroed rows).
    """
    ref = normalized_tag(config, spec.tag_scale)
    s_v = spec.video_score * normalized_tag(config, video_magnitude) / ref
    s_a = spec.audio_score * normalized_tag(config, audio_magnitude) / ref
    top = max(s_v, s_a, 0.0)
    w_v = layout.M * math.exp(s_v - top)
    w_a = layout.N * math.exp(s_a - top)
    w_t = layout.L * math.exp(-top)
    z = w_v + w_a + w_t
    return w_v / z, w_a / z, w_t / z


def probe_alpha(config: ModelConfig, spec: ProbeSpec, layout: ModalityLayout) -> tuple[float, float, float]:
    """Closed-form (alpha_a, alpha_v, alpha) under zero-out masking."""
    v1, a1, _ = probe_masses(config, spec, layout, 0.0, spec.tag_scale)
    v2, a2, _ = probe_masses(config, spec, layout, spec.tag_scale, 0.0)
    alpha_a = a1 / (v1 + a1)
    alpha_v = v2 / (v2 + a2)
    return alpha_a, alpha_v, 0.5 * (alpha_a + alpha_v)


@dataclass(frozen=True)
class PlantedTask:
    inp: MultimodalInput
    target: int


def planted_signal_tasks(model: Decoder, spec: ProbeSpec, count: int, seed: int) -> list[PlantedTask]:
    """Random (M, N, L) layouts whose correct answer is ``spec.audio_token``."""
    rng = Rng(seed)
    tasks = []
    for _ in range(count):
        m, n, l = (int(x) for x in rng.integers(5, 3) + np.array([2, 2, 1]))
        text = [int(t) for t in rng.integers(model.config.vocab_size, l)]
        tasks.append(PlantedTask(probe_input(model, m, n, l, spec.tag_scale, text), spec.audio_token))
    return tasks
