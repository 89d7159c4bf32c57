"""Multimodal input assembly, modality layouts and modality masking.

Rows are 0-based here: with token-wise fusion, video occupies ``[0, M)``,
audio ``[M, M+N)`` and text ``[M+N, T)``. With channel-wise fusion the
first ``U`` rows are joint audio-visual rows whose first ``d_model/2``
channels hold video and the rest audio.

Masking edits the raw modality embeddings and then re-adds the positional
encoding, so masked inputs keep their length and positions.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .decoder import Decoder
from .tensor import Rng, ShapeError, as_matrix, seeded_gaussian

TOKEN_WISE = "token_wise"
CHANNEL_WISE = "channel_wise"
MODALITIES = ("video", "audio")
MASK_METHODS = ("zero_out", "gaussian", "identity")


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class ModalityLayout:
    fusion_mode: str
    M: int = 0
    N: int = 0
    L: int = 0
    U: int = 0

    def __post_init__(self):
        if self.fusion_mode not in (TOKEN_WISE, CHANNEL_WISE):
            raise LayoutError(f"unknown fusion mode {self.fusion_mode!r}")
        if min(self.M, self.N, self.L, self.U) < 0:
            raise LayoutError("token counts must be non-negative")
        if self.fusion_mode == TOKEN_WISE and self.U:
            raise LayoutError("U is only meaningful for channel-wise fusion")
        if self.fusion_mode == CHANNEL_WISE and not (self.M == self.N == self.U):
            raise LayoutError("channel-wise layouts need M == N == U")

    @classmethod
    def token_wise(cls, M: int, N: int, L: int) -> "ModalityLayout":
        return cls(TOKEN_WISE, M, N, L)

    @classmethod
    def channel_wise(cls, U: int, L: int) -> "ModalityLayout":
        return cls(CHANNEL_WISE, U, U, L, U)

    @property
    def T(self) -> int:
        if self.fusion_mode == TOKEN_WISE:
            return self.M + self.N + self.L
        return self.U + self.L

    @property
    def video(self) -> range:
        return range(0, self.M) if self.fusion_mode == TOKEN_WISE else range(0, self.U)

    @property
    def audio(self) -> range:
        return range(self.M, self.M + self.N) if self.fusion_mode == TOKEN_WISE else range(0, self.U)

    @property
    def text(self) -> range:
        return range(self.T - self.L, self.T)

    @property
    def av(self) -> range:
        return range(0, self.T - self.L)

    def to_dict(self) -> dict:
        d = {"fusion_mode": self.fusion_mode, "M": self.M, "N": self.N, "L": self.L}
        if self.fusion_mode == CHANNEL_WISE:
            d["U"] = self.U
        return d


def segment_masses(row: np.ndarray, layout: ModalityLayout) -> tuple[float, float, float]:
    """Summed attention over the video, audio and text ranges of a token-wise layout."""
    if layout.fusion_mode != TOKEN_WISE:
        raise LayoutError("per-modality attention mass needs a token-wise layout")
    row = np.asarray(row, dtype=np.float64)
    if row.shape[0] < layout.T:
        raise ShapeError(f"attention row of length {row.shape[0]} shorter than T={layout.T}")
    v = float(row[layout.video.start:layout.video.stop].sum())
    a = float(row[layout.audio.start:layout.audio.stop].sum())
    t = float(row[layout.text.start:layout.text.stop].sum())
    return v, a, t


@dataclass(frozen=True)
class MultimodalInput:
    """Source embeddings plus the assembled decoder input.

    ``content`` is the sequence before positional encoding and ``positions``
    the encoding added to it; ``assembled == content + positions``.
    """

    layout: ModalityLayout
    visual: np.ndarray
    audio: np.ndarray
    text_ids: tuple[int, ...]
    content: np.ndarray
    positions: np.ndarray
    assembled: np.ndarray

    @property
    def T(self) -> int:
        return self.layout.T


def _finish(layout, visual, audio, text_ids, content, model: Decoder) -> MultimodalInput:
    positions = model.positions(0, layout.T)
    for arr in (visual, audio, content, positions):
        arr.setflags(write=False)
    assembled = content + positions
    assembled.setflags(write=False)
    return MultimodalInput(layout, visual, audio, tuple(int(i) for i in text_ids), content, positions, assembled)


def _modality_matrix(x, width: int, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        return np.zeros((0, width))
    m = as_matrix(x, name)
    if m.shape[1] != width:
        raise ShapeError(f"{name} width {m.shape[1]} != expected {width}")
    return m.copy()


def assemble_token_wise(visual, audio, text_ids, model: Decoder) -> MultimodalInput:
    d = model.config.d_model
    visual = _modality_matrix(visual, d, "visual")
    audio = _modality_matrix(audio, d, "audio")
    layout = ModalityLayout.token_wise(visual.shape[0], audio.shape[0], len(text_ids))
    content = np.concatenate([visual, audio, model.embed_tokens(text_ids)])
    return _finish(layout, visual, audio, text_ids, content, model)


def assemble_channel_wise(visual, audio, text_ids, model: Decoder) -> MultimodalInput:
    d = model.config.d_model
    if d % 2:
        raise ShapeError(f"channel-wise fusion needs an even d_model, got {d}")
    visual = _modality_matrix(visual, d // 2, "visual")
    audio = _modality_matrix(audio, d // 2, "audio")
    if visual.shape[0] != audio.shape[0]:
        raise ShapeError(f"visual has {visual.shape[0]} rows but audio has {audio.shape[0]}")
    layout = ModalityLayout.channel_wise(visual.shape[0], len(text_ids))
    content = np.concatenate([np.concatenate([visual, audio], axis=1), model.embed_tokens(text_ids)])
    return _finish(layout, visual, audio, text_ids, content, model)


def _target_block(inp: MultimodalInput, target: str) -> tuple[slice, slice]:
    layout, d = inp.layout, inp.content.shape[1]
    if layout.fusion_mode == TOKEN_WISE:
        rows = layout.video if target == "video" else layout.audio
        return slice(rows.start, rows.stop), slice(0, d)
    cols = slice(0, d // 2) if target == "video" else slice(d // 2, d)
    return slice(0, layout.U), cols


def mask_modality(inp: MultimodalInput, target: str, method: str = "zero_out", seed: int = 0) -> MultimodalInput:
    """Return a copy of ``inp`` with one modality's content removed.

    ``zero_out`` replaces the target block with zeros. ``gaussian`` replaces
    it with seeded N(0, s^2) noise where ``s`` is the mean per-row RMS of the
    block being replaced. ``identity`` leaves the content untouched (a test
    hook). Positions are re-added after the edit.
    """
    if target not in MODALITIES:
        raise ValueError(f"unknown modality {target!r}")
    if method not in MASK_METHODS:
        raise ValueError(f"unknown masking method {method!r}")
    if method == "identity":
        return inp
    rows, cols = _target_block(inp, target)
    content = inp.content.copy()
    block = content[rows, cols]
    if method == "zero_out":
        content[rows, cols] = 0.0
    elif block.size:
        scale = float(np.sqrt(np.mean(block * block, axis=1)).mean())
        # Distinct streams for the two modalities under one user seed.
        rng = Rng(seed * 2 + MODALITIES.index(target))
        content[rows, cols] = seeded_gaussian(rng, block.shape[0], block.shape[1], 0.0, scale)

    visual, audio = inp.visual.copy(), inp.audio.copy()
    if inp.layout.fusion_mode == TOKEN_WISE:
        src = visual if target == "video" else audio
        src[...] = content[rows, cols]
    else:
        d = content.shape[1]
        visual[...] = content[rows, : d // 2]
        audio[...] = content[rows, d // 2:]
    for arr in (visual, audio, content):
        arr.setflags(write=False)
    assembled = content + inp.positions
    assembled.setflags(write=False)
    return replace(inp, visual=visual, audio=audio, content=content, assembled=assembled)


@dataclass(frozen=True)
class Fixture:
    """On-disk description of one multimodal input."""

    fusion_mode: str
    d_model: int
    M: int
    N: int
    L: int
    visual: np.ndarray
    audio: np.ndarray
    text_tokens: tuple[int, ...]
    seed: int = 0
    U: int | None = None

    def layout(self) -> ModalityLayout:
        if self.fusion_mode == CHANNEL_WISE:
            return ModalityLayout.channel_wise(self.U or 0, self.L)
        return ModalityLayout.token_wise(self.M, self.N, self.L)

    def to_input(self, model: Decoder) -> MultimodalInput:
        if self.d_model != model.config.d_model:
            raise ShapeError(f"fixture d_model {self.d_model} != model d_model {model.config.d_model}")
        build = assemble_channel_wise if self.fusion_mode == CHANNEL_WISE else assemble_token_wise
        inp = build(self.visual, self.audio, self.text_tokens, model)
        if inp.layout != self.layout():
            raise LayoutError(f"fixture counts {self.layout()} disagree with its embeddings {inp.layout}")
        return inp

    def to_dict(self) -> dict:
        d = {
            "fusion_mode": self.fusion_mode,
            "d_model": self.d_model,
            "M": self.M,
            "N": self.N,
            "L": self.L,
        }
        if self.fusion_mode == CHANNEL_WISE:
            d["U"] = self.U
        d["visual"] = self.visual.tolist()
        d["audio"] = self.audio.tolist()
        d["text_tokens"] = list(self.text_tokens)
        d["seed"] = self.seed
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Fixture":
        allowed = {"fusion_mode", "d_model", "M", "N", "L", "U", "visual", "audio", "text_tokens", "seed"}
        unknown = sorted(set(d) - allowed)
        if unknown:
            raise LayoutError(f"unknown fixture key(s): {', '.join(unknown)}")
        mode = d["fusion_mode"]
        width = d["d_model"] if mode == TOKEN_WISE else d["d_model"] // 2
        visual = np.asarray(d["visual"], dtype=np.float64).reshape(-1, width)
        audio = np.asarray(d["audio"], dtype=np.float64).reshape(-1, width)
        return cls(mode, int(d["d_model"]), int(d["M"]), int(d["N"]), int(d["L"]), visual, audio,
                   tuple(int(t) for t in d["text_tokens"]), int(d.get("seed", 0)), d.get("U"))


def dumps_fixture(fx: Fixture) -> str:
    # float repr is the shortest string that round-trips (at most 17 significant digits)
    return json.dumps(fx.to_dict(), indent=1) + "\n"


def save_fixture(fx: Fixture, path) -> None:
    Path(path).write_text(dumps_fixture(fx))


def load_fixture(path) -> Fixture:
    return Fixture.from_dict(json.loads(Path(path).read_text()))


def random_fixture(seed: int, layout: ModalityLayout, d_model: int, vocab_size: int) -> Fixture:
    """Seeded N(0, 1) stand-ins for encoder outputs plus uniform text ids."""
    rng = Rng(seed)
    width = d_model if layout.fusion_mode == TOKEN_WISE else d_model // 2
    if layout.fusion_mode == CHANNEL_WISE and d_model % 2:
        raise ShapeError("channel-wise fixtures need an even d_model")
    rows_v = layout.M if layout.fusion_mode == TOKEN_WISE else layout.U
    rows_a = layout.N if layout.fusion_mode == TOKEN_WISE else layout.U
    visual = seeded_gaussian(rng, rows_v, width)
    audio = seeded_gaussian(rng, rows_a, width)
    text = tuple(int(t) for t in rng.integers(vocab_size, layout.L))
    return Fixture(layout.fusion_mode, d_model, layout.M, layout.N, layout.L, visual, audio, text, seed,
                   layout.U if layout.fusion_mode == CHANNEL_WISE else None)
