"""Fork-merge decoding and baseline greedy decoders.

Every decoder is a strategy object with ``prefill`` and ``step``; a shared
greedy loop drives it, records per-step logits and counts work. Strategies
are built fresh for each generation because they own their KV caches.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .decoder import CAPTURE_LAST, CAPTURE_NONE, AttentionTrace, CapturePolicy, CostCounter, Decoder, KVCache
from .fusion import CHANNEL_WISE, MASK_METHODS, TOKEN_WISE, ModalityLayout, MultimodalInput, mask_modality, segment_masses
from .tensor import ShapeError, log_softmax, softmax_rows

DEFAULT_ALPHA = 0.8
# (fork layer, total depth) used for the two reference models
REFERENCE_FORK_LAYERS = {"token_wise": (5, 28), "channel_wise": (8, 40)}
DEGENERATE_MASS = 1e-12


class DegenerateAttentionError(ArithmeticError):
    pass


@dataclass(frozen=True)
class ForkConfig:
    l_fork: int = 5
    alpha: float = DEFAULT_ALPHA
    alpha_mode: str = "fixed"
    masking: str = "zero_out"
    noise_seed: int = 0
    continuation_mode: str = "dual_branch_per_token"

    def __post_init__(self):
        if self.l_fork < 0:
            raise ValueError("l_fork must be non-negative")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.alpha_mode not in ("fixed", "online"):
            raise ValueError(f"unknown alpha_mode {self.alpha_mode!r}")
        if self.masking not in MASK_METHODS:
            raise ValueError(f"unknown masking method {self.masking!r}")
        if self.continuation_mode != "dual_branch_per_token":
            raise ValueError(f"unsupported continuation_mode {self.continuation_mode!r}")

    def check(self, n_layers: int) -> None:
        if self.l_fork > n_layers:
            raise ValueError(f"l_fork={self.l_fork} exceeds n_layers={n_layers}")

    def to_dict(self) -> dict:
        return {
            "l_fork": self.l_fork,
            "alpha": self.alpha,
            "alpha_mode": self.alpha_mode,
            "masking": self.masking,
            "noise_seed": self.noise_seed,
            "continuation_mode": self.continuation_mode,
        }


@dataclass(frozen=True)
class ForkStates:
    h_v_fork: np.ndarray  # from the video-masked branch
    h_a_fork: np.ndarray  # from the audio-masked branch

    def __post_init__(self):
        if self.h_v_fork.shape != self.h_a_fork.shape:
            raise ShapeError(f"branch shapes differ: {self.h_v_fork.shape} vs {self.h_a_fork.shape}")


@dataclass(frozen=True)
class FusionWeights:
    alpha_a: float
    alpha_v: float
    alpha: float

    def to_dict(self) -> dict:
        return {"alpha_a": self.alpha_a, "alpha_v": self.alpha_v, "alpha": self.alpha}


@dataclass
class ForkOutput:
    states: ForkStates
    cache_v: KVCache
    cache_a: KVCache
    trace_v: AttentionTrace
    trace_a: AttentionTrace


def masked_pair(inp: MultimodalInput, cfg: ForkConfig) -> tuple[MultimodalInput, MultimodalInput]:
    """(video-masked, audio-masked) variants of ``inp``."""
    return (mask_modality(inp, "video", cfg.masking, cfg.noise_seed),
            mask_modality(inp, "audio", cfg.masking, cfg.noise_seed))


def fork(model: Decoder, inp: MultimodalInput, cfg: ForkConfig, capture: CapturePolicy = CAPTURE_LAST,
         counter: CostCounter | None = None) -> ForkOutput:
    """Run each modality-masked input through layers ``[0, l_fork)`` on its own."""
    cfg.check(model.config.n_layers)
    x_v, x_a = masked_pair(inp, cfg)
    h_v, cache_v, trace_v = model.forward_range(x_v.assembled, 0, cfg.l_fork, None, capture, counter)
    h_a, cache_a, trace_a = model.forward_range(x_a.assembled, 0, cfg.l_fork, None, capture, counter)
    return ForkOutput(ForkStates(h_v, h_a), cache_v, cache_a, trace_v, trace_a)


def _blend(a: np.ndarray, b: np.ndarray, w: float) -> np.ndarray:
    """``(1 - w) * a + w * b``; exact at w in {0, 1/2, 1} and wherever a == b."""
    if w == 0.5:
        return 0.5 * (a + b)
    diff = b - a
    if w < 0.5:
        return a + w * diff
    return b - (1.0 - w) * diff


def _check_states(states: ForkStates, layout: ModalityLayout) -> None:
    if states.h_v_fork.ndim != 2 or states.h_v_fork.shape[0] != layout.T:
        raise ShapeError(f"fork states have shape {states.h_v_fork.shape}, layout expects {layout.T} rows")


def merge_token_wise(states: ForkStates, layout: ModalityLayout, alpha: float) -> np.ndarray:
    if layout.fusion_mode != TOKEN_WISE:
        raise ValueError("merge_token_wise needs a token-wise layout")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    _check_states(states, layout)
    hv, ha = states.h_v_fork, states.h_a_fork
    v = slice(layout.video.start, layout.video.stop)
    a = slice(layout.audio.start, layout.audio.stop)
    t = slice(layout.text.start, layout.text.stop)
    return np.concatenate([
        _blend(hv[v], ha[v], alpha),  # video rows lean on the branch where video was kept
        _blend(ha[a], hv[a], alpha),
        0.5 * (hv[t] + ha[t]),
    ])


def merge_channel_wise(states: ForkStates, layout: ModalityLayout) -> np.ndarray:
    if layout.fusion_mode != CHANNEL_WISE:
        raise ValueError("merge_channel_wise needs a channel-wise layout")
    _check_states(states, layout)
    hv, ha = states.h_v_fork, states.h_a_fork
    u = layout.U
    # Joint rows are summed without halving; text rows are averaged.
    return np.concatenate([hv[:u] + ha[:u], 0.5 * (hv[u:] + ha[u:])])


def merge_generated(h_v_row: np.ndarray, h_a_row: np.ndarray) -> np.ndarray:
    """Generated tokens are language positions: mean of the two branches."""
    return 0.5 * (h_v_row + h_a_row)


def alpha_from_rows(row_v_masked: np.ndarray, row_a_masked: np.ndarray, layout: ModalityLayout) -> FusionWeights:
    v1, a1, _ = segment_masses(row_v_masked, layout)
    v2, a2, _ = segment_masses(row_a_masked, layout)
    if v1 + a1 < DEGENERATE_MASS or v2 + a2 < DEGENERATE_MASS:
        raise DegenerateAttentionError("audio-visual attention mass is below 1e-12")
    alpha_a = a1 / (v1 + a1)
    alpha_v = v2 / (v2 + a2)
    return FusionWeights(alpha_a, alpha_v, 0.5 * (alpha_a + alpha_v))


def estimate_alpha(model: Decoder, inp: MultimodalInput, cfg: ForkConfig | None = None,
                   counter: CostCounter | None = None) -> FusionWeights:
    """Attention-guided fusion weights from full-depth masked passes.

    Uses the final layer's head-averaged attention row of the last prompt
    position: the video-masked pass yields ``alpha_a`` (audio share of the
    audio-visual mass), the audio-masked pass ``alpha_v``.
    """
    if inp.layout.fusion_mode != TOKEN_WISE:
        raise ValueError("attention-guided fusion is only defined for token-wise layouts")
    cfg = cfg or ForkConfig(l_fork=0)
    final = model.config.n_layers - 1
    rows = []
    for x in masked_pair(inp, cfg):
        _, _, trace = model.forward_range(x.assembled, 0, model.config.n_layers, None, CAPTURE_LAST, counter)
        rows.append(trace.last_rows[final])
    return alpha_from_rows(rows[0], rows[1], inp.layout)


def average_fusion_weights(weights: list[FusionWeights]) -> FusionWeights:
    if not weights:
        raise ValueError("cannot average an empty collection of fusion weights")
    n = len(weights)
    return FusionWeights(
        math.fsum(w.alpha_a for w in weights) / n,
        math.fsum(w.alpha_v for w in weights) / n,
        math.fsum(w.alpha for w in weights) / n,
    )


def calibrate_alpha(model: Decoder, inputs, cfg: ForkConfig | None = None) -> FusionWeights:
    """Mean of per-input ``estimate_alpha`` over a sample collection."""
    inputs = list(inputs)
    if not inputs:
        raise ValueError("calibration needs at least one input")
    return average_fusion_weights([estimate_alpha(model, x, cfg) for x in inputs])


# --- generation ------------------------------------------------------------


class SequenceTooLongError(ValueError):
    pass


@dataclass
class StepOutput:
    logits: np.ndarray
    scores: np.ndarray


@dataclass
class GenerationResult:
    strategy: str
    config: dict
    prompt_length: int
    tokens: list[int] = field(default_factory=list)
    step_logits: list[np.ndarray] = field(default_factory=list)
    step_scores: list[np.ndarray] = field(default_factory=list)
    step_probs: list[float] = field(default_factory=list)
    traces: dict[str, AttentionTrace] = field(default_factory=dict)
    prefill_layer_applications: int = 0
    layer_applications: int = 0
    head_projections: int = 0
    flops: int = 0
    fed_tokens: int = 0
    wall_seconds: float = 0.0
    notes: list[str] = field(default_factory=list)

    @property
    def layers_per_token(self) -> float | None:
        """Layer applications per generated token fed back, excluding prefill."""
        if not self.fed_tokens:
            return None
        return (self.layer_applications - self.prefill_layer_applications) / self.fed_tokens

    def to_dict(self, full_logits: bool = False) -> dict:
        steps = []
        for i, (logits, scores) in enumerate(zip(self.step_logits, self.step_scores)):
            entry = {
                "step": i,
                "argmax": int(np.argmax(scores)),
                "max_score": float(np.max(scores)),
                "max_logit": float(np.max(logits)),
                "logsumexp": float(np.max(logits) + np.log(np.exp(logits - np.max(logits)).sum())),
            }
            if i < len(self.tokens):
                entry["token"] = self.tokens[i]
                entry["prob"] = self.step_probs[i]
            if full_logits:
                entry["logits"] = [float(x) for x in logits]
            steps.append(entry)
        return {
            "strategy": self.strategy,
            "config": self.config,
            "prompt_length": self.prompt_length,
            "tokens": list(self.tokens),
            "steps": steps,
            "counters": {
                "prefill_layer_applications": self.prefill_layer_applications,
                "layer_applications": self.layer_applications,
                "layers_per_token": self.layers_per_token,
                "head_projections": self.head_projections,
                "flops": self.flops,
                "fed_tokens": self.fed_tokens,
            },
            "wall_seconds": self.wall_seconds,
            "notes": list(self.notes),
        }


class Strategy:
    name = "base"
    notes: tuple[str, ...] = ()

    def __init__(self, model: Decoder, counter: CostCounter, capture: CapturePolicy = CAPTURE_LAST):
        self.model = model
        self.counter = counter
        self.capture = capture
        self.traces: dict[str, AttentionTrace] = {}

    def params(self) -> dict:
        return {}

    def prefill(self, inp: MultimodalInput) -> StepOutput:
        raise NotImplementedError

    def step(self, token_id: int, position: int) -> StepOutput:
        raise NotImplementedError

    def _full(self, x, cache=None, capture=CAPTURE_NONE):
        n = self.model.config.n_layers
        return self.model.forward_range(x, 0, n, cache, capture, self.counter)

    def _logits(self, h: np.ndarray) -> np.ndarray:
        return self.model.project_logits(h[-1], self.counter)


class Vanilla(Strategy):
    name = "vanilla"

    def __init__(self, model, counter, capture=CAPTURE_LAST, use_cache: bool = True):
        super().__init__(model, counter, capture)
        self.use_cache = use_cache

    def params(self):
        return {"use_cache": self.use_cache}

    def prefill(self, inp):
        self.sequence = inp.assembled
        h, self.cache, self.traces["main"] = self._full(inp.assembled, None, self.capture)
        logits = self._logits(h)
        return StepOutput(logits, logits)

    def step(self, token_id, position):
        x = self.model.embed_generated(token_id, position)
        if self.use_cache:
            h, self.cache, _ = self._full(x, self.cache)
        else:
            self.sequence = np.concatenate([self.sequence, x])
            h, _, _ = self._full(self.sequence)
        logits = self._logits(h)
        return StepOutput(logits, logits)


class ForkMerge(Strategy):
    name = "fmd"

    def __init__(self, model, counter, cfg: ForkConfig, capture=CAPTURE_LAST):
        super().__init__(model, counter, capture)
        cfg.check(model.config.n_layers)
        self.cfg = cfg
        self.fusion: FusionWeights | None = None
        self.alpha_used: float | None = None

    def params(self):
        p = self.cfg.to_dict()
        p["alpha_used"] = self.alpha_used
        if self.fusion is not None:
            p["online_fusion"] = self.fusion.to_dict()
        return p

    def prefill(self, inp):
        cfg, n = self.cfg, self.model.config.n_layers
        if inp.layout.fusion_mode == TOKEN_WISE:
            self.alpha_used = cfg.alpha
            if cfg.alpha_mode == "online":
                self.fusion = estimate_alpha(self.model, inp, cfg, self.counter)
                self.alpha_used = self.fusion.alpha
        out = fork(self.model, inp, cfg, self.capture, self.counter)
        if inp.layout.fusion_mode == TOKEN_WISE:
            merged = merge_token_wise(out.states, inp.layout, self.alpha_used)
        else:
            merged = merge_channel_wise(out.states, inp.layout)
        self.merged = merged
        self.cache_v, self.cache_a = out.cache_v, out.cache_a
        h, self.cache_m, trace_m = self.model.forward_range(merged, cfg.l_fork, n, None, self.capture, self.counter)
        self.traces.update(branch_v=out.trace_v, branch_a=out.trace_a, merged=trace_m)
        logits = self._logits(h)
        return StepOutput(logits, logits)

    def step(self, token_id, position):
        cfg, n, m = self.cfg, self.model.config.n_layers, self.model
        x = m.embed_generated(token_id, position)
        h_v, self.cache_v, _ = m.forward_range(x, 0, cfg.l_fork, self.cache_v, CAPTURE_NONE, self.counter)
        h_a, self.cache_a, _ = m.forward_range(x, 0, cfg.l_fork, self.cache_a, CAPTURE_NONE, self.counter)
        merged = merge_generated(h_v, h_a)
        h, self.cache_m, _ = m.forward_range(merged, cfg.l_fork, n, self.cache_m, CAPTURE_NONE, self.counter)
        logits = self._logits(h)
        return StepOutput(logits, logits)


def dola_scores(final_logits: np.ndarray, early_logits: np.ndarray) -> np.ndarray:
    return log_softmax(final_logits) - log_softmax(early_logits)


class DolaLite(Strategy):
    name = "dola"
    notes = ("dola-lite: fixed premature layer, no adaptive plausibility constraint, no dynamic layer selection",)

    def __init__(self, model, counter, early_layer: int, capture=CAPTURE_LAST):
        super().__init__(model, counter, capture)
        if not 0 < early_layer < model.config.n_layers:
            raise ValueError(f"early_layer must lie in (0, {model.config.n_layers}), got {early_layer}")
        self.early_layer = early_layer

    def params(self):
        return {"early_layer": self.early_layer}

    def _run(self, x, capture):
        m, k, n = self.model, self.early_layer, self.model.config.n_layers
        h_early, self.cache_lo, t1 = m.forward_range(x, 0, k, self.cache_lo, capture, self.counter)
        h, self.cache_hi, t2 = m.forward_range(h_early, k, n, self.cache_hi, capture, self.counter)
        final = self._logits(h)
        early = self._logits(h_early)
        return StepOutput(final, dola_scores(final, early)), t1.merged_with(t2)

    def prefill(self, inp):
        self.cache_lo = self.cache_hi = None
        out, self.traces["main"] = self._run(inp.assembled, self.capture)
        return out

    def step(self, token_id, position):
        return self._run(self.model.embed_generated(token_id, position), CAPTURE_NONE)[0]


def vcd_scores(logits: np.ndarray, noised_logits: np.ndarray, gamma: float) -> np.ndarray:
    return (1.0 + gamma) * logits - gamma * noised_logits


class VcdLite(Strategy):
    name = "vcd"
    notes = ("vcd-lite: both modalities replaced by scale-matched gaussian noise, no adaptive plausibility constraint",)

    def __init__(self, model, counter, gamma: float = 1.0, noise_seed: int = 0, capture=CAPTURE_LAST):
        super().__init__(model, counter, capture)
        if gamma < 0:
            raise ValueError("gamma must be non-negative")
        self.gamma = gamma
        self.noise_seed = noise_seed

    def params(self):
        return {"gamma": self.gamma, "noise_seed": self.noise_seed}

    def prefill(self, inp):
        noised = mask_modality(inp, "video", "gaussian", self.noise_seed)
        noised = mask_modality(noised, "audio", "gaussian", self.noise_seed)
        h, self.cache, self.traces["main"] = self._full(inp.assembled, None, self.capture)
        h_n, self.cache_n, self.traces["noised"] = self._full(noised.assembled, None, self.capture)
        return self._combine(h, h_n)

    def step(self, token_id, position):
        x = self.model.embed_generated(token_id, position)
        h, self.cache, _ = self._full(x, self.cache)
        h_n, self.cache_n, _ = self._full(x, self.cache_n)
        return self._combine(h, h_n)

    def _combine(self, h, h_n):
        logits = self._logits(h)
        return StepOutput(logits, vcd_scores(logits, self._logits(h_n), self.gamma))


def generate(strategy: Strategy, inp: MultimodalInput, max_tokens: int, eos_id: int | None = None) -> GenerationResult:
    """Greedy loop: argmax of the strategy's scores, lowest token id on ties."""
    model = strategy.model
    if max_tokens < 0:
        raise ValueError("max_tokens must be non-negative")
    needed = inp.T + max(max_tokens - 1, 0)
    if needed > model.config.max_seq_len:
        raise SequenceTooLongError(f"prompt of {inp.T} plus {max_tokens} tokens exceeds max_seq_len={model.config.max_seq_len}")
    counter = strategy.counter
    start = time.perf_counter()
    out = strategy.prefill(inp)
    prefill_layers = counter.layer_applications
    result = GenerationResult(strategy.name, {}, inp.T)
    result.step_logits.append(out.logits)
    result.step_scores.append(out.scores)
    for i in range(max_tokens):
        token = int(np.argmax(out.scores))
        result.tokens.append(token)
        result.step_probs.append(float(softmax_rows(out.scores)[token]))
        if token == eos_id or i == max_tokens - 1:
            break
        out = strategy.step(token, inp.T + i)
        result.fed_tokens += 1
        result.step_logits.append(out.logits)
        result.step_scores.append(out.scores)
    result.wall_seconds = time.perf_counter() - start
    result.traces = dict(strategy.traces)
    result.prefill_layer_applications = prefill_layers
    result.layer_applications, result.head_projections, result.flops = counter.snapshot()
    result.config = {
        "strategy": strategy.name,
        "params": strategy.params(),
        "model": model.config.to_dict(),
        "max_tokens": max_tokens,
        "eos_id": eos_id,
        "fusion_mode": inp.layout.fusion_mode,
    }
    result.notes = list(strategy.notes)
    return result


def decode_vanilla(model: Decoder, inp: MultimodalInput, max_tokens: int, eos_id: int | None = None,
                   use_cache: bool = True, capture: CapturePolicy = CAPTURE_LAST) -> GenerationResult:
    return generate(Vanilla(model, CostCounter(), capture, use_cache), inp, max_tokens, eos_id)


def decode_fmd(model: Decoder, inp: MultimodalInput, cfg: ForkConfig, max_tokens: int, eos_id: int | None = None,
               capture: CapturePolicy = CAPTURE_LAST) -> GenerationResult:
    return generate(ForkMerge(model, CostCounter(), cfg, capture), inp, max_tokens, eos_id)


def decode_dola_lite(model: Decoder, inp: MultimodalInput, early_layer: int, max_tokens: int,
                     eos_id: int | None = None, capture: CapturePolicy = CAPTURE_LAST) -> GenerationResult:
    return generate(DolaLite(model, CostCounter(), early_layer, capture), inp, max_tokens, eos_id)


def decode_vcd_lite(model: Decoder, inp: MultimodalInput, gamma: float, noise_seed: int, max_tokens: int,
                    eos_id: int | None = None, capture: CapturePolicy = CAPTURE_LAST) -> GenerationResult:
    return generate(VcdLite(model, CostCounter(), gamma, noise_seed, capture), inp, max_tokens, eos_id)


STRATEGIES = ("vanilla", "fmd", "dola", "vcd")


def decode(model: Decoder, inp: MultimodalInput, strategy: str, max_tokens: int, *, fork_cfg: ForkConfig | None = None,
           early_layer: int | None = None, gamma: float = 1.0, noise_seed: int = 0, eos_id: int | None = None,
           capture: CapturePolicy = CAPTURE_LAST) -> GenerationResult:
    """Dispatch by strategy name."""
    if strategy == "vanilla":
        return decode_vanilla(model, inp, max_tokens, eos_id, capture=capture)
    if strategy == "fmd":
        return decode_fmd(model, inp, fork_cfg or ForkConfig(), max_tokens, eos_id, capture)
    if strategy == "dola":
        layer = early_layer if early_layer is not None else model.config.n_layers // 2
        return decode_dola_lite(model, inp, layer, max_tokens, eos_id, capture)
    if strategy == "vcd":
        return decode_vcd_lite(model, inp, gamma, noise_seed, max_tokens, eos_id, capture)
    raise ValueError(f"unknown strategy {strategy!r}; choose from {', '.join(STRATEGIES)}")
