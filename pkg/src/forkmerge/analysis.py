"""Diagnostics: modality attention mass, fork-layer sweeps, cosine probes, cost benchmarks."""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .decoder import CAPTURE_LAST, AttentionTrace, CapturePolicy, Decoder
from .engine import STRATEGIES, ForkConfig, GenerationResult, decode, decode_fmd, decode_vanilla
from .fusion import ModalityLayout, MultimodalInput, mask_modality, segment_masses


class MissingTraceError(KeyError):
    pass


class DegenerateVectorError(ArithmeticError):
    pass


# Reported per-token decoding cost for a 28-layer model with the fork at
# layer 5. Labelled tokens/s yet ordered as if lower were better, so it is
# most likely seconds per token; bench reports carry both readings.
REFERENCE_SPEED = {"vanilla": 0.34, "vcd": 0.69, "dola": 0.54, "fmd": 0.52}


@dataclass
class AttentionMassReport:
    label: str
    sample_id: str
    layers: dict[int, tuple[float, float, float]] = field(default_factory=dict)

    @property
    def final(self) -> tuple[float, float, float]:
        return self.layers[max(self.layers)]

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "sample_id": self.sample_id,
            "layers": [
                {"layer": k, "video_mass": v, "audio_mass": a, "text_mass": t}
                for k, (v, a, t) in sorted(self.layers.items())
            ],
        }


def modality_attention_mass(trace: AttentionTrace, layout: ModalityLayout, label: str = "", sample_id: str = "",
                            layers=None, per_head: bool = False) -> AttentionMassReport:
    """Sum the captured last-query attention over the video, audio and text ranges.

    Heads are averaged before summing; with ``per_head`` each head is summed
    first and the per-head masses averaged instead.
    """
    source = trace.per_head_rows if per_head else trace.last_rows
    wanted = sorted(source) if layers is None else list(layers)
    if not wanted:
        raise MissingTraceError("trace holds no attention rows")
    report = AttentionMassReport(label, sample_id)
    for layer in wanted:
        if layer not in source:
            raise MissingTraceError(f"no attention captured for layer {layer}")
        if per_head:
            per = np.array([segment_masses(row, layout) for row in source[layer]])
            report.layers[layer] = tuple(float(x) for x in per.mean(axis=0))
        else:
            report.layers[layer] = segment_masses(source[layer], layout)
    return report


def result_mass_reports(result: GenerationResult, layout: ModalityLayout, sample_id: str = "",
                        per_head: bool = False) -> list[AttentionMassReport]:
    """One report per captured pass; FMD yields merged plus per-branch reports."""
    reports = []
    for label in ("main", "merged", "branch_v", "branch_a"):
        trace = result.traces.get(label)
        if trace is not None and trace.last_rows:
            name = result.strategy if label == "main" else f"{result.strategy}:{label}"
            reports.append(modality_attention_mass(trace, layout, name, sample_id, per_head=per_head))
    return reports


def final_layer_masses(result: GenerationResult, layout: ModalityLayout, n_layers: int) -> tuple[float, float, float]:
    """Final-layer masses of a run.

    For FMD this is the merged pass; when the merge happens after the last
    layer there is no merged pass and the two branches are averaged.
    """
    final = n_layers - 1
    for label in ("main", "merged"):
        trace = result.traces.get(label)
        if trace is not None and final in trace.last_rows:
            return segment_masses(trace.last_rows[final], layout)
    rows = [result.traces[b].last_rows.get(final) for b in ("branch_v", "branch_a") if b in result.traces]
    if len(rows) != 2 or any(r is None for r in rows):
        raise MissingTraceError(f"no final-layer attention in {result.strategy} run")
    mv, ma = segment_masses(rows[0], layout), segment_masses(rows[1], layout)
    return tuple(0.5 * (x + y) for x, y in zip(mv, ma))


@dataclass(frozen=True)
class SweepRow:
    l_fork: int
    video_mass: float
    audio_mass: float
    text_mass: float
    metric: float
    samples: int


SWEEP_HEADER = ("l_fork", "video_mass", "audio_mass", "text_mass", "metric", "samples")


def layer_sweep(model: Decoder, inputs, candidates, cfg: ForkConfig, targets=None, max_tokens: int = 1) -> list[SweepRow]:
    """Run FMD at each fork layer and tabulate final-layer masses and accuracy.

    ``metric`` is the fraction of inputs whose first emitted token equals its
    target, or NaN when no targets are given.
    """
    inputs = list(inputs)
    n = model.config.n_layers
    if targets is not None and len(targets) != len(inputs):
        raise ValueError("targets and inputs differ in length")
    rows = []
    for c in candidates:
        if not 0 <= c <= n:
            raise ValueError(f"fork layer candidate {c} outside [0, {n}]")
        c_cfg = replace(cfg, l_fork=c)
        masses, hits = [], 0
        for i, inp in enumerate(inputs):
            res = decode_fmd(model, inp, c_cfg, max(max_tokens, 1))
            masses.append(final_layer_masses(res, inp.layout, n))
            if targets is not None and res.tokens[0] == targets[i]:
                hits += 1
        k = len(inputs)
        mean = [math.fsum(m[j] for m in masses) / k for j in range(3)]
        metric = hits / k if targets is not None else float("nan")
        rows.append(SweepRow(c, mean[0], mean[1], mean[2], metric, k))
    return rows


def sweep_to_csv(rows: list[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    for r in rows:
        w.writerow([r.l_fork, repr(r.video_mass), repr(r.audio_mass), repr(r.text_mass), repr(r.metric), r.samples])
    return buf.getvalue()


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = float(np.linalg.norm(u)), float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise DegenerateVectorError("cosine similarity of a zero-norm vector")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def final_hidden(model: Decoder, inp: MultimodalInput) -> np.ndarray:
    h, _, _ = model.forward_range(inp.assembled, 0, model.config.n_layers)
    return h[-1]


def hidden_cosine_probe(model: Decoder, inp: MultimodalInput, target: str, method: str, seed: int = 0) -> float:
    """Cosine between final-layer last-position states of intact and perturbed input."""
    perturbed = mask_modality(inp, target, method, seed)
    return cosine_similarity(final_hidden(model, inp), final_hidden(model, perturbed))


def analytic_layers_per_token(strategy: str, n_layers: int, l_fork: int = 0) -> int:
    """Decoder-layer applications needed per generated token."""
    if strategy == "vanilla" or strategy == "dola":
        # dola-lite reads the early layer off the same pass
        return n_layers
    if strategy == "fmd":
        return n_layers + l_fork
    if strategy == "vcd":
        return 2 * n_layers
    raise ValueError(f"unknown strategy {strategy!r}")


@dataclass
class BenchRecord:
    strategy: str
    tokens: int
    wall_seconds: float
    tokens_per_second: float
    seconds_per_token: float
    layer_applications: int
    layers_per_token: float | None
    analytic_layers_per_token: int
    head_projections: int
    flops: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


WALL_TIME_FIELDS = ("wall_seconds", "tokens_per_second", "seconds_per_token")


def bench_decoding(model: Decoder, inputs, strategies, max_tokens: int, *, fork_cfg: ForkConfig | None = None,
                   early_layer: int | None = None, gamma: float = 1.0, noise_seed: int = 0,
                   warmup: int = 1, repeats: int = 3) -> list[BenchRecord]:
    """Time each strategy over ``inputs`` and attach exact work counters.

    Strategies are interleaved within each repeat and the fastest repeat is
    kept, which damps drift on a shared machine.
    """
    inputs = list(inputs)
    if not inputs:
        raise ValueError("bench needs at least one input")
    if repeats < 1:
        raise ValueError("repeats must be at least 1")
    fork_cfg = fork_cfg or ForkConfig(l_fork=max(1, model.config.n_layers // 4))
    kwargs = dict(fork_cfg=fork_cfg, early_layer=early_layer, gamma=gamma, noise_seed=noise_seed,
                  capture=CapturePolicy(rows="none"))
    for s in strategies:
        if s not in STRATEGIES:
            raise ValueError(f"unknown strategy {s!r}")
    for _ in range(warmup):
        for s in strategies:
            decode(model, inputs[0], s, max_tokens, **kwargs)

    best = {s: math.inf for s in strategies}
    runs: dict[str, list[GenerationResult]] = {}
    for _ in range(repeats):
        for s in strategies:
            start = time.perf_counter()
            results = [decode(model, x, s, max_tokens, **kwargs) for x in inputs]
            best[s] = min(best[s], time.perf_counter() - start)
            runs[s] = results

    records = []
    for s in strategies:
        results = runs[s]
        tokens = sum(len(r.tokens) for r in results)
        fed = sum(r.fed_tokens for r in results)
        decode_layers = sum(r.layer_applications - r.prefill_layer_applications for r in results)
        wall = best[s]
        records.append(BenchRecord(
            strategy=s,
            tokens=tokens,
            wall_seconds=wall,
            tokens_per_second=tokens / wall if wall > 0 else math.inf,
            seconds_per_token=wall / tokens if tokens else math.nan,
            layer_applications=sum(r.layer_applications for r in results),
            layers_per_token=decode_layers / fed if fed else None,
            analytic_layers_per_token=analytic_layers_per_token(s, model.config.n_layers, fork_cfg.l_fork),
            head_projections=sum(r.head_projections for r in results),
            flops=sum(r.flops for r in results),
        ))
    return records


def attention_report(model: Decoder, inputs, cfg: ForkConfig, sample_ids=None,
                     per_head: bool = False) -> list[AttentionMassReport]:
    """Prefill vanilla and FMD on each input and report every captured pass."""
    inputs = list(inputs)
    sample_ids = sample_ids or [str(i) for i in range(len(inputs))]
    capture = CapturePolicy(per_head=True) if per_head else CAPTURE_LAST
    reports = []
    for sid, inp in zip(sample_ids, inputs):
        for res in (decode_vanilla(model, inp, 0, capture=capture), decode_fmd(model, inp, cfg, 0, capture=capture)):
            reports += result_mass_reports(res, inp.layout, sid, per_head)
    return reports
