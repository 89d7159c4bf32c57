"""Run configuration: defaults, strict file parsing and model construction.

Precedence is command-line flag, then config file, then the defaults below.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .checkpoint import load_weights
from .decoder import Decoder, ModelConfig
from .engine import STRATEGIES, ForkConfig
from .probe import ProbeSpec
from .scenarios import VIDEO_SKEW, probe_config, probe_model

PROBE_SCENARIOS = {"video_skew": VIDEO_SKEW}


class ConfigValidationError(ValueError):
    def __init__(self, message: str, field_name: str | None = None):
        super().__init__(message)
        self.field = field_name


@dataclass
class RunConfig:
    # {"kind": "random", "seed": 0, <ModelConfig keys>} | {"kind": "probe", "scenario": ..., <ProbeSpec keys>}
    # | {"kind": "checkpoint", "path": ...}
    model: dict = field(default_factory=lambda: {"kind": "random", "seed": 0})
    fixtures: list = field(default_factory=list)
    strategy: str = "vanilla"
    l_fork: int = 2
    alpha: float = 0.8
    alpha_mode: str = "fixed"
    masking: str = "zero_out"
    noise_seed: int = 0
    continuation_mode: str = "dual_branch_per_token"
    dola_layer: int | None = None
    vcd_gamma: float = 1.0
    max_tokens: int = 8
    eos_id: int | None = None
    target_token: int | None = None
    candidates: list | None = None
    strategies: list = field(default_factory=lambda: list(STRATEGIES))
    warmup: int = 1
    repeats: int = 3
    per_head: bool = False
    full_logits: bool = False
    output: str | None = None
    format: str = "json"
    seed: int = 0

    def fork_config(self) -> ForkConfig:
        return ForkConfig(self.l_fork, self.alpha, self.alpha_mode, self.masking, self.noise_seed,
                          self.continuation_mode)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("output")
        return d


_TYPES = {
    "model": (dict,), "fixtures": (list,), "strategy": (str,), "l_fork": (int,), "alpha": (int, float),
    "alpha_mode": (str,), "masking": (str,), "noise_seed": (int,), "continuation_mode": (str,),
    "dola_layer": (int, type(None)), "vcd_gamma": (int, float), "max_tokens": (int,),
    "eos_id": (int, type(None)), "target_token": (int, type(None)), "candidates": (list, type(None)),
    "strategies": (list,), "warmup": (int,), "repeats": (int,), "per_head": (bool,), "full_logits": (bool,),
    "output": (str, type(None)), "format": (str,), "seed": (int,),
}


def _check_value(name: str, value):
    ok = isinstance(value, _TYPES[name])
    if isinstance(value, bool) and bool not in _TYPES[name]:
        ok = False
    if not ok:
        raise ConfigValidationError(f"config key {name!r} has invalid value {value!r}", name)
    if name in ("alpha", "vcd_gamma"):
        return float(value)
    return value


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    values = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigValidationError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigValidationError("config file must hold a JSON object")
        values.update(raw)
    values.update(overrides or {})
    known = {f.name for f in fields(RunConfig)}
    for key in values:
        if key not in known:
            raise ConfigValidationError(f"unknown config key {key!r}", key)
    cfg = RunConfig(**{k: _check_value(k, v) for k, v in values.items()})
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    choices = {
        "alpha_mode": ("fixed", "online"),
        "masking": ("zero_out", "gaussian", "identity"),
        "continuation_mode": ("dual_branch_per_token",),
        "format": ("json", "csv"),
        "strategy": STRATEGIES,
    }
    for name, allowed in choices.items():
        if getattr(cfg, name) not in allowed:
            raise ConfigValidationError(f"{name} must be one of {', '.join(allowed)}", name)
    for s in cfg.strategies:
        if s not in STRATEGIES:
            raise ConfigValidationError(f"unknown strategy {s!r} in strategies", "strategies")
    if not 0.0 <= cfg.alpha <= 1.0:
        raise ConfigValidationError("alpha must lie in [0, 1]", "alpha")
    for name in ("l_fork", "max_tokens", "warmup"):
        if getattr(cfg, name) < 0:
            raise ConfigValidationError(f"{name} must be non-negative", name)
    if cfg.repeats < 1:
        raise ConfigValidationError("repeats must be at least 1", "repeats")
    if cfg.vcd_gamma < 0:
        raise ConfigValidationError("vcd_gamma must be non-negative", "vcd_gamma")


def build_model(spec: dict) -> Decoder:
    spec = dict(spec)
    kind = spec.pop("kind", "random")
    model_keys = {f.name for f in fields(ModelConfig)}
    if kind == "random":
        seed = spec.pop("seed", 0)
        _reject_unknown(spec, model_keys)
        return Decoder.random(ModelConfig(**spec), seed)
    if kind == "probe":
        scenario = spec.pop("scenario", "video_skew")
        if scenario not in PROBE_SCENARIOS:
            raise ConfigValidationError(f"unknown probe scenario {scenario!r}", "model.scenario")
        probe_keys = {f.name for f in fields(ProbeSpec)}
        _reject_unknown(spec, model_keys | probe_keys)
        base = PROBE_SCENARIOS[scenario]
        probe = ProbeSpec(**{**asdict(base), **{k: v for k, v in spec.items() if k in probe_keys}})
        config = ModelConfig(**{**probe_config().to_dict(), **{k: v for k, v in spec.items() if k in model_keys}})
        return probe_model(probe, config)
    if kind == "checkpoint":
        path = spec.pop("path", None)
        _reject_unknown(spec, set())
        if path is None:
            raise ConfigValidationError("checkpoint model needs a path", "model.path")
        return Decoder(load_weights(path))
    raise ConfigValidationError(f"unknown model kind {kind!r}", "model.kind")


def probe_spec_of(spec: dict) -> ProbeSpec | None:
    if spec.get("kind") != "probe":
        return None
    base = PROBE_SCENARIOS[spec.get("scenario", "video_skew")]
    probe_keys = {f.name for f in fields(ProbeSpec)}
    return ProbeSpec(**{**asdict(base), **{k: v for k, v in spec.items() if k in probe_keys}})


def _reject_unknown(spec: dict, allowed: set) -> None:
    unknown = sorted(set(spec) - allowed)
    if unknown:
        raise ConfigValidationError(f"unknown model key(s): {', '.join(unknown)}", f"model.{unknown[0]}")
