"""``forkmerge`` command-line front end.

Exit codes: 0 success, 1 validation error, 2 runtime error. Failures print
a JSON object ``{"error": ..., "message": ..., "field": ...}`` on stderr.
Reports go to ``--out``, else to ``$FORKMERGE_OUT_DIR/<command>.<ext>``
when that variable is set, else to stdout.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from pathlib import Path

from . import __version__
from .analysis import (REFERENCE_SPEED, SWEEP_HEADER, attention_report, bench_decoding, layer_sweep, sweep_to_csv)
from .checkpoint import save_weights
from .config import ConfigValidationError, RunConfig, build_model, load_config, probe_spec_of
from .decoder import ConfigError, Decoder
from .engine import DEFAULT_ALPHA, decode, estimate_alpha, average_fusion_weights
from .fusion import Fixture, LayoutError, ModalityLayout, dumps_fixture, load_fixture, random_fixture
from .probe import AUDIO_TAG, VIDEO_TAG
from .scenarios import probe_masses, probe_rows
from .selftest import run_selftest
from .tensor import Rng

OUT_DIR_ENV = "FORKMERGE_OUT_DIR"


def _clean(obj):
    """JSON-safe copy: non-finite floats become null."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def dumps_report(obj) -> str:
    return json.dumps(_clean(obj), indent=1, allow_nan=False) + "\n"


def _emit(text: str, out: str | None, command: str, ext: str) -> None:
    if out is None and os.environ.get(OUT_DIR_ENV):
        out = str(Path(os.environ[OUT_DIR_ENV]) / f"{command}.{ext}")
    if out is None:
        sys.stdout.write(text)
        return
    path = Path(out)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _fixture_paths(entries) -> list[Path]:
    paths = []
    for entry in entries:
        p = Path(entry)
        if p.is_dir():
            paths += sorted(p.glob("*.json"))
        elif p.exists():
            paths.append(p)
        else:
            raise ConfigValidationError(f"fixture path {entry} does not exist", "fixtures")
    if not paths:
        raise ConfigValidationError("no fixtures given", "fixtures")
    return paths


def _model(cfg: RunConfig) -> Decoder:
    model = build_model(cfg.model)
    n = model.config.n_layers
    if cfg.l_fork > n:
        raise ConfigValidationError(f"l_fork={cfg.l_fork} exceeds the model's {n} layers", "l_fork")
    if cfg.dola_layer is not None and not 0 < cfg.dola_layer < n:
        raise ConfigValidationError(f"dola_layer must lie in [1, {n - 1}]", "dola_layer")
    for c in cfg.candidates or []:
        if not 0 <= c <= n:
            raise ConfigValidationError(f"candidate {c} outside [0, {n}]", "candidates")
    return model


def _load_inputs(cfg: RunConfig, model: Decoder):
    paths = _fixture_paths(cfg.fixtures)
    return [p.stem for p in paths], [load_fixture(p).to_input(model) for p in paths]


# --- commands ---------------------------------------------------------------


def cmd_gen_fixture(args) -> int:
    if args.mode == "channel_wise":
        layout = ModalityLayout.channel_wise(args.U, args.L)
    else:
        layout = ModalityLayout.token_wise(args.M, args.N, args.L)
    if args.scenario == "probe" and layout.fusion_mode != "token_wise":
        raise ConfigValidationError("probe fixtures are token-wise", "mode")
    fixtures = []
    for i in range(args.count):
        seed = args.seed + i
        if args.scenario == "probe":
            fixtures.append(_probe_fixture(seed, layout, args))
        else:
            fixtures.append(random_fixture(seed, layout, args.d_model, args.vocab_size))
    if args.count == 1:
        _emit(dumps_fixture(fixtures[0]), args.out, "gen-fixture", "json")
        return 0
    if args.out is None:
        raise ConfigValidationError("--out directory is required when --count > 1", "out")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    width = len(str(args.count - 1))
    for i, fx in enumerate(fixtures):
        (out / f"fixture_{i:0{width}d}.json").write_text(dumps_fixture(fx))
    return 0


def _probe_fixture(seed: int, layout: ModalityLayout, args) -> Fixture:
    rng = Rng(seed)
    if args.vary_layout:
        m, n, l = (int(x) for x in rng.integers(5, 3) + 1)
        layout = ModalityLayout.token_wise(m, n, l)
    d = args.d_model
    text = tuple(int(t) for t in rng.integers(args.vocab_size, layout.L))
    return Fixture("token_wise", d, layout.M, layout.N, layout.L, probe_rows(layout.M, VIDEO_TAG, d, args.tag_scale),
                   probe_rows(layout.N, AUDIO_TAG, d, args.tag_scale), text, seed)


def cmd_gen_model(cfg: RunConfig, args) -> int:
    if not cfg.output:
        raise ConfigValidationError("--out is required for gen-model", "output")
    save_weights(build_model(cfg.model).weights, cfg.output)
    return 0


def cmd_generate(cfg: RunConfig, args) -> int:
    model = _model(cfg)
    ids, inputs = _load_inputs(cfg, model)
    results = {}
    for sid, inp in zip(ids, inputs):
        res = decode(model, inp, cfg.strategy, cfg.max_tokens, fork_cfg=cfg.fork_config(), early_layer=cfg.dola_layer,
                     gamma=cfg.vcd_gamma, noise_seed=cfg.noise_seed, eos_id=cfg.eos_id)
        results[sid] = res.to_dict(full_logits=cfg.full_logits)
    report = {"command": "generate", "version": __version__, "config": cfg.to_dict(),
              "results": dict(sorted(results.items()))}
    _emit(dumps_report(report), cfg.output, "generate", "json")
    return 0


def cmd_calibrate_alpha(cfg: RunConfig, args) -> int:
    model = _model(cfg)
    ids, inputs = _load_inputs(cfg, model)
    fork_cfg = cfg.fork_config()
    per = {sid: estimate_alpha(model, inp, fork_cfg) for sid, inp in zip(ids, inputs)}
    mean = average_fusion_weights([per[k] for k in sorted(per)])
    report = {
        "command": "calibrate-alpha",
        "version": __version__,
        "config": cfg.to_dict(),
        "samples": len(per),
        "fusion_weights": mean.to_dict(),
        "default_alpha": DEFAULT_ALPHA,
        "per_sample": {k: per[k].to_dict() for k in sorted(per)},
    }
    _emit(dumps_report(report), cfg.output, "calibrate-alpha", "json")
    sys.stderr.write(f"calibrated alpha {mean.alpha:.4f} (default {DEFAULT_ALPHA})\n")
    return 0


def cmd_analyze(cfg: RunConfig, args) -> int:
    model = _model(cfg)
    ids, inputs = _load_inputs(cfg, model)
    fork_cfg = cfg.fork_config()
    reports = attention_report(model, inputs, fork_cfg, ids, cfg.per_head)
    out = {"command": "analyze-attention", "version": __version__, "config": cfg.to_dict(),
           "head_aggregation": ("per-head sums, then mean over heads" if cfg.per_head
                                else "mean over heads, then sum over modality ranges"),
           "reports": [r.to_dict() for r in reports]}
    spec = probe_spec_of(cfg.model)
    n = model.config.n_layers
    if spec is not None and fork_cfg.masking == "zero_out":
        # Closed-form final-layer masses, read from the fixture's tag magnitudes.
        oracle = {}
        for sid, inp in zip(ids, inputs):
            lay = inp.layout
            tv = float(abs(inp.visual[0, VIDEO_TAG])) if lay.M else 0.0
            ta = float(abs(inp.audio[0, AUDIO_TAG])) if lay.N else 0.0
            entry = {"vanilla": probe_masses(model.config, spec, lay, tv, ta)}
            if fork_cfg.l_fork >= n:
                entry["fmd:branch_v"] = probe_masses(model.config, spec, lay, 0.0, ta)
                entry["fmd:branch_a"] = probe_masses(model.config, spec, lay, tv, 0.0)
            elif fork_cfg.alpha_mode == "fixed":
                a = fork_cfg.alpha
                entry["fmd:merged"] = probe_masses(model.config, spec, lay, a * tv, a * ta)
            oracle[sid] = {k: dict(zip(("video_mass", "audio_mass", "text_mass"), v)) for k, v in entry.items()}
        out["closed_form"] = oracle
    _emit(dumps_report(out), cfg.output, "analyze-attention", "json")
    return 0


def cmd_sweep(cfg: RunConfig, args) -> int:
    model = _model(cfg)
    ids, inputs = _load_inputs(cfg, model)
    n = model.config.n_layers
    candidates = cfg.candidates if cfg.candidates is not None else list(range(0, n + 1, max(1, args.step)))
    targets = None if cfg.target_token is None else [cfg.target_token] * len(inputs)
    rows = layer_sweep(model, inputs, candidates, cfg.fork_config(), targets, max(1, cfg.max_tokens))
    if cfg.format == "csv":
        _emit(sweep_to_csv(rows), cfg.output, "sweep-layers", "csv")
    else:
        report = {"command": "sweep-layers", "version": __version__, "config": cfg.to_dict(),
                  "rows": [dict(zip(SWEEP_HEADER, (r.l_fork, r.video_mass, r.audio_mass, r.text_mass, r.metric,
                                                   r.samples))) for r in rows]}
        _emit(dumps_report(report), cfg.output, "sweep-layers", "json")
    return 0


def cmd_bench(cfg: RunConfig, args) -> int:
    model = _model(cfg)
    _, inputs = _load_inputs(cfg, model)
    records = bench_decoding(model, inputs, cfg.strategies, cfg.max_tokens, fork_cfg=cfg.fork_config(),
                             early_layer=cfg.dola_layer, gamma=cfg.vcd_gamma, noise_seed=cfg.noise_seed,
                             warmup=cfg.warmup, repeats=cfg.repeats)
    n = model.config.n_layers
    base = next((r for r in records if r.strategy == "vanilla"), None)
    rows = []
    for r in records:
        d = r.to_dict()
        if base is not None:
            d["analytic_ratio_vs_vanilla"] = r.analytic_layers_per_token / base.analytic_layers_per_token
            d["wall_ratio_vs_vanilla"] = r.wall_seconds / base.wall_seconds
        rows.append(d)
    if cfg.format == "csv":
        keys = list(rows[0])
        text = ",".join(keys) + "\n" + "".join(",".join(repr(row[k]) if isinstance(row[k], float) else str(row[k])
                                                       for k in keys) + "\n" for row in rows)
        _emit(text, cfg.output, "bench", "csv")
        return 0
    report = {
        "command": "bench",
        "version": __version__,
        "config": cfg.to_dict(),
        "n_layers": n,
        "records": rows,
        "reference_cost": {
            "n_layers": 28,
            "l_fork": 5,
            "unit": "ambiguous: labelled tokens/s, ordered as seconds/token",
            "as_seconds_per_token": REFERENCE_SPEED,
            "as_tokens_per_second": {k: 1.0 / v for k, v in REFERENCE_SPEED.items()},
            "ratio_vs_vanilla": {k: v / REFERENCE_SPEED["vanilla"] for k, v in REFERENCE_SPEED.items()},
        },
    }
    _emit(dumps_report(report), cfg.output, "bench", "json")
    return 0


def cmd_selftest(args) -> int:
    start = time.perf_counter()
    rows = run_selftest(args.golden)
    width = max(len(r[0]) for r in rows)
    for name, ok, detail, _ in rows:
        print(f"{'PASS' if ok else 'FAIL'}  {name:<{width}}  {detail}")
    failed = sum(not r[1] for r in rows)
    print(f"{len(rows) - failed}/{len(rows)} invariants passed in {time.perf_counter() - start:.1f}s")
    return 0 if failed == 0 else 1


# --- argument parsing ----------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """Usage errors are validation errors (exit 1), reported as JSON."""

    def error(self, message):
        raise ConfigValidationError(message)



def _run_parser(sub, name, help_text):
    p = sub.add_parser(name, help=help_text, argument_default=argparse.SUPPRESS)
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--model", type=json.loads, help="model spec as inline JSON")
    p.add_argument("--model-seed", type=int, help="seed for a random model (shorthand)")
    p.add_argument("--checkpoint", help="load weights from a checkpoint file")
    p.add_argument("--fixtures", nargs="+", help="fixture files or directories")
    p.add_argument("--strategy", help="vanilla | fmd | dola | vcd")
    p.add_argument("--l-fork", dest="l_fork", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--alpha-mode", dest="alpha_mode")
    p.add_argument("--masking", help="zero_out | gaussian | identity (debug)")
    p.add_argument("--noise-seed", dest="noise_seed", type=int)
    p.add_argument("--continuation-mode", dest="continuation_mode")
    p.add_argument("--dola-layer", dest="dola_layer", type=int)
    p.add_argument("--vcd-gamma", dest="vcd_gamma", type=float)
    p.add_argument("--max-tokens", dest="max_tokens", type=int)
    p.add_argument("--eos-id", dest="eos_id", type=int)
    p.add_argument("--target-token", dest="target_token", type=int)
    p.add_argument("--candidates", type=int, nargs="+")
    p.add_argument("--strategies", nargs="+")
    p.add_argument("--warmup", type=int)
    p.add_argument("--repeats", type=int)
    p.add_argument("--per-head", dest="per_head", action="store_true")
    p.add_argument("--full-logits", dest="full_logits", action="store_true")
    p.add_argument("--out", dest="output")
    p.add_argument("--format")
    p.add_argument("--seed", type=int)
    return p


_NOT_CONFIG = {"command", "config", "model_seed", "checkpoint", "step", "func"}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="forkmerge", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-fixture", help="write seeded fixture JSON")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--mode", choices=["token_wise", "channel_wise"], default="token_wise")
    g.add_argument("--scenario", choices=["random", "probe"], default="random")
    g.add_argument("--M", type=int, default=8)
    g.add_argument("--N", type=int, default=8)
    g.add_argument("--L", type=int, default=8)
    g.add_argument("--U", type=int, default=8)
    g.add_argument("--d-model", dest="d_model", type=int, default=64)
    g.add_argument("--vocab-size", dest="vocab_size", type=int, default=256)
    g.add_argument("--tag-scale", dest="tag_scale", type=float, default=1.0)
    g.add_argument("--vary-layout", dest="vary_layout", action="store_true",
                   help="probe scenario: draw M, N, L in 1..5 per fixture")
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--out", default=None)

    _run_parser(sub, "gen-model", "write a weight checkpoint")
    _run_parser(sub, "generate", "decode fixtures with one strategy")
    _run_parser(sub, "calibrate-alpha", "estimate fusion weights over fixtures")
    _run_parser(sub, "analyze-attention", "modality attention-mass report")
    sweep = _run_parser(sub, "sweep-layers", "sweep the fork layer")
    sweep.add_argument("--step", type=int, default=1)
    _run_parser(sub, "bench", "time decoding strategies")

    s = sub.add_parser("selftest", help="run the invariant suite")
    s.add_argument("--golden", default=None, help="alternate RNG golden file")
    return parser


def _config_from_args(args) -> RunConfig:
    overrides = {k: v for k, v in vars(args).items() if k not in _NOT_CONFIG}
    if getattr(args, "model_seed", None) is not None or getattr(args, "checkpoint", None) is not None:
        base = dict(overrides.get("model", {}))
        if getattr(args, "checkpoint", None) is not None:
            base = {"kind": "checkpoint", "path": args.checkpoint}
        else:
            base.setdefault("kind", "random")
            base["seed"] = args.model_seed
        overrides["model"] = base
    return load_config(getattr(args, "config", None), overrides)


COMMANDS = {
    "gen-model": cmd_gen_model,
    "generate": cmd_generate,
    "calibrate-alpha": cmd_calibrate_alpha,
    "analyze-attention": cmd_analyze,
    "sweep-layers": cmd_sweep,
    "bench": cmd_bench,
}


def _fail(kind: str, exc: Exception, code: int) -> int:
    payload = {"error": kind, "type": type(exc).__name__, "message": str(exc), "field": getattr(exc, "field", None)}
    sys.stderr.write(json.dumps(payload) + "\n")
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command == "selftest":
            return cmd_selftest(args)
        if args.command == "gen-fixture":
            return cmd_gen_fixture(args)
        cfg = _config_from_args(args)
        return COMMANDS[args.command](cfg, args)
    except (ConfigValidationError, ConfigError, LayoutError) as exc:
        return _fail("validation", exc, 1)
    except Exception as exc:
        return _fail("runtime", exc, 2)


if __name__ == "__main__":
    sys.exit(main())
