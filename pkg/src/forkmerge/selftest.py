"""Invariant suite behind ``forkmerge selftest``.

Each check returns ``(passed, detail)``. Oracles here are written
separately from the code they check (loops, closed forms, recomputation).
"""
from __future__ import annotations

import math
import time
from importlib import resources
from pathlib import Path

import numpy as np

from .analysis import analytic_layers_per_token, bench_decoding, cosine_similarity, final_hidden, final_layer_masses, hidden_cosine_probe
from .checkpoint import dumps_weights, loads_weights
from .decoder import CapturePolicy, Decoder, ModelConfig
from .engine import ForkConfig, ForkStates, decode_fmd, decode_vanilla, decode_vcd_lite, estimate_alpha, merge_channel_wise, merge_token_wise
from .fusion import ModalityLayout, mask_modality, random_fixture
from .probe import ProbeSpec
from .scenarios import VIDEO_SKEW, probe_alpha, probe_config, probe_input, probe_masses, probe_model
from .tensor import Rng, format_float, matmul, rms_norm, seeded_gaussian, softmax_rows


def golden_path() -> Path:
    return Path(str(resources.files("forkmerge") / "data" / "rng_seed42.txt"))


def small_model(seed: int, n_layers: int = 4, d_model: int = 32, vocab: int = 64) -> Decoder:
    return Decoder.random(ModelConfig(n_layers=n_layers, n_heads=4, d_model=d_model, d_ff=2 * d_model,
                                      vocab_size=vocab, max_seq_len=128), seed)


def random_input(model: Decoder, seed: int, M=5, N=4, L=3, mode="token_wise"):
    layout = ModalityLayout.token_wise(M, N, L) if mode == "token_wise" else ModalityLayout.channel_wise(M, L)
    return random_fixture(seed, layout, model.config.d_model, model.config.vocab_size).to_input(model)


def check_rng_golden(golden=None):
    lines = Path(golden or golden_path()).read_text().split()
    got = [format_float(x) for x in Rng(42).uniform(64)]
    bad = sum(a != b for a, b in zip(lines, got)) + abs(len(lines) - len(got))
    return bad == 0, f"{bad} mismatching draws"


def check_rng_moments():
    x = Rng(7).normal(100_000)
    m, s = float(x.mean()), float(x.std())
    return abs(m) <= 0.02 and abs(s - 1) <= 0.02, f"mean={m:.4f} std={s:.4f}"


def check_matmul():
    rng = Rng(3)
    a, b = seeded_gaussian(rng, 4, 4), seeded_gaussian(rng, 4, 4)
    loop = np.zeros((4, 4))
    for i in range(4):
        for j in range(4):
            loop[i, j] = sum(a[i, k] * b[k, j] for k in range(4))
    err = float(np.abs(matmul(a, b) - loop).max())
    return err <= 1e-12, f"max diff {err:.2e}"


def check_softmax():
    m = Rng(4).uniform(50 * 20).reshape(50, 20) * 100 - 50
    err = float(np.abs(softmax_rows(m).sum(axis=1) - 1).max())
    sat = softmax_rows(np.array([[0.0, -1e9, 1.0]]))[0, 1]
    return err <= 1e-6 and sat <= 1e-30, f"row-sum err {err:.1e}, masked entry {sat:.1e}"


def check_rms_norm():
    out = rms_norm([3.0, 4.0], [1.0, 1.0], 0.0)
    expect = np.array([3.0, 4.0]) / math.sqrt(12.5)
    return bool(np.allclose(out, expect, rtol=0, atol=1e-15)), "[3,4] case"


def check_causality():
    model = small_model(1)
    inp = random_input(model, 2)
    _, _, trace = model.forward_range(inp.assembled, 0, model.config.n_layers, capture=CapturePolicy(rows="full"))
    worst = max(float(np.abs(np.triu(m, k=1)).max()) for m in trace.full.values())
    return worst == 0.0, f"max weight above diagonal {worst}"


def check_composition():
    model = Decoder.random(ModelConfig(n_layers=8, n_heads=4, d_model=32, d_ff=64, vocab_size=64), 5)
    x = random_input(model, 6).assembled
    full, _, _ = model.forward_range(x, 0, 8)
    worst = 0.0
    for k in range(9):
        h, _, _ = model.forward_range(x, 0, k)
        h, _, _ = model.forward_range(h, k, 8)
        worst = max(worst, float(np.abs(h - full).max()))
    return worst <= 1e-9, f"max diff {worst:.2e}"


def check_cache_recompute():
    model = small_model(8)
    inp = random_input(model, 9)
    a = decode_vanilla(model, inp, 32, use_cache=True)
    b = decode_vanilla(model, inp, 32, use_cache=False)
    err = max(float(np.abs(x - y).max() / max(1.0, np.abs(y).max())) for x, y in zip(a.step_logits, b.step_logits))
    return a.tokens == b.tokens and err <= 1e-6, f"tokens equal={a.tokens == b.tokens}, logit rel diff {err:.1e}"


def check_checkpoint():
    w = small_model(10).weights
    w2 = loads_weights(dumps_weights(w))
    same = all(np.array_equal(x, y) for (_, x), (_, y) in zip(w.named_tensors(), w2.named_tensors()))
    return same and w2.config == w.config, "binary round trip"


def check_assembly():
    model = small_model(11)
    inp = random_input(model, 12, 2, 3, 4)
    lay = inp.layout
    raw = inp.assembled - model.positions(0, lay.T)
    ok = (lay.T == 9 and np.array_equal(inp.content[0:2], inp.visual) and np.array_equal(inp.content[2:5], inp.audio)
          and np.array_equal(inp.content[5:], model.embed_tokens(inp.text_ids))
          and float(np.abs(raw - inp.content).max()) <= 1e-14)
    ch = random_input(model, 13, 3, 3, 2, mode="channel_wise")
    d = model.config.d_model
    ok = ok and np.array_equal(ch.content[:3, : d // 2], ch.visual) and np.array_equal(ch.content[:3, d // 2:], ch.audio)
    return bool(ok), "token-wise and channel-wise slicing"


def check_masking():
    model = Decoder.random(ModelConfig(n_layers=2, n_heads=4, d_model=64, d_ff=64, vocab_size=64), 14)
    inp = random_input(model, 15, 16, 16, 4)
    z = mask_modality(inp, "video", "zero_out")
    keep = np.array_equal(z.assembled[16:], inp.assembled[16:]) and np.array_equal(z.content[:16], np.zeros((16, 64)))
    idem = np.array_equal(mask_modality(z, "video", "zero_out").assembled, z.assembled)
    g1 = mask_modality(inp, "audio", "gaussian", 3)
    g2 = mask_modality(inp, "audio", "gaussian", 3)
    rms = lambda m: float(np.sqrt((m * m).mean(axis=1)).mean())
    ratio = rms(g1.content[16:32]) / rms(inp.content[16:32])
    ok = keep and idem and np.array_equal(g1.assembled, g2.assembled) and abs(ratio - 1) <= 0.1 and z.T == inp.T
    return bool(ok), f"gaussian RMS ratio {ratio:.3f}"


def _loop_merge(hv, ha, lay, alpha):
    out = np.zeros_like(hv)
    for i in range(hv.shape[0]):
        for j in range(hv.shape[1]):
            if i < lay.M:
                out[i, j] = (1 - alpha) * hv[i, j] + alpha * ha[i, j]
            elif i < lay.M + lay.N:
                out[i, j] = alpha * hv[i, j] + (1 - alpha) * ha[i, j]
            else:
                out[i, j] = 0.5 * (hv[i, j] + ha[i, j])
    return out


def check_merge_algebra():
    rng = Rng(16)
    lay = ModalityLayout.token_wise(3, 4, 2)
    hv, ha = seeded_gaussian(rng, 9, 6), seeded_gaussian(rng, 9, 6)
    st = ForkStates(hv, ha)
    ok = np.array_equal(merge_token_wise(st, lay, 1.0), np.concatenate([ha[:3], hv[3:7], 0.5 * (hv[7:] + ha[7:])]))
    ok = ok and np.array_equal(merge_token_wise(st, lay, 0.5), 0.5 * (hv + ha))
    for a in (0.0, 0.25, 0.5, 0.8, 1.0):
        ok = ok and np.array_equal(merge_token_wise(ForkStates(hv, hv.copy()), lay, a), hv)
    err = max(float(np.abs(merge_token_wise(st, lay, a) - _loop_merge(hv, ha, lay, a)).max())
              for a in (0.0, 0.25, 0.8, 1.0))
    cl = ModalityLayout.channel_wise(5, 4)
    cv, ca = seeded_gaussian(rng, 9, 6), seeded_gaussian(rng, 9, 6)
    loop = np.array([[cv[i, j] + ca[i, j] if i < 5 else 0.5 * (cv[i, j] + ca[i, j]) for j in range(6)] for i in range(9)])
    err = max(err, float(np.abs(merge_channel_wise(ForkStates(cv, ca), cl) - loop).max()))
    return bool(ok) and err <= 1e-12, f"loop-oracle diff {err:.1e}"


def check_reduction(n_models: int = 20, steps: int = 32):
    worst, same = 0.0, True
    for s in range(n_models):
        model = small_model(100 + s)
        inp = random_input(model, 200 + s)
        v = decode_vanilla(model, inp, steps)
        f = decode_fmd(model, inp, ForkConfig(l_fork=1 + s % 3, masking="identity"), steps)
        same = same and v.tokens == f.tokens
        worst = max(worst, max(float(np.abs(a - b).max()) for a, b in zip(v.step_logits, f.step_logits)))
    return same and worst <= 1e-6, f"{n_models} models x {steps} tokens, max logit diff {worst:.1e}"


def check_alpha():
    cfg = probe_config(n_layers=1)
    spec = ProbeSpec(video_score=1.5, audio_score=0.7)
    model = probe_model(spec, cfg)
    inp = probe_input(model, 3, 5, 2)
    got = estimate_alpha(model, inp)
    want = probe_alpha(cfg, spec, inp.layout)
    err = max(abs(got.alpha_a - want[0]), abs(got.alpha_v - want[1]), abs(got.alpha - want[2]))
    uni = probe_model(ProbeSpec(), cfg)
    half = estimate_alpha(uni, probe_input(uni, 4, 4, 3)).alpha
    in_range = True
    for s in range(1000):
        m = Decoder.random(ModelConfig(n_layers=2, n_heads=2, d_model=8, d_ff=8, vocab_size=16), 5000 + s)
        r = Rng(s)
        mm, nn, ll = (int(x) for x in r.integers(4, 3) + 1)
        w = estimate_alpha(m, random_input(m, s, mm, nn, ll))
        in_range = in_range and all(0.0 <= x <= 1.0 for x in (w.alpha_a, w.alpha_v, w.alpha))
    return err <= 1e-9 and half == 0.5 and in_range, f"closed-form diff {err:.1e}, uniform alpha {half}"


def check_cost(wall: bool = True):
    model = Decoder.random(ModelConfig(n_layers=28, n_heads=1, d_model=8, d_ff=8, vocab_size=16), 17)
    inp = random_input(model, 18, 2, 2, 2)
    van = decode_vanilla(model, inp, 4)
    fmd = decode_fmd(model, inp, ForkConfig(l_fork=5), 4)
    vcd = decode_vcd_lite(model, inp, 1.0, 0, 4)
    ok = van.layers_per_token == 28 and fmd.layers_per_token == 33 and vcd.layers_per_token == 56
    ok = ok and analytic_layers_per_token("fmd", 28, 5) / analytic_layers_per_token("vanilla", 28) == 33 / 28
    detail = f"fmd/vanilla = {fmd.layers_per_token:.0f}/{van.layers_per_token:.0f}"
    if wall:
        toy = Decoder.random(ModelConfig(), 0)
        inputs = [random_fixture(i, ModalityLayout.token_wise(8, 8, 8), 64, 256).to_input(toy) for i in range(2)]
        recs = {r.strategy: r for r in bench_decoding(toy, inputs, ["vanilla", "fmd"], 16,
                                                       fork_cfg=ForkConfig(l_fork=2), repeats=3)}
        ratio = recs["fmd"].wall_seconds / recs["vanilla"].wall_seconds
        ok = ok and 1.0 <= ratio <= 2.0
        detail += f", wall ratio {ratio:.2f}"
    return ok, detail


def check_attention_mass():
    model = probe_model(VIDEO_SKEW)
    inp = probe_input(model, 4, 4, 4)
    lay, cfg = inp.layout, model.config
    van = final_layer_masses(decode_vanilla(model, inp, 0), lay, 2)
    fmd_cfg = ForkConfig(l_fork=1)
    fmd = final_layer_masses(decode_fmd(model, inp, fmd_cfg, 0), lay, 2)
    want_v = probe_masses(cfg, VIDEO_SKEW, lay, 1.0, 1.0)
    want_f = probe_masses(cfg, VIDEO_SKEW, lay, fmd_cfg.alpha, fmd_cfg.alpha)
    err = max(max(abs(a - b) for a, b in zip(van, want_v)), max(abs(a - b) for a, b in zip(fmd, want_f)))
    gap_v, gap_f = abs(van[0] - van[1]), abs(fmd[0] - fmd[1])
    sums = all(abs(sum(m) - 1) <= 1e-6 for m in (van, fmd))
    return sums and err <= 1e-6 and gap_f < gap_v, f"gap vanilla {gap_v:.4f} vs fmd {gap_f:.4f}"


def check_cosine():
    model = small_model(19)
    inp = random_input(model, 20)
    ident = hidden_cosine_probe(model, inp, "video", "identity")
    worst = 0.0
    for target in ("video", "audio"):
        for method in ("zero_out", "gaussian"):
            got = hidden_cosine_probe(model, inp, target, method, 1)
            u = final_hidden(model, inp)
            v = final_hidden(model, mask_modality(inp, target, method, 1))
            want = sum(a * b for a, b in zip(u, v)) / math.sqrt(sum(a * a for a in u) * sum(b * b for b in v))
            worst = max(worst, abs(got - want))
    ortho = cosine_similarity([1.0, 0.0], [0.0, 2.0])
    return abs(ident - 1) <= 1e-12 and worst <= 1e-9 and ortho == 0.0, f"identity {ident!r}, oracle diff {worst:.1e}"


CHECKS = [
    ("rng_golden_file", check_rng_golden),
    ("rng_normal_moments", check_rng_moments),
    ("matmul_loop_oracle", check_matmul),
    ("softmax_rows_normalized", check_softmax),
    ("rms_norm_scalar", check_rms_norm),
    ("attention_causality", check_causality),
    ("layer_range_composition", check_composition),
    ("cache_vs_recompute", check_cache_recompute),
    ("checkpoint_round_trip", check_checkpoint),
    ("input_assembly", check_assembly),
    ("masking_semantics", check_masking),
    ("merge_algebra", check_merge_algebra),
    ("reduction_to_vanilla", check_reduction),
    ("alpha_estimation", check_alpha),
    ("cost_accounting", check_cost),
    ("attention_mass_probe", check_attention_mass),
    ("cosine_probe", check_cosine),
]


def run_selftest(golden=None) -> list[tuple[str, bool, str, float]]:
    rows = []
    for name, fn in CHECKS:
        start = time.perf_counter()
        try:
            ok, detail = fn(golden) if fn is check_rng_golden else fn()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        rows.append((name, bool(ok), detail, time.perf_counter() - start))
    return rows
