import math

import numpy as np
import pytest

from forkmerge.analysis import (REFERENCE_SPEED, SWEEP_HEADER, DegenerateVectorError, MissingTraceError,
                                analytic_layers_per_token, attention_report, bench_decoding, cosine_similarity,
                                final_hidden, final_layer_masses, hidden_cosine_probe, layer_sweep,
                                modality_attention_mass, sweep_to_csv)
from forkmerge.decoder import AttentionTrace
from forkmerge.engine import ForkConfig, decode_fmd, decode_vanilla
from forkmerge.fusion import ModalityLayout, mask_modality, segment_masses
from forkmerge.scenarios import VIDEO_SKEW, planted_signal_tasks, probe_config, probe_input, probe_model

from conftest import make_input, make_model


def test_uniform_row_masses():
    lay = ModalityLayout.token_wise(3, 5, 2)
    rep = modality_attention_mass(AttentionTrace(9, {0: np.full(10, 0.1)}), lay)
    assert rep.final == pytest.approx((0.3, 0.5, 0.2), abs=1e-15)


def test_one_hot_row():
    lay = ModalityLayout.token_wise(3, 5, 2)
    rep = modality_attention_mass(AttentionTrace(9, {4: np.eye(10)[2]}), lay)
    assert rep.final == (1.0, 0.0, 0.0)
    assert rep.to_dict()["layers"][0] == {"layer": 4, "video_mass": 1.0, "audio_mass": 0.0, "text_mass": 0.0}


def test_per_head_variant():
    lay = ModalityLayout.token_wise(1, 1, 1)
    heads = np.array([[1.0, 0, 0], [0, 0.5, 0.5]])
    rep = modality_attention_mass(AttentionTrace(2, {0: heads.mean(0)}, {}, {0: heads}), lay, per_head=True)
    assert rep.final == pytest.approx((0.5, 0.25, 0.25))


def test_missing_trace():
    lay = ModalityLayout.token_wise(1, 1, 1)
    with pytest.raises(MissingTraceError):
        modality_attention_mass(AttentionTrace(), lay)
    with pytest.raises(MissingTraceError):
        modality_attention_mass(AttentionTrace(2, {0: np.ones(3) / 3}), lay, layers=[1])


def hand_masses(spec, M, N, L, scale_v=1.0, scale_a=1.0):
    wv = M * math.exp(spec.video_score * scale_v)
    wa = N * math.exp(spec.audio_score * scale_a)
    z = wv + wa + L
    return wv / z, wa / z, L / z


def test_probe_vanilla_masses_closed_form():
    m = probe_model(VIDEO_SKEW)
    for shape in [(4, 4, 4), (2, 6, 1), (5, 1, 3)]:
        x = probe_input(m, *shape)
        got = final_layer_masses(decode_vanilla(m, x, 0), x.layout, 2)
        assert got == pytest.approx(hand_masses(VIDEO_SKEW, *shape), abs=1e-9)


def test_probe_fmd_shrinks_gap():
    cfg = probe_config()
    m = probe_model(VIDEO_SKEW, cfg)
    x = probe_input(m, 4, 4, 4)
    van = final_layer_masses(decode_vanilla(m, x, 0), x.layout, 2)
    fmd = final_layer_masses(decode_fmd(m, x, ForkConfig(l_fork=1), 0), x.layout, 2)
    # merged rows carry alpha-scaled tags; under unit-gain RMS norm a lone
    # channel c becomes c / sqrt(c^2/d + eps), so scores scale by that ratio
    unit = lambda c: c / math.sqrt(c * c / cfg.d_model + cfg.norm_eps)
    r = unit(0.8) / unit(1.0)
    assert fmd == pytest.approx(hand_masses(VIDEO_SKEW, 4, 4, 4, r, r), abs=1e-9)
    assert abs(fmd[0] - fmd[1]) < abs(van[0] - van[1])
    assert abs(sum(fmd) - 1) <= 1e-12


def test_masses_always_sum_to_one(model):
    for s in range(5):
        x = make_input(model, s)
        for rep in attention_report(model, [x], ForkConfig(l_fork=2), [str(s)]):
            for v, a, t in rep.layers.values():
                assert abs(v + a + t - 1) <= 1e-6
                assert min(v, a, t) >= 0


def test_attention_report_labels(model, inp):
    labels = [r.label for r in attention_report(model, [inp], ForkConfig(l_fork=2))]
    assert labels == ["vanilla", "fmd:merged", "fmd:branch_v", "fmd:branch_a"]
    per = attention_report(model, [inp], ForkConfig(l_fork=2), per_head=True)
    assert len(per) == 4


def test_branch_reports_cover_fork_layers(model, inp):
    reps = {r.label: r for r in attention_report(model, [inp], ForkConfig(l_fork=2))}
    assert sorted(reps["fmd:branch_v"].layers) == [0, 1]
    assert sorted(reps["fmd:merged"].layers) == [2, 3]


def test_sweep_single_full_depth_candidate(model):
    xs = [make_input(model, s) for s in range(3)]
    n = model.config.n_layers
    rows = layer_sweep(model, xs, [n], ForkConfig())
    assert len(rows) == 1 and rows[0].samples == 3 and math.isnan(rows[0].metric)
    want = []
    for x in xs:
        r = decode_fmd(model, x, ForkConfig(l_fork=n), 1)
        bv = r.traces["branch_v"].last_rows[n - 1]
        ba = r.traces["branch_a"].last_rows[n - 1]
        want.append([(p + q) / 2 for p, q in zip(segment_masses(bv, x.layout), segment_masses(ba, x.layout))])
    mean = np.mean(want, axis=0)
    assert [rows[0].video_mass, rows[0].audio_mass, rows[0].text_mass] == pytest.approx(mean.tolist(), abs=1e-12)


def test_sweep_identity_endpoints_agree(model):
    xs = [make_input(model, s) for s in range(4)]
    targets = [decode_vanilla(model, x, 1).tokens[0] for x in xs]
    rows = layer_sweep(model, xs, [0, model.config.n_layers], ForkConfig(masking="identity"), targets)
    assert rows[0].metric == rows[1].metric == 1.0


def test_sweep_reproducible_csv(model):
    xs = [make_input(model, s) for s in range(5)]
    cands = [0, 1, 2, 3, 4]
    a = sweep_to_csv(layer_sweep(model, xs, cands, ForkConfig(), [1] * 5))
    b = sweep_to_csv(layer_sweep(model, xs, cands, ForkConfig(), [1] * 5))
    assert a == b
    lines = a.splitlines()
    assert lines[0] == ",".join(SWEEP_HEADER) == "l_fork,video_mass,audio_mass,text_mass,metric,samples"
    assert len(lines) == 6


def test_sweep_errors(model, inp):
    with pytest.raises(ValueError):
        layer_sweep(model, [inp], [model.config.n_layers + 1], ForkConfig())
    with pytest.raises(ValueError):
        layer_sweep(model, [inp], [0], ForkConfig(), targets=[1, 2])


def test_planted_sweep_metric():
    m = probe_model(VIDEO_SKEW)
    tasks = planted_signal_tasks(m, VIDEO_SKEW, 20, 0)
    rows = layer_sweep(m, [t.inp for t in tasks], [0, 1, 2], ForkConfig(), [t.target for t in tasks])
    van = sum(decode_vanilla(m, t.inp, 1).tokens[0] == t.target for t in tasks) / 20
    assert rows[-1].metric > van


def test_cosine_kernel():
    assert cosine_similarity([1, 0], [0, 3]) == 0.0
    assert cosine_similarity([1, 2], [2, 4]) == pytest.approx(1.0, abs=1e-15)
    assert cosine_similarity([1, 2], [-1, -2]) == pytest.approx(-1.0, abs=1e-15)
    with pytest.raises(DegenerateVectorError):
        cosine_similarity([0, 0], [1, 1])


def test_cosine_probe_identity(model, inp):
    assert hidden_cosine_probe(model, inp, "audio", "identity") == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("target", ["video", "audio"])
@pytest.mark.parametrize("method", ["zero_out", "gaussian"])
def test_cosine_probe_scalar_oracle(model, inp, target, method):
    u = [float(x) for x in final_hidden(model, inp)]
    v = [float(x) for x in final_hidden(model, mask_modality(inp, target, method, 2))]
    want = math.fsum(a * b for a, b in zip(u, v)) / math.sqrt(math.fsum(a * a for a in u) * math.fsum(b * b for b in v))
    assert hidden_cosine_probe(model, inp, target, method, 2) == pytest.approx(want, abs=1e-9)


def test_analytic_counts():
    assert analytic_layers_per_token("vanilla", 28) == 28
    assert analytic_layers_per_token("fmd", 28, 5) == 33
    assert analytic_layers_per_token("vcd", 28) == 56
    assert analytic_layers_per_token("fmd", 28, 5) / analytic_layers_per_token("vanilla", 28) == 33 / 28
    with pytest.raises(ValueError):
        analytic_layers_per_token("sid", 28)


def test_reference_table_ordering():
    assert REFERENCE_SPEED["vanilla"] < REFERENCE_SPEED["fmd"] <= REFERENCE_SPEED["dola"] < REFERENCE_SPEED["vcd"]


def test_bench_records():
    m = make_model(2, n_layers=8, n_heads=1, d_model=8, vocab=16)
    xs = [make_input(m, s, 2, 2, 2) for s in range(2)]
    recs = {r.strategy: r for r in bench_decoding(m, xs, ["vanilla", "fmd", "dola", "vcd"], 4,
                                                  fork_cfg=ForkConfig(l_fork=2), repeats=1)}
    for r in recs.values():
        assert r.tokens == 8
        assert r.tokens_per_second == pytest.approx(r.tokens / r.wall_seconds)
        assert r.layers_per_token == r.analytic_layers_per_token
    assert [recs[s].analytic_layers_per_token for s in ("vanilla", "fmd", "dola", "vcd")] == [8, 10, 8, 16]
    assert recs["vanilla"].layers_per_token < recs["fmd"].layers_per_token < recs["vcd"].layers_per_token


def test_bench_errors(model, inp):
    with pytest.raises(ValueError):
        bench_decoding(model, [], ["vanilla"], 1)
    with pytest.raises(ValueError):
        bench_decoding(model, [inp], ["beam"], 1)
