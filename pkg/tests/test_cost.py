import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mitune.cost import (activation_floats, attn_map_elements, conditioning_overhead_flops, forward_flops,
                         layer_flops, loglog_slope, measure_peak_activation, mit_overhead,
                         paper_scale_estimate, sweep, write_csv)
from mitune.infusion import MiTConfig
from mitune.transformer import LMConfig

TOY = LMConfig()
LENGTHS = [32, 64, 128, 256, 512]


def test_attn_map_examples():
    assert attn_map_elements(TOY, 64, "prefix", 64) == 524_288
    assert attn_map_elements(TOY, 64, "base") == 131_072
    assert attn_map_elements(TOY, 64, "prefix", 0) == attn_map_elements(TOY, 64, "base")
    assert attn_map_elements(TOY, 64, "mit") == attn_map_elements(TOY, 64, "base")
    with pytest.raises(ValueError):
        attn_map_elements(TOY, 0)
    with pytest.raises(ValueError):
        attn_map_elements(TOY, 4, "prefix", -1)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 64), st.integers(1, 16), st.integers(1, 4096), st.integers(0, 4096))
def test_attn_map_invariants(layers, heads, L, P):
    cfg = LMConfig(n_layers=layers, d_model=heads, n_heads=heads)
    base = attn_map_elements(cfg, L, "base")
    assert attn_map_elements(cfg, L, "mit") == base
    assert attn_map_elements(cfg, L, "prefix", P) - base == layers * heads * (2 * L * P + P * P)


def test_mit_overhead_slope_and_exact_doubling():
    mit = MiTConfig()
    dep = [mit_overhead(TOY, mit, L).token_dependent for L in LENGTHS]
    assert abs(loglog_slope(LENGTHS, dep) - 1.0) <= 0.05
    for L in LENGTHS:
        assert mit_overhead(TOY, mit, 2 * L).token_dependent == 2 * mit_overhead(TOY, mit, L).token_dependent
        assert mit_overhead(TOY, mit, L).token_independent == mit_overhead(TOY, mit, 1).token_independent


def test_prefix_attention_slope():
    growth = [attn_map_elements(TOY, L, "prefix", L) for L in LENGTHS]
    assert abs(loglog_slope(LENGTHS, growth) - 2.0) <= 0.05


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 1000), st.booleans(), st.booleans(), st.booleans())
def test_mit_overhead_linear_in_L(L, kv, ff, rs):
    mit = MiTConfig(enable_kv=kv, enable_ff=ff, enable_rescale=rs)
    o1, oL = mit_overhead(TOY, mit, 1), mit_overhead(TOY, mit, L)
    assert oL.token_dependent == L * o1.token_dependent


def test_overhead_modes():
    assert conditioning_overhead_flops(TOY, 64, "base").total == 0
    pre = conditioning_overhead_flops(TOY, 64, "prefix", P=16)
    assert pre.token_dependent == forward_flops(TOY, 80) - forward_flops(TOY, 64)
    mit = conditioning_overhead_flops(TOY, 64, "mit")
    # one 2*d_I*d_ff projection per site is present in the token-independent part
    assert mit.token_independent >= 3 * 2 * 32 * TOY.d_ff


@pytest.mark.parametrize("mode,P", [("base", 0), ("mit", 0), ("prefix", 16), ("prefix", 0)])
@pytest.mark.parametrize("L", [1, 7, 32])
def test_measured_activations_match_analytic(mode, P, L):
    cfg = LMConfig(max_seq=64)
    m = measure_peak_activation(cfg, L, mode, MiTConfig(), P, trials=2)
    a = activation_floats(cfg, L, mode, MiTConfig(), P)
    assert m.total == a["total"]
    assert m.attn_map == a["attn_map"]
    assert m.trials[0] == m.trials[1]


@pytest.mark.parametrize("flags", [dict(enable_kv=False), dict(enable_ff=False), dict(enable_rescale=False),
                                   dict(enable_kv=False, enable_rescale=True, enable_ff=False)])
def test_measured_activations_ablated_variants(flags):
    mit = MiTConfig(**flags)
    m = measure_peak_activation(TOY, 20, "mit", mit, trials=1)
    assert m.total == activation_floats(TOY, 20, "mit", mit)["total"]


def test_analytic_counter_rejects_pooled_rescale():
    with pytest.raises(ValueError, match="per_token"):
        activation_floats(TOY, 8, "mit", MiTConfig(rescale_pooling="mean_over_tokens"))


def test_instrumented_attention_at_128():
    cfg = LMConfig(max_seq=256)
    base = measure_peak_activation(cfg, 128, "base", trials=1).attn_map
    assert measure_peak_activation(cfg, 128, "mit", trials=3).attn_map == base
    assert measure_peak_activation(cfg, 128, "prefix", P=128, trials=1).attn_map == 4 * base


def test_paper_estimate():
    r = paper_scale_estimate()
    assert r["published_tflops"] == 0.47 and "convention" in r
    assert r["mit_tflops"] > r["base_tflops"]
    cfg = LMConfig.paper()
    half = LMConfig(**{**cfg.__dict__, "n_layers": 16})
    assert abs(r["layer_sum_tflops"] - 2 * paper_scale_estimate(cfg=half)["layer_sum_tflops"]) < 1e-12
    assert r["layer_sum_tflops"] * 1e12 == 32 * layer_flops(cfg, 32)


def test_layer_flops_matches_matmul_enumeration():
    cfg = LMConfig(n_layers=1, d_model=8, n_heads=2, d_ff=12)
    n, d, f, h = 5, 8, 12, 2
    dh = d // h
    matmuls = [(n, d, d)] * 4 + [(n, d, f)] * 2 + [(n, f, d)] + [(n, dh, n)] * h + [(n, n, dh)] * h
    mm = sum(2 * a * b * c for a, b, c in matmuls)
    elementwise = 2 * 4 * n * d + h * n * n * 6 + 2 * n * f + 2 * n * d
    assert layer_flops(cfg, n) == mm + elementwise


def test_sweep_rows_and_csv(tmp_path):
    rows = sweep(TOY, [32, 64], measure=True)
    assert [r["mode"] for r in rows] == ["base", "mit", "prefix"] * 2
    assert rows[2]["P"] == 32 and rows[2]["attn_elems"] == 4 * rows[0]["attn_elems"]
    write_csv(rows, tmp_path / "cost.csv")
    head = (tmp_path / "cost.csv").read_text().splitlines()[0]
    assert head == "mode,L_tok,P,attn_elems,overhead_flops,peak_floats"


def test_activation_linear_vs_quadratic_parts():
    mit = MiTConfig()
    inf = [activation_floats(TOY, L, "mit", mit)["infusion"] for L in LENGTHS]
    assert np.allclose(np.diff(inf) / np.diff(LENGTHS), (inf[1] - inf[0]) / 32)
