import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from natkit.analysis import (
    CostReport,
    cost_conv,
    cost_na,
    cost_self_attention,
    cost_window_attention,
    crossover_channels,
    model_stats,
)
from natkit.attention import na_forward
from natkit.errors import ConfigurationError, PaddingRequiredError
from natkit.model import PRESETS
from natkit.neighborhood import NeighborhoodSpec
from natkit.tensor import Rng


def test_self_attention_examples():
    r = cost_self_attention(1, 1, 1)
    assert (r.macs, r.memory_scalars) == (5, 4)
    assert cost_self_attention(14, 14, 64).macs == 7_325_696


def test_self_attention_quadratic_term():
    a = cost_self_attention(8, 8, 16).breakdown["macs"]["attention"]
    b = cost_self_attention(16, 8, 16).breakdown["macs"]["attention"]
    assert b == 4 * a


def test_window_attention_examples():
    assert cost_window_attention(56, 56, 64, 7).breakdown["macs"]["attention"] == 19_668_992
    with pytest.raises(PaddingRequiredError):
        cost_window_attention(10, 10, 8, 7)
    with pytest.raises(ConfigurationError):
        cost_window_attention(10, 10, 8, 7)


@pytest.mark.parametrize("n,C", [(3, 5), (5, 64), (7, 1)])
def test_single_window_is_self_attention(n, C):
    w, s = cost_window_attention(n, n, C, n), cost_self_attention(n, n, C)
    assert (w.macs, w.memory_scalars) == (s.macs, s.memory_scalars)


def test_na_examples():
    assert cost_na(56, 56, 64, 7).breakdown["macs"]["attention"] == 19_668_992
    small = cost_na(3, 3, 16, 7)
    sa = cost_self_attention(3, 3, 16)
    assert small.breakdown["memory_scalars"]["weights"] == 81 == sa.breakdown["memory_scalars"]["weights"]
    assert small.macs == sa.macs


def test_na_rejects_even_kernel():
    with pytest.raises(ConfigurationError):
        cost_na(8, 8, 4, 4)


def test_na_linear_in_pixels():
    a, b = cost_na(14, 14, 32, 7), cost_na(28, 14, 32, 7)
    assert b.macs == 2 * a.macs and b.memory_scalars == 2 * a.memory_scalars


def test_conv_examples():
    assert cost_conv(1, 1, 1, 1).macs == 1
    assert cost_conv(56, 56, 64, 3).macs == 115_605_504
    assert cost_conv(9, 9, 4, 3).memory_scalars == cost_conv(9, 9, 4, 7).memory_scalars == 324


@given(st.sampled_from([3, 5, 7, 9]), st.integers(1, 8), st.integers(1, 8), st.integers(1, 1024))
def test_na_window_parity(L, a, b, C):
    H, W = a * L, b * L
    na, win = cost_na(H, W, C, L), cost_window_attention(H, W, C, L)
    assert (na.macs, na.memory_scalars) == (win.macs, win.memory_scalars)


@given(st.integers(1, 40), st.integers(1, 40), st.integers(1, 256), st.sampled_from([3, 5, 7, 9, 11]))
def test_totals_equal_breakdown(H, W, C, L):
    for r in (cost_na(H, W, C, L), cost_self_attention(H, W, C), cost_conv(H, W, C, L)):
        assert r.macs == sum(r.breakdown["macs"].values())
        assert r.memory_scalars == sum(r.breakdown["memory_scalars"].values())


def test_crossover_values():
    # smallest C with C(L^2 - 3) > 2 L^2, solved by hand
    assert [crossover_channels(L) for L in (3, 5, 7, 9, 11)] == [4, 3, 3, 3, 3]


@pytest.mark.parametrize("L", [3, 5, 7, 9])
def test_crossover_agrees_with_direct_costs(L):
    # the map must be at least L wide, otherwise the window is clamped
    n = max(8, L)
    c_star = crossover_channels(L)
    for C in range(1, 65):
        assert (cost_na(n, n, C, L).macs < cost_conv(n, n, C, L).macs) == (C >= c_star)


def test_memory_term_matches_buffer_size():
    rng = Rng(3)
    for H, W, L in [(5, 9, 3), (2, 11, 5), (13, 4, 7), (1, 1, 3)]:
        q = rng.normal((H, W, 1, 4))
        _, probs = na_forward(q, q, q, np.zeros((1, 2 * L - 1, 2 * L - 1)), NeighborhoodSpec(L), return_weights=True)
        assert probs.size == cost_na(H, W, 4, L).breakdown["memory_scalars"]["weights"]


def test_report_json_shape():
    d = json.loads(cost_na(8, 8, 4, 3).to_json())
    assert set(d) == {"macs", "memory_scalars", "breakdown"}
    assert isinstance(d["macs"], int) and isinstance(d["memory_scalars"], int)


def test_from_terms_keeps_estimates_out_of_totals():
    r = CostReport.from_terms({"a": 2, "b": 3}, {"m": 4}, {"softmax": 100})
    assert (r.macs, r.memory_scalars) == (5, 4)
    assert r.breakdown["estimates"] == {"softmax": 100}


def test_desk_model_macs_by_hand():
    # 32x32 input: tokenizer convs, one block per level (C, h, hidden = 2C, Lw^2 = min(3,h)^2),
    # three downsamplers, final norm affine and head.
    tokenizer = 16 * 16 * 27 * 8 + 8 * 8 * 72 * 16

    def block(n, C, nb):
        return 3 * n * C * C + 2 * n * C * nb + n * C * C + 2 * n * C * 2 * C + 2 * n * C

    levels = block(64, 16, 9) + block(16, 32, 9) + block(4, 64, 4) + block(1, 128, 1)
    down = 16 * 9 * 16 * 32 + 4 * 9 * 32 * 64 + 1 * 9 * 64 * 128
    total = tokenizer + levels + down + 128 + 128 * 10
    assert total == 909_696
    stats = model_stats(PRESETS["desk"], 32)
    assert stats.macs == total and stats.params == 277_400


def test_model_stats_breakdown_sums():
    r = model_stats(PRESETS["tiny"]).cost
    assert r.macs == sum(r.breakdown["macs"].values())
    assert "estimates" in r.breakdown


@pytest.mark.parametrize(
    "name,params_m,gmacs",
    [("mini", 20, 2.7), ("tiny", 28, 4.3), ("small", 51, 7.8), ("base", 90, 13.7)],
)
def test_published_model_sizes(name, params_m, gmacs):
    s = model_stats(PRESETS[name], 224)
    assert abs(s.params / 1e6 - params_m) / params_m <= 0.05
    assert abs(s.macs / 1e9 - gmacs) / gmacs <= 0.10


def test_model_stats_resolution_check():
    with pytest.raises(ConfigurationError):
        model_stats(PRESETS["desk"], 48)


def test_model_stats_non_square():
    a = model_stats(PRESETS["desk"], 64, 32)
    b = model_stats(PRESETS["desk"], 32, 64)
    assert a.macs == b.macs
