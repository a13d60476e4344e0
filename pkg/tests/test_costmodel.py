from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynts.costmodel import (
    CostParams,
    analytic_lengths,
    attn_flops,
    break_even_K,
    eviction_count,
    gain,
    predictor_flops,
    series,
    simulate_stream,
)


def test_predictor_flops_examples():
    assert predictor_flops(64) == 24640
    assert predictor_flops(4096) == 100667392
    d = 96
    assert predictor_flops(d) == 2 * (d * 2 * d + 2 * d * d // 2 + d // 2) == 6 * d * d + d


def test_attn_flops_examples():
    assert attn_flops(4, 64, 100) == 102400
    assert attn_flops(4, 64, 0) == 0
    assert attn_flops(3, 32, 50) * 2 == attn_flops(3, 32, 100)


def test_eviction_count_examples():
    assert eviction_count(100, 19, 120, 20) == 0
    assert eviction_count(100, 20, 120, 20) == 1  # boundary: reaching B triggers
    assert eviction_count(100, 50, 120, 20) == 2
    assert 100 + 50 - 20 * eviction_count(100, 50, 120, 20) == 110


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10), st.integers(2, 30), st.floats(0, 0.9), st.integers(1, 200))
def test_eviction_count_matches_simulation(M, extra, r, n):
    B = M + 3 + extra
    pol, pre, post = simulate_stream(M, B, 3, r, n, seed=n)
    assert len(pol.events) == eviction_count(M, n, B, pol.k_evict)
    assert (pre, post) == analytic_lengths(M, B, pol.k_evict, n)


def test_gain_examples():
    assert gain(0, CostParams(4, 64, 0, 1, 32), n=1) == 32768 - 24640 == 8128
    assert gain(0, CostParams(4, 64, 0, 1, 20), n=1) == 20480 - 24640 == -4160
    assert gain(0, CostParams(4, 64, 0, 1, 20), n=0) == -(6 * 64 * 64 + 64)


def test_break_even_examples():
    be = break_even_K(64, 4, 1)
    assert be.bound == Fraction(24640, 1024)
    assert be.K == 25
    p = lambda K: CostParams(4, 64, 0, 1, K)
    assert gain(0, p(25), n=1) > 0 > gain(0, p(24), n=1)
    assert break_even_K(4096, 32, 1).approx == 192.0
    d, L = 128, 6
    assert break_even_K(d, L).bound == Fraction(3 * d, 2 * L) + Fraction(1, 4 * L)


def test_break_even_bound_is_never_an_integer():
    # (6d^2 + d) / (4Ldn) = (6d + 1) / (4Ln): odd over even, so gain never hits zero
    for d in range(2, 200, 2):
        for L in range(1, 9):
            for n in range(1, 5):
                be = break_even_K(d, L, n)
                assert be.bound.denominator != 1
                assert gain(0, CostParams(L, d, 0, 1, be.K), n=n) > 0
                if be.K > 1:
                    assert gain(0, CostParams(L, d, 0, 1, be.K - 1), n=n) < 0


def test_series_without_evictions():
    pre = [3 + i for i in range(1, 11)]
    s = series(pre, pre, 3, 2, 16, with_predictor=False)
    assert s.cum_opt == s.cum_base
    assert s.peak_memory_ratio == 1.0
    assert s.first_eviction_step is None


def test_series_hand_case():
    M, B, K = 100, 120, 20
    pre, post = analytic_lengths(M, B, K, 100)
    s = series(pre, post, M, 4, 64)
    assert max(pre) == 120 and min(post[20:]) == 100
    assert s.first_eviction_step == 20
    assert s.peak_memory_ratio == pytest.approx(0.6)
    assert s.evictions[-1] == eviction_count(M, 100, B, K) == 5
    # the dual-window cache needs W_l >= 1, so simulate with W_l = 5 (K = 15)
    pol, pre, post = simulate_stream(M, B, 5, 0.0, 100)
    assert pol.k_evict == 15 and max(pre) == 120 and min(post[20:]) == 105
    assert series(pre, post, M, 4, 64).peak_memory_ratio == pytest.approx(0.6)


def test_cumulative_flops_below_baseline_after_first_eviction():
    L, d = 12, 128
    pol, pre, post = simulate_stream(2, 100, 20, 0.3, 398, seed=3)
    assert pol.k_evict >= break_even_K(d, L).K
    s = series(pre, post, 2, L, d)
    assert np.all(s.flops_ratio(s.first_eviction_step + 1) < 1.0)
    assert s.crossover_step() is not None


def test_series_rejects_inconsistent_lengths():
    with pytest.raises(ValueError):
        series([5, 4], [5, 5], 3, 1, 4)
    with pytest.raises(ValueError):
        series([], [], 0, 1, 4)


def test_cost_params_validation():
    with pytest.raises(ValueError):
        CostParams(1, 4, 10, 10, 1)
    with pytest.raises(ValueError):
        eviction_count(0, 1, 5, 0)


def test_series_csv_columns():
    pol, pre, post = simulate_stream(2, 20, 3, 0.3, 40)
    text = series(pre, post, 2, 2, 16).to_csv()
    assert text.splitlines()[0] == "step,eff_len_base,eff_len_opt,cum_flops_base,cum_flops_opt,mem_ratio,gain"
    assert len(text.splitlines()) == 41
