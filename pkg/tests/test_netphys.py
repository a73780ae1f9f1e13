from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tilp.core import RngStream, SystemAction, desk_config
from tilp.fsl import build_geometry
from tilp.netphys import (ChannelState, cp_delay, memory_ok, path_gain, rate, round_latency, round_physics,
                          step_fading, straggler_latency, terminal_energy, tx_delay)

N0 = 3.981e-21
pos = st.floats(1e-3, 1e3, allow_nan=False)


def test_rate_zero_cases():
    assert rate(1e6, 0.0, 1e-10, 1.0, N0) == 0.0
    assert rate(0.0, 0.1, 1e-10, 1.0, N0) == 0.0


def test_rate_reference_value():
    # 1e6 * log2(1 + 1e-11 / 3.981e-15) evaluated by hand
    assert rate(1e6, 0.1, 1e-10, 1.0, N0) == pytest.approx(1.130e7, rel=1e-3)


def test_tx_delay_cases():
    assert tx_delay(32, 1024, 1.0, 0.0) == 0.0
    assert tx_delay(32, 1024, 1.0, 1e6) == 0.0
    assert tx_delay(32, 1024, 0.5, 0.0) == math.inf
    assert tx_delay(32, 1024, 0.5, 1e6) == pytest.approx(0.016384, abs=1e-15)


def test_cp_delay_cases():
    assert cp_delay(0, 1e6, 4.0, 1.5e9) == 0.0
    assert cp_delay(32, 1e6, 4.0, 1.5e9) == pytest.approx(3.2e7 / 6e9, rel=1e-15)
    assert cp_delay(32, 1e6, 4.0, 3e9) == pytest.approx(cp_delay(32, 1e6, 4.0, 1.5e9) / 2, rel=1e-15)


def test_round_latency_cases():
    assert round_latency([(1.0, 0.5)]) == 2.0
    assert round_latency([(1.0, 0.5), (0.1, 2.0)]) == pytest.approx(4.1)
    assert round_latency([(1.0, 0.5), (0.1, math.inf)]) == math.inf
    with pytest.raises(ValueError):
        round_latency([])


def test_straggler_ignores_unscheduled():
    cp = np.array([1.0, 9.0, 0.1])
    tx = np.array([0.5, 9.0, 2.0])
    assert straggler_latency(cp, tx, [True, False, True]) == pytest.approx(4.1)
    with pytest.raises(ValueError):
        straggler_latency(cp, tx, [False, False, False])


def test_energy_cases():
    assert terminal_energy(0.0, 1.5e9, 32, 1e6, 0.0, 0.3) == 0.0
    assert terminal_energy(1e-27, 1.5e9, 32, 1e6, 0.1, 0.02) == pytest.approx(0.074, rel=1e-12)
    e1 = terminal_energy(1e-27, 1.5e9, 32, 1e6, 0.1, 0.02)
    e2 = terminal_energy(1e-27, 1.5e9, 32, 1e6, 0.2, 0.02)
    assert e2 - e1 == pytest.approx(0.1 * 0.02, rel=1e-9)
    assert terminal_energy(1e-27, 1.5e9, 32, 1e6, 0.1, math.inf) == math.inf


def test_memory_boundary():
    geom = build_geometry()
    m = float(geom.mem(2))
    assert memory_ok(geom, 2, m) == (True, 0.0)
    assert memory_ok(geom, 2, m - 1) == (False, 1.0)


def test_memory_deepest_split_on_smallest_desk_budget():
    geom = build_geometry()
    budget = min(desk_config().memory_budgets())
    # (params + 8 * cache) * 4 * 2.5e4 with params = 544+1056+792+600+400, cache = 32+32+24+24+16
    need = (544 + 1056 + 792 + 600 + 400 + 8 * 128) * 4 * 2.5e4
    assert memory_ok(geom, 5, budget) == (False, pytest.approx(need - budget))


def test_path_gain_reference():
    assert path_gain(100.0) == pytest.approx(1e-10, rel=1e-12)
    assert path_gain(10.0) > path_gain(200.0)


# fading ------------------------------------------------------------------------


def test_fading_corr_one_is_frozen():
    ch = ChannelState.initial(6, 1.0, RngStream(1))
    nxt = step_fading(ch, RngStream(2))
    assert np.array_equal(nxt.fading, ch.fading)


def test_fading_corr_zero_forgets():
    ch = ChannelState.initial(4, 0.0, RngStream(1))
    other = ChannelState.from_fading(ch.fading * 50.0, 0.0)
    a, b = step_fading(ch, RngStream(3)), step_fading(other, RngStream(3))
    assert np.array_equal(a.fading, b.fading)


def test_fading_power_matches_coefficient():
    ch = step_fading(ChannelState.initial(5, 0.9, RngStream(4)), RngStream(5))
    assert np.allclose(ch.fading_power, np.abs(ch.fading) ** 2, rtol=0, atol=0)


def test_fading_stationary_second_moment():
    rng = RngStream(12)
    ch = ChannelState.initial(10, 0.9, rng)
    acc = np.zeros(10)
    steps = 10_000
    for _ in range(steps):
        ch = step_fading(ch, rng)
        acc += ch.fading_power
    # 1e5 samples pooled across 10 terminals
    assert abs(acc.mean() / steps - 1.0) < 0.02


def test_fading_rejects_bad_corr():
    with pytest.raises(ValueError):
        step_fading(ChannelState.from_fading([1.0], 1.5), RngStream(0))


# properties --------------------------------------------------------------------


@settings(max_examples=200, deadline=None)
@given(b=st.floats(1e3, 1e8), p=st.floats(1e-4, 1.0), gh=st.floats(1e-14, 1e-8), k=st.floats(1.0, 10.0))
def test_rate_monotone_in_power_and_fading(b, p, gh, k):
    assert rate(b, p * k, gh, 1.0, N0) >= rate(b, p, gh, 1.0, N0)
    assert rate(b, p, gh, k, N0) >= rate(b, p, gh, 1.0, N0)


@settings(max_examples=200, deadline=None)
@given(b=st.floats(1e3, 1e8), p=st.floats(1e-4, 1.0), gh=st.floats(1e-14, 1e-8), k=st.floats(1.0, 10.0))
def test_spectral_efficiency_nonincreasing_in_bandwidth(b, p, gh, k):
    assert rate(b * k, p, gh, 1.0, N0) / (b * k) <= rate(b, p, gh, 1.0, N0) / b * (1 + 1e-12)


@settings(max_examples=200, deadline=None)
@given(cp=st.lists(st.floats(0, 10), min_size=1, max_size=8), data=st.data())
def test_round_latency_matches_brute_max(cp, data):
    tx = data.draw(st.lists(st.floats(0, 10), min_size=len(cp), max_size=len(cp)))
    best = -1.0
    for c, t in zip(cp, tx):
        best = c + 2 * t if c + 2 * t > best else best
    assert round_latency(list(zip(cp, tx))) == best


@settings(max_examples=200, deadline=None)
@given(batch=st.integers(1, 64), bits=pos, q=st.floats(0, 0.99), r=pos)
def test_tx_delay_linear_in_retained_share_and_batch(batch, bits, q, r):
    base = tx_delay(batch, bits, q, r)
    assert tx_delay(2 * batch, bits, q, r) == pytest.approx(2 * base, rel=1e-12)
    assert tx_delay(batch, bits, 0.0, r) * (1 - q) == pytest.approx(base, rel=1e-12)


@settings(max_examples=200, deadline=None)
@given(kappa=st.floats(1e-30, 1e-24), g=st.floats(1e8, 3e9), batch=st.integers(1, 64), macs=pos,
       p=st.floats(0, 1), tx=st.floats(0, 10))
def test_energy_decomposes(kappa, g, batch, macs, p, tx):
    comp = terminal_energy(kappa, g, batch, macs, 0.0, tx)
    assert comp == terminal_energy(kappa, g, batch, macs, 0.0, 2 * tx + 1)
    assert terminal_energy(kappa, g, batch, macs, p, tx) - comp == pytest.approx(p * tx, rel=1e-9, abs=1e-18)


def test_round_physics_unscheduled_are_zero(terms):
    geom = build_geometry()
    cfg = desk_config(n_terminals=4)
    a = SystemAction([2e7, 0, 2e7, 2e7], [0.1, 0, 0.1, 0.1], [1, 2, 2, 1], [0.5] * 4, [True, False, True, True])
    r, cp, tx, lat, e = round_physics(a.arrays(), terms, geom, np.ones(4), cfg.noise_psd_w_per_hz)
    assert r[1] == 0 and cp[1] == 0 and tx[1] == 0 and e[1] == 0
    assert lat == pytest.approx(max(cp[i] + 2 * tx[i] for i in (0, 2, 3)))
