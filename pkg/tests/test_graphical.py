import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conserva.graphical import (
    ArrowStream, evolve_with_arrows, influence_set, overlap_bound, overlap_probability,
    sample_arrows,
)
from conserva.model import make_preset
from conserva.sim import Configuration, EnvelopeViolation

from oracles import brute_force_influence


def _stream(N, events, T=1.0, K1=1.0, marks=None):
    events = sorted(events)
    t = np.array([e[0] for e in events], dtype=float)
    a = np.array([e[1] for e in events], dtype=np.int64)
    b = np.array([e[2] for e in events], dtype=np.int64)
    m = np.zeros(len(events)) if marks is None else np.asarray(marks, float)
    return ArrowStream(N, K1, T, t, a, b, m)


def test_zero_horizon_has_no_arrows():
    arrows = sample_arrows(5, 1.0, 0.0, 1)
    assert len(arrows) == 0
    inf = influence_set(arrows, 2, 0.0)
    assert inf.members == frozenset({2})


def test_streams_are_off_diagonal_and_sorted():
    arrows = sample_arrows(6, 3.0, 4.0, 2)
    assert np.all(arrows.src != arrows.dst)
    assert np.all(np.diff(arrows.times) >= 0)
    assert np.all((arrows.marks >= 0) & (arrows.marks < 1))
    assert arrows.pairs() <= {(x, y) for x in range(6) for y in range(6) if x != y}


def test_two_positions_have_two_streams():
    arrows = sample_arrows(2, 5.0, 10.0, 3)
    assert arrows.pairs() == {(0, 1), (1, 0)}


def test_arrow_count_mean():
    N, K1, T = 10, 2.0, 3.0
    counts = [len(sample_arrows(N, K1, T, s)) for s in range(400)]
    expect = (N - 1) * K1 * T  # N(N-1) pairs at rate K1/N
    se = math.sqrt(expect / 400)
    assert abs(np.mean(counts) - expect) < 5 * se


def test_per_pair_rate():
    N, K1, T = 4, 2.0, 2000.0
    arrows = sample_arrows(N, K1, T, 4)
    times, _ = arrows.pair(1, 3)
    expect = K1 * T / N
    assert abs(times.size - expect) < 5 * math.sqrt(expect)


def test_influence_chain_example():
    # 3 -> 2 at 0.1, 2 -> 1 at 0.2, 1 -> 0 at 0.3: 3 reaches 0 in three hops
    arrows = _stream(5, [(0.1, 3, 2), (0.2, 2, 1), (0.3, 1, 0)])
    inf = influence_set(arrows, 0, 1.0)
    assert [set(layer) for layer in inf.layers] == [{0}, {1}, {2}, {3}]
    assert 4 not in inf


def test_influence_needs_increasing_times():
    arrows = _stream(4, [(0.3, 2, 1), (0.2, 1, 0)])
    inf = influence_set(arrows, 0, 1.0)
    assert inf.members == frozenset({0, 1})


def test_influence_respects_horizon():
    arrows = _stream(4, [(0.1, 2, 1), (0.6, 1, 0)])
    assert influence_set(arrows, 0, 0.5).members == frozenset({0})
    assert influence_set(arrows, 0, 1.0).members == frozenset({0, 1, 2})


def test_shortest_layer_wins():
    arrows = _stream(4, [(0.1, 3, 2), (0.2, 2, 0), (0.5, 3, 0)])
    inf = influence_set(arrows, 0, 1.0)
    assert inf.layers[1] == frozenset({2, 3})


events_strategy = st.lists(
    st.tuples(st.floats(0.0, 1.0, allow_nan=False), st.integers(0, 4), st.integers(0, 4))
    .filter(lambda e: e[1] != e[2]),
    max_size=6, unique_by=lambda e: e[0],
)


@settings(max_examples=150, deadline=None)
@given(events=events_strategy, x=st.integers(0, 4), t=st.floats(0.0, 1.0))
def test_influence_matches_exhaustive_search(events, x, t):
    arrows = _stream(5, events)
    inf = influence_set(arrows, x, t)
    best = brute_force_influence(events, x, t)
    got = {site: d for d, layer in enumerate(inf.layers) for site in layer}
    assert got == best


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32), x=st.integers(0, 7))
def test_influence_grows_with_time(seed, x):
    arrows = sample_arrows(8, 1.0, 2.0, seed)
    prev = frozenset()
    for t in (0.0, 0.5, 1.0, 1.5, 2.0):
        cur = influence_set(arrows, x, t).members
        assert prev <= cur
        prev = cur


def test_overlap_zero_horizon():
    est = overlap_probability(20, 1.0, 0.0, 0, 10, 50, 1)
    assert est.hits == 0


def test_overlap_below_bound_and_ci():
    est = overlap_probability(50, 1.0, 0.5, 0, 25, 2000, 5)
    lo, hi = est.ci
    assert lo <= est.estimate <= hi
    assert est.estimate <= est.bound
    assert est.row()["c3_bound"] == pytest.approx((2 * math.e**2 + math.e**4) / 50)


def test_overlap_bound_formula():
    assert overlap_bound(1.0, 0.5, 100) == pytest.approx((2 * math.exp(2) + math.exp(4)) / 100)


def test_overlap_rejects_same_position():
    with pytest.raises(ValueError):
        overlap_probability(10, 1.0, 0.5, 3, 3, 10, 0)


def test_evolve_with_arrows_moves_on_accepted_marks():
    pol = make_preset("exclusion", kernel=1.0)
    arrows = _stream(3, [(0.1, 0, 1), (0.2, 1, 2), (0.3, 2, 0)], marks=[0.5, 0.99, 0.2], K1=1.05)
    traj = evolve_with_arrows(Configuration([1, 0, 0]), arrows, pol, [0.15, 1.0])
    assert traj.snapshots[0].tolist() == [0, 1, 0]
    # 0.99 > 1/1.05 rejects the second arrow; the third sees an empty source
    assert traj.snapshots[1].tolist() == [0, 1, 0]
    assert traj.accepted_count == 1


def test_evolve_with_arrows_conserves():
    pol = make_preset("generalized_exclusion", capacity=2, kernel=1.0)
    arrows = sample_arrows(12, 1.05, 3.0, 8)
    eta = Configuration([2, 0, 1, 1, 0, 2, 2, 0, 0, 1, 1, 0])
    traj = evolve_with_arrows(eta, arrows, pol, [1.0, 3.0])
    assert np.all(traj.snapshots.sum(axis=1) == eta.total)
    assert traj.snapshots.max() <= 2


def test_evolve_with_arrows_checks_envelope():
    pol = make_preset("exclusion", kernel=2.0)
    arrows = _stream(2, [(0.1, 0, 1)], K1=1.0)
    with pytest.raises(EnvelopeViolation):
        evolve_with_arrows(Configuration([1, 0]), arrows, pol)


def test_empty_stream_gives_constant_trajectory():
    pol = make_preset("exclusion", kernel=1.0)
    traj = evolve_with_arrows(Configuration([1, 0, 1]), _stream(3, []), pol, [0.0, 0.5, 1.0])
    assert np.all(traj.snapshots == [1, 0, 1])


def test_unit_marks_reject_everything():
    pol = make_preset("exclusion", kernel=1.0)
    arrows = sample_arrows(6, 1.05, 5.0, 13)
    arrows = ArrowStream(arrows.N, arrows.K1, arrows.T, arrows.times, arrows.src, arrows.dst,
                         np.ones(len(arrows)))
    traj = evolve_with_arrows(Configuration([1, 0, 1, 0, 1, 0]), arrows, pol)
    assert traj.accepted_count == 0


def test_single_arrow_influence():
    arrows = _stream(4, [(0.3, 2, 0)])
    inf = influence_set(arrows, 0, 0.5)
    assert inf.members == frozenset({0, 2})
    assert inf.layers[1] == frozenset({2})
    assert influence_set(_stream(4, []), 1, 0.5).layers == (frozenset({1}),)


def test_handcrafted_three_site_stream():
    events = [(0.1, 1, 2), (0.2, 0, 1), (0.35, 2, 1), (0.5, 1, 0), (0.8, 2, 0)]
    arrows = _stream(3, events)
    for x in range(3):
        for t in (0.15, 0.3, 0.6, 1.0):
            inf = influence_set(arrows, x, t)
            got = {site: d for d, layer in enumerate(inf.layers) for site in layer}
            assert got == brute_force_influence(events, x, t)
