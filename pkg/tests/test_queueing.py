import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sgsroute.learner import AggregateLogCost, evaluate
from sgsroute.policy import JSQ, action_source
from sgsroute.queueing import (
    Arrival,
    Departure,
    PolicyError,
    RandomStreams,
    SystemConfig,
    Trajectory,
    decode_event,
    encode_event,
    is_stabilizable,
    sample_transition,
    simulate_trajectory,
    total_rate,
    transition_distribution,
)

A = SystemConfig(1.0, (1.0, 2.0))
B = SystemConfig(2.0, (0.5, 2.5, 5.0))
C = SystemConfig(1.0, (2.0,))
D = SystemConfig(0.5, (1.0, 1.0))

# (config, state, action, expected next-state law), worked out by hand from
# p(x + e_a) = lam / rate, p(x - e_n) = mu_n / rate for busy n
HAND_CASES = [
    (A, (0, 0), 0, {(1, 0): 1.0}),
    (A, (0, 0), 1, {(0, 1): 1.0}),
    (A, (1, 0), 0, {(2, 0): 0.5, (0, 0): 0.5}),
    (A, (1, 0), 1, {(1, 1): 0.5, (0, 0): 0.5}),
    (A, (0, 1), 0, {(1, 1): 1 / 3, (0, 0): 2 / 3}),
    (A, (1, 1), 1, {(1, 2): 0.25, (0, 1): 0.25, (1, 0): 0.5}),
    (A, (3, 5), 0, {(4, 5): 0.25, (2, 5): 0.25, (3, 4): 0.5}),
    (B, (0, 0, 0), 2, {(0, 0, 1): 1.0}),
    (B, (1, 0, 0), 0, {(2, 0, 0): 0.8, (0, 0, 0): 0.2}),
    (B, (0, 1, 0), 0, {(1, 1, 0): 2 / 4.5, (0, 0, 0): 2.5 / 4.5}),
    (B, (0, 0, 1), 1, {(0, 1, 1): 2 / 7, (0, 0, 0): 5 / 7}),
    (B, (1, 1, 1), 2, {(1, 1, 2): 0.2, (0, 1, 1): 0.05, (1, 0, 1): 0.25, (1, 1, 0): 0.5}),
    (B, (10, 10, 10), 1, {(10, 11, 10): 0.2, (9, 10, 10): 0.05, (10, 9, 10): 0.25, (10, 10, 9): 0.5}),
    (B, (2, 0, 3), 1, {(2, 1, 3): 2 / 7.5, (1, 0, 3): 0.5 / 7.5, (2, 0, 2): 5 / 7.5}),
    (C, (0,), 0, {(1,): 1.0}),
    (C, (1,), 0, {(2,): 1 / 3, (0,): 2 / 3}),
    (C, (7,), 0, {(8,): 1 / 3, (6,): 2 / 3}),
    (D, (0, 0), 1, {(0, 1): 1.0}),
    (D, (1, 1), 0, {(2, 1): 0.2, (0, 1): 0.4, (1, 0): 0.4}),
    (D, (0, 4), 0, {(1, 4): 1 / 3, (0, 3): 2 / 3}),
]


@pytest.mark.parametrize("cfg,state,action,expected", HAND_CASES)
def test_hand_audited_kernel(cfg, state, action, expected):
    got = dict(transition_distribution(cfg, state, action))
    assert got == expected


def random_configs(rng, count):
    out = []
    for _ in range(count):
        N = int(rng.integers(1, 5))
        mu = rng.uniform(0.1, 5.0, N)
        lam = float(rng.uniform(0.05, 0.99) * mu.sum())
        out.append(SystemConfig(lam, tuple(mu)))
    return out


def test_random_rows_are_stochastic():
    rng = np.random.default_rng(7)
    cfgs = random_configs(rng, 50)
    for i in range(10_000):
        cfg = cfgs[i % len(cfgs)]
        x = rng.integers(0, 4, cfg.n_servers) * rng.integers(0, 2, cfg.n_servers)
        a = int(rng.integers(cfg.n_servers))
        row = transition_distribution(cfg, x, a)
        assert abs(sum(p for _, p in row) - 1.0) <= 1e-12
        assert all(p > 0 for _, p in row)
        assert len(row) == 1 + int(np.count_nonzero(x))


def test_no_departure_from_empty_queue():
    row = dict(transition_distribution(B, (0, 3, 0), 0))
    assert set(row) == {(1, 3, 0), (0, 2, 0)}


def test_validation_errors():
    with pytest.raises(ValueError):
        transition_distribution(A, (0, -1), 0)
    with pytest.raises(ValueError):
        transition_distribution(A, (0, 0), 2)
    with pytest.raises(ValueError):
        transition_distribution(A, (0, 0, 0), 0)
    with pytest.raises(ValueError):
        SystemConfig(0.0, (1.0,))
    with pytest.raises(ValueError):
        SystemConfig(1.0, (1.0, 0.0))


def test_stabilizable():
    assert is_stabilizable(B)
    assert not is_stabilizable(SystemConfig(8.0, (0.5, 2.5, 5.0)))
    assert not is_stabilizable(SystemConfig(10.0, (0.5, 2.5, 5.0)))


def test_total_rate():
    assert total_rate(B, (0, 0, 0)) == 2.0
    assert total_rate(B, (4, 0, 1)) == 7.5


def test_event_codes_roundtrip():
    for ev in (Arrival(0), Arrival(3), Departure(0), Departure(2)):
        assert decode_event(encode_event(ev)) == ev
    with pytest.raises(ValueError):
        decode_event(0)


def test_sampling_matches_kernel_within_3_sigma():
    rng = RandomStreams(123)
    state, action = (1, 2, 0), 2
    law = dict(transition_distribution(B, state, action))
    n = 100_000
    counts = {}
    hold = 0.0
    for k in range(n):
        s = sample_transition(B, state, action, rng, k)
        counts[s.next_state] = counts.get(s.next_state, 0) + 1
        hold += s.holding_time
    assert set(counts) <= set(law)
    for nxt, p in law.items():
        sigma = math.sqrt(p * (1 - p) / n)
        assert abs(counts.get(nxt, 0) / n - p) <= 3 * sigma
    rate = total_rate(B, state)
    # Exp(rate) holding times: sd of the mean is 1/(rate sqrt(n))
    assert abs(hold / n - 1 / rate) <= 3 / (rate * math.sqrt(n))


def test_expected_holding_mode():
    s = sample_transition(B, (1, 0, 0), 0, RandomStreams(0), expected_holding=True)
    assert s.holding_time == 1 / 2.5


def test_streams_are_reproducible_and_independent():
    a = RandomStreams(5).take("event", 10)
    b = RandomStreams(5).take("event", 10)
    c = RandomStreams(5, (1,)).take("event", 10)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    r = RandomStreams(9)
    first = [r.next("hold") for _ in range(3)]
    assert np.allclose(first, RandomStreams(9).take("hold", 3))


def test_simulate_zero_horizon_and_invalid_policy():
    t = simulate_trajectory(B, lambda x, u: 0, 0, RandomStreams(0))
    assert len(t) == 0 and t.states.shape == (1, 3)
    with pytest.raises(PolicyError):
        simulate_trajectory(B, lambda x, u: 5, 10, RandomStreams(0))


def test_simulation_is_deterministic_and_consistent():
    src = action_source(JSQ())
    t1 = simulate_trajectory(B, src, 500, RandomStreams(3))
    t2 = simulate_trajectory(B, src, 500, RandomStreams(3))
    assert np.array_equal(t1.states, t2.states) and np.array_equal(t1.dt, t2.dt)
    steps = np.diff(t1.states, axis=0)
    assert np.all(np.abs(steps).sum(axis=1) == 1)
    assert np.all(t1.states >= 0)
    for x, a, s, _ in t1:
        assert x[a] == min(x)
        if isinstance(s.event, Arrival):
            assert s.event.server == a


def test_compiled_simulation_matches_reference():
    cost = AggregateLogCost()
    ref = simulate_trajectory(B, action_source(JSQ()), 3000, RandomStreams(11),
                              cost_fn=lambda x, dt: cost.rate(x) * dt)
    _, fast = evaluate(B, JSQ(), cost, 3000, RandomStreams(11), record_trajectory=True)
    assert np.array_equal(ref.states, fast.states)
    assert np.array_equal(ref.actions[:-1], fast.actions[:-1])
    assert np.array_equal(ref.events, fast.events)
    np.testing.assert_allclose(fast.dt, ref.dt, rtol=0, atol=1e-15)
    np.testing.assert_allclose(fast.cost, ref.cost, rtol=1e-13, atol=1e-15)


def test_trajectory_roundtrip(tmp_path):
    t = simulate_trajectory(B, action_source(JSQ()), 200, RandomStreams(1))
    t.save_jsonl(tmp_path / "t.jsonl")
    t.save_npz(tmp_path / "t.npz")
    for back in (Trajectory.load(tmp_path / "t.jsonl"), Trajectory.load(tmp_path / "t.npz")):
        assert np.array_equal(back.states, t.states)
        assert np.array_equal(back.events, t.events)
        np.testing.assert_array_equal(back.dt, t.dt)
    first = (tmp_path / "t.jsonl").read_text().splitlines()[0]
    assert '"event": {"type":' in first


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.floats(0.1, 10.0), min_size=1, max_size=4),
    st.floats(0.01, 0.99),
    st.data(),
)
def test_property_rows_stochastic(mu, load, data):
    cfg = SystemConfig(load * sum(mu), tuple(mu))
    x = data.draw(st.lists(st.integers(0, 50), min_size=len(mu), max_size=len(mu)))
    a = data.draw(st.integers(0, len(mu) - 1))
    row = transition_distribution(cfg, x, a)
    assert math.isclose(sum(p for _, p in row), 1.0, abs_tol=1e-12)
    for nxt, _ in row:
        assert sum(abs(u - v) for u, v in zip(nxt, x)) == 1
        assert min(nxt) >= 0
