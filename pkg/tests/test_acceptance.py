"""End-to-end acceptance checks; one verdict line per criterion in the terminal summary."""

import time
from pathlib import Path

import numpy as np
import pytest
from conftest import record

from sgsroute import harness
from sgsroute.config import load_config
from sgsroute.diagnostics import default_nu_grid, find_nu, mgf_time_average, stability_metrics
from sgsroute.features import BasisSpec, Log, Power, check_assumption1, paper_basis
from sgsroute.learner import AggregateLogCost, SeparableCost, evaluate, train
from sgsroute.oracle import (
    build_truncated,
    deterministic_table,
    greedy_policy,
    optimal_weights,
    sarsa_fixed_point,
    stationary_distribution,
    value_iteration,
)
from sgsroute.policy import JSQ
from sgsroute.queueing import RandomStreams, SystemConfig, transition_distribution

pytestmark = [pytest.mark.acceptance, pytest.mark.slow]

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
PAPER = load_config(CONFIGS / "paper_n3.yaml")
TOY = load_config(CONFIGS / "toy_n2.yaml")


@pytest.fixture(scope="session")
def paper_run():
    t0 = time.perf_counter()
    res = harness.run_training(PAPER, record_trajectory=True)
    return res, time.perf_counter() - t0


def tw_mean(traj, lo, hi):
    q = traj.states[lo:hi].sum(axis=1)
    dt = traj.dt[lo:hi]
    return float((q * dt).sum() / dt.sum())


def test_criterion_1_kernel_exactness():
    from test_queueing import HAND_CASES, random_configs

    t0 = time.perf_counter()
    hand_ok = all(dict(transition_distribution(c, s, a)) == e for c, s, a, e in HAND_CASES)
    rng = np.random.default_rng(2024)
    cfgs = random_configs(rng, 100)
    worst = 0.0
    for i in range(10_000):
        cfg = cfgs[i % len(cfgs)]
        x = rng.integers(0, 20, cfg.n_servers) * rng.integers(0, 2, cfg.n_servers)
        row = transition_distribution(cfg, x, int(rng.integers(cfg.n_servers)))
        worst = max(worst, abs(sum(p for _, p in row) - 1.0))
    wall = time.perf_counter() - t0
    ok = hand_ok and worst <= 1e-12 and wall < 5
    record(1, ok, f"20 hand cases exact={hand_ok}, max row-sum error {worst:.1e}, {wall:.2f} s")
    assert ok


def test_criterion_2_restraint_invariant():
    cfg = PAPER
    t0 = time.perf_counter()
    learner = cfg.learner.learner_state(cfg.basis, harness.init_rng(cfg.seed))
    res = train(cfg.system, cfg.basis, cfg.cost, cfg.policy, learner, 1_000_000, harness.train_streams(cfg.seed),
                snapshot_every=cfg.snapshot_every)
    wall = time.perf_counter() - t0
    # min_w_h is the minimum over every epoch of min_n w[n, H]
    ok = res.min_w_h >= learner.w_l and res.learner.k == 1_000_000 and wall < 120
    record(2, ok, f"min over 1e6 epochs of min_n w_nH = {res.min_w_h:.6g} (floor {learner.w_l}), "
                  f"restraint active on {res.restraint_active} epochs, {wall:.1f} s")
    assert ok


def test_criterion_3_stability_under_learning(paper_run):
    res, wall = paper_run
    traj = res.trajectory
    assert len(traj) == 2_000_000
    avg = stability_metrics(traj, 200_000).time_average
    prev, last = tw_mean(traj, 20_000, 200_000), tw_mean(traj, 200_000, 2_000_000)
    decade_change = abs(last - prev) / prev
    rep = find_nu(PAPER.system, PAPER.basis, res.final_w, PAPER.iota, 20, 200)
    mg = mgf_time_average(traj, PAPER.basis, res.final_w, rep.nu)
    half = mg.running_mean[mg.running_mean.size // 2 - 1]
    mgf_drift = abs(mg.final - half) / mg.final
    ok = (np.isfinite(avg) and decade_change < 0.10 and mg.truncated_at is None and mgf_drift < 0.05
          and wall < 600)
    record(3, ok, f"avg |x|_1 {avg:.4f}, decade change {decade_change:.2%}, "
                  f"MGF drift over final half {mgf_drift:.2e} at nu={rep.nu:g}, training {wall:.1f} s")
    assert ok


def test_criterion_4_sgs_beats_jsq(paper_run):
    res, _ = paper_run
    t0 = time.perf_counter()
    sgs = harness.evaluate_policy(PAPER, "sgs", res.final_w, workers=4)
    jsq = harness.evaluate_policy(PAPER, "jsq", workers=4)
    ratio = sgs.average_cost / jsq.average_cost
    ok = PAPER.eval_horizon == 1_000_000 and PAPER.replications == 10 and ratio <= 0.75
    record(4, ok, f"SGS {sgs.average_cost:.4f} (se {sgs.cost_se:.4f}) vs JSQ {jsq.average_cost:.4f} "
                  f"(se {jsq.cost_se:.4f}); SGS/JSQ = {ratio:.3f} (limit 0.75), "
                  f"{time.perf_counter() - t0:.1f} s")
    assert ok


def test_criterion_5_weight_convergence():
    t0 = time.perf_counter()
    x_max, gamma = TOY.oracle["x_max"], TOY.oracle["gamma"]
    assert (TOY.system.lam, TOY.system.mu, x_max, gamma) == (0.5, (1.0, 1.0), 8, 0.9)
    mdp = build_truncated(TOY.system, TOY.cost, x_max)
    fp = sarsa_fixed_point(mdp, TOY.basis, gamma, TOY.iota)
    q = value_iteration(mdp, gamma)
    table = deterministic_table(greedy_policy(q), mdp.n_actions)
    d_star = stationary_distribution(mdp, table)
    w_star = optimal_weights(mdp, q, table, d_star, TOY.basis).w
    res = harness.run_training(TOY)
    checkpoints = [10**3, 10**4, 10**5, 10**6]
    idx = [int(np.searchsorted(res.snapshot_k, k)) for k in checkpoints]
    assert [int(res.snapshot_k[i]) for i in idx] == checkpoints
    dist = np.array([np.linalg.norm(res.weights[i] - fp.w) for i in idx])
    rel = dist[-1] / np.linalg.norm(fp.w)
    rel_star = np.linalg.norm(res.final_w - w_star) / np.linalg.norm(w_star)
    boundary = max(mdp.boundary_mass(d_star), fp.boundary_mass)
    wall = time.perf_counter() - t0
    ok = boundary < 1e-6 and bool(np.all(np.diff(dist) <= 0)) and rel <= 0.25 and wall < 600
    record(5, ok, f"distances to w_fixed {np.array2string(dist, precision=4)}, final relative {rel:.2%}, "
                  f"boundary mass {boundary:.1e}; relative distance to w* {rel_star:.2%} (reported only), "
                  f"{wall:.1f} s")
    assert ok


def test_criterion_6_drift_certificate(paper_run):
    res, _ = paper_run
    t0 = time.perf_counter()
    good = find_nu(PAPER.system, PAPER.basis, res.final_w, PAPER.iota, 20, 200)
    # find_nu stops at the first passing grid value, so pass=false means every value failed
    grid = default_nu_grid()
    bad = find_nu(SystemConfig(10.0, PAPER.system.mu), PAPER.basis, res.final_w, PAPER.iota, 20, 200, grid=grid)
    wall = time.perf_counter() - t0
    ok = good.passed and not bad.passed and wall < 60
    record(6, ok, f"trained weights: pass={good.passed} at nu={good.nu:g} (max drift {good.max_drift_outside:.2e}); "
                  f"lambda=10: pass={bad.passed} over all {len(grid)} grid values; {wall:.1f} s")
    assert ok


def test_criterion_7_oracle_self_consistency():
    t0 = time.perf_counter()
    cfg = SystemConfig(1.0, (2.0,))
    mdp = build_truncated(cfg, SeparableCost((Power(1.0),)), 3)
    gap0 = float(np.max(np.abs(value_iteration(mdp, 0.0) - mdp.expected_cost)))
    basis = BasisSpec.uniform(1, [Power(0.5), Power(1.0), Power(2.0), Power(3.0)])
    q = value_iteration(mdp, 0.9, tol=1e-13)
    table = np.ones((mdp.n_states, 1))
    proj = optimal_weights(mdp, q, table, stationary_distribution(mdp, table), basis)
    fp = sarsa_fixed_point(mdp, basis, 0.9, 1.0)
    qhat = mdp.feature_matrices(basis)[0] @ fp.w
    bell = float(np.max(np.abs(mdp.expected_cost[:, 0] + 0.9 * (mdp.kernels[0] @ qhat) - qhat)))
    wall = time.perf_counter() - t0
    ok = gap0 <= 1e-12 and proj.residual <= 1e-9 and bell <= 1e-8 and wall < 10
    record(7, ok, f"gamma=0 gap {gap0:.1e}, projection residual {proj.residual:.1e}, "
                  f"fixed-point Bellman residual {bell:.1e}, {wall:.2f} s")
    assert ok


def test_criterion_8_mm1_sanity():
    t0 = time.perf_counter()
    cfg = SystemConfig(1.0, (2.0,))
    _, traj = evaluate(cfg, JSQ(), AggregateLogCost(), 1_000_000, RandomStreams(8), record_trajectory=True)
    avg = stability_metrics(traj, 100_000).time_average
    wall = time.perf_counter() - t0
    ok = abs(avg - 1.0) <= 0.10 and wall < 30
    record(8, ok, f"M/M/1 time-average queue {avg:.4f} (target 1.0 within 10%), {wall:.2f} s")
    assert ok


def test_criterion_9_assumption_checker():
    t0 = time.perf_counter()
    b = paper_basis(3)
    passes = check_assumption1(b, PAPER.system, 10_000, "H")
    overload = check_assumption1(b, SystemConfig(8.0, PAPER.system.mu), 10_000, "H")
    log_only = check_assumption1(BasisSpec.uniform(3, [Log()]), PAPER.system, 10_000, "all")
    wall = time.perf_counter() - t0
    ok = passes.passed and not overload.passed and not log_only.passed and log_only.witness is not None and wall < 10
    record(9, ok, f"paper basis H-only pass={passes.passed}; lambda >= sum(mu) pass={overload.passed}; "
                  f"log-only all-j pass={log_only.passed} witness={log_only.witness}; {wall:.2f} s")
    assert ok
