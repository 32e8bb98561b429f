"""Experiment orchestration: training runs, frozen-policy evaluation, comparisons,
oracle exports, checks and trajectory diagnostics, all writing CSV plus a YAML sidecar.

Seeding: the training streams of a run with seed ``s`` come from
``SeedSequence(s, spawn_key=(0,))``, the initial weights from ``(1,)`` and
evaluation replication ``r`` from ``(2, r)``.  Every policy in a comparison
sees the same event and holding-time draws for a given replication.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import os
import subprocess
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .config import RunConfig, parse_config
from .diagnostics import find_nu, mgf_time_average, stability_metrics, tv_window_distance, weight_convergence
from .features import check_assumption1
from .learner import DivergenceError, evaluate, train
from .oracle import (
    build_truncated,
    deterministic_table,
    greedy_policy,
    optimal_weights,
    sarsa_fixed_point,
    stationary_distribution,
    value_iteration,
)
from .policy import JSQ, Bernoulli, Greedy, Softmax
from .queueing import RandomStreams, Trajectory, is_stabilizable

log = logging.getLogger(__name__)

TRAIN_KEY, INIT_KEY, EVAL_KEY = 0, 1, 2


# ---------------------------------------------------------------- file output

def _atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path, header, rows):
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(header)
    for row in rows:
        wr.writerow([_fmt(v) for v in row])
    _atomic_write(Path(path), buf.getvalue())


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def write_yaml(path, data):
    _atomic_write(Path(path), yaml.safe_dump(_plain(data), sort_keys=False))


def _plain(v):
    if isinstance(v, dict):
        return {str(k): _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, np.ndarray):
        return _plain(v.tolist())
    if isinstance(v, (np.floating, float)):
        return float(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def save_weights(path, w):
    w = np.asarray(w, dtype=float)
    write_csv(path, [f"w{i}" for i in range(w.size)], [w.tolist()])


def load_weights(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise ValueError(f"{path}: expected a header and one row of weights")
    return np.array([float(v) for v in rows[-1]])


def version_string() -> str:
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
            capture_output=True, text=True, timeout=5,
        )
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _metadata(cfg: RunConfig, command: str, wall: float, **extra) -> dict:
    return {
        "command": command,
        "version": version_string(),
        "config_hash": cfg.digest(),
        "seed": cfg.seed,
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "wall_time_s": round(wall, 3),
        "config": cfg.to_dict(),
        **extra,
    }


# ---------------------------------------------------------------- training

def init_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(INIT_KEY,)))


def train_streams(seed: int) -> RandomStreams:
    return RandomStreams(seed, (TRAIN_KEY,))


def eval_streams(seed: int, replication: int) -> RandomStreams:
    return RandomStreams(seed, (EVAL_KEY, replication))


def run_training(cfg: RunConfig, *, force: bool = False, record_trajectory: bool = False):
    """Train the softmax learner described by ``cfg``; returns the TrainResult."""
    if not isinstance(cfg.policy, Softmax):
        raise ValueError("training needs a softmax policy")
    learner = cfg.learner.learner_state(cfg.basis, init_rng(cfg.seed))
    return train(
        cfg.system, cfg.basis, cfg.cost, cfg.policy, learner, cfg.horizon, train_streams(cfg.seed),
        snapshot_every=cfg.snapshot_every, record_trajectory=record_trajectory,
        expected_holding=cfg.expected_holding, w_ceiling=cfg.learner.w_ceiling, force=force,
    )


def cmd_train(cfg: RunConfig, out: Path, force: bool = False) -> dict:
    t0 = time.perf_counter()
    a1 = check_assumption1(cfg.basis, cfg.system, cfg.diagnostics["assumption_x_max"],
                           cfg.diagnostics["assumption_scope"])
    if not a1.passed:
        log.warning("basis fails the growth assumption check (witness %s)", a1.witness)
    try:
        res = run_training(cfg, force=force, record_trajectory=cfg.save_trajectory is not None)
    except DivergenceError as exc:
        write_yaml(out / "divergence.yaml", {"error": str(exc), **exc.state})
        raise
    D = cfg.basis.dim
    wcols = [f"w{i}" for i in range(D)]
    rows = [
        [int(k), *res.weights[i], res.window_cost[i], res.window_q_len[i], res.b_alpha_max[i]]
        for i, k in enumerate(res.snapshot_k)
    ]
    write_csv(out / "metrics.csv", ["k", *wcols, "window_cost", "window_q_len", "b_alpha_max"], rows)
    write_csv(
        out / "trace.csv",
        ["k", "wall_time", *wcols, "window_cost", "window_q_len", "b_alpha_max"],
        [[r[0], res.wall_time[i], *r[1:]] for i, r in enumerate(rows)],
    )
    save_weights(out / "weights.csv", res.final_w)
    if res.trajectory is not None:
        if cfg.save_trajectory == "jsonl":
            res.trajectory.save_jsonl(out / "trajectory.jsonl")
        else:
            res.trajectory.save_npz(out / "trajectory.npz")
    summary = {
        "epochs": cfg.horizon,
        "final_k": res.learner.k,
        "min_w_h": res.min_w_h if math.isfinite(res.min_w_h) else None,
        "restraint_active_epochs": res.restraint_active,
        "stabilizable": is_stabilizable(cfg.system),
        "assumption1": a1.to_dict(),
        "defaults_note": "gamma, alpha0, tau, w_l and eps_l are implementation defaults unless set in the config",
    }
    write_yaml(out / "metadata.yaml", _metadata(cfg, "train", time.perf_counter() - t0, **summary))
    return summary


# ---------------------------------------------------------------- evaluation

def policy_for(name: str, cfg: RunConfig):
    if name == "sgs":
        return cfg.policy if isinstance(cfg.policy, Softmax) else Softmax()
    if name == "greedy":
        return Greedy()
    if name == "jsq":
        return JSQ()
    if name == "bernoulli":
        return Bernoulli.proportional(cfg.system.mu)
    raise ValueError(f"unknown policy {name!r}")


def _eval_one(job):
    raw, name, w, rep = job
    cfg = parse_config(raw)
    pol = policy_for(name, cfg)
    t0 = time.perf_counter()
    res, _ = evaluate(cfg.system, pol, cfg.cost, cfg.eval_horizon, eval_streams(cfg.seed, rep),
                      basis=cfg.basis, w=w, expected_holding=cfg.expected_holding)
    return rep, res.average_cost, res.mean_queue, time.perf_counter() - t0


@dataclass
class Row:
    name: str
    costs: np.ndarray
    queues: np.ndarray
    wall_time: float

    @property
    def average_cost(self) -> float:
        return float(self.costs.mean())

    @property
    def cost_se(self) -> float:
        n = self.costs.size
        return float(self.costs.std(ddof=1) / math.sqrt(n)) if n > 1 else math.nan

    @property
    def mean_queue(self) -> float:
        return float(self.queues.mean())


def evaluate_policy(cfg: RunConfig, name: str, w=None, workers: int = 1) -> Row:
    """Average cost of a frozen policy over ``cfg.replications`` independent runs."""
    if name in ("sgs", "greedy"):
        if w is None:
            raise ValueError(f"policy {name} needs weights")
        w = np.asarray(w, dtype=float)
        if w.shape != (cfg.basis.dim,):
            raise ValueError(f"weights have length {w.size}, basis needs {cfg.basis.dim}")
    jobs = [(cfg.raw, name, w, r) for r in range(cfg.replications)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_eval_one, jobs))
    else:
        results = [_eval_one(j) for j in jobs]
    results.sort(key=lambda r: r[0])
    return Row(
        name,
        np.array([r[1] for r in results]),
        np.array([r[2] for r in results]),
        float(sum(r[3] for r in results)),
    )


@dataclass
class ComparisonTable:
    rows: list[Row]
    base: str = "sgs"
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.base not in [r.name for r in self.rows]:
            self.base = self.rows[0].name

    def row(self, name: str) -> Row:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def normalized(self, name: str) -> float:
        return self.row(name).average_cost / self.row(self.base).average_cost

    @property
    def jsq_over_sgs(self) -> float | None:
        names = [r.name for r in self.rows]
        if "jsq" in names and "sgs" in names:
            return self.row("jsq").average_cost / self.row("sgs").average_cost
        return None

    HEADER = ["policy", "average_cost", "cost_se", "normalized_cost", "mean_queue", "wall_time"]

    def records(self, with_wall=True):
        for r in self.rows:
            rec = [r.name, r.average_cost, r.cost_se, self.normalized(r.name), r.mean_queue]
            yield rec + [r.wall_time] if with_wall else rec

    def to_text(self) -> str:
        lines = [f"{'policy':<10} {'avg cost':>10} {'se':>9} {'normalized':>10} {'mean |x|':>9} {'wall s':>8}"]
        for name, c, se, nc, q, wt in self.records():
            lines.append(f"{name:<10} {c:>10.4f} {se:>9.4f} {nc:>10.2f} {q:>9.3f} {wt:>8.1f}")
        ratio = self.jsq_over_sgs
        if ratio is not None:
            lines.append(f"JSQ/SGS cost ratio: {ratio:.3f}  (SGS/JSQ = {1 / ratio:.3f})")
        lines.append(f"normalized by: {self.base}")
        return "\n".join(lines)


def cmd_evaluate(cfg: RunConfig, out: Path, policy: str, w=None, workers: int = 1) -> Row:
    t0 = time.perf_counter()
    row = evaluate_policy(cfg, policy, w, workers)
    table = ComparisonTable([row], base=policy)
    write_csv(out / f"evaluate_{policy}.csv", ComparisonTable.HEADER[:-1], table.records(with_wall=False))
    write_csv(out / f"evaluate_{policy}_replications.csv", ["replication", "average_cost", "mean_queue"],
              [[i, c, q] for i, (c, q) in enumerate(zip(row.costs, row.queues))])
    write_yaml(out / f"evaluate_{policy}.yaml", _metadata(cfg, "evaluate", time.perf_counter() - t0,
                                                          policy=policy, eval_wall_time_s=row.wall_time))
    return row


def cmd_compare(cfg: RunConfig, out: Path, w=None, workers: int = 1, force: bool = False) -> ComparisonTable:
    t0 = time.perf_counter()
    notes = {}
    needs_w = any(n in ("sgs", "greedy") for n in cfg.compare)
    if needs_w and w is None:
        res = run_training(cfg, force=force)
        w = res.final_w
        save_weights(out / "weights.csv", w)
        notes["trained_epochs"] = cfg.horizon
    rows = [evaluate_policy(cfg, name, w, workers) for name in cfg.compare]
    table = ComparisonTable(rows, base="sgs", notes=notes)
    write_csv(out / "comparison.csv", ComparisonTable.HEADER[:-1], table.records(with_wall=False))
    _atomic_write(out / "comparison.txt", table.to_text() + "\n")
    write_yaml(out / "comparison.yaml", _metadata(
        cfg, "compare", time.perf_counter() - t0, base=table.base, jsq_over_sgs=table.jsq_over_sgs,
        raw_costs={r.name: r.average_cost for r in rows}, eval_wall_time_s={r.name: r.wall_time for r in rows},
        **notes,
    ))
    return table


# ---------------------------------------------------------------- oracle

def cmd_oracle(cfg: RunConfig, out: Path, w=None) -> dict:
    t0 = time.perf_counter()
    x_max = int(cfg.oracle["x_max"])
    gamma = float(cfg.oracle["gamma"])
    tol = float(cfg.oracle["tol"])
    mdp = build_truncated(cfg.system, cfg.cost, x_max)
    q = value_iteration(mdp, gamma, tol)
    pi = greedy_policy(q)
    table = deterministic_table(pi, mdp.n_actions)
    d_star = stationary_distribution(mdp, table)
    proj = optimal_weights(mdp, q, table, d_star, cfg.basis)
    fp = sarsa_fixed_point(mdp, cfg.basis, gamma, cfg.iota, tol=tol)
    N = cfg.system.n_servers
    xcols = [f"x{n}" for n in range(N)]
    write_csv(out / "q_star.csv", ["state", *xcols, *[f"q{a}" for a in range(N)]],
              [[i, *s, *q[i]] for i, s in enumerate(mdp.states)])
    write_csv(out / "pi_star.csv", ["state", *xcols, "action"], [[i, *s, pi[i]] for i, s in enumerate(mdp.states)])
    write_csv(out / "d_star.csv", ["state", *xcols, "d_star", "d_w"],
              [[i, *s, d_star[i], fp.d[i]] for i, s in enumerate(mdp.states)])
    save_weights(out / "w_star.csv", proj.w)
    save_weights(out / "w_fixed.csv", fp.w)
    summary = {
        "x_max": x_max,
        "gamma": gamma,
        "n_states": mdp.n_states,
        "boundary_mass_d_star": mdp.boundary_mass(d_star),
        "boundary_mass_d_w": fp.boundary_mass,
        "projection_residual": proj.residual,
        "projection_condition": proj.condition,
        "fixed_point_residual": fp.residual,
        "fixed_point_iterations": fp.iterations,
    }
    if w is not None:
        w = np.asarray(w, dtype=float)
        summary["dist_to_w_star"] = float(np.linalg.norm(w - proj.w))
        summary["dist_to_w_fixed"] = float(np.linalg.norm(w - fp.w))
        summary["rel_dist_to_w_fixed"] = summary["dist_to_w_fixed"] / float(np.linalg.norm(fp.w))
    write_yaml(out / "oracle.yaml", _metadata(cfg, "oracle", time.perf_counter() - t0, **summary))
    return summary


# ---------------------------------------------------------------- checks and diagnostics

def cmd_check(cfg: RunConfig, w=None) -> tuple[dict, bool]:
    stab = is_stabilizable(cfg.system)
    dg = cfg.diagnostics
    a1 = check_assumption1(cfg.basis, cfg.system, dg["assumption_x_max"], dg["assumption_scope"])
    if w is None:
        w = cfg.learner.learner_state(cfg.basis, init_rng(cfg.seed)).w
        source = "initial"
    else:
        source = "file"
    rep = find_nu(cfg.system, cfg.basis, w, cfg.iota, int(dg["b_l"]), int(dg["x_check"]))
    report = {
        "stabilizable": stab,
        "lam": cfg.system.lam,
        "sum_mu": float(sum(cfg.system.mu)),
        "assumption1": a1.to_dict(),
        "drift": rep.to_dict(),
        "weights": source,
    }
    # the drift certificate is about learned weights; for the initial draw it is informational
    ok = stab and a1.passed and (rep.passed or source == "initial")
    return report, bool(ok)


def cmd_diagnose(cfg: RunConfig, out: Path, trajectory, w, trace_path=None, target=None) -> dict:
    t0 = time.perf_counter()
    traj = trajectory if isinstance(trajectory, Trajectory) else Trajectory.load(trajectory)
    dg = cfg.diagnostics
    window = int(dg["window"])
    rep = find_nu(cfg.system, cfg.basis, w, cfg.iota, int(dg["b_l"]), int(dg["x_check"]))
    sm = stability_metrics(traj, window)
    write_csv(out / "stability.csv", ["window_index", "value"], enumerate(sm.window_mean))
    summary = {"drift": rep.to_dict(), "time_average_queue": sm.time_average, "epochs": len(traj)}
    if window >= 1000:
        tv = tv_window_distance(traj, window)
        write_csv(out / "tv.csv", ["window_index", "value"], enumerate(tv))
        summary["final_tv"] = float(tv[-1]) if tv.size else None
    mg = mgf_time_average(traj, cfg.basis, w, rep.nu)
    stride = max(1, window // 10)
    idx = np.arange(stride - 1, mg.running_mean.size, stride)
    write_csv(out / "mgf.csv", ["k", "value"], zip(idx + 1, mg.running_mean[idx]))
    summary["mgf_final"] = mg.final
    summary["mgf_truncated_at"] = mg.truncated_at
    if trace_path is not None and target is not None:
        with open(trace_path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        D = cfg.basis.dim
        W = np.array([[float(r[f"w{i}"]) for i in range(D)] for r in rows])
        ks = np.array([int(r["k"]) for r in rows])
        wc = weight_convergence(W, target, ks)
        write_csv(out / "weight_distance.csv", ["k", "value"], zip(ks, wc.distance))
        summary["weight_decay_rate"] = wc.decay_rate
    write_yaml(out / "diagnostics.yaml", _metadata(cfg, "diagnose", time.perf_counter() - t0, **summary))
    return summary
