"""Semi-gradient SARSA(0) with a restraint on the highest-degree weights.

Each epoch the learner observes ``(x, a, c, x', a')`` and moves ``w`` along
``TD error * phi(x, a)``.  Before applying the step, it is divided by the
smallest factor ``B >= 1`` that keeps every highest-degree weight
``w[n, H]`` at or above the floor ``w_l``.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import special

from . import _kernels
from .features import (
    BasisFunction,
    BasisSpec,
    basis_from_dict,
    basis_to_dict,
    phi,
)
from .policy import (
    Greedy,
    PolicyParams,
    Softmax,
    action_from_uniform,
    action_probabilities,
    encode_policy,
)
from .queueing import RandomStreams, SystemConfig, Trajectory, is_stabilizable

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Weights left the allowed range during training."""

    def __init__(self, msg: str, state: dict):
        super().__init__(msg)
        self.state = state


class NotStabilizableError(ValueError):
    pass


@dataclass(frozen=True)
class StepSchedule:
    """``alpha_k = alpha0 * tau / (tau + k)``.

    Harmonic decay: the partial sums diverge logarithmically while the sum of
    squares converges, so the usual Robbins-Monro conditions hold.
    """

    alpha0: float = 0.005
    tau: float = 1e5

    def __post_init__(self):
        if not (self.alpha0 > 0 and self.tau > 0):
            raise ValueError("alpha0 and tau must be positive")

    def __call__(self, k):
        return self.alpha0 * self.tau / (self.tau + np.asarray(k, dtype=float))

    def partial_sum(self, K: int) -> float:
        """``sum_{k<K} alpha_k`` in closed form (digamma difference)."""
        return float(self.alpha0 * self.tau * (special.digamma(self.tau + K) - special.digamma(self.tau)))

    def sum_of_squares(self) -> float:
        """``sum_{k>=0} alpha_k**2 = alpha0**2 tau**2 trigamma(tau)``."""
        return float(self.alpha0**2 * self.tau**2 * special.polygamma(1, self.tau))


@dataclass(frozen=True)
class SeparableCost:
    """``sum_n C_n(x'_n)`` per unit time."""

    per_server: tuple[BasisFunction, ...]

    kind = "separable"

    def rate(self, x) -> float:
        return float(sum(f.value(int(v)) for f, v in zip(self.per_server, np.asarray(x))))

    def rate_many(self, states: np.ndarray) -> np.ndarray:
        return sum(f.value(states[:, n]) for n, f in enumerate(self.per_server))


@dataclass(frozen=True)
class AggregateLogCost:
    """``log(max(||x'||_1, 1))`` per unit time; zero when at most one job is present."""

    kind = "aggregate_log"

    def rate(self, x) -> float:
        return math.log(max(int(np.sum(x)), 1))

    def rate_many(self, states: np.ndarray) -> np.ndarray:
        return np.log(np.maximum(states.sum(axis=1), 1))


CostModel = SeparableCost | AggregateLogCost


def cost_from_dict(d: dict, n_servers: int) -> CostModel:
    kind = d.get("kind")
    if kind == "aggregate_log":
        if set(d) - {"kind"}:
            raise ValueError(f"unknown keys for aggregate_log cost: {sorted(set(d) - {'kind'})}")
        return AggregateLogCost()
    if kind == "separable":
        extra = set(d) - {"kind", "uniform", "per_server"}
        if extra:
            raise ValueError(f"unknown keys for separable cost: {sorted(extra)}")
        if ("uniform" in d) == ("per_server" in d):
            raise ValueError("separable cost needs exactly one of 'uniform' or 'per_server'")
        if "uniform" in d:
            f = basis_from_dict(d["uniform"])
            return SeparableCost(tuple(f for _ in range(n_servers)))
        fs = tuple(basis_from_dict(f) for f in d["per_server"])
        if len(fs) != n_servers:
            raise ValueError(f"separable cost needs {n_servers} per-server functions")
        return SeparableCost(fs)
    raise ValueError(f"unknown cost kind {kind!r}")


def cost_to_dict(cost: CostModel) -> dict:
    if isinstance(cost, AggregateLogCost):
        return {"kind": "aggregate_log"}
    return {"kind": "separable", "per_server": [basis_to_dict(f) for f in cost.per_server]}


def _encode_cost(cost: CostModel, n_servers: int):
    if isinstance(cost, AggregateLogCost):
        return 1, np.zeros(n_servers, dtype=np.int64), np.zeros(n_servers), np.zeros(n_servers)
    codes = np.array([f.code for f in cost.per_server], dtype=np.int64)
    p0 = np.array([f.params[0] for f in cost.per_server])
    p1 = np.array([f.params[1] for f in cost.per_server])
    return 0, codes, p0, p1


def one_step_cost(cost: CostModel, next_state, dt: float) -> float:
    if dt < 0:
        raise ValueError("holding time must be non-negative")
    return cost.rate(next_state) * dt


@dataclass(frozen=True)
class LearnerState:
    w: np.ndarray
    k: int = 0
    gamma: float = 0.99
    w_l: float = 0.05
    eps_l: float = 1e-3
    schedule: StepSchedule = field(default_factory=StepSchedule)
    last_b_alpha: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "w", np.array(self.w, dtype=float))
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        if not self.w_l > 0:
            raise ValueError("w_l must be positive")


def initial_weights(basis: BasisSpec, rng: np.random.Generator, w_l: float = 0.05, eps_l: float = 1e-3,
                    low: float = 0.0, high: float = 1.0) -> np.ndarray:
    """Uniform draw on ``[low, high)``; highest-degree entries lifted to ``w_l + eps_l``."""
    w = rng.uniform(low, high, size=basis.dim)
    h = basis.highest_flat
    w[h] = np.maximum(w[h], w_l + eps_l)
    return w


def td_error(basis: BasisSpec, w, gamma: float, x, a: int, c: float, x_next, a_next: int) -> float:
    w = np.asarray(w, dtype=float)
    delta = c + gamma * float(w @ phi(basis, x_next, a_next)) - float(w @ phi(basis, x, a))
    if not math.isfinite(delta):
        raise FloatingPointError(f"TD error is not finite at x={list(x)}, a={a}")
    return delta


def semi_gradient_parts(basis: BasisSpec, gamma: float, x, a, c, x_next, a_next):
    """``(g, r)`` with ``delta * phi(x, a) == g @ w + r`` for every ``w``."""
    f = phi(basis, x, a)
    g = np.outer(f, gamma * phi(basis, x_next, a_next) - f)
    return g, c * f


# weights this close above the floor count as sitting on it; dividing by
# such a gap would zero the whole update for a rounding residue
FLOOR_TOL = 1e-12


def _restraint(alpha_k, delta, phi_vec, w, w_l, h_idx):
    b = 1.0
    binding = np.zeros(len(h_idx), dtype=bool)
    for i, h in enumerate(h_idx):
        num = alpha_k * delta * phi_vec[h]
        gap = w_l - w[h]
        if num < 0:
            if gap < -FLOOR_TOL:
                b = max(b, num / gap)
            else:
                binding[i] = True
    return b, binding


def restraint(alpha_k: float, delta: float, phi_vec, w, w_l: float, h_idx) -> float:
    """Smallest divisor ``B >= 1`` keeping every highest-degree weight above ``w_l``.

    A coordinate already sitting on the floor and pushed downwards cannot be
    rescued by any finite ``B``; it is left out here and clamped by
    :func:`sgs_step` instead.
    """
    return _restraint(alpha_k, delta, np.asarray(phi_vec), np.asarray(w), w_l, np.asarray(h_idx))[0]


def sgs_step(learner: LearnerState, basis: BasisSpec, transition) -> LearnerState:
    """One restrained SARSA(0) update from ``(x, a, c, x', a')``."""
    x, a, c, x_next, a_next = transition
    f = phi(basis, x, a)
    delta = td_error(basis, learner.w, learner.gamma, x, a, c, x_next, a_next)
    alpha = float(learner.schedule(learner.k))
    h = basis.highest_flat
    b, binding = _restraint(alpha, delta, f, learner.w, learner.w_l, h)
    w = learner.w + (alpha * delta / b) * f
    # binding coordinates and landings within rounding of the floor snap onto it
    w[h] = np.where(w[h] < learner.w_l + FLOOR_TOL, learner.w_l, w[h])
    if not np.all(np.isfinite(w)):
        raise DivergenceError("non-finite weights", {"w": learner.w.tolist(), "x": list(x), "a": a})
    return dataclasses.replace(learner, w=w, k=learner.k + 1, last_b_alpha=b)


@dataclass
class TrainResult:
    learner: LearnerState
    snapshot_t: np.ndarray
    snapshot_k: np.ndarray
    weights: np.ndarray
    window_cost: np.ndarray
    window_q_len: np.ndarray
    b_alpha_max: np.ndarray
    wall_time: np.ndarray
    min_w_h: float
    restraint_active: int
    trajectory: Trajectory | None = None

    @property
    def final_w(self) -> np.ndarray:
        return self.learner.w


@dataclass
class EvalResult:
    epochs: int
    total_time: float
    total_cost: float
    queue_time_integral: float

    @property
    def average_cost(self) -> float:
        return self.total_cost / self.total_time

    @property
    def mean_queue(self) -> float:
        return self.queue_time_integral / self.total_time


def _window_reduce(values: np.ndarray, size: int, op) -> np.ndarray:
    m = values.size // size
    return op(values[: m * size].reshape(m, size), axis=1)


class _Driver:
    """Feeds random blocks to the compiled epoch loop and gathers its output."""

    def __init__(self, config, basis, cost, policy, streams, x0, expected_holding, chunk):
        self.config = config
        self.N = config.n_servers
        self.basis = basis
        self.streams = streams
        self.expected_holding = expected_holding
        self.chunk = chunk
        self.x = np.zeros(self.N, dtype=np.int64) if x0 is None else np.array(x0, dtype=np.int64)
        self.mu = config.mu_array
        if basis is not None:
            self.bcode, self.bp0, self.bp1 = basis.encoded()
            self.H = basis.highest
        else:
            self.bcode = np.zeros((self.N, 1), dtype=np.int64)
            self.bp0 = np.zeros((self.N, 1))
            self.bp1 = np.ones((self.N, 1))
            self.H = 0
        self.ckind, self.ccode, self.cp0, self.cp1 = _encode_cost(cost, self.N)
        self.pkind, self.iota, self.psplit = encode_policy(policy, self.N)
        self.policy = policy

    def first_action(self, w) -> int:
        probs = action_probabilities(self.policy, self.basis, w, self.x)
        return action_from_uniform(probs, self.streams.next("action"))

    def run(self, a, w, k, t0, steps, learn, gamma=0.0, w_l=0.0, schedule=None, w_ceiling=np.inf,
            snap_every=0):
        D = w.size
        out_states = np.empty((steps, self.N), dtype=np.int64)
        out_actions = np.empty(steps, dtype=np.int64)
        out_events = np.empty(steps, dtype=np.int64)
        out_dt = np.empty(steps)
        out_cost = np.empty(steps)
        out_balpha = np.empty(steps)
        out_minwh = np.empty(steps)
        n_snap_max = steps // snap_every + 1 if snap_every > 0 else 1
        out_snaps = np.empty((n_snap_max, D))
        out_snap_t = np.empty(n_snap_max, dtype=np.int64)
        ev_u = self.streams.take("event", steps)
        hold_e = self.streams.take("hold", steps)
        act_u = self.streams.take("action", steps)
        alpha0 = schedule.alpha0 if schedule else 0.0
        tau = schedule.tau if schedule else 1.0
        status, done, a, k, n_snaps = _kernels.run_chunk(
            self.x, a, w, k, t0, steps,
            self.config.lam, self.mu, self.bcode, self.bp0, self.bp1, self.H,
            self.ckind, self.ccode, self.cp0, self.cp1,
            self.pkind, self.iota, self.psplit,
            learn, gamma, w_l, alpha0, tau,
            self.expected_holding, w_ceiling,
            ev_u, hold_e, act_u,
            out_states, out_actions, out_events, out_dt, out_cost, out_balpha, out_minwh,
            snap_every, out_snaps, out_snap_t,
        )
        out = {
            "states": out_states[:done], "actions": out_actions[:done], "events": out_events[:done],
            "dt": out_dt[:done], "cost": out_cost[:done], "b_alpha": out_balpha[:done],
            "min_w_h": out_minwh[:done], "snaps": out_snaps[:n_snaps], "snap_t": out_snap_t[:n_snaps],
        }
        return status, done, int(a), int(k), out


def _chunk_len(snapshot_every: int, chunk: int = 1 << 16) -> int:
    if snapshot_every <= 0:
        return chunk
    return max(1, chunk // snapshot_every) * snapshot_every


def train(
    config: SystemConfig,
    basis: BasisSpec,
    cost: CostModel,
    policy: PolicyParams,
    learner: LearnerState,
    horizon: int,
    streams: RandomStreams | None = None,
    *,
    x0=None,
    snapshot_every: int = 10_000,
    record_trajectory: bool = False,
    expected_holding: bool = False,
    w_ceiling: float = 1e9,
    force: bool = False,
    engine: str = "compiled",
    callback: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Run the coupled simulate-and-learn loop for ``horizon`` epochs.

    At every epoch the action ``a[k]`` drawn at ``x[k]`` is applied, the next
    state and cost are sampled, ``a[k+1]`` is drawn at ``x[k+1]`` from the
    policy of the current weights, and the weights are updated.  Snapshots
    of ``w`` and windowed metrics are taken every ``snapshot_every`` epochs.
    ``engine="python"`` runs the same loop through :func:`sgs_step`; it is
    slow and exists as a cross-check for the compiled path.
    """
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    if not is_stabilizable(config) and not force:
        raise NotStabilizableError(
            f"lambda={config.lam} >= sum(mu)={sum(config.mu)}; pass force=True to train anyway"
        )
    if learner.w.shape != (basis.dim,):
        raise ValueError(f"weights must have length {basis.dim}")
    h = basis.highest_flat
    if np.any(learner.w[h] < learner.w_l):
        raise ValueError("initial highest-degree weights must be >= w_l")
    streams = RandomStreams(config.seed) if streams is None else streams
    if engine == "python":
        return _train_python(config, basis, cost, policy, learner, horizon, streams, x0, snapshot_every,
                             record_trajectory, expected_holding, w_ceiling)
    if engine != "compiled":
        raise ValueError(f"unknown engine {engine!r}")

    drv = _Driver(config, basis, cost, policy, streams, x0, expected_holding, None)
    w = learner.w.copy()
    k = learner.k
    acc = _Accumulator(config.n_servers, drv.x, snapshot_every, record_trajectory)
    if horizon == 0:
        return acc.result(learner, w)
    a = drv.first_action(w)
    acc.first_action(a)
    clen = _chunk_len(snapshot_every)
    t = 0
    t_start = time.perf_counter()
    last_b = learner.last_b_alpha
    while t < horizon:
        steps = min(clen, horizon - t)
        status, done, a, k, out = drv.run(
            a, w, k, t, steps, True, learner.gamma, learner.w_l, learner.schedule, w_ceiling, snapshot_every
        )
        acc.add(out, time.perf_counter() - t_start)
        if done:
            last_b = float(out["b_alpha"][-1])
        t += done
        if status == _kernels.DIVERGED:
            raise DivergenceError(
                f"weights diverged at epoch {k} (|w|_inf > {w_ceiling:g} or non-finite)",
                {"k": k, "w": w.tolist(), "x": drv.x.tolist()},
            )
        if status == _kernels.RESTRAINT_BROKEN:
            raise AssertionError(f"highest-degree weight fell below w_l at epoch {k}")
        if callback is not None:
            callback({"t": t, "k": k, "w": w.copy()})
    final = dataclasses.replace(learner, w=w, k=k, last_b_alpha=last_b)
    return acc.result(final, w, final_t=t)


class _Accumulator:
    """Collects windowed metrics, weight snapshots and (optionally) the trajectory."""

    def __init__(self, N, x0, snapshot_every, record):
        self.snapshot_every = snapshot_every
        self.record = record
        self.x_prev = np.array(x0, dtype=np.int64)
        self.x0 = self.x_prev.copy()
        self.parts = []
        self.snap_t, self.snaps, self.wall = [], [], []
        self.win_cost, self.win_q, self.win_b = [], [], []
        self.pending = None
        self.min_w_h = np.inf
        self.restraint_active = 0
        self.a0 = None
        self.t = 0

    def first_action(self, a):
        self.a0 = a

    def add(self, out, wall):
        n = out["dt"].size
        if n == 0:
            return
        prev_states = np.vstack([self.x_prev[None, :], out["states"][:-1]])
        q = prev_states.sum(axis=1)
        block = {"dt": out["dt"], "cost": out["cost"], "qdt": q * out["dt"], "b": out["b_alpha"]}
        if self.pending is not None:
            block = {key: np.concatenate([self.pending[key], block[key]]) for key in block}
        self.min_w_h = min(self.min_w_h, float(out["min_w_h"].min()))
        self.restraint_active += int(np.count_nonzero(out["b_alpha"] > 1.0))
        if self.snapshot_every > 0:
            size = self.snapshot_every
            m = block["dt"].size // size
            if m:
                tdt = _window_reduce(block["dt"], size, np.sum)
                self.win_cost.extend(_window_reduce(block["cost"], size, np.sum) / tdt)
                self.win_q.extend(_window_reduce(block["qdt"], size, np.sum) / tdt)
                self.win_b.extend(_window_reduce(block["b"], size, np.max))
            rest = {key: v[m * size:] for key, v in block.items()}
            self.pending = rest if rest["dt"].size else None
            self.snap_t.extend(out["snap_t"].tolist())
            self.snaps.extend(out["snaps"])
            self.wall.extend([wall] * len(out["snap_t"]))
        if self.record:
            self.parts.append(out)
        self.x_prev = out["states"][-1].copy()
        self.t += n

    def result(self, learner, w, final_t=0):
        # trailing partial window is reported as a final snapshot
        if self.pending is not None and self.snapshot_every > 0:
            tdt = self.pending["dt"].sum()
            self.win_cost.append(self.pending["cost"].sum() / tdt)
            self.win_q.append(self.pending["qdt"].sum() / tdt)
            self.win_b.append(self.pending["b"].max())
            self.snap_t.append(final_t)
            self.snaps.append(w.copy())
            self.wall.append(self.wall[-1] if self.wall else 0.0)
        D = w.size
        snap_t = np.array(self.snap_t, dtype=np.int64)
        traj = None
        if self.record:
            traj = _assemble_trajectory(self.x0, self.a0, self.parts)
        return TrainResult(
            learner=learner,
            snapshot_t=snap_t,
            snapshot_k=snap_t + (learner.k - final_t if final_t else 0),
            weights=np.array(self.snaps).reshape(-1, D),
            window_cost=np.array(self.win_cost),
            window_q_len=np.array(self.win_q),
            b_alpha_max=np.array(self.win_b),
            wall_time=np.array(self.wall),
            min_w_h=float(self.min_w_h),
            restraint_active=self.restraint_active,
            trajectory=traj,
        )


def _assemble_trajectory(x0, a0, parts) -> Trajectory:
    N = x0.size
    if not parts:
        t = Trajectory.empty(N, x0)
        if a0 is not None:
            t.actions = np.array([a0], dtype=np.int32)
        return t
    states = np.vstack([x0[None, :]] + [p["states"] for p in parts]).astype(np.int32)
    actions = np.concatenate([[a0]] + [p["actions"] for p in parts]).astype(np.int32)
    events = np.concatenate([p["events"] for p in parts]).astype(np.int16)
    dt = np.concatenate([p["dt"] for p in parts])
    cost = np.concatenate([p["cost"] for p in parts])
    return Trajectory(states, actions, events, dt, cost)


def _train_python(config, basis, cost, policy, learner, horizon, streams, x0, snapshot_every, record,
                  expected_holding, w_ceiling) -> TrainResult:
    from .queueing import encode_event, sample_transition

    N = config.n_servers
    x = np.zeros(N, dtype=np.int64) if x0 is None else np.array(x0, dtype=np.int64)
    acc = _Accumulator(N, x, snapshot_every, record)
    if horizon == 0:
        return acc.result(learner, learner.w)
    a = action_from_uniform(action_probabilities(policy, basis, learner.w, x), streams.next("action"))
    acc.first_action(a)
    rows = {key: [] for key in ("states", "actions", "events", "dt", "cost", "b_alpha", "min_w_h")}
    snaps, snap_t = [], []
    h = basis.highest_flat
    t0 = time.perf_counter()
    for t in range(horizon):
        s = sample_transition(config, x, a, streams, learner.k, expected_holding)
        x_next = np.array(s.next_state, dtype=np.int64)
        c = one_step_cost(cost, x_next, s.holding_time)
        a_next = action_from_uniform(action_probabilities(policy, basis, learner.w, x_next), streams.next("action"))
        learner = sgs_step(learner, basis, (x, a, c, x_next, a_next))
        if np.max(np.abs(learner.w)) > w_ceiling:
            raise DivergenceError(f"weights diverged at epoch {learner.k}", {"w": learner.w.tolist()})
        for key, v in zip(rows, (x_next, a_next, encode_event(s.event), s.holding_time, c,
                                 learner.last_b_alpha, float(learner.w[h].min()))):
            rows[key].append(v)
        if snapshot_every > 0 and (t + 1) % snapshot_every == 0:
            snaps.append(learner.w.copy())
            snap_t.append(t + 1)
        x, a = x_next, a_next
    out = {key: np.array(v) for key, v in rows.items()}
    out["snaps"] = np.array(snaps).reshape(-1, basis.dim)
    out["snap_t"] = np.array(snap_t, dtype=np.int64)
    acc.add(out, time.perf_counter() - t0)
    return acc.result(learner, learner.w, final_t=horizon)


def evaluate(
    config: SystemConfig,
    policy: PolicyParams,
    cost: CostModel,
    horizon: int,
    streams: RandomStreams | None = None,
    *,
    basis: BasisSpec | None = None,
    w=None,
    x0=None,
    expected_holding: bool = False,
    record_trajectory: bool = False,
):
    """Simulate a frozen policy; returns ``(EvalResult, Trajectory | None)``."""
    if horizon < 1:
        raise ValueError("evaluation horizon must be >= 1")
    needs_w = isinstance(policy, (Softmax, Greedy))
    if needs_w and (basis is None or w is None):
        raise ValueError("value-based policies need a basis and weights")
    if basis is not None and w is not None and np.asarray(w).shape != (basis.dim,):
        raise ValueError(f"weights must have length {basis.dim}")
    streams = RandomStreams(config.seed) if streams is None else streams
    wv = np.zeros(basis.dim if basis is not None else config.n_servers) if w is None else np.array(w, dtype=float)
    drv = _Driver(config, basis, cost, policy, streams, x0, expected_holding, None)
    x_first = drv.x.copy()
    a = drv.first_action(wv)
    a_first = a
    total_time = total_cost = qint = 0.0
    parts = []
    t = 0
    x_prev = drv.x.copy()
    while t < horizon:
        steps = min(1 << 16, horizon - t)
        _, done, a, _, out = drv.run(a, wv, 0, t, steps, False)
        prev = np.vstack([x_prev[None, :], out["states"][:-1]])
        total_time += float(out["dt"].sum())
        total_cost += float(out["cost"].sum())
        qint += float((prev.sum(axis=1) * out["dt"]).sum())
        x_prev = out["states"][-1].copy()
        if record_trajectory:
            parts.append(out)
        t += done
    res = EvalResult(horizon, total_time, total_cost, qint)
    traj = _assemble_trajectory(x_first, a_first, parts) if record_trajectory else None
    return res, traj
