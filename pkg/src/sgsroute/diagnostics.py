"""Stability diagnostics built on the exponential Lyapunov function.

``W(x) = sum_n exp(nu * w_n . phi_n(x_n))`` uses the learned weights
themselves.  Negative one-step drift of ``W`` outside a bounded set of
states certifies positive recurrence of the routed chain; the remaining
helpers turn logged trajectories into the time averages and distances that
stochastic boundedness and convergence are stated in.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import comb

from .features import BasisSpec
from .policy import PROB_FLOOR
from .queueing import SystemConfig, Trajectory

log = logging.getLogger(__name__)

EXP_LIMIT = 700.0


def _exponents(basis: BasisSpec, w, nu: float, states: np.ndarray, shift: int = 0) -> np.ndarray:
    """``nu * w_n . phi_n(x_n + shift)`` for every state and server, shape (M, N)."""
    N, P = basis.n_servers, basis.P
    W = np.asarray(w, dtype=float).reshape(N, P)
    out = np.empty(states.shape, dtype=float)
    for n in range(N):
        vals = basis.server_values(n, states[:, n] + shift)
        out[:, n] = nu * (vals @ W[n])
    return out


def lyapunov_value(basis: BasisSpec, w, nu: float, state) -> float:
    """``W(x)``; returns ``inf`` when an exponent exceeds the overflow limit."""
    if not nu > 0:
        raise ValueError("nu must be positive")
    e = _exponents(basis, w, nu, np.asarray(state)[None, :])[0]
    if np.any(e > EXP_LIMIT):
        log.warning("Lyapunov exponent %.1f above %g at state %s", e.max(), EXP_LIMIT, list(state))
        return math.inf
    return float(np.exp(e).sum())


@dataclass
class _DriftParts:
    """The nu-independent pieces of the drift: linear values and routing law."""

    lin0: np.ndarray  # w_n . phi_n(x_n)
    lin_up: np.ndarray  # w_n . phi_n(x_n + 1)
    lin_dn: np.ndarray  # w_n . phi_n(x_n - 1), x_n clamped at 0
    pi: np.ndarray
    busy: np.ndarray
    rate: np.ndarray
    lam: float
    mu: np.ndarray


def _drift_parts(config: SystemConfig, basis: BasisSpec, w, iota: float, states: np.ndarray) -> _DriftParts:
    states = np.asarray(states, dtype=np.int64)
    N, P = basis.n_servers, basis.P
    W = np.asarray(w, dtype=float).reshape(N, P)
    top = int(states.max()) + 1 if states.size else 1
    tab = basis.tables(top)  # (N, top + 1, P)
    lin_tab = np.einsum("nxp,np->nx", tab, W)
    cols = np.arange(N)
    lin0 = lin_tab[cols, states]
    lin_up = lin_tab[cols, states + 1]
    lin_dn = lin_tab[cols, np.maximum(states - 1, 0)]
    # softmax routing over action scores w_a . (phi_a(x_a + 1) - phi_a(x_a))
    scores = lin_up - lin0
    z = np.maximum(np.exp(-(scores - scores.min(axis=1, keepdims=True)) / iota), PROB_FLOOR)
    pi = z / z.sum(axis=1, keepdims=True)
    mu = config.mu_array
    busy = states > 0
    return _DriftParts(lin0, lin_up, lin_dn, pi, busy, config.lam + busy @ mu, config.lam, mu)


def _scaled_drift(parts: _DriftParts, nu: float):
    """Drift divided by ``exp(m)``, ``m`` the largest exponent touched at each state.

    The scaling never overflows, so the sign is exact even where the drift
    itself does not fit in a float.  Returns ``(scaled, m)``.
    """
    e0, e_up, e_dn = nu * parts.lin0, nu * parts.lin_up, nu * parts.lin_dn
    e_dn = np.where(parts.busy, e_dn, e0)
    m = np.maximum(np.maximum(e0, e_up), e_dn).max(axis=1)
    up = _exp_diff(e0, e_up, m[:, None])
    dn = _exp_diff(e0, e_dn, m[:, None])
    return (parts.lam * (parts.pi * up).sum(axis=1) + (dn * parts.mu).sum(axis=1)) / parts.rate, m


def _exp_diff(a, b, m):
    """``exp(b - m) - exp(a - m)`` without overflow or cancellation, for ``a, b <= m``."""
    delta = b - a
    return np.sign(delta) * np.exp(np.maximum(a, b) - m) * -np.expm1(-np.abs(delta))


def _drift_from_parts(parts: _DriftParts, nu: float):
    scaled, m = _scaled_drift(parts, nu)
    flagged = m > EXP_LIMIT
    d = np.where(flagged, np.nan, scaled * np.exp(np.minimum(m, EXP_LIMIT)))
    return d, flagged


def drift_many(config: SystemConfig, basis: BasisSpec, w, iota: float, nu: float, states: np.ndarray):
    """Exact one-step drift of ``W`` under the softmax policy at each state.

    Returns ``(drift, flagged)``; states whose one-step neighbourhood would
    overflow ``exp`` are flagged and their drift set to ``nan``.
    """
    if not nu > 0:
        raise ValueError("nu must be positive")
    return _drift_from_parts(_drift_parts(config, basis, w, iota, states), nu)


def drift(config: SystemConfig, basis: BasisSpec, w, iota: float, nu: float, state) -> float:
    d, flagged = drift_many(config, basis, w, iota, nu, np.asarray(state)[None, :])
    if flagged[0]:
        log.warning("drift at %s overflows at nu=%g", list(state), nu)
    return float(d[0])


def mgf_terms(basis: BasisSpec, w, nu: float, states: np.ndarray) -> np.ndarray:
    """``g(x) = sum_n exp(nu * w_n . phi_{n+}(x_n))``; ``inf`` past the overflow limit."""
    states = np.asarray(states, dtype=np.int64)
    e = _exponents(basis, w, nu, states, shift=1) - _exponents(basis, w, nu, states)
    with np.errstate(over="ignore"):
        g = np.exp(e).sum(axis=1)
    g[np.any(e > EXP_LIMIT, axis=1)] = np.inf
    return g


def annulus_states(n_servers: int, lo: int, hi: int, max_states: int = 2_000_000, seed: int = 0) -> np.ndarray:
    """All states with ``lo <= ||x||_1 <= hi``, or a uniform sample when too many."""
    if not 0 <= lo <= hi:
        raise ValueError("need 0 <= lo <= hi")
    total = int(comb(hi + n_servers, n_servers, exact=True))
    if lo > 0:
        total -= int(comb(lo - 1 + n_servers, n_servers, exact=True))
    if total <= max_states:
        x = _states_up_to(n_servers, hi)
        return x[x.sum(axis=1) >= lo]
    rng = np.random.default_rng(seed)
    sums = np.arange(lo, hi + 1)
    weights = np.array([comb(s + n_servers - 1, n_servers - 1, exact=True) for s in sums], dtype=float)
    picked = rng.choice(sums, size=max_states, p=weights / weights.sum())
    out = np.empty((max_states, n_servers), dtype=np.int64)
    for i, s in enumerate(picked):
        # stars and bars: choose N-1 bar positions among s + N - 1 slots
        bars = np.sort(rng.choice(s + n_servers - 1, size=n_servers - 1, replace=False))
        edges = np.concatenate([[-1], bars, [s + n_servers - 1]])
        out[i] = np.diff(edges) - 1
    return out


def _states_up_to(n: int, hi: int) -> np.ndarray:
    """Every ``x`` in ``Z_{>=0}^n`` with ``sum(x) <= hi``, lexicographic order."""
    x = np.zeros((1, 0), dtype=np.int64)
    for _ in range(n):
        room = hi - x.sum(axis=1)
        counts = room + 1
        rows = np.repeat(x, counts, axis=0)
        starts = np.repeat(np.cumsum(counts) - counts, counts)
        new = np.arange(rows.shape[0]) - starts
        x = np.column_stack([rows, new])
    return x


@dataclass
class DriftReport:
    nu: float
    checked_range: tuple[int, int]
    max_drift_outside: float
    b_w_est: float
    b_e_est: float
    passed: bool
    n_checked: int
    n_flagged: int
    argmax_state: tuple[int, ...] | None = None

    def to_dict(self) -> dict:
        return {
            "nu": self.nu,
            "checked_range": list(self.checked_range),
            "max_drift_outside": self.max_drift_outside,
            "b_w_est": self.b_w_est,
            "b_e_est": self.b_e_est,
            "pass": self.passed,
            "n_checked": self.n_checked,
            "n_flagged": self.n_flagged,
            "argmax_state": list(self.argmax_state) if self.argmax_state else None,
        }


def default_nu_grid(n: int = 24) -> np.ndarray:
    return 1e-4 * 2.0 ** np.arange(n)


def _report(parts, parts0, nu, states, b_l, x_check) -> DriftReport:
    scaled, m = _scaled_drift(parts, nu)
    flagged = m > EXP_LIMIT
    d0 = float(_drift_from_parts(parts0, nu)[0][0])
    # overflowing states keep their exact sign as +-inf, so the verdict covers them too
    d = np.where(flagged, np.where(scaled < 0, -np.inf, np.inf), scaled * np.exp(np.minimum(m, EXP_LIMIT)))
    i = int(np.argmax(d))
    ok = ~flagged
    b_e = math.nan
    if ok.any():
        g = np.exp(nu * (parts.lin_up - parts.lin0)[ok]).sum(axis=1)
        # drift <= -b_e * g(x) on the non-overflowing part of the checked set
        b_e = float(np.min(-d[ok] / g))
    return DriftReport(nu, (b_l, x_check), float(d[i]), d0 + 1, b_e, bool(d[i] < 0),
                       int(states.shape[0]), int(flagged.sum()), tuple(int(v) for v in states[i]))


def drift_report(config, basis, w, iota, nu, states, b_l=None, x_check=None) -> DriftReport:
    """Drift summary at one ``nu`` over an explicit set of states."""
    states = np.asarray(states, dtype=np.int64)
    tot = states.sum(axis=1)
    b_l = int(tot.min()) if b_l is None else b_l
    x_check = int(tot.max()) if x_check is None else x_check
    parts = _drift_parts(config, basis, w, iota, states)
    parts0 = _drift_parts(config, basis, w, iota, np.zeros((1, config.n_servers), dtype=np.int64))
    return _report(parts, parts0, float(nu), states, b_l, x_check)


def find_nu(config: SystemConfig, basis: BasisSpec, w, iota: float, b_l: int = 20, x_check: int = 200,
            grid=None, max_states: int = 2_000_000, seed: int = 0) -> DriftReport:
    """Search ``nu`` over a doubling grid for a negative-drift certificate on an annulus.

    Every state with ``b_l <= ||x||_1 <= x_check`` (or a uniform sample of
    ``max_states`` of them) must have strictly negative drift.  The first
    passing ``nu`` is returned; otherwise the attempt with the smallest
    maximal drift.  States whose drift overflows are judged by its exact sign
    and counted in ``n_flagged``.
    """
    states = annulus_states(config.n_servers, b_l, x_check, max_states, seed)
    grid = default_nu_grid() if grid is None else np.asarray(grid, dtype=float)
    parts = _drift_parts(config, basis, w, iota, states)
    parts0 = _drift_parts(config, basis, w, iota, np.zeros((1, config.n_servers), dtype=np.int64))
    best = None
    for nu in grid:
        rep = _report(parts, parts0, float(nu), states, b_l, x_check)
        if rep.n_flagged:
            log.info("nu=%g: %d of %d states overflow; checked by sign only", nu, rep.n_flagged, len(states))
        if rep.passed:
            best = rep
            break
        if best is None or rep.max_drift_outside < best.max_drift_outside:
            best = rep
    if best.n_flagged:
        log.info("drift at nu=%g overflows on %d states; their sign was checked, magnitudes not reported",
                    best.nu, best.n_flagged)
    return best


@dataclass
class MGFSeries:
    running_mean: np.ndarray
    truncated_at: int | None = None

    @property
    def final(self) -> float:
        return float(self.running_mean[-1]) if self.running_mean.size else math.nan


def mgf_time_average(traj: Trajectory, basis: BasisSpec, w, nu: float) -> MGFSeries:
    """Running mean over epochs of ``g(x[k])``; stops at the first overflow."""
    if len(traj.states) == 0:
        raise ValueError("trajectory is empty")
    states = traj.states[:-1] if len(traj) else traj.states
    g = mgf_terms(basis, w, nu, states)
    bad = np.flatnonzero(~np.isfinite(g))
    cut = None
    if bad.size:
        cut = int(bad[0])
        log.warning("MGF term overflows at epoch %d; series truncated", cut)
        g = g[:cut]
    return MGFSeries(np.cumsum(g) / np.arange(1, g.size + 1), cut)


@dataclass
class StabilityMetrics:
    window_mean: np.ndarray
    cumulative_mean: np.ndarray
    time_average: float


def stability_metrics(traj: Trajectory, window: int) -> StabilityMetrics:
    """Holding-time weighted means of ``||x||_1`` per window and cumulatively."""
    if window < 1:
        raise ValueError("window must be >= 1")
    if len(traj) == 0:
        return StabilityMetrics(np.zeros(0), np.zeros(0), 0.0)
    q = traj.states[:-1].sum(axis=1).astype(float)
    dt = traj.dt
    qdt = q * dt
    m = len(traj) // window
    wq = qdt[: m * window].reshape(m, window).sum(axis=1)
    wt = dt[: m * window].reshape(m, window).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        window_mean = np.where(wt > 0, wq / wt, 0.0)
        ct = np.cumsum(dt)
        cum = np.where(ct > 0, np.cumsum(qdt) / ct, 0.0)
    return StabilityMetrics(window_mean, cum, float(cum[-1]))


def tv_window_distance(traj: Trajectory, window: int) -> np.ndarray:
    """Total-variation distance between empirical state laws of consecutive windows."""
    if window < 1000:
        raise ValueError("window must be >= 1000 epochs")
    states = traj.states[:-1] if len(traj) else traj.states[:0]
    m = states.shape[0] // window
    if m < 2:
        return np.zeros(0)
    _, label = np.unique(states[: m * window], axis=0, return_inverse=True)
    label = label.reshape(m, window)
    K = int(label.max()) + 1
    hists = np.stack([np.bincount(row, minlength=K) for row in label]) / window
    return 0.5 * np.abs(np.diff(hists, axis=0)).sum(axis=1)


@dataclass
class ConvergenceTrace:
    distance: np.ndarray
    decay_rate: float | None


def weight_convergence(trace, target, steps=None) -> ConvergenceTrace:
    """``||w[k] - target||_2`` per snapshot, plus an exponential decay-rate fit.

    The rate is the negative slope of ``log distance`` against the snapshot
    index (or ``steps`` when given) over the longest initial stretch where
    the distance keeps falling.
    """
    W = np.atleast_2d(np.asarray(trace, dtype=float))
    target = np.asarray(target, dtype=float)
    if W.shape[1] != target.size:
        raise ValueError(f"snapshots have dimension {W.shape[1]}, target has {target.size}")
    dist = np.linalg.norm(W - target, axis=1)
    x = np.arange(dist.size, dtype=float) if steps is None else np.asarray(steps, dtype=float)
    end = 1
    while end < dist.size and dist[end] < dist[end - 1]:
        end += 1
    rate = None
    if end >= 2 and np.all(dist[:end] > 0):
        slope = np.polyfit(x[:end], np.log(dist[:end]), 1)[0]
        rate = float(-slope)
    return ConvergenceTrace(dist, rate)
