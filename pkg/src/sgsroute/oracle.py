"""Exact computations on a buffer-truncated copy of the routing MDP.

States are all vectors in ``{0..x_max}^N`` enumerated lexicographically.
An arrival routed to a full server is blocked and becomes a self-loop, so
every row stays stochastic.  Expected one-step costs use the mean holding
time ``1/rate`` rather than a sampled one.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .features import BasisSpec
from .learner import CostModel
from .policy import PROB_FLOOR
from .queueing import SystemConfig

log = logging.getLogger(__name__)

MAX_STATES = 10**7


class OracleError(RuntimeError):
    pass


@dataclass
class TruncatedMDP:
    config: SystemConfig
    x_max: int
    states: np.ndarray  # (S, N) int
    kernels: list  # per action, sparse (S, S) row-stochastic
    expected_cost: np.ndarray  # (S, N)
    rates: np.ndarray  # (S,)

    @property
    def n_states(self) -> int:
        return self.states.shape[0]

    @property
    def n_actions(self) -> int:
        return len(self.kernels)

    def index(self, state) -> int:
        idx = 0
        for v in state:
            idx = idx * (self.x_max + 1) + int(v)
        return idx

    def boundary_mask(self) -> np.ndarray:
        return np.any(self.states == self.x_max, axis=1)

    def boundary_mass(self, d: np.ndarray) -> float:
        return float(d[self.boundary_mask()].sum())

    def policy_kernel(self, policy_table: np.ndarray) -> sp.csr_matrix:
        P = sp.csr_matrix((self.n_states, self.n_states))
        for a, K in enumerate(self.kernels):
            P = P + sp.diags(policy_table[:, a]) @ K
        return P.tocsr()

    def feature_matrices(self, basis: BasisSpec) -> np.ndarray:
        """``F[a, s, :] = phi(states[s], a)``."""
        N, P = basis.n_servers, basis.P
        tab = basis.tables(self.x_max + 1)  # (N, x_max + 2, P)
        base = np.concatenate([tab[n, self.states[:, n]] for n in range(N)], axis=1)
        F = np.repeat(base[None], N, axis=0)
        for a in range(N):
            F[a][:, a * P:(a + 1) * P] = tab[a, self.states[:, a] + 1]
        return F


def build_truncated(config: SystemConfig, cost: CostModel, x_max: int) -> TruncatedMDP:
    if x_max < 1:
        raise ValueError("x_max must be >= 1")
    N = config.n_servers
    S = (x_max + 1) ** N
    if S > MAX_STATES:
        need = S * N * (N + 2) * 16 / 2**30
        raise OracleError(f"{S} states exceed the limit of {MAX_STATES} (roughly {need:.1f} GiB of kernels)")
    states = np.array(list(itertools.product(range(x_max + 1), repeat=N)), dtype=np.int64).reshape(S, N)
    mu = config.mu_array
    rates = config.lam + (states > 0) @ mu
    stride = (x_max + 1) ** np.arange(N - 1, -1, -1)
    idx = np.arange(S)
    c_state = cost.rate_many(states)

    dep_rows, dep_cols, dep_p = [], [], []
    dep_cost = np.zeros(S)
    for n in range(N):
        busy = states[:, n] > 0
        dep_rows.append(idx[busy])
        dep_cols.append(idx[busy] - stride[n])
        p = mu[n] / rates[busy]
        dep_p.append(p)
        dep_cost[busy] += p * c_state[idx[busy] - stride[n]]
    dep_rows = np.concatenate(dep_rows)
    dep_cols = np.concatenate(dep_cols)
    dep_p = np.concatenate(dep_p)

    kernels = []
    exp_cost = np.empty((S, N))
    p_arr = config.lam / rates
    for a in range(N):
        full = states[:, a] == x_max
        arr_cols = np.where(full, idx, idx + stride[a])
        rows = np.concatenate([idx, dep_rows])
        cols = np.concatenate([arr_cols, dep_cols])
        vals = np.concatenate([p_arr, dep_p])
        K = sp.csr_matrix((vals, (rows, cols)), shape=(S, S))
        kernels.append(K)
        exp_cost[:, a] = (p_arr * c_state[arr_cols] + dep_cost) / rates
    return TruncatedMDP(config, x_max, states, kernels, exp_cost, rates)


def value_iteration(mdp: TruncatedMDP, gamma: float, tol: float = 1e-10, max_iter: int = 100_000,
                    residuals: list | None = None) -> np.ndarray:
    """Optimal state-action costs ``Q*`` (shape ``(S, N)``) to sup-norm accuracy ``tol``."""
    if not 0 <= gamma < 1:
        raise ValueError("gamma must lie in [0, 1)")
    q = mdp.expected_cost.copy()
    if gamma == 0:
        return q
    stop = tol * (1 - gamma) / gamma
    for _ in range(max_iter):
        v = q.min(axis=1)
        q_new = mdp.expected_cost + gamma * np.column_stack([K @ v for K in mdp.kernels])
        res = float(np.max(np.abs(q_new - q)))
        q = q_new
        if residuals is not None:
            residuals.append(res)
        if res <= stop:
            return q
    raise OracleError(f"value iteration did not converge in {max_iter} sweeps (residual {res:.3e})")


def greedy_policy(q: np.ndarray) -> np.ndarray:
    """Argmin per state; ``np.argmin`` keeps the lowest index on ties."""
    return np.argmin(q, axis=1)


def deterministic_table(actions: np.ndarray, n_actions: int) -> np.ndarray:
    table = np.zeros((actions.size, n_actions))
    table[np.arange(actions.size), actions] = 1.0
    return table


def softmax_table(mdp: TruncatedMDP, basis: BasisSpec, w, iota: float) -> np.ndarray:
    """``pi_w(a|x)`` for every enumerated state."""
    N, P = basis.n_servers, basis.P
    W = np.asarray(w, dtype=float).reshape(N, P)
    tab = basis.tables(mdp.x_max + 1)
    scores = np.column_stack(
        [(tab[n, mdp.states[:, n] + 1] - tab[n, mdp.states[:, n]]) @ W[n] for n in range(N)]
    )
    z = np.maximum(np.exp(-(scores - scores.min(axis=1, keepdims=True)) / iota), PROB_FLOOR)
    return z / z.sum(axis=1, keepdims=True)


def stationary_distribution(mdp: TruncatedMDP, policy_table: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Invariant law of the epoch-indexed chain under a stochastic policy table.

    Solved directly (one balance equation replaced by normalisation), which
    is insensitive to the near-periodicity of the jump chain.
    """
    if not np.allclose(policy_table.sum(axis=1), 1.0, atol=1e-12) or np.any(policy_table < 0):
        raise ValueError("policy rows must be probability vectors")
    P = mdp.policy_kernel(policy_table)
    S = mdp.n_states
    A = (P.T - sp.identity(S, format="csr")).tolil()
    A[0, :] = np.ones(S)
    b = np.zeros(S)
    b[0] = 1.0
    with np.errstate(all="raise"):
        try:
            d = spla.spsolve(A.tocsc(), b)
        except (RuntimeError, FloatingPointError) as exc:
            raise OracleError("stationary system is singular (more than one recurrent class?)") from exc
    if not np.all(np.isfinite(d)):
        raise OracleError("stationary system is singular (more than one recurrent class?)")
    d = np.where(np.abs(d) < 1e-15, 0.0, d)
    if d.min() < -1e-9:
        raise OracleError(f"stationary solve returned negative mass {d.min():.3e}")
    d = np.clip(d, 0.0, None)
    d /= d.sum()
    res = float(np.abs(P.T @ d - d).sum())
    if res > max(tol, 1e-9):
        raise OracleError(f"stationary residual {res:.3e} above tolerance")
    return d


def time_stationary(mdp: TruncatedMDP, d: np.ndarray) -> np.ndarray:
    """Convert an epoch-stationary law into the fraction of time spent per state."""
    t = d / mdp.rates
    return t / t.sum()


@dataclass
class Projection:
    w: np.ndarray
    residual: float
    condition: float


def _dependent_columns(M: np.ndarray) -> list[int]:
    _, R, piv = scipy.linalg.qr(M, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = diag.max() * max(M.shape) * np.finfo(float).eps if diag.size else 0.0
    rank = int(np.sum(diag > tol))
    # with fewer rows than columns every pivot past the rank is dependent too
    return sorted(int(c) for c in piv[rank:])


def weighted_lstsq(F: np.ndarray, y: np.ndarray, weights: np.ndarray) -> Projection:
    keep = weights > 0
    sw = np.sqrt(weights[keep])
    M = F[keep] * sw[:, None]
    t = y[keep] * sw
    s = np.linalg.svd(M, compute_uv=False)
    rank = int(np.sum(s > s[0] * max(M.shape) * np.finfo(float).eps)) if s.size else 0
    if rank < F.shape[1]:
        raise OracleError(f"weighted feature matrix is rank deficient; dependent columns {_dependent_columns(M)}")
    w, *_ = np.linalg.lstsq(M, t, rcond=None)
    resid = float(np.linalg.norm(M @ w - t))
    return Projection(w, resid, float(s[0] / s[-1]))


def optimal_weights(mdp: TruncatedMDP, q: np.ndarray, policy_table: np.ndarray, d: np.ndarray,
                    basis: BasisSpec) -> Projection:
    """Weighted least-squares fit of ``Q`` onto the features, weights ``d(x) pi(a|x)``."""
    F = mdp.feature_matrices(basis)  # (A, S, D)
    A, S, D = F.shape
    rows = F.reshape(A * S, D)
    y = q.T.reshape(A * S)
    weights = (policy_table * d[:, None]).T.reshape(A * S)
    return weighted_lstsq(rows, y, weights)


@dataclass
class FixedPoint:
    w: np.ndarray
    residual: float
    iterations: int
    boundary_mass: float
    d: np.ndarray
    policy_table: np.ndarray


def mean_update_parts(mdp: TruncatedMDP, basis: BasisSpec, gamma: float, policy_table: np.ndarray,
                      d: np.ndarray, F: np.ndarray | None = None):
    """Stationary averages ``(g_bar, r_bar)`` of the semi-gradient direction."""
    F = mdp.feature_matrices(basis) if F is None else F
    A, S, D = F.shape
    # expected next-epoch feature: sum_x' p(x'|x,a) sum_a' pi(a'|x') phi(x',a')
    nxt_feat = np.einsum("sa,asd->sd", policy_table, F)
    g = np.zeros((D, D))
    r = np.zeros(D)
    for a in range(A):
        wgt = d * policy_table[:, a]
        boot = mdp.kernels[a] @ nxt_feat
        Fa = F[a] * wgt[:, None]
        g += Fa.T @ (gamma * boot - F[a])
        r += Fa.T @ mdp.expected_cost[:, a]
    return g, r


def sarsa_fixed_point(mdp: TruncatedMDP, basis: BasisSpec, gamma: float, iota: float, w_init=None,
                      tol: float = 1e-10, max_iter: int = 500, damping: float = 1.0) -> FixedPoint:
    """Weights at which the stationary mean SARSA(0) update vanishes.

    Iterates ``w <- solve(g_bar(w), -r_bar(w))`` with ``g_bar, r_bar``
    averaged under the law induced by the softmax policy of the current
    ``w``.  ``damping < 1`` mixes the new solution with the old iterate.
    """
    F = mdp.feature_matrices(basis)
    D = basis.dim
    w = np.zeros(D) if w_init is None else np.array(w_init, dtype=float)
    for it in range(1, max_iter + 1):
        pt = softmax_table(mdp, basis, w, iota)
        d = stationary_distribution(mdp, pt)
        g, r = mean_update_parts(mdp, basis, gamma, pt, d, F)
        try:
            w_sol = np.linalg.solve(g, -r)
        except np.linalg.LinAlgError as exc:
            ev = np.linalg.eigvals(g)
            raise OracleError(f"mean update matrix is singular; eigenvalues {np.sort_complex(ev)}") from exc
        w_next = (1 - damping) * w + damping * w_sol
        step = float(np.linalg.norm(w_next - w))
        w = w_next
        if not np.all(np.isfinite(w)):
            raise OracleError("fixed-point iteration diverged")
        if step <= tol:
            break
    else:
        ev = np.linalg.eigvals(g)
        raise OracleError(f"no fixed point after {max_iter} iterations (last step {step:.3e}, "
                          f"max Re eig {ev.real.max():.3e})")
    pt = softmax_table(mdp, basis, w, iota)
    d = stationary_distribution(mdp, pt)
    g, r = mean_update_parts(mdp, basis, gamma, pt, d, F)
    return FixedPoint(w, float(np.linalg.norm(g @ w + r)), it, mdp.boundary_mass(d), d, pt)
