"""Routing policies: Boltzmann over approximate values, its greedy limit, JSQ and Bernoulli splitting."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .features import BasisSpec, action_scores

# kind codes shared with the compiled kernels
SOFTMAX, GREEDY, JSQ_CODE, BERNOULLI = 0, 1, 2, 3


@dataclass(frozen=True)
class Softmax:
    iota: float = 0.01

    def __post_init__(self):
        if not self.iota > 0:
            raise ValueError(f"temperature must be > 0, got {self.iota}")


@dataclass(frozen=True)
class Greedy:
    pass


@dataclass(frozen=True)
class JSQ:
    pass


@dataclass(frozen=True)
class Bernoulli:
    p: tuple[float, ...]

    def __post_init__(self):
        p = tuple(float(v) for v in self.p)
        object.__setattr__(self, "p", p)
        if any(v < 0 for v in p) or abs(sum(p) - 1.0) > 1e-12:
            raise ValueError(f"Bernoulli split must be a probability vector, got {p}")

    @classmethod
    def proportional(cls, mu: Sequence[float]) -> "Bernoulli":
        mu = np.asarray(mu, dtype=float)
        p = mu / mu.sum()
        p[-1] = 1.0 - p[:-1].sum()
        return cls(tuple(p))


PolicyParams = Softmax | Greedy | JSQ | Bernoulli


def policy_from_dict(d: dict, n_servers: int, mu: Sequence[float] | None = None) -> PolicyParams:
    kind = d.get("kind")
    allowed = {"softmax": {"kind", "iota"}, "greedy": {"kind"}, "jsq": {"kind"}, "bernoulli": {"kind", "p"}}
    if kind not in allowed:
        raise ValueError(f"unknown policy kind {kind!r}")
    extra = set(d) - allowed[kind]
    if extra:
        raise ValueError(f"unknown keys for {kind} policy: {sorted(extra)}")
    if kind == "softmax":
        return Softmax(float(d.get("iota", 0.01)))
    if kind == "greedy":
        return Greedy()
    if kind == "jsq":
        return JSQ()
    p = d.get("p", "proportional")
    if p == "proportional":
        if mu is None:
            raise ValueError("proportional Bernoulli split needs service rates")
        return Bernoulli.proportional(mu)
    if len(p) != n_servers:
        raise ValueError(f"Bernoulli split needs {n_servers} entries")
    return Bernoulli(tuple(p))


def policy_to_dict(policy: PolicyParams) -> dict:
    if isinstance(policy, Softmax):
        return {"kind": "softmax", "iota": policy.iota}
    if isinstance(policy, Bernoulli):
        return {"kind": "bernoulli", "p": list(policy.p)}
    return {"kind": "greedy" if isinstance(policy, Greedy) else "jsq"}


def encode_policy(policy: PolicyParams, n_servers: int) -> tuple[int, float, np.ndarray]:
    """(kind code, temperature, split vector) for the compiled kernels."""
    if isinstance(policy, Softmax):
        return SOFTMAX, policy.iota, np.zeros(n_servers)
    if isinstance(policy, Greedy):
        return GREEDY, 1.0, np.zeros(n_servers)
    if isinstance(policy, JSQ):
        return JSQ_CODE, 1.0, np.zeros(n_servers)
    return BERNOULLI, 1.0, np.asarray(policy.p, dtype=float)


# floor on unnormalised softmax weights so that no action ever gets exactly zero mass
PROB_FLOOR = np.finfo(float).tiny


def softmax_from_scores(scores: np.ndarray, iota: float) -> np.ndarray:
    """Boltzmann weights ``exp(-s/iota)`` normalised, shifted by ``min(s)``."""
    z = np.maximum(np.exp(-(scores - scores.min()) / iota), PROB_FLOOR)
    return z / z.sum()


def action_probabilities(policy: PolicyParams, basis: BasisSpec | None, w, state) -> np.ndarray:
    x = np.asarray(state)
    N = x.size
    if isinstance(policy, JSQ):
        p = np.zeros(N)
        p[int(np.argmin(x))] = 1.0
        return p
    if isinstance(policy, Bernoulli):
        return np.asarray(policy.p, dtype=float)
    if basis is None or w is None:
        raise ValueError("value-based policies need a basis and weights")
    scores = action_scores(basis, w, x)
    if isinstance(policy, Greedy):
        p = np.zeros(N)
        p[int(np.argmin(scores))] = 1.0
        return p
    return softmax_from_scores(scores, policy.iota)


def action_from_uniform(probs: np.ndarray, u: float) -> int:
    """Inverse-CDF draw; never returns a zero-probability action."""
    c = 0.0
    last = 0
    for a, p in enumerate(probs):
        if p > 0:
            last = a
            c += p
            if u < c:
                return a
    return last


def sample_action(policy: PolicyParams, basis: BasisSpec | None, w, state, rng) -> int:
    """Draw one action; ``rng`` is a ``RandomStreams`` or a numpy ``Generator``."""
    u = rng.next("action") if hasattr(rng, "next") else float(rng.random())
    return action_from_uniform(action_probabilities(policy, basis, w, state), u)


def action_source(policy: PolicyParams, basis: BasisSpec | None = None, w=None):
    """Adapter for :func:`sgsroute.queueing.simulate_trajectory`."""
    w = None if w is None else np.asarray(w, dtype=float).copy()

    def source(x, u):
        return action_from_uniform(action_probabilities(policy, basis, w, x), u)

    return source


def lipschitz_probe(basis: BasisSpec, states, w, w_other, iota: float) -> float:
    """Largest observed ``|pi_w(a|x) - pi_w'(a|x)| / ||w - w'||`` over ``states``.

    A lower bound on the policy's Lipschitz constant in ``w``.
    """
    w = np.asarray(w, dtype=float)
    w_other = np.asarray(w_other, dtype=float)
    dist = float(np.linalg.norm(w - w_other))
    if dist == 0.0:
        raise ValueError("the two weight vectors must differ")
    pol = Softmax(iota)
    best = 0.0
    for x in states:
        gap = np.abs(action_probabilities(pol, basis, w, x) - action_probabilities(pol, basis, w_other, x))
        best = max(best, float(gap.max()))
    return best / dist
