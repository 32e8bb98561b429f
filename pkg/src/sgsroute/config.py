"""Run configuration files.

A run is described by one YAML document::

    system:   {lam: 2.0, mu: [0.5, 2.5, 5.0]}
    basis:    paper                 # or {uniform: [...], highest: 3} / {per_server: [[...], ...]}
    cost:     {kind: aggregate_log} # or {kind: separable, uniform: {kind: power, exponent: 1}}
    policy:   {kind: softmax, iota: 0.01}
    learner:  {gamma: 0.99, w_l: 0.05, eps_l: 0.001, alpha0: 0.005, tau: 1.0e+5,
               init_low: 0.0, init_high: 1.0, w_ceiling: 1.0e+9}
    horizon: 2000000
    eval_horizon: 1000000
    replications: 10
    seed: 0
    snapshot_every: 10000
    output: runs/paper_n3
    compare: [sgs, jsq, bernoulli]
    oracle:   {x_max: 8, gamma: 0.9}
    diagnostics: {b_l: 20, x_check: 200, window: 100000}

Every section except ``system`` has defaults.  Unknown keys at any level
raise :class:`ConfigError`.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .features import BasisSpec, paper_basis
from .learner import CostModel, LearnerState, StepSchedule, cost_from_dict, cost_to_dict, initial_weights
from .policy import PolicyParams, Softmax, policy_from_dict, policy_to_dict
from .queueing import SystemConfig


class ConfigError(ValueError):
    pass


LEARNER_DEFAULTS = {
    "gamma": 0.99,
    "w_l": 0.05,
    "eps_l": 1e-3,
    "alpha0": StepSchedule.alpha0,
    "tau": StepSchedule.tau,
    "init_low": 0.0,
    "init_high": 1.0,
    "w_ceiling": 1e9,
}
ORACLE_DEFAULTS = {"x_max": 8, "gamma": 0.9, "tol": 1e-10}
DIAGNOSTICS_DEFAULTS = {"b_l": 20, "x_check": 200, "window": 100_000, "assumption_scope": "H", "assumption_x_max": 10_000}
TOP_KEYS = {
    "system", "basis", "cost", "policy", "learner", "horizon", "eval_horizon", "replications", "seed",
    "snapshot_every", "output", "compare", "oracle", "diagnostics", "expected_holding", "save_trajectory",
}
POLICY_NAMES = ("sgs", "greedy", "jsq", "bernoulli")


@dataclass(frozen=True)
class LearnerInit:
    gamma: float
    w_l: float
    eps_l: float
    alpha0: float
    tau: float
    init_low: float
    init_high: float
    w_ceiling: float

    def learner_state(self, basis: BasisSpec, rng: np.random.Generator) -> LearnerState:
        w0 = initial_weights(basis, rng, self.w_l, self.eps_l, self.init_low, self.init_high)
        return LearnerState(w0, gamma=self.gamma, w_l=self.w_l, eps_l=self.eps_l,
                            schedule=StepSchedule(self.alpha0, self.tau))


@dataclass(frozen=True)
class RunConfig:
    system: SystemConfig
    basis: BasisSpec
    cost: CostModel
    policy: PolicyParams
    learner: LearnerInit
    horizon: int = 2_000_000
    eval_horizon: int = 1_000_000
    replications: int = 1
    seed: int = 0
    snapshot_every: int = 10_000
    output: str = "runs/default"
    compare: tuple[str, ...] = ("sgs", "jsq", "bernoulli")
    oracle: dict = field(default_factory=lambda: dict(ORACLE_DEFAULTS))
    diagnostics: dict = field(default_factory=lambda: dict(DIAGNOSTICS_DEFAULTS))
    expected_holding: bool = False
    save_trajectory: str | None = None
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def iota(self) -> float:
        return self.policy.iota if isinstance(self.policy, Softmax) else Softmax().iota

    def to_dict(self) -> dict:
        return {
            "system": {"lam": self.system.lam, "mu": list(self.system.mu)},
            "basis": self.basis.to_dict(),
            "cost": cost_to_dict(self.cost),
            "policy": policy_to_dict(self.policy),
            "learner": dict(self.learner.__dict__),
            "horizon": self.horizon,
            "eval_horizon": self.eval_horizon,
            "replications": self.replications,
            "seed": self.seed,
            "snapshot_every": self.snapshot_every,
            "output": self.output,
            "compare": list(self.compare),
            "oracle": dict(self.oracle),
            "diagnostics": dict(self.diagnostics),
            "expected_holding": self.expected_holding,
            "save_trajectory": self.save_trajectory,
        }

    def digest(self) -> str:
        """SHA-256 of the canonical (sorted-key JSON) form of the resolved config."""
        blob = json.dumps(self.to_dict(), sort_keys=True, default=float).encode()
        return hashlib.sha256(blob).hexdigest()

    def with_overrides(self, seed: int | None = None, output: str | None = None) -> "RunConfig":
        raw = copy.deepcopy(self.raw)
        if seed is not None:
            raw["seed"] = seed
        if output is not None:
            raw["output"] = output
        return parse_config(raw)


def _section(raw: dict, name: str, defaults: dict) -> dict:
    given = raw.get(name) or {}
    if not isinstance(given, dict):
        raise ConfigError(f"{name}: expected a mapping")
    extra = set(given) - set(defaults)
    if extra:
        raise ConfigError(f"{name}: unknown keys {sorted(extra)}")
    out = dict(defaults)
    out.update(given)
    return out


def _int(raw: dict, key: str, default: int, minimum: int = 0) -> int:
    v = raw.get(key, default)
    if isinstance(v, bool) or not isinstance(v, (int, float)) or int(v) != v:
        raise ConfigError(f"{key}: expected an integer, got {v!r}")
    if v < minimum:
        raise ConfigError(f"{key}: must be >= {minimum}")
    return int(v)


def parse_config(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping at top level")
    extra = set(raw) - TOP_KEYS
    if extra:
        raise ConfigError(f"unknown top-level keys {sorted(extra)}")
    if "system" not in raw:
        raise ConfigError("system: section is required")
    sysd = raw["system"]
    try:
        if set(sysd) - {"lam", "mu"}:
            raise ConfigError(f"system: unknown keys {sorted(set(sysd) - {'lam', 'mu'})}")
        seed = _int(raw, "seed", 0)
        system = SystemConfig(float(sysd["lam"]), tuple(float(m) for m in sysd["mu"]), seed)
        N = system.n_servers
        bd = raw.get("basis", "paper")
        basis = paper_basis(N) if bd == "paper" else BasisSpec.from_dict(bd, N)
        if basis.n_servers != N:
            raise ConfigError(f"basis: defined for {basis.n_servers} servers, system has {N}")
        cost = cost_from_dict(raw.get("cost", {"kind": "aggregate_log"}), N)
        policy = policy_from_dict(raw.get("policy", {"kind": "softmax", "iota": 0.01}), N, system.mu)
        ld = _section(raw, "learner", LEARNER_DEFAULTS)
        learner = LearnerInit(**{k: float(v) for k, v in ld.items()})
        if not 0 <= learner.gamma < 1 or learner.w_l <= 0 or learner.alpha0 <= 0 or learner.tau <= 0:
            raise ConfigError("learner: need 0 <= gamma < 1 and positive w_l, alpha0, tau")
        compare = tuple(raw.get("compare", ("sgs", "jsq", "bernoulli")))
        bad = [c for c in compare if c not in POLICY_NAMES]
        if bad:
            raise ConfigError(f"compare: unknown policy names {bad}; choose from {list(POLICY_NAMES)}")
        save_traj = raw.get("save_trajectory")
        if save_traj not in (None, "jsonl", "npz"):
            raise ConfigError("save_trajectory: expected jsonl, npz or null")
        return RunConfig(
            system=system,
            basis=basis,
            cost=cost,
            policy=policy,
            learner=learner,
            horizon=_int(raw, "horizon", 2_000_000),
            eval_horizon=_int(raw, "eval_horizon", 1_000_000, 1),
            replications=_int(raw, "replications", 1, 1),
            seed=seed,
            snapshot_every=_int(raw, "snapshot_every", 10_000, 1),
            output=str(raw.get("output", "runs/default")),
            compare=compare,
            oracle=_section(raw, "oracle", ORACLE_DEFAULTS),
            diagnostics=_section(raw, "diagnostics", DIAGNOSTICS_DEFAULTS),
            expected_holding=bool(raw.get("expected_holding", False)),
            save_trajectory=save_traj,
            raw=copy.deepcopy(raw),
        )
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    return parse_config(raw)


PRESETS = {
    "paper_n3": {
        "system": {"lam": 2.0, "mu": [0.5, 2.5, 5.0]},
        "basis": "paper",
        "cost": {"kind": "aggregate_log"},
        "policy": {"kind": "softmax", "iota": 0.01},
        "horizon": 2_000_000,
        "eval_horizon": 1_000_000,
        "replications": 10,
        "output": "runs/paper_n3",
    },
    "toy_n2": {
        "system": {"lam": 0.5, "mu": [1.0, 1.0]},
        "basis": "paper",
        "cost": {"kind": "separable", "uniform": {"kind": "power", "exponent": 1.0}},
        "policy": {"kind": "softmax", "iota": 1.0},
        "learner": {"gamma": 0.9, "alpha0": 0.01},
        "horizon": 1_000_000,
        "output": "runs/toy_n2",
        "oracle": {"x_max": 8, "gamma": 0.9},
    },
}


def preset(name: str) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return parse_config(copy.deepcopy(PRESETS[name]))
