"""Linear basis functions over per-server queue lengths.

A feature vector for state ``x`` and routing action ``a`` stacks, server by
server, the basis functions evaluated at the post-routing queue length
``x_n + 1{n == a}``.  The flat layout is ``(n, j)`` with ``j`` running
fastest, so weight ``w[n * P + j]`` multiplies ``phi_{n,j}``.

Only three parametric families are supported; each knows its closed-form
first three derivatives so that the growth conditions on the
highest-degree basis can be checked without finite differences.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .queueing import SystemConfig

# family codes shared with the compiled kernels
POWER, AFFINE_POWER, LOG = 0, 1, 2


class FeatureError(ArithmeticError):
    """A basis evaluation produced a non-finite value."""


@dataclass(frozen=True)
class Power:
    """``x ** exponent`` with ``0 ** p == 0``."""

    exponent: float

    def __post_init__(self):
        if not self.exponent > 0:
            raise ValueError(f"Power exponent must be > 0, got {self.exponent}")

    code = POWER

    @property
    def params(self) -> tuple[float, float]:
        return 0.0, self.exponent

    @property
    def growth(self) -> float:
        return self.exponent

    def value(self, x):
        return np.power(np.asarray(x, dtype=float), self.exponent)

    def derivative(self, x, order: int = 1):
        return _power_derivative(np.asarray(x, dtype=float), self.exponent, order)


@dataclass(frozen=True)
class AffinePower:
    """``constant + x ** exponent``."""

    constant: float
    exponent: float

    def __post_init__(self):
        if not self.exponent > 0:
            raise ValueError(f"AffinePower exponent must be > 0, got {self.exponent}")
        if self.constant < 0:
            raise ValueError(f"AffinePower constant must be >= 0, got {self.constant}")

    code = AFFINE_POWER

    @property
    def params(self) -> tuple[float, float]:
        return self.constant, self.exponent

    @property
    def growth(self) -> float:
        return self.exponent

    def value(self, x):
        return self.constant + np.power(np.asarray(x, dtype=float), self.exponent)

    def derivative(self, x, order: int = 1):
        return _power_derivative(np.asarray(x, dtype=float), self.exponent, order)


@dataclass(frozen=True)
class Log:
    """``log(x + offset)`` with ``offset >= 1`` so the value is non-negative."""

    offset: float = 1.0

    def __post_init__(self):
        if self.offset < 1:
            raise ValueError(f"Log offset must be >= 1, got {self.offset}")

    code = LOG

    @property
    def params(self) -> tuple[float, float]:
        return self.offset, 0.0

    @property
    def growth(self) -> float:
        return 0.0

    def value(self, x):
        return np.log(np.asarray(x, dtype=float) + self.offset)

    def derivative(self, x, order: int = 1):
        y = np.asarray(x, dtype=float) + self.offset
        if order == 1:
            return 1.0 / y
        if order == 2:
            return -1.0 / y**2
        if order == 3:
            return 2.0 / y**3
        raise ValueError("order must be 1, 2 or 3")


BasisFunction = Power | AffinePower | Log


def _power_derivative(x: np.ndarray, p: float, order: int) -> np.ndarray:
    if order not in (1, 2, 3):
        raise ValueError("order must be 1, 2 or 3")
    coef = p
    for i in range(1, order):
        coef *= p - i
    with np.errstate(divide="ignore", invalid="ignore"):
        out = coef * np.power(x, p - order)
    if coef == 0.0:
        out = np.zeros_like(x)
    return out


def basis_from_dict(d: dict) -> BasisFunction:
    kind = d.get("kind")
    extra = set(d) - {"kind", "exponent", "constant", "offset"}
    if extra:
        raise ValueError(f"unknown keys for basis function: {sorted(extra)}")
    if kind == "power":
        return Power(float(d["exponent"]))
    if kind == "affine_power":
        return AffinePower(float(d["constant"]), float(d["exponent"]))
    if kind == "log":
        return Log(float(d.get("offset", 1.0)))
    raise ValueError(f"unknown basis kind {kind!r}")


def basis_to_dict(f: BasisFunction) -> dict:
    if isinstance(f, Power):
        return {"kind": "power", "exponent": f.exponent}
    if isinstance(f, AffinePower):
        return {"kind": "affine_power", "constant": f.constant, "exponent": f.exponent}
    return {"kind": "log", "offset": f.offset}


@dataclass(frozen=True)
class BasisSpec:
    """Per-server basis lists plus the index of the highest-degree entry.

    ``highest`` is 0-based.  When omitted it is set to the entry with the
    fastest asymptotic growth (powers grow like their exponent, logs slower
    than any power); the first such entry wins ties.
    """

    per_server: tuple[tuple[BasisFunction, ...], ...]
    highest: int | None = None
    check_independence: bool = field(default=True, compare=False, repr=False)

    def __post_init__(self):
        per_server = tuple(tuple(fs) for fs in self.per_server)
        object.__setattr__(self, "per_server", per_server)
        if not per_server:
            raise ValueError("basis needs at least one server")
        sizes = {len(fs) for fs in per_server}
        if len(sizes) != 1 or 0 in sizes:
            raise ValueError(f"every server needs the same non-zero number of bases, got {sorted(sizes)}")
        P = sizes.pop()
        growth = np.array([[f.growth for f in fs] for fs in per_server])
        if self.highest is None:
            h = int(np.argmax(growth[0]))
            object.__setattr__(self, "highest", h)
        if not 0 <= self.highest < P:
            raise ValueError(f"highest index {self.highest} out of range for P={P}")
        if np.any(growth[:, self.highest] < growth.max(axis=1)):
            raise ValueError("highest must point at the fastest-growing basis on every server")
        if self.check_independence:
            self._check_independence()

    @classmethod
    def uniform(cls, n_servers: int, funcs: Sequence[BasisFunction], highest: int | None = None):
        return cls(tuple(tuple(funcs) for _ in range(n_servers)), highest)

    @property
    def n_servers(self) -> int:
        return len(self.per_server)

    @property
    def P(self) -> int:
        return len(self.per_server[0])

    @property
    def dim(self) -> int:
        return self.n_servers * self.P

    @property
    def highest_flat(self) -> np.ndarray:
        """Flat indices of the highest-degree weight of every server."""
        return np.arange(self.n_servers) * self.P + self.highest

    def server_values(self, n: int, x) -> np.ndarray:
        """Basis values of server ``n``; shape ``x.shape + (P,)``."""
        x = np.asarray(x)
        return np.stack([f.value(x) for f in self.per_server[n]], axis=-1)

    def tables(self, x_max: int) -> np.ndarray:
        """Lookup table ``T[n, x, j] = phi_{n,j}(x)`` for ``x in 0..x_max``."""
        xs = np.arange(x_max + 1)
        return np.stack([self.server_values(n, xs) for n in range(self.n_servers)])

    def encoded(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(codes, first param, second param) arrays of shape (N, P) for kernels."""
        codes = np.array([[f.code for f in fs] for fs in self.per_server], dtype=np.int64)
        p0 = np.array([[f.params[0] for f in fs] for fs in self.per_server], dtype=float)
        p1 = np.array([[f.params[1] for f in fs] for fs in self.per_server], dtype=float)
        return codes, p0, p1

    def _check_independence(self):
        P = self.P
        grid = np.arange(2 * P + 1)
        for n in range(self.n_servers):
            F = self.server_values(n, grid)
            if np.linalg.matrix_rank(F.T @ F) < P:
                raise ValueError(f"basis functions of server {n} are linearly dependent on 0..{2 * P}")
        # joint check: the blocks must stay independent across servers
        N = self.n_servers
        if (2 * P + 1) ** N <= 100_000:
            states = np.array(list(itertools.product(grid, repeat=N)))
        else:
            rng = np.random.default_rng(0)
            states = rng.integers(0, 2 * P + 1, size=(20 * N * P, N))
        F = np.concatenate([self.server_values(n, states[:, n]) for n in range(N)], axis=1)
        if np.linalg.matrix_rank(F) < self.dim:
            raise ValueError("basis functions are linearly dependent across servers")

    def to_dict(self) -> dict:
        return {
            "per_server": [[basis_to_dict(f) for f in fs] for fs in self.per_server],
            "highest": self.highest,
        }

    @classmethod
    def from_dict(cls, d: dict, n_servers: int | None = None) -> "BasisSpec":
        extra = set(d) - {"per_server", "uniform", "highest"}
        if extra:
            raise ValueError(f"unknown keys in basis: {sorted(extra)}")
        if ("per_server" in d) == ("uniform" in d):
            raise ValueError("basis needs exactly one of 'per_server' or 'uniform'")
        if "uniform" in d:
            if n_servers is None:
                raise ValueError("uniform basis needs the number of servers")
            funcs = [basis_from_dict(f) for f in d["uniform"]]
            return cls.uniform(n_servers, funcs, d.get("highest"))
        per = [[basis_from_dict(f) for f in fs] for fs in d["per_server"]]
        return cls(tuple(tuple(fs) for fs in per), d.get("highest"))


def paper_basis(n_servers: int) -> BasisSpec:
    """The four-term family ``1 + x^0.01, x^0.2, x, x^1.5`` on every server."""
    funcs = (AffinePower(1.0, 0.01), Power(0.2), Power(1.0), Power(1.5))
    return BasisSpec.uniform(n_servers, funcs, highest=3)


def _check_action(action: int, n: int):
    if not (0 <= int(action) < n):
        raise ValueError(f"action {action} out of range for {n} servers")


def phi(basis: BasisSpec, state, action: int) -> np.ndarray:
    """Feature vector ``phi(x, a)`` of length ``N * P``."""
    x = np.asarray(state)
    N = basis.n_servers
    if x.shape != (N,):
        raise ValueError(f"state must have shape ({N},), got {x.shape}")
    _check_action(action, N)
    shifted = x.astype(np.int64).copy()
    shifted[action] += 1
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        out = np.concatenate([basis.server_values(n, shifted[n]) for n in range(N)])
    if not np.all(np.isfinite(out)):
        bad = int(np.flatnonzero(~np.isfinite(out))[0])
        n, j = divmod(bad, basis.P)
        raise FeatureError(f"basis ({n},{j}) is not finite at x={shifted[n]}")
    return out


def q_hat(basis: BasisSpec, w, state, action: int) -> float:
    w = np.asarray(w, dtype=float)
    if w.shape != (basis.dim,):
        raise ValueError(f"weight vector must have length {basis.dim}, got {w.shape}")
    return float(w @ phi(basis, state, action))


def phi_forward_diff(basis: BasisSpec, n: int, x_n: int) -> np.ndarray:
    """``phi_{n,j}(x_n + 1) - phi_{n,j}(x_n)`` for every ``j``."""
    if x_n < 0:
        raise ValueError("queue length must be non-negative")
    return basis.server_values(n, x_n + 1) - basis.server_values(n, x_n)


def phi_backward_diff(basis: BasisSpec, n: int, x_n: int) -> np.ndarray:
    """``phi_{n,j}(x_n - 1) - phi_{n,j}(x_n)``; note the sign (non-positive)."""
    if x_n < 1:
        raise ValueError("backward difference needs x_n >= 1")
    return basis.server_values(n, x_n - 1) - basis.server_values(n, x_n)


def action_scores(basis: BasisSpec, w, state) -> np.ndarray:
    """Action-dependent part of ``Q(x, a; w)``: ``w_a . phi_{a+}(x_a)``.

    ``Q(x, a) - Q(x, b) == scores[a] - scores[b]`` exactly in real arithmetic,
    which is all the routing policies need.
    """
    x = np.asarray(state)
    w = np.asarray(w, dtype=float).reshape(basis.n_servers, basis.P)
    return np.array([w[n] @ phi_forward_diff(basis, n, int(x[n])) for n in range(basis.n_servers)])


@dataclass(frozen=True)
class Assumption1Report:
    b_de: float
    b_l: int | None
    eps_w: float | None
    scope: str
    x_max: int
    passed: bool
    witness: tuple[int, int, int] | None = None

    def to_dict(self) -> dict:
        return {
            "b_de": self.b_de,
            "b_l": self.b_l,
            "eps_w": self.eps_w,
            "scope": self.scope,
            "x_max": self.x_max,
            "pass": self.passed,
            "witness": list(self.witness) if self.witness else None,
        }


def check_assumption1(
    basis: BasisSpec, config: SystemConfig, x_max: int = 10_000, scope: str = "H"
) -> Assumption1Report:
    """Scan the growth condition on the highest-degree basis over ``0..x_max``.

    ``b_de`` bounds the second and third derivatives of every
    highest-degree basis on ``1..x_max`` (``x = 0`` is excluded because
    fractional powers have unbounded curvature there).  ``scope`` is ``"H"``
    to test the drift margin only on the highest-degree entry or ``"all"``
    to test every ``j``.  The smallest ``b_l`` whose tail satisfies the
    margin is reported together with the margin ``eps_w`` achieved there.
    """
    if x_max < 1:
        raise ValueError("x_max must be >= 1")
    if scope not in ("H", "all"):
        raise ValueError("scope must be 'H' or 'all'")
    xs = np.arange(1, x_max + 1, dtype=float)
    H = basis.highest
    b_de = 0.0
    for n in range(basis.n_servers):
        f = basis.per_server[n][H]
        b_de = max(b_de, float(np.max(f.derivative(xs, 2))), float(np.max(f.derivative(xs, 3))))

    lead = config.lam / float(np.sum(config.mu)) - 1.0
    grid = np.arange(0, x_max + 1, dtype=float)
    js = [H] if scope == "H" else list(range(basis.P))
    worst = np.full(grid.shape, -np.inf)
    owner = np.zeros((grid.size, 2), dtype=int)
    for n in range(basis.n_servers):
        for j in js:
            d1 = basis.per_server[n][j].derivative(grid, 1)
            with np.errstate(invalid="ignore"):
                lhs = lead * d1 + 4.0 * b_de
            lhs = np.where(np.isnan(lhs), np.inf, lhs)
            upd = lhs > worst
            worst = np.where(upd, lhs, worst)
            owner[upd] = (n, j)

    # suffix maximum: tail_max[b] = max_{x >= b} lhs(x)
    tail_max = np.maximum.accumulate(worst[::-1])[::-1]
    ok = np.flatnonzero(tail_max < 0)
    if ok.size:
        b_l = int(ok[0])
        return Assumption1Report(b_de, b_l, float(-tail_max[b_l]), scope, x_max, True)
    bad = int(np.flatnonzero(worst >= 0)[-1])
    n, j = owner[bad]
    return Assumption1Report(b_de, None, None, scope, x_max, False, (int(n), int(j), bad))
