"""Embedded jump chain of N parallel exponential servers fed by one Poisson stream.

Servers are indexed from 0.  At every transition epoch a routing action is
drawn, the next event is an arrival (routed to the chosen server) or a
departure from a busy server, and the holding time until that event is
exponential with the total event rate of the current state.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np


@dataclass(frozen=True)
class SystemConfig:
    lam: float
    mu: tuple[float, ...]
    seed: int = 0

    def __post_init__(self):
        mu = tuple(float(m) for m in self.mu)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "lam", float(self.lam))
        if len(mu) < 1:
            raise ValueError("need at least one server")
        if not self.lam > 0:
            raise ValueError(f"arrival rate must be > 0, got {self.lam}")
        if any(not m > 0 for m in mu):
            raise ValueError(f"service rates must be > 0, got {mu}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")

    @property
    def n_servers(self) -> int:
        return len(self.mu)

    @property
    def mu_array(self) -> np.ndarray:
        return np.asarray(self.mu)


@dataclass(frozen=True)
class Arrival:
    server: int


@dataclass(frozen=True)
class Departure:
    server: int


Event = Arrival | Departure


def encode_event(ev: Event) -> int:
    """Signed code used in compact logs: ``+(n+1)`` arrival, ``-(n+1)`` departure."""
    return ev.server + 1 if isinstance(ev, Arrival) else -(ev.server + 1)


def decode_event(code: int) -> Event:
    if code > 0:
        return Arrival(int(code) - 1)
    if code < 0:
        return Departure(int(-code) - 1)
    raise ValueError("event code 0 is not valid")


@dataclass(frozen=True)
class TransitionSample:
    event: Event
    next_state: tuple[int, ...]
    holding_time: float
    epoch_index: int


def _as_state(config: SystemConfig, state) -> np.ndarray:
    x = np.asarray(state, dtype=np.int64)
    if x.shape != (config.n_servers,):
        raise ValueError(f"state must have length {config.n_servers}, got shape {x.shape}")
    if np.any(x < 0):
        raise ValueError(f"queue lengths must be non-negative, got {x.tolist()}")
    return x


def _check_action(config: SystemConfig, action) -> int:
    a = int(action)
    if not 0 <= a < config.n_servers:
        raise ValueError(f"action {action} out of range for {config.n_servers} servers")
    return a


def total_rate(config: SystemConfig, state) -> float:
    x = _as_state(config, state)
    return config.lam + float(np.sum(config.mu_array * (x > 0)))


def transition_distribution(config: SystemConfig, state, action: int) -> list[tuple[tuple[int, ...], float]]:
    """Next-state law of the embedded chain; zero-probability entries are omitted."""
    x = _as_state(config, state)
    a = _check_action(config, action)
    rate = total_rate(config, x)
    nxt = x.copy()
    nxt[a] += 1
    out = [(tuple(int(v) for v in nxt), config.lam / rate)]
    for n, m in enumerate(config.mu):
        if x[n] > 0:
            nxt = x.copy()
            nxt[n] -= 1
            out.append((tuple(int(v) for v in nxt), m / rate))
    return out


def is_stabilizable(config: SystemConfig) -> bool:
    return config.lam < sum(config.mu)


class RandomStreams:
    """Three independent, block-buffered random streams.

    Events, holding times and actions come from separate children of one
    ``SeedSequence``, so swapping the routing policy never perturbs the event
    or holding-time draws.  Draws are produced in fixed-size blocks; the
    compiled kernels consume whole blocks while the Python path pops one
    value at a time, and both see the same numbers.
    """

    BLOCK = 1 << 16

    def __init__(self, seed: int, spawn_key: tuple[int, ...] = ()):
        ss = np.random.SeedSequence(int(seed), spawn_key=spawn_key)
        ev, hold, act = ss.spawn(3)
        self._gens = {
            "event": np.random.Generator(np.random.PCG64(ev)),
            "hold": np.random.Generator(np.random.PCG64(hold)),
            "action": np.random.Generator(np.random.PCG64(act)),
        }
        self._buf = {k: np.empty(0) for k in self._gens}
        self._pos = {k: 0 for k in self._gens}

    def _refill(self, name: str):
        g = self._gens[name]
        if name == "hold":
            self._buf[name] = g.standard_exponential(self.BLOCK)
        else:
            self._buf[name] = g.random(self.BLOCK)
        self._pos[name] = 0

    def take(self, name: str, count: int) -> np.ndarray:
        """Next ``count`` draws of a stream, as a contiguous array."""
        parts = []
        while count > 0:
            if self._pos[name] >= self._buf[name].size:
                self._refill(name)
            buf, pos = self._buf[name], self._pos[name]
            m = min(count, buf.size - pos)
            parts.append(buf[pos : pos + m])
            self._pos[name] = pos + m
            count -= m
        if not parts:
            return np.empty(0)
        return parts[0] if len(parts) == 1 else np.concatenate(parts)

    def next(self, name: str) -> float:
        if self._pos[name] >= self._buf[name].size:
            self._refill(name)
        v = self._buf[name][self._pos[name]]
        self._pos[name] += 1
        return float(v)


def _event_from_uniform(config: SystemConfig, x: np.ndarray, action: int, u: float, rate: float) -> Event:
    target = u * rate
    acc = config.lam
    if target < acc:
        return Arrival(action)
    last_busy = -1
    for n, m in enumerate(config.mu):
        if x[n] > 0:
            last_busy = n
            acc += m
            if target < acc:
                return Departure(n)
    # u * rate rounding up to the total: assign to the last busy server
    return Departure(last_busy) if last_busy >= 0 else Arrival(action)


def sample_transition(
    config: SystemConfig,
    state,
    action: int,
    rng: RandomStreams,
    epoch_index: int = 0,
    expected_holding: bool = False,
) -> TransitionSample:
    x = _as_state(config, state)
    a = _check_action(config, action)
    rate = total_rate(config, x)
    ev = _event_from_uniform(config, x, a, rng.next("event"), rate)
    e = rng.next("hold")
    dt = 1.0 / rate if expected_holding else e / rate
    nxt = x.copy()
    if isinstance(ev, Arrival):
        nxt[ev.server] += 1
    else:
        nxt[ev.server] -= 1
    return TransitionSample(ev, tuple(int(v) for v in nxt), dt, epoch_index)


@dataclass
class Trajectory:
    """Columnar log of an epoch-driven run.

    ``states[k]`` is ``x[k]`` (``K + 1`` rows), ``actions[k]`` is ``a[k]``
    (``K + 1`` entries, the last one being the bootstrap action),
    ``events[k]``, ``dt[k]`` and ``cost[k]`` describe the transition out of
    ``x[k]``.
    """

    states: np.ndarray
    actions: np.ndarray
    events: np.ndarray
    dt: np.ndarray
    cost: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.dt.size)

    def __getitem__(self, k: int):
        if not -len(self) <= k < len(self):
            raise IndexError(k)
        k %= len(self)
        sample = TransitionSample(
            decode_event(int(self.events[k])),
            tuple(int(v) for v in self.states[k + 1]),
            float(self.dt[k]),
            k,
        )
        return tuple(int(v) for v in self.states[k]), int(self.actions[k]), sample, float(self.cost[k])

    def __iter__(self) -> Iterator:
        for k in range(len(self)):
            yield self[k]

    @classmethod
    def empty(cls, n_servers: int, x0=None) -> "Trajectory":
        x0 = np.zeros(n_servers, dtype=np.int32) if x0 is None else np.asarray(x0, dtype=np.int32)
        return cls(x0[None, :].copy(), np.zeros(0, dtype=np.int32), np.zeros(0, dtype=np.int16),
                   np.zeros(0), np.zeros(0))

    def queue_totals(self) -> np.ndarray:
        return self.states.sum(axis=1)

    def save_jsonl(self, path):
        path = Path(path)
        with path.open("w") as fh:
            for k in range(len(self)):
                ev = decode_event(int(self.events[k]))
                rec = {
                    "k": k,
                    "x": self.states[k].tolist(),
                    "a": int(self.actions[k]),
                    "event": {"type": "arrival" if isinstance(ev, Arrival) else "departure", "server": ev.server},
                    "dt": float(self.dt[k]),
                    "cost": float(self.cost[k]),
                }
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def load_jsonl(cls, path) -> "Trajectory":
        states, actions, events, dts, costs = [], [], [], [], []
        with Path(path).open() as fh:
            for line in fh:
                r = json.loads(line)
                states.append(r["x"])
                actions.append(r["a"])
                e = r["event"]
                ev = Arrival(e["server"]) if e["type"] == "arrival" else Departure(e["server"])
                events.append(encode_event(ev))
                dts.append(r["dt"])
                costs.append(r["cost"])
        if not states:
            raise ValueError(f"{path} holds no epochs")
        last = np.array(states[-1], dtype=np.int64)
        ev = decode_event(events[-1])
        last[ev.server] += 1 if isinstance(ev, Arrival) else -1
        st = np.vstack([np.array(states, dtype=np.int32), last[None, :].astype(np.int32)])
        acts = np.array(actions + [actions[-1]], dtype=np.int32)
        return cls(st, acts, np.array(events, dtype=np.int16), np.array(dts), np.array(costs))

    def save_npz(self, path):
        np.savez_compressed(path, states=self.states, actions=self.actions, events=self.events,
                            dt=self.dt, cost=self.cost)

    @classmethod
    def load_npz(cls, path) -> "Trajectory":
        with np.load(path) as z:
            return cls(z["states"], z["actions"], z["events"], z["dt"], z["cost"])

    @classmethod
    def load(cls, path) -> "Trajectory":
        path = Path(path)
        return cls.load_jsonl(path) if path.suffix == ".jsonl" else cls.load_npz(path)


class PolicyError(RuntimeError):
    pass


ActionSource = Callable[[np.ndarray, float], int]


def simulate_trajectory(
    config: SystemConfig,
    action_source: ActionSource,
    horizon: int,
    rng: RandomStreams | None = None,
    x0=None,
    cost_fn: Callable[[np.ndarray, float], float] | None = None,
    expected_holding: bool = False,
) -> Trajectory:
    """Run ``horizon`` epochs under an arbitrary routing callback.

    ``action_source(x, u)`` receives the current state and one uniform draw
    from the action stream and returns a server index.  An action is drawn at
    every epoch, including epochs whose event turns out to be a departure.
    """
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    rng = RandomStreams(config.seed) if rng is None else rng
    N = config.n_servers
    x = np.zeros(N, dtype=np.int64) if x0 is None else _as_state(config, x0).copy()
    states = np.empty((horizon + 1, N), dtype=np.int32)
    actions = np.empty(horizon + 1, dtype=np.int32)
    events = np.empty(horizon, dtype=np.int16)
    dts = np.empty(horizon)
    costs = np.empty(horizon)
    states[0] = x

    def draw_action(state):
        a = action_source(state.copy(), rng.next("action"))
        try:
            return _check_action(config, a)
        except (ValueError, TypeError) as exc:
            raise PolicyError(f"policy returned invalid action {a!r} at state {state.tolist()}") from exc

    a = draw_action(x)
    actions[0] = a
    for k in range(horizon):
        s = sample_transition(config, x, a, rng, k, expected_holding)
        x = np.array(s.next_state, dtype=np.int64)
        events[k] = encode_event(s.event)
        dts[k] = s.holding_time
        costs[k] = cost_fn(x, s.holding_time) if cost_fn is not None else 0.0
        states[k + 1] = x
        a = draw_action(x)
        actions[k + 1] = a
    return Trajectory(states, actions, events, dts, costs)
