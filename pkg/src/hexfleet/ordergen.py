"""Synthetic spatio-temporal demand and vehicle on/offline rates."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np


class Order(NamedTuple):
    origin: int
    destination: int
    price: float
    duration: int
    created_at: int


@dataclass(frozen=True)
class Hotspot:
    grids: tuple
    start: int  # first tick, inclusive
    stop: int  # last tick, exclusive
    multiplier: float

    def active(self, t):
        return self.start <= t < self.stop


@dataclass(frozen=True, eq=False)
class DemandModel:
    """Poisson order arrivals with per-origin price/destination and global durations.

    ``base_rate`` is (T, N) mean orders per tick; active hotspots multiply the
    rate of their grids.  ``duration_probs[i]`` is P(duration = i + 1 ticks).
    ``offline_rate`` / ``online_rate`` are (T, N) per-vehicle per-tick
    Bernoulli probabilities for available vehicles going offline and offline
    vehicles coming back.
    """

    base_rate: np.ndarray
    dest: np.ndarray
    price_mean: np.ndarray
    price_spread: np.ndarray
    duration_probs: np.ndarray
    hotspots: tuple = ()
    offline_rate: np.ndarray = None
    online_rate: np.ndarray = None
    _dest_cdf: np.ndarray = field(init=False, repr=False)
    _dur_cdf: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        T, N = self.base_rate.shape
        if np.any(self.base_rate < 0):
            raise ValueError("order rates must be nonnegative")
        if self.dest.shape != (N, N) or np.any(self.dest < 0):
            raise ValueError("destination matrix must be a nonnegative N x N matrix")
        if not np.allclose(self.dest.sum(axis=1), 1.0):
            raise ValueError("destination rows must sum to 1")
        if np.any(self.price_mean < 0) or np.any(self.price_spread < 0):
            raise ValueError("prices must be nonnegative")
        p = np.asarray(self.duration_probs, dtype=float)
        if p.ndim != 1 or np.any(p < 0) or not np.isclose(p.sum(), 1.0):
            raise ValueError("duration_probs must be a probability vector")
        for h in self.hotspots:
            if h.multiplier < 0:
                raise ValueError("hotspot multipliers must be nonnegative")
        for name in ("offline_rate", "online_rate"):
            val = getattr(self, name)
            arr = np.zeros((T, N)) if val is None else np.broadcast_to(np.asarray(val, float), (T, N)).copy()
            if np.any(arr < 0) or np.any(arr > 1):
                raise ValueError(f"{name} must lie in [0, 1]")
            object.__setattr__(self, name, arr)
        cdf = np.cumsum(self.dest, axis=1)
        cdf[:, -1] = 1.0
        object.__setattr__(self, "_dest_cdf", cdf)
        dcdf = np.cumsum(p)
        dcdf[-1] = 1.0
        object.__setattr__(self, "_dur_cdf", dcdf)

    @property
    def T(self):
        return self.base_rate.shape[0]

    @property
    def n_grids(self):
        return self.base_rate.shape[1]

    def rate(self, t) -> np.ndarray:
        r = self.base_rate[t].copy()
        for h in self.hotspots:
            if h.active(t):
                r[list(h.grids)] *= h.multiplier
        return r

    def expected_counts(self, t):
        return self.rate(t)

    def sample(self, t, rng) -> list:
        counts = rng.poisson(self.rate(t))
        n = int(counts.sum())
        if n == 0:
            return []
        origins = np.repeat(np.arange(self.n_grids), counts)
        u = rng.random((n, 3))
        dests = (u[:, 0][:, None] >= self._dest_cdf[origins]).sum(axis=1)
        prices = self.price_mean[origins] + self.price_spread[origins] * (2.0 * u[:, 1] - 1.0)
        prices = np.maximum(prices, 0.0)
        durations = np.searchsorted(self._dur_cdf, u[:, 2], side="right") + 1
        durations = np.minimum(durations, len(self._dur_cdf))
        return [
            Order(int(o), int(d), float(p), int(k), int(t))
            for o, d, p, k in zip(origins, dests, prices, durations)
        ]


class ReplayDemand:
    """Replays externally supplied demand from CSV rows
    ``tick, grid, count, price, duration, dest``.

    Vehicle on/offline rates are taken from an optional ``base`` model.
    """

    def __init__(self, rows, T, n_grids, base: DemandModel | None = None):
        self._T = T
        self._n = n_grids
        self._orders = [[] for _ in range(T)]
        for tick, grid, count, price, duration, dest in rows:
            tick, grid, count, duration, dest = int(tick), int(grid), int(count), int(duration), int(dest)
            if not 0 <= tick < T or not 0 <= grid < n_grids or not 0 <= dest < n_grids:
                raise ValueError(f"replay row out of range: {(tick, grid, dest)}")
            if duration < 1 or float(price) < 0 or count < 0:
                raise ValueError("replay rows need duration >= 1, price >= 0, count >= 0")
            self._orders[tick].extend([Order(grid, dest, float(price), duration, tick)] * count)
        zeros = np.zeros((T, n_grids))
        self.offline_rate = base.offline_rate if base is not None else zeros
        self.online_rate = base.online_rate if base is not None else zeros

    @classmethod
    def from_csv(cls, path, T, n_grids, base=None):
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            rows = [r for r in reader if r and not r[0].startswith("#")]
        if rows and not rows[0][0].strip().lstrip("-").isdigit():
            rows = rows[1:]
        return cls(rows, T, n_grids, base)

    @property
    def T(self):
        return self._T

    @property
    def n_grids(self):
        return self._n

    def expected_counts(self, t):
        c = np.zeros(self._n)
        for o in self._orders[t]:
            c[o.origin] += 1
        return c

    def sample(self, t, rng):
        return list(self._orders[t])


def sample_orders(model, t, rng) -> list:
    if not 0 <= t < model.T:
        raise ValueError(f"tick {t} outside [0, {model.T})")
    return model.sample(t, rng)


class MeanTables(NamedTuple):
    v_rule: np.ndarray  # (T, N) mean reward of an agent arriving at (t, grid)
    order_mean: np.ndarray  # (T, N) mean generated order count
    vehicle_mean: np.ndarray  # (T, N) mean available-agent count


def fit_mean_tables(logs) -> MeanTables:
    """Average per-tick reward, order and vehicle tables over complete episode logs."""
    logs = list(logs)
    if not logs:
        raise ValueError("need at least one episode log")
    rewards = np.mean([log.table("arrival_reward") for log in logs], axis=0)
    orders = np.mean([log.table("order_count") for log in logs], axis=0)
    vehicles = np.mean([log.table("vehicle_count") for log in logs], axis=0)
    return MeanTables(rewards, orders, vehicles)


# --- scenario construction -------------------------------------------------

def _hex_distance(world, a, b):
    (q1, r1), (q2, r2) = world.axial[a], world.axial[b]
    return (abs(q1 - q2) + abs(r1 - r2) + abs((q1 + r1) - (q2 + r2))) // 2


def distance_matrix(world):
    n = world.n_grids
    return np.array([[_hex_distance(world, a, b) for b in range(n)] for a in range(n)])


def build_demand(world, T, spec: dict) -> DemandModel:
    """Build a DemandModel from a plain dict (the ``[demand]`` config table).

    Recognised keys (all optional)::

        base_rate        scalar mean orders per grid per tick
        daily_profile    list of (tick, factor) knots, linearly interpolated
        price_mean, price_spread
        duration_probs   list, P(duration = 1, 2, ...)
        dest_mode        "uniform" | "gravity" | "hotspot"
        dest_decay       gravity decay per hex step
        hotspots         list of {grids, start, stop, multiplier, dest}
        offline_rate, online_rate
    """
    N = world.n_grids
    valid = world.valid.astype(float)
    base = float(spec.get("base_rate", 0.5))
    profile = np.ones(T)
    if "daily_profile" in spec:
        knots = np.asarray(spec["daily_profile"], dtype=float)
        profile = np.interp(np.arange(T), knots[:, 0], knots[:, 1])
    base_rate = np.outer(profile, valid) * base

    dist = distance_matrix(world)
    mode = spec.get("dest_mode", "gravity")
    if mode == "uniform":
        dest = np.tile(valid, (N, 1))
    elif mode in ("gravity", "hotspot"):
        dest = np.exp(-float(spec.get("dest_decay", 0.3)) * dist) * valid[None, :]
    else:
        raise ValueError(f"unknown dest_mode {mode!r}")

    hotspots = []
    for h in spec.get("hotspots", []):
        grids = tuple(int(g) for g in h["grids"])
        hotspots.append(Hotspot(grids, int(h["start"]), int(h["stop"]), float(h["multiplier"])))
        if mode == "hotspot" and "dest" in h:
            target = np.zeros(N)
            target[[int(g) for g in h["dest"]]] = 1.0
            share = float(h.get("dest_share", 0.8))
            for g in grids:
                row = dest[g] / dest[g].sum()
                dest[g] = (1 - share) * row + share * target / target.sum()
    dest = dest / dest.sum(axis=1, keepdims=True)

    price_mean = np.full(N, float(spec.get("price_mean", 10.0)))
    price_spread = np.full(N, float(spec.get("price_spread", 4.0)))
    probs = np.asarray(spec.get("duration_probs", [1 / 3, 1 / 3, 1 / 3]), dtype=float)
    return DemandModel(
        base_rate=base_rate,
        dest=dest,
        price_mean=price_mean,
        price_spread=price_spread,
        duration_probs=probs / probs.sum(),
        hotspots=tuple(hotspots),
        offline_rate=float(spec.get("offline_rate", 0.0)),
        online_rate=float(spec.get("online_rate", 0.0)),
    )


def load_replay(path, world, T, base=None):
    return ReplayDemand.from_csv(Path(path), T, world.n_grids, base)
