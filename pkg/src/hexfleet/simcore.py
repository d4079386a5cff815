"""Fleet simulator on a hexagonal grid world.

One tick runs, in order: vehicle status updates, order generation, the
agent interaction (repositioning of idle vehicles) and the two-stage order
assignment.  The assignment of a tick is computed right after order
generation (the "pre-dispatch") so that only vehicles left idle by it are
offered to the policy as agents; the same assignment is committed at the
end of the tick.

Reward convention: ``r_t(g)`` is the reward of agents *arriving* at grid
``g`` at tick ``t`` after a reposition (or stay) decided at ``t - 1``.  It is
known as soon as tick ``t``'s assignment is planned, so ``step(a_t)`` returns
``r_{t+1}`` together with ``s_{t+1}``.  Grids nobody arrived at report the
value a single extra agent would have collected there (best unserved order in
the grid, else in its neighbours, else 0).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .hexgrid import N_DIRECTIONS, STAY, GridWorld
from .ordergen import DemandModel, Order  # noqa: F401  (re-exported)

AVAILABLE, ON_SERVICE, OFFLINE = 0, 1, 2
STATUS_NAMES = {AVAILABLE: "available", ON_SERVICE: "on-service", OFFLINE: "offline"}


@dataclass
class Vehicle:
    id: int
    location: int
    status: str
    until: int | None = None


@dataclass
class SimConfig:
    world: GridWorld
    demand: DemandModel
    fleet: int = 200
    fleet_scale: float = 1.0
    T: int = 144
    cost_enabled: bool = False
    cost: float = 0.6
    reward_mode: str = "averaged"  # or "raw"
    init_dist: np.ndarray | None = None

    def __post_init__(self):
        if self.fleet < 0:
            raise ValueError("fleet size must be >= 0")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if not 0.0 <= self.fleet_scale:
            raise ValueError("fleet_scale must be >= 0")
        if self.reward_mode not in ("averaged", "raw"):
            raise ValueError(f"unknown reward_mode {self.reward_mode!r}")
        if self.demand.n_grids != self.world.n_grids:
            raise ValueError("demand model and world disagree on the number of grids")
        if self.demand.T < self.T:
            raise ValueError("demand model covers fewer ticks than T")

    @property
    def reposition_cost(self):
        return self.cost if self.cost_enabled else 0.0

    @property
    def initial_vehicles(self):
        return int(np.floor(self.fleet_scale * self.fleet + 1e-9))


@dataclass(frozen=True, eq=False)
class GlobalState:
    t: int
    vehicle_count: np.ndarray
    order_count: np.ndarray
    T: int

    @property
    def time_onehot(self):
        v = np.zeros(self.T)
        v[self.t] = 1.0
        return v

    def vector(self, norm=1.0):
        """[vehicle_count, order_count] / norm followed by the time one-hot (length 2N+T)."""
        return np.concatenate([self.vehicle_count / norm, self.order_count / norm, self.time_onehot])

    def agent_vector(self, g, norm=1.0):
        """Agent state [s_t, one_hot(g)] (length 3N+T)."""
        oh = np.zeros(len(self.vehicle_count))
        oh[g] = 1.0
        return np.concatenate([self.vector(norm), oh])


@dataclass
class StepOutcome:
    rewards: np.ndarray  # r_{t+1}(g) for every grid
    arrivals: np.ndarray  # agents of this step arriving per grid
    collected: np.ndarray  # order value collected at t+1 by those arrivals, per grid
    agent_rewards: np.ndarray  # per agent of this step, reposition cost included
    agent_dest: np.ndarray
    served_value: float
    generated_value: float
    served_orders: int
    generated_orders: int
    repositions: int
    next_state: GlobalState | None
    done: bool


@dataclass
class EpisodeMetrics:
    gmv: float
    orr: float
    repositions: int
    roi: float | None = None


class EpisodeLog:
    """Per-tick records; serialisable as line-delimited JSON."""

    def __init__(self, n_grids, T, records=None):
        self.n_grids = n_grids
        self.T = T
        self.records = records if records is not None else []

    def append(self, rec):
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def table(self, key):
        """(T, N) array of a per-grid field; ticks without a record are zero."""
        out = np.zeros((self.T, self.n_grids))
        for rec in self.records:
            out[rec["t"]] = rec[key]
        return out

    def total(self, key):
        return sum(rec[key] for rec in self.records)

    def to_jsonl(self, path):
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(_jsonable(rec)) + "\n")

    @classmethod
    def from_jsonl(cls, path, n_grids, T):
        recs = [json.loads(ln) for ln in Path(path).read_text().splitlines() if ln.strip()]
        return cls(n_grids, T, recs)


def _jsonable(rec):
    return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in rec.items()}


def two_stage_match(orders, veh_ids, veh_grids, world: GridWorld, rng):
    """Match orders to available vehicles.

    Orders are handled by descending price.  Stage 1 gives each order a
    vehicle from its own grid; stage 2 gives the leftovers a vehicle from a
    neighbouring grid, scanning neighbours in random order.  Returns a list of
    ``(order_index, vehicle_id)`` pairs.
    """
    pools = {}
    for g in np.unique(veh_grids):
        ids = veh_ids[veh_grids == g]
        pools[int(g)] = list(ids[rng.permutation(len(ids))])
    order_idx = sorted(range(len(orders)), key=lambda i: -orders[i].price)
    matches = []
    left = []
    for i in order_idx:
        pool = pools.get(orders[i].origin)
        if pool:
            matches.append((i, int(pool.pop())))
        else:
            left.append(i)
    nbr_table = world.neighbor_table
    for i in left:
        nbrs = [h for h in nbr_table[orders[i].origin] if h >= 0]
        if not nbrs:
            continue
        for j in rng.permutation(len(nbrs)):
            pool = pools.get(int(nbrs[j]))
            if pool:
                matches.append((i, int(pool.pop())))
                break
    return matches


class FleetEnv:
    def __init__(self, config: SimConfig):
        self.config = config
        self.world = config.world
        self.T = config.T
        self.N = config.world.n_grids
        self.t = None

    # -- episode control ---------------------------------------------------
    def reset(self, seed) -> GlobalState:
        cfg = self.config
        ss = np.random.SeedSequence(seed)
        place, demand, status, match = (np.random.default_rng(s) for s in ss.spawn(4))
        self._rng_demand, self._rng_status, self._rng_match = demand, status, match

        n0 = cfg.initial_vehicles
        valid = self.world.valid_ids
        if cfg.init_dist is None:
            p = np.ones(len(valid)) / len(valid)
        else:
            p = np.asarray(cfg.init_dist, dtype=float)[valid]
            p = p / p.sum()
        self.loc = valid[place.choice(len(valid), size=n0, p=p)] if n0 else np.zeros(0, int)
        self.loc = np.sort(self.loc).astype(int)
        self.status = np.full(n0, AVAILABLE)
        self.until = np.full(n0, -1)
        self.cum_online = 0
        self.cum_offline = 0

        self.t = 0
        self.log = EpisodeLog(self.N, self.T)
        self._prev_agents = np.zeros(0, int)
        self._prev_dest = np.zeros(0, int)
        self._prev_moved = np.zeros(0, bool)
        self._begin_tick()
        return self.state

    @property
    def done(self):
        return self.t is None or self.t >= self.T

    # -- tick phases -------------------------------------------------------
    def _status_updates(self):
        t = self.t
        back = (self.status == ON_SERVICE) & (self.until <= t)
        self.status[back] = AVAILABLE
        self.until[back] = -1
        dm = self.config.demand
        n = len(self.status)
        if n == 0:
            return
        u = self._rng_status.random(n)
        rate_off = dm.offline_rate[t][self.loc]
        rate_on = dm.online_rate[t][self.loc]
        going_off = (self.status == AVAILABLE) & (u < rate_off)
        coming_on = (self.status == OFFLINE) & (u < rate_on)
        self.status[going_off] = OFFLINE
        self.status[coming_on] = AVAILABLE
        self.cum_offline += int(going_off.sum())
        self.cum_online += int(coming_on.sum())

    def _begin_tick(self):
        self._status_updates()
        self.orders = self.config.demand.sample(self.t, self._rng_demand)
        avail = np.flatnonzero(self.status == AVAILABLE)
        self._match_rng_state = self._rng_match.bit_generator.state
        self._plan = two_stage_match(self.orders, avail, self.loc[avail], self.world, self._rng_match)

        matched = np.array([v for _, v in self._plan], dtype=int)
        is_matched = np.zeros(len(self.status), bool)
        is_matched[matched] = True
        agents = avail[~is_matched[avail]]
        order = np.lexsort((agents, self.loc[agents]))
        self.agent_ids = agents[order]
        self.agent_grids = self.loc[self.agent_ids]

        self.order_count = np.bincount([o.origin for o in self.orders], minlength=self.N).astype(float)
        self.vehicle_count = np.bincount(self.agent_grids, minlength=self.N).astype(float)
        self.state = GlobalState(self.t, self.vehicle_count, self.order_count, self.T)
        self._settle_arrival_rewards()

    def _settle_arrival_rewards(self):
        """Rewards of last tick's agents, realised by this tick's planned assignment."""
        N = self.N
        collected_by = np.zeros(len(self.status))
        for i, v in self._plan:
            collected_by[v] = self.orders[i].price
        arrivals = np.bincount(self._prev_dest, minlength=N).astype(float)
        collected = np.bincount(self._prev_dest, weights=collected_by[self._prev_agents], minlength=N)
        marginal = self._marginal_reward()
        if self.config.reward_mode == "averaged":
            per = np.divide(collected, arrivals, out=np.zeros(N), where=arrivals > 0)
        else:
            per = collected.copy()
        rewards = np.where(arrivals > 0, per, marginal)
        self.arrival_reward = rewards
        self.arrivals = arrivals
        self.arrival_collected = collected
        self.prev_agent_collected = collected_by[self._prev_agents]
        self.prev_agent_rewards = rewards[self._prev_dest] - self.config.reposition_cost * self._prev_moved

    def _marginal_reward(self):
        N = self.N
        served = np.zeros(len(self.orders), bool)
        for i, _ in self._plan:
            served[i] = True
        best = np.zeros(N)
        for o, s in zip(self.orders, served):
            if not s and o.price > best[o.origin]:
                best[o.origin] = o.price
        out = best.copy()
        for g in range(N):
            if out[g] == 0:
                nb = [h for h in self.world.neighbor_table[g] if h >= 0]
                if nb:
                    out[g] = best[nb].max()
        return out

    # -- public operations ---------------------------------------------------
    @property
    def n_agents(self):
        return len(self.agent_ids)

    def pre_dispatch_counts(self):
        return self.vehicle_count.copy()

    def validate_actions(self, actions):
        actions = np.asarray(actions, dtype=int).reshape(-1)
        if len(actions) != self.n_agents:
            raise ValueError(f"expected {self.n_agents} actions, got {len(actions)}")
        if len(actions):
            if actions.min() < 0 or actions.max() >= N_DIRECTIONS:
                bad = int(np.flatnonzero((actions < 0) | (actions >= N_DIRECTIONS))[0])
                raise ValueError(f"agent {bad}: direction {actions[bad]} out of range")
            ok = self.world.geo_masks[self.agent_grids, actions] == 1
            if not ok.all():
                bad = int(np.flatnonzero(~ok)[0])
                raise ValueError(
                    f"agent {bad} (vehicle {self.agent_ids[bad]}) at grid {self.agent_grids[bad]}: "
                    f"direction {actions[bad]} leaves the map or enters an invalid grid"
                )
        return actions

    def assign_orders(self):
        """Commit this tick's two-stage assignment; returns ``(Order, vehicle_id)`` pairs."""
        out = []
        for i, v in self._plan:
            o = self.orders[i]
            self.status[v] = ON_SERVICE
            self.until[v] = self.t + o.duration
            self.loc[v] = o.destination
            out.append((o, v))
        self._plan_committed = True
        return out

    def step(self, actions) -> StepOutcome:
        if self.done:
            raise RuntimeError("episode finished; call reset()")
        actions = self.validate_actions(actions)
        cost = self.config.reposition_cost
        dest = self.world.targets[self.agent_grids, actions] if len(actions) else np.zeros(0, int)
        moved = actions != STAY

        committed = self.assign_orders()
        served_value = float(sum(o.price for o, _ in committed))
        generated_value = float(sum(o.price for o in self.orders))
        generated_orders = len(self.orders)
        self.loc[self.agent_ids] = dest
        repositions = int(moved.sum())

        action_counts = np.zeros((self.N, N_DIRECTIONS), dtype=int)
        np.add.at(action_counts, (self.agent_grids, actions), 1)
        self.log.append(
            dict(
                t=self.t,
                vehicle_count=self.vehicle_count.tolist(),
                order_count=self.order_count.tolist(),
                arrival_reward=self.arrival_reward.tolist(),
                arrivals=self.arrivals.tolist(),
                actions=action_counts.tolist(),
                served_value=served_value,
                generated_value=generated_value,
                served_orders=len(committed),
                generated_orders=generated_orders,
                repositions=repositions,
                cost=cost * repositions,
            )
        )

        self._prev_agents = self.agent_ids.copy()
        self._prev_dest = dest.astype(int)
        self._prev_moved = moved
        self.t += 1
        if self.t < self.T:
            self._begin_tick()
            rewards = self.arrival_reward.copy()
            arrivals = self.arrivals.copy()
            collected = self.arrival_collected.copy()
            agent_rewards = self.prev_agent_rewards.copy()
            next_state = self.state
        else:
            rewards = np.zeros(self.N)
            arrivals = np.bincount(self._prev_dest, minlength=self.N).astype(float)
            collected = np.zeros(self.N)
            agent_rewards = -cost * moved.astype(float)
            next_state = None
            self.agent_ids = np.zeros(0, int)
            self.agent_grids = np.zeros(0, int)
        return StepOutcome(
            rewards=rewards,
            arrivals=arrivals,
            collected=collected,
            agent_rewards=agent_rewards,
            agent_dest=dest.astype(int),
            served_value=served_value,
            generated_value=generated_value,
            served_orders=len(committed),
            generated_orders=generated_orders,
            repositions=repositions,
            next_state=next_state,
            done=next_state is None,
        )

    # -- inspection ------------------------------------------------------------
    def vehicles(self):
        return [
            Vehicle(int(i), int(self.loc[i]), STATUS_NAMES[int(s)], int(self.until[i]) if s == ON_SERVICE else None)
            for i, s in enumerate(self.status)
        ]

    def status_counts(self):
        return {name: int((self.status == code).sum()) for code, name in STATUS_NAMES.items()}


def reset(env: FleetEnv, seed) -> GlobalState:
    return env.reset(seed)


def step(env: FleetEnv, joint_action) -> StepOutcome:
    return env.step(joint_action)


def assign_orders(env: FleetEnv):
    return env.assign_orders()


def pre_dispatch_counts(env: FleetEnv):
    return env.pre_dispatch_counts()


def metrics(log: EpisodeLog, baseline_gmv=None) -> EpisodeMetrics:
    served = log.total("served_value")
    cost = log.total("cost")
    gen_orders = log.total("generated_orders")
    orr = log.total("served_orders") / gen_orders if gen_orders else 0.0
    reps = int(log.total("repositions"))
    gmv = served - cost
    roi = None
    if baseline_gmv is not None and reps > 0:
        roi = (gmv - baseline_gmv) / reps
    return EpisodeMetrics(gmv=gmv, orr=orr, repositions=reps, roi=roi)


def run_episode(env: FleetEnv, policy, seed, rng=None):
    """Roll out one episode with ``policy(env, rng) -> actions``; returns the log."""
    rng = rng if rng is not None else np.random.default_rng(seed)
    env.reset(seed)
    while not env.done:
        env.step(policy(env, rng))
    return env.log


# --- learner inputs ---------------------------------------------------------

class Featurizer:
    """Builds network inputs from global states.

    ``norm`` divides vehicle/order counts before they enter a network.
    """

    def __init__(self, n_grids, T, norm=1.0):
        self.N = n_grids
        self.T = T
        self.norm = float(norm) if norm else 1.0

    @property
    def state_width(self):
        return 2 * self.N + self.T

    @property
    def agent_width(self):
        return 3 * self.N + self.T

    def state(self, s: GlobalState):
        return s.vector(self.norm)

    def agent_inputs(self, s: GlobalState, grids):
        """One row [s_t, one_hot(g)] per entry of ``grids``."""
        grids = np.asarray(grids, dtype=int)
        X = np.zeros((len(grids), self.agent_width))
        X[:, : self.state_width] = s.vector(self.norm)
        X[np.arange(len(grids)), self.state_width + grids] = 1.0
        return X

    def compact(self, s: GlobalState):
        """(2N,) normalised counts; rebuild rows with ``rows_from_compact``."""
        return np.concatenate([s.vehicle_count, s.order_count]) / self.norm

    def rows_from_compact(self, compact, t, grids):
        n = len(grids)
        X = np.zeros((n, self.agent_width))
        X[:, : 2 * self.N] = compact
        X[np.arange(n), 2 * self.N + np.asarray(t, int)] = 1.0
        X[np.arange(n), self.state_width + np.asarray(grids, int)] = 1.0
        return X


# --- fixed-point probe ------------------------------------------------------

class ConstantRewardEnv:
    """Single-grid world where every agent earns ``reward`` each tick.

    Used to check that learners reach the fixed point r / (1 - gamma).
    """

    def __init__(self, world, n_agents=10, reward=1.0, T=144):
        if world.n_grids != 1:
            raise ValueError("probe world must have exactly one grid")
        self.world = world
        self.N = 1
        self.T = T
        self.k = n_agents
        self.reward = float(reward)
        self.config = SimConfig.__new__(SimConfig)
        self.config.cost_enabled = False
        self.config.cost = 0.0
        self.config.reward_mode = "averaged"
        self.t = None

    @property
    def done(self):
        return self.t is None or self.t >= self.T

    @property
    def n_agents(self):
        return self.k

    def _make_state(self):
        self.agent_grids = np.zeros(self.k, int)
        self.agent_ids = np.arange(self.k)
        self.vehicle_count = np.array([float(self.k)])
        self.order_count = np.array([float(self.k)])
        self.state = GlobalState(self.t, self.vehicle_count, self.order_count, self.T)

    def reset(self, seed):
        self.t = 0
        self.log = EpisodeLog(1, self.T)
        self._make_state()
        return self.state

    def step(self, actions):
        actions = np.asarray(actions, dtype=int)
        if np.any(actions != STAY):
            raise ValueError("only 'stay' is valid in the single-grid probe")
        self.log.append(dict(t=self.t, vehicle_count=[self.k], order_count=[self.k],
                             arrival_reward=[self.reward if self.t else 0.0], arrivals=[self.k],
                             actions=[[0] * 6 + [self.k]], served_value=self.reward * self.k,
                             generated_value=self.reward * self.k, served_orders=self.k,
                             generated_orders=self.k, repositions=0, cost=0.0))
        self.t += 1
        done = self.t >= self.T
        if not done:
            self._make_state()
        r = np.array([0.0 if done else self.reward])
        return StepOutcome(
            rewards=r, arrivals=np.array([float(self.k)]), collected=r * self.k,
            agent_rewards=np.full(self.k, r[0]), agent_dest=np.zeros(self.k, int),
            served_value=self.reward * self.k, generated_value=self.reward * self.k,
            served_orders=self.k, generated_orders=self.k, repositions=0,
            next_state=None if done else self.state, done=done,
        )
