"""Independent DQN and contextual DQN (centralised grid-level action values)."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .baselines import sample_rows, stay_all
from .hexgrid import N_DIRECTIONS, STAY
from .nn import Adam, Mlp, mse_grad

log = logging.getLogger(__name__)


class ReplayMemory:
    """FIFO ring buffer of column arrays with uniform sampling."""

    def __init__(self, capacity, fields):
        self.capacity = int(capacity)
        self.data = {k: np.zeros((self.capacity,) + tuple(shape), dtype=dt) for k, (shape, dt) in fields.items()}
        self.size = 0
        self.pos = 0

    def __len__(self):
        return self.size

    def push(self, **cols):
        n = len(next(iter(cols.values())))
        if n == 0:
            return
        if n > self.capacity:
            cols = {k: v[-self.capacity:] for k, v in cols.items()}
            n = self.capacity
        idx = (self.pos + np.arange(n)) % self.capacity
        for k, arr in self.data.items():
            arr[idx] = cols[k]
        self.pos = (self.pos + n) % self.capacity
        self.size = min(self.size + n, self.capacity)

    def sample_indices(self, batch, rng):
        return rng.integers(0, self.size, size=batch)

    def sample(self, batch, rng):
        idx = self.sample_indices(batch, rng)
        return {k: v[idx] for k, v in self.data.items()}


def transition_fields(n_grids):
    return {
        "s": ((2 * n_grids,), np.float32),
        "t": ((), np.int32),
        "grid": ((), np.int32),
        "action": ((), np.int8),
        "dest": ((), np.int32),
        "reward": ((), np.float64),
        "s1": ((2 * n_grids,), np.float32),
        "done": ((), bool),
    }


@dataclass
class DqnConfig:
    gamma: float = 0.9
    hidden: tuple = (128, 64, 32)
    lr: float = 1e-3
    batch_size: int = 3000
    m1: int = 4000
    capacity: int = 200_000
    eps_start: float = 0.5
    eps_end: float = 0.1
    eps_episodes: int = 15
    eval_eps: float = 0.1
    seed: int = 0


def linear_epsilon(cfg: DqnConfig):
    def schedule(ep):
        if cfg.eps_episodes <= 1:
            return cfg.eps_end
        frac = min(ep / (cfg.eps_episodes - 1), 1.0)
        return cfg.eps_start + frac * (cfg.eps_end - cfg.eps_start)

    return schedule


# --- contexts and action selection ----------------------------------------------

def centralized_q(net: Mlp, feat, state) -> np.ndarray:
    """Q(s_t, g_j) for every grid j."""
    return net.forward(feat.agent_inputs(state, np.arange(feat.N)), cache=False)[:, 0]


def agent_action_values(q_central, world, grid):
    """7-vector Q(s_t^i, k) = Q(s_t, target(grid, k)); 0 where the move is impossible."""
    tgt = world.targets[grid]
    return np.where(tgt >= 0, q_central[np.maximum(tgt, 0)], 0.0)


def collaborative_context_q(q_central, world, grid, cost=0.0):
    """Bit k = 1 iff Q of direction k's target >= own Q (+ cost); stay always 1.

    Directions without a target carry 1 here; the geographic context removes them.
    """
    tgt = world.targets[grid]
    own = q_central[grid]
    c = np.ones(N_DIRECTIONS, dtype=np.int8)
    for k in range(6):
        if tgt[k] >= 0:
            c[k] = 1 if q_central[tgt[k]] >= own + cost else 0
    c[STAY] = 1
    return c


def masked_values(q_central, world, grid, cost=0.0, collaborative=True):
    q = agent_action_values(q_central, world, grid)
    mask = world.geo_masks[grid].astype(np.int8)
    if collaborative:
        mask = mask * collaborative_context_q(q_central, world, grid, cost)
    return q * mask, mask


def epsilon_greedy_contextual(q_central, world, agent_grids, eps, rng, cost=0.0, collaborative=True):
    """Per agent: argmax of the masked values with prob. 1 - eps, else uniform over surviving actions."""
    if not 0.0 <= eps <= 1.0:
        raise ValueError("eps must lie in [0, 1]")
    agent_grids = np.asarray(agent_grids, dtype=int)
    n = len(agent_grids)
    if n == 0:
        return np.zeros(0, dtype=int)
    grids, inv = np.unique(agent_grids, return_inverse=True)
    best = np.zeros(len(grids), dtype=int)
    masks = np.zeros((len(grids), N_DIRECTIONS), dtype=np.int8)
    for i, g in enumerate(grids):
        q, m = masked_values(q_central, world, g, cost, collaborative)
        assert m[STAY] == 1 and m.any()
        best[i] = int(np.argmax(np.where(m > 0, q, -np.inf)))
        masks[i] = m
    out = best[inv].copy()
    explore = rng.random(n) < eps
    if explore.any():
        out[explore] = sample_rows(masks[inv[explore]], rng)
    return out


def epsilon_greedy_independent(q_agents, world, agent_grids, eps, rng):
    """Independent DQN selection over per-agent 7-way values, geographic mask only."""
    agent_grids = np.asarray(agent_grids, dtype=int)
    n = len(agent_grids)
    if n == 0:
        return np.zeros(0, dtype=int)
    geo = world.geo_masks[agent_grids]
    out = np.argmax(np.where(geo > 0, q_agents, -np.inf), axis=1)
    explore = rng.random(n) < eps
    if explore.any():
        out[explore] = sample_rows(geo[explore], rng)
    return out


# --- losses / targets ------------------------------------------------------------

def dqn_target(reward, gamma, next_max, done=False):
    return reward + (0.0 if done else gamma * next_max)


def _neighbor_block(world, dest):
    """(B, 7) grids of Ner(dest), padded with dest itself."""
    tgt = world.targets[dest]
    return np.where(tgt >= 0, tgt, dest[:, None])


class ContextualDQN:
    """cDQN agent: one network Q([s_t, one_hot(g)]) -> R with a ReLU+1 head."""

    def __init__(self, world, feat, cfg: DqnConfig, cost=0.0):
        self.world = world
        self.feat = feat
        self.cfg = cfg
        self.cost = cost
        self.net = Mlp([feat.agent_width, *cfg.hidden, 1], hidden="relu", output="relu1", seed=cfg.seed)
        self.target = self.net.copy()
        self.opt = Adam(self.net.params, lr=cfg.lr)
        self.memory = ReplayMemory(cfg.capacity, transition_fields(feat.N))
        self.collaborative = True

    def q_values(self, state):
        return centralized_q(self.net, self.feat, state)

    def act(self, env, state, eps, rng):
        if state.t + 1 >= env.T:
            return stay_all(env.n_agents)
        q = self.q_values(state)
        return epsilon_greedy_contextual(q, self.world, env.agent_grids, eps, rng, self.cost, self.collaborative)

    def store(self, state, grids, actions, out, T):
        n = len(grids)
        if n == 0 or out.next_state is None:
            return
        self.memory.push(
            s=np.tile(self.feat.compact(state), (n, 1)),
            t=np.full(n, state.t),
            grid=grids,
            action=actions,
            dest=out.agent_dest,
            reward=out.rewards[out.agent_dest],  # cost stays out of the cDQN objective
            s1=np.tile(self.feat.compact(out.next_state), (n, 1)),
            done=np.full(n, state.t + 1 >= T - 1),
        )

    def batch_targets(self, b):
        B = len(b["t"])
        nb = _neighbor_block(self.world, b["dest"].astype(int))
        X1 = self.feat.rows_from_compact(np.repeat(b["s1"], 7, axis=0), np.repeat(b["t"] + 1, 7), nb.reshape(-1))
        q1 = self.target.forward(X1, cache=False)[:, 0].reshape(B, 7)
        boot = np.where(b["done"], 0.0, self.cfg.gamma * q1.max(axis=1))
        return b["reward"] + boot

    def update(self, rng, n_batches=None):
        if len(self.memory) == 0:
            log.warning("replay memory empty; skipping update")
            return []
        losses = []
        for _ in range(n_batches or self.cfg.m1):
            b = self.memory.sample(min(self.cfg.batch_size, max(len(self.memory), 1)), rng)
            y = self.batch_targets(b)
            X = self.feat.rows_from_compact(b["s"], b["t"], b["dest"])
            pred = self.net.forward(X)[:, 0]
            loss, g = mse_grad(pred, y)
            self.opt.step(self.net.params, self.net.backward(g[:, None]))
            losses.append(loss)
        return losses

    def refresh_target(self):
        self.target = self.net.copy()


class IndependentDQN:
    """Shared 7-way Q network over agent states [s_t, one_hot(g)] with ELU hidden units."""

    def __init__(self, world, feat, cfg: DqnConfig, cost=0.0):
        self.world = world
        self.feat = feat
        self.cfg = cfg
        self.cost = cost
        self.net = Mlp([feat.agent_width, *cfg.hidden, N_DIRECTIONS], hidden="elu", output="identity", seed=cfg.seed)
        self.target = self.net.copy()
        self.opt = Adam(self.net.params, lr=cfg.lr)
        self.memory = ReplayMemory(cfg.capacity, transition_fields(feat.N))

    def q_values(self, state, grids):
        return self.net.forward(self.feat.agent_inputs(state, grids), cache=False)

    def act(self, env, state, eps, rng):
        if state.t + 1 >= env.T or env.n_agents == 0:
            return stay_all(env.n_agents)
        grids, inv = np.unique(env.agent_grids, return_inverse=True)
        q = self.q_values(state, grids)[inv]
        return epsilon_greedy_independent(q, self.world, env.agent_grids, eps, rng)

    def store(self, state, grids, actions, out, T):
        n = len(grids)
        if n == 0 or out.next_state is None:
            return
        self.memory.push(
            s=np.tile(self.feat.compact(state), (n, 1)),
            t=np.full(n, state.t),
            grid=grids,
            action=actions,
            dest=out.agent_dest,
            reward=out.agent_rewards,  # includes reposition cost when enabled
            s1=np.tile(self.feat.compact(out.next_state), (n, 1)),
            done=np.full(n, state.t + 1 >= T - 1),
        )

    def batch_targets(self, b):
        dest = b["dest"].astype(int)
        X1 = self.feat.rows_from_compact(b["s1"], b["t"] + 1, dest)
        q1 = self.target.forward(X1, cache=False)
        q1 = np.where(self.world.geo_masks[dest] > 0, q1, -np.inf).max(axis=1)
        return b["reward"] + np.where(b["done"], 0.0, self.cfg.gamma * q1)

    def update(self, rng, n_batches=None):
        if len(self.memory) == 0:
            log.warning("replay memory empty; skipping update")
            return []
        losses = []
        for _ in range(n_batches or self.cfg.m1):
            b = self.memory.sample(min(self.cfg.batch_size, len(self.memory)), rng)
            y = self.batch_targets(b)
            X = self.feat.rows_from_compact(b["s"], b["t"], b["grid"])
            out = self.net.forward(X)
            a = b["action"].astype(int)
            pred = out[np.arange(len(a)), a]
            loss, g = mse_grad(pred, y)
            G = np.zeros_like(out)
            G[np.arange(len(a)), a] = g
            self.opt.step(self.net.params, self.net.backward(G))
            losses.append(loss)
        return losses

    def refresh_target(self):
        self.target = self.net.copy()


def train_dqn_agent(agent, env, seeds, rng, eps_schedule=None, on_episode=None):
    """Training loop shared by cDQN and independent DQN: roll out, store, M1 updates, refresh target."""
    eps_schedule = eps_schedule or linear_epsilon(agent.cfg)
    history = []
    for ep, seed in enumerate(seeds):
        eps = eps_schedule(ep)
        state = env.reset(seed)
        while not env.done:
            grids = env.agent_grids.copy()
            actions = agent.act(env, state, eps, rng)
            out = env.step(actions)
            agent.store(state, grids, actions, out, env.T)
            state = out.next_state
        losses = agent.update(rng)
        agent.refresh_target()
        history.append(dict(episode=ep, eps=eps, loss=float(np.mean(losses)) if losses else float("nan")))
        if on_episode is not None:
            on_episode(ep, env.log)
    return history


def train_cdqn(env, feat, cfg: DqnConfig, seeds, rng, cost=0.0, warm_table=None, warm_context=None):
    agent = ContextualDQN(env.world, feat, cfg, cost)
    if warm_table is not None:
        from .ca2c import warm_start_value

        warm_start_value(agent.net, warm_table, feat, warm_context, lr=cfg.lr, seed=cfg.seed)
        agent.refresh_target()
    return agent, train_dqn_agent(agent, env, seeds, rng)


def train_idqn(env, feat, cfg: DqnConfig, seeds, rng, cost=0.0):
    agent = IndependentDQN(env.world, feat, cfg, cost)
    return agent, train_dqn_agent(agent, env, seeds, rng)
