"""Non-deep reallocation policies: Simulation, Diffusion, Rule-based,
Value-Iter, tabular Q-learning and tabular SARSA.

Value tables are indexed by *arrival* tick: ``V[t, j]`` is the reward (or
return, for Value-Iter) of an idle agent present at grid ``j`` at tick ``t``.
A decision taken at ``t`` therefore looks at row ``t + 1``.
"""
from __future__ import annotations

import csv

import numpy as np

from .hexgrid import N_DIRECTIONS, STAY


def sample_rows(weights, rng):
    """Sample one column index per row with probability proportional to ``weights``."""
    w = np.asarray(weights, dtype=float)
    if len(w) == 0:
        return np.zeros(0, dtype=int)
    c = np.cumsum(w, axis=1)
    u = rng.random(len(w)) * c[:, -1]
    idx = (u[:, None] >= c).sum(axis=1)
    return np.minimum(idx, w.shape[1] - 1)


def stay_all(n):
    return np.full(n, STAY, dtype=int)


def simulation_policy(agent_grids, rng=None):
    """No fleet management: every idle vehicle stays."""
    return stay_all(len(agent_grids))


def diffusion_policy(world, agent_grids, rng):
    """Uniform over geographically valid directions, stay included."""
    return sample_rows(world.geo_masks[agent_grids], rng)


# --- value tables -------------------------------------------------------------

class ValueTable:
    def __init__(self, values, counts=None):
        values = np.array(values, dtype=float)
        if not np.all(np.isfinite(values)):
            raise ValueError("value table must be finite")
        if np.any(values < 0):
            raise ValueError("value table entries must be nonnegative")
        self.values = values
        self.counts = np.zeros_like(values) if counts is None else np.array(counts, dtype=float)

    @property
    def T(self):
        return self.values.shape[0]

    @classmethod
    def zeros(cls, T, N):
        return cls(np.zeros((T, N)))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "grid", "value"])
            for t in range(self.values.shape[0]):
                for g in range(self.values.shape[1]):
                    w.writerow([t, g, repr(float(self.values[t, g]))])

    @classmethod
    def from_csv(cls, path, T, N):
        vals = np.zeros((T, N))
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                vals[int(row["t"]), int(row["grid"])] = float(row["value"])
        return cls(vals)


def rule_probabilities(world, values_next, grid, collaborative=False):
    """Move probabilities for agents at ``grid`` from next-tick values ``values_next`` (N,)."""
    geo = world.geo_masks[grid].astype(float)
    tgt = world.targets[grid]
    w = np.where(geo > 0, values_next[np.maximum(tgt, 0)], 0.0)
    mask = geo.copy()
    if collaborative:
        mask *= (w >= values_next[grid]).astype(float)
        mask[STAY] = 1.0
    w = w * mask
    if w.sum() <= 0:
        return mask / mask.sum()
    return w / w.sum()


def rule_based_policy(world, table: ValueTable, t, agent_grids, rng, collaborative=False):
    agent_grids = np.asarray(agent_grids, dtype=int)
    if np.any(table.values < 0):
        raise ValueError("rule-based table must be nonnegative")
    if t + 1 >= table.T or len(agent_grids) == 0:
        return stay_all(len(agent_grids))
    v = table.values[t + 1]
    grids, inv = np.unique(agent_grids, return_inverse=True)
    probs = np.array([rule_probabilities(world, v, g, collaborative) for g in grids])
    return sample_rows(probs[inv], rng)


def value_iter_update(table: ValueTable, log, world, gamma=0.9, collaborative=True):
    """One policy-evaluation sweep over an episode log (backwards in time).

    Target for (t, j): observed arrival reward plus the discounted value of the
    next-tick destinations, weighted by the empirical action frequencies at
    (t, j) (or the table's own policy where no agent acted).  Each cell keeps a
    running average with step 1 / visit count.
    """
    R = log.table("arrival_reward")
    acts = np.zeros((table.T, world.n_grids, N_DIRECTIONS))
    for rec in log.records:
        acts[rec["t"]] = rec["actions"]
    V = table.values
    T = table.T
    for t in reversed(range(T)):
        target = R[t].copy()
        if t + 1 < T:
            for j in world.valid_ids:
                n = acts[t, j].sum()
                if n > 0:
                    p = acts[t, j] / n
                else:
                    p = rule_probabilities(world, V[t + 1], j, collaborative)
                tgt = world.targets[j]
                target[j] += gamma * sum(p[k] * V[t + 1, tgt[k]] for k in range(N_DIRECTIONS) if p[k] > 0)
        table.counts[t] += 1
        V[t] += (target - V[t]) / table.counts[t]
    np.maximum(V, 0.0, out=V)
    return table


# --- tabular Q / SARSA ----------------------------------------------------------

class TabularQ:
    def __init__(self, T, N, world):
        self.q = np.zeros((T, N, N_DIRECTIONS))
        self.world = world

    @property
    def T(self):
        return self.q.shape[0]

    def valid(self, grid):
        return self.world.geo_masks[grid] > 0

    def greedy(self, t, grid):
        row = np.where(self.valid(grid), self.q[t, grid], -np.inf)
        return int(np.argmax(row))

    def max_valid(self, t, grid):
        return float(np.max(self.q[t, grid][self.valid(grid)]))

    def act(self, t, agent_grids, eps, rng):
        agent_grids = np.asarray(agent_grids, dtype=int)
        n = len(agent_grids)
        if n == 0 or t + 1 >= self.T:
            return stay_all(n)
        greedy = {g: self.greedy(t, g) for g in np.unique(agent_grids)}
        out = np.array([greedy[g] for g in agent_grids], dtype=int)
        explore = rng.random(n) < eps
        if explore.any():
            out[explore] = sample_rows(self.world.geo_masks[agent_grids[explore]], rng)
        return out

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "grid", "direction", "value"])
            T, N, K = self.q.shape
            for t in range(T):
                for g in range(N):
                    for k in range(K):
                        w.writerow([t, g, k, repr(float(self.q[t, g, k]))])

    @classmethod
    def from_csv(cls, path, T, world):
        tab = cls(T, world.n_grids, world)
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                tab.q[int(row["t"]), int(row["grid"]), int(row["direction"])] = float(row["value"])
        return tab


def tabular_q_update(table: TabularQ, transition, alpha, gamma):
    """``transition = (t, grid, action, reward, next_t, next_grid, done)``."""
    t, g, k, r, t1, g1, done = transition
    boot = 0.0 if done else gamma * table.max_valid(t1, g1)
    table.q[t, g, k] += alpha * (r + boot - table.q[t, g, k])
    return table


def tabular_sarsa_update(table: TabularQ, transition, next_action, alpha, gamma):
    t, g, k, r, t1, g1, done = transition
    boot = 0.0 if done else gamma * table.q[t1, g1, next_action]
    table.q[t, g, k] += alpha * (r + boot - table.q[t, g, k])
    return table


def train_tabular(env, table: TabularQ, seeds, eps_schedule, alpha=0.1, gamma=0.9, sarsa=False, rng=None):
    """Online tabular training, one update per agent transition."""
    rng = rng if rng is not None else np.random.default_rng(0)
    T = env.T
    for ep, seed in enumerate(seeds):
        eps = eps_schedule(ep)
        state = env.reset(seed)
        pending = None
        while not env.done:
            t = state.t
            grids = env.agent_grids.copy()
            ids = env.agent_ids.copy()
            actions = table.act(t, grids, eps, rng)
            if sarsa and pending is not None:
                _flush_sarsa(table, pending, ids, actions, eps, rng, alpha, gamma)
                pending = None
            out = env.step(actions)
            if out.next_state is None:
                break
            done = t + 1 >= T - 1
            if sarsa:
                pending = (t, grids, actions, out.agent_rewards, out.agent_dest, ids, done)
                if done:
                    _flush_sarsa(table, pending, np.zeros(0, int), np.zeros(0, int), eps, rng, alpha, gamma)
                    pending = None
            else:
                for g, k, r, d in zip(grids, actions, out.agent_rewards, out.agent_dest):
                    tabular_q_update(table, (t, g, k, r, t + 1, d, done), alpha, gamma)
            state = out.next_state
    return table


def _flush_sarsa(table, pending, next_ids, next_actions, eps, rng, alpha, gamma):
    t, grids, actions, rewards, dests, ids, done = pending
    chosen = dict(zip(next_ids.tolist(), next_actions.tolist()))
    for g, k, r, d, vid in zip(grids, actions, rewards, dests, ids):
        a1 = chosen.get(int(vid))
        if a1 is None and not done:
            a1 = int(table.act(t + 1, np.array([d]), eps, rng)[0])
        tabular_sarsa_update(table, (t, g, k, r, t + 1, d, done), a1 if a1 is not None else STAY, alpha, gamma)
