"""Contextual multi-agent actor-critic.

A centralised value network V([s_t, one_hot(g)]) gives one state value per
grid; agents only move towards neighbours whose value is at least their own
(collaborative context) and never off the map (geographic context).  The
policy network emits strictly positive logits (ReLU+1 head) which are masked
and L1-normalised into action probabilities.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .baselines import sample_rows, stay_all
from .cdqn import ReplayMemory, collaborative_context_q
from .hexgrid import N_DIRECTIONS, STAY
from .nn import Adam, Mlp, mse_grad

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6


@dataclass
class A2CConfig:
    gamma: float = 0.9
    hidden: tuple = (128, 64, 32)
    lr: float = 1e-3
    batch_size: int = 3000
    m1: int = 4000
    m2: int = 4000
    seed: int = 0
    collaborative: bool = True
    geographic: bool = True
    warm_steps: int = 2000
    warm_tol: float = 1e-2


def state_values(net: Mlp, feat, state) -> np.ndarray:
    """v_t: V(s_t, g_j) for every grid j."""
    return net.forward(feat.agent_inputs(state, np.arange(feat.N)), cache=False)[:, 0]


def collaborative_context_v(v, world, grid):
    return collaborative_context_q(v, world, grid, 0.0)


def policy_masks(v, world, grids, collaborative=True, geographic=True):
    """(len(grids), 7) products C * G."""
    m = np.ones((len(grids), N_DIRECTIONS), dtype=np.int8)
    for i, g in enumerate(grids):
        if geographic:
            m[i] *= world.geo_masks[g]
        if collaborative:
            m[i] *= collaborative_context_v(v, world, g)
    return m


def masked_probabilities(logits, masks):
    """pi = (P * mask) / ||P * mask||_1, row-wise."""
    q = np.asarray(logits, float) * masks
    s = q.sum(axis=-1, keepdims=True)
    assert np.all(s > 0), "masked logits vanished; stay must always survive"
    return q / s


def execute_guard(world, grids, actions):
    """Turn physically impossible moves into stays (only reachable when the geographic mask is dropped)."""
    bad = world.geo_masks[grids, actions] == 0
    out = actions.copy()
    out[bad] = STAY
    return out


def value_target(rewards, probs, v_next, gamma, done=False):
    """sum_k pi(k) (r_k + gamma V'(dest_k)); per-action arrays of length 7."""
    boot = 0.0 if done else gamma * np.asarray(v_next, float)
    return float(np.sum(np.asarray(probs) * (np.asarray(rewards, float) + boot)))


def advantage(r, gamma, v_next, v, done=False):
    return r + (0.0 if done else gamma * v_next) - v


def log_prob_grad(logits, masks, actions):
    """d log pi(a) / d logits for the masked L1-normalised policy, row-wise."""
    logits = np.asarray(logits, float)
    n = len(logits)
    mp = logits * masks
    S = mp.sum(axis=1, keepdims=True)
    g = -masks / S
    g[np.arange(n), actions] += 1.0 / logits[np.arange(n), actions]
    return g


def masked_log_prob(logits, masks, actions):
    p = masked_probabilities(logits, masks)
    return np.log(p[np.arange(len(actions)), actions])


def warm_start_value(net: Mlp, table, feat, context=None, lr=1e-3, steps=2000, tol=1e-2, seed=0, batch=None):
    """Regress the network onto ``table[t, g]`` over all (t, g) inputs.

    ``context`` is an optional (T, 2N) array of normalised count features for
    each tick (zeros when omitted).  Returns the final mean squared error.
    """
    table = np.asarray(table, dtype=float)
    if not np.all(np.isfinite(table)):
        raise ValueError("warm-start table must be finite")
    T, N = table.shape
    ctx = np.zeros((T, 2 * N)) if context is None else np.asarray(context, float)
    tt, gg = np.meshgrid(np.arange(T), np.arange(N), indexing="ij")
    tt, gg = tt.ravel(), gg.ravel()
    X = feat.rows_from_compact(ctx[tt], tt, gg)
    y = table[tt, gg]
    opt = Adam(net.params, lr=lr)
    rng = np.random.default_rng(seed)
    err = float(np.mean((net.forward(X, cache=False)[:, 0] - y) ** 2))
    for step in range(steps):
        if err < tol:
            break
        idx = rng.choice(len(y), size=batch, replace=False) if batch and batch < len(y) else slice(None)
        pred = net.forward(X[idx])[:, 0]
        _, g = mse_grad(pred, y[idx])
        opt.step(net.params, net.backward(g[:, None]))
        if step % 10 == 9 or step == steps - 1:
            err = float(np.mean((net.forward(X, cache=False)[:, 0] - y) ** 2))
    if err >= tol:
        warnings.warn(f"value warm start stopped at mse={err:.4g} (tol {tol})", RuntimeWarning, stacklevel=2)
    return err


def _experience_fields(n_grids):
    return {
        "s": ((2 * n_grids,), np.float32),
        "t": ((), np.int32),
        "grid": ((), np.int32),
        "action": ((), np.int8),
        "mask": ((N_DIRECTIONS,), np.int8),
        "vtarget": ((), np.float64),
        "adv": ((), np.float64),
    }


class ContextualA2C:
    def __init__(self, world, feat, cfg: A2CConfig, cost=0.0):
        self.world = world
        self.feat = feat
        self.cfg = cfg
        self.cost = cost
        self.value = Mlp([feat.agent_width, *cfg.hidden, 1], hidden="relu", output="identity", seed=cfg.seed)
        self.policy = Mlp([feat.agent_width, *cfg.hidden, N_DIRECTIONS], hidden="relu", output="relu1",
                          seed=cfg.seed + 1)
        self.value_target_net = self.value.copy()
        self.vopt = Adam(self.value.params, lr=cfg.lr)
        self.popt = Adam(self.policy.params, lr=cfg.lr)

    # -- acting ------------------------------------------------------------------
    def values(self, state):
        return state_values(self.value, self.feat, state)

    def grid_policy(self, state, v, grids):
        logits = self.policy.forward(self.feat.agent_inputs(state, grids), cache=False)
        masks = policy_masks(v, self.world, grids, self.cfg.collaborative, self.cfg.geographic)
        return logits, masks, masked_probabilities(logits, masks)

    def policy_forward(self, env, state, rng):
        """Sample a joint action; returns (executed actions, sampled actions, per-grid data)."""
        grids_all = env.agent_grids
        n = len(grids_all)
        if n == 0 or state.t + 1 >= env.T:
            return stay_all(n), stay_all(n), None
        v = self.values(state)
        grids, inv = np.unique(grids_all, return_inverse=True)
        logits, masks, probs = self.grid_policy(state, v, grids)
        sampled = sample_rows(probs[inv], rng)
        executed = execute_guard(self.world, grids_all, sampled)
        return executed, sampled, dict(v=v, grids=grids, inv=inv, masks=masks, probs=probs)

    def act(self, env, state, rng):
        return self.policy_forward(env, state, rng)[0]

    # -- experience --------------------------------------------------------------
    def experience(self, state, sampled, info, out, T):
        """Policy-weighted value targets and advantages for every agent of one tick."""
        if info is None or out.next_state is None:
            return None
        done = state.t + 1 >= T - 1
        gamma = self.cfg.gamma
        v1 = self.value_target_net.forward(self.feat.agent_inputs(out.next_state, np.arange(self.feat.N)),
                                           cache=False)[:, 0]
        grids, inv, probs = info["grids"], info["inv"], info["probs"]
        tgt = self.world.targets[grids]
        dest = np.where(tgt >= 0, tgt, grids[:, None])  # guarded moves end where they started
        moved = dest != grids[:, None]
        r = out.rewards[dest] - self.cost * moved
        boot = 0.0 if done else gamma * v1[dest]
        vtarget = np.sum(probs * (r + boot), axis=1)

        agent_next = 0.0 if done else gamma * v1[out.agent_dest]
        adv = out.agent_rewards + agent_next - info["v"][grids[inv]]
        n = len(inv)
        return dict(
            s=np.tile(self.feat.compact(state), (n, 1)),
            t=np.full(n, state.t),
            grid=grids[inv],
            action=sampled,
            mask=info["masks"][inv],
            vtarget=vtarget[inv],
            adv=adv,
        )

    def update(self, memory: ReplayMemory, rng):
        cfg = self.cfg
        if len(memory) == 0:
            log.warning("no experience collected; skipping update")
            return [], []
        vloss = []
        for _ in range(cfg.m1):
            b = memory.sample(min(cfg.batch_size, len(memory)), rng)
            X = self.feat.rows_from_compact(b["s"], b["t"], b["grid"])
            pred = self.value.forward(X)[:, 0]
            loss, g = mse_grad(pred, b["vtarget"])
            if not np.isfinite(loss) or loss > DIVERGENCE_LIMIT:
                raise RuntimeError(f"value loss diverged ({loss:.3g})")
            self.vopt.step(self.value.params, self.value.backward(g[:, None]))
            vloss.append(loss)
        ploss = []
        for _ in range(cfg.m2):
            b = memory.sample(min(cfg.batch_size, len(memory)), rng)
            X = self.feat.rows_from_compact(b["s"], b["t"], b["grid"])
            logits = self.policy.forward(X)
            a = b["action"].astype(int)
            masks = b["mask"].astype(float)
            adv = b["adv"]
            # minimise -A log pi(a); advantage is a constant here
            G = -(adv[:, None] * log_prob_grad(logits, masks, a)) / len(a)
            self.popt.step(self.policy.params, self.policy.backward(G))
            ploss.append(float(-np.mean(adv * masked_log_prob(logits, masks, a))))
        return vloss, ploss

    def refresh_target(self):
        self.value_target_net = self.value.copy()


def policy_forward(agent: ContextualA2C, env, state, rng):
    executed, _, info = agent.policy_forward(env, state, rng)
    return executed, None if info is None else info["probs"][info["inv"]]


def train_ca2c(env, feat, cfg: A2CConfig, seeds, rng, cost=0.0, warm_table=None, warm_context=None,
               agent=None, on_episode=None):
    """Training loop: collect one episode, M1 value batches, M2 policy batches, refresh the value target."""
    agent = agent or ContextualA2C(env.world, feat, cfg, cost)
    if warm_table is not None:
        warm_start_value(agent.value, warm_table, feat, warm_context, lr=cfg.lr, steps=cfg.warm_steps,
                         tol=cfg.warm_tol, seed=cfg.seed)
        agent.refresh_target()
    history = []
    for ep, seed in enumerate(seeds):
        memory = ReplayMemory(1, _experience_fields(feat.N))
        chunks = []
        state = env.reset(seed)
        while not env.done:
            executed, sampled, info = agent.policy_forward(env, state, rng)
            out = env.step(executed)
            exp = agent.experience(state, sampled, info, out, env.T)
            if exp is not None:
                chunks.append(exp)
            state = out.next_state
        if chunks:
            cols = {k: np.concatenate([c[k] for c in chunks]) for k in chunks[0]}
            memory = ReplayMemory(len(cols["t"]), _experience_fields(feat.N))
            memory.push(**cols)
        vloss, ploss = agent.update(memory, rng)
        agent.refresh_target()
        history.append(dict(episode=ep, value_loss=float(np.mean(vloss)) if vloss else float("nan"),
                            policy_loss=float(np.mean(ploss)) if ploss else float("nan")))
        if on_episode is not None:
            on_episode(ep, env.log)
    return agent, history
