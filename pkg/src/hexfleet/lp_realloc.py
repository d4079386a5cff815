"""Centralised reallocation: a small convex QP over flows between grids.

For tick t with state values v, idle-agent counts d and estimated next-tick
orders o, choose nonnegative flows y over a direction set (self-loops plus
moves from lower- to higher-valued neighbours) maximising

    (v^T A - c^T) y - lam * || D (o - A y) ||^2     s.t.  B y = d,  y >= 0

where A / B map a flow to its destination / origin grid and D is the
adjacency matrix (self-loops included).  The relaxation is solved with
accelerated projected gradient ascent (each origin's flows live on their own
scaled simplex) and then rounded per origin.
"""
from __future__ import annotations

import csv
import itertools
import logging
import math
from dataclasses import dataclass

import numpy as np

from .hexgrid import STAY, adjacency_matrix, build_grid

log = logging.getLogger(__name__)


@dataclass
class RepositionProblem:
    directions: list  # (from, to) pairs
    A: np.ndarray  # N x Nr in-flow
    B: np.ndarray  # N x Nr out-flow
    v: np.ndarray
    c: np.ndarray
    o: np.ndarray
    d: np.ndarray
    lam: float
    D: np.ndarray

    @property
    def n_grids(self):
        return len(self.v)

    @property
    def n_dirs(self):
        return len(self.directions)

    def origin_groups(self):
        """Column indices per origin grid, in column order."""
        groups = {}
        for k, (i, _) in enumerate(self.directions):
            groups.setdefault(i, []).append(k)
        return groups


@dataclass
class RelaxationResult:
    y: np.ndarray
    objective: float
    iterations: int
    converged: bool


def _assemble(v, d, o, pairs, cost, lam, D):
    N = len(v)
    A = np.zeros((N, len(pairs)))
    B = np.zeros((N, len(pairs)))
    c = np.zeros(len(pairs))
    for k, (i, j) in enumerate(pairs):
        B[i, k] = 1.0
        A[j, k] = 1.0
        c[k] = 0.0 if i == j else cost
    return RepositionProblem(pairs, A, B, np.asarray(v, float), c, np.asarray(o, float),
                             np.asarray(d, float), float(lam), np.asarray(D, float))


def direction_pairs(v, d, world):
    """Self-loops for occupied grids plus moves to strictly higher-valued neighbours."""
    pairs = []
    for i in range(len(v)):
        if d[i] <= 0:
            continue
        pairs.append((i, i))
        for j in world.neighbors(i):
            if v[j] > v[i]:
                pairs.append((i, int(j)))
    return pairs


def build_problem(v, d, o, world, cost=0.0, lam=1.0):
    v, d, o = (np.asarray(x, float) for x in (v, d, o))
    if not (len(v) == len(d) == len(o) == world.n_grids):
        raise ValueError("v, d and o must have one entry per grid")
    if np.any(d < 0) or np.any(o < 0):
        raise ValueError("agent and order counts must be nonnegative")
    if lam < 0:
        raise ValueError("lam must be >= 0")
    return _assemble(v, d, o, direction_pairs(v, d, world), cost, lam, adjacency_matrix(world))


def build_problem_ungrouped(v, d, o, world, cost=0.0, lam=1.0):
    """Same program with the per-grid penalty (o - A y)^2, i.e. D = I."""
    p = build_problem(v, d, o, world, cost, lam)
    p.D = np.eye(len(p.v))
    return p


def objective(problem: RepositionProblem, y):
    y = np.asarray(y, float)
    r = problem.D @ (problem.o - problem.A @ y)
    return float((problem.v @ problem.A - problem.c) @ y - problem.lam * r @ r)


def gradient(problem, y):
    r = problem.D @ (problem.o - problem.A @ y)
    return problem.A.T @ problem.v - problem.c + 2.0 * problem.lam * problem.A.T @ (problem.D.T @ r)


def project_simplex(x, total):
    """Euclidean projection of ``x`` onto {y >= 0, sum(y) = total}."""
    x = np.asarray(x, float)
    if total <= 0:
        return np.zeros_like(x)
    u = np.sort(x)[::-1]
    css = np.cumsum(u) - total
    idx = np.arange(1, len(x) + 1)
    rho = np.nonzero(u - css / idx > 0)[0][-1]
    theta = css[rho] / (rho + 1)
    return np.maximum(x - theta, 0.0)


def project_feasible(problem, y):
    out = np.zeros_like(y)
    for i, cols in problem.origin_groups().items():
        out[cols] = project_simplex(y[cols], problem.d[i])
    return out


def _linear_optimum(problem):
    g = problem.A.T @ problem.v - problem.c
    y = np.zeros(problem.n_dirs)
    for i, cols in problem.origin_groups().items():
        y[cols[int(np.argmax(g[cols]))]] = problem.d[i]
    return y


def solve_relaxation(problem: RepositionProblem, max_iter=20000, tol=1e-12) -> RelaxationResult:
    """Accelerated projected gradient ascent with step 1/L, L = 2 lam ||D A||_2^2."""
    if problem.n_dirs == 0:
        return RelaxationResult(np.zeros(0), objective(problem, np.zeros(0)), 0, True)
    DA = problem.D @ problem.A
    L = 2.0 * problem.lam * np.linalg.norm(DA, 2) ** 2
    if L <= 0:
        y = _linear_optimum(problem)
        return RelaxationResult(y, objective(problem, y), 0, True)
    y = project_feasible(problem, np.zeros(problem.n_dirs))
    z, tk = y.copy(), 1.0
    f_prev = objective(problem, y)
    best, f_best = y, f_prev
    scale = 1.0 + abs(f_prev)
    for it in range(1, max_iter + 1):
        y_new = project_feasible(problem, z + gradient(problem, z) / L)
        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * tk * tk))
        z = y_new + ((tk - 1.0) / t_new) * (y_new - y)
        f = objective(problem, y_new)
        if f < f_prev:  # adaptive restart keeps the ascent monotone
            z, t_new = y_new.copy(), 1.0
        if f > f_best:
            best, f_best = y_new, f
        step = np.max(np.abs(y_new - y))
        y, tk = y_new, t_new
        if step < 1e-12 or (abs(f - f_prev) <= tol * scale and it > 10):
            f_prev = f
            return RelaxationResult(best, f_best, it, True)
        f_prev = f
    log.warning("relaxation did not converge in %d iterations", max_iter)
    return RelaxationResult(best, f_best, max_iter, False)


def round_to_integer(y, problem: RepositionProblem):
    """Floor per origin, then hand the remaining units to the largest fractional parts (ties: lowest index)."""
    y = np.maximum(np.asarray(y, float), 0.0)
    out = np.zeros(len(y), dtype=int)
    for i, cols in problem.origin_groups().items():
        d = int(round(problem.d[i]))
        if abs(y[cols].sum() - problem.d[i]) > 1e-6 * max(1.0, problem.d[i]):
            raise ValueError(f"flows out of grid {i} do not sum to {problem.d[i]}")
        part = y[cols]
        fl = np.floor(part + 1e-9).astype(int)
        rest = d - int(fl.sum())
        frac = part - fl
        # stable sort on -frac keeps the lowest index first among ties
        for k in np.argsort(-np.round(frac, 9), kind="stable")[:max(rest, 0)]:
            fl[k] += 1
        while fl.sum() > d:  # only reachable through float noise in floor
            fl[int(np.argmax(fl))] -= 1
        out[cols] = fl
    return out


def _compositions(total, parts):
    """All nonnegative integer vectors of length ``parts`` summing to ``total``."""
    for bars in itertools.combinations(range(total + parts - 1), parts - 1):
        prev, comp = -1, []
        for b in bars:
            comp.append(b - prev - 1)
            prev = b
        comp.append(total + parts - 1 - prev - 1)
        yield comp


def brute_force_oracle(problem: RepositionProblem, cap=200_000):
    """Exact integer optimum by enumeration; ties keep the first point found."""
    groups = problem.origin_groups()
    count = 1
    for i, cols in groups.items():
        d = int(round(problem.d[i]))
        count *= math.comb(d + len(cols) - 1, len(cols) - 1)
        if count > cap:
            raise ValueError(f"instance has more than {cap} integer feasible points")
    per_origin = [(cols, list(_compositions(int(round(problem.d[i])), len(cols)))) for i, cols in groups.items()]
    best, f_best = None, -np.inf
    y = np.zeros(problem.n_dirs, dtype=int)
    for combo in itertools.product(*[c for _, c in per_origin]):
        for (cols, _), comp in zip(per_origin, combo):
            y[cols] = comp
        f = objective(problem, y)
        if f > f_best + 1e-12:
            best, f_best = y.copy(), f
    return best


def flow_direction(world, i, j):
    if i == j:
        return STAY
    hits = np.flatnonzero(world.targets[i, :6] == j)
    if len(hits) == 0:
        raise ValueError(f"grids {i} and {j} are not neighbours")
    return int(hits[0])


def plan_to_joint_action(y_int, problem: RepositionProblem, world, agent_grids, rng):
    """Hand out the integer flows to the agents of each origin in shuffled order."""
    agent_grids = np.asarray(agent_grids, dtype=int)
    actions = np.full(len(agent_grids), STAY, dtype=int)
    counts = np.bincount(agent_grids, minlength=problem.n_grids)
    for i, cols in problem.origin_groups().items():
        if int(np.sum(y_int[cols])) != counts[i]:
            raise ValueError(f"plan moves {int(np.sum(y_int[cols]))} agents out of grid {i}, which has {counts[i]}")
        idx = np.flatnonzero(agent_grids == i)
        idx = idx[rng.permutation(len(idx))]
        pos = 0
        for k in cols:
            n = int(y_int[k])
            actions[idx[pos:pos + n]] = flow_direction(world, *problem.directions[k])
            pos += n
    missing = [g for g in np.flatnonzero(counts) if g not in problem.origin_groups()]
    if missing:
        raise ValueError(f"plan has no flows for occupied grids {missing}")
    return actions


def random_tiny_problem(rng, world, max_agents=6, lam_range=(0.1, 5.0), cost=None, ungrouped=False):
    """Random instance for oracle checks: values in [0, 10), up to ``max_agents`` agents."""
    N = world.n_grids
    v = rng.uniform(0, 10, N)
    n = int(rng.integers(1, max_agents + 1))
    d = np.bincount(rng.choice(world.valid_ids, size=n), minlength=N).astype(float)
    o = rng.integers(0, 4, N).astype(float) * world.valid
    lam = float(rng.uniform(*lam_range))
    c = float(rng.uniform(0, 2)) if cost is None else cost
    build = build_problem_ungrouped if ungrouped else build_problem
    return build(v, d, o, world, c, lam)


def oracle_gap(problem):
    """Relative objective shortfall of solve+round against the exact integer optimum."""
    y_int = round_to_integer(solve_relaxation(problem).y, problem)
    f_round = objective(problem, y_int)
    f_opt = objective(problem, brute_force_oracle(problem))
    return (f_opt - f_round) / max(abs(f_opt), 1e-9), y_int


def oracle_batch(rng, instances=100, max_grids=6, max_agents=6, lam_range=(0.1, 0.1), cost=0.6):
    """Gaps and flow-violation count of solve+round on random worlds of at most ``max_grids`` cells.

    The default lam/cost are the desk operating point; ``cost=None`` draws it per instance.
    """
    gaps, bad_flow = [], 0
    for _ in range(instances):
        rows = int(rng.integers(1, 3))
        cols = int(rng.integers(1, max_grids // rows + 1))
        prob = random_tiny_problem(rng, build_grid(rows, cols), max_agents, lam_range, cost)
        gap, y = oracle_gap(prob)
        gaps.append(gap)
        bad_flow += int(not np.array_equal(prob.B @ y, prob.d))
    return np.array(gaps), bad_flow


# --- policy -------------------------------------------------------------------

class LpPolicy:
    """Joint action from a trained critic via the reallocation program.

    ``order_mean`` is the (T, N) historical mean order table used for o_{t+1}.
    """

    def __init__(self, value_fn, world, order_mean, lam=1.0, cost=0.0, grouped=True, max_iter=5000):
        self.value_fn = value_fn
        self.world = world
        self.order_mean = np.asarray(order_mean, float)
        self.lam = lam
        self.cost = cost
        self.grouped = grouped
        self.max_iter = max_iter
        self.plans = []  # (tick, from, to, count)

    def problem(self, state, counts):
        t1 = min(state.t + 1, len(self.order_mean) - 1)
        build = build_problem if self.grouped else build_problem_ungrouped
        return build(self.value_fn(state), counts, self.order_mean[t1], self.world, self.cost, self.lam)

    def act(self, env, state, rng):
        n = env.n_agents
        if n == 0 or state.t + 1 >= env.T:
            return np.full(n, STAY, dtype=int)
        counts = np.bincount(env.agent_grids, minlength=self.world.n_grids).astype(float)
        prob = self.problem(state, counts)
        y = round_to_integer(solve_relaxation(prob, max_iter=self.max_iter).y, prob)
        for k, (i, j) in enumerate(prob.directions):
            if y[k] and i != j:
                self.plans.append((state.t, i, j, int(y[k])))
        return plan_to_joint_action(y, prob, self.world, env.agent_grids, rng)

    def dump_plans(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tick", "from", "to", "count"])
            w.writerows(self.plans)


