"""Experiment orchestration: config, seeds, method registry, metrics files.

A run of an experiment is identified by a master seed.  Each run trains the
method on its own training seeds and evaluates it on the shared evaluation
seeds, so every method sees the same evaluation episodes.
"""
from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselines import (TabularQ, ValueTable, diffusion_policy, rule_based_policy, simulation_policy,
                        train_tabular, value_iter_update)
from .ca2c import A2CConfig, ContextualA2C, train_ca2c
from .cdqn import ContextualDQN, DqnConfig, IndependentDQN, linear_epsilon, train_dqn_agent
from .hexgrid import build_grid, load_map, parse_map
from .lp_realloc import LpPolicy
from .nn import load_mlp, save_mlp
from .ordergen import build_demand, fit_mean_tables
from .simcore import Featurizer, FleetEnv, SimConfig, metrics, run_episode

log = logging.getLogger(__name__)

WORKERS_ENV = "HEXFLEET_WORKERS"

EPISODE_FIELDS = ["method", "run", "seed", "gmv", "orr", "repositions", "roi", "scenario_hash"]
AGGREGATE_FIELDS = ["method", "runs", "episodes", "gmv_mean", "gmv_std", "orr_mean", "orr_std",
                    "repositions_mean", "repositions_std", "roi_mean", "roi_std", "scenario_hash"]


# --- configuration ---------------------------------------------------------------

@dataclass
class ExperimentConfig:
    name: str = "experiment"
    world: dict = field(default_factory=lambda: {"rows": 5, "cols": 5})
    demand: dict = field(default_factory=dict)
    fleet: int = 200
    fleet_scale: float = 1.0
    T: int = 144
    gamma: float = 0.9
    cost_enabled: bool = False
    cost: float = 0.6
    reward_mode: str = "averaged"
    method: str = "Simulation"
    params: dict = field(default_factory=dict)
    runs: list = field(default_factory=lambda: [0, 1, 2])
    train_episodes: int = 15
    eval_episodes: int = 10
    history_episodes: int = 10
    train_seeds: dict | None = None  # {run: [seeds]}; default derived from the run seed
    eval_seeds: list | None = None
    history_seeds: list | None = None
    out_dir: str = "results"
    save_logs: bool = False

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        exp = d.pop("experiment", {})
        d.update(exp)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "train_seeds" in d and isinstance(d["train_seeds"], dict):
            d["train_seeds"] = {int(k): list(v) for k, v in d["train_seeds"].items()}
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def to_dict(self):
        return dataclasses.asdict(self)

    def replace(self, **changes):
        new = copy.deepcopy(self)
        for k, v in changes.items():
            setattr(new, k, v)
        new.validate()
        return new

    def with_params(self, **changes):
        params = dict(self.params)
        params.update(changes)
        return self.replace(params=params)

    # seeds
    def eval_seed_list(self):
        if self.eval_seeds is not None:
            return [int(s) for s in self.eval_seeds]
        return [900_000 + i for i in range(self.eval_episodes)]

    def history_seed_list(self):
        if self.history_seeds is not None:
            return [int(s) for s in self.history_seeds]
        return [800_000 + i for i in range(self.history_episodes)]

    def train_seed_list(self, run):
        if self.train_seeds is not None and run in self.train_seeds:
            return [int(s) for s in self.train_seeds[run]]
        return [100_000 * (int(run) + 1) + i for i in range(self.train_episodes)]

    def validate(self):
        if self.reward_mode not in ("averaged", "raw"):
            raise ValueError(f"unknown reward_mode {self.reward_mode!r}")
        if not self.runs:
            raise ValueError("need at least one run seed")
        lookup_method(self.method)
        ev, hist = set(self.eval_seed_list()), set(self.history_seed_list())
        if ev & hist:
            raise ValueError(f"evaluation and history seeds overlap: {sorted(ev & hist)[:5]}")
        for run in self.runs:
            tr = set(self.train_seed_list(run))
            if tr & ev:
                raise ValueError(f"training seeds of run {run} overlap evaluation seeds: {sorted(tr & ev)[:5]}")
            if tr & hist:
                raise ValueError(f"training seeds of run {run} overlap history seeds: {sorted(tr & hist)[:5]}")

    @property
    def label(self):
        """Method name plus suffixes for ablation switches."""
        lab = lookup_method(self.method).name
        ctx = self.params.get("context", "full")
        if ctx == "no-collab":
            lab += "-v1"
        elif ctx == "none":
            lab += "-v2"
        if self.params.get("grouped", True) is False:
            lab += "-ungrouped"
        if self.reward_mode == "raw":
            lab += "-raw"
        return lab

    def scenario_hash(self):
        """Hash of everything that defines the evaluation episodes."""
        key = dict(world=self.world, demand=self.demand, fleet=self.fleet, fleet_scale=self.fleet_scale,
                   T=self.T, cost_enabled=self.cost_enabled, cost=self.cost,
                   eval_seeds=self.eval_seed_list(), history_seeds=self.history_seed_list())
        return hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:16]


def load_config(path) -> ExperimentConfig:
    import tomli

    with open(path, "rb") as fh:
        data = tomli.load(fh)
    base = Path(path).parent
    world = data.get("world", {})
    if "map" in world and not Path(world["map"]).is_absolute():
        world["map"] = str((base / world["map"]).resolve())
    return ExperimentConfig.from_dict(data)


def build_world(spec):
    if "map" in spec:
        return load_map(spec["map"])
    if "map_text" in spec:
        return parse_map(spec["map_text"])
    return build_grid(int(spec.get("rows", 5)), int(spec.get("cols", 5)), spec.get("invalid", ()))


# --- scenario context -----------------------------------------------------------

class Scenario:
    """World, demand, historical mean tables and learner featurizer for one config."""

    def __init__(self, cfg: ExperimentConfig):
        self.hash = cfg.scenario_hash()
        self.world = build_world(cfg.world)
        self.demand = build_demand(self.world, cfg.T, cfg.demand)
        self.T = cfg.T
        base = self.sim_config(cfg, reward_mode="averaged")
        env = FleetEnv(base)
        self.history = [run_episode(env, lambda e, r: simulation_policy(e.agent_grids), s)
                        for s in cfg.history_seed_list()]
        self.tables = fit_mean_tables(self.history)
        self.norm = float(max(self.tables.vehicle_mean.max(), self.tables.order_mean.max(), 1.0))
        self.feat = Featurizer(self.world.n_grids, cfg.T, self.norm)
        self.context = np.concatenate([self.tables.vehicle_mean, self.tables.order_mean], axis=1) / self.norm
        self.baseline = {}
        for s in cfg.eval_seed_list():
            self.baseline[s] = metrics(run_episode(env, lambda e, r: simulation_policy(e.agent_grids), s)).gmv

    def sim_config(self, cfg, reward_mode=None):
        return SimConfig(self.world, self.demand, fleet=cfg.fleet, fleet_scale=cfg.fleet_scale, T=cfg.T,
                         cost_enabled=cfg.cost_enabled, cost=cfg.cost,
                         reward_mode=reward_mode or cfg.reward_mode)

    def env(self, cfg):
        return FleetEnv(self.sim_config(cfg))


_SCENARIOS = {}


def scenario_for(cfg):
    h = cfg.scenario_hash()
    if h not in _SCENARIOS:
        _SCENARIOS[h] = Scenario(cfg)
    return _SCENARIOS[h]


# --- methods -----------------------------------------------------------------------

def _pick(dc, params, **extra):
    names = {f.name for f in dataclasses.fields(dc)}
    kw = {k: v for k, v in params.items() if k in names}
    if "hidden" in kw:
        kw["hidden"] = tuple(kw["hidden"])
    kw.update(extra)
    return dc(**kw)


class Method:
    name = "?"
    learning = False

    def __init__(self, cfg: ExperimentConfig, sc: Scenario, run):
        self.cfg, self.sc, self.run = cfg, sc, int(run)
        self.world = sc.world
        self.train_log = []  # (episode, gmv, orr, repositions)

    def train(self, env, rng):
        pass

    def act(self, env, rng):
        raise NotImplementedError

    def save(self, path):
        pass

    def load(self, path):
        pass

    def _record(self, ep, log):
        m = metrics(log)
        self.train_log.append((ep, m.gmv, m.orr, m.repositions))


class SimulationMethod(Method):
    name = "Simulation"

    def act(self, env, rng):
        return simulation_policy(env.agent_grids)


class DiffusionMethod(Method):
    name = "Diffusion"

    def act(self, env, rng):
        return diffusion_policy(self.world, env.agent_grids, rng)


class RuleBasedMethod(Method):
    name = "Rule-based"
    collaborative = False

    def __init__(self, cfg, sc, run):
        super().__init__(cfg, sc, run)
        self.table = ValueTable(sc.tables.v_rule)

    def act(self, env, rng):
        return rule_based_policy(self.world, self.table, env.t, env.agent_grids, rng, self.collaborative)

    def save(self, path):
        self.table.to_csv(Path(path) / "value_table.csv")

    def load(self, path):
        self.table = ValueTable.from_csv(Path(path) / "value_table.csv", self.cfg.T, self.world.n_grids)


class ValueIterMethod(RuleBasedMethod):
    name = "Value-Iter"
    learning = True
    collaborative = True

    def train(self, env, rng):
        for ep, seed in enumerate(self.cfg.train_seed_list(self.run)):
            log = run_episode(env, self.act, seed, rng)
            value_iter_update(self.table, log, self.world, self.cfg.gamma, collaborative=True)
            self._record(ep, log)


class TabularQMethod(Method):
    name = "T-Q"
    learning = True
    sarsa = False

    def __init__(self, cfg, sc, run):
        super().__init__(cfg, sc, run)
        self.table = TabularQ(cfg.T, self.world.n_grids, self.world)
        self.dq = _pick(DqnConfig, cfg.params)

    def train(self, env, rng):
        seeds = self.cfg.train_seed_list(self.run)
        sched = linear_epsilon(self.dq)
        alpha = float(self.cfg.params.get("alpha", 0.1))
        for ep, seed in enumerate(seeds):  # one episode at a time so the curve can be logged
            train_tabular(env, self.table, [seed], lambda _: sched(ep), alpha, self.cfg.gamma, self.sarsa, rng)
            self._record(ep, env.log)

    def act(self, env, rng):
        return self.table.act(env.t, env.agent_grids, self.dq.eval_eps, rng)

    def save(self, path):
        self.table.to_csv(Path(path) / "q_table.csv")

    def load(self, path):
        self.table = TabularQ.from_csv(Path(path) / "q_table.csv", self.cfg.T, self.world)


class TabularSarsaMethod(TabularQMethod):
    name = "T-SARSA"
    sarsa = True


class DqnMethod(Method):
    name = "DQN"
    learning = True
    agent_cls = IndependentDQN

    def __init__(self, cfg, sc, run):
        super().__init__(cfg, sc, run)
        self.dq = _pick(DqnConfig, cfg.params, gamma=cfg.gamma, seed=int(run))
        cost = cfg.cost if cfg.cost_enabled else 0.0
        self.agent = self.agent_cls(self.world, sc.feat, self.dq, cost)

    def train(self, env, rng):
        train_dqn_agent(self.agent, env, self.cfg.train_seed_list(self.run), rng, on_episode=self._record)

    def act(self, env, rng):
        return self.agent.act(env, env.state, self.dq.eval_eps, rng)

    def save(self, path):
        save_mlp(self.agent.net, Path(path) / "q_net.npz")

    def load(self, path):
        self.agent.net = load_mlp(Path(path) / "q_net.npz")


class CdqnMethod(DqnMethod):
    name = "cDQN"
    agent_cls = ContextualDQN

    def train(self, env, rng):
        from .ca2c import warm_start_value

        if self.cfg.params.get("warm_start", True):
            warm_start_value(self.agent.net, self.sc.tables.v_rule, self.sc.feat, self.sc.context,
                             lr=self.dq.lr, steps=int(self.cfg.params.get("warm_steps", 2000)),
                             tol=float(self.cfg.params.get("warm_tol", 1e-2)), seed=self.dq.seed)
            self.agent.refresh_target()
        super().train(env, rng)


_A2C_CACHE = {}


class Ca2cMethod(Method):
    name = "cA2C"
    learning = True

    def __init__(self, cfg, sc, run):
        super().__init__(cfg, sc, run)
        ctx = cfg.params.get("context", "full")
        if ctx not in ("full", "no-collab", "none"):
            raise ValueError(f"unknown context setting {ctx!r}")
        self.ac = _pick(A2CConfig, cfg.params, gamma=cfg.gamma, seed=int(run),
                        collaborative=ctx == "full", geographic=ctx != "none")
        cost = cfg.cost if cfg.cost_enabled else 0.0
        self.agent = ContextualA2C(self.world, sc.feat, self.ac, cost)

    def _cache_key(self):
        p = {k: v for k, v in self.cfg.params.items() if k not in ("lam", "grouped")}
        return json.dumps([self.sc.hash, self.cfg.reward_mode, self.cfg.gamma, p, self.run,
                           self.cfg.train_seed_list(self.run)], sort_keys=True)

    def train(self, env, rng):
        key = self._cache_key()
        if key in _A2C_CACHE:
            agent, self.train_log = _A2C_CACHE[key]
            self.agent = copy.deepcopy(agent)
            return
        warm = self.sc.tables.v_rule if self.cfg.params.get("warm_start", True) else None
        self.agent, _ = train_ca2c(env, self.sc.feat, self.ac, self.cfg.train_seed_list(self.run), rng,
                                   cost=self.agent.cost, warm_table=warm, warm_context=self.sc.context,
                                   agent=self.agent, on_episode=self._record)
        _A2C_CACHE[key] = (copy.deepcopy(self.agent), list(self.train_log))

    def act(self, env, rng):
        return self.agent.act(env, env.state, rng)

    def save(self, path):
        save_mlp(self.agent.value, Path(path) / "value_net.npz")
        save_mlp(self.agent.policy, Path(path) / "policy_net.npz")

    def load(self, path):
        self.agent.value = load_mlp(Path(path) / "value_net.npz")
        self.agent.policy = load_mlp(Path(path) / "policy_net.npz")
        self.agent.refresh_target()


class LpCa2cMethod(Ca2cMethod):
    name = "LP-cA2C"

    def __init__(self, cfg, sc, run):
        super().__init__(cfg, sc, run)
        self._lp = None

    @property
    def lp(self):
        if self._lp is None:
            self._lp = LpPolicy(self.agent.values, self.world, self.sc.tables.order_mean,
                                lam=float(self.cfg.params.get("lam", 1.0)), cost=self.agent.cost,
                                grouped=bool(self.cfg.params.get("grouped", True)))
        return self._lp

    def load(self, path):
        super().load(path)
        self._lp = None

    def act(self, env, rng):
        return self.lp.act(env, env.state, rng)


METHODS = {cls.name: cls for cls in (SimulationMethod, DiffusionMethod, RuleBasedMethod, ValueIterMethod,
                                     TabularQMethod, TabularSarsaMethod, DqnMethod, CdqnMethod, Ca2cMethod,
                                     LpCa2cMethod)}


def lookup_method(name):
    for key, cls in METHODS.items():
        if key.lower() == str(name).lower():
            return cls
    raise ValueError(f"unknown method {name!r}; available: {', '.join(METHODS)}")


# --- running -----------------------------------------------------------------------

def _write_csv(path, fields, rows):
    """Write atomically: temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in fields})
    os.replace(tmp, path)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def train_method(cfg: ExperimentConfig, run, sc=None):
    sc = sc or scenario_for(cfg)
    method = lookup_method(cfg.method)(cfg, sc, run)
    if method.learning:
        rng = np.random.default_rng([int(run), 1])
        method.train(sc.env(cfg), rng)
    return method


def evaluate_method(cfg: ExperimentConfig, method: Method, sc=None, log_dir=None):
    """Per-episode rows for one trained method over the evaluation seeds."""
    sc = sc or scenario_for(cfg)
    env = sc.env(cfg)
    rows = []
    for seed in cfg.eval_seed_list():
        rng = np.random.default_rng([int(method.run), int(seed), 2])
        elog = run_episode(env, method.act, seed, rng)
        m = metrics(elog, sc.baseline[seed])
        rows.append(dict(method=cfg.label, run=method.run, seed=seed, gmv=m.gmv, orr=m.orr,
                         repositions=m.repositions, roi=m.roi, scenario_hash=sc.hash))
        if log_dir is not None:
            Path(log_dir).mkdir(parents=True, exist_ok=True)
            elog.to_jsonl(Path(log_dir) / f"run{method.run}_seed{seed}.jsonl")
    return rows


def _run_cell(cfg, run, ckpt_dir=None, log_dir=None):
    sc = scenario_for(cfg)
    if ckpt_dir is not None and (Path(ckpt_dir) / "done").exists():
        method = lookup_method(cfg.method)(cfg, sc, run)
        method.load(ckpt_dir)
    else:
        method = train_method(cfg, run, sc)
    return evaluate_method(cfg, method, sc, log_dir), method.train_log


def aggregate(rows):
    """Mean and std across runs of the per-run means."""
    if not rows:
        raise ValueError("no rows to aggregate")
    runs = sorted({int(r["run"]) for r in rows})
    out = dict(method=rows[0]["method"], runs=len(runs), episodes=len(rows), scenario_hash=rows[0]["scenario_hash"])
    for key in ("gmv", "orr", "repositions", "roi"):
        per_run = []
        for run in runs:
            vals = [float(r[key]) for r in rows if int(r["run"]) == run and r[key] not in (None, "")]
            if vals:
                per_run.append(np.mean(vals))
        out[f"{key}_mean"] = float(np.mean(per_run)) if per_run else None
        out[f"{key}_std"] = float(np.std(per_run)) if per_run else None
    return out


def n_workers():
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    rows: list
    aggregate: dict
    train_log: list


def run_experiment(cfg: ExperimentConfig, out_dir=None, workers=None) -> ExperimentResult:
    """Train (when needed) and evaluate every run; write episode and aggregate CSVs under ``out_dir``."""
    cfg.validate()
    out = Path(out_dir) if out_dir is not None else None
    workers = workers or n_workers()
    cells = []
    for run in cfg.runs:
        ckpt = out / cfg.label / f"run{run}" if out is not None else None
        logs = out / cfg.label / "logs" if (out is not None and cfg.save_logs) else None
        cells.append((cfg, run, ckpt, logs))
    if workers > 1 and len(cells) > 1:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=workers)(delayed(_run_cell)(*c) for c in cells)
    else:
        results = [_run_cell(*c) for c in cells]
    rows = [r for res, _ in results for r in res]
    train_log = [dict(method=cfg.label, run=run, episode=e, gmv=g, orr=o, repositions=n)
                 for run, (_, tl) in zip(cfg.runs, results) for e, g, o, n in tl]
    agg = aggregate(rows)
    if out is not None:
        _write_csv(out / cfg.label / "episodes.csv", EPISODE_FIELDS, rows)
        _write_csv(out / cfg.label / "aggregate.csv", AGGREGATE_FIELDS, [agg])
        if train_log:
            _write_csv(out / cfg.label / "train_log.csv", ["method", "run", "episode", "gmv", "orr", "repositions"],
                       train_log)
    return ExperimentResult(cfg, rows, agg, train_log)


def train_and_save(cfg: ExperimentConfig, out_dir):
    """Train every run and store checkpoints; ``evaluate`` reuses them."""
    sc = scenario_for(cfg)
    out = Path(out_dir)
    for run in cfg.runs:
        method = train_method(cfg, run, sc)
        d = out / cfg.label / f"run{run}"
        d.mkdir(parents=True, exist_ok=True)
        method.save(d)
        (d / "done").write_text("ok\n")
        if method.train_log:
            _write_csv(d / "train_log.csv", ["episode", "gmv", "orr", "repositions"],
                       [dict(zip(["episode", "gmv", "orr", "repositions"], r)) for r in method.train_log])
    return out / cfg.label


def compare(results) -> list:
    """One row per method: GMV normalised so that Simulation = 100, paired by (run, seed).

    ``results`` holds ExperimentResult objects or lists of episode rows; a
    Simulation entry is required and all entries must share a scenario hash.
    """
    tables = [r.rows if isinstance(r, ExperimentResult) else list(r) for r in results]
    hashes = {row["scenario_hash"] for t in tables for row in t}
    if len(hashes) != 1:
        raise ValueError(f"refusing to compare different scenarios: {sorted(hashes)}")
    sim = [t for t in tables if t and t[0]["method"] == "Simulation"]
    if not sim:
        raise ValueError("comparison needs a Simulation baseline")
    base = {int(r["seed"]): float(r["gmv"]) for r in sim[0]}
    out = []
    for t in tables:
        seeds = sorted({int(r["seed"]) for r in t})
        missing = set(seeds) - set(base)
        if missing:
            raise ValueError(f"Simulation baseline lacks seeds {sorted(missing)}")
        gmv = np.mean([float(r["gmv"]) for r in t])
        base_gmv = np.mean([base[int(r["seed"])] for r in t])
        agg = aggregate(t)
        out.append(dict(method=t[0]["method"], normalized_gmv=100.0 * gmv / base_gmv, gmv=gmv,
                        orr=agg["orr_mean"], repositions=agg["repositions_mean"], roi=agg["roi_mean"],
                        scenario_hash=t[0]["scenario_hash"]))
    return out


COMPARE_FIELDS = ["method", "normalized_gmv", "gmv", "orr", "repositions", "roi", "scenario_hash"]


def write_comparison(rows, path):
    _write_csv(path, COMPARE_FIELDS, rows)


def format_table(rows):
    lines = [f"{'method':<22}{'norm.GMV':>10}{'GMV':>12}{'ORR':>8}{'repos':>10}{'ROI':>8}"]
    for r in rows:
        roi = "" if r["roi"] is None else f"{r['roi']:.3f}"
        lines.append(f"{r['method']:<22}{r['normalized_gmv']:>10.2f}{r['gmv']:>12.1f}{r['orr']:>8.3f}"
                     f"{r['repositions']:>10.1f}{roi:>8}")
    return "\n".join(lines)
