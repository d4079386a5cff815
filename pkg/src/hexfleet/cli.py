"""Command line entry point: ``hexfleet {simulate,train,evaluate,compare,oracle-check}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness
from .ablations import PRESETS, preset


def _load(args):
    cfg = harness.load_config(args.config) if args.config else harness.ExperimentConfig()
    changes = {}
    if getattr(args, "method", None):
        changes["method"] = args.method
    if getattr(args, "seed", None) is not None:
        changes["runs"] = [args.seed]
    return cfg.replace(**changes) if changes else cfg


def _out(args, cfg):
    return Path(args.out or cfg.out_dir)


def cmd_simulate(args):
    cfg = _load(args)
    cls = harness.lookup_method(cfg.method)
    if cls.learning:
        raise SystemExit(f"{cls.name} needs training; use 'train' and 'evaluate'")
    sc = harness.scenario_for(cfg)
    seed = args.episode_seed if args.episode_seed is not None else cfg.eval_seed_list()[0]
    method = cls(cfg, sc, cfg.runs[0])
    env = sc.env(cfg)
    log = harness.run_episode(env, method.act, seed, np.random.default_rng([cfg.runs[0], seed, 2]))
    m = harness.metrics(log, sc.baseline.get(seed))
    out = _out(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{cls.name}_seed{seed}.jsonl"
    log.to_jsonl(path)
    print(f"method={cls.name} seed={seed} gmv={m.gmv:.2f} orr={m.orr:.4f} repositions={m.repositions} log={path}")


def cmd_train(args):
    cfg = _load(args)
    d = harness.train_and_save(cfg, _out(args, cfg))
    print(f"checkpoints written to {d}")


def cmd_evaluate(args):
    cfg = _load(args)
    res = harness.run_experiment(cfg, _out(args, cfg))
    a = res.aggregate
    print(f"{a['method']}: gmv {a['gmv_mean']:.1f} +- {a['gmv_std']:.1f}, orr {a['orr_mean']:.4f}, "
          f"repositions {a['repositions_mean']:.1f}")


def cmd_compare(args):
    configs = [harness.load_config(p) for p in args.config] if args.config else [harness.ExperimentConfig()]
    if args.seed is not None:
        configs = [c.replace(runs=[args.seed]) for c in configs]
    runs = []
    for cfg in configs:
        if args.preset:
            runs.extend(preset(args.preset, cfg))
        elif args.methods:
            runs.extend(cfg.replace(method=m.strip()) for m in args.methods.split(",") if m.strip())
        else:
            runs.append(cfg)
    base = runs[0].replace(method="Simulation", params={})
    if all(r.label != "Simulation" for r in runs):
        runs.insert(0, base)
    out = _out(args, configs[0])
    results = [harness.run_experiment(c, out) for c in runs]
    rows = harness.compare(results)
    harness.write_comparison(rows, out / "comparison.csv")
    print(harness.format_table(rows))


def cmd_oracle_check(args):
    from .lp_realloc import oracle_batch

    cost = None if args.cost == "random" else float(args.cost)
    gaps, bad_flow = oracle_batch(np.random.default_rng(args.seed), args.instances, args.max_grids,
                                  args.max_agents, tuple(args.lam), cost)
    worst = float(gaps.max(initial=0.0))
    ok = worst <= args.tolerance and bad_flow == 0
    print(f"instances={args.instances} worst_gap={worst:.6f} flow_violations={bad_flow} {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def build_parser():
    p = argparse.ArgumentParser(prog="hexfleet", description="Hex-grid fleet reallocation experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, multi=False):
        if multi:
            sp.add_argument("--config", action="append", help="TOML experiment config (repeatable)")
        else:
            sp.add_argument("--config", help="TOML experiment config")
        sp.add_argument("--seed", type=int, help="run only this master seed")
        sp.add_argument("--out", help="output directory (default: config out_dir)")

    sp = sub.add_parser("simulate", help="roll out one episode of a non-learning method")
    common(sp)
    sp.add_argument("--method")
    sp.add_argument("--episode-seed", type=int)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("train", help="train a method and save checkpoints")
    common(sp)
    sp.add_argument("--method")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="evaluate a method (reusing checkpoints when present)")
    common(sp)
    sp.add_argument("--method")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("compare", help="normalised comparison table (Simulation = 100)")
    common(sp, multi=True)
    sp.add_argument("--methods", help="comma separated method names")
    sp.add_argument("--preset", choices=sorted(PRESETS))
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("oracle-check", help="solve+round against brute force on random tiny instances")
    sp.add_argument("--instances", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--max-grids", type=int, default=6)
    sp.add_argument("--max-agents", type=int, default=6)
    sp.add_argument("--tolerance", type=float, default=0.02)
    sp.add_argument("--lam", type=float, nargs=2, default=[0.1, 0.1], metavar=("LO", "HI"),
                    help="regularisation weight drawn uniformly from [LO, HI]")
    sp.add_argument("--cost", default="0.6", help="reposition cost, or 'random' for U[0, 2)")
    sp.set_defaults(func=cmd_oracle_check)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args) or 0
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
