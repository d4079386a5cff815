"""Train and evaluate every method on the desk scenario and print the comparison table.

    HEXFLEET_WORKERS=3 python3 demos/desk_comparison.py [results/desk]

Takes roughly ten minutes on one core.
"""
import sys
import time
from pathlib import Path

from hexfleet import harness
from hexfleet.ablations import preset

cfg = harness.load_config(Path(__file__).resolve().parent.parent / "configs" / "desk.toml")
out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(cfg.out_dir)
methods = ["Simulation", "Diffusion", "Rule-based", "Value-Iter", "T-Q", "T-SARSA", "DQN", "cDQN", "cA2C", "LP-cA2C"]

results = []
for m in methods:
    t0 = time.perf_counter()
    results.append(harness.run_experiment(cfg.replace(method=m), out))
    print(f"{m:<12} {time.perf_counter() - t0:6.1f}s", flush=True)
rows = harness.compare(results)
harness.write_comparison(rows, out / "comparison.csv")
print(harness.format_table(rows))

for name in ("table5-reward", "table6-context", "table8-group-reg"):
    variants = [harness.run_experiment(c, out) for c in preset(name, cfg)]
    print(f"\n{name}")
    print(harness.format_table(harness.compare([results[0], *variants])))
