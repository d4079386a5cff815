"""A five-minute tour: build a small world, roll out a few policies, train cA2C briefly.

    python3 demos/quick_tour.py
"""
import numpy as np

from hexfleet.baselines import diffusion_policy, simulation_policy
from hexfleet.ca2c import A2CConfig, train_ca2c
from hexfleet.hexgrid import build_grid
from hexfleet.ordergen import build_demand
from hexfleet.simcore import Featurizer, FleetEnv, SimConfig, metrics, run_episode

world = build_grid(4, 4, invalid_ids=[5])
demand = build_demand(world, 48, dict(base_rate=1.5, dest_mode="hotspot",
                                      hotspots=[dict(grids=[0, 1], start=10, stop=30, multiplier=5.0,
                                                     dest=[14, 15])]))
env = FleetEnv(SimConfig(world, demand, fleet=80, T=48))
print(f"{world.n_grids} grids ({len(world.valid_ids)} valid), {env.config.fleet} vehicles, T={env.T}")

base = metrics(run_episode(env, lambda e, r: simulation_policy(e.agent_grids), seed=7))
print(f"Simulation  gmv={base.gmv:8.1f} orr={base.orr:.3f}")

diff = metrics(run_episode(env, lambda e, r: diffusion_policy(world, e.agent_grids, r), seed=7,
                           rng=np.random.default_rng(0)), base.gmv)
print(f"Diffusion   gmv={diff.gmv:8.1f} orr={diff.orr:.3f} repositions={diff.repositions}")

# ten short episodes only show the loop running; demos/desk_comparison.py trains properly
feat = Featurizer(world.n_grids, env.T, norm=10.0)
cfg = A2CConfig(hidden=(32, 16), batch_size=128, m1=50, m2=50, seed=0)
agent, history = train_ca2c(env, feat, cfg, seeds=range(100, 110), rng=np.random.default_rng(0))
for h in history[::3]:
    print(f"  episode {h['episode']:2d} value loss {h['value_loss']:.3f}")
ca2c = metrics(run_episode(env, lambda e, r: agent.act(e, e.state, r), seed=7, rng=np.random.default_rng(0)), base.gmv)
print(f"cA2C        gmv={ca2c.gmv:8.1f} orr={ca2c.orr:.3f} repositions={ca2c.repositions}")
