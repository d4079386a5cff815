import numpy as np
import pytest

from hexfleet.harness import ExperimentConfig
from hexfleet.hexgrid import build_grid
from hexfleet.ordergen import build_demand
from hexfleet.simcore import FleetEnv, SimConfig

SMALL_DEMAND = dict(base_rate=1.0, price_mean=10.0, price_spread=4.0, dest_mode="gravity",
                    hotspots=[dict(grids=[0, 1], start=4, stop=10, multiplier=4.0)])


@pytest.fixture
def world3():
    return build_grid(3, 3)


@pytest.fixture
def small_env():
    w = build_grid(3, 3)
    dm = build_demand(w, 20, SMALL_DEMAND)
    return FleetEnv(SimConfig(w, dm, fleet=30, T=20))


def tiny_config(**kw):
    """A fast scenario for harness / CLI tests."""
    base = dict(name="tiny", world={"rows": 3, "cols": 3}, demand=dict(SMALL_DEMAND), fleet=30, T=20,
                runs=[0], train_episodes=2, eval_episodes=2, history_episodes=2,
                params=dict(hidden=[8, 8], batch_size=32, m1=3, m2=3, warm_steps=20, warm_tol=10.0,
                            capacity=2000, eps_episodes=2, lam=0.1))
    base.update(kw)
    return ExperimentConfig.from_dict(base)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
