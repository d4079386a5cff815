import numpy as np
import pytest
from scipy.stats import chisquare

from hexfleet.baselines import (TabularQ, ValueTable, diffusion_policy, rule_based_policy, rule_probabilities,
                                tabular_q_update, tabular_sarsa_update, value_iter_update)
from hexfleet.hexgrid import STAY, build_grid
from hexfleet.simcore import EpisodeLog


def test_diffusion_single_cell_stays(rng):
    w = build_grid(1, 1)
    assert np.all(diffusion_policy(w, np.zeros(20, int), rng) == STAY)


def test_diffusion_uniform_interior(rng):
    w = build_grid(3, 3)
    a = diffusion_policy(w, np.full(100_000, 4), rng)
    counts = np.bincount(a, minlength=7)
    assert chisquare(counts).pvalue > 0.01
    corner = diffusion_policy(w, np.zeros(10_000, int), rng)
    assert np.all(w.geo_masks[0][corner] == 1)


def test_rule_probabilities_normalisation():
    w = build_grid(1, 3, {2})  # grid 0 has neighbour 1 only
    v = np.array([2.0, 6.0, 0.0])
    p = rule_probabilities(w, v, 0)
    k = [k for k in range(6) if w.target(0, k) == 1][0]
    assert p[STAY] == pytest.approx(0.25) and p[k] == pytest.approx(0.75)
    assert rule_probabilities(w, np.zeros(3), 0)[[k, STAY]].tolist() == [0.5, 0.5]
    w1 = build_grid(1, 1)
    assert rule_probabilities(w1, np.array([3.0]), 0)[STAY] == 1.0


def test_rule_based_sampling_matches_pmf(rng):
    w = build_grid(3, 3)
    v = np.arange(1, 10, dtype=float)
    table = ValueTable(np.vstack([v, v]))
    a = rule_based_policy(w, table, 0, np.full(100_000, 4), rng)
    p = rule_probabilities(w, v, 4)
    counts = np.bincount(a, minlength=7)
    assert chisquare(counts, 100_000 * p).pvalue > 0.01
    assert np.all(rule_based_policy(w, table, 1, np.full(5, 4), rng) == STAY)


def test_rule_based_rejects_negative():
    with pytest.raises(ValueError):
        ValueTable(np.array([[-1.0]]))
    t = ValueTable(np.zeros((2, 1)))
    t.values[0, 0] = -1
    with pytest.raises(ValueError):
        rule_based_policy(build_grid(1, 1), t, 0, [0], np.random.default_rng(0))


def _chain_log(R, acts):
    T, N = R.shape
    log = EpisodeLog(N, T)
    for t in range(T):
        log.append(dict(t=t, arrival_reward=R[t].tolist(), actions=acts[t].tolist()))
    return log


def test_value_iter_hand_chain():
    # 2 ticks, 2 grids: at t=0 grid 0 stays and grid 1 moves to grid 0
    w = build_grid(1, 2)
    k10 = [k for k in range(6) if w.target(1, k) == 0][0]
    R = np.array([[1.0, 2.0], [3.0, 4.0]])
    acts = np.zeros((2, 2, 7))
    acts[0, 0, STAY] = 1
    acts[0, 1, k10] = 1
    acts[1, :, STAY] = 1
    gamma = 0.9
    # the same system solved as (I - gamma P) V = R over the 4 (t, grid) cells
    P = np.zeros((4, 4))
    P[0, 2] = 1  # (0,0) -> (1,0)
    P[1, 2] = 1  # (0,1) -> (1,0)
    expected = np.linalg.solve(np.eye(4) - gamma * P, R.reshape(-1)).reshape(2, 2)
    table = ValueTable.zeros(2, 2)
    for _ in range(100):
        value_iter_update(table, _chain_log(R, acts), w, gamma)
    assert np.allclose(table.values, expected, atol=1e-6)
    assert np.allclose(expected, [[3.7, 4.7], [3.0, 4.0]])


def test_value_iter_trivial_cases():
    w = build_grid(1, 2)
    acts = np.zeros((3, 2, 7))
    acts[..., STAY] = 1
    t = ValueTable.zeros(3, 2)
    value_iter_update(t, _chain_log(np.ones((3, 2)), acts), w, gamma=0.0)
    assert np.all(t.values == 1)
    z = ValueTable.zeros(3, 2)
    value_iter_update(z, _chain_log(np.zeros((3, 2)), acts), w)
    assert np.all(z.values == 0)


def test_tabular_updates():
    w = build_grid(1, 2)
    q = TabularQ(2, 2, w)
    tabular_q_update(q, (0, 0, STAY, 4.0, 1, 0, False), alpha=0.0, gamma=0.9)
    assert np.all(q.q == 0)
    tabular_q_update(q, (0, 0, STAY, 4.0, 1, 0, False), alpha=1.0, gamma=0.0)
    assert q.q[0, 0, STAY] == 4.0


@pytest.mark.parametrize("sarsa", [False, True])
def test_two_state_cycle_geometric_series(sarsa):
    w = build_grid(1, 2)
    k01 = [k for k in range(6) if w.target(0, k) == 1][0]
    k10 = [k for k in range(6) if w.target(1, k) == 0][0]
    q = TabularQ(1, 2, w)
    g, k, nk = 0, k01, k10
    for _ in range(10_000):
        g1 = w.target(g, k)
        tr = (0, g, k, 1.0, 0, g1, False)
        if sarsa:
            tabular_sarsa_update(q, tr, nk, 0.5, 0.9)
        else:
            tabular_q_update(q, tr, 0.5, 0.9)
        g, k, nk = g1, nk, k
    assert q.q[0, 0, k01] == pytest.approx(10.0, abs=1e-3)
    assert q.q[0, 1, k10] == pytest.approx(10.0, abs=1e-3)


def test_tabular_never_picks_invalid(rng):
    w = build_grid(2, 2)
    q = TabularQ(3, 4, w)
    q.q[:] = rng.normal(size=q.q.shape) * 5
    q.q[:, :, :6][w.geo_masks[None, :, :6].repeat(3, 0) == 0] = 1e6
    for eps in (0.0, 1.0):
        a = q.act(0, np.repeat(np.arange(4), 500), eps, rng)
        assert np.all(w.geo_masks[np.repeat(np.arange(4), 500), a] == 1)


def test_tables_csv_roundtrip(tmp_path, rng):
    w = build_grid(2, 2)
    t = ValueTable(rng.uniform(0, 5, (3, 4)))
    t.to_csv(tmp_path / "v.csv")
    assert np.array_equal(ValueTable.from_csv(tmp_path / "v.csv", 3, 4).values, t.values)
    q = TabularQ(3, 4, w)
    q.q[:] = rng.normal(size=q.q.shape)
    q.to_csv(tmp_path / "q.csv")
    assert np.array_equal(TabularQ.from_csv(tmp_path / "q.csv", 3, w).q, q.q)
