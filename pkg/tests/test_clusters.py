import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bandit_clusters.clusters import (
    ClusterSets,
    ConfidenceParams,
    UserGraph,
    UserStat,
    UserStats,
    connected_component,
    delete_check,
    f_threshold,
    graph_partition,
    merge_clusters,
    merge_to_fixpoint,
    neighbors_plus_self,
    split_user,
    t0_budget,
    update_user,
)
from bandit_clusters.linalg import reg_solve


def params(**kw):
    base = dict(u=10, d=3, lam=1.0, delta=0.1, L=1.0, lambda_x=0.1)
    base.update(kw)
    return ConfidenceParams(**base)


def test_params_validation():
    with pytest.raises(ValueError):
        params(delta=1.0)
    with pytest.raises(ValueError):
        params(lambda_x=0.0)
    with pytest.raises(ValueError):
        params(gamma=-1.0)


def test_f_threshold_at_zero():
    # (sqrt(2 ln 100) + 1) / 1
    assert f_threshold(0, params()) == pytest.approx(math.sqrt(2 * math.log(100)) + 1, rel=1e-12)
    assert f_threshold(0, params()) == pytest.approx(4.034854, abs=1e-6)


def test_f_threshold_vanishes_and_monotone_in_lambda_x():
    p = params()
    assert f_threshold(10**9, p) < 0.01
    assert f_threshold(10**6, params(lambda_x=0.2)) < f_threshold(10**6, p)


def test_f_threshold_array_matches_scalar():
    p = params(d=7, L=2.0)
    ts = np.array([0, 1, 5, 40, 3000, 10**5])
    np.testing.assert_allclose(f_threshold(ts, p), [f_threshold(int(t), p) for t in ts], rtol=1e-12)
    np.testing.assert_allclose(f_threshold(ts.astype(float), p), f_threshold(ts, p), rtol=1e-12)


def test_t0_budget_formula():
    p = params(u=20, d=10, gamma=0.5)
    u, d, delta, lx = 20, 10, 0.1, 0.1
    expr = 16 * u * math.log(u / delta) + 4 * u * max(
        8 / lx * math.log(u * d / delta), 512 * d / (0.25 * lx) * math.log(u / delta)
    )
    assert t0_budget(p, u, d) == math.ceil(expr)
    assert t0_budget(p, u, d, exploration_scale=0.5) == math.ceil(0.5 * expr)


def test_t0_budget_monotone_and_errors():
    p = params(u=20, d=10, gamma=0.5)
    base = 16 * 20 * math.log(200)
    gap_branch = t0_budget(p, 20, 10) - base
    doubled = t0_budget(p.replace(gamma=1.0), 20, 10) - base
    assert doubled == pytest.approx(gap_branch / 4, abs=2)
    halved = t0_budget(p.replace(lambda_x=0.2), 20, 10) - base
    assert halved == pytest.approx(gap_branch / 2, abs=2)
    with pytest.raises(ValueError):
        t0_budget(params(), 10, 3)


def test_beta_formula_and_override():
    p = params(T_horizon=1000)
    want = math.sqrt(3 * math.log(1 + 1000 / 3) + 2 * math.log(10)) + 1
    assert p.beta_at() == pytest.approx(want)
    assert params(beta=0.5).beta_at(7) == 0.5
    q = params(T_horizon=10**6, doubling_horizon=True)
    assert q.beta_at(5) == pytest.approx(
        math.sqrt(3 * math.log(1 + 8 / 3) + 2 * math.log(10)) + 1
    )


def test_update_user_examples():
    p = params()
    us = update_user(UserStat.fresh(3), np.array([1.0, 0, 0]), 1.0, p)
    np.testing.assert_allclose(us.theta_hat, [0.5, 0, 0])
    us2 = update_user(us, np.zeros(3), 0.0, p)
    assert us2.T == 2 and np.array_equal(us2.S, us.S) and np.array_equal(us2.b, us.b)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_incremental_equals_batch(seed):
    rng = np.random.default_rng(seed)
    p = params(d=4)
    xs = rng.standard_normal((100, 4))
    rs = rng.standard_normal(100)
    us = UserStat.fresh(4)
    arr = UserStats(1, 4, 1.0)
    for x, r in zip(xs, rs):
        us = update_user(us, x, r, p)
        arr.update(0, x, r)
    batch = reg_solve(xs.T @ xs, xs.T @ rs, 1.0)
    np.testing.assert_allclose(us.theta_hat, batch, atol=1e-8)
    np.testing.assert_allclose(arr.theta[0], batch, atol=1e-8)
    assert us.T == arr.T[0] == 100


def test_delete_check_examples():
    p = params()
    a = UserStat.fresh(3)
    assert not delete_check(a, a, p)
    far = UserStat(np.eye(3) * 1e9, np.zeros(3), 10**9, np.array([10.0, 0, 0]))
    near = UserStat(np.eye(3) * 1e9, np.zeros(3), 10**9, np.zeros(3))
    assert delete_check(far, near, p)
    edge = 2 * f_threshold(10**9, p)
    on = UserStat(near.S, near.b, near.T, np.array([edge, 0.0, 0.0]))
    assert not delete_check(on, near, p)


def test_user_stats_far_apart_matches_delete_check(rng):
    p = params(u=5)
    stats = UserStats(5, 3, 1.0)
    for _ in range(200):
        stats.update(int(rng.integers(5)), rng.standard_normal(3), float(rng.standard_normal()))
    mask = stats.far_apart(0, np.arange(1, 5), p)
    want = [delete_check(stats.get(0), stats.get(j), p) for j in range(1, 5)]
    assert mask.tolist() == want


def test_graph_components():
    g = UserGraph(4)
    assert connected_component(g, 2).tolist() == [0, 1, 2, 3]
    assert neighbors_plus_self(g, 1).tolist() == [0, 1, 2, 3]
    for j in range(4):
        g.delete_edges(j, [k for k in range(4) if k != j])
    assert connected_component(g, 2).tolist() == [2]
    assert neighbors_plus_self(g, 2).tolist() == [2]
    assert g.edge_count() == 0


def test_path_and_star():
    g = UserGraph(3)
    g.delete_edges(0, [2])  # path 0-1-2
    g.delete_edges(1, [2])
    assert connected_component(g, 0).tolist() == [0, 1]
    star = UserGraph(4)
    for leaf in (1, 2, 3):
        star.delete_edges(leaf, [k for k in (1, 2, 3) if k != leaf])
    assert neighbors_plus_self(star, 2).tolist() == [0, 2]
    assert connected_component(star, 2).tolist() == [0, 1, 2, 3]


def test_graph_memo_invalidated():
    g = UserGraph(3)
    assert len(connected_component(g, 0)) == 3
    g.delete_edges(2, [0, 1])
    assert connected_component(g, 0).tolist() == [0, 1]
    assert graph_partition(g) == [[0, 1], [2]]
    assert np.array_equal(g.adj, g.adj.T)


def _filled(u, d, rng, n=60):
    stats = UserStats(u, d, 1.0)
    cs = ClusterSets(u, d, 1.0)
    for _ in range(n):
        i = int(rng.integers(u))
        x, r = rng.standard_normal(d), float(rng.standard_normal())
        stats.update(i, x, r)
        cs.add_sample(cs.cluster_of(i), x, r)
    return stats, cs


def _conserved(stats, cs):
    M = sum(c.M for c in cs.clusters.values())
    T = sum(c.T for c in cs.clusters.values())
    assert np.allclose(M, stats.S.sum(axis=0), rtol=1e-10, atol=1e-10)
    assert T == stats.T.sum()
    members = sorted(i for c in cs.clusters.values() for i in c.members)
    assert members == list(range(cs.u))


def test_split_two_user_cluster(rng):
    stats, cs = _filled(2, 3, rng)
    new = split_user(cs, 0, 0, stats)
    np.testing.assert_allclose(cs.clusters[0].M, stats.S[1], atol=1e-12)
    np.testing.assert_allclose(cs.clusters[0].b, stats.b[1], atol=1e-12)
    assert cs.clusters[new].members == {0} and new == 1
    _conserved(stats, cs)


def test_split_singleton_removes_cluster(rng):
    stats, cs = _filled(2, 3, rng)
    a = split_user(cs, 0, 0, stats)
    b = split_user(cs, 1, 0, stats)
    assert sorted(cs.clusters) == [a, b]
    np.testing.assert_array_equal(cs.clusters[b].M, stats.S[1])
    with pytest.raises(KeyError):
        split_user(cs, 0, b, stats)


def test_merge_rules(rng):
    p = params(u=2)
    stats = UserStats(2, 3, 1.0)
    cs = ClusterSets(2, 3, 1.0)
    x = np.array([1.0, 0.0, 0.0])
    for i in (0, 1):
        stats.update(i, x, 0.5)
        cs.add_sample(0, x, 0.5)
    a = split_user(cs, 0, 0, stats)
    b = split_user(cs, 1, 0, stats)
    with pytest.raises(ValueError):
        merge_clusters(cs, a, b, p)  # unchecked
    cs.mark_checked(0)
    cs.mark_checked(1)
    merge_clusters(cs, a, b, p)
    c = cs.clusters[a]
    np.testing.assert_array_equal(c.M, 2 * stats.S[0])
    np.testing.assert_allclose(c.theta, reg_solve(c.M, c.b, 1.0))
    assert cs.partition() == [[0, 1]]


def test_merge_too_far_raises():
    p = params(u=2)
    stats = UserStats(2, 1, 1.0)
    cs = ClusterSets(2, 1, 1.0)
    stats.S[:] = 1e9
    stats.T[:] = 10**9
    stats.b[0], stats.b[1] = 1e9, -1e9
    stats.theta[:] = [[1.0], [-1.0]]
    c = cs.clusters[0]
    c.M, c.b, c.T = stats.S.sum(axis=0), stats.b.sum(axis=0), int(stats.T.sum())
    a, b = split_user(cs, 0, 0, stats), split_user(cs, 1, 0, stats)
    cs.checked[:] = True
    assert merge_to_fixpoint(cs, p) == 0
    with pytest.raises(ValueError):
        merge_clusters(cs, a, b, p)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_random_split_merge_keeps_partition(seed):
    rng = np.random.default_rng(seed)
    p = params(u=6, threshold_scale=0.5)
    stats, cs = _filled(6, 2, rng, n=40)
    for _ in range(15):
        i = int(rng.integers(6))
        split_user(cs, i, cs.cluster_of(i), stats)
        cs.mark_checked(i)
        merge_to_fixpoint(cs, p)
        _conserved(stats, cs)
        for j, c in cs.clusters.items():
            assert all(cs.owner[i] == j for i in c.members)
