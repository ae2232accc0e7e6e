import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bandit_clusters.env import EnvModel, PointMassSampler, SphereSampler
from bandit_clusters.harness import (
    RunTrace,
    aggregate,
    build_env,
    check_conservation,
    kahan_cumsum,
    recovery_rate,
    run_grid,
    run_one,
    verify_coverage,
    verify_eigengrowth,
    write_aggregate_json,
    write_trace_csv,
)


def fake_trace(final, seed=0, T=3, policy="X"):
    regret = np.zeros(T)
    regret[-1] = final
    return RunTrace(
        policy, seed, np.zeros(T, int), np.zeros(T, int), np.zeros(T), regret,
        kahan_cumsum(regret), np.zeros(T, bool), [], [[0]], 0.1, recovery=1.0,
    )


def test_single_arm_zero_regret(cfg_factory):
    cfg = cfg_factory(T=1, env={"K": 1})
    tr = run_one(cfg, "UniCLUB", 0)
    assert tr.T == 1 and tr.cum_regret[-1] == 0.0


def test_same_seed_identical_bytes(cfg_factory, tmp_path):
    cfg = cfg_factory()
    for name in ("a.csv", "b.csv"):
        write_trace_csv(run_one(cfg, "SCLUB", 3), tmp_path / name)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    text = (tmp_path / "a.csv").read_bytes()
    assert text.startswith(b"t,user,arm,reward,regret,cum_regret\n") and b"\r" not in text
    assert text.count(b"\n") == cfg.T + 1


@pytest.mark.parametrize("kind", ["CLUB", "UniCLUB", "LinUCB-Ind", "SASCLUB"])
def test_trace_invariants(cfg_factory, kind):
    cfg = cfg_factory(T=400)
    env, _ = build_env(cfg.env)
    tr = run_one(cfg, kind, 1, env=env)
    assert np.array_equal(tr.cum_regret, kahan_cumsum(tr.regret))
    assert np.all(np.diff(tr.cum_regret) >= 0)
    bound = 2 * env.context.L * np.linalg.norm(env.prefs, axis=1).max()
    assert tr.regret.max() <= bound
    assert [s["round"] for s in tr.snapshots] == list(range(4, 401, 4))
    assert all(sorted(i for b in s["clusters"] for i in b) == list(range(env.u)) for s in tr.snapshots)


def test_kahan_cumsum_is_compensated():
    vals = np.array([1e16, 1.0, -1e16, 1.0])
    assert kahan_cumsum(vals)[-1] == 2.0


def test_different_seeds_differ(cfg_factory):
    cfg = cfg_factory()
    a, b = run_one(cfg, "CLUB", 0), run_one(cfg, "CLUB", 1)
    assert not np.array_equal(a.user, b.user)


def test_snapshot_extra_rounds(cfg_factory):
    tr = run_one(cfg_factory(T=50), "CLUB", 0, snapshot_rounds=(7,))
    assert tr.snapshot_at(7) and json.dumps(tr.snapshots)


def test_recovery_examples():
    env = EnvModel(np.array([[0.5, 0.0]]), [0, 0, 0, 0])
    assert recovery_rate([[0, 1, 2, 3]], env) == 1.0
    assert recovery_rate([[0], [1], [2], [3]], env) == 0.0
    env2 = EnvModel(np.array([[0.5, 0.0], [0.0, 0.5]]), [0, 1, 0, 1])
    assert recovery_rate([[3, 1], [2, 0]], env2) == 1.0


@given(st.lists(st.integers(0, 2), min_size=6, max_size=6), st.lists(st.integers(0, 3), min_size=6, max_size=6))
def test_recovery_matches_pair_scan(truth, got):
    m = len(set(truth))
    relabel = {v: k for k, v in enumerate(sorted(set(truth)))}
    assignment = [relabel[v] for v in truth]
    prefs = np.eye(3)[:m] * 0.5
    env = EnvModel(prefs, assignment)
    partition = [[i for i in range(6) if got[i] == g] for g in sorted(set(got))]
    agree = sum((assignment[i] == assignment[j]) == (got[i] == got[j]) for i, j in itertools.combinations(range(6), 2))
    assert recovery_rate(partition, env) == pytest.approx(agree / 15)


def test_aggregate_examples():
    rep = aggregate([fake_trace(5.0)])
    assert rep.final_halfwidth == 0.0 and rep.final_mean == 5.0
    rep = aggregate([fake_trace(2.0, 0), fake_trace(2.0, 1)])
    assert rep.final_halfwidth == 0.0
    rep = aggregate([fake_trace(v, s) for s, v in enumerate([3.0, 1.0, 2.0])])
    assert rep.final_mean == pytest.approx(2.0)
    assert rep.final_halfwidth == pytest.approx(1 / math.sqrt(3))
    assert len(rep.mean_curve) == 3 and 0 <= rep.recovery_rate <= 1
    with pytest.raises(ValueError):
        aggregate([fake_trace(1.0, T=3), fake_trace(1.0, 1, T=4)])
    with pytest.raises(ValueError):
        aggregate([])


def test_aggregate_json_fields(tmp_path, cfg_factory):
    cfg = cfg_factory(seeds=[1, 0])
    grid = run_grid(cfg, ["CLUB"], threads=1)
    rep = aggregate(grid["CLUB"])
    path = tmp_path / "CLUB.json"
    write_aggregate_json(rep, path, cfg.exploration_scale, cfg.to_dict(), grid["CLUB"])
    data = json.loads(path.read_text())
    for key in ("policy", "T", "seeds", "mean_curve", "halfwidth_curve", "recovery_rate", "exploration_scale"):
        assert key in data
    assert data["seeds"] == [0, 1] and len(data["mean_curve"]) == cfg.T
    assert data["config"]["params"]["threshold_scale"] == cfg.params.threshold_scale
    assert set(data["snapshots"]) == {"0", "1"}


def test_parallel_matches_serial(cfg_factory, monkeypatch):
    cfg = cfg_factory(seeds=[0, 1, 2])
    serial = run_grid(cfg, ["CLUB", "SCLUB"], threads=1)
    monkeypatch.setenv("BANDIT_CLUSTERS_THREADS", "2")
    par = run_grid(cfg, ["CLUB", "SCLUB"], threads=2)
    for k in serial:
        for a, b in zip(serial[k], par[k]):
            assert a.seed == b.seed and np.array_equal(a.cum_regret, b.cum_regret)


def test_eigengrowth_guards():
    with pytest.raises(ValueError):
        verify_eigengrowth(2, PointMassSampler((1.0, 0.0)), 10, 100, 0.1)
    rep = verify_eigengrowth(5, SphereSampler(5), 20, 10, 0.1)
    assert rep.status() == "precondition unmet" and rep.passed is None


def test_eigengrowth_loose_delta_passes():
    s = SphereSampler(3)
    n = math.ceil(8 * 3 * math.log(3 / 0.5))
    rep = verify_eigengrowth(3, s, 50, n, 0.5)
    assert rep.passed


def _coverage_cfg(cfg_factory, **env):
    return cfg_factory(
        T=1500, seeds=[0, 1], exploration_scale=1e-4,
        env={"selected_users": 4, "m": 2, "d": 3, "K": 8, **env},
        params={"delta": 0.05, "threshold_scale": 0.1},
    )


def test_coverage_noiseless_and_inflated(cfg_factory):
    cfg = _coverage_cfg(cfg_factory, noise_sd=0.0)
    rep = verify_coverage(cfg)
    assert rep.checked > 0 and rep.violations == 0
    noisy = _coverage_cfg(cfg_factory)
    env, _ = build_env(noisy.env)
    from bandit_clusters.harness import build_params

    big = 10 * build_params(noisy, env).beta_at()
    assert verify_coverage(noisy, beta=big).violations == 0
    assert not verify_coverage(noisy, beta=0.0).passed


def test_conservation_fuzz_clean(cfg_factory):
    cfg = cfg_factory(T=300, exploration_scale=1e-4)
    for kind in ("CLUB", "SCLUB", "UniSCLUB", "PhaseUniCLUB", "SASCLUB"):
        assert check_conservation(cfg, kind, 0) == []
