"""Experiment engine: run grids of (policy, seed), aggregate, run the verification checks."""

import csv
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .agents import make_policy
from .clusters import ConfidenceParams
from .env import (
    POLICY,
    CubeSampler,
    EnvStream,
    FixedGridAdversary,
    PoolSampler,
    SmoothedContextGen,
    SphereSampler,
    SpitefulAdversary,
    StochasticContextGen,
    instant_regret,
    load_features,
    make_rng,
    make_synthetic,
    next_round,
    reward,
)
from .linalg import min_eigenvalue

THREADS_ENV = "BANDIT_CLUSTERS_THREADS"
TRACE_HEADER = ("t", "user", "arm", "reward", "regret", "cum_regret")


class RunError(RuntimeError):
    """A module raised inside the round loop; ``round`` says where."""

    def __init__(self, t, policy, cause):
        super().__init__(f"round {t} ({policy}): {type(cause).__name__}: {cause}")
        self.round = t


# --- construction -------------------------------------------------------------


def build_env(spec):
    """EnvModel with its context generator, plus the arm pool (or None)."""
    if spec.source == "file":
        env, pool = load_features(spec.path, noise_sd=spec.noise_sd)
    else:
        rng = np.random.default_rng(spec.env_seed)
        env, pool = make_synthetic(
            spec.u, spec.d, spec.total_arms, spec.m, spec.selected_users, rng, spec.noise_sd
        )
    d = env.d
    if spec.generator == "smoothed":
        adv = FixedGridAdversary(pool) if spec.adversary == "fixed_grid" else SpitefulAdversary(d)
        R = spec.R if spec.R is not None else 3.0 * spec.sigma
        context = SmoothedContextGen(spec.K, adv, spec.sigma, R, d, spec.c1)
    else:
        sampler = {
            "pool": lambda: PoolSampler(pool),
            "sphere": lambda: SphereSampler(d),
            "cube": lambda: CubeSampler(d),
        }[spec.sampler]()
        if spec.sampler == "pool" and spec.K > len(pool):
            raise ValueError(f"K={spec.K} exceeds the pool of {len(pool)} arms")
        context = StochasticContextGen(spec.K, sampler)
    env = env.with_context(context)
    if spec.clamp:
        from dataclasses import replace

        env = replace(env, clamp=True)
    return env, pool


def build_params(cfg, env):
    ps = cfg.params
    ctx = env.context
    gamma = ps.gamma if ps.gamma is not None else (env.gap if math.isfinite(env.gap) else None)
    return ConfidenceParams(
        u=env.u,
        d=env.d,
        lam=ps.lam,
        delta=ps.delta,
        L=ps.L if ps.L is not None else ctx.L,
        lambda_x=ps.lambda_x if ps.lambda_x is not None else ctx.lambda_x,
        gamma=gamma,
        beta=ps.beta,
        T_horizon=cfg.T,
        doubling_horizon=ps.doubling_horizon,
        threshold_scale=ps.threshold_scale,
    )


def build_policy(cfg, env, kind, seed, params=None):
    params = params or build_params(cfg, env)
    e = cfg.env
    smoothing = None
    if e.K >= 2:
        R = e.R if e.R is not None else 3.0 * e.sigma
        smoothing = (e.sigma, R, e.K, e.c1)
    return make_policy(
        kind,
        env.u,
        env.d,
        params,
        make_rng(seed, POLICY),
        exploration_scale=cfg.exploration_scale,
        alpha=cfg.params.alpha,
        smoothing=smoothing,
    )


# --- single run ---------------------------------------------------------------


def kahan_cumsum(values):
    """Prefix sums in ascending order with Neumaier compensation."""
    out = np.empty(len(values))
    s = 0.0
    c = 0.0
    for k, v in enumerate(values.tolist()):
        t = s + v
        if abs(s) >= abs(v):
            c += (s - t) + v
        else:
            c += (v - t) + s
        s = t
        out[k] = s + c
    return out


@dataclass
class RunTrace:
    policy: str
    seed: int
    user: np.ndarray
    arm: np.ndarray
    reward: np.ndarray
    regret: np.ndarray
    cum_regret: np.ndarray
    uniform: np.ndarray
    snapshots: list
    final_partition: list
    wall_clock: float
    recovery: float = float("nan")
    info: dict = field(default_factory=dict)

    @property
    def T(self):
        return len(self.regret)

    def snapshot_at(self, t):
        for snap in self.snapshots:
            if snap["round"] == t:
                return snap["clusters"]
        raise KeyError(f"no snapshot at round {t}")


def run_one(cfg, kind, seed, env=None, on_round=None, snapshot_rounds=(), params=None):
    """Run policy ``kind`` for cfg.T rounds on one seed.

    ``on_round(t, policy, rnd, chosen)`` is called after each select, before
    the reward is revealed. ``snapshot_rounds`` adds rounds to the regular
    snapshot cadence.
    """
    if env is None:
        env, _ = build_env(cfg.env)
    policy = build_policy(cfg, env, kind, seed, params)
    stream = EnvStream(env, seed)
    T = cfg.T
    users = np.empty(T, dtype=np.int64)
    arms = np.empty(T, dtype=np.int64)
    rewards = np.empty(T)
    regrets = np.empty(T)
    uniform = np.zeros(T, dtype=bool)
    every = cfg.resolved_snapshot_every
    extra = set(snapshot_rounds)
    snapshots = []
    started = time.perf_counter()
    for t in range(1, T + 1):
        try:
            rnd = next_round(env, stream)
            a = policy.select(rnd)
            if on_round is not None:
                on_round(t, policy, rnd, a)
            r = reward(env, rnd.user, rnd.arms[a], stream.noise_rng)
            policy.observe(rnd, a, r)
            regrets[t - 1] = instant_regret(env, rnd, a)
        except Exception as exc:
            raise RunError(t, kind, exc) from exc
        users[t - 1] = rnd.user
        arms[t - 1] = a
        rewards[t - 1] = r
        uniform[t - 1] = policy.last_uniform
        if t % every == 0 or t == T or t in extra:
            snapshots.append({"round": t, "clusters": policy.partition()})
    wall = time.perf_counter() - started
    final = policy.partition()
    trace = RunTrace(
        policy=kind,
        seed=seed,
        user=users,
        arm=arms,
        reward=rewards,
        regret=regrets,
        cum_regret=kahan_cumsum(regrets),
        uniform=uniform,
        snapshots=snapshots,
        final_partition=final,
        wall_clock=wall,
        info=policy.info(),
    )
    trace.recovery = recovery_rate(final, env)
    return trace


def _labels(partition, n):
    lab = np.full(n, -1, dtype=np.int64)
    for k, block in enumerate(partition):
        for i in block:
            if 0 <= i < n:
                lab[i] = k
    if (lab < 0).any():
        raise ValueError("partition does not cover every user")
    return lab


def recovery_rate(partition, env):
    """Rand index between a recovered partition and the true clusters.

    Accepts a RunTrace or a list of user-id lists; users outside the env's
    range are ignored.
    """
    if isinstance(partition, RunTrace):
        partition = partition.final_partition
    n = env.u
    if n < 2:
        return 1.0
    got = _labels(partition, n)
    want = np.asarray(env.assignment)
    same_got = got[:, None] == got[None, :]
    same_want = want[:, None] == want[None, :]
    iu = np.triu_indices(n, k=1)
    return float(np.mean(same_got[iu] == same_want[iu]))


# --- grids and aggregation ----------------------------------------------------


def thread_cap():
    cap = os.cpu_count() or 1
    raw = os.environ.get(THREADS_ENV)
    if raw:
        try:
            cap = max(1, min(cap, int(raw)))
        except ValueError:
            raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    return cap


def _run_task(args):
    cfg, kind, seed = args
    return run_one(cfg, kind, seed)


def run_grid(cfg, policies=None, seeds=None, threads=None):
    """Run every (policy, seed); returns {policy: [traces ordered by seed]}."""
    policies = list(policies or cfg.policies)
    seeds = sorted(seeds if seeds is not None else cfg.seeds)
    tasks = [(cfg, kind, s) for kind in policies for s in seeds]
    threads = thread_cap() if threads is None else max(1, threads)
    if threads > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(threads, len(tasks))) as pool:
            results = list(pool.map(_run_task, tasks))
    else:
        env, _ = build_env(cfg.env)
        results = [run_one(cfg, kind, s, env=env) for _, kind, s in tasks]
    out = {kind: [] for kind in policies}
    for (_, kind, _), trace in zip(tasks, results):
        out[kind].append(trace)
    return out


@dataclass
class AggregateReport:
    policy: str
    T: int
    seeds: list
    mean_curve: np.ndarray
    halfwidth_curve: np.ndarray
    recovery_rate: float
    mean_wall_clock: float
    max_wall_clock: float

    @property
    def final_mean(self):
        return float(self.mean_curve[-1])

    @property
    def final_halfwidth(self):
        return float(self.halfwidth_curve[-1])

    def to_dict(self, exploration_scale, config=None, snapshots=None):
        out = {
            "policy": self.policy,
            "T": self.T,
            "seeds": list(self.seeds),
            "mean_curve": self.mean_curve.tolist(),
            "halfwidth_curve": self.halfwidth_curve.tolist(),
            "recovery_rate": self.recovery_rate,
            "exploration_scale": exploration_scale,
            "runtime": {"mean_s": self.mean_wall_clock, "max_s": self.max_wall_clock},
        }
        if config is not None:
            out["config"] = config
        if snapshots is not None:
            out["snapshots"] = snapshots
        return out


def aggregate(traces):
    """Mean curve and sd/sqrt(n) half-width across seeds (sd of one sample = 0)."""
    if not traces:
        raise ValueError("no traces to aggregate")
    traces = sorted(traces, key=lambda tr: tr.seed)
    lengths = {tr.T for tr in traces}
    if len(lengths) != 1:
        raise ValueError(f"traces have different lengths: {sorted(lengths)}")
    names = {tr.policy for tr in traces}
    if len(names) != 1:
        raise ValueError(f"traces mix policies: {sorted(names)}")
    curves = np.stack([tr.cum_regret for tr in traces])
    n = len(traces)
    mean = curves.mean(axis=0)
    if n > 1:
        half = curves.std(axis=0, ddof=1) / math.sqrt(n)
    else:
        half = np.zeros_like(mean)
    walls = [tr.wall_clock for tr in traces]
    return AggregateReport(
        policy=traces[0].policy,
        T=traces[0].T,
        seeds=[tr.seed for tr in traces],
        mean_curve=mean,
        halfwidth_curve=half,
        recovery_rate=float(np.mean([tr.recovery for tr in traces])),
        mean_wall_clock=float(np.mean(walls)),
        max_wall_clock=float(np.max(walls)),
    )


# --- artifact output --------------------------------------------------------------


def write_trace_csv(trace, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for k in range(trace.T):
            w.writerow(
                (
                    k + 1,
                    int(trace.user[k]),
                    int(trace.arm[k]),
                    repr(float(trace.reward[k])),
                    repr(float(trace.regret[k])),
                    repr(float(trace.cum_regret[k])),
                )
            )


def write_aggregate_json(report, path, exploration_scale, config=None, traces=()):
    snaps = {str(tr.seed): tr.snapshots for tr in traces} or None
    payload = report.to_dict(exploration_scale, config, snaps)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")


def summary_line(report):
    return (
        f"policy={report.policy} final_regret={report.final_mean:.6g}"
        f"±{report.final_halfwidth:.6g} recovery={report.recovery_rate:.4f}"
    )


# --- verification checks ---------------------------------------------------------


@dataclass
class EigenReport:
    n_rounds: int
    required_rounds: float
    trials: int
    violations: int
    delta: float
    precondition_met: bool

    @property
    def rate(self):
        return self.violations / self.trials

    @property
    def passed(self):
        """None when the round budget is below the required threshold."""
        if not self.precondition_met:
            return None
        return self.rate <= self.delta

    def status(self):
        if not self.precondition_met:
            return "precondition unmet"
        return "PASS" if self.passed else "FAIL"


def eigengrowth_rounds(L, lambda_x, u, d, delta):
    return 8 * L**2 / lambda_x * math.log(u * d / delta)


def verify_eigengrowth(d, sampler, trials, n_rounds, delta, u=1, seed=0):
    """Check lambda_min(S) >= lambda_x * n / 2 after n i.i.d. uniform rounds."""
    lam_x = sampler.lambda_x
    if not lam_x > 0:
        raise ValueError("sampler has lambda_x <= 0; the eigenvalue bound is vacuous")
    if trials < 1 or n_rounds < 1:
        raise ValueError("trials and n_rounds must be >= 1")
    need = eigengrowth_rounds(sampler.L, lam_x, u, d, delta)
    rng = make_rng(seed, POLICY)
    violations = 0
    for _ in range(trials):
        x = np.asarray(sampler.draw(rng, n_rounds), dtype=float)
        s = x.T @ x
        s = (s + s.T) / 2.0
        if min_eigenvalue(s) < lam_x * n_rounds / 2.0:
            violations += 1
    return EigenReport(n_rounds, need, trials, violations, delta, n_rounds >= need)


@dataclass
class CoverageReport:
    checked: int
    violations: int
    delta: float
    rounds_skipped: int

    @property
    def rate(self):
        return self.violations / self.checked if self.checked else 0.0

    @property
    def bound(self):
        if not self.checked:
            return self.delta
        return self.delta + 3.0 * math.sqrt(self.delta * (1 - self.delta) / self.checked)

    @property
    def ci(self):
        """Normal-approximation 95% interval for the violation rate."""
        if not self.checked:
            return (0.0, 1.0)
        p = self.rate
        h = 1.96 * math.sqrt(max(p * (1 - p), 1e-300) / self.checked)
        return (max(0.0, p - h), min(1.0, p + h))

    @property
    def passed(self):
        return self.checked > 0 and self.rate <= self.bound


def verify_coverage(cfg, kind="UniCLUB", seeds=None, beta=None):
    """Pool confidence-bound violations over UCB rounds whose cluster is correct.

    A round counts once the policy stopped exploring and the users it pooled
    are exactly the arriving user's true cluster. ``beta`` replaces the
    confidence multiplier (0 disables the width, for sanity probes).
    """
    env, _ = build_env(cfg.env)
    params = build_params(cfg, env)
    if beta is not None:
        params = params.replace(beta=beta)
    truth = [tuple(b) for b in env.true_partition()]
    cluster_of = {i: k for k, b in enumerate(truth) for i in b}
    tally = {"checked": 0, "viol": 0, "skipped": 0}

    def hook(t, policy, rnd, a):
        sel = policy.last
        if policy.last_uniform or sel is None:
            tally["skipped"] += 1
            return
        if tuple(sorted(int(i) for i in sel.members)) != truth[cluster_of[rnd.user]]:
            tally["skipped"] += 1
            return
        x = rnd.arms[a]
        err = abs(float(x @ (sel.theta - env.theta(rnd.user))))
        tally["checked"] += 1
        if err > sel.widths[a]:
            tally["viol"] += 1

    for s in seeds if seeds is not None else cfg.seeds:
        run_one(cfg, kind, s, env=env, on_round=hook, params=params)
    return CoverageReport(tally["checked"], tally["viol"], params.delta, tally["skipped"])


def check_conservation(cfg, kind, seed, env=None):
    """Per-round structural invariants; returns a list of violation strings.

    Cluster aggregates must equal summed member statistics, graph partitions
    may only refine, and set rosters must partition the users.
    """
    problems = []
    state = {"prev": None}

    def blocks(part):
        return [frozenset(b) for b in part]

    def hook(t, policy, rnd, a):
        # checked against the state left by round t-1
        part = policy.partition()
        flat = sorted(i for b in part for i in b)
        if flat != list(range(policy.u)):
            problems.append(f"round {t}: partition is not a partition of [u]")
        prev = state["prev"]
        if prev is not None and hasattr(policy, "graph"):
            for b in blocks(part):
                if not any(b <= pb for pb in prev):
                    problems.append(f"round {t}: graph partition coarsened")
                    break
        state["prev"] = blocks(part)
        if hasattr(policy, "sets"):
            stats = policy.stats
            for j, c in policy.sets.clusters.items():
                members = sorted(c.members)
                M = stats.S[members].sum(axis=0)
                b = stats.b[members].sum(axis=0)
                scale = max(1.0, np.abs(M).max(), np.abs(b).max())
                if (
                    np.abs(c.M - M).max() > 1e-10 * scale
                    or np.abs(c.b - b).max() > 1e-10 * scale
                    or c.T != int(stats.T[members].sum())
                ):
                    problems.append(f"round {t}: cluster {j} aggregate drifted")

    run_one(cfg, kind, seed, env=env, on_round=hook)
    return problems
