"""The nine bandit policies behind one select/observe interface.

Round indices start at 1, users and arms at 0. Every policy owns a private
generator for its uniform-exploration draws.
"""

import math
from dataclasses import dataclass

import numpy as np

from .clusters import (
    ClusterSets,
    UserGraph,
    UserStats,
    connected_component,
    graph_partition,
    merge_to_fixpoint,
    neighbors_plus_self,
    split_user,
    t0_budget,
)
from .linalg import RegularizedGram, quad_form_inv

POLICY_KINDS = (
    "LinUCB-One",
    "LinUCB-Ind",
    "CLUB",
    "SCLUB",
    "UniCLUB",
    "UniSCLUB",
    "PhaseUniCLUB",
    "SACLUB",
    "SASCLUB",
)


class RoundOrderError(RuntimeError):
    pass


def ucb_index(theta_hat, M, x, p, t=None):
    """Estimated reward plus confidence width for a single arm."""
    x = np.asarray(x, dtype=float)
    return float(theta_hat @ x) + p.beta_at(t) * math.sqrt(quad_form_inv(M, x, p.lam))


def smoothed_params(p, sigma, R, K, d, c1=1.0):
    """Thresholds for the smoothed-adversary setting.

    lambda_x becomes c1 * sigma^2 / log K and the context norm bound
    becomes 1 + sqrt(d) * R.
    """
    if not (sigma > 0 and R > 0):
        raise ValueError("sigma and R must be positive")
    if K < 2:
        raise ValueError("smoothed diversity needs K >= 2 (log K must be positive)")
    return p.replace(lambda_x=c1 * sigma**2 / math.log(K), L=1.0 + math.sqrt(d) * R)


@dataclass
class Selection:
    """What a UCB round looked at; read back by the coverage check."""

    members: np.ndarray
    theta: np.ndarray
    widths: np.ndarray


class Policy:
    kind = None
    uses_clusters = False

    def __init__(self, u, d, params, rng, exploration_scale=1.0):
        if params.u != u or params.d != d:
            raise ValueError("params were built for a different (u, d)")
        self.u, self.d, self.p = u, d, params
        self.rng = rng
        self.exploration_scale = exploration_scale
        self.t = 0
        self._pending = None
        self.last = None
        self.last_uniform = False

    # round protocol ------------------------------------------------------
    def select(self, rnd):
        if rnd.t != self.t + 1 or self._pending is not None:
            raise RoundOrderError(f"expected round {self.t + 1}, got {rnd.t}")
        if not 0 <= rnd.user < self.u:
            raise IndexError(f"user {rnd.user} out of range for u={self.u}")
        arms = rnd.arms
        if arms.ndim != 2 or arms.shape[1] != self.d or len(arms) == 0:
            raise ValueError(f"arm set must be (K, {self.d}), got {arms.shape}")
        self.last = None
        self.last_uniform = False
        self._start_round(rnd.t)
        if len(arms) == 1:
            choice = 0
            self.last_uniform = self._explore(rnd.t)
        elif self._explore(rnd.t):
            choice = int(self.rng.integers(0, len(arms)))
            self.last_uniform = True
        else:
            choice = self._ucb(rnd)
        self._pending = (rnd.t, choice)
        return choice

    def observe(self, rnd, chosen, reward):
        if self._pending != (rnd.t, chosen):
            raise RoundOrderError(f"observe for round {rnd.t} arm {chosen} does not match select")
        self._update(rnd, rnd.arms[chosen], float(reward))
        self._pending = None
        self.t = rnd.t

    # hooks ------------------------------------------------------------------
    def _start_round(self, t):
        pass

    def _explore(self, t):
        return False

    def _ucb(self, rnd):
        raise NotImplementedError

    def _update(self, rnd, x, r):
        raise NotImplementedError

    def partition(self):
        return [list(range(self.u))]

    def info(self):
        return {"kind": self.kind, "beta": self.p.beta_at(self.p.T_horizon)}

    # shared helper ------------------------------------------------------------
    def _ucb_on(self, M, b, arms, t, members):
        gram = RegularizedGram(M, self.p.lam)
        theta = gram.solve(b)
        widths = self.p.beta_at(t) * np.sqrt(gram.quad_forms(arms))
        self.last = Selection(members, theta, widths)
        return int(np.argmax(arms @ theta + widths))


class LinUCBOne(Policy):
    """One shared ridge estimate for every user."""

    kind = "LinUCB-One"

    def __init__(self, u, d, params, rng, exploration_scale=1.0):
        super().__init__(u, d, params, rng, exploration_scale)
        self.stats = UserStats(1, d, params.lam)

    def _ucb(self, rnd):
        members = np.arange(self.u)
        return self._ucb_on(self.stats.S[0], self.stats.b[0], rnd.arms, rnd.t, members)

    def _update(self, rnd, x, r):
        self.stats.update(0, x, r)


class LinUCBInd(Policy):
    """Independent ridge estimate per user; nothing is shared."""

    kind = "LinUCB-Ind"

    def __init__(self, u, d, params, rng, exploration_scale=1.0):
        super().__init__(u, d, params, rng, exploration_scale)
        self.stats = UserStats(u, d, params.lam)

    def _ucb(self, rnd):
        i = rnd.user
        return self._ucb_on(self.stats.S[i], self.stats.b[i], rnd.arms, rnd.t, np.array([i]))

    def _update(self, rnd, x, r):
        self.stats.update(rnd.user, x, r)

    def partition(self):
        return [[i] for i in range(self.u)]


# --- graph family ---------------------------------------------------------------


class GraphPolicy(Policy):
    """CLUB: UCB on the connected component, edge deletion after each round."""

    kind = "CLUB"
    uses_clusters = True

    def __init__(self, u, d, params, rng, exploration_scale=1.0):
        super().__init__(u, d, params, rng, exploration_scale)
        self.stats = UserStats(u, d, params.lam)
        self.graph = UserGraph(u)

    def _cluster(self, i):
        return connected_component(self.graph, i)

    def _deletes(self, t):
        return True

    def _ucb(self, rnd):
        members = self._cluster(rnd.user)
        M = self.stats.S[members].sum(axis=0)
        b = self.stats.b[members].sum(axis=0)
        return self._ucb_on(M, b, rnd.arms, rnd.t, members)

    def _update(self, rnd, x, r):
        i = rnd.user
        self.stats.update(i, x, r)
        if self._deletes(rnd.t):
            nbrs = self.graph.neighbors(i)
            far = self.stats.far_apart(i, nbrs, self.p)
            self.graph.delete_edges(i, nbrs[far])

    def partition(self):
        return graph_partition(self.graph)


class UniCLUB(GraphPolicy):
    """CLUB preceded by T0 rounds of uniform arm selection."""

    kind = "UniCLUB"

    def __init__(self, u, d, params, rng, exploration_scale=1.0):
        super().__init__(u, d, params, rng, exploration_scale)
        self.T0 = t0_budget(params, u, d, exploration_scale)

    def _explore(self, t):
        return t <= self.T0

    def info(self):
        return {**super().info(), "T0": self.T0, "exploration_scale": self.exploration_scale}


class SACLUB(GraphPolicy):
    """CLUB with smoothed-setting thresholds (params supplied by the caller)."""

    kind = "SACLUB"


class PhaseClock:
    """Round bookkeeping for the phased, gap-free variant.

    Rounds 1..T_init are uniform. Phase s (s = 0, 1, ...) then lasts
    2^(alpha*s) * T_s rounds, of which the first T_s are uniform.
    """

    def __init__(self, u, d, params, alpha=2, exploration_scale=1.0):
        self.alpha = alpha
        log_u = math.log(u / params.delta)
        init = 16 * u * log_u + 4 * u * 8 * params.L**2 / params.lambda_x * math.log(u * d / params.delta)
        self.T_init = math.ceil(exploration_scale * init)
        self._base = 4 * u * 512 * d / params.lambda_x * log_u
        self.scale = exploration_scale

    def T_s(self, s):
        return math.ceil(self.scale * self._base * 2.0**s)

    def phase_length(self, s):
        return 2 ** (self.alpha * s) * self.T_s(s)

    def locate(self, t):
        """Return ``(s, tau)`` for round t, or ``(None, t)`` during the init block."""
        if t <= self.T_init:
            return None, t
        rest = t - self.T_init
        s = 0
        while rest > self.phase_length(s):
            rest -= self.phase_length(s)
            s += 1
        return s, rest


class PhaseUniCLUB(GraphPolicy):
    kind = "PhaseUniCLUB"

    def __init__(self, u, d, params, rng, exploration_scale=1.0, alpha=2):
        super().__init__(u, d, params, rng, exploration_scale)
        self.clock = PhaseClock(u, d, params, alpha, exploration_scale)
        self._s, self._tau, self._left = None, 0, self.clock.T_init

    def _start_round(self, t):
        # advance incrementally; locate() is the reference for tests
        if self._s is None and t <= self.clock.T_init:
            self._tau = t
            return
        if self._s is None:
            self._s, self._tau = 0, 1
        elif self._tau >= self.clock.phase_length(self._s):
            self._s, self._tau = self._s + 1, 1
        else:
            self._tau += 1

    @property
    def phase(self):
        return self._s, self._tau

    def _explore(self, t):
        return self._s is None or self._tau <= self.clock.T_s(self._s)

    def _cluster(self, i):
        return neighbors_plus_self(self.graph, i)

    def _deletes(self, t):
        return self._s is not None

    def info(self):
        return {
            **super().info(),
            "T_init": self.clock.T_init,
            "T_0": self.clock.T_s(0),
            "alpha": self.clock.alpha,
            "exploration_scale": self.exploration_scale,
        }


# --- set family -----------------------------------------------------------------


class SetPolicy(Policy):
    """SCLUB: set-based clusters with split, checked marks and merge."""

    kind = "SCLUB"
    uses_clusters = True

    def __init__(self, u, d, params, rng, exploration_scale=1.0):
        super().__init__(u, d, params, rng, exploration_scale)
        self.stats = UserStats(u, d, params.lam)
        self.sets = ClusterSets(u, d, params.lam)

    def _start_round(self, t):
        # phase s spans rounds 2^(s-1) .. 2^s - 1
        if t & (t - 1) == 0:
            self.sets.reset_checks()

    def _clustering_active(self, t):
        return True

    def _ucb(self, rnd):
        j = self.sets.cluster_of(rnd.user)
        c = self.sets.clusters[j]
        members = np.array(sorted(c.members))
        return self._ucb_on(c.M, c.b, rnd.arms, rnd.t, members)

    def _split(self, i):
        j = self.sets.cluster_of(i)
        others = np.array(sorted(self.sets.clusters[j].members - {i}), dtype=int)
        if others.size and self.stats.far_apart(i, others, self.p).any():
            split_user(self.sets, i, j, self.stats)

    def _update(self, rnd, x, r):
        i = rnd.user
        self.stats.update(i, x, r)
        self.sets.add_sample(self.sets.cluster_of(i), x, r)
        if self._clustering_active(rnd.t):
            self._split(i)
        self.sets.mark_checked(i)
        if self._clustering_active(rnd.t):
            merge_to_fixpoint(self.sets, self.p)

    def partition(self):
        return self.sets.partition()


class UniSCLUB(SetPolicy):
    """SCLUB with uniform selection through round 2*T0.

    Split/merge are skipped while exploring; at round 2*T0 every user is
    run through Split once and then Merge goes to a fixpoint.
    """

    kind = "UniSCLUB"

    def __init__(self, u, d, params, rng, exploration_scale=1.0):
        super().__init__(u, d, params, rng, exploration_scale)
        self.T0 = t0_budget(params, u, d, exploration_scale)

    def _explore(self, t):
        return t <= 2 * self.T0

    def _clustering_active(self, t):
        return t > 2 * self.T0

    def _update(self, rnd, x, r):
        super()._update(rnd, x, r)
        if rnd.t == 2 * self.T0:
            for i in range(self.u):
                self._split(i)
            merge_to_fixpoint(self.sets, self.p)

    def info(self):
        return {**super().info(), "T0": self.T0, "exploration_scale": self.exploration_scale}


class SASCLUB(SetPolicy):
    kind = "SASCLUB"


_CLASSES = {
    "LinUCB-One": LinUCBOne,
    "LinUCB-Ind": LinUCBInd,
    "CLUB": GraphPolicy,
    "SCLUB": SetPolicy,
    "UniCLUB": UniCLUB,
    "UniSCLUB": UniSCLUB,
    "PhaseUniCLUB": PhaseUniCLUB,
    "SACLUB": SACLUB,
    "SASCLUB": SASCLUB,
}


def make_policy(kind, u, d, params, rng, exploration_scale=1.0, alpha=2, smoothing=None):
    """Build a policy by name.

    ``smoothing`` is ``(sigma, R, K, c1)``; SACLUB/SASCLUB require it and
    have their thresholds rewritten with :func:`smoothed_params`.
    """
    try:
        cls = _CLASSES[kind]
    except KeyError:
        raise ValueError(f"unknown policy {kind!r}; choose from {', '.join(POLICY_KINDS)}") from None
    if kind in ("SACLUB", "SASCLUB"):
        if smoothing is None:
            raise ValueError(f"{kind} needs the smoothing parameters (sigma, R, K, c1)")
        sigma, R, K, c1 = smoothing
        params = smoothed_params(params, sigma, R, K, d, c1)
    if kind == "PhaseUniCLUB":
        return cls(u, d, params, rng, exploration_scale, alpha=alpha)
    return cls(u, d, params, rng, exploration_scale)
