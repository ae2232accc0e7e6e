"""Cluster bookkeeping shared by the policies.

Three structures live here: per-user sufficient statistics, the
deletion-only user graph used by the CLUB family, and the set-based cluster
collection (split/merge with checked flags) used by the SCLUB family.
"""

import math
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from .linalg import _posv, rank1_add, reg_solve


@dataclass(frozen=True)
class ConfidenceParams:
    """Inputs shared by the thresholds and UCB widths.

    ``threshold_scale`` multiplies the edge-deletion / split / merge
    threshold ``f``; ``beta`` overrides the confidence-width formula when set.
    """

    u: int
    d: int
    lam: float = 1.0
    delta: float = 0.1
    L: float = 1.0
    lambda_x: float = 0.1
    gamma: float = None
    beta: float = None
    T_horizon: int = 10_000
    doubling_horizon: bool = False
    threshold_scale: float = 1.0

    def __post_init__(self):
        if not (self.lam > 0 and self.L > 0 and self.lambda_x > 0):
            raise ValueError("lambda, L and lambda_x must be positive")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.gamma is not None and not self.gamma > 0:
            raise ValueError("gamma must be positive when given")
        if self.beta is not None and self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.T_horizon < 1 or self.threshold_scale <= 0:
            raise ValueError("T_horizon and threshold_scale must be positive")

    def replace(self, **changes):
        return replace(self, **changes)

    def beta_at(self, t=None):
        """Confidence width multiplier for round ``t``.

        With ``doubling_horizon`` the horizon inside the formula is the
        smallest power of two >= t instead of the configured T.
        """
        if self.beta is not None:
            return self.beta
        horizon = self.T_horizon
        if self.doubling_horizon and t is not None:
            horizon = 1 << max(int(t) - 1, 0).bit_length()
        return beta_formula(self.d, horizon, self.L, self.lam, self.delta)


def beta_formula(d, T, L, lam, delta):
    return math.sqrt(d * math.log(1 + T * L**2 / (d * lam)) + 2 * math.log(1 / delta)) + math.sqrt(lam)


def _f_formula(t, p):
    num = np.sqrt(2 * math.log(p.u / p.delta) + p.d * np.log1p(t * p.L**2 / (p.lam * p.d)))
    return (num + math.sqrt(p.lam)) / np.sqrt(p.lam + t * p.lambda_x / 2)


_F_TABLES = {}
_F_TABLE_MAX = 1 << 20


def _f_table(p, need):
    tab = _F_TABLES.get(p)
    if tab is None or len(tab) <= need:
        size = max(1024, 2 * need + 1)
        tab = _f_formula(np.arange(size, dtype=float), p)
        if len(_F_TABLES) > 64:
            _F_TABLES.clear()
        _F_TABLES[p] = tab
    return tab


def f_threshold(T_i, p):
    """Estimation-error radius after ``T_i`` samples of one user.

    Works elementwise on arrays of counts; integer counts are served from a
    per-params lookup table.
    """
    if np.isscalar(T_i):
        t = float(T_i)
        num = math.sqrt(2 * math.log(p.u / p.delta) + p.d * math.log1p(t * p.L**2 / (p.lam * p.d)))
        return (num + math.sqrt(p.lam)) / math.sqrt(p.lam + t * p.lambda_x / 2)
    T_i = np.asarray(T_i)
    if T_i.dtype.kind in "iu" and T_i.size and 0 <= T_i.min() and T_i.max() < _F_TABLE_MAX // 2:
        return _f_table(p, int(T_i.max()))[T_i]
    return _f_formula(T_i.astype(float), p)


def t0_budget(p, u, d, exploration_scale=1.0):
    """Pure-exploration length that suffices to cluster all users (known gap)."""
    if p.gamma is None:
        raise ValueError("t0_budget needs a known cluster gap gamma; use PhaseUniCLUB")
    if exploration_scale <= 0:
        raise ValueError("exploration_scale must be positive")
    log_u = math.log(u / p.delta)
    eig_term = 8 * p.L**2 / p.lambda_x * math.log(u * d / p.delta)
    gap_term = 512 * d / (p.gamma**2 * p.lambda_x) * log_u
    return math.ceil(exploration_scale * (16 * u * log_u + 4 * u * max(eig_term, gap_term)))


# --- per-user statistics ----------------------------------------------------


@dataclass(frozen=True)
class UserStat:
    S: np.ndarray
    b: np.ndarray
    T: int
    theta_hat: np.ndarray

    @classmethod
    def fresh(cls, d):
        return cls(np.zeros((d, d)), np.zeros(d), 0, np.zeros(d))


def update_user(us, x, r, p):
    """One observation for a user: S += x x^T, b += r x, T += 1, re-solve."""
    x = np.asarray(x, dtype=float)
    S = rank1_add(us.S, x)
    b = us.b + r * x
    return UserStat(S, b, us.T + 1, reg_solve(S, b, p.lam))


def delete_check(a, b, p):
    """True iff the two estimates are further apart than f(T_a) + f(T_b)."""
    dist = float(np.linalg.norm(a.theta_hat - b.theta_hat))
    return dist > p.threshold_scale * (f_threshold(a.T, p) + f_threshold(b.T, p))


class UserStats:
    """Array-backed statistics for all users (same arithmetic as UserStat)."""

    def __init__(self, u, d, lam):
        self.lam = lam
        self._reg = lam * np.eye(d)
        self.S = np.zeros((u, d, d))
        self.b = np.zeros((u, d))
        self.T = np.zeros(u, dtype=np.int64)
        self.theta = np.zeros((u, d))

    @property
    def u(self):
        return self.T.size

    def update(self, i, x, r):
        x = np.asarray(x, dtype=float)
        if x.shape != self.b[i].shape:
            raise ValueError(f"dimension mismatch: expected ({self.b.shape[1]},), got {x.shape}")
        self.S[i] += np.multiply.outer(x, x)
        self.b[i] += r * x
        self.T[i] += 1
        self.theta[i] = _posv(self.S[i] + self._reg, self.b[i])

    def get(self, i):
        return UserStat(self.S[i].copy(), self.b[i].copy(), int(self.T[i]), self.theta[i].copy())

    def far_apart(self, i, others, p):
        """Boolean mask over ``others``: which fail the closeness test with ``i``."""
        others = np.asarray(others, dtype=int)
        if others.size == 0:
            return np.zeros(0, dtype=bool)
        diff = self.theta[others] - self.theta[i]
        dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        thr = p.threshold_scale * (f_threshold(int(self.T[i]), p) + f_threshold(self.T[others], p))
        return dist > thr


# --- graph-based clustering ---------------------------------------------------


class UserGraph:
    """Undirected graph over users that starts complete and only loses edges."""

    def __init__(self, u):
        self.adj = ~np.eye(u, dtype=bool)
        self._version = 0
        self._memo = {}

    @property
    def u(self):
        return self.adj.shape[0]

    def edge_count(self):
        return int(self.adj.sum()) // 2

    def neighbors(self, i):
        return np.flatnonzero(self.adj[i])

    def delete_edges(self, i, others):
        others = np.asarray(others, dtype=int)
        if others.size == 0:
            return
        self.adj[i, others] = False
        self.adj[others, i] = False
        self._version += 1
        self._memo.clear()

    def has_edge(self, i, j):
        return bool(self.adj[i, j])


def connected_component(g, i):
    """Users reachable from ``i`` (BFS), memoized until the next deletion."""
    hit = g._memo.get(i)
    if hit is not None:
        return hit
    seen = np.zeros(g.u, dtype=bool)
    seen[i] = True
    queue = deque([i])
    while queue:
        k = queue.popleft()
        nxt = np.flatnonzero(g.adj[k] & ~seen)
        seen[nxt] = True
        queue.extend(nxt.tolist())
    comp = np.flatnonzero(seen)
    for k in comp:
        g._memo[int(k)] = comp
    return comp


def neighbors_plus_self(g, i):
    return np.union1d(g.neighbors(i), [i])


def graph_partition(g):
    parts, seen = [], set()
    for i in range(g.u):
        if i in seen:
            continue
        comp = connected_component(g, i).tolist()
        seen.update(comp)
        parts.append(comp)
    return parts


# --- set-based clustering -----------------------------------------------------


@dataclass
class Cluster:
    members: set
    M: np.ndarray
    b: np.ndarray
    T: int
    theta: np.ndarray = field(default=None)


class ClusterSets:
    """Live clusters with aggregate statistics and per-user checked flags.

    Starts as a single cluster holding every user. New ids come from a
    monotone counter so traces are reproducible.
    """

    def __init__(self, u, d, lam):
        self.u, self.d, self.lam = u, d, lam
        self.clusters = {0: Cluster(set(range(u)), np.zeros((d, d)), np.zeros(d), 0, np.zeros(d))}
        self.owner = np.zeros(u, dtype=np.int64)
        self.checked = np.zeros(u, dtype=bool)
        self._next_id = 1

    def ids(self):
        return sorted(self.clusters)

    def cluster_of(self, i):
        return int(self.owner[i])

    def is_checked(self, j):
        return bool(self.checked[list(self.clusters[j].members)].all())

    def reset_checks(self):
        self.checked[:] = False

    def mark_checked(self, i):
        self.checked[i] = True

    def _refresh(self, c):
        c.theta = _posv(c.M + self.lam * np.eye(self.d), c.b)

    def add_sample(self, j, x, r):
        c = self.clusters[j]
        c.M = c.M + np.multiply.outer(x, x)
        c.b = c.b + r * x
        c.T += 1
        self._refresh(c)

    def partition(self):
        return [sorted(self.clusters[j].members) for j in self.ids()]


def split_user(cs, i, j, stats):
    """Move user ``i`` out of cluster ``j`` into a fresh singleton cluster.

    ``stats`` is the UserStats holding user ``i``. Returns the new cluster id.
    """
    c = cs.clusters.get(j)
    if c is None or i not in c.members:
        raise KeyError(f"user {i} is not in cluster {j}")
    new_id = cs._next_id
    cs._next_id += 1
    c.members.discard(i)
    if c.members:
        c.M = c.M - stats.S[i]
        c.b = c.b - stats.b[i]
        c.T -= int(stats.T[i])
        cs._refresh(c)
    else:
        del cs.clusters[j]
    cs.clusters[new_id] = Cluster(
        {i}, stats.S[i].copy(), stats.b[i].copy(), int(stats.T[i]), stats.theta[i].copy()
    )
    cs.owner[i] = new_id
    return new_id


def merge_guard(cs, j1, j2, p):
    c1, c2 = cs.clusters[j1], cs.clusters[j2]
    dist = float(np.linalg.norm(c1.theta - c2.theta))
    return dist < p.threshold_scale * (f_threshold(c1.T, p) + f_threshold(c2.T, p))


def merge_clusters(cs, j1, j2, p):
    """Fold cluster ``j2`` into ``j1``; both must be checked and close."""
    if j1 == j2:
        raise ValueError("cannot merge a cluster with itself")
    if not (cs.is_checked(j1) and cs.is_checked(j2)):
        raise ValueError(f"clusters {j1} and {j2} must both be checked before merging")
    if not merge_guard(cs, j1, j2, p):
        raise ValueError(f"clusters {j1} and {j2} are too far apart to merge")
    c1, c2 = cs.clusters[j1], cs.clusters.pop(j2)
    c1.M = c1.M + c2.M
    c1.b = c1.b + c2.b
    c1.T += c2.T
    c1.members |= c2.members
    cs.owner[list(c2.members)] = j1
    cs._refresh(c1)
    return j1


def merge_to_fixpoint(cs, p):
    """Merge checked cluster pairs in ascending id order until none qualify.

    Restarts the scan after every merge. Returns the number of merges.
    """
    merges = 0
    while True:
        pending = set(cs.owner[~cs.checked].tolist())
        ids = [j for j in cs.ids() if j not in pending]
        if len(ids) < 2:
            return merges
        thetas = np.array([cs.clusters[j].theta for j in ids])
        fs = f_threshold(np.array([cs.clusters[j].T for j in ids]), p)
        dist = np.linalg.norm(thetas[:, None, :] - thetas[None, :, :], axis=2)
        close = dist < p.threshold_scale * (fs[:, None] + fs[None, :])
        close[np.tril_indices(len(ids))] = False
        hits = np.flatnonzero(close)  # row-major: ascending (j1, j2)
        if hits.size == 0:
            return merges
        a, b = divmod(int(hits[0]), len(ids))
        merge_clusters(cs, ids[a], ids[b], p)
        merges += 1
