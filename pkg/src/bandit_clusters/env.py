"""Ground-truth environments: users, hidden clusters, contexts and rewards."""

import itertools
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

# Stream purposes. Each (seed, purpose) pair gets its own generator so that
# contexts, reward noise and policy exploration never share draws.
CONTEXT, NOISE, POLICY = 0, 1, 2

MC_LAMBDA_SAMPLES = 10**6


def make_rng(seed, purpose):
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(purpose),))
    return np.random.Generator(np.random.PCG64(ss))


def sample_truncated_gaussian(sigma, R, d, rng, size=None):
    """Coordinates i.i.d. N(0, sigma^2) conditioned on |eps_j| <= R.

    Per-coordinate rejection sampling. ``size`` adds leading dimensions,
    e.g. ``size=K`` returns a (K, d) array.
    """
    if not (sigma > 0 and R > 0):
        raise ValueError("sigma and R must be positive")
    shape = (d,) if size is None else tuple(np.atleast_1d(size)) + (d,)
    n = int(np.prod(shape))
    out = np.empty(n)
    filled = 0
    accept = math.erf(R / (sigma * math.sqrt(2.0)))
    while filled < n:
        need = n - filled
        batch = rng.normal(0.0, sigma, size=int(need / accept * 1.1) + 16)
        batch = batch[np.abs(batch) <= R][:need]
        out[filled : filled + batch.size] = batch
        filled += batch.size
    return out.reshape(shape)


def truncated_normal_variance(sigma, R):
    """Closed-form variance of N(0, sigma^2) truncated to [-R, R]."""
    a = R / sigma
    phi = math.exp(-a * a / 2.0) / math.sqrt(2.0 * math.pi)
    Phi = 0.5 * (1.0 + math.erf(a / math.sqrt(2.0)))
    return sigma**2 * (1.0 - 2.0 * a * phi / (2.0 * Phi - 1.0))


def unit_rows(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _mc_lambda_x(draw, d, n=MC_LAMBDA_SAMPLES, seed=12345, chunk=10**5):
    from .linalg import min_eigenvalue

    rng = np.random.default_rng(seed)
    acc = np.zeros((d, d))
    done = 0
    while done < n:
        m = min(chunk, n - done)
        x = draw(rng, m)
        acc += x.T @ x
        done += m
    return min_eigenvalue(acc / n)


# --- stochastic context samplers -----------------------------------------


@dataclass(frozen=True)
class SphereSampler:
    """Uniform on the unit sphere; E[XX^T] = I/d exactly."""

    d: int
    L: float = 1.0

    @property
    def lambda_x(self):
        return 1.0 / self.d

    def draw(self, rng, n):
        return unit_rows(rng.standard_normal((n, self.d)))


@dataclass(frozen=True)
class CubeSampler:
    """Coordinates U(-1, 1), then normalized to unit length."""

    d: int
    L: float = 1.0
    mc_samples: int = MC_LAMBDA_SAMPLES
    _lambda: list = field(default_factory=list, compare=False, repr=False)

    @property
    def lambda_x(self):
        if not self._lambda:
            self._lambda.append(_mc_lambda_x(self.draw, self.d, self.mc_samples))
        return self._lambda[0]

    def draw(self, rng, n):
        return unit_rows(rng.uniform(-1.0, 1.0, size=(n, self.d)))


@dataclass(frozen=True)
class PointMassSampler:
    x0: tuple

    @property
    def d(self):
        return len(self.x0)

    @property
    def L(self):
        return float(np.linalg.norm(self.x0))

    @property
    def lambda_x(self):
        if self.d == 1:
            return self.x0[0] ** 2
        return 0.0

    def draw(self, rng, n):
        return np.tile(np.asarray(self.x0, dtype=float), (n, 1))


@dataclass(frozen=True, eq=False)
class PoolSampler:
    """Uniform draws from a fixed arm pool (K distinct arms per round)."""

    pool: np.ndarray

    @property
    def d(self):
        return self.pool.shape[1]

    @property
    def L(self):
        return float(np.linalg.norm(self.pool, axis=1).max())

    @property
    def lambda_x(self):
        from .linalg import min_eigenvalue

        return min_eigenvalue(self.pool.T @ self.pool / len(self.pool))

    def draw(self, rng, n):
        return self.pool[rng.integers(0, len(self.pool), size=n)]

    def draw_set(self, rng, k):
        if k > len(self.pool):
            raise ValueError("arm set larger than the pool")
        return self.pool[_distinct(rng, len(self.pool), k)]


def _distinct(rng, n, k):
    # Rejection on duplicates is much cheaper than a full permutation when k << n.
    if 4 * k > n:
        return rng.permutation(n)[:k]
    idx = rng.integers(0, n, size=k)
    while len(np.unique(idx)) < k:
        idx = rng.integers(0, n, size=k)
    return idx


@dataclass(frozen=True, eq=False)
class StochasticContextGen:
    K: int
    sampler: object

    @property
    def L(self):
        return self.sampler.L

    @property
    def lambda_x(self):
        return self.sampler.lambda_x

    def new_state(self):
        return None

    def arms(self, rng, t, state):
        if hasattr(self.sampler, "draw_set"):
            return self.sampler.draw_set(rng, self.K)
        return self.sampler.draw(rng, self.K)


# --- smoothed adversary ---------------------------------------------------


@dataclass(frozen=True, eq=False)
class FixedGridAdversary:
    """Replays a fixed pool of mean vectors, K consecutive entries per round."""

    pool: np.ndarray

    def means(self, t, K, digest):
        idx = ((t - 1) * K + np.arange(K)) % len(self.pool)
        return self.pool[idx]


@dataclass(frozen=True)
class SpitefulAdversary:
    """Points every mean at the least-explored direction of past contexts."""

    d: int

    def means(self, t, K, digest):
        from .linalg import jacobi_eigenvalues

        if digest is None or not digest.any():
            v = np.zeros(self.d)
            v[0] = 1.0
        else:
            _, vecs = jacobi_eigenvalues(digest, vectors=True)
            v = vecs[:, 0]
            # fix the sign so the rule is deterministic
            k = int(np.argmax(np.abs(v)))
            v = v if v[k] > 0 else -v
        return np.tile(v, (K, 1))


@dataclass(frozen=True, eq=False)
class SmoothedContextGen:
    K: int
    adversary: object
    sigma: float
    R: float
    d: int
    c1: float = 1.0

    @property
    def L(self):
        return 1.0 + math.sqrt(self.d) * self.R

    @property
    def lambda_x(self):
        # effective diversity c1 * sigma^2 / log K
        return self.c1 * self.sigma**2 / math.log(self.K)

    def new_state(self):
        return np.zeros((self.d, self.d)) if isinstance(self.adversary, SpitefulAdversary) else None

    def arms(self, rng, t, state):
        mu = self.adversary.means(t, self.K, state)
        mu = mu / np.maximum(np.linalg.norm(mu, axis=1, keepdims=True), 1.0)
        x = mu + sample_truncated_gaussian(self.sigma, self.R, self.d, rng, size=self.K)
        if state is not None:
            state += x.T @ x
        return x


# --- environment ------------------------------------------------------------


@dataclass(frozen=True)
class RoundInput:
    t: int
    user: int
    arms: np.ndarray


@dataclass(frozen=True, eq=False)
class EnvModel:
    """Hidden cluster structure plus the context and noise model.

    ``assignment[i]`` is the cluster of user ``i``; ``prefs[j]`` the shared
    preference vector of cluster ``j``. Users and clusters are 0-based.
    """

    prefs: np.ndarray
    assignment: np.ndarray
    context: object = None
    noise_sd: float = 0.1
    clamp: bool = False
    user_vectors: np.ndarray = None

    def __post_init__(self):
        prefs = np.asarray(self.prefs, dtype=float)
        assignment = np.asarray(self.assignment, dtype=int)
        object.__setattr__(self, "prefs", prefs)
        object.__setattr__(self, "assignment", assignment)
        m = prefs.shape[0]
        if assignment.ndim != 1 or assignment.size == 0:
            raise ValueError("assignment must be a non-empty vector")
        if set(np.unique(assignment)) != set(range(m)):
            raise ValueError("assignment must map users onto every cluster 0..m-1")
        if np.any(np.linalg.norm(prefs, axis=1) > 1.0 + 1e-9):
            raise ValueError("preference vectors must have norm <= 1")
        if not self.gap > 0:
            raise ValueError("cluster preference vectors must be distinct")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be >= 0")

    @property
    def u(self):
        return self.assignment.size

    @property
    def d(self):
        return self.prefs.shape[1]

    @property
    def m(self):
        return self.prefs.shape[0]

    @property
    def gap(self):
        """Minimum pairwise distance between cluster preference vectors."""
        if self.m < 2:
            return math.inf
        return min(
            float(np.linalg.norm(self.prefs[a] - self.prefs[b]))
            for a, b in itertools.combinations(range(self.m), 2)
        )

    def theta(self, user):
        return self.prefs[self.assignment[user]]

    def true_partition(self):
        return [sorted(np.flatnonzero(self.assignment == j).tolist()) for j in range(self.m)]

    def with_context(self, context):
        return replace(self, context=context)


class EnvStream:
    """Per-run random state: the context/arrival stream, the noise stream and
    any adversary history. Created fresh for every (env, seed) replica."""

    def __init__(self, env, seed):
        self.env = env
        self.context_rng = make_rng(seed, CONTEXT)
        self.noise_rng = make_rng(seed, NOISE)
        self.state = env.context.new_state() if env.context is not None else None
        self.t = 0


def next_round(env, stream):
    """Draw the next arriving user (uniform over [u]) and its K arms."""
    stream.t += 1
    user = int(stream.context_rng.integers(0, env.u)) if env.u > 1 else 0
    arms = env.context.arms(stream.context_rng, stream.t, stream.state)
    return RoundInput(stream.t, user, np.asarray(arms, dtype=float))


def reward(env, user, x, rng):
    """Linear reward plus Gaussian noise; clamped to [-1, 1] only if asked."""
    r = float(x @ env.theta(user))
    if env.noise_sd > 0:
        r += env.noise_sd * float(rng.standard_normal())
    if env.clamp:
        r = min(1.0, max(-1.0, r))
    return r


def instant_regret(env, rnd, chosen):
    if not 0 <= chosen < len(rnd.arms):
        raise IndexError(f"arm {chosen} out of range for K={len(rnd.arms)}")
    values = rnd.arms @ env.theta(rnd.user)
    return max(float(values.max() - values[chosen]), 0.0)


# --- synthetic data and feature files --------------------------------------


def cluster_means(user_vectors, assignment, m):
    """Mean of member vectors per cluster, in ascending member order."""
    prefs = np.zeros((m, user_vectors.shape[1]))
    for j in range(m):
        members = np.flatnonzero(assignment == j)
        prefs[j] = user_vectors[members].mean(axis=0)
    return prefs


def random_partition(n, m, rng):
    """Assign n items to m non-empty groups of near-equal size at random."""
    labels = np.arange(n) % m
    return labels[rng.permutation(n)]


def make_synthetic(u, d, total_arms, m, selected_users, rng, noise_sd=0.1):
    """Synthetic data as in the desk-scale experiments.

    Arm features and ``u`` raw user vectors are coordinatewise U(-1, 1),
    normalized to unit length. ``selected_users`` of them are partitioned
    into ``m`` clusters whose preference vector is the mean of the members'
    vectors. Returns ``(env, pool)``; the env has no context generator yet.
    """
    if not (1 <= m <= selected_users <= u) or d < 1 or total_arms < 1:
        raise ValueError(
            f"invalid sizes: u={u} d={d} arms={total_arms} m={m} selected={selected_users}"
        )
    pool = unit_rows(rng.uniform(-1.0, 1.0, size=(total_arms, d)))
    raw_users = unit_rows(rng.uniform(-1.0, 1.0, size=(u, d)))
    chosen = np.sort(rng.choice(u, size=selected_users, replace=False))
    vectors = raw_users[chosen]
    assignment = random_partition(selected_users, m, rng)
    prefs = cluster_means(vectors, assignment, m)
    env = EnvModel(prefs, assignment, noise_sd=noise_sd, user_vectors=vectors)
    return env, pool


class FeatureFileError(ValueError):
    def __init__(self, line, message):
        super().__init__(f"line {line}: {message}")
        self.line = line


def write_features(path, env, pool):
    """Write the ENVV1 feature file (users with cluster labels, then arms)."""
    vectors = env.user_vectors if env.user_vectors is not None else env.prefs[env.assignment]
    lines = [f"ENVV1 u={env.u} d={env.d} arms={len(pool)} m={env.m}"]
    for i in range(env.u):
        vals = " ".join(repr(float(v)) for v in vectors[i])
        lines.append(f"user {i} {int(env.assignment[i])} {vals}")
    for a in range(len(pool)):
        lines.append(f"arm {a} " + " ".join(repr(float(v)) for v in pool[a]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_floats(tokens, d, lineno):
    if len(tokens) != d:
        raise FeatureFileError(lineno, f"expected {d} values, got {len(tokens)}")
    try:
        vals = [float(tok) for tok in tokens]
    except ValueError as exc:
        raise FeatureFileError(lineno, f"bad number: {exc}") from None
    if not all(math.isfinite(v) for v in vals):
        raise FeatureFileError(lineno, "non-finite value")
    return vals


def load_features(path, noise_sd=0.1, norm_tol=1e-9):
    """Parse an ENVV1 file into ``(env, pool)``.

    Cluster preference vectors are the means of their members' vectors.
    Raises FeatureFileError carrying the 1-based line number.
    """
    text = Path(path).read_text(encoding="utf-8")
    header = None
    users, arms = {}, {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        if header is None:
            if tokens[0] != "ENVV1":
                raise FeatureFileError(lineno, "missing ENVV1 header")
            header = {}
            for tok in tokens[1:]:
                key, sep, val = tok.partition("=")
                if not sep or key not in ("u", "d", "arms", "m"):
                    raise FeatureFileError(lineno, f"bad header field {tok!r}")
                try:
                    header[key] = int(val)
                except ValueError:
                    raise FeatureFileError(lineno, f"bad header value {tok!r}") from None
            if set(header) != {"u", "d", "arms", "m"}:
                raise FeatureFileError(lineno, "header needs u=, d=, arms= and m=")
            if min(header.values()) < 1:
                raise FeatureFileError(lineno, "header counts must be positive")
            continue
        d = header["d"]
        kind = tokens[0]
        if kind == "user":
            if arms:
                raise FeatureFileError(lineno, "user line after arm lines")
            if len(tokens) < 3:
                raise FeatureFileError(lineno, "truncated user line")
            try:
                i, j = int(tokens[1]), int(tokens[2])
            except ValueError:
                raise FeatureFileError(lineno, "user index and cluster must be integers") from None
            if not (0 <= i < header["u"]) or i in users:
                raise FeatureFileError(lineno, f"bad or duplicate user index {i}")
            if not 0 <= j < header["m"]:
                raise FeatureFileError(lineno, f"cluster {j} out of range")
            users[i] = (j, _parse_floats(tokens[3:], d, lineno))
        elif kind == "arm":
            if len(tokens) < 2:
                raise FeatureFileError(lineno, "truncated arm line")
            try:
                a = int(tokens[1])
            except ValueError:
                raise FeatureFileError(lineno, "arm index must be an integer") from None
            if not (0 <= a < header["arms"]) or a in arms:
                raise FeatureFileError(lineno, f"bad or duplicate arm index {a}")
            arms[a] = _parse_floats(tokens[2:], d, lineno)
        else:
            raise FeatureFileError(lineno, f"unknown record type {kind!r}")
    last = len(text.splitlines())
    if header is None:
        raise FeatureFileError(max(last, 1), "empty file")
    if len(users) != header["u"]:
        raise FeatureFileError(last, f"expected {header['u']} users, found {len(users)}")
    if not arms:
        raise FeatureFileError(last, "no arm section")
    if len(arms) != header["arms"]:
        raise FeatureFileError(last, f"expected {header['arms']} arms, found {len(arms)}")
    assignment = np.array([users[i][0] for i in range(header["u"])])
    vectors = np.array([users[i][1] for i in range(header["u"])])
    pool = np.array([arms[a] for a in range(header["arms"])])
    if set(assignment.tolist()) != set(range(header["m"])):
        raise FeatureFileError(last, "some cluster has no users")
    prefs = cluster_means(vectors, assignment, header["m"])
    if np.any(np.linalg.norm(prefs, axis=1) > 1.0 + norm_tol):
        raise FeatureFileError(last, "cluster preference vector with norm > 1")
    try:
        env = EnvModel(prefs, assignment, noise_sd=noise_sd, user_vectors=vectors)
    except ValueError as exc:
        raise FeatureFileError(last, str(exc)) from None
    return env, pool
