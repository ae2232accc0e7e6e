"""Small dense linear algebra for d x d symmetric PSD statistics.

Everything here works on plain numpy arrays. Matrices are assumed to be
float64 and symmetric; ``rank1_add`` keeps them exactly symmetric.
"""

import logging
import math

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.linalg.lapack import dposv, dpotrf, dpotrs, dtrtrs

log = logging.getLogger(__name__)

JACOBI_TOL = 1e-10
JACOBI_MAX_SWEEPS = 100
SVD_MAX_ITER = 500
SVD_TOL = 1e-9


class ConvergenceError(RuntimeError):
    """Raised when an iterative solver exhausts its iteration budget."""

    def __init__(self, message, best_estimate):
        super().__init__(message)
        self.best_estimate = best_estimate


def _check_dims(m, x):
    m = np.asarray(m, dtype=float)
    x = np.asarray(x, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    if x.shape != (m.shape[0],):
        raise ValueError(f"dimension mismatch: matrix {m.shape}, vector {x.shape}")
    return m, x


def rank1_add(m, x):
    """Return ``m + x x^T`` as a new, exactly symmetric matrix."""
    m, x = _check_dims(m, x)
    outer = np.outer(x, x)
    # outer(x, x) is symmetric bit-for-bit since x_i*x_j == x_j*x_i in IEEE
    return m + outer


def _regularized(s, lam):
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    s = np.asarray(s, dtype=float)
    return s + lam * np.eye(s.shape[0])


def reg_solve(s, b, lam):
    """Solve ``(lam*I + s) theta = b`` by Cholesky."""
    s, b = _check_dims(s, b)
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(b)) and np.isfinite(lam)):
        raise ValueError("non-finite input to reg_solve")
    return _posv(_regularized(s, lam), b)


def _posv(a, b):
    # LAPACK Cholesky factor + solve in one call
    _, x, info = dposv(a, b, lower=1)
    if info != 0:
        raise np.linalg.LinAlgError(f"matrix is not positive definite (info={info})")
    return x


def quad_form_inv(s, x, lam):
    """``x^T (lam*I + s)^{-1} x``, i.e. the squared norm of x under the inverse."""
    s, x = _check_dims(s, x)
    chol = np.linalg.cholesky(_regularized(s, lam))
    z = solve_triangular(chol, x, lower=True, check_finite=False)
    return float(z @ z)


class RegularizedGram:
    """Cholesky factor of ``lam*I + m`` reused across several queries.

    The policies factor each cluster's matrix once per round and then ask
    for the ridge estimate and the widths of all K arms.
    """

    __slots__ = ("chol",)

    def __init__(self, m, lam):
        chol, info = dpotrf(m + lam * np.eye(m.shape[0]), lower=1, clean=1)
        if info != 0:
            raise np.linalg.LinAlgError(f"matrix is not positive definite (info={info})")
        self.chol = chol

    def solve(self, b):
        x, _ = dpotrs(self.chol, b, lower=1)
        return x

    def quad_forms(self, xs):
        """Row-wise ``x^T (lam*I + m)^{-1} x`` for a (K, d) array."""
        z, _ = dtrtrs(self.chol, np.ascontiguousarray(xs.T), lower=1)
        return np.einsum("ij,ij->j", z, z)


def jacobi_eigenvalues(s, tol=JACOBI_TOL, max_sweeps=JACOBI_MAX_SWEEPS, vectors=False):
    """Eigenvalues of a symmetric matrix by the cyclic Jacobi method.

    Sweeps over all off-diagonal pairs until the off-diagonal Frobenius norm
    drops below ``tol`` (relative to the matrix norm, with an absolute floor).
    Returns ascending eigenvalues, and the eigenvector matrix if asked.
    """
    a = np.array(s, dtype=float, copy=True)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if not np.allclose(a, a.T, rtol=0, atol=1e-12 * max(1.0, np.abs(a).max(initial=0))):
        raise ValueError("matrix is not symmetric")
    v = np.eye(n)
    scale = max(np.linalg.norm(a), 1.0)

    def off_norm(mat):
        return np.sqrt(np.sum((mat - np.diag(np.diag(mat))) ** 2))

    for _ in range(max_sweeps):
        if off_norm(a) <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                g = 100.0 * abs(apq)
                if abs(a[p, p]) + g == abs(a[p, p]) and abs(a[q, q]) + g == abs(a[q, q]):
                    # negligible at working precision
                    a[p, q] = a[q, p] = 0.0
                    continue
                h = float(a[q, q] - a[p, p])
                if abs(h) + g == abs(h):
                    t = float(apq) / h  # theta^2 would overflow; small-angle form
                else:
                    theta = h / (2.0 * float(apq))
                    t = math.copysign(1.0, theta) / (abs(theta) + math.hypot(theta, 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                sn = t * c
                # rotate rows/cols p, q
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - sn * aq
                a[:, q] = sn * ap + c * aq
                ap = a[p, :].copy()
                aq = a[q, :].copy()
                a[p, :] = c * ap - sn * aq
                a[q, :] = sn * ap + c * aq
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - sn * vq
                v[:, q] = sn * vp + c * vq
    else:
        if off_norm(a) > tol * scale:
            best = np.sort(np.diag(a))
            raise ConvergenceError(
                f"Jacobi did not converge in {max_sweeps} sweeps", best_estimate=best
            )
    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    if vectors:
        return w[order], v[:, order]
    return w[order]


def min_eigenvalue(s, **kwargs):
    """Smallest eigenvalue of a symmetric matrix (cyclic Jacobi)."""
    return float(jacobi_eigenvalues(s, **kwargs)[0])


def _top_eigvec(g, rng, max_iter, tol):
    n = g.shape[0]
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    converged = False
    for _ in range(max_iter):
        w = g @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            converged = True
            break
        w /= nw
        # sign-invariant change
        if min(np.linalg.norm(w - v), np.linalg.norm(w + v)) < tol:
            v = w
            converged = True
            break
        v = w
    return v, float(v @ g @ v), converged


def _complete_basis(q, n, rng):
    """Replace zero columns of ``q`` by unit vectors orthogonal to the rest."""
    q = q.copy()
    for j in range(q.shape[1]):
        if np.linalg.norm(q[:, j]) > 0.5:
            continue
        while True:
            c = rng.standard_normal(n)
            others = np.delete(q, j, axis=1)
            c -= others @ (others.T @ c)
            nc = np.linalg.norm(c)
            if nc > 1e-8:
                q[:, j] = c / nc
                break
    return q


def truncated_svd(r, k, max_iter=SVD_MAX_ITER, tol=SVD_TOL, seed=0):
    """Top-k singular triplets of ``r`` via power iteration with deflation.

    The Gram matrix of the shorter side is deflated one eigenvector at a
    time; a final Rayleigh-Ritz step on the recovered subspace (solved with
    Jacobi) sharpens nearly-degenerate pairs. Returns ``(left, sigma, right)``
    with shapes (u, k), (k,), (n, k).
    """
    r = np.asarray(r, dtype=float)
    if r.ndim != 2:
        raise ValueError("r must be a matrix")
    u, n = r.shape
    if not 1 <= k <= min(u, n):
        raise ValueError(f"k={k} out of range for a {u}x{n} matrix")
    rng = np.random.default_rng(seed)
    transpose = u < n
    a = r.T if transpose else r  # a is tall: rows >= cols
    g = a.T @ a
    g = (g + g.T) / 2.0
    work = g.copy()
    basis = np.zeros((g.shape[0], k))
    for j in range(k):
        v, lam, ok = _top_eigvec(work, rng, max_iter, tol)
        if not ok:
            log.warning("power iteration for component %d hit %d iterations", j, max_iter)
        # keep orthogonal to previous components against round-off
        v -= basis[:, :j] @ (basis[:, :j].T @ v)
        nv = np.linalg.norm(v)
        if nv < 1e-12 or lam <= 0:
            basis[:, j] = 0.0
        else:
            v /= nv
            basis[:, j] = v
            work = work - lam * np.outer(v, v)
    basis = _complete_basis(basis, g.shape[0], rng)
    small = basis.T @ g @ basis
    small = (small + small.T) / 2.0
    w, rot = jacobi_eigenvalues(small, vectors=True)
    order = np.argsort(-w, kind="stable")
    w, rot = w[order], rot[:, order]
    right = basis @ rot
    sigma = np.sqrt(np.clip(w, 0.0, None))
    left = np.zeros((a.shape[0], k))
    nonzero = sigma > 1e-12 * max(1.0, sigma.max(initial=0.0))
    left[:, nonzero] = (a @ right[:, nonzero]) / sigma[nonzero]
    left = _complete_basis(left, a.shape[0], rng)
    if transpose:
        return right, sigma, left
    return left, sigma, right
