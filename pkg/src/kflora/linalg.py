"""Dense linear-algebra kernels shared by the filter, the oracle and the baselines.

Everything operates on float64 numpy arrays: vectors are 1-D, matrices 2-D
row-major. The two filter-specific contractions (`row_scale`, `diag_of_triple`)
let the update run against a diagonal covariance without ever materializing
the n x n matrix.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_factor, cho_solve


class NotPositiveDefinite(Exception):
    """Symmetric solve failed even after jitter escalation."""


def row_scale(p: np.ndarray, ht: np.ndarray) -> np.ndarray:
    """Scale row i of `ht` by p[i].

    Equals diag(p) @ ht without forming the diagonal matrix; this is the
    row-by-row (transposed Khatri-Rao) product the gain computation needs.
    """
    p = np.asarray(p, dtype=np.float64)
    ht = np.asarray(ht, dtype=np.float64)
    if p.ndim != 1 or ht.ndim != 2:
        raise ValueError("row_scale expects a vector and a matrix")
    if p.shape[0] != ht.shape[0]:
        raise ValueError(f"row_scale: {p.shape[0]} scales vs {ht.shape[0]} rows")
    return p[:, None] * ht


def outer(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rank-1 outer product u v^T."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.ndim != 1 or v.ndim != 1:
        raise ValueError("outer expects two vectors")
    if u.shape[0] != v.shape[0]:
        raise ValueError(f"outer: lengths {u.shape[0]} vs {v.shape[0]}")
    return np.outer(u, v)


def diag_of_triple(k_gain: np.ndarray, h: np.ndarray, p: np.ndarray) -> np.ndarray:
    """diag(K @ H @ diag(p)) as a vector, in O(n*m).

    Component i is sum_j K[i,j] * H[j,i] * p[i]; this is the contraction the
    diagonal covariance update uses in place of the dense triple product.
    """
    k_gain = np.asarray(k_gain, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    n, m = k_gain.shape
    if h.shape != (m, n):
        raise ValueError(f"diag_of_triple: K is {k_gain.shape}, H is {h.shape}")
    if p.shape != (n,):
        raise ValueError(f"diag_of_triple: p has length {p.shape}, expected {n}")
    return np.einsum("ij,ji->i", k_gain, h) * p


def spd_solve(s: np.ndarray, b: np.ndarray, max_escalations: int = 3) -> np.ndarray:
    """Solve S X = B for symmetric positive (semi-)definite S via Cholesky.

    S is symmetrized as (S + S^T)/2 before factoring. If the factorization
    fails, a jitter eps * I with eps = 1e-8 * trace(S)/m (floored at 1e-12)
    is added and escalated by 10x at most `max_escalations` times; after that
    NotPositiveDefinite is raised. The jitter path is what keeps the gain
    solvable when the innovation covariance is singular along the probability
    simplex (softmax heads make that the common case, not the exception).

    Iterative refinement with extended-precision residuals follows the solve
    so the relative residual ||SX-B||/||B|| stays at or below 1e-10 even for
    condition numbers around 1e8 (plain float64 residuals plateau near
    eps * cond). Refinement cost scales with B's width; callers keep B
    narrow (the gain path solves against the m x m identity).
    """
    s = np.asarray(s, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValueError(f"spd_solve: S must be square, got {s.shape}")
    if b.shape[0] != s.shape[0]:
        raise ValueError(f"spd_solve: B has {b.shape[0]} rows, S is {s.shape[0]}x{s.shape[0]}")
    m = s.shape[0]
    s_sym = (s + s.T) * 0.5
    eps = max(1e-8 * float(np.trace(s_sym)) / m, 1e-12)
    jitter = 0.0
    for _ in range(max_escalations + 2):
        try:
            mat = s_sym if jitter == 0.0 else s_sym + jitter * np.eye(m)
            factor = cho_factor(mat, lower=True, check_finite=False)
            x = cho_solve(factor, b, check_finite=False)
            mat_ext = mat.astype(np.longdouble)
            b_ext = b.astype(np.longdouble)
            b_floor = max(float(np.linalg.norm(b)), 1e-300)
            for _ in range(3):
                r = (b_ext - mat_ext @ x.astype(np.longdouble)).astype(np.float64)
                residual = float(np.linalg.norm(r))
                if residual <= 1e-13 * b_floor:
                    break
                x += cho_solve(factor, r, check_finite=False)
            else:
                r = (b_ext - mat_ext @ x.astype(np.longdouble)).astype(np.float64)
                residual = float(np.linalg.norm(r))
            # a factorization of a numerically singular matrix can "succeed"
            # yet solve nothing; treat an unusable solution like a failure
            if residual > 1e-6 * b_floor or not np.isfinite(x).all():
                raise np.linalg.LinAlgError("solution failed the residual gate")
            return x
        except np.linalg.LinAlgError:
            jitter = eps if jitter == 0.0 else jitter * 10.0
    raise NotPositiveDefinite(
        f"{m}x{m} system not positive definite after jitter {jitter / 10.0:g}"
    )
