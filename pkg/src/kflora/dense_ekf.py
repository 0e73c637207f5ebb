"""Reference full-covariance EKF over the same model interface.

This is the correctness oracle for the diagonal filter: it carries the whole
n x n covariance P and applies the textbook gain/update, so a single step
from P = diag(p) must match the diagonal recursion exactly. It is also what
reproduces the empirical observation that P drifts toward a (block-)diagonal
shape during training. Desk-scale only: n is capped because P is quadratic.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import engine
from .linalg import spd_solve

DENSE_CAP = 2000


@dataclass
class DenseState:
    theta: np.ndarray  # (n,)
    p: np.ndarray      # (n, n) symmetric
    r: np.ndarray      # (m, m)
    k: int

    @property
    def n(self) -> int:
        return self.theta.shape[0]


def random_spd(n: int, trace: float, rng: np.random.Generator) -> np.ndarray:
    """Dense SPD matrix A A^T / n rescaled so its trace matches `trace`."""
    a = rng.normal(size=(n, n))
    p = a @ a.T / n
    return p * (trace / np.trace(p))


def init_dense_state(theta0: np.ndarray, m: int, p0) -> DenseState:
    """p0 is either a variance vector (diagonal start) or a full matrix."""
    theta0 = np.asarray(theta0, dtype=np.float64)
    n = theta0.shape[0]
    if n > DENSE_CAP:
        raise ValueError(f"dense oracle capped at {DENSE_CAP} parameters, got {n}")
    p0 = np.asarray(p0, dtype=np.float64)
    p = np.diag(p0) if p0.ndim == 1 else p0.copy()
    if p.shape != (n, n):
        raise ValueError(f"P has shape {p.shape}, expected ({n},{n})")
    return DenseState(theta=theta0.copy(), p=p, r=np.zeros((m, m)), k=0)


def estimate_r_dense(r_prev: np.ndarray, residual: np.ndarray, y_hat: np.ndarray,
                     hph: np.ndarray, k: int, r_method: str, beta: float) -> np.ndarray:
    """Same noise-estimation menu as the diagonal filter, with the dense
    H P H^T term. Kept separate on purpose: the oracle must not lean on the
    code it is checking."""
    m = residual.shape[0]
    if r_method == "identity":
        return np.eye(m)
    if r_method == "exp_decay_50":
        return np.eye(m) * float(np.exp(-k / 50.0))
    if r_method == "categorical_diag":
        r = np.diag(y_hat) - np.outer(y_hat, y_hat)
        return (r + r.T) * 0.5
    if r_method == "fixed":
        return r_prev.copy()
    r_hat = np.outer(residual, residual)
    if r_method == "ema_residual_plus_hph":
        r_hat = r_hat + hph
    elif r_method != "ema_residual":
        raise ValueError(f"unknown r_method {r_method!r}")
    r = beta * r_prev + (1.0 - beta) * r_hat
    return (r + r.T) * 0.5


def dense_update(theta: np.ndarray, p: np.ndarray, h: np.ndarray,
                 residual: np.ndarray, r: np.ndarray):
    """Textbook EKF update: K = P H^T (H P H^T + R)^{-1}, theta += K residual,
    P <- P - K H P, re-symmetrized."""
    pht = p @ h.T
    s = h @ pht + r
    k_gain = pht @ spd_solve(s, np.eye(s.shape[0]))
    theta_new = theta + k_gain @ residual
    p_new = p - k_gain @ pht.T
    p_new = (p_new + p_new.T) * 0.5
    return theta_new, p_new, k_gain


def dense_step(state: DenseState, model: engine.ModelGraph, x, y,
               r_method: str = "ema_residual_plus_hph", beta: float = 0.95):
    """One full-covariance step on a stream sample; mirrors the diagonal
    filter's order (predict is the identity, noise estimate before gain)."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = engine.forward(model, x, state.theta)
    h = engine.jacobian(model, x, state.theta)
    residual = y - y_hat
    hph = h @ state.p @ h.T
    r_new = estimate_r_dense(state.r, residual, y_hat, hph, state.k, r_method, beta)
    theta_new, p_new, _ = dense_update(state.theta, state.p, h, residual, r_new)
    if not (np.isfinite(theta_new).all() and np.isfinite(p_new).all()):
        raise FloatingPointError(f"dense oracle diverged at step {state.k}")
    new = replace(state, theta=theta_new, p=p_new, r=r_new, k=state.k + 1)
    return new, y_hat, {"residual_norm": float(np.linalg.norm(residual))}


def off_diagonal_mass(p: np.ndarray) -> float:
    """Relative Frobenius mass of the off-diagonal part:
    ||P - diag(P)||_F / ||P||_F, or 0 for the zero matrix."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise ValueError("off_diagonal_mass expects a square matrix")
    total = float(np.linalg.norm(p))
    if total == 0.0:
        return 0.0
    off = p - np.diag(np.diag(p))
    return float(np.linalg.norm(off)) / total
