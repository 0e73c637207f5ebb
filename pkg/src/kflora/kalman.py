"""Diagonal extended-Kalman recursion over the flat trainable vector.

The trainable parameters are the filter state; the transition is the
identity with zero process noise, so predict is a no-op and all the work is
in the update: an m x m innovation solve, a rank-m correction of theta, and
an elementwise contraction of the per-parameter variance vector. The
observation-noise covariance R starts at zero and is either fixed by rule
(identity, exponential decay, categorical) or tracked online as an
exponential moving average of residual outer products, optionally with the
innovation-induced term added.

One step touches the n x m product p * H^T exactly once: the gain and the
EMA variant that needs H P H^T share that intermediate, and HPH_EVALS counts
evaluations so tests can prove the sharing holds.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from . import engine
from .linalg import diag_of_triple, row_scale, spd_solve

R_METHODS = ("ema_residual", "ema_residual_plus_hph", "identity",
             "exp_decay_50", "categorical_diag", "fixed")
P0_METHODS = ("constant", "uniform")

CHECKPOINT_MAGIC = b"KFC1"
CHECKPOINT_VERSION = 1

# evaluation counter for the shared H (p * H^T) intermediate; single-writer
HPH_EVALS = 0


class DivergenceError(RuntimeError):
    """Non-finite value in the filter state; carries the failing step index."""

    def __init__(self, step_index: int, what: str):
        super().__init__(f"diverged at step {step_index}: {what}")
        self.step_index = step_index
        self.what = what


@dataclass(frozen=True)
class FilterConfig:
    beta: float = 0.95
    r_method: str = "ema_residual_plus_hph"
    p0_method: str = "uniform"
    p0_value: float = 0.2  # the constant c, or the uniform upper bound
    p_min: float = 1e-12

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must be in (0,1), got {self.beta}")
        if self.r_method not in R_METHODS:
            raise ValueError(f"unknown r_method {self.r_method!r}")
        if self.p0_method not in P0_METHODS:
            raise ValueError(f"unknown p0_method {self.p0_method!r}")
        if self.p0_value <= 0.0:
            raise ValueError("p0_value must be positive")


@dataclass
class KalmanState:
    theta: np.ndarray   # (n,)
    p_hat: np.ndarray   # (n,) posterior variances, all > 0
    r: np.ndarray       # (m, m) observation-noise estimate
    k: int
    config: FilterConfig

    @property
    def n(self) -> int:
        return self.theta.shape[0]

    @property
    def m(self) -> int:
        return self.r.shape[0]


def init_state(theta0: np.ndarray, m: int, config: FilterConfig, seed) -> KalmanState:
    """Fresh state: theta as given by the model init, p per the configured
    scheme, R at the zero matrix, step counter at zero.

    The uniform scheme draws i.i.d. U(0, upper_bound) and resamples any
    exact zeros so the implied diagonal covariance stays positive definite.
    """
    theta0 = np.asarray(theta0, dtype=np.float64)
    if theta0.ndim != 1:
        raise ValueError("theta0 must be a flat vector")
    if m < 1:
        raise ValueError("m must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = theta0.shape[0]
    if config.p0_method == "constant":
        p_hat = np.full(n, float(config.p0_value))
    else:
        p_hat = rng.uniform(0.0, config.p0_value, size=n)
        while np.any(p_hat <= 0.0):
            bad = p_hat <= 0.0
            p_hat[bad] = rng.uniform(0.0, config.p0_value, size=int(bad.sum()))
    return KalmanState(theta=theta0.copy(), p_hat=p_hat, r=np.zeros((m, m)),
                       k=0, config=config)


def predict(state: KalmanState) -> tuple[np.ndarray, np.ndarray]:
    """Prior (theta, p): the identity transition with zero process noise
    returns the previous posterior unchanged."""
    return state.theta, state.p_hat


def innovation_terms(p_prior: np.ndarray, h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(p * H^T, H (p * H^T)) computed once per step; bumps HPH_EVALS."""
    global HPH_EVALS
    HPH_EVALS += 1
    pht = row_scale(p_prior, h.T)
    return pht, h @ pht


def estimate_r(state: KalmanState, residual: np.ndarray, y_hat: np.ndarray,
               h: np.ndarray | None = None, p_prior: np.ndarray | None = None,
               hph: np.ndarray | None = None) -> np.ndarray:
    """Next observation-noise estimate under the configured method.

    EMA methods blend the previous estimate with the residual outer product
    (plus H (p * H^T) for the variant that models the update-induced change);
    the literature baselines set R directly. The result is symmetrized.
    For the "+hph" method pass the precomputed hph from innovation_terms;
    recomputing it here would double the step's n x m work.
    """
    cfg = state.config
    m = state.m
    if cfg.r_method == "identity":
        return np.eye(m)
    if cfg.r_method == "exp_decay_50":
        return np.eye(m) * float(np.exp(-state.k / 50.0))
    if cfg.r_method == "categorical_diag":
        r = np.diag(y_hat) - np.outer(y_hat, y_hat)
        return (r + r.T) * 0.5
    if cfg.r_method == "fixed":
        return state.r.copy()
    r_hat = np.outer(residual, residual)
    if cfg.r_method == "ema_residual_plus_hph":
        if hph is None:
            if h is None or p_prior is None:
                raise ValueError("ema_residual_plus_hph needs hph or (h, p_prior)")
            _, hph = innovation_terms(p_prior, h)
        r_hat = r_hat + hph
    r = cfg.beta * state.r + (1.0 - cfg.beta) * r_hat
    return (r + r.T) * 0.5


def kalman_gain(p_prior: np.ndarray, h: np.ndarray, r: np.ndarray,
                pht: np.ndarray | None = None,
                hph: np.ndarray | None = None) -> np.ndarray:
    """K = (p * H^T) (H (p * H^T) + R)^{-1}.

    The inverse is realized as an m x m solve against the identity and then
    applied to the n x m factor; the factored system stays m x m no matter
    how large n is."""
    if pht is None or hph is None:
        pht, hph = innovation_terms(p_prior, h)
    s = hph + r
    s_inv = spd_solve(s, np.eye(s.shape[0]))
    return pht @ s_inv


def update(state: KalmanState, k_gain: np.ndarray, residual: np.ndarray,
           h: np.ndarray, p_prior: np.ndarray) -> KalmanState:
    """Posterior state: theta moves along the gain, each variance contracts
    by its own gain-times-jacobian diagonal entry, and the step counter
    advances. state.r must already hold this step's noise estimate.

    Variances are floored at config.p_min: the diagonal contraction can land
    at tiny negative values under floating-point cancellation and the filter
    needs strictly positive variances to continue.
    """
    theta = state.theta + k_gain @ residual
    p_new = p_prior - diag_of_triple(k_gain, h, p_prior)
    p_new = np.maximum(p_new, state.config.p_min)
    if not np.isfinite(theta).all():
        raise DivergenceError(state.k, "theta")
    if not np.isfinite(p_new).all():
        raise DivergenceError(state.k, "p_hat")
    if not np.isfinite(state.r).all():
        raise DivergenceError(state.k, "R")
    return replace(state, theta=theta, p_hat=p_new, k=state.k + 1)


def step(state: KalmanState, model: engine.ModelGraph, x, y):
    """One full filter step on a stream sample.

    Order: predict, forward + jacobian at the prior, noise estimate, gain,
    update. Returns (new_state, prediction, diagnostics); raises
    DivergenceError as soon as any state entry goes non-finite.
    """
    theta_prior, p_prior = predict(state)
    try:
        y_hat = engine.forward(model, x, theta_prior)
        h = engine.jacobian(model, x, theta_prior)
    except engine.NonFiniteActivation as exc:
        raise DivergenceError(state.k, "model output") from exc
    y = np.asarray(y, dtype=np.float64)
    residual = y - y_hat
    pht, hph = innovation_terms(p_prior, h)
    r_new = estimate_r(state, residual, y_hat, hph=hph)
    state = replace(state, r=r_new)
    k_gain = kalman_gain(p_prior, h, r_new, pht=pht, hph=hph)
    state = update(state, k_gain, residual, h, p_prior)
    diag = {
        "loss_l1": float(np.abs(residual).sum()),
        "loss_ce": _cross_entropy(y_hat, y) if model.classification else float("nan"),
        "residual_norm": float(np.linalg.norm(residual)),
        "trace_r": float(np.trace(r_new)),
        "min_p": float(state.p_hat.min()) if state.n else float("nan"),
        "max_p": float(state.p_hat.max()) if state.n else float("nan"),
    }
    return state, y_hat, diag


def _cross_entropy(y_hat: np.ndarray, y_onehot: np.ndarray) -> float:
    idx = int(np.argmax(y_onehot))
    return float(-np.log(max(float(y_hat[idx]), 1e-12)))


def save_checkpoint(state: KalmanState, path) -> None:
    """Binary snapshot: fixed header then theta, p, R as float64 LE.

    Header: magic "KFC1", u32 version, u64 n, u32 m, u64 k, f64 beta,
    u8 r_method index, u8 p0_method index, f64 p0_value. Round-trip is
    bit-exact.
    """
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQIQ", CHECKPOINT_VERSION, state.n, state.m, state.k))
        fh.write(struct.pack("<dBBd", state.config.beta,
                             R_METHODS.index(state.config.r_method),
                             P0_METHODS.index(state.config.p0_method),
                             state.config.p0_value))
        fh.write(state.theta.astype("<f8").tobytes())
        fh.write(state.p_hat.astype("<f8").tobytes())
        fh.write(state.r.astype("<f8").tobytes())


def load_checkpoint(path) -> KalmanState:
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint")
        version, n, m, k = struct.unpack("<IQIQ", fh.read(24))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        beta, r_idx, p0_idx, p0_value = struct.unpack("<dBBd", fh.read(18))
        payload = fh.read(8 * (2 * n + m * m))
        if len(payload) != 8 * (2 * n + m * m):
            raise ValueError(f"{path}: truncated checkpoint")
    flat = np.frombuffer(payload, dtype="<f8")
    config = FilterConfig(beta=beta, r_method=R_METHODS[r_idx],
                          p0_method=P0_METHODS[p0_idx], p0_value=p0_value)
    return KalmanState(theta=flat[:n].copy(), p_hat=flat[n:2 * n].copy(),
                       r=flat[2 * n:].reshape(m, m).copy(), k=k, config=config)
