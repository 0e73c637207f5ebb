"""Shared randomized property suites.

Each check runs `cases` independently seeded instances; module tests call
them with the default and the acceptance gate re-runs them at >= 100 cases.
"""

from unittest import mock

import numpy as np

from kflora import kalman, metrics
from kflora.linalg import diag_of_triple, outer, row_scale


def check_row_scale_matches_dense(cases=100):
    for seed in range(cases):
        rng = np.random.default_rng(seed)
        n, m = int(rng.integers(1, 65)), int(rng.integers(1, 9))
        p = rng.normal(size=n)
        ht = rng.normal(size=(n, m))
        got = row_scale(p, ht)
        want = np.diag(p) @ ht
        assert np.all(np.abs(got - want) <= 1e-14 * np.maximum(1.0, np.abs(want)))


def check_diag_of_triple_matches_dense(cases=100):
    for seed in range(cases):
        rng = np.random.default_rng(seed)
        n, m = int(rng.integers(1, 65)), int(rng.integers(1, 9))
        k = rng.normal(size=(n, m))
        h = rng.normal(size=(m, n))
        p = rng.normal(size=n)
        got = diag_of_triple(k, h, p)
        want = np.diag(k @ h @ np.diag(p))
        assert np.all(np.abs(got - want) <= 1e-12 * np.maximum(1.0, np.abs(want)))


def check_outer_psd(cases=100):
    for seed in range(cases):
        rng = np.random.default_rng(seed)
        u = rng.normal(size=int(rng.integers(1, 9)))
        eigs = np.linalg.eigvalsh(outer(u, u))
        assert eigs.min() >= -1e-12 * float(u @ u)


def _random_ema_run(seed, method, steps=20):
    """Drive estimate_r with random residuals/jacobians; returns R history
    plus the per-step instantaneous estimates."""
    rng = np.random.default_rng(seed)
    n, m = int(rng.integers(1, 20)), int(rng.integers(1, 6))
    cfg = kalman.FilterConfig(beta=float(rng.uniform(0.05, 0.99)), r_method=method,
                              p0_method="constant", p0_value=0.1)
    state = kalman.init_state(rng.normal(size=n), m, cfg, rng)
    history, r_hats = [state.r.copy()], []
    for k in range(steps):
        residual = rng.normal(size=m)
        h = rng.normal(size=(m, n))
        pht, hph = kalman.innovation_terms(state.p_hat, h)
        r_hat = np.outer(residual, residual)
        if method == "ema_residual_plus_hph":
            r_hat = r_hat + hph
        r_new = kalman.estimate_r(state, residual, residual, hph=hph)
        state = kalman.KalmanState(state.theta, state.p_hat, r_new, k + 1, cfg)
        history.append(r_new.copy())
        r_hats.append(r_hat)
    return history, r_hats


def check_ema_r_psd_and_trace(cases=100):
    for seed in range(cases):
        method = ("ema_residual", "ema_residual_plus_hph")[seed % 2]
        history, r_hats = _random_ema_run(seed, method)
        for r_prev, r_new, r_hat in zip(history, history[1:], r_hats):
            tr = float(np.trace(r_new))
            assert np.allclose(r_new, r_new.T)
            assert np.linalg.eigvalsh(r_new).min() >= -1e-10 * max(tr, 1e-30)
            assert tr <= max(np.trace(r_prev), np.trace(r_hat)) + 1e-12 * max(tr, 1.0)


def check_p_never_increases(cases=100):
    for seed in range(cases):
        rng = np.random.default_rng(seed)
        n, m = int(rng.integers(1, 30)), int(rng.integers(1, 6))
        cfg = kalman.FilterConfig(r_method="ema_residual_plus_hph",
                                  p0_method="uniform", p0_value=0.5)
        state = kalman.init_state(rng.normal(size=n), m, cfg, rng)
        for _ in range(5):
            h = rng.normal(size=(m, n))
            residual = rng.normal(size=m)
            p_prior = state.p_hat.copy()
            pht, hph = kalman.innovation_terms(p_prior, h)
            r_new = kalman.estimate_r(state, residual, residual, hph=hph)
            state = kalman.KalmanState(state.theta, state.p_hat, r_new, state.k, cfg)
            gain = kalman.kalman_gain(p_prior, h, r_new, pht=pht, hph=hph)
            state = kalman.update(state, gain, residual, h, p_prior)
            assert np.all(state.p_hat <= p_prior + 1e-12)
            assert np.all(state.p_hat > 0)


def check_gain_solve_is_m_by_m(n=512, m=4):
    """Structural: whatever n is, the factored system is m x m."""
    rng = np.random.default_rng(0)
    p = rng.uniform(0.01, 1.0, n)
    h = rng.normal(size=(m, n))
    r = np.eye(m)
    seen = []
    real = kalman.spd_solve

    def spy(s, b, **kw):
        seen.append((s.shape, b.shape))
        return real(s, b, **kw)

    with mock.patch.object(kalman, "spd_solve", spy):
        gain = kalman.kalman_gain(p, h, r)
    assert gain.shape == (n, m)
    assert seen == [((m, m), (m, m))]


def check_metrics_recount(cases=100):
    for seed in range(cases):
        rng = np.random.default_rng(seed)
        m = int(rng.integers(2, 11))
        online = metrics.OnlineMetrics(n_classes=m)
        log = []
        for _ in range(int(rng.integers(1, 40))):
            pred = rng.dirichlet(np.ones(m))
            truth = int(rng.integers(0, m))
            y = np.zeros(m)
            y[truth] = 1.0
            online.record(pred, y, loss_l1=float(np.abs(pred - y).sum()))
            log.append((pred, truth))
            top1 = sum(int(np.argmax(p)) == t for p, t in log)
            top5 = sum(t in metrics.top_indices(p, min(5, m)) for p, t in log)
            assert online.acc_top1 == top1 / len(log)
            assert online.acc_top5 == top5 / len(log)
            assert online.top5_correct >= online.top1_correct
