import numpy as np
import pytest

from kflora import engine
from kflora.baselines import (AdaGradState, AdamWState, adagrad_step, adamw_step,
                              grad_from_jacobian)


def reference_adam(thetas, grads, lr_fn, b1=0.9, b2=0.999, eps=1e-8):
    """Plain Adam with bias correction, written straight from the published
    recurrence as the second implementation path."""
    theta = thetas
    m = v = 0.0 * theta
    out = []
    for t, g in enumerate(grads):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** (t + 1))
        v_hat = v / (1 - b2 ** (t + 1))
        theta = theta - lr_fn(t) * m_hat / (np.sqrt(v_hat) + eps)
        out.append(theta.copy())
    return out


class TestGradFromJacobian:
    def test_perfect_prediction_gives_zero(self):
        rng = np.random.default_rng(0)
        h = rng.normal(size=(4, 7))
        y = np.eye(4)[1]
        grad = grad_from_jacobian(h, y, y.copy())
        assert np.linalg.norm(grad) <= 1e-8

    def test_linear_scalar_squared_loss(self):
        # model y = w x + b: d/dtheta (y - t)^2 = 2 (y - t) [x, 1]
        x = np.array([0.7, -1.2, 0.4])
        h = np.concatenate([x, [1.0]])[None, :]
        y, y_hat = np.array([0.5]), np.array([2.0])
        grad = grad_from_jacobian(h, y, y_hat, loss="squared")
        np.testing.assert_allclose(grad, 2.0 * 1.5 * np.concatenate([x, [1.0]]),
                                   rtol=1e-14)

    def test_matches_loss_finite_differences(self):
        model = engine.build_model(
            engine.parse_layers("dense:6 tanh dense:4 softmax"), (5,), seed=1,
            parameterization="full")
        rng = np.random.default_rng(2)
        theta = model.initial_theta()
        x = rng.uniform(-1, 1, 5)
        truth = 2
        y = np.eye(4)[truth]

        def loss(th):
            z = engine.forward(model, x, th, logits=True)
            p = np.exp(z - z.max()) / np.exp(z - z.max()).sum()
            return -np.log(p[truth])

        h = engine.jacobian(model, x, theta, logits=True)
        z = engine.forward(model, x, theta, logits=True)
        y_hat = np.exp(z - z.max()) / np.exp(z - z.max()).sum()
        grad = grad_from_jacobian(h, y, y_hat)
        fd = np.zeros_like(theta)
        for i in range(theta.size):
            delta = 1e-5 * max(1.0, abs(theta[i]))
            up, down = theta.copy(), theta.copy()
            up[i] += delta
            down[i] -= delta
            fd[i] = (loss(up) - loss(down)) / (2 * delta)
        assert np.max(np.abs(grad - fd) / np.maximum(1.0, np.abs(grad))) <= 1e-4

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            grad_from_jacobian(np.ones((3, 4)), np.ones(2), np.ones(2))


class TestAdamW:
    def test_zero_grad_zero_decay_is_identity(self):
        state = AdamWState(n=3, weight_decay=0.0, total_steps=5)
        theta = np.array([1.0, -2.0, 0.5])
        np.testing.assert_array_equal(adamw_step(state, theta, np.zeros(3)), theta)

    def test_linear_schedule_endpoint(self):
        state = AdamWState(n=1, lr0=0.1, total_steps=10)
        assert state.lr_at(9) == pytest.approx(0.1 / 10)
        assert state.lr_at(0) == 0.1

    def test_scripted_three_step_trace(self):
        # frozen values from a hand trace of the decoupled recurrence
        # (theta0=1, lr0=0.1, T=10, wd=0.01, grads 0.5, -0.3, 0.2)
        state = AdamWState(n=1, lr0=0.1, weight_decay=0.01, total_steps=10)
        theta = np.array([1.0])
        expected = [0.899000002, 0.8809560792457977, 0.8524570998616865]
        for g, want in zip([0.5, -0.3, 0.2], expected):
            theta = adamw_step(state, theta, np.array([g]))
            np.testing.assert_allclose(theta, [want], rtol=1e-12)

    def test_schedule_exhaustion_raises(self):
        state = AdamWState(n=1, total_steps=1)
        theta = adamw_step(state, np.zeros(1), np.ones(1))
        with pytest.raises(ValueError):
            adamw_step(state, theta, np.ones(1))

    def test_no_decay_equals_plain_adam(self):
        rng = np.random.default_rng(3)
        grads = [rng.normal(size=6) for _ in range(25)]
        state = AdamWState(n=6, lr0=0.05, weight_decay=0.0, total_steps=25)
        theta = rng.normal(size=6)
        ours = []
        t = theta.copy()
        for g in grads:
            t = adamw_step(state, t, g)
            ours.append(t.copy())
        ref = reference_adam(theta, grads, lr_fn=lambda t: 0.05 * (1 - t / 25))
        for a, b in zip(ours, ref):
            np.testing.assert_allclose(a, b, rtol=1e-13)


class TestAdaGrad:
    def test_zero_grad_is_identity(self):
        state = AdaGradState(n=2)
        theta = np.array([1.0, 2.0])
        np.testing.assert_array_equal(adagrad_step(state, theta, np.zeros(2)), theta)

    def test_first_step_is_normalized_sign(self):
        state = AdaGradState(n=1, lr=0.001)
        theta = adagrad_step(state, np.zeros(1), np.array([0.5]))
        np.testing.assert_allclose(theta, [-0.001], rtol=1e-6)

    def test_scripted_three_step_trace(self):
        # frozen values: theta0=1, lr=0.001, grads 0.5, -0.3, 0.2
        state = AdaGradState(n=1, lr=0.001)
        theta = np.array([1.0])
        expected = [0.9990000000002, 0.9995144957555392, 0.9991900529133303]
        for g, want in zip([0.5, -0.3, 0.2], expected):
            theta = adagrad_step(state, theta, np.array([g]))
            np.testing.assert_allclose(theta, [want], rtol=1e-12)

    def test_deterministic(self):
        rng = np.random.default_rng(4)
        grads = [rng.normal(size=3) for _ in range(10)]
        outs = []
        for _ in range(2):
            state = AdaGradState(n=3)
            theta = np.ones(3)
            for g in grads:
                theta = adagrad_step(state, theta, g)
            outs.append(theta.tobytes())
        assert outs[0] == outs[1]
