"""Gradient-based comparison optimizers: AdamW and AdaGrad.

Both act on the same flat trainable vector as the filter, with the gradient
assembled from the model jacobian so every optimizer sees the identical
parameterization. AdamW follows the decoupled-weight-decay recurrence with
bias correction and a linear learning-rate decay over a fixed horizon.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def grad_from_jacobian(h: np.ndarray, y: np.ndarray, y_hat: np.ndarray,
                       loss: str = "ce_softmax") -> np.ndarray:
    """Scalar-loss gradient w.r.t. the flat vector, from a jacobian.

    loss="ce_softmax": cross-entropy with a softmax head; `h` must be the
    jacobian of the pre-softmax logits and `y_hat` the post-softmax
    probabilities, giving grad = H^T (y_hat - y).
    loss="squared": grad of ||y_hat - y||^2 with `h` the output jacobian,
    i.e. 2 H^T (y_hat - y).
    """
    h = np.asarray(h, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] != y.shape[0] or y.shape != y_hat.shape:
        raise ValueError(f"grad_from_jacobian: H {h.shape}, y {y.shape}, y_hat {y_hat.shape}")
    if loss == "ce_softmax":
        return h.T @ (y_hat - y)
    if loss == "squared":
        return 2.0 * (h.T @ (y_hat - y))
    raise ValueError(f"unknown loss {loss!r}")


@dataclass
class AdamWState:
    n: int
    lr0: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    total_steps: int = 1
    t: int = 0
    m1: np.ndarray = field(init=False)
    m2: np.ndarray = field(init=False)

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("beta1/beta2 must be in [0,1)")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        self.m1 = np.zeros(self.n)
        self.m2 = np.zeros(self.n)

    def lr_at(self, t: int) -> float:
        return self.lr0 * (1.0 - t / self.total_steps)


def adamw_step(state: AdamWState, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Decoupled-weight-decay Adam step with bias correction and the linear
    schedule lr_t = lr0 * (1 - t/total_steps)."""
    if state.t >= state.total_steps:
        raise ValueError(f"schedule exhausted after {state.total_steps} steps")
    lr = state.lr_at(state.t)
    state.t += 1
    state.m1 = state.beta1 * state.m1 + (1.0 - state.beta1) * grad
    state.m2 = state.beta2 * state.m2 + (1.0 - state.beta2) * grad * grad
    m1_hat = state.m1 / (1.0 - state.beta1 ** state.t)
    m2_hat = state.m2 / (1.0 - state.beta2 ** state.t)
    return theta - lr * (m1_hat / (np.sqrt(m2_hat) + state.eps)
                         + state.weight_decay * theta)


@dataclass
class AdaGradState:
    n: int
    lr: float = 1e-3
    eps: float = 1e-10
    accum: np.ndarray = field(init=False)

    def __post_init__(self):
        self.accum = np.zeros(self.n)


def adagrad_step(state: AdaGradState, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Accumulate squared gradients, scale the step by their root."""
    state.accum = state.accum + grad * grad
    return theta - state.lr * grad / (np.sqrt(state.accum) + state.eps)
