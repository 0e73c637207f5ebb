"""Online evaluation: cumulative accuracy, windowed loss, divergence check.

Average online accuracy is the running fraction of correct predictions up to
the current step (Top-1 and Top-5, argmax ties broken toward the lowest
index). The moving loss averages the most recent `window` losses, falling
back to the plain mean while fewer than `window` steps have been seen.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

CSV_COLUMNS = ("step", "loss_l1", "loss_ce", "moving_loss", "acc_top1",
               "acc_top5", "trace_r", "min_p", "max_p")


def l1_loss(y_hat: np.ndarray, y: np.ndarray) -> float:
    return float(np.abs(np.asarray(y_hat) - np.asarray(y)).sum())


def cross_entropy(y_hat: np.ndarray, y_onehot: np.ndarray) -> float:
    idx = int(np.argmax(y_onehot))
    return float(-np.log(max(float(y_hat[idx]), 1e-12)))


def top_indices(pred: np.ndarray, count: int) -> np.ndarray:
    """Indices of the `count` largest entries, ties toward the lower index."""
    pred = np.asarray(pred)
    order = np.lexsort((np.arange(pred.shape[0]), -pred))
    return order[:count]


class MovingLoss:
    """Ring buffer of the last `window` losses."""

    def __init__(self, window: int = 1000):
        if window < 1:
            raise ValueError("window must be >= 1")
        self.window = window
        self.buf: deque[float] = deque(maxlen=window)
        self._sum = 0.0

    def add(self, value: float) -> None:
        if len(self.buf) == self.window:
            self._sum -= self.buf[0]
        self.buf.append(float(value))
        self._sum += float(value)

    def mean(self) -> float:
        if not self.buf:
            raise ValueError("no losses recorded yet")
        return self._sum / len(self.buf)


class OnlineMetrics:
    """Single-writer accumulator for one run."""

    def __init__(self, n_classes: int, window: int = 1000):
        self.m = n_classes
        self.k = 0
        self.top1_correct = 0
        self.top5_correct = 0
        self.moving = MovingLoss(window)

    def record(self, pred: np.ndarray, y_onehot: np.ndarray,
               loss_l1: float, loss_ce: float = float("nan")) -> dict:
        """Score one prediction and append its loss; returns the row values."""
        pred = np.asarray(pred, dtype=np.float64)
        y_onehot = np.asarray(y_onehot, dtype=np.float64)
        if pred.shape != (self.m,) or y_onehot.shape != (self.m,):
            raise ValueError(f"expected {self.m}-vectors, got {pred.shape} / {y_onehot.shape}")
        if abs(pred.sum() - 1.0) > 1e-6:
            raise ValueError(f"prediction does not sum to 1 (got {pred.sum()!r})")
        truth = int(np.argmax(y_onehot))
        if truth == int(np.argmax(pred)):
            self.top1_correct += 1
        if truth in top_indices(pred, min(5, self.m)):
            self.top5_correct += 1
        self.k += 1
        self.moving.add(loss_l1)
        return {"step": self.k - 1, "loss_l1": loss_l1, "loss_ce": loss_ce,
                "moving_loss": self.moving.mean(), "acc_top1": self.acc_top1,
                "acc_top5": self.acc_top5}

    @property
    def acc_top1(self) -> float:
        return self.top1_correct / self.k if self.k else 0.0

    @property
    def acc_top5(self) -> float:
        return self.top5_correct / self.k if self.k else 0.0

    def moving_loss(self) -> float:
        return self.moving.mean()


@dataclass(frozen=True)
class RunSummary:
    """What a finished (or aborted) run reports back to the harness."""

    steps: int
    acc_top1: float
    acc_top5: float
    final_moving_loss: float
    nonfinite_step: int | None = None  # step index where the state blew up

    @property
    def diverged_nonfinite(self) -> bool:
        return self.nonfinite_step is not None


def detect_divergence(summary: RunSummary, n_classes: int,
                      margin: float = 0.05, min_steps: int = 100) -> bool:
    """A probe run counts as diverged if its state went non-finite or its
    average online accuracy never cleared chance level plus a margin."""
    if summary.diverged_nonfinite:
        return True
    if summary.steps < min_steps:
        raise ValueError(f"need >= {min_steps} steps to judge, got {summary.steps}")
    return summary.acc_top1 < 1.0 / n_classes + margin
