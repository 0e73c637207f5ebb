"""Low-rank adapters: a frozen weight matrix wrapped with trainable factors.

An adapter keeps the pre-trained matrix W0 (d x q) frozen and adds the
product B @ A, with A (r x q) drawn from a zero-mean Gaussian and B (d x r)
starting at exactly zero so the wrapped layer initially computes the same
function as the frozen one. Convolution kernels are wrapped through their
(out_channels x everything_else) flattening and act on im2col patches.

Flat-vector layout (stable across runs, needed for checkpoints): the
adapter's entries are packed as A row-major first, then B row-major.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class LoRAAdapter:
    w0: np.ndarray  # (d, q), frozen
    a: np.ndarray   # (r, q), trainable
    b: np.ndarray   # (d, r), trainable
    rank: int
    sigma: float
    kernel_shape: tuple | None = None  # set when wrapping a conv kernel

    @property
    def shape(self) -> tuple[int, int]:
        return self.w0.shape

    @property
    def trainable_count(self) -> int:
        d, q = self.w0.shape
        return self.rank * (d + q)


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def wrap(w0: np.ndarray, rank: int, sigma: float, rng_seed) -> LoRAAdapter:
    """Wrap a frozen d x q matrix with rank-r factors.

    A is i.i.d. N(0, sigma^2) from the seeded generator; B is zero, so the
    adapted output equals the frozen output until the first update.
    """
    w0 = np.asarray(w0, dtype=np.float64)
    if w0.ndim != 2:
        raise ValueError("wrap expects a 2-D weight matrix")
    d, q = w0.shape
    if not 1 <= rank <= min(d, q):
        raise ValueError(f"rank {rank} out of range for {d}x{q} matrix")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    rng = _as_rng(rng_seed)
    a = rng.normal(0.0, sigma, size=(rank, q))
    b = np.zeros((d, rank))
    return LoRAAdapter(w0=w0, a=a, b=b, rank=rank, sigma=sigma)


def conv_wrap(kernel: np.ndarray, rank: int, sigma: float, rng_seed) -> LoRAAdapter:
    """Wrap a (out_ch, in_ch, kh, kw) convolution kernel.

    The kernel is flattened to d = out_ch rows by q = in_ch*kh*kw columns;
    the adapter then acts on the im2col form of the convolution.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 4:
        raise ValueError("conv_wrap expects a 4-axis kernel")
    out_ch = kernel.shape[0]
    adapter = wrap(kernel.reshape(out_ch, -1), rank, sigma, rng_seed)
    return replace(adapter, kernel_shape=kernel.shape)


def apply(adapter: LoRAAdapter, x: np.ndarray) -> np.ndarray:
    """W0 x + B (A x) as two small matvecs; B@A is never materialized."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (adapter.w0.shape[1],):
        raise ValueError(f"apply: input {x.shape} vs matrix {adapter.w0.shape}")
    return adapter.w0 @ x + adapter.b @ (adapter.a @ x)


def apply_cols(adapter: LoRAAdapter, cols: np.ndarray) -> np.ndarray:
    """Adapter applied to an im2col patch matrix (q x L), column-wise."""
    cols = np.asarray(cols, dtype=np.float64)
    if cols.ndim != 2 or cols.shape[0] != adapter.w0.shape[1]:
        raise ValueError(f"apply_cols: patches {cols.shape} vs matrix {adapter.w0.shape}")
    return adapter.w0 @ cols + adapter.b @ (adapter.a @ cols)


def pack(adapter: LoRAAdapter) -> np.ndarray:
    """Adapter entries as one flat vector: A row-major, then B row-major."""
    return np.concatenate([adapter.a.ravel(), adapter.b.ravel()])


def unpack(adapter: LoRAAdapter, flat: np.ndarray) -> LoRAAdapter:
    """New adapter with A and B taken from a flat vector in pack() layout."""
    flat = np.asarray(flat, dtype=np.float64)
    d, q = adapter.w0.shape
    r = adapter.rank
    if flat.shape != (adapter.trainable_count,):
        raise ValueError(f"unpack: got {flat.shape}, expected ({adapter.trainable_count},)")
    a = flat[: r * q].reshape(r, q).copy()
    b = flat[r * q:].reshape(d, r).copy()
    return replace(adapter, a=a, b=b)
