"""Small differentiable feed-forward engine with exact jacobians.

Supports dense layers, stride-1 2-D convolution, relu/tanh, softmax, average
pooling and flatten — enough for LeNet-style networks and small MLPs, which
is the scale everything here runs at. Each parameterized layer is either
fully trainable, frozen, or frozen-with-low-rank-adapter; trainable entries
live in one flat float64 vector shared by the whole model, and each layer
owns a disjoint (offset, length) slice of it.

The jacobian of the m model outputs with respect to the flat vector is exact
(reverse accumulation, not finite differences): a single backward sweep
carries all m output seed rows as a leading batch axis, so the cost is one
backprop with batch m rather than m separate passes.

Convolution runs on im2col patch matrices; the backward-to-input scatter is
a precomputed sparse matrix, which keeps the sweep allocation-friendly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import lora

WEIGHT_MAGIC = b"KFW1"

INIT_SCHEMES = ("xavier_uniform", "xavier_normal", "kaiming_uniform", "kaiming_normal")
PARAM_MODES = ("full", "frozen", "lora")


class ShapeMismatch(ValueError):
    pass


class NonFiniteActivation(FloatingPointError):
    """Model output contained inf/nan; upstream state has diverged."""


def init_weight(shape: tuple[int, int], scheme: str, rng: np.random.Generator,
                receptive: int = 1) -> np.ndarray:
    """Draw a (d, q) weight matrix under one of the four standard schemes.

    `receptive` is the kernel footprint (kh*kw) so conv fan-out follows the
    out_channels * footprint convention; dense layers pass 1.
    """
    d, q = shape
    fan_in = q
    fan_out = d * receptive
    if scheme == "xavier_uniform":
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=shape)
    if scheme == "xavier_normal":
        return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=shape)
    if scheme == "kaiming_uniform":
        return rng.uniform(-np.sqrt(6.0 / fan_in), np.sqrt(6.0 / fan_in), size=shape)
    if scheme == "kaiming_normal":
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    raise ValueError(f"unknown init scheme {scheme!r}")


class Layer:
    """Base layer. Subclasses fill in shapes at bind time."""

    has_params = False
    name = ""
    kind = ""

    def __init__(self):
        self.in_shape: tuple = ()
        self.out_shape: tuple = ()
        self.mode = "frozen"
        self.offset = 0
        self.length = 0

    def bind(self, in_shape, needs_input_grad):
        self.in_shape = tuple(in_shape)
        self.out_shape = self.infer_out_shape(in_shape)
        return self.out_shape

    def infer_out_shape(self, in_shape):
        raise NotImplementedError

    def init_params(self, scheme, rng, base=None):
        """Return the layer's initial trainable slice (may be empty)."""
        return np.zeros(0)

    def forward(self, x, sl):
        raise NotImplementedError

    def backward(self, g, cache, sl):
        raise NotImplementedError

    def param_jacobian(self, g, cache, sl, out):
        """Write the (m, length) jacobian block for this layer's slice into
        `out`, a strided view of the full jacobian (avoids temporaries)."""
        raise NotImplementedError


class Dense(Layer):
    has_params = True

    def __init__(self, out_dim, rank=0, sigma=0.01):
        super().__init__()
        self.out_dim = int(out_dim)
        self.rank = rank
        self.sigma = sigma
        self.w0 = None
        self.b0 = None

    def infer_out_shape(self, in_shape):
        if len(in_shape) != 1:
            raise ShapeMismatch(f"{self.name}: dense needs a flat input, got {in_shape}")
        return (self.out_dim,)

    @property
    def q(self):
        return self.in_shape[0]

    def init_params(self, scheme, rng, base=None):
        d, q = self.out_dim, self.q
        if base is not None:
            w, b = base
            if w.shape != (d, q) or b.shape != (d,):
                raise ShapeMismatch(f"{self.name}: base weights {w.shape} vs ({d},{q})")
        else:
            w = init_weight((d, q), scheme, rng)
            b = np.zeros(d)
        if self.mode == "full":
            self.length = d * q + d
            return np.concatenate([w.ravel(), b])
        self.w0 = np.ascontiguousarray(w, dtype=np.float64)
        self.b0 = np.ascontiguousarray(b, dtype=np.float64)
        if self.mode == "frozen":
            self.length = 0
            return np.zeros(0)
        adapter = lora.wrap(self.w0, self.rank, self.sigma, rng)
        self.length = adapter.trainable_count
        return lora.pack(adapter)

    def _factors(self, sl):
        d, q, r = self.out_dim, self.q, self.rank
        return sl[: r * q].reshape(r, q), sl[r * q:].reshape(d, r)

    def forward(self, x, sl):
        d, q = self.out_dim, self.q
        if self.mode == "full":
            w = sl[: d * q].reshape(d, q)
            return w @ x + sl[d * q:], (x, None)
        if self.mode == "frozen":
            return self.w0 @ x + self.b0, (x, None)
        a, b = self._factors(sl)
        ax = a @ x
        return self.w0 @ x + self.b0 + b @ ax, (x, ax)

    def backward(self, g, cache, sl):
        d, q = self.out_dim, self.q
        if self.mode == "full":
            return g @ sl[: d * q].reshape(d, q)
        if self.mode == "frozen":
            return g @ self.w0
        a, b = self._factors(sl)
        return g @ self.w0 + (g @ b) @ a

    def param_jacobian(self, g, cache, sl, out):
        x, ax = cache
        m = g.shape[0]
        d, q = self.out_dim, self.q
        if self.mode == "full":
            np.multiply(g[:, :, None], x[None, None, :],
                        out=out[:, :d * q].reshape(m, d, q))
            out[:, d * q:] = g
            return
        r = self.rank
        np.multiply((g @ self._factors(sl)[1])[:, :, None], x[None, None, :],
                    out=out[:, :r * q].reshape(m, r, q))
        np.multiply(g[:, :, None], ax[None, None, :],
                    out=out[:, r * q:].reshape(m, d, r))


class Conv2D(Layer):
    """Stride-1 2-D convolution (cross-correlation) via im2col."""

    has_params = True

    def __init__(self, out_channels, ksize, pad=0, rank=0, sigma=0.01):
        super().__init__()
        self.out_channels = int(out_channels)
        self.ksize = int(ksize)
        self.pad = int(pad)
        self.rank = rank
        self.sigma = sigma
        self.w0 = None  # flattened (O, q)
        self.b0 = None
        self._gather = None
        self._scatter_t = None  # (n_padded, q*L) csr, built only if input grads needed

    def infer_out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeMismatch(f"{self.name}: conv needs (C,H,W) input, got {in_shape}")
        c, h, w = in_shape
        k, p = self.ksize, self.pad
        ho, wo = h + 2 * p - k + 1, w + 2 * p - k + 1
        if ho < 1 or wo < 1:
            raise ShapeMismatch(f"{self.name}: kernel {k} too large for input {in_shape}")
        return (self.out_channels, ho, wo)

    @property
    def q(self):
        c = self.in_shape[0]
        return c * self.ksize * self.ksize

    def bind(self, in_shape, needs_input_grad):
        out = super().bind(in_shape, needs_input_grad)
        c, h, w = self.in_shape
        k, p = self.ksize, self.pad
        hp, wp = h + 2 * p, w + 2 * p
        _, ho, wo = out
        # gather index (q, L) into the flattened padded input
        ci, ki, kj = np.meshgrid(np.arange(c), np.arange(k), np.arange(k), indexing="ij")
        oi, oj = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
        rows = (ci * hp + ki).reshape(-1, 1) * wp + kj.reshape(-1, 1)  # base offsets (q,1)
        offs = (oi * wp + oj).reshape(1, -1)  # (1, L)
        self._gather = (rows + offs).astype(np.intp)
        if needs_input_grad:
            ql = self._gather.size
            scatter = sp.csr_matrix(
                (np.ones(ql), (np.arange(ql), self._gather.ravel())),
                shape=(ql, c * hp * wp),
            )
            self._scatter_t = scatter.T.tocsr()
        return out

    def init_params(self, scheme, rng, base=None):
        o, k, c = self.out_channels, self.ksize, self.in_shape[0]
        if base is not None:
            kern, b = base
            if kern.shape != (o, c, k, k) or b.shape != (o,):
                raise ShapeMismatch(f"{self.name}: base kernel {kern.shape} vs ({o},{c},{k},{k})")
        else:
            kern = init_weight((o, c * k * k), scheme, rng, receptive=k * k).reshape(o, c, k, k)
            b = np.zeros(o)
        if self.mode == "full":
            self.length = o * self.q + o
            return np.concatenate([kern.ravel(), b])
        self.b0 = np.ascontiguousarray(b, dtype=np.float64)
        if self.mode == "frozen":
            self.w0 = np.ascontiguousarray(kern.reshape(o, -1), dtype=np.float64)
            self.length = 0
            return np.zeros(0)
        adapter = lora.conv_wrap(np.asarray(kern, dtype=np.float64), self.rank, self.sigma, rng)
        self.w0 = adapter.w0
        self.length = adapter.trainable_count
        return lora.pack(adapter)

    def _factors(self, sl):
        o, q, r = self.out_channels, self.q, self.rank
        return sl[: r * q].reshape(r, q), sl[r * q:].reshape(o, r)

    def _cols(self, x):
        p = self.pad
        xp = np.pad(x, ((0, 0), (p, p), (p, p))) if p else x
        return xp.reshape(-1)[self._gather]

    def forward(self, x, sl):
        o, q = self.out_channels, self.q
        cols = self._cols(x)
        if self.mode == "full":
            kern = sl[: o * q].reshape(o, q)
            z = kern @ cols + sl[o * q:][:, None]
            ax = None
        elif self.mode == "frozen":
            z = self.w0 @ cols + self.b0[:, None]
            ax = None
        else:
            a, b = self._factors(sl)
            ax = a @ cols
            z = self.w0 @ cols + self.b0[:, None] + b @ ax
        return z.reshape(self.out_shape), (cols, ax)

    def backward(self, g, cache, sl):
        o, q = self.out_channels, self.q
        m = g.shape[0]
        gz = g.reshape(m, o, -1)
        if self.mode == "full":
            kern_t = sl[: o * q].reshape(o, q).T
            dcols = np.matmul(kern_t[None], gz)
        elif self.mode == "frozen":
            dcols = np.matmul(self.w0.T[None], gz)
        else:
            a, b = self._factors(sl)
            dcols = np.matmul(self.w0.T[None], gz) + np.matmul(a.T[None], np.matmul(b.T[None], gz))
        dxp = (self._scatter_t @ dcols.reshape(m, -1).T).T
        c, h, w = self.in_shape
        p = self.pad
        dxp = dxp.reshape(m, c, h + 2 * p, w + 2 * p)
        if p:
            dxp = dxp[:, :, p:p + h, p:p + w]
        return np.ascontiguousarray(dxp)

    def param_jacobian(self, g, cache, sl, out):
        cols, ax = cache
        o, q = self.out_channels, self.q
        m = g.shape[0]
        gz = g.reshape(m, o, -1)
        if self.mode == "full":
            np.matmul(gz, cols.T, out=out[:, :o * q].reshape(m, o, q))
            np.sum(gz, axis=2, out=out[:, o * q:])
            return
        a, b = self._factors(sl)
        r = self.rank
        np.matmul(np.matmul(b.T[None], gz), cols.T,
                  out=out[:, :r * q].reshape(m, r, q))
        np.matmul(gz, ax.T, out=out[:, r * q:].reshape(m, o, r))


class ReLU(Layer):
    def infer_out_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x, sl):
        return np.maximum(x, 0.0), (x > 0)

    def backward(self, g, cache, sl):
        return g * cache


class Tanh(Layer):
    def infer_out_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x, sl):
        y = np.tanh(x)
        return y, y

    def backward(self, g, cache, sl):
        return g * (1.0 - cache * cache)


class Softmax(Layer):
    def infer_out_shape(self, in_shape):
        if len(in_shape) != 1:
            raise ShapeMismatch("softmax needs a flat input")
        return tuple(in_shape)

    def forward(self, x, sl):
        z = x - x.max()
        e = np.exp(z)
        y = e / e.sum()
        return y, y

    def backward(self, g, cache, sl):
        y = cache
        return (g - (g * y).sum(axis=1, keepdims=True)) * y


class AvgPool(Layer):
    def __init__(self, k):
        super().__init__()
        self.k = int(k)

    def infer_out_shape(self, in_shape):
        c, h, w = in_shape
        if h % self.k or w % self.k:
            raise ShapeMismatch(f"pool {self.k} does not tile {in_shape}")
        return (c, h // self.k, w // self.k)

    def forward(self, x, sl):
        c, ho, wo = self.out_shape
        k = self.k
        return x.reshape(c, ho, k, wo, k).mean(axis=(2, 4)), None

    def backward(self, g, cache, sl):
        k = self.k
        return np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)


class Flatten(Layer):
    def infer_out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, sl):
        return x.reshape(-1), None

    def backward(self, g, cache, sl):
        return g.reshape((g.shape[0],) + self.in_shape)


def parse_layers(text: str) -> list[Layer]:
    """Build layer objects from a compact stack description.

    Tokens: conv:<out_ch>:<ksize>:<pad>, dense:<out>, relu, tanh, softmax,
    pool:<k>, flatten. Example: "conv:6:5:2 tanh pool:2 flatten dense:10 softmax".
    """
    layers: list[Layer] = []
    for tok in text.split():
        parts = tok.split(":")
        kind = parts[0]
        args = [int(a) for a in parts[1:]]
        if kind == "conv":
            layers.append(Conv2D(args[0], args[1], args[2] if len(args) > 2 else 0))
        elif kind == "dense":
            layers.append(Dense(args[0]))
        elif kind == "relu":
            layers.append(ReLU())
        elif kind == "tanh":
            layers.append(Tanh())
        elif kind == "softmax":
            layers.append(Softmax())
        elif kind == "pool":
            layers.append(AvgPool(args[0]))
        elif kind == "flatten":
            layers.append(Flatten())
        else:
            raise ValueError(f"unknown layer token {tok!r}")
    return layers


class ModelGraph:
    """Immutable stack of bound layers plus the flat trainable-vector layout."""

    def __init__(self, layers, input_shape, n_trainable, theta0):
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.n_trainable = n_trainable
        self.output_dim = layers[-1].out_shape[0]
        self.classification = isinstance(layers[-1], Softmax)
        self._theta0 = theta0

    def initial_theta(self) -> np.ndarray:
        return self._theta0.copy()

    def active_layers(self, logits: bool):
        if logits and self.classification:
            return self.layers[:-1]
        return self.layers

    def trainable_slices(self):
        return [(ly.name, ly.offset, ly.length) for ly in self.layers if ly.length]


def build_model(layers, input_shape, weight_init="xavier_uniform", seed=0,
                parameterization="full", lora_targets=(), lora_rank=4,
                lora_sigma=0.01, full_targets=(), base_weights=None) -> ModelGraph:
    """Bind shapes, initialize parameters and lay out the flat vector.

    parameterization: "full" trains every weight/bias, "frozen" trains
    nothing, "lora" freezes everything except rank-`lora_rank` adapters on
    the layers matched by `lora_targets` and plain full training on the
    layers matched by `full_targets` (e.g. a classifier head that must move
    with the adapters). Targets are layer kinds ("conv"/"dense") or generated
    names like "conv2". `base_weights` is a list of (weight, bias) pairs
    consumed by parameterized layers in order, e.g. from load_weights().
    """
    if weight_init not in INIT_SCHEMES:
        raise ValueError(f"unknown init scheme {weight_init!r}")
    if parameterization not in PARAM_MODES:
        raise ValueError(f"unknown parameterization {parameterization!r}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    counts: dict[str, int] = {}
    for ly in layers:
        kind = {"Conv2D": "conv", "Dense": "dense", "ReLU": "relu", "Tanh": "tanh",
                "Softmax": "softmax", "AvgPool": "pool", "Flatten": "flatten"}[type(ly).__name__]
        counts[kind] = counts.get(kind, 0) + 1
        ly.name = f"{kind}{counts[kind]}"
        ly.kind = kind
    base_iter = iter(base_weights) if base_weights is not None else None
    shape = tuple(input_shape)
    pieces = []
    offset = 0
    for i, ly in enumerate(layers):
        if ly.has_params:
            if parameterization == "lora" and (ly.kind in lora_targets or ly.name in lora_targets):
                ly.mode = "lora"
                ly.rank = lora_rank
                ly.sigma = lora_sigma
            elif parameterization == "full" or (
                    parameterization == "lora"
                    and (ly.kind in full_targets or ly.name in full_targets)):
                ly.mode = "full"
            else:
                ly.mode = "frozen"
        shape = ly.bind(shape, needs_input_grad=(i > 0))
        base = next(base_iter) if (base_iter is not None and ly.has_params) else None
        piece = ly.init_params(weight_init, rng, base=base) if ly.has_params else np.zeros(0)
        ly.offset = offset
        offset += ly.length
        pieces.append(piece)
    if len(shape) != 1:
        raise ShapeMismatch(f"model must end with a flat output, got {shape}")
    theta0 = np.concatenate(pieces) if pieces else np.zeros(0)
    return ModelGraph(layers, input_shape, offset, theta0)


def _prepare_input(model, x):
    x = np.asarray(x, dtype=np.float64)
    want = int(np.prod(model.input_shape))
    if x.size != want:
        raise ShapeMismatch(f"input has {x.size} entries, model expects {want}")
    return x.reshape(model.input_shape)


def _check_theta(model, theta):
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (model.n_trainable,):
        raise ShapeMismatch(f"theta has shape {theta.shape}, expected ({model.n_trainable},)")
    return theta


def _forward_all(model, x, theta, layers):
    caches = []
    y = x
    for ly in layers:
        sl = theta[ly.offset:ly.offset + ly.length] if ly.length else None
        y, cache = ly.forward(y, sl)
        caches.append(cache)
    return y, caches


def forward(model: ModelGraph, x, theta, logits: bool = False) -> np.ndarray:
    """Evaluate the model; with logits=True a trailing softmax is skipped."""
    x = _prepare_input(model, x)
    theta = _check_theta(model, theta)
    y, _ = _forward_all(model, x, theta, model.active_layers(logits))
    if not np.isfinite(y).all():
        raise NonFiniteActivation("non-finite model output")
    return y


def jacobian(model: ModelGraph, x, theta, logits: bool = False) -> np.ndarray:
    """Exact (m x n_trainable) jacobian of the outputs w.r.t. the flat vector."""
    x = _prepare_input(model, x)
    theta = _check_theta(model, theta)
    layers = model.active_layers(logits)
    y, caches = _forward_all(model, x, theta, layers)
    m = y.shape[0]
    # trainable slices tile [0, n), so every column gets written below
    h = np.empty((m, model.n_trainable))
    g = np.eye(m)
    for i in range(len(layers) - 1, -1, -1):
        ly = layers[i]
        sl = theta[ly.offset:ly.offset + ly.length] if ly.length else None
        if ly.length:
            ly.param_jacobian(g, caches[i], sl, h[:, ly.offset:ly.offset + ly.length])
        if i > 0:
            g = ly.backward(g, caches[i], sl)
    return h


def finite_diff_jacobian(model: ModelGraph, x, theta, step: float,
                         logits: bool = False) -> np.ndarray:
    """Central-difference jacobian estimate, column by column.

    Per-parameter step is step * max(1, |theta_i|). Test oracle only; the
    analytic path never goes through here.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    theta = _check_theta(model, theta).copy()
    m = forward(model, x, theta, logits=logits).shape[0]
    h = np.zeros((m, theta.size))
    for i in range(theta.size):
        delta = step * max(1.0, abs(theta[i]))
        orig = theta[i]
        theta[i] = orig + delta
        hi = forward(model, x, theta, logits=logits)
        theta[i] = orig - delta
        lo = forward(model, x, theta, logits=logits)
        theta[i] = orig
        h[:, i] = (hi - lo) / (2.0 * delta)
    return h


def model_weights(model: ModelGraph, theta) -> list[tuple[np.ndarray, np.ndarray]]:
    """Current (weight, bias) pair per parameterized layer.

    Full layers read from theta; frozen and adapter layers report their base
    weights (adapters are persisted through optimizer checkpoints instead).
    """
    theta = _check_theta(model, theta)
    out = []
    for ly in model.layers:
        if not ly.has_params:
            continue
        if ly.mode == "full":
            sl = theta[ly.offset:ly.offset + ly.length]
            if isinstance(ly, Conv2D):
                o, c, k = ly.out_channels, ly.in_shape[0], ly.ksize
                out.append((sl[: o * ly.q].reshape(o, c, k, k).copy(), sl[o * ly.q:].copy()))
            else:
                d, q = ly.out_dim, ly.q
                out.append((sl[: d * q].reshape(d, q).copy(), sl[d * q:].copy()))
        elif isinstance(ly, Conv2D):
            o, c, k = ly.out_channels, ly.in_shape[0], ly.ksize
            out.append((ly.w0.reshape(o, c, k, k).copy(), ly.b0.copy()))
        else:
            out.append((ly.w0.copy(), ly.b0.copy()))
    return out


def save_weights(path, pairs) -> None:
    """Write (weight, bias) pairs as the flat little-endian binary format.

    Layout: magic "KFW1", u32 array count, then per array a u32 ndim and u32
    dims, then every payload as float64 little-endian in order.
    """
    arrays = []
    for w, b in pairs:
        arrays.append(np.asarray(w, dtype=np.float64))
        arrays.append(np.asarray(b, dtype=np.float64))
    with open(path, "wb") as fh:
        fh.write(WEIGHT_MAGIC)
        fh.write(struct.pack("<I", len(arrays)))
        for arr in arrays:
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        for arr in arrays:
            fh.write(arr.astype("<f8").tobytes())


def load_weights(path) -> list[tuple[np.ndarray, np.ndarray]]:
    """Read a weight file back into (weight, bias) pairs."""
    with open(path, "rb") as fh:
        if fh.read(4) != WEIGHT_MAGIC:
            raise ValueError(f"{path}: not a weight file")
        (count,) = struct.unpack("<I", fh.read(4))
        shapes = []
        for _ in range(count):
            (ndim,) = struct.unpack("<I", fh.read(4))
            shapes.append(struct.unpack(f"<{ndim}I", fh.read(4 * ndim)))
        arrays = []
        for shape in shapes:
            n = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * n)
            if len(buf) != 8 * n:
                raise ValueError(f"{path}: truncated weight payload")
            arrays.append(np.frombuffer(buf, dtype="<f8").reshape(shape).copy())
    if len(arrays) % 2:
        raise ValueError(f"{path}: expected (weight, bias) pairs")
    return [(arrays[i], arrays[i + 1]) for i in range(0, len(arrays), 2)]
