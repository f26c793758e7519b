"""A small numpy neural-network stack.

Layers operate on batch-first arrays. Images are ``(batch, channels, height,
width)``; vectors are ``(batch, features)``. Each layer caches what it needs
during :meth:`forward` and returns the input gradient from :meth:`backward`,
accumulating parameter gradients into ``layer.grads``.

Network arithmetic is float32 by default. :meth:`Network.astype` produces a
float64 copy that is used for finite-difference gradient checks.
"""
from __future__ import annotations

import copy
import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    pass


class NotForwardedError(RuntimeError):
    pass


class Layer:
    kind = "layer"

    def __init__(self):
        self.params = []
        self.grads = []
        self._cache = None

    def output_shape(self, in_shape):
        return in_shape

    def init(self, in_shape, rng, dtype):
        pass

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def _cached(self):
        if self._cache is None:
            raise NotForwardedError(f"{self.kind}: backward called before forward")
        return self._cache

    def zero_grad(self):
        for g in self.grads:
            g[...] = 0


def glorot_uniform(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Dense(Layer):
    kind = "dense"

    def __init__(self, units):
        super().__init__()
        self.units = int(units)

    def output_shape(self, in_shape):
        if len(in_shape) != 1:
            raise ShapeError(f"dense expects a flat input, got {in_shape}")
        return (self.units,)

    def init(self, in_shape, rng, dtype):
        fan_in = in_shape[0]
        w = glorot_uniform(rng, (self.units, fan_in), fan_in, self.units, dtype)
        self.params = [w, np.zeros(self.units, dtype=dtype)]
        self.grads = [np.zeros_like(p) for p in self.params]

    def forward(self, x):
        w, b = self.params
        self._cache = x
        return x @ w.T + b

    def backward(self, dout):
        x = self._cached()
        w, _ = self.params
        self.grads[0] += dout.T @ x
        self.grads[1] += dout.sum(axis=0)
        return dout @ w


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        mask = x > 0
        self._cache = mask
        return np.where(mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, dout):
        return dout * self._cached()


class Conv2D(Layer):
    """Valid (unpadded) 2-D convolution via im2col."""

    kind = "conv2d"

    def __init__(self, channels, kernel, stride=1):
        super().__init__()
        self.channels = int(channels)
        self.kernel = int(kernel)
        self.stride = int(stride)

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"conv2d expects (C, H, W), got {in_shape}")
        c, h, w = in_shape
        k, s = self.kernel, self.stride
        if h < k or w < k:
            raise ShapeError(f"conv2d kernel {k} larger than input {in_shape}")
        return (self.channels, (h - k) // s + 1, (w - k) // s + 1)

    def init(self, in_shape, rng, dtype):
        c = in_shape[0]
        k = self.kernel
        fan_in = c * k * k
        fan_out = self.channels * k * k
        w = glorot_uniform(rng, (self.channels, c, k, k), fan_in, fan_out, dtype)
        self.params = [w, np.zeros(self.channels, dtype=dtype)]
        self.grads = [np.zeros_like(p) for p in self.params]

    def forward(self, x):
        w, b = self.params
        bsz, c, h, wd = x.shape
        k, s = self.kernel, self.stride
        ho, wo = (h - k) // s + 1, (wd - k) // s + 1
        xt = x.transpose(1, 0, 2, 3)
        cols = np.empty((c, k, k, bsz, ho, wo), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                cols[:, i, j] = xt[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s]
        cols = cols.reshape(c * k * k, bsz * ho * wo)
        out = w.reshape(self.channels, -1) @ cols + b[:, None]
        self._cache = (cols, x.shape, ho, wo)
        return out.reshape(self.channels, bsz, ho, wo).transpose(1, 0, 2, 3)

    def backward(self, dout, need_dx=True):
        cols, xshape, ho, wo = self._cached()
        w, _ = self.params
        bsz, c, h, wd = xshape
        k, s = self.kernel, self.stride
        d = dout.transpose(1, 0, 2, 3).reshape(self.channels, -1)
        self.grads[0] += (d @ cols.T).reshape(w.shape)
        self.grads[1] += d.sum(axis=1)
        if not need_dx:
            return None
        dcols = (w.reshape(self.channels, -1).T @ d).reshape(c, k, k, bsz, ho, wo)
        dxt = np.zeros((c, bsz, xshape[2], xshape[3]), dtype=dout.dtype)
        for i in range(k):
            for j in range(k):
                dxt[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += dcols[:, i, j]
        return dxt.transpose(1, 0, 2, 3)


class MaxPool2D(Layer):
    """Non-overlapping max pooling; trailing rows/columns are dropped."""

    kind = "maxpool2d"

    def __init__(self, size=2):
        super().__init__()
        self.size = int(size)

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"maxpool2d expects (C, H, W), got {in_shape}")
        c, h, w = in_shape
        p = self.size
        if h < p or w < p:
            raise ShapeError(f"maxpool2d window {p} larger than input {in_shape}")
        return (c, h // p, w // p)

    def forward(self, x):
        p = self.size
        bsz, c, h, w = x.shape
        ho, wo = h // p, w // p
        xc = x[:, :, : ho * p, : wo * p]
        blocks = xc.reshape(bsz, c, ho, p, wo, p).transpose(0, 1, 2, 4, 3, 5).reshape(bsz, c, ho, wo, p * p)
        idx = blocks.argmax(axis=-1)
        self._cache = (idx, x.shape)
        return np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(self, dout):
        idx, xshape = self._cached()
        p = self.size
        bsz, c, h, w = xshape
        ho, wo = h // p, w // p
        blocks = np.zeros((bsz, c, ho, wo, p * p), dtype=dout.dtype)
        np.put_along_axis(blocks, idx[..., None], dout[..., None], axis=-1)
        dx = np.zeros(xshape, dtype=dout.dtype)
        dx[:, :, : ho * p, : wo * p] = (
            blocks.reshape(bsz, c, ho, wo, p, p).transpose(0, 1, 2, 4, 3, 5).reshape(bsz, c, ho * p, wo * p)
        )
        return dx


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._cached())


class ConcatAux(Layer):
    """Appends the network's auxiliary vector input to a flat activation."""

    kind = "concat"

    def __init__(self):
        super().__init__()
        self.aux_dim = 0
        self.aux_grad = None

    def output_shape(self, in_shape):
        if len(in_shape) != 1:
            raise ShapeError(f"concat expects a flat input, got {in_shape}")
        return (in_shape[0] + self.aux_dim,)

    def forward(self, x, aux=None):
        if aux is None:
            raise ShapeError("concat layer needs an auxiliary input")
        self._cache = x.shape[1]
        return np.concatenate([x, aux.astype(x.dtype, copy=False)], axis=1)

    def backward(self, dout):
        n = self._cached()
        self.aux_grad = dout[:, n:]
        return dout[:, :n]


LAYER_KINDS = {
    "dense": Dense,
    "relu": ReLU,
    "conv": Conv2D,
    "pool": MaxPool2D,
    "flatten": Flatten,
    "concat": ConcatAux,
}


def build_layer(spec):
    kind, *args = spec
    try:
        cls = LAYER_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown layer kind {kind!r}") from None
    return cls(*args)


class Network:
    """Ordered stack of layers with an optional auxiliary-input injection.

    Parameters
    ----------
    config : list of tuple
        Layer specs such as ``("conv", 8, 5)``, ``("relu",)``, ``("pool", 2)``,
        ``("flatten",)``, ``("concat",)`` and ``("dense", 128)``.
    input_shape : tuple
        Per-sample input shape.
    aux_dim : int
        Length of the auxiliary vector consumed by the ``concat`` layer.
    seed : int
        Seed for Glorot-uniform initialization.
    zero_last : bool
        Zero the final dense layer so a fresh network outputs exactly zero.
    """

    def __init__(self, config, input_shape, aux_dim=0, seed=0, zero_last=True, dtype=np.float32):
        self.config = [tuple(s) for s in config]
        self.input_shape = tuple(int(d) for d in input_shape)
        self.aux_dim = int(aux_dim)
        self.dtype = np.dtype(dtype)
        self.layers = [build_layer(s) for s in self.config]
        self.shapes = [self.input_shape]
        rng = np.random.default_rng(seed)
        shape = self.input_shape
        n_concat = 0
        for i, layer in enumerate(self.layers):
            if isinstance(layer, ConcatAux):
                layer.aux_dim = self.aux_dim
                n_concat += 1
            try:
                layer.init(shape, rng, self.dtype)
                shape = layer.output_shape(shape)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from None
            self.shapes.append(shape)
        if n_concat > 1:
            raise ValueError("at most one concat layer is supported")
        if self.aux_dim and not n_concat:
            raise ValueError("aux_dim given but the network has no concat layer")
        if zero_last:
            for layer in reversed(self.layers):
                if isinstance(layer, Dense):
                    for p in layer.params:
                        p[...] = 0
                    break
        self._forwarded = False

    @property
    def output_shape(self):
        return self.shapes[-1]

    @property
    def params(self):
        return [p for layer in self.layers for p in layer.params]

    @property
    def grads(self):
        return [g for layer in self.layers for g in layer.grads]

    def num_params(self):
        return int(sum(p.size for p in self.params))

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def forward(self, x, aux=None):
        x = np.asarray(x)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"layer 0 ({self.layers[0].kind}): expected input {self.input_shape}, got {x.shape[1:]}")
        x = x.astype(self.dtype, copy=False)
        if self.aux_dim:
            if aux is None:
                raise ShapeError(f"network expects an auxiliary input of length {self.aux_dim}")
            aux = np.asarray(aux)
            if aux.shape != (x.shape[0], self.aux_dim):
                raise ShapeError(f"auxiliary input: expected {(x.shape[0], self.aux_dim)}, got {aux.shape}")
        for layer in self.layers:
            x = layer.forward(x, aux) if isinstance(layer, ConcatAux) else layer.forward(x)
        self._forwarded = True
        return x

    __call__ = forward

    def backward(self, dout, input_grad=True):
        """Accumulate parameter gradients; return ``(input_grad, aux_grad)``.

        With ``input_grad=False`` a leading convolution skips its input
        gradient and ``None`` is returned in its place.
        """
        if not self._forwarded:
            raise NotForwardedError("backward called before forward")
        dout = np.asarray(dout, dtype=self.dtype)
        aux_grad = None
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            if i == 0 and not input_grad and isinstance(layer, Conv2D):
                dout = layer.backward(dout, need_dx=False)
            else:
                dout = layer.backward(dout)
            if isinstance(layer, ConcatAux):
                aux_grad = layer.aux_grad
        return dout, aux_grad

    def astype(self, dtype):
        net = copy.deepcopy(self)
        net.dtype = np.dtype(dtype)
        for layer in net.layers:
            layer.params = [p.astype(dtype) for p in layer.params]
            layer.grads = [g.astype(dtype) for g in layer.grads]
            layer._cache = None
        net._forwarded = False
        return net

    def copy(self):
        net = self.astype(self.dtype)
        return net

    def checksum(self):
        h = hashlib.sha256()
        for p in self.params:
            h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()


def mse_loss(pred, target):
    """Mean squared error over all entries and its gradient wrt ``pred``."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: shapes differ {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff)), (2.0 / diff.size) * diff


@dataclass
class AdamState:
    shapes: list
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, **kw):
        st = cls([p.shape for p in params], **kw)
        st.m = [np.zeros_like(p) for p in params]
        st.v = [np.zeros_like(p) for p in params]
        return st


def adam_step(state, params, grads):
    """One bias-corrected Adam update, applied in place to ``params``."""
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ShapeError("adam_step: parameter/gradient/state counts differ")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != state.m[i].shape or g.shape != p.shape:
            raise ShapeError(f"adam_step: tensor {i} shape {p.shape} vs grad {g.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"adam_step: non-finite gradient in tensor {i}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        p -= (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.dtype, copy=False)
    return params


# ---------------------------------------------------------------------------
# Weight files
# ---------------------------------------------------------------------------

MAGIC = b"DFNW"
VERSION = 1


class WeightFormatError(ValueError):
    pass


class BadMagicError(WeightFormatError):
    pass


class VersionMismatchError(WeightFormatError):
    pass


class TruncatedWeightsError(WeightFormatError):
    pass


class WeightShapeError(WeightFormatError):
    pass


def save_weights(net):
    """Serialize parameters: magic, version, count, then rank/dims/float32 data."""
    out = [MAGIC, struct.pack("<II", VERSION, len(net.params))]
    for p in net.params:
        out.append(struct.pack(f"<I{p.ndim}I", p.ndim, *p.shape))
        out.append(np.ascontiguousarray(p, dtype="<f4").tobytes())
    return b"".join(out)


def read_weight_tensors(data):
    data = bytes(data)
    if data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise TruncatedWeightsError(f"weights truncated at byte {pos} (need {n} more)")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise VersionMismatchError(f"weights version {version}, expected {VERSION}")
    tensors = []
    for _ in range(count):
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims)
        tensors.append(arr)
    if pos != len(data):
        raise WeightFormatError(f"{len(data) - pos} trailing bytes after the last tensor")
    return tensors


def load_weights(data, template):
    """Return a copy of ``template`` holding the weights serialized in ``data``."""
    tensors = read_weight_tensors(data)
    params = template.params
    if len(tensors) != len(params):
        raise WeightShapeError(f"file has {len(tensors)} tensors, network expects {len(params)}")
    for i, (t, p) in enumerate(zip(tensors, params)):
        if t.shape != p.shape:
            raise WeightShapeError(f"tensor {i}: file shape {t.shape}, network expects {p.shape}")
    net = template.copy()
    for p, t in zip(net.params, tensors):
        p[...] = t.astype(net.dtype)
    return net
