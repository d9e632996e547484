"""Minimal dense feedforward network engine with exact reverse-mode gradients.

Everything is float64 numpy. A network is a stack of affine layers with one
of four activations (rectifier, sigmoid, identity, softmax); softmax is only
legal as the final layer. Dropout uses the inverted convention: activations
are scaled by 1/(1-p) at train time so inference is a pure pass-through.

Parameters live in a ParameterStore that pairs every value matrix with a
gradient buffer of identical shape. A frozen store still propagates input
gradients through its network but discards parameter gradients, which is how
the fixed adult acoustic model participates in adversarial training.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("rectifier", "sigmoid", "identity", "softmax")

# floor for log arguments inside losses and for probability clamping
PROB_FLOOR = 1e-12

PARAM_MAGIC = b"SAPM"
PARAM_VERSION = 1


class ShapeError(ValueError):
    """Tensor shapes do not match the network contract."""


class NonFiniteError(ValueError):
    """An input or result contains NaN or Inf."""


class FrozenStoreError(RuntimeError):
    """An optimizer step touched a frozen parameter store."""


class FormatError(ValueError):
    """A serialized container is malformed."""


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "rectifier"
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError("layer dimensions must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.activation == "softmax" and self.dropout_rate > 0:
            raise ValueError("dropout on a softmax layer would break row normalization")


class ParameterStore:
    """Named value matrices with paired gradient buffers and a freeze flag."""

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}
        self._velocity: dict[str, np.ndarray] = {}
        self.frozen = False

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self._values:
            raise ValueError(f"duplicate parameter {name!r}")
        value = np.ascontiguousarray(value, dtype=np.float64)
        if value.ndim != 2:
            raise ShapeError(f"parameter {name!r} must be a 2-D matrix")
        self._values[name] = value
        self._grads[name] = np.zeros_like(value)

    def names(self):
        return list(self._values)

    def value(self, name: str) -> np.ndarray:
        return self._values[name]

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def zero_grads(self) -> None:
        for g in self._grads.values():
            g[...] = 0.0

    def num_params(self) -> int:
        return sum(v.size for v in self._values.values())

    def copy_values(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self._values.items()}

    def serialize(self) -> bytes:
        """Flat binary container: magic "SAPM", version u32, then per-entry
        records (name length u32, name bytes, rows u32, cols u32, f64 LE values)."""
        out = [PARAM_MAGIC, struct.pack("<I", PARAM_VERSION)]
        for name, v in self._values.items():
            nb = name.encode("utf-8")
            out.append(struct.pack("<I", len(nb)))
            out.append(nb)
            out.append(struct.pack("<II", v.shape[0], v.shape[1]))
            out.append(v.astype("<f8").tobytes())
        return b"".join(out)

    @classmethod
    def deserialize(cls, blob: bytes) -> "ParameterStore":
        if blob[:4] != PARAM_MAGIC:
            raise FormatError("bad magic: not a parameter container")
        (version,) = struct.unpack_from("<I", blob, 4)
        if version != PARAM_VERSION:
            raise FormatError(f"unsupported parameter container version {version}")
        store = cls()
        off = 8
        while off < len(blob):
            if off + 4 > len(blob):
                raise FormatError("truncated parameter container")
            (nlen,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off : off + nlen].decode("utf-8")
            off += nlen
            if off + 8 > len(blob):
                raise FormatError("truncated parameter container")
            rows, cols = struct.unpack_from("<II", blob, off)
            off += 8
            nbytes = 8 * rows * cols
            if off + nbytes > len(blob):
                raise FormatError("truncated parameter container")
            v = np.frombuffer(blob[off : off + nbytes], dtype="<f8").reshape(rows, cols)
            off += nbytes
            store.add(name, v.copy())
        return store


@dataclass
class _LayerCache:
    x: np.ndarray           # layer input
    z: np.ndarray           # pre-activation
    h: np.ndarray           # post-activation (pre-dropout)
    mask: np.ndarray | None # dropout keep-mask scaled by 1/(1-p), or None


@dataclass
class ForwardTrace:
    caches: list[_LayerCache]
    output: np.ndarray
    train_mode: bool
    consumed: bool = field(default=False)


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def glorot_uniform(rng: np.random.Generator, in_dim: int, out_dim: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(-limit, limit, size=(in_dim, out_dim))


class Network:
    """A dense feedforward stack over a ParameterStore.

    Parameter names are "layer{i}.W" and "layer{i}.b" (bias stored 1 x out).
    """

    def __init__(self, layers: list[LayerSpec], store: ParameterStore | None = None,
                 rng: np.random.Generator | None = None, zero_init: bool = False,
                 name_prefix: str = ""):
        if not layers:
            raise ValueError("network needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.out_dim != b.in_dim:
                raise ShapeError(f"layer chain mismatch: {a.out_dim} -> {b.in_dim}")
        for spec in layers[:-1]:
            if spec.activation == "softmax":
                raise ValueError("softmax is only legal as the final layer")
        self.layers = list(layers)
        self.prefix = name_prefix
        if store is not None:
            self.store = store
        else:
            self.store = ParameterStore()
            if not zero_init and rng is None:
                rng = np.random.default_rng(0)
            for i, spec in enumerate(self.layers):
                if zero_init:
                    w = np.zeros((spec.in_dim, spec.out_dim))
                else:
                    w = glorot_uniform(rng, spec.in_dim, spec.out_dim)
                self.store.add(self._pname(i, "W"), w)
                self.store.add(self._pname(i, "b"), np.zeros((1, spec.out_dim)))

    def _pname(self, i: int, kind: str) -> str:
        return f"{self.prefix}layer{i}.{kind}"

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def forward(self, x: np.ndarray, train_mode: bool = False,
                rng: np.random.Generator | None = None) -> ForwardTrace:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(
                f"input has {x.shape[1] if x.ndim == 2 else '?'} cols, "
                f"layer 0 expects {self.in_dim}")
        if not np.isfinite(x).all():
            raise NonFiniteError("non-finite values in network input")
        needs_rng = train_mode and any(s.dropout_rate > 0 for s in self.layers)
        if needs_rng and rng is None:
            raise ValueError("rng required: train_mode with dropout > 0")

        caches = []
        h_out = x
        for i, spec in enumerate(self.layers):
            xi = h_out
            if xi.shape[1] != spec.in_dim:
                raise ShapeError(f"layer {i} expects {spec.in_dim} cols, got {xi.shape[1]}")
            z = xi @ self.store.value(self._pname(i, "W")) + self.store.value(self._pname(i, "b"))
            if spec.activation == "rectifier":
                h = np.maximum(z, 0.0)
            elif spec.activation == "sigmoid":
                h = 1.0 / (1.0 + np.exp(-z))
            elif spec.activation == "identity":
                h = z
            else:
                h = _softmax(z)
            mask = None
            if spec.dropout_rate > 0 and train_mode:
                keep = 1.0 - spec.dropout_rate
                mask = (rng.random(h.shape) < keep) / keep
                h_out = h * mask
            else:
                h_out = h
            caches.append(_LayerCache(x=xi, z=z, h=h, mask=mask))
        if not np.isfinite(h_out).all():
            raise NonFiniteError("non-finite values in network output")
        return ForwardTrace(caches=caches, output=h_out, train_mode=train_mode)

    def backward(self, trace: ForwardTrace, upstream: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients (+=) and return dLoss/dInput.

        Frozen stores receive the input gradient but their parameter
        gradients are discarded.
        """
        if trace is None or not trace.caches:
            raise RuntimeError("backward called before forward")
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != trace.output.shape:
            raise ShapeError(
                f"upstream grad shape {upstream.shape} != output shape {trace.output.shape}")
        g = upstream
        for i in reversed(range(len(self.layers))):
            spec = self.layers[i]
            cache = trace.caches[i]
            if cache.mask is not None:
                g = g * cache.mask
            if spec.activation == "rectifier":
                gz = g * (cache.z > 0)
            elif spec.activation == "sigmoid":
                gz = g * cache.h * (1.0 - cache.h)
            elif spec.activation == "identity":
                gz = g
            else:  # softmax
                y = cache.h
                gz = y * (g - (g * y).sum(axis=1, keepdims=True))
            if not self.store.frozen:
                self.store.grad(self._pname(i, "W"))[...] += cache.x.T @ gz
                self.store.grad(self._pname(i, "b"))[...] += gz.sum(axis=0, keepdims=True)
            g = gz @ self.store.value(self._pname(i, "W")).T
        return g


def sgd_step(store: ParameterStore, learning_rate: float, momentum: float = 0.0) -> None:
    """theta <- theta - lr * v with v <- momentum * v + grad; zeros grads after."""
    if store.frozen:
        raise FrozenStoreError("sgd_step on a frozen parameter store")
    if learning_rate < 0:
        raise ValueError("learning rate must be nonnegative")
    if not (0.0 <= momentum < 1.0):
        raise ValueError("momentum must be in [0, 1)")
    for name in store.names():
        v = store._velocity.get(name)
        if v is None:
            v = np.zeros_like(store.value(name))
            store._velocity[name] = v
        v *= momentum
        v += store.grad(name)
        store.value(name)[...] -= learning_rate * v
    store.zero_grads()


def finite_diff_gradient(net: Network, x: np.ndarray, loss_fn, h: float = 1e-5) -> dict:
    """Central-difference d loss / d theta per parameter, dropout disabled.

    loss_fn maps the network output matrix to a scalar. Returns a dict of
    parameter name -> gradient estimate matrix.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    grads = {}
    for name in net.store.names():
        theta = net.store.value(name)
        est = np.zeros_like(theta)
        it = np.nditer(theta, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = theta[idx]
            theta[idx] = orig + h
            lp = loss_fn(net.forward(x, train_mode=False).output)
            theta[idx] = orig - h
            lm = loss_fn(net.forward(x, train_mode=False).output)
            theta[idx] = orig
            est[idx] = (lp - lm) / (2.0 * h)
            it.iternext()
        grads[name] = est
    return grads
