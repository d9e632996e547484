"""Builders and composition for the three adversarial sub-networks plus the
two-head assessment network.

The ensemble mirrors the training architecture: a frozen adult acoustic
model (senone softmax), a residual child-to-adult adaptation network that
feeds the acoustic model's input layer, and a domain discriminator attached
to the adapter output. At inference the discriminator is simply not called;
nothing else changes.

The adapter is residual: output = x + g(x), with g's final layer
zero-initialized so the adapter is exactly the identity at step 0 (g's
hidden layers get normal init so gradients flow from the first step).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .nn import (FormatError, ForwardTrace, LayerSpec, Network,
                 ParameterStore, ShapeError)

BUNDLE_MAGIC = b"SABL"
BUNDLE_VERSION = 1


# ---------------------------------------------------------------------------
# model wrappers


class AdultAcousticModel:
    """Feedforward senone classifier; frozen after pretraining."""

    def __init__(self, net: Network, K: int):
        if net.out_dim != K:
            raise ShapeError("acoustic model output dim must equal senone count")
        self.net = net
        self.K = K

    @property
    def frozen(self) -> bool:
        return self.net.store.frozen

    def freeze(self) -> None:
        self.net.store.frozen = True

    def posteriors(self, x: np.ndarray) -> np.ndarray:
        return self.net.forward(x, train_mode=False).output


def build_adult_am(input_dim: int, hidden_dims: list[int], K: int,
                   rng: np.random.Generator | None = None,
                   dropout_rate: float = 0.0) -> AdultAcousticModel:
    if K < 2:
        raise ValueError("senone inventory K must be at least 2")
    dims = [input_dim] + list(hidden_dims)
    layers = [LayerSpec(a, b, "rectifier", dropout_rate) for a, b in zip(dims, dims[1:])]
    layers.append(LayerSpec(dims[-1], K, "softmax"))
    return AdultAcousticModel(Network(layers, rng=rng or np.random.default_rng(0)), K)


@dataclass
class AdapterTrace:
    inner: ForwardTrace
    output: np.ndarray


class AdaptationNetwork:
    """Residual feature-space transform: output = x + g(x), dim-preserving."""

    def __init__(self, dim: int, hidden_dims: list[int],
                 rng: np.random.Generator | None = None):
        dims = [dim] + list(hidden_dims)
        layers = [LayerSpec(a, b, "rectifier") for a, b in zip(dims, dims[1:])]
        layers.append(LayerSpec(dims[-1], dim, "identity"))
        self.g = Network(layers, rng=rng or np.random.default_rng(0))
        # zero the final layer so the adapter starts as the exact identity
        last = len(layers) - 1
        self.g.store.value(self.g._pname(last, "W"))[...] = 0.0
        self.g.store.value(self.g._pname(last, "b"))[...] = 0.0
        self.dim = dim

    @property
    def store(self) -> ParameterStore:
        return self.g.store

    def forward(self, x: np.ndarray, train_mode: bool = False,
                rng: np.random.Generator | None = None) -> AdapterTrace:
        inner = self.g.forward(x, train_mode=train_mode, rng=rng)
        return AdapterTrace(inner=inner, output=np.asarray(x, dtype=np.float64) + inner.output)

    def backward(self, trace: AdapterTrace, upstream: np.ndarray) -> np.ndarray:
        return upstream + self.g.backward(trace.inner, upstream)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x, train_mode=False).output


class DomainDiscriminator:
    """Adversary over adapted features: 2-way domain softmax in binary mode,
    joint 2K-way (domain, senone) softmax in senone_aware mode."""

    MODES = ("binary", "senone_aware")

    def __init__(self, input_dim: int, hidden_dims: list[int], mode: str,
                 K: int | None = None, rng: np.random.Generator | None = None):
        if mode not in self.MODES:
            raise ValueError(f"unknown discriminator mode {mode!r}")
        if mode == "senone_aware":
            if K is None or K < 1:
                raise ValueError("senone_aware mode needs the senone count K")
            out = 2 * K
        else:
            out = 2
            K = None
        dims = [input_dim] + list(hidden_dims)
        layers = [LayerSpec(a, b, "rectifier") for a, b in zip(dims, dims[1:])]
        layers.append(LayerSpec(dims[-1], out, "softmax"))
        self.net = Network(layers, rng=rng or np.random.default_rng(0))
        self.mode = mode
        self.K = K

    @property
    def store(self) -> ParameterStore:
        return self.net.store


class AssessmentNetwork:
    """Shared rectifier trunk with two 5-way softmax heads
    (pronunciation level, fluency level)."""

    def __init__(self, input_dim: int = 30, trunk_dims: tuple = (128, 128, 128),
                 levels: int = 5, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        dims = [input_dim] + list(trunk_dims)
        self.trunk = Network(
            [LayerSpec(a, b, "rectifier") for a, b in zip(dims, dims[1:])], rng=rng)
        self.head_pron = Network([LayerSpec(dims[-1], levels, "softmax")], rng=rng)
        self.head_flu = Network([LayerSpec(dims[-1], levels, "softmax")], rng=rng)
        self.levels = levels

    def forward(self, x: np.ndarray, train_mode: bool = False,
                rng: np.random.Generator | None = None):
        t = self.trunk.forward(x, train_mode=train_mode, rng=rng)
        p = self.head_pron.forward(t.output, train_mode=train_mode, rng=rng)
        f = self.head_flu.forward(t.output, train_mode=train_mode, rng=rng)
        return t, p, f

    def backward(self, traces, grad_pron: np.ndarray, grad_flu: np.ndarray) -> np.ndarray:
        t, p, f = traces
        gt = self.head_pron.backward(p, grad_pron) + self.head_flu.backward(f, grad_flu)
        return self.trunk.backward(t, gt)

    def predict_levels(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Argmax level per head, on the 1..levels scale."""
        _, p, f = self.forward(x)
        return p.output.argmax(axis=1) + 1, f.output.argmax(axis=1) + 1


# ---------------------------------------------------------------------------
# composition


def compose_adapted_posteriors(adapter: AdaptationNetwork | None,
                               am: AdultAcousticModel, x: np.ndarray,
                               apply_adapter: bool = True,
                               train_mode: bool = False,
                               rng: np.random.Generator | None = None):
    """Senone posteriors of am(adapter(x)) (or am(x) when apply_adapter is
    false), with the traces needed to backpropagate into the adapter.

    Returns (posteriors, adapter_trace_or_None, am_trace). During training
    the acoustic model must be frozen; gradients then flow through it into
    the adapter only.
    """
    if train_mode and not am.frozen:
        raise RuntimeError("adversarial phase requires a frozen acoustic model")
    if apply_adapter:
        if adapter is None:
            raise ValueError("apply_adapter=True but no adapter given")
        at = adapter.forward(x, train_mode=train_mode, rng=rng)
        am_trace = am.net.forward(at.output, train_mode=False)
        return am_trace.output, at, am_trace
    am_trace = am.net.forward(np.asarray(x, dtype=np.float64), train_mode=False)
    return am_trace.output, None, am_trace


def extract_senone_posteriors(am: AdultAcousticModel, features: np.ndarray) -> np.ndarray:
    """Senone posterior rows from the frozen adult model, as constants."""
    if not am.frozen:
        raise RuntimeError("senone posteriors must come from a frozen acoustic model")
    return am.posteriors(features)


def discriminate(disc: DomainDiscriminator, adapted: np.ndarray) -> np.ndarray:
    """Probability rows from the discriminator (2 or 2K columns)."""
    return disc.net.forward(adapted, train_mode=False).output


def marginal_domain_probs(joint: np.ndarray) -> np.ndarray:
    """Collapse a 2K-column joint (domain, senone) matrix to 2 domain columns."""
    joint = np.asarray(joint, dtype=np.float64)
    if joint.shape[1] % 2 != 0:
        raise ShapeError("joint posterior matrix must have 2K columns")
    K = joint.shape[1] // 2
    return np.stack([joint[:, :K].sum(axis=1), joint[:, K:].sum(axis=1)], axis=1)


# ---------------------------------------------------------------------------
# model bundle files: parameter blob + text manifest in one container


def _layers_to_text(net: Network) -> str:
    return ";".join(f"{s.in_dim}:{s.out_dim}:{s.activation}:{s.dropout_rate}"
                    for s in net.layers)


def _layers_from_text(text: str) -> list[LayerSpec]:
    out = []
    for part in text.split(";"):
        i, o, act, p = part.split(":")
        out.append(LayerSpec(int(i), int(o), act, float(p)))
    return out


def save_bundle(path, store: ParameterStore, manifest: dict) -> None:
    lines = [f"{k}={v}" for k, v in manifest.items()]
    mtext = ("\n".join(lines) + "\n").encode("utf-8")
    blob = store.serialize()
    with open(path, "wb") as fh:
        fh.write(BUNDLE_MAGIC)
        fh.write(struct.pack("<II", BUNDLE_VERSION, len(mtext)))
        fh.write(mtext)
        fh.write(blob)


def load_bundle(path) -> tuple[ParameterStore, dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != BUNDLE_MAGIC:
        raise FormatError("bad magic: not a model bundle")
    version, mlen = struct.unpack_from("<II", data, 4)
    if version != BUNDLE_VERSION:
        raise FormatError(f"unsupported bundle version {version}")
    mtext = data[12 : 12 + mlen].decode("utf-8")
    manifest = {}
    for line in mtext.splitlines():
        if line.strip():
            k, _, v = line.partition("=")
            manifest[k] = v
    store = ParameterStore.deserialize(data[12 + mlen :])
    store.frozen = manifest.get("frozen", "false") == "true"
    return store, manifest


def save_adult_am(path, am: AdultAcousticModel) -> None:
    save_bundle(path, am.net.store, {
        "kind": "adult_am",
        "layers": _layers_to_text(am.net),
        "K": am.K,
        "frozen": "true" if am.frozen else "false",
    })


def load_adult_am(path) -> AdultAcousticModel:
    store, m = load_bundle(path)
    if m.get("kind") != "adult_am":
        raise FormatError(f"bundle kind {m.get('kind')!r}, expected adult_am")
    net = Network(_layers_from_text(m["layers"]), store=store)
    return AdultAcousticModel(net, int(m["K"]))


def save_adapter(path, adapter: AdaptationNetwork) -> None:
    save_bundle(path, adapter.store, {
        "kind": "adapter",
        "layers": _layers_to_text(adapter.g),
        "dim": adapter.dim,
        "frozen": "false",
    })


def load_adapter(path) -> AdaptationNetwork:
    store, m = load_bundle(path)
    if m.get("kind") != "adapter":
        raise FormatError(f"bundle kind {m.get('kind')!r}, expected adapter")
    layers = _layers_from_text(m["layers"])
    adapter = AdaptationNetwork.__new__(AdaptationNetwork)
    adapter.g = Network(layers, store=store)
    adapter.dim = int(m["dim"])
    return adapter


def save_discriminator(path, disc: DomainDiscriminator) -> None:
    save_bundle(path, disc.store, {
        "kind": "discriminator",
        "layers": _layers_to_text(disc.net),
        "mode": disc.mode,
        "K": disc.K if disc.K is not None else "",
        "frozen": "false",
    })


def load_discriminator(path) -> DomainDiscriminator:
    store, m = load_bundle(path)
    if m.get("kind") != "discriminator":
        raise FormatError(f"bundle kind {m.get('kind')!r}, expected discriminator")
    disc = DomainDiscriminator.__new__(DomainDiscriminator)
    disc.net = Network(_layers_from_text(m["layers"]), store=store)
    disc.mode = m["mode"]
    disc.K = int(m["K"]) if m.get("K") else None
    return disc
