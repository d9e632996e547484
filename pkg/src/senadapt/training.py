"""Pretraining of the adult acoustic model and adversarial min-max training.

The min-max objective is realized two ways, selectable per config:

* gradient_reversal: one pass per batch. The discriminator receives the
  gradient descending the mean domain loss; the adapter receives the
  gradient of [senone CE mean - lambda * domain loss mean], i.e. the domain
  gradient flows into the adapter negated and scaled by lambda.
* alternating: a discriminator descent step on the domain loss, then an
  adapter descent step on [CE - lambda * domain loss] against the updated
  discriminator.

Both leave the frozen acoustic model's parameters untouched; it only relays
input gradients from the senone loss to the adapter.
"""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import losses
from .models import (AdaptationNetwork, AdultAcousticModel,
                     DomainDiscriminator, marginal_domain_probs)
from .nn import sgd_step
from .synthdata import TrainingView


@dataclass
class AdversarialConfig:
    mode: str = "sat"                       # "bat" | "sat"
    reversal_coefficient: float = 1.0       # lambda
    update_scheme: str = "gradient_reversal"  # | "alternating"
    lr_adapter: float = 0.05
    lr_discriminator: float = 0.2
    momentum: float = 0.0
    epochs: int = 30
    batch_size: int = 128
    seed: int = 0
    alpha_source: str = "adapted"           # | "raw"
    lambda_shape: str = "ramp"              # | "constant"

    def validate(self) -> None:
        if self.mode not in ("bat", "sat"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.update_scheme not in ("gradient_reversal", "alternating"):
            raise ValueError(f"unknown update scheme {self.update_scheme!r}")
        if self.alpha_source not in ("adapted", "raw"):
            raise ValueError(f"unknown alpha_source {self.alpha_source!r}")
        if self.lambda_shape not in ("ramp", "constant"):
            raise ValueError(f"unknown lambda shape {self.lambda_shape!r}")
        if self.reversal_coefficient < 0:
            raise ValueError("reversal coefficient must be nonnegative")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.lr_adapter <= 0 or self.lr_discriminator <= 0:
            raise ValueError("learning rates must be positive")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError("momentum must be in [0, 1)")


@dataclass
class TrainLogRecord:
    epoch: int
    objective: float
    senone_ce: float
    domain_loss: float
    disc_acc: float
    seconds: float
    alpha_evals: int = 0
    alpha_checksum: int = 0

    def to_line(self) -> str:
        return "\t".join([str(self.epoch), repr(self.objective),
                          repr(self.senone_ce), repr(self.domain_loss),
                          repr(self.disc_acc), repr(self.seconds),
                          str(self.alpha_evals), str(self.alpha_checksum)])

    @classmethod
    def from_line(cls, line: str) -> "TrainLogRecord":
        p = line.rstrip("\n").split("\t")
        return cls(int(p[0]), float(p[1]), float(p[2]), float(p[3]),
                   float(p[4]), float(p[5]), int(p[6]), int(p[7]))


@dataclass
class TrainLog:
    records: list[TrainLogRecord] = field(default_factory=list)

    def to_lines(self) -> list[str]:
        return [r.to_line() for r in self.records]

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("# epoch\tobjective\tsenone_ce\tdomain_loss\tdisc_acc"
                     "\tseconds\talpha_evals\talpha_checksum\n")
            for line in self.to_lines():
                fh.write(line + "\n")

    @classmethod
    def read(cls, path) -> "TrainLog":
        log = cls()
        with open(path) as fh:
            for line in fh:
                if line.startswith("#") or not line.strip():
                    continue
                log.records.append(TrainLogRecord.from_line(line))
        return log

    def trajectory_key(self) -> tuple:
        """Everything except wall time; this is what determinism guarantees."""
        return tuple((r.epoch, r.objective, r.senone_ce, r.domain_loss,
                      r.disc_acc, r.alpha_evals, r.alpha_checksum)
                     for r in self.records)


def lambda_schedule(epoch: int, total: int, shape: str = "ramp") -> float:
    """Reversal-coefficient multiplier: constant 1, or a 0-to-1 sigmoid ramp."""
    if not (0 <= epoch <= total):
        raise ValueError("epoch out of range")
    if shape == "constant":
        return 1.0
    if shape == "ramp":
        return 2.0 / (1.0 + np.exp(-10.0 * epoch / total)) - 1.0
    raise ValueError(f"unknown schedule shape {shape!r}")


def _alpha_checksum(alpha: np.ndarray) -> int:
    return zlib.crc32(np.ascontiguousarray(alpha, dtype="<f8").tobytes())


def _minibatches(rng: np.random.Generator, n: int, batch_size: int):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def pretrain_adult_am(am: AdultAcousticModel, view: TrainingView, epochs: int,
                      lr: float, seed: int, batch_size: int = 128,
                      momentum: float = 0.9) -> TrainLog:
    """Supervised senone training on adult frames, then freeze the model."""
    if am.frozen:
        raise RuntimeError("acoustic model is already pretrained and frozen")
    adult = np.flatnonzero(view.adult_mask)
    if adult.size == 0:
        raise ValueError("pretraining corpus has no adult frames")
    labels = view.adult_senone_labels
    if (labels[adult] < 0).any():
        raise ValueError("pretraining corpus is missing senone labels")
    x_all = view.frames[adult]
    y_all = labels[adult]
    rng = np.random.default_rng(seed)
    log = TrainLog()
    for epoch in range(epochs):
        t0 = time.perf_counter()
        ce_sum, correct, seen = 0.0, 0, 0
        for idx in _minibatches(rng, adult.size, batch_size):
            x, y = x_all[idx], y_all[idx]
            trace = am.net.forward(x, train_mode=True, rng=rng)
            ce, grad = losses.senone_ce_loss(trace.output, y, np.ones(len(y), bool))
            am.net.backward(trace, grad)
            sgd_step(am.net.store, lr, momentum)
            ce_sum += ce * len(y)
            correct += int((trace.output.argmax(axis=1) == y).sum())
            seen += len(y)
        log.records.append(TrainLogRecord(
            epoch=epoch, objective=ce_sum / seen, senone_ce=ce_sum / seen,
            domain_loss=0.0, disc_acc=correct / seen,
            seconds=time.perf_counter() - t0))
    am.freeze()
    return log


def _stratified_batches(rng: np.random.Generator, adult_idx: np.ndarray,
                        child_idx: np.ndarray, batch_size: int):
    """Batches covering every frame once per epoch, each with >= 25% adult
    frames (adult frames are re-drawn with replacement when the pool's own
    share of a batch would fall below a quarter)."""
    adult = rng.permutation(adult_idx)
    child = rng.permutation(child_idx)
    n = adult.size + child.size
    n_batches = -(-n // batch_size)
    a_bounds = np.linspace(0, adult.size, n_batches + 1).astype(int)
    c_bounds = np.linspace(0, child.size, n_batches + 1).astype(int)
    for b in range(n_batches):
        a = adult[a_bounds[b] : a_bounds[b + 1]]
        c = child[c_bounds[b] : c_bounds[b + 1]]
        # n_a >= ceil(n_c / 3) makes the adult share of the final batch >= 1/4
        need = max(1, -(-c.size // 3))
        if a.size < need:
            extra = rng.choice(adult_idx, size=need - a.size, replace=True)
            a = np.concatenate([a, extra])
        yield np.concatenate([a, c]), a.size


@dataclass
class _BatchStats:
    terms: losses.BatchLossTerms
    disc_correct: int
    alpha_evals: int
    alpha_checksum: int


def adversarial_batch_grads(adapter: AdaptationNetwork, am: AdultAcousticModel,
                            disc: DomainDiscriminator, x: np.ndarray,
                            senone_labels: np.ndarray, domain: np.ndarray,
                            cfg: AdversarialConfig, lam: float,
                            rng: np.random.Generator) -> _BatchStats:
    """Accumulate one batch's gradients into the adapter and discriminator
    stores per the gradient-reversal sign convention, without stepping.

    Adapter gradients are those of [CE mean - lam * domain loss mean];
    discriminator gradients descend the domain loss mean. The caller steps
    both stores (or discards one side, for the alternating scheme).
    """
    adult_mask = domain == 0
    n_adult = int(adult_mask.sum())
    if n_adult == 0:
        raise ValueError("batch has no adult frames; the objective divides by n")
    if not am.frozen:
        raise RuntimeError("adversarial training requires a frozen acoustic model")

    at = adapter.forward(x, train_mode=True, rng=rng)
    am_trace = am.net.forward(at.output, train_mode=False)
    ce, ce_grad = losses.senone_ce_loss(am_trace.output, senone_labels, adult_mask)
    feat_grad = am.net.backward(am_trace, ce_grad)

    disc_trace = disc.net.forward(at.output, train_mode=False)
    alpha_evals, alpha_crc = 0, 0
    if cfg.mode == "sat":
        src = at.output if cfg.alpha_source == "adapted" else x
        alpha = am.posteriors(src)  # constants: recomputed per batch, no grad
        alpha_evals = alpha.shape[0]
        alpha_crc = _alpha_checksum(alpha)
        _, dom_mean, dom_grad = losses.senone_aware_domain_loss(
            disc_trace.output, domain, alpha)
        dom_probs = marginal_domain_probs(disc_trace.output)
    else:
        _, dom_mean, dom_grad = losses.binary_domain_loss(disc_trace.output, domain)
        dom_probs = disc_trace.output

    feat_grad_dom = disc.net.backward(disc_trace, dom_grad)
    adapter.backward(at, feat_grad - lam * feat_grad_dom)

    terms = losses.multitask_objective(ce * n_adult, n_adult,
                                       dom_mean * len(x), len(x))
    disc_correct = int((dom_probs.argmax(axis=1) == domain).sum())
    return _BatchStats(terms=terms, disc_correct=disc_correct,
                       alpha_evals=alpha_evals, alpha_checksum=alpha_crc)


def adversarial_train(adapter: AdaptationNetwork, am: AdultAcousticModel,
                      disc: DomainDiscriminator, view: TrainingView,
                      cfg: AdversarialConfig) -> TrainLog:
    """Min-max training of adapter (argmin E) against discriminator (argmax E)."""
    cfg.validate()
    if not am.frozen:
        raise RuntimeError("adversarial training requires a frozen acoustic model")
    expected_mode = "senone_aware" if cfg.mode == "sat" else "binary"
    if disc.mode != expected_mode:
        raise ValueError(f"discriminator mode {disc.mode!r} does not match "
                         f"config mode {cfg.mode!r}")
    adult_idx = np.flatnonzero(view.adult_mask)
    child_idx = np.flatnonzero(~view.adult_mask)
    if adult_idx.size == 0 or child_idx.size == 0:
        raise ValueError("adversarial training needs frames from both domains")

    rng = np.random.default_rng(cfg.seed)
    log = TrainLog()
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lam = cfg.reversal_coefficient * lambda_schedule(epoch, cfg.epochs,
                                                         cfg.lambda_shape)
        ce_sum, dom_sum, n_a, n_t = 0.0, 0.0, 0, 0
        disc_correct, alpha_evals, alpha_crc = 0, 0, 0
        for idx, _ in _stratified_batches(rng, adult_idx, child_idx, cfg.batch_size):
            x = view.frames[idx]
            y = view.adult_senone_labels[idx]
            dom = view.domain_labels[idx]
            if cfg.update_scheme == "alternating":
                # discriminator phase: keep only its own gradients, step it
                adapter.store.zero_grads()
                disc.store.zero_grads()
                adversarial_batch_grads(adapter, am, disc, x, y, dom, cfg, lam, rng)
                adapter.store.zero_grads()
                sgd_step(disc.store, cfg.lr_discriminator, cfg.momentum)
                # adapter phase against the updated discriminator
                stats = adversarial_batch_grads(adapter, am, disc, x, y, dom,
                                                cfg, lam, rng)
                disc.store.zero_grads()
                sgd_step(adapter.store, cfg.lr_adapter, cfg.momentum)
            else:
                adapter.store.zero_grads()
                disc.store.zero_grads()
                stats = adversarial_batch_grads(adapter, am, disc, x, y, dom,
                                                cfg, lam, rng)
                sgd_step(disc.store, cfg.lr_discriminator, cfg.momentum)
                sgd_step(adapter.store, cfg.lr_adapter, cfg.momentum)
            ce_sum += stats.terms.senone_ce_sum
            dom_sum += stats.terms.domain_loss_sum
            n_a += stats.terms.n_adult
            n_t += stats.terms.n_total
            disc_correct += stats.disc_correct
            alpha_evals += stats.alpha_evals
            alpha_crc = zlib.crc32(stats.alpha_checksum.to_bytes(4, "little"),
                                   alpha_crc) if cfg.mode == "sat" else 0
        log.records.append(TrainLogRecord(
            epoch=epoch,
            objective=ce_sum / n_a - dom_sum / n_t,
            senone_ce=ce_sum / n_a,
            domain_loss=dom_sum / n_t,
            disc_acc=disc_correct / n_t,
            seconds=time.perf_counter() - t0,
            alpha_evals=alpha_evals,
            alpha_checksum=alpha_crc))
    return log


def train_discriminator_only(disc: DomainDiscriminator, am: AdultAcousticModel,
                             view: TrainingView, epochs: int, lr: float,
                             seed: int, batch_size: int = 128,
                             momentum: float = 0.0) -> TrainLog:
    """Train a discriminator on un-adapted features (adapter fixed at
    identity); the reference point for domain-confusion measurements."""
    rng = np.random.default_rng(seed)
    log = TrainLog()
    n = len(view.frames)
    for epoch in range(epochs):
        t0 = time.perf_counter()
        dom_sum, correct = 0.0, 0
        for idx in _minibatches(rng, n, batch_size):
            x = view.frames[idx]
            dom = view.domain_labels[idx]
            trace = disc.net.forward(x, train_mode=False)
            if disc.mode == "senone_aware":
                alpha = am.posteriors(x)
                _, dom_mean, dom_grad = losses.senone_aware_domain_loss(
                    trace.output, dom, alpha)
                probs = marginal_domain_probs(trace.output)
            else:
                _, dom_mean, dom_grad = losses.binary_domain_loss(trace.output, dom)
                probs = trace.output
            disc.store.zero_grads()
            disc.net.backward(trace, dom_grad)
            sgd_step(disc.store, lr, momentum)
            dom_sum += dom_mean * len(idx)
            correct += int((probs.argmax(axis=1) == dom).sum())
        log.records.append(TrainLogRecord(
            epoch=epoch, objective=-dom_sum / n, senone_ce=0.0,
            domain_loss=dom_sum / n, disc_acc=correct / n,
            seconds=time.perf_counter() - t0))
    return log


def train_assessment_network(net, features: np.ndarray, pron: np.ndarray,
                             flu: np.ndarray, epochs: int, lr: float,
                             seed: int, batch_size: int = 64,
                             momentum: float = 0.9) -> TrainLog:
    """Joint training of the two-head assessment network; both heads use
    softmax cross-entropy against their 1..5 level labels."""
    rng = np.random.default_rng(seed)
    n = len(features)
    ones = np.ones(batch_size, bool)
    log = TrainLog()
    for epoch in range(epochs):
        t0 = time.perf_counter()
        ce_sum, correct = 0.0, 0
        for idx in _minibatches(rng, n, batch_size):
            x = features[idx]
            yp, yf = pron[idx] - 1, flu[idx] - 1
            traces = net.forward(x, train_mode=True, rng=rng)
            _, p, f = traces
            ce_p, g_p = losses.senone_ce_loss(p.output, yp, ones[: len(idx)])
            ce_f, g_f = losses.senone_ce_loss(f.output, yf, ones[: len(idx)])
            net.trunk.store.zero_grads()
            net.head_pron.store.zero_grads()
            net.head_flu.store.zero_grads()
            net.backward(traces, g_p, g_f)
            sgd_step(net.trunk.store, lr, momentum)
            sgd_step(net.head_pron.store, lr, momentum)
            sgd_step(net.head_flu.store, lr, momentum)
            ce_sum += (ce_p + ce_f) * len(idx)
            correct += int((p.output.argmax(axis=1) == yp).sum())
        log.records.append(TrainLogRecord(
            epoch=epoch, objective=ce_sum / (2 * n), senone_ce=ce_sum / (2 * n),
            domain_loss=0.0, disc_acc=correct / n,
            seconds=time.perf_counter() - t0))
    return log
