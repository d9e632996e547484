"""Synthetic two-domain, senone-labeled corpora.

Adult frames for senone k are drawn from an isotropic Gaussian at a class
mean mu_k; child frames for the same senone are drawn at mu_k plus a
per-senone shift along a fixed random unit direction. A heterogeneous shift
profile (some senones barely shifted, others strongly) reproduces the
phoneme-dependent adult/child mismatch the adaptation method targets.

Child senone labels are ground truth for evaluation only. Training code
receives a TrainingView, which carries senone labels for adult frames and
nothing for child frames.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .nn import FormatError

CORPUS_MAGIC = b"SACO"
CORPUS_VERSION = 1

SPLIT_TRAIN, SPLIT_DEV, SPLIT_TEST = 0, 1, 2
SPLIT_NAMES = {"train": SPLIT_TRAIN, "dev": SPLIT_DEV, "test": SPLIT_TEST}

DEFAULT_SHIFT_PROFILE = (0.0, 0.0, 1.0, 1.0, 2.0, 2.0, 4.0, 4.0, 5.0, 5.0)


@dataclass
class GeneratorConfig:
    K: int = 10
    dim: int = 20
    n_adult: int = 2000
    n_child: int = 2000
    shift_profile: tuple = DEFAULT_SHIFT_PROFILE  # in units of within_class_std
    within_class_std: float = 1.0
    # blend between one global shift direction (1.0) and fully senone-specific
    # directions (0.0); a shared component is what a global transform can undo
    shift_coherence: float = 0.6
    # class means sit at class_separation * std from the origin
    class_separation: float = 3.5
    seed: int = 0
    split_fractions: tuple = (0.7, 0.15, 0.15)

    def validate(self) -> None:
        if self.K < 2:
            raise ValueError("K must be at least 2")
        if len(self.shift_profile) != self.K:
            raise ValueError("shift_profile length must equal K")
        if any(s < 0 for s in self.shift_profile):
            raise ValueError("shift magnitudes must be nonnegative")
        if self.within_class_std <= 0:
            raise ValueError("within_class_std must be positive")
        if self.n_adult < self.K or self.n_child < self.K:
            raise ValueError("need at least one frame per senone per domain")
        if not (0.0 <= self.shift_coherence <= 1.0):
            raise ValueError("shift_coherence must be in [0, 1]")
        if self.class_separation <= 0:
            raise ValueError("class_separation must be positive")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9 or len(self.split_fractions) != 3:
            raise ValueError("split_fractions must be three values summing to 1")


@dataclass
class TrainingView:
    """What training is allowed to see: features, domains, adult labels only."""
    frames: np.ndarray
    domain_labels: np.ndarray           # 0 adult, 1 child
    adult_senone_labels: np.ndarray     # label for adult rows, -1 for child rows

    @property
    def adult_mask(self) -> np.ndarray:
        return self.domain_labels == 0


@dataclass
class SyntheticCorpus:
    K: int
    dim: int
    frames: np.ndarray          # (N, dim) float64
    senone_labels: np.ndarray   # (N,) int32, 0..K-1; hidden truth for child rows
    domain_labels: np.ndarray   # (N,) uint8, 0 adult / 1 child
    split_tags: np.ndarray      # (N,) uint8

    def subset(self, split: str, domain: str | None = None) -> "SyntheticCorpus":
        sel = self.split_tags == SPLIT_NAMES[split]
        if domain is not None:
            sel &= self.domain_labels == (0 if domain == "adult" else 1)
        return SyntheticCorpus(self.K, self.dim, self.frames[sel],
                               self.senone_labels[sel], self.domain_labels[sel],
                               self.split_tags[sel])

    def training_view(self, split: str = "train") -> TrainingView:
        sub = self.subset(split)
        labels = sub.senone_labels.astype(np.int64).copy()
        labels[sub.domain_labels == 1] = -1
        return TrainingView(frames=sub.frames, domain_labels=sub.domain_labels,
                            adult_senone_labels=labels)

    def __eq__(self, other) -> bool:
        return (isinstance(other, SyntheticCorpus)
                and self.K == other.K and self.dim == other.dim
                and np.array_equal(self.frames, other.frames)
                and np.array_equal(self.senone_labels, other.senone_labels)
                and np.array_equal(self.domain_labels, other.domain_labels)
                and np.array_equal(self.split_tags, other.split_tags))


def _balanced_class_counts(n: int, K: int) -> np.ndarray:
    counts = np.full(K, n // K, dtype=np.int64)
    counts[: n % K] += 1
    return counts


def generate_corpus(cfg: GeneratorConfig) -> SyntheticCorpus:
    """Two-domain Gaussian corpus, deterministic given cfg.seed."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    sigma = cfg.within_class_std

    # class means on distinct random unit directions
    dirs = rng.standard_normal((cfg.K, cfg.dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    means = cfg.class_separation * sigma * dirs

    # fixed per-senone unit shift directions for the child domain: a shared
    # global direction blended with senone-specific ones per shift_coherence
    global_dir = rng.standard_normal(cfg.dim)
    global_dir /= np.linalg.norm(global_dir)
    local_dirs = rng.standard_normal((cfg.K, cfg.dim))
    local_dirs /= np.linalg.norm(local_dirs, axis=1, keepdims=True)
    shift_dirs = (cfg.shift_coherence * global_dir[None, :]
                  + (1.0 - cfg.shift_coherence) * local_dirs)
    shift_dirs /= np.linalg.norm(shift_dirs, axis=1, keepdims=True)

    frames, senones, domains = [], [], []
    for domain, n in ((0, cfg.n_adult), (1, cfg.n_child)):
        counts = _balanced_class_counts(n, cfg.K)
        for k in range(cfg.K):
            center = means[k]
            if domain == 1:
                center = center + cfg.shift_profile[k] * sigma * shift_dirs[k]
            frames.append(center + sigma * rng.standard_normal((counts[k], cfg.dim)))
            senones.append(np.full(counts[k], k, dtype=np.int32))
            domains.append(np.full(counts[k], domain, dtype=np.uint8))
    frames = np.concatenate(frames)
    senones = np.concatenate(senones)
    domains = np.concatenate(domains)

    # disjoint splits, stratified per (domain, senone)
    tags = np.empty(len(frames), dtype=np.uint8)
    for d in (0, 1):
        for k in range(cfg.K):
            idx = np.flatnonzero((domains == d) & (senones == k))
            idx = rng.permutation(idx)
            n_tr = int(round(cfg.split_fractions[0] * len(idx)))
            n_dev = int(round(cfg.split_fractions[1] * len(idx)))
            tags[idx[:n_tr]] = SPLIT_TRAIN
            tags[idx[n_tr : n_tr + n_dev]] = SPLIT_DEV
            tags[idx[n_tr + n_dev :]] = SPLIT_TEST

    order = rng.permutation(len(frames))
    return SyntheticCorpus(cfg.K, cfg.dim, frames[order], senones[order],
                           domains[order], tags[order])


def generate_assessment_corpus(n: int, seed: int, dim: int = 30,
                               levels: int = 5, noise_std: float = 1.0):
    """Correlated (pronunciation, fluency) level pairs with 30-dim features.

    A latent proficiency z is uniform over 1..5; pronunciation equals z and
    fluency is z plus noise in {-1, 0, +1} with probabilities 0.15/0.7/0.15,
    clamped to 1..5. Features are a per-level Gaussian mean plus noise.

    Returns (features, pron_levels, flu_levels).
    """
    if n < 50:
        raise ValueError("assessment corpus needs n >= 50")
    rng = np.random.default_rng(seed)
    level_means = 3.0 * rng.standard_normal((levels, dim))
    z = rng.integers(1, levels + 1, size=n)
    pron = z.copy()
    jitter = rng.choice([-1, 0, 1], size=n, p=[0.15, 0.7, 0.15])
    flu = np.clip(z + jitter, 1, levels)
    feats = level_means[z - 1] + noise_std * rng.standard_normal((n, dim))
    return feats, pron.astype(np.int64), flu.astype(np.int64)


# ---------------------------------------------------------------------------
# binary corpus file: header "SACO", version, K, dim, n_frames, then frame
# rows as f64 LE, senone labels u32, domain labels u8, split tags u8.


def save_corpus(corpus: SyntheticCorpus, path) -> None:
    n = corpus.frames.shape[0]
    with open(path, "wb") as fh:
        fh.write(CORPUS_MAGIC)
        fh.write(struct.pack("<III", CORPUS_VERSION, corpus.K, corpus.dim))
        fh.write(struct.pack("<Q", n))
        fh.write(corpus.frames.astype("<f8").tobytes())
        fh.write(corpus.senone_labels.astype("<u4").tobytes())
        fh.write(corpus.domain_labels.astype("u1").tobytes())
        fh.write(corpus.split_tags.astype("u1").tobytes())


def corpus_file_size(n_frames: int, dim: int) -> int:
    """Exact on-disk size: 24-byte header + 8*n*dim frame bytes + 6*n label bytes."""
    return 24 + 8 * n_frames * dim + 6 * n_frames


def load_corpus(path) -> SyntheticCorpus:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CORPUS_MAGIC:
        raise FormatError("bad magic: not a corpus file")
    version, K, dim = struct.unpack_from("<III", data, 4)
    if version != CORPUS_VERSION:
        raise FormatError(f"unsupported corpus version {version}")
    (n,) = struct.unpack_from("<Q", data, 16)
    if len(data) != corpus_file_size(n, dim):
        raise FormatError("truncated or oversized corpus file")
    off = 24
    frames = np.frombuffer(data, dtype="<f8", count=n * dim, offset=off).reshape(n, dim).copy()
    off += 8 * n * dim
    senones = np.frombuffer(data, dtype="<u4", count=n, offset=off).astype(np.int32)
    off += 4 * n
    domains = np.frombuffer(data, dtype="u1", count=n, offset=off).copy()
    off += n
    tags = np.frombuffer(data, dtype="u1", count=n, offset=off).copy()
    return SyntheticCorpus(K, dim, frames, senones, domains, tags)


def parse_flat_config(text: str) -> dict[str, str]:
    """key=value lines; '#' starts a comment; blank lines ignored."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        k, _, v = line.partition("=")
        out[k.strip()] = v.strip()
    return out
