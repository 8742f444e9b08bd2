"""Synthetic embedding-sequence generator with known structure.

Sequences are AR(1) walks around per-sequence topic anchors: locally smooth
steps inside a topic segment, with segment-level persistence across the
sequence. Those are exactly the two structures the corruption operators
break, which makes the coherence task learnable without any real encoder.
A non-learned discontinuity detector provides the baseline floor that a
trained network must beat.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .sequences import LABEL_COHERENT, EmbeddingSequence

MAX_POSITIONS = 32


@dataclass(frozen=True)
class TestbedConfig:
    dim: int = 768
    positions: int = 24
    n_topics: int = 2
    ar_coeff: float = 0.9
    noise_scale: float = 1.0
    anchor_scale: float = 3.0
    corpus_size: int = 1000
    seed: int = 0

    def validate(self) -> "TestbedConfig":
        if self.dim <= 0:
            raise ConfigError("dim must be positive")
        if not 1 <= self.positions <= MAX_POSITIONS:
            raise ConfigError(f"positions must lie in [1, {MAX_POSITIONS}], got {self.positions}")
        if not 1 <= self.n_topics <= self.positions:
            raise ConfigError("n_topics must lie in [1, positions]")
        if not 0.0 < self.ar_coeff < 1.0:
            raise ConfigError(f"AR coefficient must lie strictly in (0, 1), got {self.ar_coeff}")
        if self.noise_scale <= 0 or self.anchor_scale < 0:
            raise ConfigError("noise_scale must be > 0 and anchor_scale >= 0")
        if self.corpus_size < 1:
            raise ConfigError("corpus_size must be >= 1")
        return self

    def to_kv(self) -> dict[str, str]:
        return {
            "testbed.dim": str(self.dim),
            "testbed.positions": str(self.positions),
            "testbed.n_topics": str(self.n_topics),
            "testbed.ar_coeff": repr(self.ar_coeff),
            "testbed.noise_scale": repr(self.noise_scale),
            "testbed.anchor_scale": repr(self.anchor_scale),
            "testbed.corpus_size": str(self.corpus_size),
            "testbed.seed": str(self.seed),
        }

    @staticmethod
    def from_kv(entries: dict[str, str]) -> "TestbedConfig":
        def get(key, default):
            return entries.get(f"testbed.{key}", default)

        return TestbedConfig(
            dim=int(get("dim", 768)),
            positions=int(get("positions", 24)),
            n_topics=int(get("n_topics", 2)),
            ar_coeff=float(get("ar_coeff", 0.9)),
            noise_scale=float(get("noise_scale", 1.0)),
            anchor_scale=float(get("anchor_scale", 3.0)),
            corpus_size=int(get("corpus_size", 1000)),
            seed=int(get("seed", 0)),
        ).validate()


def _segment_lengths(positions: int, n_topics: int) -> list[int]:
    base, extra = divmod(positions, n_topics)
    return [base + (1 if i < extra else 0) for i in range(n_topics)]


def generate_sequence(cfg: TestbedConfig, index: int) -> EmbeddingSequence:
    """Sequence ``index`` of the corpus; its seed derives by counter from the
    corpus seed, so parallel generation stays deterministic."""
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, index)))
    rho = cfg.ar_coeff
    sigma = cfg.noise_scale
    step = sigma * np.sqrt(1.0 - rho * rho)
    rows = np.empty((cfg.positions, cfg.dim), dtype=np.float64)
    t = 0
    for length in _segment_lengths(cfg.positions, cfg.n_topics):
        anchor = cfg.anchor_scale * rng.normal(size=cfg.dim)
        x = anchor + sigma * rng.normal(size=cfg.dim)
        rows[t] = x
        for _ in range(1, length):
            t += 1
            x = anchor + rho * (x - anchor) + step * rng.normal(size=cfg.dim)
            rows[t] = x
        t += 1
    return EmbeddingSequence(rows, id=f"seq-{index:06d}", label=LABEL_COHERENT)


def generate_corpus(cfg: TestbedConfig) -> list[EmbeddingSequence]:
    cfg = cfg.validate()
    return [generate_sequence(cfg, i) for i in range(cfg.corpus_size)]


def discontinuity_baseline(seq: EmbeddingSequence | np.ndarray) -> float:
    """max over adjacent rows of (1 - cosine similarity): a non-learned floor
    detector for structural breaks."""
    data = seq.data if isinstance(seq, EmbeddingSequence) else np.asarray(seq)
    if data.ndim != 2 or data.shape[0] < 2:
        raise DataError("discontinuity baseline needs at least 2 positions")
    a = data[:-1]
    b = data[1:]
    norms = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    dots = np.einsum("ij,ij->i", a, b)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.where(norms > 0, dots / np.where(norms > 0, norms, 1.0), 0.0)
    return float(np.max(1.0 - cos))


def baseline_auc(pairs) -> float:
    """AUC of the discontinuity baseline over valid contrastive pairs."""
    from .evaluation import auc

    pos, neg = [], []
    for pair in pairs:
        if not pair.valid:
            continue
        pos.append(discontinuity_baseline(pair.positive))
        neg.append(discontinuity_baseline(pair.negative))
    if not pos:
        raise DataError("no valid pairs for the baseline")
    return auc(pos, neg)


def learnability_floor(
    corpus, kinds=("shuffle", "splice"), seed: int = 0, sample: int = 200
) -> dict[str, float]:
    """Baseline AUC per kind on a seeded corpus sample; the floor a trained
    network is expected to beat."""
    from .corruption import CorruptionSpec, build_pairs

    if not corpus:
        raise DataError("empty corpus")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x42A5E)))
    take = min(sample, len(corpus))
    chosen_idx = rng.choice(len(corpus), size=take, replace=False)
    chosen = [corpus[int(i)] for i in chosen_idx]
    floors = {}
    for kind in kinds:
        pairs = build_pairs(chosen, [CorruptionSpec(kind, seed=seed)], donor_pool=corpus)
        floors[kind] = baseline_auc(pairs)
    return floors


def check_learnability(
    corpus, kinds=("shuffle", "splice"), seed: int = 0, threshold: float = 0.7
) -> dict[str, float]:
    """Reject corpora whose baseline AUC falls below ``threshold`` on any of
    the gate kinds: the testbed must pose a solvable task."""
    floors = learnability_floor(corpus, kinds=kinds, seed=seed)
    for kind, value in floors.items():
        if value < threshold:
            raise ConfigError(
                f"testbed config fails the learnability gate: baseline AUC on "
                f"{kind} is {value:.3f} < {threshold}"
            )
    return floors
