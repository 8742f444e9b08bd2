"""Structure-breaking operators over embedding sequences.

Each operator takes a coherent sequence and produces a contrastive pair:
the untouched original and a corrupted twin, plus the set of positions the
operator targeted. A pair is valid only if the corruption actually changed
the data; silent failures are marked invalid and excluded from accuracy
denominators downstream, never raised as errors.

Everything is driven by the spec seed: the same (sequence, spec, donor)
triple always yields the bitwise-identical pair.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError
from .kvtext import load_file as kv_load_file
from .sequences import LABEL_CORRUPTED, EmbeddingSequence

# negatives equal to positives within this elementwise tolerance are silent
# failures; bit-exactness would be too strict after smoothing arithmetic
IDENTITY_TOL = 1e-12

KINDS = (
    "shuffle",
    "splice",
    "region_swap",
    "offset_shift",
    "smoothing",
    "repetition",
    "noise",
)

DONOR_KINDS = ("splice", "region_swap")


@dataclass(frozen=True)
class CorruptionSpec:
    """One corruption: a kind, its parameters, and the seed that fully
    determines placement, permutation, direction, and donor choice."""

    kind: str
    seed: int = 0
    span_fraction: float = 0.25
    offset_magnitude: float | None = None  # None: 0.5 x mean row norm
    smoothing_window: int = 3

    def validate(self) -> "CorruptionSpec":
        if self.kind not in KINDS:
            raise ConfigError(
                f"unknown corruption kind {self.kind!r}; registered kinds: {', '.join(KINDS)}"
            )
        if not 0.0 < self.span_fraction <= 1.0:
            raise ConfigError(f"span_fraction must be in (0, 1], got {self.span_fraction}")
        if self.offset_magnitude is not None and self.offset_magnitude < 0:
            raise ConfigError(f"offset_magnitude must be >= 0, got {self.offset_magnitude}")
        if self.smoothing_window < 2:
            raise ConfigError(f"smoothing_window must be >= 2, got {self.smoothing_window}")
        return self

    def reseeded(self, seed: int) -> "CorruptionSpec":
        return replace(self, seed=seed)


@dataclass
class ContrastivePair:
    positive: EmbeddingSequence
    negative: EmbeddingSequence
    kind: str
    valid: bool
    corrupted_positions: tuple[int, ...]


def _rng(spec: CorruptionSpec, *extra: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((spec.seed, *extra)))


def _span_length(spec: CorruptionSpec, positions: int) -> int:
    return max(1, min(positions, int(round(spec.span_fraction * positions))))


def diff_positions(pos: np.ndarray, neg: np.ndarray, tol: float = IDENTITY_TOL) -> tuple[int, ...]:
    """Indices of rows that differ by more than ``tol`` in any element."""
    changed = np.abs(neg - pos) > tol
    return tuple(int(i) for i in np.nonzero(changed.any(axis=1))[0])


def _negative_meta(seq: EmbeddingSequence, kind: str) -> dict:
    return {
        "id": f"{seq.id}#{kind}" if seq.id else "",
        "label": LABEL_CORRUPTED,
        "pair_id": seq.id,
        "kind": kind,
    }


def _pair(seq: EmbeddingSequence, neg_data: np.ndarray, kind: str, targeted: Sequence[int]) -> ContrastivePair:
    valid = bool(np.any(np.abs(neg_data - seq.data) > IDENTITY_TOL))
    if not valid:
        # force the silent-failure pair to be bitwise identical
        neg_data = seq.data.copy()
        targeted = ()
    negative = seq.with_data(neg_data, **_negative_meta(seq, kind))
    return ContrastivePair(seq, negative, kind, valid, tuple(int(i) for i in targeted))


def _skip(seq: EmbeddingSequence, kind: str) -> ContrastivePair:
    return _pair(seq, seq.data.copy(), kind, ())


# ---------------------------------------------------------------------------
# operators
# ---------------------------------------------------------------------------


def apply_shuffle(seq: EmbeddingSequence, spec: CorruptionSpec) -> ContrastivePair:
    """Permute rows by a seeded derangement, so the corruption is never
    silent. Fewer than two positions leaves nothing to permute: skip."""
    p = seq.positions
    if p < 2:
        return _skip(seq, "shuffle")
    rng = _rng(spec)
    # Sattolo's algorithm: a uniform cyclic permutation, hence no fixed points
    perm = np.arange(p)
    for i in range(p - 1, 0, -1):
        j = int(rng.integers(0, i))
        perm[i], perm[j] = perm[j], perm[i]
    neg = seq.data[perm].copy()
    moved = np.nonzero(perm != np.arange(p))[0]
    return _pair(seq, neg, "shuffle", moved)


def apply_splice(
    seq: EmbeddingSequence, donor: EmbeddingSequence, spec: CorruptionSpec
) -> ContrastivePair:
    """Replace a contiguous span with a donor span taken from a seeded,
    freely chosen donor offset."""
    p = seq.positions
    span = _span_length(spec, p)
    if donor.positions < span:
        return _skip(seq, "splice")
    rng = _rng(spec)
    start = int(rng.integers(0, p - span + 1))
    donor_start = int(rng.integers(0, donor.positions - span + 1))
    neg = seq.data.copy()
    neg[start : start + span] = donor.data[donor_start : donor_start + span]
    return _pair(seq, neg, "splice", range(start, start + span))


def apply_region_swap(
    a: EmbeddingSequence, b: EmbeddingSequence, spec: CorruptionSpec
) -> ContrastivePair:
    """Replace a span of ``a`` with the same-index span of ``b``: position
    alignment is preserved, unlike splice's free donor offset."""
    if a.data.shape != b.data.shape:
        raise DataError(
            f"region_swap requires same-shape sequences, got {a.data.shape} and {b.data.shape}"
        )
    p = a.positions
    span = _span_length(spec, p)
    rng = _rng(spec)
    start = int(rng.integers(0, p - span + 1))
    neg = a.data.copy()
    neg[start : start + span] = b.data[start : start + span]
    return _pair(a, neg, "region_swap", range(start, start + span))


def apply_offset_shift(seq: EmbeddingSequence, spec: CorruptionSpec) -> ContrastivePair:
    """Add a seeded constant direction to a contiguous span; the embedding
    analog of a global appearance shift over a region."""
    p = seq.positions
    span = _span_length(spec, p)
    rng = _rng(spec)
    start = int(rng.integers(0, p - span + 1))
    direction = rng.normal(size=seq.dim)
    norm = np.linalg.norm(direction)
    if norm == 0.0:
        return _skip(seq, "offset_shift")
    direction /= norm
    magnitude = spec.offset_magnitude
    if magnitude is None:
        magnitude = 0.5 * float(np.mean(np.linalg.norm(seq.data, axis=1)))
    neg = seq.data.copy()
    neg[start : start + span] += (magnitude * direction).astype(neg.dtype)
    return _pair(seq, neg, "offset_shift", range(start, start + span))


def apply_smoothing(seq: EmbeddingSequence, spec: CorruptionSpec) -> ContrastivePair:
    """Replace span rows by a centered moving average of width w. The window
    placement is clamped to stay inside the sequence, so w = positions turns
    every row into the global mean."""
    p = seq.positions
    w = min(spec.smoothing_window, p)
    span = _span_length(spec, p)
    rng = _rng(spec)
    start = int(rng.integers(0, p - span + 1))
    neg = seq.data.copy()
    for t in range(start, start + span):
        lo = min(max(0, t - (w - 1) // 2), p - w)
        neg[t] = seq.data[lo : lo + w].mean(axis=0)
    return _pair(seq, neg, "smoothing", range(start, start + span))


def apply_repetition(seq: EmbeddingSequence, spec: CorruptionSpec) -> ContrastivePair:
    """Overwrite a later span with a verbatim copy of an earlier span;
    sequences too short to hold two disjoint spans are skipped."""
    p = seq.positions
    span = _span_length(spec, p)
    if p < 2 * span:
        return _skip(seq, "repetition")
    rng = _rng(spec)
    src = int(rng.integers(0, p - 2 * span + 1))
    dst = int(rng.integers(src + span, p - span + 1))
    neg = seq.data.copy()
    neg[dst : dst + span] = seq.data[src : src + span]
    return _pair(seq, neg, "repetition", range(dst, dst + span))


def apply_noise(seq: EmbeddingSequence, spec: CorruptionSpec) -> ContrastivePair:
    """Add seeded Gaussian rows, rescaled so each corrupted row moves by the
    configured magnitude; a per-row random-direction cousin of offset_shift."""
    p = seq.positions
    span = _span_length(spec, p)
    rng = _rng(spec)
    start = int(rng.integers(0, p - span + 1))
    magnitude = spec.offset_magnitude
    if magnitude is None:
        magnitude = 0.5 * float(np.mean(np.linalg.norm(seq.data, axis=1)))
    if magnitude == 0.0:
        return _skip(seq, "noise")
    bump = rng.normal(size=(span, seq.dim))
    norms = np.linalg.norm(bump, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    neg = seq.data.copy()
    neg[start : start + span] += (magnitude * bump / norms).astype(neg.dtype)
    return _pair(seq, neg, "noise", range(start, start + span))


# ---------------------------------------------------------------------------
# dispatcher
# ---------------------------------------------------------------------------


def _pick_donor(
    seq: EmbeddingSequence,
    spec: CorruptionSpec,
    donor_pool: Sequence[EmbeddingSequence],
    same_shape: bool,
) -> EmbeddingSequence | None:
    candidates = [
        s
        for s in donor_pool
        if s is not seq
        and (s.id != seq.id or not seq.id)
        and (not same_shape or s.data.shape == seq.data.shape)
    ]
    if not candidates:
        return None
    rng = _rng(spec, 0xD0)
    return candidates[int(rng.integers(0, len(candidates)))]


def corrupt(
    seq: EmbeddingSequence,
    spec: CorruptionSpec,
    donor_pool: Sequence[EmbeddingSequence] | None = None,
) -> ContrastivePair:
    """Route to the operator for ``spec.kind``; donor-based kinds draw their
    donor from ``donor_pool`` with the spec seed."""
    spec.validate()
    if spec.kind in DONOR_KINDS:
        if not donor_pool:
            raise DataError(f"corruption kind {spec.kind!r} requires a donor pool")
        donor = _pick_donor(seq, spec, donor_pool, same_shape=spec.kind == "region_swap")
        if donor is None:
            return _skip(seq, spec.kind)
        if spec.kind == "splice":
            return apply_splice(seq, donor, spec)
        return apply_region_swap(seq, donor, spec)
    if spec.kind == "shuffle":
        return apply_shuffle(seq, spec)
    if spec.kind == "offset_shift":
        return apply_offset_shift(seq, spec)
    if spec.kind == "smoothing":
        return apply_smoothing(seq, spec)
    if spec.kind == "repetition":
        return apply_repetition(seq, spec)
    return apply_noise(seq, spec)


def build_pairs(
    sequences: Sequence[EmbeddingSequence],
    specs: Sequence[CorruptionSpec],
    donor_pool: Sequence[EmbeddingSequence] | None = None,
    seed_salt: int = 0,
) -> list[ContrastivePair]:
    """One pair per (sequence, spec), with per-item seeds derived from the
    spec seed by counter so corpora regenerate identically."""
    donor_pool = donor_pool if donor_pool is not None else sequences
    pairs = []
    for index, seq in enumerate(sequences):
        for spec in specs:
            derived = spec.reseeded(_derive_seed(spec.seed, seed_salt, index))
            pairs.append(corrupt(seq, derived, donor_pool))
    return pairs


def _derive_seed(base: int, salt: int, index: int) -> int:
    return int(
        np.random.SeedSequence((base, salt, index)).generate_state(1, np.uint64)[0]
    )


# ---------------------------------------------------------------------------
# spec files
# ---------------------------------------------------------------------------


def specs_from_kv(entries: dict[str, str]) -> list[CorruptionSpec]:
    """Parse indexed spec entries: ``spec.<n>.kind`` plus optional
    ``seed``, ``span_fraction``, ``offset_magnitude``, ``smoothing_window``."""
    indices = sorted(
        {
            int(key.split(".")[1])
            for key in entries
            if key.startswith("spec.") and key.endswith(".kind")
        }
    )
    if not indices:
        raise ConfigError("corruption spec file defines no spec.<n>.kind entries")
    specs = []
    for n in indices:
        prefix = f"spec.{n}."

        def get(field, default=None):
            return entries.get(prefix + field, default)

        magnitude = get("offset_magnitude")
        specs.append(
            CorruptionSpec(
                kind=str(get("kind")),
                seed=int(get("seed", 0)),
                span_fraction=float(get("span_fraction", 0.25)),
                offset_magnitude=None if magnitude is None else float(magnitude),
                smoothing_window=int(get("smoothing_window", 3)),
            ).validate()
        )
    return specs


def load_spec_file(path) -> list[CorruptionSpec]:
    return specs_from_kv(kv_load_file(path))
