"""Diagnostics for trained branches: violation localization, propagation
profiles, displacement-vector geometry, and aggregation-coefficient sweeps.

The displacement vector of a corruption kind is the mean over samples of
(mean-pooled corrupted representation - mean-pooled original representation)
taken from the layer immediately before the energy head. Its cosine
geometry across kinds explains which violations a branch generalizes to.
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .corruption import ContrastivePair, CorruptionSpec, build_pairs
from .errors import ConfigError, DataError
from .evaluation import PairScore, reaggregate, report_from_scores, scores_auc
from .network import ConstraintNetwork, EnergyReport
from .sequences import EmbeddingSequence

logger = logging.getLogger(__name__)

DEFAULT_ALPHA_GRID = (0.0, 0.1, 0.2, 0.3, 0.5, 1.0)


# ---------------------------------------------------------------------------
# displacement geometry
# ---------------------------------------------------------------------------


@dataclass
class DisplacementRecord:
    kind: str
    mean_displacement: np.ndarray  # (model_dim,)
    sample_count: int


def pooled_representation(net: ConstraintNetwork, arrays: np.ndarray) -> np.ndarray:
    """Mean over positions of the pre-energy-head features: (batch, model_dim)."""
    feats = net.features(Tensor(arrays)).data
    return feats.mean(axis=1)


def collect_displacements(
    net: ConstraintNetwork,
    corpus: Sequence[EmbeddingSequence],
    kinds: Sequence[str],
    n_samples: int,
    seed: int = 0,
    batch_size: int = 64,
) -> list[DisplacementRecord]:
    """Mean displacement per kind over up to ``n_samples`` valid pairs drawn
    from the corpus; kinds whose pairs are all invalid are excluded with a
    warning."""
    if n_samples < 2:
        raise DataError("displacement analysis needs n_samples >= 2 per kind")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xD15)))
    take = min(n_samples, len(corpus))
    chosen = [corpus[int(i)] for i in rng.choice(len(corpus), size=take, replace=False)]
    records: list[DisplacementRecord] = []
    for kind in kinds:
        pairs = [
            p
            for p in build_pairs(chosen, [CorruptionSpec(kind, seed=seed)], donor_pool=corpus)
            if p.valid
        ]
        if len(pairs) < 2:
            logger.warning("kind %r: fewer than 2 valid pairs; excluded", kind)
            continue
        deltas = []
        for start in range(0, len(pairs), batch_size):
            chunk = pairs[start : start + batch_size]
            pos = pooled_representation(net, np.stack([p.positive.data for p in chunk]))
            neg = pooled_representation(net, np.stack([p.negative.data for p in chunk]))
            deltas.append(neg - pos)
        mean_disp = np.concatenate(deltas).mean(axis=0)
        records.append(DisplacementRecord(kind, mean_disp, len(pairs)))
    return records


def similarity_matrix(records: Sequence[DisplacementRecord]) -> tuple[list[str], np.ndarray]:
    """Pairwise cosine similarity between mean displacement vectors;
    symmetric with unit diagonal."""
    if len(records) < 2:
        raise DataError("need at least two displacement records")
    vectors = np.stack([r.mean_displacement for r in records])
    norms = np.linalg.norm(vectors, axis=1)
    if np.any(norms == 0):
        zero = [records[i].kind for i in np.nonzero(norms == 0)[0]]
        raise DataError(f"zero displacement vector for kinds: {', '.join(zero)}")
    unit = vectors / norms[:, None]
    sim = unit @ unit.T
    sim = 0.5 * (sim + sim.T)
    np.fill_diagonal(sim, 1.0)
    return [r.kind for r in records], np.clip(sim, -1.0, 1.0)


@dataclass
class DisplacementResult:
    kinds: list[str]
    matrix: np.ndarray
    records: list[DisplacementRecord]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("kind," + ",".join(self.kinds) + "\n")
        for kind, row in zip(self.kinds, self.matrix):
            buf.write(kind + "," + ",".join(repr(float(v)) for v in row) + "\n")
        return buf.getvalue()


def displacement_matrix(
    net: ConstraintNetwork,
    corpus: Sequence[EmbeddingSequence],
    kinds: Sequence[str],
    n_samples: int,
    seed: int = 0,
) -> DisplacementResult:
    records = collect_displacements(net, corpus, kinds, n_samples, seed=seed)
    labels, matrix = similarity_matrix(records)
    return DisplacementResult(labels, matrix, records)


def subsample_stability(
    net: ConstraintNetwork,
    corpus: Sequence[EmbeddingSequence],
    kinds: Sequence[str],
    n: int,
    k_subsets: int,
    seed: int = 0,
) -> tuple[DisplacementResult, np.ndarray]:
    """Recompute the similarity matrix on ``k_subsets`` seeded half-size
    subsamples and report the per-entry maximum deviation from the full
    matrix."""
    if n < 4:
        raise DataError("n too small to split into half-subsamples")
    if k_subsets < 1:
        raise ConfigError("k_subsets must be >= 1")
    full = displacement_matrix(net, corpus, kinds, n, seed=seed)
    deviation = np.zeros_like(full.matrix)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5AB)))
    take = min(n, len(corpus))
    base = rng.choice(len(corpus), size=take, replace=False)
    for _ in range(k_subsets):
        half_idx = rng.choice(base, size=take // 2, replace=False)
        half = [corpus[int(i)] for i in half_idx]
        sub = displacement_matrix(net, half, kinds, take // 2, seed=seed)
        if sub.kinds != full.kinds:
            raise DataError("subsample dropped a kind; increase n")
        deviation = np.maximum(deviation, np.abs(sub.matrix - full.matrix))
    return full, deviation


# ---------------------------------------------------------------------------
# alpha sweeps
# ---------------------------------------------------------------------------


@dataclass
class AlphaRow:
    alpha: float
    auc: float
    accuracy: float | None


def alpha_sweep(
    stored_scores: Sequence[PairScore], alphas: Sequence[float] = DEFAULT_ALPHA_GRID
) -> list[AlphaRow]:
    """Re-aggregate stored per-position energies for each alpha and recompute
    AUC and paired accuracy; the network never re-runs."""
    rows = []
    for alpha in alphas:
        rescored = reaggregate(stored_scores, alpha)
        report = report_from_scores(rescored)
        rows.append(AlphaRow(float(alpha), scores_auc(rescored), report.row("all").accuracy))
    return rows


def alpha_table_csv(rows: Sequence[AlphaRow]) -> str:
    buf = io.StringIO()
    buf.write("alpha,auc,accuracy\n")
    for row in rows:
        acc = "" if row.accuracy is None else repr(row.accuracy)
        buf.write(f"{row.alpha!r},{row.auc!r},{acc}\n")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# heatmap export
# ---------------------------------------------------------------------------


def heatmap_export(
    report: EnergyReport,
    layout: str | tuple[int, int] = "sequence",
    corrupted_positions: Sequence[int] | None = None,
) -> str:
    """Render per-position energies as CSV.

    ``layout='sequence'`` emits one row per position (with a corrupted-mask
    column when pair metadata is available); a (rows, cols) layout reshapes
    the energies into a grid, appending the mask as a second grid after a
    blank line. Values use repr so the CSV round-trips bitwise."""
    e = report.per_position
    n = e.size
    buf = io.StringIO()
    if layout == "sequence":
        mask = None
        if corrupted_positions is not None:
            mask = np.zeros(n, dtype=int)
            mask[list(corrupted_positions)] = 1
        buf.write("position,energy" + (",corrupted" if mask is not None else "") + "\n")
        for i in range(n):
            line = f"{i},{e[i]!r}"
            if mask is not None:
                line += f",{mask[i]}"
            buf.write(line + "\n")
        return buf.getvalue()
    rows, cols = layout
    if rows * cols != n:
        raise DataError(f"grid layout {rows}x{cols} does not tile {n} positions")
    grid = e.reshape(rows, cols)
    for r in range(rows):
        buf.write(",".join(repr(float(v)) for v in grid[r]) + "\n")
    if corrupted_positions is not None:
        mask = np.zeros(n, dtype=int)
        mask[list(corrupted_positions)] = 1
        buf.write("\n")
        mg = mask.reshape(rows, cols)
        for r in range(rows):
            buf.write(",".join(str(int(v)) for v in mg[r]) + "\n")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# localization and propagation
# ---------------------------------------------------------------------------


def localization_margin(score: PairScore) -> float | None:
    """Mean corrupted-position energy minus mean untouched-position energy on
    the corrupted twin; None when either set is empty (for example shuffle,
    which moves every position)."""
    if not score.valid or not score.corrupted_positions:
        return None
    n = score.neg_positions.size
    corrupted = np.array(sorted(set(score.corrupted_positions)), dtype=int)
    untouched = np.setdiff1d(np.arange(n), corrupted)
    if untouched.size == 0:
        return None
    return float(
        score.neg_positions[corrupted].mean() - score.neg_positions[untouched].mean()
    )


def localization_rate(scores: Sequence[PairScore]) -> tuple[float, int]:
    """Fraction of measurable valid pairs whose corrupted positions carry a
    higher mean energy than the untouched ones, plus the count measured."""
    margins = [m for m in (localization_margin(s) for s in scores) if m is not None]
    if not margins:
        raise DataError("no pairs with both corrupted and untouched positions")
    hits = sum(m > 0 for m in margins)
    return hits / len(margins), len(margins)


def propagation_profile(
    pair: ContrastivePair, net: ConstraintNetwork
) -> dict[int, float]:
    """Mean per-position energy elevation (corrupted minus original), grouped
    by signed offset from the nearest corrupted position. Offset 0 is the
    corrupted span itself; positive offsets are downstream."""
    if not pair.valid or not pair.corrupted_positions:
        raise DataError("propagation profile requires a valid pair with corrupted positions")
    e_pos = net.forward(pair.positive).per_position
    e_neg = net.forward(pair.negative).per_position
    elevation = e_neg - e_pos
    corrupted = np.array(sorted(set(pair.corrupted_positions)), dtype=int)
    profile: dict[int, list[float]] = {}
    for i in range(elevation.size):
        deltas = i - corrupted
        offset = int(deltas[np.argmin(np.abs(deltas))])
        profile.setdefault(offset, []).append(float(elevation[i]))
    return {offset: float(np.mean(vals)) for offset, vals in sorted(profile.items())}


def mean_profile(
    pairs: Sequence[ContrastivePair], net: ConstraintNetwork
) -> dict[int, float]:
    """Average propagation profile over valid pairs."""
    merged: dict[int, list[float]] = {}
    for pair in pairs:
        if not pair.valid or not pair.corrupted_positions:
            continue
        for offset, value in propagation_profile(pair, net).items():
            merged.setdefault(offset, []).append(value)
    if not merged:
        raise DataError("no valid pairs with corrupted positions")
    return {offset: float(np.mean(vals)) for offset, vals in sorted(merged.items())}
