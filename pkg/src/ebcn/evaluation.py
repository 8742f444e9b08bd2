"""Paired accuracy, energy gaps, AUC, and per-kind reporting.

A pair counts as correctly detected iff the corrupted twin receives
strictly higher energy than the original; ties are incorrect. Invalid
pairs (silent corruption failures) are counted as skips and excluded from
every accuracy denominator.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .corruption import ContrastivePair, CorruptionSpec, build_pairs
from .errors import ConfigError, DataError
from .network import ConstraintNetwork, aggregate_energy

BRUTE_FORCE_LIMIT = 10_000  # max len(pos) * len(neg) for exhaustive counting


# ---------------------------------------------------------------------------
# AUC
# ---------------------------------------------------------------------------


def _auc_brute(pos: np.ndarray, neg: np.ndarray) -> float:
    wins = (neg[:, None] > pos[None, :]).sum()
    ties = (neg[:, None] == pos[None, :]).sum()
    return float((wins + 0.5 * ties) / (len(pos) * len(neg)))


def _auc_ranks(pos: np.ndarray, neg: np.ndarray) -> float:
    scores = np.concatenate([pos, neg])
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    # average ranks over tie groups (1-based)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum_neg = ranks[len(pos) :].sum()
    n_neg = len(neg)
    u = rank_sum_neg - n_neg * (n_neg + 1) / 2.0
    return float(u / (len(pos) * n_neg))


def auc(pos_scores: Sequence[float], neg_scores: Sequence[float]) -> float:
    """Mann-Whitney estimator: fraction of (neg, pos) pairs with
    neg > pos, ties counted 0.5. Exhaustive counting for small inputs,
    rank-sum otherwise; the two agree exactly."""
    pos = np.asarray(list(pos_scores), dtype=np.float64)
    neg = np.asarray(list(neg_scores), dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise DataError("auc requires nonempty score lists on both sides")
    if pos.size * neg.size <= BRUTE_FORCE_LIMIT:
        return _auc_brute(pos, neg)
    return _auc_ranks(pos, neg)


# ---------------------------------------------------------------------------
# pair scoring
# ---------------------------------------------------------------------------


@dataclass
class PairScore:
    """Stored energies for one pair: enough to re-aggregate under any alpha
    without re-running the network."""

    pair_id: str
    kind: str
    valid: bool
    pos_energy: float
    neg_energy: float
    pos_positions: np.ndarray
    neg_positions: np.ndarray
    corrupted_positions: tuple[int, ...] = ()

    @property
    def gap(self) -> float:
        return self.neg_energy - self.pos_energy

    @property
    def correct(self) -> bool:
        return self.neg_energy > self.pos_energy


def score_pairs(
    net: ConstraintNetwork, pairs: Sequence[ContrastivePair], batch_size: int = 64
) -> list[PairScore]:
    """Forward every pair through a frozen network, batching twins of equal
    length together; output order matches input order."""
    scores: list[PairScore | None] = [None] * len(pairs)
    by_positions: dict[int, list[int]] = {}
    for i, pair in enumerate(pairs):
        if pair.positive.data.shape != pair.negative.data.shape:
            raise DataError(f"pair {pair.positive.id!r}: twins have different shapes")
        by_positions.setdefault(pair.positive.positions, []).append(i)
    alpha = net.config.alpha
    for positions, indices in by_positions.items():
        for start in range(0, len(indices), batch_size):
            chunk = indices[start : start + batch_size]
            stack = np.stack(
                [pairs[i].positive.data for i in chunk]
                + [pairs[i].negative.data for i in chunk]
            )
            e = net.batch_position_energies(stack)
            n = len(chunk)
            for row, i in enumerate(chunk):
                pos_e = np.asarray(e[row], dtype=np.float64)
                neg_e = np.asarray(e[row + n], dtype=np.float64)
                pair = pairs[i]
                scores[i] = PairScore(
                    pair_id=pair.positive.id,
                    kind=pair.kind,
                    valid=pair.valid,
                    pos_energy=aggregate_energy(pos_e, alpha),
                    neg_energy=aggregate_energy(neg_e, alpha),
                    pos_positions=pos_e,
                    neg_positions=neg_e,
                    corrupted_positions=pair.corrupted_positions,
                )
    return [s for s in scores if s is not None]


def reaggregate(scores: Iterable[PairScore], alpha: float) -> list[PairScore]:
    """Recompute pair energies from stored per-position energies under a
    different aggregation coefficient."""
    out = []
    for s in scores:
        out.append(
            PairScore(
                pair_id=s.pair_id,
                kind=s.kind,
                valid=s.valid,
                pos_energy=aggregate_energy(s.pos_positions, alpha),
                neg_energy=aggregate_energy(s.neg_positions, alpha),
                pos_positions=s.pos_positions,
                neg_positions=s.neg_positions,
                corrupted_positions=s.corrupted_positions,
            )
        )
    return out


# ---------------------------------------------------------------------------
# per-kind reports
# ---------------------------------------------------------------------------


@dataclass
class KindRow:
    kind: str
    accuracy: float | None  # None when no valid pairs
    mean_gap: float | None
    valid: int
    skip: int


@dataclass
class PairedReport:
    rows: list[KindRow]
    aggregates: list[KindRow] = field(default_factory=list)

    def row(self, kind: str) -> KindRow:
        for row in self.rows + self.aggregates:
            if row.kind == kind:
                return row
        raise KeyError(kind)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("kind,accuracy,mean_gap,valid,skip\n")
        for row in self.rows + self.aggregates:
            acc = "" if row.accuracy is None else repr(row.accuracy)
            gap = "" if row.mean_gap is None else repr(row.mean_gap)
            buf.write(f"{row.kind},{acc},{gap},{row.valid},{row.skip}\n")
        return buf.getvalue()

    def render(self) -> str:
        lines = [f"{'kind':<18} {'accuracy':>9} {'gap':>8} {'valid':>6} {'skip':>5}"]
        for row in self.rows + self.aggregates:
            acc = "   n/a  " if row.accuracy is None else f"{row.accuracy * 100:7.1f}%"
            gap = "     -- " if row.mean_gap is None else f"{row.mean_gap:+8.3f}"
            lines.append(f"{row.kind:<18} {acc:>9} {gap:>8} {row.valid:>6} {row.skip:>5}")
        return "\n".join(lines) + "\n"


def _row_for(kind: str, scores: list[PairScore]) -> KindRow:
    valid = [s for s in scores if s.valid]
    skip = len(scores) - len(valid)
    if not valid:
        return KindRow(kind, None, None, 0, skip)
    accuracy = sum(s.correct for s in valid) / len(valid)
    mean_gap = float(np.mean([s.gap for s in valid]))
    return KindRow(kind, accuracy, mean_gap, len(valid), skip)


def report_from_scores(
    scores: Sequence[PairScore], trained_kinds: Sequence[str] | None = None
) -> PairedReport:
    by_kind: dict[str, list[PairScore]] = {}
    for s in scores:
        by_kind.setdefault(s.kind, []).append(s)
    rows = [_row_for(kind, group) for kind, group in sorted(by_kind.items())]
    aggregates = [_row_for("all", list(scores))]
    if trained_kinds is not None:
        trained = set(trained_kinds)
        t_scores = [s for s in scores if s.kind in trained]
        u_scores = [s for s in scores if s.kind not in trained]
        aggregates = [
            _row_for("trained", t_scores),
            _row_for("unseen", u_scores),
            _row_for("all", list(scores)),
        ]
    return PairedReport(rows, aggregates)


def paired_accuracy(
    pairs: Sequence[ContrastivePair],
    net: ConstraintNetwork,
    trained_kinds: Sequence[str] | None = None,
    batch_size: int = 64,
) -> PairedReport:
    """Per-kind accuracy over valid pairs, mean energy gap (positive means
    the corrupted twin scored higher), and valid/skip counts."""
    return report_from_scores(score_pairs(net, pairs, batch_size), trained_kinds)


def scores_auc(scores: Sequence[PairScore]) -> float:
    valid = [s for s in scores if s.valid]
    if not valid:
        raise DataError("no valid pairs to compute AUC over")
    return auc([s.pos_energy for s in valid], [s.neg_energy for s in valid])


# ---------------------------------------------------------------------------
# generalization protocol
# ---------------------------------------------------------------------------


def evaluate_generalization(
    net: ConstraintNetwork,
    trained_kinds: Sequence[str],
    held_out_kinds: Sequence[str],
    corpus,
    seed: int = 0,
    batch_size: int = 64,
) -> PairedReport:
    """Build evaluation pairs for the trained kinds plus kinds never used in
    training, and report per-kind rows with the trained/unseen aggregate
    split."""
    overlap = set(trained_kinds) & set(held_out_kinds)
    if overlap:
        raise ConfigError(
            f"held-out kinds overlap trained kinds: {', '.join(sorted(overlap))}"
        )
    specs = [
        CorruptionSpec(kind, seed=seed) for kind in (*trained_kinds, *held_out_kinds)
    ]
    pairs = build_pairs(corpus, specs, seed_salt=seed)
    return paired_accuracy(pairs, net, trained_kinds=trained_kinds, batch_size=batch_size)
