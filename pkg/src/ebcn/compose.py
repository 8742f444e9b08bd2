"""Inference-time composition of independently trained frozen branches.

Combined energy is exactly linear in branch energies:

    E = E_structural + gate * E_frequency + beta * E_local

with absent branches contributing zero. The binary gate is a dataset-level
decision made by calibration; it never adapts per sample. All branches must
consume features of the same input dimension so their energies share a
scale — mismatches are rejected as representation incompatibility rather
than silently projected.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .corruption import ContrastivePair
from .errors import ConfigError, DataError
from .evaluation import PairScore, score_pairs
from .kvtext import dump_file as kv_dump_file, load_file as kv_load_file
from .network import ConstraintNetwork, EnergyReport, load_checkpoint
from .sequences import EmbeddingSequence

logger = logging.getLogger(__name__)

BRANCH_NAMES = ("structural", "frequency", "local")
DEFAULT_VIEW = "original"


@dataclass
class BranchEnsemble:
    structural: ConstraintNetwork
    frequency: ConstraintNetwork | None = None
    local: ConstraintNetwork | None = None
    beta: float = 0.3
    gate: int = 0
    views: dict[str, str] = field(default_factory=dict)  # branch name -> view tag
    tau: float | None = None

    def __post_init__(self):
        if self.beta < 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if self.gate not in (0, 1):
            raise ConfigError(f"gate must be 0 or 1, got {self.gate}")
        dims = {name: net.config.input_dim for name, net in self.branches().items()}
        if len(set(dims.values())) > 1:
            raise ConfigError(
                "representation incompatibility: branches consume different "
                f"input dims {dims}"
            )
        for name in self.branches():
            self.views.setdefault(name, DEFAULT_VIEW)

    def branches(self) -> dict[str, ConstraintNetwork]:
        out = {"structural": self.structural}
        if self.frequency is not None:
            out["frequency"] = self.frequency
        if self.local is not None:
            out["local"] = self.local
        return out

    def weight(self, name: str) -> float:
        if name == "structural":
            return 1.0
        if name == "frequency":
            return float(self.gate)
        return self.beta


@dataclass
class ComposedEnergy:
    reports: dict[str, EnergyReport]
    terms: dict[str, float]  # weighted contribution of each branch
    combined: float


def compose_energy(
    seq_views: Mapping[str, EmbeddingSequence | np.ndarray] | EmbeddingSequence | np.ndarray,
    ens: BranchEnsemble,
) -> ComposedEnergy:
    """Evaluate every active branch on its view and combine linearly.

    ``seq_views`` maps view tags to sequences; passing a single sequence
    uses it for every branch (all views identical)."""
    if not isinstance(seq_views, Mapping):
        seq_views = {tag: seq_views for tag in set(ens.views.values())}
    reports: dict[str, EnergyReport] = {}
    terms: dict[str, float] = {}
    combined = 0.0
    for name, net in ens.branches().items():
        tag = ens.views[name]
        if tag not in seq_views:
            raise DataError(f"no input view {tag!r} supplied for branch {name!r}")
        seq = seq_views[tag]
        arr = seq.data if isinstance(seq, EmbeddingSequence) else np.asarray(seq)
        if arr.ndim != 2 or arr.shape[1] != net.config.input_dim:
            raise DataError(
                f"representation incompatibility: view {tag!r} has dim "
                f"{arr.shape[-1] if arr.ndim else '?'} but branch {name!r} expects "
                f"{net.config.input_dim}"
            )
        report = net.forward(arr)
        reports[name] = report
        term = ens.weight(name) * report.total_energy
        terms[name] = term
        combined += term
    return ComposedEnergy(reports, terms, combined)


# ---------------------------------------------------------------------------
# calibration and attribution
# ---------------------------------------------------------------------------


def mean_energy_gap(net: ConstraintNetwork, pairs: Sequence[ContrastivePair]) -> float:
    scores = [s for s in score_pairs(net, pairs) if s.valid]
    if not scores:
        raise DataError("no valid calibration pairs")
    return float(np.mean([s.gap for s in scores]))


def default_gate_threshold(
    structural: ConstraintNetwork, pairs: Sequence[ContrastivePair]
) -> float:
    """Half the structural branch's calibration gap: the frequency branch
    earns its gate only by showing a comparable separation."""
    return 0.5 * mean_energy_gap(structural, pairs)


def calibrate_gate(
    freq_branch: ConstraintNetwork,
    calibration_pairs: Sequence[ContrastivePair],
    threshold: float,
) -> tuple[int, float]:
    """Dataset-level heuristic: gate opens iff the frequency branch's mean
    energy gap on the calibration pairs exceeds the threshold."""
    if not calibration_pairs:
        raise DataError("empty calibration set")
    gap = mean_energy_gap(freq_branch, calibration_pairs)
    gate = 1 if gap > threshold else 0
    logger.info("frequency gate calibration: gap=%.4f threshold=%.4f gate=%d", gap, threshold, gate)
    return gate, gap


def calibrate_ensemble(
    ens: BranchEnsemble,
    calibration_pairs: Sequence[ContrastivePair],
    threshold: float | None = None,
) -> BranchEnsemble:
    """Set the ensemble gate from its frequency branch; without a frequency
    branch the gate stays closed."""
    if ens.frequency is None:
        ens.gate = 0
        return ens
    if threshold is None:
        threshold = default_gate_threshold(ens.structural, calibration_pairs)
    gate, _ = calibrate_gate(ens.frequency, calibration_pairs, threshold)
    ens.gate = gate
    ens.tau = threshold
    return ens


def branch_contribution(
    ens: BranchEnsemble, eval_pairs: Sequence[ContrastivePair]
) -> dict[str, float]:
    """Share of each branch in the combined energy: mean |weighted term| over
    pairs, normalized to sum to one over active branches. Both twins of each
    pair contribute."""
    sums = {name: 0.0 for name in ens.branches()}
    for pair in eval_pairs:
        for seq in (pair.positive, pair.negative):
            composed = compose_energy(seq, ens)
            for name, term in composed.terms.items():
                sums[name] += abs(term)
    total = sum(sums.values())
    if total == 0.0:
        return {name: 0.0 for name in sums}
    return {name: value / total for name, value in sums.items()}


def ensemble_scores(
    ens: BranchEnsemble, pairs: Sequence[ContrastivePair], batch_size: int = 64
) -> list[PairScore]:
    """Combined-energy scores for pairs whose views are all identical: each
    branch scores the same sequences, then terms add linearly.

    The per-position vector stored on each score is the weighted sum of the
    branch per-position energies, consistent with the combined scalar only
    up to aggregation nonlinearity; the scalar energies are exact."""
    per_branch = {
        name: score_pairs(net, pairs, batch_size) for name, net in ens.branches().items()
    }
    combined: list[PairScore] = []
    names = list(per_branch)
    for idx in range(len(pairs)):
        base = per_branch[names[0]][idx]
        pos_e = 0.0
        neg_e = 0.0
        for name in names:
            s = per_branch[name][idx]
            w = ens.weight(name)
            pos_e += w * s.pos_energy
            neg_e += w * s.neg_energy
        combined.append(
            PairScore(
                pair_id=base.pair_id,
                kind=base.kind,
                valid=base.valid,
                pos_energy=pos_e,
                neg_energy=neg_e,
                pos_positions=base.pos_positions,
                neg_positions=base.neg_positions,
                corrupted_positions=base.corrupted_positions,
            )
        )
    return combined


# ---------------------------------------------------------------------------
# manifest files
# ---------------------------------------------------------------------------


def save_ensemble_manifest(
    path,
    checkpoints: Mapping[str, str],
    beta: float = 0.3,
    gate: int = 0,
    tau: float | None = None,
    views: Mapping[str, str] | None = None,
) -> None:
    if "structural" not in checkpoints:
        raise ConfigError("ensemble manifest requires a structural branch checkpoint")
    entries = {"beta": repr(float(beta)), "gate": str(int(gate))}
    if tau is not None:
        entries["tau"] = repr(float(tau))
    for name, ckpt in checkpoints.items():
        if name not in BRANCH_NAMES:
            raise ConfigError(f"unknown branch name {name!r}; expected one of {BRANCH_NAMES}")
        entries[f"branch.{name}.checkpoint"] = str(ckpt)
        entries[f"branch.{name}.view"] = (views or {}).get(name, DEFAULT_VIEW)
    kv_dump_file(path, entries)


def load_ensemble(path) -> BranchEnsemble:
    entries = kv_load_file(path)
    base = Path(path).parent

    def load_branch(name: str) -> ConstraintNetwork | None:
        key = f"branch.{name}.checkpoint"
        if key not in entries:
            return None
        ckpt = Path(entries[key])
        if not ckpt.is_absolute():
            ckpt = base / ckpt
        return load_checkpoint(ckpt)

    structural = load_branch("structural")
    if structural is None:
        raise ConfigError(f"ensemble manifest {path} lists no structural branch")
    views = {
        name: entries.get(f"branch.{name}.view", DEFAULT_VIEW) for name in BRANCH_NAMES
    }
    tau = entries.get("tau")
    return BranchEnsemble(
        structural=structural,
        frequency=load_branch("frequency"),
        local=load_branch("local"),
        beta=float(entries.get("beta", 0.3)),
        gate=int(entries.get("gate", 0)),
        views=views,
        tau=None if tau in (None, "") else float(tau),
    )
