"""Contrastive training of one branch in isolation.

The loss pushes coherent inputs toward zero energy and corrupted twins
above the margin:

    L = E(positive)^2 + max(0, margin - E(negative))^2

averaged over the valid pairs of a batch. Each branch trains in its own
context; no state or gradient ever touches another branch's parameters.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .corruption import ContrastivePair, CorruptionSpec, corrupt
from .errors import ConfigError, DataError, NumericFault
from .evaluation import paired_accuracy
from .kvtext import digest as kv_digest
from .network import ConstraintNetwork, NetworkConfig, save_checkpoint
from .sequences import EmbeddingSequence

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 5.0
    learning_rate: float = 3e-4
    batch_size: int = 32
    epochs: int = 3
    grad_clip: float = 1.0
    seed: int = 0
    mix_corruption: float = 1.0
    mix_ingested: float = 0.0
    checkpoint_every: int = 0  # epochs between checkpoints; 0 = final only
    val_fraction: float = 0.1
    val_pairs: int = 400  # cap on validation pairs scored per epoch
    refresh_corruptions: bool = True  # fresh corruption seeds every epoch
    epoch_pairs: int | None = None  # optional per-epoch training-pair cap
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self) -> "TrainConfig":
        if self.margin <= 0:
            raise ConfigError(f"margin must be > 0, got {self.margin}")
        if self.learning_rate < 0:
            raise ConfigError("learning rate must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.mix_corruption < 0 or self.mix_ingested < 0:
            raise ConfigError("data mix weights must be nonnegative")
        if self.mix_corruption == 0 and self.mix_ingested == 0:
            raise ConfigError("data mix weights must not both be zero")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")
        return self

    def to_kv(self) -> dict[str, str]:
        return {
            "train.margin": repr(self.margin),
            "train.learning_rate": repr(self.learning_rate),
            "train.batch_size": str(self.batch_size),
            "train.epochs": str(self.epochs),
            "train.grad_clip": repr(self.grad_clip),
            "train.seed": str(self.seed),
            "train.mix_corruption": repr(self.mix_corruption),
            "train.mix_ingested": repr(self.mix_ingested),
            "train.checkpoint_every": str(self.checkpoint_every),
            "train.val_fraction": repr(self.val_fraction),
            "train.val_pairs": str(self.val_pairs),
            "train.refresh_corruptions": str(int(self.refresh_corruptions)),
            "train.epoch_pairs": "" if self.epoch_pairs is None else str(self.epoch_pairs),
        }

    @staticmethod
    def from_kv(entries: dict[str, str]) -> "TrainConfig":
        def get(key, default):
            return entries.get(f"train.{key}", default)

        epoch_pairs = get("epoch_pairs", "")
        return TrainConfig(
            margin=float(get("margin", 5.0)),
            learning_rate=float(get("learning_rate", 3e-4)),
            batch_size=int(get("batch_size", 32)),
            epochs=int(get("epochs", 3)),
            grad_clip=float(get("grad_clip", 1.0)),
            seed=int(get("seed", 0)),
            mix_corruption=float(get("mix_corruption", 1.0)),
            mix_ingested=float(get("mix_ingested", 0.0)),
            checkpoint_every=int(get("checkpoint_every", 0)),
            val_fraction=float(get("val_fraction", 0.1)),
            val_pairs=int(get("val_pairs", 400)),
            refresh_corruptions=bool(int(get("refresh_corruptions", 1))),
            epoch_pairs=None if epoch_pairs in ("", None) else int(epoch_pairs),
        ).validate()


def contrastive_loss(e_pos: float, e_neg: float, margin: float) -> float:
    """Scalar form of the pair loss; both terms rest at zero when the
    positive sits at zero energy and the negative clears the margin."""
    if margin <= 0:
        raise ConfigError(f"margin must be > 0, got {margin}")
    hinge = max(0.0, margin - e_neg)
    return e_pos * e_pos + hinge * hinge


@dataclass
class TrainLog:
    seed: int
    config_hash: str
    records: list[dict] = field(default_factory=list)

    def add(self, **fields) -> None:
        self.records.append(fields)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in self.records)

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_jsonl())

    @property
    def final_val_accuracy(self) -> float | None:
        for rec in reversed(self.records):
            if rec.get("val_accuracy") is not None:
                return rec["val_accuracy"]
        return None


class _Adam:
    """First-order update with adaptive moments and global-norm clipping."""

    def __init__(self, params: dict[str, Tensor], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0

    def step(self) -> None:
        cfg = self.cfg
        grads = {k: t.grad for k, t in self.params.items() if t.grad is not None}
        if not grads:
            return
        if cfg.grad_clip > 0:
            total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
            if total > cfg.grad_clip:
                scale = cfg.grad_clip / total
                for g in grads.values():
                    g *= scale
        self.t += 1
        b1, b2 = cfg.adam_beta1, cfg.adam_beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for name, g in grads.items():
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / bias1) / (np.sqrt(v / bias2) + cfg.adam_eps)
            self.params[name].data -= cfg.learning_rate * update

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.grad = None


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(parts).generate_state(1, np.uint64)[0])


def _split_indices(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5B117)))
    order = rng.permutation(n)
    n_val = int(round(n * val_fraction))
    return order[n_val:], order[:n_val]


def train_branch(
    corpus: Sequence[EmbeddingSequence],
    specs: Sequence[CorruptionSpec],
    cfg: TrainConfig,
    net_config: NetworkConfig | None = None,
    paired: Sequence[ContrastivePair] | None = None,
    checkpoint_path=None,
) -> tuple[ConstraintNetwork, TrainLog]:
    """Train one branch from corruption specs, ingested pairs, or both.

    Returns the trained network and a log with one record per epoch (plus a
    baseline validation record for epoch 0). With ``epochs=0`` the network
    is returned at initialization.
    """
    cfg = cfg.validate()
    specs = [s.validate() for s in specs]
    use_corruption = cfg.mix_corruption > 0 and bool(specs)
    use_ingested = cfg.mix_ingested > 0 and bool(paired)
    if not use_corruption and not use_ingested:
        raise ConfigError(
            "no training data: provide corruption specs and/or ingested pairs "
            "with nonzero mix weights"
        )
    if use_corruption and not corpus:
        raise DataError("corruption training requires a corpus")

    dims = {seq.dim for seq in corpus} | {p.positive.dim for p in (paired or [])}
    if len(dims) > 1:
        raise DataError(f"sequences disagree on dim: {sorted(dims)}")

    net_config = (net_config or NetworkConfig()).validate()
    net = ConstraintNetwork.initialize(net_config, seed=cfg.seed, dtype=np.float64)
    optimizer = _Adam(net.trainable_parameters(), cfg)

    config_hash = kv_digest({**cfg.to_kv(), **net_config.to_kv()})
    log = TrainLog(seed=cfg.seed, config_hash=config_hash)

    # seeded split of both sources
    train_seqs: list[EmbeddingSequence] = []
    val_seqs: list[EmbeddingSequence] = []
    if corpus:
        tr_idx, va_idx = _split_indices(len(corpus), cfg.val_fraction, cfg.seed)
        train_seqs = [corpus[int(i)] for i in tr_idx]
        val_seqs = [corpus[int(i)] for i in va_idx]
    train_pairs_ing: list[ContrastivePair] = []
    val_pairs_ing: list[ContrastivePair] = []
    if paired:
        tr_idx, va_idx = _split_indices(len(paired), cfg.val_fraction, cfg.seed + 1)
        train_pairs_ing = [paired[int(i)] for i in tr_idx]
        val_pairs_ing = [paired[int(i)] for i in va_idx]

    # fixed validation pairs: corruption pairs for the val split use seeds
    # independent of the epoch so accuracy is comparable across epochs
    val_pairs: list[ContrastivePair] = list(val_pairs_ing)
    if use_corruption and val_seqs:
        for i, seq in enumerate(val_seqs):
            spec = specs[i % len(specs)]
            val_pairs.append(
                corrupt(seq, spec.reseeded(_derived_seed(cfg.seed, 0xFA1, i)), val_seqs)
            )
    if len(val_pairs) > cfg.val_pairs:
        keep = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xCA9))).choice(
            len(val_pairs), size=cfg.val_pairs, replace=False
        )
        val_pairs = [val_pairs[int(i)] for i in sorted(keep)]

    def validate_now() -> float | None:
        if not val_pairs:
            return None
        report = paired_accuracy(val_pairs, net)
        return report.row("all").accuracy

    start = time.perf_counter()
    log.add(
        epoch=0,
        loss=None,
        val_accuracy=validate_now(),
        wall_time_s=round(time.perf_counter() - start, 3),
    )

    mix_total = (cfg.mix_corruption if use_corruption else 0.0) + (
        cfg.mix_ingested if use_ingested else 0.0
    )
    p_corruption = (cfg.mix_corruption / mix_total) if use_corruption else 0.0

    for epoch in range(1, cfg.epochs + 1):
        epoch_salt = epoch if cfg.refresh_corruptions else 0
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xE90C, epoch_salt)))
        plan: list[tuple[str, int]] = []
        if use_corruption:
            order = rng.permutation(len(train_seqs))
            plan.extend(("corruption", int(i)) for i in order)
        if use_ingested:
            order = rng.permutation(len(train_pairs_ing))
            n_ing = len(order)
            if use_corruption and p_corruption < 1.0:
                # scale ingested draws to honor the mix ratio against the corpus
                want = int(round(len(train_seqs) * (1.0 - p_corruption) / p_corruption))
                reps = order if want >= n_ing else order[:want]
                plan.extend(("ingested", int(i)) for i in reps)
            else:
                plan.extend(("ingested", int(i)) for i in order)
        rng.shuffle(plan)
        if cfg.epoch_pairs is not None:
            plan = plan[: cfg.epoch_pairs]

        epoch_losses: list[float] = []
        for batch_no, start_idx in enumerate(range(0, len(plan), cfg.batch_size)):
            items = plan[start_idx : start_idx + cfg.batch_size]
            batch_pairs: list[ContrastivePair] = []
            for slot, (source, idx) in enumerate(items):
                if source == "corruption":
                    spec = specs[idx % len(specs)]
                    seed = _derived_seed(cfg.seed, epoch_salt, idx)
                    pair = corrupt(train_seqs[idx], spec.reseeded(seed), train_seqs)
                else:
                    pair = train_pairs_ing[idx]
                if pair.valid:
                    batch_pairs.append(pair)
            if not batch_pairs:
                logger.warning(
                    "epoch %d batch %d: no valid pairs, batch skipped", epoch, batch_no
                )
                continue

            optimizer.zero_grads()
            n = len(batch_pairs)
            stack = np.stack(
                [p.positive.data for p in batch_pairs]
                + [p.negative.data for p in batch_pairs]
            ).astype(net.dtype)
            try:
                tape = Tape()
                with tape:
                    energies = net.total_energies(Tensor(stack))
                    pair_view = ad.reshape(energies, (2, n))
                    margin_t = Tensor(np.full((2, n), cfg.margin, dtype=net.dtype))
                    hinge_all = ad.square(ad.hinge(ad.sub(margin_t, pair_view)))
                    pos_sq = ad.square(pair_view)
                    # row 0 holds positives (E^2 term), row 1 negatives (hinge term)
                    row_mask = np.zeros((2, n), dtype=net.dtype)
                    row_mask[0, :] = 1.0
                    pos_term = ad.mul(pos_sq, Tensor(row_mask))
                    neg_term = ad.mul(hinge_all, Tensor(1.0 - row_mask))
                    per_item = ad.add(pos_term, neg_term)
                    loss = ad.scalar_mul(
                        ad.mean_axis(ad.mean_axis(per_item, 1), 0), 2.0
                    )  # mean over pairs: undo the mean over the 2 rows
                tape.backward(loss)
            except NumericFault as fault:
                raise NumericFault(
                    f"epoch {epoch} batch {batch_no}: {fault}"
                ) from fault
            loss_value = float(loss.data)
            if not np.isfinite(loss_value):
                raise NumericFault(f"non-finite loss at epoch {epoch} batch {batch_no}")
            epoch_losses.append(loss_value)
            optimizer.step()

        log.add(
            epoch=epoch,
            loss=float(np.mean(epoch_losses)) if epoch_losses else None,
            val_accuracy=validate_now(),
            wall_time_s=round(time.perf_counter() - start, 3),
        )
        if (
            checkpoint_path is not None
            and cfg.checkpoint_every
            and epoch % cfg.checkpoint_every == 0
            and epoch != cfg.epochs
        ):
            save_checkpoint(net, f"{checkpoint_path}.epoch{epoch}")

    if checkpoint_path is not None:
        save_checkpoint(net, checkpoint_path)
    return net, log
