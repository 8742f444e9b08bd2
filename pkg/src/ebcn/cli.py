"""Operator-facing command line.

Every run writes its artifacts under a directory named by the hash of the
effective configuration plus the seed, with a manifest recording inputs,
the effective config, and output paths, so any run is reproducible from
its manifest alone. Errors exit with one machine-parsable line:
``config-error: ...`` (exit 2), ``data-error: ...`` (exit 3), or
``numeric-fault: ...`` (exit 4).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, analysis, cache, compose, corruption, evaluation, kvtext
from .errors import ConfigError, DataError, NumericFault
from .evaluation import PairScore
from .network import NetworkConfig, load_checkpoint
from .testbed import TestbedConfig, generate_corpus, learnability_floor
from .training import TrainConfig, train_branch


# ---------------------------------------------------------------------------
# run-directory plumbing
# ---------------------------------------------------------------------------


def _effective_config(args) -> dict[str, str]:
    entries: dict[str, str] = {}
    if getattr(args, "config", None):
        entries.update(kvtext.load_file(args.config))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        entries[key.strip()] = value.strip()
    return entries


def _apply_seed(entries: dict[str, str], args, *keys: str) -> None:
    if getattr(args, "seed", None) is not None:
        for key in keys:
            entries[key] = str(args.seed)


class RunDir:
    def __init__(self, out_dir: str, command: str, entries: dict[str, str], seed: int):
        config_hash = kvtext.digest({"command": command, **entries})
        self.path = Path(out_dir) / f"{config_hash[:12]}-s{seed}"
        self.path.mkdir(parents=True, exist_ok=True)
        self.manifest: dict[str, str] = {
            "command": command,
            "config_hash": config_hash,
            "seed": str(seed),
            "version": __version__,
        }
        for key, value in entries.items():
            self.manifest[f"config.{key}"] = value

    def record_input(self, name: str, path) -> None:
        self.manifest[f"input.{name}"] = str(path)
        with open(path, "rb") as fh:
            from .binio import fnv1a64

            self.manifest[f"input.{name}.fnv"] = f"{fnv1a64(fh.read()):#018x}"

    def output(self, name: str, filename: str) -> Path:
        self.manifest[f"output.{name}"] = filename
        return self.path / filename

    def finish(self) -> None:
        kvtext.dump_file(self.path / "manifest.txt", self.manifest)
        print(self.path)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_synthetic(args) -> int:
    entries = _effective_config(args)
    _apply_seed(entries, args, "testbed.seed")
    cfg = TestbedConfig.from_kv(entries)
    run = RunDir(args.out_dir, "gen-synthetic", cfg.to_kv(), cfg.seed)
    corpus = generate_corpus(cfg)
    floors = learnability_floor(corpus, seed=cfg.seed)
    if not args.skip_gate:
        for kind, value in floors.items():
            if value < 0.7:
                raise ConfigError(
                    f"testbed config fails the learnability gate: baseline AUC on "
                    f"{kind} is {value:.3f} < 0.7"
                )
    for kind, value in floors.items():
        run.manifest[f"baseline_auc.{kind}"] = f"{value:.6f}"
    cache.write_cache(corpus, run.output("corpus", "corpus.ebcn"))
    run.finish()
    return 0


def cmd_corrupt(args) -> int:
    entries = _effective_config(args)
    _apply_seed(entries, args, "seed")
    specs = corruption.specs_from_kv(entries)
    seed = int(entries.get("seed", 0))
    run = RunDir(args.out_dir, "corrupt", entries, seed)
    run.record_input("corpus", args.cache)
    corpus = cache.read_cache(args.cache)
    coherent = [s for s in corpus if s.label == 0]
    if not coherent:
        raise DataError("input cache holds no coherent (label 0) records")
    pairs = corruption.build_pairs(coherent, specs, seed_salt=seed)
    records = cache.pairs_to_records(pairs)
    cache.write_cache(records, run.output("paired", "paired.ebcn"))
    run.manifest["pairs.total"] = str(len(pairs))
    run.manifest["pairs.valid"] = str(sum(p.valid for p in pairs))
    run.finish()
    return 0


def cmd_train(args) -> int:
    entries = _effective_config(args)
    _apply_seed(entries, args, "train.seed")
    train_cfg = TrainConfig.from_kv(entries)
    net_cfg = NetworkConfig.from_kv(entries)
    run = RunDir(args.out_dir, "train", {**train_cfg.to_kv(), **net_cfg.to_kv()}, train_cfg.seed)
    run.record_input("corpus", args.cache)
    corpus = [s for s in cache.read_cache(args.cache) if s.label == 0]
    for seq in corpus:
        seq.data = seq.data.astype(np.float64)

    specs = []
    if args.corruptions:
        run.record_input("corruptions", args.corruptions)
        specs = corruption.load_spec_file(args.corruptions)
    paired = None
    if args.paired:
        run.record_input("paired", args.paired)
        paired = cache.ingest_paired(args.paired).pairs

    ckpt = run.output("checkpoint", "checkpoint.ebck")
    net, log = train_branch(
        corpus, specs, train_cfg, net_config=net_cfg, paired=paired, checkpoint_path=ckpt
    )
    log.write(run.output("trainlog", "trainlog.jsonl"))
    final = log.final_val_accuracy
    run.manifest["final_val_accuracy"] = "" if final is None else f"{final:.6f}"
    run.finish()
    return 0


def _scores_to_jsonl(scores: list[PairScore]) -> str:
    lines = []
    for s in scores:
        lines.append(
            json.dumps(
                {
                    "pair_id": s.pair_id,
                    "kind": s.kind,
                    "valid": s.valid,
                    "pos_energy": s.pos_energy,
                    "neg_energy": s.neg_energy,
                    "pos_positions": [float(v) for v in s.pos_positions],
                    "neg_positions": [float(v) for v in s.neg_positions],
                    "corrupted_positions": list(s.corrupted_positions),
                },
                sort_keys=True,
            )
        )
    return "".join(line + "\n" for line in lines)


def _scores_from_jsonl(path) -> list[PairScore]:
    scores = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            scores.append(
                PairScore(
                    pair_id=rec["pair_id"],
                    kind=rec["kind"],
                    valid=rec["valid"],
                    pos_energy=rec["pos_energy"],
                    neg_energy=rec["neg_energy"],
                    pos_positions=np.asarray(rec["pos_positions"], dtype=np.float64),
                    neg_positions=np.asarray(rec["neg_positions"], dtype=np.float64),
                    corrupted_positions=tuple(rec["corrupted_positions"]),
                )
            )
    if not scores:
        raise DataError(f"no stored energies in {path}")
    return scores


def cmd_eval(args) -> int:
    entries = _effective_config(args)
    trained_kinds = args.trained_kinds.split(",") if args.trained_kinds else None
    seed = args.seed if args.seed is not None else 0
    run = RunDir(args.out_dir, "eval", entries, seed)
    run.record_input("checkpoint", args.checkpoint)
    run.record_input("pairs", args.pairs)
    net = load_checkpoint(args.checkpoint)
    dataset = cache.ingest_paired(args.pairs)
    scores = evaluation.score_pairs(net, dataset.pairs)
    report = evaluation.report_from_scores(scores, trained_kinds)
    run.output("report_csv", "report.csv").write_text(report.to_csv(), encoding="utf-8")
    run.output("report_txt", "report.txt").write_text(report.render(), encoding="utf-8")
    run.output("energies", "energies.jsonl").write_text(
        _scores_to_jsonl(scores), encoding="utf-8"
    )
    valid = [s for s in scores if s.valid]
    if valid:
        run.manifest["auc"] = f"{evaluation.scores_auc(scores):.6f}"
    run.finish()
    print(report.render(), end="")
    return 0


def cmd_compose(args) -> int:
    entries = _effective_config(args)
    seed = args.seed if args.seed is not None else 0
    run = RunDir(args.out_dir, "compose", entries, seed)
    run.record_input("manifest", args.manifest)
    run.record_input("pairs", args.pairs)
    ens = compose.load_ensemble(args.manifest)
    dataset = cache.ingest_paired(args.pairs)

    rows = ["branch,auc,accuracy"]
    for name, net in ens.branches().items():
        scores = evaluation.score_pairs(net, dataset.pairs)
        report = evaluation.report_from_scores(scores)
        acc = report.row("all").accuracy
        rows.append(f"{name},{evaluation.scores_auc(scores)!r},{'' if acc is None else repr(acc)}")
    combined_scores = compose.ensemble_scores(ens, dataset.pairs)
    creport = evaluation.report_from_scores(combined_scores)
    cacc = creport.row("all").accuracy
    rows.append(
        f"combined,{evaluation.scores_auc(combined_scores)!r},{'' if cacc is None else repr(cacc)}"
    )
    contributions = compose.branch_contribution(ens, dataset.pairs[: args.contribution_pairs])
    for name, share in contributions.items():
        run.manifest[f"contribution.{name}"] = f"{share:.6f}"
    run.output("report_csv", "composed.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    run.finish()
    print("\n".join(rows))
    return 0


def cmd_calibrate_gate(args) -> int:
    entries = _effective_config(args)
    seed = args.seed if args.seed is not None else 0
    run = RunDir(args.out_dir, "calibrate-gate", entries, seed)
    run.record_input("manifest", args.manifest)
    run.record_input("calibration", args.calibration)
    ens = compose.load_ensemble(args.manifest)
    dataset = cache.ingest_paired(args.calibration)
    tau = args.tau
    if tau is None:
        tau = compose.default_gate_threshold(ens.structural, dataset.pairs)
    gate = 0
    gap = 0.0
    if ens.frequency is not None:
        gate, gap = compose.calibrate_gate(ens.frequency, dataset.pairs, tau)
    old = kvtext.load_file(args.manifest)
    old["gate"] = str(gate)
    old["tau"] = repr(float(tau))
    out_manifest = run.output("manifest", "ensemble.kv")
    kvtext.dump_file(out_manifest, old)
    run.manifest["gate"] = str(gate)
    run.manifest["gap"] = f"{gap:.6f}"
    run.manifest["tau"] = f"{tau:.6f}"
    run.finish()
    print(f"gate={gate} gap={gap:.4f} tau={tau:.4f}")
    return 0


def cmd_analyze_displacement(args) -> int:
    entries = _effective_config(args)
    seed = args.seed if args.seed is not None else 0
    run = RunDir(args.out_dir, "analyze-displacement", entries, seed)
    run.record_input("checkpoint", args.checkpoint)
    run.record_input("corpus", args.cache)
    net = load_checkpoint(args.checkpoint)
    corpus = [s for s in cache.read_cache(args.cache) if s.label == 0]
    kinds = args.kinds.split(",")
    result = analysis.displacement_matrix(net, corpus, kinds, args.samples, seed=seed)
    run.output("matrix", "displacement.csv").write_text(result.to_csv(), encoding="utf-8")
    if args.stability:
        _, deviation = analysis.subsample_stability(
            net, corpus, kinds, args.samples, args.stability, seed=seed
        )
        lines = ["kind," + ",".join(result.kinds)]
        for kind, row in zip(result.kinds, deviation):
            lines.append(kind + "," + ",".join(f"{v:.6f}" for v in row))
        run.output("stability", "stability.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    run.finish()
    return 0


def cmd_sweep_alpha(args) -> int:
    entries = _effective_config(args)
    seed = args.seed if args.seed is not None else 0
    run = RunDir(args.out_dir, "sweep-alpha", entries, seed)
    run.record_input("energies", args.energies)
    scores = _scores_from_jsonl(args.energies)
    alphas = [float(a) for a in args.alphas.split(",")]
    rows = analysis.alpha_sweep(scores, alphas)
    csv_text = analysis.alpha_table_csv(rows)
    run.output("table", "alpha_sweep.csv").write_text(csv_text, encoding="utf-8")
    run.finish()
    print(csv_text, end="")
    return 0


def cmd_export_heatmap(args) -> int:
    entries = _effective_config(args)
    seed = args.seed if args.seed is not None else 0
    run = RunDir(args.out_dir, "export-heatmap", entries, seed)
    run.record_input("checkpoint", args.checkpoint)
    run.record_input("cache", args.cache)
    net = load_checkpoint(args.checkpoint)
    records = cache.read_cache(args.cache)
    by_id = {r.id: r for r in records}
    if args.record_id not in by_id:
        raise DataError(f"record {args.record_id!r} not found in {args.cache}")
    record = by_id[args.record_id]
    corrupted = None
    if record.label == 1 and record.pair_id and record.pair_id in by_id:
        partner = by_id[record.pair_id]
        if partner.data.shape == record.data.shape:
            corrupted = corruption.diff_positions(partner.data, record.data)
    layout: str | tuple[int, int]
    if args.layout == "sequence":
        layout = "sequence"
    else:
        try:
            r, c = args.layout.lower().split("x")
            layout = (int(r), int(c))
        except ValueError:
            raise ConfigError(f"--layout expects 'sequence' or RxC, got {args.layout!r}")
    report = net.forward(record)
    csv_text = analysis.heatmap_export(report, layout, corrupted_positions=corrupted)
    run.output("heatmap", "heatmap.csv").write_text(csv_text, encoding="utf-8")
    run.manifest["record_id"] = args.record_id
    run.manifest["total_energy"] = repr(report.total_energy)
    run.finish()
    return 0


def cmd_cache_inspect(args) -> int:
    info = cache.inspect_cache(args.cache)
    print(info.render(max_rows=args.max_rows), end="")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ebcn",
        description="Train and analyze energy-based constraint networks over embedding sequences.",
    )
    parser.add_argument("--version", action="version", version=f"ebcn {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_dir=True):
        p.add_argument("--config", help="canonical key-value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry")
        p.add_argument("--seed", type=int, default=None, help="override the run seed")
        if out_dir:
            p.add_argument("--out-dir", default="runs", help="root directory for run outputs")

    p = sub.add_parser("gen-synthetic", help="generate a synthetic corpus cache")
    common(p)
    p.add_argument("--skip-gate", action="store_true", help="skip the learnability gate")
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("corrupt", help="build a paired cache from corruption specs")
    common(p)
    p.add_argument("--cache", required=True, help="input corpus cache")
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("train", help="train one branch")
    common(p)
    p.add_argument("--cache", required=True, help="corpus cache of coherent sequences")
    p.add_argument("--corruptions", help="corruption spec file for on-the-fly pairs")
    p.add_argument("--paired", help="paired cache of ingested contrastive pairs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a paired cache")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pairs", required=True, help="paired cache")
    p.add_argument("--trained-kinds", help="comma-separated kinds the branch trained on")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compose", help="evaluate a branch ensemble")
    common(p)
    p.add_argument("--manifest", required=True, help="ensemble manifest file")
    p.add_argument("--pairs", required=True, help="paired cache")
    p.add_argument("--contribution-pairs", type=int, default=64)
    p.set_defaults(func=cmd_compose)

    p = sub.add_parser("calibrate-gate", help="calibrate the frequency gate")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--calibration", required=True, help="paired cache from the target dataset")
    p.add_argument("--tau", type=float, default=None, help="gate threshold")
    p.set_defaults(func=cmd_calibrate_gate)

    p = sub.add_parser("analyze-displacement", help="displacement-vector similarity matrix")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cache", required=True, help="corpus cache")
    p.add_argument("--kinds", required=True, help="comma-separated corruption kinds")
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--stability", type=int, default=0, help="also run k half-subsample stability checks")
    p.set_defaults(func=cmd_analyze_displacement)

    p = sub.add_parser("sweep-alpha", help="re-aggregate stored energies over an alpha grid")
    common(p)
    p.add_argument("--energies", required=True, help="energies.jsonl from eval")
    p.add_argument("--alphas", default="0,0.1,0.2,0.3,0.5,1.0")
    p.set_defaults(func=cmd_sweep_alpha)

    p = sub.add_parser("export-heatmap", help="per-position energies as CSV")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--record-id", required=True)
    p.add_argument("--layout", default="sequence", help="'sequence' or RxC grid")
    p.set_defaults(func=cmd_export_heatmap)

    p = sub.add_parser("cache-inspect", help="print cache header, records, and per-kind counts")
    p.add_argument("--cache", required=True)
    p.add_argument("--max-rows", type=int, default=20)
    p.set_defaults(func=cmd_cache_inspect)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config-error: {err}", file=sys.stderr)
        return 2
    except DataError as err:
        print(f"data-error: {err}", file=sys.stderr)
        return 3
    except NumericFault as err:
        print(f"numeric-fault: {err}", file=sys.stderr)
        return 4
    except FileNotFoundError as err:
        print(f"data-error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
