"""Command line entry point: synth, pretrain, finetune, report, inspect."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import DataError, TableDataset, generate_synthetic_suite, load_csv, save_csv
from .fedpretrain import (
    SHARE_MODES,
    CheckpointError,
    Client,
    FedConfig,
    ProtocolError,
    checkpoint_load,
    checkpoint_save,
    init_server,
    pretrain_run,
)
from .finetune import REGIMES, FinetuneConfig, append_records, run_trial
from .metrics import MetricError, aggregate, format_report, load_results, records_from_results, write_report
from .model import VARIANTS, BackboneConfig
from .objectives import CONTRASTIVE, OBJECTIVES, RECONSTRUCTION, SUPERVISED, ObjectiveKind

logger = logging.getLogger("xtab")

MIXED = "mixed"
MIXED_CYCLE = (RECONSTRUCTION, CONTRASTIVE, SUPERVISED)


@dataclass
class ExperimentConfig:
    seed: int = 0
    backbone: dict = field(default_factory=dict)
    objectives: list[str] = field(default_factory=list)
    fed: dict = field(default_factory=dict)
    rounds: int = 2000
    checkpoint_rounds: list[int] | None = None
    finetune: dict = field(default_factory=dict)
    datasets: list[str] = field(default_factory=list)
    out: str = "runs"

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        """Hash of the run-defining fields; the output directory is excluded."""
        payload = {k: v for k, v in self.to_dict().items() if k != "out"}
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def objective_mix(objective: str, n_clients: int) -> list[str]:
    """One objective per client; ``mixed`` cycles through all three."""
    if objective == MIXED:
        return [MIXED_CYCLE[k % len(MIXED_CYCLE)] for k in range(n_clients)]
    return [objective] * n_clients


def load_tables(args: argparse.Namespace) -> list[TableDataset]:
    if args.synthetic:
        suite = generate_synthetic_suite(args.synthetic_skip + args.synthetic, rows=args.synthetic_rows, seed=args.synthetic_seed)
        return suite[args.synthetic_skip:]
    if not args.data:
        raise DataError("no datasets given (use --data or --synthetic)")
    return [load_csv(path, label=args.label) for path in args.data]


def dataset_names(args: argparse.Namespace) -> list[str]:
    if args.synthetic:
        return [f"synthetic:{args.synthetic_seed}:{args.synthetic_skip}+{args.synthetic}x{args.synthetic_rows}"]
    return [str(p) for p in args.data]


def backbone_config(args: argparse.Namespace) -> BackboneConfig:
    return BackboneConfig(variant=args.backbone, n_blocks=args.blocks, d=args.d, n_heads=args.heads)


def cmd_synth(args: argparse.Namespace) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    suite = generate_synthetic_suite(args.n_tables, rows=args.rows, seed=args.seed)
    for ds in suite:
        save_csv(ds, out / f"{ds.name}.csv")
    print(f"wrote {len(suite)} tables to {out}")
    return 0


def cmd_pretrain(args: argparse.Namespace) -> int:
    tables = load_tables(args)
    if not tables:
        raise DataError("pretraining needs at least one dataset")
    rounds = args.rounds
    if args.local_steps_total is not None:
        if args.local_steps_total % args.n_local:
            raise ValueError("--local-steps-total must be a multiple of --n-local")
        rounds = args.local_steps_total // args.n_local
    bcfg = backbone_config(args)
    fed = FedConfig(
        n_local=args.n_local,
        lr=args.lr,
        weight_decay=args.weight_decay,
        optimizer=args.optimizer,
        batch_size=args.batch_size,
        share_mode=args.share_mode,
        aggregation=args.aggregation,
        head_hidden=args.head_hidden,
        embed_dim=args.head_hidden,
        workers=args.workers,
    )
    objectives = objective_mix(args.objective, len(tables))
    exp = ExperimentConfig(
        seed=args.seed,
        backbone=bcfg.to_dict(),
        objectives=objectives,
        fed=asdict(fed),
        rounds=rounds,
        checkpoint_rounds=args.checkpoint_rounds,
        datasets=dataset_names(args),
        out=str(args.out),
    )
    config_hash = exp.config_hash()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps({**exp.to_dict(), "config_hash": config_hash}, indent=2, sort_keys=True))

    clients = [
        Client(k, ds, ObjectiveKind(obj), bcfg, fed, seed=args.seed) for k, (ds, obj) in enumerate(zip(tables, objectives))
    ]
    server = init_server(clients, bcfg, fed, args.seed)
    log_path = out / "pretrain_log.jsonl"
    log_path.unlink(missing_ok=True)
    written = []

    def on_round(record: dict) -> None:
        with log_path.open("a") as fh:
            fh.write(json.dumps(record) + "\n")
        if record["round"] % max(1, args.log_every) == 0:
            logger.info("round %d mean loss %.4f", record["round"], record["mean_loss"])

    def on_checkpoint(round_no: int, ckpt) -> None:
        path = out / f"checkpoint_round{round_no:05d}.xtb"
        checkpoint_save(ckpt, path)
        written.append(path)

    meta = {"objectives": objectives, "seed": args.seed, "config_hash": config_hash, "n_local": args.n_local}
    result = pretrain_run(clients, server, rounds, args.checkpoint_rounds, meta, on_round, on_checkpoint)
    summary = {
        "rounds": rounds,
        "aggregations": result.server.aggregations,
        "broadcasts": result.server.broadcasts,
        "checkpoints": [str(p) for p in written],
        "final_mean_loss": result.history[-1]["mean_loss"] if result.history else None,
        "config_hash": config_hash,
    }
    (out / "pretrain_summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary, indent=2))
    return 0


def cmd_finetune(args: argparse.Namespace) -> int:
    tables = load_tables(args)
    bcfg = backbone_config(args)
    checkpoint = None
    if args.init != "random":
        checkpoint = checkpoint_load(args.init, bcfg)
    ft = FinetuneConfig(
        regime=args.regime,
        init=args.init,
        train_fraction=args.train_fraction,
        batch_size=args.batch_size,
        lr=args.lr,
        weight_decay=args.weight_decay,
        head_hidden=args.head_hidden,
    )
    exp = ExperimentConfig(
        seed=args.seed,
        backbone=bcfg.to_dict(),
        finetune=ft.to_dict(),
        datasets=dataset_names(args),
        out=str(args.out),
    )
    config_hash = exp.config_hash()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    inits = [checkpoint]
    if args.with_baseline and checkpoint is not None:
        inits.append(None)
    jobs = [
        (ds, trial, init)
        for ds in tables
        for trial in range(args.trials)
        for init in inits
    ]

    def run(job):
        ds, trial, init = job
        return run_trial(ds, trial, ft, bcfg, args.seed + trial, init, args.model_name, config_hash)

    if args.workers > 1:
        with ThreadPoolExecutor(args.workers) as pool:
            records = list(pool.map(run, jobs))
    else:
        records = [run(job) for job in jobs]
    append_records(out / "results.jsonl", records)
    for rec in records:
        print(f"{rec['task']} trial={rec['trial']} init={rec['init']} {rec['metric']}={rec['value']:.4f}")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    rows = load_results(args.results)
    records = records_from_results(rows, group_by_round=not args.no_round_grouping)
    report = aggregate(records, baseline=args.baseline)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report(report, out / "report.json", out / "report_trials.csv")
    print(format_report(report))
    return 0


def is_histogram_tensor(name: str) -> bool:
    """Layer-norm parameters and biases are left out of weight histograms."""
    parts = name.split(".")
    return parts[-1] != "bias" and not any(p.startswith("norm") for p in parts)


def cmd_inspect(args: argparse.Namespace) -> int:
    ckpt = checkpoint_load(args.checkpoint)
    cfg = ckpt.backbone_config
    print(f"variant={cfg.variant} blocks={cfg.n_blocks} d={cfg.d} heads={cfg.n_heads} tensors={len(ckpt.tensors)}")
    for key, value in sorted(ckpt.metadata.items()):
        print(f"meta {key}: {value}")
    for name, value in ckpt.tensors.items():
        print(f"{name} shape={list(value.shape)} mean={value.mean():+.4f} std={value.std():.4f}")
        if not is_histogram_tensor(name):
            continue
        counts, edges = np.histogram(value, bins=args.bins)
        peak = max(int(counts.max()), 1)
        for count, lo, hi in zip(counts, edges[:-1], edges[1:]):
            bar = "#" * int(round(40 * count / peak))
            print(f"  [{lo:+.4f}, {hi:+.4f}) {count:7d} {bar}")
    return 0


def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", nargs="*", default=[], help="CSV files (label column via --label or schema sidecar)")
    p.add_argument("--label", default=None, help="label column name for CSV inputs")
    p.add_argument("--synthetic", type=int, default=0, help="use N tables from the synthetic suite")
    p.add_argument("--synthetic-skip", type=int, default=0, help="skip the first M suite tables")
    p.add_argument("--synthetic-seed", type=int, default=0)
    p.add_argument("--synthetic-rows", type=int, default=1000)


def _add_model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--backbone", choices=VARIANTS, default="ftt")
    p.add_argument("--d", type=int, default=192)
    p.add_argument("--blocks", type=int, default=3)
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--head-hidden", type=int, default=192)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--weight-decay", type=float, default=1e-5)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xtab", description="Federated cross-table transformer pretraining")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default="runs", help="output directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic table suite as CSV files")
    p.add_argument("--n-tables", type=int, default=12)
    p.add_argument("--rows", type=int, default=1000)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="federated pretraining of the shared backbone")
    _add_data_args(p)
    _add_model_args(p)
    p.add_argument("--objective", choices=OBJECTIVES + (MIXED,), default=RECONSTRUCTION)
    p.add_argument("--rounds", type=int, default=2000)
    p.add_argument("--n-local", type=int, default=5)
    p.add_argument("--local-steps-total", type=int, default=None, help="overrides --rounds with total/n_local")
    p.add_argument("--share-mode", choices=SHARE_MODES, default="blocks_only")
    p.add_argument("--optimizer", choices=("adamw", "sgd"), default="adamw")
    p.add_argument("--aggregation", choices=("sum", "mean"), default="sum")
    p.add_argument("--checkpoint-rounds", type=int, nargs="*", default=None)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--log-every", type=int, default=50)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="finetune on downstream tables")
    _add_data_args(p)
    _add_model_args(p)
    p.add_argument("--regime", choices=sorted(REGIMES), default="light")
    p.add_argument("--init", default="random", help="'random' or a checkpoint path")
    p.add_argument("--train-fraction", type=float, default=1.0)
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--with-baseline", action="store_true", help="also run a paired random-init trial")
    p.add_argument("--model-name", default="ftt")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("report", help="aggregate a results file")
    p.add_argument("results")
    p.add_argument("--baseline", default=None, help="model name to compare against")
    p.add_argument("--no-round-grouping", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("inspect", help="print a checkpoint's tensors and weight histograms")
    p.add_argument("checkpoint")
    p.add_argument("--bins", type=int, default=20)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except (DataError, CheckpointError, MetricError, ProtocolError, ValueError, OSError) as exc:
        print(f"xtab {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
