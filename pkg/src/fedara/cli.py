"""Command-line entry point: ``fedara {run,schedule,drift,partition-stats} CONFIG``.

Every subcommand writes CSV into the configured output directory (or
``--output``). Exit status is 0 on success, 1 for a bad config, 2 when the
run itself fails.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from .config import ConfigError, load_config, parse_config, parse_drift_config
from .data import ParseError, PartitionSpec, label_entropy, partition, split
from .federation import RoundRecord, final_ranks, load_data, run_experiment, schedule_of
from .metrics import drift_monte_carlo
from .numerics import ContractError, Rng
from .rank_alloc import budget

log = logging.getLogger("fedara")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _outdir(cfg, override) -> Path:
    return Path(override if override is not None else cfg.output)


def cmd_run(cfg, out: Path) -> int:
    def progress(rec):
        log.info("round %3d  val_acc=%.4f  avg_rank=%.2f  bytes=%d", rec.round, rec.val_acc,
                 rec.avg_rank, rec.bytes_up + rec.bytes_down)

    art = run_experiment(cfg, progress)
    write_atomic(out / "rounds.csv", csv_text(RoundRecord.CSV_FIELDS, [r.csv_row() for r in art.records]))
    write_atomic(out / "ranks.csv", csv_text(["site", "rank"], final_ranks(art)))
    last = art.records[-1]
    summary = (
        f"method={cfg.method} test_acc={art.test_acc:.4f} val_acc={last.val_acc:.4f} "
        f"avg_rank={last.avg_rank:.2f} total_gb={art.ledger.total / 1e9:.6f} "
        f"bytes_up={art.ledger.total_up} bytes_down={art.ledger.total_down}"
    )
    write_atomic(out / "summary.txt", summary + "\n")
    print(summary)
    return EXIT_OK


def cmd_schedule(cfg, out: Path) -> int:
    sched = schedule_of(cfg)
    rows = [(t, budget(sched, t)) for t in range(cfg.T + 1)]
    write_atomic(out / "schedule.csv", csv_text(["t", "budget"], rows))
    print(f"b0={sched.b0} bT={sched.bT} t_w={sched.t_w} t_f={sched.t_f} T={sched.T}")
    return EXIT_OK


def cmd_drift(cfg, out: Path) -> int:
    report = drift_monte_carlo(cfg.params())
    write_atomic(out / "drift.csv", report.to_csv())
    for flavor, slope in report.slopes.items():
        print(f"slope {flavor}: {slope:.4f}")
    return EXIT_OK


def cmd_partition_stats(cfg, out: Path) -> int:
    root = Rng(cfg.seed)
    train, _, _ = split(load_data(cfg, root), root.fork("split"))
    shards = partition(
        train,
        PartitionSpec(cfg.partition, cfg.num_clients, cfg.seed, cfg.alpha, cfg.labels_per_client),
    )
    C = train.num_classes
    rows = []
    for cid, s in enumerate(shards):
        counts = np.bincount(train.labels[s], minlength=C)
        rows.append([cid, len(s), int(np.count_nonzero(counts)),
                     f"{label_entropy(train.labels[s], C):.6f}", *counts.tolist()])
    header = ["client", "size", "distinct_labels", "entropy"] + [f"count_{c}" for c in range(C)]
    write_atomic(out / "partition.csv", csv_text(header, rows))
    ent = np.mean([float(r[3]) for r in rows])
    print(f"clients={len(rows)} mean_entropy={ent:.4f} mean_distinct_labels={np.mean([r[2] for r in rows]):.2f}")
    return EXIT_OK


COMMANDS = {
    "run": (cmd_run, parse_config),
    "schedule": (cmd_schedule, parse_config),
    "drift": (cmd_drift, parse_drift_config),
    "partition-stats": (cmd_partition_stats, parse_config),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedara", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("config", help="key = value config file")
        sp.add_argument("-o", "--output", help="output directory (overrides the config)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    handler, parser = COMMANDS[args.command]
    try:
        cfg = load_config(args.config, parser)
    except OSError as exc:
        print(f"error: cannot read config {args.config}: {exc.strerror}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"error: {args.config}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return handler(cfg, _outdir(cfg, args.output))
    except (ContractError, ParseError, OSError, ArithmeticError) as exc:
        where = f" ({exc.filename})" if isinstance(exc, OSError) and exc.filename else ""
        print(f"error: {exc}{where}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
