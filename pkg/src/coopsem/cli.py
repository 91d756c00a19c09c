"""Command-line entry point: data generation, training, SNR sweeps, baselines and plots.

    coopsem make-toy-data --out data/toy
    coopsem train --profile toy --seeds 1 2 3 --out runs/toy
    coopsem evaluate --out runs/toy
    coopsem baseline --method digital --snr-grid=-3,18 --out runs/toy
    coopsem plot --out runs/toy
    coopsem all --profile toy --out runs/toy
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
import traceback
from pathlib import Path

from .config import DATA_ROOT_ENV, METHODS, ExperimentConfig, profile_defaults
from .data import DatasetSplit, generate_toy_dataset, load_retrieval_dataset, write_dataset
from .errors import ConfigError, CoopSemError, DependencyError
from .experiment import REPORT_FIELDS, evaluate_seed
from .plotting import plot_report
from .training import TrainLog, load_checkpoint, train_all


log = logging.getLogger("coopsem")

CHECKPOINTS = ("stage1", "stage4", "dls", "cosc_nofusion")
SYSTEM_FOR = {"stage1": "stage1", "stage4": "cosc", "dls": "dls", "cosc_nofusion": "cosc_nofusion"}


# --- helpers ----------------------------------------------------------------------


def _split_list(values, cast) -> list:
    """Accept both ``--seeds 1 2 3`` and ``--seeds 1,2,3``."""
    try:
        return [cast(v) for item in values for v in str(item).split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(str(exc), "cli") from None


def build_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else profile_defaults(args.profile)
    if args.snr_grid:
        cfg.snr_grid_db = _split_list(args.snr_grid, float)
    if args.seeds:
        cfg.seeds = _split_list(args.seeds, int)
    if args.out:
        cfg.out_dir = args.out
    if getattr(args, "method", None):
        cfg.methods = list(args.method)
    return cfg.validate()


def load_split(cfg: ExperimentConfig, seed: int) -> DatasetSplit:
    """The dataset on disk if a root is configured, else the procedural toy corpus for ``seed``."""
    root = cfg.resolved_dataset_root()
    if root:
        return load_retrieval_dataset(root, cfg.profile)
    if cfg.profile != "toy":
        raise ConfigError(f"set {DATA_ROOT_ENV} or dataset_root", "dataset_root")
    return generate_toy_dataset(cfg.toy, rng=seed)


def checkpoint_dir(cfg: ExperimentConfig, seed: int) -> Path:
    return Path(cfg.out_dir) / "checkpoints" / f"seed{seed}"


def load_systems(cfg: ExperimentConfig, seed: int) -> dict:
    d = checkpoint_dir(cfg, seed)
    systems = {}
    for name in CHECKPOINTS:
        systems[SYSTEM_FOR[name]] = load_checkpoint(d / f"{name}.pt", cfg)
    if 4 not in systems["cosc"].stages_done:
        raise DependencyError(f"{d / 'stage4.pt'} has not completed stage 4")
    return systems


def write_report(rows, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fields = list(REPORT_FIELDS) + sorted({k for r in rows for k in r} - set(REPORT_FIELDS))
    csv_path = out / "report.csv"
    with csv_path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
    json_path = out / "report.json"
    json_path.write_text(json.dumps(rows, indent=1))
    return csv_path, json_path


def read_report(path) -> list[dict]:
    path = Path(path)
    if path.is_dir():
        path = path / "report.json"
    if not path.is_file():
        raise DependencyError(f"report {path} not found")
    if path.suffix == ".json":
        return json.loads(path.read_text())
    with path.open() as fh:
        return [dict(r) for r in csv.DictReader(fh)]


class RunLock:
    """Exclusive lock file in the output directory so two runs do not interleave artifacts."""

    def __init__(self, out_dir):
        self.path = Path(out_dir) / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(f"{self.path} exists; another run is using this directory", "out_dir") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


# --- subcommands --------------------------------------------------------------------


def cmd_make_toy_data(args) -> int:
    cfg = profile_defaults("toy")
    split = generate_toy_dataset(cfg.toy, rng=args.data_seed)
    out = write_dataset(split, args.out)
    print(f"wrote toy corpus to {out}")
    return 0


def cmd_train(args, cfg: ExperimentConfig | None = None) -> int:
    cfg = cfg or build_config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.yaml")
    for seed in cfg.seeds:
        t0 = time.time()
        split = load_split(cfg, seed)
        train_log = TrainLog()
        train_all(cfg, split, seed, train_log, checkpoint_dir(cfg, seed))
        with (out / f"train_log_seed{seed}.csv").open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["stage", "epoch", "loss", "val", "checksums"])
            w.writeheader()
            for r in train_log.records:
                w.writerow({**r, "checksums": json.dumps(r["checksums"])})
        print(f"seed {seed}: trained in {time.time() - t0:.0f} s")
    return 0


def cmd_evaluate(args, cfg: ExperimentConfig | None = None) -> int:
    cfg = cfg or build_config(args)
    rows = []
    for seed in cfg.seeds:
        systems = load_systems(cfg, seed)
        rows += evaluate_seed(cfg, systems, load_split(cfg, seed), seed, cfg.methods)
    csv_path, _ = write_report(rows, cfg.out_dir)
    print(f"wrote {len(rows)} rows to {csv_path}")
    return 0


def cmd_baseline(args, cfg: ExperimentConfig | None = None) -> int:
    cfg = cfg or build_config(args)
    if not args.method:
        cfg.methods = ["digital", "softcast"]
    rows = []
    for seed in cfg.seeds:
        stage1 = load_checkpoint(checkpoint_dir(cfg, seed) / "stage1.pt", cfg)
        rows += evaluate_seed(cfg, {"stage1": stage1}, load_split(cfg, seed), seed, cfg.methods)
    csv_path, _ = write_report(rows, Path(cfg.out_dir) / "baselines")
    print(f"wrote {len(rows)} rows to {csv_path}")
    return 0


def cmd_plot(args) -> int:
    report = Path(args.report or args.out or "runs/toy")
    base = report if report.is_dir() else report.parent
    out = Path(args.out) if args.out else base
    for p in plot_report(read_report(report), out / "figures"):
        print(f"wrote {p}")
    return 0


def cmd_all(args, cfg: ExperimentConfig | None = None) -> int:
    cfg = cfg or build_config(args)
    cmd_train(args, cfg)
    cmd_evaluate(args, cfg)
    for p in plot_report(read_report(cfg.out_dir), Path(cfg.out_dir) / "figures"):
        print(f"wrote {p}")
    return 0


COMMANDS = {
    "make-toy-data": cmd_make_toy_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "baseline": cmd_baseline,
    "plot": cmd_plot,
    "all": cmd_all,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="coopsem", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML experiment config")
        sp.add_argument("--profile", choices=("toy", "full"), default="toy")
        sp.add_argument("--snr-grid", nargs="+", help="SNR points in dB, e.g. --snr-grid=-6,-3,0,6,12,18")
        sp.add_argument("--seeds", nargs="+", help="e.g. --seeds 1,2,3")
        sp.add_argument("--out", help="output directory")

    sp = sub.add_parser("make-toy-data", help="write the procedural toy corpus as image files")
    sp.add_argument("--out", required=True)
    sp.add_argument("--data-seed", type=int, default=0)
    for name in ("train", "evaluate", "all"):
        sp = sub.add_parser(name)
        common(sp)
        if name != "train":
            sp.add_argument("--method", nargs="+", choices=METHODS)
    sp = sub.add_parser("baseline", help="classical baselines only (needs the stage-1 checkpoint)")
    common(sp)
    sp.add_argument("--method", nargs="+", choices=("digital", "softcast"))
    sp = sub.add_parser("plot")
    sp.add_argument("--report", help="report.json / report.csv or the directory holding it")
    sp.add_argument("--out")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    out = Path(getattr(args, "out", None) or "runs/toy")
    try:
        if args.command in ("train", "evaluate", "baseline", "all"):
            cfg = build_config(args)
            out = Path(cfg.out_dir)
            with RunLock(out):
                return COMMANDS[args.command](args, cfg)
        return COMMANDS[args.command](args)
    except CoopSemError as exc:
        out.mkdir(parents=True, exist_ok=True)
        record = {"command": args.command, "error": type(exc).__name__, "message": str(exc),
                  "traceback": traceback.format_exc()}
        (out / "error.json").write_text(json.dumps(record, indent=1))
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
