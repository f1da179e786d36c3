"""``memuda`` command line.

Subcommands::

    memuda config dump [--config FILE]       print the full config with defaults
    memuda generate --config FILE             write the three dataset files
    memuda train --config FILE [--grid] [--resume CKPT] [--stop-at N]
    memuda eval --config FILE --checkpoint CKPT
    memuda gradcheck [--instances N] [--seed S]
    memuda grid --config FILE                 same as ``train --grid``

Exit codes: 0 success, 1 validation error, 2 I/O error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .config import ConfigError, ExperimentConfig, load_config
from .data import DomainData, generate_domain, load_dataset, save_dataset, split_identities, with_counterparts
from .numerics import InvalidParameterError, NumericalError
from .trainer import GRID_ROWS, EpochReport, Trainer, summarize

log = logging.getLogger("memuda")

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3
DATA_FILES = ("source.imda", "target_train.imda", "target_test.imda")


# ------------------------------------------------------------------ data

def experiment_data(cfg: ExperimentConfig):
    """Source, target-train (with style counterparts) and target-test tables."""
    source = generate_domain(cfg.source, "source")
    target = generate_domain(cfg.target, "target")
    train, test = split_identities(target, cfg.test_fraction)
    return source, with_counterparts(train, cfg.num_counterparts), test


def write_datasets(cfg: ExperimentConfig, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, data in zip(DATA_FILES, experiment_data(cfg)):
        p = out / name
        save_dataset(p, data)
        paths.append(p)
    return paths


def read_datasets(data_dir) -> tuple[DomainData, DomainData, DomainData]:
    d = Path(data_dir)
    return (load_dataset(d / DATA_FILES[0], "source"),
            load_dataset(d / DATA_FILES[1], "target"),
            load_dataset(d / DATA_FILES[2], "target"))


# ------------------------------------------------------------ checkpoints

def save_checkpoint(path, trainer: Trainer, cfg: ExperimentConfig) -> Path:
    """Arrays go to ``<path>.npz``, epoch/config/reports to ``<path>.json``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path.with_suffix(".npz"), **trainer.state_dict())
    meta = {
        "epoch": trainer.epoch,
        "config": cfg.to_dict(),
        "reports": [r.as_dict() for r in trainer.reports],
    }
    path.with_suffix(".json").write_text(json.dumps(meta, indent=1), encoding="utf-8")
    return path


def load_checkpoint(path):
    path = Path(path)
    with np.load(path.with_suffix(".npz")) as z:
        state = {k: z[k] for k in z.files}
    meta = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
    meta["reports"] = [EpochReport(**r) for r in meta["reports"]]
    return state, meta


# ---------------------------------------------------------------- outputs

def write_metrics(path, reports) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EpochReport.CSV_FIELDS)
        for r in reports:
            w.writerow(r.csv_row())


def _json_safe(obj):
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def write_summary(path, reports, extra=None) -> None:
    s = summarize(reports)
    s.pop("seconds")
    if extra:
        s.update(extra)
    Path(path).write_text(json.dumps(_json_safe(s), indent=1, sort_keys=True), encoding="utf-8")


# --------------------------------------------------------------- commands

def _load_or_generate(cfg: ExperimentConfig, data_dir):
    d = Path(data_dir) if data_dir else Path(cfg.output_dir)
    if all((d / f).exists() for f in DATA_FILES):
        return read_datasets(d)
    if data_dir:
        missing = [f for f in DATA_FILES if not (d / f).exists()]
        raise FileNotFoundError(f"missing dataset file(s) in {d}: {', '.join(missing)}")
    return experiment_data(cfg)


def _run_training(cfg: ExperimentConfig, data, out: Path, resume=None, stop_at=None, tag="") -> list:
    source, target_train, target_test = data
    trainer = Trainer(cfg.train, source, target_train, target_test)
    if resume is not None:
        state, meta = load_checkpoint(resume)
        trainer.load_state_dict(state, meta["epoch"], meta["reports"])
        log.info("resumed from %s at epoch %d", resume, meta["epoch"])
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / f"checkpoint{tag}"

    def on_epoch(t, report):
        save_checkpoint(ckpt, t, cfg)

    trainer.fit(until=stop_at, callback=on_epoch, eval_every=cfg.eval_every)
    write_metrics(out / f"metrics{tag}.csv", trainer.reports)
    write_summary(out / f"summary{tag}.json", trainer.reports, {"epoch": trainer.epoch})
    return trainer.reports


def cmd_config(args) -> int:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    sys.stdout.write(cfg.dump())
    return EXIT_OK


def cmd_generate(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out or cfg.output_dir)
    paths = write_datasets(cfg, out)
    for p, data in zip(paths, read_datasets(out)):
        ids = np.unique(data.identity)
        print(f"{p}: {len(data)} rows, {ids.size} identities [{ids.min()}..{ids.max()}], "
              f"{data.num_cameras} cameras, {int((~data.real_mask).sum())} counterparts")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.epochs is not None:
        cfg = dataclasses.replace(cfg, train=cfg.train.replace(epochs=args.epochs))
    out = Path(args.out or cfg.output_dir)
    data = _load_or_generate(cfg, args.data)
    if args.grid:
        table = {}
        for name, changes in GRID_ROWS:
            row_cfg = dataclasses.replace(cfg, train=cfg.train.replace(**changes))
            reports = _run_training(row_cfg, data, out, tag=f"_{name}")
            table[name] = reports[-1] if reports else None
            print(f"{name:16s} rank1 {reports[-1].rank1:.3f}  mAP {reports[-1].mAP:.3f}")
        return EXIT_OK
    reports = _run_training(cfg, data, out, resume=args.resume, stop_at=args.stop_at)
    if reports:
        r = reports[-1]
        print(f"epoch {r.epoch}: rank1 {r.rank1:.3f} rank5 {r.rank5:.3f} mAP {r.mAP:.3f}")
    return EXIT_OK


def cmd_grid(args) -> int:
    args.grid, args.resume, args.stop_at = True, None, None
    return cmd_train(args)


def cmd_eval(args) -> int:
    state, meta = load_checkpoint(args.checkpoint)
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    source, target_train, target_test = _load_or_generate(cfg, args.data)
    trainer = Trainer(cfg.train, source, target_train, target_test)
    trainer.load_state_dict(state, meta["epoch"], meta["reports"])
    metrics = trainer.evaluate()
    print(json.dumps(_json_safe(metrics), indent=1, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    result = run_suite(instances=args.instances, seed=args.seed)
    by_component = {}
    for r in result.reports:
        comp = r.name.split("[")[0].split(".")[0]
        by_component.setdefault(comp, []).append(r)
    for comp, reps in sorted(by_component.items()):
        worst = max(r.max_relative_error for r in reps)
        ok = all(r.passed for r in reps)
        print(f"{'PASS' if ok else 'FAIL'}  {comp:28s} {len(reps):4d} checks  worst rel err {worst:.2e}")
    print(f"{len(result.reports)} checks over {len(by_component)} components")
    if not result.passed:
        print(f"worst offender: {result.worst}")
        return EXIT_NUMERIC
    return EXIT_OK


# ------------------------------------------------------------------ main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="memuda", description=__doc__.split("\n\n")[0])
    p.add_argument("--threads", type=int, default=1, help="BLAS/numba thread cap (default 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("config", help="configuration utilities")
    c.add_argument("action", choices=["dump"])
    c.add_argument("--config")
    c.set_defaults(func=cmd_config)

    g = sub.add_parser("generate", help="write dataset files")
    g.add_argument("--config", required=True)
    g.add_argument("--out")
    g.set_defaults(func=cmd_generate)

    for name, func in (("train", cmd_train), ("grid", cmd_grid)):
        t = sub.add_parser(name, help="train (grid: all ablation rows)")
        t.add_argument("--config", required=True)
        t.add_argument("--data", help="directory holding the dataset files")
        t.add_argument("--out")
        t.add_argument("--epochs", type=int)
        if name == "train":
            t.add_argument("--grid", action="store_true", help="run every ablation row")
            t.add_argument("--resume", help="checkpoint path (without suffix)")
            t.add_argument("--stop-at", type=int, help="stop after this many epochs")
        t.set_defaults(func=func)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the target test split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config")
    e.add_argument("--data")
    e.set_defaults(func=cmd_eval)

    k = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    k.add_argument("--instances", type=int, default=12)
    k.add_argument("--seed", type=int, default=0)
    k.set_defaults(func=cmd_gradcheck)
    return p


def _set_numba_threads(n: int) -> None:
    try:
        import numba
    except ImportError:
        return
    with warnings.catch_warnings():
        # numba probes for TBB when the pool starts; an old TBB only warns
        warnings.simplefilter("ignore", numba.NumbaWarning)
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        _set_numba_threads(args.threads)
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InvalidParameterError, ValueError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
