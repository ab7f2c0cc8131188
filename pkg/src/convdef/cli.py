"""Command-line driver.

Subcommands: ingest, synth, train, eval, sweep, report. Exit codes: 0 on
success, 1 for configuration errors, 2 for data errors, 3 for numerical
failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import _backend
from .data import CsvSchema, DataError, ingest_csv_with_report, save_counts, synth_generate
from .harness import (
    EvalReport,
    build_named_model,
    emit_report,
    load_data,
    load_experiment_config,
    parse_report,
    run_experiment,
    run_sweep,
)
from .inference import NumericalError, train
from .model import ConfigurationError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


def _add_common(parser):
    parser.add_argument("--config", type=Path, help="experiment config file (YAML)")
    parser.add_argument("--seed", type=int, help="override the run seed")
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--format", choices=("json", "csv"), default="csv")
    parser.add_argument("--out", type=Path, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="convdef",
        description="Tied-weight deep exponential families over count data",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="aggregate a CSV export into a cached matrix")
    p.add_argument("--csv", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--date-col", default="Date")
    p.add_argument("--loc-col", default="Community Area")
    p.add_argument("--type-col", default="Primary Type")
    p.add_argument("--type-filter", default="THEFT")
    p.add_argument("--locations", type=int, default=77)
    p.add_argument("--days", type=int, default=357)

    p = sub.add_parser("synth", help="generate a planted dataset")
    _add_common(p)

    p = sub.add_parser("train", help="train one model on all samples of a dataset")
    _add_common(p)

    p = sub.add_parser("eval", help="leave-one-year-out evaluation of one model")
    _add_common(p)

    p = sub.add_parser("sweep", help="models x reveal-count grid evaluation")
    _add_common(p)

    p = sub.add_parser("report", help="re-aggregate and emit a saved rows file")
    p.add_argument("--rows", type=Path, required=True)
    p.add_argument("--format", choices=("json", "csv"), default="csv")
    p.add_argument("--out", type=Path, required=True)

    return parser


def _load_cfg(args):
    if not args.config:
        raise ConfigurationError("--config is required for this command")
    cfg = load_experiment_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out=str(args.out))
    if cfg.out is None:
        raise ConfigurationError("no output directory: pass --out or set out:")
    return cfg


def _cmd_ingest(args) -> int:
    schema = CsvSchema(
        date_column=args.date_col,
        location_column=args.loc_col,
        type_column=args.type_col,
        type_filter=args.type_filter or None,
        n_locations=args.locations,
        n_days=args.days,
    )
    matrix, report = ingest_csv_with_report(args.csv, schema)
    args.out.mkdir(parents=True, exist_ok=True)
    save_counts(args.out / "counts.bin", matrix)
    (args.out / "ingest_report.json").write_text(
        json.dumps(report.as_dict(), indent=2) + "\n"
    )
    print(
        f"ingested {report.accepted} rows into {matrix.n_samples} samples "
        f"of dim {matrix.dim} ({report.rejected} rejected)"
    )
    return EXIT_OK


def _cmd_synth(args) -> int:
    cfg = _load_cfg(args)
    if cfg.synth is None:
        raise ConfigurationError("synth command needs a data.synth section")
    matrix, truth = synth_generate(cfg.synth)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    save_counts(out / "counts.bin", matrix)
    import numpy as np

    np.save(out / "true_rates.npy", truth)
    print(f"wrote {matrix.n_samples} x {matrix.dim} counts to {out / 'counts.bin'}")
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg = _load_cfg(args)
    data = load_data(cfg)
    spec = build_named_model(
        cfg.model, data.n_days, data.n_locations, cfg.priors, custom_path=cfg.custom_model
    )
    print(f"model {cfg.model}: {spec.describe_chain()}")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    inf = cfg.inference
    vstate, report = train(
        spec,
        data,
        inf.estimator(cfg.seed),
        inf.optimizer(),
        inf.train_iterations,
        checkpoint_path=out / "checkpoint.bin",
    )
    import numpy as np

    np.savetxt(out / "elbo_trace.txt", report.elbo_trace)
    print(
        f"trained {report.iterations} iterations in {report.wall_time:.1f}s, "
        f"final ELBO {report.final_elbo:.3f}"
    )
    return EXIT_OK


def _run_and_emit(cfg, report: EvalReport, fmt) -> int:
    paths = emit_report(report, fmt, cfg.out)
    for agg in report.aggregates():
        print(
            f"{agg['model']} reveal={agg['reveal_count']}: "
            f"mean={agg['mean_heldout']:.3f} se={agg['se_heldout']:.3f} "
            f"diff_vs_hp={agg['mean_diff_vs_hp']:.3f}"
        )
    if report.partial:
        print(f"report is PARTIAL: {len(report.errors)} failed runs", file=sys.stderr)
    print(f"wrote {', '.join(str(p) for p in paths)}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    _print_chain(cfg)
    report = run_experiment(cfg, threads=args.threads)
    return _run_and_emit(cfg, report, args.format)


def _cmd_sweep(args) -> int:
    cfg = _load_cfg(args)
    _print_chain(cfg)
    report = run_sweep(cfg, threads=args.threads)
    return _run_and_emit(cfg, report, args.format)


def _print_chain(cfg):
    data = load_data(cfg)
    for name in cfg.models or [cfg.model]:
        if name == "HP":
            continue
        spec = build_named_model(
            name, data.n_days, data.n_locations, cfg.priors, custom_path=cfg.custom_model
        )
        print(f"model {name}: {spec.describe_chain()}")


def _cmd_report(args) -> int:
    report = parse_report(args.rows)
    emit_report(report, args.format, args.out)
    print(f"re-emitted {len(report.rows)} rows to {args.out}")
    return EXIT_OK


_COMMANDS = {
    "ingest": _cmd_ingest,
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    logger.debug("backend: %s", _backend.BACKEND)
    try:
        return _COMMANDS[args.command](args)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
