"""Command line entry point.

Exit codes: 0 on success, 2 when a precondition fails (missing input or
upstream stage, bad configuration), 1 on any other error.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import sys

from .config import PipelineConfig
from .io import CohortError, WfdbParseError
from .pipeline import STAGES, PreconditionError, make_report_bundle, run_all, run_stage

logger = logging.getLogger("ecgclues")


def _common(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="pipeline config file (INI sections)")
    parser.add_argument("--workdir", default=default, help="directory holding stage artifacts")
    parser.add_argument("--seed", type=int, default=default, help="override run.seed")
    parser.add_argument("--records", default=default, help="directory of WFDB or CSV records")
    parser.add_argument("--manifest", default=default, help="cohort manifest CSV")
    parser.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS if suppress else 0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ecgclues",
                                     description="ECG beat features, GBDT classification and counterfactual reports")
    _common(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    _common(common, suppress=True)

    for stage in STAGES:
        p = sub.add_parser(stage, parents=[common], help=f"run the {stage} stage")
        p.add_argument("--force", action="store_true", help="rerun even when inputs are unchanged")
        if stage == "ingest":
            p.add_argument("--out", default=argparse.SUPPRESS, help="alias of --workdir")

    p = sub.add_parser("run", parents=[common], help="run every stage in order")
    p.add_argument("--force", action="store_true")
    p.add_argument("--until", choices=STAGES, default=STAGES[-1], help="last stage to run")

    p = sub.add_parser("bundle", parents=[common], help="collect reports, cf tables and metrics")
    p.add_argument("--out", default=None, help="bundle directory (default: WORKDIR/bundle)")

    p = sub.add_parser("config", parents=[common], help="show the effective configuration")
    p.add_argument("--dump", action="store_true", help="print every key with its value")

    p = sub.add_parser("synth-cohort", parents=[common], help="write a synthetic two-class cohort")
    p.add_argument("--out", required=True)
    p.add_argument("--n-per-class", type=int, default=20)
    p.add_argument("--fs", type=float, default=100.0)
    p.add_argument("--n-beats", type=int, default=10)
    p.add_argument("--snr-db", type=float, default=30.0)
    return parser


def _load_config(args) -> PipelineConfig:
    try:
        return _apply_flags(PipelineConfig.from_file(args.config) if args.config else PipelineConfig(), args)
    except (ValueError, configparser.Error) as exc:
        raise PreconditionError(f"bad configuration: {exc}") from exc


def _apply_flags(cfg: PipelineConfig, args) -> PipelineConfig:
    paths = {}
    workdir = getattr(args, "out", None) if args.command == "ingest" else None
    workdir = workdir or args.workdir
    if workdir:
        paths["workdir"] = workdir
    if args.records:
        paths["records"] = args.records
    if args.manifest:
        paths["manifest"] = args.manifest
    if paths:
        cfg = cfg.with_overrides("paths", **paths)
    if args.seed is not None:
        cfg = cfg.with_overrides("run", seed=args.seed)
    return cfg


def _synth(args) -> None:
    from .synth import make_cohort, write_cohort

    seed = args.seed if args.seed is not None else 0
    records = make_cohort(args.n_per_class, fs=args.fs, seed=seed, n_beats=args.n_beats, snr_db=args.snr_db)
    manifest = write_cohort(records, args.out)
    print(f"wrote {len(records)} records and {manifest}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth-cohort":
            _synth(args)
            return 0
        cfg = _load_config(args)
        if args.command == "config":
            sys.stdout.write(cfg.dump())
            return 0
        if args.command == "bundle":
            out = make_report_bundle(cfg.paths.workdir, args.out)
            print(out)
            return 0
        if args.command == "run":
            stages = STAGES[:STAGES.index(args.until) + 1]
            for stage, status in run_all(cfg, stages=stages, force=args.force).items():
                print(f"{stage}: {status}")
            return 0
        status = run_stage(args.command, cfg, force=args.force)
        print(f"{args.command}: {status}")
        return 0
    except (PreconditionError, CohortError, FileNotFoundError, WfdbParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception:
        logger.exception("internal error")
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
