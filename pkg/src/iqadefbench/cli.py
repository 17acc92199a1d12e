"""Command-line entry point: ``iqadefbench <subcommand> --config campaign.json``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from pathlib import Path

from .errors import BenchmarkError, ConfigurationError
from .evaluation import attach_timings, read_records
from .harness import (Campaign, CampaignConfig, load_config, run_adaptive, run_adv_training, run_certified,
                      run_non_adaptive)
from .report import emit_report, write_report

SUBCOMMANDS = ("ingest", "cluster", "calibrate-attacks", "generate-adv", "run-nonadaptive", "run-adaptive",
               "run-certified", "train-robust", "report")


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="iqadefbench", description="Adversarial-defense benchmark for NR-IQA metrics")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, metavar="{" + ",".join(SUBCOMMANDS) + "}")
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="campaign configuration (JSON)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field, dotted keys allowed (repeatable)")
        p.add_argument("--output-dir")
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int)
        if name == "report":
            p.add_argument("--records", nargs="*", help="record files (default: all records_*.csv in output dir)")
            p.add_argument("--format", choices=("markdown", "delimited"), default=None,
                           help="print one format to stdout instead of writing files")
    return ap


def _config(args, case=None) -> CampaignConfig:
    overrides = list(args.set)
    if args.output_dir is not None:
        overrides.append(f"output_dir={json.dumps(args.output_dir)}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.workers is not None:
        overrides.append(f"workers={args.workers}")
    if case is not None:
        overrides.append(f"case={json.dumps(case)}")
    return load_config(args.config, overrides)


def _summary(**kw) -> None:
    print(json.dumps(kw, sort_keys=True))


def _report(args) -> None:
    if args.records:
        paths = [Path(p) for p in args.records]
        out_dir = Path(args.output_dir) if args.output_dir else paths[0].parent
    else:
        out_dir = _config(args).out
        paths = sorted(out_dir.glob("records_*.csv"))
    if not paths:
        raise BenchmarkError(f"no record files found in {out_dir}")
    records = []
    for p in paths:
        recs = read_records(p)
        timing = p.with_name(p.name.replace("records_", "timings_", 1))
        records.extend(attach_timings(recs, timing))
    if args.format:
        sys.stdout.write(emit_report(records, args.format))
        return
    written = write_report(records, out_dir)
    _summary(status="ok", command="report", files=[str(p) for p in written])


def run(argv=None) -> int:
    ap = _parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cmd = args.command
        if cmd == "report":
            _report(args)
            return 0
        if cmd in ("ingest", "cluster", "calibrate-attacks", "generate-adv"):
            c = Campaign(_config(args))
            if cmd == "ingest":
                n = len(c.ingest())
            elif cmd == "cluster":
                n = len(c.cluster())
            elif cmd == "calibrate-attacks":
                n = len(c.calibrate())
            else:
                n = len(c.generate().ok_entries())
            _summary(status="ok", command=cmd, count=n, output_dir=str(c.out))
            return 0
        case, fn = {
            "run-nonadaptive": ("non_adaptive", run_non_adaptive),
            "run-adaptive": ("adaptive", run_adaptive),
            "run-certified": ("certified", run_certified),
            "train-robust": ("adv_training", run_adv_training),
        }[cmd]
        cfg = _config(args, case)
        records = fn(cfg)
        _summary(status="ok", command=cmd, records=len(records), output_dir=str(cfg.out))
        return 0
    except ConfigurationError as exc:
        _summary(status="error", error="configuration", message=str(exc), fields=list(exc.fields))
        return 2
    except (BenchmarkError, ValueError, OSError) as exc:
        if args.verbose:
            traceback.print_exc()
        _summary(status="error", error=type(exc).__name__, message=str(exc))
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
