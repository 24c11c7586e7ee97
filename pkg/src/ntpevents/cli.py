"""Command-line entry point.

    ntpevents <stage> --config pipeline.json [--dry-run] [--force]
    ntpevents run-all --config pipeline.json
    ntpevents ingest --server-ip IP --in a.pcap [b.pcap.gz ...] --out records.csv
    ntpevents match --bigben events.csv --external ext.csv --window-secs 3600 --out report.json
    ntpevents plot --config pipeline.json --server S1 --direction c2s --prefix 10.0.0.0/24 --out plot.csv

Exit codes: 0 ok, 1 validation, 2 runtime, 3 data gaps.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import config as config_mod
from . import ingest, pipeline, report
from .detect import read_matrix_details
from .match import ExternalFormatError
from .pipeline import EXIT_GAPS, EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, STAGES

log = logging.getLogger("ntpevents")


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ntpevents", description="NTP one-way-delay event detection pipeline")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def staged(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", type=Path, required=name not in ("ingest", "match"))
        p.add_argument("--dry-run", action="store_true", help="validate the config and exit")
        p.add_argument("--force", action="store_true", help="rerun even if inputs are unchanged")
        return p

    for stage in STAGES:
        p = staged(stage, f"run the {stage} stage")
        if stage == "ingest":
            p.add_argument("--server-ip", help="standalone mode: server address")
            p.add_argument("--in", dest="inputs", nargs="+", type=Path, help="standalone mode: pcap traces")
            p.add_argument("--out", type=Path, help="standalone mode: output CSV")
        elif stage == "match":
            p.add_argument("--bigben", type=Path, help="standalone mode: detected events CSV")
            p.add_argument("--external", type=Path, help="standalone mode: external events CSV")
            p.add_argument("--window-secs", type=float, default=3600.0)
            p.add_argument("--out", type=Path, help="standalone mode: JSON report")
    staged("run-all", "run every stage in order")

    p = sub.add_parser("plot", help="emit OWD plot data for one cluster")
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--server", required=True)
    p.add_argument("--direction", choices=("c2s", "s2c"), required=True)
    p.add_argument("--prefix", required=True)
    p.add_argument("--out", type=Path, required=True)
    return ap


def _ingest_standalone(args) -> int:
    if not (args.server_ip and args.inputs and args.out):
        log.error("standalone ingest needs --server-ip, --in and --out")
        return EXIT_VALIDATION
    missing = [str(p) for p in args.inputs if not p.is_file()]
    if missing:
        log.error("input trace(s) not found: %s", ", ".join(missing))
        return EXIT_VALIDATION
    records = []
    for path in args.inputs:
        recs, stats = ingest.parse_pcap(path, args.server_ip)
        records += recs
        log.info("%s: %d frames, %d NTP records, %d short", path, stats.frames, stats.records, stats.short_payload)
    with open(args.out, "w", newline="") as fh:
        ingest.write_csv(records, fh)
    return EXIT_OK


def _match_standalone(args) -> int:
    if not (args.bigben and args.external and args.out):
        log.error("standalone match needs --bigben, --external and --out")
        return EXIT_VALIDATION
    for p in (args.bigben, args.external):
        if not p.is_file():
            log.error("%s not found", p)
            return EXIT_VALIDATION
    summary = pipeline.run_match(args.bigben, args.external, args.window_secs, args.out)
    log.info("pairs: %s", summary["pairs"])
    return EXIT_OK


def _plot(args, cfg) -> int:
    path = cfg.stage_dir("detect") / f"matrices_{args.server}.jsonl"
    if not path.is_file():
        raise pipeline.MissingUpstream("detect", f"{path} not found")
    m = report.find_matrix(read_matrix_details(path), args.prefix, args.direction, args.server)
    report.write_plotdata(report.owd_plotdata(m), args.out)
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "ingest" and args.config is None:
            return _ingest_standalone(args)
        if args.command == "match" and args.config is None:
            return _match_standalone(args)
        cfg = config_mod.load(args.config)
        if getattr(args, "dry_run", False):
            log.info("config %s is valid", args.config)
            return EXIT_OK
        if args.command == "plot":
            return _plot(args, cfg)
        if args.command == "run-all":
            results = pipeline.run_all(cfg, args.force)
        else:
            results = [pipeline.run_stage(args.command, cfg, args.force)]
    except config_mod.ConfigError as exc:
        log.error("%s", exc)
        return EXIT_VALIDATION
    except pipeline.StageNotConfigured as exc:
        log.error("%s: %s", args.command, exc)
        return EXIT_VALIDATION
    except ExternalFormatError as exc:
        log.error("external events: %s", exc)
        return EXIT_VALIDATION
    except (pipeline.MissingUpstream, KeyError, OSError, ValueError, RuntimeError) as exc:
        log.error("%s failed: %s", args.command, exc)
        return EXIT_RUNTIME
    code = EXIT_OK
    for r in results:
        state = "skipped" if r.skipped else "done"
        log.info("%-11s %s%s", r.stage, state, "".join(f"; {n}" for n in r.notes))
        if r.exit_code == EXIT_GAPS:
            code = EXIT_GAPS
    return code


if __name__ == "__main__":
    sys.exit(main())
