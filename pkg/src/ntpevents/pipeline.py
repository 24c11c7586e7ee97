"""Stage runner: each stage reads upstream outputs, writes its own directory and a manifest.

Layout under ``output_root``::

    synth/       traces/<server>/<YYYY-MM>/<server>-<epoch>.pcap, truth.json, pfx2as.txt
    ingest/      <server>.csv, gaps.jsonl, stats.json
    filter/      <server>/clusters.csv + per-cluster files, stats.json
    detect/      events_<server>_<day>_<dir>.csv, matrices_<server>.jsonl
    consolidate/ consolidated.csv
    aggregate/   aggregated.csv, unmatched.txt, as_ranking.csv
    match/       match_report.json
    report/      daily_report.json, daily_report.txt, plotdata/, footprints/
"""

from __future__ import annotations

import hashlib
import ipaddress
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import pandas as pd

from . import consolidate as cons
from . import ingest, match, report, synth
from .config import PipelineConfig
from .detect import detect_clusters, read_events, read_matrix_details, write_events, write_matrix_details
from .detect.detector import event_file_name
from .geo import ProviderUnavailable, TableGeoProvider, footprint
from .owd import DIRECTIONS, filter_and_cluster, read_clusters, write_clusters
from .prefixes import PrefixTable

log = logging.getLogger(__name__)

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_GAPS = 0, 1, 2, 3
STAGES = ("synth", "ingest", "filter", "detect", "consolidate", "aggregate", "match", "report")
MANIFEST = "manifest.json"


class MissingUpstream(RuntimeError):
    def __init__(self, stage: str, detail: str = ""):
        super().__init__(f"missing outputs of upstream stage {stage!r}" + (f": {detail}" if detail else ""))
        self.stage = stage


class StageNotConfigured(RuntimeError):
    pass


@dataclass
class StageResult:
    stage: str
    exit_code: int = EXIT_OK
    skipped: bool = False
    outputs: list[Path] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)


# --------------------------------------------------------------------------- manifests

def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _expand(paths) -> list[Path]:
    out = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            out += sorted(q for q in p.rglob("*") if q.is_file() and q.name != MANIFEST)
        elif p.is_file():
            out.append(p)
    return sorted(set(out))


def _label(path: Path, root: Path) -> str:
    try:
        return path.resolve().relative_to(root.resolve()).as_posix()
    except ValueError:
        return str(path)


def _digest(paths, root: Path) -> dict[str, str]:
    return {_label(p, root): sha256(p) for p in _expand(paths)}


def read_manifest(cfg: PipelineConfig, stage: str) -> dict | None:
    path = cfg.stage_dir(stage) / MANIFEST
    if not path.is_file():
        return None
    with open(path) as fh:
        return json.load(fh)


def upstream_outputs(cfg: PipelineConfig, stage: str) -> list[Path]:
    """Outputs recorded by an upstream stage; raises when the stage never completed."""
    man = read_manifest(cfg, stage)
    if man is None:
        raise MissingUpstream(stage, f"no manifest in {cfg.stage_dir(stage)}")
    paths = [cfg.output_root / rel for rel in man["outputs"]]
    missing = [p for p in paths if not p.is_file()]
    if missing:
        raise MissingUpstream(stage, f"{len(missing)} output file(s) gone, e.g. {missing[0]}")
    return paths


# --------------------------------------------------------------------------- stages

@dataclass
class Stage:
    name: str
    params: Callable[[PipelineConfig], dict]
    inputs: Callable[[PipelineConfig], list[Path]]
    run: Callable[[PipelineConfig, Path], StageResult]


def _scenario_dict(cfg):
    return None if cfg.synth is None else cfg.synth.to_dict()


# synth ---------------------------------------------------------------------

def _synth_inputs(cfg):
    if cfg.synth is None:
        raise StageNotConfigured("no synth scenario in config")
    return []


def _synth_run(cfg, out):
    sc = cfg.synth
    frame, truth = synth.generate_frame(sc)
    traces = synth.write_pcap_traces(frame, sc, out / "traces" / sc.server_id, cfg.epoch_length)
    synth.write_truth(truth, out / "truth.json")
    outputs = traces + [out / "truth.json"]
    if sc.announced_prefixes:
        with open(out / "pfx2as.txt", "w") as fh:
            for prefix, asn in sc.announced_prefixes:
                net = ipaddress.ip_network(prefix, strict=False)
                fh.write(f"{net.network_address}\t{net.prefixlen}\t{asn}\n")
        outputs.append(out / "pfx2as.txt")
    return StageResult("synth", outputs=outputs, notes=[f"{len(frame)} packets, {len(truth)} events"])


# ingest --------------------------------------------------------------------

def _window_traces(cfg, server) -> dict[int, Path]:
    lo, hi = cfg.window
    return {e: p for e, p in sorted(ingest.scan_traces(cfg.trace_dir(server)).items()) if lo <= e < hi}


def _ingest_inputs(cfg):
    paths = []
    for s in cfg.servers:
        if s.trace_dir is None:
            upstream_outputs(cfg, "synth")
        paths += list(_window_traces(cfg, s).values())
    return paths


def _ingest_run(cfg, out):
    lo, hi = cfg.window
    manifests = {}
    for s in cfg.servers:
        tdir = cfg.trace_dir(s)
        found = ingest.gap_monitor(tdir.parent, [s.id], cfg.epoch_length, lo, hi, server_dirs={s.id: tdir})
        manifests.update(found)
    stats, outputs = {}, []
    for s in cfg.servers:
        records, raw_bytes = [], 0
        pstats = ingest.ParseStats()
        for _, path in _window_traces(cfg, s).items():
            recs, st = ingest.parse_pcap(path, s.ip)
            records += recs
            raw_bytes += path.stat().st_size
            for k in vars(pstats):
                setattr(pstats, k, getattr(pstats, k) + getattr(st, k))
        csv_path = out / f"{s.id}.csv"
        with open(csv_path, "w", newline="") as fh:
            ingest.write_csv(records, fh)
        outputs.append(csv_path)
        stats[s.id] = {"raw_bytes": raw_bytes, "csv_bytes": csv_path.stat().st_size,
                       "missing_epochs": len(manifests[s.id].missing_epochs), **vars(pstats)}
    with open(out / "gaps.jsonl", "w") as fh:
        gaps = ingest.write_gap_report(manifests, fh)
    _write_json(out / "stats.json", stats)
    res = StageResult("ingest", outputs=outputs + [out / "gaps.jsonl", out / "stats.json"])
    if gaps:
        res.exit_code = EXIT_GAPS
        res.notes.append(f"{gaps} missing trace epoch(s), see gaps.jsonl")
    return res


# filter --------------------------------------------------------------------

def _filter_inputs(cfg):
    return [p for p in upstream_outputs(cfg, "ingest") if p.suffix == ".csv"]


def _filter_run(cfg, out):
    stats, outputs = {}, []
    for s in cfg.servers:
        path = cfg.stage_dir("ingest") / f"{s.id}.csv"
        if not path.is_file():
            raise MissingUpstream("ingest", f"{path} not found")
        frame, bad = ingest.read_csv_frame(path)
        frame, rejected = ingest.integrity_filter_frame(frame)
        clusters, st = filter_and_cluster(frame, s.addresses, s.id, cfg.tight_sync_params())
        index = write_clusters(clusters, out / s.id)
        outputs += _expand([index.parent])
        stats[s.id] = {"rows": int(len(frame)), "malformed_rows": bad, "integrity_rejected": rejected, **st}
    _write_json(out / "stats.json", stats)
    return StageResult("filter", outputs=outputs + [out / "stats.json"])


# detect --------------------------------------------------------------------

def _detect_inputs(cfg):
    return upstream_outputs(cfg, "filter")


def _detect_run(cfg, out):
    outputs = []
    stats = {}
    for s in cfg.servers:
        cdir = cfg.stage_dir("filter") / s.id
        if not (cdir / "clusters.csv").is_file():
            raise MissingUpstream("filter", f"{cdir / 'clusters.csv'} not found")
        results = detect_clusters(read_clusters(cdir), cfg.window, cfg.detector_params(), cfg.seed, cfg.workers)
        for d in DIRECTIONS:
            path = out / event_file_name(s.id, cfg.day, d)
            write_events([e for r in results if r.direction == d for e in r.events], path)
            outputs.append(path)
        mpath = out / f"matrices_{s.id}.jsonl"
        write_matrix_details([r.matrix for r in results if r.matrix is not None and r.skip_reason is None], mpath)
        outputs.append(mpath)
        skips: dict[str, int] = {}
        for r in results:
            if r.skip_reason:
                skips[r.skip_reason] = skips.get(r.skip_reason, 0) + 1
        stats[s.id] = {
            "clusters": len(results),
            "events": sum(len(r.events) for r in results),
            "discarded_class_d": sum(r.discarded_d for r in results),
            "epca_fallbacks": sum(1 for r in results if r.method == "epca"),
            "skipped": dict(sorted(skips.items())),
        }
    _write_json(out / "stats.json", stats)
    return StageResult("detect", outputs=outputs + [out / "stats.json"])


def _event_files(cfg) -> list[Path]:
    return [p for p in upstream_outputs(cfg, "detect") if p.name.startswith("events_")]


# consolidate ---------------------------------------------------------------

def _consolidate_run(cfg, out):
    by_server: dict[str, list] = {}
    for path in _event_files(cfg):
        evs = read_events(path)
        if evs:
            by_server.setdefault(evs[0].server_id, []).extend(evs)
    merged = cons.consolidate(by_server)
    cons.write_consolidated(merged, out / "consolidated.csv")
    return StageResult("consolidate", outputs=[out / "consolidated.csv"],
                       notes=[f"{sum(map(len, by_server.values()))} events -> {len(merged)} consolidated"])


# aggregate -----------------------------------------------------------------

def _prefix_tables(cfg) -> tuple[Path | None, Path | None]:
    if cfg.has_prefix_table:
        return cfg.caida, cfg.cymru
    synth_table = cfg.stage_dir("synth") / "pfx2as.txt"
    if cfg.synth is not None and cfg.synth.announced_prefixes:
        if not synth_table.is_file():
            raise MissingUpstream("synth", f"{synth_table} not found")
        return synth_table, None
    raise StageNotConfigured("no prefix table configured")


def _aggregate_inputs(cfg):
    caida, cymru = _prefix_tables(cfg)
    extra = [p for p in (caida, cymru, cfg.as_names) if p is not None]
    return upstream_outputs(cfg, "consolidate") + extra


def _aggregate_run(cfg, out):
    caida, cymru = _prefix_tables(cfg)
    table = PrefixTable.load(caida, cymru)
    events = cons.read_consolidated(cfg.stage_dir("consolidate") / "consolidated.csv")
    aggregated, unmatched = cons.aggregate(events, table)
    cons.write_aggregated(aggregated, out / "aggregated.csv")
    with open(out / "unmatched.txt", "w") as fh:
        fh.writelines(p + "\n" for p in unmatched)
    names = cons.load_as_names(cfg.as_names) if cfg.as_names else None
    cons.write_ranking(cons.rank_ases(aggregated, 5, names), out / "as_ranking.csv")
    return StageResult("aggregate", outputs=[out / "aggregated.csv", out / "unmatched.txt", out / "as_ranking.csv"])


# match ---------------------------------------------------------------------

def _match_inputs(cfg):
    if cfg.external_events is None:
        raise StageNotConfigured("no external_events file configured")
    return upstream_outputs(cfg, "consolidate") + [cfg.external_events]


def load_detected(path: Path) -> list:
    """Consolidated CSV, or a per-server event details file."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    if "direction" in header:
        return cons.read_consolidated(path)
    return read_events(path)


def run_match(detected_path: Path, external_path: Path, window: float, out_path: Path) -> dict:
    detected = [e for e in load_detected(detected_path) if e.confidence_class != "D"]
    external = match.load_external(external_path)
    results, summary = match.match_events(detected, external, window)
    match.write_match_report(results, summary, detected, external, out_path)
    return summary


def _match_run(cfg, out):
    summary = run_match(cfg.stage_dir("consolidate") / "consolidated.csv", cfg.external_events,
                        cfg.match_window, out / "match_report.json")
    return StageResult("match", outputs=[out / "match_report.json"],
                       notes=[f"direct={summary['pairs']['direct']} pre={summary['pairs']['pre']} "
                              f"post={summary['pairs']['post']}"])


# report --------------------------------------------------------------------

def _optional(cfg, stage) -> list[Path]:
    try:
        return upstream_outputs(cfg, stage)
    except MissingUpstream:
        return []


def _report_inputs(cfg):
    paths = []
    for stage in ("ingest", "filter", "detect", "consolidate", "aggregate"):
        paths += _optional(cfg, stage)
    if cfg.geo_table:
        paths.append(cfg.geo_table)
    return paths


def _safe(prefix: str) -> str:
    return prefix.replace("/", "_").replace(":", "-")


def _report_run(cfg, out):
    gaps: list[str] = []
    inputs = report.DayInputs(date=cfg.day, gap_notes=gaps)

    ingest_stats = cfg.stage_dir("ingest") / "stats.json"
    if _optional(cfg, "ingest") and ingest_stats.is_file():
        st = json.loads(ingest_stats.read_text())
        inputs.server_bytes = {sid: {"raw": v["raw_bytes"], "csv": v["csv_bytes"]} for sid, v in st.items()}
        for sid, v in sorted(st.items()):
            if v.get("missing_epochs"):
                gaps.append(f"server {sid}: {v['missing_epochs']} missing trace epoch(s)")

    index_frames = []
    if _optional(cfg, "filter"):
        for s in cfg.servers:
            idx = cfg.stage_dir("filter") / s.id / "clusters.csv"
            if idx.is_file():
                index_frames.append(pd.read_csv(idx, dtype=str, keep_default_na=False))
    if index_frames:
        index = pd.concat(index_frames, ignore_index=True)
        inputs.total_clients = int(index["client_ip"].nunique())
        inputs.observed_prefixes = list(zip(index["direction"], index["prefix"]))
    else:
        index = None

    if _optional(cfg, "detect"):
        inputs.detected_count = sum(len(read_events(p)) for p in _event_files(cfg))
    if _optional(cfg, "consolidate"):
        inputs.consolidated = cons.read_consolidated(cfg.stage_dir("consolidate") / "consolidated.csv")
    if _optional(cfg, "aggregate"):
        inputs.aggregated = cons.read_aggregated(cfg.stage_dir("aggregate") / "aggregated.csv")

    rep = report.daily_report(inputs)
    outputs = [out / "daily_report.json", out / "daily_report.txt"]
    outputs[0].write_text(rep.to_json())
    outputs[1].write_text(rep.to_text())

    # plot data for every cluster that carries a consolidated event
    if inputs.consolidated and _optional(cfg, "detect"):
        wanted = {(e.direction, e.prefix) for e in inputs.consolidated}
        pdir = out / "plotdata"
        pdir.mkdir(exist_ok=True)
        for s in cfg.servers:
            mpath = cfg.stage_dir("detect") / f"matrices_{s.id}.jsonl"
            if not mpath.is_file():
                continue
            for m in read_matrix_details(mpath):
                if (m.direction, m.prefix) in wanted:
                    path = pdir / f"{m.server_id}_{m.direction}_{_safe(m.prefix)}.csv"
                    report.write_plotdata(report.owd_plotdata(m), path)
                    outputs.append(path)

    if cfg.geo_table and inputs.consolidated and index is not None:
        provider = TableGeoProvider(cfg.geo_table)
        fdir = out / "footprints"
        fdir.mkdir(exist_ok=True)
        for prefix in sorted({e.prefix for e in inputs.consolidated}):
            ips = sorted(set(index.loc[index["prefix"] == prefix, "client_ip"]))
            try:
                fp = footprint(prefix, ips, provider)
            except ProviderUnavailable as exc:
                gaps.append(str(exc))
                break
            path = fdir / f"{_safe(prefix)}.geojson"
            _write_json(path, fp.to_geojson())
            outputs.append(path)
    return StageResult("report", outputs=outputs, notes=list(rep.gaps))


# --------------------------------------------------------------------------- driver

def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (Path,)):
        return str(o)
    if isinstance(o, (set, tuple)):
        return sorted(o) if isinstance(o, set) else list(o)
    raise TypeError(f"not serializable: {type(o)}")


def _common(cfg):
    return {"window": list(cfg.window), "epoch_length": cfg.epoch_length}


_REGISTRY = {
    "synth": Stage("synth", lambda c: {"scenario": _scenario_dict(c), "epoch_length": c.epoch_length},
                   _synth_inputs, _synth_run),
    "ingest": Stage("ingest", lambda c: {**_common(c), "servers": [[s.id, *s.addresses] for s in c.servers]},
                    _ingest_inputs, _ingest_run),
    "filter": Stage("filter", lambda c: {"servers": [[s.id, *s.addresses] for s in c.servers],
                                          "min_samples": c.min_samples},
                    _filter_inputs, _filter_run),
    "detect": Stage("detect", lambda c: {**_common(c), "seed": c.seed, "coverage": c.coverage,
                                          "cutoff": c.cutoff, "variance_threshold": c.variance_threshold,
                                          "z_threshold": c.z_threshold, "bridge_gaps": c.bridge_gaps},
                    _detect_inputs, _detect_run),
    "consolidate": Stage("consolidate", lambda c: {"min_overlap_secs": cons.MIN_OVERLAP},
                         lambda c: _event_files(c), _consolidate_run),
    "aggregate": Stage("aggregate", lambda c: {"min_constituents": 2, "top_n": 5},
                       _aggregate_inputs, _aggregate_run),
    "match": Stage("match", lambda c: {"window_secs": c.match_window}, _match_inputs, _match_run),
    "report": Stage("report", lambda c: {"date": c.day, "top_n": report.TOP_N},
                    _report_inputs, _report_run),
}


def run_stage(name: str, cfg: PipelineConfig, force: bool = False) -> StageResult:
    """Run one stage, or skip it when its manifest shows identical inputs and parameters."""
    stage = _REGISTRY[name]
    root = cfg.output_root
    inputs = _digest(stage.inputs(cfg), root)
    params = json.loads(json.dumps(stage.params(cfg), sort_keys=True, default=_jsonable))
    prev = read_manifest(cfg, name)
    if (not force and prev is not None and prev.get("inputs") == inputs and prev.get("parameters") == params
            and all((root / rel).is_file() and sha256(root / rel) == h for rel, h in prev["outputs"].items())):
        log.info("%s: inputs unchanged, skipping", name)
        return StageResult(name, prev.get("exit_code", EXIT_OK), skipped=True,
                           outputs=[root / rel for rel in prev["outputs"]], notes=prev.get("notes", []))

    out = cfg.stage_dir(name)
    if out.exists():
        for old in sorted(out.rglob("*"), reverse=True):
            old.unlink() if old.is_file() else old.rmdir()
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    result = stage.run(cfg, out)
    manifest = {
        "stage": name,
        "inputs": inputs,
        "outputs": _digest(result.outputs, root),
        "parameters": params,
        "exit_code": result.exit_code,
        "notes": result.notes,
        "wall_time": round(time.perf_counter() - t0, 6),
    }
    _write_json(out / MANIFEST, manifest)
    return result


def run_all(cfg: PipelineConfig, force: bool = False) -> list[StageResult]:
    """Full DAG in order. Unconfigured optional stages (synth, aggregate, match) are skipped."""
    results = []
    for name in STAGES:
        try:
            results.append(run_stage(name, cfg, force))
        except StageNotConfigured as exc:
            log.info("%s: not configured (%s)", name, exc)
            results.append(StageResult(name, skipped=True, notes=[f"not configured: {exc}"]))
    return results
