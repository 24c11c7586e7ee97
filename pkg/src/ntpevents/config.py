"""Pipeline configuration (single JSON file) and its validation."""

from __future__ import annotations

import ipaddress
import json
import os
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

from .detect import DetectorParams, RpcaParams
from .owd import TightSyncParams
from .synth import ScenarioError, SynthScenario


class ConfigError(ValueError):
    """Carries every violation found, not just the first."""

    def __init__(self, problems: list[str]):
        super().__init__("invalid configuration:\n  - " + "\n  - ".join(problems))
        self.problems = problems


@dataclass
class ServerConfig:
    id: str
    ip: str
    trace_dir: Path | None = None  # None: traces come from the synth stage
    ip6: str | None = None

    @property
    def addresses(self) -> list[str]:
        return [self.ip] + ([self.ip6] if self.ip6 else [])


@dataclass
class PipelineConfig:
    servers: list[ServerConfig]
    output_root: Path
    window_start: int
    epoch_length: int = 3600
    detection_window: int = 86400
    coverage: float = 0.75
    cutoff: float = 0.975
    variance_threshold: float = 5.0
    min_samples: int = 10
    z_threshold: float = 2.0
    bridge_gaps: int = 0
    caida: Path | None = None
    cymru: Path | None = None
    as_names: Path | None = None
    external_events: Path | None = None
    match_window: float = 3600.0
    geo_table: Path | None = None
    seed: int = 0
    workers: int = 1
    synth: SynthScenario | None = None
    source: Path | None = None

    @property
    def window(self) -> tuple[int, int]:
        return self.window_start, self.window_start + self.detection_window

    @property
    def day(self) -> str:
        return datetime.fromtimestamp(self.window_start, tz=timezone.utc).strftime("%Y-%m-%d")

    @property
    def has_prefix_table(self) -> bool:
        return self.caida is not None or self.cymru is not None

    def detector_params(self) -> DetectorParams:
        return DetectorParams(
            rpca=RpcaParams(coverage=self.coverage, cutoff_quantile=self.cutoff,
                            variance_threshold=self.variance_threshold),
            z_threshold=self.z_threshold,
            bridge_gaps=self.bridge_gaps,
        )

    def tight_sync_params(self) -> TightSyncParams:
        return TightSyncParams(min_samples=self.min_samples)

    def stage_dir(self, stage: str) -> Path:
        return self.output_root / stage

    def trace_dir(self, server: ServerConfig) -> Path:
        if server.trace_dir is not None:
            return server.trace_dir
        return self.stage_dir("synth") / "traces" / server.id


_DETECTOR_KEYS = ("coverage", "cutoff", "variance_threshold", "min_samples", "z_threshold", "bridge_gaps")


def _path(value, base: Path) -> Path | None:
    if value is None:
        return None
    p = Path(value)
    return p if p.is_absolute() else base / p


def from_dict(raw: dict, base: str | os.PathLike = ".") -> PipelineConfig:
    """Build and validate a config; relative paths resolve against ``base``."""
    base = Path(base)
    problems: list[str] = []
    known = {"servers", "output_root", "window_start", "epoch_length", "detection_window", "detector",
             "prefix_tables", "as_names", "external_events", "match_window", "geo_table", "seed",
             "workers", "synth"}
    for key in sorted(set(raw) - known):
        problems.append(f"unknown key {key!r}")

    scenario = None
    if raw.get("synth") is not None:
        try:
            spec = raw["synth"]
            scenario = (SynthScenario.load(_path(spec, base)) if isinstance(spec, str)
                        else SynthScenario.from_dict(spec))
            scenario.validate()
        except (OSError, TypeError, ValueError, ScenarioError) as exc:
            problems.append(f"synth: {exc}")
            scenario = None

    servers = []
    raw_servers = raw.get("servers")
    if raw_servers is None and scenario is not None:
        raw_servers = [{"id": scenario.server_id, "ip": scenario.server_ip, "ip6": scenario.server_ip6}]
    if not raw_servers:
        problems.append("servers: at least one server is required")
        raw_servers = []
    seen = set()
    for i, s in enumerate(raw_servers):
        sid, ip, ip6 = s.get("id"), s.get("ip"), s.get("ip6")
        if not sid or not isinstance(sid, str) or "/" in sid:
            problems.append(f"servers[{i}].id must be a non-empty string without '/'")
        elif sid in seen:
            problems.append(f"servers[{i}].id {sid!r} is duplicated")
        seen.add(sid)
        try:
            ipaddress.ip_address(ip)
        except (TypeError, ValueError):
            problems.append(f"servers[{i}].ip {ip!r} is not an IP address")
        if ip6 is not None:
            try:
                ipaddress.ip_address(ip6)
            except (TypeError, ValueError):
                problems.append(f"servers[{i}].ip6 {ip6!r} is not an IP address")
        tdir = _path(s.get("trace_dir"), base)
        if tdir is None:
            if scenario is None or sid != scenario.server_id:
                problems.append(f"servers[{i}].trace_dir is required (no synth scenario produces {sid!r})")
        elif not tdir.is_dir():
            problems.append(f"servers[{i}].trace_dir {tdir} does not exist")
        servers.append(ServerConfig(str(sid), str(ip), tdir, ip6))

    def integer(key, default, minimum):
        v = raw.get(key, default)
        if isinstance(v, bool) or not isinstance(v, int) or v < minimum:
            problems.append(f"{key} must be an integer >= {minimum}")
            return default
        return v

    epoch_length = integer("epoch_length", 3600, 1)
    window = integer("detection_window", 86400, 1)
    if window % epoch_length:
        problems.append(f"epoch_length {epoch_length} does not divide detection_window {window}")
    seed = integer("seed", 0, 0)
    workers = integer("workers", 1, 1)

    window_start = raw.get("window_start")
    if window_start is None and scenario is not None:
        window_start = scenario.start_epoch
    if isinstance(window_start, bool) or not isinstance(window_start, int):
        problems.append("window_start must be an integer Unix epoch (or come from a synth scenario)")
        window_start = 0

    det = dict(raw.get("detector") or {})
    for key in sorted(set(det) - set(_DETECTOR_KEYS)):
        problems.append(f"detector: unknown key {key!r}")
    coverage = det.get("coverage", 0.75)
    if not 0.5 <= coverage < 1:
        problems.append("detector.coverage must be in [0.5, 1)")
    cutoff = det.get("cutoff", 0.975)
    if not 0 < cutoff < 1:
        problems.append("detector.cutoff must be in (0, 1)")
    variance = det.get("variance_threshold", 5.0)
    if not 0 < variance < 100:
        problems.append("detector.variance_threshold must be a percentage in (0, 100)")
    min_samples = det.get("min_samples", 10)
    if not isinstance(min_samples, int) or min_samples < 2:
        problems.append("detector.min_samples must be an integer >= 2")
    z = det.get("z_threshold", 2.0)
    if z <= 0:
        problems.append("detector.z_threshold must be positive")
    bridge = det.get("bridge_gaps", 0)
    if not isinstance(bridge, int) or bridge < 0:
        problems.append("detector.bridge_gaps must be an integer >= 0")

    def existing(label, value):
        p = _path(value, base)
        if p is not None and not p.exists():
            problems.append(f"{label} {p} does not exist")
        return p

    tables = raw.get("prefix_tables") or {}
    for key in sorted(set(tables) - {"caida", "cymru"}):
        problems.append(f"prefix_tables: unknown key {key!r}")
    caida = existing("prefix_tables.caida", tables.get("caida"))
    cymru = existing("prefix_tables.cymru", tables.get("cymru"))
    as_names = existing("as_names", raw.get("as_names"))
    external = existing("external_events", raw.get("external_events"))
    geo = existing("geo_table", raw.get("geo_table"))
    match_window = raw.get("match_window", 3600.0)
    if match_window < 0:
        problems.append("match_window must be >= 0")

    if raw.get("output_root") is None:
        problems.append("output_root is required")
    if problems:
        raise ConfigError(problems)
    return PipelineConfig(
        servers=servers,
        output_root=_path(raw["output_root"], base),
        window_start=window_start,
        epoch_length=epoch_length,
        detection_window=window,
        coverage=float(coverage),
        cutoff=float(cutoff),
        variance_threshold=float(variance),
        min_samples=min_samples,
        z_threshold=float(z),
        bridge_gaps=bridge,
        caida=caida,
        cymru=cymru,
        as_names=as_names,
        external_events=external,
        match_window=float(match_window),
        geo_table=geo,
        seed=seed,
        workers=workers,
        synth=scenario,
    )


def load(path: str | os.PathLike) -> PipelineConfig:
    path = Path(path)
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError([f"cannot read {path}: {exc}"]) from exc
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path} is not valid JSON: {exc}"]) from exc
    if not isinstance(raw, dict):
        raise ConfigError([f"{path}: top level must be an object"])
    cfg = from_dict(raw, path.parent)
    cfg.source = path
    return cfg
