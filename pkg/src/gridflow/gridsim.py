"""Seeded simulated grid: resources, deployed services, execution timing,
scripted fault injection and synthetic Montage/Gromacs-shaped workloads."""

from __future__ import annotations

import copy
import json
import random
from dataclasses import dataclass, field
from pathlib import Path

from .dyag import ResourceInfo, ResourceView, Task
from .errors import ConfigError, InvalidLength, InvalidWidth
from .faults import FaultCause
from .model import AbstractActivity, AbstractWorkflow, FileSpec
from .registry import ServiceDescriptor, ServiceRegistry, descriptor_from_dict

DEFAULT_UPTIME_H = 8760.0

SCOPES = ("resource", "service", "link")
_SCOPE_CAUSES = {
    "link": {FaultCause.LINK_DOWN, FaultCause.MESSAGE_LOST, FaultCause.CONNECT_TIMEOUT},
    "service": set(FaultCause) - {FaultCause.LINK_DOWN},
    "resource": set(FaultCause) - {FaultCause.LINK_DOWN, FaultCause.MESSAGE_LOST},
}
# causes that show up when the call is attempted rather than when it returns
DISPATCH_TIME_CAUSES = {
    FaultCause.LINK_DOWN,
    FaultCause.CONNECT_TIMEOUT,
    FaultCause.PROTOCOL_MISMATCH,
    FaultCause.SERVICE_EXPIRED,
}


@dataclass(frozen=True)
class FaultSpec:
    scope: str
    target: str
    cause: FaultCause
    at: float | None = None
    nth_dispatch: int | None = None
    duration: float | None = None  # None = permanent
    activity: str | None = None  # restricts nth_dispatch counting

    def __post_init__(self):
        if self.scope not in SCOPES:
            raise ConfigError(f"scope must be one of {SCOPES}", "fault")
        if self.cause not in _SCOPE_CAUSES[self.scope]:
            raise ConfigError(f"cause {self.cause.value} is not valid for scope {self.scope}", "fault")
        if (self.at is None) == (self.nth_dispatch is None):
            raise ConfigError("exactly one of at / nth_dispatch is required", "fault")
        if self.nth_dispatch is not None and self.nth_dispatch < 1:
            raise ConfigError("nth_dispatch must be >= 1", "fault")
        if self.at is not None and self.at < 0:
            raise ConfigError("at must be >= 0", "fault")
        if self.duration is not None and self.duration <= 0:
            raise ConfigError("duration must be > 0", "fault")

    def covers(self, t: float) -> bool:
        if self.at is None or t < self.at:
            return False
        return self.duration is None or t < self.at + self.duration


@dataclass(frozen=True)
class ExecOutcome:
    kind: str  # complete | fault | lost
    at: float | None
    transfer: float
    compute: float
    cause: FaultCause | None = None
    spec_index: int | None = None


@dataclass
class SimEnv:
    resources: list[ResourceInfo]
    services: list[ServiceDescriptor]
    seed: int = 0
    noise: tuple[float, float] = (1.0, 1.0)
    fault_script: list[FaultSpec] = field(default_factory=list)
    heartbeat_timeout: float | None = None

    def __post_init__(self):
        lo, hi = self.noise
        if not (0.5 <= lo <= hi <= 2.0):
            raise ConfigError("noise range must lie within [0.5, 2.0]", "noise")
        self.rng = random.Random(self.seed)
        self.dispatch_counts: dict[tuple[str, str, str | None], int] = {}
        self.manifested: list[tuple[int, float, str | None]] = []
        self._crash_seen: set[int] = set()

    # construction helpers ----------------------------------------------------

    def resource(self, rid: str) -> ResourceInfo:
        for r in self.resources:
            if r.id == rid:
                return r
        raise KeyError(rid)

    def make_view(self) -> ResourceView:
        view = ResourceView()
        for r in self.resources:
            fresh = copy.deepcopy(r)
            if self.heartbeat_timeout is not None:
                fresh.heartbeat_timeout = self.heartbeat_timeout
            view.add(fresh)
        return view

    def make_registry(self) -> ServiceRegistry:
        return ServiceRegistry(self.services)

    def heartbeat_streams(self) -> list[tuple[str, float]]:
        return [(r.id, r.report_period) for r in sorted(self.resources, key=lambda r: r.id)]

    def expiries(self) -> list[tuple[float, str]]:
        """Time-triggered ServiceExpired entries as (at, service id)."""
        return sorted(
            (s.at, s.target) for s in self.fault_script
            if s.scope == "service" and s.at is not None and s.cause is FaultCause.SERVICE_EXPIRED
        )

    # resource liveness -------------------------------------------------------

    def crashed(self, rid: str, t: float) -> bool:
        for i, s in enumerate(self.fault_script):
            if s.scope == "resource" and s.target == rid and s.covers(t):
                if i not in self._crash_seen:
                    self._crash_seen.add(i)
                    self.manifested.append((i, s.at, None))
                return True
        return False

    def _crash_between(self, rid: str, start: float, end: float) -> bool:
        for i, s in enumerate(self.fault_script):
            if s.scope == "resource" and s.target == rid and s.at is not None and start < s.at < end:
                return True
        return False

    # execution ---------------------------------------------------------------

    def _scripted_fault(self, task: Task, rid: str, service: str, now: float):
        hit = None
        for i, s in enumerate(self.fault_script):
            key_target = service if s.scope == "service" else rid
            if s.target != key_target:
                continue
            if s.nth_dispatch is not None:
                if s.activity is not None and s.activity != task.activity:
                    continue
                ckey = (s.scope, s.target, s.activity)
                # counted once per dispatch below; compare against the upcoming count
                if self.dispatch_counts.get(ckey, 0) + 1 == s.nth_dispatch and hit is None:
                    hit = (i, s)
            elif s.scope != "resource" and s.covers(now) and hit is None:
                hit = (i, s)
        keys = set()
        for s in self.fault_script:
            if s.nth_dispatch is None:
                continue
            key_target = service if s.scope == "service" else rid
            if s.target == key_target and (s.activity is None or s.activity == task.activity):
                keys.add((s.scope, s.target, s.activity))
        for ckey in keys:
            self.dispatch_counts[ckey] = self.dispatch_counts.get(ckey, 0) + 1
        return hit

    def execute_task(self, task: Task, rid: str, service: str, now: float, missing_bytes: int | None = None) -> ExecOutcome:
        """Time one execution of ``task`` on ``rid``; faults are returned as data."""
        r = self.resource(rid)
        moved = task.missing_bytes(rid) if missing_bytes is None else missing_bytes
        transfer = moved / r.bandwidth
        jitter = self.rng.uniform(*self.noise)
        compute = task.work / r.speed * jitter
        finish = now + transfer + compute
        hit = self._scripted_fault(task, rid, service, now)
        if self.crashed(rid, now) or self._crash_between(rid, now, finish):
            return ExecOutcome("lost", None, transfer, compute)
        if hit is not None:
            i, s = hit
            at = now if s.cause in DISPATCH_TIME_CAUSES else finish
            self.manifested.append((i, at, task.activity))
            return ExecOutcome("fault", at, transfer, compute, s.cause, i)
        return ExecOutcome("complete", finish, transfer, compute)


# ---------------------------------------------------------------------------
# config files

_RESOURCE_KEYS = {"id", "speed", "disk_capacity", "bandwidth", "services", "report_period_s", "uptime_h"}
_ENV_KEYS = {"resources", "services", "noise", "heartbeat_timeout_s"}
_FAULT_KEYS = {"at", "nth_dispatch", "scope", "target", "cause", "duration", "activity"}


def _num(obj, key, locus, default=None, positive=True):
    if key not in obj:
        if default is None:
            raise ConfigError(f"missing key {key!r}", locus)
        return default
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{key} must be a number", locus)
    if positive and not v > 0:
        raise ConfigError(f"{key} must be > 0", f"{locus}.{key}")
    return v


def resources_from_list(items, locus="env"):
    resources, services = [], []
    seen = set()
    if not isinstance(items, list) or not items:
        raise ConfigError("need a nonempty array of resources", locus)
    for i, obj in enumerate(items):
        loc = f"{locus}[{i}]"
        if not isinstance(obj, dict):
            raise ConfigError("expected an object", loc)
        extra = set(obj) - _RESOURCE_KEYS
        if extra:
            raise ConfigError(f"unknown keys {sorted(extra)}", loc)
        if "id" not in obj:
            raise ConfigError("missing key 'id'", loc)
        rid = str(obj["id"])
        if rid in seen:
            raise ConfigError(f"duplicate resource {rid}", loc)
        seen.add(rid)
        speed = _num(obj, "speed", loc)
        period = _num(obj, "report_period_s", loc, default=10.0)
        r = ResourceInfo(
            id=rid,
            speed=float(speed),
            disk_capacity=int(_num(obj, "disk_capacity", loc)),
            bandwidth=float(_num(obj, "bandwidth", loc, default=1e9)),
            report_period=float(period),
        )
        uptime = float(_num(obj, "uptime_h", loc, default=DEFAULT_UPTIME_H, positive=False))
        for j, svc in enumerate(obj.get("services", [])):
            if isinstance(svc, str):
                d = ServiceDescriptor(
                    id=f"{svc}@{rid}",
                    port_type=svc,
                    resource=rid,
                    perf_profile=1.0 / r.speed,
                    uptime=uptime,
                    interface_url=f"https://{rid}/services/{svc}?wsdl",
                )
            else:
                d = descriptor_from_dict(svc, f"{loc}.services[{j}]", resource=rid)
            services.append(d)
            r.deployed_services.add(d.id)
        resources.append(r)
    return resources, services


def env_from_doc(doc, seed: int = 0, fault_script=()) -> SimEnv:
    noise = (1.0, 1.0)
    timeout = None
    extra_services = []
    if isinstance(doc, dict):
        extra = set(doc) - _ENV_KEYS
        if extra:
            raise ConfigError(f"unknown keys {sorted(extra)}", "env")
        resources, services = resources_from_list(doc.get("resources"), "env.resources")
        if "noise" in doc:
            try:
                lo, hi = (float(x) for x in doc["noise"])
            except (TypeError, ValueError) as exc:
                raise ConfigError("noise must be [lo, hi]", "env.noise") from exc
            noise = (lo, hi)
        if "heartbeat_timeout_s" in doc:
            timeout = float(_num(doc, "heartbeat_timeout_s", "env"))
        for j, svc in enumerate(doc.get("services", [])):
            extra_services.append(descriptor_from_dict(svc, f"env.services[{j}]"))
    else:
        resources, services = resources_from_list(doc)
    rids = {r.id for r in resources}
    for d in extra_services:
        if d.resource not in rids:
            raise ConfigError(f"service {d.id} names unknown resource {d.resource}", "env.services")
        next(r for r in resources if r.id == d.resource).deployed_services.add(d.id)
    services = services + extra_services
    ids = [d.id for d in services]
    if len(ids) != len(set(ids)):
        raise ConfigError("duplicate service ids", "env.services")
    script = list(fault_script)
    for i, s in enumerate(script):
        target_pool = ids if s.scope == "service" else rids
        if s.target not in target_pool:
            raise ConfigError(f"unknown {s.scope} {s.target}", f"faults[{i}]")
    return SimEnv(resources, services, seed=seed, noise=noise, fault_script=script, heartbeat_timeout=timeout)


def fault_script_from_list(items, locus="faults") -> list[FaultSpec]:
    if not isinstance(items, list):
        raise ConfigError("fault script must be a JSON array", locus)
    out = []
    for i, obj in enumerate(items):
        loc = f"{locus}[{i}]"
        if not isinstance(obj, dict):
            raise ConfigError("expected an object", loc)
        extra = set(obj) - _FAULT_KEYS
        if extra:
            raise ConfigError(f"unknown keys {sorted(extra)}", loc)
        try:
            out.append(FaultSpec(
                scope=str(obj.get("scope")),
                target=str(obj.get("target")),
                cause=FaultCause(obj.get("cause")),
                at=None if obj.get("at") is None else float(obj["at"]),
                nth_dispatch=None if obj.get("nth_dispatch") is None else int(obj["nth_dispatch"]),
                duration=None if obj.get("duration") is None else float(obj["duration"]),
                activity=obj.get("activity"),
            ))
        except ConfigError as exc:
            raise ConfigError(str(exc), loc) from exc
        except ValueError as exc:
            raise ConfigError(str(exc), loc) from exc
    return out


def _read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(str(exc), str(path)) from exc


def load_fault_script(path) -> list[FaultSpec]:
    return fault_script_from_list(_read_json(path), str(path))


def build_env(config, seed: int = 0, fault_script=()) -> SimEnv:
    """Build an environment from a path or an already-parsed document."""
    doc = _read_json(config) if isinstance(config, (str, Path)) else config
    return env_from_doc(doc, seed, fault_script)


def homogeneous_env_doc(n: int, speed: float = 1.0, ports=(), disk_capacity: int = 10**12,
                        bandwidth: float = 1e8, report_period: float = 10.0) -> list[dict]:
    return [
        {
            "id": f"r{i + 1}",
            "speed": speed,
            "disk_capacity": disk_capacity,
            "bandwidth": bandwidth,
            "services": list(ports),
            "report_period_s": report_period,
        }
        for i in range(n)
    ]


# ---------------------------------------------------------------------------
# workload generators

MONTAGE_PORTS = ("mProject", "mDiffFit", "mConcatFit", "mBackground", "mAdd")
PIPELINE_PORT = "gmx"


def generate_montage(width: int, image_size: int = 4_000_000, project_work: float = 20.0,
                     diff_work: float = 10.0, fit_work: float = 2.0, background_work: float = 4.0,
                     add_work: float = 4.0) -> AbstractWorkflow:
    """project x width -> diff x (width-1) -> fit -> background -> coadd.

    Fit, background and coadd scale their work and table/mosaic sizes with
    ``width``. With width 1 the diff layer disappears.
    """
    if isinstance(width, bool) or not isinstance(width, int) or width < 1:
        raise InvalidWidth(f"width must be a positive integer, got {width!r}")
    pad = len(str(width))
    proj = [f"project_{i:0{pad}d}" for i in range(1, width + 1)]
    diff = [f"diff_{i:0{pad}d}" for i in range(1, width)]
    acts, deps = [], []
    proj_files = []
    for i, aid in enumerate(proj, 1):
        raw = FileSpec(f"raw_{i:0{pad}d}.fits", image_size)
        out = FileSpec(f"proj_{i:0{pad}d}.fits", image_size)
        proj_files.append(out)
        acts.append(AbstractActivity(aid, "mProject", project_work, (raw,), (out,)))
    diff_files = []
    for i, aid in enumerate(diff):
        out = FileSpec(f"diff_{i + 1:0{pad}d}.fits", max(1, image_size // 4))
        diff_files.append(out)
        acts.append(AbstractActivity(aid, "mDiffFit", diff_work, (proj_files[i], proj_files[i + 1]), (out,)))
        deps += [(proj[i], aid), (proj[i + 1], aid)]
    table = FileSpec("fits.tbl", 1000 * width)
    fit_inputs = tuple(diff_files) if diff else tuple(proj_files)
    acts.append(AbstractActivity("fit", "mConcatFit", fit_work * width, fit_inputs, (table,)))
    deps += [(d, "fit") for d in (diff or proj)]
    corr = tuple(FileSpec(f"corr_{i:0{pad}d}.fits", image_size) for i in range(1, width + 1))
    acts.append(AbstractActivity("background", "mBackground", background_work * width, (table, *proj_files), corr))
    deps.append(("fit", "background"))
    if diff:
        deps += [(p, "background") for p in proj]
    mosaic = FileSpec("mosaic.fits", image_size * width)
    acts.append(AbstractActivity("coadd", "mAdd", add_work * width, corr, (mosaic,)))
    deps.append(("background", "coadd"))
    return AbstractWorkflow(f"montage-{width}", tuple(acts), tuple(deps), frozenset({mosaic.name}))


def generate_pipeline(length: int, work: float = 10.0, size: int = 1_000_000) -> AbstractWorkflow:
    """Linear chain A1 -> ... -> An, each stage consuming its predecessor's output."""
    if isinstance(length, bool) or not isinstance(length, int) or length < 1:
        raise InvalidLength(f"length must be a positive integer, got {length!r}")
    acts, deps = [], []
    prev = FileSpec("conf.gro", size)
    for i in range(1, length + 1):
        out = FileSpec(f"stage{i}.out", size)
        acts.append(AbstractActivity(f"A{i}", PIPELINE_PORT, work, (prev,), (out,)))
        if i > 1:
            deps.append((f"A{i - 1}", f"A{i}"))
        prev = out
    return AbstractWorkflow(f"pipeline-{length}", tuple(acts), tuple(deps), frozenset({prev.name}))


def generate_bag(n: int, work: float = 10.0, port: str = PIPELINE_PORT, size: int = 1000) -> AbstractWorkflow:
    """``n`` independent, identical activities."""
    if n < 0:
        raise InvalidLength("n must be >= 0")
    pad = len(str(max(n, 1)))
    acts = tuple(
        AbstractActivity(f"T{i:0{pad}d}", port, work, (), (FileSpec(f"t{i:0{pad}d}.out", size),))
        for i in range(1, n + 1)
    )
    return AbstractWorkflow(f"bag-{n}", acts, (), frozenset(f.name for a in acts for f in a.outputs))
