"""Concrete service descriptors and requirement-based matchmaking."""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, replace
from pathlib import Path

from .errors import ConfigError, DuplicateService, InvalidDescriptor, UnknownService
from .model import RequirementSet


@dataclass(frozen=True)
class ServiceDescriptor:
    id: str
    port_type: str
    resource: str
    perf_profile: float  # seconds per work unit
    capabilities: frozenset[str] = frozenset()
    uptime: float = 0.0  # hours
    interface_url: str = ""
    expires_at: float | None = None

    def estimate(self, work: float) -> float:
        return work * self.perf_profile

    def expired(self, now: float | None) -> bool:
        return self.expires_at is not None and now is not None and now >= self.expires_at


@dataclass
class ReliabilityRecord:
    service: str
    successes: int = 0
    failures: int = 0
    last_failure_at: float | None = None


def qualifies(d: ServiceDescriptor, port_type: str, req: RequirementSet, task_work: float, now=None) -> bool:
    if d.port_type != port_type:
        return False
    if not req.required_capabilities <= d.capabilities:
        return False
    if req.max_expected_duration is not None and d.estimate(task_work) > req.max_expected_duration:
        return False
    if req.min_uptime is not None and d.uptime < req.min_uptime:
        return False
    return not d.expired(now)


class ServiceRegistry:
    """Service store with a single writer lock; readers work on a snapshot dict."""

    def __init__(self, descriptors=()):
        self._lock = threading.Lock()
        self._services: dict[str, ServiceDescriptor] = {}
        self._records: dict[str, ReliabilityRecord] = {}
        for d in descriptors:
            self.register(d)

    def __len__(self):
        return len(self._services)

    def __iter__(self):
        return iter(list(self._services.values()))

    def __contains__(self, service_id):
        return service_id in self._services

    def register(self, d: ServiceDescriptor) -> str:
        if not d.perf_profile > 0:
            raise InvalidDescriptor(f"{d.id}: perf_profile must be > 0")
        if d.uptime < 0:
            raise InvalidDescriptor(f"{d.id}: uptime must be >= 0")
        with self._lock:
            if d.id in self._services:
                raise DuplicateService(d.id)
            services = dict(self._services)
            services[d.id] = d
            self._services = services
            self._records[d.id] = ReliabilityRecord(d.id)
        return d.id

    def get(self, service_id: str) -> ServiceDescriptor:
        try:
            return self._services[service_id]
        except KeyError:
            raise UnknownService(service_id) from None

    def update(self, service_id: str, **changes) -> ServiceDescriptor:
        """Refresh monitored attributes (uptime, expires_at, ...) of a service."""
        with self._lock:
            d = replace(self.get(service_id), **changes)
            services = dict(self._services)
            services[service_id] = d
            self._services = services
        return d

    def find_candidates(self, port_type: str, req: RequirementSet, task_work: float, now=None) -> list[str]:
        snapshot = self._services
        matches = [d for d in snapshot.values() if qualifies(d, port_type, req, task_work, now)]
        matches.sort(key=lambda d: (d.estimate(task_work), d.id))
        return [d.id for d in matches]

    def record_outcome(self, service_id: str, success: bool, at: float) -> ReliabilityRecord:
        with self._lock:
            if service_id not in self._records:
                raise UnknownService(service_id)
            rec = self._records[service_id]
            if success:
                rec.successes += 1
            else:
                rec.failures += 1
                rec.last_failure_at = at
            return replace(rec)

    def reliability(self, service_id: str) -> ReliabilityRecord:
        if service_id not in self._records:
            raise UnknownService(service_id)
        return replace(self._records[service_id])


_DESC_KEYS = {"id", "port_type", "capabilities", "perf_profile", "uptime", "resource", "interface_url", "expires_at"}


def descriptor_from_dict(obj, locus="service", resource=None) -> ServiceDescriptor:
    if not isinstance(obj, dict):
        raise ConfigError("expected an object", locus)
    allowed = _DESC_KEYS if resource is None else _DESC_KEYS - {"resource"}
    extra = set(obj) - allowed
    if extra:
        raise ConfigError(f"unknown keys {sorted(extra)}", locus)
    required = ["id", "port_type", "perf_profile"] + (["resource"] if resource is None else [])
    missing = [k for k in required if k not in obj]
    if missing:
        raise ConfigError(f"missing keys {missing}", locus)
    try:
        d = ServiceDescriptor(
            id=str(obj["id"]),
            port_type=str(obj["port_type"]),
            resource=str(obj.get("resource", resource)),
            perf_profile=float(obj["perf_profile"]),
            capabilities=frozenset(obj.get("capabilities", [])),
            uptime=float(obj.get("uptime", 0.0)),
            interface_url=str(obj.get("interface_url", "")),
            expires_at=None if obj.get("expires_at") is None else float(obj["expires_at"]),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), locus) from exc
    if not d.perf_profile > 0:
        raise ConfigError("perf_profile must be > 0", locus)
    if d.uptime < 0:
        raise ConfigError("uptime must be >= 0", locus)
    return d


def load_registry(path) -> ServiceRegistry:
    """Bootstrap a registry from a JSON array of descriptors."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(str(exc), str(path)) from exc
    if not isinstance(doc, list):
        raise ConfigError("registry file must hold a JSON array", str(path))
    reg = ServiceRegistry()
    for i, obj in enumerate(doc):
        try:
            reg.register(descriptor_from_dict(obj, f"{path}[{i}]"))
        except DuplicateService as exc:
            raise ConfigError(f"duplicate service {exc}", f"{path}[{i}]") from exc
    return reg
