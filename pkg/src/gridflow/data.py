"""Replica catalog, provenance log, reference-counted cleanup and
storage-aware admission."""

from __future__ import annotations

import copy
import threading
from dataclasses import dataclass, field

from .dyag import ResourceView, Task
from .errors import UnknownFile
from .model import EXTERNAL, AbstractWorkflow


@dataclass
class CatalogEntry:
    lfn: str
    size: int
    producer: str = EXTERNAL
    replicas: dict[str, str] = field(default_factory=dict)  # resource -> pfn
    consumers: frozenset[str] = frozenset()
    consumers_pending: set[str] = field(default_factory=set)
    is_output: bool = False
    version: int = 0


@dataclass(frozen=True)
class ProvenanceRecord:
    lfn: str
    activity: str
    kind: str  # "produced" | "modified"


@dataclass(frozen=True)
class CapacityVerdict:
    accept: bool
    deficit: int = 0

    def __bool__(self):
        return self.accept


@dataclass(frozen=True)
class CatalogState:
    version: int
    entries: dict


@dataclass
class _Reservation:
    resource: str
    inputs: dict[str, int]
    outputs: int

    @property
    def total(self):
        return sum(self.inputs.values()) + self.outputs


def pfn_for(lfn: str, resource: str) -> str:
    return f"gsiftp://{resource}/data/{lfn}"


class DataManager:
    def __init__(self, view: ResourceView, cleanup: bool = True):
        self.view = view
        self.cleanup = cleanup
        self.entries: dict[str, CatalogEntry] = {}
        self.version = 0
        self.provenance: list[ProvenanceRecord] = []
        self.deletions: list[tuple[float, str, str]] = []
        self.peak: dict[str, int] = {r.id: r.disk_used for r in view}
        self._reservations: dict[str, _Reservation] = {}
        self._lock = threading.Lock()

    # catalog -----------------------------------------------------------------

    def _bump(self, entry: CatalogEntry | None = None) -> None:
        self.version += 1
        if entry is not None:
            entry.version = self.version

    def register_workflow(self, w: AbstractWorkflow) -> None:
        with self._lock:
            for lfn, size in sorted(w.file_sizes.items()):
                consumers = frozenset(w.consumers.get(lfn, ()))
                producer = w.producers.get(lfn, EXTERNAL)
                entry = CatalogEntry(
                    lfn=lfn,
                    size=size,
                    producer=producer,
                    consumers=consumers,
                    consumers_pending=set(consumers),
                    is_output=lfn in w.outputs,
                )
                if producer == EXTERNAL:
                    entry.replicas[EXTERNAL] = pfn_for(lfn, EXTERNAL)
                self.entries[lfn] = entry
                self._bump(entry)

    def entry(self, lfn: str) -> CatalogEntry:
        try:
            return self.entries[lfn]
        except KeyError:
            raise UnknownFile(lfn) from None

    def map_logical(self, lfn: str) -> frozenset[tuple[str, str]]:
        return frozenset(self.entry(lfn).replicas.items())

    def locations(self, lfn: str) -> frozenset[str]:
        return frozenset(self.entry(lfn).replicas)

    def available(self, lfn: str) -> bool:
        """True when some replica sits on an alive resource or external storage."""
        return any(r == EXTERNAL or self.view.alive(r) for r in self.entry(lfn).replicas)

    def record_provenance(self, lfn: str, activity: str, kind: str) -> None:
        if kind not in ("produced", "modified"):
            raise ValueError(kind)
        with self._lock:
            self.provenance.append(ProvenanceRecord(lfn, activity, kind))
            entry = self.entries.get(lfn)
            if kind == "produced" and entry is not None and entry.producer != activity:
                entry.producer = activity
                self._bump(entry)

    def producer(self, lfn: str) -> str:
        return self.entry(lfn).producer

    def add_replica(self, lfn: str, resource: str) -> None:
        entry = self.entry(lfn)
        if resource in entry.replicas:
            return
        entry.replicas[resource] = pfn_for(lfn, resource)
        self._bump(entry)
        self._sync(resource)

    # disk accounting ---------------------------------------------------------

    def usage(self, resource: str) -> int:
        used = sum(e.size for e in self.entries.values() if resource in e.replicas)
        used += sum(r.total for r in self._reservations.values() if r.resource == resource)
        return used

    def _sync(self, resource: str) -> None:
        if resource == EXTERNAL or resource not in self.view.resources:
            return
        used = self.usage(resource)
        self.view[resource].disk_used = used
        if used > self.peak.get(resource, 0):
            self.peak[resource] = used

    def check_capacity(self, resource: str, task: Task) -> CapacityVerdict:
        r = self.view[resource]
        missing = sum(f.size for f in task.inputs if resource not in self.entries[f.name].replicas)
        need = r.disk_used + missing + sum(f.size for f in task.outputs)
        if need <= r.disk_capacity:
            return CapacityVerdict(True)
        return CapacityVerdict(False, need - r.disk_capacity)

    def reserve(self, task: Task, resource: str) -> None:
        """Hold disk for the task's missing inputs and its outputs."""
        inputs = {f.name: f.size for f in task.inputs if resource not in self.entries[f.name].replicas}
        self._reservations[task.id] = _Reservation(resource, inputs, sum(f.size for f in task.outputs))
        self._sync(resource)

    def release_reservation(self, task_id: str) -> None:
        res = self._reservations.pop(task_id, None)
        if res is not None:
            self._sync(res.resource)

    def reservation_of(self, task_id: str) -> str | None:
        res = self._reservations.get(task_id)
        return None if res is None else res.resource

    def stage_inputs(self, task: Task, resource: str) -> tuple[int, list[str]]:
        """Copy missing inputs onto ``resource``.

        Returns (bytes moved, lfns with no reachable replica). Nothing is
        copied when some input is unreachable.
        """
        lost = [f.name for f in task.inputs if not self.available(f.name)]
        if lost:
            return 0, lost
        moved = 0
        res = self._reservations.get(task.id)
        for f in task.inputs:
            entry = self.entries[f.name]
            if resource not in entry.replicas:
                moved += f.size
                entry.replicas[resource] = pfn_for(f.name, resource)
                self._bump(entry)
            if res is not None:
                res.inputs.pop(f.name, None)
        self._sync(resource)
        return moved, []

    def commit_outputs(self, task: Task, resource: str) -> None:
        res = self._reservations.get(task.id)
        if res is not None:
            res.outputs = 0
        for f in task.outputs:
            entry = self.entries[f.name]
            entry.replicas[resource] = pfn_for(f.name, resource)
            self._bump(entry)
            self.record_provenance(f.name, task.activity, "produced")
        self.release_reservation(task.id)
        self._sync(resource)

    # cleanup -----------------------------------------------------------------

    def release(self, activity: str, inputs=(), outputs=(), now: float = 0.0) -> list[tuple[str, str]]:
        """Drop ``activity`` from the pending consumers of its inputs and delete
        every non-output file nobody is waiting for any more."""
        deleted = []
        touched = set()
        for lfn in inputs:
            entry = self.entries[lfn]
            if activity in entry.consumers_pending:
                entry.consumers_pending.discard(activity)
                self._bump(entry)
            touched.add(lfn)
        touched.update(outputs)
        if not self.cleanup:
            return deleted
        for lfn in sorted(touched):
            entry = self.entries[lfn]
            if entry.consumers_pending or entry.is_output or not entry.replicas:
                continue
            hosts = sorted(entry.replicas)
            entry.replicas.clear()
            self._bump(entry)
            for rid in hosts:
                deleted.append((lfn, rid))
                self.deletions.append((now, lfn, rid))
                self._sync(rid)
        return deleted

    # snapshots ---------------------------------------------------------------

    def snapshot(self) -> CatalogState:
        return CatalogState(self.version, copy.deepcopy(self.entries))

    def restore(self, state: CatalogState) -> None:
        with self._lock:
            self.entries = copy.deepcopy(state.entries)
            self.version = state.version
            self._reservations.clear()
            for r in self.view:
                self._sync(r.id)

    def dump(self) -> dict:
        return {
            lfn: {
                "size": e.size,
                "replicas": sorted([rid, pfn] for rid, pfn in e.replicas.items()),
                "producer": e.producer,
                "is_output": e.is_output,
            }
            for lfn, e in sorted(self.entries.items())
        }
