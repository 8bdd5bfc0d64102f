"""Dynamic resource allocation: live resource view, placement policies,
heartbeat-based failure detection and rescheduling."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Mapping

from .errors import InsufficientCapacity, NoAliveCandidate, UnknownResource
from .model import FileSpec


class AllocationPolicy(str, Enum):
    FCFS = "fcfs"
    LOAD_BALANCE = "load"
    MIN_EXEC_TIME = "mintime"
    MIN_DATA_TRANSFER = "mindata"

    @classmethod
    def parse(cls, text: str) -> AllocationPolicy:
        text = text.strip().lower()
        for p in cls:
            if text in (p.value, p.name.lower(), p.name.lower().replace("_", "")):
                return p
        raise ValueError(f"unknown policy {text!r}")


@dataclass
class ResourceInfo:
    id: str
    speed: float  # work units per second
    disk_capacity: int
    bandwidth: float = 1e9  # bytes per second, uniform per peer
    report_period: float = 10.0
    disk_used: int = 0
    running: list[str] = field(default_factory=list)
    queue: list[str] = field(default_factory=list)
    deployed_services: set[str] = field(default_factory=set)
    last_heartbeat: float = 0.0
    alive: bool = True
    heartbeat_timeout: float | None = None

    @property
    def timeout(self) -> float:
        return self.heartbeat_timeout if self.heartbeat_timeout is not None else 3 * self.report_period

    @property
    def load(self) -> int:
        return len(self.running) + len(self.queue)


@dataclass(frozen=True)
class ResourceReport:
    resource: str
    speed: float | None = None
    disk_capacity: int | None = None
    deployed_services: frozenset[str] | None = None


@dataclass(frozen=True)
class Task:
    id: str
    activity: str
    work: float
    candidates: frozenset[str]
    arrival: float = 0.0
    inputs: tuple[FileSpec, ...] = ()
    outputs: tuple[FileSpec, ...] = ()
    # lfn -> resources currently holding a replica
    locations: Mapping[str, frozenset[str]] = field(default_factory=dict)

    def missing_bytes(self, resource: str) -> int:
        return sum(f.size for f in self.inputs if resource not in self.locations.get(f.name, ()))


class ResourceView:
    """The scheduler's picture of the grid, refreshed by periodic reports."""

    def __init__(self, resources=()):
        self.resources: dict[str, ResourceInfo] = {}
        self.task_work: dict[str, float] = {}
        self.compute_start: dict[str, float] = {}
        for r in resources:
            self.add(r)

    def add(self, r: ResourceInfo) -> None:
        self.resources[r.id] = r

    def __getitem__(self, rid: str) -> ResourceInfo:
        try:
            return self.resources[rid]
        except KeyError:
            raise UnknownResource(rid) from None

    def __iter__(self):
        return iter(self.resources[k] for k in sorted(self.resources))

    def alive(self, rid: str) -> bool:
        r = self.resources.get(rid)
        return r is not None and r.alive

    def remaining_work(self, task_id: str, resource: ResourceInfo, now: float) -> float:
        work = self.task_work.get(task_id, 0.0)
        start = self.compute_start.get(task_id)
        if start is None or now <= start:
            return work
        return max(0.0, work - (now - start) * resource.speed)

    def wait_time(self, rid: str, now: float = 0.0) -> float:
        r = self[rid]
        pending = sum(self.remaining_work(t, r, now) for t in (*r.running, *r.queue))
        return pending / r.speed

    def exec_estimate(self, task: Task, rid: str, now: float = 0.0) -> float:
        return self.wait_time(rid, now) + task.work / self[rid].speed

    def transfer_estimate(self, task: Task, rid: str) -> float:
        return task.missing_bytes(rid) / self[rid].bandwidth

    # queue bookkeeping -----------------------------------------------------

    def enqueue(self, rid: str, task: Task) -> None:
        self[rid].queue.append(task.id)
        self.task_work[task.id] = task.work

    def start(self, rid: str, task_id: str, compute_start: float) -> None:
        r = self[rid]
        r.queue.remove(task_id)
        r.running.append(task_id)
        self.compute_start[task_id] = compute_start

    def discard(self, task_id: str) -> str | None:
        """Forget a task wherever it sits; returns the resource it was on."""
        for r in self.resources.values():
            for lst in (r.running, r.queue):
                if task_id in lst:
                    lst.remove(task_id)
                    self.task_work.pop(task_id, None)
                    self.compute_start.pop(task_id, None)
                    return r.id
        self.task_work.pop(task_id, None)
        self.compute_start.pop(task_id, None)
        return None


def update_resources(view: ResourceView, report: ResourceReport, now: float) -> None:
    r = view[report.resource]
    if report.speed is not None:
        r.speed = report.speed
    if report.disk_capacity is not None:
        r.disk_capacity = report.disk_capacity
    if report.deployed_services is not None:
        r.deployed_services = set(report.deployed_services)
    r.last_heartbeat = now
    r.alive = now - r.last_heartbeat <= r.timeout


def detect_failures(view: ResourceView, now: float) -> list[str]:
    """Flip stale resources to dead; each is reported once."""
    dead = []
    for r in view:
        if r.alive and now - r.last_heartbeat > r.timeout:
            r.alive = False
            dead.append(r.id)
    return dead


def policy_key(policy: AllocationPolicy, task: Task, view: ResourceView, rid: str, now: float = 0.0):
    r = view[rid]
    if policy is AllocationPolicy.FCFS:
        return (r.load, rid)
    if policy is AllocationPolicy.LOAD_BALANCE:
        return (r.load, rid)
    if policy is AllocationPolicy.MIN_EXEC_TIME:
        return (view.exec_estimate(task, rid, now), rid)
    if policy is AllocationPolicy.MIN_DATA_TRANSFER:
        return (view.transfer_estimate(task, rid), view.exec_estimate(task, rid, now), rid)
    raise ValueError(policy)


def allocate(
    task: Task,
    policy: AllocationPolicy,
    view: ResourceView,
    now: float = 0.0,
    accept: Callable[[str], bool] | None = None,
    exclude: frozenset[str] = frozenset(),
) -> str:
    """Choose a resource for ``task`` and append it to that resource's queue."""
    alive = [rid for rid in sorted(task.candidates) if rid not in exclude and view.alive(rid)]
    if not alive:
        raise NoAliveCandidate(task.id)
    if accept is not None:
        fits = [rid for rid in alive if accept(rid)]
        if not fits:
            raise InsufficientCapacity(task.id)
        alive = fits
    chosen = min(alive, key=lambda rid: policy_key(policy, task, view, rid, now))
    view.enqueue(chosen, task)
    return chosen


@dataclass
class RescheduleResult:
    moves: list[tuple[Task, str]] = field(default_factory=list)
    stranded: list[Task] = field(default_factory=list)


def reschedule(
    dead: str,
    policy: AllocationPolicy,
    view: ResourceView,
    tasks: Mapping[str, Task],
    now: float = 0.0,
    accept: Callable[[str, Task], bool] | None = None,
) -> RescheduleResult:
    """Move every task of a dead resource onto a surviving candidate.

    Tasks without any remaining live candidate are returned as stranded; the
    caller turns them into faults.
    """
    r = view[dead]
    displaced = [*r.running, *r.queue]
    r.running.clear()
    r.queue.clear()
    out = RescheduleResult()
    for tid in displaced:
        view.task_work.pop(tid, None)
        view.compute_start.pop(tid, None)
        task = tasks.get(tid)
        if task is None:
            continue
        try:
            check = None if accept is None else (lambda rid, t=task: accept(rid, t))
            rid = allocate(task, policy, view, now, accept=check, exclude=frozenset({dead}))
        except (NoAliveCandidate, InsufficientCapacity):
            out.stranded.append(task)
        else:
            out.moves.append((task, rid))
    return out
