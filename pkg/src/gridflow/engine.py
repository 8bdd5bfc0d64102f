"""Deterministic discrete-event workflow engine.

The engine plays the roles of process, queue, work and time managers: it
deploys abstract workflows, instantiates them, and drives every activity
through refine -> bind -> dispatch -> complete (or fault -> recovery) on a
single virtual-time event queue.
"""

from __future__ import annotations

import heapq
import itertools
import logging
from dataclasses import dataclass, field
from enum import Enum

from . import faults as fm
from .binder import Binder, Binding, ConcreteWorkflow, generate_concrete, refine
from .data import DataManager
from .dyag import (
    AllocationPolicy,
    ResourceReport,
    ResourceView,
    Task,
    allocate,
    detect_failures,
    reschedule,
    update_resources,
)
from .errors import (
    EventBudgetExceeded,
    ForeignSnapshot,
    GridflowError,
    InsufficientCapacity,
    NoAliveCandidate,
    NoCandidates,
    TimeTravel,
    UnknownDefinition,
)
from .faults import FaultCause, FaultConfig, FaultEvent, FaultManager, classify, fmt_time
from .gridsim import SimEnv
from .model import AbstractWorkflow, ActivityState, LifecycleEvent, topological_order, transition
from .registry import ServiceRegistry

log = logging.getLogger(__name__)

A = ActivityState
L = LifecycleEvent


class InstanceStatus(str, Enum):
    RUNNING = "Running"
    COMPLETED = "Completed"
    FAILED = "Failed"
    ROLLED_BACK = "RolledBack"


class WorkAction(str, Enum):
    REFINE = "Refine"
    BIND = "Bind"
    DISPATCH = "Dispatch"
    REPLICATE = "Replicate"


@dataclass(frozen=True)
class ProcessDefinition:
    id: str
    workflow: AbstractWorkflow
    concrete: ConcreteWorkflow
    policy_config: FaultConfig
    created_at: float = 0.0


@dataclass
class ProcessInstance:
    id: str
    definition: str
    activity_states: dict[str, ActivityState]
    attempt_counts: dict[str, int]
    clock: float = 0.0
    status: InstanceStatus = InstanceStatus.RUNNING
    started_at: float = 0.0
    finished_at: float | None = None
    reason: str = ""

    @property
    def active(self) -> bool:
        return self.status in (InstanceStatus.RUNNING, InstanceStatus.ROLLED_BACK)


# --- event payloads -----------------------------------------------------------


@dataclass(frozen=True)
class WorkObject:
    id: int
    activity: str
    action: WorkAction
    due: float
    task: str | None = None
    k: int = 0


@dataclass(frozen=True)
class Lifecycle:
    activity: str
    event: LifecycleEvent


@dataclass(frozen=True)
class TimerFired:
    timer: int
    target: str | None
    kind: str


@dataclass(frozen=True)
class MessageArrived:
    activity: str
    task: str
    exec_id: int


@dataclass(frozen=True)
class Report:
    resource: str


@dataclass(frozen=True)
class Fault:
    fault: FaultEvent
    task: str | None = None
    exec_id: int | None = None


@dataclass(frozen=True)
class EngineEvent:
    at: float
    seq: int
    payload: object
    epoch: int = 0

    @property
    def kind(self) -> str:
        p = self.payload
        if isinstance(p, Lifecycle):
            return p.event.value
        if isinstance(p, WorkObject):
            return p.action.value
        if isinstance(p, TimerFired):
            return f"Timer.{p.kind}"
        if isinstance(p, MessageArrived):
            return "Complete"
        if isinstance(p, Report):
            return "Heartbeat"
        if isinstance(p, Fault):
            return "Fault"
        return type(p).__name__

    @property
    def activity(self) -> str | None:
        p = self.payload
        if isinstance(p, Fault):
            return p.fault.activity
        if isinstance(p, TimerFired):
            return p.target
        return getattr(p, "activity", None)


PERIODIC = (Report,)


class EventQueue:
    """(at, seq)-ordered queue; seq is assigned at enqueue time."""

    def __init__(self):
        self._heap: list[tuple[float, int, EngineEvent]] = []
        self._seq = itertools.count()
        self.clock = 0.0
        self.cancelled: set[int] = set()
        self._nonperiodic = 0

    def __len__(self):
        return len(self._heap)

    def push(self, at: float, payload, epoch: int = 0) -> EngineEvent:
        if at < self.clock:
            raise TimeTravel(f"event at {at} precedes clock {self.clock}")
        ev = EngineEvent(at, next(self._seq), payload, epoch)
        heapq.heappush(self._heap, (at, ev.seq, ev))
        if not self._periodic(ev):
            self._nonperiodic += 1
        return ev

    def enqueue(self, e: EngineEvent) -> EngineEvent:
        return self.push(e.at, e.payload, e.epoch)

    def pop(self) -> EngineEvent | None:
        if not self._heap:
            return None
        _, _, ev = heapq.heappop(self._heap)
        self.clock = ev.at
        if not self._periodic(ev):
            self._nonperiodic -= 1
        return ev

    @staticmethod
    def _periodic(ev: EngineEvent) -> bool:
        p = ev.payload
        return isinstance(p, PERIODIC) or (isinstance(p, TimerFired) and p.kind in ("checkpoint",))

    def has_work(self) -> bool:
        return self._nonperiodic > 0


# --- trace --------------------------------------------------------------------


@dataclass(frozen=True)
class TraceRecord:
    at: float
    seq: int
    kind: str
    activity: str
    detail: str

    def line(self) -> str:
        return f"at={fmt_time(self.at)} seq={self.seq} kind={self.kind} activity={self.activity} detail={self.detail}"


class Trace(list):
    def lines(self) -> list[str]:
        return [r.line() for r in self]

    def text(self) -> str:
        return "".join(line + "\n" for line in self.lines())


@dataclass
class TaskRun:
    task: Task
    binding: Binding
    resource: str
    exec_id: int | None = None
    dispatched_at: float | None = None
    deadline_timer: int | None = None


@dataclass
class _Ctx:
    notes: list[str] = field(default_factory=list)

    def add(self, key, value):
        self.notes.append(f"{key}={value}")


class Engine:
    def __init__(
        self,
        env: SimEnv,
        policy: AllocationPolicy = AllocationPolicy.FCFS,
        cleanup: bool = True,
        event_budget: int = 10**6,
        registry: ServiceRegistry | None = None,
        action_log: fm.ActionLog | None = None,
        run_programs: bool = True,
    ):
        self.env = env
        self.policy = AllocationPolicy(policy)
        self.registry = registry if registry is not None else env.make_registry()
        self.view: ResourceView = env.make_view()
        self.data = DataManager(self.view, cleanup)
        self.binder = Binder(self.registry)
        self.event_budget = event_budget
        self.action_log = action_log if action_log is not None else fm.ActionLog()
        self.run_programs = run_programs
        self.queue = EventQueue()
        self.trace = Trace()
        self.definitions: dict[str, ProcessDefinition] = {}
        self.instances: dict[str, ProcessInstance] = {}
        self.instance: ProcessInstance | None = None
        self.definition: ProcessDefinition | None = None
        self.faults: FaultManager | None = None
        self.tasks: dict[str, TaskRun] = {}
        self.live_execs: set[int] = set()
        self.busy: dict[str, float] = {r.id: 0.0 for r in self.view}
        self.allocations: list[dict] = []
        self.dispatches: dict[str, int] = {}
        self.commits: dict[str, int] = {}
        self.deferred: list[str] = []
        self.epoch = 0
        self._def_ids = itertools.count(1)
        self._inst_ids = itertools.count(1)
        self._work_ids = itertools.count(1)
        self._timer_ids = itertools.count(1)
        self._exec_ids = itertools.count(1)
        self._task_ids: dict[str, int] = {}
        self._dispatch_pending: set[str] = set()
        self._hb_armed: set[str] = set()
        self._checkpointing = False

    # --- process manager ------------------------------------------------------

    @property
    def clock(self) -> float:
        return self.queue.clock

    def deploy(self, w: AbstractWorkflow, cfg: FaultConfig | None = None) -> ProcessDefinition:
        concrete = generate_concrete(w)
        d = ProcessDefinition(f"def-{next(self._def_ids)}", w, concrete, cfg or FaultConfig(), self.clock)
        self.definitions[d.id] = d
        return d

    def instantiate(self, d: ProcessDefinition | str, at: float = 0.0) -> ProcessInstance:
        def_id = d if isinstance(d, str) else d.id
        if def_id not in self.definitions:
            raise UnknownDefinition(def_id)
        if self.instance is not None and self.instance.active:
            raise GridflowError(f"instance {self.instance.id} is still running")
        d = self.definitions[def_id]
        w = d.workflow
        at = max(at, self.clock)
        inst = ProcessInstance(
            id=f"inst-{next(self._inst_ids)}",
            definition=d.id,
            activity_states={a.id: A.INACTIVE for a in w.activities},
            attempt_counts={a.id: 0 for a in w.activities},
            clock=at,
            started_at=at,
        )
        self.instances[inst.id] = inst
        self.instance, self.definition = inst, d
        self.faults = FaultManager(d.policy_config, self.action_log, self.run_programs)
        self.data.register_workflow(w)
        self.faults.take_snapshot(inst, self.data.snapshot())
        self._checkpointing = self._uses_checkpoints(d)
        if not w.activities:
            inst.status = InstanceStatus.COMPLETED
            inst.finished_at = at
            return inst
        for root in w.roots():
            self.queue.push(at, Lifecycle(root, L.DEPS_MET), self.epoch)
        for rid, period in self.env.heartbeat_streams():
            if rid not in self._hb_armed:
                self.queue.push(at + period, Report(rid))
                self._hb_armed.add(rid)
        for when, svc in self.env.expiries():
            self.queue.push(max(when, at), TimerFired(next(self._timer_ids), svc, "expire"))
        if self._checkpointing:
            self.set_timer(d.policy_config.checkpoint_interval, None, "checkpoint")
        return inst

    def _uses_checkpoints(self, d: ProcessDefinition) -> bool:
        cfg = d.policy_config
        chains = [cfg.global_chain, *cfg.per_workflow.values(), *cfg.per_activity.values()]
        return any(isinstance(p, fm.Checkpoint) for c in chains for p in c)

    # --- queue / time manager -------------------------------------------------

    def enqueue(self, e: EngineEvent) -> EngineEvent:
        return self.queue.enqueue(e)

    def set_timer(self, delay: float, target: str | None, kind: str) -> int:
        if delay < 0:
            raise ValueError("timer delay must be >= 0")
        tid = next(self._timer_ids)
        self.queue.push(self.clock + delay, TimerFired(tid, target, kind), self.epoch)
        return tid

    def cancel_timer(self, timer_id: int) -> None:
        self.queue.cancelled.add(timer_id)

    def _work(self, activity, action, task=None, k=0, at=None):
        at = self.clock if at is None else at
        wo = WorkObject(next(self._work_ids), activity, action, at, task, k)
        self.queue.push(at, wo, self.epoch)
        return wo

    # --- driver ---------------------------------------------------------------

    def step(self) -> EngineEvent | None:
        ev = self.queue.pop()
        if ev is None:
            return None
        ctx = _Ctx()
        inst = self.instance
        if inst is not None and inst.active:
            inst.clock = ev.at
        self._handle(ev, ctx)
        self.trace.append(TraceRecord(ev.at, ev.seq, ev.kind, ev.activity or "-", " ".join(ctx.notes) or "-"))
        return ev

    def run_to_completion(self, inst: ProcessInstance | None = None) -> tuple[ProcessInstance, Trace]:
        inst = inst or self.instance
        processed = 0
        while inst.active:
            if self.step() is None:
                break
            processed += 1
            if processed > self.event_budget:
                raise EventBudgetExceeded(f"more than {self.event_budget} events")
        if inst.active:
            self._fail(inst, "stalled")
            self.trace.append(TraceRecord(self.clock, -1, "Stalled", "-", "status=Failed"))
        return inst, self.trace

    # --- handlers -------------------------------------------------------------

    def _handle(self, ev: EngineEvent, ctx: _Ctx) -> None:
        p = ev.payload
        inst = self.instance
        if isinstance(p, Report):
            return self._on_report(p, ctx)
        if isinstance(p, TimerFired):
            if p.timer in self.queue.cancelled:
                ctx.add("cancelled", 1)
                return
            if p.kind == "checkpoint":
                return self._on_checkpoint_timer(ctx)
            if p.kind == "expire":
                self.registry.update(p.target, expires_at=ev.at)
                ctx.add("expired", p.target)
                return
        if inst is None or not inst.active:
            ctx.add("ignored", "inactive-instance")
            return
        if ev.epoch != self.epoch:
            ctx.add("ignored", "stale-epoch")
            return
        if isinstance(p, Lifecycle):
            return self._on_lifecycle(p, ctx)
        if isinstance(p, WorkObject):
            if p.action is WorkAction.REFINE:
                return self._on_refine(p.activity, ctx)
            if p.action is WorkAction.BIND:
                return self._on_bind(p.activity, ctx)
            if p.action is WorkAction.DISPATCH:
                return self._on_dispatch(p, ctx)
            if p.action is WorkAction.REPLICATE:
                return self._on_replicate(p.activity, p.k, ctx)
        if isinstance(p, TimerFired):
            if p.kind == "retry":
                return self._on_retry_timer(p.target, ctx)
            if p.kind == "deadline":
                return self._on_deadline(p, ctx)
            ctx.add("timer", p.kind)
            return
        if isinstance(p, MessageArrived):
            return self._on_complete(p, ctx)
        if isinstance(p, Fault):
            return self._on_fault(p, ctx)

    def _move(self, activity: str, event: LifecycleEvent, ctx: _Ctx) -> ActivityState:
        inst = self.instance
        old = inst.activity_states[activity]
        new = transition(old, event)
        inst.activity_states[activity] = new
        ctx.add("state", f"{old.value}->{new.value}")
        return new

    def _state(self, activity: str) -> ActivityState:
        return self.instance.activity_states[activity]

    def _on_lifecycle(self, p: Lifecycle, ctx: _Ctx) -> None:
        a = p.activity
        if p.event is L.DEPS_MET:
            if self._state(a) is not A.INACTIVE:
                ctx.add("ignored", self._state(a).value)
                return
            self._move(a, L.DEPS_MET, ctx)
            self._work(a, WorkAction.REFINE)
        elif p.event is L.ROLLBACK_BEGIN:
            self._move(a, L.ROLLBACK_BEGIN, ctx)
        elif p.event is L.ROLLBACK_DONE:
            if self._state(a) is not A.COMPENSATING:
                ctx.add("ignored", self._state(a).value)
                return
            self._move(a, L.ROLLBACK_DONE, ctx)
            self._work(a, WorkAction.REFINE)

    def _activity(self, a: str):
        return self.definition.workflow.by_id[a]

    def _candidates(self, a: str, ctx: _Ctx) -> list[str] | None:
        act = self._activity(a)
        try:
            cands = refine(act, self.registry, self.definition.concrete, self.clock,
                           exclude=self.faults.excluded_services(self.instance.id, a))
        except NoCandidates:
            ctx.add("error", "NoCandidates")
            self._raise_fault(a, FaultCause.SERVICE_EXPIRED, None, None, "no-candidates", ctx)
            return None
        return cands

    def _on_refine(self, a: str, ctx: _Ctx) -> None:
        if self._state(a) is not A.READY:
            ctx.add("ignored", self._state(a).value)
            return
        cands = self._candidates(a, ctx)
        if cands is None:
            return
        ctx.add("candidates", ",".join(cands))
        self._work(a, WorkAction.BIND)

    def _new_task(self, a: str) -> Task:
        n = self._task_ids.get(a, 0) + 1
        self._task_ids[a] = n
        cands = self.definition.concrete.candidate_lists.get(a, [])
        hosts = frozenset(self.registry.get(s).resource for s in cands)
        return self._task_for(f"{a}#{n}", a, hosts)

    def _task_for(self, tid: str, a: str, hosts) -> Task:
        act = self._activity(a)
        return Task(
            id=tid,
            activity=a,
            work=act.work,
            candidates=frozenset(hosts),
            arrival=self.clock,
            inputs=act.inputs,
            outputs=act.outputs,
            locations={f.name: self.data.locations(f.name) for f in act.inputs},
        )

    def _place(self, a: str, ctx: _Ctx, exclude=frozenset()) -> TaskRun | None:
        """Allocate + bind one task for ``a``; returns None on failure (already handled)."""
        task = self._new_task(a)
        accept = lambda rid: bool(self.data.check_capacity(rid, task))
        pre = self._allocation_view(task, exclude)
        try:
            rid = allocate(task, self.policy, self.view, self.clock, accept=accept, exclude=exclude)
        except NoAliveCandidate:
            ctx.add("error", "NoAliveCandidate")
            return None
        except InsufficientCapacity:
            ctx.add("deferred", "capacity")
            if a not in self.deferred:
                self.deferred.append(a)
            return None
        self.allocations.append({**pre, "chosen": rid})
        b = self.binder.bind(self._activity(a), self.definition.concrete.candidate_lists[a], rid,
                             self.view.alive, self.clock, self.definition.concrete)
        self.data.reserve(task, rid)
        run = TaskRun(task, b, rid)
        self.tasks[task.id] = run
        ctx.add("task", task.id)
        ctx.add("resource", rid)
        ctx.add("service", b.service)
        ctx.add("attempt", b.attempt)
        return run

    def _allocation_view(self, task: Task, exclude) -> dict:
        return {
            "at": self.clock,
            "policy": self.policy,
            "task": task,
            "exclude": frozenset(exclude),
            "resources": {
                rid: {
                    "alive": r.alive,
                    "load": r.load,
                    "queue": len(r.queue),
                    "speed": r.speed,
                    "bandwidth": r.bandwidth,
                    "pending_work": sum(self.view.remaining_work(t, r, self.clock) for t in (*r.running, *r.queue)),
                    "accept": bool(self.data.check_capacity(rid, task)),
                }
                for rid, r in sorted(self.view.resources.items())
            },
        }

    def _on_bind(self, a: str, ctx: _Ctx) -> None:
        if self._state(a) is not A.READY:
            ctx.add("ignored", self._state(a).value)
            return
        if a in self.deferred:
            self.deferred.remove(a)
        run = self._place(a, ctx)
        if run is None:
            if a not in self.deferred:
                self._raise_fault(a, FaultCause.LINK_DOWN, None, None, "no-viable-binding", ctx)
            return
        self._kick(run.resource)

    def _on_replicate(self, a: str, k: int, ctx: _Ctx) -> None:
        if self._state(a) is not A.READY:
            ctx.add("ignored", self._state(a).value)
            return
        if a in self.deferred:
            self.deferred.remove(a)
        if self._candidates(a, ctx) is None:
            return
        chosen: list[str] = []
        for _ in range(k):
            sub = _Ctx()
            run = self._place(a, sub, exclude=frozenset(chosen))
            if run is None:
                break
            chosen.append(run.resource)
            ctx.add("replica", f"{run.task.id}@{run.resource}")
        if a in self.deferred and chosen:
            self.deferred.remove(a)
        if not chosen:
            if a not in self.deferred:
                self._raise_fault(a, FaultCause.LINK_DOWN, None, None, "no-viable-binding", ctx)
            return
        for rid in chosen:
            self._kick(rid)

    def _kick(self, rid: str) -> None:
        r = self.view.resources.get(rid)
        if r is None or not r.alive or r.running or not r.queue or rid in self._dispatch_pending:
            return
        self._dispatch_pending.add(rid)
        tid = r.queue[0]
        self._work(self.tasks[tid].task.activity, WorkAction.DISPATCH, task=tid)

    def _on_dispatch(self, p: WorkObject, ctx: _Ctx) -> None:
        tid = p.task
        run = self.tasks.get(tid)
        rid = run.resource if run else None
        if rid is not None:
            self._dispatch_pending.discard(rid)
        if run is None:
            ctx.add("ignored", "cancelled-task")
            return
        r = self.view[rid]
        if not r.alive or r.running or not r.queue or r.queue[0] != tid:
            ctx.add("ignored", "not-head")
            self._kick(rid)
            return
        a = run.task.activity
        state = self._state(a)
        if state is A.READY:
            self._move(a, L.DISPATCH, ctx)
        elif state is not A.EXECUTING:
            ctx.add("ignored", state.value)
            self._drop_task(tid)
            self._kick(rid)
            return
        inst = self.instance
        inst.attempt_counts[a] += 1
        self.dispatches[a] = self.dispatches.get(a, 0) + 1
        moved, lost = self.data.stage_inputs(run.task, rid)
        exec_id = next(self._exec_ids)
        run.exec_id = exec_id
        run.dispatched_at = self.clock
        self.live_execs.add(exec_id)
        ctx.add("task", tid)
        ctx.add("exec", exec_id)
        ctx.add("resource", rid)
        ctx.add("service", run.binding.service)
        if lost:
            self.view.start(rid, tid, self.clock)
            ctx.add("lost_inputs", ",".join(lost))
            self.queue.push(self.clock, Fault(FaultEvent(self.clock, a, FaultCause.VALUE_OUT_OF_BOUNDS,
                                                         run.binding, rid, "inputs-unavailable"), tid, exec_id),
                            self.epoch)
            return
        out = self.env.execute_task(run.task, rid, run.binding.service, self.clock, moved)
        self.view.start(rid, tid, self.clock + out.transfer)
        ctx.add("transfer", fmt_time(out.transfer))
        ctx.add("outcome", out.kind)
        if out.kind == "complete":
            self.queue.push(out.at, MessageArrived(a, tid, exec_id), self.epoch)
        elif out.kind == "fault":
            f = FaultEvent(out.at, a, out.cause, run.binding, rid, f"script[{out.spec_index}]")
            self.queue.push(out.at, Fault(f, tid, exec_id), self.epoch)
        limit = self._activity(a).requirements.max_expected_duration
        if limit is not None:
            tmr = next(self._timer_ids)
            self.queue.push(self.clock + out.transfer + limit, TimerFired(tmr, tid, "deadline"), self.epoch)
            run.deadline_timer = tmr

    def _end_exec(self, tid: str) -> TaskRun | None:
        """Forget a task and account its resource time; returns the run."""
        run = self.tasks.pop(tid, None)
        if run is None:
            return None
        if run.exec_id is not None and run.exec_id in self.live_execs:
            self.live_execs.discard(run.exec_id)
            self.busy[run.resource] += self.clock - run.dispatched_at
        if run.deadline_timer is not None:
            self.cancel_timer(run.deadline_timer)
        self.view.discard(tid)
        self.data.release_reservation(tid)
        return run

    def _drop_task(self, tid: str) -> TaskRun | None:
        run = self._end_exec(tid)
        if run is not None:
            self._dispatch_pending.discard(run.resource)
        return run

    def _siblings(self, a: str, but: str | None = None) -> list[str]:
        return sorted(t for t, r in self.tasks.items() if r.task.activity == a and t != but)

    def _on_complete(self, p: MessageArrived, ctx: _Ctx) -> None:
        if p.exec_id not in self.live_execs:
            ctx.add("ignored", "stale-exec")
            return
        run = self.tasks[p.task]
        a = p.activity
        rid = run.resource
        ctx.add("task", p.task)
        ctx.add("exec", p.exec_id)
        ctx.add("resource", rid)
        self._end_exec(p.task)
        if self._state(a) is not A.EXECUTING:
            ctx.add("ignored", self._state(a).value)
            self._kick(rid)
            return
        self._move(a, L.COMPLETE, ctx)
        self.commits[a] = self.commits.get(a, 0) + 1
        ctx.add("commit", 1)
        self.registry.record_outcome(run.binding.service, True, self.clock)
        self.data.commit_outputs(run.task, rid)
        act = self._activity(a)
        deleted = self.data.release(a, [f.name for f in act.inputs], [f.name for f in act.outputs], self.clock)
        if deleted:
            ctx.add("deleted", ",".join(f"{lfn}@{r}" for lfn, r in deleted))
        freed = {rid}
        cancelled = []
        for sib in self._siblings(a):
            srun = self._drop_task(sib)
            freed.add(srun.resource)
            cancelled.append(f"{sib}:{srun.exec_id if srun.exec_id is not None else '-'}@{srun.resource}")
        if cancelled:
            ctx.add("cancelled", ",".join(cancelled))
        inst = self.instance
        wf = self.definition.workflow
        if all(s is A.FINISHED for s in inst.activity_states.values()):
            inst.status = InstanceStatus.COMPLETED
            inst.finished_at = self.clock
            ctx.add("status", inst.status.value)
            return
        for succ in wf.successors[a]:
            if inst.activity_states[succ] is A.INACTIVE and all(
                inst.activity_states[q] is A.FINISHED for q in wf.predecessors[succ]
            ):
                self.queue.push(self.clock, Lifecycle(succ, L.DEPS_MET), self.epoch)
        for r in sorted(freed):
            self._kick(r)
        self._retry_deferred()

    def _retry_deferred(self) -> None:
        pending, self.deferred = self.deferred, []
        for a in pending:
            self._work(a, WorkAction.BIND)

    # --- faults ---------------------------------------------------------------

    def _raise_fault(self, a, cause, binding, rid, detail, ctx, task=None):
        """Fault detected inside a handler; processed as a separate event now."""
        f = FaultEvent(self.clock, a, cause, binding, rid, detail)
        self.queue.push(self.clock, Fault(f, task, None), self.epoch)
        ctx.add("fault", cause.value)

    def _on_deadline(self, p: TimerFired, ctx: _Ctx) -> None:
        run = self.tasks.get(p.target)
        if run is None or run.exec_id not in self.live_execs:
            ctx.add("ignored", "finished")
            return
        f = FaultEvent(self.clock, run.task.activity, FaultCause.RESPONSE_DEADLINE_EXCEEDED, run.binding,
                       run.resource, "deadline")
        self.queue.push(self.clock, Fault(f, p.target, run.exec_id), self.epoch)
        ctx.add("fault", f.cause.value)

    def _on_fault(self, p: Fault, ctx: _Ctx) -> None:
        f = p.fault
        a = f.activity
        if p.exec_id is not None and p.exec_id not in self.live_execs:
            ctx.add("ignored", "stale-exec")
            return
        ctx.add("cause", f.cause.value)
        ctx.add("class", classify(f).value)
        if f.resource:
            ctx.add("resource", f.resource)
        if p.task is not None:
            ctx.add("task", p.task)
            run = self._end_exec(p.task)
            if run is not None:
                self._dispatch_pending.discard(run.resource)
                if run.exec_id is not None:
                    ctx.add("exec", run.exec_id)
                self._kick(run.resource)
        if f.binding is not None:
            self.registry.record_outcome(f.binding.service, False, self.clock)
        fired = self.faults.record(f)
        if fired:
            ctx.add("actions", ",".join(x.action.value for x in fired))
        if self._siblings(a):
            ctx.add("replicas_left", len(self._siblings(a)))
            return
        state = self._state(a)
        if state is A.EXECUTING:
            self._move(a, L.FAULT, ctx)
        elif state is not A.READY:
            ctx.add("ignored", state.value)
            return
        chain = self.faults.chain_for(a, self.definition.workflow.name)
        decision = self.faults.handle(self.instance, f, chain)
        ctx.add("policy", f"{decision.kind}[{decision.policy_index}]")
        self._apply(a, decision, ctx)

    def _apply(self, a: str, d: fm.RecoveryDecision, ctx: _Ctx) -> None:
        state = self._state(a)
        if d.kind == "retry":
            self.set_timer(d.delay, a, "retry")
        elif d.kind == "rebind":
            if state is A.FAULTED:
                self._move(a, L.REBIND, ctx)
            if d.exclude:
                ctx.add("exclude", d.exclude)
            self._work(a, WorkAction.REFINE)
        elif d.kind == "replicate":
            snap = self.faults.take_snapshot(self.instance, self.data.snapshot())
            ctx.add("snapshot", snap.id)
            if state is A.FAULTED:
                self._move(a, L.RECOVERY_RETRY, ctx)
            self._work(a, WorkAction.REPLICATE, k=d.k)
        elif d.kind == "rollback":
            self.rollback(d.snapshot, ctx)
        else:
            if state is A.FAULTED:
                self._move(a, L.ESCALATE, ctx)
            self._fail(self.instance, f"escalated:{a}", ctx)

    def _on_retry_timer(self, a: str, ctx: _Ctx) -> None:
        state = self._state(a)
        if state is A.FAULTED:
            self._move(a, L.RECOVERY_RETRY, ctx)
        elif state is not A.READY:
            ctx.add("ignored", state.value)
            return
        self._work(a, WorkAction.REFINE)

    def _fail(self, inst: ProcessInstance, reason: str, ctx: _Ctx | None = None) -> None:
        ctx = ctx or _Ctx()
        for tid in sorted(self.tasks):
            run = self.tasks[tid]
            a = run.task.activity
            self._drop_task(tid)
            if inst.activity_states[a] is A.EXECUTING:
                self._move(a, L.CANCEL, ctx)
        aborted = []
        for a in sorted(inst.activity_states):
            if inst.activity_states[a] not in (A.FINISHED, A.ABORTED):
                inst.activity_states[a] = A.ABORTED
                aborted.append(a)
        if aborted:
            ctx.add("aborted", ",".join(aborted))
        inst.status = InstanceStatus.FAILED
        inst.finished_at = self.clock
        inst.reason = reason
        self.deferred.clear()
        ctx.add("status", f"{inst.status.value}:{reason}")

    # --- checkpoint / rollback -------------------------------------------------

    def checkpoint(self) -> fm.Snapshot:
        return self.faults.take_snapshot(self.instance, self.data.snapshot())

    def _on_checkpoint_timer(self, ctx: _Ctx) -> None:
        inst = self.instance
        if inst is None or not inst.active:
            return
        snap = self.checkpoint()
        ctx.add("snapshot", snap.id)
        if self.queue.has_work() or self.tasks:
            self.set_timer(self.definition.policy_config.checkpoint_interval, None, "checkpoint")

    def rollback(self, snap: fm.Snapshot, ctx: _Ctx | None = None) -> ProcessInstance:
        """Cancel all in-flight work, restore the snapshot, and requeue activities
        according to their restored states."""
        ctx = ctx or _Ctx()
        inst = self.instance
        if snap.instance != inst.id:
            raise ForeignSnapshot(f"snapshot {snap.id} belongs to {snap.instance}")
        for tid in sorted(self.tasks):
            self._drop_task(tid)
        self._dispatch_pending.clear()
        self.deferred.clear()
        self.epoch += 1
        fm.rollback(inst, snap, self.data)
        inst.status = InstanceStatus.ROLLED_BACK
        ctx.add("rollback", snap.id)
        self._resume_after_rollback()
        return inst

    def _resume_after_rollback(self) -> None:
        inst = self.instance
        wf = self.definition.workflow
        for a in topological_order(wf):
            state = inst.activity_states[a]
            if state is A.INACTIVE:
                if all(inst.activity_states[q] is A.FINISHED for q in wf.predecessors[a]):
                    self.queue.push(self.clock, Lifecycle(a, L.DEPS_MET), self.epoch)
            elif state is A.READY:
                self._work(a, WorkAction.REFINE)
            elif state in (A.EXECUTING, A.FAULTED, A.COMPENSATING):
                if state is not A.COMPENSATING:
                    self.queue.push(self.clock, Lifecycle(a, L.ROLLBACK_BEGIN), self.epoch)
                self.queue.push(self.clock, Lifecycle(a, L.ROLLBACK_DONE), self.epoch)
        for r in self.view:
            self._kick(r.id)

    # --- monitoring -------------------------------------------------------------

    def _on_report(self, p: Report, ctx: _Ctx) -> None:
        rid = p.resource
        now = self.clock
        r = self.view[rid]
        if self.env.crashed(rid, now):
            ctx.add("report", "missing")
        else:
            was_alive = r.alive
            truth = self.env.resource(rid)
            update_resources(self.view, ResourceReport(rid, truth.speed, truth.disk_capacity,
                                                       frozenset(truth.deployed_services)), now)
            ctx.add("report", "ok")
            if not was_alive:
                ctx.add("revived", rid)
                self._kick(rid)
                if self.instance is not None and self.instance.active:
                    self._retry_deferred()
        dead = detect_failures(self.view, now)
        for d in dead:
            ctx.add("dead", d)
            self._on_resource_death(d, ctx)
        inst = self.instance
        if inst is not None and inst.active and (self.queue.has_work() or self.tasks):
            self.queue.push(now + r.report_period, Report(rid))
        else:
            self._hb_armed.discard(rid)

    def _on_resource_death(self, dead: str, ctx: _Ctx) -> None:
        inst = self.instance
        if inst is None or not inst.active:
            return
        r = self.view[dead]
        displaced = [*r.running, *r.queue]
        affected = {t: self.tasks[t].task for t in displaced if t in self.tasks}
        for tid in displaced:
            run = self.tasks.get(tid)
            if run is not None and run.exec_id is not None and run.exec_id in self.live_execs:
                self.live_execs.discard(run.exec_id)
                self.busy[dead] += self.clock - run.dispatched_at
                run.exec_id = None
                if run.deadline_timer is not None:
                    self.cancel_timer(run.deadline_timer)
            self.data.release_reservation(tid)
        self._dispatch_pending.discard(dead)

        def accept(rid, task):
            return bool(self.data.check_capacity(rid, task))

        result = reschedule(dead, self.policy, self.view, affected, self.clock, accept=accept)
        for task, rid in result.moves:
            run = self.tasks[task.id]
            a = task.activity
            cands = [s for s in self.definition.concrete.candidate_lists.get(a, [])]
            b = self.binder.bind(self._activity(a), cands, rid, self.view.alive, self.clock,
                                 self.definition.concrete)
            self.data.reserve(task, rid)
            run.binding, run.resource = b, rid
            ctx.add("moved", f"{task.id}->{rid}")
            self._kick(rid)
        for task in result.stranded:
            run = self.tasks[task.id]
            f = FaultEvent(self.clock, task.activity, FaultCause.LINK_DOWN, run.binding, dead, "stranded")
            self.queue.push(self.clock, Fault(f, task.id, None), self.epoch)
            ctx.add("stranded", task.id)


def simulate(workflow: AbstractWorkflow, env: SimEnv, policy=AllocationPolicy.FCFS, cfg: FaultConfig | None = None,
             cleanup: bool = True, event_budget: int = 10**6, run_programs: bool = True):
    """deploy -> instantiate -> run_to_completion; returns (engine, instance)."""
    engine = Engine(env, policy, cleanup=cleanup, event_budget=event_budget, run_programs=run_programs)
    d = engine.deploy(workflow, cfg)
    inst = engine.instantiate(d, 0.0)
    engine.run_to_completion(inst)
    return engine, inst
