"""Fault taxonomy, user policy chains, checkpoint/rollback bookkeeping and
threshold-triggered actions."""

from __future__ import annotations

import itertools
import json
import logging
import subprocess
import threading
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Union

from .errors import ConfigError, ForeignSnapshot

log = logging.getLogger(__name__)


def fmt_time(t: float) -> str:
    text = format(float(t), ".6f").rstrip("0").rstrip(".")
    return "0" if text in ("", "-0") else text


class FaultClass(str, Enum):
    NETWORK = "Network"
    TIMING = "Timing"
    RESPONSE = "Response"
    LIFECYCLE = "LifeCycle"
    INTERACTION = "Interaction"


class FaultCause(str, Enum):
    MESSAGE_LOST = "MessageLost"
    LINK_DOWN = "LinkDown"
    CONNECT_TIMEOUT = "ConnectTimeout"
    RESPONSE_DEADLINE_EXCEEDED = "ResponseDeadlineExceeded"
    VALUE_OUT_OF_BOUNDS = "ValueOutOfBounds"
    SERVICE_EXPIRED = "ServiceExpired"
    PROTOCOL_MISMATCH = "ProtocolMismatch"
    APP_CRASH = "AppCrash"
    NO_USER_RESPONSE = "NoUserResponse"


_CLASS_OF = {
    FaultCause.MESSAGE_LOST: FaultClass.NETWORK,
    FaultCause.LINK_DOWN: FaultClass.NETWORK,
    FaultCause.CONNECT_TIMEOUT: FaultClass.TIMING,
    FaultCause.RESPONSE_DEADLINE_EXCEEDED: FaultClass.TIMING,
    FaultCause.NO_USER_RESPONSE: FaultClass.TIMING,
    FaultCause.VALUE_OUT_OF_BOUNDS: FaultClass.RESPONSE,
    FaultCause.APP_CRASH: FaultClass.RESPONSE,
    FaultCause.SERVICE_EXPIRED: FaultClass.LIFECYCLE,
    FaultCause.PROTOCOL_MISMATCH: FaultClass.INTERACTION,
}


@dataclass(frozen=True)
class FaultEvent:
    at: float
    activity: str
    cause: FaultCause
    binding: object = None  # binder.Binding, absent for faults raised before dispatch
    resource: str | None = None
    detail: str = ""

    @property
    def fault_class(self) -> FaultClass:
        return classify(self)


def classify(f: FaultEvent | FaultCause) -> FaultClass:
    cause = f.cause if isinstance(f, FaultEvent) else FaultCause(f)
    return _CLASS_OF[cause]


# ---------------------------------------------------------------------------
# policies


@dataclass(frozen=True)
class Retry:
    max_attempts: int = 1
    backoff: float = 0.0


@dataclass(frozen=True)
class Rebind:
    pass


@dataclass(frozen=True)
class Checkpoint:
    pass


@dataclass(frozen=True)
class Replicate:
    k: int = 2


@dataclass(frozen=True)
class Escalate:
    pass


Policy = Union[Retry, Rebind, Checkpoint, Replicate, Escalate]
PolicyChain = tuple  # tuple[Policy, ...]

DEFAULT_CHAIN: PolicyChain = (Retry(2, 0.0), Rebind(), Escalate())


def check_chain(chain, locus="chain") -> None:
    if not chain:
        raise ConfigError("policy chain is empty", locus)
    for i, p in enumerate(chain):
        if isinstance(p, Escalate) and i != len(chain) - 1:
            raise ConfigError("Escalate must be the last policy", f"{locus}[{i}]")
        if isinstance(p, Retry) and (p.max_attempts < 1 or p.backoff < 0):
            raise ConfigError("Retry needs max_attempts >= 1 and backoff >= 0", f"{locus}[{i}]")
        if isinstance(p, Replicate) and p.k < 2:
            raise ConfigError("Replicate needs k >= 2", f"{locus}[{i}]")
    if not isinstance(chain[-1], Escalate):
        raise ConfigError("policy chain must end with Escalate", locus)


class ActionKind(str, Enum):
    ALERT_RECORD = "AlertRecord"
    RUN_PROGRAM = "RunProgram"
    MESSAGE_RECORD = "MessageRecord"


@dataclass(frozen=True)
class ActionTrigger:
    action: ActionKind
    threshold: int = 1
    window: float = 60.0
    fault_class: FaultClass | None = None  # None matches any class
    path: str | None = None
    args: tuple[str, ...] = ()

    def __post_init__(self):
        if self.threshold < 1:
            raise ConfigError("threshold must be >= 1", "trigger")
        if not self.window > 0:
            raise ConfigError("window must be > 0", "trigger")
        if self.action is ActionKind.RUN_PROGRAM and not self.path:
            raise ConfigError("RunProgram needs a path", "trigger")


@dataclass
class FaultConfig:
    global_chain: PolicyChain = DEFAULT_CHAIN
    per_workflow: dict[str, PolicyChain] = field(default_factory=dict)
    per_activity: dict[str, PolicyChain] = field(default_factory=dict)
    triggers: tuple[ActionTrigger, ...] = ()
    checkpoint_interval: float = 60.0

    def __post_init__(self):
        check_chain(self.global_chain, "global")
        for k, c in self.per_workflow.items():
            check_chain(c, f"workflows.{k}")
        for k, c in self.per_activity.items():
            check_chain(c, f"activities.{k}")


def resolve_chain(activity: str, workflow: str, cfg: FaultConfig) -> PolicyChain:
    if activity in cfg.per_activity:
        return cfg.per_activity[activity]
    if workflow in cfg.per_workflow:
        return cfg.per_workflow[workflow]
    return cfg.global_chain


# ---------------------------------------------------------------------------
# fault-config file

_POLICY_TYPES = {"retry": Retry, "rebind": Rebind, "checkpoint": Checkpoint, "replicate": Replicate, "escalate": Escalate}


def policy_from_dict(obj, locus) -> Policy:
    if not isinstance(obj, dict) or "type" not in obj or set(obj) - {"type", "params"}:
        raise ConfigError("policy must be {type, params}", locus)
    kind = str(obj["type"]).lower()
    if kind not in _POLICY_TYPES:
        raise ConfigError(f"unknown policy type {obj['type']!r}", locus)
    params = obj.get("params") or {}
    try:
        return _POLICY_TYPES[kind](**params)
    except TypeError as exc:
        raise ConfigError(str(exc), locus) from exc


def _chain(items, locus) -> PolicyChain:
    if not isinstance(items, list):
        raise ConfigError("expected a list of policies", locus)
    chain = tuple(policy_from_dict(p, f"{locus}[{i}]") for i, p in enumerate(items))
    check_chain(chain, locus)
    return chain


def trigger_from_dict(obj, locus) -> ActionTrigger:
    allowed = {"class", "threshold", "window", "action", "path", "args"}
    if not isinstance(obj, dict) or set(obj) - allowed or "action" not in obj:
        raise ConfigError(f"trigger keys must be within {sorted(allowed)} and include action", locus)
    try:
        cls = obj.get("class")
        return ActionTrigger(
            action=ActionKind(obj["action"]),
            threshold=int(obj.get("threshold", 1)),
            window=float(obj.get("window", 60.0)),
            fault_class=None if cls in (None, "any") else FaultClass(cls),
            path=obj.get("path"),
            args=tuple(str(a) for a in obj.get("args", ())),
        )
    except ValueError as exc:
        raise ConfigError(str(exc), locus) from exc


def fault_config_from_dict(doc) -> FaultConfig:
    allowed = {"global", "workflows", "activities", "triggers", "checkpoint_interval"}
    if not isinstance(doc, dict):
        raise ConfigError("expected an object", "fault-config")
    extra = set(doc) - allowed
    if extra:
        raise ConfigError(f"unknown keys {sorted(extra)}", "fault-config")
    return FaultConfig(
        global_chain=_chain(doc["global"], "global") if "global" in doc else DEFAULT_CHAIN,
        per_workflow={k: _chain(v, f"workflows.{k}") for k, v in doc.get("workflows", {}).items()},
        per_activity={k: _chain(v, f"activities.{k}") for k, v in doc.get("activities", {}).items()},
        triggers=tuple(trigger_from_dict(t, f"triggers[{i}]") for i, t in enumerate(doc.get("triggers", []))),
        checkpoint_interval=float(doc.get("checkpoint_interval", 60.0)),
    )


def load_fault_config(path) -> FaultConfig:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(str(exc), str(path)) from exc
    return fault_config_from_dict(doc)


# ---------------------------------------------------------------------------
# actions


@dataclass(frozen=True)
class FiredAction:
    at: float
    trigger: int
    action: ActionKind
    detail: str = ""
    failure: str | None = None

    def line(self) -> str:
        text = f"at={fmt_time(self.at)} trigger={self.trigger} action={self.action.value}"
        if self.failure:
            text += f" failure={self.failure}"
        return text


class ActionLog:
    """Append-only record of fired actions, shared between instances."""

    def __init__(self):
        self._lock = threading.Lock()
        self.entries: list[FiredAction] = []

    def append(self, a: FiredAction) -> None:
        with self._lock:
            self.entries.append(a)

    def lines(self) -> list[str]:
        return [a.line() for a in self.entries]

    def __len__(self):
        return len(self.entries)


def _summary(faults) -> list[str]:
    return [f"{fmt_time(f.at)}:{f.activity}:{f.cause.value}:{classify(f).value}" for f in faults]


def evaluate_triggers(fault_log, now: float, triggers, action_log: ActionLog | None = None,
                      run_programs: bool = True) -> list[FiredAction]:
    """Fire every trigger whose matching fault count in (now - window, now]
    reaches its threshold."""
    fired = []
    for n, trig in enumerate(triggers):
        window = [
            f for f in fault_log
            if now - trig.window < f.at <= now and (trig.fault_class is None or classify(f) is trig.fault_class)
        ]
        if len(window) < trig.threshold:
            continue
        failure = None
        detail = ";".join(_summary(window))
        if trig.action is ActionKind.RUN_PROGRAM and run_programs:
            try:
                proc = subprocess.run(
                    [trig.path, *trig.args, *_summary(window)],
                    capture_output=True, timeout=30, check=False,
                )
                if proc.returncode != 0:
                    failure = f"ActionSinkFailure(exit={proc.returncode})"
            except (OSError, subprocess.SubprocessError) as exc:
                failure = f"ActionSinkFailure({type(exc).__name__})"
            if failure:
                log.warning("trigger %d: %s", n, failure)
        action = FiredAction(now, n, trig.action, detail, failure)
        if action_log is not None:
            action_log.append(action)
        fired.append(action)
    return fired


# ---------------------------------------------------------------------------
# snapshots


_snapshot_ids = itertools.count(1)


@dataclass(frozen=True)
class Snapshot:
    id: int
    instance: str
    taken_at: float
    activity_states: dict
    attempt_counts: dict
    catalog: object  # data.CatalogState

    @property
    def catalog_version(self) -> int:
        return self.catalog.version

    def payload(self):
        return (self.activity_states, self.attempt_counts, self.catalog_version)


def checkpoint(instance, catalog_state, snapshot_id: int | None = None) -> Snapshot:
    """Capture the instance's lifecycle maps together with a catalog copy."""
    return Snapshot(
        id=next(_snapshot_ids) if snapshot_id is None else snapshot_id,
        instance=instance.id,
        taken_at=instance.clock,
        activity_states=dict(instance.activity_states),
        attempt_counts=dict(instance.attempt_counts),
        catalog=catalog_state,
    )


def rollback(instance, s: Snapshot, data_manager=None):
    """Restore lifecycle maps (and the catalog) from ``s``; the clock is kept."""
    if s.instance != instance.id:
        raise ForeignSnapshot(f"snapshot {s.id} belongs to {s.instance}, not {instance.id}")
    instance.activity_states = dict(s.activity_states)
    instance.attempt_counts = dict(s.attempt_counts)
    if data_manager is not None:
        data_manager.restore(s.catalog)
    return instance


# ---------------------------------------------------------------------------
# recovery


@dataclass(frozen=True)
class RecoveryDecision:
    kind: str  # retry | rebind | rollback | replicate | escalate
    policy_index: int
    delay: float = 0.0
    exclude: str | None = None
    snapshot: Snapshot | None = None
    k: int = 0


@dataclass
class _Cursor:
    index: int = 0
    used: int = 0


class FaultManager:
    """Walks each activity's policy chain and keeps the fault/snapshot logs."""

    def __init__(self, cfg: FaultConfig | None = None, action_log: ActionLog | None = None,
                 run_programs: bool = True):
        self.cfg = cfg or FaultConfig()
        self.action_log = action_log if action_log is not None else ActionLog()
        self.run_programs = run_programs
        self.fault_log: list[FaultEvent] = []
        self.snapshots: list[Snapshot] = []
        self._cursors: dict[tuple[str, str], _Cursor] = {}
        self.excluded: dict[tuple[str, str], set[str]] = {}

    def chain_for(self, activity: str, workflow: str) -> PolicyChain:
        return resolve_chain(activity, workflow, self.cfg)

    def record(self, f: FaultEvent) -> list[FiredAction]:
        self.fault_log.append(f)
        return evaluate_triggers(self.fault_log, f.at, self.cfg.triggers, self.action_log, self.run_programs)

    def take_snapshot(self, instance, catalog_state) -> Snapshot:
        s = checkpoint(instance, catalog_state, len(self.snapshots) + 1)
        self.snapshots.append(s)
        return s

    def latest_snapshot(self, instance_id: str) -> Snapshot | None:
        for s in reversed(self.snapshots):
            if s.instance == instance_id:
                return s
        return None

    def excluded_services(self, instance_id: str, activity: str) -> frozenset[str]:
        return frozenset(self.excluded.get((instance_id, activity), ()))

    def handle(self, instance, f: FaultEvent, chain: PolicyChain) -> RecoveryDecision:
        key = (instance.id, f.activity)
        cur = self._cursors.setdefault(key, _Cursor())
        while True:
            policy = chain[min(cur.index, len(chain) - 1)]
            idx = cur.index
            if isinstance(policy, Retry):
                if cur.used < policy.max_attempts:
                    cur.used += 1
                    return RecoveryDecision("retry", idx, delay=policy.backoff)
            elif isinstance(policy, Rebind):
                if cur.used == 0:
                    cur.used = 1
                    svc = getattr(f.binding, "service", None)
                    if svc is not None:
                        self.excluded.setdefault(key, set()).add(svc)
                    return RecoveryDecision("rebind", idx, exclude=svc)
            elif isinstance(policy, Checkpoint):
                snap = self.latest_snapshot(instance.id)
                if cur.used == 0 and snap is not None:
                    cur.used = 1
                    return RecoveryDecision("rollback", idx, snapshot=snap)
            elif isinstance(policy, Replicate):
                if cur.used == 0:
                    cur.used = 1
                    return RecoveryDecision("replicate", idx, k=policy.k)
            else:
                return RecoveryDecision("escalate", idx)
            cur.index += 1
            cur.used = 0
