"""Abstract workflow structures, validation and the activity lifecycle."""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from pathlib import Path

import networkx as nx

from .errors import ConfigError, CyclicWorkflow, InvalidTransition

EXTERNAL = "external"


@dataclass(frozen=True)
class FileSpec:
    name: str
    size: int


@dataclass(frozen=True)
class RequirementSet:
    required_capabilities: frozenset[str] = frozenset()
    max_expected_duration: float | None = None
    min_uptime: float | None = None

    def tightened_by(self, other: RequirementSet) -> bool:
        """True when every constraint of ``other`` is at least as strict as ours."""
        if not self.required_capabilities <= other.required_capabilities:
            return False
        if self.max_expected_duration is not None:
            if other.max_expected_duration is None or other.max_expected_duration > self.max_expected_duration:
                return False
        if self.min_uptime is not None:
            if other.min_uptime is None or other.min_uptime < self.min_uptime:
                return False
        return True


@dataclass(frozen=True)
class AbstractActivity:
    id: str
    port_type: str
    work: float
    inputs: tuple[FileSpec, ...] = ()
    outputs: tuple[FileSpec, ...] = ()
    requirements: RequirementSet = RequirementSet()


@dataclass(frozen=True)
class AbstractWorkflow:
    name: str
    activities: tuple[AbstractActivity, ...] = ()
    dependencies: tuple[tuple[str, str], ...] = ()
    outputs: frozenset[str] = frozenset()

    @cached_property
    def by_id(self) -> dict[str, AbstractActivity]:
        return {a.id: a for a in self.activities}

    @cached_property
    def predecessors(self) -> dict[str, tuple[str, ...]]:
        preds: dict[str, set[str]] = {a.id: set() for a in self.activities}
        for src, dst in self.dependencies:
            if dst in preds:
                preds[dst].add(src)
        return {k: tuple(sorted(v)) for k, v in preds.items()}

    @cached_property
    def successors(self) -> dict[str, tuple[str, ...]]:
        succs: dict[str, set[str]] = {a.id: set() for a in self.activities}
        for src, dst in self.dependencies:
            if src in succs:
                succs[src].add(dst)
        return {k: tuple(sorted(v)) for k, v in succs.items()}

    @cached_property
    def producers(self) -> dict[str, str]:
        """lfn -> producing activity id."""
        out: dict[str, str] = {}
        for a in self.activities:
            for f in a.outputs:
                out.setdefault(f.name, a.id)
        return out

    @cached_property
    def consumers(self) -> dict[str, tuple[str, ...]]:
        out: dict[str, list[str]] = {}
        for a in self.activities:
            for f in a.inputs:
                out.setdefault(f.name, []).append(a.id)
        return {k: tuple(sorted(v)) for k, v in out.items()}

    @cached_property
    def file_sizes(self) -> dict[str, int]:
        sizes: dict[str, int] = {}
        for a in self.activities:
            for f in (*a.inputs, *a.outputs):
                sizes.setdefault(f.name, f.size)
        return sizes

    def roots(self) -> list[str]:
        return sorted(k for k, v in self.predecessors.items() if not v)


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Defect:
    kind: str
    locus: tuple[str, ...] = ()

    def __str__(self):
        return f"{self.kind}: {','.join(self.locus)}" if self.locus else self.kind


@dataclass(frozen=True)
class ValidationReport:
    defects: tuple[Defect, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.defects

    def kinds(self) -> set[str]:
        return {d.kind for d in self.defects}


def _dependency_graph(w: AbstractWorkflow) -> nx.DiGraph:
    g = nx.DiGraph()
    g.add_nodes_from(w.by_id)
    g.add_edges_from((s, d) for s, d in w.dependencies if s in w.by_id and d in w.by_id)
    return g


def validate(w: AbstractWorkflow) -> ValidationReport:
    defects: list[Defect] = []
    seen: set[str] = set()
    for a in w.activities:
        if a.id in seen:
            defects.append(Defect("DuplicateActivity", (a.id,)))
        seen.add(a.id)
        if not a.work > 0:
            defects.append(Defect("NonPositiveWork", (a.id,)))
        names_in = {f.name for f in a.inputs}
        names_out = {f.name for f in a.outputs}
        for f in (*a.inputs, *a.outputs):
            if not isinstance(f.name, str) or not f.name:
                defects.append(Defect("EmptyFileName", (a.id,)))
            elif not f.size > 0:
                defects.append(Defect("NonPositiveFileSize", (a.id, f.name)))
        for name in sorted(names_in & names_out):
            defects.append(Defect("FileBothInputAndOutput", (a.id, name)))
        req = a.requirements
        if req.max_expected_duration is not None and req.max_expected_duration < 0:
            defects.append(Defect("NegativeRequirement", (a.id, "max_duration_s")))
        if req.min_uptime is not None and req.min_uptime < 0:
            defects.append(Defect("NegativeRequirement", (a.id, "min_uptime_h")))

    for src, dst in w.dependencies:
        for end in (src, dst):
            if end not in w.by_id:
                defects.append(Defect("UnknownActivity", (end,)))

    g = _dependency_graph(w)
    cyclic = False
    for comp in sorted(sorted(c) for c in nx.strongly_connected_components(g)):
        if len(comp) > 1 or g.has_edge(comp[0], comp[0]):
            cyclic = True
            defects.append(Defect("CycleDetected", tuple(comp)))

    producers: dict[str, str] = {}
    sizes: dict[str, int] = {}
    for a in w.activities:
        for f in a.outputs:
            if f.name in producers and producers[f.name] != a.id:
                defects.append(Defect("DuplicateProducer", (f.name, producers[f.name], a.id)))
            producers.setdefault(f.name, a.id)
        for f in (*a.inputs, *a.outputs):
            if f.name in sizes and sizes[f.name] != f.size:
                defects.append(Defect("FileSizeMismatch", (f.name, a.id)))
            sizes.setdefault(f.name, f.size)

    for name in sorted(w.outputs):
        if name not in producers:
            defects.append(Defect("UnproducedOutput", (name,)))

    # a consumer must be ordered after the producer of each of its inputs
    if not cyclic:
        for a in w.activities:
            for f in a.inputs:
                p = producers.get(f.name)
                if p is not None and p != a.id and not nx.has_path(g, p, a.id):
                    defects.append(Defect("UnorderedDataFlow", (f.name, p, a.id)))

    return ValidationReport(tuple(defects))


def topological_order(w: AbstractWorkflow) -> list[str]:
    """Kahn's algorithm with the lexicographically smallest eligible id first."""
    report = validate(w)
    if "CycleDetected" in report.kinds() or "UnknownActivity" in report.kinds():
        raise CyclicWorkflow(", ".join(str(d) for d in report.defects))
    indeg = {k: len(v) for k, v in w.predecessors.items()}
    heap = [k for k, n in indeg.items() if n == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        node = heapq.heappop(heap)
        order.append(node)
        for nxt in w.successors[node]:
            indeg[nxt] -= 1
            if indeg[nxt] == 0:
                heapq.heappush(heap, nxt)
    return order


def require_valid(w: AbstractWorkflow) -> None:
    report = validate(w)
    if not report.ok:
        raise CyclicWorkflow("; ".join(str(d) for d in report.defects))


# ---------------------------------------------------------------------------
# lifecycle


class ActivityState(str, Enum):
    INACTIVE = "Inactive"
    READY = "Ready"
    EXECUTING = "Executing"
    FINISHED = "Finished"
    FAULTED = "Faulted"
    COMPENSATING = "Compensating"
    ABORTED = "Aborted"


class LifecycleEvent(str, Enum):
    DEPS_MET = "DepsMet"
    DISPATCH = "Dispatch"
    COMPLETE = "Complete"
    FAULT = "Fault"
    RECOVERY_RETRY = "RecoveryRetry"
    REBIND = "Rebind"
    ESCALATE = "Escalate"
    CANCEL = "Cancel"
    ROLLBACK_BEGIN = "RollbackBegin"
    ROLLBACK_DONE = "RollbackDone"


S, E = ActivityState, LifecycleEvent

TRANSITIONS: dict[tuple[ActivityState, LifecycleEvent], ActivityState] = {
    (S.INACTIVE, E.DEPS_MET): S.READY,
    (S.READY, E.DISPATCH): S.EXECUTING,
    (S.EXECUTING, E.COMPLETE): S.FINISHED,
    (S.EXECUTING, E.FAULT): S.FAULTED,
    (S.FAULTED, E.RECOVERY_RETRY): S.READY,
    (S.FAULTED, E.REBIND): S.READY,
    (S.FAULTED, E.ESCALATE): S.ABORTED,
    (S.EXECUTING, E.CANCEL): S.ABORTED,
    (S.COMPENSATING, E.ROLLBACK_DONE): S.READY,
    **{(s, E.ROLLBACK_BEGIN): S.COMPENSATING for s in ActivityState},
}

del S, E


def transition(state: ActivityState, event: LifecycleEvent) -> ActivityState:
    try:
        return TRANSITIONS[(state, event)]
    except KeyError:
        raise InvalidTransition(state, event) from None


# ---------------------------------------------------------------------------
# JSON description files

_ACTIVITY_KEYS = {"id", "port_type", "inputs", "outputs", "work", "requirements"}
_REQ_KEYS = {"capabilities", "max_duration_s", "min_uptime_h"}
_FILE_KEYS = {"name", "size"}
_TOP_KEYS = {"name", "activities", "dependencies", "outputs"}


def _check_keys(obj, allowed, locus, required=()):
    if not isinstance(obj, dict):
        raise ConfigError("expected an object", locus)
    extra = set(obj) - allowed
    if extra:
        raise ConfigError(f"unknown keys {sorted(extra)}", locus)
    missing = [k for k in required if k not in obj]
    if missing:
        raise ConfigError(f"missing keys {missing}", locus)


def _number(value, what, locus, optional=False):
    if optional and value is None:
        return None
    if not isinstance(value, (int, float)) or isinstance(value, bool):
        raise ConfigError(f"{what} must be a number", locus)
    return value


def _file(obj, locus) -> FileSpec:
    _check_keys(obj, _FILE_KEYS, locus, required=("name", "size"))
    return FileSpec(str(obj["name"]), int(_number(obj["size"], "size", locus)))


def workflow_from_dict(doc) -> AbstractWorkflow:
    _check_keys(doc, _TOP_KEYS, "workflow", required=("name", "activities"))
    acts = []
    for i, a in enumerate(doc["activities"]):
        loc = f"activities[{i}]"
        _check_keys(a, _ACTIVITY_KEYS, loc, required=("id", "port_type", "work"))
        r = a.get("requirements", {})
        _check_keys(r, _REQ_KEYS, f"{loc}.requirements")
        req = RequirementSet(
            frozenset(r.get("capabilities", [])),
            _number(r.get("max_duration_s"), "max_duration_s", f"{loc}.requirements", optional=True),
            _number(r.get("min_uptime_h"), "min_uptime_h", f"{loc}.requirements", optional=True),
        )
        acts.append(
            AbstractActivity(
                id=str(a["id"]),
                port_type=str(a["port_type"]),
                work=float(_number(a["work"], "work", loc)),
                inputs=tuple(_file(f, f"{loc}.inputs[{j}]") for j, f in enumerate(a.get("inputs", []))),
                outputs=tuple(_file(f, f"{loc}.outputs[{j}]") for j, f in enumerate(a.get("outputs", []))),
                requirements=req,
            )
        )
    deps = []
    for i, edge in enumerate(doc.get("dependencies", [])):
        if not isinstance(edge, (list, tuple)) or len(edge) != 2:
            raise ConfigError("dependency must be a [from, to] pair", f"dependencies[{i}]")
        deps.append((str(edge[0]), str(edge[1])))
    return AbstractWorkflow(
        name=str(doc["name"]),
        activities=tuple(acts),
        dependencies=tuple(deps),
        outputs=frozenset(doc.get("outputs", [])),
    )


def workflow_to_dict(w: AbstractWorkflow) -> dict:
    def req(r: RequirementSet):
        out = {"capabilities": sorted(r.required_capabilities)}
        if r.max_expected_duration is not None:
            out["max_duration_s"] = r.max_expected_duration
        if r.min_uptime is not None:
            out["min_uptime_h"] = r.min_uptime
        return out

    return {
        "name": w.name,
        "activities": [
            {
                "id": a.id,
                "port_type": a.port_type,
                "inputs": [{"name": f.name, "size": f.size} for f in a.inputs],
                "outputs": [{"name": f.name, "size": f.size} for f in a.outputs],
                "work": a.work,
                "requirements": req(a.requirements),
            }
            for a in w.activities
        ],
        "dependencies": [list(e) for e in w.dependencies],
        "outputs": sorted(w.outputs),
    }


def load_workflow(path) -> AbstractWorkflow:
    """Read a workflow description file. Raises ConfigError on malformed input."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(str(exc), str(path)) from exc
    try:
        return workflow_from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), str(path)) from exc
