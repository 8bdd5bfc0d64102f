"""Concrete workflow generation and find-and-bind refinement."""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import NoCandidates, NoViableBinding
from .model import AbstractActivity, AbstractWorkflow, require_valid
from .registry import ServiceRegistry


@dataclass(frozen=True)
class Binding:
    activity: str
    service: str
    resource: str
    bound_at: float
    attempt: int


@dataclass
class ConcreteWorkflow:
    source: AbstractWorkflow
    bindings: dict[str, Binding | None] = field(default_factory=dict)
    candidate_lists: dict[str, list[str]] = field(default_factory=dict)

    def pending(self) -> list[str]:
        return sorted(k for k, v in self.bindings.items() if v is None)


def generate_concrete(w: AbstractWorkflow) -> ConcreteWorkflow:
    """Every binding starts pending; refinement happens lazily at run time."""
    require_valid(w)
    return ConcreteWorkflow(source=w, bindings={a.id: None for a in w.activities})


def refine(activity: AbstractActivity, reg: ServiceRegistry, concrete: ConcreteWorkflow | None = None,
           now: float | None = None, exclude=frozenset()) -> list[str]:
    candidates = [
        s for s in reg.find_candidates(activity.port_type, activity.requirements, activity.work, now)
        if s not in exclude
    ]
    if concrete is not None:
        concrete.candidate_lists[activity.id] = list(candidates)
    if not candidates:
        raise NoCandidates(activity.id)
    return candidates


class Binder:
    """Keeps the per-activity attempt ordinal so rebinding is monotone even
    across rollbacks of the instance state."""

    def __init__(self, reg: ServiceRegistry):
        self.reg = reg
        self.attempts: dict[str, int] = {}
        self.history: list[Binding] = []

    def bind(self, activity: AbstractActivity, candidates: list[str], advice: str | None,
             alive=lambda rid: True, now: float = 0.0, concrete: ConcreteWorkflow | None = None) -> Binding:
        if not candidates:
            raise NoCandidates(activity.id)
        chosen = None
        if advice is not None:
            chosen = next((s for s in candidates if self.reg.get(s).resource == advice), None)
        if chosen is None:
            chosen = next((s for s in candidates if alive(self.reg.get(s).resource)), None)
        if chosen is None:
            raise NoViableBinding(activity.id)
        attempt = self.attempts.get(activity.id, 0) + 1
        self.attempts[activity.id] = attempt
        b = Binding(activity.id, chosen, self.reg.get(chosen).resource, now, attempt)
        self.history.append(b)
        if concrete is not None:
            concrete.bindings[activity.id] = b
        return b


def bind(activity: AbstractActivity, candidates: list[str], advice: str | None, reg: ServiceRegistry,
         alive=lambda rid: True, now: float = 0.0, attempt: int = 1) -> Binding:
    """Stateless form of :meth:`Binder.bind` with an explicit attempt ordinal."""
    b = Binder(reg)
    b.attempts[activity.id] = attempt - 1
    return b.bind(activity, candidates, advice, alive, now)
