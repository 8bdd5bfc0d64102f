"""Run summaries derived from a finished engine."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

from .faults import FaultClass, classify, fmt_time


@dataclass
class RunReport:
    status: str
    makespan: float
    utilization: dict[str, float] = field(default_factory=dict)
    peak_disk: dict[str, int] = field(default_factory=dict)
    fault_counts: dict[str, int] = field(default_factory=dict)
    actions_fired: int = 0
    policy: str = ""
    events: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def text(self) -> str:
        lines = [
            f"status      {self.status}",
            f"policy      {self.policy}",
            f"makespan    {fmt_time(self.makespan)}",
            f"events      {self.events}",
            f"actions     {self.actions_fired}",
            "faults      " + " ".join(f"{k}={v}" for k, v in self.fault_counts.items()),
            "resource    utilization  peak_disk",
        ]
        for rid in sorted(self.utilization):
            lines.append(f"{rid:<11} {self.utilization[rid]:<12.4f} {self.peak_disk.get(rid, 0)}")
        return "\n".join(lines) + "\n"


def build_report(engine, inst) -> RunReport:
    end = inst.finished_at if inst.finished_at is not None else engine.clock
    makespan = max(0.0, end - inst.started_at)
    util = {}
    for rid in sorted(engine.busy):
        util[rid] = 0.0 if makespan <= 0 else min(1.0, engine.busy[rid] / makespan)
    counts = {c.value: 0 for c in FaultClass}
    for f in engine.faults.fault_log if engine.faults else ():
        counts[classify(f).value] += 1
    return RunReport(
        status=inst.status.value,
        makespan=makespan,
        utilization=util,
        peak_disk={rid: engine.data.peak.get(rid, 0) for rid in sorted(engine.busy)},
        fault_counts=counts,
        actions_fired=len(engine.action_log),
        policy=engine.policy.value,
        events=len(engine.trace),
    )


COMPARE_COLUMNS = ("policy", "status", "makespan", "mean_utilization", "max_peak_disk")


def compare_row(r: RunReport) -> dict:
    util = list(r.utilization.values())
    return {
        "policy": r.policy,
        "status": r.status,
        "makespan": r.makespan,
        "mean_utilization": sum(util) / len(util) if util else 0.0,
        "max_peak_disk": max(r.peak_disk.values(), default=0),
    }


def compare_table(rows: list[dict]) -> str:
    out = ["  ".join(f"{c:<16}" for c in COMPARE_COLUMNS).rstrip()]
    for row in rows:
        cells = []
        for c in COMPARE_COLUMNS:
            v = row[c]
            if c == "makespan":
                v = fmt_time(v)
            elif c == "mean_utilization":
                v = f"{v:.4f}"
            cells.append(f"{v!s:<16}")
        out.append("  ".join(cells).rstrip())
    return "\n".join(out) + "\n"
