"""Reference implementations used by the tests. Written without touching the
package internals so they can disagree with it."""

import re
from collections import defaultdict


def brute_force_choice(policy, task, resources, exclude=frozenset()):
    """Pick a resource by evaluating each policy formula on every candidate.

    ``resources`` maps id -> dict(alive, accept, load, speed, bandwidth,
    pending_work). Returns None when no candidate survives the filters.
    """
    best_id, best_cost = None, None
    for rid in task.candidates:
        info = resources.get(rid)
        if info is None or rid in exclude or not info["alive"] or not info["accept"]:
            continue
        exec_time = info["pending_work"] / info["speed"] + task.work / info["speed"]
        missing = 0
        for f in task.inputs:
            if rid not in task.locations.get(f.name, ()):
                missing += f.size
        if policy in ("fcfs", "load"):
            cost = (info["load"],)
        elif policy == "mintime":
            cost = (exec_time,)
        else:
            cost = (missing / info["bandwidth"], exec_time)
        cost = cost + (rid,)
        if best_cost is None or cost < best_cost:
            best_id, best_cost = rid, cost
    return best_id


LINE = re.compile(r"^at=(\S+) seq=(\d+) kind=(\S+) activity=(\S+) detail=(.*)$")


def parse_trace(text):
    """Parse trace lines into dicts; detail becomes a key/value map."""
    out = []
    for line in text.splitlines():
        m = LINE.match(line)
        assert m, line
        at, seq, kind, act, detail = m.groups()
        kv = {}
        if detail != "-":
            for tok in detail.split(" "):
                k, _, v = tok.partition("=")
                kv[k] = v
        out.append({"at": float(at), "seq": int(seq), "kind": kind, "activity": act, "detail": kv})
    return out


def trace_totals(records):
    """Recompute report figures from a parsed trace alone."""
    dispatches = defaultdict(int)
    commits = defaultdict(int)
    fault_classes = defaultdict(int)
    exec_start, busy = {}, defaultdict(float)
    last = 0.0
    for r in records:
        d = r["detail"]
        if r["kind"] == "Dispatch" and "exec" in d:
            dispatches[r["activity"]] += 1
            exec_start[d["exec"]] = (r["at"], d["resource"])
        if d.get("commit") == "1":
            commits[r["activity"]] += 1
        if "class" in d:
            fault_classes[d["class"]] += 1
        if r["kind"] in ("Complete", "Fault") and "exec" in d and d["exec"] in exec_start:
            start, rid = exec_start.pop(d["exec"])
            busy[rid] += r["at"] - start
        last = r["at"]
    return {"dispatches": dict(dispatches), "commits": dict(commits), "faults": dict(fault_classes),
            "busy": dict(busy), "last": last}
