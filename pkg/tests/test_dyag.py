import pytest
from hypothesis import given, settings, strategies as st

from gridflow.dyag import (
    AllocationPolicy,
    ResourceInfo,
    ResourceReport,
    ResourceView,
    Task,
    allocate,
    detect_failures,
    reschedule,
    update_resources,
)
from gridflow.errors import NoAliveCandidate, UnknownResource
from gridflow.model import FileSpec

from oracles import brute_force_choice

P = AllocationPolicy


def view(*specs):
    return ResourceView(ResourceInfo(rid, speed, 10**12, bandwidth=1e6) for rid, speed in specs)


def task(tid, work=100.0, cands=("r1", "r2"), inputs=(), locations=None):
    return Task(tid, tid.split("#")[0], work, frozenset(cands), 0.0, tuple(inputs), (), locations or {})


def test_fcfs_idle_tie_goes_to_smallest_id():
    assert allocate(task("A#1"), P.FCFS, view(("r2", 1), ("r1", 1))) == "r1"


def test_mintime_prefers_faster():
    assert allocate(task("A#1"), P.MIN_EXEC_TIME, view(("r1", 10), ("r2", 25))) == "r2"


def test_mindata_prefers_resident_input():
    big = FileSpec("big", 10**9)
    t = task("A#1", inputs=[big], locations={"big": frozenset({"r1"})})
    assert allocate(t, P.MIN_DATA_TRANSFER, view(("r1", 1), ("r2", 1))) == "r1"


def test_mintime_counts_queue_wait():
    v = view(("r1", 10), ("r2", 5))
    # 100 units queued on r1 -> 10 s wait, so r1 totals 20 s against 20 s on r2: tie by id
    allocate(task("X#1", 100, ("r1",)), P.MIN_EXEC_TIME, v)
    assert allocate(task("A#1"), P.MIN_EXEC_TIME, v) == "r1"
    assert allocate(task("B#1"), P.MIN_EXEC_TIME, v) == "r2"


def test_allocate_appends_to_queue_and_skips_dead():
    v = view(("r1", 1), ("r2", 1))
    v["r1"].alive = False
    assert allocate(task("A#1"), P.LOAD_BALANCE, v) == "r2"
    assert v["r2"].queue == ["A#1"]
    v["r2"].alive = False
    with pytest.raises(NoAliveCandidate):
        allocate(task("B#1"), P.FCFS, v)


def test_update_and_detect():
    v = view(("r1", 1))
    r = v["r1"]
    r.report_period = 10
    update_resources(v, ResourceReport("r1", speed=3), 0)
    assert r.alive and r.speed == 3
    assert detect_failures(v, 29) == []
    assert detect_failures(v, 31) == ["r1"]
    assert detect_failures(v, 40) == []
    with pytest.raises(UnknownResource):
        update_resources(v, ResourceReport("zz"), 0)


def test_reschedule_examples():
    v = view(("r1", 1), ("r2", 1))
    tasks = {"A#1": task("A#1")}
    allocate(tasks["A#1"], P.FCFS, v)
    v["r1"].alive = False
    res = reschedule("r1", P.FCFS, v, tasks)
    assert [(t.id, rid) for t, rid in res.moves] == [("A#1", "r2")] and not res.stranded
    v["r2"].alive = False
    res = reschedule("r2", P.FCFS, v, tasks)
    assert res.moves == [] and [t.id for t in res.stranded] == ["A#1"]
    assert reschedule("r1", P.FCFS, v, tasks).moves == []


def _snapshot(v, now=0.0):
    return {
        r.id: {"alive": r.alive, "accept": True, "load": r.load, "speed": r.speed, "bandwidth": r.bandwidth,
               "pending_work": sum(v.remaining_work(t, r, now) for t in (*r.running, *r.queue))}
        for r in v
    }


alloc_script = st.lists(
    st.tuples(
        st.sampled_from(list(P)),
        st.sampled_from([1.0, 5.0, 20.0]),
        st.sets(st.sampled_from(["r1", "r2", "r3"]), min_size=1),
        st.sampled_from([0, 10**6, 10**7]),
        st.sets(st.sampled_from(["r1", "r2", "r3"])),
    ),
    min_size=1,
    max_size=12,
)


@settings(max_examples=200, deadline=None)
@given(alloc_script, st.sampled_from([(1, 1, 1), (1, 2, 4), (3, 1, 2)]))
def test_allocate_matches_brute_force(script, speeds):
    v = view(*zip(("r1", "r2", "r3"), speeds))
    for i, (policy, work, cands, size, where) in enumerate(script):
        inputs = (FileSpec(f"f{i}", size),) if size else ()
        t = task(f"T{i}#1", work, cands, inputs, {f"f{i}": frozenset(where)})
        expected = brute_force_choice(policy.value, t, _snapshot(v))
        assert allocate(t, policy, v) == expected


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(1, 40))
def test_load_balance_spread(n, tasks):
    v = ResourceView(ResourceInfo(f"r{i}", 1.0, 10**12) for i in range(n))
    cands = frozenset(r.id for r in v)
    for i in range(tasks):
        allocate(Task(f"T{i}#1", f"T{i}", 10.0, cands), P.LOAD_BALANCE, v)
        counts = [r.load for r in v]
        assert max(counts) - min(counts) <= 1


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["r1", "r2"]), st.floats(0, 100)), max_size=20))
def test_no_revival_without_heartbeat(events):
    v = view(("r1", 1), ("r2", 1))
    dead_seen = set()
    now = 0.0
    for rid, dt in events:
        now += dt
        for d in detect_failures(v, now):
            assert d not in dead_seen
            dead_seen.add(d)
        for d in dead_seen:
            assert not v[d].alive
