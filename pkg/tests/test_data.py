import pytest

from gridflow.data import DataManager
from gridflow.dyag import ResourceInfo, ResourceView, Task
from gridflow.engine import simulate
from gridflow.errors import UnknownFile
from gridflow.gridsim import build_env, generate_montage, homogeneous_env_doc, MONTAGE_PORTS
from gridflow.model import AbstractActivity, AbstractWorkflow, FileSpec

from oracles import parse_trace


def dm(capacity=100, used=0):
    v = ResourceView([ResourceInfo("r1", 1.0, capacity), ResourceInfo("r2", 1.0, capacity)])
    m = DataManager(v)
    v["r1"].disk_used = used
    return m


def diamond(size=10):
    a = AbstractActivity("A", "p", 10, (), (FileSpec("mid", size),))
    b = AbstractActivity("B", "p", 10, (FileSpec("mid", size),), (FileSpec("b.out", 1),))
    c = AbstractActivity("C", "p", 30, (FileSpec("mid", size),), (FileSpec("c.out", 1),))
    d = AbstractActivity("D", "p", 10, (FileSpec("b.out", 1), FileSpec("c.out", 1)), (FileSpec("final", 1),))
    deps = (("A", "B"), ("A", "C"), ("B", "D"), ("C", "D"))
    return AbstractWorkflow("diamond", (a, b, c, d), deps, frozenset({"final"}))


def test_capacity_arithmetic():
    m = dm()
    m.entries.clear()
    w = AbstractWorkflow("w", (AbstractActivity("X", "p", 1, (FileSpec("in", 30),), (FileSpec("out", 20),)),),
                         (), frozenset({"out"}))
    m.register_workflow(w)
    t = Task("X#1", "X", 1, frozenset({"r1"}), inputs=(FileSpec("in", 30),), outputs=(FileSpec("out", 20),))
    assert m.check_capacity("r1", t).accept
    m.view["r1"].disk_used = 90
    v = m.check_capacity("r1", t)
    assert not v.accept and v.deficit == 40
    t_in_only = Task("Y#1", "X", 1, frozenset({"r1"}), inputs=(FileSpec("in", 30),))
    assert m.check_capacity("r1", t_in_only).deficit == 20
    m.add_replica("in", "r1")
    m.view["r1"].disk_used = 60
    # input already resident: only the 20 output bytes count
    assert m.check_capacity("r1", t).accept


def test_mapping_and_provenance():
    m = dm()
    m.register_workflow(diamond())
    assert m.map_logical("mid") == frozenset()
    m.add_replica("mid", "r1")
    assert {r for r, _ in m.map_logical("mid")} == {"r1"}
    m.add_replica("mid", "r2")
    assert len(m.map_logical("mid")) == 2
    with pytest.raises(UnknownFile):
        m.map_logical("ghost")
    m.record_provenance("mid", "A", "produced")
    m.record_provenance("mid", "B", "modified")
    assert m.producer("mid") == "A"
    assert [(p.activity, p.kind) for p in m.provenance] == [("A", "produced"), ("B", "modified")]


def test_external_producer():
    m = dm()
    w = AbstractWorkflow("w", (AbstractActivity("X", "p", 1, (FileSpec("in", 3),), (FileSpec("o", 1),)),),
                         (), frozenset({"o"}))
    m.register_workflow(w)
    assert m.producer("in") == "external"


def test_release_rules():
    m = dm()
    m.register_workflow(diamond())
    for f in ("mid", "b.out", "c.out", "final"):
        m.add_replica(f, "r1")
    assert m.release("B", ["mid"]) == []
    assert m.release("C", ["mid"]) == [("mid", "r1")]
    assert m.release("D", ["b.out", "c.out"], ["final"]) == [("b.out", "r1"), ("c.out", "r1")]
    assert m.locations("final") == {"r1"}


def test_version_monotone_and_restore():
    m = dm()
    m.register_workflow(diamond())
    seen = [m.version]
    snap = m.snapshot()
    m.add_replica("mid", "r1")
    seen.append(m.version)
    m.release("B", ["mid"])
    seen.append(m.version)
    assert seen == sorted(seen) and len(set(seen)) == 3
    m.restore(snap)
    assert m.version == snap.version and m.locations("mid") == frozenset()


def _diamond_env(cleanup):
    env = build_env(homogeneous_env_doc(2, ports=["p"], disk_capacity=10**6), 0)
    return simulate(diamond(), env, cleanup=cleanup)


def test_diamond_deletes_intermediate_after_last_consumer():
    e, inst = _diamond_env(True)
    recs = parse_trace(e.trace.text())
    finish = {r["activity"]: r["at"] for r in recs if r["kind"] == "Complete"}
    deleted_at = {round(t, 6) for t, lfn, _ in e.data.deletions if lfn == "mid"}
    assert deleted_at == {max(finish["B"], finish["C"])}


def test_cleanup_safety_and_liveness():
    w = generate_montage(5)
    env = build_env(homogeneous_env_doc(3, ports=MONTAGE_PORTS), 0)
    e, inst = simulate(w, env)
    recs = parse_trace(e.trace.text())
    finish = {r["activity"]: r["at"] for r in recs if r["kind"] == "Complete"}
    for t, lfn, _ in e.data.deletions:
        for consumer in w.consumers.get(lfn, ()):
            assert finish[consumer] <= round(t, 6)
    for lfn, entry in e.data.entries.items():
        if not entry.is_output:
            assert entry.replicas == {}
