import itertools
import json

import pytest
from hypothesis import given, settings, strategies as st

from gridflow.errors import ConfigError, CyclicWorkflow, InvalidTransition
from gridflow.model import (
    TRANSITIONS,
    AbstractActivity,
    AbstractWorkflow,
    ActivityState,
    FileSpec,
    LifecycleEvent,
    RequirementSet,
    load_workflow,
    topological_order,
    transition,
    validate,
    workflow_from_dict,
    workflow_to_dict,
)

S, E = ActivityState, LifecycleEvent


def wf(ids, edges, outputs=()):
    acts = tuple(AbstractActivity(i, "p", 1.0) for i in ids)
    return AbstractWorkflow("w", acts, tuple(edges), frozenset(outputs))


def test_single_activity_is_valid():
    assert validate(wf(["A"], [])).ok


def test_two_cycle_reported():
    rep = validate(wf(["A", "B"], [("A", "B"), ("B", "A")]))
    assert not rep.ok
    assert [str(d) for d in rep.defects if d.kind == "CycleDetected"] == ["CycleDetected: A,B"]


def test_unknown_activity_reported():
    rep = validate(wf(["A"], [("A", "X")]))
    assert [d.locus for d in rep.defects if d.kind == "UnknownActivity"] == [("X",)]


def test_every_violation_listed():
    acts = (
        AbstractActivity("A", "p", 0.0),
        AbstractActivity("A", "p", 1.0),
        AbstractActivity("B", "p", 1.0, (FileSpec("f", 1),), (FileSpec("f", 1),)),
        AbstractActivity("C", "p", 1.0, requirements=RequirementSet(min_uptime=-1)),
    )
    w = AbstractWorkflow("w", acts, (("B", "Z"),), frozenset({"nowhere"}))
    kinds = validate(w).kinds()
    assert {"DuplicateActivity", "NonPositiveWork", "FileBothInputAndOutput", "NegativeRequirement",
            "UnknownActivity", "UnproducedOutput"} <= kinds


def test_topological_order_examples():
    assert topological_order(wf("ABC", [("A", "B"), ("B", "C")])) == ["A", "B", "C"]
    assert topological_order(wf("ABCD", [("A", "B"), ("A", "C"), ("B", "D"), ("C", "D")])) == list("ABCD")
    assert topological_order(wf([], [])) == []


def test_topological_order_rejects_cycle():
    with pytest.raises(CyclicWorkflow):
        topological_order(wf("AB", [("A", "B"), ("B", "A")]))


def _has_cycle(n, edges):
    # reachability by repeated relaxation: cyclic iff some node reaches itself
    reach = [[False] * n for _ in range(n)]
    for a, b in edges:
        reach[a][b] = True
    for k in range(n):
        for i in range(n):
            if reach[i][k]:
                for j in range(n):
                    if reach[k][j]:
                        reach[i][j] = True
    return any(reach[i][i] for i in range(n))


graphs = st.integers(1, 8).flatmap(
    lambda n: st.tuples(
        st.just(n),
        st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)), max_size=14, unique=True),
    )
)


@settings(max_examples=300, deadline=None)
@given(graphs)
def test_acyclicity_matches_reachability_oracle(g):
    n, edges = g
    w = wf([f"n{i}" for i in range(n)], [(f"n{a}", f"n{b}") for a, b in edges])
    assert ("CycleDetected" in validate(w).kinds()) == _has_cycle(n, edges)


def _lexmin_order(ids, edges):
    best = None
    for perm in itertools.permutations(sorted(ids)):
        pos = {x: i for i, x in enumerate(perm)}
        if all(pos[a] < pos[b] for a, b in edges):
            if best is None or list(perm) < best:
                best = list(perm)
    return best


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 6).flatmap(
    lambda n: st.tuples(st.just(n), st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1))
                                             .filter(lambda e: e[0] < e[1]), max_size=10, unique=True))))
def test_topological_order_is_lexicographic_minimum(g):
    n, edges = g
    # shuffle labels so the node index order differs from the name order
    names = [chr(ord("a") + (i * 5) % n) + str(i) for i in range(n)]
    named = [(names[a], names[b]) for a, b in edges]
    w = wf(names, named)
    got = topological_order(w)
    assert got == topological_order(w)
    assert got == _lexmin_order(names, named)


def test_transition_examples():
    assert transition(S.INACTIVE, E.DEPS_MET) is S.READY
    assert transition(S.EXECUTING, E.COMPLETE) is S.FINISHED
    with pytest.raises(InvalidTransition):
        transition(S.INACTIVE, E.COMPLETE)


EDGES = [
    ("Inactive", "DepsMet", "Ready"),
    ("Ready", "Dispatch", "Executing"),
    ("Executing", "Complete", "Finished"),
    ("Executing", "Fault", "Faulted"),
    ("Faulted", "RecoveryRetry", "Ready"),
    ("Faulted", "Rebind", "Ready"),
    ("Faulted", "Escalate", "Aborted"),
    ("Executing", "Cancel", "Aborted"),
    ("Compensating", "RollbackDone", "Ready"),
] + [(s.value, "RollbackBegin", "Compensating") for s in S]


def test_transition_table_total():
    expected = {(S(s), E(e)): S(t) for s, e, t in EDGES}
    assert TRANSITIONS == expected
    for s, e in itertools.product(S, E):
        if (s, e) in expected:
            assert transition(s, e) is expected[(s, e)]
        else:
            with pytest.raises(InvalidTransition) as exc:
                transition(s, e)
            assert exc.value.state is s and exc.value.event is e


def test_no_resurrection():
    for s in (S.FINISHED, S.ABORTED):
        outgoing = {e for (src, e) in TRANSITIONS if src is s}
        assert outgoing == {E.ROLLBACK_BEGIN}


DOC = {
    "name": "demo",
    "activities": [
        {"id": "A", "port_type": "p", "inputs": [{"name": "in", "size": 5}], "outputs": [{"name": "x", "size": 3}],
         "work": 2, "requirements": {"capabilities": ["c"], "max_duration_s": 100, "min_uptime_h": 1}},
        {"id": "B", "port_type": "q", "inputs": [{"name": "x", "size": 3}], "outputs": [{"name": "y", "size": 1}],
         "work": 1},
    ],
    "dependencies": [["A", "B"]],
    "outputs": ["y"],
}


def test_json_round_trip(tmp_path):
    w = workflow_from_dict(DOC)
    assert validate(w).ok
    assert w.by_id["A"].requirements == RequirementSet(frozenset({"c"}), 100, 1)
    assert workflow_from_dict(workflow_to_dict(w)) == w
    p = tmp_path / "w.json"
    p.write_text(json.dumps(DOC))
    assert load_workflow(p) == w


@pytest.mark.parametrize("mutate", [
    lambda d: d.update(extra=1),
    lambda d: d["activities"][0].update(colour="red"),
    lambda d: d["activities"][0]["requirements"].update(min_uptime=1),
    lambda d: d["activities"][0].pop("work"),
    lambda d: d["activities"][0].update(work="fast"),
])
def test_json_rejects_bad_documents(mutate):
    doc = json.loads(json.dumps(DOC))
    mutate(doc)
    with pytest.raises(ConfigError):
        workflow_from_dict(doc)
