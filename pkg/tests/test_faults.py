import json
import sys

import pytest

from gridflow.engine import ProcessInstance, simulate
from gridflow.errors import ConfigError, ForeignSnapshot
from gridflow.faults import (
    ActionKind,
    ActionLog,
    ActionTrigger,
    Checkpoint,
    DEFAULT_CHAIN,
    Escalate,
    FaultCause,
    FaultClass,
    FaultConfig,
    FaultEvent,
    Rebind,
    Replicate,
    Retry,
    checkpoint,
    classify,
    evaluate_triggers,
    fault_config_from_dict,
    resolve_chain,
    rollback,
)
from gridflow.gridsim import FaultSpec, build_env, generate_pipeline, homogeneous_env_doc
from gridflow.model import ActivityState

C, K = FaultCause, FaultClass

MAPPING = {
    C.MESSAGE_LOST: K.NETWORK,
    C.LINK_DOWN: K.NETWORK,
    C.CONNECT_TIMEOUT: K.TIMING,
    C.RESPONSE_DEADLINE_EXCEEDED: K.TIMING,
    C.NO_USER_RESPONSE: K.TIMING,
    C.VALUE_OUT_OF_BOUNDS: K.RESPONSE,
    C.APP_CRASH: K.RESPONSE,
    C.SERVICE_EXPIRED: K.LIFECYCLE,
    C.PROTOCOL_MISMATCH: K.INTERACTION,
}


def fault(at, cause=C.APP_CRASH, activity="A"):
    return FaultEvent(at, activity, cause, None, None)


def test_classify_total():
    assert set(MAPPING) == set(FaultCause)
    for cause, cls in MAPPING.items():
        assert classify(fault(0, cause)) is cls
        assert classify(cause) is cls


def test_resolve_chain_precedence():
    act, wf, glob = (Rebind(), Escalate()), (Retry(1), Escalate()), (Escalate(),)
    cfg = FaultConfig(glob, {"w": wf}, {"A": act})
    assert resolve_chain("A", "w", cfg) == act
    assert resolve_chain("B", "w", cfg) == wf
    assert resolve_chain("B", "other", cfg) == glob


@pytest.mark.parametrize("chain", [(), (Retry(1),), (Escalate(), Rebind()), (Retry(0), Escalate()),
                                   (Replicate(1), Escalate())])
def test_invalid_chains(chain):
    with pytest.raises(ConfigError):
        FaultConfig(global_chain=chain)


def test_config_file_shape():
    cfg = fault_config_from_dict({
        "global": [{"type": "retry", "params": {"max_attempts": 2, "backoff": 1}}, {"type": "escalate"}],
        "activities": {"A": [{"type": "replicate", "params": {"k": 2}}, {"type": "escalate"}]},
        "triggers": [{"class": "Network", "threshold": 2, "window": 10, "action": "AlertRecord"}],
    })
    assert cfg.global_chain == (Retry(2, 1), Escalate())
    assert cfg.per_activity["A"] == (Replicate(2), Escalate())
    assert cfg.triggers[0].fault_class is K.NETWORK
    assert DEFAULT_CHAIN[-1] == Escalate()
    with pytest.raises(ConfigError):
        fault_config_from_dict({"global": [{"type": "pray"}]})


def test_trigger_window_examples():
    log = [fault(10), fault(20), fault(30)]
    trig = ActionTrigger(ActionKind.ALERT_RECORD, threshold=3, window=60)
    assert [a.at for t in (10, 20, 30) for a in evaluate_triggers(log[:t // 10], t, [trig])] == [30]
    narrow = ActionTrigger(ActionKind.ALERT_RECORD, threshold=3, window=15)
    assert not any(evaluate_triggers(log[:t // 10], t, [narrow]) for t in (10, 20, 30))
    alog = ActionLog()
    one = ActionTrigger(ActionKind.ALERT_RECORD, threshold=1, window=1)
    evaluate_triggers([fault(5)], 5, [one], alog)
    assert alog.lines() == ["at=5 trigger=0 action=AlertRecord"]


def test_trigger_class_filter():
    trig = ActionTrigger(ActionKind.MESSAGE_RECORD, 1, 10, K.TIMING)
    assert evaluate_triggers([fault(1, C.APP_CRASH)], 1, [trig]) == []
    assert len(evaluate_triggers([fault(1, C.CONNECT_TIMEOUT)], 1, [trig])) == 1


def test_run_program_receives_summary(tmp_path):
    out = tmp_path / "args.txt"
    script = tmp_path / "sink.py"
    script.write_text(f"import sys\nopen({str(out)!r}, 'w').write(' '.join(sys.argv[1:]))\n")
    trig = ActionTrigger(ActionKind.RUN_PROGRAM, 1, 10, path=sys.executable, args=(str(script),))
    fired = evaluate_triggers([fault(2, C.LINK_DOWN)], 2, [trig])
    assert fired[0].failure is None
    assert out.read_text() == "2:A:LinkDown:Network"


def test_run_program_failure_is_recorded_not_raised(tmp_path):
    trig = ActionTrigger(ActionKind.RUN_PROGRAM, 1, 10, path=str(tmp_path / "missing"))
    alog = ActionLog()
    fired = evaluate_triggers([fault(1)], 1, [trig], alog)
    assert fired[0].failure.startswith("ActionSinkFailure")
    assert "failure=ActionSinkFailure" in alog.lines()[0]


def _instance(iid="inst-1"):
    return ProcessInstance(iid, "def-1", {"A": ActivityState.INACTIVE, "B": ActivityState.INACTIVE},
                           {"A": 0, "B": 0}, clock=0.0)


class _Cat:
    def __init__(self, version):
        self.version = version


def test_checkpoint_examples():
    inst = _instance()
    s1 = checkpoint(inst, _Cat(1), 1)
    assert set(s1.activity_states.values()) == {ActivityState.INACTIVE}
    s2 = checkpoint(inst, _Cat(1), 2)
    assert s1.payload() == s2.payload() and s1.id != s2.id
    inst.activity_states["A"] = ActivityState.FINISHED
    assert checkpoint(inst, _Cat(2), 3).activity_states["A"] is ActivityState.FINISHED


def test_rollback_restores_and_keeps_clock():
    inst = _instance()
    snap = checkpoint(inst, _Cat(1), 1)
    inst.activity_states["A"] = ActivityState.FINISHED
    inst.attempt_counts["A"] = 4
    inst.clock = 99.0
    rollback(inst, snap)
    assert inst.activity_states == snap.activity_states and inst.attempt_counts == snap.attempt_counts
    assert inst.clock == 99.0
    with pytest.raises(ForeignSnapshot):
        rollback(_instance("inst-2"), snap)


def _env(n, script=()):
    return build_env(homogeneous_env_doc(n, ports=["gmx"]), 0, list(script))


def test_retry_bound_then_escalate():
    script = [FaultSpec("service", "gmx@r1", C.APP_CRASH, nth_dispatch=i) for i in (1, 2, 3)]
    e, inst = simulate(generate_pipeline(1), _env(1, script), cfg=FaultConfig((Retry(2, 0), Escalate())))
    assert inst.status.value == "Failed" and e.dispatches == {"A1": 3}
    assert inst.activity_states["A1"] is ActivityState.ABORTED
    assert any("escalate" in line for line in e.trace.lines())


def test_rebind_moves_to_second_candidate():
    script = [FaultSpec("service", "gmx@r1", C.SERVICE_EXPIRED, nth_dispatch=1)]
    e, inst = simulate(generate_pipeline(1), _env(2, script), cfg=FaultConfig((Rebind(), Escalate())))
    assert inst.status.value == "Completed"
    bindings = [b for b in e.binder.history if b.activity == "A1"]
    assert [(b.service, b.attempt) for b in bindings] == [("gmx@r1", 1), ("gmx@r2", 2)]


def test_replicate_commits_once():
    e, inst = simulate(generate_pipeline(2), _env(2), cfg=FaultConfig((Replicate(2), Escalate())),
                       policy="fcfs")
    # no faults: replication never kicks in
    assert e.commits == {"A1": 1, "A2": 1}


def test_trigger_fires_during_run():
    script = [FaultSpec("service", "gmx@r1", C.MESSAGE_LOST, nth_dispatch=1)]
    trig = ActionTrigger(ActionKind.ALERT_RECORD, threshold=1, window=100)
    e, inst = simulate(generate_pipeline(1), _env(1, script), cfg=FaultConfig(triggers=(trig,)))
    assert inst.status.value == "Completed"
    assert [a.action for a in e.action_log.entries] == [ActionKind.ALERT_RECORD]


def test_checkpoint_chain_without_fault_keeps_periodic_snapshots():
    e, inst = simulate(generate_pipeline(3), _env(1),
                       cfg=FaultConfig((Checkpoint(), Escalate()), checkpoint_interval=7))
    assert inst.status.value == "Completed"
    times = [s.taken_at for s in e.faults.snapshots]
    assert times[0] == 0 and all(b - a == pytest.approx(7) for a, b in zip(times, times[1:]))
