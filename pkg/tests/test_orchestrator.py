import socket
import threading
from dataclasses import dataclass

import numpy as np
import pytest

from twinforge.env import DEFAULT_START_Q, EnvConfig
from twinforge.kinematics import reference_arm
from twinforge.learner import NoConvergence
from twinforge.orchestrator import (
    CheckpointPolicyStore,
    EpisodeRecord,
    Link,
    OrchestratorConfig,
    PerturbationSchedule,
    PlantConfig,
    PlantUnreachable,
    ProtocolError,
    ScriptedPolicy,
    SessionLog,
    StubPolicyStore,
    TwinMessage,
    audit_commands,
    connect,
    detect_interrupt,
    loopback_pair,
    orchestrate,
    run_plant,
    run_twin_episode,
)
from twinforge.orchestrator.protocol import (
    COMMAND_BATCH,
    FLAG_REPORT,
    RETRAIN_NOTICE,
    SCENE_UPDATE,
    SESSION_END,
    SequenceGuard,
    decode_body,
    encode_frame,
)
from twinforge.orchestrator.runner import run_session
from twinforge.perception import CameraModel
from twinforge.world import TABLE_Z, Scene, scale_obstacles

ARM = reference_arm()


class RecordingChannel:
    """Wraps a channel and appends every sent message to a shared trace."""

    def __init__(self, inner, sender, trace, lock):
        self.inner, self.sender, self.trace, self.lock = inner, sender, trace, lock

    def send_raw(self, msg):
        with self.lock:
            self.trace.append((self.sender, msg))
            self.inner.send_raw(msg)

    def recv_raw(self, timeout):
        return self.inner.recv_raw(timeout)

    def close(self):
        self.inner.close()


def traced_session(store, scene, schedule, pcfg=None, ocfg=None):
    twin_end, plant_end = loopback_pair()
    trace, lock = [], threading.Lock()
    twin = Link(RecordingChannel(twin_end, "twin", trace, lock), 30.0)
    plant = Link(RecordingChannel(plant_end, "plant", trace, lock), 30.0)
    holder = {}
    worker = threading.Thread(
        target=lambda: holder.update(plog=run_plant(plant, ARM, scene, schedule, pcfg or PlantConfig())), daemon=True
    )
    worker.start()
    slog = orchestrate(twin, store, ocfg)
    worker.join(30.0)
    return slog, holder["plog"], trace


def assert_safety_gate(trace):
    """Every CommandBatch follows a twin FlagReport for the same episode with both flags set."""
    last_twin_flags = {}
    for sender, msg in trace:
        if sender != "twin":
            continue
        if msg.kind == FLAG_REPORT:
            last_twin_flags[msg.episode] = (msg.payload["flag_task"], msg.payload["flag_safe"])
        if msg.kind == COMMAND_BATCH:
            assert last_twin_flags.get(msg.episode) == (1, 1)


def assert_one_ahead(trace):
    kinds = [(s, m.kind, m.episode) for s, m in trace]
    for k in {e for _, kind, e in kinds if kind == SCENE_UPDATE}:
        su = kinds.index(("plant", SCENE_UPDATE, k))
        first_twin = min(i for i, (s, _, e) in enumerate(kinds) if s == "twin" and e == k)
        assert su < first_twin  # the estimate precedes any twin run for k
        if ("twin", COMMAND_BATCH, k) in kinds and ("plant", SCENE_UPDATE, k + 1) in kinds:
            assert kinds.index(("twin", COMMAND_BATCH, k)) < kinds.index(("plant", SCENE_UPDATE, k + 1))


def assert_monotone_sequences(trace):
    for who in ("twin", "plant"):
        seqs = [m.seq for s, m in trace if s == who]
        assert seqs == list(range(len(seqs)))


# twin episode -----------------------------------------------------------------

def test_detect_interrupt_enumeration():
    assert detect_interrupt(1, 1) is None
    assert detect_interrupt(0, 1) == "GoalNotReached"
    assert detect_interrupt(1, 0) == "Collision"
    assert detect_interrupt(0, 0) == "Collision"


def test_straight_line_policy_solves_empty_scene():
    scene = Scene(goal_pos=(0.35, -0.15, TABLE_Z), obstacles=())
    ep = run_twin_episode(ScriptedPolicy("straight"), scene)
    assert (ep.flag_task, ep.flag_safe) == (1, 1)
    assert ep.success and len(ep.joints) == ep.steps


def test_ramming_policy_collides(reference_scene):
    ep = run_twin_episode(ScriptedPolicy("ram"), reference_scene)
    assert ep.flag_safe == 0 and ep.min_clearance < 0


def test_scripted_policy_rejects_unknown_mode():
    with pytest.raises(ValueError):
        ScriptedPolicy("teleport")


def test_pretrained_policy_collides_with_enlarged_obstacle(reference_scene, reference_checkpoint_path, tmp_path):
    store = CheckpointPolicyStore(reference_checkpoint_path, tmp_path)
    ok = run_twin_episode(store.policy(0), reference_scene)
    big = run_twin_episode(store.policy(0), scale_obstacles(reference_scene, height=2.0))
    assert (ok.flag_task, ok.flag_safe) == (1, 1)
    assert big.flag_safe == 0


def test_audit_commands_matches_twin_on_true_scene(reference_scene):
    ep = run_twin_episode(ScriptedPolicy("over"), reference_scene)
    assert audit_commands(ARM, reference_scene, ep.joints, EnvConfig().goal_radius) == (ep.flag_task, ep.flag_safe)
    assert audit_commands(ARM, reference_scene, [], 0.03) == (0, 1)


# state machine ----------------------------------------------------------------

def test_single_injected_failure_triggers_exactly_one_retrain(reference_scene):
    store = StubPolicyStore(break_at=3, stub_steps=500)
    slog, plog, trace = traced_session(store, reference_scene, PerturbationSchedule())
    assert slog.status == "complete"
    assert store.retrain_calls == 1 and slog.retrains == 1
    assert slog.published == 10 and all(r.published for r in slog.records)
    rec = slog.records[3]
    assert (rec.retrain_triggered, rec.retrain_reason, rec.retrain_steps, rec.attempts) == (True, "Collision", 500, 2)
    notices = [(i, m) for i, (s, m) in enumerate(trace) if m.kind == RETRAIN_NOTICE]
    assert [m.episode for _, m in notices] == [3]
    after = [m for s, m in trace[notices[0][0] + 1 :] if s == "twin"]
    assert (after[0].kind, after[0].episode) == (FLAG_REPORT, 3)
    assert (after[1].kind, after[1].episode) == (COMMAND_BATCH, 3)
    assert plog.episodes[3].retrain_notices == 1
    assert_safety_gate(trace)
    assert_one_ahead(trace)
    assert_monotone_sequences(trace)


def test_steady_state_has_no_retrains_and_plant_agrees(reference_scene):
    slog, plog, trace = traced_session(StubPolicyStore(), reference_scene, PerturbationSchedule())
    assert slog.retrains == 0 and slog.published == 10
    assert all(r.agrees for r in slog.records)
    assert [e.executed for e in plog.episodes] == [True] * 10
    assert plog.end_reason == "complete"


def test_scene_update_reflects_perturbation_before_twin_runs(reference_scene):
    store = StubPolicyStore(break_at=5)
    slog, plog, trace = traced_session(store, reference_scene, PerturbationSchedule.single(5))
    heights = [Scene.from_dict(m.payload["scene"]).obstacles[0].height for s, m in trace if m.kind == SCENE_UPDATE]
    h0 = reference_scene.obstacles[0].height
    assert np.allclose(heights, [h0] * 5 + [2 * h0] * 5)
    assert [e.perturbed for e in plog.episodes] == [False] * 5 + [True] + [False] * 4
    assert slog.records[5].retrain_triggered and slog.retrains == 1
    assert_one_ahead(trace)


@dataclass
class NeverFixed(StubPolicyStore):
    def retrain(self, scenes, episode, seed):
        self.retrain_calls += 1
        return 10


def test_retrain_limit_stops_without_publishing(reference_scene):
    store = NeverFixed(break_at=2)
    slog, plog, trace = traced_session(store, reference_scene, PerturbationSchedule(), ocfg=OrchestratorConfig(max_retrains=2))
    assert slog.status == "retrain_limit"
    assert store.retrain_calls == 2
    assert slog.published == 2 and not slog.records[-1].published
    assert not any(m.kind == COMMAND_BATCH and m.episode == 2 for _, m in trace)
    assert_safety_gate(trace)
    assert not plog.episodes[2].executed


@dataclass
class Diverging(StubPolicyStore):
    def retrain(self, scenes, episode, seed):
        raise NoConvergence("stub never converges")


def test_no_convergence_ends_session(reference_scene):
    slog, plog, trace = traced_session(Diverging(break_at=1), reference_scene, PerturbationSchedule())
    assert slog.status == "no_convergence"
    assert trace[-1][1].kind == SESSION_END or plog.end_reason
    assert_safety_gate(trace)


def test_loopback_and_socket_logs_are_identical(reference_scene):
    runs = [
        run_session(StubPolicyStore(break_at=4, stub_steps=7), reference_scene, PerturbationSchedule.single(4), mode=m)
        for m in ("loopback", "socket")
    ]
    assert runs[0].session.status == "complete"
    assert runs[0].session.same_as(runs[1].session)
    assert runs[0].session.to_jsonl() != ""


def test_replay_is_deterministic(reference_scene):
    cfg = PlantConfig(camera=CameraModel(sigma_px=1.0), seed=3)
    a = run_session(StubPolicyStore(break_at=2), reference_scene, PerturbationSchedule(), cfg).session
    b = run_session(StubPolicyStore(break_at=2), reference_scene, PerturbationSchedule(), cfg).session
    assert a.same_as(b)


@pytest.fixture(scope="module")
def noisy_session(reference_scene, reference_checkpoint_path, tmp_path_factory):
    store = CheckpointPolicyStore(reference_checkpoint_path, tmp_path_factory.mktemp("noisy"))
    cfg = PlantConfig(n_episodes=100, camera=CameraModel(sigma_px=2.0), seed=11)
    res = run_session(store, reference_scene, PerturbationSchedule(), cfg)
    executed = [r for r in res.session.records if r.published]
    assert len(executed) == 100
    return executed


@pytest.mark.xfail(
    strict=True,
    reason="twin episodes end just inside goal_radius, so mm-scale perception error flips the plant's goal flag",
)
def test_noisy_perception_agreement_on_reference_fixture(noisy_session):
    agreement = float(np.mean([r.agrees for r in noisy_session]))
    print(f"twin/plant agreement at 2 px: {agreement:.2f}")
    assert agreement >= 0.95


def test_noisy_perception_never_hides_a_collision(noisy_session):
    assert all(r.plant_flag_safe == r.twin_flag_safe for r in noisy_session)


def test_noiseless_perception_agrees_on_reference_fixture(reference_scene, reference_checkpoint_path, tmp_path):
    store = CheckpointPolicyStore(reference_checkpoint_path, tmp_path)
    res = run_session(store, reference_scene, PerturbationSchedule(), PlantConfig(n_episodes=20))
    assert all(r.published and r.agrees for r in res.session.records)


# protocol ---------------------------------------------------------------------

def test_frame_encoding_round_trip():
    msg = TwinMessage(4, COMMAND_BATCH, 2, {"joints": [[0.1, 0.2]]})
    frame = encode_frame(msg)
    assert int.from_bytes(frame[:4], "big") == len(frame) - 4
    assert decode_body(frame[4:]) == msg


def test_malformed_messages_are_rejected():
    with pytest.raises(ProtocolError):
        TwinMessage(0, "Hello")
    with pytest.raises(ProtocolError):
        decode_body(b"not json")
    with pytest.raises(ProtocolError):
        decode_body(b"[1, 2]")
    with pytest.raises(ProtocolError):
        decode_body(b'{"kind": "SessionEnd"}')


def test_sequence_guard_rejects_regressions():
    out, inbound = SequenceGuard(), SequenceGuard()
    a, b = out.stamp(SCENE_UPDATE, 0), out.stamp(SCENE_UPDATE, 1)
    assert (a.seq, b.seq) == (0, 1)
    inbound.check(a)
    inbound.check(b)
    with pytest.raises(ProtocolError):
        inbound.check(a)


def test_plant_ends_session_on_wrong_episode(reference_scene):
    twin_end, plant_end = loopback_pair()
    twin = Link(twin_end, 10.0)
    worker = threading.Thread(
        target=lambda: run_plant(Link(plant_end, 10.0), ARM, reference_scene, PerturbationSchedule(), PlantConfig()),
        daemon=True,
    )
    worker.start()
    assert twin.recv().kind == SCENE_UPDATE
    twin.send(COMMAND_BATCH, 7, {"joints": []})
    end = twin.recv()
    worker.join(10.0)
    assert end.kind == SESSION_END and "protocol" in end.payload["reason"]


def test_twin_ends_session_on_unexpected_message():
    twin_end, plant_end = loopback_pair()
    plant = Link(plant_end, 10.0)
    plant.send(COMMAND_BATCH, 0, {"joints": []})
    slog = orchestrate(Link(twin_end, 10.0), StubPolicyStore())
    assert slog.status == "protocol"
    assert plant.recv().kind == SESSION_END


def test_unreachable_plant():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    with pytest.raises(PlantUnreachable):
        connect(f"127.0.0.1:{port}", retries=1, backoff=0.01)


# session log ------------------------------------------------------------------

def test_session_log_round_trip(tmp_path):
    log = SessionLog()
    log.append(EpisodeRecord(0, 1, 1, published=True, plant_flag_task=1, plant_flag_safe=1, wall_time=0.5))
    log.append(EpisodeRecord(1, 1, 1, attempts=2, retrain_triggered=True, retrain_reason="Collision",
                             retrain_steps=2048, retrain_count=1, pretrain_steps=10_000, published=True))
    log.save(tmp_path / "s.jsonl")
    again = SessionLog.load(tmp_path / "s.jsonl")
    assert again.comparable() == log.comparable()
    assert (again.retrains, again.published) == (1, 2)


def test_session_record_invariants():
    with pytest.raises(ValueError):
        EpisodeRecord(0, 1, 1, retrain_triggered=True)
    with pytest.raises(ValueError):
        EpisodeRecord(0, 1, 1, retrain_steps=5)
    with pytest.raises(ValueError, match="line 2"):
        SessionLog.from_jsonl('{"episode": 0, "twin_flag_task": 1, "twin_flag_safe": 1}\n{"bogus": 1}\n')


def test_schedule_must_increase():
    from twinforge.orchestrator import ScaleObstacles

    with pytest.raises(ValueError):
        PerturbationSchedule(((3, ScaleObstacles()), (3, ScaleObstacles())))
    assert PerturbationSchedule.single(None).events == ()
    assert PerturbationSchedule.single(4, 3.0).due(4) == [ScaleObstacles(3.0)]
