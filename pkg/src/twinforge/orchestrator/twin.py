"""The twin side of the loop: simulate an episode ahead, gate the plant on it."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from twinforge.env import DEFAULT_START_Q, EnvConfig, ReachEnv
from twinforge.kinematics import ArmModel, reference_arm
from twinforge.learner.checkpoint import load_checkpoint
from twinforge.learner.policy import NonFinite, PolicyParams, deterministic_action
from twinforge.learner.train import LearnerConfig, NoConvergence, Task, resume_training
from twinforge.orchestrator.protocol import (
    COMMAND_BATCH,
    FLAG_REPORT,
    RETRAIN_NOTICE,
    SCENE_UPDATE,
    SESSION_END,
    ProtocolError,
)
from twinforge.orchestrator.session import EpisodeRecord, SessionLog
from twinforge.orchestrator.transport import Link
from twinforge.world import TABLE_Z, JitteredScene, Scene

log = logging.getLogger(__name__)

Policy = Callable[[np.ndarray], np.ndarray]

COLLISION = "Collision"
GOAL_NOT_REACHED = "GoalNotReached"


def detect_interrupt(flag_task: int, flag_safe: int) -> str | None:
    """Retrain reason for a twin episode; a collision outranks a missed goal."""
    if not flag_safe:
        return COLLISION
    if not flag_task:
        return GOAL_NOT_REACHED
    return None


@dataclass
class TwinEpisode:
    joints: list[np.ndarray]
    flag_task: int
    flag_safe: int
    steps: int
    total_reward: float
    min_clearance: float

    @property
    def success(self) -> bool:
        return bool(self.flag_task and self.flag_safe)


def run_twin_episode(
    policy: Policy,
    scene: Scene,
    model: ArmModel | None = None,
    env_config: EnvConfig | None = None,
    start_q=DEFAULT_START_Q,
) -> TwinEpisode:
    """Roll a deterministic policy through the twin on an estimated scene."""
    env = ReachEnv(model or reference_arm(), env_config or EnvConfig())
    obs = env.reset(scene, start_q).to_array()
    joints, total, clearance = [], 0.0, math.inf
    while True:
        out = env.step(policy(obs))
        joints.append(out.q.copy())
        total += out.reward
        clearance = min(clearance, out.clearance)
        obs = out.observation.to_array()
        if out.terminated or out.truncated:
            return TwinEpisode(joints, out.flags[0], out.flags[1], len(joints), total, clearance)


# Observation slices (see env.Observation.to_array)
_GOAL_XY = slice(1, 3)
_TCP = slice(3, 6)
_H = 9
_W = 10
_POS_B = slice(14, 17)


def _toward(target: np.ndarray, tcp: np.ndarray, a_max: float) -> np.ndarray:
    d = target - tcp
    n = float(np.linalg.norm(d))
    return d if n <= a_max else d * (a_max / n)


@dataclass(frozen=True)
class ScriptedPolicy:
    """Hand-written policies for tests and smoke runs.

    ``straight`` heads for the goal, ``ram`` drives into the nearest
    obstacle point, ``over`` climbs above the obstacle before crossing it.
    """

    mode: str = "over"
    a_max: float = 0.05
    clearance: float = 0.1
    goal_z: float = TABLE_Z

    def __post_init__(self):
        if self.mode not in ("straight", "ram", "over"):
            raise ValueError(f"unknown scripted mode {self.mode!r}")

    def __call__(self, obs) -> np.ndarray:
        obs = np.asarray(obs, dtype=float)
        tcp = obs[_TCP]
        goal = np.append(obs[_GOAL_XY], self.goal_z)
        if self.mode == "ram":
            return _toward(obs[_POS_B] - [0.0, 0.0, 0.01], tcp, self.a_max)
        if self.mode == "straight" or obs[_H] <= 0.0:
            return _toward(goal, tcp, self.a_max)
        box = obs[_POS_B]
        not_past = np.linalg.norm(goal[:2] - tcp[:2]) > np.linalg.norm(goal[:2] - box[:2]) - obs[_W]
        cruise = obs[_H] + self.clearance
        if not_past and tcp[2] < cruise - 0.005:
            return _toward(np.array([tcp[0], tcp[1], cruise]), tcp, self.a_max)
        if not_past:
            return _toward(np.array([goal[0], goal[1], cruise]), tcp, self.a_max)
        return _toward(goal, tcp, self.a_max)


class PolicyStore(Protocol):
    pretrain_steps: int
    retrain_calls: int

    def policy(self, episode: int) -> Policy: ...

    def retrain(self, scenes: JitteredScene, episode: int, seed: int) -> int: ...


@dataclass
class StubPolicyStore:
    """Scripted policy with a scripted trainer; never touches the learner.

    From ``break_at`` on, the policy is replaced by ``broken`` until the
    next retrain, which restores ``healthy`` and reports ``stub_steps``.
    """

    healthy: ScriptedPolicy = field(default_factory=lambda: ScriptedPolicy("over"))
    broken: ScriptedPolicy = field(default_factory=lambda: ScriptedPolicy("ram"))
    break_at: int | None = None
    stub_steps: int = 0
    pretrain_steps: int = 1
    retrain_calls: int = 0
    _repaired: bool = False

    def policy(self, episode: int) -> Policy:
        if self.break_at is not None and episode >= self.break_at and not self._repaired:
            return self.broken
        return self.healthy

    def retrain(self, scenes: JitteredScene, episode: int, seed: int) -> int:
        self.retrain_calls += 1
        self._repaired = True
        return self.stub_steps


class CheckpointPolicyStore:
    """Policy backed by a checkpoint; retraining resumes from the current best."""

    def __init__(
        self,
        checkpoint: str | Path,
        out_dir: str | Path,
        learner: LearnerConfig | None = None,
        model: ArmModel | None = None,
        env_config: EnvConfig | None = None,
        start_q=DEFAULT_START_Q,
    ):
        self.best = Path(checkpoint)
        ckpt = load_checkpoint(self.best)
        self.params: PolicyParams = ckpt.params
        self.pretrain_steps = int(ckpt.global_step)
        self.out_dir = Path(out_dir)
        self.learner = learner or LearnerConfig()
        self.model = model or reference_arm()
        self.env_config = env_config or EnvConfig()
        self.start_q = np.asarray(start_q, dtype=float)
        self.retrain_calls = 0

    def policy(self, episode: int) -> Policy:
        params = self.params
        return lambda obs: deterministic_action(obs, params)

    def retrain(self, scenes: JitteredScene, episode: int, seed: int) -> int:
        self.retrain_calls += 1
        cfg = LearnerConfig.from_dict({**self.learner.to_dict(), "seed": seed})
        task = Task(self.model, self.env_config, scenes, self.start_q)
        out = self.out_dir / f"retrain_ep{episode:04d}_{self.retrain_calls}"
        res = resume_training(self.best, task, cfg, out)
        self.best = res.best_checkpoint
        self.params = load_checkpoint(self.best).params
        return res.steps_used


@dataclass
class OrchestratorConfig:
    jitter: float = 0.1
    max_retrains: int = 3
    seed: int = 0


def _end(link: Link, slog: SessionLog, status: str, reason: str) -> SessionLog:
    slog.status, slog.end_reason = status, reason
    try:
        link.send(SESSION_END, None, {"reason": reason})
    except OSError:
        pass
    return slog


def orchestrate(
    link: Link,
    store: PolicyStore,
    config: OrchestratorConfig | None = None,
    model: ArmModel | None = None,
    env_config: EnvConfig | None = None,
    start_q=DEFAULT_START_Q,
) -> SessionLog:
    """Run the self-improving loop until the plant ends the session.

    Commands for an episode are published only after a twin run with both
    flags set; a failed run triggers retraining and a re-attempt of the same
    episode, so the episode index only advances after a publish.
    """
    cfg = config or OrchestratorConfig()
    model = model or reference_arm()
    env_config = env_config or EnvConfig()
    slog = SessionLog()
    try:
        while True:
            msg = link.recv()
            if msg.kind == SESSION_END:
                slog.status, slog.end_reason = "complete", msg.payload.get("reason", "")
                return slog
            if msg.kind != SCENE_UPDATE:
                raise ProtocolError(f"expected SceneUpdate, got {msg.kind}")
            k = int(msg.episode)
            scene = Scene.from_dict(msg.payload["scene"])
            t0 = time.perf_counter()
            attempts, retrains, steps, reason = 0, 0, 0, None
            while True:
                ep = run_twin_episode(store.policy(k), scene, model, env_config, start_q)
                attempts += 1
                link.send(FLAG_REPORT, k, {"flag_task": ep.flag_task, "flag_safe": ep.flag_safe, "source": "twin"})
                why = detect_interrupt(ep.flag_task, ep.flag_safe)
                if why is None:
                    break
                if retrains >= cfg.max_retrains:
                    slog.append(_record(k, ep, attempts, retrains, steps, reason, store, t0))
                    return _end(link, slog, "retrain_limit", f"episode {k} still failing after {retrains} retrains")
                reason = reason or why
                link.send(RETRAIN_NOTICE, k, {"reason": why})
                log.info("episode %d: twin run failed (%s), retraining", k, why)
                seed = cfg.seed * 1_000_003 + k * 101 + retrains
                try:
                    steps += store.retrain(JitteredScene(scene, cfg.jitter), k, seed)
                except NoConvergence as exc:
                    slog.append(_record(k, ep, attempts, retrains + 1, steps, reason, store, t0))
                    return _end(link, slog, "no_convergence", f"episode {k}: {exc}")
                retrains += 1
            link.send(COMMAND_BATCH, k, {"joints": [q.tolist() for q in ep.joints]})
            rec = _record(k, ep, attempts, retrains, steps, reason, store, t0)
            rec.published = True
            reply = link.recv()
            if reply.kind == SESSION_END:
                slog.append(rec)
                slog.status, slog.end_reason = "aborted", reply.payload.get("reason", "")
                return slog
            if reply.kind != FLAG_REPORT or reply.episode != k:
                raise ProtocolError(f"expected plant FlagReport for episode {k}, got {reply.kind}")
            rec.plant_flag_task = int(reply.payload["flag_task"])
            rec.plant_flag_safe = int(reply.payload["flag_safe"])
            slog.append(rec)
    except ProtocolError as exc:
        return _end(link, slog, "protocol", f"protocol violation: {exc}")
    except NonFinite as exc:
        return _end(link, slog, "non_finite", str(exc))


def _record(k, ep: TwinEpisode, attempts, retrains, steps, reason, store, t0) -> EpisodeRecord:
    return EpisodeRecord(
        episode=k,
        twin_flag_task=int(ep.flag_task),
        twin_flag_safe=int(ep.flag_safe),
        attempts=attempts,
        retrain_triggered=retrains > 0,
        retrain_reason=reason,
        retrain_steps=steps if retrains > 0 else None,
        retrain_count=retrains,
        pretrain_steps=store.pretrain_steps if retrains > 0 else None,
        wall_time=time.perf_counter() - t0,
    )
