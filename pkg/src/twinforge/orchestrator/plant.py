"""Simulated physical side: camera, perturbations, and a ground-truth audit."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from twinforge.env import EnvConfig
from twinforge.kinematics import ArmModel, forward_kinematics
from twinforge.orchestrator.protocol import (
    COMMAND_BATCH,
    FLAG_REPORT,
    RETRAIN_NOTICE,
    SCENE_UPDATE,
    SESSION_END,
    ProtocolError,
)
from twinforge.orchestrator.transport import Link
from twinforge.perception import Calibration, CameraModel, NoGoalDetected, demo_calibration, estimate_scene, synth_detect
from twinforge.world import Scene, in_collision, scale_obstacles

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScaleObstacles:
    """Replace every obstacle with a rescaled copy."""

    height: float = 2.0
    width: float = 1.0

    def apply(self, scene: Scene) -> Scene:
        return scale_obstacles(scene, self.height, self.width)


@dataclass(frozen=True)
class PerturbationSchedule:
    events: tuple[tuple[int, ScaleObstacles], ...] = ()

    def __post_init__(self):
        eps = [k for k, _ in self.events]
        if any(b <= a for a, b in zip(eps, eps[1:])):
            raise ValueError("perturbation episodes must be strictly increasing")

    @classmethod
    def single(cls, episode: int | None, height: float = 2.0) -> "PerturbationSchedule":
        return cls(() if episode is None else ((episode, ScaleObstacles(height)),))

    def due(self, episode: int):
        return [m for k, m in self.events if k == episode]


@dataclass
class PlantConfig:
    n_episodes: int = 10
    camera: CameraModel = field(default_factory=CameraModel)
    calibration: Calibration = field(default_factory=demo_calibration)
    detect_attempts: int = 5
    env: EnvConfig = field(default_factory=EnvConfig)
    seed: int = 0


@dataclass
class PlantEpisode:
    episode: int
    scene: dict
    perturbed: bool
    executed: bool = False
    flag_task: int | None = None
    flag_safe: int | None = None
    retrain_notices: int = 0


@dataclass
class PlantLog:
    episodes: list[PlantEpisode] = field(default_factory=list)
    end_reason: str = ""


def audit_commands(model: ArmModel, scene: Scene, joints: list, goal_radius: float) -> tuple[int, int]:
    """Replay a joint trajectory against the true scene: (flag_task, flag_safe)."""
    safe = 1
    if scene.obstacles:
        for q in joints:
            if in_collision(model, q, scene):
                safe = 0
                break
    reached = 0
    if joints:
        tcp = forward_kinematics(model, joints[-1]).position
        reached = int(np.linalg.norm(tcp - scene.goal_pos) <= goal_radius)
    return reached, safe


def run_plant(link: Link, model: ArmModel, true_scene: Scene, schedule: PerturbationSchedule, config: PlantConfig) -> PlantLog:
    """Serve ``config.n_episodes`` episodes to a connected twin.

    Each episode: apply due perturbations, publish a perception estimate,
    then wait for the twin's CommandBatch and audit it on the true scene.
    """
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 7]))
    scene = true_scene
    last_estimate = None
    plog = PlantLog()
    try:
        for k in range(config.n_episodes):
            mutations = schedule.due(k)
            for m in mutations:
                scene = m.apply(scene)
                log.info("episode %d: obstacle perturbed (%s)", k, m)
            estimate = _perceive(scene, config, rng) or last_estimate
            if estimate is None:
                raise NoGoalDetected(f"episode {k}: goal not detected and no earlier estimate")
            last_estimate = estimate
            rec = PlantEpisode(k, scene.to_dict(), bool(mutations))
            plog.episodes.append(rec)
            link.send(SCENE_UPDATE, k, {"scene": estimate.to_dict()})
            while True:
                msg = link.recv()
                if msg.kind == SESSION_END:
                    plog.end_reason = msg.payload.get("reason", "twin ended session")
                    return plog
                if msg.episode != k:
                    raise ProtocolError(f"expected episode {k}, got {msg.kind} for {msg.episode}")
                if msg.kind == RETRAIN_NOTICE:
                    rec.retrain_notices += 1
                elif msg.kind == FLAG_REPORT:
                    continue  # twin's prediction; the plant reports its own after execution
                elif msg.kind == COMMAND_BATCH:
                    joints = [np.asarray(q, dtype=float) for q in msg.payload["joints"]]
                    rec.flag_task, rec.flag_safe = audit_commands(model, scene, joints, config.env.goal_radius)
                    rec.executed = True
                    link.send(FLAG_REPORT, k, {"flag_task": rec.flag_task, "flag_safe": rec.flag_safe, "source": "plant"})
                    break
                else:
                    raise ProtocolError(f"unexpected {msg.kind} at the plant")
        plog.end_reason = "complete"
        link.send(SESSION_END, None, {"reason": "complete"})
    except ProtocolError as exc:
        _abort(link, plog, f"protocol violation: {exc}")
    except (NoGoalDetected, TimeoutError, ConnectionError) as exc:
        _abort(link, plog, f"plant failure: {exc}")
    return plog


def _perceive(scene: Scene, config: PlantConfig, rng) -> Scene | None:
    """Re-query the camera a few times when the goal is missed."""
    for _ in range(config.detect_attempts):
        dets = synth_detect(scene, config.camera, config.calibration, rng)
        try:
            return estimate_scene(dets, config.calibration, scene.workspace_bounds)
        except NoGoalDetected:
            continue
    return None


def _abort(link: Link, plog: PlantLog, reason: str) -> None:
    plog.end_reason = reason
    log.error("%s", reason)
    try:
        link.send(SESSION_END, None, {"reason": reason})
    except OSError:
        pass
