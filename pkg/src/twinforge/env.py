"""Episodic reach-and-avoid environment for the simulated arm.

The observation is a fixed 17-vector::

    [t, goal_x, goal_y, tcp(3), tcp_vel(3), h, w, pos_A(3), pos_B(3)]

and the action is a Cartesian end-effector displacement. The shaped
reward is ``c1 * r_g + c2 * r_a + c3 * r_o`` with goal progress, effort
and obstacle-proximity terms.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields
from typing import Callable, Iterable, TextIO

import numpy as np

from twinforge.kinematics import ArmModel, Unreachable, forward_kinematics, solve_ik
from twinforge.world import ClosestPair, Scene, scene_closest

OBS_DIM = 17
ACT_DIM = 3

TRACE_COLUMNS = ["episode", "step", "reward", "r_g", "r_a", "r_o", "dist_goal", "dist_obs", "flag_task", "flag_safe"]
# Joint start pose of the reference arm for the reduced workspace (TCP ~ (0.30, 0.22, 0.25)).
DEFAULT_START_Q = (0.6327, 0.5681, 1.1545, 1.1661, 0.0)


class InvalidStart(ValueError):
    pass


class NotReset(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    c1: float = 1.0
    c2: float = 0.1
    c3: float = 1.0
    d_thre: float = 0.05
    a_max: float = 0.05
    horizon: int = 100
    goal_radius: float = 0.03
    gamma: float = 0.99
    control_period: float = 0.05

    def __post_init__(self):
        if not (self.c1 > 0 and self.c3 >= 0 and self.c2 >= 0):
            raise ValueError("reward weights need c1 > 0, c2 >= 0, c3 >= 0")
        if self.d_thre <= 0:
            raise ValueError("d_thre must be positive")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.a_max <= 0 or self.horizon < 1 or self.goal_radius <= 0 or self.control_period <= 0:
            raise ValueError("a_max, horizon, goal_radius and control_period must be positive")

    @classmethod
    def from_dict(cls, doc: dict) -> "EnvConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ValueError(f"unknown env keys: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Observation:
    t: float
    pos_goal: np.ndarray
    pos_tcp: np.ndarray
    vel_tcp: np.ndarray
    h: float
    w: float
    pos_A: np.ndarray
    pos_B: np.ndarray

    def to_array(self) -> np.ndarray:
        return np.concatenate(
            ([self.t], self.pos_goal, self.pos_tcp, self.vel_tcp, [self.h, self.w], self.pos_A, self.pos_B)
        ).astype(np.float64)

    @classmethod
    def from_array(cls, arr) -> "Observation":
        a = np.asarray(arr, dtype=np.float64)
        if a.shape != (OBS_DIM,):
            raise ValueError(f"observation must have {OBS_DIM} entries")
        return cls(
            t=float(a[0]),
            pos_goal=a[1:3].copy(),
            pos_tcp=a[3:6].copy(),
            vel_tcp=a[6:9].copy(),
            h=float(a[9]),
            w=float(a[10]),
            pos_A=a[11:14].copy(),
            pos_B=a[14:17].copy(),
        )


@dataclass(frozen=True)
class StepOutcome:
    observation: Observation
    reward: float
    reward_terms: tuple[float, float, float]
    terminated: bool
    truncated: bool
    flags: tuple[int, int]  # (flag_task, flag_safe)
    q: np.ndarray
    distance_to_goal: float
    clearance: float
    ik_failed: bool = False


def clip_action(a, a_max: float) -> np.ndarray:
    return np.clip(np.asarray(a, dtype=float).reshape(ACT_DIM), -a_max, a_max)


def reward_goal(d_prev: float, d_curr: float) -> float:
    return d_prev - d_curr


def reward_action(a) -> float:
    a = np.asarray(a, dtype=float)
    return -math.sqrt(float(a @ a))


def reward_obstacle(pair: ClosestPair | float, d_thre: float) -> float:
    d = pair.distance if isinstance(pair, ClosestPair) else float(pair)
    return -1.0 if d < d_thre else 0.0


def episode_return(rewards: Iterable[float], gamma: float) -> float:
    # Horner form of sum_k gamma^k r_{k+1}
    total = 0.0
    for r in reversed(list(rewards)):
        total = r + gamma * total
    return total


class ReachEnv:
    """Kinematic twin of the arm on a given scene."""

    def __init__(self, model: ArmModel, config: EnvConfig | None = None, trace: TextIO | None = None):
        self.model = model
        self.config = config or EnvConfig()
        self._scene: Scene | None = None
        self._q: np.ndarray | None = None
        self._tcp = np.zeros(3)
        self._step = 0
        self._flags = (0, 1)
        self._done = False
        self._episode = -1
        self._trace = csv.writer(trace) if trace is not None else None
        if self._trace is not None:
            self._trace.writerow(TRACE_COLUMNS)

    @property
    def scene(self) -> Scene:
        if self._scene is None:
            raise NotReset("call reset() first")
        return self._scene

    @property
    def q(self) -> np.ndarray:
        if self._q is None:
            raise NotReset("call reset() first")
        return self._q.copy()

    def _closest(self, q) -> ClosestPair | None:
        if not self._scene.obstacles:
            return None
        return scene_closest(self.model, q, self._scene)

    def _observe(self, pair: ClosestPair | None, vel: np.ndarray) -> Observation:
        if pair is None:
            h = w = 0.0
            pos_a = pos_b = self._tcp
        else:
            box = self._scene.obstacles[pair.obstacle_index]
            h, w = box.height, box.width
            pos_a, pos_b = pair.pos_A, pair.pos_B
        return Observation(
            t=self._step / self.config.horizon,
            pos_goal=self._scene.goal_pos[:2].copy(),
            pos_tcp=self._tcp.copy(),
            vel_tcp=vel,
            h=h,
            w=w,
            pos_A=np.array(pos_a, dtype=float),
            pos_B=np.array(pos_b, dtype=float),
        )

    def reset(self, scene: Scene, start_q) -> Observation:
        q = self.model.clamp(start_q)
        self._scene = scene
        pair = self._closest(q)
        if pair is not None and pair.distance < 0:
            self._scene = None
            raise InvalidStart("start configuration collides with the scene")
        self._q = q
        self._tcp = forward_kinematics(self.model, q).position
        self._step = 0
        self._flags = (0, 1)
        self._done = False
        self._episode += 1
        return self._observe(pair, np.zeros(3))

    def step(self, action) -> StepOutcome:
        if self._q is None or self._scene is None:
            raise NotReset("call reset() before step()")
        if self._done:
            raise NotReset("episode finished; call reset()")
        cfg = self.config
        a = clip_action(action, cfg.a_max)
        lo, hi = self._scene.workspace_bounds
        target = np.clip(self._tcp + a, lo, hi)
        ik_failed = False
        try:
            q_new = solve_ik(self.model, target, self._q)
        except Unreachable:
            q_new = self._q
            ik_failed = True
        tcp_new = forward_kinematics(self.model, q_new).position
        goal = self._scene.goal_pos
        d_prev = float(np.linalg.norm(self._tcp - goal))
        d_curr = float(np.linalg.norm(tcp_new - goal))
        vel = (tcp_new - self._tcp) / cfg.control_period
        self._q = q_new
        self._tcp = tcp_new
        self._step += 1

        pair = self._closest(q_new)
        clearance = math.inf if pair is None else pair.distance
        collided = clearance < 0.0
        r_g = reward_goal(d_prev, d_curr)
        r_a = reward_action(a)
        r_o = -1.0 if collided else reward_obstacle(clearance, cfg.d_thre)
        reward = cfg.c1 * r_g + cfg.c2 * r_a + cfg.c3 * r_o

        reached = d_curr <= cfg.goal_radius
        flag_task = 1 if reached else 0
        flag_safe = 0 if collided else self._flags[1]
        self._flags = (flag_task, flag_safe)
        terminated = reached or collided
        truncated = (not terminated) and self._step >= cfg.horizon
        self._done = terminated or truncated
        obs = self._observe(pair, vel)
        if self._trace is not None:
            self._trace.writerow(
                [self._episode, self._step, reward, r_g, r_a, r_o, d_curr, clearance, flag_task, flag_safe]
            )
        return StepOutcome(
            observation=obs,
            reward=reward,
            reward_terms=(r_g, r_a, r_o),
            terminated=terminated,
            truncated=truncated,
            flags=self._flags,
            q=q_new.copy(),
            distance_to_goal=d_curr,
            clearance=clearance,
            ik_failed=ik_failed,
        )


SceneSampler = Callable[[np.random.Generator], Scene]


class TaskEnv:
    """Gym-style wrapper: draws a fresh scene every reset, works on arrays."""

    def __init__(self, model: ArmModel, config: EnvConfig, sampler: SceneSampler, start_q, seed: int = 0):
        self.env = ReachEnv(model, config)
        self.config = config
        self.sampler = sampler
        self.start_q = np.asarray(start_q, dtype=float)
        self.rng = np.random.default_rng(seed)
        self.last: StepOutcome | None = None

    def reset(self) -> np.ndarray:
        for _ in range(100):
            scene = self.sampler(self.rng)
            try:
                return self.env.reset(scene, self.start_q).to_array()
            except InvalidStart:
                continue
        raise InvalidStart("sampler keeps producing scenes that collide with the start pose")

    def reset_to(self, scene: Scene) -> np.ndarray:
        return self.env.reset(scene, self.start_q).to_array()

    def step(self, action) -> tuple[np.ndarray, float, bool, bool, StepOutcome]:
        out = self.env.step(action)
        self.last = out
        return out.observation.to_array(), out.reward, out.terminated, out.truncated, out
