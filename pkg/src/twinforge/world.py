"""Box-obstacle scenes and arm-vs-obstacle proximity queries."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from twinforge import _kernels
from twinforge.kinematics import ArmModel

TABLE_Z = 0.025
MAX_REJECTIONS = 1000


class EmptyScene(ValueError):
    pass


class SamplingExhausted(RuntimeError):
    pass


def _vec3(v) -> np.ndarray:
    arr = np.array(v, dtype=float).reshape(3)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class BoxObstacle:
    center: np.ndarray
    half_extents: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", _vec3(self.center))
        object.__setattr__(self, "half_extents", _vec3(self.half_extents))
        if np.any(self.half_extents <= 0):
            raise ValueError("box half extents must be positive")

    @property
    def lo(self) -> np.ndarray:
        return self.center - self.half_extents

    @property
    def hi(self) -> np.ndarray:
        return self.center + self.half_extents

    @property
    def height(self) -> float:
        return float(2.0 * self.half_extents[2])

    @property
    def width(self) -> float:
        return float(2.0 * self.half_extents[0])

    def contains(self, p) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(p >= self.lo) and np.all(p <= self.hi))

    def distance_to_point(self, p) -> float:
        p = np.asarray(p, dtype=float)
        return float(np.linalg.norm(p - np.clip(p, self.lo, self.hi)))

    def to_dict(self) -> dict:
        return {"center": self.center.tolist(), "half_extents": self.half_extents.tolist()}


@dataclass(frozen=True)
class Scene:
    goal_pos: np.ndarray
    obstacles: tuple[BoxObstacle, ...]
    workspace_bounds: tuple[np.ndarray, np.ndarray] = field(
        default=((-1.0, -1.0, 0.0), (1.0, 1.0, 1.0))
    )

    def __post_init__(self):
        object.__setattr__(self, "goal_pos", _vec3(self.goal_pos))
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        lo, hi = self.workspace_bounds
        lo, hi = _vec3(lo), _vec3(hi)
        object.__setattr__(self, "workspace_bounds", (lo, hi))
        if np.any(lo > hi):
            raise ValueError("workspace bounds inverted")
        if not _inside(self.goal_pos, lo, hi):
            raise ValueError("goal outside workspace bounds")
        for box in self.obstacles:
            if not _inside(box.center, lo, hi):
                raise ValueError("obstacle center outside workspace bounds")
            if box.contains(self.goal_pos):
                raise ValueError("goal inside an obstacle")

    @cached_property
    def box_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.array([b.lo for b in self.obstacles], dtype=float).reshape(-1, 3)
        hi = np.array([b.hi for b in self.obstacles], dtype=float).reshape(-1, 3)
        return lo, hi

    def to_dict(self) -> dict:
        return {
            "goal": self.goal_pos.tolist(),
            "obstacles": [b.to_dict() for b in self.obstacles],
            "workspace_bounds": [self.workspace_bounds[0].tolist(), self.workspace_bounds[1].tolist()],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Scene":
        return cls(
            goal_pos=doc["goal"],
            obstacles=tuple(BoxObstacle(o["center"], o["half_extents"]) for o in doc["obstacles"]),
            workspace_bounds=tuple(doc["workspace_bounds"]),
        )

    def same_as(self, other: "Scene", tol: float = 0.0) -> bool:
        if len(self.obstacles) != len(other.obstacles):
            return False
        pairs = [(self.goal_pos, other.goal_pos)]
        pairs += [(a.center, b.center) for a, b in zip(self.obstacles, other.obstacles)]
        pairs += [(a.half_extents, b.half_extents) for a, b in zip(self.obstacles, other.obstacles)]
        return all(np.max(np.abs(x - y)) <= tol for x, y in pairs)


def _inside(p, lo, hi) -> bool:
    return bool(np.all(p >= lo) and np.all(p <= hi))


def load_scene(path: str | Path) -> Scene:
    with open(path) as fh:
        return Scene.from_dict(json.load(fh))


def save_scene(scene: Scene, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scene.to_dict(), indent=2))


@dataclass(frozen=True)
class ClosestPair:
    pos_A: np.ndarray
    pos_B: np.ndarray
    distance: float
    capsule_index: int = 0
    obstacle_index: int = 0


def closest_point_capsule_box(p0, p1, radius: float, box: BoxObstacle) -> ClosestPair:
    """Closest pair between a capsule (world endpoints + radius) and a box.

    ``pos_A`` lies on the capsule surface when separated; under penetration
    it is the deepest point of the capsule axis and the distance is
    ``-(depth + radius)``.
    """
    dist, pa, pb = _kernels.capsule_box(
        np.asarray(p0, dtype=float), np.asarray(p1, dtype=float), float(radius), box.lo, box.hi
    )
    return ClosestPair(pos_A=pa, pos_B=pb, distance=float(dist))


def capsule_segments(model: ArmModel, q) -> tuple[np.ndarray, np.ndarray]:
    joint_idx, p0, p1, _ = model.capsule_arrays
    return _kernels.arm_capsules_world(
        model.axes, model.translations, np.asarray(q, dtype=float), joint_idx, p0, p1
    )


def scene_closest(model: ArmModel, q, scene: Scene) -> ClosestPair:
    if not scene.obstacles:
        raise EmptyScene("scene has no obstacles")
    w0, w1 = capsule_segments(model, q)
    lo, hi = scene.box_arrays
    dist, pa, pb, ci, oi = _kernels.closest_over_pairs(w0, w1, model.capsule_arrays[3], lo, hi)
    return ClosestPair(pos_A=pa, pos_B=pb, distance=float(dist), capsule_index=int(ci), obstacle_index=int(oi))


def in_collision(model: ArmModel, q, scene: Scene) -> bool:
    return scene_closest(model, q, scene).distance < 0.0


def sample_scene(
    rng_seed: int,
    bounds: tuple[Sequence[float], Sequence[float]],
    obstacle_size_range: tuple[tuple[float, float], tuple[float, float]],
    *,
    goal_region: tuple[Sequence[float], Sequence[float]] | None = None,
    obstacle_region: tuple[Sequence[float], Sequence[float]] | None = None,
    min_separation: float = 0.05,
    table_z: float = TABLE_Z,
) -> Scene:
    """Random goal + one box obstacle resting on the table.

    ``obstacle_size_range`` is ``((h_min, h_max), (w_min, w_max))``; the
    box depth equals its width. Regions are x-y rectangles
    ``((x_lo, y_lo), (x_hi, y_hi))`` and default to the bounds' footprint.
    Rejection-samples until the goal is at least ``min_separation`` from
    the box surface.
    """
    rng = np.random.default_rng(rng_seed)
    lo, hi = np.asarray(bounds[0], dtype=float), np.asarray(bounds[1], dtype=float)
    g_lo, g_hi = goal_region if goal_region is not None else (lo[:2], hi[:2])
    o_lo, o_hi = obstacle_region if obstacle_region is not None else (lo[:2], hi[:2])
    (h_lo, h_hi), (w_lo, w_hi) = obstacle_size_range
    for _ in range(MAX_REJECTIONS):
        gx, gy = rng.uniform(g_lo, g_hi)
        ox, oy = rng.uniform(o_lo, o_hi)
        h = rng.uniform(h_lo, h_hi)
        w = rng.uniform(w_lo, w_hi)
        box = BoxObstacle(center=(ox, oy, h / 2.0), half_extents=(w / 2.0, w / 2.0, h / 2.0))
        goal = np.array([gx, gy, table_z])
        if box.distance_to_point(goal) >= min_separation:
            return Scene(goal_pos=goal, obstacles=(box,), workspace_bounds=(lo, hi))
    raise SamplingExhausted(f"no valid scene after {MAX_REJECTIONS} draws")


@dataclass(frozen=True)
class SceneDistribution:
    """Parameters of :func:`sample_scene`, drawable from a numpy Generator.

    The defaults form the reduced desk-scale workspace: the arm starts at
    ``env.DEFAULT_START_Q`` (TCP near (0.30, 0.22, 0.25)) and sweeps across
    the box to a goal on the other side.
    """

    bounds: tuple[tuple[float, float, float], tuple[float, float, float]] = ((-0.1, -0.4, 0.0), (0.7, 0.4, 0.6))
    height_range: tuple[float, float] = (0.04, 0.06)
    width_range: tuple[float, float] = (0.04, 0.06)
    goal_region: tuple[tuple[float, float], tuple[float, float]] = ((0.30, -0.22), (0.42, -0.12))
    obstacle_region: tuple[tuple[float, float], tuple[float, float]] = ((0.30, 0.07), (0.38, 0.13))
    min_separation: float = 0.05
    table_z: float = TABLE_Z

    def sample(self, rng: np.random.Generator) -> Scene:
        return sample_scene(
            int(rng.integers(2**63 - 1)),
            self.bounds,
            (self.height_range, self.width_range),
            goal_region=self.goal_region,
            obstacle_region=self.obstacle_region,
            min_separation=self.min_separation,
            table_z=self.table_z,
        )

    def scaled(self, height: float = 1.0, width: float = 1.0) -> "SceneDistribution":
        h0, h1 = self.height_range
        w0, w1 = self.width_range
        return replace(self, height_range=(h0 * height, h1 * height), width_range=(w0 * width, w1 * width))

    def to_dict(self) -> dict:
        return {
            "bounds": [list(self.bounds[0]), list(self.bounds[1])],
            "height_range": list(self.height_range),
            "width_range": list(self.width_range),
            "goal_region": [list(self.goal_region[0]), list(self.goal_region[1])],
            "obstacle_region": [list(self.obstacle_region[0]), list(self.obstacle_region[1])],
            "min_separation": self.min_separation,
            "table_z": self.table_z,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SceneDistribution":
        def pair(v):
            return (tuple(v[0]), tuple(v[1]))

        unknown = set(doc) - set(cls().to_dict())
        if unknown:
            raise ValueError(f"unknown world keys: {sorted(unknown)}")
        base = cls()
        return cls(
            bounds=pair(doc["bounds"]) if "bounds" in doc else base.bounds,
            height_range=tuple(doc.get("height_range", base.height_range)),
            width_range=tuple(doc.get("width_range", base.width_range)),
            goal_region=pair(doc["goal_region"]) if "goal_region" in doc else base.goal_region,
            obstacle_region=pair(doc["obstacle_region"]) if "obstacle_region" in doc else base.obstacle_region,
            min_separation=doc.get("min_separation", base.min_separation),
            table_z=doc.get("table_z", base.table_z),
        )


def _rescaled(box: BoxObstacle, height: float, width: float) -> BoxObstacle:
    he = box.half_extents * np.array([width, width, height])
    base_z = box.center[2] - box.half_extents[2]
    return BoxObstacle(center=(box.center[0], box.center[1], base_z + he[2]), half_extents=he)


def scale_obstacles(scene: Scene, height: float = 1.0, width: float = 1.0) -> Scene:
    """Rescale every box about its footprint, keeping it on the table."""
    boxes = tuple(_rescaled(b, height, width) for b in scene.obstacles)
    return Scene(goal_pos=scene.goal_pos, obstacles=boxes, workspace_bounds=scene.workspace_bounds)


@dataclass(frozen=True)
class JitteredScene:
    """A fixed scene whose obstacle sizes are jittered by +-``jitter`` per draw."""

    scene: Scene
    jitter: float = 0.1

    def sample(self, rng: np.random.Generator) -> Scene:
        boxes = []
        for b in self.scene.obstacles:
            fh, fw = rng.uniform(1.0 - self.jitter, 1.0 + self.jitter, 2)
            boxes.append(_rescaled(b, fh, fw))
        return Scene(goal_pos=self.scene.goal_pos, obstacles=tuple(boxes), workspace_bounds=self.scene.workspace_bounds)
