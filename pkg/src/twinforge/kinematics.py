"""Serial-arm kinematics: forward kinematics, positional Jacobian and
damped-least-squares inverse kinematics for a 5-joint revolute chain.

Frame convention: frame ``i`` sits at the origin of joint ``i`` and is
already rotated by ``q[i]`` about the joint axis; the joint's fixed
``translation`` (expressed in frame ``i``) leads to the origin of joint
``i + 1``. The end effector is the origin reached after the last
translation.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np

from twinforge import _kernels

N_JOINTS = 5

DEFAULT_DAMPING = 0.05
DEFAULT_TOL = 1e-4
DEFAULT_MAX_ITER = 100


class Unreachable(RuntimeError):
    """IK residual stayed above tolerance after the iteration budget."""

    def __init__(self, residual: float, q: np.ndarray):
        super().__init__(f"IK residual {residual:.3e} m above tolerance")
        self.residual = residual
        self.q = q


@dataclass(frozen=True)
class Capsule:
    joint_index: int
    p0: np.ndarray
    p1: np.ndarray
    radius: float


@dataclass(frozen=True)
class ArmModel:
    axes: np.ndarray  # (5, 3) unit vectors in the joint's own frame
    translations: np.ndarray  # (5, 3)
    lower: np.ndarray
    upper: np.ndarray
    capsules: tuple[Capsule, ...] = ()
    name: str = "arm"

    def __post_init__(self):
        axes = np.asarray(self.axes, dtype=float)
        if axes.shape != (N_JOINTS, 3):
            raise ValueError(f"arm needs exactly {N_JOINTS} joints, got {axes.shape[0]}")
        norms = np.linalg.norm(axes, axis=1)
        if np.any(norms < 1e-12):
            raise ValueError("joint axis must be non-zero")
        axes = axes / norms[:, None]
        trans = np.asarray(self.translations, dtype=float).reshape(N_JOINTS, 3)
        lower = np.asarray(self.lower, dtype=float).reshape(N_JOINTS)
        upper = np.asarray(self.upper, dtype=float).reshape(N_JOINTS)
        if np.any(lower >= upper):
            raise ValueError("every joint needs lower limit < upper limit")
        if np.linalg.norm(trans, axis=1).sum() <= 0:
            raise ValueError("chain reach must be positive")
        for cap in self.capsules:
            if cap.radius <= 0:
                raise ValueError("capsule radius must be positive")
            if not 0 <= cap.joint_index < N_JOINTS:
                raise ValueError(f"capsule joint_index {cap.joint_index} out of range")
        for arr in (axes, trans, lower, upper):
            arr.setflags(write=False)
        object.__setattr__(self, "axes", axes)
        object.__setattr__(self, "translations", trans)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @property
    def reach(self) -> float:
        return float(np.linalg.norm(self.translations, axis=1).sum())

    @cached_property
    def capsule_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(joint_index, p0, p1, radius) stacked for the geometry kernels."""
        caps = self.capsules
        return (
            np.array([c.joint_index for c in caps], dtype=np.int64),
            np.array([c.p0 for c in caps], dtype=float).reshape(-1, 3),
            np.array([c.p1 for c in caps], dtype=float).reshape(-1, 3),
            np.array([c.radius for c in caps], dtype=float),
        )

    def clamp(self, q) -> np.ndarray:
        return np.minimum(np.maximum(np.asarray(q, dtype=float), self.lower), self.upper)

    def within_limits(self, q) -> bool:
        q = np.asarray(q, dtype=float)
        return bool(np.all(q >= self.lower) and np.all(q <= self.upper))

    def random_config(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.lower, self.upper)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "joints": [
                {"axis": a.tolist(), "translation": t.tolist(), "limits": [float(lo), float(hi)]}
                for a, t, lo, hi in zip(self.axes, self.translations, self.lower, self.upper)
            ],
            "capsules": [
                {"joint_index": c.joint_index, "p0": c.p0.tolist(), "p1": c.p1.tolist(), "radius": c.radius}
                for c in self.capsules
            ],
        }


@dataclass(frozen=True)
class Pose3:
    position: np.ndarray
    orientation: np.ndarray  # unit quaternion (w, x, y, z)
    clamped: bool = False


def arm_from_dict(doc: dict) -> ArmModel:
    joints = doc["joints"]
    if len(joints) != N_JOINTS:
        raise ValueError(f"arm needs exactly {N_JOINTS} joints, got {len(joints)}")
    capsules = tuple(
        Capsule(
            joint_index=int(c["joint_index"]),
            p0=np.asarray(c["p0"], dtype=float),
            p1=np.asarray(c["p1"], dtype=float),
            radius=float(c["radius"]),
        )
        for c in doc.get("capsules", [])
    )
    return ArmModel(
        axes=np.array([j["axis"] for j in joints], dtype=float),
        translations=np.array([j["translation"] for j in joints], dtype=float),
        lower=np.array([j["limits"][0] for j in joints], dtype=float),
        upper=np.array([j["limits"][1] for j in joints], dtype=float),
        capsules=capsules,
        name=doc.get("name", "arm"),
    )


def load_arm(path: str | Path) -> ArmModel:
    with open(path) as fh:
        return arm_from_dict(json.load(fh))


def reference_arm() -> ArmModel:
    """The bundled 5-joint arm (~0.7 m reach, +-2 rad limits)."""
    text = resources.files("twinforge.data").joinpath("reference_arm.json").read_text()
    return arm_from_dict(json.loads(text))


def joint_frames(model: ArmModel, q) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (rotations (5,3,3), origins (5,3), end-effector position).

    ``rotations[i]`` / ``origins[i]`` describe frame ``i`` (after applying q[i]).
    """
    return _kernels.fk_frames(model.axes, model.translations, np.asarray(q, dtype=float))


def _quat_from_matrix(R: np.ndarray) -> np.ndarray:
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def forward_kinematics(model: ArmModel, q) -> Pose3:
    """End-effector pose. Out-of-limit angles are clamped and flagged."""
    q = np.asarray(q, dtype=float)
    if not np.all(np.isfinite(q)):
        raise ValueError("joint configuration must be finite")
    qc = model.clamp(q)
    clamped = bool(np.any(qc != q))
    rots, _, p = joint_frames(model, qc)
    return Pose3(position=p, orientation=_quat_from_matrix(rots[-1]), clamped=clamped)


def jacobian(model: ArmModel, q) -> np.ndarray:
    """3x5 positional Jacobian (m/rad): axis_j x (p_ee - o_j)."""
    q = model.clamp(q)
    return _kernels.position_jacobian(model.axes, model.translations, q)[1]


def _restart_seeds(model: ArmModel, target: np.ndarray) -> list[np.ndarray]:
    # azimuth-aligned postures, facing the target and reaching over the base
    yaw = math.atan2(target[1], target[0])
    seeds = []
    for base, sign in ((yaw, 1.0), (yaw - math.pi, -1.0), (yaw + math.pi, -1.0)):
        for shoulder in (0.5, 1.0):
            seeds.append(model.clamp([base, sign * shoulder, sign * 1.0, sign * 0.5, 0.0]))
    return seeds


def solve_ik(
    model: ArmModel,
    target,
    seed,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    damping: float = DEFAULT_DAMPING,
    restarts: bool = True,
) -> np.ndarray:
    """Position-only damped least squares IK.

    Iterates ``q += J^T (J J^T + damping^2 I)^-1 e`` and clamps to the joint
    limits after each update. A run that stalls (joint limit, singularity)
    is retried from a handful of fixed postures facing the target when
    ``restarts`` is set. Raises :class:`Unreachable` if no run gets the
    residual within ``tol``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    target = np.asarray(target, dtype=float)
    seed = np.asarray(seed, dtype=float)
    if not (np.all(np.isfinite(target)) and np.all(np.isfinite(seed))):
        raise ValueError("target and seed must be finite")
    args = (model.axes, model.translations, model.lower, model.upper, target)
    q, err = _kernels.ik_dls(*args, seed, tol, max_iter, damping)
    if err <= tol:
        return q
    best_q, best_err = q, err
    if restarts:
        for alt in _restart_seeds(model, target):
            q, err = _kernels.ik_dls(*args, alt, tol, max_iter, damping)
            if err <= tol:
                return q
            if err < best_err:
                best_q, best_err = q, err
    raise Unreachable(best_err, best_q)
