"""Synthetic camera detections and the pixel-to-world calibration.

Detections live in the rectified (top-down) image: the camera's view of the
workspace is first warped by a homography so that the four workspace corners
land on the corners of a ``px_total_x`` by ``px_total_y`` frame, and a linear
map then turns rectified pixels into table coordinates.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, TextIO

import numpy as np

from twinforge.world import TABLE_Z, BoxObstacle, Scene

GOAL = "goal"
OBSTACLE = "obstacle"
GOAL_CUBE = 0.025  # edge of the goal cube (m), only used for its pixel box
DEFAULT_CONFIDENCE = 0.994
LOG_COLUMNS = ["frame", "class", "x_px", "y_px", "w_px", "h_px", "depth_m", "confidence"]


class Degenerate(ValueError):
    """Corner set cannot define a projective map."""


class OutOfFrame(ValueError):
    pass


class NoGoalDetected(LookupError):
    pass


@dataclass(frozen=True)
class Detection2D:
    class_label: str
    x: float
    y: float
    w_px: float
    h_px: float
    depth_height: float
    confidence: float = DEFAULT_CONFIDENCE

    def __post_init__(self):
        if self.class_label not in (GOAL, OBSTACLE):
            raise ValueError(f"unknown class label {self.class_label!r}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")
        if self.x < 0 or self.y < 0 or self.w_px < 0 or self.h_px < 0:
            raise ValueError("pixel quantities must be non-negative")


@dataclass(frozen=True)
class Calibration:
    homography: np.ndarray = field(default_factory=lambda: np.eye(3))
    ratio_x: float = 0.482
    ratio_y: float = 0.587
    px_total_x: float = 660.0
    px_total_y: float = 540.0
    offset_x: float = 0.0
    offset_y: float = 0.0
    table_z: float = TABLE_Z

    def __post_init__(self):
        H = np.array(self.homography, dtype=float).reshape(3, 3)
        H.setflags(write=False)
        object.__setattr__(self, "homography", H)
        if abs(np.linalg.det(H)) <= 1e-12:
            raise ValueError("homography is singular")
        if self.px_total_x <= 0 or self.px_total_y <= 0:
            raise ValueError("px_total must be positive")

    @property
    def meters_per_px(self) -> tuple[float, float]:
        return self.ratio_x / self.px_total_x, self.ratio_y / self.px_total_y

    def in_frame(self, x_p: float, y_p: float) -> bool:
        return 0.0 <= x_p <= self.px_total_x and 0.0 <= y_p <= self.px_total_y

    def to_dict(self) -> dict:
        d = asdict(self)
        d["homography"] = self.homography.tolist()
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "Calibration":
        return cls(**doc)


def demo_calibration() -> Calibration:
    """Offsets placing the frame over the default reduced workspace."""
    return Calibration(offset_x=0.6, offset_y=-0.29)


def load_calibration(path: str | Path) -> Calibration:
    return Calibration.from_dict(json.loads(Path(path).read_text()))


def save_calibration(calib: Calibration, path: str | Path) -> None:
    Path(path).write_text(json.dumps(calib.to_dict(), indent=2))


def _cross2(o, a, b) -> float:
    return float((a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]))


def _check_quad(pts: np.ndarray, name: str, tol: float = 1e-9) -> None:
    # no three points collinear, and all turns the same way (convex)
    for i in range(4):
        for j in range(i + 1, 4):
            for k in range(j + 1, 4):
                if abs(_cross2(pts[i], pts[j], pts[k])) <= tol:
                    raise Degenerate(f"three {name} corners are collinear")
    turns = [_cross2(pts[i], pts[(i + 1) % 4], pts[(i + 2) % 4]) for i in range(4)]
    if not (all(t > 0 for t in turns) or all(t < 0 for t in turns)):
        raise Degenerate(f"{name} corners do not form a convex quadrilateral")


def homography_from_corners(src: Sequence[Sequence[float]], dst: Sequence[Sequence[float]]) -> np.ndarray:
    """Projective map sending the four ``src`` points onto ``dst`` (h33 = 1)."""
    src = np.asarray(src, dtype=float).reshape(4, 2)
    dst = np.asarray(dst, dtype=float).reshape(4, 2)
    _check_quad(src, "source")
    _check_quad(dst, "destination")
    A = np.zeros((8, 8))
    b = np.zeros(8)
    for i, ((x, y), (u, v)) in enumerate(zip(src, dst)):
        A[2 * i] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        A[2 * i + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        b[2 * i], b[2 * i + 1] = u, v
    try:
        h = np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise Degenerate("corner system is singular") from exc
    return np.append(h, 1.0).reshape(3, 3)


def apply_homography(H: np.ndarray, pts) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    hom = np.hstack([pts, np.ones((len(pts), 1))]) @ np.asarray(H).T
    return hom[:, :2] / hom[:, 2:3]


def rectify(pts, calib: Calibration) -> np.ndarray:
    """Raw camera pixels to rectified pixels."""
    return apply_homography(calib.homography, pts)


@dataclass(frozen=True)
class CameraModel:
    image_size: tuple[int, int] = (660, 540)
    corners: tuple[tuple[float, float], ...] = ((0.0, 0.0), (660.0, 0.0), (660.0, 540.0), (0.0, 540.0))
    sigma_px: float = 0.0
    false_negative_rate: float = 0.0
    height_sigma: float = 0.0
    confidence: float = DEFAULT_CONFIDENCE

    def __post_init__(self):
        _check_quad(np.asarray(self.corners, dtype=float).reshape(4, 2), "camera")
        if self.sigma_px < 0 or self.height_sigma < 0:
            raise ValueError("noise levels must be non-negative")
        if not 0.0 <= self.false_negative_rate <= 1.0:
            raise ValueError("false_negative_rate must lie in [0, 1]")

    def calibrate(self, base: Calibration | None = None) -> Calibration:
        """Calibration whose homography rectifies this camera's corners."""
        base = base or Calibration()
        frame = [(0.0, 0.0), (base.px_total_x, 0.0), (base.px_total_x, base.px_total_y), (0.0, base.px_total_y)]
        H = homography_from_corners(self.corners, frame)
        return Calibration(**{**base.to_dict(), "homography": H})


def pixel_to_world(x_p: float, y_p: float, calib: Calibration) -> tuple[float, float, float]:
    if not calib.in_frame(x_p, y_p):
        raise OutOfFrame(f"pixel ({x_p}, {y_p}) outside the rectified frame")
    x = -calib.ratio_x * (x_p / calib.px_total_x) + calib.offset_x
    y = calib.ratio_y * (y_p / calib.px_total_y) + calib.offset_y
    return x, y, calib.table_z


def world_to_pixel(x: float, y: float, calib: Calibration) -> tuple[float, float]:
    """Inverse of :func:`pixel_to_world`; may fall outside the frame."""
    x_p = (calib.offset_x - x) * calib.px_total_x / calib.ratio_x
    y_p = (y - calib.offset_y) * calib.px_total_y / calib.ratio_y
    return x_p, y_p


def _render(label, center, size_xy, height, cam: CameraModel, calib: Calibration, rng) -> Detection2D | None:
    x_p, y_p = world_to_pixel(center[0], center[1], calib)
    if not calib.in_frame(x_p, y_p):
        return None
    if cam.sigma_px > 0:
        x_p, y_p = np.array([x_p, y_p]) + cam.sigma_px * rng.standard_normal(2)
        x_p = float(np.clip(x_p, 0.0, calib.px_total_x))
        y_p = float(np.clip(y_p, 0.0, calib.px_total_y))
    if cam.height_sigma > 0:
        height = max(0.0, height + cam.height_sigma * float(rng.standard_normal()))
    mx, my = calib.meters_per_px
    return Detection2D(label, x_p, y_p, size_xy[0] / mx, size_xy[1] / my, height, cam.confidence)


def synth_detect(scene: Scene, cam: CameraModel, calib: Calibration, rng: np.random.Generator) -> list[Detection2D]:
    """Render a ground-truth scene into detections, goal first.

    Objects whose true center falls outside the frame are not seen.
    """
    objects = [(GOAL, scene.goal_pos, (GOAL_CUBE, GOAL_CUBE), GOAL_CUBE)]
    objects += [(OBSTACLE, b.center, 2.0 * b.half_extents[:2], b.height) for b in scene.obstacles]
    out = []
    for label, center, size, height in objects:
        if cam.false_negative_rate > 0 and rng.random() < cam.false_negative_rate:
            continue
        det = _render(label, center, size, height, cam, calib, rng)
        if det is not None:
            out.append(det)
    return out


def estimate_scene(
    detections: Iterable[Detection2D],
    calib: Calibration,
    workspace_bounds=((-1.0, -1.0, 0.0), (1.0, 1.0, 1.0)),
) -> Scene:
    dets = list(detections)
    goals = [d for d in dets if d.class_label == GOAL]
    if not goals:
        raise NoGoalDetected("no goal among the detections")
    best = max(goals, key=lambda d: d.confidence)
    goal = pixel_to_world(best.x, best.y, calib)
    mx, my = calib.meters_per_px
    boxes = []
    for d in dets:
        if d.class_label != OBSTACLE:
            continue
        x, y, _ = pixel_to_world(d.x, d.y, calib)
        half = (0.5 * d.w_px * mx, 0.5 * d.h_px * my, 0.5 * d.depth_height)
        boxes.append(BoxObstacle(center=(x, y, half[2]), half_extents=half))
    return Scene(goal_pos=goal, obstacles=tuple(boxes), workspace_bounds=workspace_bounds)


class DetectionLog:
    """CSV log of detections, one row per detection."""

    def __init__(self, fh: TextIO, write_header: bool = True):
        self._w = csv.writer(fh)
        if write_header:
            self._w.writerow(LOG_COLUMNS)

    def write(self, frame: int, detections: Iterable[Detection2D]) -> None:
        for d in detections:
            self._w.writerow([frame, d.class_label, d.x, d.y, d.w_px, d.h_px, d.depth_height, d.confidence])


def read_detection_log(fh: TextIO) -> dict[int, list[Detection2D]]:
    frames: dict[int, list[Detection2D]] = {}
    for row in csv.DictReader(fh):
        det = Detection2D(
            row["class"], float(row["x_px"]), float(row["y_px"]), float(row["w_px"]),
            float(row["h_px"]), float(row["depth_m"]), float(row["confidence"]),
        )
        frames.setdefault(int(row["frame"]), []).append(det)
    return frames
