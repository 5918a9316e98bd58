"""Run configuration: one TOML file with a section per module."""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import tomli
import tomli_w

from twinforge.env import EnvConfig
from twinforge.learner.train import LearnerConfig
from twinforge.perception import Calibration, CameraModel
from twinforge.world import SceneDistribution

CONFIG_ENV_VAR = "TWINFORGE_CONFIG"
NO_PERTURBATION = -1


def _strict(cls, doc: dict, section: str):
    names = {f.name for f in fields(cls)}
    unknown = set(doc) - names
    if unknown:
        raise ValueError(f"unknown keys in [{section}]: {sorted(unknown)}")
    return cls(**doc)


@dataclass
class PerceptionSection:
    sigma_px: float = 0.0
    false_negative_rate: float = 0.0
    height_sigma: float = 0.0
    confidence: float = 0.994
    image_size: tuple[int, int] = (660, 540)
    corners: tuple[tuple[float, float], ...] = ((0.0, 0.0), (660.0, 0.0), (660.0, 540.0), (0.0, 540.0))
    ratio_x: float = 0.482
    ratio_y: float = 0.587
    px_total_x: float = 660.0
    px_total_y: float = 540.0
    offset_x: float = 0.6
    offset_y: float = -0.29
    table_z: float = 0.025

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        self.corners = tuple(tuple(float(c) for c in p) for p in self.corners)

    def camera(self) -> CameraModel:
        return CameraModel(
            image_size=self.image_size,
            corners=self.corners,
            sigma_px=self.sigma_px,
            false_negative_rate=self.false_negative_rate,
            height_sigma=self.height_sigma,
            confidence=self.confidence,
        )

    def calibration(self) -> Calibration:
        base = Calibration(
            ratio_x=self.ratio_x,
            ratio_y=self.ratio_y,
            px_total_x=self.px_total_x,
            px_total_y=self.px_total_y,
            offset_x=self.offset_x,
            offset_y=self.offset_y,
            table_z=self.table_z,
        )
        return self.camera().calibrate(base)


@dataclass
class OrchestratorSection:
    endpoint: str = "127.0.0.1:47800"
    n_episodes: int = 10
    perturb_episode: int = 5
    perturb_height: float = 2.0
    jitter: float = 0.1
    max_retrains: int = 3
    checkpoint: str = ""  # empty: the packaged reference checkpoint
    scene: str = ""  # empty: the packaged reference scene
    connect_retries: int = 5
    backoff: float = 0.1
    timeout: float = 600.0


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/latest"
    env: EnvConfig = field(default_factory=EnvConfig)
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    world: SceneDistribution = field(default_factory=SceneDistribution)
    perception: PerceptionSection = field(default_factory=PerceptionSection)
    orchestrator: OrchestratorSection = field(default_factory=OrchestratorSection)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {"seed", "out", "env", "learner", "world", "perception", "orchestrator"}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        return cls(
            seed=int(doc.get("seed", 0)),
            out=str(doc.get("out", "runs/latest")),
            env=EnvConfig.from_dict(doc.get("env", {})),
            learner=LearnerConfig.from_dict(doc.get("learner", {})),
            world=SceneDistribution.from_dict(doc.get("world", {})),
            perception=_strict(PerceptionSection, doc.get("perception", {}), "perception"),
            orchestrator=_strict(OrchestratorSection, doc.get("orchestrator", {}), "orchestrator"),
        )

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "out": self.out,
            "env": self.env.to_dict(),
            "learner": self.learner.to_dict(),
            "world": self.world.to_dict(),
            "perception": _listify(asdict(self.perception)),
            "orchestrator": asdict(self.orchestrator),
        }

    def learner_config(self) -> LearnerConfig:
        """Learner settings with the master seed applied."""
        return LearnerConfig.from_dict({**self.learner.to_dict(), "seed": self.seed})

    def dump(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(tomli_w.dumps(self.to_dict()).encode())
        return path


def _listify(v):
    if isinstance(v, dict):
        return {k: _listify(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_listify(x) for x in v]
    return v


def load_config(path: str | Path | None) -> RunConfig:
    """Defaults, overlaid by ``path`` or else ``$TWINFORGE_CONFIG`` if set.

    Raises FileNotFoundError naming the path when it does not exist.
    """
    if path is None:
        path = os.environ.get(CONFIG_ENV_VAR) or None
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    with p.open("rb") as fh:
        return RunConfig.from_dict(tomli.load(fh))
