"""Per-episode session records, stored as JSON lines."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

VOLATILE_FIELDS = ("wall_time",)


@dataclass
class EpisodeRecord:
    episode: int
    twin_flag_task: int
    twin_flag_safe: int
    attempts: int = 1
    retrain_triggered: bool = False
    retrain_reason: str | None = None
    retrain_steps: int | None = None
    retrain_count: int = 0
    pretrain_steps: int | None = None
    published: bool = False
    plant_flag_task: int | None = None
    plant_flag_safe: int | None = None
    wall_time: float = 0.0

    def __post_init__(self):
        if self.retrain_triggered != (self.retrain_steps is not None):
            raise ValueError("retrain_steps must be set exactly when a retrain happened")

    @property
    def agrees(self) -> bool:
        return (self.plant_flag_task, self.plant_flag_safe) == (self.twin_flag_task, self.twin_flag_safe)


@dataclass
class SessionLog:
    records: list[EpisodeRecord] = field(default_factory=list)
    status: str = ""
    end_reason: str = ""

    def append(self, record: EpisodeRecord) -> None:
        self.records.append(record)

    @property
    def retrains(self) -> int:
        return sum(r.retrain_count for r in self.records)

    @property
    def published(self) -> int:
        return sum(1 for r in self.records if r.published)

    def comparable(self) -> list[dict]:
        """Records without wall-clock fields, for equality checks."""
        out = []
        for r in self.records:
            d = asdict(r)
            for k in VOLATILE_FIELDS:
                d.pop(k)
            out.append(d)
        return out

    def same_as(self, other: "SessionLog") -> bool:
        return (self.comparable(), self.status, self.end_reason) == (other.comparable(), other.status, other.end_reason)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in self.records)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def from_jsonl(cls, text: str) -> "SessionLog":
        log = cls()
        for n, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                log.append(EpisodeRecord(**json.loads(line)))
            except (ValueError, TypeError) as exc:
                raise ValueError(f"line {n}: malformed session record ({exc})") from exc
        return log

    @classmethod
    def load(cls, path: str | Path) -> "SessionLog":
        return cls.from_jsonl(Path(path).read_text())
