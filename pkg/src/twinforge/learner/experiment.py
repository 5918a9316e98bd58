"""Pretrain on small boxes, double their height, resume from the best checkpoint."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

from twinforge.env import EnvConfig
from twinforge.world import SceneDistribution
from twinforge.learner.checkpoint import load_checkpoint
from twinforge.learner.train import LearnerConfig, NoConvergence, ResumeResult, reference_task, resume_training, train

log = logging.getLogger(__name__)


@dataclass
class PerturbationOutcome:
    seed: int
    pretrain_best_step: int
    pretrain_best_reward: float
    pretrain_success: float
    resume: ResumeResult

    @property
    def retrain_ratio(self) -> float:
        return self.resume.steps_used / self.pretrain_best_step

    @property
    def final_success(self) -> float:
        return self.resume.curve[-1].success_rate

    @property
    def reward_dropped(self) -> bool:
        return self.resume.first_eval_reward < self.pretrain_best_reward


def perturbation_experiment(
    seed: int,
    out_dir: str | Path,
    config: LearnerConfig | None = None,
    env_config: EnvConfig | None = None,
    height_scale: float = 2.0,
    scenes: SceneDistribution | None = None,
) -> PerturbationOutcome:
    """One seed of the retrain-efficiency experiment.

    The ratio's denominator is the step count of the best pretraining
    checkpoint, i.e. the pretraining actually needed to reach it.
    """
    out_dir = Path(out_dir)
    cfg = config or LearnerConfig()
    cfg = LearnerConfig.from_dict({**cfg.to_dict(), "seed": seed})
    pre = train(reference_task(env_config, scenes), cfg, out_dir / "pretrain")
    best = load_checkpoint(pre.best_checkpoint)
    try:
        res = resume_training(pre.best_checkpoint, reference_task(env_config, scenes, height_scale), cfg, out_dir / "resume")
    except NoConvergence as exc:
        res = exc.result
    out = PerturbationOutcome(seed, best.global_step, best.mean_eval_reward, best.success_rate, res)
    log.info(
        "seed %d: best pretrain step %d (success %.2f), resume %d steps, ratio %.3f",
        seed, out.pretrain_best_step, out.pretrain_success, res.steps_used, out.retrain_ratio,
    )
    return out
