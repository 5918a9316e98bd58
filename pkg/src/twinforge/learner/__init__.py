"""From-scratch PPO learner: policy, GAE, update, checkpoints, training."""
from twinforge.learner.buffer import RolloutBuffer, compute_gae
from twinforge.learner.checkpoint import (
    PolicyCheckpoint,
    find_best_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from twinforge.learner.policy import NonFinite, PolicyParams, act, deterministic_action, init_params
from twinforge.learner.ppo import AdamState, PPOSettings, loss_and_grad, ppo_update
from twinforge.learner.train import (
    EvalResult,
    LearnerConfig,
    NoConvergence,
    ResumeResult,
    Task,
    reference_task,
    TrainResult,
    evaluate,
    resume_training,
    run_episode,
    train,
)

__all__ = [
    "AdamState",
    "EvalResult",
    "LearnerConfig",
    "NoConvergence",
    "NonFinite",
    "PPOSettings",
    "PolicyCheckpoint",
    "PolicyParams",
    "ResumeResult",
    "RolloutBuffer",
    "Task",
    "reference_task",
    "TrainResult",
    "act",
    "compute_gae",
    "deterministic_action",
    "evaluate",
    "find_best_checkpoint",
    "init_params",
    "load_checkpoint",
    "loss_and_grad",
    "ppo_update",
    "resume_training",
    "run_episode",
    "save_checkpoint",
    "train",
]
