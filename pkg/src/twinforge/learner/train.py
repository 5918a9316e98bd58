"""Training, evaluation and resume-from-best for the PPO learner."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Protocol

import numpy as np

from twinforge.env import ACT_DIM, DEFAULT_START_Q, OBS_DIM, EnvConfig, ReachEnv, TaskEnv
from twinforge.kinematics import ArmModel, reference_arm
from twinforge.learner.buffer import RolloutBuffer
from twinforge.learner.checkpoint import PolicyCheckpoint, load_checkpoint, save_checkpoint
from twinforge.learner.policy import PolicyParams, act, deterministic_action, init_params, value
from twinforge.learner.ppo import AdamState, PPOSettings, ppo_update
from twinforge.world import Scene, SceneDistribution

log = logging.getLogger(__name__)

CURVE_COLUMNS = ["global_step", "mean_eval_reward", "success_rate", "collision_rate"]
EVAL_SEED_BASE = 10_000


class NoConvergence(RuntimeError):
    def __init__(self, message: str, result: "ResumeResult | None" = None):
        super().__init__(message)
        self.result = result


class SceneSource(Protocol):
    def sample(self, rng: np.random.Generator) -> Scene: ...


@dataclass
class LearnerConfig:
    hidden: int = 64
    lr: float = 3e-4
    clip_eps: float = 0.2
    epochs: int = 10
    n_steps: int = 2048
    minibatch: int = 64
    gae_lambda: float = 0.95
    ent_coef: float = 0.0
    vf_coef: float = 0.5
    max_grad_norm: float = 0.5
    log_std_init: float = 0.0
    norm_steps: int = 2048
    total_steps: int = 200_000
    eval_interval: int = 10_240
    eval_episodes: int = 50
    seed: int = 0
    # resume / convergence rule
    success_target: float = 0.9
    plateau_window: int = 10
    plateau_eps: float = 0.01
    patience: int = 3
    resume_eval_interval: int = 2048
    max_resume_steps: int = 100_000

    @classmethod
    def from_dict(cls, doc: dict) -> "LearnerConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ValueError(f"unknown learner keys: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return asdict(self)

    def ppo_settings(self, gamma: float) -> PPOSettings:
        return PPOSettings(
            clip_eps=self.clip_eps,
            epochs=self.epochs,
            minibatch=self.minibatch,
            lr=self.lr,
            gamma=gamma,
            gae_lambda=self.gae_lambda,
            vf_coef=self.vf_coef,
            ent_coef=self.ent_coef,
            max_grad_norm=self.max_grad_norm,
        )


@dataclass
class Task:
    """Everything needed to build training/evaluation environments."""

    model: ArmModel
    env_config: EnvConfig
    scenes: SceneSource
    start_q: np.ndarray

    def make_env(self, seed: int) -> TaskEnv:
        return TaskEnv(self.model, self.env_config, self.scenes.sample, self.start_q, seed=seed)

    def eval_scenes(self, n: int, base_seed: int = EVAL_SEED_BASE) -> list[Scene]:
        return [self.scenes.sample(np.random.default_rng(base_seed + i)) for i in range(n)]


def reference_task(
    env_config: EnvConfig | None = None,
    scenes: SceneSource | None = None,
    height_scale: float = 1.0,
) -> Task:
    """Reference arm on the default reduced workspace, optionally with taller boxes."""
    dist = scenes if scenes is not None else SceneDistribution()
    if height_scale != 1.0:
        dist = dist.scaled(height=height_scale)
    return Task(reference_arm(), env_config or EnvConfig(), dist, np.array(DEFAULT_START_Q))


@dataclass
class EpisodeResult:
    total_reward: float
    flag_task: int
    flag_safe: int
    steps: int
    trajectory: list[np.ndarray] = field(default_factory=list)

    @property
    def success(self) -> bool:
        return self.flag_task == 1 and self.flag_safe == 1


@dataclass
class EvalResult:
    mean_reward: float
    success_rate: float
    collision_rate: float
    episodes: list[EpisodeResult]


def run_episode(env: ReachEnv, scene: Scene, start_q, policy, keep_trajectory: bool = False) -> EpisodeResult:
    """Roll a deterministic policy (obs array -> action) for one episode."""
    obs = env.reset(scene, start_q).to_array()
    total = 0.0
    traj = []
    steps = 0
    while True:
        out = env.step(policy(obs))
        total += out.reward
        steps += 1
        if keep_trajectory:
            traj.append(out.q)
        obs = out.observation.to_array()
        if out.terminated or out.truncated:
            return EpisodeResult(total, out.flags[0], out.flags[1], steps, traj)


def evaluate(params: PolicyParams, task: Task, scenes: list[Scene]) -> EvalResult:
    env = ReachEnv(task.model, task.env_config)
    policy = lambda o: deterministic_action(o, params)  # noqa: E731
    eps = [run_episode(env, s, task.start_q, policy) for s in scenes]
    return EvalResult(
        mean_reward=float(np.mean([e.total_reward for e in eps])),
        success_rate=float(np.mean([e.success for e in eps])),
        collision_rate=float(np.mean([e.flag_safe == 0 for e in eps])),
        episodes=eps,
    )


class CheckpointSeries:
    """ckpt_<step>.tfck files plus reward_curve.csv; exactly one marked best."""

    def __init__(self, out_dir: str | Path):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.curve_path = self.dir / "reward_curve.csv"
        with open(self.curve_path, "w", newline="") as fh:
            csv.writer(fh).writerow(CURVE_COLUMNS)
        self.best_path: Path | None = None
        self.best_reward = -math.inf
        self.paths: list[Path] = []

    def record(self, ckpt: PolicyCheckpoint, ev: EvalResult) -> Path:
        with open(self.curve_path, "a", newline="") as fh:
            csv.writer(fh).writerow(
                [ckpt.global_step, repr(ev.mean_reward), repr(ev.success_rate), repr(ev.collision_rate)]
            )
        path = self.dir / f"ckpt_{ckpt.global_step:09d}.tfck"
        improved = ev.mean_reward > self.best_reward
        ckpt.is_best = improved
        save_checkpoint(ckpt, path)
        if improved:
            if self.best_path is not None and self.best_path != path:
                prev = load_checkpoint(self.best_path)
                prev.is_best = False
                save_checkpoint(prev, self.best_path)
            self.best_path = path
            self.best_reward = ev.mean_reward
        self.paths.append(path)
        return path


@dataclass
class CurvePoint:
    global_step: int
    mean_eval_reward: float
    success_rate: float
    collision_rate: float


@dataclass
class TrainResult:
    best_checkpoint: Path
    best_reward: float
    final_params: PolicyParams
    curve: list[CurvePoint]
    checkpoints: list[Path]
    updates: int


class _Runner:
    """Owns the rollout state shared by train() and resume_training()."""

    def __init__(self, task: Task, cfg: LearnerConfig, params: PolicyParams, opt: AdamState, global_step: int, stream: int):
        self.task = task
        self.cfg = cfg
        self.params = params
        self.opt = opt
        self.global_step = global_step
        ss = np.random.SeedSequence([cfg.seed, stream])
        env_seed, act_seed, upd_seed = ss.generate_state(3)
        self.env = task.make_env(int(env_seed))
        self.rng_act = np.random.default_rng(act_seed)
        self.rng_upd = np.random.default_rng(upd_seed)
        self.buffer = RolloutBuffer(cfg.n_steps, OBS_DIM, ACT_DIM)
        self.settings = cfg.ppo_settings(task.env_config.gamma)
        self.obs = self.env.reset()
        self.eval_scenes = task.eval_scenes(cfg.eval_episodes)
        self.updates = 0

    def rollout_and_update(self) -> dict[str, float]:
        buf = self.buffer
        buf.reset()
        while not buf.full:
            sample = act(self.obs, self.params, self.rng_act)
            next_obs, reward, terminated, truncated, _ = self.env.step(sample.action)
            boot = value(next_obs, self.params) if truncated else 0.0
            buf.add(self.obs, sample.u, sample.log_prob, sample.value, reward, terminated, truncated, boot)
            self.obs = self.env.reset() if (terminated or truncated) else next_obs
        buf.last_value = value(self.obs, self.params)
        self.global_step += buf.size
        _, stats = ppo_update(buf, self.params, self.opt, self.settings, self.rng_upd)
        self.updates += 1
        return stats

    def fit_normalizer(self, n_steps: int) -> None:
        """Freeze input normalisation from ``n_steps`` of untrained-policy play.

        These steps are counted in ``global_step`` but never trained on.
        """
        rows = []
        for _ in range(n_steps):
            rows.append(self.obs)
            sample = act(self.obs, self.params, self.rng_act)
            next_obs, _, terminated, truncated, _ = self.env.step(sample.action)
            self.obs = self.env.reset() if (terminated or truncated) else next_obs
        data = np.asarray(rows)
        self.params.set_normalizer(data.mean(axis=0), data.std(axis=0))
        self.global_step += n_steps

    def evaluate(self) -> EvalResult:
        return evaluate(self.params, self.task, self.eval_scenes)

    def snapshot(self, ev: EvalResult, meta: dict) -> PolicyCheckpoint:
        return PolicyCheckpoint(
            params=self.params.copy(),
            opt=self.opt.copy(),
            global_step=self.global_step,
            mean_eval_reward=ev.mean_reward,
            success_rate=ev.success_rate,
            meta=meta,
        )


def _point(step: int, ev: EvalResult) -> CurvePoint:
    return CurvePoint(step, ev.mean_reward, ev.success_rate, ev.collision_rate)


def train(task: Task, config: LearnerConfig, out_dir: str | Path, params: PolicyParams | None = None) -> TrainResult:
    """Pretrain from scratch for at most ``total_steps`` environment steps,
    normalizer warm-up included.

    Evaluates on ``eval_episodes`` fixed-seed scenes at step 0 and every
    ``eval_interval`` steps, writing one checkpoint per evaluation.
    """
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0]))
    fresh = params is None
    if fresh:
        params = init_params(OBS_DIM, ACT_DIM, config.hidden, rng, task.env_config.a_max, config.log_std_init)
    runner = _Runner(task, config, params, AdamState.zeros_like(params), 0, stream=1)
    if fresh and config.norm_steps > 0:
        runner.fit_normalizer(config.norm_steps)
    series = CheckpointSeries(out_dir)
    meta = {"phase": "pretrain", "seed": config.seed}

    ev = runner.evaluate()
    series.record(runner.snapshot(ev, meta), ev)
    curve = [_point(0, ev)]
    # whole rollouts only; never overrun the budget
    n_rollouts = max(0, config.total_steps - runner.global_step) // config.n_steps
    next_eval = config.eval_interval
    for i in range(n_rollouts):
        stats = runner.rollout_and_update()
        last = i == n_rollouts - 1
        if runner.global_step >= next_eval or last:
            while next_eval <= runner.global_step:
                next_eval += config.eval_interval
            ev = runner.evaluate()
            series.record(runner.snapshot(ev, meta), ev)
            curve.append(_point(runner.global_step, ev))
            log.info(
                "step %d reward %.4f success %.2f collision %.2f kl %.4f",
                runner.global_step, ev.mean_reward, ev.success_rate, ev.collision_rate, stats["approx_kl"],
            )
    return TrainResult(series.best_path, series.best_reward, runner.params, curve, series.paths, runner.updates)


@dataclass
class ResumeResult:
    best_checkpoint: Path
    steps_used: int
    first_eval_reward: float
    start_step: int
    converged: bool
    curve: list[CurvePoint]
    final_params: PolicyParams


def plateau_reached(rewards: list[float], window: int, eps: float, patience: int) -> bool:
    """True when the trailing moving average moved by < eps for ``patience`` evaluations."""
    if len(rewards) < patience + 1:
        return False
    ma = [float(np.mean(rewards[max(0, k - window + 1) : k + 1])) for k in range(len(rewards))]
    deltas = [abs(ma[k] - ma[k - 1]) for k in range(len(ma) - patience, len(ma))]
    return all(d < eps for d in deltas)


def resume_training(
    best_checkpoint: str | Path | PolicyCheckpoint,
    task: Task,
    config: LearnerConfig,
    out_dir: str | Path,
) -> ResumeResult:
    """Continue PPO from a checkpoint on a (possibly changed) task until the
    reward plateaus and the success rate meets ``success_target``."""
    ckpt = best_checkpoint if isinstance(best_checkpoint, PolicyCheckpoint) else load_checkpoint(best_checkpoint)
    params = ckpt.params.copy()
    opt = ckpt.opt.copy()
    start = int(ckpt.global_step)
    runner = _Runner(task, config, params, opt, start, stream=2)
    series = CheckpointSeries(out_dir)
    meta = {"phase": "resume", "seed": config.seed, "resumed_from_step": start}

    ev = runner.evaluate()
    series.record(runner.snapshot(ev, meta), ev)
    first_reward = ev.mean_reward
    curve = [_point(start, ev)]
    rewards = [ev.mean_reward]
    next_eval = start + config.resume_eval_interval

    def result(converged: bool) -> ResumeResult:
        return ResumeResult(
            series.best_path, runner.global_step - start, first_reward, start, converged, curve, runner.params
        )

    while True:
        if plateau_reached(rewards, config.plateau_window, config.plateau_eps, config.patience) and (
            curve[-1].success_rate >= config.success_target
        ):
            log.info("resume converged after %d steps", runner.global_step - start)
            return result(True)
        if runner.global_step - start >= config.max_resume_steps:
            raise NoConvergence(
                f"no convergence within {config.max_resume_steps} resume steps", result(False)
            )
        while runner.global_step < next_eval:
            runner.rollout_and_update()
        next_eval += config.resume_eval_interval
        ev = runner.evaluate()
        series.record(runner.snapshot(ev, meta), ev)
        curve.append(_point(runner.global_step, ev))
        rewards.append(ev.mean_reward)
        log.info(
            "resume step %d reward %.4f success %.2f collision %.2f",
            runner.global_step, ev.mean_reward, ev.success_rate, ev.collision_rate,
        )
