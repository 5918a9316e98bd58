"""Command-line entry points.

Exit codes:
    0  success
    1  I/O error (missing config, unreadable or malformed input)
    2  pretraining missed its success target, or training diverged
    3  plant could not bind its endpoint
    4  retraining did not converge during a session
    5  protocol violation or plant-side failure
    6  plant unreachable
    7  session ended early for another reason (e.g. retrain limit)
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from twinforge.config import NO_PERTURBATION, RunConfig, load_config
from twinforge.env import DEFAULT_START_Q
from twinforge.kinematics import reference_arm
from twinforge.learner.checkpoint import CheckpointError, load_checkpoint
from twinforge.learner.policy import NonFinite
from twinforge.learner.train import evaluate, reference_task, train
from twinforge.orchestrator.plant import PerturbationSchedule, PlantConfig, run_plant
from twinforge.orchestrator.protocol import PlantUnreachable
from twinforge.orchestrator.runner import run_session
from twinforge.orchestrator.session import SessionLog
from twinforge.orchestrator.transport import Link, accept, connect, listen
from twinforge.orchestrator.twin import CheckpointPolicyStore, OrchestratorConfig, StubPolicyStore, orchestrate
from twinforge.world import Scene, load_scene

log = logging.getLogger("twinforge")

EXIT_OK, EXIT_IO, EXIT_TRAIN, EXIT_BIND, EXIT_RETRAIN, EXIT_PROTOCOL, EXIT_UNREACHABLE, EXIT_ABORTED = range(8)
SESSION_EXIT = {"no_convergence": EXIT_RETRAIN, "protocol": EXIT_PROTOCOL, "non_finite": EXIT_TRAIN}
REFERENCE_CHECKPOINT = "reference_policy.tfck"
REFERENCE_SCENE = "reference_scene.json"


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def packaged(name: str) -> Path:
    return Path(str(resources.files("twinforge.data").joinpath(name)))


def _height(text: str) -> float:
    """Accepts ``2``, ``2.0`` or ``2x``."""
    try:
        return float(text[:-1] if text.lower().endswith("x") else text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"invalid height factor {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config (default: $TWINFORGE_CONFIG)")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--log-level", default="WARNING", help="logging level (default WARNING)")

    perturb = argparse.ArgumentParser(add_help=False)
    perturb.add_argument("--perturb-episode", type=int, help="episode at which the obstacle grows (-1: never)")
    perturb.add_argument("--perturb-height", type=_height, help="height factor, e.g. 2 or 2x")
    perturb.add_argument("--episodes", type=int, help="number of plant episodes")
    perturb.add_argument("--scene", help="true scene JSON (default: packaged reference scene)")

    parser = argparse.ArgumentParser(prog="twinforge", description="Digital-twin RL reach-and-avoid pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", parents=[common], help="train a policy on small-obstacle scenes")
    p.add_argument("--total-steps", type=int, help="override learner.total_steps")

    p = sub.add_parser("serve-plant", parents=[common, perturb], help="run the simulated plant")
    p.add_argument("--endpoint", help="host:port to listen on")

    p = sub.add_parser("run", parents=[common, perturb], help="run the twin-gated control session")
    p.add_argument("--endpoint", help="plant host:port")
    p.add_argument("--checkpoint", help="pretrained checkpoint (default: packaged reference)")
    p.add_argument("--loopback", action="store_true", help="run the plant in-process over queues")
    p.add_argument("--socket", action="store_true", help="run the plant in-process over a local TCP socket")
    p.add_argument("--stub", action="store_true", help="scripted policy and trainer; no learning")

    p = sub.add_parser("evaluate", parents=[common], help="evaluate a checkpoint on fixed scenes")
    p.add_argument("--checkpoint", help="checkpoint file (default: packaged reference)")
    p.add_argument("--episodes", type=int, default=50)
    p.add_argument("--height-scale", type=_height, default=1.0)

    p = sub.add_parser("report", parents=[common], help="merge reward curves and summarise a session")
    p.add_argument("--session", help="session_log.jsonl")
    p.add_argument("--pretrain-curve", help="reward_curve.csv of pretraining")
    p.add_argument("--retrain-curve", help="reward_curve.csv of retraining")
    return parser


def resolve(args: argparse.Namespace) -> RunConfig:
    try:
        cfg = load_config(args.config)
    except FileNotFoundError as exc:
        raise CliError(EXIT_IO, str(exc)) from exc
    except (ValueError, TypeError) as exc:
        raise CliError(EXIT_IO, f"invalid config: {exc}") from exc
    doc = cfg.to_dict()
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.out is not None:
        doc["out"] = args.out
    orch = doc["orchestrator"]
    for flag, key in (("perturb_episode", "perturb_episode"), ("perturb_height", "perturb_height"),
                      ("episodes", "n_episodes"), ("scene", "scene"), ("endpoint", "endpoint"),
                      ("checkpoint", "checkpoint")):
        val = getattr(args, flag, None)
        if val is not None and not (args.command == "evaluate" and flag == "episodes"):
            orch[key] = val
    if getattr(args, "total_steps", None) is not None:
        doc["learner"]["total_steps"] = args.total_steps
    return RunConfig.from_dict(doc)


def _echo(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    try:
        cfg.dump(out / "config.toml")
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write to {out}: {exc}") from exc
    return out


def _checkpoint_path(cfg: RunConfig) -> Path:
    path = Path(cfg.orchestrator.checkpoint) if cfg.orchestrator.checkpoint else packaged(REFERENCE_CHECKPOINT)
    if not path.is_file():
        raise CliError(EXIT_IO, f"checkpoint not found: {path}")
    return path


def _true_scene(cfg: RunConfig) -> Scene:
    path = Path(cfg.orchestrator.scene) if cfg.orchestrator.scene else packaged(REFERENCE_SCENE)
    try:
        return load_scene(path)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(EXIT_IO, f"cannot load scene {path}: {exc}") from exc


def _schedule(cfg: RunConfig) -> PerturbationSchedule:
    k = cfg.orchestrator.perturb_episode
    return PerturbationSchedule.single(None if k == NO_PERTURBATION else k, cfg.orchestrator.perturb_height)


def _plant_config(cfg: RunConfig) -> PlantConfig:
    return PlantConfig(
        n_episodes=cfg.orchestrator.n_episodes,
        camera=cfg.perception.camera(),
        calibration=cfg.perception.calibration(),
        env=cfg.env,
        seed=cfg.seed,
    )


def cmd_pretrain(args, cfg: RunConfig) -> int:
    out = _echo(cfg)
    lcfg = cfg.learner_config()
    try:
        res = train(reference_task(cfg.env, cfg.world), lcfg, out)
    except NonFinite as exc:
        raise CliError(EXIT_TRAIN, f"training diverged: {exc}") from exc
    best = load_checkpoint(res.best_checkpoint)
    summary = {
        "best_checkpoint": str(res.best_checkpoint),
        "best_step": best.global_step,
        "best_reward": best.mean_eval_reward,
        "best_success_rate": best.success_rate,
        "final_success_rate": res.curve[-1].success_rate,
    }
    print(json.dumps(summary, indent=2))
    if lcfg.total_steps > 0 and best.success_rate < lcfg.success_target:
        raise CliError(EXIT_TRAIN, f"success rate {best.success_rate:.2f} below target {lcfg.success_target}")
    return EXIT_OK


def cmd_serve_plant(args, cfg: RunConfig) -> int:
    out = _echo(cfg)
    scene = _true_scene(cfg)
    try:
        server = listen(cfg.orchestrator.endpoint)
    except (OSError, ValueError) as exc:
        raise CliError(EXIT_BIND, f"cannot bind {cfg.orchestrator.endpoint}: {exc}") from exc
    log.info("plant listening on %s", cfg.orchestrator.endpoint)
    try:
        chan = accept(server, cfg.orchestrator.timeout)
    except OSError as exc:
        raise CliError(EXIT_PROTOCOL, f"no twin connected: {exc}") from exc
    finally:
        server.close()
    try:
        plog = run_plant(Link(chan, cfg.orchestrator.timeout), reference_arm(), scene, _schedule(cfg), _plant_config(cfg))
    finally:
        chan.close()
    doc = {
        "end_reason": plog.end_reason,
        "schedule": [[k, {"height": m.height, "width": m.width}] for k, m in _schedule(cfg).events],
        "episodes": [vars(e) for e in plog.episodes],
    }
    (out / "plant_log.json").write_text(json.dumps(doc, indent=2))
    return EXIT_OK if plog.end_reason == "complete" else EXIT_PROTOCOL


def _store(args, cfg: RunConfig, out: Path):
    if args.stub:
        k = cfg.orchestrator.perturb_episode
        return StubPolicyStore(break_at=None if k == NO_PERTURBATION else k)
    return CheckpointPolicyStore(_checkpoint_path(cfg), out, cfg.learner_config(), env_config=cfg.env)


def cmd_run(args, cfg: RunConfig) -> int:
    out = _echo(cfg)
    store = _store(args, cfg, out)
    ocfg = OrchestratorConfig(jitter=cfg.orchestrator.jitter, max_retrains=cfg.orchestrator.max_retrains, seed=cfg.seed)
    if args.loopback or args.socket:
        result = run_session(
            store, _true_scene(cfg), _schedule(cfg), _plant_config(cfg), ocfg,
            mode="loopback" if args.loopback else "socket", timeout=cfg.orchestrator.timeout,
        )
        slog = result.session
    else:
        try:
            chan = connect(cfg.orchestrator.endpoint, cfg.orchestrator.connect_retries, cfg.orchestrator.backoff)
        except PlantUnreachable as exc:
            SessionLog(status="unreachable", end_reason=str(exc)).save(out / "session_log.jsonl")
            raise CliError(EXIT_UNREACHABLE, str(exc)) from exc
        link = Link(chan, cfg.orchestrator.timeout)
        try:
            slog = orchestrate(link, store, ocfg, env_config=cfg.env)
        finally:
            link.close()
    slog.save(out / "session_log.jsonl")
    print(json.dumps({
        "status": slog.status,
        "end_reason": slog.end_reason,
        "episodes": len(slog.records),
        "published": slog.published,
        "retrains": slog.retrains,
        "learner_invocations": 0 if args.stub else store.retrain_calls,
    }, indent=2))
    if slog.status in SESSION_EXIT:
        raise CliError(SESSION_EXIT[slog.status], slog.end_reason)
    complete = slog.status == "complete" and slog.published == cfg.orchestrator.n_episodes
    if not complete:
        raise CliError(EXIT_ABORTED, f"session ended early: {slog.end_reason}")
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig) -> int:
    out = _echo(cfg)
    try:
        ckpt = load_checkpoint(_checkpoint_path(cfg))
    except (OSError, CheckpointError) as exc:
        raise CliError(EXIT_IO, str(exc)) from exc
    task = reference_task(cfg.env, cfg.world, args.height_scale)
    ev = evaluate(ckpt.params, task, task.eval_scenes(args.episodes))
    doc = {
        "checkpoint_step": ckpt.global_step,
        "height_scale": args.height_scale,
        "episodes": args.episodes,
        "mean_reward": ev.mean_reward,
        "success_rate": ev.success_rate,
        "collision_rate": ev.collision_rate,
    }
    (out / "evaluation.json").write_text(json.dumps(doc, indent=2))
    print(json.dumps(doc, indent=2))
    return EXIT_OK


def read_curve(path: str | Path) -> list[dict]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return [
            {"global_step": int(r["global_step"]), "mean_eval_reward": float(r["mean_eval_reward"]),
             "success_rate": float(r["success_rate"]), "collision_rate": float(r["collision_rate"])}
            for r in rows
        ]
    except (OSError, KeyError, ValueError, TypeError) as exc:
        raise CliError(EXIT_IO, f"malformed reward curve {path}: {exc}") from exc


def merge_curves(pre: list[dict], post: list[dict]) -> list[dict]:
    """Outer join on steps elapsed since each curve's first evaluation."""
    def by_elapsed(curve):
        if not curve:
            return {}
        s0 = curve[0]["global_step"]
        return {r["global_step"] - s0: r["mean_eval_reward"] for r in curve}

    a, b = by_elapsed(pre), by_elapsed(post)
    rows = []
    for step in sorted(set(a) | set(b)):
        ra, rb = a.get(step), b.get(step)
        diff = rb - ra if ra is not None and rb is not None else None
        rows.append({"elapsed_steps": step, "pretrain_reward": ra, "retrain_reward": rb, "difference": diff})
    return rows


def steps_to_target(curve: list[dict], target: float) -> int | None:
    if not curve:
        return None
    for r in curve:
        if r["success_rate"] >= target:
            return r["global_step"] - curve[0]["global_step"]
    return None


def summarize(slog: SessionLog, pre: list[dict], post: list[dict], target: float) -> dict:
    retrain_steps = sum(r.retrain_steps or 0 for r in slog.records)
    pretrain_steps = next((r.pretrain_steps for r in slog.records if r.pretrain_steps), None)
    ratio = retrain_steps / pretrain_steps if pretrain_steps else None
    return {
        "episodes": len(slog.records),
        "published": slog.published,
        "retrains": slog.retrains,
        "retrain_steps": retrain_steps,
        "pretrain_steps": pretrain_steps,
        "retrain_ratio": ratio,
        # a collision predicted on any attempt, including ones repaired by retraining
        "twin_predicted_collisions": sum(
            1 for r in slog.records if r.twin_flag_safe == 0 or r.retrain_reason == "Collision"
        ),
        "plant_collisions": sum(1 for r in slog.records if r.plant_flag_safe == 0),
        "twin_plant_agreement": sum(1 for r in slog.records if r.published and r.agrees),
        "pretrain_steps_to_target": steps_to_target(pre, target),
        "retrain_steps_to_target": steps_to_target(post, target),
    }


def cmd_report(args, cfg: RunConfig) -> int:
    out = _echo(cfg)
    try:
        slog = SessionLog.load(args.session) if args.session else SessionLog()
    except (OSError, ValueError) as exc:
        raise CliError(EXIT_IO, f"malformed session log {args.session}: {exc}") from exc
    pre = read_curve(args.pretrain_curve) if args.pretrain_curve else []
    post = read_curve(args.retrain_curve) if args.retrain_curve else []
    rows = merge_curves(pre, post)
    with open(out / "merged_curves.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["elapsed_steps", "pretrain_reward", "retrain_reward", "difference"])
        w.writeheader()
        w.writerows({k: ("" if v is None else v) for k, v in r.items()} for r in rows)
    summary = summarize(slog, pre, post, cfg.learner.success_target)
    text = "".join(f"{k}: {'n/a' if v is None else v}\n" for k, v in summary.items())
    (out / "summary.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


COMMANDS = {
    "pretrain": cmd_pretrain,
    "serve-plant": cmd_serve_plant,
    "run": cmd_run,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = getattr(logging, str(args.log_level).upper(), None)
    if not isinstance(level, int):
        print(f"twinforge: unknown log level {args.log_level!r}", file=sys.stderr)
        return EXIT_IO
    logging.basicConfig(level=level, stream=sys.stdout, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = resolve(args)
        return COMMANDS[args.command](args, cfg)
    except CliError as exc:
        print(f"twinforge {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
