"""Clipped-surrogate PPO update with an Adam optimizer."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from twinforge.learner.buffer import RolloutBuffer, compute_gae
from twinforge.learner.policy import (
    PARAM_KEYS,
    NonFinite,
    PolicyParams,
    entropy,
    mlp_backward,
    mlp_forward,
    squashed_log_prob,
)


@dataclass
class Batch:
    obs: np.ndarray
    u: np.ndarray
    old_log_probs: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: PolicyParams) -> "AdamState":
        return cls(
            {k: np.zeros_like(params[k]) for k in PARAM_KEYS},
            {k: np.zeros_like(params[k]) for k in PARAM_KEYS},
        )

    def copy(self) -> "AdamState":
        return AdamState({k: a.copy() for k, a in self.m.items()}, {k: a.copy() for k, a in self.v.items()}, self.t)


def adam_step(
    params: PolicyParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-5,
) -> None:
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for k in PARAM_KEYS:
        g = grads[k]
        m = state.m[k]
        v = state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        params.arrays[k] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def loss_and_grad(
    params: PolicyParams,
    batch: Batch,
    clip_eps: float,
    vf_coef: float = 0.5,
    ent_coef: float = 0.0,
) -> tuple[float, dict[str, np.ndarray], dict[str, float]]:
    """Total PPO loss (to minimise) and its exact gradient.

    loss = -mean(min(rho*A, clip(rho, 1-eps, 1+eps)*A))
           + vf_coef * mean((V - R)^2) - ent_coef * entropy
    """
    n = batch.obs.shape[0]
    log_std = params["log_std"]
    mean, pi_cache = mlp_forward(params, "pi", batch.obs)
    vpred, vf_cache = mlp_forward(params, "vf", batch.obs)
    vpred = vpred[:, 0]

    logp = squashed_log_prob(batch.u, mean, log_std, params.a_max)
    log_ratio = logp - batch.old_log_probs
    ratio = np.exp(log_ratio)
    adv = batch.advantages
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    surrogate = np.minimum(unclipped, clipped)
    policy_loss = -float(np.mean(surrogate))
    value_err = vpred - batch.returns
    value_loss = float(np.mean(value_err**2))
    ent = entropy(log_std)
    loss = policy_loss + vf_coef * value_loss - ent_coef * ent
    if not np.isfinite(loss):
        raise NonFinite("PPO loss is not finite")

    # d loss / d logp: only samples on the unclipped branch carry gradient
    active = unclipped <= clipped
    dlogp = np.where(active, -adv * ratio, 0.0) / n
    inv_std = np.exp(-log_std)
    z = (batch.u - mean) * inv_std
    dmean = dlogp[:, None] * z * inv_std[None, :]
    dlog_std = np.sum(dlogp[:, None] * (z * z - 1.0), axis=0) - ent_coef
    dvalue = (2.0 * vf_coef / n) * value_err

    grads = mlp_backward(params, "pi", pi_cache, dmean)
    grads.update(mlp_backward(params, "vf", vf_cache, dvalue[:, None]))
    grads["log_std"] = dlog_std

    stats = {
        "policy_loss": policy_loss,
        "value_loss": value_loss,
        "entropy": ent,
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > clip_eps)),
        "approx_kl": float(np.mean((ratio - 1.0) - log_ratio)),
    }
    return loss, grads, stats


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads.values():
            g *= scale
    return total


@dataclass
class PPOSettings:
    clip_eps: float = 0.2
    epochs: int = 10
    minibatch: int = 64
    lr: float = 3e-4
    gamma: float = 0.99
    gae_lambda: float = 0.95
    vf_coef: float = 0.5
    ent_coef: float = 0.0
    max_grad_norm: float = 0.5
    normalize_advantages: bool = True


def ppo_update(
    buffer: RolloutBuffer,
    params: PolicyParams,
    opt: AdamState,
    settings: PPOSettings,
    rng: np.random.Generator,
) -> tuple[PolicyParams, dict[str, float]]:
    """Run ``epochs`` passes of shuffled minibatch updates over the buffer.

    ``params`` and ``opt`` are updated in place and ``params`` is returned
    for convenience together with epoch-averaged statistics.
    """
    adv, returns = compute_gae(buffer, settings.gamma, settings.gae_lambda)
    n = buffer.size
    totals: dict[str, float] = {}
    count = 0
    for _ in range(settings.epochs):
        order = rng.permutation(n)
        for start in range(0, n, settings.minibatch):
            idx = order[start : start + settings.minibatch]
            a = adv[idx]
            if settings.normalize_advantages and len(idx) > 1:
                a = (a - a.mean()) / (a.std() + 1e-8)
            batch = Batch(buffer.obs[idx], buffer.u[idx], buffer.log_probs[idx], a, returns[idx])
            _, grads, stats = loss_and_grad(params, batch, settings.clip_eps, settings.vf_coef, settings.ent_coef)
            clip_grad_norm(grads, settings.max_grad_norm)
            adam_step(params, grads, opt, settings.lr)
            params.clamp_log_std()
            for k, v in stats.items():
                totals[k] = totals.get(k, 0.0) + v
            count += 1
    if count:
        for k in totals:
            totals[k] /= count
    for k in PARAM_KEYS:
        if not np.all(np.isfinite(params[k])):
            raise NonFinite(f"parameter {k} became non-finite")
    return params, totals
