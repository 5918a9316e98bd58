"""Actor-critic MLPs with a tanh-squashed Gaussian action head.

Both networks are ``obs -> tanh(hidden) -> tanh(hidden) -> out`` in float64,
with hand-written backward passes so PPO needs no autodiff framework.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class NonFinite(FloatingPointError):
    """Raised when the network produces NaN/inf (diverged training)."""


ACTOR_KEYS = ("pi_w0", "pi_b0", "pi_w1", "pi_b1", "pi_w2", "pi_b2")
CRITIC_KEYS = ("vf_w0", "vf_b0", "vf_w1", "vf_b1", "vf_w2", "vf_b2")
PARAM_KEYS = ACTOR_KEYS + ("log_std",) + CRITIC_KEYS


NORM_KEYS = ("obs_mean", "obs_std")


@dataclass
class PolicyParams:
    """Trainable arrays plus frozen input-normalisation constants."""

    arrays: dict[str, np.ndarray]
    a_max: float = 0.05

    def __getitem__(self, key: str) -> np.ndarray:
        return self.arrays[key]

    @property
    def obs_dim(self) -> int:
        return self.arrays["pi_w0"].shape[0]

    @property
    def act_dim(self) -> int:
        return self.arrays["log_std"].shape[0]

    def copy(self) -> "PolicyParams":
        return PolicyParams({k: v.copy() for k, v in self.arrays.items()}, self.a_max)

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.arrays["obs_mean"]) / self.arrays["obs_std"]

    def set_normalizer(self, mean: np.ndarray, std: np.ndarray, floor: float = 1e-2) -> None:
        self.arrays["obs_mean"] = np.asarray(mean, dtype=np.float64).copy()
        self.arrays["obs_std"] = np.maximum(np.asarray(std, dtype=np.float64), floor)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.arrays[k].ravel() for k in PARAM_KEYS])

    def with_flat(self, vec: np.ndarray) -> "PolicyParams":
        out, i = {k: self.arrays[k].copy() for k in NORM_KEYS}, 0
        for k in PARAM_KEYS:
            shape = self.arrays[k].shape
            n = int(np.prod(shape))
            out[k] = np.asarray(vec[i : i + n], dtype=np.float64).reshape(shape).copy()
            i += n
        return PolicyParams(out, self.a_max)

    def clamp_log_std(self) -> None:
        np.clip(self.arrays["log_std"], LOG_STD_MIN, LOG_STD_MAX, out=self.arrays["log_std"])


def _orthogonal(rng: np.random.Generator, n_in: int, n_out: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if n_in < n_out:
        q = q.T
    return gain * q[:n_in, :n_out]


def init_params(
    obs_dim: int,
    act_dim: int,
    hidden: int,
    rng: np.random.Generator,
    a_max: float = 0.05,
    log_std_init: float = 0.0,
) -> PolicyParams:
    g = math.sqrt(2.0)
    arrays = {
        "pi_w0": _orthogonal(rng, obs_dim, hidden, g),
        "pi_b0": np.zeros(hidden),
        "pi_w1": _orthogonal(rng, hidden, hidden, g),
        "pi_b1": np.zeros(hidden),
        "pi_w2": _orthogonal(rng, hidden, act_dim, 0.01),
        "pi_b2": np.zeros(act_dim),
        "log_std": np.full(act_dim, float(log_std_init)),
        "vf_w0": _orthogonal(rng, obs_dim, hidden, g),
        "vf_b0": np.zeros(hidden),
        "vf_w1": _orthogonal(rng, hidden, hidden, g),
        "vf_b1": np.zeros(hidden),
        "vf_w2": _orthogonal(rng, hidden, 1, 1.0),
        "vf_b2": np.zeros(1),
        "obs_mean": np.zeros(obs_dim),
        "obs_std": np.ones(obs_dim),
    }
    return PolicyParams(arrays, a_max)


def mlp_forward(p: PolicyParams, prefix: str, x: np.ndarray):
    x = p.normalize(x)
    h1 = np.tanh(x @ p[f"{prefix}_w0"] + p[f"{prefix}_b0"])
    h2 = np.tanh(h1 @ p[f"{prefix}_w1"] + p[f"{prefix}_b1"])
    out = h2 @ p[f"{prefix}_w2"] + p[f"{prefix}_b2"]
    return out, (x, h1, h2)


def mlp_backward(p: PolicyParams, prefix: str, cache, dout: np.ndarray) -> dict[str, np.ndarray]:
    x, h1, h2 = cache
    grads = {f"{prefix}_w2": h2.T @ dout, f"{prefix}_b2": dout.sum(axis=0)}
    dz2 = (dout @ p[f"{prefix}_w2"].T) * (1.0 - h2 * h2)
    grads[f"{prefix}_w1"] = h1.T @ dz2
    grads[f"{prefix}_b1"] = dz2.sum(axis=0)
    dz1 = (dz2 @ p[f"{prefix}_w1"].T) * (1.0 - h1 * h1)
    grads[f"{prefix}_w0"] = x.T @ dz1
    grads[f"{prefix}_b0"] = dz1.sum(axis=0)
    return grads


def gaussian_log_prob(u: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    z = (u - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - _HALF_LOG_2PI, axis=-1)


def squash_correction(u: np.ndarray, a_max: float) -> np.ndarray:
    """sum log |d action / d u| for action = a_max * tanh(u), computed stably."""
    log_deriv = 2.0 * (math.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))
    return np.sum(log_deriv + math.log(a_max), axis=-1)


def squashed_log_prob(u: np.ndarray, mean: np.ndarray, log_std: np.ndarray, a_max: float) -> np.ndarray:
    return gaussian_log_prob(u, mean, log_std) - squash_correction(u, a_max)


def entropy(log_std: np.ndarray) -> float:
    """Entropy of the pre-squash Gaussian."""
    return float(np.sum(log_std + 0.5 + _HALF_LOG_2PI))


class ActSample(NamedTuple):
    action: np.ndarray
    log_prob: float
    value: float
    u: np.ndarray  # pre-squash sample, kept for exact ratio evaluation


def act(obs, params: PolicyParams, rng: np.random.Generator) -> ActSample:
    """Sample an action; log_prob is the density of the squashed action."""
    x = np.asarray(obs, dtype=np.float64)
    mean, _ = mlp_forward(params, "pi", x)
    value, _ = mlp_forward(params, "vf", x)
    log_std = params["log_std"]
    u = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
    logp = float(squashed_log_prob(u, mean, log_std, params.a_max))
    v = float(value[0])
    if not (np.all(np.isfinite(u)) and math.isfinite(logp) and math.isfinite(v)):
        raise NonFinite("policy produced a non-finite output")
    return ActSample(params.a_max * np.tanh(u), logp, v, u)


def deterministic_action(obs, params: PolicyParams) -> np.ndarray:
    mean, _ = mlp_forward(params, "pi", np.asarray(obs, dtype=np.float64))
    if not np.all(np.isfinite(mean)):
        raise NonFinite("policy produced a non-finite output")
    return params.a_max * np.tanh(mean)


def value(obs, params: PolicyParams) -> float:
    v, _ = mlp_forward(params, "vf", np.asarray(obs, dtype=np.float64))
    return float(v[..., 0]) if np.ndim(v) == 1 else v[..., 0]
