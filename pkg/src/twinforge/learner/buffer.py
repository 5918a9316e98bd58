"""Fixed-capacity rollout storage and generalized advantage estimation."""
from __future__ import annotations

import numpy as np


class RolloutBuffer:
    def __init__(self, capacity: int, obs_dim: int, act_dim: int):
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.u = np.zeros((capacity, act_dim))
        self.log_probs = np.zeros(capacity)
        self.values = np.zeros(capacity)
        self.rewards = np.zeros(capacity)
        self.terminated = np.zeros(capacity, dtype=bool)
        self.truncated = np.zeros(capacity, dtype=bool)
        # V(s_final) for steps cut by the horizon; unused elsewhere
        self.bootstrap_values = np.zeros(capacity)
        self.last_value = 0.0
        self.size = 0

    @property
    def full(self) -> bool:
        return self.size == self.capacity

    def add(self, obs, u, log_prob, value, reward, terminated, truncated, bootstrap_value=0.0) -> None:
        if self.full:
            raise IndexError("rollout buffer is full")
        i = self.size
        self.obs[i] = obs
        self.u[i] = u
        self.log_probs[i] = log_prob
        self.values[i] = value
        self.rewards[i] = reward
        self.terminated[i] = terminated
        self.truncated[i] = truncated
        self.bootstrap_values[i] = bootstrap_value
        self.size += 1

    def reset(self) -> None:
        self.size = 0
        self.last_value = 0.0


def compute_gae(buffer: RolloutBuffer, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Return (advantages, returns) for the filled part of the buffer.

    Terminal steps bootstrap with 0, horizon-truncated steps with the stored
    value of the final observation, and the last step of an unfinished
    episode with ``buffer.last_value``. Advantages never flow across an
    episode boundary.
    """
    n = buffer.size
    adv = np.zeros(n)
    values = buffer.values[:n]
    running = 0.0
    for t in reversed(range(n)):
        if buffer.terminated[t]:
            next_v, cont = 0.0, 0.0
        elif buffer.truncated[t]:
            next_v, cont = buffer.bootstrap_values[t], 0.0
        elif t == n - 1:
            next_v, cont = buffer.last_value, 0.0
        else:
            next_v, cont = values[t + 1], 1.0
        delta = buffer.rewards[t] + gamma * next_v - values[t]
        running = delta + gamma * lam * cont * running
        adv[t] = running
    return adv, adv + values
