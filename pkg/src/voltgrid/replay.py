"""Prioritized experience replay: ring storage over flat numpy arrays and
a sum tree holding priority**alpha for proportional sampling.
"""

from __future__ import annotations

import numpy as np


class SumTree:
    """Array-backed binary sum tree over a power-of-two leaf span.

    Leaves live at [span, span + capacity); internal node k holds the sum
    of its two children, so the root is the total mass and prefix-sum
    descent finds the leaf covering a sampled mass in O(log n).
    """

    def __init__(self, capacity: int):
        span = 1
        while span < capacity:
            span *= 2
        self.capacity = capacity
        self.span = span
        self.tree = np.zeros(2 * span)

    def __setitem__(self, index: int, value: float) -> None:
        k = self.span + index
        delta = value - self.tree[k]
        while k >= 1:
            self.tree[k] += delta
            k //= 2

    def __getitem__(self, index: int) -> float:
        return float(self.tree[self.span + index])

    def total(self) -> float:
        return float(self.tree[1])

    def find_prefix(self, mass: float) -> int:
        """Smallest leaf index whose cumulative mass exceeds `mass`."""
        k = 1
        while k < self.span:
            left = 2 * k
            if mass < self.tree[left]:
                k = left
            else:
                mass -= self.tree[left]
                k = left + 1
        return min(k - self.span, self.capacity - 1)


class PrioritizedReplayBuffer:
    """Ring buffer of transitions sampled proportionally to priority**alpha.

    New transitions enter at the maximum priority seen so far (1.0 until
    anything larger appears) so they are replayed at least once before
    their TD error takes over.
    """

    def __init__(self, capacity: int, obs_dim: int, alpha: float,
                 rng: np.random.Generator):
        if alpha < 0:
            raise ValueError("alpha must be >= 0")
        self.capacity = capacity
        self.alpha = alpha
        self.rng = rng
        self.obs = np.zeros((capacity, obs_dim))
        self.next_obs = np.zeros((capacity, obs_dim))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.dones = np.zeros(capacity, dtype=bool)
        self.tree = SumTree(capacity)
        self.size = 0
        self.next_idx = 0
        self.max_priority = 1.0

    def __len__(self) -> int:
        return self.size

    def add(self, obs: np.ndarray, action: int, reward: float,
            next_obs: np.ndarray, done: bool) -> None:
        i = self.next_idx
        self.obs[i] = obs
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_obs[i] = next_obs
        self.dones[i] = done
        self.tree[i] = self.max_priority ** self.alpha
        self.next_idx = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, beta: float) -> dict:
        """Proportional draw of batch_size transitions with importance
        weights (N * P(i)) ** -beta, normalized by the batch maximum."""
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        total = self.tree.total()
        masses = self.rng.random(batch_size) * total
        indices = np.array([self.tree.find_prefix(m) for m in masses],
                           dtype=np.int64)
        probs = np.array([self.tree[i] for i in indices]) / total
        weights = (self.size * probs) ** (-beta)
        weights = weights / weights.max()
        return {
            "obs": self.obs[indices],
            "actions": self.actions[indices],
            "rewards": self.rewards[indices],
            "next_obs": self.next_obs[indices],
            "dones": self.dones[indices],
            "indices": indices,
            "weights": weights,
        }

    def update_priorities(self, indices: np.ndarray,
                          priorities: np.ndarray) -> None:
        for i, p in zip(indices, priorities):
            if p <= 0:
                raise ValueError("priorities must be positive")
            self.tree[int(i)] = p ** self.alpha
            self.max_priority = max(self.max_priority, float(p))

    def state_dict(self) -> dict:
        return {
            "obs": self.obs.copy(), "next_obs": self.next_obs.copy(),
            "actions": self.actions.copy(), "rewards": self.rewards.copy(),
            "dones": self.dones.copy(), "tree": self.tree.tree.copy(),
            "size": self.size, "next_idx": self.next_idx,
            "max_priority": self.max_priority,
        }

    def load_state_dict(self, state: dict) -> None:
        self.obs[...] = state["obs"]
        self.next_obs[...] = state["next_obs"]
        self.actions[...] = state["actions"]
        self.rewards[...] = state["rewards"]
        self.dones[...] = state["dones"]
        self.tree.tree[...] = state["tree"]
        self.size = state["size"]
        self.next_idx = state["next_idx"]
        self.max_priority = state["max_priority"]
