"""Router training machinery: epsilon schedule, epsilon-greedy selection, and
the single-step Q loss. No bootstrapping, no replay, no target network: the
reward arrives immediately after each routing decision, so the router is a
contextual bandit learner."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn import Array


@dataclass
class EpsilonSchedule:
    """Exponentially decaying exploration rate, advanced once per training step.

    The decay constant here is a schedule knob, distinct from the reward
    scale that happens to use the same Greek letter elsewhere.
    """
    eps_min: float = 0.1
    eps_max: float = 1.0
    decay_lambda: float = 0.001
    step: int = 0

    def value(self) -> float:
        return epsilon(self, self.step)

    def advance(self) -> None:
        self.step += 1


def epsilon(schedule: EpsilonSchedule, t: int) -> float:
    """eps_min + (eps_max - eps_min) * exp(-decay_lambda * t)."""
    if t < 0:
        raise ValueError(f"step must be >= 0, got {t}")
    return schedule.eps_min + (schedule.eps_max - schedule.eps_min) * math.exp(
        -schedule.decay_lambda * t)


def select_actions(q_logits: Array, eps: float,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample epsilon-greedy pick over the action logits.

    Returns (actions, explored). Exploration is an independent Bernoulli(eps)
    per sample with a uniform random action; otherwise argmax with ties
    broken toward the lowest index.
    """
    if not 0.0 <= eps <= 1.0:
        raise ValueError(f"epsilon must lie in [0,1], got {eps}")
    n, n_actions = q_logits.shape
    explored = rng.random(n) < eps
    random_actions = rng.integers(0, n_actions, size=n)
    greedy = q_logits.argmax(axis=1)
    actions = np.where(explored, random_actions, greedy)
    return actions.astype(np.int64), explored


def router_loss_and_grads(q_logits: Array, actions: np.ndarray,
                          reward_value) -> tuple[float, Array]:
    """Squared error between the reward and each chosen action's logit.

    loss = sum_b (r_b - q[b, a_b])^2, with d/dq on the chosen logit only.
    reward_value may be a scalar (one reward shared by the whole minibatch)
    or a per-sample vector. Returns (loss, dq_logits); the caller feeds
    dq_logits through the router network so gradients stay isolated there.
    """
    n = q_logits.shape[0]
    rows = np.arange(n)
    chosen = q_logits[rows, actions]
    r = np.broadcast_to(np.asarray(reward_value, dtype=np.float64), (n,))
    diff = chosen - r
    loss = float(np.square(diff).sum())
    dq = np.zeros_like(q_logits)
    dq[rows, actions] = 2.0 * diff
    return loss, dq


def rir_select(batch_size: int, num_modules: int,
               rng: np.random.Generator) -> np.ndarray:
    """Uniform random routing (the ablation that replaces the learned router)."""
    return rng.integers(0, num_modules, size=batch_size).astype(np.int64)
