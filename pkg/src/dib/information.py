"""Information measures: per-batch joint Fisher approximation (the routing
reward), the empirical Fisher diagonal, and the quadratic consolidation
penalty with one anchor per completed task."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .data import LabeledSet
from .model import DibModel, ForwardTrace
from .nn import Array, Param, softmax_xent


@dataclass
class RewardScale:
    lambda_reward: float

    def __post_init__(self) -> None:
        if self.lambda_reward <= 0:
            raise ValueError(f"reward scale must be positive, got {self.lambda_reward}")


@dataclass
class FisherAnchor:
    """Frozen parameter snapshot plus its Fisher diagonal for one task."""
    task_id: int
    theta_star: dict[str, Array]
    fisher_diag: dict[str, Array]

    def __post_init__(self) -> None:
        for name, f in self.fisher_diag.items():
            if f.shape != self.theta_star[name].shape:
                raise ValueError(f"anchor shape mismatch for {name}")
            if f.min() < 0:
                raise ValueError(f"negative Fisher entry in {name}")


def joint_loglik_grads(model: DibModel, trace: ForwardTrace,
                       labels) -> dict[str, Array]:
    """Gradient of the summed minibatch log-likelihood restricted to the
    union of modules any sample activated, in scratch buffers.

    The mean cross-entropy gradient is (probs - onehot)/B per logit, so the
    summed log-likelihood gradient is simply onehot - probs pushed back
    through the same module paths. Model values and training gradient
    accumulators are never touched.
    """
    labels = np.asarray(labels)
    _, probs, _ = softmax_xent(trace.class_logits, labels)
    dlog = -probs
    dlog[np.arange(len(labels)), labels] += 1.0
    sinks: dict = {}
    model.backward_classification(trace, dlog, sinks=sinks)
    return {f"cell{ci}/module{mi}/{name}": g
            for (ci, mi), grads in sinks.items()
            for name, g in grads.items()}


def joint_fisher_batch(model: DibModel, trace: ForwardTrace, labels) -> float:
    """Mean squared joint log-likelihood gradient over the activated set.

    One scalar per minibatch: the squared gradients of every parameter in
    every activated module (across all cells), averaged over that parameter
    count.
    """
    grads = joint_loglik_grads(model, trace, labels)
    if not grads:
        raise ValueError("no activated modules in trace")
    total = sum(g.size for g in grads.values())
    return float(sum(np.square(g).sum() for g in grads.values()) / total)


def reward(j: float, scale: RewardScale) -> float:
    """Negative scaled information load; shared by every routing decision in
    the minibatch."""
    return -1.0 * scale.lambda_reward * j


def empirical_fisher_diag(model, dataset: LabeledSet, sample_count: int,
                          task_id: int | None = None,
                          rng: np.random.Generator | None = None) -> FisherAnchor:
    """Per-parameter mean squared single-sample log-likelihood gradient,
    with true labels, over sample_count samples; pairs the Fisher diagonal
    with a snapshot of the current values.

    For the routed model the per-sample gradient follows the path the
    task's memory nets select (the path inference will actually use), and
    covers module parameters only.
    """
    if sample_count <= 0:
        raise ValueError(f"sample_count must be positive, got {sample_count}")
    if sample_count > len(dataset):
        raise ValueError(f"sample_count {sample_count} exceeds dataset size {len(dataset)}")
    if rng is None:
        rng = np.random.default_rng(0)
    idx = (np.arange(len(dataset)) if sample_count == len(dataset)
           else rng.choice(len(dataset), size=sample_count, replace=False))
    params = dict(model.ewc_parameters())
    fisher = {name: np.zeros_like(p.value) for name, p in params.items()}
    for i in idx:
        g = model.loglik_grads_single(dataset.inputs[i:i + 1],
                                      int(dataset.labels[i]), task_id)
        for name, grad in g.items():
            fisher[name] += np.square(grad)
    for name in fisher:
        fisher[name] /= sample_count
    theta_star = {name: p.value.copy() for name, p in params.items()}
    return FisherAnchor(task_id if task_id is not None else -1, theta_star, fisher)


def ewc_penalty_and_grads(params: Mapping[str, Param],
                          anchors: list[FisherAnchor],
                          lambda_ewc: float) -> float:
    """Quadratic pull toward each anchor, Fisher-weighted per parameter.

    Adds sum over anchors of (lambda/2) * F_ii * (theta - theta*)^2 to the
    loss and accumulates lambda * F_ii * (theta - theta*) into the grads of
    the given parameter set.
    """
    loss = 0.0
    for anchor in anchors:
        for name, f in anchor.fisher_diag.items():
            p = params[name]
            if p.value.shape != f.shape:
                raise ValueError(f"anchor/parameter shape mismatch for {name}")
            diff = p.value - anchor.theta_star[name]
            loss += 0.5 * lambda_ewc * float((f * diff * diff).sum())
            p.grad += lambda_ewc * f * diff
    return loss


class ConsolidationPenalty:
    """Anchors folded into quadratic coefficients, built once per task.

    The per-anchor penalty is quadratic in theta, so the sum over anchors
    collapses to sum(lam*F_t)*theta^2/2 - sum(lam*F_t*theta*_t)*theta + const,
    making the per-batch cost independent of how many tasks are anchored.
    Numerically equivalent to ewc_penalty_and_grads up to float reassociation.
    """

    def __init__(self, anchors: list[FisherAnchor], lambda_ewc: float) -> None:
        self.quad: dict[str, Array] = {}
        self.lin: dict[str, Array] = {}
        self.const: float = 0.0
        for anchor in anchors:
            for name, f in anchor.fisher_diag.items():
                star = anchor.theta_star[name]
                if name not in self.quad:
                    self.quad[name] = np.zeros_like(f)
                    self.lin[name] = np.zeros_like(f)
                self.quad[name] += lambda_ewc * f
                self.lin[name] += lambda_ewc * f * star
                self.const += float((lambda_ewc * f * star * star).sum())

    def apply(self, params: Mapping[str, Param]) -> float:
        loss = self.const
        for name, a in self.quad.items():
            p = params[name]
            if p.value.shape != a.shape:
                raise ValueError(f"anchor/parameter shape mismatch for {name}")
            v = p.value
            p.grad += a * v
            p.grad -= self.lin[name]
            loss += float((a * v * v).sum()) - 2.0 * float((self.lin[name] * v).sum())
        return 0.5 * loss
