"""Experiment orchestration: the per-task training loop with its three
isolated losses, anchor creation between tasks, baseline training, the
jointly trained lower bound, and the hyperparameter sweep."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .data import LabeledSet, Task, TaskSequence, batch_iter
from .information import (ConsolidationPenalty, FisherAnchor, RewardScale,
                          empirical_fisher_diag, joint_fisher_batch, reward)
from .model import (DibConfig, DibModel, MlpModel, MultiHeadMlp,
                    build_mhmlp_baseline, build_mlp_baseline)
from .nn import adam_step, softmax_xent
from .routing import EpsilonSchedule, router_loss_and_grads

MODEL_KINDS = ("mlp", "mhmlp", "dib", "rir")
SWEEP_LAMBDAS = (1.0, 10.0, 100.0, 1000.0, 10000.0)


class NumericError(RuntimeError):
    """A loss went non-finite; the trial is aborted, not patched over."""


@dataclass
class ArchScale:
    """Layer widths for every model in a run; one knob set for paper scale
    and one shrunk set for desk-scale runs."""
    module_width: int = 445
    modules_per_cell: int = 10
    num_cells: int = 2
    mlp_hidden: tuple[int, ...] = (2000, 2000)
    router_hidden: tuple[int, ...] = (256, 256)
    memnet_hidden: tuple[int, ...] = (128, 128)

    @classmethod
    def paper(cls) -> "ArchScale":
        return cls()

    @classmethod
    def desk(cls) -> "ArchScale":
        # widths scaled by ~64/445; router/memnet sizes stay as published
        return cls(module_width=64, mlp_hidden=(288, 288))


@dataclass
class RunCondition:
    model_kind: str
    ewc: bool
    lambda_value: float = 100.0   # reward scale and consolidation weight share it
    epochs_per_task: int = 20
    trials: int = 3
    seed: int = 0
    batch_size: int = 128
    fisher_samples: int = 1024

    def __post_init__(self) -> None:
        if self.model_kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.model_kind!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def name(self) -> str:
        return self.model_kind + ("+ewc" if self.ewc else "")

    @property
    def uses_lambda(self) -> bool:
        # the reward scale matters for the learned router, the penalty
        # weight for any consolidated condition
        return self.ewc or self.model_kind == "dib"


@dataclass
class ErrorMatrix:
    """entries[i][j]: test error (%) on task j after finishing task i."""
    entries: list[list[float]] = field(default_factory=list)

    def add_row(self, row: list[float]) -> None:
        if len(row) != len(self.entries) + 1:
            raise ValueError(f"row {len(self.entries)} must have {len(self.entries) + 1} entries")
        if any(not (0.0 <= e <= 100.0) for e in row):
            raise ValueError(f"error out of [0,100]: {row}")
        self.entries.append(list(row))

    @property
    def num_tasks(self) -> int:
        return len(self.entries)

    def final_row(self) -> list[float]:
        if not self.entries:
            raise ValueError("empty error matrix")
        return self.entries[-1]


@dataclass
class TaskDiagnostics:
    epsilons: list[float] = field(default_factory=list)
    joint_fisher: list[float] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)
    class_losses: list[float] = field(default_factory=list)
    memnet_losses: list[float] = field(default_factory=list)
    router_losses: list[float] = field(default_factory=list)
    ewc_penalties: list[float] = field(default_factory=list)
    memnet_agreement: float | None = None
    val_error: float | None = None


@dataclass
class RunResult:
    matrix: ErrorMatrix
    model: object
    diagnostics: list[TaskDiagnostics]
    anchors: list[FisherAnchor]


def build_model(kind: str, input_dim: int, output_dim: int, arch: ArchScale,
                rng: np.random.Generator):
    if kind in ("dib", "rir"):
        cfg = DibConfig(input_dim=input_dim, output_dim=output_dim,
                        num_cells=arch.num_cells,
                        modules_per_cell=arch.modules_per_cell,
                        module_width=arch.module_width,
                        router_hidden=arch.router_hidden,
                        memnet_hidden=arch.memnet_hidden)
        return DibModel(cfg, rng, random_routing=(kind == "rir"))
    if kind == "mlp":
        return build_mlp_baseline(input_dim, output_dim, rng, hidden=arch.mlp_hidden)
    if kind == "mhmlp":
        return build_mhmlp_baseline(input_dim, output_dim, rng, hidden=arch.mlp_hidden)
    raise ValueError(f"unknown model kind {kind!r}")


def evaluate(model, data: LabeledSet, task_id: int, batch: int = 1024) -> float:
    """Test error in percent, routing/head selection by task identity."""
    correct = 0
    for start in range(0, len(data), batch):
        x = data.inputs[start:start + batch]
        y = data.labels[start:start + batch]
        if isinstance(model, DibModel):
            logits = model.forward_infer(x, task_id)
        else:
            logits = model.infer_logits(x, task_id)
        correct += int((logits.argmax(axis=1) == y).sum())
    return 100.0 * (1.0 - correct / len(data))


def _check_finite(value: float, what: str, where: str) -> None:
    if not np.isfinite(value):
        raise NumericError(f"{what} went non-finite at {where}")


def _measure_memnet_agreement(model: DibModel, data: LabeledSet, task_id: int,
                              limit: int = 2048) -> float:
    """Fraction of samples where the memory nets reproduce the router's
    greedy route, averaged over cells. Uses a private rng so measurement
    never perturbs the training stream."""
    probe = np.random.default_rng(0x5EED)
    n = min(limit, len(data))
    x = data.inputs[:n]
    trace = model.forward_train(x, 0.0, probe, task_id)
    agree = []
    for ci, cell_trace in enumerate(trace.cells):
        mn_actions = model.cells[ci].memnets[task_id].logits(x).argmax(axis=1)
        agree.append(float((mn_actions == cell_trace.actions).mean()))
    return float(np.mean(agree))


def train_task(model, task: Task, task_id: int, condition: RunCondition,
               anchors: list[FisherAnchor], schedule: EpsilonSchedule,
               rng: np.random.Generator) -> TaskDiagnostics:
    """One task's training loop.

    For the routed model each batch produces one forward trace from which
    all three losses are derived: classification (modules only),
    memory-net imitation (memory nets only) and the reward-driven router
    loss (routers only), each followed by its own Adam group step. The
    consolidation penalty, when active, joins the module/trunk gradients
    before their step.
    """
    diag = TaskDiagnostics()
    routed = isinstance(model, DibModel)
    scale = RewardScale(condition.lambda_value) if routed and not model.random_routing else None
    ewc_active = condition.ewc and anchors
    ewc_params = dict(model.ewc_parameters()) if ewc_active else None
    penalty_fn = (ConsolidationPenalty(anchors, condition.lambda_value)
                  if ewc_active else None)

    for epoch in range(condition.epochs_per_task):
        shuffle_seed = int(rng.integers(np.iinfo(np.int64).max))
        for b_idx, (x, y) in enumerate(batch_iter(task.train, condition.batch_size,
                                                  shuffle_seed)):
            where = f"task {task_id} epoch {epoch} batch {b_idx}"
            if routed:
                eps = schedule.value()
                trace = model.forward_train(x, eps, rng, task_id)
                class_loss, _, dlogits = softmax_xent(trace.class_logits, y)
                mem_losses = model.memnet_loss_and_grads(trace)
                model.backward_classification(trace, dlogits)
                router_loss = 0.0
                j = r = 0.0
                if not model.random_routing:
                    j = joint_fisher_batch(model, trace, y)
                    r = reward(j, scale)
                    for ci, cell in enumerate(model.cells):
                        ct = trace.cells[ci]
                        cell_loss, dq = router_loss_and_grads(ct.q_logits, ct.actions, r)
                        cell.router.backward(ct.router_cache, dq)
                        router_loss += cell_loss
                penalty = penalty_fn.apply(ewc_params) if ewc_active else 0.0
                for v, what in ((class_loss, "classification loss"),
                                (sum(mem_losses), "memory-net loss"),
                                (router_loss, "router loss"), (j, "joint Fisher")):
                    _check_finite(v, what, where)
                for bank in model.module_banks():
                    adam_step(bank)
                    bank.zero_grads()
                if not model.random_routing:
                    for bank in model.router_banks():
                        adam_step(bank)
                        bank.zero_grads()
                for bank in model.memnet_banks(task_id):
                    adam_step(bank)
                    bank.zero_grads()
                schedule.advance()
                diag.epsilons.append(eps)
                diag.joint_fisher.append(j)
                diag.rewards.append(r)
                diag.memnet_losses.append(float(sum(mem_losses)))
                diag.router_losses.append(router_loss)
            else:
                out, cache = model.forward(x)
                class_loss, _, dlogits = softmax_xent(out, y)
                model.backward(cache, dlogits)
                penalty = penalty_fn.apply(ewc_params) if ewc_active else 0.0
                _check_finite(class_loss, "classification loss", where)
                for bank in model.banks():
                    adam_step(bank)
                    bank.zero_grads()
            diag.class_losses.append(class_loss)
            diag.ewc_penalties.append(penalty)

    if routed and not model.random_routing:
        diag.memnet_agreement = _measure_memnet_agreement(model, task.train, task_id)
    diag.val_error = evaluate(model, task.val, task_id)
    return diag


def run_continual(condition: RunCondition, tasks: TaskSequence,
                  arch: ArchScale) -> RunResult:
    """Sequential training over the task list: fresh memory nets / heads per
    task, evaluation on everything seen so far after each task, and a new
    Fisher anchor per completed task for consolidated conditions."""
    if len(tasks) == 0:
        raise ValueError("empty task sequence")
    rng = np.random.default_rng(condition.seed)
    input_dim = tasks[0].train.input_dim
    output_dim = max(t.train.num_classes for t in tasks)
    model = build_model(condition.model_kind, input_dim, output_dim, arch, rng)
    schedule = EpsilonSchedule()
    anchors: list[FisherAnchor] = []
    matrix = ErrorMatrix()
    diags = []
    for i, task in enumerate(tasks):
        if isinstance(model, DibModel):
            model.new_memnets(i, rng)
        elif isinstance(model, MultiHeadMlp):
            model.new_head(i, rng)
        diags.append(train_task(model, task, i, condition, anchors, schedule, rng))
        matrix.add_row([evaluate(model, tasks[j].test, j) for j in range(i + 1)])
        if condition.ewc:
            budget = min(condition.fisher_samples, len(task.train))
            anchors.append(empirical_fisher_diag(model, task.train, budget,
                                                 task_id=i, rng=rng))
    return RunResult(matrix, model, diags, anchors)


def _joint_training_set(tasks: TaskSequence) -> tuple[LabeledSet, int]:
    """Union of all task training sets.

    Split-style tasks get one output space over all (task, label) pairs via
    their original labels, so the task-aware evaluation stays comparable;
    shared-label-space tasks concatenate as they are.
    """
    inputs = [t.train.inputs for t in tasks]
    if tasks.kind == "split":
        labels = [np.asarray(t.label_map)[t.train.labels] for t in tasks]
        num_classes = 1 + max(max(t.label_map) for t in tasks)
    else:
        labels = [t.train.labels for t in tasks]
        num_classes = max(t.train.num_classes for t in tasks)
    merged = LabeledSet(np.concatenate(inputs), np.concatenate(labels), num_classes)
    return merged, num_classes


def train_lower_bound(tasks: TaskSequence, arch: ArchScale, epochs: int = 200,
                      seed: int = 0, batch_size: int = 128
                      ) -> tuple[float, list[float], MlpModel]:
    """Vanilla MLP trained on all tasks at once; estimates the error floor."""
    if len(tasks) == 0:
        raise ValueError("empty task sequence")
    rng = np.random.default_rng(seed)
    merged, num_classes = _joint_training_set(tasks)
    model = build_mlp_baseline(merged.input_dim, num_classes, rng,
                               hidden=arch.mlp_hidden)
    for epoch in range(epochs):
        shuffle_seed = int(rng.integers(np.iinfo(np.int64).max))
        for b_idx, (x, y) in enumerate(batch_iter(merged, batch_size, shuffle_seed)):
            out, cache = model.forward(x)
            loss, _, dlogits = softmax_xent(out, y)
            _check_finite(loss, "classification loss", f"joint epoch {epoch} batch {b_idx}")
            model.backward(cache, dlogits)
            for bank in model.banks():
                adam_step(bank)
                bank.zero_grads()
    per_task = []
    for task in tasks:
        data = task.test
        if tasks.kind == "split":
            cols = list(task.label_map)
            correct = 0
            for start in range(0, len(data), 1024):
                logits = model.infer_logits(data.inputs[start:start + 1024])
                pred = logits[:, cols].argmax(axis=1)
                correct += int((pred == data.labels[start:start + 1024]).sum())
            per_task.append(100.0 * (1.0 - correct / len(data)))
        else:
            per_task.append(evaluate(model, data, task_id=0))
    return float(np.mean(per_task)), per_task, model


@dataclass
class SweepRow:
    condition: str
    dataset: str
    lambda_value: float | None
    trial: int
    mean_final_error: float
    wall_seconds: float


@dataclass
class SweepSummary:
    condition: str
    dataset: str
    best_lambda: float | None
    mean_error: float
    std_error: float      # population stdev across trials at the best lambda
    trials: int


class RunStore:
    """Persistence/resume interface for sweeps. The in-memory default never
    skips anything; the CLI provides a file-backed one so interrupted
    sweeps continue where they left off."""

    def get(self, condition: str, lam: float | None, trial: int):
        return None

    def put(self, condition: str, lam: float | None, trial: int,
            error: float, seconds: float, result: RunResult) -> None:
        pass


def sweep(conditions: list[RunCondition], tasks: TaskSequence,
          arch: ArchScale, lambdas: tuple[float, ...] = SWEEP_LAMBDAS,
          base_seed: int = 0,
          store: RunStore | None = None) -> tuple[list[SweepRow], list[SweepSummary]]:
    """Cross every condition with the scale values it uses and the trial
    seeds (seed = base_seed + trial, paired across conditions). Reports the
    best scale per condition by mean error across trials."""
    from .reporting import mean_final_error
    store = store or RunStore()
    rows: list[SweepRow] = []
    summaries: list[SweepSummary] = []
    for cond in conditions:
        values = list(lambdas) if cond.uses_lambda else [None]
        per_lambda: list[tuple[float | None, list[float]]] = []
        for lam in values:
            errors = []
            for trial in range(cond.trials):
                cached = store.get(cond.name, lam, trial)
                if cached is not None:
                    err, secs = cached
                else:
                    run_cond = RunCondition(
                        model_kind=cond.model_kind, ewc=cond.ewc,
                        lambda_value=lam if lam is not None else cond.lambda_value,
                        epochs_per_task=cond.epochs_per_task, trials=cond.trials,
                        seed=base_seed + trial, batch_size=cond.batch_size,
                        fisher_samples=cond.fisher_samples)
                    t0 = time.perf_counter()
                    result = run_continual(run_cond, tasks, arch)
                    secs = time.perf_counter() - t0
                    err = mean_final_error(result.matrix)
                    store.put(cond.name, lam, trial, err, secs, result)
                errors.append(err)
                rows.append(SweepRow(cond.name, tasks.kind, lam, trial, err, secs))
            per_lambda.append((lam, errors))
        best_lam, best_errors = min(per_lambda, key=lambda kv: float(np.mean(kv[1])))
        summaries.append(SweepSummary(cond.name, tasks.kind, best_lam,
                                      float(np.mean(best_errors)),
                                      float(np.std(best_errors)),
                                      cond.trials))
    return rows, summaries
