"""The information-balanced modular network and its MLP baselines.

A model is a stack of cells. Every cell owns a bank of identically shaped
modules (so routed execution pools into one matrix product per activated
module), a router that emits per-module Q-values, and one memory net per
task that learns to reproduce the router's greedy choices from the raw
input. Routers see the previous cell's output (the raw input for the first
cell); memory nets always see the raw input. At inference the routers are
ignored and the task's memory nets pick the path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import Array, Mlp, ParamBank, Param, softmax_xent
from .routing import rir_select, select_actions


class MissingMemNetError(KeyError):
    """No memory net was initialized for the requested task."""


@dataclass
class DibConfig:
    input_dim: int
    output_dim: int
    num_cells: int = 2
    modules_per_cell: int = 10
    module_width: int = 445
    module_layers: int = 2
    router_hidden: tuple[int, ...] = (256, 256)
    memnet_hidden: tuple[int, ...] = (128, 128)

    def __post_init__(self) -> None:
        if self.num_cells < 2:
            raise ValueError("need at least one hidden cell and one output cell")
        for name in ("input_dim", "output_dim", "modules_per_cell",
                     "module_width", "module_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class CellTrace:
    """Everything one cell's training forward pass needs for backward."""
    q_logits: Array | None          # None under random routing
    router_cache: list | None
    actions: np.ndarray
    explored: np.ndarray
    memnet_targets: np.ndarray
    memnet_logits: Array
    memnet_cache: list
    module_caches: list             # (module_idx, row_indices, cache)
    output: Array


@dataclass
class InferCellTrace:
    actions: np.ndarray
    module_caches: list
    output: Array


@dataclass
class ForwardTrace:
    inputs: Array
    task_id: int
    cells: list
    class_logits: Array


def pooled_module_apply(modules: list[Mlp], inputs: Array,
                        actions: np.ndarray) -> tuple[Array, list]:
    """Run each sample through its chosen module, grouped by module index.

    Rows are gathered per activated module, pushed through that module's
    pipeline in one call, and scattered back in the original order. The
    modules' exact forward kernel makes this bitwise identical to applying
    the chosen module to each row on its own.
    """
    out_dim = modules[0].dims[-1]
    out = np.empty((inputs.shape[0], out_dim))
    caches = []
    for mi in np.unique(actions):
        rows = np.flatnonzero(actions == mi)
        y, cache = modules[mi].forward(inputs[rows])
        out[rows] = y
        caches.append((int(mi), rows, cache))
    return out, caches


# The router's Q head starts near zero so Q-values are driven by the learned
# reward structure, not by init noise. With a full-scale head init the
# per-sample argmax is an arbitrary scatter over modules: every batch then
# activates every module, the activated-set reward loses all credit
# assignment, and routing degenerates to per-sample hashing.
ROUTER_HEAD_INIT_SCALE = 0.01


class DibCell:
    def __init__(self, cfg: DibConfig, cell_idx: int, rng: np.random.Generator) -> None:
        is_output = cell_idx == cfg.num_cells - 1
        in_dim = cfg.input_dim if cell_idx == 0 else cfg.module_width
        if is_output:
            module_dims = [in_dim, cfg.output_dim]
        else:
            module_dims = [in_dim] + [cfg.module_width] * cfg.module_layers
        self.modules = [Mlp(module_dims, rng, final_relu=not is_output, exact_forward=True)
                        for _ in range(cfg.modules_per_cell)]
        self.router = Mlp([in_dim, *cfg.router_hidden, cfg.modules_per_cell], rng)
        head = self.router.bank[f"w{self.router.n_layers - 1}"]
        head.value *= ROUTER_HEAD_INIT_SCALE
        self.memnets: dict[int, Mlp] = {}


class DibModel:
    kind = "dib"

    def __init__(self, config: DibConfig, rng: np.random.Generator,
                 random_routing: bool = False) -> None:
        self.config = config
        self.random_routing = random_routing
        if random_routing:
            self.kind = "rir"
        self.cells = [DibCell(config, ci, rng) for ci in range(config.num_cells)]

    # -- task-side plumbing ------------------------------------------------

    def new_memnets(self, task_id: int, rng: np.random.Generator) -> None:
        cfg = self.config
        for cell in self.cells:
            cell.memnets[task_id] = Mlp(
                [cfg.input_dim, *cfg.memnet_hidden, cfg.modules_per_cell], rng)

    def _memnet(self, cell: DibCell, task_id: int) -> Mlp:
        try:
            return cell.memnets[task_id]
        except KeyError:
            raise MissingMemNetError(f"no memory net for task {task_id}") from None

    def task_ids(self) -> list[int]:
        return sorted(self.cells[0].memnets)

    # -- forward passes ----------------------------------------------------

    def forward_train(self, x: Array, eps: float, rng: np.random.Generator,
                      task_id: int) -> ForwardTrace:
        """Routed training pass: epsilon-greedy router actions (or uniform
        actions under random routing), pooled module execution, memory-net
        logits on the raw input."""
        cur = x
        cell_traces = []
        for ci, cell in enumerate(self.cells):
            router_in = x if ci == 0 else cur
            if self.random_routing:
                q = None
                r_cache = None
                actions = rir_select(x.shape[0], self.config.modules_per_cell, rng)
                explored = np.ones(x.shape[0], dtype=bool)
                targets = actions
            else:
                q, r_cache = cell.router.forward(router_in)
                actions, explored = select_actions(q, eps, rng)
                # the memory net shadows the greedy policy, not the
                # exploration noise
                targets = q.argmax(axis=1)
            mn = self._memnet(cell, task_id)
            mn_logits, mn_cache = mn.forward(x)
            out, module_caches = pooled_module_apply(cell.modules, cur, actions)
            cell_traces.append(CellTrace(q, r_cache, actions, explored, targets,
                                         mn_logits, mn_cache, module_caches, out))
            cur = out
        return ForwardTrace(x, task_id, cell_traces, cur)

    def forward_infer(self, x: Array, task_id: int,
                      want_trace: bool = False):
        """Inference pass: the task's memory nets choose the path from the
        raw input; routers are not evaluated."""
        cur = x
        traces = []
        for cell in self.cells:
            mn = self._memnet(cell, task_id)
            actions = mn.logits(x).argmax(axis=1)
            out, caches = pooled_module_apply(cell.modules, cur, actions)
            traces.append(InferCellTrace(actions, caches, out))
            cur = out
        if want_trace:
            return ForwardTrace(x, task_id, traces, cur)
        return cur

    # -- backward passes ---------------------------------------------------

    def backward_classification(self, trace: ForwardTrace, dlogits: Array,
                                sinks: dict | None = None) -> None:
        """Backprop dlogits along each sample's activated path.

        Gradients land exclusively in the module banks; routers and memory
        nets are untouched (the discrete routing decision carries no
        gradient). With `sinks` given, gradients go into scratch dicts keyed
        by (cell_idx, module_idx) and the live banks stay clean.
        """
        d = dlogits
        for ci in reversed(range(len(self.cells))):
            cell_trace = trace.cells[ci]
            cell = self.cells[ci]
            in_dim = cell.modules[0].dims[0]
            d_prev = np.zeros((d.shape[0], in_dim))
            for mi, rows, cache in cell_trace.module_caches:
                g = None if sinks is None else sinks.setdefault((ci, mi), {})
                d_prev[rows] = cell.modules[mi].backward(cache, d[rows], grads=g)
            d = d_prev

    def memnet_loss_and_grads(self, trace: ForwardTrace) -> list[float]:
        """Cross-entropy of each cell's memory net against the router's
        greedy action (a constant target); gradients accumulate into the
        current task's memory nets only."""
        losses = []
        for ci, cell_trace in enumerate(trace.cells):
            loss, _, dlogits = softmax_xent(cell_trace.memnet_logits,
                                            cell_trace.memnet_targets)
            mn = self._memnet(self.cells[ci], trace.task_id)
            mn.backward(cell_trace.memnet_cache, dlogits)
            losses.append(loss)
        return losses

    # -- parameter views ---------------------------------------------------

    def module_banks(self) -> list[ParamBank]:
        return [m.bank for cell in self.cells for m in cell.modules]

    def router_banks(self) -> list[ParamBank]:
        return [cell.router.bank for cell in self.cells]

    def memnet_banks(self, task_id: int) -> list[ParamBank]:
        return [self._memnet(cell, task_id).bank for cell in self.cells]

    def ewc_parameters(self):
        """The regularized set: module parameters only."""
        for ci, cell in enumerate(self.cells):
            for mi, m in enumerate(cell.modules):
                for name, p in m.bank.items():
                    yield f"cell{ci}/module{mi}/{name}", p

    def loglik_grads_single(self, x_row: Array, label: int,
                            task_id: int) -> dict[str, Array]:
        """d log p(y|x) / d theta for one sample, along the task's
        inference path, into scratch buffers."""
        trace = self.forward_infer(x_row, task_id, want_trace=True)
        _, probs, _ = softmax_xent(trace.class_logits, np.array([label]))
        dlog = -probs
        dlog[0, label] += 1.0
        sinks: dict = {}
        self.backward_classification(trace, dlog, sinks=sinks)
        return {f"cell{ci}/module{mi}/{name}": g
                for (ci, mi), grads in sinks.items()
                for name, g in grads.items()}

    def num_params(self, memnet_tasks: int = 1) -> int:
        n = sum(b.num_params() for b in self.module_banks())
        n += sum(b.num_params() for b in self.router_banks())
        cfg = self.config
        memnet_size = Mlp([cfg.input_dim, *cfg.memnet_hidden, cfg.modules_per_cell],
                          np.random.default_rng(0)).num_params()
        return n + memnet_tasks * len(self.cells) * memnet_size


# -- baselines ---------------------------------------------------------------


class MlpModel:
    """Plain fully connected baseline with one shared output layer."""
    kind = "mlp"

    def __init__(self, input_dim: int, output_dim: int,
                 hidden: tuple[int, ...], rng: np.random.Generator) -> None:
        self.input_dim = input_dim
        self.output_dim = output_dim
        self.hidden = tuple(hidden)
        self.net = Mlp([input_dim, *hidden, output_dim], rng)

    def forward(self, x: Array):
        return self.net.forward(x)

    def infer_logits(self, x: Array, task_id: int | None = None) -> Array:
        return self.net.logits(x)

    def backward(self, cache, dlogits: Array, grads=None) -> None:
        self.net.backward(cache, dlogits, grads=grads)

    def banks(self) -> list[ParamBank]:
        return [self.net.bank]

    def ewc_parameters(self):
        yield from self.net.bank.items()

    def loglik_grads_single(self, x_row: Array, label: int,
                            task_id: int | None = None) -> dict[str, Array]:
        out, cache = self.net.forward(x_row)
        _, probs, _ = softmax_xent(out, np.array([label]))
        dlog = -probs
        dlog[0, label] += 1.0
        sink: dict[str, Array] = {}
        self.net.backward(cache, dlog, grads=sink)
        return sink

    def num_params(self) -> int:
        return self.net.num_params()


class MultiHeadMlp:
    """Shared trunk with a task-specific output layer.

    A fresh head is created when a task starts, trained together with the
    trunk, kept after the task ends and reactivated by task identity at
    evaluation time.
    """
    kind = "mhmlp"

    def __init__(self, input_dim: int, output_dim: int,
                 hidden: tuple[int, ...], rng: np.random.Generator) -> None:
        self.input_dim = input_dim
        self.output_dim = output_dim
        self.hidden = tuple(hidden)
        self.trunk = Mlp([input_dim, *hidden], rng, final_relu=True)
        self.heads: dict[int, Mlp] = {}
        self.active_task: int | None = None

    def new_head(self, task_id: int, rng: np.random.Generator) -> None:
        self.heads[task_id] = Mlp([self.hidden[-1], self.output_dim], rng)
        self.active_task = task_id

    def activate(self, task_id: int) -> None:
        if task_id not in self.heads:
            raise KeyError(f"no stored head for task {task_id}")
        self.active_task = task_id

    def _head(self) -> Mlp:
        if self.active_task is None:
            raise RuntimeError("no active head; call new_head/activate first")
        return self.heads[self.active_task]

    def forward(self, x: Array):
        h, trunk_cache = self.trunk.forward(x)
        out, head_cache = self._head().forward(h)
        return out, (trunk_cache, head_cache)

    def infer_logits(self, x: Array, task_id: int) -> Array:
        self.activate(task_id)
        return self._head().logits(self.trunk.logits(x))

    def backward(self, cache, dlogits: Array) -> None:
        trunk_cache, head_cache = cache
        dh = self._head().backward(head_cache, dlogits)
        self.trunk.backward(trunk_cache, dh)

    def banks(self) -> list[ParamBank]:
        return [self.trunk.bank, self._head().bank]

    def ewc_parameters(self):
        # heads are protected by storage, not by the quadratic penalty
        for name, p in self.trunk.bank.items():
            yield f"trunk/{name}", p

    def loglik_grads_single(self, x_row: Array, label: int,
                            task_id: int) -> dict[str, Array]:
        self.activate(task_id)
        out, (trunk_cache, head_cache) = self.forward(x_row)
        _, probs, _ = softmax_xent(out, np.array([label]))
        dlog = -probs
        dlog[0, label] += 1.0
        head_sink: dict[str, Array] = {}
        dh = self._head().backward(head_cache, dlog, grads=head_sink)
        trunk_sink: dict[str, Array] = {}
        self.trunk.backward(trunk_cache, dh, grads=trunk_sink)
        return {f"trunk/{name}": g for name, g in trunk_sink.items()}

    def num_params(self, head_tasks: int = 1) -> int:
        head = Mlp([self.hidden[-1], self.output_dim], np.random.default_rng(0))
        return self.trunk.num_params() + head_tasks * head.num_params()


def build_mlp_baseline(input_dim: int, output_dim: int, rng: np.random.Generator,
                       hidden: tuple[int, ...] = (2000, 2000)) -> MlpModel:
    return MlpModel(input_dim, output_dim, hidden, rng)


def build_mhmlp_baseline(input_dim: int, output_dim: int, rng: np.random.Generator,
                         hidden: tuple[int, ...] = (2000, 2000)) -> MultiHeadMlp:
    return MultiHeadMlp(input_dim, output_dim, hidden, rng)
