"""Fast built-in property checks, runnable without the test suite.

Each check returns (name, passed, detail); run_all prints one line per
check. These mirror the invariants the full pytest suite pins down, sized
to finish in seconds.
"""

from __future__ import annotations

import math

import numpy as np

from .data import make_synthetic
from .information import empirical_fisher_diag, joint_fisher_batch, joint_loglik_grads
from .model import DibConfig, DibModel, pooled_module_apply
from .nn import Mlp, adam_step, affine_backward, affine_forward, relu, relu_backward, softmax_xent
from .routing import EpsilonSchedule, epsilon, router_loss_and_grads, select_actions
from .checkpoint import named_banks


def _fd_loss_grad(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        hi = fn()
        x[idx] = orig - h
        lo = fn()
        x[idx] = orig
        g[idx] = (hi - lo) / (2 * h)
        it.iternext()
    return g


def check_gradients(cases: int = 10, tol: float = 1e-5) -> tuple[str, bool, str]:
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(cases):
        b, i, o = (int(rng.integers(1, 9)), int(rng.integers(1, 17)), int(rng.integers(1, 17)))
        x = rng.standard_normal((b, i))
        w = rng.standard_normal((i, o))
        bias = rng.standard_normal((1, o))
        up = rng.standard_normal((b, o))
        dx, dw, db = affine_backward(x, w, up)
        for arr, grad in ((x, dx), (w, dw), (bias, db)):
            fd = _fd_loss_grad(lambda: float((affine_forward(x, w, bias) * up).sum()), arr)
            worst = max(worst, float(np.abs(fd - grad).max() / (np.abs(fd).max() + 1e-12)))
        labels = rng.integers(0, o, size=b)
        _, _, dlogits = softmax_xent(x @ w, labels)
        z = x @ w
        fd = _fd_loss_grad(lambda: softmax_xent(z, labels)[0], z)
        worst = max(worst, float(np.abs(fd - dlogits).max() / (np.abs(fd).max() + 1e-12)))
    return "gradient-vs-finite-differences", worst <= tol, f"worst rel err {worst:.2e}"


def check_pooled_equivalence(cases: int = 25) -> tuple[str, bool, str]:
    rng = np.random.default_rng(11)
    for _ in range(cases):
        n_modules = int(rng.integers(1, 6))
        b = int(rng.integers(1, 33))
        din, dout = int(rng.integers(1, 12)), int(rng.integers(1, 12))
        modules = [Mlp([din, dout], rng, exact_forward=True) for _ in range(n_modules)]
        x = rng.standard_normal((b, din))
        actions = rng.integers(0, n_modules, size=b)
        pooled, _ = pooled_module_apply(modules, x, actions)
        for i in range(b):
            row, _ = modules[actions[i]].forward(x[i:i + 1])
            if not (row[0] == pooled[i]).all():
                return "pooled-vs-per-sample", False, f"row {i} differs"
    return "pooled-vs-per-sample", True, f"{cases} cases bitwise equal"


def check_epsilon_schedule() -> tuple[str, bool, str]:
    s = EpsilonSchedule()
    ok = True
    for t in (0, 1000, 10 ** 6):
        expect = 0.1 + 0.9 * math.exp(-0.001 * t)
        ok = ok and abs(epsilon(s, t) - expect) <= 1e-12
    ok = ok and epsilon(s, 0) == 1.0
    return "epsilon-schedule-closed-form", ok, "t in {0, 1e3, 1e6}"


def _tiny_model(rng: np.random.Generator, modules: int = 2) -> DibModel:
    cfg = DibConfig(input_dim=3, output_dim=2, modules_per_cell=modules,
                    module_width=3, router_hidden=(4,), memnet_hidden=(4,))
    model = DibModel(cfg, rng)
    model.new_memnets(0, rng)
    return model


def check_isolation() -> tuple[str, bool, str]:
    rng = np.random.default_rng(3)
    model = _tiny_model(rng)
    x = rng.random((6, 3))
    y = rng.integers(0, 2, size=6)
    trace = model.forward_train(x, 0.5, rng, 0)
    banks = named_banks(model)
    def snap():
        return {name: [p.grad.copy() for _, p in bank.items()]
                for name, bank in banks.items()}
    def touched(before, after):
        return {name for name in before
                if any((a != b).any() for a, b in zip(after[name], before[name]))}
    before = snap()
    _, _, dlogits = softmax_xent(trace.class_logits, y)
    model.backward_classification(trace, dlogits)
    t1 = touched(before, snap())
    if any("router" in n or "memnet" in n for n in t1):
        return "loss-isolation", False, f"classification touched {t1}"
    before = snap()
    model.memnet_loss_and_grads(trace)
    t2 = touched(before, snap())
    if any("module" in n or "router" in n for n in t2):
        return "loss-isolation", False, f"memory loss touched {t2}"
    before = snap()
    for ci, cell in enumerate(model.cells):
        ct = trace.cells[ci]
        _, dq = router_loss_and_grads(ct.q_logits, ct.actions, -1.0)
        cell.router.backward(ct.router_cache, dq)
    t3 = touched(before, snap())
    if any("module" in n or "memnet" in n for n in t3):
        return "loss-isolation", False, f"router loss touched {t3}"
    return "loss-isolation", True, "three losses hit disjoint banks"


def check_fisher_consistency() -> tuple[str, bool, str]:
    # single-sample batch: the joint quantity must reduce to the usual
    # empirical Fisher (both are squared single-sample gradients)
    rng = np.random.default_rng(5)
    model = _tiny_model(rng, modules=1)
    data = make_synthetic(1, 40, 3, 2, seed=9)[0].train
    x, y = data.inputs[:1], data.labels[:1]
    trace = model.forward_train(x, 0.0, rng, 0)
    joint = joint_loglik_grads(model, trace, y)
    anchor = empirical_fisher_diag(model, data.subset(np.array([0])), 1, task_id=0)
    worst = 0.0
    for name, g in joint.items():
        f = anchor.fisher_diag[name]
        worst = max(worst, float(np.abs(np.square(g) - f).max()))
    return "joint-vs-empirical-fisher", worst <= 1e-12, f"max abs diff {worst:.2e}"


def check_bandit() -> tuple[str, bool, str]:
    # constant per-action reward: greedy policy must find the 0-reward arm
    rng = np.random.default_rng(1)
    router = Mlp([4, 16, 5], rng)
    x = rng.random((8, 4))
    schedule = EpsilonSchedule(decay_lambda=0.005)
    for _ in range(1500):
        q, cache = router.forward(x)
        actions, _ = select_actions(q, schedule.value(), rng)
        rewards = np.where(actions == 3, 0.0, -1.0)
        _, dq = router_loss_and_grads(q, actions, rewards)
        router.backward(cache, dq)
        adam_step(router.bank)
        router.bank.zero_grads()
        schedule.advance()
    greedy = router.logits(x).argmax(axis=1)
    ok = (greedy == 3).all()
    return "bandit-convergence", bool(ok), f"greedy actions {sorted(set(greedy.tolist()))}"


def run_all(verbose: bool = True) -> bool:
    checks = [check_gradients, check_pooled_equivalence, check_epsilon_schedule,
              check_isolation, check_fisher_consistency, check_bandit]
    all_ok = True
    for check in checks:
        name, ok, detail = check()
        all_ok = all_ok and ok
        if verbose:
            print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return all_ok
