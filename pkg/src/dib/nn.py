"""Dense-network substrate: affine/ReLU/softmax-xent with hand-written gradients and Adam.

Everything is float64 and operates on 2-D row-major arrays (rows = batch
samples, columns = features). Gradients accumulate (add-assign) into their
ParamBank entries so that several losses can be backpropagated from one
forward pass before a single optimizer step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

Array = np.ndarray


class ShapeError(ValueError):
    """Operands do not conform (wrong rank or mismatched dimensions)."""


def _check_2d(name: str, a: Array) -> None:
    if not isinstance(a, np.ndarray) or a.ndim != 2:
        raise ShapeError(f"{name} must be a 2-D array, got "
                         f"{type(a).__name__} with shape {getattr(a, 'shape', None)}")


def affine_forward(x: Array, w: Array, b: Array, exact: bool = False) -> Array:
    """x @ w + b for x [B,I], w [I,O], b [1,O].

    With exact=True the product is computed by einsum instead of BLAS.
    einsum's fixed reduction order makes each output row bit-identical no
    matter which other rows share the call, which is what keeps grouped
    (pooled) module execution bitwise equal to per-sample execution.
    """
    _check_2d("x", x)
    _check_2d("w", w)
    _check_2d("b", b)
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"inner dims differ: x {x.shape} vs w {w.shape}")
    if b.shape != (1, w.shape[1]):
        raise ShapeError(f"bias must be [1,{w.shape[1]}], got {b.shape}")
    if exact:
        return np.einsum("ij,jk->ik", x, w, optimize=False) + b
    return x @ w + b


def affine_backward(x: Array, w: Array, upstream: Array) -> tuple[Array, Array, Array]:
    """Gradients of the affine map: returns (dx, dw, db)."""
    _check_2d("x", x)
    _check_2d("w", w)
    _check_2d("upstream", upstream)
    if upstream.shape != (x.shape[0], w.shape[1]):
        raise ShapeError(f"upstream {upstream.shape} does not match "
                         f"x {x.shape} @ w {w.shape}")
    dx = upstream @ w.T
    dw = x.T @ upstream
    db = upstream.sum(axis=0, keepdims=True)
    return dx, dw, db


def relu(x: Array) -> Array:
    return np.maximum(x, 0.0)


def relu_backward(x: Array, upstream: Array) -> Array:
    # subgradient at exactly 0 is taken as 0
    return upstream * (x > 0)


def softmax_xent(logits: Array, labels) -> tuple[float, Array, Array]:
    """Mean cross-entropy of softmax(logits) against integer labels.

    Returns (loss, probs, dlogits) with dlogits = (probs - onehot) / B.
    Max-subtraction plus log-sum-exp keeps both probs and the loss finite
    for arbitrarily large logit gaps.
    """
    _check_2d("logits", logits)
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels must have length {n}, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label out of range [0,{c}): {labels.min()}..{labels.max()}")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_probs = z - log_norm
    probs = np.exp(log_probs)
    rows = np.arange(n)
    loss = float(-log_probs[rows, labels].mean())
    dlogits = probs.copy()
    dlogits[rows, labels] -= 1.0
    dlogits /= n
    return loss, probs, dlogits


@dataclass
class AdamConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError(f"betas must lie in (0,1): {self.beta1}, {self.beta2}")
        if self.eps <= 0.0:
            raise ValueError(f"eps must be positive: {self.eps}")


DEFAULT_ADAM = AdamConfig()


@dataclass
class Param:
    """One named tensor with its gradient accumulator and Adam moments."""
    value: Array
    grad: Array
    adam_m: Array
    adam_v: Array


class ParamBank:
    """Named parameter collection sharing one Adam step counter."""

    def __init__(self) -> None:
        self.entries: dict[str, Param] = {}
        self.step_count: int = 0

    def add(self, name: str, value: Array) -> Param:
        if name in self.entries:
            raise ValueError(f"duplicate parameter name: {name}")
        _check_2d(name, value)
        value = np.ascontiguousarray(value, dtype=np.float64)
        p = Param(value, np.zeros_like(value), np.zeros_like(value), np.zeros_like(value))
        self.entries[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def items(self) -> Iterator[tuple[str, Param]]:
        return iter(self.entries.items())

    def names(self) -> list[str]:
        return list(self.entries)

    def zero_grads(self) -> None:
        for p in self.entries.values():
            p.grad[...] = 0.0

    def num_params(self) -> int:
        return sum(p.value.size for p in self.entries.values())

    def snapshot_values(self) -> dict[str, Array]:
        return {name: p.value.copy() for name, p in self.entries.items()}


def adam_step(bank: ParamBank, cfg: AdamConfig = DEFAULT_ADAM) -> None:
    """Bias-corrected Adam update over every entry; grads are left intact.

    Written with explicit scratch to keep the per-step temporaries at one
    array per parameter; this loop dominates large-model training time.
    """
    bank.step_count += 1
    t = bank.step_count
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for p in bank.entries.values():
        scratch = np.multiply(p.grad, 1.0 - cfg.beta1)
        p.adam_m *= cfg.beta1
        p.adam_m += scratch
        np.multiply(p.grad, p.grad, out=scratch)
        scratch *= 1.0 - cfg.beta2
        p.adam_v *= cfg.beta2
        p.adam_v += scratch
        np.divide(p.adam_v, bc2, out=scratch)
        np.sqrt(scratch, out=scratch)
        scratch += cfg.eps
        np.divide(p.adam_m, scratch, out=scratch)
        scratch *= cfg.learning_rate / bc1
        p.value -= scratch


def init_params(shape: tuple[int, int], rng: np.random.Generator) -> Array:
    """He-style init: normal(0, sqrt(2/fan_in)) for weights, zeros for biases.

    A single-row shape is treated as a bias vector.
    """
    rows, cols = shape
    if rows <= 0 or cols <= 0:
        raise ValueError(f"bad shape {shape}")
    if rows == 1:
        return np.zeros((1, cols))
    return rng.normal(0.0, np.sqrt(2.0 / rows), size=(rows, cols))


def _accumulate(sink: dict[str, Array] | None, bank: ParamBank, name: str, delta: Array) -> None:
    # sink=None accumulates into the live bank; otherwise into a scratch dict
    if sink is None:
        bank[name].grad += delta
    elif name in sink:
        sink[name] += delta
    else:
        sink[name] = delta.copy()


class Mlp:
    """Stack of affine layers with ReLU between them.

    final_relu=True also applies ReLU after the last affine (used for
    hidden modules whose output feeds the next stage); otherwise the last
    layer emits raw logits. exact_forward selects the row-stable einsum
    kernel (see affine_forward).
    """

    def __init__(self, dims: list[int], rng: np.random.Generator,
                 final_relu: bool = False, exact_forward: bool = False) -> None:
        if len(dims) < 2:
            raise ValueError(f"need at least input and output dims, got {dims}")
        self.dims = list(dims)
        self.final_relu = final_relu
        self.exact_forward = exact_forward
        self.bank = ParamBank()
        for i, (fan_in, fan_out) in enumerate(zip(dims, dims[1:])):
            self.bank.add(f"w{i}", init_params((fan_in, fan_out), rng))
            self.bank.add(f"b{i}", init_params((1, fan_out), rng))

    @property
    def n_layers(self) -> int:
        return len(self.dims) - 1

    def _activated(self, layer: int) -> bool:
        return layer < self.n_layers - 1 or self.final_relu

    def forward(self, x: Array) -> tuple[Array, list[tuple[Array, Array]]]:
        """Returns (output, cache); cache holds (layer input, pre-activation) pairs."""
        cache = []
        cur = x
        for i in range(self.n_layers):
            z = affine_forward(cur, self.bank[f"w{i}"].value, self.bank[f"b{i}"].value,
                               exact=self.exact_forward)
            cache.append((cur, z))
            cur = relu(z) if self._activated(i) else z
        return cur, cache

    def logits(self, x: Array) -> Array:
        out, _ = self.forward(x)
        return out

    def backward(self, cache: list[tuple[Array, Array]], dout: Array,
                 grads: dict[str, Array] | None = None) -> Array:
        """Backprop dout through the stack; returns dx.

        Parameter gradients accumulate into the bank, or into `grads`
        (a scratch dict) when given, leaving the bank untouched.
        """
        d = dout
        for i in reversed(range(self.n_layers)):
            x_in, z = cache[i]
            if self._activated(i):
                d = relu_backward(z, d)
            d, dw, db = affine_backward(x_in, self.bank[f"w{i}"].value, d)
            _accumulate(grads, self.bank, f"w{i}", dw)
            _accumulate(grads, self.bank, f"b{i}", db)
        return d

    def num_params(self) -> int:
        return self.bank.num_params()
