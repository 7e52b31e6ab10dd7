"""Differentiable primitives, parameter storage and gradient verification.

Every op is a pair: a forward that returns a float64 array (or scalar) and a
``*_backward`` that maps an upstream gradient to gradients of the inputs.
There is no graph; callers wire the backward passes explicitly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np


class ContractError(ValueError):
    """Raised when an op receives inputs that violate its preconditions."""


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# dense ops


def linear(x, weight, bias) -> np.ndarray:
    """y = x @ weight + bias for a vector ``x`` or a batch of row vectors."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ContractError(f"linear: x{x.shape} does not conform to W{weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ContractError(f"linear: bias{bias.shape} does not match W{weight.shape}")
    return x @ weight + bias


def linear_backward(x, weight, grad_out):
    """Return (d_x, d_weight, d_bias) for ``linear``."""
    x, grad_out = as_tensor(x), as_tensor(grad_out)
    x2 = x.reshape(-1, x.shape[-1])
    g2 = grad_out.reshape(-1, grad_out.shape[-1])
    d_x = (g2 @ weight.T).reshape(x.shape)
    return d_x, x2.T @ g2, g2.sum(axis=0)


def relu(x) -> np.ndarray:
    return np.maximum(as_tensor(x), 0.0)


def relu_backward(x, grad_out) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return np.where(as_tensor(x) > 0.0, grad_out, 0.0)


# ---------------------------------------------------------------------------
# loss kernels


def softmax(logits) -> np.ndarray:
    z = as_tensor(logits)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, label):
    """Cross-entropy of ``softmax(logits)`` against integer labels.

    For a single logit vector returns ``(loss, grad)``. For a 2-D batch with a
    label array the loss is the mean over rows and ``grad`` is the gradient of
    that mean.
    """
    z = as_tensor(logits)
    labels = np.atleast_1d(np.asarray(label))
    n_cls = z.shape[-1]
    if n_cls < 2:
        raise ContractError("softmax_cross_entropy needs at least 2 classes")
    if labels.dtype.kind not in "iu" or np.any(labels < 0) or np.any(labels >= n_cls):
        raise ContractError(f"label {label!r} out of range for {n_cls} classes")
    z2 = z.reshape(-1, n_cls)
    if labels.shape[0] != z2.shape[0]:
        raise ContractError("one label per logit row is required")
    shifted = z2 - z2.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z2.shape[0])
    losses = log_norm - shifted[rows, labels]
    grad = softmax(z2)
    grad[rows, labels] -= 1.0
    if z.ndim == 1:
        return float(losses[0]), grad[0]
    return float(losses.mean()), grad / z2.shape[0]


def binary_score_loss(logits, label):
    """Foreground/background loss over (background, foreground) logit pairs.

    ``logits`` has trailing dimension 2; ``label`` is 1 for foreground.
    """
    z = as_tensor(logits)
    if z.shape[-1] != 2:
        raise ContractError("binary_score_loss expects (background, foreground) logit pairs")
    return softmax_cross_entropy(z, np.asarray(label, dtype=np.int64))


def smooth_l1(pred, target):
    """Summed smooth-L1 loss; returns ``(loss, d_pred)``."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ContractError(f"smooth_l1: shapes {pred.shape} and {target.shape} differ")
    d = pred - target
    ad = np.abs(d)
    small = ad < 1.0
    loss = np.where(small, 0.5 * d * d, ad - 0.5).sum()
    grad = np.where(small, d, np.sign(d))
    return float(loss), grad


# ---------------------------------------------------------------------------
# parameters and optimisation


class ParamStore:
    """Named float64 parameters with one gradient buffer each."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> np.ndarray:
        if name in self.params:
            raise ContractError(f"duplicate parameter {name!r}")
        value = np.array(value, dtype=np.float64)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def add_glorot(self, name: str, fan_in: int, fan_out: int, rng: np.random.Generator):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        return self.add(name, rng.uniform(-limit, limit, size=(fan_in, fan_out)))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def accumulate(self, name: str, grad) -> None:
        self.grads[name] += grad

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, value in self.params.items():
            out.add(name, value)
        return out

    def allclose(self, other: "ParamStore", atol=0.0) -> bool:
        if self.names() != other.names():
            return False
        return all(np.allclose(self[n], other[n], rtol=0.0, atol=atol) for n in self)


def sgd_step(params: ParamStore, learning_rate: float) -> ParamStore:
    """In-place ``p -= lr * g`` for every parameter, then zero the gradients."""
    if learning_rate < 0:
        raise ContractError("learning rate must be non-negative")
    for name, value in params.params.items():
        value -= learning_rate * params.grads[name]
    params.zero_grad()
    return params


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckRow:
    name: str
    max_rel_error: float
    max_abs_error: float
    checked: int
    finite: bool = True

    def passed(self, tolerance: float) -> bool:
        return self.finite and self.max_rel_error < tolerance


@dataclass
class GradCheckReport:
    tolerance: float
    rows: list[GradCheckRow] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed(self.tolerance) for r in self.rows)

    @property
    def max_rel_error(self) -> float:
        return max((r.max_rel_error for r in self.rows), default=0.0)

    def failures(self) -> list[GradCheckRow]:
        return [r for r in self.rows if not r.passed(self.tolerance)]


# Gradients smaller than this are compared in absolute terms.
REL_ERROR_FLOOR = 1e-3


def relative_error(analytic, numeric) -> np.ndarray:
    a, n = np.abs(analytic), np.abs(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(a, n), REL_ERROR_FLOOR)


def finite_diff_check(
    loss_fn: Callable[[ParamStore], float],
    params: ParamStore,
    step: float = 1e-4,
    tolerance: float = 1e-5,
    names: Iterable[str] | None = None,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``loss_fn(params)`` must return the loss and accumulate its analytic
    gradient into ``params.grads``. ``max_entries`` caps how many entries of
    each parameter are probed (sampled with ``rng``).
    """
    params.zero_grad()
    base = loss_fn(params)
    analytic = {n: g.copy() for n, g in params.grads.items()}
    params.zero_grad()
    report = GradCheckReport(tolerance=tolerance)
    if not np.isfinite(base):
        for name in names or params.names():
            report.rows.append(GradCheckRow(name, math.inf, math.inf, 0, finite=False))
        return report

    rng = rng or np.random.default_rng(0)
    for name in names or params.names():
        value = params[name]
        flat = value.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(idx.size)
        finite = True
        for out_i, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + step
            f_plus = loss_fn(params)
            flat[i] = old - step
            f_minus = loss_fn(params)
            flat[i] = old
            finite &= bool(np.isfinite(f_plus) and np.isfinite(f_minus))
            numeric[out_i] = (f_plus - f_minus) / (2.0 * step)
        params.zero_grad()
        a = analytic[name].reshape(-1)[idx]
        if not finite:
            report.rows.append(GradCheckRow(name, math.inf, math.inf, idx.size, finite=False))
            continue
        rel = relative_error(a, numeric)
        report.rows.append(
            GradCheckRow(
                name,
                float(rel.max(initial=0.0)),
                float(np.abs(a - numeric).max(initial=0.0)),
                int(idx.size),
            )
        )
    return report
