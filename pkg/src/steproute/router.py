"""Differentiable binary routing classifier.

The router scores a (state, task) feature vector with a logit; routing to
the cloud corresponds to decision 1. Two architectures are supported: a
linear scorer and a one-hidden-layer perceptron with tanh. Parameters live
in one flat float64 vector so the optimizer, the anchor distance, and
checkpointing stay trivial.

Losses are trained through the fused log-sigmoid form
softplus(z) - y*z == -[y log sigmoid(z) + (1-y) log(1 - sigmoid(z))],
which never evaluates log(0). The rollout temperature is applied only when
sampling route decisions, never inside a training loss. Probabilities
reported externally are clamped to [1e-12, 1 - 1e-12].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, TrainingError, UsageError
from .seeding import derive_rng

PROB_CLAMP = 1e-12


@dataclass(frozen=True)
class Architecture:
    """Shape descriptor; fully determines the flat parameter layout.

    linear: [w (input_dim), b]
    mlp:    [W1 (hidden_dim x input_dim, row-major), b1 (hidden_dim),
             w2 (hidden_dim), b2]
    """

    kind: str  # "linear" | "mlp"
    input_dim: int
    hidden_dim: int = 0

    def validate(self) -> None:
        if self.kind not in ("linear", "mlp"):
            raise ConfigError(f"unknown architecture kind {self.kind!r}")
        if self.input_dim < 1:
            raise ConfigError("input_dim must be >= 1")
        if self.kind == "mlp" and self.hidden_dim < 1:
            raise ConfigError("mlp architecture needs hidden_dim >= 1")

    @property
    def n_params(self) -> int:
        if self.kind == "linear":
            return self.input_dim + 1
        return self.hidden_dim * (self.input_dim + 2) + 1


@dataclass
class RouterParams:
    arch: Architecture
    values: np.ndarray  # flat float64 vector, length arch.n_params
    version: int = 1

    def copy(self) -> "RouterParams":
        return RouterParams(self.arch, self.values.copy(), self.version)


@dataclass(frozen=True)
class AnchorParams:
    """Frozen parameter snapshot used as the refinement anchor."""

    arch: Architecture
    values: np.ndarray

    @classmethod
    def freeze(cls, params: RouterParams) -> "AnchorParams":
        values = params.values.copy()
        values.flags.writeable = False
        return cls(params.arch, values)


def init_params(arch: Architecture, seed: int) -> RouterParams:
    """Zero biases, small uniform weights from the seeded stream."""
    arch.validate()
    rng = derive_rng(seed, "router-init", arch.kind, arch.input_dim, arch.hidden_dim)
    values = np.zeros(arch.n_params)
    if arch.kind == "linear":
        values[: arch.input_dim] = rng.uniform(-0.05, 0.05, arch.input_dim)
    else:
        h, d = arch.hidden_dim, arch.input_dim
        values[: h * d] = rng.uniform(-0.05, 0.05, h * d)
        values[h * d + h : h * d + 2 * h] = rng.uniform(-0.05, 0.05, h)
    return RouterParams(arch, values)


def _views(arch: Architecture, values: np.ndarray):
    if arch.kind == "linear":
        return values[: arch.input_dim], values[arch.input_dim]
    h, d = arch.hidden_dim, arch.input_dim
    w1 = values[: h * d].reshape(h, d)
    b1 = values[h * d : h * d + h]
    w2 = values[h * d + h : h * d + 2 * h]
    b2 = values[h * d + 2 * h]
    return w1, b1, w2, b2


def logits(params: RouterParams, features: np.ndarray) -> np.ndarray:
    """Batched logit evaluation; ``features`` has shape (n, input_dim)."""
    if features.ndim != 2 or features.shape[1] != params.arch.input_dim:
        raise UsageError(
            f"feature matrix shape {features.shape} does not match "
            f"input_dim {params.arch.input_dim}"
        )
    if params.arch.kind == "linear":
        w, b = _views(params.arch, params.values)
        return features @ w + b
    w1, b1, w2, b2 = _views(params.arch, params.values)
    hidden = np.tanh(features @ w1.T + b1)
    return hidden @ w2 + b2


def logit(params: RouterParams, features: np.ndarray) -> float:
    """Single-example logit."""
    features = np.asarray(features, dtype=float)
    if features.ndim != 1 or features.shape[0] != params.arch.input_dim:
        raise UsageError(
            f"feature length {features.shape} does not match "
            f"input_dim {params.arch.input_dim}"
        )
    return float(logits(params, features[None, :])[0])


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def route_prob(logit_value: float, gamma: float) -> float:
    """Temperature-scaled cloud-routing probability sigma(logit / gamma)."""
    if gamma <= 0:
        raise ConfigError(f"gamma must be > 0, got {gamma}")
    p = float(_sigmoid(np.array([logit_value / gamma]))[0])
    return min(max(p, PROB_CLAMP), 1.0 - PROB_CLAMP)


def sample_decision(prob: float, rng: np.random.Generator) -> int:
    """Bernoulli route decision: 1 (cloud) with probability ``prob``."""
    if not 0.0 <= prob <= 1.0:
        raise UsageError(f"prob must be in [0,1], got {prob}")
    return int(rng.random() < prob)


def decide_greedy(prob: float, threshold: float = 0.5) -> int:
    """Deterministic routing: cloud iff prob >= threshold (tie goes to cloud)."""
    if not 0.0 < threshold < 1.0:
        raise UsageError(f"threshold must be in (0,1), got {threshold}")
    return int(prob >= threshold)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def bce_loss_and_grad(
    params: RouterParams,
    features: np.ndarray,
    labels: np.ndarray,
    pos_weight: float = 1.0,
) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy and its exact gradient in the flat layout.

    ``pos_weight`` optionally reweights label-1 examples (1.0 = plain BCE).
    """
    n = len(labels)
    if n == 0:
        raise UsageError("empty batch")
    y = np.asarray(labels, dtype=float)
    if set(np.unique(y)) - {0.0, 1.0}:
        raise UsageError("labels must be in {0, 1}")
    z = logits(params, features)
    w = np.where(y == 1.0, pos_weight, 1.0)
    per_example = np.logaddexp(0.0, z) - y * z
    loss = float(np.mean(w * per_example))
    dz = w * (_sigmoid(z) - y) / n
    return loss, _backprop(params, features, dz)


def _backprop(params: RouterParams, features: np.ndarray, dz: np.ndarray) -> np.ndarray:
    grad = np.zeros_like(params.values)
    if params.arch.kind == "linear":
        d = params.arch.input_dim
        grad[:d] = features.T @ dz
        grad[d] = dz.sum()
        return grad
    w1, b1, w2, _ = _views(params.arch, params.values)
    h, d = params.arch.hidden_dim, params.arch.input_dim
    pre = features @ w1.T + b1
    hidden = np.tanh(pre)
    grad[h * d + h : h * d + 2 * h] = hidden.T @ dz  # w2
    grad[h * d + 2 * h] = dz.sum()  # b2
    dhidden = np.outer(dz, w2) * (1.0 - hidden**2)
    grad[: h * d] = (dhidden.T @ features).reshape(-1)  # W1
    grad[h * d : h * d + h] = dhidden.sum(axis=0)  # b1
    return grad


def anchored_loss_and_grad(
    params: RouterParams,
    anchor: AnchorParams,
    features: np.ndarray,
    labels: np.ndarray,
    beta: float,
    pos_weight: float = 1.0,
) -> tuple[float, np.ndarray]:
    """BCE plus beta * squared L2 distance to the anchor parameters."""
    if beta < 0:
        raise ConfigError(f"beta must be >= 0, got {beta}")
    if anchor.values.shape != params.values.shape or anchor.arch != params.arch:
        raise UsageError("anchor parameters are not shape-compatible")
    loss, grad = bce_loss_and_grad(params, features, labels, pos_weight)
    delta = params.values - anchor.values
    loss += float(beta * (delta @ delta))
    grad = grad + 2.0 * beta * delta
    return loss, grad


# ---------------------------------------------------------------------------
# Optimizer (adaptive moments with decoupled weight decay)
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step_count: int
    lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_optimizer(params: RouterParams, lr: float, weight_decay: float = 0.0) -> OptimizerState:
    if lr <= 0:
        raise ConfigError(f"lr must be > 0, got {lr}")
    return OptimizerState(
        m=np.zeros_like(params.values),
        v=np.zeros_like(params.values),
        step_count=0,
        lr=lr,
        weight_decay=weight_decay,
    )


def optimizer_step(
    params: RouterParams, opt: OptimizerState, grad: np.ndarray
) -> tuple[RouterParams, OptimizerState]:
    """One in-place update; decay is decoupled from the adaptive step."""
    if grad.shape != params.values.shape:
        raise UsageError("gradient shape does not match parameters")
    if not np.all(np.isfinite(grad)):
        raise TrainingError("non-finite gradient")
    opt.step_count += 1
    opt.m = opt.beta1 * opt.m + (1.0 - opt.beta1) * grad
    opt.v = opt.beta2 * opt.v + (1.0 - opt.beta2) * grad**2
    m_hat = opt.m / (1.0 - opt.beta1**opt.step_count)
    v_hat = opt.v / (1.0 - opt.beta2**opt.step_count)
    params.values -= opt.lr * (
        m_hat / (np.sqrt(v_hat) + opt.eps) + opt.weight_decay * params.values
    )
    return params, opt
