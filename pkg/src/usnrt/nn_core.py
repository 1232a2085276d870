"""Minimal feed-forward network engine.

Forward/backward passes, mean-squared-error and Gaussian negative
log-likelihood objectives, Adam, mini-batching, and validation-based early
stopping. Everything runs in float64 and is deterministic given the seeds:
the validation split and the per-epoch batch shuffles are all derived from
the training seed, so identical (data, config, seed) reproduce identical
weights bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

__all__ = [
    "SIGMA_FLOOR",
    "Activation",
    "AdamState",
    "Mlp",
    "TrainConfig",
    "TrainLog",
    "TrainingError",
    "average_nll",
    "nll_loss",
    "predict_sigma",
    "train_mse",
    "train_nll_fixed_mean",
    "train_nll_fixed_sigma",
]

# Additive floor on predicted standard deviations. The NLL diverges as
# sigma -> 0, so every sigma-prediction path reports softplus(z) + SIGMA_FLOOR.
SIGMA_FLOOR = 1e-6


class TrainingError(RuntimeError):
    """An optimisation run produced a non-finite loss."""


class Activation(Enum):
    TANH = "tanh"
    RELU = "relu"
    LINEAR = "linear"
    SOFTPLUS = "softplus"


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


_APPLY = {
    Activation.TANH: np.tanh,
    Activation.RELU: lambda z: np.maximum(z, 0.0),
    Activation.LINEAR: lambda z: z,
    Activation.SOFTPLUS: _softplus,
}

_DERIVATIVE = {
    Activation.TANH: lambda z: 1.0 - np.tanh(z) ** 2,
    Activation.RELU: lambda z: (z > 0.0).astype(float),
    Activation.LINEAR: np.ones_like,
    Activation.SOFTPLUS: _sigmoid,
}


class Mlp:
    """Fully connected network with one activation shared by all hidden
    layers and a separate output activation.

    Weights are Xavier-uniform at construction (limit sqrt(6 / (fan_in +
    fan_out)), suited to the Tanh hidden layers used throughout); biases
    start at zero. Weight matrices have shape (fan_in, fan_out).
    """

    def __init__(
        self,
        layer_sizes: Sequence[int],
        hidden_activation: Activation = Activation.TANH,
        output_activation: Activation = Activation.LINEAR,
        seed: int = 0,
    ):
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ValueError("layer_sizes needs input and output dims, all positive")
        self.layer_sizes = sizes
        self.hidden_activation = hidden_activation
        self.output_activation = output_activation
        self.seed = int(seed)
        rng = np.random.default_rng(self.seed)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            limit = math.sqrt(6.0 / (n_in + n_out))
            self.weights.append(rng.uniform(-limit, limit, size=(n_in, n_out)))
            self.biases.append(np.zeros(n_out))

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    def forward(self, x) -> np.ndarray:
        """Apply the network to a single vector or an (n, d) batch."""
        arr = np.asarray(x, dtype=float)
        single = arr.ndim == 1
        if single:
            arr = arr[None, :]
        if arr.ndim != 2 or arr.shape[1] != self.input_dim:
            raise ValueError(
                f"expected inputs of width {self.input_dim}, got shape {np.shape(x)}"
            )
        out = self._forward_cached(arr)[1][-1]
        return out[0] if single else out

    def _forward_cached(self, X: np.ndarray):
        """Forward pass keeping pre-activations and activations per layer."""
        pre: list[np.ndarray] = []
        post: list[np.ndarray] = [X]
        a = X
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ W + b
            act = self.output_activation if i == last else self.hidden_activation
            a = _APPLY[act](z)
            pre.append(z)
            post.append(a)
        return pre, post

    def _backward(self, pre, post, grad_output):
        """Parameter gradients of a scalar loss given d(loss)/d(outputs)."""
        grads_w: list[np.ndarray] = [None] * len(self.weights)  # type: ignore[list-item]
        grads_b: list[np.ndarray] = [None] * len(self.biases)  # type: ignore[list-item]
        last = len(self.weights) - 1
        delta = grad_output
        for i in range(last, -1, -1):
            act = self.output_activation if i == last else self.hidden_activation
            delta = delta * _DERIVATIVE[act](pre[i])
            grads_w[i] = post[i].T @ delta
            grads_b[i] = delta.sum(axis=0)
            if i:
                delta = delta @ self.weights[i].T
        return grads_w, grads_b

    def snapshot(self):
        return [W.copy() for W in self.weights], [b.copy() for b in self.biases]

    def restore(self, snapshot) -> None:
        weights, biases = snapshot
        self.weights = [W.copy() for W in weights]
        self.biases = [b.copy() for b in biases]


@dataclass
class TrainConfig:
    """Hyperparameters shared by every network training run."""

    batch_size: int = 64
    learning_rate: float = 0.01
    max_epochs: int = 1000
    validation_fraction: float = 0.2
    patience: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be at least 1")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie strictly in (0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


@dataclass
class AdamState:
    """Per-parameter Adam moments; shapes mirror the network's parameters."""

    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m_weights: list[np.ndarray] = field(default_factory=list)
    v_weights: list[np.ndarray] = field(default_factory=list)
    m_biases: list[np.ndarray] = field(default_factory=list)
    v_biases: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_net(cls, net: Mlp) -> "AdamState":
        state = cls()
        state.m_weights = [np.zeros_like(W) for W in net.weights]
        state.v_weights = [np.zeros_like(W) for W in net.weights]
        state.m_biases = [np.zeros_like(b) for b in net.biases]
        state.v_biases = [np.zeros_like(b) for b in net.biases]
        return state

    def update(self, net: Mlp, grads_w, grads_b, learning_rate: float) -> None:
        self.t += 1
        correction1 = 1.0 - self.beta1**self.t
        correction2 = 1.0 - self.beta2**self.t
        for i in range(len(net.weights)):
            for param, grad, m, v in (
                (net.weights[i], grads_w[i], self.m_weights[i], self.v_weights[i]),
                (net.biases[i], grads_b[i], self.m_biases[i], self.v_biases[i]),
            ):
                m *= self.beta1
                m += (1.0 - self.beta1) * grad
                v *= self.beta2
                v += (1.0 - self.beta2) * grad * grad
                m_hat = m / correction1
                v_hat = v / correction2
                param -= learning_rate * m_hat / (np.sqrt(v_hat) + self.epsilon)


@dataclass
class TrainLog:
    """Per-epoch loss curves plus where early stopping landed."""

    train_losses: list[float]
    val_losses: list[float]
    best_epoch: int
    n_train: int
    n_val: int


class _MseObjective:
    def __init__(self, y: np.ndarray):
        self.y = y  # (n, out_dim)

    def value(self, outputs: np.ndarray, idx: np.ndarray) -> float:
        diff = outputs - self.y[idx]
        return float(np.mean(np.sum(diff * diff, axis=1)))

    def grad(self, outputs: np.ndarray, idx: np.ndarray) -> np.ndarray:
        return 2.0 * (outputs - self.y[idx]) / outputs.shape[0]


class _NllSigmaObjective:
    """Gaussian NLL in the sigma network, residuals fixed."""

    def __init__(self, residuals: np.ndarray):
        self.residuals = residuals  # (n,)

    def value(self, outputs: np.ndarray, idx: np.ndarray) -> float:
        sigma = outputs[:, 0] + SIGMA_FLOOR
        r = self.residuals[idx]
        return float(np.mean(np.log(sigma * sigma) / 2.0 + r * r / (2.0 * sigma * sigma)))

    def grad(self, outputs: np.ndarray, idx: np.ndarray) -> np.ndarray:
        sigma = outputs[:, 0] + SIGMA_FLOOR
        r = self.residuals[idx]
        g = (1.0 / sigma - r * r / sigma**3) / outputs.shape[0]
        return g[:, None]


class _NllMeanObjective:
    """Gaussian NLL in the mean network, per-sample sigmas fixed."""

    def __init__(self, y: np.ndarray, sigma: np.ndarray):
        self.y = y  # (n,)
        self.sigma = sigma  # (n,)

    def value(self, outputs: np.ndarray, idx: np.ndarray) -> float:
        sigma = self.sigma[idx]
        r = self.y[idx] - outputs[:, 0]
        return float(np.mean(np.log(sigma * sigma) / 2.0 + r * r / (2.0 * sigma * sigma)))

    def grad(self, outputs: np.ndarray, idx: np.ndarray) -> np.ndarray:
        sigma = self.sigma[idx]
        g = ((outputs[:, 0] - self.y[idx]) / (sigma * sigma)) / outputs.shape[0]
        return g[:, None]


def _validate_xy(net: Mlp, X, y):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2:
        raise ValueError("X must be a 2-d sample matrix")
    if X.shape[0] == 0:
        raise ValueError("training data is empty")
    if X.shape[1] != net.input_dim:
        raise ValueError(f"X has width {X.shape[1]}, network expects {net.input_dim}")
    if y.ndim != 1 or y.shape[0] != X.shape[0]:
        raise ValueError("y must be a vector matching the rows of X")
    if not np.all(np.isfinite(X)) or not np.all(np.isfinite(y)):
        raise ValueError("training data must be finite")
    return X, y


def _derived_rng(*parts: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(parts)))


def _run_training(net: Mlp, X: np.ndarray, objective, cfg: TrainConfig) -> TrainLog:
    n = X.shape[0]
    if n < math.ceil(2.0 / cfg.validation_fraction):
        raise ValueError(
            f"need at least {math.ceil(2.0 / cfg.validation_fraction)} rows for a "
            f"{cfg.validation_fraction:.0%} validation split, got {n}"
        )
    order = _derived_rng(cfg.seed, 0).permutation(n)
    n_val = max(1, int(n * cfg.validation_fraction))
    val_idx = order[:n_val]
    train_idx = order[n_val:]

    adam = AdamState.for_net(net)
    best_val = math.inf
    best_snapshot = net.snapshot()
    best_epoch = -1
    epochs_since_best = 0
    train_losses: list[float] = []
    val_losses: list[float] = []

    for epoch in range(cfg.max_epochs):
        perm = _derived_rng(cfg.seed, 1, epoch).permutation(train_idx.size)
        shuffled = train_idx[perm]
        epoch_loss = 0.0
        for start in range(0, shuffled.size, cfg.batch_size):
            batch = shuffled[start : start + cfg.batch_size]
            pre, post = net._forward_cached(X[batch])
            outputs = post[-1]
            loss = objective.value(outputs, batch)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss} at epoch {epoch}")
            grads_w, grads_b = net._backward(pre, post, objective.grad(outputs, batch))
            adam.update(net, grads_w, grads_b, cfg.learning_rate)
            epoch_loss += loss * batch.size
        train_losses.append(epoch_loss / shuffled.size)

        val_outputs = net.forward(X[val_idx])
        val_loss = objective.value(val_outputs, val_idx)
        if not math.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        val_losses.append(val_loss)

        if val_loss < best_val:
            best_val = val_loss
            best_snapshot = net.snapshot()
            best_epoch = epoch
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= cfg.patience:
                break

    net.restore(best_snapshot)
    return TrainLog(
        train_losses=train_losses,
        val_losses=val_losses,
        best_epoch=best_epoch,
        n_train=int(train_idx.size),
        n_val=int(val_idx.size),
    )


def train_mse(net: Mlp, X, y, cfg: TrainConfig):
    """Fit the network to y with mean-squared error.

    A validation subset (cfg.validation_fraction, seeded shuffle) is held out
    of the given rows; training runs mini-batch Adam and restores the weights
    with the best validation loss. The network is modified in place and also
    returned, together with the loss log.
    """
    X, y = _validate_xy(net, X, y)
    targets = y[:, None] if net.output_dim == 1 else y.reshape(X.shape[0], -1)
    log = _run_training(net, X, _MseObjective(targets), cfg)
    return net, log


def train_nll_fixed_mean(sigma_net: Mlp, mean_net: Mlp, X, y, cfg: TrainConfig):
    """Fit the sigma network by Gaussian NLL with the mean network frozen.

    The per-sample loss is log(sigma^2)/2 + (y - mu)^2 / (2 sigma^2) with
    sigma = softplus output + SIGMA_FLOOR. The mean network is only read,
    never written.
    """
    if sigma_net.output_activation is not Activation.SOFTPLUS:
        raise ValueError("sigma network must have a Softplus output activation")
    if sigma_net.output_dim != 1:
        raise ValueError("sigma network must have a single output")
    X, y = _validate_xy(sigma_net, X, y)
    mu = mean_net.forward(X)
    residuals = y - (mu[:, 0] if mu.ndim == 2 else mu)
    log = _run_training(sigma_net, X, _NllSigmaObjective(residuals), cfg)
    return sigma_net, log


def train_nll_fixed_sigma(mean_net: Mlp, sigma_values, X, y, cfg: TrainConfig):
    """Fit the mean network by Gaussian NLL with per-sample sigmas fixed.

    Equivalent to inverse-variance-weighted MSE up to a constant; used by the
    alternating heteroscedastic-network trainer.
    """
    if mean_net.output_dim != 1:
        raise ValueError("mean network must have a single output")
    X, y = _validate_xy(mean_net, X, y)
    sigma = np.asarray(sigma_values, dtype=float)
    if sigma.shape != (X.shape[0],):
        raise ValueError("sigma_values must be a vector matching the rows of X")
    if np.any(sigma <= 0.0) or not np.all(np.isfinite(sigma)):
        raise ValueError("sigma_values must be positive and finite")
    log = _run_training(mean_net, X, _NllMeanObjective(y, sigma), cfg)
    return mean_net, log


def predict_sigma(sigma_net: Mlp, X) -> np.ndarray:
    """Standard-deviation predictions with the positivity floor applied."""
    out = sigma_net.forward(np.asarray(X, dtype=float))
    return out[:, 0] + SIGMA_FLOOR


def nll_loss(y: float, mu: float, sigma: float) -> float:
    """Per-sample Gaussian negative log-likelihood, constant term dropped."""
    if sigma <= 0.0:
        raise ValueError("sigma must be positive")
    r = y - mu
    return math.log(sigma * sigma) / 2.0 + (r * r) / (2.0 * sigma * sigma)


def average_nll(y, mu, sigma) -> float:
    """Mean Gaussian NLL over a prediction set (vectorised nll_loss)."""
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0.0):
        raise ValueError("sigma must be positive")
    r = y - mu
    return float(np.mean(np.log(sigma * sigma) / 2.0 + r * r / (2.0 * sigma * sigma)))
