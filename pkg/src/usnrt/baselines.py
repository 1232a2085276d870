"""Variance-network baselines on the shared engine: alternating-trained
heteroscedastic networks (HNN) and their moment-matched deep ensembles."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import model_io
from .data import PreprocessState
from .metrics import GaussianPrediction
from .nn_core import (
    Activation,
    Mlp,
    TrainConfig,
    average_nll,
    predict_sigma,
    train_nll_fixed_mean,
    train_nll_fixed_sigma,
)

__all__ = [
    "EnsembleModel",
    "HnnModel",
    "ensemble_predict",
    "ensemble_predict_arrays",
    "load_ensemble",
    "load_hnn",
    "save_ensemble",
    "save_hnn",
    "train_ensemble",
    "train_hnn",
]


def _derived_seed(*parts: int) -> int:
    seq = np.random.SeedSequence(list(parts))
    return int(seq.generate_state(1, dtype=np.uint64)[0])


@dataclass
class HnnModel:
    """Two networks sharing hidden sizes [8d, 4d]: a ReLU mean network with a
    linear output and a Tanh sigma network with a Softplus output."""

    mean_net: Mlp
    sigma_net: Mlp
    preprocess: PreprocessState | None = None
    train_log: dict = field(default_factory=dict, repr=False, compare=False)

    def predict_arrays(self, X, denormalize: bool = True):
        X = np.asarray(X, dtype=float)
        mu = self.mean_net.forward(X)[:, 0]
        sigma = predict_sigma(self.sigma_net, X)
        if denormalize and self.preprocess is not None:
            mu = self.preprocess.denormalize_mean(mu)
            sigma = self.preprocess.denormalize_sigma(sigma)
        return mu, sigma

    def predict(self, X) -> list[GaussianPrediction]:
        mu, sigma = self.predict_arrays(X)
        return [GaussianPrediction(float(m), float(s)) for m, s in zip(mu, sigma)]


@dataclass
class EnsembleModel:
    """Independently seeded HNNs aggregated into one Gaussian per sample."""

    members: list[HnnModel]
    preprocess: PreprocessState | None = None

    def predict(self, X) -> list[GaussianPrediction]:
        return ensemble_predict(self, X)


def train_hnn(
    X,
    y,
    cfg: TrainConfig,
    d_raw: int | None = None,
    hidden: list[int] | None = None,
    preprocess: PreprocessState | None = None,
    rounds: int = 2,
) -> HnnModel:
    """Alternating heteroscedastic-network training.

    The sigma predictions start fixed at 1, so the first mean phase reduces
    to half the MSE plus a constant; each round then trains the mean network
    under the Gaussian NLL with per-sample sigmas frozen, followed by the
    sigma network with the mean frozen. Two rounds total by default, early
    stopping inside every phase. cfg.seed drives all initialisation, splits,
    and shuffles.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if rounds < 1:
        raise ValueError("rounds must be at least 1")
    if d_raw is None:
        d_raw = preprocess.d_raw if preprocess is not None else X.shape[1]
    if hidden is None:
        hidden = [8 * d_raw, 4 * d_raw]
    base = cfg.seed
    mean_net = Mlp(
        [X.shape[1], *hidden, 1],
        hidden_activation=Activation.RELU,
        output_activation=Activation.LINEAR,
        seed=_derived_seed(base, 0),
    )
    sigma_net = Mlp(
        [X.shape[1], *hidden, 1],
        hidden_activation=Activation.TANH,
        output_activation=Activation.SOFTPLUS,
        seed=_derived_seed(base, 1),
    )
    # Fixed monitoring subset for the round-boundary NLL trajectory. Phases
    # still train on all rows (each holds out its own validation split).
    monitor = np.random.default_rng(_derived_seed(base, 2)).permutation(X.shape[0])
    monitor = monitor[: max(1, X.shape[0] // 5)]

    sigma_values = np.ones(X.shape[0])
    round_val_nll: list[float] = []
    phase_epochs: list[dict] = []
    for rnd in range(rounds):
        # One derived seed per round: the sigma phase then validates on the
        # rows held out of the mean phase, keeping its early stopping honest.
        phase_cfg = replace(cfg, seed=_derived_seed(base, 3, rnd))
        _, mean_log = train_nll_fixed_sigma(mean_net, sigma_values, X, y, phase_cfg)
        _, sigma_log = train_nll_fixed_mean(sigma_net, mean_net, X, y, phase_cfg)
        sigma_values = predict_sigma(sigma_net, X)
        mu_monitor = mean_net.forward(X[monitor])[:, 0]
        round_val_nll.append(average_nll(y[monitor], mu_monitor, sigma_values[monitor]))
        phase_epochs.append(
            {
                "round": rnd,
                "mean_epochs": len(mean_log.train_losses),
                "sigma_epochs": len(sigma_log.train_losses),
            }
        )
    return HnnModel(
        mean_net=mean_net,
        sigma_net=sigma_net,
        preprocess=preprocess,
        train_log={"round_val_nll": round_val_nll, "phases": phase_epochs},
    )


def train_ensemble(
    X,
    y,
    cfg: TrainConfig,
    n_members: int = 5,
    d_raw: int | None = None,
    hidden: list[int] | None = None,
    preprocess: PreprocessState | None = None,
    rounds: int = 2,
) -> EnsembleModel:
    """Train n_members HNNs that differ only in their derived seeds."""
    if n_members < 1:
        raise ValueError("n_members must be at least 1")
    members = [
        train_hnn(
            X,
            y,
            replace(cfg, seed=_derived_seed(cfg.seed, 100 + j)),
            d_raw=d_raw,
            hidden=hidden,
            preprocess=preprocess,
            rounds=rounds,
        )
        for j in range(n_members)
    ]
    return EnsembleModel(members=members, preprocess=preprocess)


def ensemble_predict_arrays(model: EnsembleModel, X, denormalize: bool = True):
    """Gaussian-mixture moment matching across members, as (mu, sigma) arrays.

    The aggregated mean is the member average and the aggregated variance is
    the mean member variance plus the dispersion of member means. Both are
    computed anchored at member 0, so an ensemble of identical members
    reproduces that member's output exactly.
    """
    mus = []
    sigmas = []
    for member in model.members:
        mu, sigma = member.predict_arrays(X, denormalize=False)
        mus.append(mu)
        sigmas.append(sigma)
    mu_stack = np.stack(mus)
    sigma_stack = np.stack(sigmas)

    mu_bar = mu_stack[0] + np.mean(mu_stack - mu_stack[0], axis=0)
    deviations = mu_stack - mu_bar
    variance_excess = np.mean(sigma_stack**2 - sigma_stack[0] ** 2, axis=0)
    ratio = (variance_excess + np.mean(deviations**2, axis=0)) / sigma_stack[0] ** 2
    sigma_bar = sigma_stack[0] * np.sqrt(np.maximum(1.0 + ratio, 0.0))

    if denormalize and model.preprocess is not None:
        mu_bar = model.preprocess.denormalize_mean(mu_bar)
        sigma_bar = model.preprocess.denormalize_sigma(sigma_bar)
    return mu_bar, sigma_bar


def ensemble_predict(model: EnsembleModel, X) -> list[GaussianPrediction]:
    """Aggregated per-sample Gaussians in original label units."""
    mu_bar, sigma_bar = ensemble_predict_arrays(model, X)
    return [GaussianPrediction(float(m), float(s)) for m, s in zip(mu_bar, sigma_bar)]


def _hnn_payload(model: HnnModel) -> dict:
    return {
        "mean_net": model_io.encode_mlp(model.mean_net),
        "sigma_net": model_io.encode_mlp(model.sigma_net),
        "preprocess": None if model.preprocess is None else model.preprocess.to_dict(),
    }


def save_hnn(model: HnnModel, path) -> None:
    payload = {
        "format_version": model_io.FORMAT_VERSION,
        "model_kind": "hnn",
        **_hnn_payload(model),
    }
    model_io.write_payload(path, payload)


def _hnn_from_payload(payload: dict) -> HnnModel:
    try:
        mean_net = model_io.decode_mlp(payload["mean_net"])
        sigma_net = model_io.decode_mlp(payload["sigma_net"])
    except KeyError as exc:
        raise model_io.ModelFormatError(f"hnn model missing field {exc}") from exc
    preprocess = payload.get("preprocess")
    return HnnModel(
        mean_net=mean_net,
        sigma_net=sigma_net,
        preprocess=None if preprocess is None else PreprocessState.from_dict(preprocess),
    )


def load_hnn(path) -> HnnModel:
    return _hnn_from_payload(model_io.read_payload(path, expect_kind="hnn"))


def save_ensemble(model: EnsembleModel, path) -> None:
    payload = {
        "format_version": model_io.FORMAT_VERSION,
        "model_kind": "ensemble",
        "members": [_hnn_payload(member) for member in model.members],
        "preprocess": None if model.preprocess is None else model.preprocess.to_dict(),
    }
    model_io.write_payload(path, payload)


def _ensemble_from_payload(payload: dict) -> EnsembleModel:
    members_payload = payload.get("members")
    if not isinstance(members_payload, list) or not members_payload:
        raise model_io.ModelFormatError("ensemble model holds no members")
    members = [_hnn_from_payload(entry) for entry in members_payload]
    preprocess = payload.get("preprocess")
    return EnsembleModel(
        members=members,
        preprocess=None if preprocess is None else PreprocessState.from_dict(preprocess),
    )


def load_ensemble(path) -> EnsembleModel:
    return _ensemble_from_payload(model_io.read_payload(path, expect_kind="ensemble"))
