"""Encoder/decoder model with a role-assigned latent layout.

The first three latent dimensions are readouts, not free code: dimension 1
estimates the treatment-assignment logit, dimension 2 the treated-outcome
value, dimension 3 the control-outcome value.  Remaining dimensions carry
unsupervised representation.  Prediction uses posterior means only, so it
is deterministic; sampling happens only during training.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, DimensionError, NumericalError

CONTINUOUS = "continuous"
BINARY = "binary"

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0


@dataclass(frozen=True)
class LatentLayout:
    """Role map over the d latent dimensions (0-based indices)."""

    d: int

    def __post_init__(self):
        if self.d < 4:
            raise ConfigurationError(
                f"latent dimension must be at least 4 (three readout dims plus "
                f"at least one free dim), got {self.d}"
            )

    @property
    def assignment(self) -> int:
        return 0

    @property
    def treated_outcome(self) -> int:
        return 1

    @property
    def control_outcome(self) -> int:
        return 2

    @property
    def free_dims(self) -> range:
        return range(3, self.d)

    def factual_outcome_cols(self, w: np.ndarray) -> np.ndarray:
        """Column index of the factual-outcome dim per row: 1 if treated, 2 if control."""
        return np.where(np.asarray(w) == 1, self.treated_outcome, self.control_outcome)


@dataclass
class Posterior:
    """Diagonal-Gaussian posterior parameters for a batch, logvar clamped."""

    mu: Tensor
    logvar: Tensor

    @property
    def n(self) -> int:
        return self.mu.shape[0]

    @property
    def d(self) -> int:
        return self.mu.shape[1]


@dataclass
class Prediction:
    """Deterministic per-row readouts."""

    propensity: np.ndarray
    y1hat: np.ndarray
    y0hat: np.ndarray

    @property
    def ite(self) -> np.ndarray:
        return self.y1hat - self.y0hat


def _init_layer(rng: np.random.Generator, fan_in: int, fan_out: int) -> tuple[Tensor, Tensor]:
    scale = 1.0 / np.sqrt(fan_in)
    w = Tensor(rng.uniform(-scale, scale, size=(fan_in, fan_out)), requires_grad=True)
    b = Tensor(rng.uniform(-scale, scale, size=(fan_out,)), requires_grad=True)
    return w, b


_ACTIVATIONS = {"relu": ad.relu, "elu": ad.elu, "tanh": ad.tanh}


@dataclass
class TreatmentVae:
    layout: LatentLayout
    feature_spec: list[str]
    hidden: list[int]
    activation: str
    outcome_mode: str
    alpha: float
    beta: float
    gamma: float
    bandwidths: Optional[list[float]]
    encoder: list[tuple[Tensor, Tensor]]
    decoder: list[tuple[Tensor, Tensor]]
    feature_mean: Optional[np.ndarray] = None
    feature_scale: Optional[np.ndarray] = None
    outcome_mean: float = 0.0
    outcome_scale: float = 1.0
    _binary_mask: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self._binary_mask = np.array(
            [1.0 if kind == BINARY else 0.0 for kind in self.feature_spec]
        )

    # -- basic introspection -------------------------------------------
    @property
    def p(self) -> int:
        return len(self.feature_spec)

    @property
    def d(self) -> int:
        return self.layout.d

    def parameters(self) -> list[Tensor]:
        params = []
        for w, b in self.encoder + self.decoder:
            params.extend((w, b))
        return params

    def snapshot(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]

    def restore(self, snapshot: Sequence[np.ndarray]) -> None:
        for p, saved in zip(self.parameters(), snapshot):
            p.data = saved.copy()

    # -- forward passes -------------------------------------------------
    def _mlp(self, x: Tensor, layers: list[tuple[Tensor, Tensor]]) -> Tensor:
        act = _ACTIVATIONS[self.activation]
        h = x
        for i, (w, b) in enumerate(layers):
            h = ad.add(ad.matmul(h, w), b)
            if i < len(layers) - 1:
                h = act(h)
        return h

    def encode(self, x) -> Posterior:
        x = ad.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.p:
            raise DimensionError(f"expected input of shape (n, {self.p}), got {x.shape}")
        if x.size and not np.all(np.isfinite(x.data)):
            raise NumericalError("encoder input contains non-finite values")
        out = self._mlp(x, self.encoder)
        mu = out[:, : self.d]
        logvar = ad.clamp(out[:, self.d :], LOGVAR_MIN, LOGVAR_MAX)
        return Posterior(mu=mu, logvar=logvar)

    def reparameterize(self, post: Posterior, noise) -> Tensor:
        noise = ad.as_tensor(noise)
        if noise.shape != post.mu.shape:
            raise DimensionError(
                f"noise shape {noise.shape} does not match posterior {post.mu.shape}"
            )
        std = ad.exp(ad.mul(post.logvar, 0.5))
        return ad.add(post.mu, ad.mul(std, noise))

    def decode(self, z) -> Tensor:
        """Per-column reconstruction parameters.

        Continuous columns are unconstrained means; binary columns pass
        through a logistic so the output is a probability.
        """
        z = ad.as_tensor(z)
        if z.ndim != 2 or z.shape[1] != self.d:
            raise DimensionError(f"expected latent of shape (n, {self.d}), got {z.shape}")
        raw = self._mlp(z, self.decoder)
        if not np.any(self._binary_mask):
            return raw
        mask = Tensor(self._binary_mask)
        return ad.add(
            ad.mul(raw, ad.sub(1.0, mask)),
            ad.mul(ad.sigmoid(raw), mask),
        )

    # -- deterministic readouts ------------------------------------------
    def standardize_features(self, x: np.ndarray) -> np.ndarray:
        if self.feature_mean is None:
            return np.asarray(x, dtype=np.float64)
        return (np.asarray(x, dtype=np.float64) - self.feature_mean) / self.feature_scale

    def predict(self, x: np.ndarray, standardize: bool = True) -> Prediction:
        """Posterior-mean readouts; no sampling, bit-deterministic."""
        if standardize:
            x = self.standardize_features(x)
        with ad.no_grad():
            post = self.encode(x)
        mu = post.mu.data
        prop = _logistic(mu[:, self.layout.assignment])
        if self.outcome_mode == BINARY:
            y1 = _logistic(mu[:, self.layout.treated_outcome])
            y0 = _logistic(mu[:, self.layout.control_outcome])
        else:
            y1 = mu[:, self.layout.treated_outcome] * self.outcome_scale + self.outcome_mean
            y0 = mu[:, self.layout.control_outcome] * self.outcome_scale + self.outcome_mean
        return Prediction(propensity=prop, y1hat=y1, y0hat=y0)

    def posterior_means(self, x: np.ndarray, standardize: bool = True) -> np.ndarray:
        if standardize:
            x = self.standardize_features(x)
        with ad.no_grad():
            post = self.encode(x)
        return post.mu.data

    # -- persistence -----------------------------------------------------
    def save(self, path: str) -> None:
        payload = {
            "format_version": 1,
            "latent_dim": self.d,
            "feature_spec": self.feature_spec,
            "hidden": list(self.hidden),
            "activation": self.activation,
            "outcome_mode": self.outcome_mode,
            "alpha": self.alpha,
            "beta": self.beta,
            "gamma": self.gamma,
            "bandwidths": self.bandwidths,
            "feature_mean": None if self.feature_mean is None else self.feature_mean.tolist(),
            "feature_scale": None if self.feature_scale is None else self.feature_scale.tolist(),
            "outcome_mean": self.outcome_mean,
            "outcome_scale": self.outcome_scale,
            "encoder": [[w.data.tolist(), b.data.tolist()] for w, b in self.encoder],
            "decoder": [[w.data.tolist(), b.data.tolist()] for w, b in self.decoder],
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh)

    @classmethod
    def load(cls, path: str) -> "TreatmentVae":
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
        version = payload.get("format_version")
        if version != 1:
            raise ConfigurationError(f"unsupported model format version: {version!r}")

        def layers(key):
            return [
                (
                    Tensor(np.array(w, dtype=np.float64), requires_grad=True),
                    Tensor(np.array(b, dtype=np.float64), requires_grad=True),
                )
                for w, b in payload[key]
            ]

        model = cls(
            layout=LatentLayout(payload["latent_dim"]),
            feature_spec=list(payload["feature_spec"]),
            hidden=list(payload["hidden"]),
            activation=payload["activation"],
            outcome_mode=payload["outcome_mode"],
            alpha=payload["alpha"],
            beta=payload["beta"],
            gamma=payload["gamma"],
            bandwidths=payload["bandwidths"],
            encoder=layers("encoder"),
            decoder=layers("decoder"),
            outcome_mean=payload["outcome_mean"],
            outcome_scale=payload["outcome_scale"],
        )
        if payload["feature_mean"] is not None:
            model.feature_mean = np.array(payload["feature_mean"], dtype=np.float64)
            model.feature_scale = np.array(payload["feature_scale"], dtype=np.float64)
        return model


def _logistic(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))


def init_model(
    p: int,
    d: int,
    hidden: Sequence[int],
    seed: int,
    feature_spec: Optional[Sequence[str]] = None,
    outcome_mode: str = BINARY,
    alpha: float = 1.0,
    beta: float = 0.1,
    gamma: float = 1.0,
    bandwidths: Optional[Sequence[float]] = None,
    activation: str = "relu",
) -> TreatmentVae:
    """Build a freshly initialized model; identical seeds give identical weights."""
    if p < 1:
        raise ConfigurationError(f"input dimension must be positive, got {p}")
    layout = LatentLayout(d)
    hidden = list(hidden)
    if any(h < 1 for h in hidden):
        raise ConfigurationError(f"hidden widths must be positive, got {hidden}")
    if activation not in _ACTIVATIONS:
        raise ConfigurationError(f"unknown activation {activation!r}")
    if outcome_mode not in (BINARY, CONTINUOUS):
        raise ConfigurationError(f"unknown outcome mode {outcome_mode!r}")
    if feature_spec is None:
        feature_spec = [CONTINUOUS] * p
    feature_spec = list(feature_spec)
    if len(feature_spec) != p:
        raise ConfigurationError("feature spec length must equal input dimension")

    rng = np.random.default_rng(seed)
    encoder = []
    widths = [p] + hidden + [2 * d]
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        encoder.append(_init_layer(rng, fan_in, fan_out))
    decoder = []
    widths = [d] + hidden[::-1] + [p]
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        decoder.append(_init_layer(rng, fan_in, fan_out))

    return TreatmentVae(
        layout=layout,
        feature_spec=feature_spec,
        hidden=hidden,
        activation=activation,
        outcome_mode=outcome_mode,
        alpha=alpha,
        beta=beta,
        gamma=gamma,
        bandwidths=None if bandwidths is None else list(bandwidths),
        encoder=encoder,
        decoder=decoder,
    )
