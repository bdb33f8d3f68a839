"""Seeded synthetic data for the three model families.

Every generator draws from independent Philox streams keyed by the config
seed and a purpose label (``theta0``, ``features``, ``responses``), so e.g.
switching the noise law leaves the feature matrix unchanged.  Normal variates
come from numpy's ziggurat sampler (``Generator.standard_normal``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .core import rng_stream
from .errors import InvalidInput
from .models import LOGISTIC, Activation, Dataset

NOISE_LAWS = ("gaussian", "contaminated", "none")


@dataclass(frozen=True)
class GenConfig:
    family: str
    n: int
    d: int
    seed: int = 0
    theta0: Optional[np.ndarray] = None
    theta0_norm: float = 1.0
    sparsity: Optional[int] = None
    noise: str = "gaussian"
    noise_var: float = 1.0
    contamination: float = 0.0
    outlier_var: float = 1.0
    feature_cov: Optional[np.ndarray] = None
    separation: float = 1.5
    centers: Optional[tuple] = None
    activation: Activation = LOGISTIC

    def __post_init__(self):
        if self.n < 0 or self.d < 1:
            raise InvalidInput(f"need n >= 0 and d >= 1, got n={self.n}, d={self.d}")
        if self.noise not in NOISE_LAWS:
            raise InvalidInput(f"unknown noise law {self.noise!r}")
        if not 0 <= self.contamination <= 1:
            raise InvalidInput("contamination fraction must lie in [0, 1]")
        if self.noise_var < 0 or self.outlier_var < 0:
            raise InvalidInput("variances must be nonnegative")
        if self.separation < 0:
            raise InvalidInput("separation must be nonnegative")
        if self.theta0_norm < 0:
            raise InvalidInput("theta0 norm must be nonnegative")
        if self.sparsity is not None and not 1 <= self.sparsity <= self.d:
            raise InvalidInput(f"sparsity must be in [1, d], got {self.sparsity}")
        if self.theta0 is not None and np.asarray(self.theta0).size != self.d:
            raise InvalidInput("explicit theta0 has the wrong length")
        if self.feature_cov is not None and np.shape(self.feature_cov) != (self.d, self.d):
            raise InvalidInput("feature covariance must be d x d")

    def with_seed(self, seed: int) -> "GenConfig":
        return replace(self, seed=seed)


def random_unit(d: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal(d)
    while np.linalg.norm(v) == 0:
        v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def sparse_vector(d: int, s0: int, rng: np.random.Generator, norm: float = 1.0) -> np.ndarray:
    """``s0`` entries of size ``norm / sqrt(s0)`` on a uniformly random support."""
    theta = np.zeros(d)
    theta[rng.choice(d, size=s0, replace=False)] = norm / math.sqrt(s0)
    return theta


def make_theta0(cfg: GenConfig) -> np.ndarray:
    if cfg.theta0 is not None:
        return np.asarray(cfg.theta0, dtype=float).copy()
    rng = rng_stream(cfg.seed, "theta0")
    if cfg.sparsity is not None:
        return sparse_vector(cfg.d, cfg.sparsity, rng, cfg.theta0_norm)
    return cfg.theta0_norm * random_unit(cfg.d, rng)


def make_features(cfg: GenConfig) -> np.ndarray:
    rng = rng_stream(cfg.seed, "features")
    x = rng.standard_normal((cfg.n, cfg.d))
    if cfg.feature_cov is not None:
        x = x @ np.linalg.cholesky(np.asarray(cfg.feature_cov, dtype=float)).T
    return x


def make_noise(cfg: GenConfig, rng: np.random.Generator) -> np.ndarray:
    if cfg.noise == "none":
        return np.zeros(cfg.n)
    if cfg.noise == "gaussian":
        return math.sqrt(cfg.noise_var) * rng.standard_normal(cfg.n)
    # (1 - delta) N(0, 1) + delta N(0, sigma^2)
    outlier = rng.random(cfg.n) < cfg.contamination
    scale = np.where(outlier, math.sqrt(cfg.outlier_var), 1.0)
    return scale * rng.standard_normal(cfg.n)


def gen_classification(cfg: GenConfig) -> tuple[Dataset, np.ndarray]:
    """Labels with ``P(y = 1 | x) = sigma(<theta0, x>)``."""
    if cfg.family != "classification":
        raise InvalidInput(f"config family is {cfg.family!r}, not classification")
    theta0 = make_theta0(cfg)
    x = make_features(cfg)
    u = rng_stream(cfg.seed, "responses").random(cfg.n)
    y = (u < cfg.activation.value(x @ theta0)).astype(float)
    return Dataset(x, y, "classification"), theta0


def gen_regression(cfg: GenConfig) -> tuple[Dataset, np.ndarray]:
    """Linear responses ``y = <theta0, x> + noise``."""
    if cfg.family != "robust-regression":
        raise InvalidInput(f"config family is {cfg.family!r}, not robust-regression")
    theta0 = make_theta0(cfg)
    x = make_features(cfg)
    y = x @ theta0 + make_noise(cfg, rng_stream(cfg.seed, "responses"))
    return Dataset(x, y, "robust-regression"), theta0


def gmm_centers(cfg: GenConfig) -> tuple[np.ndarray, np.ndarray]:
    """Centers ``-D u`` and ``+D u`` for a seeded random unit ``u`` (or explicit ones)."""
    if cfg.centers is not None:
        c1, c2 = (np.asarray(c, dtype=float).copy() for c in cfg.centers)
        if c1.size != cfg.d or c2.size != cfg.d:
            raise InvalidInput("explicit centers have the wrong length")
        return c1, c2
    u = random_unit(cfg.d, rng_stream(cfg.seed, "theta0"))
    return -cfg.separation * u, cfg.separation * u


def gen_gmm2(cfg: GenConfig) -> tuple[Dataset, tuple[np.ndarray, np.ndarray]]:
    """Equal-weight two-component mixture with identity covariance; labels discarded."""
    if cfg.family != "gmm2":
        raise InvalidInput(f"config family is {cfg.family!r}, not gmm2")
    c1, c2 = gmm_centers(cfg)
    noise = make_features(cfg)
    second = rng_stream(cfg.seed, "responses").random(cfg.n) < 0.5
    z = np.where(second[:, None], c2, c1) + noise
    return Dataset(z, None, "gmm2"), (c1, c2)


def generate(cfg: GenConfig):
    """Dispatch on ``cfg.family``; returns ``(dataset, truth)``."""
    if cfg.family == "classification":
        return gen_classification(cfg)
    if cfg.family == "robust-regression":
        return gen_regression(cfg)
    if cfg.family == "gmm2":
        return gen_gmm2(cfg)
    raise InvalidInput(f"unknown family {cfg.family!r}")
