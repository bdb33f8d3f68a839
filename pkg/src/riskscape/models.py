"""Loss families: empirical risk, gradient and Hessian at a parameter point.

Three families are supported:

``classification``
    non-linear square loss ``(y - sigma(<theta, x>))**2`` with labels in {0, 1};
``robust-regression``
    ``rho(y - <theta, x>)`` for a robust loss ``rho`` (Tukey bisquare, Huber);
``gmm2``
    negative log-likelihood of an equal-weight, identity-covariance mixture of
    two Gaussians with centers ``theta = (theta_1, theta_2)``.

The gmm2 risk is the full negative log-density: both the ``(2*pi)^(d/2)``
normalization and the ``1/2`` mixing weights are kept, so at
``theta_1 == theta_2`` it equals the single-Gaussian NLL exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import special

from .errors import InvalidInput

FAMILIES = ("classification", "robust-regression", "gmm2")

ScalarFn = Callable[[np.ndarray], np.ndarray]


# --------------------------------------------------------------------------
# activations


@dataclass(frozen=True)
class Activation:
    name: str
    value: ScalarFn
    first: ScalarFn
    second: ScalarFn
    third: ScalarFn


def _logistic_first(z):
    s = special.expit(z)
    return s * (1 - s)


def _logistic_second(z):
    s = special.expit(z)
    return s * (1 - s) * (1 - 2 * s)


def _logistic_third(z):
    s = special.expit(z)
    return s * (1 - s) * (1 - 6 * s + 6 * s * s)


def _npdf(z):
    return np.exp(-0.5 * np.square(z)) / math.sqrt(2 * math.pi)


LOGISTIC = Activation("logistic", special.expit, _logistic_first, _logistic_second, _logistic_third)
PROBIT = Activation(
    "probit",
    special.ndtr,
    _npdf,
    lambda z: -z * _npdf(z),
    lambda z: (np.square(z) - 1) * _npdf(z),
)

ACTIVATIONS = {"logistic": LOGISTIC, "probit": PROBIT}


# --------------------------------------------------------------------------
# robust losses


@dataclass(frozen=True)
class RobustLoss:
    """A robust loss ``rho`` with score ``psi = rho'`` and two more derivatives.

    ``breakpoints`` lists the points where the piecewise definition changes;
    the population oracle splits its integrals there.
    """

    name: str
    rho: ScalarFn
    psi: ScalarFn
    psi_prime: ScalarFn
    psi_second: ScalarFn
    t0: float
    breakpoints: tuple = ()


def tukey(t0: float = 4.685) -> RobustLoss:
    """Tukey's bisquare, bounded in [0, 1] and equal to 1 for ``|t| >= t0``."""
    if t0 <= 0:
        raise InvalidInput("tukey cutoff must be positive")

    def inside(t):
        u = np.asarray(t, dtype=float) / t0
        return u, np.abs(u) < 1

    def rho(t):
        u, m = inside(t)
        return np.where(m, 1 - (1 - u * u) ** 3, 1.0)

    def psi(t):
        u, m = inside(t)
        return np.where(m, 6 * u * (1 - u * u) ** 2 / t0, 0.0)

    def psi_prime(t):
        u, m = inside(t)
        return np.where(m, 6 * (1 - u * u) * (1 - 5 * u * u) / t0**2, 0.0)

    def psi_second(t):
        u, m = inside(t)
        return np.where(m, 24 * u * (5 * u * u - 3) / t0**3, 0.0)

    return RobustLoss("tukey", rho, psi, psi_prime, psi_second, float(t0), (-float(t0), float(t0)))


def huber(c: float = 1.345) -> RobustLoss:
    """Huber loss ``t^2/2`` inside ``[-c, c]``, linear outside (so ``rho'' <= 1``)."""
    if c <= 0:
        raise InvalidInput("huber threshold must be positive")

    def rho(t):
        a = np.abs(t)
        return np.where(a <= c, 0.5 * a * a, c * a - 0.5 * c * c)

    def psi(t):
        return np.clip(t, -c, c)

    def psi_prime(t):
        return np.where(np.abs(t) < c, 1.0, 0.0)

    def psi_second(t):
        return np.zeros_like(np.asarray(t, dtype=float))

    return RobustLoss("huber", rho, psi, psi_prime, psi_second, float(c), (-float(c), float(c)))


def square_loss() -> RobustLoss:
    """Plain least squares ``t^2/2``; used as a baseline."""
    return RobustLoss(
        "square",
        lambda t: 0.5 * np.square(t),
        lambda t: np.asarray(t, dtype=float),
        lambda t: np.ones_like(np.asarray(t, dtype=float)),
        lambda t: np.zeros_like(np.asarray(t, dtype=float)),
        1.0,
        (),
    )


def make_loss(name: str, param: float | None = None) -> RobustLoss:
    if name == "tukey":
        return tukey(4.685 if param is None else param)
    if name == "huber":
        return huber(1.345 if param is None else param)
    if name == "square":
        return square_loss()
    raise InvalidInput(f"unknown robust loss {name!r}")


# --------------------------------------------------------------------------
# specs and data


@dataclass(frozen=True)
class ModelSpec:
    family: str
    radius: float = math.inf
    activation: Activation = LOGISTIC
    loss: RobustLoss = field(default_factory=tukey)
    theta0: Optional[np.ndarray] = None
    lam: float = 0.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InvalidInput(f"unknown family {self.family!r}")
        if not self.radius > 0:
            raise InvalidInput("radius must be positive")
        if self.lam < 0:
            raise InvalidInput("lambda must be nonnegative")
        if self.theta0 is not None:
            t0 = np.asarray(self.theta0, dtype=float)
            object.__setattr__(self, "theta0", t0)
            if self.family != "gmm2" and math.isfinite(self.radius):
                limit = self.radius / (2 if self.lam > 0 else 3)
                if np.linalg.norm(t0) > limit * (1 + 1e-12):
                    raise InvalidInput(
                        f"||theta0|| = {np.linalg.norm(t0):.4g} exceeds {limit:.4g} for radius {self.radius}"
                    )


@dataclass(frozen=True)
class Dataset:
    """``n`` samples: features (n, d) and optional responses (n,)."""

    features: np.ndarray
    responses: Optional[np.ndarray] = None
    family: str = "classification"

    def __post_init__(self):
        x = np.ascontiguousarray(np.atleast_2d(np.asarray(self.features, dtype=float)))
        if x.ndim != 2:
            raise InvalidInput("features must be a 2-d array")
        if not np.all(np.isfinite(x)):
            raise InvalidInput("features contain non-finite values")
        object.__setattr__(self, "features", x)
        if self.family not in FAMILIES:
            raise InvalidInput(f"unknown family {self.family!r}")
        if self.family == "gmm2":
            if self.responses is not None:
                raise InvalidInput("gmm2 datasets carry no responses")
            return
        if self.responses is None:
            raise InvalidInput(f"{self.family} datasets need responses")
        y = np.ascontiguousarray(np.asarray(self.responses, dtype=float).ravel())
        if y.shape[0] != x.shape[0]:
            raise InvalidInput("responses and features disagree on n")
        if not np.all(np.isfinite(y)):
            raise InvalidInput("responses contain non-finite values")
        if self.family == "classification" and not np.all((y == 0) | (y == 1)):
            raise InvalidInput("classification labels must be 0 or 1")
        object.__setattr__(self, "responses", y)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        y = None if self.responses is None else self.responses[idx]
        return Dataset(self.features[idx], y, self.family)


def param_dim(family: str, d: int) -> int:
    return 2 * d if family == "gmm2" else d


def _check(spec: ModelSpec, data: Dataset, theta) -> np.ndarray:
    if data.family != spec.family:
        raise InvalidInput(f"dataset family {data.family!r} does not match model {spec.family!r}")
    theta = np.asarray(theta, dtype=float).ravel()
    if theta.size != param_dim(spec.family, data.d):
        raise InvalidInput(f"theta has length {theta.size}, expected {param_dim(spec.family, data.d)}")
    if not np.all(np.isfinite(theta)):
        raise InvalidInput("theta has non-finite entries")
    if data.n == 0:
        raise InvalidInput("empty dataset")
    return theta


# --------------------------------------------------------------------------
# scalar kernels shared with the population oracle


def classification_terms(u, y, act: Activation, order: int = 2):
    """Loss and its first two derivatives in ``u = <theta, x>`` for the square loss.

    ``y`` may be a conditional mean in [0, 1]; the derivatives are linear in
    ``y`` so the tower property applies to them directly.  Derivatives above
    ``order`` are returned as ``None``.
    """
    s = act.value(u)
    resid = y - s
    if order == 0:
        return resid**2, None, None
    s1 = act.first(u)
    if order == 1:
        return resid**2, -2 * resid * s1, None
    return resid**2, -2 * resid * s1, 2 * (s1 * s1 - resid * act.second(u))


def gmm_terms(z, theta1, theta2):
    """Per-sample loss and the two component posteriors ``(p1, p2)``."""
    z = np.atleast_2d(z)
    d = z.shape[1]
    a1 = -0.5 * np.sum((z - theta1) ** 2, axis=1)
    a2 = -0.5 * np.sum((z - theta2) ** 2, axis=1)
    loss = 0.5 * d * math.log(2 * math.pi) + math.log(2.0) - np.logaddexp(a1, a2)
    p1 = special.expit(a1 - a2)
    p2 = special.expit(a2 - a1)
    return loss, p1, p2


def posterior(z, theta1, theta2) -> np.ndarray:
    """Posterior probability that each row of ``z`` came from component 1."""
    return gmm_terms(z, np.asarray(theta1, float), np.asarray(theta2, float))[1]


def split(theta, d: int):
    theta = np.asarray(theta, dtype=float)
    return theta[:d], theta[d:]


def swap(theta) -> np.ndarray:
    """Exchange the two gmm2 component blocks."""
    theta = np.asarray(theta, dtype=float)
    d = theta.size // 2
    return np.concatenate([theta[d:], theta[:d]])


# --------------------------------------------------------------------------
# empirical risk and derivatives


def sample_losses(spec: ModelSpec, data: Dataset, theta) -> np.ndarray:
    """Per-sample losses ``l(theta; z_i)``."""
    theta = _check(spec, data, theta)
    x = data.features
    if spec.family == "classification":
        return classification_terms(x @ theta, data.responses, spec.activation, order=0)[0]
    if spec.family == "robust-regression":
        return spec.loss.rho(data.responses - x @ theta)
    t1, t2 = split(theta, data.d)
    return gmm_terms(x, t1, t2)[0]


def risk(spec: ModelSpec, data: Dataset, theta) -> float:
    """Empirical risk: mean per-sample loss (no l1 penalty)."""
    return float(np.mean(sample_losses(spec, data, theta)))


def objective(spec: ModelSpec, data: Dataset, theta) -> float:
    """Empirical risk plus ``lam * ||theta||_1``."""
    val = risk(spec, data, theta)
    if spec.lam:
        val += spec.lam * float(np.sum(np.abs(theta)))
    return val


def _sample_grads(spec, data, theta, idx=slice(None)):
    x = data.features[idx]
    if spec.family == "classification":
        _, g1, _ = classification_terms(x @ theta, data.responses[idx], spec.activation, order=1)
        return g1[:, None] * x
    if spec.family == "robust-regression":
        return -spec.loss.psi(data.responses[idx] - x @ theta)[:, None] * x
    t1, t2 = split(theta, data.d)
    _, p1, p2 = gmm_terms(x, t1, t2)
    return np.hstack([p1[:, None] * (t1 - x), p2[:, None] * (t2 - x)])


def gradient(spec: ModelSpec, data: Dataset, theta) -> np.ndarray:
    theta = _check(spec, data, theta)
    x = data.features
    n = data.n
    if spec.family == "classification":
        _, g1, _ = classification_terms(x @ theta, data.responses, spec.activation, order=1)
        return x.T @ g1 / n
    if spec.family == "robust-regression":
        return -(x.T @ spec.loss.psi(data.responses - x @ theta)) / n
    t1, t2 = split(theta, data.d)
    _, p1, p2 = gmm_terms(x, t1, t2)
    g1 = np.mean(p1) * t1 - p1 @ x / n
    g2 = np.mean(p2) * t2 - p2 @ x / n
    return np.concatenate([g1, g2])


def value_and_gradient(spec: ModelSpec, data: Dataset, theta) -> tuple[float, np.ndarray]:
    """Risk and gradient from one pass over the data."""
    theta = _check(spec, data, theta)
    x = data.features
    n = data.n
    if spec.family == "classification":
        loss, g1, _ = classification_terms(x @ theta, data.responses, spec.activation, order=1)
        return float(np.mean(loss)), x.T @ g1 / n
    if spec.family == "robust-regression":
        t = data.responses - x @ theta
        return float(np.mean(spec.loss.rho(t))), -(x.T @ spec.loss.psi(t)) / n
    t1, t2 = split(theta, data.d)
    loss, p1, p2 = gmm_terms(x, t1, t2)
    return float(np.mean(loss)), np.concatenate([np.mean(p1) * t1 - p1 @ x / n, np.mean(p2) * t2 - p2 @ x / n])


def per_sample_grad(spec: ModelSpec, data: Dataset, i: int, theta) -> np.ndarray:
    theta = _check(spec, data, theta)
    if not 0 <= i < data.n:
        raise InvalidInput(f"sample index {i} out of range for n = {data.n}")
    return _sample_grads(spec, data, theta, slice(i, i + 1))[0]


def per_sample_grads(spec: ModelSpec, data: Dataset, theta) -> np.ndarray:
    """All per-sample gradients as an (n, p) array."""
    return _sample_grads(spec, data, _check(spec, data, theta))


def gmm_hessian_terms(z, theta1, theta2, weights=None):
    """Weighted average of per-sample gmm2 Hessians.

    ``weights`` (default uniform) are probability weights over rows of ``z``.
    """
    z = np.atleast_2d(z)
    d = z.shape[1]
    if weights is None:
        weights = np.full(z.shape[0], 1.0 / z.shape[0])
    _, p1, p2 = gmm_terms(z, theta1, theta2)
    c = np.hstack([z - theta1, theta2 - z])
    hess = -(c.T * (weights * p1 * p2)) @ c
    m1 = float(weights @ p1)
    m2 = float(weights @ p2)
    idx = np.arange(d)
    hess[idx, idx] += m1
    hess[idx + d, idx + d] += m2
    return 0.5 * (hess + hess.T)


def hessian(spec: ModelSpec, data: Dataset, theta) -> np.ndarray:
    theta = _check(spec, data, theta)
    x = data.features
    n = data.n
    if spec.family == "classification":
        _, _, beta = classification_terms(x @ theta, data.responses, spec.activation)
        h = (x.T * beta) @ x / n
    elif spec.family == "robust-regression":
        w = spec.loss.psi_prime(data.responses - x @ theta)
        h = (x.T * w) @ x / n
    else:
        t1, t2 = split(theta, data.d)
        h = gmm_hessian_terms(x, t1, t2)
    return 0.5 * (h + h.T)
