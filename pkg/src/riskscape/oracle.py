"""Population risk, gradient and Hessian for Gaussian designs.

With standard normal features (or mixture components with identity
covariance) every expectation depends on the parameter only through a
couple of projections, so high-dimensional integrals reduce to
low-dimensional ones:

* classification: a 2-d Gaussian integral over the span of ``theta`` and
  ``theta0`` (product of composite Gauss-Legendre rules whose segment width
  shrinks with the steepness of the logistic along each axis);
* robust regression with Gaussian / contaminated-Gaussian noise: the
  residual ``eps + <theta0 - theta, X>`` is a Gaussian mixture, so a 1-d
  integral per noise component, split at the loss breakpoints
  (piecewise Gauss-Legendre);
* gmm2: the log-likelihood ratio is linear in ``z``; closed-form moments
  plus a 1-d composite-rule integral per mixture component.

Derivatives are integrated analytically (differentiation under the
integral).  A Monte-Carlo method draws a large seeded sample and evaluates
the empirical quantities of :mod:`riskscape.models`; it also works for
non-identity feature covariances.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import special

from . import models
from .core import composite_normal_rule, gauss_legendre, rng_stream
from .errors import InvalidInput, Unsupported
from .optim import Objective

METHODS = ("quadrature", "monte-carlo")


@dataclass(frozen=True)
class NoiseLaw:
    """Centered Gaussian mixture: ``components`` is a tuple of ``(weight, variance)``."""

    components: tuple = ((1.0, 1.0),)

    @classmethod
    def gaussian(cls, var: float = 1.0) -> "NoiseLaw":
        return cls(((1.0, float(var)),))

    @classmethod
    def contaminated(cls, delta: float, var: float) -> "NoiseLaw":
        return cls(((1.0 - delta, 1.0), (float(delta), float(var))))

    @classmethod
    def none(cls) -> "NoiseLaw":
        return cls(((1.0, 0.0),))

    @classmethod
    def from_config(cls, cfg) -> "NoiseLaw":
        if cfg.noise == "none":
            return cls.none()
        if cfg.noise == "gaussian":
            return cls.gaussian(cfg.noise_var)
        return cls.contaminated(cfg.contamination, cfg.outlier_var)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        weights = np.array([w for w, _ in self.components])
        sds = np.sqrt([v for _, v in self.components])
        comp = rng.choice(len(weights), size=n, p=weights / weights.sum())
        return sds[comp] * rng.standard_normal(n)


def _span_basis(vectors, d: int) -> np.ndarray:
    """Orthonormal rows spanning ``vectors`` (at least one row)."""
    basis = []
    for v in vectors:
        w = np.array(v, dtype=float)
        for b in basis:
            w -= (b @ w) * b
        nrm = np.linalg.norm(w)
        if nrm > 1e-12 * max(1.0, np.linalg.norm(v)):
            basis.append(w / nrm)
    if not basis:
        e = np.zeros(d)
        e[0] = 1.0
        basis.append(e)
    return np.array(basis)


def _unit_or_axis(v) -> np.ndarray:
    nrm = np.linalg.norm(v)
    if nrm > 0:
        return v / nrm
    e = np.zeros_like(v)
    e[0] = 1.0
    return e


@dataclass(frozen=True)
class PopulationOracle:
    """Population risk oracle for one model and data law.

    ``theta0`` is the ground truth for classification / regression; for gmm2
    pass ``centers=(c1, c2)`` instead.
    """

    spec: models.ModelSpec
    theta0: Optional[np.ndarray] = None
    centers: Optional[tuple] = None
    noise: NoiseLaw = field(default_factory=NoiseLaw)
    method: str = "quadrature"
    nodes: int = 10
    mc_samples: int = 1_000_000
    seed: int = 20171
    feature_cov: Optional[np.ndarray] = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.method not in METHODS:
            raise Unsupported(f"unknown oracle method {self.method!r}")
        fam = self.spec.family
        if fam == "gmm2":
            if self.centers is None:
                raise InvalidInput("gmm2 oracle needs centers")
            c1, c2 = (np.asarray(c, dtype=float) for c in self.centers)
            object.__setattr__(self, "centers", (c1, c2))
        else:
            t0 = self.theta0 if self.theta0 is not None else self.spec.theta0
            if t0 is None:
                raise InvalidInput(f"{fam} oracle needs theta0")
            object.__setattr__(self, "theta0", np.asarray(t0, dtype=float))
        if self.method == "quadrature" and self.feature_cov is not None:
            raise Unsupported("reduced quadrature needs identity-covariance features; use monte-carlo")

    @property
    def d(self) -> int:
        return self.centers[0].size if self.spec.family == "gmm2" else self.theta0.size

    @property
    def p(self) -> int:
        return models.param_dim(self.spec.family, self.d)

    # ------------------------------------------------------------------ api

    def risk(self, theta) -> float:
        return self.evaluate(theta)[0]

    def grad(self, theta) -> np.ndarray:
        return self.evaluate(theta)[1].copy()

    def hessian(self, theta) -> np.ndarray:
        return self.evaluate(theta)[2].copy()

    def evaluate(self, theta):
        """``(risk, gradient, hessian)`` at ``theta`` (memoized)."""
        theta = np.asarray(theta, dtype=float).ravel()
        if theta.size != self.p:
            raise InvalidInput(f"theta has length {theta.size}, expected {self.p}")
        if not np.all(np.isfinite(theta)):
            raise InvalidInput("theta must be finite")
        key = theta.tobytes()
        hit = self._cache.get(key)
        if hit is None:
            if self.method == "monte-carlo":
                hit = self._mc(theta)
            elif self.spec.family == "classification":
                hit = self._classification(theta)
            elif self.spec.family == "robust-regression":
                hit = self._regression(theta)
            else:
                hit = self._gmm(theta)
            if len(self._cache) > 100_000:
                self._cache.clear()
            self._cache[key] = hit
        return hit

    def objective(self, radius: float = math.inf) -> Objective:
        return Objective(self.risk, self.grad, self.hessian, radius=radius)

    def risk_with_se(self, theta) -> tuple[float, float]:
        """Monte-Carlo risk and its standard error (Monte-Carlo method only)."""
        if self.method != "monte-carlo":
            raise Unsupported("standard errors are only defined for the monte-carlo method")
        losses = models.sample_losses(self.spec, self._mc_data(), theta)
        return float(losses.mean()), float(losses.std(ddof=1) / math.sqrt(losses.size))

    # --------------------------------------------------------- quadrature

    def _classification(self, theta):
        d = theta.size
        basis = _span_basis([theta, self.theta0], d)
        a = basis @ theta
        b = basis @ self.theta0
        w_nodes, w = self._normal_grid(np.maximum(np.abs(a), np.abs(b)))
        u = w_nodes @ a
        v = w_nodes @ b
        act = self.spec.activation
        s0 = act.value(v)
        loss, g1, g2 = models.classification_terms(u, s0, act)
        risk = float(w @ (loss + s0 * (1 - s0)))
        grad = basis.T @ ((w * g1) @ w_nodes)
        inner = (w_nodes.T * (w * g2)) @ w_nodes
        mean_g2 = float(w @ g2)
        hess = basis.T @ inner @ basis + mean_g2 * (np.eye(d) - basis.T @ basis)
        return risk, grad, 0.5 * (hess + hess.T)

    def _normal_grid(self, steepness):
        """Product rule for a standard normal vector; one axis per entry of ``steepness``."""
        axes = [composite_normal_rule(float(k), self.nodes) for k in steepness]
        if len(axes) == 1:
            return axes[0][0][:, None], axes[0][1]
        (x1, w1), (x2, w2) = axes
        a, b = np.meshgrid(x1, x2, indexing="ij")
        return np.column_stack([a.ravel(), b.ravel()]), np.outer(w1, w2).ravel()

    def _gaussian_moments(self, s: float, funcs):
        """``E[f(T)]`` for ``T ~ N(0, s^2)`` and each ``f`` in ``funcs``."""
        if s == 0:
            t = np.zeros(1)
            return [float(f(t)[0]) for f in funcs]
        lim = 12.0 * s
        cuts = sorted({-lim, lim, *(b for b in self.spec.loss.breakpoints if -lim < b < lim)})
        # split at the loss breakpoints, then into pieces no wider than s
        edges = [cuts[0]]
        for lo, hi in zip(cuts[:-1], cuts[1:]):
            edges.extend(np.linspace(lo, hi, int(math.ceil((hi - lo) / s)) + 1)[1:])
        edges = np.asarray(edges)
        rule = gauss_legendre(self.nodes)
        half = 0.5 * np.diff(edges)
        t = (0.5 * (edges[1:] + edges[:-1])[:, None] + half[:, None] * rule.nodes).ravel()
        dens = np.exp(-0.5 * (t / s) ** 2) / (s * math.sqrt(2 * math.pi))
        wt = (half[:, None] * rule.weights).ravel() * dens
        return [float(wt @ f(t)) for f in funcs]

    def _regression(self, theta):
        loss = self.spec.loss
        delta = self.theta0 - theta
        a = float(np.linalg.norm(delta))
        e = _unit_or_axis(delta)
        d = theta.size
        risk = 0.0
        gcoef = 0.0
        h_par = 0.0
        h_perp = 0.0
        for weight, var in self.noise.components:
            s2 = var + a * a
            s = math.sqrt(s2)
            e_rho, e_psi_t, e_dpsi, e_dpsi_t2 = self._gaussian_moments(
                s,
                [
                    loss.rho,
                    lambda t: loss.psi(t) * t,
                    loss.psi_prime,
                    lambda t: loss.psi_prime(t) * t * t,
                ],
            )
            risk += weight * e_rho
            h_perp += weight * e_dpsi
            if s2 > 0:
                # W | T is Gaussian: E[W | T] = a T / s^2, E[W^2 | T] = 1 - a^2/s^2 + a^2 T^2 / s^4
                gcoef += weight * a / s2 * e_psi_t
                h_par += weight * (e_dpsi * (1 - a * a / s2) + a * a / (s2 * s2) * e_dpsi_t2)
            else:
                h_par += weight * e_dpsi
        grad = -gcoef * e
        hess = h_perp * np.eye(d) + (h_par - h_perp) * np.outer(e, e)
        return risk, grad, hess

    def _gmm(self, theta):
        c1, c2 = self.centers
        d = c1.size
        t1, t2 = theta[:d], theta[d:]
        delta = t2 - t1
        dn = float(np.linalg.norm(delta))
        u = _unit_or_axis(delta)
        c0 = 0.5 * (t2 @ t2 - t1 @ t1)
        w_nodes, w = composite_normal_rule(dn, self.nodes)
        risk = 0.5 * d * math.log(2 * math.pi) + math.log(2.0)
        g1 = np.zeros(d)
        g2 = np.zeros(d)
        hess = np.zeros((2 * d, 2 * d))
        dd = np.concatenate([u, -u])
        proj = np.eye(d) - np.outer(u, u)
        pp = np.block([[proj, -proj], [-proj, proj]])
        m_p1 = 0.0
        m_p2 = 0.0
        for mu in (c1, c2):
            t = mu @ delta - c0 + dn * w_nodes
            p1 = special.expit(-t)
            p2 = special.expit(t)
            q = p1 * p2
            risk += 0.5 * (0.5 * (d + float((mu - t1) @ (mu - t1))) - float(w @ np.logaddexp(0.0, t)))
            e_p1, e_p1w = float(w @ p1), float(w @ (p1 * w_nodes))
            e_p2, e_p2w = float(w @ p2), float(w @ (p2 * w_nodes))
            g1 += 0.5 * (e_p1 * (t1 - mu) - e_p1w * u)
            g2 += 0.5 * (e_p2 * (t2 - mu) - e_p2w * u)
            m_p1 += 0.5 * e_p1
            m_p2 += 0.5 * e_p2
            eq, eqw, eqw2 = float(w @ q), float(w @ (q * w_nodes)), float(w @ (q * w_nodes**2))
            m = np.concatenate([mu - t1, t2 - mu])
            cc = eq * np.outer(m, m) + eqw * (np.outer(m, dd) + np.outer(dd, m)) + eqw2 * np.outer(dd, dd) + eq * pp
            hess -= 0.5 * cc
        idx = np.arange(d)
        hess[idx, idx] += m_p1
        hess[idx + d, idx + d] += m_p2
        return risk, np.concatenate([g1, g2]), 0.5 * (hess + hess.T)

    # -------------------------------------------------------- monte carlo

    def _mc_data(self) -> models.Dataset:
        data = self._cache.get("__mc_data__")
        if data is not None:
            return data
        m, d = self.mc_samples, self.d
        rng_x = rng_stream(self.seed, "oracle", "features")
        rng_y = rng_stream(self.seed, "oracle", "responses")
        x = rng_x.standard_normal((m, d))
        if self.feature_cov is not None:
            x = x @ np.linalg.cholesky(np.asarray(self.feature_cov, dtype=float)).T
        fam = self.spec.family
        if fam == "classification":
            y = (rng_y.random(m) < self.spec.activation.value(x @ self.theta0)).astype(float)
            data = models.Dataset(x, y, fam)
        elif fam == "robust-regression":
            data = models.Dataset(x, x @ self.theta0 + self.noise.sample(m, rng_y), fam)
        else:
            c1, c2 = self.centers
            second = rng_y.random(m) < 0.5
            data = models.Dataset(np.where(second[:, None], c2, c1) + x, None, fam)
        self._cache["__mc_data__"] = data
        return data

    def _mc(self, theta):
        data = self._mc_data()
        return (
            models.risk(self.spec, data, theta),
            models.gradient(self.spec, data, theta),
            models.hessian(self.spec, data, theta),
        )


def oracle_for(spec: models.ModelSpec, truth, noise: NoiseLaw | None = None, **kw) -> PopulationOracle:
    """Convenience constructor: ``truth`` is ``theta0`` or the gmm2 center pair."""
    if spec.family == "gmm2":
        return PopulationOracle(spec, centers=tuple(truth), **kw)
    return PopulationOracle(spec, theta0=np.asarray(truth, dtype=float), noise=noise or NoiseLaw(), **kw)


def mc_pop_gap(spec: models.ModelSpec, data: models.Dataset, oracle: PopulationOracle, thetas) -> dict:
    """Largest empirical-vs-population gradient and Hessian gaps over a parameter grid.

    Returns ``sup_grad_gap`` (l2) and ``sup_hess_gap`` (operator norm), the
    grid indices attaining them and the grid size.  The supremum is over the
    supplied points only.
    """
    if data.n == 0:
        raise InvalidInput("empty dataset")
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    if thetas.shape[0] == 0:
        raise InvalidInput("empty parameter grid")
    if np.isfinite(spec.radius) and np.any(np.linalg.norm(thetas, axis=1) > spec.radius * (1 + 1e-12)):
        raise InvalidInput("grid points must lie in the constraint ball")
    grad_gaps = np.empty(len(thetas))
    hess_gaps = np.empty(len(thetas))
    for i, theta in enumerate(thetas):
        _, pg, ph = oracle.evaluate(theta)
        grad_gaps[i] = np.linalg.norm(models.gradient(spec, data, theta) - pg)
        hess_gaps[i] = np.linalg.norm(models.hessian(spec, data, theta) - ph, ord=2)
    return {
        "sup_grad_gap": float(grad_gaps.max()),
        "sup_hess_gap": float(hess_gaps.max()),
        "argmax_grad": int(grad_gaps.argmax()),
        "argmax_hess": int(hess_gaps.argmax()),
        "grid_size": int(len(thetas)),
    }


def ball_grid(n_points: int, d: int, radius: float, seed: int) -> np.ndarray:
    """Seeded points uniform in the ball of radius ``radius``."""
    rng = rng_stream(seed, "ball-grid")
    g = rng.standard_normal((n_points, d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    r = radius * rng.random(n_points) ** (1.0 / d)
    return g * r[:, None]
