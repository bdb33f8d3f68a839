"""Projected gradient descent, proximal gradient and an exact trust-region method.

All three return a :class:`Trajectory`.  They operate on an
:class:`Objective` (value / gradient / Hessian callables); the ``spec, data``
entry points wrap the empirical risk of :mod:`riskscape.models`.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.optimize import brentq

from . import models
from .core import project_ball, soft_threshold, sym_eigen
from .errors import DivergenceError, InvalidInput

log = logging.getLogger(__name__)

METHODS = ("gd", "proxgd", "trust-region")


@dataclass(frozen=True)
class Objective:
    """A smooth function with optional ball radius and l1 weight attached."""

    value: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]
    hess: Optional[Callable[[np.ndarray], np.ndarray]] = None
    radius: float = math.inf
    lam: float = 0.0
    value_grad: Optional[Callable[[np.ndarray], tuple]] = None

    def evaluate(self, t):
        """``(value, gradient)``, fused when the objective provides it."""
        if self.value_grad is not None:
            return self.value_grad(t)
        return float(self.value(t)), self.grad(t)


def empirical_objective(spec: models.ModelSpec, data: models.Dataset) -> Objective:
    return Objective(
        value=lambda t: models.risk(spec, data, t),
        grad=lambda t: models.gradient(spec, data, t),
        hess=lambda t: models.hessian(spec, data, t),
        radius=spec.radius,
        lam=spec.lam,
        value_grad=lambda t: models.value_and_gradient(spec, data, t),
    )


def quadratic_objective(center, hess=None, radius: float = math.inf, lam: float = 0.0) -> Objective:
    """``(1/2) (t - c)^T A (t - c)`` with ``A = I`` by default; a test objective."""
    c = np.asarray(center, dtype=float)
    a = np.eye(c.size) if hess is None else np.asarray(hess, dtype=float)
    return Objective(
        value=lambda t: 0.5 * float((t - c) @ a @ (t - c)),
        grad=lambda t: a @ (t - c),
        hess=lambda t: a.copy(),
        radius=radius,
        lam=lam,
    )


@dataclass(frozen=True)
class OptConfig:
    method: str = "gd"
    step: float = 1.0
    max_iter: int = 10_000
    grad_tol: float = 1e-8
    move_tol: float = 1e-12
    radius: Optional[float] = None
    lam: Optional[float] = None
    halving: bool = False
    max_halvings: int = 30
    tr_radius: float = 1.0
    tr_max_radius: float = 1e3
    eta_accept: float = 0.1
    shrink: float = 0.25
    grow: float = 2.0
    curvature_tol: float = 1e-8
    store_all: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidInput(f"unknown method {self.method!r}")
        if not self.step > 0:
            raise InvalidInput("step size must be positive")
        if self.max_iter < 1:
            raise InvalidInput("max_iter must be at least 1")
        if min(self.grad_tol, self.move_tol, self.curvature_tol) < 0:
            raise InvalidInput("tolerances must be nonnegative")
        if self.radius is not None and not self.radius > 0:
            raise InvalidInput("radius must be positive")
        if self.lam is not None and self.lam < 0:
            raise InvalidInput("lambda must be nonnegative")
        if not (0 < self.shrink < 1 < self.grow) or not 0 <= self.eta_accept < 1 or self.tr_radius <= 0:
            raise InvalidInput("invalid trust-region parameters")

    def with_(self, **kw) -> "OptConfig":
        return replace(self, **kw)


@dataclass
class Trajectory:
    """Optimizer history.

    ``risks``, ``objectives`` and ``grad_norms`` have one entry per iteration
    ``k = 0..n_iter``.  Iterates are stored at the indices listed in ``ks``:
    every iteration up to 1000, then every 10th, plus the last one (all of
    them with ``OptConfig(store_all=True)``).  For gd/proxgd ``grad_norms``
    holds the gradient-map norm ``||t - step(t)|| / h``, which equals the
    gradient norm away from the ball boundary and without l1 term.
    """

    method: str
    iterates: list = field(default_factory=list)
    ks: list = field(default_factory=list)
    risks: list = field(default_factory=list)
    objectives: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    converged: bool = False
    reason: str = ""
    final: Optional[np.ndarray] = None
    min_eigenvalue: Optional[float] = None

    @property
    def n_iter(self) -> int:
        return len(self.risks) - 1

    def _record(self, theta, risk, obj, gnorm, store_all):
        k = len(self.risks)
        self.risks.append(risk)
        self.objectives.append(obj)
        self.grad_norms.append(gnorm)
        if store_all or k <= 1000 or k % 10 == 0:
            self.iterates.append(theta.copy())
            self.ks.append(k)

    def _finish(self, theta, converged, reason):
        k = len(self.risks) - 1
        if not self.ks or self.ks[-1] != k:
            self.iterates.append(theta.copy())
            self.ks.append(k)
        self.final = theta.copy()
        self.converged = converged
        self.reason = reason
        return self

    def iterate_at(self, k: int) -> np.ndarray:
        return self.iterates[self.ks.index(k)]


def _finite(theta, value, traj):
    if not (math.isfinite(value) and np.all(np.isfinite(theta))):
        traj._finish(theta, False, "diverged")
        raise DivergenceError(f"non-finite risk at iteration {traj.n_iter + 1}", traj)


def _penalty(lam, theta):
    return lam * float(np.sum(np.abs(theta))) if lam else 0.0


def minimize_prox(objective: Objective, init, cfg: OptConfig, method: str = "proxgd") -> Trajectory:
    """Proximal gradient with ball projection; plain projected gd when ``lam == 0``.

    Update: ``project_ball(soft_threshold(t - h g, h lam), r)``.
    """
    r = objective.radius if cfg.radius is None else cfg.radius
    lam = objective.lam if cfg.lam is None else cfg.lam
    if method == "gd":
        lam = 0.0
    theta = np.asarray(init, dtype=float).copy()
    if np.linalg.norm(theta) > r * (1 + 1e-12):
        raise InvalidInput(f"initial point has norm {np.linalg.norm(theta):.4g} > radius {r}")
    h = cfg.step
    traj = Trajectory(method)

    def step_from(t, g, h):
        cand = t - h * g
        if lam:
            cand = soft_threshold(cand, h * lam)
        return project_ball(cand, r)

    f = float(objective.value(theta))
    _finite(theta, f, traj)
    g = objective.grad(theta)
    for _ in range(cfg.max_iter + 1):
        F = f + _penalty(lam, theta)
        cand = step_from(theta, g, h)
        stat = float(np.linalg.norm(theta - cand)) / h
        traj._record(theta, f, F, stat, cfg.store_all)
        if stat <= cfg.grad_tol * max(1.0, abs(f)):
            return traj._finish(theta, True, "tolerance")
        if traj.n_iter >= cfg.max_iter:
            break
        f_new, g_new = objective.evaluate(cand)
        if cfg.halving:
            halvings = 0
            while not (math.isfinite(f_new) and f_new + _penalty(lam, cand) <= F) and halvings < cfg.max_halvings:
                h *= 0.5
                halvings += 1
                cand = step_from(theta, g, h)
                f_new, g_new = objective.evaluate(cand)
            if halvings:
                log.info("step halved %d times to h=%g at iteration %d", halvings, h, traj.n_iter)
        move = float(np.linalg.norm(cand - theta))
        theta, f = cand, float(f_new)
        _finite(theta, f, traj)
        g = g_new
        if move <= cfg.move_tol:
            F = f + _penalty(lam, theta)
            traj._record(theta, f, F, float(np.linalg.norm(theta - step_from(theta, g, h))) / h, cfg.store_all)
            return traj._finish(theta, True, "move")
    return traj._finish(theta, False, "max-iters")


def minimize_gd(objective: Objective, init, cfg: OptConfig) -> Trajectory:
    return minimize_prox(objective, init, cfg, method="gd")


def gd_projected(spec, data, init, cfg: OptConfig) -> Trajectory:
    """Projected gradient descent on the empirical risk (l1 weight ignored)."""
    return minimize_gd(empirical_objective(spec, data), init, cfg)


def prox_gd(spec, data, init, cfg: OptConfig) -> Trajectory:
    """Proximal gradient on ``risk + lam ||t||_1`` subject to ``||t|| <= r``."""
    return minimize_prox(empirical_objective(spec, data), init, cfg)


# --------------------------------------------------------------------------
# trust region


def solve_tr_subproblem(g, hess, delta: float, eig=None):
    """Exact minimizer of ``<g, s> + (1/2) <s, H s>`` over ``||s|| <= delta``.

    Uses a full eigendecomposition and a bracketed root find on
    ``||s(lam)|| = delta``; the hard case is closed with a step along the
    eigenvector(s) of the smallest eigenvalue.  Returns ``(s, lam)``.
    """
    g = np.asarray(g, dtype=float)
    if eig is None:
        eig = sym_eigen(hess)
    vals, vecs = eig.values, eig.vectors
    gh = vecs.T @ g
    lmin = float(vals[-1])
    scale = max(1.0, float(np.max(np.abs(vals))))

    def step(lam):
        return -(vecs @ (gh / (vals + lam)))

    if lmin > 1e-14 * scale:
        s = step(0.0)
        if np.linalg.norm(s) <= delta:
            return s, 0.0
    lo = max(0.0, -lmin)
    # the bound is attained when g lies in the bottom eigenspace; pad it
    hi = lo + 2.0 * float(np.linalg.norm(g)) / delta

    def excess(lam):
        return float(np.linalg.norm(step(lam))) - delta

    probe = lo + 1e-12 * scale
    if excess(probe) > 0:
        lam = brentq(excess, probe, max(hi, 2 * probe), xtol=1e-15, rtol=1e-13, maxiter=500)
        return step(lam), lam
    # hard case: g (numerically) orthogonal to the bottom eigenspace
    bottom = vals <= lmin + 1e-10 * scale
    s = np.zeros_like(g)
    if not bottom.all():
        s = -(vecs[:, ~bottom] @ (gh[~bottom] / (vals[~bottom] + lo)))
    rem = delta**2 - float(s @ s)
    if lmin < 0 and rem > 0:
        q = vecs[:, -1]
        tau = math.sqrt(rem)
        s = s - tau * q if q @ g > 0 else s + tau * q
    return s, lo


def minimize_tr(objective: Objective, init, cfg: OptConfig) -> Trajectory:
    if objective.hess is None:
        raise InvalidInput("trust region needs a Hessian")
    theta = np.asarray(init, dtype=float).copy()
    if not np.all(np.isfinite(theta)):
        raise InvalidInput("initial point must be finite")
    traj = Trajectory("trust-region")
    delta = cfg.tr_radius
    f = float(objective.value(theta))
    _finite(theta, f, traj)
    g = objective.grad(theta)
    hess = objective.hess(theta)
    traj._record(theta, f, f, float(np.linalg.norm(g)), cfg.store_all)
    for _ in range(cfg.max_iter):
        eig = sym_eigen(hess)
        traj.min_eigenvalue = eig.min
        gnorm = float(np.linalg.norm(g))
        if gnorm <= cfg.grad_tol * max(1.0, abs(f)) and eig.min >= -cfg.curvature_tol:
            return traj._finish(theta, True, "second-order")
        s, _ = solve_tr_subproblem(g, hess, delta, eig)
        pred = -(float(g @ s) + 0.5 * float(s @ hess @ s))
        snorm = float(np.linalg.norm(s))
        if pred <= 0 or snorm == 0:
            return traj._finish(theta, gnorm <= cfg.grad_tol * max(1.0, abs(f)), "stalled")
        cand = theta + s
        f_new = float(objective.value(cand))
        ratio = (f - f_new) / pred if math.isfinite(f_new) else -math.inf
        if ratio < 0.25:
            delta *= cfg.shrink
        elif ratio > 0.75 and snorm >= 0.99 * delta:
            delta = min(cfg.grow * delta, cfg.tr_max_radius)
        if ratio >= cfg.eta_accept and f_new < f:
            theta, f = cand, f_new
            g = objective.grad(theta)
            hess = objective.hess(theta)
            traj._record(theta, f, f, float(np.linalg.norm(g)), cfg.store_all)
            if snorm <= cfg.move_tol:
                return traj._finish(theta, gnorm <= cfg.grad_tol * max(1.0, abs(f)), "move")
        elif delta < 1e-15 * max(1.0, float(np.linalg.norm(theta))):
            return traj._finish(theta, False, "radius-collapse")
    return traj._finish(theta, False, "max-iters")


def trust_region(spec, data, init, cfg: OptConfig) -> Trajectory:
    """Trust-region Newton on the empirical risk with exact subproblem solves."""
    return minimize_tr(empirical_objective(spec, data), init, cfg)


def run(spec, data, init, cfg: OptConfig) -> Trajectory:
    """Dispatch on ``cfg.method``."""
    if cfg.method == "gd":
        return gd_projected(spec, data, init, cfg)
    if cfg.method == "proxgd":
        return prox_gd(spec, data, init, cfg)
    return trust_region(spec, data, init, cfg)


def minimize(objective: Objective, init, cfg: OptConfig) -> Trajectory:
    if cfg.method == "gd":
        return minimize_gd(objective, init, cfg)
    if cfg.method == "proxgd":
        return minimize_prox(objective, init, cfg)
    return minimize_tr(objective, init, cfg)
