"""Critical points, Morse indices, strong-Morse grid certificates and basin statistics."""
from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import optim
from .core import project_ball, rng_stream, sym_eigen
from .errors import DivergenceError, InvalidInput
from .optim import Objective, OptConfig

log = logging.getLogger(__name__)

SCHEMA_VERSION = "riskscape.landscape/1"
CRITICAL_TOL = 1e-8


@dataclass
class CriticalPoint:
    location: np.ndarray
    value: float
    grad_norm: float
    eigenvalues: np.ndarray  # ascending
    index: int
    kind: str  # minimum | saddle | maximum | degenerate

    def to_dict(self) -> dict:
        return {
            "location": [float(v) for v in self.location],
            "value": self.value,
            "grad_norm": self.grad_norm,
            "eigenvalues": [float(v) for v in self.eigenvalues],
            "index": self.index,
            "kind": self.kind,
        }


def degeneracy_tol(eigenvalues) -> float:
    return 1e-8 * max(1.0, float(np.max(eigenvalues)))


def classify(objective: Objective, x) -> CriticalPoint:
    """Evaluate gradient norm and Hessian spectrum at ``x`` and assign a Morse index."""
    x = np.asarray(x, dtype=float)
    vals = sym_eigen(objective.hess(x)).values[::-1]
    tol = degeneracy_tol(vals)
    index = int(np.sum(vals < -tol))
    if np.any(np.abs(vals) <= tol):
        kind = "degenerate"
    elif index == 0:
        kind = "minimum"
    elif index == vals.size:
        kind = "maximum"
    else:
        kind = "saddle"
    return CriticalPoint(
        x.copy(), float(objective.value(x)), float(np.linalg.norm(objective.grad(x))), vals, index, kind
    )


def newton_polish(objective: Objective, x, tol: float = CRITICAL_TOL, max_iter: int = 100):
    """Damped pseudo-inverse Newton on ``grad = 0`` with backtracking on ``||grad||``.

    Returns the final point, or ``None`` when the gradient norm does not reach
    ``tol``.
    """
    x = np.asarray(x, dtype=float).copy()
    g = objective.grad(x)
    gn = float(np.linalg.norm(g))
    for _ in range(max_iter):
        if gn <= tol:
            break
        eig = sym_eigen(objective.hess(x))
        vals, vecs = eig.values, eig.vectors
        cut = 1e-12 * max(1.0, float(np.max(np.abs(vals))))
        inv = np.where(np.abs(vals) > cut, 1.0 / np.where(np.abs(vals) > cut, vals, 1.0), 0.0)
        step = -(vecs @ (inv * (vecs.T @ g)))
        alpha = 1.0
        for _ in range(40):
            cand = x + alpha * step
            gc = objective.grad(cand)
            gcn = float(np.linalg.norm(gc))
            if np.isfinite(gcn) and gcn < (1 - 1e-4 * alpha) * gn:
                break
            alpha *= 0.5
        else:
            return None
        x, g, gn = cand, gc, gcn
    if gn > tol or not np.all(np.isfinite(x)):
        return None
    # a couple of extra full steps drive the residual well below tol
    for _ in range(2):
        eig = sym_eigen(objective.hess(x))
        cut = 1e-12 * max(1.0, float(np.max(np.abs(eig.values))))
        good = np.abs(eig.values) > cut
        step = -(eig.vectors[:, good] @ ((eig.vectors[:, good].T @ g) / eig.values[good]))
        cand = x + step
        gc = objective.grad(cand)
        if np.linalg.norm(gc) < gn:
            x, g, gn = cand, gc, float(np.linalg.norm(gc))
    return x


def _ball_points(center, radius, n, rng) -> np.ndarray:
    center = np.asarray(center, dtype=float)
    d = center.size
    g = rng.standard_normal((n, d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    return center + g * (radius * rng.random(n) ** (1.0 / d))[:, None]


def find_critical_points(
    objective: Objective,
    center,
    radius: float,
    n_starts: int = 50,
    seed: int = 0,
    dedup_tol: Optional[float] = None,
    starts=None,
) -> list[CriticalPoint]:
    """Multi-start Newton search for critical points inside a ball.

    Starts are uniform in the ball (plus any explicit ``starts``).  Converged
    points outside the ball are discarded, the rest deduplicated at
    ``dedup_tol`` (default ``1e-6 * radius``) and sorted by objective value.
    """
    if not radius > 0:
        raise InvalidInput("region radius must be positive")
    if n_starts < 1:
        raise InvalidInput("need at least one start")
    center = np.asarray(center, dtype=float)
    dedup_tol = 1e-6 * radius if dedup_tol is None else dedup_tol
    pts = _ball_points(center, radius, n_starts, rng_stream(seed, "critical-starts"))
    if starts is not None:
        pts = np.vstack([np.atleast_2d(np.asarray(starts, dtype=float)), pts])
    found: list[np.ndarray] = []
    dropped = 0
    for x0 in pts:
        x = newton_polish(objective, x0)
        if x is None:
            dropped += 1
            continue
        if np.linalg.norm(x - center) > radius * (1 + 1e-9):
            continue
        if all(np.linalg.norm(x - y) > dedup_tol for y in found):
            found.append(x)
    if dropped:
        log.info("dropped %d of %d Newton starts without convergence", dropped, len(pts))
    points = [classify(objective, x) for x in found]
    points.sort(key=lambda c: (c.value, tuple(c.location)))
    return points


# --------------------------------------------------------------------------
# strong-Morse certificates


@dataclass(frozen=True)
class GridSpec:
    """Sampling design over a ball.

    ``tensor``: ``per_axis`` points per coordinate on the bounding box, kept if
    inside the ball (used for ``p <= 3``).  ``lhs``: ``n_points`` Latin-hypercube
    points mapped into the ball.  ``n_boundary`` points sample the sphere.
    """

    kind: str = "auto"
    per_axis: int = 41
    n_points: int = 20_000
    n_boundary: int = 256
    seed: int = 0
    budget: int = 100_000


@dataclass
class MorseCertificate:
    center: list
    radius: float
    grid: dict
    epsilon: float
    eta: float
    holds: bool
    n_interior: int
    n_boundary: int
    n_near_critical: int
    max_eta: Optional[float]
    witnesses: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def grid_points(center, radius: float, spec: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Interior and boundary sample points for a ball."""
    center = np.asarray(center, dtype=float)
    p = center.size
    kind = spec.kind
    if kind == "auto":
        kind = "tensor" if p <= 3 else "lhs"
    rng = rng_stream(spec.seed, "morse-grid")
    if kind == "tensor":
        total = spec.per_axis**p
        if total + spec.n_boundary > spec.budget:
            raise InvalidInput(f"grid of {total + spec.n_boundary} points exceeds budget {spec.budget}")
        axis = np.linspace(-radius, radius, spec.per_axis)
        box = np.array(list(itertools.product(axis, repeat=p)))
        interior = box[np.linalg.norm(box, axis=1) <= radius]
    elif kind == "lhs":
        if spec.n_points + spec.n_boundary > spec.budget:
            raise InvalidInput(f"grid of {spec.n_points + spec.n_boundary} points exceeds budget {spec.budget}")
        m = spec.n_points
        # Latin hypercube on [0,1]^p mapped to the ball through (direction, radius)
        u = (np.argsort(rng.random((m, p)), axis=0) + rng.random((m, p))) / m
        from scipy.special import ndtri

        g = ndtri(np.clip(u, 1e-12, 1 - 1e-12))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        interior = g * (radius * rng.random(m) ** (1.0 / p))[:, None]
    else:
        raise InvalidInput(f"unknown grid kind {kind!r}")
    if p == 1:
        boundary = np.array([[-radius], [radius]])
    elif p == 2:
        ang = 2 * math.pi * np.arange(spec.n_boundary) / spec.n_boundary
        boundary = radius * np.column_stack([np.cos(ang), np.sin(ang)])
    else:
        g = rng.standard_normal((spec.n_boundary, p))
        boundary = radius * g / np.linalg.norm(g, axis=1, keepdims=True)
    return center + interior, center + boundary


def certify_strong_morse(
    objective: Objective, center, radius: float, grid: GridSpec, epsilon: float, eta: float, max_witnesses: int = 50
) -> MorseCertificate:
    """Grid check of: ``||grad F(x)|| <= epsilon`` implies ``min_i |lambda_i(x)| >= eta``.

    Also requires ``||grad F|| > epsilon`` on the sampled boundary sphere.  The
    certificate only speaks about the sampled points.  ``max_eta`` is the
    largest ``eta`` that would hold for this ``epsilon`` (``None`` when no
    sampled point is near-critical).  At most ``max_witnesses`` interior and
    ``max_witnesses`` boundary violations are kept.
    """
    interior, boundary = grid_points(center, radius, grid)
    witnesses = []
    near = 0
    min_abs = math.inf
    for x in interior:
        gn = float(np.linalg.norm(objective.grad(x)))
        if gn > epsilon:
            continue
        near += 1
        vals = sym_eigen(objective.hess(x)).values
        m = float(np.min(np.abs(vals)))
        min_abs = min(min_abs, m)
        if m < eta and len(witnesses) < max_witnesses:
            witnesses.append({"point": [float(v) for v in x], "grad_norm": gn, "min_abs_eigenvalue": m, "where": "interior"})
    boundary_ok = True
    n_inner = len(witnesses)
    for x in boundary:
        gn = float(np.linalg.norm(objective.grad(x)))
        if gn <= epsilon:
            boundary_ok = False
            if len(witnesses) - n_inner < max_witnesses:
                witnesses.append({"point": [float(v) for v in x], "grad_norm": gn, "min_abs_eigenvalue": None, "where": "boundary"})
    holds = boundary_ok and min_abs >= eta
    return MorseCertificate(
        center=[float(v) for v in np.asarray(center, dtype=float)],
        radius=float(radius),
        grid=asdict(grid),
        epsilon=float(epsilon),
        eta=float(eta),
        holds=bool(holds),
        n_interior=int(len(interior)),
        n_boundary=int(len(boundary)),
        n_near_critical=near,
        max_eta=None if near == 0 else float(min_abs),
        witnesses=witnesses,
    )


# --------------------------------------------------------------------------
# matching


@dataclass
class Pairing:
    pairs: list  # (i, j, distance, index_agrees)
    unmatched_a: list
    unmatched_b: list

    def to_dict(self) -> dict:
        return {
            "pairs": [{"a": i, "b": j, "distance": dist, "index_agrees": agree} for i, j, dist, agree in self.pairs],
            "unmatched_a": self.unmatched_a,
            "unmatched_b": self.unmatched_b,
        }

    @property
    def max_distance(self) -> float:
        return max((p[2] for p in self.pairs), default=0.0)


def _loc(c):
    return c.location if isinstance(c, CriticalPoint) else np.asarray(c, dtype=float)


def match_critical_points(a, b, max_distance: float = math.inf) -> Pairing:
    """Pair two point sets, minimizing the total distance.

    Accepts :class:`CriticalPoint` objects or raw vectors.  Pairs farther
    apart than ``max_distance`` are reported as unmatched instead.
    """
    a, b = list(a), list(b)
    if not a or not b:
        return Pairing([], list(range(len(a))), list(range(len(b))))
    dist = np.array([[float(np.linalg.norm(_loc(x) - _loc(y))) for y in b] for x in a])
    rows, cols = linear_sum_assignment(dist)
    pairs = []
    for i, j in sorted(zip(rows.tolist(), cols.tolist())):
        if dist[i, j] > max_distance:
            continue
        agree = None
        if isinstance(a[i], CriticalPoint) and isinstance(b[j], CriticalPoint):
            agree = a[i].index == b[j].index
        pairs.append((i, j, float(dist[i, j]), agree))
    used_a = {p[0] for p in pairs}
    used_b = {p[1] for p in pairs}
    return Pairing(pairs, [i for i in range(len(a)) if i not in used_a], [j for j in range(len(b)) if j not in used_b])


# --------------------------------------------------------------------------
# basin statistics


def gaussian_init(scale: float = 1.0) -> Callable:
    """Init law ``N(0, scale * I / p)``."""

    def draw(rng: np.random.Generator, p: int) -> np.ndarray:
        return math.sqrt(scale / p) * rng.standard_normal(p)

    return draw


def box_init(center, half_width: float) -> Callable:
    """Uniform on the box ``center +- half_width`` (per coordinate)."""
    center = np.asarray(center, dtype=float)

    def draw(rng: np.random.Generator, p: int) -> np.ndarray:
        return center + half_width * (2 * rng.random(p) - 1)

    return draw


def draw_inits(init_law: Callable, p: int, n_inits: int, seed: int, radius: float = math.inf) -> np.ndarray:
    out = []
    for j in range(n_inits):
        x = init_law(rng_stream(seed, "init", j), p)
        out.append(project_ball(x, radius) if math.isfinite(radius) else x)
    return np.array(out)


def spread(points) -> float:
    """Square root of the trace of the sample covariance of the rows of ``points``."""
    pts = np.asarray(points, dtype=float)
    if pts.shape[0] < 2:
        raise InvalidInput("spread needs at least two points")
    dev = pts - pts[0]
    dev = dev - dev.mean(axis=0)
    return float(math.sqrt(np.sum(dev * dev) / (pts.shape[0] - 1)))


@dataclass
class BasinStats:
    spread: float
    success: bool
    finals: np.ndarray
    n_failed: int = 0
    n_boundary: int = 0
    iterations: list = field(default_factory=list)


def basin_spread(
    spec,
    data,
    cfg: OptConfig,
    init_law: Callable = None,
    n_inits: int = 10,
    seed: int = 0,
    eps_success: float = 1e-2,
    objective: Optional[Objective] = None,
    inits=None,
) -> BasinStats:
    """Run the optimizer from ``n_inits`` seeded starts and measure the spread of the limits.

    A diverged run makes the instance a failure.  ``n_boundary`` counts limits
    with ``||theta|| >= 0.999 r``.
    """
    if n_inits < 2 and inits is None:
        raise InvalidInput("basin spread needs at least two initializations")
    obj = objective if objective is not None else optim.empirical_objective(spec, data)
    r = obj.radius if cfg.radius is None else cfg.radius
    p = len(inits[0]) if inits is not None else models_param_dim(spec, data)
    if inits is None:
        inits = draw_inits(init_law or gaussian_init(1.0), p, n_inits, seed, r)
    finals = []
    failed = 0
    iters = []
    for x0 in inits:
        try:
            traj = optim.minimize(obj, x0, cfg)
        except DivergenceError as err:
            failed += 1
            traj = err.trajectory
        finals.append(traj.final)
        iters.append(traj.n_iter)
    finals = np.array(finals)
    s = spread(finals)
    at_boundary = int(np.sum(np.linalg.norm(finals, axis=1) >= 0.999 * r)) if math.isfinite(r) else 0
    return BasinStats(s, bool(failed == 0 and s <= eps_success), finals, failed, at_boundary, iters)


def models_param_dim(spec, data) -> int:
    from .models import param_dim

    return param_dim(spec.family, data.d)


def success_probability(stats: list) -> tuple[float, int]:
    """Fraction of instances whose spread is within tolerance, and the instance count."""
    if not stats:
        raise InvalidInput("no instances")
    return float(np.mean([s.success for s in stats])), len(stats)


def init_spread_curve(
    spec,
    data,
    cfg: OptConfig,
    init_law: Callable = None,
    n_inits: int = 10,
    seed: int = 0,
    objective: Optional[Objective] = None,
    inits=None,
) -> np.ndarray:
    """``std(k) = sqrt(trace Var_init(theta(k)))`` for ``k = 0..K``.

    Runs that stop early are held at their final iterate (a fixed point of
    the update), so all runs share the iteration grid ``0..K`` where ``K``
    is the longest run.
    """
    obj = objective if objective is not None else optim.empirical_objective(spec, data)
    r = obj.radius if cfg.radius is None else cfg.radius
    if inits is None:
        p = models_param_dim(spec, data)
        inits = draw_inits(init_law or gaussian_init(1.0), p, n_inits, seed, r)
    if len(inits) < 2:
        raise InvalidInput("need at least two initializations")
    cfg = cfg.with_(store_all=True)
    runs = []
    for x0 in inits:
        try:
            runs.append(np.array(optim.minimize(obj, x0, cfg).iterates))
        except DivergenceError as err:
            runs.append(np.array(err.trajectory.iterates))
    length = max(len(r_) for r_ in runs)
    padded = np.stack([np.vstack([r_, np.repeat(r_[-1:], length - len(r_), axis=0)]) for r_ in runs])
    return np.array([spread(padded[:, k, :]) for k in range(length)])


# --------------------------------------------------------------------------
# population constants and reports


def measure_constants(objective: Objective, reference, radius: float, eps0: float, points) -> dict:
    """Grid estimates of the population landscape constants around ``reference``.

    ``T0`` = min of ``<t - ref, grad>/||t - ref||^2`` and ``L_lower`` = min
    gradient norm, both over points outside ``B(ref, eps0)``; ``kappa_lower``
    = min smallest Hessian eigenvalue inside ``B(ref, eps0)``; ``kappa_upper``
    and ``L_upper`` are maxima over all points.
    """
    ref = np.asarray(reference, dtype=float)
    t0s, l_low, k_low, k_up, l_up = [], [], [], [], []
    for x in np.atleast_2d(points):
        if np.linalg.norm(x) > radius * (1 + 1e-12):
            continue
        g = objective.grad(x)
        eig = sym_eigen(objective.hess(x))
        gn = float(np.linalg.norm(g))
        l_up.append(gn)
        k_up.append(float(np.max(np.abs(eig.values))))
        dist = float(np.linalg.norm(x - ref))
        if dist > eps0:
            t0s.append(float((x - ref) @ g) / dist**2)
            l_low.append(gn)
        else:
            k_low.append(eig.min)

    def pick(fn, xs):
        return float(fn(xs)) if xs else None

    return {
        "eps0": float(eps0),
        "T0": pick(min, t0s),
        "L_lower": pick(min, l_low),
        "L_upper": pick(max, l_up),
        "kappa_lower": pick(min, k_low),
        "kappa_upper": pick(max, k_up),
    }


@dataclass
class LandscapeReport:
    critical_points: list = field(default_factory=list)
    pairing: Optional[Pairing] = None
    constants: dict = field(default_factory=dict)
    certificate: Optional[MorseCertificate] = None
    reference_points: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA_VERSION,
            "criticalpoints": [c.to_dict() for c in self.critical_points],
            "reference_points": [c.to_dict() for c in self.reference_points],
            "pairing": [] if self.pairing is None else self.pairing.to_dict()["pairs"],
            "unmatched": {} if self.pairing is None else {
                "a": self.pairing.unmatched_a, "b": self.pairing.unmatched_b
            },
            "constants": self.constants,
            "certificate": None if self.certificate is None else self.certificate.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)
