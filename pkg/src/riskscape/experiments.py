"""Config-driven simulation sweeps that write CSV curve data and a JSON manifest.

Each experiment id maps to a table of default parameters and a runner.  A
runner turns the config into a list of independent jobs (one per instance
or instance/init pair), executes them on a thread pool and aggregates the
results in job order, so the CSV output does not depend on the thread count.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import __version__, datagen, landscape, models, optim, oracle
from .core import rng_stream, seed_of
from .errors import DivergenceError, InvalidInput, RiskscapeError

log = logging.getLogger(__name__)

THREADS_ENV = "RISKSCAPE_THREADS"
MANIFEST_SCHEMA = "riskscape.manifest/1"

_CLASS = {"theta0_norm": 1.0, "radius_factor": 3.0, "step": 1.0, "max_iter": 10_000, "init_scale": 1.0}
_SPARSE = {"s0": 5, "n_factor": 20.0, "n_cap": 4000, "lam_scale": 0.01, "radius": 10.0, "step": 1.0,
           "init_scale": 1.0}
_ROBUST = {"n_over_d": 6.0, "radius": 10.0, "t0": 4.685, "step": 1.0, "init_scale": 25.0, "max_iter": 5000}
_GMM = {"separation": 1.5, "n_over_d": 6.0, "step": 1.0, "init_scale": 1.0, "iters": 200}

DEFAULTS: dict[str, dict] = {
    "fig3a": {**_CLASS, "d": [10, 20, 40], "x": [0.5, 1, 2, 4, 8], "theta0_norm": 3.0, "eps_success": 1e-2,
              "replications": 30, "inits": 5},
    "fig3b": {**_CLASS, "d": [10, 20, 40], "n_over_d": [5, 10, 20, 40, 80], "replications": 20, "inits": 1},
    "fig4a": {**_CLASS, "d": [20, 40], "n_over_d": 20.0, "iters": 400, "burn_in": 20, "floor": 1e-10,
              "replications": 30, "inits": 1},
    "fig4b": {**_CLASS, "d": [20, 40], "n_over_d": [4, 6, 10, 20, 40], "target": 1e-4, "replications": 30,
              "inits": 1},
    "fig5": {**_SPARSE, "d": [200], "max_iter": 3000, "replications": 3, "inits": 5},
    "fig6": {**_SPARSE, "d": [100, 200], "iters": 400, "replications": 10, "inits": 1},
    "fig7": {**_ROBUST, "d": [40], "replications": 3, "inits": 5},
    "fig8a": {**_ROBUST, "d": [40], "delta": [0.0, 0.1, 0.2, 0.3], "sigma2": 100.0, "replications": 3, "inits": 5},
    "fig8b": {**_ROBUST, "d": [40], "delta": [0.05, 0.1, 0.2], "sigma2": [1, 10, 100, 1000], "replications": 20,
              "inits": 1},
    "fig9a": {**_GMM, "d": [10, 20, 40], "replications": 10, "inits": 1},
    "fig9b": {**_GMM, "d": [10, 20, 40], "replications": 10, "inits": 1},
    "morse-cert": {"separation": [0.75, 1.0, 1.5, 2.0], "epsilon": [0.01, 0.05], "eta": 1e-3, "per_axis": 61,
                   "radius_factor": 2.0, "n_starts": 30, "replications": 1, "inits": 1},
    "unif-conv": {"d": 10, "theta0_norm": 1.0, "radius": 3.0, "n": [500, 2000, 8000], "n_grid": 200,
                  "replications": 20, "inits": 1},
}
EXPERIMENT_IDS = tuple(DEFAULTS)
TOP_LEVEL = ("experiment", "seed", "replications", "inits", "out", "threads", "max_failure_rate")
# parameters that may be zero (everything else numeric must be positive)
_NONNEG = {"delta", "burn_in"}


@dataclass
class ExperimentConfig:
    experiment: str
    params: dict = field(default_factory=dict)
    replications: Optional[int] = None
    inits: Optional[int] = None
    seed: int = 0
    out: Optional[str] = None
    threads: Optional[int] = None
    max_failure_rate: float = 0.1

    def __post_init__(self):
        if self.experiment not in DEFAULTS:
            raise InvalidInput(f"unknown experiment {self.experiment!r}; choose from {', '.join(EXPERIMENT_IDS)}")
        base = DEFAULTS[self.experiment]
        unknown = set(self.params) - set(base)
        if unknown:
            raise InvalidInput(f"unknown parameters for {self.experiment}: {sorted(unknown)}")
        merged = {k: v for k, v in base.items() if k not in ("replications", "inits")}
        merged.update({k: v for k, v in self.params.items() if k not in ("replications", "inits")})
        self.replications = int(self.params.get("replications", base["replications"])
                                if self.replications is None else self.replications)
        self.inits = int(self.params.get("inits", base["inits"]) if self.inits is None else self.inits)
        self.params = merged
        if self.replications < 1 or self.inits < 1:
            raise InvalidInput("replications and inits must be at least 1")
        if self.experiment in ("fig3a", "fig5", "fig7", "fig8a") and self.inits < 2:
            raise InvalidInput("spread experiments need at least two inits")
        for key, val in merged.items():
            for v in np.atleast_1d(val):
                if not isinstance(v, (int, float, np.integer, np.floating)) or isinstance(v, bool):
                    raise InvalidInput(f"parameter {key} must be numeric")
                if not math.isfinite(v) or (v < 0 if key in _NONNEG else v <= 0):
                    raise InvalidInput(f"parameter {key} has invalid value {v}")
        if self.threads is not None and self.threads < 1:
            raise InvalidInput("threads must be at least 1")
        if not 0 <= self.max_failure_rate <= 1:
            raise InvalidInput("max_failure_rate must lie in [0, 1]")

    @classmethod
    def from_mapping(cls, raw: dict, **overrides) -> "ExperimentConfig":
        raw = dict(raw)
        if "experiment" not in raw and "experiment" not in overrides:
            raise InvalidInput("config has no experiment id")
        params = dict(raw.pop("params", {}))
        top = {k: raw.pop(k) for k in list(raw) if k in TOP_LEVEL}
        params.update(raw)
        top.update({k: v for k, v in overrides.items() if v is not None})
        try:
            return cls(params=params, **top)
        except TypeError as err:
            raise InvalidInput(str(err)) from err

    def grid(self, key) -> list:
        return [v for v in np.atleast_1d(self.params[key]).tolist()]

    def thread_count(self) -> int:
        if self.threads is not None:
            return self.threads
        env = os.environ.get(THREADS_ENV)
        if env:
            try:
                value = int(env)
            except ValueError:
                raise InvalidInput(f"{THREADS_ENV} must be an integer, got {env!r}") from None
            if value < 1:
                raise InvalidInput(f"{THREADS_ENV} must be at least 1")
            return value
        return 1

    def to_dict(self) -> dict:
        return {
            "experiment": self.experiment,
            "params": self.params,
            "replications": self.replications,
            "inits": self.inits,
            "seed": self.seed,
            "max_failure_rate": self.max_failure_rate,
        }


@dataclass
class CurvePoint:
    coords: dict
    statistic: str
    value: float
    dispersion: Optional[float]
    n_reps: int
    extra: dict = field(default_factory=dict)


@dataclass
class Job:
    index: int
    coords: dict
    rep: int
    seed: int
    fn: Callable
    kwargs: dict

    @property
    def init_seed(self) -> int:
        return seed_of(self.seed, "init")


@dataclass
class ExperimentResult:
    curves: dict
    summary: dict
    jobs: list
    failures: int

    @property
    def failure_rate(self) -> float:
        return self.failures / max(1, len(self.jobs))


# --------------------------------------------------------------------------
# statistics helpers


def trimmed_mean(values, lo: float = 0.05, hi: float = 0.95) -> float:
    """Mean of the values lying between the empirical ``lo`` and ``hi`` quantiles (inclusive)."""
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise InvalidInput("trimmed mean of an empty sample")
    a, b = np.quantile(v, [lo, hi])
    return float(np.mean(v[(v >= a) & (v <= b)]))


def smooth3(values) -> np.ndarray:
    """Three-point moving average; the end points average their single neighbour."""
    v = np.asarray(values, dtype=float)
    if v.size < 3:
        return v.copy()
    out = np.empty_like(v)
    out[1:-1] = (v[:-2] + v[1:-1] + v[2:]) / 3
    out[0] = (v[0] + v[1]) / 2
    out[-1] = (v[-2] + v[-1]) / 2
    return out


def linear_fit(x, y) -> tuple[float, float, float]:
    """Least-squares line; returns ``(slope, intercept, r_squared)``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 2:
        raise InvalidInput("need two points for a line fit")
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss if ss > 0 else 1.0
    return float(slope), float(intercept), r2


def ols(data: models.Dataset) -> np.ndarray:
    """Ordinary least squares through the normal equations."""
    x = data.features
    from scipy.linalg import solve

    return solve(x.T @ x, x.T @ data.responses, assume_a="pos")


def _mean_std(values) -> tuple[float, Optional[float], int]:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return math.nan, None, 0
    return float(v.mean()), (float(v.std(ddof=1)) if v.size >= 2 else None), int(v.size)


# --------------------------------------------------------------------------
# instance builders


def class_n(d: int, x: float) -> int:
    return max(1, int(round(x * d * math.log(d))))


def sparse_setup(p: dict, d: int) -> tuple[int, float]:
    """Sample size ``min(n_factor s0 log^2 d, n_cap)`` and ``lam = lam_scale sqrt(log^2 d / n)``."""
    n = int(min(round(p["n_factor"] * p["s0"] * math.log(d) ** 2), p["n_cap"]))
    return n, p["lam_scale"] * math.sqrt(math.log(d) ** 2 / n)


def _inits(p: dict, dim: int, count: int, seed: int, radius: float) -> np.ndarray:
    return landscape.draw_inits(landscape.gaussian_init(p["init_scale"]), dim, count, seed, radius)


def _reference(obj, x0, cfg):
    """Tightly converged limit of the same optimizer from the same start."""
    tight = cfg.with_(grad_tol=1e-13, move_tol=0.0, max_iter=max(cfg.max_iter, 20_000), store_all=False)
    return optim.minimize(obj, x0, tight).final


def _distance_series(iterates, target, length: int) -> np.ndarray:
    dist = np.linalg.norm(np.asarray(iterates) - target, axis=1)
    if dist.size >= length:
        return dist[:length]
    return np.concatenate([dist, np.full(length - dist.size, dist[-1])])


def _aligned(theta, truth):
    """gmm2 truth block order closest to ``theta``."""
    return truth if np.linalg.norm(theta - truth) <= np.linalg.norm(theta - models.swap(truth)) else models.swap(truth)


# --------------------------------------------------------------------------
# job functions (pure given their arguments)


def job_spread(spec, data, cfg, p, n_inits, init_seed, eps_success=1e-2):
    dim = models.param_dim(spec.family, data.d)
    inits = _inits(p, dim, n_inits, init_seed, spec.radius)
    st = landscape.basin_spread(spec, data, cfg, inits=inits, eps_success=eps_success)
    return {"spread": st.spread, "success": st.success, "n_boundary": st.n_boundary, "n_failed": st.n_failed}


def job_error(spec, data, truth, cfg, p, init_seed):
    x0 = _inits(p, data.d, 1, init_seed, spec.radius)[0]
    traj = optim.run(spec, data, x0, cfg)
    return {"error": float(np.linalg.norm(traj.final - truth)), "iterations": traj.n_iter}


def job_trajectory(spec, data, truth, cfg, p, init_seed, length: int, gmm: bool = False):
    dim = models.param_dim(spec.family, data.d)
    x0 = _inits(p, dim, 1, init_seed, spec.radius)[0]
    obj = optim.empirical_objective(spec, data)
    traj = optim.minimize(obj, x0, cfg.with_(store_all=True, max_iter=length - 1, grad_tol=0.0, move_tol=0.0))
    ref = _reference(obj, x0, cfg)
    if gmm:
        truth = _aligned(ref, truth)
    return {
        "dist_hat": _distance_series(traj.iterates, ref, length),
        "dist_truth": _distance_series(traj.iterates, truth, length),
    }


def job_spread_curve(spec, data, cfg, p, n_inits, init_seed, length: Optional[int] = None):
    dim = models.param_dim(spec.family, data.d)
    inits = _inits(p, dim, n_inits, init_seed, spec.radius)
    curve = landscape.init_spread_curve(spec, data, cfg, inits=inits)
    if length is not None:
        curve = curve[:length] if curve.size >= length else np.concatenate([curve, np.full(length - curve.size, curve[-1])])
    return {"std": curve}


def job_hitting_time(spec, data, cfg, p, init_seed, target):
    x0 = _inits(p, data.d, 1, init_seed, spec.radius)[0]
    obj = optim.empirical_objective(spec, data)
    ref = _reference(obj, x0, cfg)
    traj = optim.minimize(obj, x0, cfg.with_(store_all=True, grad_tol=0.0, move_tol=0.0))
    dist = np.linalg.norm(np.asarray(traj.iterates) - ref, axis=1)
    hit = np.flatnonzero(dist <= target)
    if hit.size == 0:
        raise RiskscapeError(f"distance {target} not reached within {cfg.max_iter} iterations")
    return {"iterations": int(hit[0])}


def job_robust_pair(spec, data, truth, cfg, p, init_seed):
    x0 = _inits(p, data.d, 1, init_seed, spec.radius)[0]
    traj = optim.run(spec, data, x0, cfg)
    return {"tukey": float(np.linalg.norm(traj.final - truth)), "ols": float(np.linalg.norm(ols(data) - truth))}


def job_unif_gap(spec, data, orc, grid):
    gap = oracle.mc_pop_gap(spec, data, orc, grid)
    return {"grad_gap": gap["sup_grad_gap"], "hess_gap": gap["sup_hess_gap"]}


def job_morse(separation, epsilon_list, eta, per_axis, radius_factor, n_starts, seed):
    spec = models.ModelSpec("gmm2")
    orc = oracle.oracle_for(spec, (np.array([-separation]), np.array([separation])))
    obj = orc.objective()
    radius = radius_factor * separation
    points = landscape.find_critical_points(obj, np.zeros(2), radius, n_starts=n_starts, seed=seed)
    certs = [landscape.certify_strong_morse(obj, np.zeros(2), radius, landscape.GridSpec(per_axis=per_axis), eps, eta)
             for eps in epsilon_list]
    report = landscape.LandscapeReport(critical_points=points, certificate=certs[-1])
    return {"points": points, "certs": certs, "report": report.to_dict()}


# --------------------------------------------------------------------------
# runners: build jobs, aggregate


def _execute(jobs: list, threads: int) -> tuple[list, int]:
    def call(job: Job):
        try:
            return job.fn(**job.kwargs)
        except (RiskscapeError, ArithmeticError, ValueError, DivergenceError, np.linalg.LinAlgError) as err:
            log.warning("job %d %s rep %d failed: %s", job.index, job.coords, job.rep, err)
            return None

    if threads == 1:
        results = [call(j) for j in jobs]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(call, jobs))
    return results, sum(r is None for r in results)


class _Builder:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.jobs: list[Job] = []

    def seed(self, coords: dict, rep: int) -> int:
        keys = [f"{k}={coords[k]!r}" for k in coords]
        return seed_of(self.cfg.seed, self.cfg.experiment, *keys, f"rep={rep}")

    def add(self, coords: dict, rep: int, fn: Callable, make_kwargs: Callable[[int], dict]):
        s = self.seed(coords, rep)
        job = Job(len(self.jobs), dict(coords), rep, s, fn, {})
        job.kwargs = make_kwargs(job)
        self.jobs.append(job)


def _groups(jobs, results):
    """Group successful results by coordinates, keeping first-seen order."""
    out: dict = {}
    for job, res in zip(jobs, results):
        key = tuple(job.coords.items())
        out.setdefault(key, [])
        if res is not None:
            out[key].append(res)
    return out


def _class_cfg(p, **kw) -> optim.OptConfig:
    return optim.OptConfig(method="gd", step=p["step"], max_iter=int(p["max_iter"]), **kw)


def _classification_data(p, d, n, seed, sparsity=None):
    gen = datagen.GenConfig("classification", n=n, d=d, seed=seed, theta0_norm=p.get("theta0_norm", 1.0),
                            sparsity=sparsity)
    return datagen.generate(gen)


def _lazy(fn):
    """Job wrapper building its (possibly large) inputs inside the worker."""

    def run(**kwargs):
        build = kwargs.pop("_build")
        return fn(**build())

    run.__name__ = fn.__name__
    return run


def _deferred(builder: _Builder, coords, rep, fn, make):
    builder.add(coords, rep, _lazy(fn), lambda job: {"_build": lambda: make(job)})


def _run_generic(cfg, build_jobs, aggregate) -> ExperimentResult:
    b = _Builder(cfg)
    build_jobs(b)
    results, failures = _execute(b.jobs, cfg.thread_count())
    curves, summary = aggregate(b.jobs, results)
    return ExperimentResult(curves, summary, b.jobs, failures)


def run_fig3a(cfg: ExperimentConfig) -> ExperimentResult:
    p = cfg.params
    spec = models.ModelSpec("classification", radius=p["radius_factor"] * p["theta0_norm"])

    def build(b):
        for d in cfg.grid("d"):
            for x in cfg.grid("x"):
                for rep in range(cfg.replications):
                    def make(job, d=int(d), x=float(x)):
                        data, _ = _classification_data(p, d, class_n(d, x), job.seed)
                        return {"spec": spec, "data": data, "cfg": _class_cfg(p), "p": p, "n_inits": cfg.inits,
                                "init_seed": job.init_seed, "eps_success": p["eps_success"]}
                    _deferred(b, {"d": int(d), "x": float(x)}, rep, job_spread, make)

    def aggregate(jobs, results):
        curve, per_d = [], {}
        counts = _counts(jobs)
        for key, res in _groups(jobs, results).items():
            coords = dict(key)
            flags = [float(r["success"]) for r in res] + [0.0] * (counts[key] - len(res))
            mean, std, count = _mean_std(flags)
            extra = {"n": class_n(coords["d"], coords["x"]),
                     "boundary_frac": float(np.mean([r["n_boundary"] > 0 for r in res])) if res else math.nan}
            pt = CurvePoint(coords, "success_rate", mean, std, count, extra)
            curve.append(pt)
            per_d.setdefault(coords["d"], []).append(pt)
        for pts in per_d.values():
            for pt, sm in zip(pts, smooth3([q.value for q in pts])):
                pt.extra["smoothed"] = float(sm)
        return {"fig3a": curve}, {}

    return _run_generic(cfg, build, aggregate)


def _counts(jobs) -> dict:
    out: dict = {}
    for j in jobs:
        key = tuple(j.coords.items())
        out[key] = out.get(key, 0) + 1
    return out


def run_fig3b(cfg: ExperimentConfig) -> ExperimentResult:
    p = cfg.params
    spec = models.ModelSpec("classification", radius=p["radius_factor"] * p["theta0_norm"])

    def build(b):
        for d in cfg.grid("d"):
            for r in cfg.grid("n_over_d"):
                for rep in range(cfg.replications):
                    def make(job, d=int(d), r=float(r)):
                        data, truth = _classification_data(p, d, int(round(r * d)), job.seed)
                        return {"spec": spec, "data": data, "truth": truth, "cfg": _class_cfg(p), "p": p,
                                "init_seed": job.init_seed}
                    _deferred(b, {"d": int(d), "n_over_d": float(r)}, rep, job_error, make)

    def aggregate(jobs, results):
        curve = []
        for key, res in _groups(jobs, results).items():
            mean, std, count = _mean_std([r["error"] for r in res])
            curve.append(CurvePoint(dict(key), "error", mean, std, count))
        summary = {"slopes": {}}
        for d in cfg.grid("d"):
            pts = [c for c in curve if c.coords["d"] == d and c.n_reps > 0]
            if len(pts) >= 2:
                summary["slopes"][str(d)] = linear_fit(np.log([c.coords["n_over_d"] for c in pts]),
                                                       np.log([c.value for c in pts]))[0]
        good = [c for c in curve if c.n_reps > 0]
        if len({c.coords["n_over_d"] for c in good}) >= 2:
            summary["pooled_slope"] = linear_fit(np.log([c.coords["n_over_d"] for c in good]),
                                                 np.log([c.value for c in good]))[0]
        return {"fig3b": curve}, summary

    return _run_generic(cfg, build, aggregate)


def _trajectory_curves(groups, length, name_hat, name_truth=None):
    """Per-k quantile-trimmed means of the distance series of each group."""
    curves = {name_hat: []}
    if name_truth:
        curves[name_truth] = []
    for key, res in groups.items():
        coords = dict(key)
        if not res:
            continue
        hat = np.array([r["dist_hat"] for r in res])
        logs = np.log10(np.maximum(hat, 1e-300))
        for k in range(length):
            col = hat[:, k]
            lo, hi = np.quantile(col, [0.05, 0.95])
            band = float(hi - lo) if col.size >= 2 else None
            curves[name_hat].append(CurvePoint({**coords, "k": k}, "distance", trimmed_mean(col), band, len(res),
                                               {"log10_distance": trimmed_mean(logs[:, k])}))
        if name_truth:
            tru = np.array([r["dist_truth"] for r in res])
            for k in range(length):
                col = tru[:, k]
                lo, hi = np.quantile(col, [0.05, 0.95])
                curves[name_truth].append(CurvePoint({**coords, "k": k}, "error", trimmed_mean(col),
                                                     float(hi - lo) if col.size >= 2 else None, len(res)))
    return curves


def decay_fit(points: list, burn_in: int, floor: float) -> dict:
    """Line fit of the trimmed-mean log10 distance against ``k`` after ``burn_in``.

    The fit window ends before the trimmed mean drops below ``floor``.
    """
    ks = np.array([pt.coords["k"] for pt in points])
    logs = np.array([pt.extra["log10_distance"] for pt in points])
    keep = (ks >= burn_in) & (logs > math.log10(floor))
    stop = np.flatnonzero((ks >= burn_in) & ~(logs > math.log10(floor)))
    if stop.size:
        keep &= ks < ks[stop[0]]
    if keep.sum() < 3:
        return {"slope": math.nan, "r2": math.nan, "k_range": [int(burn_in), int(burn_in)]}
    slope, _, r2 = linear_fit(ks[keep], logs[keep])
    return {"slope": slope, "r2": r2, "k_range": [int(ks[keep][0]), int(ks[keep][-1])]}


def run_fig4a(cfg: ExperimentConfig) -> ExperimentResult:
    p = cfg.params
    length = int(p["iters"]) + 1
    spec = models.ModelSpec("classification", radius=p["radius_factor"] * p["theta0_norm"])

    def build(b):
        for d in cfg.grid("d"):
            for rep in range(cfg.replications):
                def make(job, d=int(d)):
                    data, truth = _classification_data(p, d, int(round(p["n_over_d"] * d)), job.seed)
                    return {"spec": spec, "data": data, "truth": truth, "cfg": _class_cfg(p), "p": p,
                            "init_seed": job.init_seed, "length": length}
                _deferred(b, {"d": int(d)}, rep, job_trajectory, make)

    def aggregate(jobs, results):
        curves = _trajectory_curves(_groups(jobs, results), length, "fig4a")
        fits = {}
        for d in cfg.grid("d"):
            pts = [c for c in curves["fig4a"] if c.coords["d"] == d]
            if pts:
                fits[str(d)] = decay_fit(pts, int(p["burn_in"]), p["floor"])
        return curves, {"decay": fits}

    return _run_generic(cfg, build, aggregate)


def run_fig4b(cfg: ExperimentConfig) -> ExperimentResult:
    p = cfg.params
    spec = models.ModelSpec("classification", radius=p["radius_factor"] * p["theta0_norm"])

    def build(b):
        for d in cfg.grid("d"):
            for r in cfg.grid("n_over_d"):
                for rep in range(cfg.replications):
                    def make(job, d=int(d), r=float(r)):
                        data, _ = _classification_data(p, d, int(round(r * d)), job.seed)
                        return {"spec": spec, "data": data, "cfg": _class_cfg(p), "p": p,
                                "init_seed": job.init_seed, "target": p["target"]}
                    _deferred(b, {"d": int(d), "n_over_d": float(r)}, rep, job_hitting_time, make)

    def aggregate(jobs, results):
        curve = []
        for key, res in _groups(jobs, results).items():
            its = [r["iterations"] for r in res]
            if not its:
                curve.append(CurvePoint(dict(key), "iterations", math.nan, None, 0))
                continue
            lo, hi = np.quantile(its, [0.05, 0.95]) if len(its) >= 2 else (its[0], its[0])
            curve.append(CurvePoint(dict(key), "iterations", trimmed_mean(its),
                                    float(hi - lo) if len(its) >= 2 else None, len(its)))
        return {"fig4b": curve}, {}

    return _run_generic(cfg, build, aggregate)


def _sparse_spec(p, d):
    n, lam = sparse_setup(p, d)
    return models.ModelSpec("classification", radius=p["radius"], lam=lam), n


def _spread_curve_aggregate(name):
    def aggregate(jobs, results):
        curves, summary = {name: []}, {"decay": {}}
        for key, res in _groups(jobs, results).items():
            if not res:
                continue
            length = max(r["std"].size for r in res)
            mat = np.array([np.concatenate([r["std"], np.full(length - r["std"].size, r["std"][-1])]) for r in res])
            pts = []
            for k in range(length):
                mean, std, count = _mean_std(mat[:, k])
                pt = CurvePoint({**dict(key), "k": k}, "std", mean, std, count,
                                {"log10_distance": float(np.log10(max(mean, 1e-300)))})
                pts.append(pt)
            curves[name].extend(pts)
            label = ",".join(f"{k}={v}" for k, v in key)
            summary["decay"][label] = decay_fit(pts, 0, 1e-10)
        return curves, summary

    return aggregate


def run_fig5(cfg: ExperimentConfig) -> ExperimentResult:
    p = cfg.params

    def build(b):
        for d in cfg.grid("d"):
            spec, n = _sparse_spec(p, int(d))
            for rep in range(cfg.replications):
                def make(job, d=int(d), spec=spec, n=n):
                    data, _ = _classification_data({"theta0_norm": 1.0}, d, n, job.seed, sparsity=int(p["s0"]))
                    ocfg = optim.OptConfig(method="proxgd", step=p["step"], max_iter=int(p["max_iter"]))
                    return {"spec": spec, "data": data, "cfg": ocfg, "p": p, "n_inits": cfg.inits,
                            "init_seed": job.init_seed}
                _deferred(b, {"d": int(d)}, rep, job_spread_curve, make)

    return _run_generic(cfg, build, _spread_curve_aggregate("fig5"))


def run_fig6(cfg: ExperimentConfig) -> ExperimentResult:
    p = cfg.params
    length = int(p["iters"]) + 1

    def build(b):
        for d in cfg.grid("d"):
            spec, n = _sparse_spec(p, int(d))
            for rep in range(cfg.replications):
                def make(job, d=int(d), spec=spec, n=n):
                    data, truth = _classification_data({"theta0_norm": 1.0}, d, n, job.seed, sparsity=int(p["s0"]))
                    ocfg = optim.OptConfig(method="proxgd", step=p["step"], max_iter=length)
                    return {"spec": spec, "data": data, "truth": truth, "cfg": ocfg, "p": p,
                            "init_seed": job.init_seed, "length": length}
                _deferred(b, {"d": int(d)}, rep, job_trajectory, make)

    def aggregate(jobs, results):
        return _trajectory_curves(_groups(jobs, results), length, "fig6a", "fig6b"), {}

    return _run_generic(cfg, build, aggregate)


def _robust_data(p, d, seed, delta=0.0, sigma2=1.0):
    n = int(round(p["n_over_d"] * d))
    if delta > 0:
        gen = datagen.GenConfig("robust-regression", n=n, d=d, seed=seed, noise="contaminated",
                                contamination=delta, outlier_var=sigma2)
    else:
        gen = datagen.GenConfig("robust-regression", n=n, d=d, seed=seed)
    return datagen.generate(gen)


def _robust_cfg(p) -> optim.OptConfig:
    return optim.OptConfig(method="gd", step=p["step"], max_iter=int(p["max_iter"]), halving=True)


def _robust_spec(p):
    return models.ModelSpec("robust-regression", radius=p["radius"], loss=models.tukey(p["t0"]))


def run_fig7(cfg: ExperimentConfig) -> ExperimentResult:
    p = cfg.params

    def build(b):
        for d in cfg.grid("d"):
            for rep in range(cfg.replications):
                def make(job, d=int(d)):
                    data, _ = _robust_data(p, d, job.seed)
                    return {"spec": _robust_spec(p), "data": data, "cfg": _robust_cfg(p), "p": p,
                            "n_inits": cfg.inits, "init_seed": job.init_seed}
                _deferred(b, {"d": int(d)}, rep, job_spread_curve, make)

    return _run_generic(cfg, build, _spread_curve_aggregate("fig7"))


def run_fig8a(cfg: ExperimentConfig) -> ExperimentResult:
    p = cfg.params

    def build(b):
        for d in cfg.grid("d"):
            for delta in cfg.grid("delta"):
                for rep in range(cfg.replications):
                    def make(job, d=int(d), delta=float(delta)):
                        data, _ = _robust_data(p, d, job.seed, delta, float(p["sigma2"]))
                        return {"spec": _robust_spec(p), "data": data, "cfg": _robust_cfg(p), "p": p,
                                "n_inits": cfg.inits, "init_seed": job.init_seed}
                    _deferred(b, {"d": int(d), "delta": float(delta)}, rep, job_spread_curve, make)

    return _run_generic(cfg, build, _spread_curve_aggregate("fig8a"))


def run_fig8b(cfg: ExperimentConfig) -> ExperimentResult:
    p = cfg.params

    def build(b):
        for d in cfg.grid("d"):
            for delta in cfg.grid("delta"):
                for s2 in cfg.grid("sigma2"):
                    for rep in range(cfg.replications):
                        def make(job, d=int(d), delta=float(delta), s2=float(s2)):
                            data, truth = _robust_data(p, d, job.seed, delta, s2)
                            return {"spec": _robust_spec(p), "data": data, "truth": truth, "cfg": _robust_cfg(p),
                                    "p": p, "init_seed": job.init_seed}
                        _deferred(b, {"d": int(d), "delta": float(delta), "sigma2": float(s2)}, rep,
                                  job_robust_pair, make)

    def aggregate(jobs, results):
        curve = []
        for key, res in _groups(jobs, results).items():
            for est in ("tukey", "ols"):
                mean, std, count = _mean_std([r[est] for r in res])
                curve.append(CurvePoint({**dict(key), "estimator": est}, "error", mean, std, count))
        return {"fig8b": curve}, {}

    return _run_generic(cfg, build, aggregate)


def _gmm_data(p, d, seed):
    n = int(round(p["n_over_d"] * d))
    gen = datagen.GenConfig("gmm2", n=n, d=d, seed=seed, separation=p["separation"])
    data, (c1, c2) = datagen.generate(gen)
    return data, np.concatenate([c1, c2])


def _run_gmm(cfg: ExperimentConfig, which: str) -> ExperimentResult:
    p = cfg.params
    length = int(p["iters"]) + 1

    def build(b):
        for d in cfg.grid("d"):
            for rep in range(cfg.replications):
                def make(job, d=int(d)):
                    data, truth = _gmm_data(p, d, job.seed)
                    ocfg = optim.OptConfig(method="gd", step=p["step"], max_iter=length, halving=True)
                    return {"spec": models.ModelSpec("gmm2"), "data": data, "truth": truth, "cfg": ocfg, "p": p,
                            "init_seed": job.init_seed, "length": length, "gmm": True}
                _deferred(b, {"d": int(d)}, rep, job_trajectory, make)

    def aggregate(jobs, results):
        curves = _trajectory_curves(_groups(jobs, results), length, "fig9b", "fig9a")
        return {which: curves[which]}, {}

    return _run_generic(cfg, build, aggregate)


def run_fig9a(cfg):
    return _run_gmm(cfg, "fig9a")


def run_fig9b(cfg):
    return _run_gmm(cfg, "fig9b")


def run_morse(cfg: ExperimentConfig) -> ExperimentResult:
    p = cfg.params
    eps = [float(e) for e in cfg.grid("epsilon")]

    def build(b):
        for sep in cfg.grid("separation"):
            b.add({"separation": float(sep)}, 0, job_morse, lambda job, sep=float(sep): {
                "separation": sep, "epsilon_list": eps, "eta": p["eta"], "per_axis": int(p["per_axis"]),
                "radius_factor": p["radius_factor"], "n_starts": int(p["n_starts"]), "seed": job.seed})

    def aggregate(jobs, results):
        curve, reports = [], {}
        for job, res in zip(jobs, results):
            if res is None:
                continue
            idx = sorted(c.index for c in res["points"])
            for e, cert in zip(eps, res["certs"]):
                curve.append(CurvePoint({**job.coords, "epsilon": e}, "max_eta",
                                        math.nan if cert.max_eta is None else cert.max_eta, None, 1,
                                        {"holds": int(cert.holds), "n_critical": len(idx),
                                         "indices": "/".join(map(str, idx))}))
            reports[str(job.coords["separation"])] = res["report"]
        return {"morse-cert": curve}, {"reports": reports}

    return _run_generic(cfg, build, aggregate)


def run_unif(cfg: ExperimentConfig) -> ExperimentResult:
    p = cfg.params
    d = int(p["d"])
    theta0 = p["theta0_norm"] * datagen.random_unit(d, rng_stream(cfg.seed, "unif-conv", "theta0"))
    spec = models.ModelSpec("classification", radius=p["radius"])
    orc = oracle.oracle_for(spec, theta0)
    grid = oracle.ball_grid(int(p["n_grid"]), d, p["radius"], seed_of(cfg.seed, "unif-conv", "grid"))

    def build(b):
        for n in cfg.grid("n"):
            for rep in range(cfg.replications):
                def make(job, n=int(n)):
                    gen = datagen.GenConfig("classification", n=n, d=d, seed=job.seed, theta0=theta0)
                    data, _ = datagen.generate(gen)
                    return {"spec": spec, "data": data, "orc": orc, "grid": grid}
                _deferred(b, {"n": int(n)}, rep, job_unif_gap, make)

    def aggregate(jobs, results):
        curve = []
        med = {"grad_gap": [], "hess_gap": []}
        for key, res in _groups(jobs, results).items():
            for stat in ("grad_gap", "hess_gap"):
                vals = [r[stat] for r in res]
                m = float(np.median(vals)) if vals else math.nan
                med[stat].append(m)
                lo, hi = np.quantile(vals, [0.25, 0.75]) if len(vals) >= 2 else (m, m)
                curve.append(CurvePoint({**dict(key), "gap": stat}, "median_sup_gap", m,
                                        float(hi - lo) if len(vals) >= 2 else None, len(vals)))
        ns = [float(n) for n in cfg.grid("n")]
        summary = {
            "ratios": {stat: [v2 / v1 for v1, v2 in zip(vals, vals[1:])] for stat, vals in med.items()},
            "n_ratios": [b2 / b1 for b1, b2 in zip(ns, ns[1:])],
        }
        return {"unif-conv": curve}, summary

    return _run_generic(cfg, build, aggregate)


RUNNERS = {
    "fig3a": run_fig3a,
    "fig3b": run_fig3b,
    "fig4a": run_fig4a,
    "fig4b": run_fig4b,
    "fig5": run_fig5,
    "fig6": run_fig6,
    "fig7": run_fig7,
    "fig8a": run_fig8a,
    "fig8b": run_fig8b,
    "fig9a": run_fig9a,
    "fig9b": run_fig9b,
    "morse-cert": run_morse,
    "unif-conv": run_unif,
}


# --------------------------------------------------------------------------
# output


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def curve_csv(points: list) -> str:
    """One CurvePoint per row: coordinates, statistic, dispersion, n_reps, extras."""
    if not points:
        raise InvalidInput("empty curve")
    coord_keys = list(points[0].coords)
    extra_keys = sorted({k for pt in points for k in pt.extra})
    stat = points[0].statistic
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(coord_keys + [stat, "dispersion", "n_reps"] + extra_keys)
    for pt in points:
        writer.writerow([_fmt(pt.coords[k]) for k in coord_keys] + [_fmt(pt.value), _fmt(pt.dispersion),
                        str(pt.n_reps)] + [_fmt(pt.extra.get(k)) for k in extra_keys])
    return buf.getvalue()


@dataclass
class RunOutput:
    result: ExperimentResult
    files: list
    manifest: dict


def run_experiment(cfg: ExperimentConfig, out: Optional[str] = None) -> RunOutput:
    """Run a sweep and write ``<curve>.csv`` files plus ``manifest.json`` to the output directory."""
    out_dir = Path(out or cfg.out or f"out/{cfg.experiment}")
    out_dir.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    result = RUNNERS[cfg.experiment](cfg)
    wall = time.perf_counter() - start
    files = []
    for name, points in result.curves.items():
        if not points:
            log.warning("curve %s is empty (all instances failed)", name)
            continue
        path = out_dir / f"{name}.csv"
        path.write_text(curve_csv(points))
        files.append(str(path))
    manifest = {
        "schema": MANIFEST_SCHEMA,
        "config": cfg.to_dict(),
        "code_version": __version__,
        "wall_time_s": wall,
        "threads": cfg.thread_count(),
        "n_jobs": len(result.jobs),
        "failures": result.failures,
        "failure_rate": result.failure_rate,
        "curves": files,
        "summary": result.summary,
        "seeds": [{"job": j.index, "coords": j.coords, "rep": j.rep, "instance_seed": j.seed,
                   "init_seed": j.init_seed} for j in result.jobs],
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_json_default))
    log.info("%s: %d jobs, %d failures, %.1fs", cfg.experiment, len(result.jobs), result.failures, wall)
    return RunOutput(result, files, manifest)


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer, np.floating, np.bool_)):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def emit_plotdata(curve_files, out_dir) -> list[str]:
    """Bundle curve CSVs into one tidy CSV and one gnuplot data file per figure.

    The figure id is the file stem (``fig6a.csv`` -> ``fig6a``).  Each input
    curve becomes one gnuplot data block (blocks separated by two blank lines,
    addressable with ``index``).
    """
    files = [Path(f) for f in curve_files]
    if not files:
        raise InvalidInput("no curve files given")
    missing = [str(f) for f in files if not f.is_file()]
    if missing:
        raise InvalidInput(f"missing curve files: {missing}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_fig: dict = {}
    for f in files:
        by_fig.setdefault(f.stem.split("__")[0], []).append(f)
    written = []
    for fig, group in by_fig.items():
        header, rows, blocks = None, [], []
        for f in group:
            with f.open(newline="") as fh:
                reader = list(csv.reader(fh))
            if not reader:
                raise InvalidInput(f"curve file {f} is empty")
            if header is None:
                header = reader[0]
            elif reader[0] != header:
                raise InvalidInput(f"curve file {f} has a different schema from the rest of {fig}")
            rows.extend(reader[1:])
            blocks.append((f.stem, reader))
        tidy = out_dir / f"{fig}_plotdata.csv"
        with tidy.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)
        dat = out_dir / f"{fig}.dat"
        with dat.open("w") as fh:
            for i, (name, reader) in enumerate(blocks):
                if i:
                    fh.write("\n\n")
                fh.write(f"# {name}\n# " + " ".join(reader[0]) + "\n")
                for row in reader[1:]:
                    fh.write(" ".join(v if v != "" else "NaN" for v in row) + "\n")
        written += [str(tidy), str(dat)]
    return written
