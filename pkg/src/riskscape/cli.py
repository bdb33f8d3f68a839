"""Command line entry point: ``riskscape gen|fit|landscape|experiment|oracle``.

Every subcommand reads an optional ``--config`` file (TOML or JSON, chosen by
suffix).  Flags given on the command line win over the file.  Exit codes: 0
success, 1 runtime failure, 2 bad config or arguments, 3 too many failed
instances in an experiment sweep.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__, datagen, experiments, formats, landscape, models, optim, oracle
from .core import project_ball, rng_stream
from .errors import InvalidInput, RiskscapeError

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

log = logging.getLogger("riskscape")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2, 3


def load_config(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise InvalidInput(f"config file {path} not found")
    text = path.read_text()
    try:
        if path.suffix.lower() == ".json":
            raw = json.loads(text)
        else:
            raw = tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as err:
        raise InvalidInput(f"cannot parse {path}: {err}") from err
    if not isinstance(raw, dict):
        raise InvalidInput("config must be a table/object at the top level")
    return raw


def _section(raw: dict, name: str) -> dict:
    sec = raw.get(name, {})
    if not isinstance(sec, dict):
        raise InvalidInput(f"[{name}] must be a table")
    return dict(sec)


def model_spec(raw: dict, family: str | None = None) -> models.ModelSpec:
    m = _section(raw, "model")
    fam = family or m.pop("family", None) or raw.get("family")
    m.pop("family", None)
    if fam is None:
        raise InvalidInput("model family not given")
    kw = {"family": fam}
    if "radius" in m:
        kw["radius"] = float(m.pop("radius"))
    if "lam" in m:
        kw["lam"] = float(m.pop("lam"))
    if "activation" in m:
        name = m.pop("activation")
        if name not in models.ACTIVATIONS:
            raise InvalidInput(f"unknown activation {name!r}")
        kw["activation"] = models.ACTIVATIONS[name]
    if "loss" in m:
        kw["loss"] = models.make_loss(m.pop("loss"), m.pop("loss_param", None))
    if "theta0" in m:
        kw["theta0"] = np.asarray(m.pop("theta0"), dtype=float)
    if m:
        raise InvalidInput(f"unknown [model] keys: {sorted(m)}")
    return models.ModelSpec(**kw)


def opt_config(raw: dict) -> optim.OptConfig:
    o = _section(raw, "optimizer")
    o.pop("init", None)
    o.pop("init_scale", None)
    try:
        return optim.OptConfig(**o)
    except TypeError as err:
        raise InvalidInput(f"bad [optimizer] section: {err}") from err


def gen_config(raw: dict, args) -> datagen.GenConfig:
    g = _section(raw, "data")
    for key in ("family", "n", "d", "seed"):
        val = getattr(args, key, None)
        if val is not None:
            g[key] = val
    g.setdefault("seed", 0)
    if "activation" in g:
        g["activation"] = models.ACTIVATIONS[g["activation"]]
    for key in ("theta0",):
        if key in g:
            g[key] = np.asarray(g[key], dtype=float)
    if "centers" in g:
        g["centers"] = tuple(np.asarray(c, dtype=float) for c in g["centers"])
    missing = [k for k in ("family", "n", "d") if k not in g]
    if missing:
        raise InvalidInput(f"data generation needs {missing}")
    try:
        return datagen.GenConfig(**g)
    except TypeError as err:
        raise InvalidInput(f"bad [data] section: {err}") from err


def _truth_json(truth) -> dict:
    if isinstance(truth, tuple):
        return {"centers": [c.tolist() for c in truth]}
    return {"theta0": truth.tolist()}


def _write_json(obj, out):
    text = json.dumps(obj, indent=2, sort_keys=True, default=experiments._json_default)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n")
    else:
        print(text)


# --------------------------------------------------------------------------
# subcommands


def cmd_gen(args, raw) -> int:
    cfg = gen_config(raw, args)
    data, truth = datagen.generate(cfg)
    out = Path(args.out or f"{cfg.family}_n{cfg.n}_d{cfg.d}.rsds")
    out.parent.mkdir(parents=True, exist_ok=True)
    formats.save_dataset(data, out)
    truth_path = out.with_name(out.name + ".truth.json")
    truth_path.write_text(json.dumps({"family": cfg.family, "seed": cfg.seed, **_truth_json(truth)}, indent=2) + "\n")
    print(f"wrote {out} ({data.n} x {data.d}) and {truth_path}")
    return EXIT_OK


def _init_point(raw, p, seed, radius):
    o = _section(raw, "optimizer")
    init = o.get("init", "gaussian")
    if isinstance(init, list):
        x0 = np.asarray(init, dtype=float)
        if x0.size != p:
            raise InvalidInput(f"init has length {x0.size}, expected {p}")
        return x0
    if init == "zeros":
        return np.zeros(p)
    if init == "gaussian":
        x0 = landscape.gaussian_init(float(o.get("init_scale", 1.0)))(rng_stream(seed, "cli-init"), p)
        return x0 if not math.isfinite(radius) else project_ball(x0, radius)
    raise InvalidInput(f"unknown init {init!r}")


def cmd_fit(args, raw) -> int:
    data_path = args.data or raw.get("data_file")
    if not data_path:
        raise InvalidInput("fit needs --data")
    data = formats.load_dataset(data_path)
    spec = model_spec(raw, family=data.family if "family" not in _section(raw, "model") else None)
    cfg = opt_config(raw)
    seed = args.seed if args.seed is not None else int(raw.get("seed", 0))
    x0 = _init_point(raw, models.param_dim(spec.family, data.d), seed, spec.radius)
    traj = optim.run(spec, data, x0, cfg)
    if args.out:
        formats.save_trajectory_csv(traj, args.out, reference=traj.final)
    _write_json({
        "method": traj.method,
        "converged": traj.converged,
        "reason": traj.reason,
        "iterations": traj.n_iter,
        "risk": traj.risks[-1],
        "objective": traj.objectives[-1],
        "stationarity": traj.grad_norms[-1],
        "final": traj.final,
    }, None)
    return EXIT_OK


def _population_oracle(raw) -> tuple[oracle.PopulationOracle, models.ModelSpec]:
    o = _section(raw, "oracle")
    spec = model_spec(raw)
    kw = {k: o[k] for k in ("method", "nodes", "mc_samples", "seed") if k in o}
    if spec.family == "gmm2":
        if "centers" in o:
            centers = tuple(np.asarray(c, dtype=float) for c in o["centers"])
        else:
            d = int(o.get("d", 1))
            sep = float(o.get("separation", 1.5))
            u = np.zeros(d)
            u[0] = 1.0
            centers = (-sep * u, sep * u)
        return oracle.oracle_for(spec, centers, **kw), spec
    theta0 = o.get("theta0", None if spec.theta0 is None else spec.theta0.tolist())
    if theta0 is None:
        raise InvalidInput("[oracle] needs theta0 for this family")
    noise = None
    if spec.family == "robust-regression":
        delta = float(o.get("contamination", 0.0))
        noise = (oracle.NoiseLaw.contaminated(delta, float(o.get("outlier_var", 1.0))) if delta > 0
                 else oracle.NoiseLaw.gaussian(float(o.get("noise_var", 1.0))))
    return oracle.oracle_for(spec, np.asarray(theta0, dtype=float), noise=noise, **kw), spec


def cmd_oracle(args, raw) -> int:
    orc, _ = _population_oracle(raw)
    points = _section(raw, "oracle").get("points")
    if points is None:
        raise InvalidInput("[oracle] needs a list of points")
    rows = []
    for theta in np.atleast_2d(np.asarray(points, dtype=float)):
        r, g, h = orc.evaluate(theta)
        rows.append({"theta": theta, "risk": r, "grad": g, "hessian": h,
                     "hessian_eigenvalues": np.linalg.eigvalsh(h)})
    _write_json({"family": orc.spec.family, "method": orc.method, "points": rows}, args.out)
    return EXIT_OK


def cmd_landscape(args, raw) -> int:
    ls = _section(raw, "landscape")
    seed = args.seed if args.seed is not None else int(ls.get("seed", 0))
    n_starts = int(ls.get("n_starts", 30))
    objectives = []
    if args.data or ls.get("data_file"):
        data = formats.load_dataset(args.data or ls["data_file"])
        spec = model_spec(raw, family=data.family if "family" not in _section(raw, "model") else None)
        objectives.append(("empirical", optim.empirical_objective(spec, data), models.param_dim(spec.family, data.d)))
    if "oracle" in raw:
        orc, spec = _population_oracle(raw)
        objectives.insert(0, ("population", orc.objective(spec.radius), orc.p))
    if not objectives:
        raise InvalidInput("landscape needs --data and/or an [oracle] section")
    p = objectives[0][2]
    center = np.asarray(ls.get("center", np.zeros(p)), dtype=float)
    radius = float(ls.get("radius", 3.0))
    found = [landscape.find_critical_points(obj, center, radius, n_starts, seed) for _, obj, _ in objectives]
    report = landscape.LandscapeReport(critical_points=found[0])
    if len(found) == 2:
        report.reference_points = found[1]
        report.pairing = landscape.match_critical_points(found[0], found[1])
    if "epsilon" in ls:
        grid = landscape.GridSpec(**{k: ls[k] for k in ("kind", "per_axis", "n_points", "n_boundary", "budget")
                                     if k in ls}, seed=seed)
        report.certificate = landscape.certify_strong_morse(objectives[0][1], center, radius, grid,
                                                            float(ls["epsilon"]), float(ls.get("eta", 0.0)))
    _write_json(report.to_dict(), args.out)
    return EXIT_OK


def cmd_experiment(args, raw) -> int:
    raw = dict(raw)
    if args.experiment:
        raw["experiment"] = args.experiment
    cfg = experiments.ExperimentConfig.from_mapping(raw, seed=args.seed, threads=args.threads, out=args.out)
    run = experiments.run_experiment(cfg)
    if args.plotdata and run.files:
        experiments.emit_plotdata(run.files, Path(run.files[0]).parent / "plotdata")
    for f in run.files:
        print(f)
    if run.result.failure_rate > cfg.max_failure_rate:
        log.error("%d of %d instances failed (rate %.3f > %.3f)", run.result.failures, len(run.result.jobs),
                  run.result.failure_rate, cfg.max_failure_rate)
        return EXIT_PARTIAL
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "fit": cmd_fit, "landscape": cmd_landscape, "experiment": cmd_experiment,
            "oracle": cmd_oracle}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="riskscape", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"riskscape {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="TOML or JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int, help=f"worker threads (default ${experiments.THREADS_ENV} or 1)")
        p.add_argument("--out", help="output file or directory")
        return p

    g = common(sub.add_parser("gen", help="generate a synthetic dataset"))
    g.add_argument("--family", choices=list(models.FAMILIES))
    g.add_argument("-n", type=int, dest="n")
    g.add_argument("-d", type=int, dest="d")
    f = common(sub.add_parser("fit", help="minimize an empirical risk"))
    f.add_argument("--data")
    ls = common(sub.add_parser("landscape", help="critical points, matching and Morse certificates"))
    ls.add_argument("--data")
    e = common(sub.add_parser("experiment", help="run a simulation sweep"))
    e.add_argument("experiment", nargs="?", choices=list(experiments.EXPERIMENT_IDS))
    e.add_argument("--plotdata", action="store_true", help="also write tidy CSV / gnuplot bundles")
    common(sub.add_parser("oracle", help="evaluate the population risk"))
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        raw = load_config(args.config)
    except InvalidInput as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args, raw)
    except InvalidInput as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except RiskscapeError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
