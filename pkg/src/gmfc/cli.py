"""Command line entry point ``gmfc``."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import errors
from .adjoint import gateaux_check, optimal_controls, pontryagin_residual, solve_pontryagin_fbsde
from .builtins import REGISTRY, Reference, reference
from .experiments import continuity_experiment, convergence_experiments, stability_experiment, write_report
from .forward import SimConfig
from .graphon import Graphon, load_graphon, min_degree_bound, normalize, step_graphon_from_matrix
from .model import LinearQuadraticSpec, validate_model
from .nagent import (ZeroAgentControl, agent_initials, cost_nagent, decentralized_controls_from_gmfc,
                     sample_interaction_matrix, simulate_nagent)
from .oracle import lq_oracle

EXIT_OK, EXIT_SOLVER, EXIT_CONFIG, EXIT_ASSERT = 0, 1, 2, 3

SOLVER_ERRORS = (errors.NonFiniteState, errors.PicardDivergence, errors.RegressionSingular,
                 errors.AdjointDivergence, errors.OuterDivergence, errors.RiccatiBlowup, errors.NonConvergence,
                 errors.NonConvexDetected)

DEFAULT_PAIRS = [[0.475, 0.675], [0.525, 0.625], [0.575, 0.625], [0.525, 0.525]]
DEFAULT_NS = [25, 50, 100, 200, 400, 800]
DEFAULT_MODEL = {"stability": "lq-2block", "continuity": "lq-hetero"}

SIM_FLAGS = {"labels": "M", "particles": "P", "steps": "n_steps", "horizon": "T", "picard_tol": "picard_tol",
             "picard_max": "picard_max", "damping": "damping", "basis": "basis", "regression": "regression",
             "outer_tol": "outer_tol", "outer_max": "outer_max", "rho": "rho"}


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    model: object
    graphon: Graphon
    sim: SimConfig
    experiment: dict
    out: Path
    graphon_prime: Graphon = None


def _resolve(path, base: Path) -> Path:
    p = Path(path)
    return p if p.is_absolute() else base / p


def _load_model(source, base: Path):
    if isinstance(source, str) and source in REGISTRY:
        return reference(source)
    if isinstance(source, dict):
        model = LinearQuadraticSpec.from_json(source)
    else:
        path = _resolve(source, base)
        if not path.exists():
            raise ConfigError(f"model {source!r} is neither a built-in name ({sorted(REGISTRY)}) nor a file")
        model = LinearQuadraticSpec.from_json(path)
    return Reference(model, Graphon.constant(1.0))


def _load_graphon(source, base: Path) -> Graphon:
    if isinstance(source, dict):
        return load_graphon(source)
    path = _resolve(source, base)
    if path.suffix == ".csv":
        return step_graphon_from_matrix(np.loadtxt(path, delimiter=",", ndmin=2))
    return load_graphon(path)


def build_config(args) -> RunConfig:
    data, base = {}, Path.cwd()
    if args.config:
        path = Path(args.config)
        try:
            data = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        base = path.resolve().parent
    model_source = args.model or data.get("model", DEFAULT_MODEL.get(args.command, "lq-scalar"))
    ref = _load_model(model_source, base if not args.model else Path.cwd())
    graphon = Graphon.constant(1.0) if args.command == "stability" else ref.graphon
    if args.graphon or data.get("graphon") is not None:
        graphon = _load_graphon(args.graphon or data["graphon"], Path.cwd() if args.graphon else base)
    prime = data.get("graphon_prime")
    prime = _load_graphon(prime, base) if prime is not None else step_graphon_from_matrix([[1.0, 0.3], [0.3, 1.0]])
    sim = {"M": ref.M, "basis": ref.basis}
    sim.update(data.get("sim", {}))
    for flag, key in SIM_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            sim[key] = value
    if args.seed is not None:
        sim["seed"] = args.seed
    if args.threads is not None:
        sim["threads"] = args.threads
    known = {f.name for f in fields(SimConfig)}
    unknown = set(sim) - known
    if unknown:
        raise ConfigError(f"unknown simulation settings {sorted(unknown)}")
    experiment = dict(data.get("experiment", {}))
    for flag in ("n", "mode", "repetitions", "control", "directions"):
        value = getattr(args, flag, None)
        if value is not None:
            experiment[flag] = value
    if getattr(args, "n_list", None):
        experiment["N_list"] = [int(v) for v in args.n_list.split(",")]
    out = Path(args.out or data.get("out") or Path("out") / args.command)
    return RunConfig(ref.model, graphon, SimConfig(**sim), experiment, out, prime)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, np.bool_):
        return bool(v)
    raise TypeError(f"cannot serialize {type(v).__name__}")


# ---------------------------------------------------------------------------
# commands


def _validation(cfg: RunConfig) -> dict:
    report = validate_model(cfg.model, rng=np.random.default_rng(cfg.sim.seed))
    bound = min_degree_bound(cfg.graphon, cfg.sim.grid)
    ok = bool(np.isfinite(bound))
    report["checks"].append({"assumption": "Assumption 2.4", "check": "graphon_min_degree", "pass": ok,
                             "max_inverse_degree": bound if ok else None, "labels": cfg.sim.M})
    report["pass"] = bool(report["pass"] and ok)
    return report


def cmd_validate(cfg: RunConfig, args) -> int:
    report = _validation(cfg)
    _write_json(cfg.out / "report.json", report)
    failed = [c["assumption"] for c in report["checks"] if not c["pass"]]
    print("validate: pass" if report["pass"] else f"validate: FAIL ({', '.join(failed)})")
    return EXIT_OK if report["pass"] else EXIT_SOLVER


def _solve(cfg: RunConfig):
    return solve_pontryagin_fbsde(cfg.model, normalize(cfg.graphon, cfg.sim.grid), cfg.sim)


def _residual_band(model, sol) -> float:
    lam = model.min_lambda() if hasattr(model, "min_lambda") else 1.0
    u = np.repeat(sol.flow.grid.midpoints, sol.flow.particles)
    scale = 0.0
    if hasattr(model, "c"):
        for k in range(sol.adjoint.Yh.shape[1]):
            b3 = model.c("b3", u, sol.flow.times[k])
            y = sol.adjoint.Yh[:, k].reshape(len(u), -1)
            scale = max(scale, float(np.abs(np.einsum("nij,ni->nj", b3, y)).max()))
    else:
        scale = float(np.abs(sol.adjoint.Yh).max())
    return 1e-2 * (lam + scale)


def cmd_solve(cfg: RunConfig, args) -> int:
    report = _validation(cfg)
    if not report["pass"]:
        _write_json(cfg.out / "validation.json", report)
        print("solve: model failed validation")
        return EXIT_SOLVER
    sol = _solve(cfg)
    sol.export(cfg.out)
    band = _residual_band(cfg.model, sol)
    shifted = pontryagin_residual(cfg.model, sol,
                                  controls=optimal_controls(cfg.model, sol.flow, sol.adjoint, sol.ng) + 1.0)
    _write_json(cfg.out / "report.json", {
        "cost": sol.cost.value, "cost_stderr": sol.cost.stderr, "pontryagin_residual": sol.pontryagin_residual,
        "residual_l2": sol.residual_l2, "residual_band": band, "residual_shifted_by_one": shifted[0],
        "iterations": sol.iterations, "config": cfg.sim.to_json()})
    print(f"solve: cost {sol.cost.value:.6f} +- {sol.cost.stderr:.6f}, residual {sol.pontryagin_residual:.3e}, "
          f"iterations {sol.iterations}")
    if args.assert_ and sol.pontryagin_residual > band:
        return EXIT_ASSERT
    return EXIT_OK


def cmd_oracle(cfg: RunConfig, args) -> int:
    if not isinstance(cfg.model, LinearQuadraticSpec):
        raise ConfigError("the oracle needs a linear-quadratic model")
    orc = lq_oracle(cfg.model, normalize(cfg.graphon, cfg.sim.grid), cfg.sim.grid, T=cfg.sim.T)
    cfg.out.mkdir(parents=True, exist_ok=True)
    with open(cfg.out / "oracle.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "label", "eta", "psi", "m", "ybar"])
        for row in orc.to_rows(cfg.sim.times):
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    _write_json(cfg.out / "report.json", {"cost": orc.cost, "label_costs": orc.label_costs,
                                          "residual": orc.residual, "residual_parts": orc.residual_parts})
    print(f"oracle: cost {orc.cost:.8f}, residual {orc.residual:.3e}")
    if args.assert_ and orc.residual > 1e-8:
        return EXIT_ASSERT
    return EXIT_OK


def cmd_simulate_n(cfg: RunConfig, args) -> int:
    exp = cfg.experiment
    N, reps = int(exp.get("n", 100)), int(exp.get("repetitions", 1))
    im = sample_interaction_matrix(cfg.graphon, N, exp.get("mode", "deterministic"), cfg.sim.seed)
    x0 = agent_initials(cfg.model.initial, cfg.sim.seed, N, reps)
    if exp.get("control", "gmfc") == "zero":
        controls = ZeroAgentControl(cfg.model.k)
    else:
        controls = decentralized_controls_from_gmfc(_solve(cfg), im, model=cfg.model)
    paths = simulate_nagent(cfg.model, im, controls, x0, cfg.sim.n_steps, cfg.sim.T, cfg.sim.seed)
    value = cost_nagent(cfg.model, paths, im)
    paths.to_csv(cfg.out)
    _write_json(cfg.out / "report.json", {"N": N, "repetitions": reps, "mode": exp.get("mode", "deterministic"),
                                          "control": exp.get("control", "gmfc"), "cost": value,
                                          "config": cfg.sim.to_json()})
    print(f"simulate-n: N = {N}, cost {value:.6f}")
    return EXIT_OK


def _convergence(cfg: RunConfig):
    exp = cfg.experiment
    return convergence_experiments(cfg.model, cfg.graphon, exp.get("N_list", DEFAULT_NS),
                                   int(exp.get("repetitions", 32)), cfg.sim,
                                   reference_particles=int(exp.get("reference_particles", 20000)),
                                   empirical=bool(exp.get("empirical", False)))


def cmd_poc(cfg: RunConfig, args) -> int:
    poc, _ = _convergence(cfg)
    poc.write(cfg.out)
    print(f"poc: slope {poc.fitted_slope:.4f} (95% CI {poc.slope_ci[0]:.4f}, {poc.slope_ci[1]:.4f})")
    ok = poc.extra["slope_in_band"] and poc.extra["nonincreasing_2sigma"]
    return EXIT_ASSERT if args.assert_ and not ok else EXIT_OK


def cmd_costgap(cfg: RunConfig, args) -> int:
    _, gap = _convergence(cfg)
    gap.write(cfg.out)
    print(f"costgap: gaps {', '.join(f'{e:.3e}' for e in gap.errors)}; slope {gap.fitted_slope:.4f}")
    ok = gap.extra["nonincreasing_2sigma"] and gap.extra["ratio_last_first"] <= 0.25
    return EXIT_ASSERT if args.assert_ and not ok else EXIT_OK


def cmd_stability(cfg: RunConfig, args) -> int:
    report = stability_experiment(cfg.model, cfg.graphon, cfg.graphon_prime, cfg.sim,
                                  tuple(cfg.experiment.get("s_grid", (0.0, 0.25, 0.5, 0.75, 1.0))))
    write_report(report, cfg.out, ["s", "l1", "distance", "stderr"])
    print("stability: distances " + ", ".join(f"{r['distance']:.3e}" for r in report["rows"]))
    ok = report["envelope_ok"] and report["zero_at_origin"]
    return EXIT_ASSERT if args.assert_ and not ok else EXIT_OK


def cmd_continuity(cfg: RunConfig, args) -> int:
    report = continuity_experiment(cfg.model, cfg.graphon, cfg.experiment.get("pairs", DEFAULT_PAIRS), cfg.sim)
    write_report(report, cfg.out, ["u1", "u2", "du", "distance", "stderr", "bound_rhs"])
    print("continuity: distances " + ", ".join(f"{r['distance']:.3e}" for r in report["rows"]))
    ok = report["monotone_2sigma"] and report["identical_zero"]
    return EXIT_ASSERT if args.assert_ and not ok else EXIT_OK


def cmd_gateaux_check(cfg: RunConfig, args) -> int:
    exp = cfg.experiment
    report = gateaux_check(cfg.model, normalize(cfg.graphon, cfg.sim.grid), cfg.sim,
                           controls=int(exp.get("controls", 2)), directions=int(exp.get("directions", 5)),
                           eps=float(exp.get("eps", 1e-3)))
    cfg.out.mkdir(parents=True, exist_ok=True)
    _write_json(cfg.out / "report.json", report)
    with open(cfg.out / "gateaux.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["control", "direction", "adjoint", "fd", "rel_error"])
        for r in report["rows"]:
            w.writerow([r["control"], r["direction"], repr(r["adjoint"]), repr(r["fd"]), repr(r["rel_error"])])
    print(f"gateaux-check: max relative error {report['max_rel_error']:.3e}")
    return EXIT_ASSERT if args.assert_ and report["max_rel_error"] > 1e-2 else EXIT_OK


COMMANDS = {"validate": cmd_validate, "solve": cmd_solve, "oracle": cmd_oracle, "simulate-n": cmd_simulate_n,
            "poc": cmd_poc, "costgap": cmd_costgap, "stability": cmd_stability, "continuity": cmd_continuity,
            "gateaux-check": cmd_gateaux_check}


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gmfc", description="Graphon mean field control toolkit")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--threads", type=int, help="worker cap; results do not depend on it")
    parser.add_argument("--out", help="output directory (default out/<command>)")
    parser.add_argument("--assert", dest="assert_", action="store_true",
                        help="exit 3 when the acceptance band is missed")
    parser.add_argument("--model", help="built-in model name or LQ JSON path")
    parser.add_argument("--graphon", help="graphon JSON or CSV (step matrix) path")
    sim = parser.add_argument_group("simulation overrides")
    sim.add_argument("--labels", type=int)
    sim.add_argument("--particles", type=int)
    sim.add_argument("--steps", type=int)
    sim.add_argument("--horizon", type=float)
    sim.add_argument("--picard-tol", type=float)
    sim.add_argument("--picard-max", type=int)
    sim.add_argument("--damping", type=float)
    sim.add_argument("--basis", choices=["affine", "quadratic"])
    sim.add_argument("--regression", choices=["plain", "joint"])
    sim.add_argument("--outer-tol", type=float)
    sim.add_argument("--outer-max", type=int)
    sim.add_argument("--rho", type=float)
    exp = parser.add_argument_group("experiment overrides")
    exp.add_argument("--n", type=int, help="number of agents (simulate-n)")
    exp.add_argument("--mode", choices=["deterministic", "bernoulli"])
    exp.add_argument("--repetitions", type=int)
    exp.add_argument("--control", choices=["gmfc", "zero"])
    exp.add_argument("--directions", type=int)
    exp.add_argument("--n-list", help="comma-separated agent counts (poc, costgap)")
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        cfg = build_config(args)
    except (ConfigError, ValueError, KeyError, OSError, json.JSONDecodeError, errors.ShapeMismatch,
            errors.AsymmetricMatrix, errors.NegativeEntry) as exc:
        print(f"gmfc: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"gmfc: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (errors.DegenerateDegree, errors.ZeroRow) as exc:
        print(f"gmfc: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except SOLVER_ERRORS as exc:
        print(f"gmfc: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
