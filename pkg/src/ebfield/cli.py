"""Command-line interface.

Exit codes: 0 success, 1 tolerance or scenario-validation failure,
2 solver failure, 3 bad input.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import report
from .distnet import Network
from .errors import (InvalidInputError, ModelMisspecificationError, ScenarioValidationError,
                     SolverError, ToleranceError)
from .estimator import MLResult, fit_ml_multistart, map_posterior, ml_cost, regression_prior_mean
from .scenario import (PRESETS, PipelineResult, ScenarioConfig, build_problem, compare_fits, generate,
                       monte_carlo, run_pipeline, trial_metrics)

EXIT_OK, EXIT_TOLERANCE, EXIT_SOLVER, EXIT_INPUT = 0, 1, 2, 3
OUTPUT_ENV = "EBFIELD_OUTPUT_DIR"

log = logging.getLogger("ebfield")


def load_config(spec: str, seed: int | None = None) -> ScenarioConfig:
    """``spec`` is a JSON file path or the name of a preset."""
    if spec in PRESETS and not Path(spec).exists():
        cfg = ScenarioConfig.preset(spec)
    else:
        try:
            cfg = ScenarioConfig.load(spec)
        except OSError as exc:
            raise InvalidInputError(f"cannot read scenario {spec!r}: {exc}") from exc
    return cfg if seed is None else cfg.with_seed(seed)


def _out_dir(args) -> Path:
    if args.out is not None:
        return Path(args.out)
    return Path(os.environ.get(OUTPUT_ENV, "ebfield-out"))


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_generate(args) -> int:
    cfg = load_config(args.scenario, args.seed)
    obs, _ = generate(cfg)
    out = _out_dir(args)
    report.write_json(report._writable_dir(out) / "config.json", cfg.to_dict())
    path = report.emit_dataset(obs, out)
    print(f"wrote {obs.n} sensors, {int(obs.counts.sum())} observations to {path}")
    return EXIT_OK


def cmd_fit(args) -> int:
    cfg = load_config(args.scenario, args.seed)
    result = run_pipeline(cfg, args.mode)
    files = report.emit_fit(result, _out_dir(args))
    summary = {"gamma_ml": result.ml.gamma_ml.tolist(), "cost": result.ml.cost,
               "converged": result.ml.converged, "metrics": result.metrics.to_dict()}
    if result.trace is not None:
        summary["messages"] = result.trace.total_messages
        summary["rounds"] = result.trace.rounds
    _print_json(summary)
    log.info("wrote %s", ", ".join(str(p) for p in files.values()))
    return EXIT_OK


def regress_saved(cfg: ScenarioConfig, saved: MLResult) -> PipelineResult:
    """MAP regression from a stored ML estimate on freshly generated data.

    ``z`` and the mean are recomputed from the stored hyperparameters so the
    result is consistent with the data the config produces.
    """
    problem = build_problem(cfg)
    if saved.gamma_ml.size != problem.dynamics.n_params:
        raise InvalidInputError(f"saved result has {saved.gamma_ml.size} hyperparameters, "
                                f"scenario needs {problem.dynamics.n_params}")
    gamma = saved.gamma_ml
    cost, z = ml_cost(problem.dynamics, problem.system, gamma)
    ml = MLResult(saved.gamma, z, problem.dynamics.solve_mean(gamma), cost, saved.iterations,
                  saved.converged, dict(saved.diagnostics))
    posterior = map_posterior(ml, problem.dynamics, problem.system, problem.grid)
    prior = regression_prior_mean(problem.dynamics, ml, problem.grid)
    metrics = trial_metrics(problem.truth(problem.grid.coords), prior, posterior, gamma,
                            problem.true_gamma)
    return PipelineResult(problem, "centralized", ml, prior, posterior, metrics)


def cmd_map(args) -> int:
    cfg = load_config(args.scenario, args.seed)
    try:
        saved = MLResult.from_dict(report.read_json(args.ml))
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidInputError(f"{args.ml} is not a saved ML result: {exc}") from exc
    result = regress_saved(cfg, saved)
    report.emit_plotdata(result, _out_dir(args))
    _print_json({"metrics": result.metrics.to_dict()})
    return EXIT_OK


def cmd_montecarlo(args) -> int:
    cfg = load_config(args.scenario, args.seed)
    rep = monte_carlo(cfg, args.trials, args.mode)
    report.write_json(report._writable_dir(_out_dir(args)) / "montecarlo.json", rep)
    _print_json(rep)
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = load_config(args.scenario, args.seed)
    problem = build_problem(cfg)
    central = fit_ml_multistart(problem.dynamics, problem.system, problem.init, problem.solver)
    net = Network(problem.observations.locations, problem.system.stats, problem.kernel,
                  problem.dynamics)
    dist = net.fit_ml_multistart(problem.init, problem.solver)
    comparison = compare_fits(problem, central, dist, net)
    comparison["messages"] = net.trace.total_messages
    comparison["rounds"] = net.trace.rounds
    _print_json(comparison)
    ok = all(v for k, v in comparison.items() if k.endswith("_ok"))
    if not ok:
        print("tolerance exceeded", file=sys.stderr)
    return EXIT_OK if ok else EXIT_TOLERANCE


def cmd_plotdata(args) -> int:
    cfg = load_config(args.scenario, args.seed)
    result = run_pipeline(cfg, args.mode)
    files = report.emit_plotdata(result, _out_dir(args))
    for p in files.values():
        print(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ebfield",
        description="Empirical Bayes spatial field estimation, centralized or in a simulated network.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, mode=False):
        p.add_argument("--scenario", default="temperature",
                       help="scenario JSON file or preset name (temperature, spline)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None,
                       help=f"output directory (default ${OUTPUT_ENV} or ./ebfield-out)")
        if mode:
            p.add_argument("--mode", choices=("centralized", "distributed"), default="centralized")
        return p

    common(sub.add_parser("generate", help="emit a synthetic dataset")).set_defaults(func=cmd_generate)
    common(sub.add_parser("fit", help="ML fit, MAP regression and metrics"), mode=True).set_defaults(func=cmd_fit)
    p = common(sub.add_parser("map", help="MAP regression from a saved ML result"))
    p.add_argument("--ml", required=True, help="ml_result.json written by fit")
    p.set_defaults(func=cmd_map)
    p = common(sub.add_parser("montecarlo", help="repeat the pipeline over seeds"), mode=True)
    p.add_argument("--trials", type=int, default=100)
    p.set_defaults(func=cmd_montecarlo)
    common(sub.add_parser("compare", help="centralized vs in-network deviations")).set_defaults(func=cmd_compare)
    common(sub.add_parser("plotdata", help="write field.csv and points.csv"), mode=True).set_defaults(func=cmd_plotdata)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits with 2 on usage errors
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ToleranceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TOLERANCE
    except ScenarioValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TOLERANCE
    except SolverError as exc:
        residuals = getattr(exc, "residuals", None)
        tail = f" (last residuals {residuals[-3:]})" if residuals else ""
        print(f"solver failure: {exc}{tail}", file=sys.stderr)
        return EXIT_SOLVER
    except (InvalidInputError, ModelMisspecificationError) as exc:
        print(f"bad input: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except np.linalg.LinAlgError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
