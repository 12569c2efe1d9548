"""Command-line entry point: generate, solve, uncertainty, montecarlo, sweep, evaluate.

Exit codes: 0 success, 2 validation, 3 gauge deficiency, 4 non-convergence, 5 I/O.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import SCHEMA_VERSION, __version__
from .ba import RobustLoss, SolverOptions, solve
from .errors import (
    CertificateInapplicableError,
    GaugeDeficiencyError,
    PLBAError,
)
from .evaluation import absolute_trajectory_error, read_trajectory, write_trajectory
from .experiments import sweep_csv, sweep_guidance, trajectory_of, translational_rmse
from .graph import Selector
from .landmarks import NoiseModel
from .problem_io import dumps, load_problem, save_problem
from .synthetic import SceneConfig, generate
from .uncertainty import monte_carlo_covariance, theorem_certificate

log = logging.getLogger("plba")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_GAUGE = 3
EXIT_NONCONVERGENCE = 4
EXIT_IO = 5


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _clean(obj):
    """Replace non-finite floats by None so reports stay valid JSON."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (float, np.floating)) and not math.isfinite(float(obj)):
        return None
    return obj


def _write_text(path, text):
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


def _write_report(path, payload):
    _write_text(path, dumps(_clean({"schema_version": SCHEMA_VERSION, **payload})) + "\n")


# ---------------------------------------------------------------- scene flags


def _add_scene_flags(p):
    p.add_argument("--seed", type=int, required=True, help="master random seed")
    p.add_argument("--free", type=int, default=4, help="number of free keyframes")
    p.add_argument("--fixed", type=int, default=2, help="number of fixed keyframes")
    p.add_argument("--points", type=int, default=60, help="number of point landmarks")
    p.add_argument("--lines", type=int, default=15, help="number of line landmarks")
    p.add_argument("--guidance", type=int, default=5, help="guidance points per line (>= 2)")
    p.add_argument("--trajectory", default="orbit", choices=["orbit", "corridor", "random-walk"])
    p.add_argument("--sigma-p", type=float, default=1.0, help="pixel noise std-dev")
    p.add_argument("--sigma-line", type=float, default=1.0, help="line endpoint noise std-dev (pixels)")
    p.add_argument("--noise-scale", type=float, default=1.0, help="scale on drawn measurement noise")
    p.add_argument("--line-depth-scale", type=float, default=1.0, help="scale on guidance-point depth noise")
    p.add_argument("--outlier-fraction", type=float, default=0.0)


def _scene_config(args):
    if args.guidance < 2:
        raise CliError(f"--guidance must be >= 2, got {args.guidance}", EXIT_VALIDATION)
    noise = NoiseModel(sigma_p=args.sigma_p, sigma_line=args.sigma_line)
    cfg = SceneConfig(
        seed=args.seed,
        num_free=args.free,
        num_fixed=args.fixed,
        num_points=args.points,
        num_lines=args.lines,
        guidance_count=args.guidance,
        trajectory=args.trajectory,
        noise=noise,
        noise_scale=args.noise_scale,
        line_depth_scale=args.line_depth_scale,
        outlier_fraction=args.outlier_fraction,
    )
    cfg.validate()
    return cfg


def _solver_flags(p):
    p.add_argument("--loss", choices=["pseudo-huber", "quadratic"], default="pseudo-huber")
    p.add_argument("--max-iters", type=int, default=None, help="LM iteration limit")


def _solver_from(args, options=None, loss=None):
    options = options or SolverOptions()
    if args.max_iters is not None:
        options.max_iters = args.max_iters
    if args.loss == "quadratic":
        return options, None
    return options, loss or RobustLoss()


# ------------------------------------------------------------------ commands


def cmd_generate(args):
    cfg = _scene_config(args)
    graph, truth = generate(cfg)
    save_problem(args.output, graph, truth=truth)
    if args.truth_trajectory:
        write_trajectory(args.truth_trajectory, trajectory_of({**truth.free_poses, **truth.fixed_poses}))
    return EXIT_OK


def cmd_solve(args):
    graph, options, loss, selector, truth = load_problem(args.problem)
    selector = Selector.parse(args.selector or selector)
    options, loss = _solver_from(args, options, loss)
    est, report = solve(graph, selector, loss=loss, options=options)
    write_trajectory(args.output, trajectory_of({**est.free_poses, **est.fixed_poses}))
    payload = {"selector": selector.value, "loss": args.loss, **report.to_dict()}
    if truth is not None:
        payload["free_pose_rmse"] = translational_rmse(est.free_poses, truth.free_poses)
        payload["ate_rmse"] = absolute_trajectory_error(
            trajectory_of({**est.free_poses, **est.fixed_poses}),
            trajectory_of({**truth.free_poses, **truth.fixed_poses}),
        ).rmse
    report_path = args.report or str(Path(args.output).with_suffix(".report.json"))
    _write_report(report_path, payload)
    print(f"status {report.status}; final chi2 {report.final_chi2:.6g}; iterations {report.iterations}")
    return EXIT_OK if report.converged else EXIT_NONCONVERGENCE


def cmd_uncertainty(args):
    graph, _, _, _, truth = load_problem(args.problem)
    lin = truth if args.linearization == "truth" else None
    if lin is None and args.linearization == "truth":
        raise CliError("problem file has no ground truth to linearize at", EXIT_VALIDATION)
    try:
        rep = theorem_certificate(graph, lin)
    except CertificateInapplicableError as exc:
        # the additivity identity does not need the premise, so it is still reported
        _write_report(
            args.output,
            {"linearization": args.linearization, "applicable": False, "reason": str(exc),
             "additivity_residual": exc.additivity_residual},
        )
        print(f"additivity_residual {exc.additivity_residual:.3e}")
        raise
    _write_report(args.output, {"linearization": args.linearization, **rep.to_dict(matrices=args.matrices)})
    print(f"additivity_residual {rep.additivity_residual:.3e}")
    print(f"min_margin {rep.min_margin:.6e} strict {rep.strict}")
    return EXIT_OK


def cmd_montecarlo(args):
    cfg = _scene_config(args)
    options = SolverOptions(max_iters=args.max_iters or 100)
    res = monte_carlo_covariance(cfg, args.trials, args.selector, args.seed, options, args.workers)
    _write_report(args.output, {"selector": Selector.parse(args.selector).value, **res.to_dict()})
    print(f"frobenius_relative_discrepancy {res.discrepancy:.6f}")
    return EXIT_OK


def cmd_sweep(args):
    cfg = _scene_config(args)
    counts = [int(c) for c in str(args.counts).split(",") if c.strip()]
    options, loss = _solver_from(args)
    rows = sweep_guidance(cfg, counts, args.repetitions, args.seed, loss, options, args.workers)
    _write_text(args.output, sweep_csv(rows))
    for r in rows:
        print(f"N={r.n} mean_ate={r.mean_ate:.6g} std={r.std_ate:.3g} converged={r.convergence_rate:.2f}")
    return EXIT_OK


def cmd_evaluate(args):
    est = read_trajectory(args.estimate)
    ref = read_trajectory(args.reference)
    res = absolute_trajectory_error(est, ref, args.tolerance)
    if args.csv:
        _write_text(args.csv, res.to_csv())
    print(f"{res.rmse:.6f}")
    return EXIT_OK


# -------------------------------------------------------------------- parser


def build_parser():
    parser = argparse.ArgumentParser(prog="plba", description="Point and line-guidance local bundle adjustment")
    parser.add_argument(
        "--version",
        action="version",
        version=json.dumps({"name": "plba", "version": __version__, "schema_version": SCHEMA_VERSION}),
    )
    parser.add_argument("--config", help="JSON file whose keys override command-line flags")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic problem file")
    _add_scene_flags(p)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--truth-trajectory", help="also write the true keyframe trajectory (TUM format)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("solve", help="run local BA on a problem file")
    p.add_argument("problem")
    p.add_argument("--selector", choices=["points", "lines", "both"], default=None)
    _solver_flags(p)
    p.add_argument("-o", "--output", required=True, help="estimated trajectory (TUM format)")
    p.add_argument("--report", help="report JSON (default: <output>.report.json)")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("uncertainty", help="pose covariances and the information-additivity check")
    p.add_argument("problem")
    p.add_argument("--linearization", choices=["current", "truth"], default="current")
    p.add_argument("--matrices", action="store_true", help="include covariance matrices in the report")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_uncertainty)

    p = sub.add_parser("montecarlo", help="empirical vs analytic pose covariance")
    _add_scene_flags(p)
    p.add_argument("--trials", type=int, default=2000)
    p.add_argument("--selector", choices=["points", "lines", "both"], default="points")
    p.add_argument("--max-iters", type=int, default=None)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_montecarlo)

    p = sub.add_parser("sweep", help="mean ATE against the number of guidance points")
    _add_scene_flags(p)
    p.add_argument("--counts", default="0,2,5,9", help="comma-separated guidance counts; 0 is points only")
    p.add_argument("--repetitions", type=int, default=50)
    p.add_argument("--workers", type=int, default=1)
    _solver_flags(p)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("evaluate", help="ATE between two TUM trajectories")
    p.add_argument("estimate")
    p.add_argument("reference")
    p.add_argument("--tolerance", type=float, default=0.02, help="timestamp association tolerance (s)")
    p.add_argument("--csv", help="per-pose aligned errors")
    p.set_defaults(func=cmd_evaluate)
    return parser


def _apply_config(parser, args):
    try:
        with open(args.config, encoding="utf-8") as f:
            overrides = json.load(f)
    except OSError as exc:
        raise CliError(f"cannot read config {args.config}: {exc}", EXIT_IO) from exc
    except json.JSONDecodeError as exc:
        raise CliError(f"config {args.config} is not valid JSON: {exc}", EXIT_VALIDATION) from exc
    if not isinstance(overrides, dict):
        raise CliError("config file must hold a JSON object", EXIT_VALIDATION)
    for key, value in overrides.items():
        name = key.replace("-", "_")
        if name in ("func", "command", "config") or not hasattr(args, name):
            raise CliError(f"config key {key!r} is not an option of {args.command!r}", EXIT_VALIDATION)
        setattr(args, name, value)
    return args


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.config:
            args = _apply_config(parser, args)
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except CertificateInapplicableError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_GAUGE
    except GaugeDeficiencyError as exc:
        names = ", ".join(map(str, exc.variables)) or "unknown"
        print(f"gauge deficiency: {exc} [variables: {names}]", file=sys.stderr)
        return EXIT_GAUGE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (PLBAError, ValueError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
