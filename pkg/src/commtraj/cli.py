"""Command-line front end.

Subcommands: init, quantize, plan, sweep, validate. Exit codes: 0 ok,
2 configuration, 3 numerical, 4 planning, 5 validation.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .channel import QuantizedRateMap, RateLadder, expected_rate_radial, quantize_expected_rate, rate_curve_table
from .config import RunConfig, load_config, resolve_seed, template_text
from .dynamics import build_linear_model, simulate_nonlinear_validated
from .errors import ConfigError, PlanningError, ValidationFailure
from .planner import PlanResult, WaypointPlan, assemble_plan, plan
from .simulate import SimConfig, lambda_sweep, sample_times, speed_profile

log = logging.getLogger("commtraj")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_PLANNING, EXIT_VALIDATION = 0, 2, 3, 4, 5
PLAN_FORMAT = "commtraj-plan/1"


# --- serialization helpers -------------------------------------------------------

def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.floating, float)):
        f = float(v)
        return f if math.isfinite(f) else None
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def write_json(path: Path, data) -> None:
    path.write_text(json.dumps(_jsonable(data), indent=2, allow_nan=False) + "\n", encoding="utf-8")


def write_csv(path: Path, header: list[str], rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def ladder_to_dict(ladder: RateLadder) -> dict:
    return {"rates": list(ladder.rates), "thresholds": list(ladder.thresholds),
            "symbol_rate": ladder.symbol_rate, "period": ladder.period, "t_tx": ladder.t_tx}


def plan_to_dict(result: PlanResult, qmap: QuantizedRateMap, ladder: RateLadder, seed: int,
                 problem) -> dict:
    wp = result.waypoints
    d = result.diagnostics
    return {
        "format": PLAN_FORMAT,
        "seed": seed,
        "problem": {"s": list(problem.s), "g": list(problem.g), "t_f": problem.t_f,
                    "lambda": problem.lam, "w_kind": problem.w_kind, "quota": problem.quota,
                    "eta": problem.eta,
                    "obstacles": [{"center": list(o.center), "radius": o.radius, "K1": o.K1, "K2": o.K2}
                                  for o in problem.obstacles]},
        "depth": result.depth,
        "betas": wp.betas, "radii": wp.radii, "taus": wp.taus, "points": wp.points,
        "leg_levels": list(wp.leg_levels),
        "alpha": wp.alpha if wp.alpha is not None else [],
        "knot_times": result.knot_times,
        "cost": result.cost, "energy": result.energy, "E_0": result.E_0, "W_0": result.W_0,
        "energy_ratio": result.energy / result.E_0, "bits_approx": result.bits_approx,
        "ratemap": qmap.to_dict(), "ladder": ladder_to_dict(ladder),
        "diagnostics": {k: d[k] for k in ("depth_costs", "skipped_by_bound", "iterations",
                                          "acceptance_rate", "T0", "region_excursion",
                                          "best_cost_trace", "infeasible") if k in d},
    }


def plan_from_dict(data: dict, cfg: RunConfig) -> tuple[PlanResult, QuantizedRateMap, RateLadder]:
    """Rebuild the control laws of a saved plan."""
    if data.get("format") != PLAN_FORMAT:
        raise ConfigError(f"not a plan file (format {data.get('format')!r})")
    try:
        qmap = QuantizedRateMap.from_dict(data["ratemap"])
        lad = data["ladder"]
        ladder = RateLadder(tuple(lad["rates"]), tuple(lad["thresholds"]), lad["symbol_rate"],
                            lad["period"], lad["t_tx"])
        points = np.asarray(data["points"], dtype=float)
        alpha = np.asarray(data["alpha"], dtype=float).reshape(2, len(points) - 2, 3)
        wp = WaypointPlan(depth=int(data["depth"]), betas=np.asarray(data["betas"], dtype=float),
                          radii=np.asarray(data["radii"], dtype=float),
                          taus=np.asarray(data["taus"], dtype=float), points=points,
                          leg_levels=tuple(int(v) for v in data["leg_levels"]), alpha=alpha)
        cost = data["cost"]
        result = assemble_plan(wp, build_linear_model(cfg.quadrotor), qmap, ladder,
                               math.inf if cost is None else float(cost), float(data["E_0"]),
                               float(data["W_0"]), cfg.sa.tau_min, cfg.sa.cond_cap)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed plan file: {exc}") from exc
    return result, qmap, ladder


# --- shared setup ------------------------------------------------------------------

class _Run:
    def __init__(self, args):
        self.args = args
        self.cfg = load_config(args.config)
        self.seed = resolve_seed(args.seed, self.cfg)
        self.out = Path(args.out or self.cfg.output.dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.model = build_linear_model(self.cfg.quadrotor)
        self.ladder = self.cfg.ladder.build()

    def quantize(self, Q: int | None = None) -> QuantizedRateMap:
        q = self.cfg.quantizer
        Q = q.Q if Q is None else Q
        if Q < 2:
            raise ConfigError(f"Q must be >= 2, got {Q}")
        rng = np.random.default_rng(np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, 0x51]))
        radius = q.domain_radius
        if radius is None:
            pr = self.cfg.problem
            radius = float(max(self.cfg.channel.distance(pr.s), self.cfg.channel.distance(pr.g)))
        qmap = quantize_expected_rate(self.cfg.channel, self.ladder, Q, radius, rng=rng,
                                      n_grid=q.n_grid, sa_iterations=q.sa_iterations)
        if qmap.ap_position != self.cfg.channel.ap_position:
            qmap = QuantizedRateMap(qmap.radii, qmap.levels, qmap.error, qmap.domain_radius,
                                    self.cfg.channel.ap_position, qmap.warnings)
        for w in qmap.warnings:
            log.warning("quantizer: %s", w)
        return qmap

    def sim_config(self) -> SimConfig:
        s = self.cfg.sim
        trials = self.args.trials if getattr(self.args, "trials", None) else s.n_trials
        return SimConfig(n_trials=trials, seed=self.seed, dt_sample=s.dt_sample, report_units=s.report_units)


# --- subcommands -------------------------------------------------------------------

def cmd_init(args) -> int:
    target = Path(args.path)
    if target.exists() and not args.force:
        raise ConfigError(f"{target} exists; use --force to overwrite")
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(template_text(), encoding="utf-8")
    log.info("wrote %s", target)
    return EXIT_OK


def cmd_quantize(args) -> int:
    run = _Run(args)
    qmap = run.quantize(args.Q)
    write_json(run.out / "ratemap.json", {**qmap.to_dict(), "E_Q": qmap.error, "warnings": list(qmap.warnings)})
    table = rate_curve_table(run.cfg.channel, run.ladder, qmap)
    write_csv(run.out / "ratecurve.csv", ["radius", "expected_rate", "quantized_rate"], table.tolist())
    log.info("Q=%d borders %s levels %s E_Q=%.6g", qmap.Q, np.round(qmap.radii, 3).tolist(),
             np.round(qmap.levels, 4).tolist(), qmap.error)
    return EXIT_OK


def _write_plan_outputs(run: _Run, result: PlanResult, qmap: QuantizedRateMap, problem) -> None:
    write_json(run.out / "plan.json", plan_to_dict(result, qmap, run.ladder, run.seed, problem))
    t, speed = speed_profile(result, run.cfg.output.path_dt)
    pos = result.position(t)
    write_csv(run.out / "path.csv", ["t", "x", "y", "speed"],
              zip(t.tolist(), pos[:, 0].tolist(), pos[:, 1].tolist(), speed.tolist()))
    # per duplexing period: quantized and expected rate along the path
    tk = sample_times(result.t_f, run.ladder.period)
    pk = result.position(tk)
    dk = np.maximum(run.cfg.channel.distance(pk), run.cfg.channel.standoff)
    write_csv(run.out / "rates.csv", ["k", "t", "x", "y", "quantized_rate", "expected_rate"],
              zip(range(len(tk)), tk.tolist(), pk[:, 0].tolist(), pk[:, 1].tolist(),
                  qmap.evaluate(pk).tolist(), expected_rate_radial(dk, run.cfg.channel, run.ladder).tolist()))


def cmd_plan(args) -> int:
    run = _Run(args)
    lam = args.lam[0] if args.lam else None
    if args.lam and len(args.lam) > 1:
        raise ConfigError("plan takes a single --lambda value")
    problem = run.cfg.problem.build(lam)
    qmap = run.quantize()
    result = plan(problem, run.model, qmap, run.ladder, run.cfg.sa, seed=run.seed, workers=args.workers)
    _write_plan_outputs(run, result, qmap, problem)
    log.info("lambda=%g depth=%d cost=%.6g energy ratio=%.6g bits=%.6g", problem.lam, result.depth,
             result.cost, result.energy / result.E_0, result.bits_approx)
    return EXIT_OK


def cmd_sweep(args) -> int:
    run = _Run(args)
    lambdas = list(args.lam) if args.lam is not None else list(run.cfg.sweep.lambdas)
    if not lambdas:
        raise ConfigError("lambda list is empty")
    problem = run.cfg.problem.build(lambdas[0])
    qmap = run.quantize()
    res = lambda_sweep(problem, lambdas, run.model, qmap, run.ladder, run.cfg.channel, run.cfg.sa,
                       run.sim_config(), seed=run.seed, workers=args.workers)
    rows = []
    for r in res.rows:
        if r.report is None:
            rows.append([r.lam, None, None, None, None, None, r.error])
        else:
            rep = r.report
            rows.append([r.lam, rep.energy_ratio, rep.transmission_ratio, rep.bits_approx,
                         rep.bits_measured, rep.bits_stderr, f"depth={r.plan.depth}"])
            log.info("lambda=%g depth=%d energy ratio=%.4g tx ratio=%.4g approx=%.4g measured=%.4g",
                     r.lam, r.plan.depth, rep.energy_ratio, rep.transmission_ratio,
                     rep.bits_approx, rep.bits_measured)
    write_csv(run.out / "table1.csv", ["lambda", "energy_ratio", "transmission_ratio", "bits_approx",
                                       "bits_measured", "bits_stderr", "note"], rows)
    return EXIT_OK


def cmd_validate(args) -> int:
    run = _Run(args)
    plan_path = Path(args.plan) if args.plan else run.out / "plan.json"
    try:
        data = json.loads(plan_path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read plan file {plan_path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{plan_path}: invalid JSON: {exc}") from exc
    result, _, _ = plan_from_dict(data, run.cfg)
    v = run.cfg.validate
    report_path = run.out / "validation.json"
    try:
        rep = simulate_nonlinear_validated(run.cfg.quadrotor, result.control, (0.0, result.t_f), dt=v.dt,
                                           start=tuple(result.waypoints.points[0]),
                                           angle_bound=v.angle_bound, iterations=v.iterations,
                                           model=run.model)
    except ValidationFailure as exc:
        write_json(report_path, {"plan": str(plan_path), "passed": False, "failure": str(exc),
                                 "failure_time": exc.time})
        raise
    summary = rep.summary()
    summary.update(plan=str(plan_path), passed=bool(rep.relative_deviation < 0.01), dt=v.dt)
    write_json(report_path, summary)
    log.info("max deviation %.3g m over %.4g m path (%.3g%%), max tilt %.3g rad", rep.max_deviation,
             rep.path_length, 100 * rep.relative_deviation, rep.max_tilt)
    return EXIT_OK


# --- entry point -------------------------------------------------------------------

def _lambda_list(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad lambda list {text!r}") from exc
    return vals


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run configuration (defaults if omitted)")
    common.add_argument("--seed", type=int, default=None, help="master seed (default: $COMMTRAJ_SEED, config, 0)")
    common.add_argument("--out", metavar="DIR", help="output directory (default from config)")
    common.add_argument("--quiet", action="store_true", help="only print warnings and errors")
    common.add_argument("--workers", type=int, default=1, help="processes for the depth sweep")

    p = argparse.ArgumentParser(prog="commtraj", description="Communication-aware drone trajectory planning.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("init", help="write a documented configuration template")
    s.add_argument("path", nargs="?", default="config.json")
    s.add_argument("--force", action="store_true")
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_init)

    s = sub.add_parser("quantize", parents=[common], help="quantize the expected-rate map")
    s.add_argument("--Q", type=int, default=None, help="number of levels (default from config)")
    s.set_defaults(func=cmd_quantize)

    s = sub.add_parser("plan", parents=[common], help="plan one trajectory")
    s.add_argument("--lambda", dest="lam", type=_lambda_list, default=None, help="trade-off weight")
    s.set_defaults(func=cmd_plan)

    s = sub.add_parser("sweep", parents=[common], help="plan and simulate a list of lambdas")
    s.add_argument("--lambda", dest="lam", type=_lambda_list, default=None,
                   help="comma-separated lambdas (default from config)")
    s.add_argument("--trials", type=int, default=None, help="Monte-Carlo trials")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("validate", parents=[common], help="fly a saved plan on the nonlinear model")
    s.add_argument("--plan", metavar="PATH", help="plan file (default OUT/plan.json)")
    s.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except PlanningError as exc:
        log.error("planning failed: %s; per-depth reasons: %s", exc, exc.reasons)
        return EXIT_PLANNING
    except ValidationFailure as exc:
        log.error("validation failed: %s", exc)
        return EXIT_VALIDATION
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except ValueError as exc:
        # remaining domain errors come from invalid parameter combinations
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
