"""Command-line entry point: ``solve``, ``score``, ``check``, ``evaluate-contingency``, ``recover``.

Exit codes: 0 success, 1 load or validation failure, 2 partial result
(report flags present, or missing contingency files when scoring).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import replace
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .decomp import (DecompParams, Decomposition, evaluate_contingency, full_report, initial_surrogates,
                     surrogate_value, update_surrogate)
from .engine import ASYNCHRONOUS, SYNCHRONOUS, Engine, EngineConfig
from .grid import NetworkParseError, NetworkValidationError, load_network, schema_path
from .models import (DEFAULT_EPSILON, OperatingPoint, bound_violations, build_base_problem,
                     build_contingency_problem, build_restricted_canvas, score_solution)
from .nlp import check_derivatives
from .recovery import DEFAULT_EPS_Q, complementarity_residuals, delta_response, recover_feasible, response_curve

logger = logging.getLogger("scacopf")

EXIT_OK, EXIT_LOAD, EXIT_PARTIAL = 0, 1, 2


class SolutionFileError(ValueError):
    pass


# ----------------------------------------------------------------------------
# files


def write_json_atomic(path: Path, doc) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w") as fh:
            if isinstance(doc, list):  # NDJSON
                for rec in doc:
                    fh.write(json.dumps(rec) + "\n")
            else:
                json.dump(doc, fh, indent=1)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def contingency_filename(cid: str) -> str:
    return f"contingency_{cid}.json"


def read_point(path) -> OperatingPoint:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise SolutionFileError(f"cannot read {path}: {exc}") from exc
    with open(schema_path("solution.schema.json")) as fh:
        schema = json.load(fh)
    try:
        jsonschema.validate(doc, schema)
    except jsonschema.ValidationError as exc:
        raise SolutionFileError(f"{path}: schema violation: {exc.message}") from exc
    return OperatingPoint.from_dict(doc)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj) if np.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


# ----------------------------------------------------------------------------
# configuration


def _params(args) -> DecompParams:
    return DecompParams(passes=args.passes, eps_r=args.epsilon_r, prescreen_gen=args.prescreen_gen,
                        prescreen_branch=args.prescreen_branch, epsilon=args.epsilon, eps_q=args.epsilon_q,
                        block_size=args.workers, time_budget=args.budget_seconds)


def _load(args):
    try:
        return load_network(args.network)
    except (NetworkParseError, NetworkValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return None


def _base_point(args, net, params):
    if args.base:
        pt = read_point(args.base)
        pt.check_shape(net)
        return pt
    logger.info("no base point given; solving the master problem without surrogates")
    d = Decomposition(net, params)
    d.solve_master()
    return d.state.base


# ----------------------------------------------------------------------------
# commands


def cmd_solve(args) -> int:
    net = _load(args)
    if net is None:
        return EXIT_LOAD
    params = _params(args)
    cfg = EngineConfig(workers=args.workers, mode=args.mode, time_budget=args.budget_seconds,
                       stall_timeout=args.stall_timeout)
    t0 = time.perf_counter()
    driver = Decomposition(net, params)
    engine = Engine(cfg, driver)
    try:
        state = engine.run()
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_LOAD
    loop_seconds = time.perf_counter() - t0
    rep = full_report(net, state, recover=not args.no_recover, params=params)
    flags = list(rep["flags"])
    if engine.stats.budget_exhausted:
        flags.append("engine: time budget exhausted")
    if engine.stats.failures:
        flags.append(f"engine: {engine.stats.failures} failed evaluations")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json_atomic(out / "base.json", rep["base"].to_dict())
    for cid, pt in rep["contingencies"].items():
        write_json_atomic(out / contingency_filename(cid), pt.to_dict())
    report = {
        "network": str(args.network),
        "version": __version__,
        "objective": rep["score"]["total"],
        "score": rep["score"],
        "score_quadratic": rep["score_quadratic"],
        "relaxed_penalty": rep["relaxed_penalty"],
        "recovered_penalty": rep["recovered_penalty"],
        "surrogates": rep["surrogates"],
        "master_history": state.history,
        "iterations": rep["iterations"],
        "converged": rep["converged"],
        "flags": flags,
        "engine": engine.stats.to_dict(),
        "timing": {"loop_seconds": loop_seconds, "report_seconds": rep["report_seconds"],
                   "master_solve_seconds": driver.master_seconds,
                   "master_eval_seconds": driver.master_eval_seconds},
        "config": {"workers": args.workers, "mode": args.mode, "budget_seconds": args.budget_seconds,
                   "epsilon": args.epsilon, "epsilon_q": args.epsilon_q, "epsilon_r": args.epsilon_r,
                   "passes": args.passes, "prescreen_gen": args.prescreen_gen,
                   "prescreen_branch": args.prescreen_branch, "seed": args.seed},
    }
    write_json_atomic(out / "report.json", _jsonable(report))
    write_json_atomic(out / "trace.ndjson", engine.message_log())
    print(f"objective {rep['score']['total']:.10g}  (cost {rep['score']['generation_cost']:.6g}, "
          f"base penalty {rep['score']['base_penalty']['total']:.6g}, "
          f"contingency penalty {rep['score']['contingency_weight'] * rep['score']['contingency_penalty_sum']:.6g})")
    print(f"master solves {engine.stats.master_solves}, evaluations {engine.stats.evaluations}, "
          f"converged {rep['converged']}, wall {loop_seconds:.2f} s")
    for f in flags:
        print(f"flag: {f}")
    return EXIT_PARTIAL if flags else EXIT_OK


def cmd_score(args) -> int:
    net = _load(args)
    if net is None:
        return EXIT_LOAD
    try:
        base = read_point(args.base)
        files = list(args.contingency)
        if args.solution_dir:
            files += sorted(Path(args.solution_dir).glob("contingency_*.json"))
        points = {}
        for f in files:
            pt = read_point(f)
            points[pt.case] = pt
        base.check_shape(net)
        for pt in points.values():
            pt.check_shape(net)
    except (SolutionFileError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_LOAD
    unknown = sorted(set(points) - {k.id for k in net.contingencies})
    if unknown:
        print(f"error: unknown contingencies {unknown}", file=sys.stderr)
        return EXIT_LOAD
    diag = bound_violations(net, base)
    for pt in points.values():
        diag += bound_violations(net, pt)
    out = {"piecewise": score_solution(net, base, points, "piecewise"),
           "quadratic": score_solution(net, base, points, "quadratic"),
           "bound_violations": diag}
    if args.json:
        print(json.dumps(_jsonable(out), indent=1))
    else:
        for mode in ("piecewise", "quadratic"):
            s = out[mode]
            print(f"[{mode}] total {s['total']:.12g}")
            print(f"  generation cost       {s['generation_cost']:.12g}")
            bp = s["base_penalty"]
            print(f"  base penalty          {bp['total']:.6g} (thermal {bp['thermal']:.3g}, "
                  f"active {bp['active']:.3g}, reactive {bp['reactive']:.3g})")
            print(f"  contingency penalty   {s['contingency_weight'] * s['contingency_penalty_sum']:.6g} "
                  f"(weight {s['contingency_weight']:.4g})")
            if s["missing"]:
                print(f"  missing contingencies {s['missing']}")
        for line in diag:
            print(f"bound violation: {line}")
    return EXIT_PARTIAL if out["piecewise"]["partial"] else EXIT_OK


def cmd_evaluate(args) -> int:
    net = _load(args)
    if net is None:
        return EXIT_LOAD
    params = _params(args)
    try:
        net.contingency(args.contingency)
        base = _base_point(args, net, params)
    except (SolutionFileError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_LOAD
    ev = evaluate_contingency(net, args.contingency, base, params)
    print(f"{args.contingency}: status {ev.status}, relaxed penalty {ev.r:.10g}, {ev.seconds:.3f} s")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_json_atomic(out / contingency_filename(args.contingency), ev.point.to_dict())
        if not args.base:
            write_json_atomic(out / "base.json", base.to_dict())
    return EXIT_OK if ev.ok else EXIT_PARTIAL


def cmd_recover(args) -> int:
    net = _load(args)
    if net is None:
        return EXIT_LOAD
    params = _params(args)
    try:
        net.contingency(args.contingency)
        base = _base_point(args, net, params)
        approx = read_point(args.relaxed) if args.relaxed else None
    except (SolutionFileError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_LOAD
    if approx is None:
        approx = evaluate_contingency(net, args.contingency, base, params).point
    rec = recover_feasible(net, args.contingency, base, approx, params.eps_q, params.ipm)
    res = complementarity_residuals(net, base, rec.point)
    print(f"{args.contingency}: status {rec.status}, fallback {rec.fallback}, "
          f"penalty {rec.penalty:.10g} (piecewise {rec.penalty_exact:.10g}), "
          f"max violation {rec.max_violation:.2e}")
    print("complementarity residuals: " + ", ".join(f"{k} {v:.2e}" for k, v in res.items()))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_json_atomic(out / contingency_filename(args.contingency), rec.point.to_dict())
    return EXIT_PARTIAL if rec.fallback else EXIT_OK


def run_checks(net, seed: int = 0, points: int = 3, tol: float = 1e-6) -> list[tuple[str, bool, str]]:
    """Derivative checks on every model of ``net`` plus quick invariant probes."""
    rng = np.random.default_rng(seed)
    rows = []
    sur = [replace(s, coef=float(rng.uniform(0.0, 10.0))) for s in initial_surrogates(net).values()]
    base_model = build_base_problem(net, sur)
    models = [("base", base_model)]
    bpt = base_model.point(base_model.sample_interior(rng))
    for k in net.contingencies:
        models.append((f"contingency {k.id}", build_contingency_problem(net, k.id, bpt)))
        models.append((f"canvas {k.id}", build_restricted_canvas(net, k.id, bpt)))
    for label, m in models:
        worst = 0.0
        for i in range(points):
            rep = check_derivatives(m.problem, m.sample_interior(rng), seed=seed + i)
            worst = max(worst, rep.max_error)
        rows.append((f"derivatives {label}", worst <= tol, f"max rel err {worst:.2e}"))

    # drop response: inverse of the response curve on random instances
    err = 0.0
    for _ in range(200):
        n = int(rng.integers(1, 5))
        lo = rng.uniform(0.0, 1.0, n)
        hi = lo + rng.uniform(0.1, 2.0, n)
        p0 = rng.uniform(lo, hi)
        a = rng.uniform(0.1, 3.0, n)
        d = rng.uniform(-3.0, 3.0)
        x = response_curve(d, p0, lo, hi, a)
        d2 = delta_response(x, p0, lo, hi, a, strict=False)
        err = max(err, abs(response_curve(d2, p0, lo, hi, a) - x))
    rows.append(("drop response inverse", err <= 1e-8, f"max err {err:.2e}"))

    # surrogate refit reproduces the observed penalty
    base_pt = base_model.point(base_model.sample_interior(rng))
    err = 0.0
    for s in initial_surrogates(net).values():
        r = float(rng.uniform(0.0, 100.0))
        s2 = update_surrogate(s, r, base_pt)
        if not s2.flagged:
            err = max(err, abs(surrogate_value(s2, base_pt) - r) / max(1.0, r))
    rows.append(("surrogate refit", err <= 1e-10, f"max rel err {err:.2e}"))
    return rows


def cmd_check(args) -> int:
    net = _load(args)
    if net is None:
        return EXIT_LOAD
    rows = run_checks(net, seed=args.seed)
    for name, ok, detail in rows:
        print(f"{'PASS' if ok else 'FAIL'}  {name:40s} {detail}")
    bad = sum(not ok for _, ok, _ in rows)
    print(f"{len(rows) - bad}/{len(rows)} checks passed")
    return EXIT_OK if not bad else EXIT_LOAD


# ----------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with 1, keeping 2 for partial results."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_LOAD, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--network", required=True, help="network JSON file")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--workers", type=int, default=1, help="worker count W, also the block size (default 1)")
    common.add_argument("--mode", choices=(SYNCHRONOUS, ASYNCHRONOUS), default=ASYNCHRONOUS)
    common.add_argument("--budget-seconds", type=float, default=None, help="wall-clock budget of the loop")
    common.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON,
                        help="complementarity relaxation (default 1e-4)")
    common.add_argument("--epsilon-q", type=float, default=DEFAULT_EPS_Q,
                        help="reactive saturation margin of voltage crushing (default 0.05)")
    common.add_argument("--epsilon-r", type=float, default=1e-2,
                        help="penalty threshold for convergence and rescheduling (default 1e-2)")
    common.add_argument("--passes", type=int, default=20, help="maximum master solves (default 20)")
    common.add_argument("--prescreen-gen", type=int, default=0, help="largest generators evaluated first")
    common.add_argument("--prescreen-branch", type=int, default=0, help="largest branches evaluated first")
    common.add_argument("--seed", type=int, default=0, help="seed of randomized checks")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = _Parser(prog="scacopf", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", parents=[common], help="run the decomposition and recovery, write solution files")
    s.add_argument("--stall-timeout", type=float, default=300.0, help="seconds before a task is reassigned")
    s.add_argument("--no-recover", action="store_true", help="report relaxed contingency points")
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("score", parents=[common], help="score solution files without solving")
    s.add_argument("--base", required=True)
    s.add_argument("--solution-dir", default=None, help="directory holding contingency_<id>.json files")
    s.add_argument("contingency", nargs="*", default=[], help="contingency solution files")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("check", parents=[common], help="derivative and invariant checks")
    s.set_defaults(func=cmd_check)

    for name, func, text in (("evaluate-contingency", cmd_evaluate, "solve one relaxed contingency subproblem"),
                             ("recover", cmd_recover, "crush and recover one contingency")):
        s = sub.add_parser(name, parents=[common], help=text)
        s.add_argument("contingency")
        s.add_argument("--base", default=None, help="base point file (default: solve the plain master)")
        if name == "recover":
            s.add_argument("--relaxed", default=None, help="relaxed contingency file (default: evaluate it)")
        s.set_defaults(func=func)
    return p


def _validate(args, parser) -> None:
    if args.workers < 1:
        parser.error("--workers must be >= 1")
    if args.passes < 1:
        parser.error("--passes must be >= 1")
    if args.epsilon < 0 or args.epsilon_r < 0 or not 0 <= args.epsilon_q < 0.5:
        parser.error("tolerances out of range")
    if args.budget_seconds is not None and args.budget_seconds <= 0:
        parser.error("--budget-seconds must be > 0")
    if args.command == "solve" and not args.out:
        parser.error("solve needs --out")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _validate(args, parser)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
