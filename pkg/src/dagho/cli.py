"""Command-line harness: ``dagho <command> [flags]``.

Exit codes: 0 success, 2 numeric failure, 3 usage or configuration error.
Set DAGHO_LOG to error, info or debug to control logging on stderr.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .dynamics import FlowOptions
from .errors import AdmissibilityError, DomainError, NumericFailure, PreconditionError
from .homotopy import (KINDS, PRACTICAL_MU0, Schedule, StopRule, gd_interval, run_homotopy_flow,
                       run_homotopy_gd, theory_interval, validate_mu0)
from .model import (Dataset, ModelParams, PenalizedObjective, SecondMoment, enumeration_oracle,
                    fmt, sample_sem)
from .stationary import critical_tau, solve_stationary_points

EXIT_OK, EXIT_NUMERIC, EXIT_USAGE = 0, 2, 3

# pinned fast-schedule experiment for a = 0.5 (found by a parameter sweep)
COMPARE_DEFAULTS = {"a": 0.5, "mu0": 0.045, "init": (0.1, 1.0), "decay": 500.0, "horizon": 5.0}

log = logging.getLogger("dagho")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _setup_logging():
    level = os.environ.get("DAGHO_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _pair(text):
    try:
        x, y = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected x,y got {text!r}") from None
    if not (math.isfinite(x) and math.isfinite(y)):
        raise argparse.ArgumentTypeError("coordinates must be finite")
    return x, y


def _init(text):
    return "random" if text == "random" else _pair(text)


def _grid(text):
    """xmin:xmax:nx,ymin:ymax:ny"""
    try:
        xs, ys = text.split(",")
        out = []
        for part in (xs, ys):
            lo, hi, n = part.split(":")
            out.append((float(lo), float(hi), int(n)))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad grid {text!r}; use xmin:xmax:nx,ymin:ymax:ny") from None
    for lo, hi, n in out:
        if not lo < hi or n < 2:
            raise argparse.ArgumentTypeError("grid needs min < max and at least 2 points per axis")
    return out


def _schedule_args(p, default_kind="theory"):
    p.add_argument("--mu0", type=float)
    p.add_argument("--schedule", choices=KINDS, default=default_kind)
    p.add_argument("--beta", type=float, default=0.15)
    p.add_argument("--delta", type=float, default=0.05)
    p.add_argument("--decay-factor", type=float, dest="decay")
    p.add_argument("--eps", type=float, help="ahat schedule slack (default 0.01 mu0)")
    p.add_argument("--mu-floor", type=float, default=1e-12)
    p.add_argument("--max-stages", type=int, default=200)
    p.add_argument("--dist-tol", type=float)
    p.add_argument("--horizon", type=float, help="per-stage flow time in units of 1/mu")
    p.add_argument("--grad-tol", type=float, default=1e-10)
    p.add_argument("--record-every", type=int, default=10)
    p.add_argument("--force", action="store_true", help="run inadmissible schedules")
    p.add_argument("--out")
    p.add_argument("--format", choices=("csv", "json"), default="csv")


def build_parser():
    parser = _Parser(prog="dagho", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    h = sub.add_parser("homotopy", help="run one or more homotopy paths")
    h.add_argument("--a", type=float, required=True)
    _schedule_args(h)
    h.add_argument("--init", type=_init, default=(0.0, 0.0), help="x,y or random")
    h.add_argument("--init-box", type=float, help="half-width of the random box (default 2a)")
    h.add_argument("--seed", type=int, default=0)
    h.add_argument("--seeds", type=int, default=1)

    ls = sub.add_parser("landscape", help="grid of g_mu values")
    ls.add_argument("--a", type=float, required=True)
    ls.add_argument("--mu", type=float, required=True)
    ls.add_argument("--grid", type=_grid)
    ls.add_argument("--out")

    st = sub.add_parser("stationary", help="stationary points or the threshold tau")
    st.add_argument("--a", type=float, required=True)
    st.add_argument("--mu", type=float)
    st.add_argument("--out")

    cs = sub.add_parser("compare-schedules", help="theory schedule against a fast decay")
    cs.add_argument("--a", type=float, default=COMPARE_DEFAULTS["a"])
    cs.add_argument("--mu0", type=float, default=COMPARE_DEFAULTS["mu0"])
    cs.add_argument("--init", type=_pair, default=COMPARE_DEFAULTS["init"])
    cs.add_argument("--decay-factor", type=float, dest="decay", default=COMPARE_DEFAULTS["decay"])
    cs.add_argument("--horizon", type=float, default=COMPARE_DEFAULTS["horizon"])
    cs.add_argument("--mu-floor", type=float, default=1e-12)
    cs.add_argument("--record-every", type=int, default=10)
    cs.add_argument("--out", required=True, help="output prefix")

    d = sub.add_parser("data", help="sample a dataset or fit one")
    dsub = d.add_subparsers(dest="data_command", required=True, parser_class=_Parser)
    sp = dsub.add_parser("sample")
    sp.add_argument("--a", type=float, required=True)
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--noise", choices=("gaussian", "uniform"), default="gaussian")
    sp.add_argument("--out")
    fp = dsub.add_parser("fit")
    fp.add_argument("input")
    _schedule_args(fp, default_kind="ahat")
    fp.add_argument("--init", type=_pair, default=(0.0, 0.0))
    return parser


def _write_or_print(text, out):
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _make_schedule(args, a):
    kind = args.schedule
    mu0 = args.mu0
    if kind == "theory":
        if a is None:
            raise UsageError("theory schedule needs a")
        return Schedule.theory(a, mu0)
    if kind == "practical":
        if mu0 is not None and mu0 != PRACTICAL_MU0 and not args.force:
            raise UsageError("practical schedule fixes mu0 = 1/27")
        return Schedule("practical", PRACTICAL_MU0 if mu0 is None else mu0, a=a)
    if kind == "ahat":
        if mu0 is None:
            if a is None:
                mu0 = PRACTICAL_MU0
            else:
                lo, hi = theory_interval(a)
                mu0 = 0.5 * (lo + hi)
        return Schedule.ahat(mu0, args.eps, a=a)
    if kind == "gd":
        if mu0 is None:
            lo, hi = gd_interval(a, args.beta, args.delta)
            mu0 = 0.5 * (lo + hi)
        return Schedule.gd(a, args.beta, args.delta, mu0)
    if mu0 is None or args.decay is None:
        raise UsageError("custom schedule needs --mu0 and --decay-factor")
    return Schedule.custom(mu0, decay=args.decay, a=a)


def _run(sched, w0, loss, args, model=None, record=True):
    stop = StopRule(args.mu_floor, args.max_stages, args.dist_tol)
    if sched.kind == "gd":
        return run_homotopy_gd(sched.a, sched.beta, sched.delta, sched.mu0, w0, stop, loss=loss,
                               force=args.force, record_path=record,
                               record_every=args.record_every)
    flow = FlowOptions(grad_tol=args.grad_tol, record_path=record, record_every=args.record_every)
    return run_homotopy_flow(sched, w0, loss, stop, flow, force=args.force, model=model,
                             horizon=args.horizon)


def _suffixed(out, tag):
    p = Path(out)
    return p.with_name(f"{p.stem}-{tag}{p.suffix}")


def cmd_homotopy(args):
    m = ModelParams(args.a)
    loss = SecondMoment.population(m)
    sched = _make_schedule(args, m.a)
    adm = validate_mu0(sched, m)
    if adm.ok is False and not args.force:
        raise UsageError(f"inadmissible schedule: {adm.reason} (pass --force to run anyway)")
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    box = 2.0 * m.a if args.init_box is None else args.init_box
    seeds = [args.seed + i for i in range(args.seeds)]

    def init_for(seed):
        if args.init == "random":
            return tuple(np.random.default_rng(seed).uniform(-box, box, size=2))
        return args.init

    record = args.out is not None and args.format == "csv"
    jobs = [(s, init_for(s)) for s in seeds]
    if len(jobs) == 1:
        reports = [_run(sched, jobs[0][1], loss, args, m, record)]
    else:
        with ThreadPoolExecutor(max_workers=min(len(jobs), os.cpu_count() or 1)) as pool:
            reports = list(pool.map(lambda j: _run(sched, j[1], loss, args, m, record), jobs))
    summary = []
    for (seed, w0), rep in zip(jobs, reports):
        summary.append({"seed": seed, "init": list(w0), "final": list(rep.final),
                        "dist_to_global": rep.dist_to_global, "stop_reason": rep.stop_reason,
                        "n_stages": len(rep.stages), "total_inner_steps": rep.total_inner_steps})
    if args.out:
        out = Path(args.out)
        for (seed, _), rep in zip(jobs, reports):
            traj = out if len(jobs) == 1 else _suffixed(out, f"seed{seed}")
            if args.format == "csv":
                rep.write_trajectory_csv(traj, loss)
                traj.with_suffix(".json").write_text(rep.to_json(indent=2) + "\n", encoding="utf-8")
            else:
                traj = traj if len(jobs) == 1 else traj.with_suffix(".json")
                traj.write_text(rep.to_json(indent=2) + "\n", encoding="utf-8")
        if len(jobs) > 1:
            out.with_name(out.stem + "-summary.json").write_text(
                json.dumps({"runs": summary}, indent=2) + "\n", encoding="utf-8")
    text = json.dumps(summary[0] if len(summary) == 1 else {"runs": summary}, indent=2) + "\n"
    sys.stdout.write(text)
    return EXIT_NUMERIC if any(r.stop_reason == "failure" for r in reports) else EXIT_OK


def cmd_landscape(args):
    m = ModelParams(args.a)
    obj = PenalizedObjective(args.mu, SecondMoment.population(m))
    grid = args.grid or [(-2 * m.a, 2 * m.a, 101), (-2 * m.a, 2 * m.a, 101)]
    (x0, x1, nx), (y0, y1, ny) = grid
    fh = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "f", "h", "g", "grad_x", "grad_y"])
        for x in np.linspace(x0, x1, nx):
            for y in np.linspace(y0, y1, ny):
                gx, gy = obj.grad(x, y)
                w.writerow([fmt(v) for v in (x, y, obj.f(x, y), obj.h(x, y), obj.value(x, y), gx, gy)])
    finally:
        if fh is not sys.stdout:
            fh.close()
    return EXIT_OK


def cmd_stationary(args):
    m = ModelParams(args.a)
    tau = critical_tau(m).tau
    if args.mu is not None:
        payload = solve_stationary_points(args.mu, m, tau).to_dict()
    else:
        counts = {label: len(solve_stationary_points(f * tau, m))
                  for label, f in (("0.5tau", 0.5), ("tau", 1.0), ("1.5tau", 1.5))}
        payload = {"a": m.a, "tau": tau, "root_counts": counts}
    _write_or_print(json.dumps(payload, indent=2) + "\n", args.out)
    return EXIT_OK


def cmd_compare_schedules(args):
    m = ModelParams(args.a)
    loss = SecondMoment.population(m)
    flow = FlowOptions(record_path=True, record_every=args.record_every)
    stop = StopRule(mu_floor=args.mu_floor, max_stages=10_000)
    good = run_homotopy_flow(Schedule.theory(m.a, args.mu0), args.init, loss, stop, flow,
                             force=True, horizon=args.horizon)
    bad = run_homotopy_flow(Schedule.custom(args.mu0, decay=args.decay, a=m.a), args.init, loss,
                            stop, flow, force=True, horizon=args.horizon)
    # shortest round-trip repr keeps the comment readable
    header = (f"a={m.a!r} mu0={args.mu0!r} init={args.init[0]!r},{args.init[1]!r} "
              f"horizon={args.horizon!r}")
    prefix = args.out
    good.write_trajectory_csv(f"{prefix}-good.csv", loss, header + " schedule=theory")
    bad.write_trajectory_csv(f"{prefix}-bad.csv", loss, header + f" schedule=custom/{args.decay!r}")
    spur = m.w_spurious

    def describe(rep):
        f = rep.final
        return {"final": list(f), "dist_to_global": rep.dist_to_global,
                "dist_to_spurious": math.hypot(f.x - spur.x, f.y - spur.y),
                "n_stages": len(rep.stages), "stop_reason": rep.stop_reason,
                "schedule": rep.schedule}

    summary = {"a": m.a, "mu0": args.mu0, "init": list(args.init), "horizon": args.horizon,
               "decay_factor": args.decay, "good": describe(good), "bad": describe(bad)}
    text = json.dumps(summary, indent=2) + "\n"
    Path(f"{prefix}-summary.json").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    failed = "failure" in (good.stop_reason, bad.stop_reason)
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_data(args):
    if args.data_command == "sample":
        ds = sample_sem(ModelParams(args.a), args.n, args.noise, args.seed)
        if args.out:
            ds.to_csv(args.out)
        else:
            w = csv.writer(sys.stdout, lineterminator="\n")
            w.writerow(["x1", "x2"])
            for x1, x2 in ds.rows:
                w.writerow([fmt(x1), fmt(x2)])
        return EXIT_OK
    ds = Dataset.from_csv(args.input)
    if len(ds) < 2:
        raise UsageError("fit needs at least 2 rows")
    loss = ds.moments()
    oracle = enumeration_oracle(loss)
    # regression estimate of the edge weight, used only by the theory schedule
    a_est = abs(loss.s12 / loss.s11)
    sched = _make_schedule(args, a_est if args.schedule in ("theory", "gd") else None)
    model = ModelParams(a_est) if args.schedule in ("theory", "gd") else None
    rep = _run(sched, args.init, loss, args, model=model, record=False)
    f = rep.final
    edge = "x" if abs(f.x) >= abs(f.y) else "y"
    payload = {"n": len(ds), "moments": loss.to_dict(), "a_estimate": a_est,
               "final": list(f), "edge": edge, "h": 0.5 * f.x * f.x * f.y * f.y,
               "oracle": {"point": list(oracle.point), "score": oracle.score, "edge": oracle.edge},
               "dist_to_oracle": rep.dist_to_global, "report": rep.to_dict()}
    _write_or_print(json.dumps(payload, indent=2) + "\n", args.out)
    return EXIT_NUMERIC if rep.stop_reason == "failure" else EXIT_OK


COMMANDS = {"homotopy": cmd_homotopy, "landscape": cmd_landscape, "stationary": cmd_stationary,
            "compare-schedules": cmd_compare_schedules, "data": cmd_data}


def main(argv=None):
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except NumericFailure as exc:
        print(f"dagho: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, DomainError, PreconditionError, AdmissibilityError, OSError) as exc:
        print(f"dagho: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
