"""Command-line front end.

Exit codes: 0 when the tested condition holds, 1 when it does not, 2 on any
error (a JSON error object is printed).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import scenarios
from .linear import (
    COND_LIMIT, IndeterminateError, LinearDae, block_observable, block_preconditions,
    fullstate_shortcut, kalman_observable, linear_identifiability, mask_from_spec, pbh_r_observable,
)
from .linear import consistent_derivatives as linear_derivatives
from .model import DaeModel, ModelError, augment, load_model, solve_algebraic
from .ranktest import EvalPoint, check_identifiability, check_observability
from .scan import grid_points, parse_grid, run_scan
from .sim import consistent_derivatives, simulate
from .stack import build_stack, dump, identifiability_blocks, observability_blocks
from .svg import scatter_plot

EXIT_OK, EXIT_NOT, EXIT_ERR = 0, 1, 2


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# helpers


def _source(args):
    """Model and optional scenario named by the positional argument."""
    name = args.model
    sc = None
    if name in scenarios.NAMES and not Path(name).exists():
        sc = scenarios.load(name)
        model = sc.model
    else:
        model = load_model(Path(name))
    if getattr(args, "output", None):
        model = model.with_outputs(args.output)
    elif getattr(args, "sensor", None):
        if sc is None:
            opts = model.extras.get("sensor_options", {})
            if args.sensor not in opts:
                raise UsageError(f"unknown sensor {args.sensor!r}")
            opt = opts[args.sensor]
            model = model if opt == "I" else model.with_outputs(opt)
        else:
            model = sc.model_for(args.sensor)
    return model, sc


def _linear_of(model: DaeModel) -> LinearDae | None:
    data = model.extras.get("linear")
    return LinearDae.from_dict(data) if data else None


def _theta_names(model, sc, names):
    if not names:
        return []
    out = []
    lin = _linear_of(model)
    for nm in names:
        if sc is not None and nm in sc.theta_sets:
            out.extend(sc.theta(nm))
        elif lin is not None and nm not in {s.name for s in model.parameters}:
            out.extend(lin.with_mask(mask_from_spec(lin, [nm])).param_names())
        else:
            out.append(nm)
    seen = []
    for nm in out:
        if nm not in seen:
            seen.append(nm)
    return seen


def _consistent_state(model, args):
    if getattr(args, "simulate", None) is not None:
        t_end = float(args.simulate)
        t0 = float(model.extras.get("t_span", (0.0, 10.0))[0])
        if t_end <= t0:
            return _initial_state(model)
        traj = simulate(model, t_span=(t0, t_end), dt=getattr(args, "dt", None))
        return traj.states[-1], float(traj.times[-1])
    return _initial_state(model)


def _initial_state(model):
    if model.initial_condition is None:
        raise UsageError("model has no initial condition; pass --point")
    x = np.array(model.initial_condition, dtype=float)
    if model.is_semi_explicit and model.n2 and model.extras.get("simulator") != "pendulum":
        x[model.n1:] = solve_algebraic(model, x[: model.n1], x[model.n1:])
    return x, 0.0


def _point(model, args, order, theta=()):
    if getattr(args, "point", None):
        data = json.loads(Path(args.point).read_text())
        if "derivatives" in data:
            pt = EvalPoint.from_dict(data)
            return pt if len(theta) == 0 or pt.theta.size else pt.with_theta(theta)
        x = np.asarray(data["x"], dtype=float)
        t = float(data.get("time", 0.0))
    else:
        x, t = _consistent_state(model, args)
    ders = [x] + consistent_derivatives(model, x, order)
    return EvalPoint(tuple(ders), np.asarray(theta, dtype=float), t)


def _emit(obj, stream=None):
    print(json.dumps(obj, indent=2), file=stream or sys.stdout)


# ---------------------------------------------------------------------------
# commands


def cmd_check(args) -> int:
    model, sc = _source(args)
    theta = _theta_names(model, sc, args.theta)
    target = augment(model, theta) if theta else model
    p = len(theta)
    if args.mu is not None or args.nu is not None:
        mu = args.nu if args.mu is None else args.mu
        nu = args.mu if args.nu is None else args.nu
        order = max(mu + 1, nu)
    else:
        mu = nu = None
        max_order = args.max_order if args.max_order is not None else model.n + p
        order = max_order + 1
    th = target.nominal_theta() if theta else ()
    pt = _point(model, args, order, th)
    kw = dict(mu=mu, nu=nu, tol=args.tol)
    if mu is None:
        kw["max_order"] = args.max_order
    report = check_identifiability(target, pt, **kw) if theta else check_observability(model, pt, **kw)
    _emit(report.to_dict(audit=args.svd_audit))
    return EXIT_OK if report.satisfied else EXIT_NOT


def cmd_scan(args) -> int:
    model, sc = _source(args)
    theta = _theta_names(model, sc, args.theta)
    target = augment(model, theta) if theta else model
    max_order = args.max_order if args.max_order is not None else model.n + len(theta)
    th = target.nominal_theta() if theta else ()
    if args.grid is not None:
        axes = parse_grid(args.grid)
        guess = None
        if model.initial_condition is not None:
            guess = np.asarray(model.initial_condition, dtype=float)[model.n1:]
        pts = grid_points(model, axes, max_order + 1, th, guess)
        if not pts:
            raise UsageError("no consistent grid nodes")
        source = "grid:" + args.grid
        traj = None
    else:
        traj = simulate(model, t_span=args.tspan, dt=args.dt)
        idx = traj.subsample(args.points, args.t_min)
        pts = []
        for i in idx:
            x = traj.states[i]
            ders = [x] + consistent_derivatives(model, x, max_order + 1)
            pts.append(EvalPoint(tuple(ders), np.asarray(th, dtype=float), float(traj.times[i])))
        source = "trajectory"
    res = run_scan(target, pts, jobs=args.jobs, max_order=max_order, source=source,
                   scenario=sc.name if sc else model.name, sensor=args.sensor or "")
    if args.out:
        Path(args.out).write_text(res.to_csv())
    if args.svg:
        axes = model.extras.get("plot_axes") or [s.name for s in model.states[:2]]
        names = res.state_names
        ia, ib = names.index(axes[0]), names.index(axes[1])
        xs = [p.state[ia] for p in res.points]
        ys = [p.state[ib] for p in res.points]
        ok = [p.verdict == "satisfied" for p in res.points]
        line = None
        if traj is None and model.initial_condition is not None and args.overlay:
            tr = simulate(model, t_span=args.tspan, dt=args.dt)
            line = (tr.states[:, ia], tr.states[:, ib])
        elif traj is not None:
            line = (traj.states[:, ia], traj.states[:, ib])
        title = f"{res.scenario} theta={','.join(theta) or '-'} sensor={args.sensor or '-'}"
        Path(args.svg).write_text(scatter_plot(xs, ys, ok, line, axes[0], axes[1], title))
    _emit(res.summary())
    return EXIT_OK


def cmd_simulate(args) -> int:
    model, _ = _source(args)
    traj = simulate(model, t_span=args.tspan, dt=args.dt, store_every=args.store_every)
    if args.derivatives:
        traj.derivatives = np.array([np.array(consistent_derivatives(model, x, args.derivatives)) for x in traj.states])
    if args.out:
        traj.write(args.out)
        _emit(traj.metadata())
    else:
        sys.stdout.write(traj.to_csv())
    return EXIT_OK


def cmd_linear(args) -> int:
    model, sc = _source(args)
    d = _linear_of(model)
    if d is None:
        raise UsageError("model is not a linear system")
    if args.output:
        raise UsageError("linear systems take C from the model file")
    out: dict = {"n": d.n, "q": d.q}
    try:
        out["pbh_r_observable"] = pbh_r_observable(d)
    except IndeterminateError as exc:
        out["pbh_r_observable"] = None
        out["pbh_note"] = str(exc)
    out["block_observable"] = block_observable(d)
    if np.linalg.cond(d.E) < COND_LIMIT:
        out["kalman_observable"] = kalman_observable(d)
    if d.partition is not None:
        out["block_preconditions"] = block_preconditions(d)
    verdict = out["block_observable"]
    theta = _theta_names(model, sc, args.theta)
    if theta:
        mask = mask_from_spec(d, theta)
        dm = d.with_mask(mask)
        order = (d.n if args.mu is None else args.mu) + 1
        if args.point:
            pt = _point(model, args, order)
        else:
            x, t = _consistent_state(model, args)
            pt = EvalPoint(tuple(linear_derivatives(dm, x, order)), time=t)
        rep = linear_identifiability(dm, pt, args.mu, args.tol)
        out["identifiability"] = rep.to_dict(audit=args.svd_audit)
        if np.array_equal(d.C, np.eye(d.n)):
            out["fullstate_shortcut"] = fullstate_shortcut(dm, pt, rep.mu, args.tol)
        verdict = rep.satisfied
    _emit(out)
    return EXIT_OK if verdict else EXIT_NOT


def cmd_stack(args) -> int:
    model, sc = _source(args)
    theta = _theta_names(model, sc, args.theta)
    target = augment(model, theta) if theta else model
    st = build_stack(target, args.mu, args.nu if args.nu is not None else args.mu)
    if args.dump_stack:
        print(dump(st))
    else:
        blocks = identifiability_blocks(st) if theta else observability_blocks(st)
        _emit({"mu": st.mu, "nu": st.nu, "sigma": st.sigma, "rows_F": len(st.Fbar),
               "rows_H": len(st.Hbar), "blocks": blocks.dims})
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="daeident", description="Local observability and identifiability of DAE models.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, sensor=True):
        p.add_argument("model", help="model JSON file or bundled scenario name")
        p.add_argument("--theta", nargs="+", default=[], metavar="NAME",
                       help="parameters (or scenario theta sets / linear blocks) to test")
        if sensor:
            p.add_argument("--sensor", help="named output option of a scenario")
            p.add_argument("--output", action="append", metavar="EXPR", help="output expression (repeatable)")

    p = sub.add_parser("check", help="rank test at one consistent point")
    common(p)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--point", help="JSON with 'derivatives' (and 'theta') or a state 'x'")
    g.add_argument("--simulate", type=float, metavar="T", help="simulate to time T and test there")
    p.add_argument("--dt", type=float)
    p.add_argument("--max-order", type=int)
    p.add_argument("--mu", type=int)
    p.add_argument("--nu", type=int)
    p.add_argument("--tol", type=float, help="fixed rank tolerance")
    p.add_argument("--svd-audit", action="store_true", help="include singular values")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("scan", help="classify trajectory samples or grid nodes")
    common(p)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--grid", help="name:lo:hi:count,... over the differential states")
    g.add_argument("--trajectory", action="store_true", help="sample the simulated trajectory (default)")
    p.add_argument("--points", type=int, default=200)
    p.add_argument("--t-min", type=float)
    p.add_argument("--tspan", type=float, nargs=2)
    p.add_argument("--dt", type=float)
    p.add_argument("--max-order", type=int)
    p.add_argument("--overlay", action="store_true", help="draw the trajectory over a grid plot")
    p.add_argument("--out", help="CSV output path")
    p.add_argument("--svg", help="SVG plot path")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("simulate", help="simulate and write a trajectory")
    p.add_argument("model")
    p.add_argument("--tspan", type=float, nargs=2)
    p.add_argument("--dt", type=float)
    p.add_argument("--store-every", type=int, default=1)
    p.add_argument("--derivatives", type=int, default=0, metavar="K", help="add derivative columns up to order K")
    p.add_argument("--out", help="CSV path (metadata goes next to it as .json)")
    p.set_defaults(func=cmd_simulate, sensor=None, output=None)

    p = sub.add_parser("linear", help="closed-form tests for linear systems")
    common(p)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--point", help="JSON with 'derivatives' or a state 'x'")
    g.add_argument("--simulate", type=float, metavar="T")
    p.add_argument("--dt", type=float)
    p.add_argument("--mu", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--svd-audit", action="store_true")
    p.set_defaults(func=cmd_linear)

    p = sub.add_parser("stack", help="inspect the derivative stack")
    common(p)
    p.add_argument("--mu", type=int, default=1)
    p.add_argument("--nu", type=int)
    p.add_argument("--dump-stack", action="store_true", help="print every stacked expression")
    p.set_defaults(func=cmd_stack)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_ERR if exc.code else EXIT_OK
    try:
        return args.func(args)
    except Exception as exc:  # every failure maps to the error exit code
        _emit({"error": {"type": type(exc).__name__, "message": str(exc)}})
        return EXIT_ERR


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
