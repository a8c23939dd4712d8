"""Consistent trajectories and derivative arrays for the rank tests."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import expr as ex
from .expr import Symbol
from .model import ConvergenceError, DaeModel, ModelError, SingularJacobianError, solve_algebraic
from .ranktest import EvalPoint

__all__ = [
    "Trajectory", "simulate_index1", "simulate_pendulum", "simulate",
    "consistent_derivatives", "consistency_residual", "eval_points",
    "pendulum_state", "pendulum_derivatives", "DEFAULT_DT",
]

DEFAULT_DT = 1e-3
# tighter than the solver default so stored states meet 1e-10 absolute
PROJECTION_RTOL = 1e-13


@dataclass
class Trajectory:
    """Sampled solution; ``derivatives[i]`` holds ``(x', ..., x^(k))`` at ``times[i]``."""

    times: np.ndarray
    states: np.ndarray
    names: list[str]
    consistency_residuals: np.ndarray
    derivatives: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if self.times.ndim != 1 or self.states.shape[0] != self.times.size:
            raise ValueError("times and states disagree in length")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")

    def __len__(self):
        return self.times.size

    def subsample(self, count: int, t_min: float | None = None) -> np.ndarray:
        """Indices of ``count`` evenly spaced samples (optionally after ``t_min``)."""
        idx = np.arange(len(self))
        if t_min is not None:
            idx = idx[self.times[idx] >= t_min]
        if count >= idx.size:
            return idx
        return idx[np.round(np.linspace(0, idx.size - 1, count)).astype(int)]

    def to_csv(self, dest=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = ["t"] + self.names
        order = 0 if self.derivatives is None else self.derivatives.shape[1]
        for k in range(1, order + 1):
            header += [nm + "'" * k for nm in self.names]
        w.writerow(header)
        for i, t in enumerate(self.times):
            row = [repr(float(t))] + [repr(float(v)) for v in self.states[i]]
            if order:
                row += [repr(float(v)) for v in self.derivatives[i].ravel()]
            w.writerow(row)
        text = buf.getvalue()
        if dest is not None:
            Path(dest).write_text(text)
        return text

    def metadata(self) -> dict:
        out = dict(self.meta)
        out["points"] = len(self)
        out["max_consistency_residual"] = float(np.max(self.consistency_residuals)) if len(self) else 0.0
        return out

    def write(self, path) -> None:
        path = Path(path)
        self.to_csv(path)
        path.with_suffix(".json").write_text(json.dumps(self.metadata(), indent=2) + "\n")


# ---------------------------------------------------------------------------
# index-1 semi-explicit models


class _Index1:
    """Compiled residual pieces of a semi-explicit model."""

    def __init__(self, m: DaeModel, params=None):
        self.m = m
        self.n1, self.n2 = m.n1, m.n2
        consts = m.known_values(params)
        states = list(m.states)
        self.f1 = ex.compile_exprs(list(m.f1), states, consts)
        self.f2 = ex.compile_exprs(list(m.f2), states, consts)
        rows = list(m.f1) + list(m.f2)
        self.jac = ex.compile_exprs([ex.diff_partial(e, s) for e in rows for s in states], states, consts)

    def be_step(self, x, h):
        """Backward Euler step of size ``h`` on the full state (x1, x2)."""
        n1, n = self.n1, self.n1 + self.n2
        x_old = x[:n1]
        y = x.copy()
        if n1:
            y[:n1] = x_old + h * self.f1(x)
        for _ in range(30):
            r = np.concatenate([y[:n1] - x_old - h * self.f1(y), self.f2(y)])
            J = self.jac(y).reshape(n, n)
            J[:n1] *= -h
            J[:n1, :n1] += np.eye(n1)
            try:
                dy = np.linalg.solve(J, -r)
            except np.linalg.LinAlgError:
                raise SingularJacobianError("Newton matrix is singular") from None
            y = y + dy
            if np.max(np.abs(dy)) <= 1e-12 * (1.0 + np.max(np.abs(y))):
                return y
        raise ConvergenceError("implicit step did not converge")


def _project(m, x, params=None):
    x = np.array(x, dtype=float)
    x[m.n1:] = solve_algebraic(m, x[: m.n1], x[m.n1:], params, rtol=PROJECTION_RTOL)
    return x


def simulate_index1(
    m: DaeModel,
    x0: Sequence[float] | None = None,
    t_span: tuple[float, float] = (0.0, 10.0),
    dt: float = DEFAULT_DT,
    richardson: bool = True,
    params: Mapping | None = None,
    store_every: int = 1,
) -> Trajectory:
    """Fixed-step backward Euler with Newton, optional Richardson refinement.

    Each step combines one step of ``dt`` with two of ``dt/2`` (second
    order), then re-solves ``f2`` for the algebraic states.
    """
    if not m.is_semi_explicit:
        raise ModelError("simulate_index1 needs a semi-explicit model")
    if not dt > 0:
        raise ValueError("dt must be positive")
    x0 = m.initial_condition if x0 is None else x0
    if x0 is None:
        raise ModelError("no initial condition")
    x = _project(m, x0, params)
    if m.n2 and np.max(np.abs(_Index1(m, params).f2(x))) > 1e-8:
        raise ModelError("initial condition cannot be made consistent")
    c = _Index1(m, params)
    t0, t1 = map(float, t_span)
    steps = int(round((t1 - t0) / dt))
    times, states, resid = [t0], [x.copy()], [_f2_max(c, x)]
    for k in range(1, steps + 1):
        if richardson:
            full = c.be_step(x, dt)
            half = c.be_step(c.be_step(x, dt / 2), dt / 2)
            y = 2.0 * half - full
        else:
            y = c.be_step(x, dt)
        if m.n2:
            y[m.n1:] = solve_algebraic(m, y[: m.n1], y[m.n1:], params, rtol=PROJECTION_RTOL)
        x = y
        if k % store_every == 0 or k == steps:
            times.append(t0 + k * dt)
            states.append(x.copy())
            resid.append(_f2_max(c, x))
    return Trajectory(
        np.array(times), np.array(states), [s.name for s in m.states], np.array(resid),
        meta={"model": m.name, "dt": dt, "scheme": "backward-euler" + ("+richardson" if richardson else ""),
              "t_span": [t0, t1], "algebraic_tolerance": 1e-10},
    )


def _f2_max(c, x):
    return float(np.max(np.abs(c.f2(x)))) if c.n2 else 0.0


# ---------------------------------------------------------------------------
# derivative arrays


def _derivative_levels(m: DaeModel, order: int, params):
    """Compiled total derivatives of ``f1`` (levels 0..order-1) and ``f2`` (1..order)."""
    cache = m.__dict__.setdefault("_consistent", {})
    key = tuple(sorted((str(k), v) for k, v in (params or {}).items()))
    entry = cache.setdefault(key, {"f1": [tuple(m.f1)], "f2": [tuple(m.f2)], "memo": {}, "fn": {}})
    zero = frozenset(m.parameters)
    nxt = m.table.next
    for name, need in (("f1", order), ("f2", order + 1)):
        lv = entry[name]
        while len(lv) < need:
            lv.append(tuple(ex.diff_total(e, nxt, zero, entry["memo"]) for e in lv[-1]))
    consts = m.known_values(params)
    fns = entry["fn"]

    def fn(name, k):
        if (name, k) not in fns:
            syms = [m.table.derivative(s, j) for j in range(k + 1) for s in m.states]
            exprs = list(entry[name][k])
            if name == "f2":
                jac = [ex.diff_partial(e, s) for e in m.f2 for s in m.algebraic_states]
                fns[("J22", 0)] = ex.compile_exprs(jac, list(m.states), consts)
            fns[(name, k)] = (ex.compile_exprs(exprs, syms, consts), len(syms))
        return fns[(name, k)]

    return fn, fns


def consistent_derivatives(
    m: DaeModel, x: Sequence[float], sigma: int, params: Mapping | None = None
) -> list[np.ndarray]:
    """``[x', x'', ..., x^(sigma)]`` at the consistent state ``x``.

    Differential rates come from total derivatives of ``f1``; algebraic rates
    solve the differentiated constraint with ``df2/dx2``.  Models with a
    ``"simulator": "pendulum"`` entry use the closed-form pendulum recursion.
    """
    if m.extras.get("simulator") == "pendulum":
        return pendulum_derivatives(m, x, sigma, params)[1:]
    x = np.asarray(x, dtype=float)
    if not m.is_semi_explicit:
        return _implicit_derivatives(m, x, sigma, params)
    n1, n2 = m.n1, m.n2
    fn, fns = _derivative_levels(m, sigma, params)
    ders = [x]
    J22 = None
    for k in range(sigma):
        nxt = np.zeros(n1 + n2)
        f1k, _ = fn("f1", k)
        nxt[:n1] = f1k(np.concatenate(ders))
        if n2:
            f2k, _ = fn("f2", k + 1)
            if J22 is None:
                J22 = fns[("J22", 0)](x).reshape(n2, n2)
                if np.linalg.cond(J22) > 1e12:
                    raise SingularJacobianError("df2/dx2 is singular at this state")
            base = f2k(np.concatenate(ders + [nxt]))
            nxt[n1:] = np.linalg.solve(J22, -base)
        ders.append(nxt)
    return ders[1:]


def _implicit_derivatives(m, x, sigma, params):
    """Derivatives for implicit models with nonsingular ``dF/dx'``."""
    from .stack import build_stack

    n = m.n
    st = build_stack(m, max(sigma - 1, 0), 0)
    consts = m.known_values(params)
    cache = m.__dict__.setdefault("_implicit_fns", {})
    ders = [np.asarray(x, dtype=float)]
    for k in range(sigma):
        if k not in cache:
            rows = st.level(k)
            syms = [m.table.derivative(s, j) for j in range(k + 2) for s in m.states]
            top = [m.table.derivative(s, k + 1) for s in m.states]
            jac = [ex.diff_partial(e, s) for e in rows for s in top]
            cache[k] = (ex.compile_exprs(list(rows), syms, consts), ex.compile_exprs(jac, syms, consts))
        res, jac = cache[k]
        args = np.concatenate(ders + [np.zeros(n)])
        J = jac(args).reshape(n, n)
        if np.linalg.cond(J) > 1e12:
            raise SingularJacobianError("dF/dx' is singular; supply a semi-explicit model")
        ders.append(np.linalg.solve(J, -res(args)))
    return ders[1:]


def consistency_residual(m: DaeModel, x: Sequence[float], params: Mapping | None = None) -> float:
    """``max|f2|`` for semi-explicit models, ``max|F(x, x')|`` otherwise."""
    x = np.asarray(x, dtype=float)
    consts = m.known_values(params)
    if m.is_semi_explicit:
        if not m.n2:
            return 0.0
        binding = dict(consts)
        binding.update(zip(m.states, x))
        return max(abs(ex.evaluate(e, binding)) for e in m.f2)
    dx = _implicit_derivatives(m, x, 1, params)[0]
    binding = dict(consts)
    binding.update(zip(m.states, x))
    binding.update((m.table.derivative(s, 1), v) for s, v in zip(m.states, dx))
    return max(abs(ex.evaluate(e, binding)) for e in m.F)


# ---------------------------------------------------------------------------
# pendulum


def _pendulum_params(m: DaeModel, params=None):
    vals = {s.name: v for s, v in m.known_values(params).items()}
    try:
        return vals["m"], vals["g"], vals["L"]
    except KeyError as exc:
        raise ModelError(f"pendulum model needs a value for {exc.args[0]}") from None


_PEND_CACHE: dict = {}


def _pendulum_levels(order: int):
    """Cartesian states and their time derivatives as expressions in (phi, omega)."""
    entry = _PEND_CACHE.get("levels")
    if entry is None:
        phi, om = Symbol("phi"), Symbol("omega")
        mm, g, L = (Symbol(n, "parameter") for n in ("m", "g", "L"))
        P, W = ex.sym(phi), ex.sym(om)
        Mv, Gv, Lv = ex.sym(mm), ex.sym(g), ex.sym(L)
        x1 = Lv * ex.func("sin", P)
        x2 = -(Lv * ex.func("cos", P))
        x3 = Lv * W * ex.func("cos", P)
        x4 = Lv * W * ex.func("sin", P)
        x5 = -(Mv * (Gv * ex.func("cos", P) / Lv + W * W))
        rate = (W, -(Gv / Lv) * ex.func("sin", P))
        entry = {"levels": [(x1, x2, x3, x4, x5)], "rate": rate, "syms": (phi, om, mm, g, L), "fns": {}}
        _PEND_CACHE["levels"] = entry
    phi, om = entry["syms"][:2]
    lv = entry["levels"]
    while len(lv) <= order:
        nxt = []
        for e in lv[-1]:
            d = ex.add(ex.mul(ex.diff_partial(e, phi), entry["rate"][0]), ex.mul(ex.diff_partial(e, om), entry["rate"][1]))
            nxt.append(d)
        lv.append(tuple(nxt))
    if order not in entry["fns"]:
        flat = [e for level in lv[: order + 1] for e in level]
        entry["fns"][order] = ex.compile_exprs(flat, entry["syms"])
    return entry["fns"][order]


def pendulum_state(phi, omega, m_: float, g: float, L: float) -> np.ndarray:
    """Cartesian state for angle ``phi`` (from the downward vertical) and rate ``omega``."""
    return _pendulum_levels(0)([phi, omega, m_, g, L])


def pendulum_derivatives(m: DaeModel, x, order: int, params=None) -> list[np.ndarray]:
    """``[x, x', ..., x^(order)]`` of the pendulum through the consistent state ``x``."""
    mm, g, L = _pendulum_params(m, params)
    x = np.asarray(x, dtype=float)
    phi = math.atan2(x[0], -x[1])
    omega = (x[2] * math.cos(phi) + x[3] * math.sin(phi)) / L
    vals = _pendulum_levels(order)([phi, omega, mm, g, L])
    return [vals[5 * k:5 * (k + 1)] for k in range(order + 1)]


def simulate_pendulum(
    params: tuple[float, float, float],
    phi0: float = 0.4,
    omega0: float = 0.0,
    t_span: tuple[float, float] = (0.0, 20.0),
    dt: float = DEFAULT_DT,
    store_every: int = 1,
) -> Trajectory:
    """RK4 on the angle dynamics, mapped to Cartesian coordinates.

    ``params`` is ``(m, g, L)``.  The tension state is recovered from the
    twice differentiated length constraint.
    """
    mm, g, L = map(float, params)
    if not (L > 0 and mm > 0):
        raise ValueError("pendulum needs positive mass and length")
    if not dt > 0 or dt > 0.1 * math.sqrt(L / max(abs(g), 1e-12)):
        raise ValueError("dt must be positive and well below the oscillation period")
    t0, t1 = map(float, t_span)
    steps = int(round((t1 - t0) / dt))
    k = g / L

    def f(y):
        return np.array([y[1], -k * math.sin(y[0])])

    y = np.array([phi0, omega0], dtype=float)
    ys = [y.copy()]
    times = [t0]
    for i in range(1, steps + 1):
        a = f(y)
        b = f(y + 0.5 * dt * a)
        c = f(y + 0.5 * dt * b)
        d = f(y + dt * c)
        y = y + dt / 6.0 * (a + 2 * b + 2 * c + d)
        if i % store_every == 0 or i == steps:
            ys.append(y.copy())
            times.append(t0 + i * dt)
    ys = np.array(ys)
    fn = _pendulum_levels(0)
    states = np.array([fn([p, w, mm, g, L]) for p, w in ys])
    resid = np.abs(states[:, 0] ** 2 + states[:, 1] ** 2 - L**2)
    return Trajectory(
        np.array(times), states, ["x1", "x2", "x3", "x4", "x5"], resid,
        meta={"model": "pendulum", "dt": dt, "scheme": "rk4-angle", "t_span": [t0, t1],
              "phi0": phi0, "omega0": omega0, "algebraic_tolerance": 1e-10},
    )


# ---------------------------------------------------------------------------
# dispatch


def simulate(m: DaeModel, t_span=None, dt=None, x0=None, params=None, store_every: int = 1) -> Trajectory:
    """Simulate with the method named by the model's ``simulator`` entry."""
    kind = m.extras.get("simulator", "index1")
    t_span = tuple(t_span or m.extras.get("t_span", (0.0, 10.0)))
    dt = float(dt or m.extras.get("dt", DEFAULT_DT))
    if kind == "pendulum":
        ic = m.extras.get("pendulum_initial", {"phi0": 0.4, "omega0": 0.0})
        return simulate_pendulum(_pendulum_params(m, params), ic["phi0"], ic["omega0"], t_span, dt, store_every)
    if kind == "linear-exact":
        from .linear import LinearDae, trajectory

        d = LinearDae.from_dict(m.extras["linear"])
        x0 = m.initial_condition if x0 is None else x0
        times = np.arange(0, int(round((t_span[1] - t_span[0]) / dt)) + 1, store_every) * dt + t_span[0]
        ders = trajectory(d, x0, times, 0)
        states = np.array([v[0] for v in ders])
        resid = np.array([consistency_residual(m, s, params) for s in states])
        return Trajectory(times, states, [s.name for s in m.states], resid,
                          meta={"model": m.name, "dt": dt, "scheme": "matrix-exponential", "t_span": list(t_span)})
    if kind != "index1":
        raise ModelError(f"unknown simulator {kind!r}")
    return simulate_index1(m, x0, t_span, dt, params=params, store_every=store_every)


def eval_points(
    m: DaeModel, traj: Trajectory, indices: Sequence[int], order: int,
    theta: Sequence[float] = (), params: Mapping | None = None,
) -> list[EvalPoint]:
    """Evaluation points with consistent derivatives up to ``order``."""
    pts = []
    for i in indices:
        x = traj.states[i]
        ders = [x] + list(consistent_derivatives(m, x, order, params))
        pts.append(EvalPoint(tuple(ders), np.asarray(theta, dtype=float), float(traj.times[i])))
    return pts
