"""Numerical rank, 1-fullness and the observability / identifiability loops."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import expr as ex
from .model import AugmentedModel, DaeModel, ModelError
from .stack import build_stack, identifiability_blocks, observability_blocks

__all__ = [
    "MissingDerivativesError", "EvalPoint", "RankReport",
    "numerical_rank", "default_tolerance", "resolve_tolerance", "is_one_full",
    "check_observability", "check_identifiability", "lie_observability",
    "SATISFIED", "NOT_SATISFIED", "TOL_ENV",
]

SATISFIED = "satisfied"
NOT_SATISFIED = "not-satisfied"
TOL_ENV = "IDENT_RANK_TOL"
ILL_CONDITIONED_RATIO = 10.0


class MissingDerivativesError(ValueError):
    pass


@dataclass(frozen=True)
class EvalPoint:
    """State derivatives ``x, x', ..., x^(k)`` and parameter values at one instant."""

    derivatives: tuple[np.ndarray, ...]
    theta: np.ndarray = field(default_factory=lambda: np.zeros(0))
    time: float = 0.0

    def __post_init__(self):
        ders = tuple(np.asarray(d, dtype=float).ravel() for d in self.derivatives)
        if not ders:
            raise ValueError("an evaluation point needs at least the state x")
        if any(d.shape != ders[0].shape for d in ders):
            raise ValueError("all derivative vectors must have the state dimension")
        theta = np.asarray(self.theta, dtype=float).ravel()
        if not all(np.all(np.isfinite(d)) for d in ders) or not np.all(np.isfinite(theta)):
            raise ValueError("evaluation point entries must be finite")
        object.__setattr__(self, "derivatives", ders)
        object.__setattr__(self, "theta", theta)

    @property
    def x(self) -> np.ndarray:
        return self.derivatives[0]

    @property
    def order(self) -> int:
        return len(self.derivatives) - 1

    def truncated(self, order: int) -> "EvalPoint":
        return EvalPoint(self.derivatives[: order + 1], self.theta, self.time)

    def with_theta(self, theta) -> "EvalPoint":
        return EvalPoint(self.derivatives, theta, self.time)

    def binding(self, states, sigma: int, table, theta_syms=()) -> dict:
        if self.order < sigma:
            raise MissingDerivativesError(
                f"point supplies derivatives up to order {self.order}, order {sigma} is required"
            )
        if len(self.x) != len(states):
            raise ValueError(f"point has {len(self.x)} states, model has {len(states)}")
        out = {}
        for k in range(sigma + 1):
            for s, v in zip(states, self.derivatives[k]):
                out[table.derivative(s, k)] = v
        if len(theta_syms) != len(self.theta):
            raise ValueError(f"point carries {len(self.theta)} parameter values, {len(theta_syms)} expected")
        out.update(zip(theta_syms, self.theta))
        return out

    def to_dict(self) -> dict:
        return {
            "time": self.time,
            "theta": self.theta.tolist(),
            "derivatives": [d.tolist() for d in self.derivatives],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalPoint":
        return cls(tuple(d["derivatives"]), d.get("theta", ()), float(d.get("time", 0.0)))


@dataclass
class RankReport:
    """Outcome of one rank test (or of the last order tried by a loop)."""

    kind: str
    verdict: str
    rank_full: int
    rank_right: int
    required: int
    mu: int
    nu: int
    sigma: int
    tolerance: float
    n: int
    p: int = 0
    condition_ratio: float | None = None
    ill_conditioned: bool = False
    stop_reason: str = ""
    singular_values: list | None = None
    history: list = field(default_factory=list)
    theta: list = field(default_factory=list)
    point: EvalPoint | None = None

    @property
    def satisfied(self) -> bool:
        return self.verdict == SATISFIED

    @property
    def deficit(self) -> int:
        return self.required - self.rank_full

    def to_dict(self, audit: bool = False) -> dict:
        d = {
            "kind": self.kind,
            "verdict": self.verdict,
            "rank_full": self.rank_full,
            "rank_right": self.rank_right,
            "required": self.required,
            "mu": self.mu,
            "nu": self.nu,
            "sigma": self.sigma,
            "tolerance": self.tolerance,
            "n": self.n,
            "p": self.p,
            "theta": list(self.theta),
            "condition_ratio": self.condition_ratio,
            "ill_conditioned": self.ill_conditioned,
            "stop_reason": self.stop_reason,
            "history": self.history,
            "point": None if self.point is None else self.point.to_dict(),
        }
        if audit and self.singular_values is not None:
            d["singular_values"] = list(self.singular_values)
        return d

    def to_json(self, audit: bool = False) -> str:
        return json.dumps(self.to_dict(audit), indent=2)


def _svals(M: np.ndarray) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        return np.zeros(0)
    if not np.all(np.isfinite(M)):
        raise np.linalg.LinAlgError("matrix has non-finite entries")
    return np.linalg.svd(M, compute_uv=False)


def numerical_rank(M, tol: float) -> int:
    """Number of singular values strictly above ``tol``."""
    if not tol > 0:
        raise ValueError("tolerance must be positive")
    return int(np.sum(_svals(M) > tol))


def default_tolerance(M, sigma: int, n: int) -> float:
    """``sigma * n * ulp(||M||_2)``, never below the smallest normal float."""
    s = _svals(M)
    norm = float(s[0]) if s.size else 0.0
    if norm == 0.0:
        return float(np.finfo(float).tiny)
    return max(sigma * n * float(np.spacing(norm)), float(np.finfo(float).tiny))


def resolve_tolerance(M, sigma: int, n: int, tol: float | None = None) -> float:
    """Explicit ``tol``, else the ``IDENT_RANK_TOL`` environment value, else the formula."""
    if tol is not None:
        return float(tol)
    env = os.environ.get(TOL_ENV)
    if env:
        try:
            value = float(env)
        except ValueError:
            raise ValueError(f"{TOL_ENV} must be a number, got {env!r}") from None
        if not value > 0:
            raise ValueError(f"{TOL_ENV} must be positive")
        return value
    return default_tolerance(M, sigma, n)


def is_one_full(M, m1: int, tol: float) -> tuple[bool, int, int]:
    """Whether ``M v = b`` pins down the first ``m1`` entries of ``v``.

    Returns ``(full, rank(M), rank(M[:, m1:]))``.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or not 0 <= m1 <= M.shape[1]:
        raise ValueError("m1 must lie between 0 and the column count")
    r = numerical_rank(M, tol) if M.size else 0
    r2 = numerical_rank(M[:, m1:], tol) if M[:, m1:].size else 0
    return r == m1 + r2, r, r2


def _assess(M, m1, sigma, n, tol):
    s = _svals(M)
    tol = resolve_tolerance(M, sigma, n, tol)
    r = int(np.sum(s > tol))
    right = M[:, m1:]
    r2 = int(np.sum(_svals(right) > tol)) if right.size else 0
    ratio = float(s[r - 1] / tol) if r > 0 else None
    return r, r2, tol, s, ratio


def _loop(kind, model, pt, max_order, mu, nu, tol, params, theta_syms):
    n = model.n
    p = len(theta_syms)
    if mu is not None or nu is not None:
        mu = nu if mu is None else mu
        nu = mu if nu is None else nu
        orders = [(mu, nu)]
    else:
        if max_order is None:
            max_order = n + p
        if max_order < 0:
            raise ValueError("max_order must be nonnegative")
        orders = [(k, k) for k in range(max_order + 1)]
    history = []
    report = None
    prev = None
    for a, b in orders:
        st = build_stack(model, a, b)
        blocks = identifiability_blocks(st, params=params) if kind == "identifiability" else observability_blocks(st, params)
        values = pt.binding(model.states, st.sigma, model.table, theta_syms)
        M = blocks.evaluate(values)
        m1 = p if kind == "identifiability" else n
        r, r2, used_tol, s, ratio = _assess(M, m1, st.sigma, n, tol)
        required = m1 + r2
        if kind == "identifiability" and p == 0:
            ok = True
        elif model.q == 0:
            ok = False
        else:
            ok = r == required
        history.append({"mu": a, "nu": b, "rank_full": r, "rank_right": r2, "required": required})
        report = RankReport(
            kind=kind,
            verdict=SATISFIED if ok else NOT_SATISFIED,
            rank_full=r,
            rank_right=r2,
            required=required,
            mu=a,
            nu=b,
            sigma=st.sigma,
            tolerance=used_tol,
            n=n,
            p=p,
            condition_ratio=ratio,
            ill_conditioned=ratio is not None and ok and 1.0 <= ratio <= ILL_CONDITIONED_RATIO,
            singular_values=s.tolist(),
            history=history,
            theta=[t.name for t in theta_syms],
            point=pt,
        )
        if ok:
            report.stop_reason = "satisfied"
            break
        if len(orders) == 1:
            report.stop_reason = "fixed-order"
            break
        # stop once the pinned-down dimension stops growing
        resolved = r - r2
        if prev is not None:
            prev_r, prev_resolved = prev
            if r == prev_r:
                report.stop_reason = "rank-stabilized"
                break
            if a >= n and resolved == prev_resolved:
                report.stop_reason = "resolved-stabilized"
                break
        prev = (r, resolved)
    else:
        report.stop_reason = "max-order"
    return report


def check_observability(
    m: DaeModel,
    pt: EvalPoint,
    max_order: int | None = None,
    mu: int | None = None,
    nu: int | None = None,
    tol: float | None = None,
    params: Mapping | None = None,
) -> RankReport:
    """Test local observability of the consistent state in ``pt``.

    Orders ``mu = nu = 0, 1, ...`` are tried until the condition holds, the
    rank stops growing, or ``max_order`` (default ``n``) is reached.  Giving
    ``mu`` or ``nu`` tests that single order.
    """
    if isinstance(m, AugmentedModel):
        raise ModelError("observability is tested on the unaugmented model")
    if max_order is None:
        max_order = m.n
    return _loop("observability", m, pt, max_order, mu, nu, tol, params, ())


def check_identifiability(
    m: AugmentedModel,
    pt: EvalPoint,
    max_order: int | None = None,
    mu: int | None = None,
    nu: int | None = None,
    tol: float | None = None,
    params: Mapping | None = None,
) -> RankReport:
    """Test local identifiability of ``m.theta`` at ``pt``.

    ``pt.theta`` holds the parameter values ordered like ``m.theta``; when it
    is empty the model's nominal values are used.  Default ``max_order`` is
    ``n + p``.
    """
    if not isinstance(m, AugmentedModel):
        raise ModelError("identifiability needs a model augmented with theta")
    if pt.theta.size == 0 and m.p:
        pt = pt.with_theta(m.nominal_theta())
    return _loop("identifiability", m, pt, max_order, mu, nu, tol, params, m.theta)


def lie_observability(
    m: DaeModel, pt: EvalPoint, nu: int, tol: float | None = None, params: Mapping | None = None
) -> RankReport:
    """Classical test: Jacobian of stacked Lie derivatives has full column rank."""
    if not m.is_semi_explicit or m.n2 != 0:
        raise ModelError("the Lie-derivative test needs an ODE model (no algebraic states)")
    if nu < 0:
        raise ValueError("nu must be nonnegative")
    cache = m.__dict__.setdefault("_lie", {})
    states = m.differential_states
    levels = cache.setdefault("levels", [tuple(m.outputs)])
    while len(levels) <= nu:
        prev = levels[-1]
        nxt = []
        for h in prev:
            acc = ex.ZERO
            for s, f in zip(states, m.f1):
                acc = ex.add(acc, ex.mul(ex.diff_partial(h, s), f))
            nxt.append(acc)
        levels.append(tuple(nxt))
    rows = [h for lv in levels[: nu + 1] for h in lv]
    key = (nu, tuple(sorted((str(k), v) for k, v in (params or {}).items())))
    fn = cache.get(key)
    if fn is None:
        jac = [ex.diff_partial(h, s) for h in rows for s in states]
        fn = ex.compile_exprs(jac, states, m.known_values(params))
        cache[key] = fn
    n = m.n
    Psi = fn(pt.x).reshape(len(rows), n) if rows else np.zeros((0, n))
    s = _svals(Psi)
    used = resolve_tolerance(Psi, nu + 1, n, tol) if Psi.size else float(np.finfo(float).tiny)
    r = int(np.sum(s > used))
    ok = r == n
    return RankReport(
        kind="lie-observability",
        verdict=SATISFIED if ok else NOT_SATISFIED,
        rank_full=r,
        rank_right=0,
        required=n,
        mu=max(nu - 1, 0),
        nu=nu,
        sigma=nu,
        tolerance=used,
        n=n,
        condition_ratio=float(s[r - 1] / used) if r else None,
        singular_values=s.tolist(),
        stop_reason="fixed-order",
        point=pt,
    )
