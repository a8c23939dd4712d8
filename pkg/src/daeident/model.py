"""DAE model declaration, parameter augmentation and index-1 algebraic solving."""

from __future__ import annotations

import json
import threading
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import expr as ex
from .expr import Expr, Symbol

__all__ = [
    "ModelError", "SingularJacobianError", "ConvergenceError",
    "SymbolTable", "DaeModel", "AugmentedModel",
    "to_implicit", "augment", "solve_algebraic",
    "load_model", "model_from_dict", "model_to_dict", "save_model",
]


class ModelError(ValueError):
    pass


class SingularJacobianError(ArithmeticError):
    pass


class ConvergenceError(ArithmeticError):
    pass


class SymbolTable:
    """Name registry that mints derivative symbols on demand.

    Base symbols are fixed at construction.  ``x1'``, ``x1''`` ... are created
    the first time they are requested and reused afterwards; minting is
    guarded by a lock so concurrent readers see a single symbol per name.
    """

    def __init__(self, symbols: Iterable[Symbol] = ()):
        self._base: dict[str, Symbol] = {}
        self._derived: dict[tuple[Symbol, int], Symbol] = {}
        self._lock = threading.Lock()
        for s in symbols:
            self.add(s)

    def add(self, s: Symbol) -> Symbol:
        if s.kind == "derivative":
            raise ModelError("derivative symbols are minted, not declared")
        if "'" in s.name:
            raise ModelError(f"symbol name {s.name!r} may not contain apostrophes")
        if s.name in self._base or s.name in ex.FUNCTIONS:
            raise ModelError(f"duplicate or reserved symbol name {s.name!r}")
        self._base[s.name] = s
        return s

    def __getitem__(self, name: str) -> Symbol:
        s = self.resolve(name)
        if s is None:
            raise KeyError(name)
        return s

    def __contains__(self, name) -> bool:
        return self.resolve(name) is not None

    def get(self, name, default=None):
        s = self.resolve(name)
        return default if s is None else s

    def resolve(self, name: str) -> Symbol | None:
        base_name = name.rstrip("'")
        order = len(name) - len(base_name)
        base = self._base.get(base_name)
        if base is None:
            return None
        if order == 0:
            return base
        if base.kind == "time":
            return None
        return self.derivative(base, order)

    def derivative(self, base: Symbol, order: int) -> Symbol:
        base = base.root
        if order == 0:
            return base
        key = (base, order)
        s = self._derived.get(key)
        if s is None:
            with self._lock:
                s = self._derived.get(key)
                if s is None:
                    s = Symbol(base.name + "'" * order, "derivative", base, order)
                    self._derived[key] = s
        return s

    def next(self, s: Symbol) -> Symbol:
        return self.derivative(s.root, s.order + 1)

    def base_symbols(self) -> list[Symbol]:
        return list(self._base.values())


def _parse_all(texts, table):
    return tuple(ex.parse(t, table) if isinstance(t, str) else t for t in texts)


@dataclass(frozen=True, eq=False)
class DaeModel:
    """A DAE in semi-explicit (``f1``, ``f2``) or implicit (``F``) form.

    ``parameters`` maps every declared parameter symbol to its value; a value
    of None marks a parameter with no nominal value (it must be promoted or
    supplied at evaluation time).
    """

    table: SymbolTable
    differential_states: tuple[Symbol, ...]
    algebraic_states: tuple[Symbol, ...]
    parameters: Mapping[Symbol, float | None]
    outputs: tuple[Expr, ...]
    f1: tuple[Expr, ...] | None = None
    f2: tuple[Expr, ...] | None = None
    F: tuple[Expr, ...] | None = None
    initial_condition: tuple[float, ...] | None = None
    name: str = "model"
    extras: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if (self.F is None) == (self.f1 is None):
            raise ModelError("give either implicit residuals F or semi-explicit f1/f2")
        if self.F is None and self.f2 is None:
            object.__setattr__(self, "f2", ())
        n1, n2 = len(self.differential_states), len(self.algebraic_states)
        declared = set(self.states) | set(self.parameters)
        for s in self.states:
            if s.kind not in ("state", "algebraic-state"):
                raise ModelError(f"{s.name} is not a state symbol")
        for s in self.parameters:
            if s.kind != "parameter":
                raise ModelError(f"{s.name} is not a parameter symbol")
        time = {s for s in self.table.base_symbols() if s.kind == "time"}
        if self.is_semi_explicit:
            if len(self.f1) != n1 or len(self.f2) != n2:
                raise ModelError(f"expected {n1} f1 rows and {n2} f2 rows, got {len(self.f1)} and {len(self.f2)}")
            plain = self.f1 + self.f2
        else:
            if len(self.F) != n1 + n2:
                raise ModelError(f"expected {n1 + n2} implicit residuals, got {len(self.F)}")
            plain = ()
            for e in self.F:
                for s in ex.free_symbols(e):
                    if s.kind == "derivative" and (s.order != 1 or s.base not in self.states):
                        raise ModelError(f"implicit residuals may only use first derivatives of states, found {s.name}")
                    if s.kind != "derivative" and s not in declared | time:
                        raise ModelError(f"undeclared symbol {s.name}")
        for e in plain + self.outputs:
            for s in ex.free_symbols(e):
                if s.kind == "derivative":
                    raise ModelError(f"derivative symbol {s.name} not allowed here")
                if s not in declared | time:
                    raise ModelError(f"undeclared symbol {s.name}")
        if self.initial_condition is not None and len(self.initial_condition) != n1 + n2:
            raise ModelError("initial condition length does not match the state dimension")

    # --- shape ---------------------------------------------------------------
    @property
    def is_semi_explicit(self) -> bool:
        return self.F is None

    @property
    def states(self) -> tuple[Symbol, ...]:
        return self.differential_states + self.algebraic_states

    @property
    def n(self) -> int:
        return len(self.states)

    @property
    def n1(self) -> int:
        return len(self.differential_states)

    @property
    def n2(self) -> int:
        return len(self.algebraic_states)

    @property
    def q(self) -> int:
        return len(self.outputs)

    @property
    def free_parameters(self) -> tuple[Symbol, ...]:
        return ()

    def residuals(self) -> tuple[Expr, ...]:
        """Implicit residuals F(x, x', theta), built on the fly if needed."""
        if self.F is not None:
            return self.F
        d = [ex.sym(self.table.derivative(s, 1)) for s in self.differential_states]
        return tuple(ex.sub(f, dx) for f, dx in zip(self.f1, d)) + self.f2

    def parameter(self, name: str) -> Symbol:
        s = self.table.resolve(name)
        if s is None or s not in self.parameters:
            raise ModelError(f"unknown parameter {name!r}")
        return s

    def known_values(self, overrides: Mapping | None = None) -> dict[Symbol, float]:
        """Numeric values of the non-promoted parameters."""
        vals = {s: v for s, v in self.parameters.items() if v is not None}
        for k, v in (overrides or {}).items():
            s = self.parameter(k) if isinstance(k, str) else k
            vals[s] = float(v)
        return vals

    def with_outputs(self, outputs: Sequence[str | Expr]) -> "DaeModel":
        return replace(self, outputs=_parse_all(outputs, self.table))

    def with_parameters(self, values: Mapping[str, float | None]) -> "DaeModel":
        params = dict(self.parameters)
        for k, v in values.items():
            params[self.parameter(k)] = None if v is None else float(v)
        return replace(self, parameters=params)


@dataclass(frozen=True, eq=False)
class AugmentedModel:
    """A model whose parameters ``theta`` are extra states with zero rate."""

    base: DaeModel
    theta: tuple[Symbol, ...]

    def __post_init__(self):
        for s in self.theta:
            if s not in self.base.parameters:
                raise ModelError(f"unknown parameter {s.name!r}")
        if len(set(self.theta)) != len(self.theta):
            raise ModelError("duplicate parameter in theta")

    @property
    def table(self):
        return self.base.table

    @property
    def states(self):
        return self.base.states

    @property
    def n(self):
        return self.base.n

    @property
    def p(self):
        return len(self.theta)

    @property
    def q(self):
        return self.base.q

    @property
    def outputs(self):
        return self.base.outputs

    @property
    def free_parameters(self):
        return self.theta

    @property
    def parameters(self) -> dict[Symbol, float | None]:
        return {s: v for s, v in self.base.parameters.items() if s not in self.theta}

    @property
    def extra_residuals(self) -> tuple[Expr, ...]:
        return tuple(ex.sym(self.table.derivative(s, 1)) for s in self.theta)

    def residuals(self) -> tuple[Expr, ...]:
        return self.base.residuals() + self.extra_residuals

    def known_values(self, overrides=None) -> dict[Symbol, float]:
        vals = self.base.known_values(overrides)
        for s in self.theta:
            vals.pop(s, None)
        return vals

    def nominal_theta(self) -> np.ndarray:
        vals = [self.base.parameters[s] for s in self.theta]
        if any(v is None for v in vals):
            missing = [s.name for s, v in zip(self.theta, vals) if v is None]
            raise ModelError(f"no nominal value for {', '.join(missing)}")
        return np.array(vals, dtype=float)


def to_implicit(m: DaeModel) -> DaeModel:
    """Rewrite a semi-explicit model as residuals ``[f1 - x1'; f2]``."""
    if not m.is_semi_explicit:
        warnings.warn(f"model {m.name!r} is already implicit", stacklevel=2)
        return m
    return replace(m, f1=None, f2=None, F=m.residuals())


def augment(m: DaeModel, theta: Sequence[str | Symbol]) -> AugmentedModel:
    """Promote the parameters ``theta`` to constant states."""
    if not theta:
        raise ModelError("theta must name at least one parameter")
    syms = tuple(m.parameter(t) if isinstance(t, str) else t for t in theta)
    # reuse the same object so derivative stacks stay cached
    cache = m.__dict__.setdefault("_augmented", {})
    if syms not in cache:
        cache[syms] = AugmentedModel(m, syms)
    return cache[syms]


def _compiled(m: DaeModel, which: str, params: Mapping | None):
    key = (which, tuple(sorted((s.name, v) for s, v in (params or {}).items())))
    cache = m.__dict__.setdefault("_compile_cache", {})
    fn = cache.get(key)
    if fn is None:
        consts = m.known_values(params)
        args = list(m.differential_states) + list(m.algebraic_states)
        if which == "f2":
            exprs = list(m.f2)
        elif which == "J22":
            exprs = [ex.diff_partial(f, s) for f in m.f2 for s in m.algebraic_states]
        elif which == "f1":
            exprs = list(m.f1)
        else:  # pragma: no cover
            raise ValueError(which)
        fn = ex.compile_exprs(exprs, args, consts)
        cache[key] = fn
    return fn


def solve_algebraic(
    m: DaeModel,
    x1: Sequence[float],
    guess: Sequence[float] | None = None,
    params: Mapping | None = None,
    max_iter: int = 50,
    rtol: float = 1e-10,
) -> np.ndarray:
    """Solve ``f2(x1, x2) = 0`` for ``x2`` by damped Newton iteration.

    Converged when ``max|f2| <= rtol * (1 + max|x2|)``.  Steps are halved up
    to ten times while the residual norm increases.
    """
    if not m.is_semi_explicit:
        raise ModelError("solve_algebraic needs a semi-explicit model")
    x1 = np.asarray(x1, dtype=float)
    n2 = m.n2
    if n2 == 0:
        return np.zeros(0)
    x2 = np.zeros(n2) if guess is None else np.array(guess, dtype=float)
    f2 = _compiled(m, "f2", params)
    J22 = _compiled(m, "J22", params)

    def resid(v):
        return f2(np.concatenate([x1, v]))

    r = resid(x2)
    for _ in range(max_iter):
        if np.max(np.abs(r)) <= rtol * (1.0 + np.max(np.abs(x2))):
            return x2
        J = J22(np.concatenate([x1, x2])).reshape(n2, n2)
        if not np.all(np.isfinite(J)) or np.linalg.cond(J) > 1e14:
            raise SingularJacobianError("algebraic Jacobian is singular at the current iterate")
        step = np.linalg.solve(J, -r)
        norm0 = np.linalg.norm(r)
        lam = 1.0
        for _ in range(11):
            trial = x2 + lam * step
            try:
                rt = resid(trial)
            except ex.EvaluationError:
                rt = None
            if rt is not None and np.all(np.isfinite(rt)) and np.linalg.norm(rt) <= norm0:
                break
            lam *= 0.5
        else:
            # accept the smallest step; the outer loop decides convergence
            rt = resid(trial)
        x2, r = trial, rt
    if np.max(np.abs(r)) <= rtol * (1.0 + np.max(np.abs(x2))):
        return x2
    raise ConvergenceError(f"no convergence in {max_iter} Newton iterations (|f2| = {np.max(np.abs(r)):.3e})")


# ---------------------------------------------------------------------------
# JSON model format

_MODEL_KEYS = {
    "name", "states_differential", "states_algebraic", "parameters", "f1", "f2", "F",
    "outputs", "initial_condition", "time",
}


def model_from_dict(data: Mapping) -> DaeModel:
    """Build a model from the JSON layout.

    Linear models (``"kind": "linear"`` with matrix literals) are delegated to
    :mod:`daeident.linear`.
    """
    if data.get("kind") == "linear":
        from .linear import LinearDae

        return LinearDae.from_dict(data).to_model(name=data.get("name", "linear"), extras=data)
    try:
        xd = list(data["states_differential"])
        xa = list(data.get("states_algebraic", []))
        params = dict(data.get("parameters", {}))
        outputs = list(data.get("outputs", []))
    except (KeyError, TypeError) as exc:
        raise ModelError(f"malformed model description: {exc}") from None
    table = SymbolTable()
    dstates = tuple(table.add(Symbol(s, "state")) for s in xd)
    astates = tuple(table.add(Symbol(s, "algebraic-state")) for s in xa)
    psyms = {table.add(Symbol(k, "parameter")): (None if v is None else float(v)) for k, v in params.items()}
    if data.get("time"):
        table.add(Symbol(data["time"], "time"))
    kw = {}
    if "F" in data:
        kw["F"] = _parse_all(data["F"], table)
    else:
        if "f1" not in data:
            raise ModelError("model needs either F or f1/f2")
        kw["f1"] = _parse_all(data["f1"], table)
        kw["f2"] = _parse_all(data.get("f2", []), table)
    ic = data.get("initial_condition")
    extras = {k: v for k, v in data.items() if k not in _MODEL_KEYS}
    return DaeModel(
        table=table,
        differential_states=dstates,
        algebraic_states=astates,
        parameters=psyms,
        outputs=_parse_all(outputs, table),
        initial_condition=None if ic is None else tuple(float(v) for v in ic),
        name=data.get("name", "model"),
        extras=extras,
        **kw,
    )


def model_to_dict(m: DaeModel) -> dict:
    out = {
        "name": m.name,
        "states_differential": [s.name for s in m.differential_states],
        "states_algebraic": [s.name for s in m.algebraic_states],
        "parameters": {s.name: v for s, v in m.parameters.items()},
    }
    time = [s.name for s in m.table.base_symbols() if s.kind == "time"]
    if time:
        out["time"] = time[0]
    if m.is_semi_explicit:
        out["f1"] = [ex.to_string(e) for e in m.f1]
        out["f2"] = [ex.to_string(e) for e in m.f2]
    else:
        out["F"] = [ex.to_string(e) for e in m.F]
    out["outputs"] = [ex.to_string(e) for e in m.outputs]
    if m.initial_condition is not None:
        out["initial_condition"] = list(m.initial_condition)
    for k, v in m.extras.items():
        out.setdefault(k, v)
    return out


def load_model(source) -> DaeModel:
    """Load a model from a path, a JSON string or an already-decoded dict."""
    if isinstance(source, Mapping):
        return model_from_dict(source)
    if isinstance(source, Path) or (isinstance(source, str) and not source.lstrip().startswith("{")):
        text = Path(source).read_text()
    else:
        text = source
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelError(f"invalid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ModelError("model JSON must be an object")
    return model_from_dict(data)


def save_model(m: DaeModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(m), indent=2) + "\n")
