"""Stacked derivative arrays and the partitioned Jacobians built from them."""

from __future__ import annotations

import threading
import weakref
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import expr as ex
from .expr import Expr, Symbol
from .model import AugmentedModel, DaeModel

__all__ = [
    "DerivativeStack", "JacobianBlocks", "build_stack",
    "observability_blocks", "identifiability_blocks", "dump",
]


class _Levels:
    """Per-model cache of derivative levels of F and h."""

    def __init__(self, model):
        self.lock = threading.Lock()
        self.F = [tuple(model.residuals())]
        self.H = [tuple(model.outputs)]
        self.zero_rate = frozenset(model.parameters) | frozenset(model.free_parameters)
        self.memo: dict = {}
        self.stacks: dict = {}
        self.next = model.table.next
        # pin theta' (and higher) of promoted parameters to zero
        self.F[0] = tuple(self._pin(e, model) for e in self.F[0])

    @staticmethod
    def _pin(e, model):
        theta = set(model.free_parameters)
        if not theta:
            return e
        repl = {s: ex.ZERO for s in ex.free_symbols(e) if s.kind == "derivative" and s.base in theta}
        return ex.substitute(e, repl) if repl else e

    def extend(self, rows: list, upto: int):
        while len(rows) <= upto:
            rows.append(tuple(ex.diff_total(e, self.next, self.zero_rate, self.memo) for e in rows[-1]))


_CACHE: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()
_CACHE_LOCK = threading.Lock()


def _levels(model) -> _Levels:
    with _CACHE_LOCK:
        lv = _CACHE.get(model)
        if lv is None:
            lv = _Levels(model)
            _CACHE[model] = lv
    return lv


@dataclass(frozen=True, eq=False)
class DerivativeStack:
    """Symbolic ``Fbar`` (levels 0..mu) and ``Hbar`` (levels 0..nu)."""

    model: DaeModel | AugmentedModel
    Fbar: tuple[Expr, ...]
    Hbar: tuple[Expr, ...]
    mu: int
    nu: int

    @property
    def sigma(self) -> int:
        return max(self.mu + 1, self.nu)

    @property
    def states(self) -> tuple[Symbol, ...]:
        return self.model.states

    @property
    def n(self) -> int:
        return len(self.model.states)

    @property
    def theta(self) -> tuple[Symbol, ...]:
        return tuple(self.model.free_parameters)

    def level(self, k: int) -> tuple[Expr, ...]:
        rows = len(self.Fbar) // (self.mu + 1)
        return self.Fbar[k * rows:(k + 1) * rows]

    def z_symbols(self, start: int = 0) -> list[Symbol]:
        tab = self.model.table
        return [tab.derivative(s, k) for k in range(start, self.sigma + 1) for s in self.states]

    def _cache(self):
        return self.__dict__.setdefault("_blocks", {})


def build_stack(m: DaeModel | AugmentedModel, mu: int, nu: int) -> DerivativeStack:
    """Differentiate the residuals ``mu`` times and the outputs ``nu`` times.

    Derivatives of promoted parameters are replaced by zero.  Levels are
    cached per model, so raising the order only differentiates the new level.
    """
    if mu < 0 or nu < 0:
        raise ValueError("orders must be nonnegative")
    lv = _levels(m)
    with lv.lock:
        st = lv.stacks.get((mu, nu))
        if st is None:
            lv.extend(lv.F, mu)
            lv.extend(lv.H, nu)
            F = tuple(e for level in lv.F[: mu + 1] for e in level)
            H = tuple(e for level in lv.H[: nu + 1] for e in level)
            st = lv.stacks[mu, nu] = DerivativeStack(m, F, H, mu, nu)
    return st


@dataclass(frozen=True, eq=False)
class JacobianBlocks:
    """Symbolic Jacobian of ``(Fbar, Hbar)`` split into left/right columns.

    ``entries[i][j]`` is the partial derivative of row ``i`` with respect to
    column symbol ``j``; the first ``n_left`` columns form the left block and
    the first ``n_top`` rows the top block.
    """

    kind: str
    entries: tuple[tuple[Expr, ...], ...]
    left: tuple[Symbol, ...]
    right: tuple[Symbol, ...]
    n_top: int
    sigma: int
    n: int
    constants: Mapping[Symbol, float] = field(default_factory=dict)

    @property
    def columns(self) -> tuple[Symbol, ...]:
        return self.left + self.right

    @property
    def shape(self) -> tuple[int, int]:
        return (len(self.entries), len(self.left) + len(self.right))

    @property
    def dims(self) -> dict:
        return {
            "rows_top": self.n_top,
            "rows_bottom": len(self.entries) - self.n_top,
            "cols_left": len(self.left),
            "cols_right": len(self.right),
        }

    def _slice(self, rows, cols):
        return tuple(tuple(r[c] for c in cols) for r in self.entries[rows])

    @property
    def top_left(self):
        return self._slice(slice(0, self.n_top), range(len(self.left)))

    @property
    def top_right(self):
        return self._slice(slice(0, self.n_top), range(len(self.left), self.shape[1]))

    @property
    def bottom_left(self):
        return self._slice(slice(self.n_top, None), range(len(self.left)))

    @property
    def bottom_right(self):
        return self._slice(slice(self.n_top, None), range(len(self.left), self.shape[1]))

    def _fn(self):
        fn = self.__dict__.get("_compiled")
        if fn is None:
            flat = [e for row in self.entries for e in row]
            needed = set()
            for e in flat:
                needed |= ex.free_symbols(e)
            cols = set(self.columns)
            args = list(self.columns) + sorted(needed - cols - set(self.constants), key=lambda s: s.name)
            fn = ex.compile_exprs(flat, args, self.constants)
            self.__dict__["_compiled"] = fn
        return fn

    def evaluate(self, values: Mapping[Symbol, float]) -> np.ndarray:
        """Numeric matrix at ``values`` (symbol -> number)."""
        fn = self._fn()
        try:
            args = [values[s] for s in fn.symbols]
        except KeyError as exc:
            raise ex.EvaluationError(f"unbound symbol {exc.args[0].name!r}") from None
        rows, cols = self.shape
        if rows * cols == 0:
            return np.zeros((rows, cols))
        return fn(args).reshape(rows, cols)


def _jacobian(rows: Sequence[Expr], cols: Sequence[Symbol]):
    out = [[None] * len(cols) for _ in rows]
    for j, s in enumerate(cols):
        memo: dict = {}
        for i, e in enumerate(rows):
            out[i][j] = ex.diff_partial(e, s, memo)
    return tuple(tuple(r) for r in out)


def observability_blocks(s: DerivativeStack, params: Mapping | None = None) -> JacobianBlocks:
    """Jacobian of the stack with respect to ``x`` (left) and ``w`` (right)."""
    if isinstance(s.model, AugmentedModel):
        raise ValueError("observability blocks need an unaugmented model")
    cache = s._cache()
    key = ("obs", _pkey(params))
    if key not in cache:
        left = tuple(s.states)
        right = tuple(s.z_symbols(1))
        cache[key] = JacobianBlocks(
            "observability", _jacobian(s.Fbar + s.Hbar, left + right), left, right,
            len(s.Fbar), s.sigma, s.n, s.model.known_values(params),
        )
    return cache[key]


def identifiability_blocks(
    s: DerivativeStack, theta: Sequence[Symbol] | None = None, params: Mapping | None = None
) -> JacobianBlocks:
    """Jacobian of the stack with respect to ``theta`` (left) and ``z`` (right)."""
    model_theta = tuple(s.model.free_parameters)
    theta = model_theta if theta is None else tuple(theta)
    if theta != model_theta:
        raise ValueError("stack was not built over the model augmented with this theta")
    cache = s._cache()
    key = ("ident", _pkey(params))
    if key not in cache:
        left = theta
        right = tuple(s.z_symbols(0))
        cache[key] = JacobianBlocks(
            "identifiability", _jacobian(s.Fbar + s.Hbar, left + right), left, right,
            len(s.Fbar), s.sigma, s.n, s.model.known_values(params),
        )
    return cache[key]


def _pkey(params):
    if not params:
        return ()
    return tuple(sorted(((k if isinstance(k, str) else k.name), float(v)) for k, v in params.items()))


def dump(s: DerivativeStack) -> str:
    """Readable listing of the stacked residuals and outputs."""
    lines = [f"# mu={s.mu} nu={s.nu} sigma={s.sigma}"]
    per = len(s.Fbar) // (s.mu + 1)
    for i, e in enumerate(s.Fbar):
        lines.append(f"F[{i // per}][{i % per}] = {ex.to_string(e)}")
    q = len(s.Hbar) // (s.nu + 1) if s.Hbar else 0
    for i, e in enumerate(s.Hbar):
        lines.append(f"H[{i // q}][{i % q}] = {ex.to_string(e)}")
    return "\n".join(lines)
