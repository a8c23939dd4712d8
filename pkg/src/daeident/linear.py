"""Closed-form tests for linear descriptor systems ``E x' = A x, y = C x``."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg as sla

from . import expr as ex
from .expr import Symbol
from .model import DaeModel, ModelError, SymbolTable
from .ranktest import (
    NOT_SATISFIED, SATISFIED, TOL_ENV, EvalPoint, MissingDerivativesError, RankReport, _svals,
    resolve_tolerance,
)

__all__ = [
    "LinearDae", "IndeterminateError", "COND_LIMIT",
    "build_block_O", "block_observable", "pbh_r_observable", "kalman_observable",
    "build_I11", "concise_identifiability_matrix", "linear_identifiability",
    "fullstate_shortcut", "block_preconditions", "consistent_derivatives",
    "trajectory", "mask_from_spec", "load_linear",
]

COND_LIMIT = 1e12


class IndeterminateError(ArithmeticError):
    """Raised when a pencil ``lambda E - A`` is singular for every ``lambda``."""


def _mat(a, shape=None, name="matrix"):
    m = np.array(a, dtype=float)
    if m.ndim == 1 and shape is not None and shape[0] == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ModelError(f"{name} must be two-dimensional")
    if shape is not None and m.shape != shape:
        raise ModelError(f"{name} has shape {m.shape}, expected {shape}")
    if not np.all(np.isfinite(m)):
        raise ModelError(f"{name} has non-finite entries")
    return m


@dataclass(frozen=True, eq=False)
class LinearDae:
    """Linear descriptor system with an optional semi-explicit partition.

    ``theta_mask[i, j]`` marks ``A[i, j]`` as a free parameter.  Parameters
    are ordered by column-wise vectorization of ``A``.
    """

    E: np.ndarray
    A: np.ndarray
    C: np.ndarray
    partition: tuple[int, int] | None = None
    theta_mask: np.ndarray | None = None
    extras: Mapping = field(default_factory=dict)

    def __post_init__(self):
        A = _mat(self.A, name="A")
        n = A.shape[0]
        if A.shape != (n, n):
            raise ModelError("A must be square")
        E = _mat(self.E, (n, n), "E")
        C = _mat(self.C, name="C")
        if C.shape[1] != n:
            raise ModelError(f"C must have {n} columns")
        mask = np.ones((n, n), bool) if self.theta_mask is None else np.array(self.theta_mask, dtype=bool)
        if mask.shape != (n, n):
            raise ModelError("theta_mask must match the shape of A")
        part = self.partition
        if part is not None:
            part = (int(part[0]), int(part[1]))
            if part[0] + part[1] != n or min(part) < 0:
                raise ModelError("partition sizes must add up to n")
            want = np.diag(np.r_[np.ones(part[0]), np.zeros(part[1])])
            if not np.array_equal(E, want):
                raise ModelError("a partitioned system needs E = diag(I, 0)")
        for k, v in (("A", A), ("E", E), ("C", C), ("theta_mask", mask), ("partition", part)):
            if isinstance(v, np.ndarray):
                v.setflags(write=False)
            object.__setattr__(self, k, v)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def q(self) -> int:
        return self.C.shape[0]

    @property
    def p(self) -> int:
        return int(self.theta_mask.sum())

    def blocks(self):
        if self.partition is None:
            raise ModelError("system has no semi-explicit partition")
        n1 = self.partition[0]
        A = self.A
        return A[:n1, :n1], A[:n1, n1:], A[n1:, :n1], A[n1:, n1:]

    def with_mask(self, mask) -> "LinearDae":
        return LinearDae(self.E, self.A, self.C, self.partition, mask, self.extras)

    def with_C(self, C) -> "LinearDae":
        return LinearDae(self.E, self.A, C, self.partition, self.theta_mask, self.extras)

    def param_names(self) -> list[str]:
        """Names ``aij`` of the masked entries in column-wise order."""
        n = self.n
        return [_entry_name(i, j, n) for j in range(n) for i in range(n) if self.theta_mask[i, j]]

    # --- conversion ------------------------------------------------------------
    @classmethod
    def from_dict(cls, data: Mapping, base_dir: Path | None = None) -> "LinearDae":
        def matrix(key, default=None):
            v = data.get(key, default)
            if isinstance(v, str):
                return _read_csv((base_dir or Path(".")) / v)
            return v

        A = _mat(matrix("A"), name="A")
        n = A.shape[0]
        part = data.get("partition")
        E = matrix("E")
        if E is None:
            E = np.diag(np.r_[np.ones(part[0]), np.zeros(part[1])]) if part else np.eye(n)
        C = matrix("C")
        C = np.eye(n) if C is None else C
        d = cls(E, A, C, tuple(part) if part else None, None, dict(data))
        mask = data.get("theta_mask")
        if mask is not None:
            d = d.with_mask(mask_from_spec(d, mask))
        return d

    def to_dict(self) -> dict:
        out = {
            "kind": "linear",
            "E": self.E.tolist(),
            "A": self.A.tolist(),
            "C": self.C.tolist(),
            "theta_mask": self.theta_mask.astype(int).tolist(),
        }
        if self.partition is not None:
            out["partition"] = list(self.partition)
        return out

    def to_model(self, name: str = "linear", extras: Mapping | None = None) -> DaeModel:
        """Equivalent symbolic model.

        Every masked entry and every nonzero entry of ``A`` becomes a
        parameter ``aij`` with its numeric value, so structural zeros outside
        the mask are absent from the equations.
        """
        n = self.n
        table = SymbolTable()
        if self.partition is not None:
            n1 = self.partition[0]
        elif np.array_equal(self.E, np.eye(n)):
            n1 = n
        else:
            n1 = None
        xs = []
        for i in range(n):
            kind = "algebraic-state" if n1 is not None and i >= n1 else "state"
            xs.append(table.add(Symbol(f"x{i + 1}", kind)))
        params = {}
        psym = {}
        for j in range(n):
            for i in range(n):
                if self.theta_mask[i, j] or self.A[i, j] != 0.0:
                    s = table.add(Symbol(_entry_name(i, j, n), "parameter"))
                    params[s] = float(self.A[i, j])
                    psym[i, j] = s
        rows = []
        for i in range(n):
            acc = ex.ZERO
            for j in range(n):
                if (i, j) in psym:
                    acc = ex.add(acc, ex.mul(ex.sym(psym[i, j]), ex.sym(xs[j])))
            rows.append(acc)
        outputs = []
        for r in self.C:
            acc = ex.ZERO
            for j, c in enumerate(r):
                if c != 0.0:
                    acc = ex.add(acc, ex.mul(ex.const(c), ex.sym(xs[j])))
            outputs.append(acc)
        meta = dict(extras or {})
        meta["linear"] = self.to_dict()
        ic = meta.get("initial_condition")
        common = dict(
            table=table, parameters=params, outputs=tuple(outputs), name=name, extras=meta,
            initial_condition=None if ic is None else tuple(float(v) for v in ic),
        )
        if n1 is not None:
            return DaeModel(
                differential_states=tuple(xs[:n1]), algebraic_states=tuple(xs[n1:]),
                f1=tuple(rows[:n1]), f2=tuple(rows[n1:]), **common,
            )
        F = []
        for i in range(n):
            acc = rows[i]
            for j in range(n):
                if self.E[i, j] != 0.0:
                    acc = ex.sub(acc, ex.mul(ex.const(self.E[i, j]), ex.sym(table.derivative(xs[j], 1))))
            F.append(acc)
        return DaeModel(differential_states=tuple(xs), algebraic_states=(), F=tuple(F), **common)


def _entry_name(i, j, n):
    return f"a{i + 1}{j + 1}" if n < 10 else f"a{i + 1}_{j + 1}"


def _read_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = [[float(v) for v in row] for row in csv.reader(fh) if row and not row[0].startswith("#")]
    return np.array(rows, dtype=float)


def load_linear(path) -> LinearDae:
    """Read a linear system from JSON; matrix entries may name CSV files."""
    path = Path(path)
    data = json.loads(path.read_text())
    return LinearDae.from_dict(data, path.parent)


def mask_from_spec(d: LinearDae, spec) -> np.ndarray:
    """Free-entry mask from a boolean matrix, ``"all"``, ``"nonzero"``,
    or a list of block names (``A11``, ``A12``, ``A21``, ``A22``) and entry names."""
    n = d.n
    if isinstance(spec, str):
        spec = [spec]
    if len(spec) and not isinstance(spec[0], str):
        mask = np.array(spec, dtype=bool)
        if mask.shape != (n, n):
            raise ModelError("theta_mask must match the shape of A")
        return mask
    mask = np.zeros((n, n), bool)
    for item in spec:
        if item in ("all", "A"):
            mask[:] = True
        elif item == "nonzero":
            mask |= d.A != 0.0
        elif item in ("A11", "A12", "A21", "A22"):
            if d.partition is None:
                raise ModelError(f"block {item} needs a partition")
            n1 = d.partition[0]
            rs = slice(0, n1) if item[1] == "1" else slice(n1, n)
            cs = slice(0, n1) if item[2] == "1" else slice(n1, n)
            mask[rs, cs] = True
        else:
            hit = [(i, j) for i in range(n) for j in range(n) if _entry_name(i, j, n) == item]
            if not hit:
                raise ModelError(f"unknown parameter {item!r}")
            mask[hit[0]] = True
    return mask


# ---------------------------------------------------------------------------
# observability


def build_block_O(d: LinearDae, levels: int | None = None) -> np.ndarray:
    """Banded block matrix with ``[A -E]`` rows over ``C`` rows.

    ``levels`` defaults to ``n``, giving an ``n(n+q) x n(n+1)`` matrix.
    """
    n, q = d.n, d.q
    L = n if levels is None else int(levels)
    if L < 1:
        raise ValueError("levels must be at least 1")
    O = np.zeros((L * (n + q), n * (L + 1)))
    for k in range(L):
        O[k * n:(k + 1) * n, k * n:(k + 1) * n] = d.A
        O[k * n:(k + 1) * n, (k + 1) * n:(k + 2) * n] = -d.E
        r = L * n + k * q
        O[r:r + q, k * n:(k + 1) * n] = d.C
    return O


def block_observable(d: LinearDae, levels: int | None = None, tol: float | None = None) -> bool:
    """``rank(O) = n + rank`` of its right block columns."""
    O = build_block_O(d, levels)
    L = d.n if levels is None else levels
    used = resolve_tolerance(O, L, d.n, tol)
    s = _svals(O)
    r2 = int(np.sum(_svals(O[:, d.n:]) > used))
    return int(np.sum(s > used)) == d.n + r2


def _pencil_singular(E, A, rng) -> bool:
    n = A.shape[0]
    for _ in range(3):
        lam = complex(*rng.normal(size=2)) * (1.0 + np.abs(A).max())
        M = lam * E - A
        s = np.linalg.svd(M, compute_uv=False)
        if s[-1] > np.sqrt(np.finfo(float).eps) * max(s[0], 1.0):
            return False
    return True


def pbh_r_observable(d: LinearDae, seed: int = 0) -> bool:
    """Rank of ``[lambda E - A; C]`` at every finite generalized eigenvalue, cluster means and a probe.

    Ranks use the tolerance ``sqrt(eps) * ||M||_2``.  Raises
    :class:`IndeterminateError` for singular pencils.
    """
    rng = np.random.default_rng(seed)
    E = d.E.astype(complex)
    A = d.A.astype(complex)
    if _pencil_singular(d.E, d.A, rng):
        raise IndeterminateError("det(lambda E - A) vanishes identically")
    alpha, beta = sla.eig(d.A, d.E, right=False, homogeneous_eigvals=True)
    scale = 1.0 + np.abs(d.A).max() + np.abs(d.E).max()
    lams = [a / b for a, b in zip(alpha, beta) if abs(b) > 1e-12 * abs(a) and abs(a / b) < 1e12 * scale]
    probe = complex(*rng.normal(size=2)) * scale
    C = d.C.astype(complex)
    for lam in lams + _cluster_means(lams, scale) + [probe]:
        M = np.vstack([lam * E - A, C])
        s = np.linalg.svd(M, compute_uv=False)
        tol = np.sqrt(np.finfo(float).eps) * max(s[0], np.finfo(float).tiny)
        if int(np.sum(s > tol)) < d.n:
            return False
    return True


def _cluster_means(lams, scale):
    """Means of eigenvalue clusters.

    A defective eigenvalue is computed only to about ``eps^(1/k)``, while the
    mean of its ``k`` computed copies is accurate to ``eps``.
    """
    radius = np.finfo(float).eps ** 0.25 * scale
    out, used = [], set()
    for i, a in enumerate(lams):
        if i in used:
            continue
        group = [j for j in range(i, len(lams)) if j not in used and abs(lams[j] - a) <= radius]
        used.update(group)
        if len(group) > 1:
            out.append(sum(lams[j] for j in group) / len(group))
    return out


def kalman_observable(d: LinearDae, tol: float | None = None) -> bool:
    """Rank of ``[C; C A'; ...; C A'^(n-1)]`` with ``A' = E^-1 A``.

    Forming ``E^-1 A`` costs accuracy, so the default tolerance is
    ``n * cond(E) * eps * ||K||_2``.
    """
    if np.linalg.cond(d.E) > COND_LIMIT:
        raise ModelError("Kalman test needs a nonsingular E")
    Ap = np.linalg.solve(d.E, d.A)
    blocks = [d.C]
    for _ in range(d.n - 1):
        blocks.append(blocks[-1] @ Ap)
    K = np.vstack(blocks)
    s = _svals(K)
    if tol is None and not os.environ.get(TOL_ENV):
        used = d.n * np.linalg.cond(d.E) * np.finfo(float).eps * max(float(s[0]), np.finfo(float).tiny)
    else:
        used = resolve_tolerance(K, d.n, d.n, tol)
    return int(np.sum(s > used)) == d.n


# ---------------------------------------------------------------------------
# identifiability


def build_I11(d: LinearDae, derivatives: Sequence) -> np.ndarray:
    """``[x x' ... x^(mu)]^T (kron) I_n`` restricted to the masked columns."""
    Z = np.array([np.asarray(v, dtype=float).ravel() for v in derivatives])
    if Z.ndim != 2 or Z.shape[1] != d.n:
        raise ModelError(f"derivative vectors must have length {d.n}")
    full = np.kron(Z, np.eye(d.n))
    return full[:, d.theta_mask.flatten(order="F")]


def concise_identifiability_matrix(d: LinearDae, derivatives: Sequence, mu: int) -> np.ndarray:
    """Identifiability matrix for ``mu = nu`` assembled from Kronecker blocks."""
    n, q = d.n, d.q
    sigma = mu + 1
    if len(derivatives) < mu + 1:
        raise ModelError(f"need derivatives up to order {mu}")
    I11 = build_I11(d, derivatives[: mu + 1])
    D1 = np.hstack([np.eye(sigma), np.zeros((sigma, 1))])
    D2 = np.hstack([np.zeros((sigma, 1)), np.eye(sigma)])
    top = np.kron(D1, d.A) - np.kron(D2, d.E)
    bottom = np.kron(D1, d.C)
    p = I11.shape[1]
    return np.block([[I11, top], [np.zeros((sigma * q, p)), bottom]])


def consistent_derivatives(d: LinearDae, x, order: int) -> list[np.ndarray]:
    """``x, x', ..., x^(order)`` along the exact flow through ``x``.

    Uses ``x' = E^-1 A x`` for nonsingular ``E`` and the reduced flow
    ``x1' = A_c x1`` with ``x2 = -A22^-1 A21 x1`` for partitioned systems.
    Only the differential part of ``x`` is used in the partitioned case.
    """
    x = np.asarray(x, dtype=float).ravel()
    if d.partition is not None and d.partition[1] > 0:
        Ac, K = _reduction(d)
        v = x[: d.partition[0]]
        out = []
        for _ in range(order + 1):
            out.append(np.concatenate([v, K @ v]))
            v = Ac @ v
        return out
    if np.linalg.cond(d.E) > COND_LIMIT:
        raise ModelError("singular E needs a semi-explicit partition")
    Ap = np.linalg.solve(d.E, d.A)
    out = [x]
    for _ in range(order):
        out.append(Ap @ out[-1])
    return out


def _reduction(d: LinearDae):
    A11, A12, A21, A22 = d.blocks()
    if np.linalg.cond(A22) > COND_LIMIT:
        raise ModelError("A22 is singular; the system is not index 1")
    K = -np.linalg.solve(A22, A21)
    return A11 + A12 @ K, K


def trajectory(d: LinearDae, x0, times, order: int = 0):
    """Exact states (and derivatives) at ``times`` via the matrix exponential."""
    times = np.asarray(times, dtype=float)
    x0 = np.asarray(x0, dtype=float).ravel()
    if d.partition is not None and d.partition[1] > 0:
        Ac, _ = _reduction(d)
        v0 = x0[: d.partition[0]]
    else:
        Ac = np.linalg.solve(d.E, d.A)
        v0 = x0
    out = []
    for t in times:
        v = sla.expm(Ac * (t - times[0])) @ v0 if len(times) else v0
        full = v if Ac.shape[0] == d.n else np.concatenate([v, np.zeros(d.n - len(v))])
        out.append(consistent_derivatives(d, full, order))
    return out


def linear_identifiability(
    d: LinearDae, pt: EvalPoint, mu: int | None = None, tol: float | None = None
) -> RankReport:
    """Rank test on the Kronecker-form identifiability matrix.

    Without ``mu`` the order is raised from 0 until the test holds or
    ``mu = n``.  ``pt`` must carry derivatives up to ``mu + 1``.
    """
    orders = range(d.n + 1) if mu is None else [mu]
    p = d.p
    history = []
    report = None
    for k in orders:
        if pt.order < k + 1:
            raise MissingDerivativesError(f"point supplies order {pt.order}, {k + 1} required")
        M = concise_identifiability_matrix(d, pt.derivatives, k)
        sigma = k + 1
        used = resolve_tolerance(M, sigma, d.n, tol)
        s = _svals(M)
        r = int(np.sum(s > used))
        r2 = int(np.sum(_svals(M[:, p:]) > used))
        ok = p == 0 or r == p + r2
        history.append({"mu": k, "nu": k, "rank_full": r, "rank_right": r2, "required": p + r2})
        report = RankReport(
            kind="linear-identifiability",
            verdict=SATISFIED if ok else NOT_SATISFIED,
            rank_full=r, rank_right=r2, required=p + r2,
            mu=k, nu=k, sigma=sigma, tolerance=used, n=d.n, p=p,
            condition_ratio=float(s[r - 1] / used) if r else None,
            singular_values=s.tolist(), history=history,
            theta=d.param_names(), point=pt,
            stop_reason="satisfied" if ok else ("fixed-order" if mu is not None else "max-order"),
        )
        if ok:
            break
    return report


def fullstate_shortcut(d: LinearDae, pt: EvalPoint, mu: int, tol: float | None = None) -> bool:
    """``rank(I11) = p`` for full-state measurement ``C = I``."""
    if d.C.shape != (d.n, d.n) or not np.array_equal(d.C, np.eye(d.n)):
        raise ModelError("the shortcut applies only to C = I")
    I11 = build_I11(d, pt.derivatives[: mu + 1])
    used = resolve_tolerance(I11, mu + 1, d.n, tol)
    return int(np.sum(_svals(I11) > used)) == d.p


def block_preconditions(d: LinearDae) -> dict:
    """Index-1 (``A22`` well conditioned) and full rank of ``A21``."""
    if d.partition is None:
        raise ModelError("system has no semi-explicit partition")
    _, _, A21, A22 = d.blocks()
    index1 = A22.size > 0 and bool(np.linalg.cond(A22) < COND_LIMIT)
    if A21.size == 0:
        full = False
    else:
        s = _svals(A21)
        tol = max(A21.shape) * np.finfo(float).eps * max(s[0], np.finfo(float).tiny)
        full = int(np.sum(s > tol)) == min(A21.shape) and s[0] > 0
    return {"index1": bool(index1), "a21_full": bool(full)}
