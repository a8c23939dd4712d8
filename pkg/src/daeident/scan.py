"""Classify many points (trajectory samples or a state grid) with one rank test."""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import AugmentedModel, DaeModel, ModelError, solve_algebraic
from .ranktest import EvalPoint, RankReport, check_identifiability, check_observability
from .sim import consistent_derivatives

__all__ = ["ScanPoint", "ScanResult", "parse_grid", "grid_points", "classify", "run_scan"]


@dataclass(frozen=True)
class ScanPoint:
    index: int
    state: tuple[float, ...]
    time: float | None
    verdict: str
    deficit: int
    ill_conditioned: bool
    mu: int


@dataclass
class ScanResult:
    points: list[ScanPoint]
    state_names: list[str]
    source: str
    scenario: str = ""
    theta: list[str] = field(default_factory=list)
    sensor: str = ""

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for p in self.points:
            out[p.verdict] = out.get(p.verdict, 0) + 1
        return out

    def fraction(self, verdict: str = "satisfied") -> float:
        return self.counts().get(verdict, 0) / len(self.points) if self.points else 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["index", "t", *self.state_names, "verdict", "deficit", "ill_conditioned", "mu"])
        for p in self.points:
            w.writerow([
                p.index, "" if p.time is None else repr(p.time), *(repr(v) for v in p.state),
                p.verdict, p.deficit, int(p.ill_conditioned), p.mu,
            ])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "scenario": self.scenario,
            "theta": self.theta,
            "sensor": self.sensor,
            "source": self.source,
            "points": len(self.points),
            "counts": self.counts(),
        }


def parse_grid(spec: str) -> list[tuple[str, float, float, int]]:
    """Parse ``name:lo:hi:count[,name:lo:hi:count]``."""
    if not spec or not spec.strip():
        raise ValueError("empty grid specification")
    axes = []
    for part in spec.split(","):
        bits = part.strip().split(":")
        if len(bits) != 4:
            raise ValueError(f"grid axis {part!r} must look like name:lo:hi:count")
        name, lo, hi, cnt = bits
        lo, hi, cnt = float(lo), float(hi), int(cnt)
        if cnt < 1 or not hi >= lo:
            raise ValueError(f"grid axis {part!r} has an empty range")
        axes.append((name, lo, hi, cnt))
    return axes


def grid_points(m: DaeModel, axes, order: int, theta=(), guess=None) -> list[EvalPoint]:
    """Consistent points on a grid over the differential states.

    The axes must name every differential state; algebraic states are solved
    for at each node, and nodes where that fails are skipped.
    """
    names = [s.name for s in m.differential_states]
    if sorted(a[0] for a in axes) != sorted(names):
        raise ModelError(f"grid axes must be exactly the differential states {names}")
    lookup = {a[0]: np.linspace(a[1], a[2], a[3]) for a in axes}
    mesh = np.meshgrid(*(lookup[nm] for nm in names), indexing="ij")
    flat = np.stack([g.ravel() for g in mesh], axis=1)
    g2 = np.zeros(m.n2) if guess is None else np.asarray(guess, dtype=float)
    pts = []
    for x1 in flat:
        try:
            x2 = solve_algebraic(m, x1, g2)
            x = np.concatenate([x1, x2])
            ders = [x] + consistent_derivatives(m, x, order)
            pts.append(EvalPoint(tuple(ders), np.asarray(theta, dtype=float)))
        except (ArithmeticError, ValueError):
            continue
    return pts


def classify(model: DaeModel | AugmentedModel, pt: EvalPoint, max_order=None) -> RankReport:
    if isinstance(model, AugmentedModel):
        return check_identifiability(model, pt, max_order)
    return check_observability(model, pt, max_order)


def run_scan(
    model: DaeModel | AugmentedModel,
    points: Sequence[EvalPoint],
    jobs: int = 1,
    max_order: int | None = None,
    source: str = "trajectory",
    scenario: str = "",
    sensor: str = "",
) -> ScanResult:
    """Rank-test every point; results keep the input order whatever ``jobs`` is."""

    def one(item):
        i, pt = item
        r = classify(model, pt, max_order)
        return ScanPoint(i, tuple(float(v) for v in pt.x), pt.time if source == "trajectory" else None,
                         r.verdict, r.deficit, r.ill_conditioned, r.mu)

    items = list(enumerate(points))
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            out = list(pool.map(one, items))
    else:
        out = [one(it) for it in items]
    theta = [s.name for s in getattr(model, "theta", ())]
    return ScanResult(out, [s.name for s in model.states], source, scenario, theta, sensor)
