"""Window-level Wasserstein costs between discrete measures on a flat torus.

The window is treated as a torus so that translation equivariance survives
the restriction to a bounded region.  Costs are exact fixed-point integers
divided by ``K * scale * volume``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from . import _simplex
from .domain import POSITION_BITS, Box, CostSpec, LatticePoint, as_box, quantize_positions
from .randmeas import (DiscreteDensity, PointConfiguration, choose_quantum, discretize_lebesgue,
                       sample_binomial, stream_rng)
from .solver import DEFAULT_COST_SCALE, choose_scale, solve_coupling


class MassImbalanceError(ValueError):
    """The two measures carry different total mass on the window."""


def torus_spec(window, p: float = 2.0) -> CostSpec:
    """Power cost ``d^p`` with distances wrapped on the window's cube."""
    box = as_box(window)
    if len(set(box.shape)) != 1:
        raise ValueError(f"torus window must be a cube, got shape {box.shape}")
    return CostSpec(p=p, geometry="torus", torus_side=box.shape[0])


def _atoms(measure) -> tuple[np.ndarray, np.ndarray, int]:
    """Support points, quanta, and quantum of a grid density or configuration."""
    if isinstance(measure, DiscreteDensity):
        keep = measure.flat_masses > 0
        return measure.centers()[keep], measure.flat_masses[keep], measure.K
    if isinstance(measure, PointConfiguration):
        keep = measure.masses > 0
        return measure.positions[keep], measure.masses[keep], measure.K
    raise TypeError(f"unsupported measure type {type(measure).__name__}")


@dataclass(frozen=True)
class WindowCost:
    """Exact optimal cost ``objective / (K * scale)`` and the window volume."""

    objective: int
    K: int
    scale: int
    volume: int

    @property
    def exact(self) -> Fraction:
        return Fraction(self.objective, self.K * self.scale * self.volume)

    @property
    def value(self) -> float:
        return float(self.exact)


def window_cost(a, b, p: float, w, scale: int = DEFAULT_COST_SCALE) -> WindowCost:
    """Optimal coupling cost between ``a`` and ``b`` on the torus of ``w``."""
    box = as_box(w)
    spec = torus_spec(box, p)
    xa, ma, Ka = _atoms(a)
    xb, mb, Kb = _atoms(b)
    K = math.lcm(Ka, Kb)
    ma = ma * (K // Ka)
    mb = mb * (K // Kb)
    if int(ma.sum()) != int(mb.sum()):
        raise MassImbalanceError(
            f"mass imbalance on window: {Fraction(int(ma.sum()), K)} vs {Fraction(int(mb.sum()), K)}")
    if ma.shape[0] == 0:
        return WindowCost(0, K, scale, box.volume)
    cost_f = spec.pairwise(xa, xb)
    sc = choose_scale(float(cost_f.max()), ma.shape[0] + mb.shape[0] + 2, scale)
    C = np.rint(cost_f * float(sc)).astype(np.int64)
    rows, cols, flow, _, _, status = _simplex.solve_transportation(C, ma, mb)
    if status != _simplex.STATUS_OPTIMAL:
        raise RuntimeError(f"transport solver reported status {status}")
    obj = sum(int(c) * int(f) for c, f in zip(C[rows, cols], flow))
    return WindowCost(obj, K, sc, box.volume)


def wasserstein_window(a, b, p: float, w, scale: int = DEFAULT_COST_SCALE) -> float:
    """Per-volume ``W_p^p`` between two measures of equal mass on the window torus."""
    return window_cost(a, b, p, w, scale).value


def _wp(cost: WindowCost, p: float) -> float:
    return cost.value ** (1.0 / p)


@dataclass
class TripleResult:
    seed: int
    wpp: dict[str, float]
    identity: bool
    symmetry: bool
    triangle_slack: float


@dataclass
class MetricReport:
    """Per-seed W_p^p estimates and axiom checks.

    ``triangle_slack`` is ``W(l, x) + W(x, m) - W(l, m)`` in W_p units for
    the triple ``(l, m, x)``.
    """

    p: float
    rows: list[TripleResult] = field(default_factory=list)

    @property
    def identity_exact(self) -> bool:
        return all(r.identity for r in self.rows)

    @property
    def symmetry_exact(self) -> bool:
        return all(r.symmetry for r in self.rows)

    @property
    def min_triangle_slack(self) -> float:
        return min((r.triangle_slack for r in self.rows), default=math.inf)

    def holds(self, tol: float = 1e-9) -> bool:
        return self.identity_exact and self.symmetry_exact and self.min_triangle_slack >= -tol

    def write_pairs_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["seed", "pair", "wpp_per_vol"])
            for r in self.rows:
                for pair in sorted(r.wpp):
                    out.writerow([r.seed, pair, repr(r.wpp[pair])])

    def write_triangle_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["seed", "triangle_slack"])
            for r in self.rows:
                out.writerow([r.seed, repr(r.triangle_slack)])


def metric_axiom_audit(triples: Callable[[int], Sequence] | Sequence[Sequence], p: float, w,
                       n_seeds: int | None = None, base_seed: int = 0) -> MetricReport:
    """Check identity, symmetry, and the triangle inequality on measure triples.

    ``triples`` is either a list of ``(l, m, x)`` triples or a factory
    ``seed -> (l, m, x)`` called for ``n_seeds`` consecutive seeds.
    """
    if callable(triples):
        if n_seeds is None:
            raise ValueError("n_seeds is required with a triple factory")
        items = [(base_seed + i, triples(base_seed + i)) for i in range(n_seeds)]
    else:
        items = [(base_seed + i, t) for i, t in enumerate(triples)]
    scale = DEFAULT_COST_SCALE
    report = MetricReport(p)
    for seed, (lam, mu, xi) in items:
        lm = window_cost(lam, mu, p, w, scale)
        ml = window_cost(mu, lam, p, w, scale)
        lx = window_cost(lam, xi, p, w, scale)
        xm = window_cost(xi, mu, p, w, scale)
        ll = window_cost(lam, lam, p, w, scale)
        slack = _wp(lx, p) + _wp(xm, p) - _wp(lm, p)
        report.rows.append(TripleResult(
            seed, {"lm": lm.value, "lx": lx.value, "xm": xm.value},
            ll.objective == 0, lm.objective == ml.objective, slack))
    return report


def random_triple_factory(w, k: int, n_per_cell: int = 1, K: int = 2**20) -> Callable[[int], tuple]:
    """Triples (Lebesgue grid, binomial, binomial) of equal mass on the window."""
    box = as_box(w)
    leb = discretize_lebesgue(box, k, n_per_cell, K)

    def make(seed: int) -> tuple:
        a = sample_binomial(box, n_per_cell, 2 * seed, K)
        b = sample_binomial(box, n_per_cell, 2 * seed + 1, K)
        return leb, a, b

    return make


def _wrap_into(box: Box, x: np.ndarray) -> np.ndarray:
    lower = np.asarray(box.lower, dtype=float)
    side = np.asarray(box.shape, dtype=float)
    return lower + np.mod(x - lower, side)


def jitter(points: PointConfiguration, eps: float, seed: int, w) -> PointConfiguration:
    """Move every atom by ``eps`` in a random direction, wrapped into the window."""
    box = as_box(w)
    if eps == 0 or points.n == 0:
        return points
    rng = stream_rng(seed, "jitter")
    u = rng.standard_normal((points.n, points.d))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    # truncating the step towards zero keeps every move at most eps long
    step = np.trunc(eps * u * 2.0**POSITION_BITS) / 2.0**POSITION_BITS
    moved = _wrap_into(box, points.positions + step)
    return PointConfiguration(moved, points.masses.copy(), points.K, points.frame)


def _matching_lebesgue(points: PointConfiguration, box: Box, k: int) -> DiscreteDensity:
    """Uniform grid density with the same total mass as ``points`` on ``box``.

    The quantum is refined when the cell mass is not a multiple of ``1/points.K``.
    """
    level = Fraction(points.total, points.K * box.volume)
    K = choose_quantum(k, box.d, level, base=points.K)
    return discretize_lebesgue(box, k, level, K)


@dataclass
class StabilityRow:
    eps: float
    wpp_per_vol: float
    move_bound: float
    eps_bound: float
    tail_mass_cost: float


def _tail_cost(lebesgue: DiscreteDensity, points: PointConfiguration, p: float, box: Box,
               center: LatticePoint, R: float) -> float:
    """Cost carried into the unit cell ``center`` from farther than ``R`` away."""
    plan = solve_coupling(lebesgue, points, torus_spec(box, p))
    if plan.n_entries == 0:
        return 0.0
    spec = plan.spec
    x = plan.source.centers()[plan.src_idx]
    y = plan.target.positions[plan.tgt_idx]
    into = np.all(np.floor(y).astype(np.int64) == np.asarray(center.coords), axis=1)
    gap = spec.displacement(x, y)
    lo = np.asarray(center.coords, dtype=float)
    # distance from x to the cell [lo, lo + 1) on the torus
    to_cell = np.maximum(0.0, spec.displacement(x, lo + 0.5) - 0.5)
    far = np.sqrt((to_cell**2).sum(axis=1)) > R
    c = np.sqrt((gap**2).sum(axis=1)) ** p
    sel = into & far
    return math.fsum((c[sel] * plan.mass[sel] / float(plan.K)).tolist())


def stability_probe(points: PointConfiguration, eps_seq: Sequence[float], p: float, w,
                    seed: int = 0, k: int = 8, R: float = 1.0) -> list[StabilityRow]:
    """W_p^p between jittered copies of ``points`` and the original.

    Each row also carries the cost of the move-each-atom coupling (an upper
    bound), the same bound written as ``mass * eps^p / vol``, and the tail
    functional: cost carried into the central unit cell from beyond distance
    ``R`` in the optimal coupling of Lebesgue to the jittered measure.
    """
    box = as_box(w)
    spec = torus_spec(box, p)
    lebesgue = _matching_lebesgue(points, box, k) if points.n else None
    center = LatticePoint(tuple(int(lo + s // 2) for lo, s in zip(box.lower, box.shape)))
    scale = DEFAULT_COST_SCALE
    rows = []
    for eps in eps_seq:
        moved = jitter(points, eps, seed, box)
        wc = window_cost(moved, points, p, box, scale)
        step = spec.rowwise(moved.positions, points.positions) if points.n else np.zeros(0)
        move = math.fsum((step * points.masses / float(points.K)).tolist()) / box.volume
        eps_b = points.total / points.K * eps**p / box.volume
        tail = _tail_cost(lebesgue, moved, p, box, center, R) if lebesgue is not None else 0.0
        rows.append(StabilityRow(float(eps), wc.value, move, eps_b, tail))
    return rows


@dataclass
class MosaicStep:
    points: PointConfiguration
    drift: float
    max_step: float


def wiener_mosaic_step(points: PointConfiguration, sigma: float, seed: int, w, k: int = 8,
                       p: float = 2.0) -> MosaicStep:
    """Gaussian move of every atom followed by a re-solve of the Lebesgue coupling.

    The drift is the fraction of source mass whose assigned atom changes,
    atoms being identified by their index across the step.
    """
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    box = as_box(w)
    spec = torus_spec(box, p)
    if sigma == 0 or points.n == 0:
        return MosaicStep(points, 0.0, 0.0)
    leb = _matching_lebesgue(points, box, k)
    points = points.with_quantum(leb.K)
    rng = stream_rng(seed, "mosaic")
    step = sigma * rng.standard_normal((points.n, points.d))
    moved = PointConfiguration(quantize_positions(_wrap_into(box, points.positions + step)),
                               points.masses.copy(), points.K, points.frame)
    if moved.merged().n != moved.n:
        raise ValueError("atoms collided after the move; identities are ambiguous")
    before = solve_coupling(leb, points, spec)
    after = solve_coupling(leb, moved, spec)
    a1, a2 = before.assignment(), after.assignment()
    m = leb.flat_masses
    drift = float(Fraction(int(m[a1 != a2].sum()), int(m.sum())))
    return MosaicStep(moved, drift, float(np.abs(step).max()))


def mosaic_run(points: PointConfiguration, sigma: float, n_steps: int, seed: int, w,
               k: int = 8, p: float = 2.0) -> list[MosaicStep]:
    """Repeated mosaic steps; step ``i`` uses the sub-seed ``seed * 2**16 + i``."""
    out = []
    cur = points
    for i in range(n_steps):
        st = wiener_mosaic_step(cur, sigma, seed * 2**16 + i, w, k, p)
        out.append(st)
        cur = st.points
    return out
