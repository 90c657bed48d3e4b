"""Windowed optimal semicouplings, their translation average, and cost curves.

For a target window ``hB_r`` the plan ``Q_{hB_r}`` is the optimal source
semicoupling from the whole Lebesgue source onto the atoms in the window.  The
source is truncated to the window grown by a margin; the margin doubles until
a dual certificate shows that no cell outside could improve the plan, so the
truncated solve equals the untruncated one.

Averaging the restrictions of ``Q_{hB_r}`` to the atoms of one unit cell
``gB_0`` over all ``h`` in ``g Lambda_r`` gives the mixed plan used to build
equivariant semicouplings.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction
from statistics import median
from typing import Callable, Iterable

import numpy as np

from .domain import Box, CostSpec, LatticePoint, Window, as_box, as_lattice_point, window_cells
from .randmeas import (DEFAULT_QUANTUM, SceneSpec, choose_quantum, discretize_lebesgue,
                       sample_target)
from .solver import (DEFAULT_COST_SCALE, InfeasibleError, TransportPlan, cemetery_potentials,
                     integer_objective, solve_semicoupling_source)

MAX_MARGIN = 256


def margin_certificate(plan: TransportPlan) -> bool:
    """True when no source cell outside the solved grid can lower the cost.

    A cell centre outside the grid lies at distance at least ``gap_j`` from
    atom ``j``, the smallest per-axis distance from the atom to the first
    row of outside centres.  The plan stays optimal on the infinite grid if
    every minimal atom potential is at most ``rint(theta(gap_j) * scale)``.
    """
    tgt = plan.target
    if tgt.n == 0 or plan.n_entries == 0:
        return True
    src = plan.source
    half = 0.5 / src.k
    lo = np.asarray(src.box.lower, dtype=float) - half
    hi = np.asarray(src.box.upper, dtype=float) + half
    gap = np.minimum(tgt.positions - lo[None, :], hi[None, :] - tgt.positions).min(axis=1)
    if plan.spec.geometry == "torus":
        raise ValueError("window margins are defined for Euclidean geometry only")
    bound = np.rint(plan.spec.theta(np.maximum(gap, 0.0)) * float(plan.scale)).astype(np.int64)
    return bool(np.all(cemetery_potentials(plan) <= bound))


@dataclass
class WindowSolver:
    """Cached per-window solves for one scene realisation.

    Plans are keyed by the target box.  On a periodic scene boxes are reduced
    modulo the period and translated back, so each distinct problem is solved
    once.
    """

    scene: SceneSpec
    spec: CostSpec = field(default_factory=CostSpec)
    k: int = 16
    K: int | None = None
    margin: int = 1
    scale: int = DEFAULT_COST_SCALE
    cache: dict = field(default_factory=dict)
    solves: int = 0

    def __post_init__(self) -> None:
        if self.K is None:
            self.K = choose_quantum(self.k, self.scene.d, self.scene.level,
                                    self.scene.weights_for_quantum())

    def _canonical(self, box: Box) -> tuple[Box, LatticePoint]:
        P = self.scene.period
        if P is None:
            return box, LatticePoint.origin(box.d)
        shift = LatticePoint(tuple((a // P) * P for a in box.lower))
        return box.translate(-shift), shift

    def region(self, region) -> TransportPlan:
        box = as_box(region)
        canon, shift = self._canonical(box)
        key = (self.scene.seed, canon.lower, canon.shape, self.k)
        if key not in self.cache:
            self.cache[key] = self._solve(canon)
        plan = self.cache[key]
        return plan if shift == LatticePoint.origin(box.d) else plan.translate(shift)

    def window(self, h, r: int) -> TransportPlan:
        return self.region(Window(as_lattice_point(h), r))

    def _solve(self, box: Box) -> TransportPlan:
        tgt = sample_target(self.scene, box, self.K)
        margin = self.margin
        while True:
            src = discretize_lebesgue(box.expand(margin), self.k, self.scene.level, self.K)
            try:
                plan = solve_semicoupling_source(src, tgt, self.spec, scale=self.scale)
                self.solves += 1
                ok = margin_certificate(plan)
            except InfeasibleError:
                ok = False
                plan = None
            if ok:
                plan.meta["margin"] = margin
                plan.meta["target_box"] = box
                return plan
            if margin >= MAX_MARGIN:
                raise InfeasibleError(f"no margin up to {MAX_MARGIN} certifies the window {box}")
            margin *= 2


def solve_window(scene: SceneSpec, h, r: int, spec: CostSpec | None = None, k: int = 16,
                 K: int | None = None) -> TransportPlan:
    """Optimal semicoupling of the Lebesgue source onto the atoms of ``hB_r``."""
    return WindowSolver(scene, spec or CostSpec(), k, K).window(h, r)


def cell_cost(plan: TransportPlan, cell, scale: int | None = None) -> int:
    """Exact integer cost of the part of ``plan`` delivered to atoms in ``cell + B_0``."""
    mask = Box.unit(cell).contains(plan.target.positions)
    return integer_objective(plan.restrict_targets(mask), scale or DEFAULT_COST_SCALE)


@dataclass
class MixedPlan:
    """Uniform average over ``h`` in ``g Lambda_r`` of ``Q_{hB_r}`` restricted to ``gB_0``."""

    g: LatticePoint
    r: int
    components: list[tuple[LatticePoint, TransportPlan]]

    @property
    def weight(self) -> Fraction:
        return Fraction(1, len(self.components))

    def atom_masses(self) -> dict[tuple, int]:
        """Summed (unnormalised) quanta each atom of ``gB_0`` receives over components."""
        out: dict[tuple, int] = {}
        for _, plan in self.components:
            got = plan.target_marginal()
            for j in np.flatnonzero(got > 0):
                key = tuple(plan.target.positions[j].tolist())
                out[key] = out.get(key, 0) + int(got[j])
        return out

    def marginal_exact(self, target_masses: dict[tuple, int]) -> bool:
        """Second marginal equals the atoms of ``gB_0`` exactly (in quanta)."""
        n = len(self.components)
        got = self.atom_masses()
        want = {k: n * v for k, v in target_masses.items() if v > 0}
        return got == want

    def restricted_cost_exact(self, scale: int = DEFAULT_COST_SCALE) -> Fraction:
        total = sum(integer_objective(p, scale) for _, p in self.components)
        K = self.components[0][1].K if self.components else 1
        return Fraction(total, len(self.components) * scale * K) if self.components else Fraction(0)

    def restricted_cost(self) -> float:
        if not self.components:
            return 0.0
        return math.fsum(p.cost() for _, p in self.components) / len(self.components)

    def flux_from(self, cell) -> Fraction:
        """Mass (in mass units) sent from source cells in ``cell + B_0`` into ``gB_0``."""
        box = Box.unit(cell)
        total = 0
        K = 1
        for _, plan in self.components:
            K = plan.K
            inside = box.contains(plan.source.centers()[plan.src_idx])
            total += int(plan.mass[inside].sum())
        n = max(1, len(self.components))
        return Fraction(total, n * K)


def mix(solver: WindowSolver, g, r: int) -> MixedPlan:
    """Mixed plan for target cell ``g`` from the windows ``hB_r``, ``h`` in ``g Lambda_r``."""
    g = as_lattice_point(g)
    unit = Box.unit(g)
    comps = []
    for h in window_cells(Window(g, r)):
        plan = solver.window(h, r)
        comps.append((h, plan.restrict_targets(unit.contains(plan.target.positions))))
    return MixedPlan(g, r, comps)


@dataclass
class ExchangeCheck:
    """Both sides of the exchange identity in exact integer cost units."""

    mixed_side: int
    window_side: int
    n_terms: int

    @property
    def holds(self) -> bool:
        return self.mixed_side == self.window_side

    @property
    def relative_gap(self) -> float:
        if self.window_side == 0:
            return 0.0 if self.mixed_side == 0 else math.inf
        return abs(self.mixed_side - self.window_side) / self.window_side


def exchange_identity(solver: WindowSolver, g, r: int, shifts: Iterable | None = None,
                      scale: int = DEFAULT_COST_SCALE) -> ExchangeCheck:
    """Compare ``|Lambda_r| * cost(mixed plan at g)`` with ``Cost(Q_{gB_r})``.

    The two sides agree in expectation for a stationary scene.  Passing the
    full set of translations of a periodic scene as ``shifts`` sums both sides
    over the orbit, where the agreement is exact.
    """
    g = as_lattice_point(g)
    shifts = [LatticePoint.origin(g.d)] if shifts is None else [as_lattice_point(t) for t in shifts]
    lhs = 0
    rhs = 0
    for t in shifts:
        gt = g + t
        for h in window_cells(Window(gt, r)):
            lhs += cell_cost(solver.window(h, r), gt.coords, scale)
        rhs += integer_objective(solver.window(gt, r), scale)
    return ExchangeCheck(lhs, rhs, len(shifts))


def period_shifts(d: int, period: int) -> list[LatticePoint]:
    return [LatticePoint(c) for c in np.ndindex(*(period,) * d)]


@dataclass
class CostCurveRow:
    r: int
    n_windows: int
    cost_per_vol: float
    stddev: float
    n_seeds: int


@dataclass
class CostCurve:
    rows: list[CostCurveRow]

    def __post_init__(self) -> None:
        self.rows = sorted(self.rows, key=lambda row: row.r)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["r", "n_windows", "cost_per_vol", "stddev", "n_seeds"])
            for row in self.rows:
                w.writerow([row.r, row.n_windows, repr(row.cost_per_vol), repr(row.stddev), row.n_seeds])


def seed_list(scene: SceneSpec, n_seeds: int) -> list[int]:
    return [scene.seed + i for i in range(int(n_seeds))]


def mean_cost_per_volume(scene: SceneSpec, r: int, n_seeds: int, spec: CostSpec | None = None,
                         k: int = 16, K: int | None = None,
                         runner: Callable | None = None) -> CostCurveRow:
    """Average of ``Cost(Q_{B_r}) / vol(B_r)`` over seeds ``scene.seed + i``."""
    if n_seeds < 1:
        raise ValueError("n_seeds must be >= 1")
    spec = spec or CostSpec()
    w = Window(LatticePoint.origin(scene.d), r)

    def one(seed: int) -> float:
        return WindowSolver(scene.with_seed(seed), spec, k, K).window(w.origin, r).cost() / w.volume

    seeds = seed_list(scene, n_seeds)
    vals = list(runner(one, seeds)) if runner else [one(s) for s in seeds]
    mean = math.fsum(vals) / len(vals)
    sd = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
    return CostCurveRow(int(r), len(vals), mean, sd, len(vals))


def cost_curve(scene: SceneSpec, radii: Iterable[int], n_seeds: int, spec: CostSpec | None = None,
               k: int = 16, K: int | None = None, runner: Callable | None = None) -> CostCurve:
    return CostCurve([mean_cost_per_volume(scene, r, n_seeds, spec, k, K, runner) for r in radii])


@dataclass
class SuperadditivityCheck:
    union_cost: int
    part_costs: list[int]

    @property
    def holds(self) -> bool:
        return self.union_cost >= sum(self.part_costs)


def superadditivity(solver: WindowSolver, box: Box, parts: int = 2,
                    scale: int = DEFAULT_COST_SCALE) -> SuperadditivityCheck:
    """Window cost of ``box`` against the sum over its ``parts**d`` tiles, exact."""
    union = integer_objective(solver.region(box), scale)
    pieces = [integer_objective(solver.region(b), scale) for b in box.split(parts)]
    return SuperadditivityCheck(union, pieces)


@dataclass
class DensityProfile:
    """Transported fraction per source cell, keyed by global grid index.

    ``rho = transported / (denominator * cell_mass)`` exactly.
    """

    k: int
    index: np.ndarray
    transported: np.ndarray
    cell_mass: np.ndarray
    denominator: int = 1

    def rho(self) -> np.ndarray:
        out = np.zeros(self.transported.shape[0])
        pos = self.cell_mass > 0
        out[pos] = self.transported[pos] / (self.denominator * self.cell_mass[pos].astype(float))
        return out

    def as_dict(self) -> dict[tuple, Fraction]:
        return {tuple(i): Fraction(int(t), self.denominator * int(c))
                for i, t, c in zip(self.index.tolist(), self.transported, self.cell_mass) if c > 0}

    def total(self) -> Fraction:
        return Fraction(int(self.transported.sum()), self.denominator)


def _global_index(plan: TransportPlan) -> np.ndarray:
    src = plan.source
    return src.cell_index() + np.asarray(src.box.lower, dtype=np.int64)[None, :] * src.k


def density_profile(plan) -> DensityProfile:
    """Per-cell transported fraction of a plan or of a mixed plan."""
    if isinstance(plan, MixedPlan):
        acc: dict[tuple, list[int]] = {}
        n = len(plan.components)
        k = plan.components[0][1].source.k if n else 1
        for _, p in plan.components:
            idx = _global_index(p)
            got = p.source_marginal()
            for i in np.flatnonzero(got > 0):
                key = tuple(idx[i].tolist())
                slot = acc.setdefault(key, [0, int(p.source.flat_masses[i])])
                slot[0] += int(got[i])
        keys = sorted(acc)
        index = np.array(keys, dtype=np.int64).reshape(-1, plan.g.d)
        return DensityProfile(k, index, np.array([acc[q][0] for q in keys], dtype=np.int64),
                              np.array([acc[q][1] for q in keys], dtype=np.int64), max(1, n))
    return DensityProfile(plan.source.k, _global_index(plan), plan.source_marginal(),
                          plan.source.flat_masses.copy(), 1)


@dataclass
class MonotonicityCheck:
    violating_cells: list[tuple]
    split_cells: set
    n_atoms: int

    @property
    def holds(self) -> bool:
        return (len(self.violating_cells) <= max(0, self.n_atoms - 1)
                and all(c in self.split_cells for c in self.violating_cells))


def density_monotonicity(small: TransportPlan, large: TransportPlan) -> MonotonicityCheck:
    """Cells where the larger target window transports less than the smaller one."""
    a = density_profile(small).as_dict()
    b = density_profile(large).as_dict()
    bad = sorted(key for key, v in a.items() if b.get(key, Fraction(0)) < v)
    split = set()
    for plan in (small, large):
        idx = _global_index(plan)
        split.update(tuple(idx[i].tolist()) for i in plan.split_cells())
    return MonotonicityCheck(bad, split, small.target.n + large.target.n)


def _pre_image(plan: TransportPlan, g) -> dict[tuple, int]:
    mask = Box.unit(g).contains(plan.target.positions)
    idx = _global_index(plan)
    out: dict[tuple, int] = {}
    for s, t, q in zip(plan.src_idx, plan.tgt_idx, plan.mass):
        if mask[t]:
            key = (tuple(idx[s].tolist()), tuple(plan.target.positions[t].tolist()))
            out[key] = out.get(key, 0) + int(q)
    return out


def plan_drift(p1: TransportPlan, p2: TransportPlan, g) -> float:
    """Share of the mass sent into ``gB_0`` whose source cell changes between plans.

    Both plans deliver the same atoms of ``gB_0`` in full, so the mass that
    plan 1 moves from a cell into an atom but plan 2 does not equals the
    converse amount; the result lies in ``[0, 1]``.
    """
    a = _pre_image(p1, g)
    b = _pre_image(p2, g)
    total = sum(a.values())
    if total == 0:
        return 0.0
    moved = sum(max(0, v - b.get(key, 0)) for key, v in a.items())
    return moved / total


def map_drift(solver: WindowSolver, g, r1: int, r2: int) -> float:
    """Drift of the transport map into ``gB_0`` between window radii ``r1`` and ``r2``."""
    g = as_lattice_point(g)
    if r1 == r2:
        return 0.0
    return plan_drift(solver.window(g, r1), solver.window(g, r2), g.coords)


@dataclass
class DriftRow:
    g: tuple
    r1: int
    r2: int
    drift: float


def write_drift_csv(rows: list[DriftRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["g", "r1", "r2", "drift_mass_fraction"])
        for row in rows:
            w.writerow([" ".join(str(c) for c in row.g), row.r1, row.r2, repr(row.drift)])


def drift_summary(values: list[float]) -> dict:
    return {"median": median(values) if values else 0.0,
            "zero_fraction": sum(v == 0 for v in values) / len(values) if values else 1.0}


def flux_balance(solver: WindowSolver, g, r: int, reach: int) -> tuple[Fraction, Fraction]:
    """Outgoing and incoming mass of cell ``g`` under the mixed plans.

    Outgoing: mass leaving source cells in ``gB_0`` towards the cells within
    l-infinity distance ``reach``, each taken from that cell's mixed plan.
    Incoming: mass arriving in ``gB_0`` under its own mixed plan.  Averaged
    over a stationary ensemble the two agree (mass transport principle).
    """
    g = as_lattice_point(g)
    incoming = Fraction(0)
    mixed_g = mix(solver, g, r)
    for _, p in mixed_g.components:
        incoming += Fraction(int(p.mass.sum()), p.K)
    incoming /= len(mixed_g.components)
    outgoing = Fraction(0)
    near = Box(tuple(x - reach for x in g.coords), (2 * reach + 1,) * g.d)
    for h in near.cells():
        outgoing += mix(solver, tuple(h), r).flux_from(g.coords)
    return outgoing, incoming


def default_quantum(scene: SceneSpec, k: int) -> int:
    return choose_quantum(k, scene.d, scene.level, scene.weights_for_quantum(), DEFAULT_QUANTUM)
