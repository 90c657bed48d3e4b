"""Exact quantised transport between a grid density and weighted atoms.

Masses are integers (quanta of ``1/K``) and costs are fixed-point integers
``rint(c * scale)``, so the min-cost-flow optimum is exact and every marginal
check is an integer comparison.  Three problem kinds share one core:

``coupling``
    both marginals matched exactly.
``semicoupling_source``
    every atom is filled, source cells may keep mass.  Solved as a coupling
    against an extra zero-cost sink (the cemetery) holding the spare mass.
``semicoupling_target``
    every source cell is emptied, atoms are capacities.  Solved with an extra
    zero-cost source feeding the unused capacity.

Among equal-cost optima the solver returns the one minimising the secondary
objective ``sum (i+1)(j+1) f_ij`` over real arcs, which favours low source
indices paired with low atom indices.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from . import _simplex
from .domain import CostSpec, as_box, as_lattice_point
from .randmeas import DiscreteDensity, PointConfiguration, stream_rng

CEMETERY = -1
DEFAULT_COST_SCALE = 2**32
KINDS = ("coupling", "semicoupling_source", "semicoupling_target")


class InfeasibleError(ValueError):
    """Marginals admit no plan of the requested kind."""


class OracleTooLarge(ValueError):
    """Instance exceeds the brute-force enumeration budget."""


@dataclass
class TransportPlan:
    """Sparse plan ``(source cell, atom, mass in quanta)``.

    Entries never include the cemetery or the spare-capacity source; untouched
    source mass is recovered from the source marginal.  ``objective`` is the
    exact integer cost ``sum mass * rint(c * scale)`` when the plan came from
    the solver.
    """

    source: DiscreteDensity
    target: PointConfiguration
    spec: CostSpec
    src_idx: np.ndarray
    tgt_idx: np.ndarray
    mass: np.ndarray
    kind: str = "coupling"
    scale: int = DEFAULT_COST_SCALE
    objective: int | None = None
    flags: tuple[str, ...] = field(default_factory=tuple)
    n_basic: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.src_idx = np.asarray(self.src_idx, dtype=np.int64).reshape(-1)
        self.tgt_idx = np.asarray(self.tgt_idx, dtype=np.int64).reshape(-1)
        self.mass = np.asarray(self.mass, dtype=np.int64).reshape(-1)

    @property
    def K(self) -> int:
        return self.source.K

    @property
    def n_entries(self) -> int:
        return int(self.mass.shape[0])

    def source_marginal(self) -> np.ndarray:
        return _int_bincount(self.src_idx, self.mass, self.source.n_cells)

    def target_marginal(self) -> np.ndarray:
        return _int_bincount(self.tgt_idx, self.mass, self.target.n)

    def leftover(self) -> np.ndarray:
        """Source quanta not transported (the cemetery mass of each cell)."""
        return self.source.flat_masses - self.source_marginal()

    def density(self) -> np.ndarray:
        """Transported fraction of every source cell (0 where the cell is empty)."""
        cell = self.source.flat_masses.astype(float)
        out = np.zeros_like(cell)
        pos = cell > 0
        out[pos] = self.source_marginal()[pos] / cell[pos]
        return out

    def cost(self) -> float:
        return plan_cost(self)

    def exact_cost(self) -> Fraction:
        """Fixed-point optimum as an exact rational (mass units times cost)."""
        obj = self.objective if self.objective is not None else integer_objective(self)
        return Fraction(obj, self.scale * self.K)

    def translate(self, g) -> "TransportPlan":
        g = as_lattice_point(g)
        return replace(self, source=self.source.translate(g), target=self.target.translate(g))

    def restrict_targets(self, mask: np.ndarray) -> "TransportPlan":
        """Entries whose atom is selected by ``mask`` (objective dropped)."""
        keep = np.asarray(mask, dtype=bool)[self.tgt_idx]
        return replace(self, src_idx=self.src_idx[keep], tgt_idx=self.tgt_idx[keep],
                       mass=self.mass[keep], objective=None, n_basic=None)

    def split_cells(self) -> np.ndarray:
        """Source cells whose mass is shared between several destinations.

        The cemetery counts as a destination, so a cell that is only partly
        transported is split as well.
        """
        counts = np.bincount(self.src_idx, minlength=self.source.n_cells)
        partial = (self.source_marginal() > 0) & (self.leftover() > 0)
        return np.flatnonzero((counts > 1) | partial)

    def assignment(self) -> np.ndarray:
        """Atom receiving the largest share of each cell, lowest index on ties.

        Cells whose untransported mass exceeds every share map to ``CEMETERY``.
        """
        out = np.full(self.source.n_cells, CEMETERY, dtype=np.int64)
        best = self.leftover().copy()
        for e in np.lexsort((self.tgt_idx, self.src_idx)):
            s = self.src_idx[e]
            if self.mass[e] > best[s] or (self.mass[e] == best[s] and out[s] == CEMETERY):
                best[s] = self.mass[e]
                out[s] = self.tgt_idx[e]
        return out


def _int_bincount(idx: np.ndarray, w: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros(n, dtype=np.int64)
    np.add.at(out, idx, w)
    return out


def integer_costs(x: np.ndarray, y: np.ndarray, spec: CostSpec, scale: int) -> np.ndarray:
    """Fixed-point cost matrix ``rint(c * scale)``."""
    return np.rint(spec.pairwise(x, y) * float(scale)).astype(np.int64)


def choose_scale(max_cost: float, n_nodes: int, scale: int | None = None) -> int:
    """Largest power-of-two scale not above the request that keeps int64 headroom."""
    s = DEFAULT_COST_SCALE if scale is None else int(scale)
    while s > 1 and (math.ceil(max_cost * s) + 1) * (n_nodes + 1) >= _simplex.ART_LIMIT:
        s //= 2
    return s


def plan_cost(plan: TransportPlan, spec: CostSpec | None = None) -> float:
    """``sum mass * c(cell centre, atom)`` with an order-independent exact sum."""
    if plan.n_entries == 0:
        return 0.0
    spec = plan.spec if spec is None else spec
    x = plan.source.centers()[plan.src_idx]
    y = plan.target.positions[plan.tgt_idx]
    c = spec.rowwise(x, y)
    w = plan.mass / float(plan.K)
    return math.fsum((w * c).tolist())


def integer_objective(plan: TransportPlan, scale: int | None = None) -> int:
    """Exact ``sum mass * rint(c * scale)``; additive over disjoint sub-plans."""
    if plan.n_entries == 0:
        return 0
    scale = plan.scale if scale is None else int(scale)
    x = plan.source.centers()[plan.src_idx]
    y = plan.target.positions[plan.tgt_idx]
    c = np.rint(plan.spec.rowwise(x, y) * float(scale)).astype(np.int64)
    return sum(int(a) * int(b) for a, b in zip(c, plan.mass))


def _ingest(src: DiscreteDensity, tgt: PointConfiguration) -> PointConfiguration:
    if tgt.d != src.d and tgt.n > 0:
        raise ValueError(f"dimension mismatch: source d={src.d}, target d={tgt.d}")
    tgt = tgt.with_quantum(src.K).merged()
    return tgt


def _flags(src: DiscreteDensity, spec: CostSpec) -> tuple[str, ...]:
    if src.d == 1 and spec.is_power and spec.p == 1:
        return ("nonunique_possible",)
    return ()


#: Source grids with more active cells than this are first solved on the grid
#: coarsened by two, whose atom potentials seed the fine solve.
MULTISCALE_CELLS = 8192


def _real_costs(src: DiscreteDensity, tgt: PointConfiguration, spec: CostSpec,
                active: np.ndarray) -> np.ndarray:
    n, m = active.shape[0], tgt.n
    return spec.pairwise(src.centers()[active], tgt.positions) if m and n else np.zeros((n, m))


def _matrix(src: DiscreteDensity, tgt: PointConfiguration, kind: str, sc: int,
            cemetery_mass: int, active: np.ndarray, cost_f: np.ndarray):
    """Integer cost matrix with the cemetery column or spare-capacity row appended."""
    supply = src.flat_masses[active]
    demand = tgt.masses.copy()
    n = active.shape[0]
    C = np.rint(cost_f * float(sc)).astype(np.int64)
    if kind == "semicoupling_source" or cemetery_mass:
        slack = int(supply.sum()) - int(demand.sum()) if kind == "semicoupling_source" \
            else int(cemetery_mass)
        C = np.concatenate([C, np.zeros((n, 1), np.int64)], axis=1)
        demand = np.concatenate([demand, [slack]])
    if kind == "semicoupling_target":
        spare = int(demand.sum()) + int(cemetery_mass) - int(supply.sum())
        C = np.concatenate([C, np.zeros((1, C.shape[1]), np.int64)], axis=0)
        supply = np.concatenate([supply, [spare]])
    return C, supply, demand


def _coarsen(src: DiscreteDensity) -> DiscreteDensity | None:
    """The same density on the grid with half the resolution, if ``k`` is even."""
    if src.k % 2:
        return None
    shape = []
    for s in src.grid_shape:
        shape += [s // 2, 2]
    masses = src.masses.reshape(shape).sum(axis=tuple(range(1, 2 * src.d, 2)))
    return DiscreteDensity(src.box, src.k // 2, src.K, masses)


def _column_hint(src: DiscreteDensity, tgt: PointConfiguration, spec: CostSpec, kind: str,
                 sc: int, cemetery_mass: int) -> np.ndarray | None:
    """Atom potentials of the coarsened problem, or ``None`` for small grids."""
    if int(np.count_nonzero(src.flat_masses)) <= MULTISCALE_CELLS or tgt.n == 0:
        return None
    coarse = _coarsen(src)
    if coarse is None:
        return None
    active = np.flatnonzero(coarse.flat_masses > 0)
    C, supply, demand = _matrix(coarse, tgt, kind, sc, cemetery_mass, active,
                                _real_costs(coarse, tgt, spec, active))
    hint = _column_hint(coarse, tgt, spec, kind, sc, cemetery_mass)
    *_, pi_d, status = _simplex.solve_transportation(C, supply, demand, col_potentials=hint)
    if status != _simplex.STATUS_OPTIMAL:
        return None
    return pi_d


def _solve(src: DiscreteDensity, tgt: PointConfiguration, spec: CostSpec, kind: str,
           scale: int | None = None, cemetery_mass: int = 0,
           tie_break: bool = True) -> TransportPlan:
    if kind not in KINDS:
        raise ValueError(f"unknown plan kind {kind!r}")
    tgt = _ingest(src, tgt)
    supply_all = src.flat_masses
    active = np.flatnonzero(supply_all > 0)
    supply = supply_all[active]
    demand = tgt.masses.copy()
    n, m = active.shape[0], demand.shape[0]
    s_tot, d_tot = int(supply.sum()), int(demand.sum()) + int(cemetery_mass)
    flags = _flags(src, spec)

    if kind == "coupling" and s_tot != d_tot:
        raise InfeasibleError(f"mass mismatch: source {s_tot} quanta, target {d_tot} quanta")
    if kind == "semicoupling_source" and s_tot < d_tot:
        raise InfeasibleError(f"insufficient source mass: {s_tot} < {d_tot} quanta")
    if kind == "semicoupling_target" and d_tot < s_tot:
        raise InfeasibleError(f"insufficient target capacity: {d_tot} < {s_tot} quanta")
    if cemetery_mass and kind != "coupling":
        raise ValueError("cemetery_mass applies to couplings only")

    cost_f = _real_costs(src, tgt, spec, active)
    sc = choose_scale(float(cost_f.max()) if cost_f.size else 0.0, n + m + 2, scale)
    empty = TransportPlan(src, tgt, spec, [], [], [], kind, sc, 0, flags, 0)
    if s_tot == 0 and d_tot == 0:
        return empty
    if kind == "semicoupling_source" and int(demand.sum()) == 0:
        return empty
    if kind == "semicoupling_target" and s_tot == 0:
        return empty

    C, supply, demand = _matrix(src, tgt, kind, sc, cemetery_mass, active, cost_f)
    del cost_f
    n_real, m_real = n, m
    n, m = C.shape
    hint = _column_hint(src, tgt, spec, kind, sc, cemetery_mass)
    rows, cols, flow, pi_s, pi_d, status = _simplex.solve_transportation(
        C, supply, demand, col_potentials=hint)
    if status != _simplex.STATUS_OPTIMAL:
        raise InfeasibleError(f"transport solver reported status {status}")

    if tie_break:
        t_rows, t_cols = _simplex.tight_arcs(C, pi_s, pi_d)
        n_comp, _ = connected_components(
            coo_matrix((np.ones(t_rows.shape[0]), (t_rows, n + t_cols)), shape=(n + m, n + m)),
            directed=False)
        if t_rows.shape[0] == n + m - n_comp:
            flags = flags + ("unique_certified",)
        else:
            real = (t_rows < n_real) & (t_cols < m_real)
            c2 = np.where(real, (t_rows + 1) * (t_cols + 1), 0).astype(np.int64)
            f2, _, st2, _ = _simplex.solve_flow(
                n + m, t_rows, n + t_cols, c2, np.concatenate([supply, -demand]))
            if st2 != _simplex.STATUS_OPTIMAL:
                raise InfeasibleError(f"tie-break pass reported status {st2}")
            pos = f2 > 0
            rows, cols, flow = t_rows[pos], t_cols[pos], f2[pos]

    n_basic = int(rows.shape[0])
    real = (rows < n_real) & (cols < m_real)
    rows, cols, flow = rows[real], cols[real], flow[real]
    objective = sum(int(a) * int(b) for a, b in zip(C[rows, cols], flow))
    order = np.lexsort((cols, rows))
    return TransportPlan(src, tgt, spec, active[rows[order]], cols[order], flow[order],
                         kind, sc, objective, flags, n_basic)


def solve_coupling(src: DiscreteDensity, tgt: PointConfiguration, spec: CostSpec,
                   scale: int | None = None, cemetery_mass: int = 0,
                   tie_break: bool = True) -> TransportPlan:
    """Optimal coupling of the grid density and the atoms.

    ``cemetery_mass`` adds a zero-cost sink of that many quanta, which turns a
    semicoupling into the equivalent balanced coupling.
    """
    if tgt.total == 0 and src.total > 0 and not cemetery_mass:
        raise InfeasibleError("empty target with nonempty source")
    return _solve(src, tgt, spec, "coupling", scale, cemetery_mass, tie_break)


def solve_semicoupling_source(src: DiscreteDensity, tgt: PointConfiguration, spec: CostSpec,
                              scale: int | None = None, tie_break: bool = True) -> TransportPlan:
    """Optimal plan filling every atom from a source with spare mass."""
    return _solve(src, tgt, spec, "semicoupling_source", scale, 0, tie_break)


def solve_semicoupling_target(src: DiscreteDensity, tgt: PointConfiguration, spec: CostSpec,
                              scale: int | None = None, tie_break: bool = True) -> TransportPlan:
    """Optimal plan emptying the source into atoms used as capacities."""
    return _solve(src, tgt, spec, "semicoupling_target", scale, 0, tie_break)


def solve(kind: str, src, tgt, spec, **kw) -> TransportPlan:
    return _solve(src, tgt, spec, kind, **kw)


def cemetery_potentials(plan: TransportPlan) -> np.ndarray:
    """Smallest optimal atom potentials of a source semicoupling, in cost units.

    With the cemetery pinned at potential 0, an optimal dual assigns each atom
    ``j`` a value ``b_j`` such that ``c_ij - b_j >= a_i`` for every source and
    ``a_i <= 0``.  The minimal choice is ``b_j = -D(j)``, where ``D(j)`` is the
    shortest path from ``j`` to the cemetery in the residual graph compressed
    onto the atoms.  A source cell outside the solved region with
    ``c(x, atom_j) >= b_j`` for all ``j`` cannot improve the plan.
    """
    if plan.kind != "semicoupling_source":
        raise ValueError("cemetery potentials need a source semicoupling")
    m = plan.target.n
    if m == 0 or plan.n_entries == 0:
        return np.zeros(m, dtype=np.int64)
    src = plan.source
    left = plan.leftover()
    used = np.unique(np.concatenate([plan.src_idx, np.flatnonzero((left > 0) & (src.flat_masses > 0))]))
    C = integer_costs(src.centers()[used], plan.target.positions, plan.spec, plan.scale)
    pos_of = np.full(src.n_cells, -1, dtype=np.int64)
    pos_of[used] = np.arange(used.shape[0])
    cem = m
    inf = np.iinfo(np.int64).max // 4
    W = np.full((m + 1, m + 1), inf, dtype=np.int64)
    for k in range(m):
        rows = pos_of[plan.src_idx[plan.tgt_idx == k]]
        if rows.shape[0] == 0:
            continue
        sub = C[rows]
        W[k, :m] = (sub - sub[:, k:k + 1]).min(axis=0)
        W[k, cem] = -int(sub[:, k].max())
    free = pos_of[np.flatnonzero((left > 0) & (src.flat_masses > 0))]
    if free.shape[0]:
        W[cem, :m] = C[free].min(axis=0)
    dist = np.full(m + 1, inf, dtype=np.int64)
    dist[cem] = 0
    for _ in range(m + 1):
        cand = np.where(W < inf, W + dist[None, :], inf).min(axis=1)
        new = np.minimum(dist, cand)
        if np.array_equal(new, dist):
            break
        dist = new
    return -dist[:m]


@dataclass
class CycleReport:
    n_cycles: int
    violations: int
    worst_slack: float
    worst_gap: float


def verify_cyclical_monotonicity(plan: TransportPlan, spec: CostSpec | None = None,
                                 k_max: int = 5, n_cycles: int = 1000, tol: float = 1e-9,
                                 seed: int = 0) -> CycleReport:
    """Sample cycles of support points and test the rotation inequality.

    For support pairs ``(x_1, y_1), ..., (x_k, y_k)`` the gap is
    ``sum c(x_i, y_{i+1}) - sum c(x_i, y_i)``; a gap below ``-tol * k`` is a
    violation.  ``worst_slack`` scales the smallest gap by the smallest mass on
    the cycle, i.e. the cost saved by rotating that much mass.
    """
    spec = plan.spec if spec is None else spec
    n = plan.n_entries
    if k_max < 2 or n < 2:
        return CycleReport(0, 0, 0.0, 0.0)
    rng = stream_rng(seed, "cycles")
    x = plan.source.centers()[plan.src_idx]
    y = plan.target.positions[plan.tgt_idx]
    w = plan.mass / float(plan.K)
    violations = 0
    worst_gap = math.inf
    worst_slack = math.inf
    for _ in range(int(n_cycles)):
        k = int(rng.integers(2, min(k_max, n) + 1))
        pick = rng.choice(n, size=k, replace=False)
        xs, ys = x[pick], y[pick]
        gap = math.fsum(spec.rowwise(xs, np.roll(ys, -1, axis=0)).tolist()) - \
            math.fsum(spec.rowwise(xs, ys).tolist())
        slack = gap * float(w[pick].min())
        if gap < -tol * k:
            violations += 1
        worst_gap = min(worst_gap, gap)
        worst_slack = min(worst_slack, slack)
    return CycleReport(int(n_cycles), violations, worst_slack, worst_gap)


def efficiency_audit(plan: TransportPlan, region, spec: CostSpec | None = None) -> float:
    """Ratio of the optimal cost of the sub-transport into ``region`` to its actual cost.

    The sub-transport keeps the source marginal ``q(., region)`` and the atom
    masses it delivers; the ratio is computed from exact integer objectives.
    Both costs zero gives 1.
    """
    spec = plan.spec if spec is None else spec
    box = as_box(region)
    inside = box.contains(plan.target.positions)
    sub = plan.restrict_targets(inside)
    if sub.n_entries == 0:
        return 1.0
    sub = replace(sub, spec=spec)
    actual = integer_objective(sub)
    src = replace(plan.source, masses=sub.source_marginal().reshape(plan.source.grid_shape))
    delivered = sub.target_marginal()
    tgt = replace(plan.target, masses=np.where(inside, delivered, 0))
    best = _solve(src, tgt, spec, "coupling", scale=plan.scale, tie_break=False).objective
    if actual == 0:
        return 1.0
    return float(Fraction(best, actual))


def brute_force_oracle(src: DiscreteDensity, tgt: PointConfiguration, spec: CostSpec,
                       mode: str = "coupling", scale: int | None = None,
                       max_states: int = 10**7) -> tuple[float, TransportPlan]:
    """Exact optimum by enumerating every integer allocation of every cell.

    Each source cell distributes its quanta over the atoms (and, in the
    semicoupling modes, over the cemetery); feasibility of the remaining
    demand prunes the search.  Only meant for tiny instances.
    """
    kind = {"coupling": "coupling", "source": "semicoupling_source",
            "target": "semicoupling_target"}.get(mode, mode)
    if kind not in KINDS:
        raise ValueError(f"unknown oracle mode {mode!r}")
    tgt = tgt.with_quantum(src.K)
    if src.n_cells > 10 or tgt.n > 4:
        raise OracleTooLarge(f"oracle accepts <= 10 cells and <= 4 atoms, got {src.n_cells}, {tgt.n}")
    supply = [int(v) for v in src.flat_masses]
    demand = [int(v) for v in tgt.masses]
    n, m = len(supply), len(demand)
    s_tot, d_tot = sum(supply), sum(demand)
    if kind == "coupling" and s_tot != d_tot:
        raise InfeasibleError("mass mismatch")
    if kind == "semicoupling_source" and s_tot < d_tot:
        raise InfeasibleError("insufficient source mass")
    if kind == "semicoupling_target" and d_tot < s_tot:
        raise InfeasibleError("insufficient target capacity")
    cost_f = spec.pairwise(src.centers(), tgt.positions) if m else np.zeros((n, 0))
    sc = choose_scale(float(cost_f.max()) if cost_f.size else 0.0, n + m + 2, scale)
    C = [[int(v) for v in row] for row in np.rint(cost_f * float(sc)).astype(np.int64)]

    suffix = [sum(supply[i:]) for i in range(n + 1)]
    states = 0
    best = [None, None]
    alloc = [None] * n

    def splits(total, caps):
        # all vectors a with sum(a) <= total (slack goes to the cemetery) and a <= caps
        if not caps:
            yield ()
            return
        for a in range(min(total, caps[0]) + 1):
            for rest in splits(total - a, caps[1:]):
                yield (a,) + rest

    def rec(i, remaining, acc):
        nonlocal states
        states += 1
        if states > max_states:
            raise OracleTooLarge(f"more than {max_states} states")
        need = sum(remaining)
        if kind != "semicoupling_target" and need > suffix[i]:
            return
        if i == n:
            if kind == "semicoupling_target" or need == 0:
                if best[0] is None or acc < best[0]:
                    best[0] = acc
                    best[1] = list(alloc)
            return
        for a in splits(supply[i], remaining):
            sent = sum(a)
            if kind in ("coupling", "semicoupling_target") and sent != supply[i]:
                continue
            alloc[i] = a
            rec(i + 1, [r - v for r, v in zip(remaining, a)],
                acc + sum(C[i][j] * a[j] for j in range(m)))
        alloc[i] = None

    rec(0, demand, 0)
    if best[0] is None:
        raise InfeasibleError("no feasible allocation")
    entries = [(i, j, a[j]) for i, a in enumerate(best[1]) for j in range(m) if a[j] > 0]
    arr = np.array(entries, dtype=np.int64).reshape(-1, 3)
    plan = TransportPlan(src, tgt, spec, arr[:, 0], arr[:, 1], arr[:, 2], kind, sc,
                         int(best[0]), _flags(src, spec), None)
    return float(Fraction(int(best[0]), sc * src.K)), plan


@dataclass
class DualPotentials:
    """Power-cell weights ``b`` with ``Phi_j(x) = -|x - atom_j|^2 / 2 + b_j``."""

    b: np.ndarray
    iterations: int
    residual: float
    converged: bool
    assignment: np.ndarray
    source: DiscreteDensity
    target: PointConfiguration

    def cell_masses(self) -> np.ndarray:
        return _int_bincount(self.assignment, self.source.flat_masses, self.target.n)

    def cost(self, spec: CostSpec | None = None) -> float:
        spec = CostSpec(p=2.0) if spec is None else spec
        c = spec.rowwise(self.source.centers(), self.target.positions[self.assignment])
        return math.fsum((self.source.flat_masses / float(self.source.K) * c).tolist())

    def to_plan(self, spec: CostSpec | None = None) -> TransportPlan:
        spec = CostSpec(p=2.0) if spec is None else spec
        keep = self.source.flat_masses > 0
        idx = np.flatnonzero(keep)
        return TransportPlan(self.source, self.target, spec, idx, self.assignment[idx],
                             self.source.flat_masses[idx], "coupling", DEFAULT_COST_SCALE)


def power_assignment(phi: np.ndarray) -> np.ndarray:
    """Argmax over atoms of ``Phi`` per cell, lowest index on ties."""
    return np.argmax(phi, axis=1)


def semidiscrete_dual_solve(src: DiscreteDensity, tgt: PointConfiguration, p: float = 2.0,
                            tol: float | None = None, max_iter: int = 1000) -> DualPotentials:
    """Power-diagram weights matching atom masses by exact coordinate ascent.

    The dual ``sum_j b_j d_j + sum_x m_x min_j (|x - atom_j|^2/2 - b_j)`` is
    concave and piecewise linear in each ``b_j``.  One coordinate step sorts
    the thresholds at which cells switch to atom ``j``, picks the prefix whose
    mass is closest to ``d_j`` and places ``b_j`` midway inside that
    interval.  Sweeps stop when the largest cell-mass error is at most
    ``tol`` (mass units; default one cell mass) or a sweep changes nothing.
    """
    if p != 2:
        raise ValueError("the semidiscrete dual solver supports p=2 only")
    tgt = tgt.with_quantum(src.K).merged()
    if src.total != tgt.total:
        raise InfeasibleError("semidiscrete solve needs balanced masses")
    m = tgt.n
    K = float(src.K)
    cell = src.flat_masses.astype(np.int64)
    if tol is None:
        tol = float(cell.max()) / K if cell.size else 0.0
    x = src.centers()
    half_sq = 0.5 * CostSpec(p=2.0).pairwise(x, tgt.positions)
    b = np.zeros(m)
    demand = tgt.masses.astype(np.int64)

    def residual(assign):
        got = _int_bincount(assign, cell, m)
        return float(np.abs(got - demand).max()) / K if m else 0.0

    assign = power_assignment(b[None, :] - half_sq) if m else np.zeros(x.shape[0], np.int64)
    res = residual(assign)
    it = 0
    while m > 1 and res > tol and it < max_iter:
        it += 1
        changed = False
        for j in range(m):
            phi = b[None, :] - half_sq
            phi[:, j] = -np.inf
            t = half_sq[:, j] + phi.max(axis=1)
            order = np.argsort(t, kind="stable")
            ts = t[order]
            cum = np.concatenate([[0], np.cumsum(cell[order])])
            c = int(np.argmin(np.abs(cum - demand[j])))
            if c == 0:
                new = ts[0] - 1.0
            elif c == ts.shape[0]:
                new = ts[-1] + 1.0
            else:
                new = 0.5 * (ts[c - 1] + ts[c])
            if new != b[j]:
                changed = True
                b[j] = new
        assign = power_assignment(b[None, :] - half_sq)
        res = residual(assign)
        if not changed:
            break
    return DualPotentials(b, it, res, res <= tol, assign, src, tgt)


def write_plan_csv(plan: TransportPlan, path, include_cemetery: bool = True) -> None:
    """Rows ``src_x..,tgt_id,tgt_x..,mass_quanta``; cemetery rows use ``tgt_id=-1``."""
    d = plan.source.d
    axes = ["x", "y", "z"][:d]
    centers = plan.source.centers()
    rows = [(int(s), int(t), int(q)) for s, t, q in zip(plan.src_idx, plan.tgt_idx, plan.mass)]
    if include_cemetery and plan.kind == "semicoupling_source":
        left = plan.leftover()
        rows.extend((int(s), CEMETERY, int(left[s])) for s in np.flatnonzero(left > 0))
    rows.sort()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"src_{a}" for a in axes] + ["tgt_id"] + [f"tgt_{a}" for a in axes] + ["mass_quanta"])
        for s, t, q in rows:
            tx = ["" for _ in axes] if t == CEMETERY else [repr(float(v)) for v in plan.target.positions[t]]
            w.writerow([repr(float(v)) for v in centers[s]] + [t] + tx + [q])

