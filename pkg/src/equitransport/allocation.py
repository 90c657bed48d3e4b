"""Allocation cells of transport plans, geometric audits, and SVG rendering.

A cell is the set of source grid cells sent to one atom.  Grid cells whose
mass is shared between several atoms (or partly left behind) are kept apart
as split cells; the audits treat them as belonging to every atom they feed.
"""
from __future__ import annotations

import colorsys
import csv
from dataclasses import dataclass, field

import numpy as np

from .domain import CostSpec
from .randmeas import DiscreteDensity, PointConfiguration, stream_rng
from .solver import CEMETERY, TransportPlan

UNOWNED = -1
SPLIT = -2


@dataclass
class CellMap:
    """Rasterised allocation cells.

    ``owner`` holds, per source grid cell, the atom receiving all of its mass,
    ``UNOWNED`` if nothing is transported, or ``SPLIT`` if the mass is shared.
    ``split`` maps a split grid cell to its ``(atom, quanta)`` shares.
    """

    source: DiscreteDensity
    target: PointConfiguration
    owner: np.ndarray
    split: dict[int, list[tuple[int, int]]] = field(default_factory=dict)
    spec: CostSpec = field(default_factory=CostSpec)

    @property
    def n_atoms(self) -> int:
        return self.target.n

    def volumes(self) -> np.ndarray:
        """Quanta allocated to each atom."""
        out = np.zeros(self.n_atoms, dtype=np.int64)
        whole = self.owner >= 0
        np.add.at(out, self.owner[whole], self.source.flat_masses[whole])
        for shares in self.split.values():
            for j, q in shares:
                if j >= 0:
                    out[j] += q
        return out

    def cell_counts(self) -> np.ndarray:
        return np.bincount(self.owner[self.owner >= 0], minlength=self.n_atoms)

    def split_atoms(self) -> set[int]:
        return {j for shares in self.split.values() for j, _ in shares if j >= 0}

    def members(self, j: int) -> np.ndarray:
        """Grid cells wholly owned by atom ``j``."""
        return np.flatnonzero(self.owner == j)

    def membership_grid(self) -> list[set[int]]:
        """Atoms touching each grid cell (owner or split share)."""
        out = [set() if o < 0 else {int(o)} for o in self.owner]
        for i, shares in self.split.items():
            out[i].update(j for j, _ in shares if j >= 0)
        return out

    def translate(self, g) -> "CellMap":
        return CellMap(self.source.translate(g), self.target.translate(g), self.owner.copy(),
                       dict(self.split), self.spec)

    def write_csv(self, path) -> None:
        counts = self.cell_counts()
        vols = self.volumes()
        split = self.split_atoms()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["tgt_id", "cell_count", "volume_quanta", "split_flag"])
            for j in range(self.n_atoms):
                w.writerow([j, int(counts[j]), int(vols[j]), int(j in split)])


def extract_cells(plan: TransportPlan) -> CellMap:
    """Group the plan's entries by atom, separating shared grid cells."""
    n = plan.source.n_cells
    owner = np.full(n, UNOWNED, dtype=np.int64)
    per_cell = np.bincount(plan.src_idx, minlength=n)
    left = plan.leftover()
    split: dict[int, list[tuple[int, int]]] = {}
    for s, t, q in zip(plan.src_idx, plan.tgt_idx, plan.mass):
        s = int(s)
        if per_cell[s] == 1 and left[s] == 0:
            owner[s] = t
        else:
            owner[s] = SPLIT
            split.setdefault(s, []).append((int(t), int(q)))
    for s, shares in split.items():
        if left[s] > 0:
            shares.append((CEMETERY, int(left[s])))
    return CellMap(plan.source, plan.target, owner, split, plan.spec)


def _grid_lookup(cells: CellMap, points: np.ndarray) -> np.ndarray:
    """Grid index (C order) of each point, ``-1`` outside the grid.

    On the torus points are wrapped into the grid first.
    """
    src = cells.source
    pts = np.asarray(points, dtype=float)
    lower = np.asarray(src.box.lower, dtype=float)
    if cells.spec.geometry == "torus":
        side = float(cells.spec.torus_side)
        pts = lower + np.mod(pts - lower, side)
    idx = np.floor((pts - lower) * src.k).astype(np.int64)
    shape = np.asarray(src.grid_shape)
    inside = np.all((idx >= 0) & (idx < shape), axis=1)
    flat = np.ravel_multi_index(tuple(np.clip(idx, 0, shape - 1).T), src.grid_shape)
    return np.where(inside, flat, -1)


def _neighbourhood(cells: CellMap) -> np.ndarray:
    """Offsets of the 3^d l-infinity neighbourhood in grid units."""
    d = cells.source.d
    return np.array(list(np.ndindex(*(3,) * d)), dtype=np.int64) - 1


def _member_with_slack(cells: CellMap, j: int, points: np.ndarray,
                       membership: list[set[int]]) -> np.ndarray:
    """Whether each point lies within one grid cell of a cell touching atom ``j``."""
    h = 1.0 / cells.source.k
    ok = np.zeros(points.shape[0], dtype=bool)
    for off in _neighbourhood(cells):
        flat = _grid_lookup(cells, points + off[None, :] * h)
        for i, f in enumerate(flat):
            if not ok[i] and f >= 0 and j in membership[f]:
                ok[i] = True
    return ok


@dataclass
class ChordReport:
    violating_chords: int
    total_chords: int
    violating_atoms: list[int]


def convexity_audit(cells: CellMap, n_chords: int = 50, seed: int = 0) -> ChordReport:
    """Midpoints of random chords between owned grid points must stay in the cell.

    Endpoints are uniform points inside two wholly owned grid cells of the
    same atom; a chord fails when no grid cell within one cell of its
    midpoint touches that atom.
    """
    if cells.n_atoms == 0 or not np.any(cells.owner >= 0):
        raise ValueError("cell map has no owned cells")
    rng = stream_rng(seed, "chords")
    centers = cells.source.centers()
    h = 1.0 / cells.source.k
    membership = cells.membership_grid()
    bad = total = 0
    bad_atoms = []
    for j in range(cells.n_atoms):
        own = cells.members(j)
        if own.shape[0] < 2:
            continue
        a = own[rng.integers(0, own.shape[0], n_chords)]
        b = own[rng.integers(0, own.shape[0], n_chords)]
        pa = centers[a] + (rng.random((n_chords, cells.source.d)) - 0.5) * h
        pb = centers[b] + (rng.random((n_chords, cells.source.d)) - 0.5) * h
        ok = _member_with_slack(cells, j, 0.5 * (pa + pb), membership)
        total += n_chords
        nb = int(np.sum(~ok))
        bad += nb
        if nb:
            bad_atoms.append(j)
    return ChordReport(bad, total, bad_atoms)


@dataclass
class RayReport:
    violating_rays: int
    total_rays: int
    violating_atoms: list[int]
    flagged_atoms: list[int]


def _wrapped_delta(cells: CellMap, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    delta = b - a
    if cells.spec.geometry == "torus":
        side = float(cells.spec.torus_side)
        delta = delta - side * np.rint(delta / side)
    return delta


def starlike_audit(cells: CellMap, n_rays: int = 50, seed: int = 0) -> RayReport:
    """Segments from owned grid points to the atom must stay inside the cell.

    The segment is walked in steps of half a grid cell and every step needs a
    grid cell touching the atom within one cell of slack.  On the torus the
    shortest wrapped segment is used; atoms whose cell reaches farther than a
    quarter of the side (diameter above half the side) are flagged and their
    failures reported separately.
    """
    if cells.source.d < 2:
        raise ValueError("the starlike audit needs dimension >= 2")
    if cells.n_atoms == 0 or not np.any(cells.owner >= 0):
        raise ValueError("cell map has no owned cells")
    rng = stream_rng(seed, "rays")
    centers = cells.source.centers()
    h = 1.0 / cells.source.k
    membership = cells.membership_grid()
    bad = total = 0
    bad_atoms, flagged = [], []
    for j in range(cells.n_atoms):
        own = cells.members(j)
        if own.shape[0] == 0:
            continue
        xi = cells.target.positions[j]
        reach = np.sqrt((_wrapped_delta(cells, xi[None, :], centers[own]) ** 2).sum(axis=1)).max()
        is_flagged = cells.spec.geometry == "torus" and 2 * reach > 0.5 * cells.spec.torus_side
        pick = own[rng.integers(0, own.shape[0], n_rays)]
        fails = 0
        for z in centers[pick]:
            delta = _wrapped_delta(cells, z[None, :], xi[None, :])[0]
            steps = max(1, int(np.ceil(np.linalg.norm(delta) / (0.5 * h))))
            ts = np.linspace(0.0, 1.0, steps + 1)
            pts = z[None, :] + ts[:, None] * delta[None, :]
            if not np.all(_member_with_slack(cells, j, pts, membership)):
                fails += 1
        total += n_rays
        if is_flagged:
            if fails:
                flagged.append(j)
            continue
        bad += fails
        if fails:
            bad_atoms.append(j)
    return RayReport(bad, total, bad_atoms, flagged)


def voronoi_reference(atoms: PointConfiguration, grid: DiscreteDensity,
                      spec: CostSpec | None = None) -> CellMap:
    """Nearest-atom assignment of every grid cell centre, lowest index on ties."""
    spec = spec or CostSpec()
    if atoms.n == 0:
        owner = np.full(grid.n_cells, UNOWNED, dtype=np.int64)
    else:
        dist = CostSpec(p=2.0, geometry=spec.geometry, torus_side=spec.torus_side).pairwise(
            grid.centers(), atoms.positions)
        owner = np.argmin(dist, axis=1).astype(np.int64)
        owner[grid.flat_masses == 0] = UNOWNED
    return CellMap(grid, atoms, owner, {}, spec)


def _shares(cells: CellMap, i: int) -> dict[int, int]:
    o = int(cells.owner[i])
    if o >= 0:
        return {o: int(cells.source.flat_masses[i])}
    if o == SPLIT:
        return {j: q for j, q in cells.split[i] if j >= 0}
    return {}


def symmetric_difference(a: CellMap, b: CellMap) -> int:
    """Quanta assigned to different atoms by two maps on the same grid."""
    if a.source.grid_shape != b.source.grid_shape or a.source.box != b.source.box:
        raise ValueError("cell maps live on different grids")
    diff = 0
    differs = np.flatnonzero((a.owner != b.owner) | (a.owner == SPLIT) | (b.owner == SPLIT))
    for i in differs:
        sa, sb = _shares(a, int(i)), _shares(b, int(i))
        keys = set(sa) | set(sb)
        more = sum(max(sa.get(j, 0) - sb.get(j, 0), 0) for j in keys)
        less = sum(max(sb.get(j, 0) - sa.get(j, 0), 0) for j in keys)
        diff += max(more, less)
    return diff


def _palette(j: int) -> str:
    hue = (j * 0.618033988749895) % 1.0
    r, g, b = colorsys.hls_to_rgb(hue, 0.72, 0.55)
    return "#{:02x}{:02x}{:02x}".format(int(round(r * 255)), int(round(g * 255)), int(round(b * 255)))


def render_svg(cells: CellMap, path, style: dict | None = None) -> None:
    """Write the cells as runs of grid pixels plus the atoms as dots.

    ``style`` keys: ``size`` (pixels of the longer side), ``dot`` (radius in
    pixels of a unit-weight atom), ``split_fill``.
    """
    if cells.source.d != 2:
        raise ValueError("SVG rendering needs d = 2")
    style = {"size": 600, "dot": 3.0, "split_fill": "#9a9a9a", **(style or {})}
    src = cells.source
    nx, ny = src.grid_shape
    px = float(style["size"]) / max(nx, ny)
    width, height = nx * px, ny * px
    lower = np.asarray(src.box.lower, dtype=float)
    owner = cells.owner.reshape(nx, ny)
    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width:.2f}" '
        f'height="{height:.2f}" viewBox="0 0 {width:.2f} {height:.2f}">',
    ]
    groups: dict[int, list[str]] = {}
    for iy in range(ny):
        y = height - (iy + 1) * px
        ix = 0
        while ix < nx:
            o = int(owner[ix, iy])
            run = ix
            while run < nx and int(owner[run, iy]) == o:
                run += 1
            if o != UNOWNED:
                groups.setdefault(o, []).append(
                    f'<rect x="{ix * px:.2f}" y="{y:.2f}" width="{(run - ix) * px:.2f}" height="{px:.2f}"/>')
            ix = run
    for o in sorted(groups):
        fill = style["split_fill"] if o == SPLIT else _palette(o)
        label = "split" if o == SPLIT else f"cell-{o}"
        lines.append(f'<g id="{label}" fill="{fill}" stroke="none">')
        lines.extend(groups[o])
        lines.append("</g>")
    if cells.n_atoms:
        lines.append('<g id="atoms" fill="#000000">')
        scale = px * src.k
        for j, (pos, w) in enumerate(zip(cells.target.positions, cells.target.weights)):
            cx = (pos[0] - lower[0]) * scale
            cy = height - (pos[1] - lower[1]) * scale
            r = float(style["dot"]) * float(np.sqrt(w))
            lines.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="{r:.2f}"/>')
        lines.append("</g>")
    lines.append(f'<rect x="0" y="0" width="{width:.2f}" height="{height:.2f}" '
                 'fill="none" stroke="#000000" stroke-width="1"/>')
    lines.append("</svg>")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
