"""Lattice action of Z^d on R^d, windows, and translation-invariant costs.

Unit cells ``[h, h+1)^d`` for ``h`` in Z^d tile space.  A :class:`Window` is
the l-infinity ball of radius ``2**r`` around a lattice point and covers the
cube ``[h - 2**r, h + 2**r + 1)^d``.  A :class:`Box` is any axis-aligned union
of unit cells and is the common currency between samplers and solvers.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

_INT32_MIN = -(2**31)
_INT32_MAX = 2**31 - 1

#: Atom and cell-centre positions live on this dyadic grid so that integer
#: translations are exact in floating point.
POSITION_BITS = 24


def _as_coords(coords: Iterable[int]) -> tuple[int, ...]:
    out = tuple(int(c) for c in coords)
    if len(out) not in (1, 2, 3):
        raise ValueError(f"dimension must be 1, 2 or 3, got {len(out)}")
    for c in out:
        if not _INT32_MIN <= c <= _INT32_MAX:
            raise ValueError(f"lattice coordinate {c} does not fit in int32")
    return out


@dataclass(frozen=True, order=True)
class LatticePoint:
    """Element of Z^d, acting on R^d by translation."""

    coords: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "coords", _as_coords(self.coords))

    @classmethod
    def origin(cls, d: int) -> "LatticePoint":
        return cls((0,) * d)

    @property
    def d(self) -> int:
        return len(self.coords)

    def __add__(self, other: "LatticePoint") -> "LatticePoint":
        _check_dim(self.d, other.d)
        return LatticePoint(tuple(a + b for a, b in zip(self.coords, other.coords)))

    def __sub__(self, other: "LatticePoint") -> "LatticePoint":
        _check_dim(self.d, other.d)
        return LatticePoint(tuple(a - b for a, b in zip(self.coords, other.coords)))

    def __neg__(self) -> "LatticePoint":
        return LatticePoint(tuple(-a for a in self.coords))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.coords, dtype=np.int64)


def as_lattice_point(g) -> LatticePoint:
    if isinstance(g, LatticePoint):
        return g
    if np.isscalar(g):
        return LatticePoint((int(g),))
    return LatticePoint(tuple(int(c) for c in g))


def _check_dim(a: int, b: int) -> None:
    if a != b:
        raise ValueError(f"dimension mismatch: {a} vs {b}")


@dataclass(frozen=True)
class Box:
    """Union of unit cells ``lower + [0, shape)`` in lattice coordinates."""

    lower: tuple[int, ...]
    shape: tuple[int, ...]

    def __post_init__(self) -> None:
        lower = _as_coords(self.lower)
        shape = tuple(int(s) for s in self.shape)
        _check_dim(len(lower), len(shape))
        if any(s < 0 for s in shape):
            raise ValueError(f"negative box shape {shape}")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "shape", shape)

    @property
    def d(self) -> int:
        return len(self.lower)

    @property
    def upper(self) -> tuple[int, ...]:
        return tuple(a + s for a, s in zip(self.lower, self.shape))

    @property
    def volume(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    def cells(self) -> np.ndarray:
        """Lower corners of the unit cells, lexicographically sorted, shape (n, d)."""
        axes = [np.arange(a, a + s, dtype=np.int64) for a, s in zip(self.lower, self.shape)]
        grid = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in grid], axis=1).reshape(-1, self.d)

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Mask of points inside the half-open box."""
        pts = np.asarray(points, dtype=float).reshape(-1, self.d)
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        return np.all((pts >= lo) & (pts < hi), axis=1)

    def translate(self, g) -> "Box":
        g = as_lattice_point(g)
        _check_dim(self.d, g.d)
        return Box(tuple(a + b for a, b in zip(self.lower, g.coords)), self.shape)

    def expand(self, margin: int) -> "Box":
        """Grow the box by ``margin`` unit cells on every side."""
        return Box(tuple(a - margin for a in self.lower),
                   tuple(s + 2 * margin for s in self.shape))

    def is_disjoint(self, other: "Box") -> bool:
        return any(a1 >= b2 or a2 >= b1 for a1, b1, a2, b2 in
                   zip(self.lower, self.upper, other.lower, other.upper))

    def covers(self, other: "Box") -> bool:
        return all(a1 <= a2 and b2 <= b1 for a1, b1, a2, b2 in
                   zip(self.lower, self.upper, other.lower, other.upper))

    def split(self, parts: int = 2) -> list["Box"]:
        """Tile the box into ``parts**d`` equal sub-boxes (lexicographic order)."""
        if any(s % parts for s in self.shape):
            raise ValueError(f"box shape {self.shape} not divisible by {parts}")
        sub = tuple(s // parts for s in self.shape)
        out = []
        for idx in itertools.product(range(parts), repeat=self.d):
            out.append(Box(tuple(a + i * s for a, i, s in zip(self.lower, idx, sub)), sub))
        return out

    @classmethod
    def unit(cls, g) -> "Box":
        g = as_lattice_point(g)
        return cls(g.coords, (1,) * g.d)


@dataclass(frozen=True)
class Window:
    """l-infinity Cayley ball of radius ``2**radius`` around ``origin``."""

    origin: LatticePoint
    radius: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "origin", as_lattice_point(self.origin))
        if int(self.radius) < 0:
            raise ValueError(f"window radius must be nonnegative, got {self.radius}")
        object.__setattr__(self, "radius", int(self.radius))

    @property
    def d(self) -> int:
        return self.origin.d

    @property
    def half_width(self) -> int:
        return 2**self.radius

    @property
    def side(self) -> int:
        return 2 ** (self.radius + 1) + 1

    @property
    def n_cells(self) -> int:
        return self.side**self.d

    @property
    def box(self) -> Box:
        return Box(tuple(c - self.half_width for c in self.origin.coords),
                   (self.side,) * self.d)

    @property
    def volume(self) -> int:
        return self.n_cells

    def translate(self, g) -> "Window":
        return Window(self.origin + as_lattice_point(g), self.radius)


def window_cells(w: Window) -> list[LatticePoint]:
    """All lattice points within l-infinity distance ``2**r`` of the origin, sorted."""
    return [LatticePoint(tuple(row)) for row in w.box.cells()]


def as_box(region) -> Box:
    if isinstance(region, Box):
        return region
    if isinstance(region, Window):
        return region.box
    raise TypeError(f"expected Box or Window, got {type(region).__name__}")


def quantize_positions(x: np.ndarray) -> np.ndarray:
    """Round positions down onto the dyadic grid of spacing ``2**-POSITION_BITS``."""
    scale = float(2**POSITION_BITS)
    return np.floor(np.asarray(x, dtype=float) * scale) / scale


@dataclass(frozen=True)
class CostSpec:
    """Cost ``theta(d(x, y))`` on Euclidean space or a flat torus.

    Parameters
    ----------
    p : float
        Exponent of the power law ``theta(r) = r**p``.
    geometry : {"euclidean", "torus"}
    torus_side : float, optional
        Side length of the flat torus; required for the torus geometry.
    theta_table : sequence of (r, theta) pairs, optional
        Strictly increasing sample table starting at ``(0, 0)``.  When given
        it replaces the power law, with linear interpolation between samples
        and linear extrapolation from the last segment.
    """

    p: float = 2.0
    geometry: str = "euclidean"
    torus_side: float | None = None
    theta_table: tuple[tuple[float, float], ...] | None = field(default=None)

    def __post_init__(self) -> None:
        for problem in self.problems():
            raise ValueError(problem)
        if self.theta_table is not None:
            object.__setattr__(self, "theta_table",
                               tuple((float(a), float(b)) for a, b in self.theta_table))

    def problems(self) -> list[str]:
        """Validation findings; empty when the cost specification is usable."""
        out = []
        if not (np.isfinite(self.p) and self.p > 0):
            out.append(f"p must be positive, got {self.p}")
        if self.geometry not in ("euclidean", "torus"):
            out.append(f"geometry must be 'euclidean' or 'torus', got {self.geometry!r}")
        if self.geometry == "torus" and not (self.torus_side and self.torus_side > 0):
            out.append("torus geometry needs a positive torus_side")
        if self.theta_table is not None:
            tab = np.asarray(self.theta_table, dtype=float)
            if tab.ndim != 2 or tab.shape[1] != 2 or tab.shape[0] < 2:
                out.append("theta_table must list at least two (r, theta) pairs")
            elif tab[0, 0] != 0 or tab[0, 1] != 0:
                out.append("theta_table must start at (0, 0)")
            elif np.any(np.diff(tab[:, 0]) <= 0) or np.any(np.diff(tab[:, 1]) <= 0):
                out.append("theta_table must be strictly increasing in both columns")
        return out

    @property
    def is_power(self) -> bool:
        return self.theta_table is None

    def theta(self, r) -> np.ndarray:
        """Scale function applied to distances."""
        r = np.asarray(r, dtype=float)
        if self.theta_table is None:
            return r**self.p
        tab = np.asarray(self.theta_table, dtype=float)
        out = np.interp(r, tab[:, 0], tab[:, 1])
        slope = (tab[-1, 1] - tab[-2, 1]) / (tab[-1, 0] - tab[-2, 0])
        beyond = r > tab[-1, 0]
        return np.where(beyond, tab[-1, 1] + slope * (r - tab[-1, 0]), out)

    def displacement(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Per-axis absolute displacement, wrapped on the torus."""
        diff = np.abs(np.asarray(x, dtype=float) - np.asarray(y, dtype=float))
        if self.geometry == "torus":
            side = float(self.torus_side)
            diff = np.mod(diff, side)
            diff = np.minimum(diff, side - diff)
        return diff

    def cost_from_sq(self, sq: np.ndarray) -> np.ndarray:
        if self.theta_table is None:
            if self.p == 2:
                return sq
            return sq ** (self.p / 2.0)
        return self.theta(np.sqrt(sq))

    def pairwise(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Cost matrix of shape ``(len(x), len(y))``."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if y.ndim == 1:
            y = y[:, None]
        _check_dim(x.shape[1], y.shape[1])
        sq = np.zeros((x.shape[0], y.shape[0]))
        for a in range(x.shape[1]):
            da = self.displacement(x[:, a][:, None], y[:, a][None, :])
            sq += da * da
        return self.cost_from_sq(sq)

    def rowwise(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Costs between matching rows of ``x`` and ``y``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.atleast_2d(np.asarray(y, dtype=float))
        _check_dim(x.shape[1], y.shape[1])
        da = self.displacement(x, y)
        return self.cost_from_sq(np.sum(da * da, axis=1))

    def distance(self, x, y) -> float:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        _check_dim(x.shape[0], y.shape[0])
        da = self.displacement(x, y)
        return float(np.sqrt(np.sum(da * da)))

    def check_region(self, box: Box) -> None:
        """Reject torus geometries too small for the region in use."""
        if self.geometry == "torus" and max(box.shape) > self.torus_side:
            raise ValueError(
                f"torus side {self.torus_side} smaller than region extent {max(box.shape)}")


def cost(x, y, spec: CostSpec) -> float:
    """Cost ``theta(d(x, y))`` between two points."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    return float(spec.rowwise(x[None, :], y[None, :])[0])


def cost_matrix(x: np.ndarray, y: np.ndarray, spec: CostSpec) -> np.ndarray:
    return spec.pairwise(x, y)


def translate_plan(plan, g):
    """Shift every source cell and atom of ``plan`` by the lattice vector ``g``."""
    return plan.translate(as_lattice_point(g))


def lattice_points(points: Sequence[Sequence[int]]) -> list[LatticePoint]:
    return [LatticePoint(tuple(p)) for p in points]
