"""Point-process samplers, discretised Lebesgue measure, and tail bounds.

Randomness is counter based: every unit lattice cell owns an independent
stream keyed by ``(seed, stream id, cell coordinates)``.  A configuration
sampled on a window is therefore the restriction of one fixed realisation on
all of Z^d, whatever window, order, or worker produced it.  With a period
``P`` the cell key is reduced modulo ``P`` and the realisation is periodic.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, replace
from fractions import Fraction
from typing import Any, Sequence

import numpy as np
import yaml

from .domain import Box, as_box, as_lattice_point, quantize_positions

DEFAULT_QUANTUM = 2**20

#: Stream identifiers for the counter-based generator.
STREAMS = {
    "poisson": 1,
    "binomial": 2,
    "jitter": 3,
    "mosaic": 4,
    "tail": 5,
    "cycles": 6,
    "chords": 7,
    "rays": 8,
    "instances": 9,
}

WEIGHT_DISTS = ("degenerate", "exp", "poisson")
TARGET_KINDS = ("poisson", "binomial", "compound_poisson", "lattice", "deterministic")


class RepresentabilityError(ValueError):
    """A mass cannot be written as an integer number of quanta."""

    def __init__(self, field_name: str, message: str) -> None:
        super().__init__(f"{field_name}: {message}")
        self.field_name = field_name


def _key_words(seed: int, stream: int, cell: Sequence[int]) -> list[int]:
    seed = int(seed) & (2**64 - 1)
    words = [seed & 0xFFFFFFFF, seed >> 32, int(stream)]
    words.extend((int(c) + 2**31) & 0xFFFFFFFF for c in cell)
    return words


def stream_rng(seed: int, stream: str | int, *key: int) -> np.random.Generator:
    """Independent Philox generator for ``(seed, stream, key...)``."""
    sid = STREAMS[stream] if isinstance(stream, str) else int(stream)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(_key_words(seed, sid, key))))


def _cell_key(cell: np.ndarray, period: int | None) -> tuple[int, ...]:
    if period is None:
        return tuple(int(c) for c in cell)
    return tuple(int(c) % int(period) for c in cell)


@dataclass
class PointConfiguration:
    """Finite list of weighted atoms; masses are integer multiples of ``1/K``."""

    positions: np.ndarray
    masses: np.ndarray
    K: int = DEFAULT_QUANTUM
    frame: Box | None = None
    quantization_error: float = 0.0

    def __post_init__(self) -> None:
        pos = np.asarray(self.positions, dtype=float)
        if pos.ndim == 1:
            pos = pos.reshape(-1, self.frame.d if self.frame is not None else 1)
        self.positions = pos
        self.masses = np.asarray(self.masses, dtype=np.int64).reshape(-1)
        if self.masses.shape[0] != pos.shape[0]:
            raise ValueError("positions and masses differ in length")
        if np.any(self.masses < 0):
            raise ValueError("atom masses must be nonnegative")

    @property
    def n(self) -> int:
        return int(self.positions.shape[0])

    @property
    def d(self) -> int:
        return int(self.positions.shape[1])

    @property
    def weights(self) -> np.ndarray:
        return self.masses / float(self.K)

    @property
    def total(self) -> int:
        return int(self.masses.sum())

    def translate(self, g) -> "PointConfiguration":
        g = as_lattice_point(g)
        return replace(self, positions=self.positions + g.as_array().astype(float),
                       frame=None if self.frame is None else self.frame.translate(g))

    def restrict(self, region) -> "PointConfiguration":
        box = as_box(region)
        keep = box.contains(self.positions)
        return replace(self, positions=self.positions[keep], masses=self.masses[keep], frame=box)

    def with_quantum(self, K: int) -> "PointConfiguration":
        """Re-express masses in quanta of ``1/K`` (exact or raises)."""
        if K == self.K:
            return self
        num = self.masses.astype(object) * int(K)
        if any(v % self.K for v in num):
            raise RepresentabilityError("K", f"atom masses not representable with K={K}")
        return replace(self, masses=np.array([v // self.K for v in num], dtype=np.int64), K=int(K))

    def merged(self) -> "PointConfiguration":
        """Drop zero-mass atoms and merge coincident ones, keeping first-seen order."""
        keep = self.masses > 0
        pos = self.positions[keep]
        mass = self.masses[keep]
        if pos.shape[0] == 0:
            return replace(self, positions=pos, masses=mass)
        _, first, inv = np.unique(pos, axis=0, return_index=True, return_inverse=True)
        inv = inv.reshape(-1)
        new_mass = np.zeros(first.shape[0], dtype=np.int64)
        np.add.at(new_mass, inv, mass)
        order = np.argsort(first, kind="stable")
        return replace(self, positions=pos[first[order]], masses=new_mass[order])

    def write_csv(self, path) -> None:
        names = ["x", "y", "z"][: self.d]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(names + ["weight"])
            for p, m in zip(self.positions, self.masses):
                w.writerow([repr(float(v)) for v in p] + [repr(float(m) / self.K)])

    @classmethod
    def read_csv(cls, path, K: int = DEFAULT_QUANTUM) -> "PointConfiguration":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        d = len(header) - 1
        if header[-1] != "weight" or d not in (1, 2, 3):
            raise ValueError(f"unexpected points header {header}")
        data = np.array([[float(v) for v in r] for r in body], dtype=float).reshape(-1, d + 1)
        return from_weights(data[:, :d], data[:, d], K)


def from_weights(positions, weights, K: int = DEFAULT_QUANTUM, frame: Box | None = None,
                 exact: bool = False) -> PointConfiguration:
    """Build a configuration by rounding real weights to quanta of ``1/K``.

    With ``exact=True`` any rounding is an error instead of being recorded.
    """
    weights = np.asarray(weights, dtype=float).reshape(-1)
    if np.any(weights < 0):
        raise ValueError("weights must be nonnegative")
    masses = np.rint(weights * K).astype(np.int64)
    err = float(np.abs(weights - masses / K).sum())
    if exact and err != 0.0:
        raise RepresentabilityError("weights", f"weights not multiples of 1/{K}")
    pos = np.asarray(positions, dtype=float)
    if pos.ndim == 1:
        pos = pos[:, None]
    return PointConfiguration(pos, masses, int(K), frame, err)


def from_fractions(positions, weights: Sequence[Fraction | int | str], K: int) -> PointConfiguration:
    """Exact construction from rational weights."""
    masses = []
    for w in weights:
        q = Fraction(w) * K
        if q.denominator != 1:
            raise RepresentabilityError("weights", f"weight {w} not a multiple of 1/{K}")
        masses.append(int(q))
    pos = np.asarray(positions, dtype=float)
    if pos.ndim == 1:
        pos = pos[:, None]
    return PointConfiguration(pos, np.array(masses, dtype=np.int64), int(K))


def _draw_weights(rng: np.random.Generator, count: int, weight_dist: str) -> np.ndarray:
    if weight_dist == "degenerate":
        return np.ones(count)
    if weight_dist == "exp":
        return rng.exponential(1.0, count)
    if weight_dist == "poisson":
        return rng.poisson(1.0, count).astype(float)
    raise ValueError(f"unknown weight distribution {weight_dist!r}")


def _sample_cells(region, seed: int, stream: str, count_fn, weight_dist: str,
                  K: int, period: int | None, scale: float) -> PointConfiguration:
    box = as_box(region)
    pos_parts = []
    w_parts = []
    for cell in box.cells():
        rng = stream_rng(seed, stream, *_cell_key(cell, period))
        n = int(count_fn(rng))
        if n == 0:
            continue
        u = quantize_positions(rng.random((n, box.d)))
        pos_parts.append(cell.astype(float)[None, :] + u)
        w_parts.append(_draw_weights(rng, n, weight_dist) * scale)
    if pos_parts:
        pos = np.concatenate(pos_parts)
        w = np.concatenate(w_parts)
    else:
        pos = np.zeros((0, box.d))
        w = np.zeros(0)
    conf = from_weights(pos, w, K, frame=box)
    keep = conf.masses > 0
    return replace(conf, positions=conf.positions[keep], masses=conf.masses[keep])


def sample_poisson(region, beta: float, seed: int, K: int = DEFAULT_QUANTUM,
                   period: int | None = None, scale: float = 1.0) -> PointConfiguration:
    """Poisson process of intensity ``beta`` with atoms of weight ``scale``."""
    if not beta > 0:
        raise ValueError(f"intensity must be positive, got {beta}")
    return _sample_cells(region, seed, "poisson", lambda rng: rng.poisson(beta),
                         "degenerate", K, period, scale)


def sample_compound_poisson(region, beta: float, weight_dist: str, seed: int,
                            K: int = DEFAULT_QUANTUM, period: int | None = None,
                            scale: float = 1.0) -> PointConfiguration:
    """Poisson locations with i.i.d. weights; zero-weight atoms are dropped.

    The location stream is shared with :func:`sample_poisson`, so degenerate
    weights reproduce its output exactly.
    """
    if not beta > 0:
        raise ValueError(f"intensity must be positive, got {beta}")
    if weight_dist not in WEIGHT_DISTS:
        raise ValueError(f"weight_dist must be one of {WEIGHT_DISTS}, got {weight_dist!r}")
    return _sample_cells(region, seed, "poisson", lambda rng: rng.poisson(beta),
                         weight_dist, K, period, scale)


def sample_binomial(region, n_per_cell: int, seed: int, K: int = DEFAULT_QUANTUM,
                    period: int | None = None, scale: float = 1.0) -> PointConfiguration:
    """Exactly ``n_per_cell`` uniform atoms in every unit cell.

    Conditioning the counts makes total mass deterministic, which the metric
    experiments need for balanced couplings.
    """
    if n_per_cell < 0:
        raise ValueError("n_per_cell must be nonnegative")
    return _sample_cells(region, seed, "binomial", lambda rng: n_per_cell,
                         "degenerate", K, period, scale)


def sample_lattice(region, pattern: Sequence[Sequence[float]] | None = None,
                   K: int = DEFAULT_QUANTUM) -> PointConfiguration:
    """Periodic deterministic scene: ``pattern`` rows ``(offset..., weight)`` in every cell."""
    box = as_box(region)
    if pattern is None:
        pattern = [[0.5] * box.d + [1.0]]
    pat = np.asarray(pattern, dtype=float).reshape(-1, box.d + 1)
    offsets = quantize_positions(pat[:, : box.d])
    cells = box.cells().astype(float)
    pos = (cells[:, None, :] + offsets[None, :, :]).reshape(-1, box.d)
    w = np.tile(pat[:, box.d], cells.shape[0])
    conf = from_weights(pos, w, K, frame=box)
    return replace(conf, positions=conf.positions[conf.masses > 0],
                   masses=conf.masses[conf.masses > 0])


@dataclass
class DiscreteDensity:
    """Piecewise-constant measure on the ``k``-refined grid of a lattice box."""

    box: Box
    k: int
    K: int
    masses: np.ndarray

    def __post_init__(self) -> None:
        self.masses = np.asarray(self.masses, dtype=np.int64)
        expected = tuple(s * self.k for s in self.box.shape)
        if self.masses.shape != expected:
            raise ValueError(f"mass grid shape {self.masses.shape} != {expected}")
        if np.any(self.masses < 0):
            raise ValueError("cell masses must be nonnegative")

    @property
    def d(self) -> int:
        return self.box.d

    @property
    def n_cells(self) -> int:
        return int(self.masses.size)

    @property
    def grid_shape(self) -> tuple[int, ...]:
        return self.masses.shape

    @property
    def cell_volume(self) -> float:
        return 1.0 / self.k**self.d

    @property
    def flat_masses(self) -> np.ndarray:
        return self.masses.reshape(-1)

    @property
    def total(self) -> int:
        return int(self.masses.sum())

    def cell_index(self) -> np.ndarray:
        """Integer grid index of every cell in C order, shape (n, d)."""
        axes = [np.arange(s, dtype=np.int64) for s in self.grid_shape]
        grid = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in grid], axis=1).reshape(-1, self.d)

    def centers(self) -> np.ndarray:
        """Cell centres in C order, shape (n, d)."""
        idx = self.cell_index()
        lower = np.asarray(self.box.lower, dtype=float)
        return lower[None, :] + (2 * idx + 1) / (2.0 * self.k)

    def translate(self, g) -> "DiscreteDensity":
        return replace(self, box=self.box.translate(g))


def _as_fraction(x) -> Fraction:
    if isinstance(x, float):
        return Fraction(repr(x))
    return Fraction(x)


def cell_quanta(k: int, d: int, level, K: int) -> int:
    """Quanta per cell of a uniform density; raises if not an integer."""
    q = _as_fraction(level) * int(K) / Fraction(int(k) ** int(d))
    if q.denominator != 1:
        raise RepresentabilityError(
            "K", f"level {level} on grid k={k} (d={d}) needs K divisible by "
            f"{(Fraction(k**d) / _as_fraction(level)).numerator}; got K={K}")
    return int(q)


def discretize_lebesgue(region, k: int, level=1, K: int = DEFAULT_QUANTUM) -> DiscreteDensity:
    """Uniform density ``level`` on ``region`` sampled on a grid of ``k`` cells per unit."""
    if int(k) < 1:
        raise ValueError(f"grid resolution k must be >= 1, got {k}")
    box = as_box(region)
    q = cell_quanta(k, box.d, level, K)
    if q < 0:
        raise ValueError("density level must be nonnegative")
    shape = tuple(s * int(k) for s in box.shape)
    return DiscreteDensity(box, int(k), int(K), np.full(shape, q, dtype=np.int64))


def choose_quantum(k: int, d: int, level=1, weights: Sequence = (),
                   base: int = DEFAULT_QUANTUM) -> int:
    """Smallest multiple of ``base`` representing the cell mass and every weight."""
    lcm = int(base)
    for x in [_as_fraction(level) / Fraction(int(k) ** int(d))] + [_as_fraction(w) for w in weights]:
        lcm = math.lcm(lcm, x.denominator)
    return lcm


def compound_tail_bound(alpha: float, rho: float) -> float:
    """Bound on ``P[|Z - alpha| > alpha*rho]`` for compound Poisson sums of exp(1) weights.

    ``Z = X_1 + ... + X_N`` with ``N ~ Poisson(alpha)`` and ``X_i ~ exp(1)``.
    The exponent ``2 + rho - 2*sqrt(1 + rho)`` comes from optimising the
    Chernoff parameter of the moment generating function
    ``exp(alpha * t / (1 - t))``.
    """
    _check_tail_args(alpha, rho)
    return 2.0 * math.exp(-alpha * tail_exponent(rho))


def compound_tail_bound_weak(alpha: float, rho: float) -> float:
    """Polynomial relaxation ``2 exp(-alpha (rho^2/4 - rho^3/8))`` of the tight bound."""
    _check_tail_args(alpha, rho)
    return 2.0 * math.exp(-alpha * tail_exponent_weak(rho))


def tail_exponent(rho: float) -> float:
    return 2.0 + rho - 2.0 * math.sqrt(1.0 + rho)


def tail_exponent_weak(rho: float) -> float:
    return rho**2 / 4.0 - rho**3 / 8.0


def _check_tail_args(alpha: float, rho: float) -> None:
    if not 0.0 < rho < 1.0:
        raise ValueError(f"rho must lie in (0, 1), got {rho}")
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")


def sample_compound_sums(alpha: float, n_samples: int, seed: int) -> np.ndarray:
    """``n_samples`` i.i.d. draws of ``Z``; a Gamma(N, 1) draw given ``N``."""
    rng = stream_rng(seed, "tail")
    counts = rng.poisson(alpha, int(n_samples))
    return rng.standard_gamma(counts.astype(float))


def empirical_tail(alpha: float, rho: float, n_samples: int, seed: int) -> float:
    """Monte Carlo frequency of ``|Z - alpha| > alpha*rho``."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    z = sample_compound_sums(alpha, n_samples, seed)
    return float(np.mean(np.abs(z - alpha) > alpha * rho))


@dataclass
class SceneSpec:
    """Random scene: Lebesgue source of density ``level`` and a point-process target.

    Target kinds are ``poisson`` (intensity ``beta``), ``compound_poisson``
    (``beta`` with i.i.d. ``weight_dist`` weights), ``binomial``
    (``n_per_cell`` atoms per unit cell), ``lattice`` (``pattern`` repeated in
    every unit cell) and ``deterministic`` (explicit ``points`` rows
    ``(x..., weight)``).  Every atom weight is multiplied by ``scale``.
    """

    d: int = 2
    level: Any = 1
    target: str = "poisson"
    beta: float = 1.0
    weight_dist: str = "degenerate"
    n_per_cell: int = 1
    scale: float = 1.0
    pattern: list | None = None
    points: list | None = None
    seed: int = 0
    period: int | None = None

    def problems(self) -> list[str]:
        out = []
        if self.d not in (1, 2, 3):
            out.append(f"scene.d: must be 1, 2 or 3, got {self.d}")
        if self.target not in TARGET_KINDS:
            out.append(f"scene.target: must be one of {TARGET_KINDS}, got {self.target!r}")
        if self.target in ("poisson", "compound_poisson") and not (
                isinstance(self.beta, (int, float)) and self.beta > 0):
            out.append(f"scene.beta: must be positive, got {self.beta}")
        if self.target == "compound_poisson" and self.weight_dist not in WEIGHT_DISTS:
            out.append(f"scene.weight_dist: must be one of {WEIGHT_DISTS}")
        if self.target == "deterministic" and not self.points:
            out.append("scene.points: deterministic target needs a points list")
        if not (isinstance(self.scale, (int, float)) and self.scale > 0):
            out.append(f"scene.scale: must be positive, got {self.scale}")
        if self.period is not None and int(self.period) < 1:
            out.append("scene.period: must be a positive integer")
        try:
            if _as_fraction(self.level) < 0:
                out.append("scene.level: must be nonnegative")
        except (ValueError, TypeError):
            out.append(f"scene.level: not a number: {self.level!r}")
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            out.append("scene.seed: must be a 64-bit unsigned integer")
        return out

    def to_dict(self) -> dict:
        out = asdict(self)
        if isinstance(self.level, Fraction):
            out["level"] = str(self.level)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "SceneSpec":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown scene keys: {sorted(unknown)}")
        data = dict(data)
        if isinstance(data.get("level"), str):
            data["level"] = Fraction(data["level"])
        return cls(**data)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    @classmethod
    def from_yaml(cls, text: str) -> "SceneSpec":
        return cls.from_dict(yaml.safe_load(text) or {})

    def with_seed(self, seed: int) -> "SceneSpec":
        return replace(self, seed=int(seed))

    def weights_for_quantum(self) -> list:
        """Atom weights that must be representable (deterministic kinds only)."""
        if self.target == "lattice":
            rows = self.pattern or [[0.5] * self.d + [1.0]]
            return [_as_fraction(r[-1]) * _as_fraction(self.scale) for r in rows]
        if self.target == "deterministic":
            return [_as_fraction(r[-1]) * _as_fraction(self.scale) for r in self.points or []]
        return [_as_fraction(self.scale)]


def sample_target(scene: SceneSpec, region, K: int = DEFAULT_QUANTUM) -> PointConfiguration:
    """Restriction of the scene's target realisation to ``region``."""
    box = as_box(region)
    if box.d != scene.d:
        raise ValueError(f"region dimension {box.d} != scene dimension {scene.d}")
    kind = scene.target
    if kind == "poisson":
        return sample_poisson(box, scene.beta, scene.seed, K, scene.period, scene.scale)
    if kind == "compound_poisson":
        return sample_compound_poisson(box, scene.beta, scene.weight_dist, scene.seed, K,
                                       scene.period, scene.scale)
    if kind == "binomial":
        return sample_binomial(box, scene.n_per_cell, scene.seed, K, scene.period, scene.scale)
    if kind == "lattice":
        pattern = scene.pattern
        if pattern is not None and scene.scale != 1.0:
            pattern = [list(r[:-1]) + [r[-1] * scene.scale] for r in pattern]
        elif pattern is None and scene.scale != 1.0:
            pattern = [[0.5] * scene.d + [scene.scale]]
        return sample_lattice(box, pattern, K)
    if kind == "deterministic":
        pos = np.array([[float(v) for v in r[:-1]] for r in scene.points], dtype=float)
        weights = [_as_fraction(r[-1]) * _as_fraction(scene.scale) for r in scene.points]
        conf = from_fractions(pos.reshape(-1, scene.d), weights, K)
        return conf.restrict(box)
    raise ValueError(f"unknown target kind {kind!r}")

