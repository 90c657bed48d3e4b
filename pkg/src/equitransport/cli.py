"""Command-line experiment runner.

Every run reads one YAML config, writes its artifacts into the output
directory and finishes with ``manifest.json`` listing each file with its
SHA-256 digest, the config echo, the seed and the package version.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable

import yaml

from . import __version__
from .allocation import convexity_audit, extract_cells, render_svg, starlike_audit
from .construct import (DriftRow, WindowSolver, cost_curve, density_monotonicity, exchange_identity,
                        map_drift, mix, period_shifts, superadditivity, write_drift_csv)
from .domain import Box, CostSpec, LatticePoint, Window
from .metrics import metric_axiom_audit, mosaic_run, random_triple_factory, stability_probe
from .randmeas import (RepresentabilityError, SceneSpec, cell_quanta, choose_quantum,
                       discretize_lebesgue, sample_poisson, sample_target)
from .solver import (InfeasibleError, KINDS, efficiency_audit, solve, verify_cyclical_monotonicity,
                     write_plan_csv)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_IO = 4

COMMANDS = ("sample", "solve", "mix", "costcurve", "audit", "metric", "tessellate", "mosaic")

DEFAULT_CONFIG: dict[str, Any] = {
    "seed": 0,
    "scene": {"d": 2, "target": "poisson", "beta": 1.0},
    "cost": {"p": 2.0, "geometry": "euclidean", "torus_side": None, "theta_table": None},
    "grid": {"k": 16, "K": None},
    "region": None,
    "window": {"origin": None, "r": 1},
    "solve": {"kind": "window"},
    "mix": {"r": 1, "drift_radii": [1, 2]},
    "costcurve": {"radii": [0, 1], "n_seeds": 4},
    "audit": {"suites": ["cycles", "efficiency", "superadditivity", "monotonicity", "geometry"],
              "n_cycles": 1000, "n_seeds": 2, "n_chords": 50, "n_rays": 50},
    "metric": {"side": 3, "k": 8, "n_seeds": 5, "eps": [0.25, 0.125, 0.0625]},
    "tessellate": {"kind": "auto", "n_chords": 50, "n_rays": 50},
    "mosaic": {"side": 4, "k": 8, "sigma": 0.05, "n_steps": 3},
}


class ConfigError(ValueError):
    """Config that cannot be parsed or fails validation."""

    def __init__(self, problems: list[str]) -> None:
        super().__init__("; ".join(problems))
        self.problems = problems


def _merge(base: dict, override: dict, path: str, problems: list[str]) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            problems.append(f"{path}{key}: unknown key")
        elif isinstance(base[key], dict) and isinstance(value, dict) and key != "scene":
            out[key] = _merge(base[key], value, f"{path}{key}.", problems)
        else:
            out[key] = value
    return out


@dataclass
class ExperimentConfig:
    """Parsed config: scene, cost, grid and per-command parameters."""

    raw: dict
    scene: SceneSpec
    cost: CostSpec
    k: int
    K: int
    seed: int

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)

    def box(self) -> Box:
        """The configured region, else the window box."""
        region = self.raw.get("region")
        if region:
            return Box(tuple(region["lower"]), tuple(region["shape"]))
        return self.window().box

    def window(self) -> Window:
        w = self.raw["window"]
        origin = w.get("origin") or [0] * self.scene.d
        return Window(LatticePoint(tuple(origin)), int(w["r"]))

    def solver(self, seed: int | None = None) -> WindowSolver:
        scene = self.scene if seed is None else self.scene.with_seed(seed)
        return WindowSolver(scene, self.cost, self.k, self.K)


def _scene_dict(raw: dict) -> dict:
    scene = dict(raw.get("scene") or {})
    scene["seed"] = int(raw.get("seed", 0))
    return scene


def validate_config(config: dict | None) -> list[str]:
    """Validation findings for a raw config; an empty list means the config is usable."""
    problems: list[str] = []
    if config is None:
        config = {}
    if not isinstance(config, dict):
        return ["config: top level must be a mapping"]
    raw = _merge(DEFAULT_CONFIG, config, "", problems)
    try:
        scene = SceneSpec.from_dict(_scene_dict(raw))
    except (TypeError, ValueError) as exc:
        return problems + [f"scene: {exc}"]
    problems += scene.problems()
    c = raw["cost"]
    try:
        CostSpec(p=c["p"], geometry=c["geometry"], torus_side=c["torus_side"],
                 theta_table=c["theta_table"])
    except (TypeError, ValueError) as exc:
        problems.append(f"cost: {exc}")
    k = raw["grid"]["k"]
    if not isinstance(k, int) or k < 1:
        problems.append(f"grid.k: must be a positive integer, got {k!r}")
    K = raw["grid"]["K"]
    if K is not None and (not isinstance(K, int) or K < 1):
        problems.append(f"grid.K: must be a positive integer, got {K!r}")
    if problems:
        return problems
    if K is not None:
        try:
            cell_quanta(k, scene.d, scene.level, K)
        except RepresentabilityError as exc:
            problems.append(f"grid.{exc.field_name}: {exc}")
        for w in scene.weights_for_quantum():
            if scene.target in ("lattice", "deterministic") and (Fraction(w) * K).denominator != 1:
                problems.append(f"grid.K: atom weight {w} is not a multiple of 1/{K}")
    win = raw["window"]
    if not isinstance(win.get("r"), int) or win["r"] < 0:
        problems.append(f"window.r: must be a nonnegative integer, got {win.get('r')!r}")
    if win.get("origin") is not None and len(win["origin"]) != scene.d:
        problems.append(f"window.origin: needs {scene.d} coordinates")
    region = raw.get("region")
    if region is not None:
        try:
            box = Box(tuple(region["lower"]), tuple(region["shape"]))
            if box.d != scene.d:
                problems.append(f"region: dimension {box.d} does not match scene.d={scene.d}")
        except (KeyError, TypeError, ValueError) as exc:
            problems.append(f"region: {exc}")
    if raw["solve"]["kind"] not in ("window",) + KINDS:
        problems.append(f"solve.kind: must be 'window' or one of {KINDS}")
    if raw["tessellate"]["kind"] not in ("auto",) + KINDS:
        problems.append(f"tessellate.kind: must be 'auto' or one of {KINDS}")
    if raw["cost"]["geometry"] == "torus" and region is not None:
        shape = tuple(region["shape"])
        if any(s != raw["cost"]["torus_side"] for s in shape):
            problems.append("region.shape: a torus region must be a cube of side cost.torus_side")
    radii = raw["costcurve"]["radii"]
    if not radii or any(not isinstance(r, int) or r < 0 for r in radii):
        problems.append("costcurve.radii: needs nonnegative integers")
    for section in ("costcurve", "audit", "metric"):
        n = raw[section]["n_seeds"]
        if not isinstance(n, int) or n < 1:
            problems.append(f"{section}.n_seeds: must be a positive integer")
    if raw["mosaic"]["sigma"] < 0:
        problems.append("mosaic.sigma: must be nonnegative")
    return problems


def load_config(data: dict | None) -> ExperimentConfig:
    problems = validate_config(data)
    if problems:
        raise ConfigError(problems)
    merged_problems: list[str] = []
    raw = _merge(DEFAULT_CONFIG, data or {}, "", merged_problems)
    scene = SceneSpec.from_dict(_scene_dict(raw))
    c = raw["cost"]
    cost = CostSpec(p=float(c["p"]), geometry=c["geometry"], torus_side=c["torus_side"],
                    theta_table=c["theta_table"])
    k = int(raw["grid"]["k"])
    K = raw["grid"]["K"] or choose_quantum(k, scene.d, scene.level, scene.weights_for_quantum())
    return ExperimentConfig(raw, scene, cost, k, int(K), int(raw["seed"]))


def read_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError([f"config: YAML parse error: {exc}"]) from exc
    return load_config(data)


def _write_rows(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _auto_kind(source_total: int, target_total: int) -> str:
    """Coupling when masses agree, otherwise the semicoupling that is feasible."""
    if source_total == target_total:
        return "coupling"
    return "semicoupling_source" if target_total < source_total else "semicoupling_target"


def _pmap(fn: Callable, items: list, threads: int) -> list:
    """Order-preserving map, fanned out over threads when requested."""
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def cmd_sample(cfg: ExperimentConfig, out: Path, threads: int) -> list[Path]:
    path = out / "points.csv"
    sample_target(cfg.scene, cfg.box(), cfg.K).write_csv(path)
    return [path]


def cmd_solve(cfg: ExperimentConfig, out: Path, threads: int) -> list[Path]:
    kind = cfg.raw["solve"]["kind"]
    if kind == "window":
        plan = cfg.solver().region(cfg.box())
    else:
        box = cfg.box()
        src = discretize_lebesgue(box, cfg.k, cfg.scene.level, cfg.K)
        plan = solve(kind, src, sample_target(cfg.scene, box, cfg.K), cfg.cost)
    plan_path = out / "plan.csv"
    write_plan_csv(plan, plan_path)
    exact = plan.exact_cost()
    summary = out / "summary.csv"
    _write_rows(summary, ["kind", "cost", "cost_exact", "scale", "entries", "flags"],
                [[plan.kind, repr(float(exact)), str(exact), plan.scale, plan.n_entries,
                  " ".join(plan.flags)]])
    print(f"cost {float(exact)!r}")
    return [plan_path, summary]


def cmd_mix(cfg: ExperimentConfig, out: Path, threads: int) -> list[Path]:
    solver = cfg.solver()
    g = cfg.window().origin
    r = int(cfg.raw["mix"]["r"])
    mixed = mix(solver, g, r)
    target = sample_target(cfg.scene, Box.unit(g), cfg.K)
    want = {tuple(x.tolist()): int(m) for x, m in zip(target.positions, target.masses)}
    shifts = period_shifts(cfg.scene.d, cfg.scene.period) if cfg.scene.period else None
    ex = exchange_identity(solver, g, r, shifts)
    mix_path = out / "mix.csv"
    _write_rows(mix_path, ["g", "r", "components", "restricted_cost", "marginal_exact",
                           "exchange_mixed", "exchange_window", "exchange_terms", "exchange_holds"],
                [[" ".join(map(str, g.coords)), r, len(mixed.components),
                  repr(float(mixed.restricted_cost_exact())), int(mixed.marginal_exact(want)),
                  ex.mixed_side, ex.window_side, ex.n_terms, int(ex.holds)]])
    r1, r2 = cfg.raw["mix"]["drift_radii"]
    drift_path = out / "drift.csv"
    write_drift_csv([DriftRow(g.coords, r1, r2, map_drift(solver, g, r1, r2))], drift_path)
    return [mix_path, drift_path]


def cmd_costcurve(cfg: ExperimentConfig, out: Path, threads: int) -> list[Path]:
    c = cfg.raw["costcurve"]
    runner = (lambda fn, items: _pmap(fn, items, threads))
    curve = cost_curve(cfg.scene, c["radii"], int(c["n_seeds"]), cfg.cost, cfg.k, cfg.K, runner)
    path = out / "costcurve.csv"
    curve.write_csv(path)
    return [path]


def cmd_audit(cfg: ExperimentConfig, out: Path, threads: int) -> list[Path]:
    a = cfg.raw["audit"]
    suites = list(a["suites"])
    seeds = [cfg.seed + i for i in range(int(a["n_seeds"]))]
    w = cfg.window()

    def one(seed: int) -> list[list]:
        solver = cfg.solver(seed)
        rows = []
        plan = solver.region(w.box)
        if "cycles" in suites:
            rep = verify_cyclical_monotonicity(plan, n_cycles=int(a["n_cycles"]), seed=seed)
            rows.append([seed, "cycles", rep.violations, repr(rep.worst_slack)])
        if "efficiency" in suites:
            rows.append([seed, "efficiency", 0, repr(efficiency_audit(plan, w.box))])
        if "superadditivity" in suites:
            chk = superadditivity(solver, Box(w.box.lower, (2,) * cfg.scene.d))
            rows.append([seed, "superadditivity", int(not chk.holds),
                         str(chk.union_cost - sum(chk.part_costs))])
        if "monotonicity" in suites:
            small = solver.region(Box(w.box.lower, (1,) * cfg.scene.d))
            large = solver.region(Box(w.box.lower, (2,) * cfg.scene.d))
            chk = density_monotonicity(small, large)
            rows.append([seed, "monotonicity", len(chk.violating_cells), int(chk.holds)])
        if "geometry" in suites and cfg.scene.d == 2 and cfg.cost.is_power and cfg.cost.p in (1.0, 2.0):
            box = w.box
            src = discretize_lebesgue(box, cfg.k, cfg.scene.level, cfg.K)
            tgt = sample_target(cfg.scene.with_seed(seed), box, cfg.K)
            if tgt.n:
                cells = extract_cells(solve(_auto_kind(src.total, tgt.total), src, tgt, cfg.cost))
                if cfg.cost.p == 2.0:
                    rep = convexity_audit(cells, int(a["n_chords"]), seed)
                    rows.append([seed, "convexity", rep.violating_chords, rep.total_chords])
                else:
                    rep = starlike_audit(cells, int(a["n_rays"]), seed)
                    rows.append([seed, "starlike", rep.violating_rays, rep.total_rays])
        return rows

    path = out / "audit.csv"
    results = _pmap(one, seeds, threads)
    _write_rows(path, ["seed", "suite", "violations", "value"], [r for rows in results for r in rows])
    return [path]


def cmd_metric(cfg: ExperimentConfig, out: Path, threads: int) -> list[Path]:
    m = cfg.raw["metric"]
    d = cfg.scene.d
    box = Box((0,) * d, (int(m["side"]),) * d)
    factory = random_triple_factory(box, int(m["k"]), K=cfg.K)
    report = metric_axiom_audit(factory, cfg.cost.p, box, int(m["n_seeds"]), cfg.seed)
    pairs, tri = out / "metric_pairs.csv", out / "metric_triangle.csv"
    report.write_pairs_csv(pairs)
    report.write_triangle_csv(tri)
    points = sample_poisson(box, cfg.scene.beta, cfg.seed, cfg.K)
    stab = out / "stability.csv"
    rows = stability_probe(points, [float(e) for e in m["eps"]], cfg.cost.p, box, cfg.seed, int(m["k"]))
    _write_rows(stab, ["eps", "wpp_per_vol", "move_bound", "eps_bound", "tail_mass_cost"],
                [[repr(r.eps), repr(r.wpp_per_vol), repr(r.move_bound), repr(r.eps_bound),
                  repr(r.tail_mass_cost)] for r in rows])
    return [pairs, tri, stab]


def cmd_tessellate(cfg: ExperimentConfig, out: Path, threads: int) -> list[Path]:
    box = cfg.box()
    t = cfg.raw["tessellate"]
    src = discretize_lebesgue(box, cfg.k, cfg.scene.level, cfg.K)
    tgt = sample_target(cfg.scene, box, cfg.K)
    kind = _auto_kind(src.total, tgt.total) if t["kind"] == "auto" else t["kind"]
    cells = extract_cells(solve(kind, src, tgt, cfg.cost))
    cells_path, svg_path = out / "cells.csv", out / "cells.svg"
    cells.write_csv(cells_path)
    written = [cells_path]
    if box.d == 2:
        render_svg(cells, svg_path)
        written.append(svg_path)
    return written


def cmd_mosaic(cfg: ExperimentConfig, out: Path, threads: int) -> list[Path]:
    m = cfg.raw["mosaic"]
    d = cfg.scene.d
    box = Box((0,) * d, (int(m["side"]),) * d)
    points = sample_target(cfg.scene.with_seed(cfg.seed), box, cfg.K)
    steps = mosaic_run(points, float(m["sigma"]), int(m["n_steps"]), cfg.seed, box, int(m["k"]),
                       cfg.cost.p)
    path = out / "mosaic.csv"
    _write_rows(path, ["step", "sigma", "drift_mass_fraction", "max_step"],
                [[i, repr(float(m["sigma"])), repr(s.drift), repr(s.max_step)]
                 for i, s in enumerate(steps)])
    return [path]


HANDLERS = {
    "sample": cmd_sample, "solve": cmd_solve, "mix": cmd_mix, "costcurve": cmd_costcurve,
    "audit": cmd_audit, "metric": cmd_metric, "tessellate": cmd_tessellate, "mosaic": cmd_mosaic,
}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, cfg: ExperimentConfig, files: list[Path]) -> Path:
    manifest = {
        "command": command,
        "version": __version__,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "files": {p.name: _sha256(p) for p in files},
    }
    path = out / "manifest.json"
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    return path


def run(command: str, cfg: ExperimentConfig, out, threads: int = 1) -> list[Path]:
    """Run one command and return the written files, manifest last."""
    if command not in HANDLERS:
        raise ValueError(f"unknown command {command!r}")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    files = HANDLERS[command](cfg, out, threads)
    return files + [write_manifest(out, command, cfg, files)]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="equitransport",
        description="Optimal transport between Lebesgue measure and point processes on windows.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="YAML experiment config")
    parser.add_argument("--out", default=None,
                        help="output directory (default: $EQUITRANSPORT_OUT or ./out)")
    parser.add_argument("--threads", type=int, default=1, help="worker threads for per-seed jobs")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    out = args.out or os.environ.get("EQUITRANSPORT_OUT") or "out"
    try:
        cfg = read_config(args.config)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        files = run(args.command, cfg, out, max(1, args.threads))
    except (InfeasibleError, RepresentabilityError) as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    for f in files:
        print(f)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
