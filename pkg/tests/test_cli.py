from __future__ import annotations

import csv
import hashlib
import json
from fractions import Fraction

import pytest
import yaml

from equitransport.cli import (COMMANDS, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_IO, EXIT_OK, ConfigError,
                               load_config, main, validate_config)

REFERENCE_CASE = {
    "scene": {"d": 1, "target": "deterministic", "points": [[0, "1/3"], [0.0625, "2/3"]]},
    "cost": {"p": 1.0},
    "grid": {"k": 192, "K": 3 * 2**20},
    "region": {"lower": [0], "shape": [1]},
    "solve": {"kind": "coupling"},
}

SMALL = {
    "seed": 3,
    "grid": {"k": 4},
    "costcurve": {"radii": [0, 1], "n_seeds": 2},
    "audit": {"n_cycles": 50, "n_seeds": 1, "n_chords": 10, "n_rays": 10},
    "metric": {"side": 2, "k": 4, "n_seeds": 2, "eps": [0.25]},
    "mosaic": {"side": 2, "k": 4, "n_steps": 2},
}


def write_config(tmp_path, data, name="config.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data))
    return path


def test_default_config_is_valid():
    assert validate_config({}) == []
    assert validate_config(None) == []


def test_unrepresentable_quantum_names_field():
    problems = validate_config({"grid": {"k": 192, "K": 2**20},
                                "scene": {"d": 1, "target": "lattice"}})
    assert any(p.startswith("grid.K") for p in problems)


@pytest.mark.parametrize("p", [0, -1.5])
def test_nonpositive_exponent_rejected(p):
    problems = validate_config({"cost": {"p": p}})
    assert problems and all(x.startswith("cost") for x in problems)


def test_unknown_key_rejected():
    assert any("bogus" in p for p in validate_config({"grid": {"bogus": 1}}))
    with pytest.raises(ConfigError):
        load_config({"bogus": 1})


def test_exit_code_config_error(tmp_path, capsys):
    cfg = write_config(tmp_path, {"cost": {"p": 0}})
    assert main(["solve", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "cost" in capsys.readouterr().err


def test_exit_code_yaml_error(tmp_path):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("grid: [unclosed\n")
    assert main(["solve", "--config", str(cfg)]) == EXIT_CONFIG


def test_exit_code_infeasible(tmp_path):
    data = dict(REFERENCE_CASE, scene={"d": 1, "target": "deterministic", "points": [[0.5, "1/2"]]})
    cfg = write_config(tmp_path, data)
    assert main(["solve", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_INFEASIBLE


def test_exit_code_io(tmp_path):
    assert main(["sample", "--config", str(tmp_path / "missing.yaml")]) == EXIT_IO
    blocker = tmp_path / "file"
    blocker.write_text("x")
    cfg = write_config(tmp_path, SMALL)
    assert main(["sample", "--config", str(cfg), "--out", str(blocker)]) == EXIT_IO


def test_solve_reproduces_eleven_over_twentyfour(tmp_path, capsys):
    cfg = write_config(tmp_path, REFERENCE_CASE)
    assert main(["solve", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_OK
    with open(tmp_path / "o" / "summary.csv", newline="") as fh:
        row = next(csv.DictReader(fh))
    assert row["kind"] == "coupling"
    assert abs(Fraction(row["cost_exact"]) - Fraction(11, 24)) < Fraction(5, 1000)


def test_output_dir_from_environment(tmp_path, monkeypatch):
    cfg = write_config(tmp_path, SMALL)
    monkeypatch.setenv("EQUITRANSPORT_OUT", str(tmp_path / "env"))
    assert main(["sample", "--config", str(cfg)]) == EXIT_OK
    assert (tmp_path / "env" / "points.csv").exists()


@pytest.mark.parametrize("command", COMMANDS)
def test_rerun_is_byte_identical(tmp_path, command):
    cfg = write_config(tmp_path, SMALL)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main([command, "--config", str(cfg), "--out", str(a)]) == EXIT_OK
    assert main([command, "--config", str(cfg), "--out", str(b), "--threads", "2"]) == EXIT_OK
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir())
    for name in names:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_manifest_hashes_every_file(tmp_path):
    cfg = write_config(tmp_path, SMALL)
    out = tmp_path / "o"
    assert main(["mix", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "mix" and manifest["seed"] == 3
    listed = set(manifest["files"])
    assert listed == {p.name for p in out.iterdir()} - {"manifest.json"}
    for name, digest in manifest["files"].items():
        assert hashlib.sha256((out / name).read_bytes()).hexdigest() == digest


def test_tessellate_writes_svg(tmp_path):
    cfg = write_config(tmp_path, SMALL)
    out = tmp_path / "o"
    assert main(["tessellate", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    svg = (out / "cells.svg").read_text()
    assert svg.startswith("<?xml") and svg.rstrip().endswith("</svg>")
    header = (out / "cells.csv").read_text().splitlines()[0]
    assert header == "tgt_id,cell_count,volume_quanta,split_flag"
