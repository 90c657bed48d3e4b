from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from equitransport.domain import Box, CostSpec
from equitransport.randmeas import PointConfiguration, discretize_lebesgue, from_weights
from equitransport.solver import solve_coupling, solve_semicoupling_source
from equitransport.solver import CEMETERY
from equitransport.allocation import (
    SPLIT, UNOWNED, convexity_audit, extract_cells, render_svg, starlike_audit,
    symmetric_difference, voronoi_reference)

K = 2**20


def coupling_cells(box, k, positions, weights, spec=None):
    src = discretize_lebesgue(box, k, K=K)
    tgt = from_weights(np.asarray(positions, dtype=float), weights, K, exact=True)
    return extract_cells(solve_coupling(src, tgt, spec or CostSpec()))


def test_single_atom_owns_whole_box():
    cells = coupling_cells(Box((0, 0), (2, 2)), 4, [[0.3, 1.7]], [4])
    assert np.all(cells.owner == 0)
    assert cells.volumes().tolist() == [4 * K]
    assert cells.cell_counts().tolist() == [64]


def test_unit_weights_give_unit_volumes():
    pts = [[0.5, 0.5], [1.5, 0.5], [0.5, 1.5], [1.5, 1.5]]
    cells = coupling_cells(Box((0, 0), (2, 2)), 4, pts, [1, 1, 1, 1])
    assert cells.volumes().tolist() == [K] * 4
    assert not cells.split


def test_weight_three_gets_three_volume():
    cells = coupling_cells(Box((0, 0), (4, 1)), 4, [[0.5, 0.5], [2.5, 0.5]], [1, 3])
    assert cells.volumes().tolist() == [K, 3 * K]


def test_split_cell_records_shares():
    src = discretize_lebesgue(Box((0,), (1,)), 2, K=4)
    tgt = PointConfiguration(np.array([[0.25], [0.75]]), np.array([1, 3]), 4)
    cells = extract_cells(solve_coupling(src, tgt, CostSpec()))
    # each cell holds 2 quanta; the cell at 0.25 feeds atom 0 once and atom 1 once
    assert cells.owner.tolist() == [SPLIT, 1]
    assert sorted(cells.split[0]) == [(0, 1), (1, 1)]
    assert cells.volumes().tolist() == [1, 3]


def test_semicoupling_leftover_marks_split():
    src = discretize_lebesgue(Box((0,), (2,)), 1, K=4)
    tgt = PointConfiguration(np.array([[0.5]]), np.array([2]), 4)
    cells = extract_cells(solve_semicoupling_source(src, tgt, CostSpec()))
    assert cells.owner[1] == UNOWNED
    assert cells.owner[0] == SPLIT
    assert cells.split[0] == [(0, 2), (CEMETERY, 2)]


@given(st.integers(0, 2**31), st.integers(1, 6))
def test_volumes_sum_to_target_total(seed, n):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0, 2, size=(n, 2))
    w = rng.integers(1, 4, size=n).astype(float)
    w = w * 4 / w.sum()
    tgt = from_weights(pts, w, K)
    src = discretize_lebesgue(Box((0, 0), (2, 2)), 4, K=K)
    tgt.masses[-1] += src.total - tgt.total
    cells = extract_cells(solve_coupling(src, tgt, CostSpec()))
    assert cells.volumes().sum() == src.total
    assert np.array_equal(cells.volumes(), tgt.masses)


@given(st.integers(0, 2**31), st.tuples(st.integers(-5, 5), st.integers(-5, 5)))
def test_cells_translation_equivariant(seed, g):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0, 2, size=(4, 2))
    a = coupling_cells(Box((0, 0), (2, 2)), 4, pts, [1, 1, 1, 1])
    b = coupling_cells(Box(g, (2, 2)), 4, pts + np.array(g), [1, 1, 1, 1])
    assert np.array_equal(a.owner, b.owner)
    assert a.split == b.split
    t = a.translate(g)
    assert t.source.box == b.source.box
    assert np.array_equal(t.owner, b.owner)


@pytest.mark.parametrize("pts", [[[1.0, 1.0]], [[0.5, 1.0], [1.5, 1.0]]])
def test_convexity_few_atoms(pts):
    cells = coupling_cells(Box((0, 0), (2, 2)), 8, pts, [4 / len(pts)] * len(pts))
    report = convexity_audit(cells, n_chords=100, seed=1)
    assert report.violating_chords == 0
    assert report.total_chords == 100 * len(pts)


def test_convexity_requires_owned_cells():
    src = discretize_lebesgue(Box((0,), (1,)), 2, K=4)
    tgt = PointConfiguration(np.zeros((0, 1)), np.zeros(0), 4)
    with pytest.raises(ValueError):
        convexity_audit(extract_cells(solve_semicoupling_source(src, tgt, CostSpec())))


@pytest.mark.parametrize("pts", [[[1.0, 1.0]], [[0.5, 1.0], [1.5, 1.0]]])
def test_starlike_few_atoms_linear_cost(pts):
    cells = coupling_cells(Box((0, 0), (2, 2)), 8, pts, [4 / len(pts)] * len(pts), CostSpec(p=1))
    report = starlike_audit(cells, n_rays=50, seed=2)
    assert report.violating_rays == 0
    assert report.total_rays > 0


def test_starlike_rejects_one_dimension():
    cells = coupling_cells(Box((0,), (1,)), 4, [[0.5]], [1])
    with pytest.raises(ValueError):
        starlike_audit(cells)


def test_voronoi_single_atom():
    grid = discretize_lebesgue(Box((0, 0), (2, 2)), 2, K=K)
    atoms = from_weights(np.array([[5.0, 5.0]]), [1], K)
    assert np.all(voronoi_reference(atoms, grid).owner == 0)


def test_voronoi_splits_interval_at_midpoint():
    grid = discretize_lebesgue(Box((0,), (1,)), 4, K=K)
    atoms = from_weights(np.array([[0.0], [1.0]]), [1, 1], K)
    assert voronoi_reference(atoms, grid).owner.tolist() == [0, 0, 1, 1]


@given(st.integers(0, 2**31), st.sampled_from([2, 4]))
def test_voronoi_scale_invariant(seed, c):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0, 2, size=(5, 2))
    base = voronoi_reference(from_weights(pts, [1] * 5, K), discretize_lebesgue(Box((0, 0), (2, 2)), 4, K=K))
    big = voronoi_reference(from_weights(pts * c, [1] * 5, K),
                            discretize_lebesgue(Box((0, 0), (2 * c, 2 * c)), 4 // c, K=K))
    assert np.array_equal(base.owner, big.owner)


def test_symmetric_difference_examples():
    grid = discretize_lebesgue(Box((0,), (1,)), 4, K=4)
    atoms = from_weights(np.array([[0.0], [1.0]]), [1, 1], 4)
    a = voronoi_reference(atoms, grid)
    assert symmetric_difference(a, a) == 0
    b = voronoi_reference(from_weights(np.array([[0.0], [0.5]]), [1, 1], 4), grid)
    assert b.owner.tolist() == [0, 1, 1, 1]
    assert symmetric_difference(a, b) == 1


def test_svg_empty_map_is_frame_only(tmp_path):
    src = discretize_lebesgue(Box((0, 0), (1, 1)), 2, K=4)
    tgt = PointConfiguration(np.zeros((0, 2)), np.zeros(0), 4)
    cells = extract_cells(solve_semicoupling_source(src, tgt, CostSpec()))
    render_svg(cells, tmp_path / "e.svg")
    text = (tmp_path / "e.svg").read_text()
    assert "cell-" not in text and "<circle" not in text
    assert text.count("<rect") == 1


def test_svg_single_cell_and_deterministic(tmp_path):
    cells = coupling_cells(Box((0, 0), (1, 1)), 4, [[0.5, 0.5]], [1])
    render_svg(cells, tmp_path / "a.svg")
    render_svg(cells, tmp_path / "b.svg")
    text = (tmp_path / "a.svg").read_text()
    assert text == (tmp_path / "b.svg").read_text()
    assert 'id="cell-0"' in text and text.count("<circle") == 1


def test_svg_needs_two_dimensions(tmp_path):
    cells = coupling_cells(Box((0,), (1,)), 4, [[0.5]], [1])
    with pytest.raises(ValueError):
        render_svg(cells, tmp_path / "x.svg")


def test_cells_csv(tmp_path):
    cells = coupling_cells(Box((0, 0), (4, 1)), 4, [[0.5, 0.5], [2.5, 0.5]], [1, 3])
    cells.write_csv(tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines == ["tgt_id,cell_count,volume_quanta,split_flag",
                     f"0,16,{K},0", f"1,48,{3 * K},0"]
