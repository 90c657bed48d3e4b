from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from equitransport.domain import (Box, CostSpec, LatticePoint, Window, cost, translate_plan,
                                  window_cells)
from equitransport.randmeas import discretize_lebesgue, sample_poisson
from equitransport.solver import integer_objective, solve_semicoupling_source


def test_window_r0_d1():
    cells = window_cells(Window(LatticePoint((0,)), 0))
    assert [c.coords for c in cells] == [(-1,), (0,), (1,)]


def test_window_r1_d2_is_5x5_square():
    cells = window_cells(Window(LatticePoint((0, 0)), 1))
    assert len(cells) == 25
    coords = np.array([c.coords for c in cells])
    assert coords.min() == -2 and coords.max() == 2
    assert [tuple(c) for c in coords] == sorted(tuple(c) for c in coords)


def test_window_translated_r0():
    assert [c.coords for c in window_cells(Window(LatticePoint((3,)), 0))] == [(2,), (3,), (4,)]


@given(st.integers(0, 2), st.integers(1, 3))
def test_window_cardinality(r, d):
    if d == 3 and r == 2:
        r = 1
    w = Window(LatticePoint((0,) * d), r)
    assert len(window_cells(w)) == (2 ** (r + 1) + 1) ** d == w.n_cells


def test_lattice_point_validation():
    with pytest.raises(ValueError):
        LatticePoint((0, 0, 0, 0))
    with pytest.raises(ValueError):
        LatticePoint((2**31,))


def test_cost_examples():
    assert cost((0, 0), (3, 4), CostSpec(p=2)) == pytest.approx(25.0)
    assert cost((0.5,), (7.5,), CostSpec(p=1, geometry="torus", torus_side=8)) == 1.0
    assert cost((0.3, 0.2), (0.3, 0.2), CostSpec(p=2)) == 0.0


def test_cost_dimension_mismatch():
    with pytest.raises(ValueError):
        cost((0, 0), (1,), CostSpec())


def test_cost_spec_rejects_nonpositive_p():
    with pytest.raises(ValueError):
        CostSpec(p=0)
    with pytest.raises(ValueError):
        CostSpec(p=-1.5)


def test_theta_table_must_be_monotone():
    with pytest.raises(ValueError):
        CostSpec(theta_table=((0, 0), (1, 2), (2, 1)))
    spec = CostSpec(theta_table=((0, 0), (1, 1), (2, 4)))
    assert spec.theta(1.5) == pytest.approx(2.5)


coord = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


@given(st.lists(st.tuples(coord, coord, coord, coord), min_size=1, max_size=50),
       st.sampled_from([0.5, 1.0, 2.0, 3.0]))
def test_cost_symmetric_exact(pairs, p):
    arr = np.array(pairs)
    x, y = arr[:, :2], arr[:, 2:]
    for spec in (CostSpec(p=p), CostSpec(p=p, geometry="torus", torus_side=7.0)):
        assert np.array_equal(spec.rowwise(x, y), spec.rowwise(y, x))


@given(st.floats(0, 2 * np.pi), st.sampled_from([0.5, 1.0, 2.0]))
def test_cost_strictly_increasing_along_rays(angle, p):
    spec = CostSpec(p=p)
    u = np.array([np.cos(angle), np.sin(angle)])
    x = np.array([0.3, -1.2])
    ts = np.linspace(0.01, 10, 200)
    vals = spec.rowwise(np.repeat(x[None], ts.size, 0), x[None] + ts[:, None] * u[None])
    assert np.all(np.diff(vals) > 0)


def _small_plan(seed=4):
    box = Box((0, 0), (2, 2))
    src = discretize_lebesgue(box.expand(1), 4)
    tgt = sample_poisson(box, 1.0, seed)
    return solve_semicoupling_source(src, tgt, CostSpec(p=2))


def test_translate_plan_identity_and_inverse():
    plan = _small_plan()
    same = translate_plan(plan, LatticePoint((0, 0)))
    assert np.array_equal(same.target.positions, plan.target.positions)
    back = translate_plan(translate_plan(plan, LatticePoint((5, -3))), LatticePoint((-5, 3)))
    assert np.array_equal(back.target.positions, plan.target.positions)
    assert np.array_equal(back.source.centers(), plan.source.centers())
    assert np.array_equal(back.mass, plan.mass)


@given(st.integers(-20, 20), st.integers(-20, 20))
def test_translate_plan_preserves_integer_cost(a, b):
    plan = _small_plan()
    moved = translate_plan(plan, LatticePoint((a, b)))
    assert integer_objective(moved) == integer_objective(plan)


def test_box_split_tiles_exactly():
    box = Box((1, -2), (4, 6))
    parts = box.split(2)
    assert len(parts) == 4
    assert sum(p.volume for p in parts) == box.volume
    for i, p in enumerate(parts):
        assert box.covers(p)
        for q in parts[i + 1:]:
            assert p.is_disjoint(q)
