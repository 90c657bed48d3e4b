from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from equitransport.domain import Box
from equitransport.randmeas import (PointConfiguration, discretize_lebesgue, from_weights,
                                    sample_binomial, sample_poisson)
from equitransport.metrics import (
    MassImbalanceError, jitter, metric_axiom_audit, mosaic_run, random_triple_factory,
    stability_probe, torus_spec, wasserstein_window, window_cost, wiener_mosaic_step)

K = 2**20
LINE = Box((0,), (4,))
SQUARE = Box((0, 0), (3, 3))


def atom(x, w=1.0, d=1):
    return from_weights(np.array([x], dtype=float).reshape(1, d), [w], K)


def test_equal_measures_cost_zero():
    pts = sample_binomial(SQUARE, 1, 4, K)
    assert window_cost(pts, pts, 2.0, SQUARE).objective == 0


@pytest.mark.parametrize("p", [1.0, 2.0, 3.0])
def test_two_atoms_across_the_seam(p):
    # 0.125 and 3.375 are 0.75 apart through the wrap on a side-4 torus
    got = wasserstein_window(atom(0.125), atom(3.375), p, LINE)
    assert got == pytest.approx(0.75**p / 4, abs=1e-9)


def test_torus_needs_cube():
    with pytest.raises(ValueError):
        torus_spec(Box((0, 0), (2, 3)))


def test_mass_imbalance_raises():
    with pytest.raises(MassImbalanceError):
        window_cost(atom(0.5, 1.0), atom(1.5, 2.0), 2.0, LINE)


def test_degenerate_triple_slack_nonnegative():
    a, b = atom(0.5), atom(2.0)
    report = metric_axiom_audit([(a, b, a)], 2.0, LINE)
    row = report.rows[0]
    assert row.identity and row.symmetry
    assert row.triangle_slack >= 0


def test_collinear_linear_cost_slack_zero():
    report = metric_axiom_audit([(atom(0.0), atom(1.0), atom(0.5))], 1.0, LINE)
    assert report.rows[0].triangle_slack == pytest.approx(0.0, abs=1e-12)


@given(st.integers(0, 2**20))
def test_symmetry_exact_on_random_pairs(seed):
    a = sample_binomial(SQUARE, 1, 2 * seed, K)
    b = sample_binomial(SQUARE, 1, 2 * seed + 1, K)
    assert window_cost(a, b, 2.0, SQUARE).objective == window_cost(b, a, 2.0, SQUARE).objective


def test_random_triples_axioms(tmp_path):
    report = metric_axiom_audit(random_triple_factory(SQUARE, 4), 2.0, SQUARE, n_seeds=5)
    assert report.identity_exact and report.symmetry_exact
    assert report.min_triangle_slack >= -1e-9
    assert report.holds()
    report.write_pairs_csv(tmp_path / "p.csv")
    report.write_triangle_csv(tmp_path / "t.csv")
    assert (tmp_path / "p.csv").read_text().splitlines()[0] == "seed,pair,wpp_per_vol"
    assert len((tmp_path / "t.csv").read_text().splitlines()) == 6


def test_lebesgue_grid_against_itself():
    leb = discretize_lebesgue(SQUARE, 4, 1, K)
    assert window_cost(leb, leb, 2.0, SQUARE).objective == 0


def test_jitter_zero_is_identity():
    pts = sample_binomial(SQUARE, 1, 0, K)
    assert jitter(pts, 0.0, 1, SQUARE) is pts


@given(st.floats(0.01, 0.5), st.integers(0, 1000))
def test_jitter_moves_at_most_eps(eps, seed):
    pts = sample_binomial(SQUARE, 1, seed, K)
    moved = jitter(pts, eps, seed, SQUARE)
    step = torus_spec(SQUARE, 1.0).rowwise(moved.positions, pts.positions)
    assert np.all(step <= eps)


def test_single_atom_jitter_cost():
    eps = 0.25
    row = stability_probe(atom([1.5, 1.5], d=2), [eps], 2.0, SQUARE)[0]
    assert row.eps_bound == pytest.approx(eps**2 / 9)
    assert row.wpp_per_vol == pytest.approx(row.move_bound, abs=1e-9)
    assert row.move_bound <= row.eps_bound + 1e-12


def test_poisson_jitter_bound():
    pts = sample_poisson(SQUARE, 1.0, 7, K)
    beta = pts.total / K / SQUARE.volume
    for row in stability_probe(pts, [0.25, 0.125, 0.0625], 2.0, SQUARE, seed=7, k=4):
        assert row.wpp_per_vol <= row.move_bound + 1e-9
        assert row.move_bound <= beta * row.eps**2 + 1e-12
        assert row.tail_mass_cost >= 0


def test_mosaic_sigma_zero_has_no_drift():
    pts = sample_binomial(SQUARE, 1, 3, K)
    st_ = wiener_mosaic_step(pts, 0.0, 1, SQUARE, k=4)
    assert st_.drift == 0.0 and st_.points is pts


def test_mosaic_reproducible():
    pts = sample_binomial(SQUARE, 1, 3, K)
    a = mosaic_run(pts, 0.05, 2, 9, SQUARE, k=4)
    b = mosaic_run(pts, 0.05, 2, 9, SQUARE, k=4)
    assert [s.drift for s in a] == [s.drift for s in b]
    assert np.array_equal(a[-1].points.positions, b[-1].points.positions)


def test_mosaic_negative_sigma():
    with pytest.raises(ValueError):
        wiener_mosaic_step(sample_binomial(SQUARE, 1, 0, K), -1.0, 0, SQUARE)


def test_mosaic_median_drift_grows_with_sigma():
    medians = []
    for sigma in (0.01, 0.05, 0.2):
        drifts = [wiener_mosaic_step(sample_binomial(SQUARE, 1, s, K), sigma, s, SQUARE, k=4).drift
                  for s in range(7)]
        medians.append(float(np.median(drifts)))
    assert medians == sorted(medians)
    assert medians[-1] > 0


def test_empty_configuration_is_fine():
    empty = PointConfiguration(np.zeros((0, 2)), np.zeros(0), K)
    assert window_cost(empty, empty, 2.0, SQUARE).objective == 0
