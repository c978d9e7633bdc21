import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.polynomial import polynomial as P

from perimeter_deepc import mfd

import oracles


def _exact(c, hi, n=200):
    x = np.linspace(0.0, hi, n)
    return np.c_[x, np.maximum(P.polyval(x, c), 0.0)]


def test_symmetric_quartic_example():
    c = P.polymul([0, 0, 1], P.polypow([2, -1], 2))      # rho^2 (2 - rho)^2
    est = mfd.fit(_exact(c, 2.0))
    assert est.rho_cr == pytest.approx(1.0, abs=1e-6)
    assert est.rho_max == pytest.approx(2.0, abs=1e-6)
    assert est.rmse < 1e-10


def test_reference_shaped_curve_recovers_marked_points():
    c = oracles.skewed_quartic(16.24, 101.8, 225.0)
    est = mfd.fit(_exact(c, 101.8, 300))
    assert est.rho_cr == pytest.approx(16.24, rel=1e-3)
    assert est.rho_max == pytest.approx(101.8, rel=1e-3)


@pytest.mark.parametrize("seed", range(10))
def test_noisy_samples_recover_critical_density(seed):
    rng = np.random.default_rng(seed)
    c = oracles.skewed_quartic(16.24, 101.8, 225.0)
    r = rng.uniform(0, 101.8, 500)
    f = P.polyval(r, c) * (1 + 0.05 * rng.standard_normal(500))
    est = mfd.fit(np.c_[r, np.maximum(f, 0.0)])
    assert abs(est.rho_cr - 16.24) / 16.24 < 0.05


@pytest.mark.parametrize("seed", range(5))
def test_noisy_parabola_recovers_both_densities(seed):
    rng = np.random.default_rng(100 + seed)
    R = 80.0
    r = rng.uniform(0, R, 500)
    f = 0.1 * r * (R - r) * (1 + 0.05 * rng.standard_normal(500))
    est = mfd.fit(np.c_[r, np.maximum(f, 0.0)])
    assert abs(est.rho_cr - R / 2) / (R / 2) < 0.05
    assert abs(est.rho_max - R) / R < 0.05


def test_residual_is_orthogonal_to_monomials():
    rng = np.random.default_rng(3)
    r = rng.uniform(0, 50, 120)
    f = np.abs(r * (60 - r) + rng.normal(0, 30, 120))
    est = mfd.fit(np.c_[r, f])
    resid = P.polyval(r, est.coefficients) - f
    V = np.vander(r / r.max(), 5, increasing=True)
    assert np.max(np.abs(V.T @ resid)) < 1e-8 * np.linalg.norm(f)


@settings(max_examples=30, deadline=None)
@given(a=st.floats(0.1, 10.0), b=st.floats(0.1, 10.0), seed=st.integers(0, 10_000))
def test_scale_equivariance(a, b, seed):
    rng = np.random.default_rng(seed)
    r = rng.uniform(0, 40, 60)
    f = np.abs(r * (45 - r) * (1 + 0.1 * rng.standard_normal(60)))
    e1 = mfd.fit(np.c_[r, f])
    e2 = mfd.fit(np.c_[a * r, b * f])
    assert e2.rho_cr == pytest.approx(a * e1.rho_cr, rel=1e-5)
    if e1.rho_max is None:
        assert e2.rho_max is None
    else:
        assert e2.rho_max == pytest.approx(a * e1.rho_max, rel=1e-5)
    assert e2.rmse == pytest.approx(b * e1.rmse, rel=1e-6)


def _hump(R, t, peak=1.0):
    """``rho (R - rho) (t - rho)^2`` for ``t > R``: positive on ``(0, R)`` with a single maximum."""
    c = -P.polyfromroots([0.0, R, t, t])
    x = np.linspace(0, R, 1001)
    return c * peak / P.polyval(x, c).max()


def test_critical_density_beats_neighbours():
    c = _hump(90.0, 150.0, 100.0)
    est = mfd.fit(_exact(c, 90.0))
    x = np.linspace(0, est.rho_max, 20001)
    assert P.polyval(est.rho_cr, est.coefficients) >= P.polyval(x, est.coefficients).max() - 1e-9
    assert abs(P.polyval(est.rho_max, est.coefficients)) < 1e-6


def test_missing_root_reported_with_diagnostic():
    x = np.linspace(0, 10, 50)
    est = mfd.fit(np.c_[x, x * (25 - x)])                     # root inside the search window
    assert est.rho_max == pytest.approx(25.0, rel=1e-6)
    y = x * (40 - x)                                          # root beyond 3x the largest density
    est = mfd.fit(np.c_[x, y])
    assert est.rho_max is None
    assert "no zero-flow density" in est.diagnostic
    assert est.rho_cr == pytest.approx(20.0, rel=1e-6)


def test_degenerate_inputs():
    x = np.linspace(0, 1, 20)
    with pytest.raises(mfd.DegenerateFitError):
        mfd.fit(np.c_[x, np.zeros(20)])
    with pytest.raises(ValueError):
        mfd.fit(np.c_[x[:5], x[:5]])
    with pytest.raises(ValueError):
        mfd.fit(np.c_[x - 0.5, x])


def test_critical_reference_stacks_and_checks_regions():
    e = mfd.fit(_exact(P.polymul([0, 0, 1], P.polypow([2, -1], 2)), 2.0))
    assert np.allclose(mfd.critical_reference([e] * 4), 1.0)
    assert np.allclose(mfd.critical_reference({"a": e, "b": e}, ["a", "b"]), [1.0, 1.0])
    with pytest.raises(KeyError):
        mfd.critical_reference({"a": e}, ["a", "b"])
    with pytest.raises(KeyError):
        mfd.critical_reference([e, None])


def test_critical_reference_matches_grid_argmax_for_eight_regions():
    rng = np.random.default_rng(8)
    ests, truth = [], []
    for _ in range(8):
        R = rng.uniform(40, 120)
        c = _hump(R, R * rng.uniform(1.05, 4.0), rng.uniform(100, 300))
        est = mfd.fit(_exact(c, R))
        x = np.linspace(0, R, 200001)
        truth.append(x[np.argmax(P.polyval(x, c))])
        ests.append(est)
    assert np.allclose(mfd.critical_reference(ests), truth, atol=1e-3)


def test_scatter_csv_round_trip_and_errors(tmp_path):
    pts = np.random.default_rng(1).uniform(0, 50, (30, 2))
    p = tmp_path / "s.csv"
    mfd.write_scatter_csv(p, pts)
    assert np.array_equal(mfd.read_scatter_csv(p), pts)
    bad = tmp_path / "bad.csv"
    bad.write_text("density,flow\n1,2\n3,oops\n")
    with pytest.raises(ValueError, match=":3:"):
        mfd.read_scatter_csv(bad)
    bad.write_text("rho,q\n1,2\n")
    with pytest.raises(ValueError, match=":1:"):
        mfd.read_scatter_csv(bad)


def test_fit_csv_and_summary(tmp_path):
    e = mfd.fit(_exact(P.polymul([0, 0, 1], P.polypow([2, -1], 2)), 2.0))
    p = tmp_path / "fit.csv"
    mfd.write_fit_csv(p, e, samples=11)
    lines = p.read_text().splitlines()
    assert lines[0] == "density,flow_fit" and len(lines) == 12
    assert mfd.summary_line(e).splitlines()[0] == "rho_cr,rho_max,rmse"
