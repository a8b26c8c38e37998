import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from uavsearch.channel import ChannelParams, Measurement
from uavsearch.estimation import (
    DegenerateGeometryError,
    MeasurementBuffer,
    alternating_spiral_pattern,
    check_pattern_conditions,
    empirical_gain_mse,
    estimator_error_trace,
    fit_local_arrays,
    fit_local_model,
    mse_approx,
    optimal_measurement_radius,
    variance_lower_bound,
)


def radius_by_roots(M, r0, sigma, lg2):
    """Stationary point of the MSE approximation: r^6 + r0^2 r^4 - 6 sigma^2 r0^2 / (M lg2^2) = 0."""
    c = 6.0 * sigma**2 * r0**2 / (M * lg2**2)
    roots = np.roots([1.0, 0.0, r0**2, 0.0, 0.0, 0.0, -c])
    real = roots[(abs(roots.imag) < 1e-9) & (roots.real > 0)].real
    return float(real[0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=4, max_size=4), st.integers(0, 2**31))
def test_noiseless_linear_field_recovered(theta, seed):
    rng = np.random.default_rng(seed)
    c0 = rng.uniform(-100, 100, 3)
    X = c0 + rng.uniform(-20, 20, (30, 3))
    y = theta[0] + (X - c0) @ np.array(theta[1:])
    m = fit_local_arrays(X, y, c0)
    assert m.alpha == pytest.approx(theta[0], abs=1e-8)
    assert np.allclose(m.beta, theta[1:], atol=1e-9)


def test_coplanar_positions_are_degenerate():
    X = np.column_stack([np.arange(10.0), np.arange(10.0) ** 2, np.zeros(10)])
    with pytest.raises(DegenerateGeometryError) as err:
        fit_local_arrays(X, np.zeros(10), np.zeros(3))
    assert np.allclose(np.abs(err.value.directions[0]), [0, 0, 1])


def test_too_few_points():
    with pytest.raises(DegenerateGeometryError):
        fit_local_arrays(np.eye(3), np.zeros(3), np.zeros(3))


def test_buffer_keeps_latest_los_only():
    buf = MeasurementBuffer(2, 5)
    for i in range(8):
        buf.push(Measurement(np.array([i, i * i, i**3], float), 2, float(i), True, float(i)))
    assert not buf.push(Measurement(np.zeros(3), 2, 99.0, False, 9.0))
    assert list(buf.values) == [3.0, 4.0, 5.0, 6.0, 7.0]
    assert buf.last_time == 7.0
    with pytest.raises(ValueError):
        buf.push(Measurement(np.zeros(3), 1, 0.0, True))
    m = fit_local_model(buf, np.zeros(3))
    assert m.n_used == 5


def test_reanchor_preserves_predictions():
    X = np.random.default_rng(0).normal(size=(20, 3)) * 10
    y = 1.0 + X @ np.array([0.3, -0.2, 0.1]) + np.random.default_rng(1).normal(size=20)
    m = fit_local_arrays(X, y, np.zeros(3))
    m2 = m.reanchor([5.0, -3.0, 2.0])
    pts = np.random.default_rng(2).normal(size=(5, 3))
    assert np.allclose(m.predict(pts), m2.predict(pts))


@pytest.mark.parametrize("M", [40, 60, 80, 100])
def test_spiral_meets_optimality_conditions(M):
    P = alternating_spiral_pattern(M, 17.0, c0=(3.0, -2.0, 50.0))
    res = check_pattern_conditions(P, (3.0, -2.0, 50.0), 17.0)
    assert max(res.values()) < 1e-12
    # mean squared distance to the anchor is r1^2 (the axial ends reach slightly beyond r1)
    assert np.mean(np.sum((P - [3.0, -2.0, 50.0]) ** 2, axis=1)) == pytest.approx(17.0**2)


@pytest.mark.parametrize("M", [40, 100])
def test_spiral_attains_variance_floor(M):
    P = alternating_spiral_pattern(M, 20.0)
    A = np.column_stack([np.ones(M), P])
    analytic = 25.0 * np.trace(np.linalg.inv(A.T @ A))
    assert analytic == pytest.approx(variance_lower_bound(M, 20.0, 5.0), rel=1e-10)


def test_rotated_spiral_still_optimal():
    q, _ = np.linalg.qr(np.random.default_rng(5).normal(size=(3, 3)))
    P = alternating_spiral_pattern(60, 18.0, frame=q)
    assert max(check_pattern_conditions(P, np.zeros(3), 18.0).values()) < 1e-12


def test_random_pattern_worse_than_floor():
    rng = np.random.default_rng(3)
    d = rng.normal(size=(100, 3))
    d *= (20.0 * rng.uniform(0, 1, 100) ** (1 / 3) / np.linalg.norm(d, axis=1))[:, None]
    A = np.column_stack([np.ones(100), d])
    assert 25.0 * np.trace(np.linalg.inv(A.T @ A)) > variance_lower_bound(100, 20.0, 5.0)


def test_variance_floor_value():
    assert variance_lower_bound(100, 20.0, 5.0) == pytest.approx(0.25 * 1.0225)


@pytest.mark.parametrize("M", [40, 60, 80, 100])
@pytest.mark.parametrize("r0", [10.0, 20.0, 30.0])
def test_optimal_radius_two_routes(M, r0):
    brent = optimal_measurement_radius(M, r0, 5.0, 3.5e-3)
    assert brent == pytest.approx(radius_by_roots(M, r0, 5.0, 3.5e-3), abs=0.06)
    grid = np.linspace(1, 60, 59001)
    assert brent == pytest.approx(grid[np.argmin(mse_approx(M, r0, grid, 5.0, 3.5e-3))], abs=0.06)


def test_error_trace_monte_carlo_near_analytic():
    P = alternating_spiral_pattern(100, 20.0)
    r = estimator_error_trace(P, 5.0, 20000, np.random.default_rng(4))
    assert r["analytic_trace"] == pytest.approx(0.25 * 1.0225, rel=1e-10)
    assert r["trace"] == pytest.approx(r["analytic_trace"], rel=0.05)


def test_gain_mse_monte_carlo_matches_closed_form():
    c0 = np.array([80.0, 60.0, 100.0])
    P = alternating_spiral_pattern(60, 18.0, c0)
    r = empirical_gain_mse(ChannelParams(sigma=5.0), np.zeros(3), c0, P, 20.0, 5.0, 40000,
                           np.random.default_rng(6))
    assert r["mse"] == pytest.approx(r["mse_exact"], rel=0.03)
