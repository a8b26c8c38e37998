import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from uavsearch.channel import (
    ChannelParams,
    Measurement,
    SingularityError,
    db_to_linear,
    dbm_to_watt,
    los_gain_db,
    los_gain_grad_db,
    los_gain_hessian_db,
    measure,
    nlos_penalty_db,
    objective_f0,
    objective_fk,
    true_gain_db,
)
from uavsearch.citymap import CityMap

P = ChannelParams()

coord = st.floats(-500, 500)


def test_gain_at_one_and_ten_meters():
    u = np.zeros(3)
    assert los_gain_db(P, [1.0, 0, 0], u) == pytest.approx(-46.53)
    assert los_gain_db(P, [0, 10.0, 0], u) == pytest.approx(-66.53)


def test_gain_vectorized_matches_loop():
    X = np.random.default_rng(0).uniform(-100, 100, (7, 3)) + 200
    loop = [los_gain_db(P, x, np.zeros(3)) for x in X]
    assert np.allclose(los_gain_db(P, X, np.zeros(3)), loop)


@settings(max_examples=100, deadline=None)
@given(coord, coord, st.floats(5, 300))
def test_gradient_matches_central_differences(a, b, c):
    x = np.array([a, b, c])
    u = np.array([3.0, -4.0, 1.0])
    h = 1e-4
    fd = np.array([(los_gain_db(P, x + h * e, u) - los_gain_db(P, x - h * e, u)) / (2 * h) for e in np.eye(3)])
    assert np.allclose(los_gain_grad_db(P, x, u), fd, rtol=1e-6, atol=1e-9)


def test_hessian_matches_gradient_differences():
    x = np.array([40.0, -20.0, 60.0])
    u = np.array([0.0, 0.0, 5.0])
    h = 1e-4
    fd = np.column_stack([(los_gain_grad_db(P, x + h * e, u) - los_gain_grad_db(P, x - h * e, u)) / (2 * h)
                          for e in np.eye(3)])
    assert np.allclose(los_gain_hessian_db(P, x, u), fd, rtol=1e-6, atol=1e-10)


def test_gain_singular_at_node():
    with pytest.raises(SingularityError):
        los_gain_db(P, np.zeros(3), np.zeros(3))
    with pytest.raises(SingularityError):
        los_gain_grad_db(P, np.ones(3), np.ones(3))


def test_true_gain_applies_penalty_only_when_blocked():
    h = np.zeros((10, 10))
    h[:, 5] = 50.0
    city = CityMap(h, 10.0, 10.0)
    u = np.array([5.0, 50.0, 0.0])
    clear = np.array([95.0, 50.0, 200.0])
    blocked = np.array([95.0, 50.0, 20.0])
    assert true_gain_db(P, city, clear, u) == pytest.approx(los_gain_db(P, clear, u))
    assert true_gain_db(P, city, blocked, u) == pytest.approx(los_gain_db(P, blocked, u) - 30.0)


def test_shadowing_frozen_per_position():
    p = ChannelParams(nlos_penalty_std=4.0)
    x = np.array([1.0, 2.0, 3.0])
    assert nlos_penalty_db(p, x, 1, seed=3) == nlos_penalty_db(p, x, 1, seed=3)
    draws = {nlos_penalty_db(p, x + [i, 0, 0], 1, seed=3) for i in range(20)}
    assert len(draws) > 1


def test_measurement_noise_statistics():
    city = CityMap(np.zeros((40, 40)), 5.0, 10.0)
    p = ChannelParams(sigma=5.0)
    rng = np.random.default_rng(2)
    x = np.array([100.0, 100.0, 50.0])
    u = np.array([20.0, 20.0, 0.0])
    ys = np.array([measure(p, city, x, u, 1, rng).y for _ in range(4000)])
    g = los_gain_db(p, x, u)
    assert abs(ys.mean() - g) < 4 * 5.0 / math.sqrt(4000)
    assert abs(ys.std() - 5.0) < 0.25


def test_measurement_rejects_non_finite():
    with pytest.raises(ValueError):
        Measurement(np.zeros(3), 0, float("nan"), True)


def test_unit_conversions():
    assert dbm_to_watt(30.0) == pytest.approx(1.0)
    assert dbm_to_watt(-60.0) == pytest.approx(1e-9)
    assert db_to_linear(-60.0, 1e-9) == pytest.approx(1e3)
    assert db_to_linear(10.0) == pytest.approx(10.0)


def test_link_objectives():
    assert objective_f0(1.0, 3.0) == pytest.approx(2.0)
    assert objective_fk(1.0, 1.0) == pytest.approx(1.0)
    assert objective_fk(2.0, 3.0, "sensing", 0.5) == pytest.approx(3.0)
    with pytest.raises(ValueError):
        objective_fk(1.0, -1.0)
    with pytest.raises(ValueError):
        objective_f0(0.0, 1.0)


def test_params_validation():
    with pytest.raises(ValueError):
        ChannelParams(a0=1.0)
    with pytest.raises(ValueError):
        ChannelParams(sigma=-1.0)
