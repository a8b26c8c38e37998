import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.ndimage import grey_erosion

from uavsearch.citymap import (
    CityMap,
    ConfigurationError,
    DomainError,
    clearance_heights,
    generate_manhattan_map,
    is_full_los,
    los_indicator,
    make_scenario,
    place_users,
    top_fraction_min_height,
)

CITY = generate_manhattan_map(3)


def dense_los(city, x, u, factor=16):
    """Brute-force oracle: march the 3D segment at a multiple of the library's sample count."""
    hd = math.hypot(x[0] - u[0], x[1] - u[1])
    n = max(1, math.ceil(hd / (0.5 * city.cell_size))) * factor
    s = np.arange(1, n + 1) / n
    P = u[None, :] + s[:, None] * (x - u)[None, :]
    return bool(np.all(P[:, 2] > city.height_at(P[:, :2])))


def test_flat_map_is_all_los():
    city = CityMap(np.zeros((20, 20)), 5.0, 10.0)
    assert los_indicator(city, np.array([90.0, 90.0, 1.0]), np.array([1.0, 1.0, 0.0]))


def test_wall_blocks_low_ray_but_not_high_one():
    h = np.zeros((10, 10))
    h[:, 5] = 40.0
    city = CityMap(h, 10.0, 10.0)
    u = np.array([5.0, 50.0, 0.0])
    # samples every 5 m from u; the first one inside the wall (x=50) sits at s=45/90
    assert not los_indicator(city, np.array([95.0, 50.0, 79.0]), u)
    assert los_indicator(city, np.array([95.0, 50.0, 81.0]), u)


def test_clearance_is_exact_threshold():
    rng = np.random.default_rng(0)
    for _ in range(50):
        x = np.append(rng.uniform(0, 1000, 2), 0.0)
        u = np.append(rng.uniform(0, 1000, 2), rng.uniform(0, 10))
        c = clearance_heights(CITY, x[None, :2], u)[0]
        assert los_indicator(CITY, np.append(x[:2], c + 1e-6), u)
        assert not los_indicator(CITY, np.append(x[:2], c - 1e-6), u) or c - 1e-6 <= 0


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1000), st.floats(0, 1000), st.floats(0.1, 200), st.floats(0, 1000), st.floats(0, 1000),
       st.floats(0, 30))
def test_dense_oracle_implies_library_los(x1, x2, x3, u1, u2, u3):
    x = np.array([x1, x2, x3])
    u = np.array([u1, u2, u3])
    if dense_los(CITY, x, u):
        assert los_indicator(CITY, x, u)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1000), st.floats(0, 1000), st.floats(0.1, 150), st.floats(0, 1000), st.floats(0, 1000),
       st.floats(0, 20), st.floats(0, 300))
def test_upward_invariance(x1, x2, x3, u1, u2, u3, dz):
    x = np.array([x1, x2, x3])
    u = np.array([u1, u2, u3])
    if los_indicator(CITY, x, u):
        assert los_indicator(CITY, x + [0.0, 0.0, dz], u)


def test_colinear_invariance_with_one_cell_tolerance():
    eroded = CityMap(grey_erosion(CITY.heights, size=(3, 3)), CITY.cell_size, CITY.h_min)
    rng = np.random.default_rng(1)
    checked = 0
    for _ in range(2000):
        u = np.append(rng.uniform(100, 900, 2), 0.0)
        x = np.append(rng.uniform(100, 900, 2), rng.uniform(CITY.ceiling, CITY.ceiling + 100))
        lam = rng.uniform(1.0, 1.5)
        xp = u + lam * (x - u)
        if not CITY.contains(xp[:2]) or not los_indicator(CITY, x, u):
            continue
        checked += 1
        assert los_indicator(eroded, xp, u)
    assert checked > 500


def test_outside_positions_raise():
    with pytest.raises(DomainError):
        los_indicator(CITY, np.array([-1.0, 5.0, 50.0]), np.array([5.0, 5.0, 0.0]))


def test_invalid_maps_rejected():
    with pytest.raises(ValueError):
        CityMap(np.full((3, 3), -1.0), 5.0, 10.0)
    with pytest.raises(ValueError):
        CityMap(np.zeros((3, 3)), 0.0, 10.0)
    with pytest.raises(ValueError):
        CityMap(np.zeros(3), 5.0, 10.0)


@pytest.mark.parametrize("target", [0.18, 0.33])
def test_generator_hits_target_bcr(target):
    city = generate_manhattan_map(7, target_bcr=target)
    lot_share = (20.0 / 1000.0) ** 2
    assert target <= city.bcr <= target + lot_share + 1e-12


def test_map_b_analogue_band():
    for seed in range(5):
        assert 0.30 <= generate_manhattan_map(seed, target_bcr=0.33).bcr <= 0.36


def test_generator_is_deterministic_and_seed_sensitive():
    a = generate_manhattan_map(11)
    b = generate_manhattan_map(11)
    c = generate_manhattan_map(12)
    assert np.array_equal(a.heights, b.heights) and a.h_min == b.h_min
    assert not np.array_equal(a.heights, c.heights)


def test_h_min_is_top_fifth_minimum():
    hb = np.arange(1.0, 11.0)
    assert top_fraction_min_height(hb) == 9.0
    city = generate_manhattan_map(5)
    lots = np.unique(city.heights[city.heights > 0])
    assert city.h_min in lots


def test_flat_map_and_bad_targets():
    assert generate_manhattan_map(0, target_bcr=0.0).bcr == 0.0
    with pytest.raises(ConfigurationError):
        generate_manhattan_map(0, target_bcr=0.7)
    with pytest.raises(ConfigurationError):
        generate_manhattan_map(0, cell_size=7.0)


def test_users_on_open_ground_and_full_los_above():
    users = place_users(CITY, 4, 6)
    assert np.all(CITY.height_at(users[:, :2]) == 0) and np.all(users[:, 2] == 0)
    assert len({tuple(u) for u in users}) == 6
    sc = make_scenario(CITY, 4, 4)
    high = np.append(sc.user_positions[:, :2].mean(axis=0), CITY.ceiling + 2000.0)
    assert is_full_los(CITY, high, sc)


def test_scenario_bs_in_distance_band():
    for seed in range(5):
        sc = make_scenario(CITY, seed, 4)
        center = np.array(sc.meta["cluster_center"])
        d = np.hypot(*(sc.bs_position[:2] - center))
        assert 300.0 <= d <= 600.0
        assert sc.bs_position[2] >= CITY.h_min
        assert sc.p0 == pytest.approx(4 * sc.p_total)


def test_map_round_trip(tmp_path):
    p = tmp_path / "m.json"
    CITY.save(p)
    back = CityMap.load(p)
    assert np.array_equal(back.heights, CITY.heights) and back.h_min == CITY.h_min
    assert json.loads(p.read_text())["cell_size"] == 5.0
