import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from scipy.optimize import minimize

from uavsearch.allocation import (
    DegeneratePlane,
    GainVector,
    NoSurfaceError,
    Sphere,
    allocate,
    balance_F,
    balancing_power,
    existence_check,
    grad_F_wrt_gains,
    kkt_residual,
    primal_dual_sensitivity,
    sphere_parameters,
    sumrate_power,
    sumrate_power_batch,
    system_objective,
    user_objective,
)
from uavsearch.channel import ChannelParams, db_to_linear, los_gain_db
from uavsearch.citymap import Scenario

gains = st.lists(st.floats(0.05, 50.0), min_size=1, max_size=6)


def scen(K, kind="sum-rate", objective="comm", p_total=2.0, p0=None, weights=None, users=None, bs=None):
    users = np.zeros((K, 3)) if users is None else users
    bs = np.array([500.0, 0.0, 10.0]) if bs is None else bs
    return Scenario(bs, users, p0=K * p_total if p0 is None else p0, p_total=p_total, problem_kind=kind,
                    objective=objective, weights=weights)


def slsqp_sumrate(g, PT, w):
    K = len(g)
    res = minimize(lambda p: -np.sum(w * np.log2(1 + np.maximum(p, 0) * g)), np.full(K, PT / K),
                   bounds=[(0, PT)] * K, constraints=[{"type": "eq", "fun": lambda p: p.sum() - PT}],
                   method="SLSQP", options={"ftol": 1e-14, "maxiter": 500})
    return -res.fun


@settings(max_examples=100, deadline=None)
@given(gains, st.floats(0.1, 10.0))
def test_balancing_equalizes_snr_and_spends_budget(g, PT):
    g = np.array(g)
    r = balancing_power(g, PT)
    snr = r.p * g
    assert np.max(np.abs(snr - r.gamma)) < 1e-12 * max(1.0, r.gamma)
    assert r.p.sum() == pytest.approx(PT, rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(gains, st.floats(0.1, 10.0))
def test_waterfilling_matches_general_solver(g, PT):
    g = np.array(g)
    w = np.ones(len(g))
    r = sumrate_power(g, PT)
    assert np.all(r.p >= 0) and r.p.sum() == pytest.approx(PT, rel=1e-12)
    assert r.fu_value >= slsqp_sumrate(g, PT, w) - 1e-7


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.05, 50.0), min_size=2, max_size=6), st.floats(0.1, 10.0), st.integers(0, 2**31))
def test_weighted_waterfilling_and_batch_agree(g, PT, seed):
    g = np.array(g)
    w = np.random.default_rng(seed).uniform(0.5, 2.0, len(g))
    r = sumrate_power(g, PT, w)
    batch = sumrate_power_batch(g[None, :], PT, w)[0]
    assert np.allclose(r.p, batch, atol=1e-10 * PT)
    assert r.fu_value >= slsqp_sumrate(g, PT, w) - 1e-7


@settings(max_examples=100, deadline=None)
@given(gains, st.floats(0.1, 10.0))
def test_kkt_residual_vanishes(g, PT):
    g = np.array(g)
    for kind in ("balancing", "sum-rate"):
        sc = scen(len(g), kind, p_total=PT)
        r = allocate(g, sc)
        res = kkt_residual(r.z, r.multipliers, g, sc)
        assert np.max(np.abs(res)) < 1e-8 * max(1.0, np.max(np.abs(r.multipliers)))
        assert np.all(r.multipliers >= -1e-15)


def test_sensing_balancing_uses_weights():
    sc = scen(3, "balancing", "sensing", weights=[1.0, 2.0, 4.0])
    g = np.array([1.0, 3.0, 0.5])
    r = allocate(g, sc)
    vals = sc.weights * r.p * g
    assert np.ptp(vals) < 1e-12 and r.fu_value == pytest.approx(vals[0])


def test_comm_balancing_requires_common_weight():
    with pytest.raises(ValueError):
        scen(2, "balancing", weights=[1.0, 2.0])


@settings(max_examples=100, deadline=None)
@given(st.floats(0.05, 50.0), gains, st.floats(0.1, 10.0), st.sampled_from(["balancing", "sum-rate"]))
def test_grad_F_matches_finite_differences(g0, g, PT, kind):
    g = np.array(g)
    sc = scen(len(g), kind, p_total=PT)
    gv = GainVector(g0, g)
    d = grad_F_wrt_gains(gv, sc)
    assume(kind == "balancing" or not d.nonsmooth)
    h0 = 1e-6 * g0
    fd0 = (balance_F(GainVector(g0 + h0, g), sc) - balance_F(GainVector(g0 - h0, g), sc)) / (2 * h0)
    assert d.dg0 == pytest.approx(fd0, rel=1e-5, abs=1e-9)
    for k in range(len(g)):
        e = np.zeros(len(g))
        e[k] = 1e-6 * g[k]
        fd = (balance_F(GainVector(g0, g + e), sc) - balance_F(GainVector(g0, g - e), sc)) / (2 * e[k])
        assert d.dgu[k] == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_envelope_gradient_equals_implicit_route():
    rng = np.random.default_rng(3)
    for kind in ("balancing", "sum-rate"):
        for _ in range(20):
            g = rng.uniform(1.0, 10.0, 3)
            sc = scen(3, kind)
            gv = GainVector(2.0, g)
            a = allocate(g, sc)
            if a.nonsmooth:
                continue
            dzl = primal_dual_sensitivity(gv, a, sc)
            nz = a.z.size
            if kind == "balancing":
                dfu = math.log2(math.e) / (1 + a.gamma) * dzl[nz - 1]
            else:
                den = 1 + a.p * g
                dfu = (g / den) @ dzl[:nz] / math.log(2) + a.p / den / math.log(2)
            assert np.allclose(-dfu, grad_F_wrt_gains(gv, sc, a).dgu, rtol=1e-8)


@pytest.mark.parametrize("K", [1, 2, 4])
def test_sphere_surface_zeroes_F(K):
    rng = np.random.default_rng(K)
    users = np.column_stack([rng.uniform(0, 100, (K, 2)), np.zeros(K)])
    sc = scen(K, "balancing", p_total=1.0, p0=3.0 / K, users=users)
    sp = sphere_parameters(sc)
    assert isinstance(sp, Sphere)
    params = ChannelParams()
    for _ in range(50):
        d = rng.normal(size=3)
        x = sp.center + sp.radius * d / np.linalg.norm(d)
        g = db_to_linear([los_gain_db(params, x, u) for u in sc.node_positions])
        assert abs(balance_F(GainVector(g[0], g[1:]), sc)) < 1e-9


def test_degenerate_plane_when_powers_match():
    users = np.array([[0.0, 0.0, 0.0]])
    sc = scen(1, "balancing", p_total=1.0, p0=1.0, users=users, bs=np.array([100.0, 0.0, 0.0]))
    pl = sphere_parameters(sc)
    assert isinstance(pl, DegeneratePlane)
    # the mid-perpendicular plane x1 = 50
    assert pl.normal @ np.array([50.0, 7.0, 3.0]) == pytest.approx(pl.offset)


def test_no_surface_raises():
    # BS midway between two users with a strong backhaul: F > 0 everywhere
    users = np.array([[0.0, 0.0, 0.0], [100.0, 0.0, 0.0]])
    sc = scen(2, "balancing", p_total=1.0, p0=1.0, users=users, bs=np.array([50.0, 0.0, 0.0]))
    with pytest.raises(NoSurfaceError):
        sphere_parameters(sc)


def test_existence_check_sign_change():
    sc = scen(2, "sum-rate")
    hi = GainVector(100.0, np.array([0.01, 0.01]))
    lo = GainVector(0.01, np.array([100.0, 100.0]))
    assert existence_check(sc, hi, lo)
    assert not existence_check(sc, hi, hi)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.05, 50.0), min_size=3, max_size=3), st.floats(0.05, 50.0),
       st.sampled_from(["balancing", "sum-rate"]))
def test_system_objective_vectorized_matches_scalar(g, g0, kind):
    g = np.array(g)
    sc = scen(3, kind)
    a = allocate(g, sc)
    scalar = min(math.log2(1 + sc.p0 * g0), user_objective(g, a.p, sc))
    assert system_objective(np.array([g0]), g[None, :], sc)[0] == pytest.approx(scalar, rel=1e-12)
