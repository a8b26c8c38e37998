"""Power allocation, the balance function and its sensitivities.

All gains handled here are *linear and noise-normalized* (see
``channel.db_to_linear``).  Two problem kinds are supported:

* ``balancing``: maximize the worst user objective under a power budget.
  Written in epigraph form with variables ``z = (p_1..p_K, gamma)`` and
  constraints ``gamma - c_k p_k g_k <= 0`` (one per user) plus the budget.
  ``c_k`` is 1 for communication and the user weight for sensing.
* ``sum-rate``: maximize ``sum_k w_k log2(1 + p_k g_k)`` with constraints
  budget and ``-p_k <= 0``.

The balance function is ``F = f0(g0) - F_u``, where ``F_u`` is the optimal
user-side objective.  Its zero set is the surface the search tracks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .citymap import Scenario

__all__ = [
    "NumericalError",
    "NoSurfaceError",
    "SingularKKTError",
    "GainVector",
    "AllocationResult",
    "FGradient",
    "Sphere",
    "DegeneratePlane",
    "balancing_power",
    "sumrate_power",
    "sumrate_power_batch",
    "allocate",
    "user_objective",
    "balance_F",
    "grad_F_wrt_gains",
    "existence_check",
    "sphere_parameters",
    "kkt_residual",
    "kkt_system_blocks",
    "F_partials",
    "primal_dual_sensitivity",
    "system_objective",
]

LN2 = math.log(2.0)
NONSMOOTH_TOL = 1e-6


class NumericalError(RuntimeError):
    pass


class NoSurfaceError(ValueError):
    """The free-space balance surface has negative squared radius."""


class SingularKKTError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class GainVector:
    """Noise-normalized linear gains to the BS (``g0``) and the users (``gu``)."""

    g0: float
    gu: np.ndarray

    def __post_init__(self):
        gu = np.atleast_1d(np.asarray(self.gu, dtype=float))
        if not (self.g0 > 0 and np.all(gu > 0) and np.all(np.isfinite(gu)) and math.isfinite(self.g0)):
            raise ValueError("gains must be finite and positive")
        object.__setattr__(self, "gu", gu)
        object.__setattr__(self, "g0", float(self.g0))


@dataclass
class AllocationResult:
    """Optimal powers and multipliers.

    ``z`` holds the primal variables of the KKT system (powers, then the
    epigraph level for balancing) and ``multipliers`` the constraint
    multipliers in the order used by :func:`kkt_residual`.
    """

    p: np.ndarray
    multipliers: np.ndarray
    fu_value: float
    kind: str
    gamma: float | None = None
    active_set: tuple = ()
    nonsmooth: bool = False
    info: dict = field(default_factory=dict)

    @property
    def z(self) -> np.ndarray:
        return self.p if self.gamma is None else np.append(self.p, self.gamma)


class FGradient(NamedTuple):
    dg0: float
    dgu: np.ndarray
    nonsmooth: bool


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float


@dataclass(frozen=True)
class DegeneratePlane:
    """Plane ``normal . x = offset`` replacing the sphere when K P0 = P_T."""

    normal: np.ndarray
    offset: float


def _gain_scale(objective, weights, K):
    if objective == "sensing":
        return np.asarray(weights, dtype=float)
    return np.ones(K)


def _fu_of_gamma(gamma, objective, weight):
    if objective == "comm":
        return weight * np.log2(1.0 + gamma)
    return gamma


def _fu_prime(gamma, objective, weight):
    if objective == "comm":
        return weight / (LN2 * (1.0 + gamma))
    return 1.0


def _fu_second(gamma, objective, weight):
    if objective == "comm":
        return -weight / (LN2 * (1.0 + gamma) ** 2)
    return 0.0


def balancing_power(gu, p_total: float, objective: str = "comm", weights=None) -> AllocationResult:
    """Closed-form max-min allocation: every user sees the same (weighted) SNR.

    ``p_k = P_T / (c_k g_k sum_j 1/(c_j g_j))`` with ``c = 1`` for comm and
    ``c = weights`` for sensing.  Multipliers follow the epigraph form: the
    budget multiplier is ``F_u'(gamma) / sum_j 1/(c_j g_j)`` and each user
    multiplier is that value divided by ``c_k g_k``.
    """
    gu = np.atleast_1d(np.asarray(gu, dtype=float))
    K = gu.size
    weights = np.ones(K) if weights is None else np.asarray(weights, dtype=float)
    if np.any(gu <= 0) or p_total <= 0:
        raise ValueError("gains and budget must be positive")
    ge = gu * _gain_scale(objective, weights, K)
    inv = 1.0 / ge
    S = inv.sum()
    p = p_total * inv / S
    gamma = p_total / S
    w = weights[0]
    lam0 = _fu_prime(gamma, objective, w) / S
    lam = np.append(lam0 / ge, lam0)
    return AllocationResult(p=p, multipliers=lam, fu_value=float(_fu_of_gamma(gamma, objective, w)),
                            kind="balancing", gamma=float(gamma), active_set=tuple(range(K + 1)),
                            info={"objective": objective, "weight": float(w), "gain_scale": ge / gu})


def sumrate_power(gu, p_total: float, weights=None, max_iter: int = 200, tol: float = 1e-15) -> AllocationResult:
    """Weighted water-filling ``p_k = max(0, w_k L - 1/g_k)`` with the level ``L`` found by bisection.

    The bisection isolates the active set; the level is then solved
    exactly on that set so the budget is spent to machine precision.
    Multipliers are ordered (budget, -p_1 >= 0, ..., -p_K >= 0).
    """
    gu = np.atleast_1d(np.asarray(gu, dtype=float))
    K = gu.size
    mu = np.ones(K) if weights is None else np.asarray(weights, dtype=float)
    if np.any(gu <= 0) or p_total <= 0:
        raise ValueError("gains and budget must be positive")
    inv = 1.0 / gu

    def spent(level):
        return np.maximum(0.0, mu * level - inv).sum()

    lo, hi = 0.0, (p_total + inv.sum()) / mu.min()
    for it in range(max_iter):
        mid = 0.5 * (lo + hi)
        if spent(mid) > p_total:
            hi = mid
        else:
            lo = mid
        if hi - lo <= tol * hi:
            break
    else:
        raise NumericalError(f"water-filling bisection did not converge in {max_iter} iterations")
    level = 0.5 * (lo + hi)
    active = mu * level - inv > 0
    if not np.any(active):
        active[np.argmin(inv / mu)] = True
    level = (p_total + inv[active].sum()) / mu[active].sum()
    p = np.where(active, mu * level - inv, 0.0)
    p = np.maximum(p, 0.0)
    nu = 1.0 / (LN2 * level)
    lam_k = np.where(active, 0.0, nu - mu * gu / LN2)
    lam = np.concatenate([[nu], np.maximum(lam_k, 0.0)])
    fu = float(np.sum(mu * np.log2(1.0 + p * gu)))
    act = (0,) + tuple(int(k) + 1 for k in np.nonzero(~active)[0])
    return AllocationResult(p=p, multipliers=lam, fu_value=fu, kind="sum-rate", active_set=act,
                            nonsmooth=bool(np.any(p < NONSMOOTH_TOL)),
                            info={"level": float(level), "iterations": it + 1, "weights": mu})


def sumrate_power_batch(G, p_total: float, weights=None) -> np.ndarray:
    """Water-filling for many gain vectors at once (rows of ``G``); returns powers.

    Uses the sorted-threshold construction, exact up to rounding.
    """
    G = np.atleast_2d(np.asarray(G, dtype=float))
    n, K = G.shape
    mu = np.ones(K) if weights is None else np.asarray(weights, dtype=float)
    thr = 1.0 / (mu * G)
    order = np.argsort(thr, axis=1)
    inv_s = np.take_along_axis(1.0 / G, order, axis=1)
    mu_s = mu[order]
    thr_s = np.take_along_axis(thr, order, axis=1)
    levels = (p_total + np.cumsum(inv_s, axis=1)) / np.cumsum(mu_s, axis=1)
    ok = levels > thr_s
    # water levels are valid for a prefix of the sorted users; take the last valid one
    j = K - 1 - np.argmax(ok[:, ::-1], axis=1)
    level = levels[np.arange(n), j]
    return np.maximum(0.0, mu[None, :] * level[:, None] - 1.0 / G)


def allocate(gu, scenario: Scenario) -> AllocationResult:
    if scenario.problem_kind == "balancing":
        return balancing_power(gu, scenario.p_total, scenario.objective, scenario.weights)
    return sumrate_power(gu, scenario.p_total, scenario.weights)


def user_objective(gu, p, scenario: Scenario) -> float:
    gu = np.asarray(gu, dtype=float)
    if scenario.objective == "sensing":
        vals = scenario.weights * p * gu
    else:
        vals = scenario.weights * np.log2(1.0 + p * gu)
    return float(vals.min() if scenario.problem_kind == "balancing" else vals.sum())


def _f0(g0, p0):
    return math.log2(1.0 + p0 * g0)


def balance_F(gains: GainVector, scenario: Scenario, alloc: AllocationResult | None = None) -> float:
    """``f0(g0) - F_u(g_u, p*)``: positive when the backhaul is the stronger link."""
    alloc = allocate(gains.gu, scenario) if alloc is None else alloc
    return _f0(gains.g0, scenario.p0) - alloc.fu_value


def grad_F_wrt_gains(gains: GainVector, scenario: Scenario, alloc: AllocationResult | None = None) -> FGradient:
    """Gradient of F with respect to the linear gains.

    Balancing differentiates the closed-form optimum directly.  Sum-rate
    holds the optimal powers fixed (envelope theorem) and flags the point
    as nonsmooth when a power sits at zero.
    """
    alloc = allocate(gains.gu, scenario) if alloc is None else alloc
    gu = gains.gu
    d0 = scenario.p0 / (LN2 * (1.0 + scenario.p0 * gains.g0))
    if scenario.problem_kind == "balancing":
        scale = alloc.info["gain_scale"]
        ge = gu * scale
        S = np.sum(1.0 / ge)
        dgamma = scenario.p_total / S**2 / ge**2 * scale
        du = -_fu_prime(alloc.gamma, scenario.objective, alloc.info["weight"]) * dgamma
        return FGradient(d0, du, False)
    mu = scenario.weights
    du = -mu * alloc.p / (LN2 * (1.0 + alloc.p * gu))
    return FGradient(d0, du, bool(np.any(alloc.p < NONSMOOTH_TOL)))


def existence_check(scenario: Scenario, gains_x0m: GainVector, gains_xum: GainVector) -> bool:
    """Sufficient condition for the balance surface to cross the segment between two test points.

    The test points are the spots ``h_min`` above the BS and above the user
    centroid.  Communication balancing uses the power-ratio form; other
    problems use the sign change of F.
    """
    if scenario.problem_kind == "balancing" and scenario.objective == "comm":
        ratio = scenario.p0 / scenario.p_total

        def factor(g):
            return ratio - (1.0 / g.g0) / np.sum(1.0 / g.gu)

        return bool(factor(gains_x0m) * factor(gains_xum) <= 0)
    return bool(balance_F(gains_x0m, scenario) * balance_F(gains_xum, scenario) <= 0)


def sphere_parameters(scenario: Scenario) -> Sphere | DegeneratePlane:
    """Closed-form balance surface for communication balancing under the free-space law.

    With all gains following ``b0 - 10 log10 d^2`` the surface satisfies
    ``P0 sum_k d_k^2 = P_T d_0^2``: a sphere, or a plane when ``K P0 = P_T``.
    """
    if scenario.problem_kind != "balancing" or scenario.objective != "comm":
        raise ValueError("the closed-form surface exists for communication balancing only")
    P0, PT, K = scenario.p0, scenario.p_total, scenario.K
    u0 = scenario.bs_position
    U = scenario.user_positions
    denom = K * P0 - PT
    if abs(denom) <= 1e-12 * max(K * P0, PT):
        n = K * u0 - U.sum(axis=0)
        return DegeneratePlane(n, float(0.5 * (K * u0 @ u0 - np.sum(U * U))))
    o = (P0 * U.sum(axis=0) - PT * u0) / denom
    R2 = (PT * (u0 @ u0) - P0 * np.sum(U * U)) / denom + o @ o
    if R2 < 0:
        raise NoSurfaceError(f"squared radius {R2:.4g} is negative; no balance surface")
    return Sphere(o, float(math.sqrt(R2)))


# -- KKT machinery ---------------------------------------------------------


def kkt_residual(z, lam, gu, scenario: Scenario) -> np.ndarray:
    """Stationarity rows followed by complementary-slackness rows."""
    z = np.asarray(z, dtype=float)
    lam = np.asarray(lam, dtype=float)
    gu = np.asarray(gu, dtype=float)
    K = gu.size
    PT = scenario.p_total
    if scenario.problem_kind == "balancing":
        scale = _gain_scale(scenario.objective, scenario.weights, K)
        ge = gu * scale
        p, gamma = z[:K], z[K]
        lk, l0 = lam[:K], lam[K]
        w = scenario.weights[0]
        return np.concatenate([
            lk * ge - l0,
            [_fu_prime(gamma, scenario.objective, w) - lk.sum()],
            lk * (gamma - p * ge),
            [l0 * (p.sum() - PT)],
        ])
    mu = scenario.weights
    p = z
    lb, lk = lam[0], lam[1:]
    return np.concatenate([
        mu * gu / (LN2 * (1.0 + p * gu)) - lb + lk,
        [lb * (p.sum() - PT)],
        lk * (-p),
    ])


def kkt_system_blocks(gains: GainVector, alloc: AllocationResult, scenario: Scenario,
                      check: bool = True, tol: float = 1e-8):
    """Analytic Jacobians of :func:`kkt_residual` w.r.t. ``z``, the multipliers and ``g_u``.

    Returns ``(Jz, Jlam, Jg)`` with shapes ``(n, nz)``, ``(n, N)`` and
    ``(n, K)`` where ``n = nz + N``.
    """
    gu = gains.gu
    K = gu.size
    z, lam = alloc.z, alloc.multipliers
    if check:
        res = np.max(np.abs(kkt_residual(z, lam, gu, scenario)))
        if res > tol * max(1.0, np.max(np.abs(lam))):
            raise NumericalError(f"allocation violates KKT conditions (residual {res:.3e})")
    if scenario.problem_kind == "balancing":
        scale = _gain_scale(scenario.objective, scenario.weights, K)
        ge = gu * scale
        p, gamma = z[:K], z[K]
        lk, l0 = lam[:K], lam[K]
        w = scenario.weights[0]
        nz, N = K + 1, K + 1
        n = nz + N
        Jz = np.zeros((n, nz))
        Jl = np.zeros((n, N))
        Jg = np.zeros((n, K))
        idx = np.arange(K)
        # stationarity in p
        Jl[idx, idx] = ge
        Jl[idx, K] = -1.0
        Jg[idx, idx] = lk * scale
        # stationarity in gamma
        Jz[K, K] = _fu_second(gamma, scenario.objective, w)
        Jl[K, :K] = -1.0
        # user constraints
        r = K + 1 + idx
        Jz[r, idx] = -lk * ge
        Jz[r, K] = lk
        Jl[r, idx] = gamma - p * ge
        Jg[r, idx] = -lk * p * scale
        # budget
        Jz[n - 1, :K] = l0
        Jl[n - 1, K] = p.sum() - scenario.p_total
        return Jz, Jl, Jg
    mu = scenario.weights
    p = z
    lb, lk = lam[0], lam[1:]
    nz, N = K, K + 1
    n = nz + N
    Jz = np.zeros((n, nz))
    Jl = np.zeros((n, N))
    Jg = np.zeros((n, K))
    idx = np.arange(K)
    den = 1.0 + p * gu
    Jz[idx, idx] = -mu * gu**2 / (LN2 * den**2)
    Jl[idx, 0] = -1.0
    Jl[idx, 1 + idx] = 1.0
    Jg[idx, idx] = mu / (LN2 * den**2)
    Jz[K, :] = lb
    Jl[K, 0] = p.sum() - scenario.p_total
    r = K + 1 + idx
    Jz[r, idx] = -lk
    Jl[r, 1 + idx] = -p
    return Jz, Jl, Jg


def F_partials(gains: GainVector, alloc: AllocationResult, scenario: Scenario):
    """Partial derivatives of F at fixed allocation: (dF/dz, dF/dg0, dF/dg_u)."""
    gu = gains.gu
    d0 = scenario.p0 / (LN2 * (1.0 + scenario.p0 * gains.g0))
    if scenario.problem_kind == "balancing":
        K = gu.size
        dz = np.zeros(K + 1)
        dz[K] = -_fu_prime(alloc.gamma, scenario.objective, alloc.info["weight"])
        return dz, d0, np.zeros(K)
    mu = scenario.weights
    den = 1.0 + alloc.p * gu
    return -mu * gu / (LN2 * den), d0, -mu * alloc.p / (LN2 * den)


def primal_dual_sensitivity(gains: GainVector, alloc: AllocationResult, scenario: Scenario) -> np.ndarray:
    """``d(z, lambda)/d g_u`` from the implicit function theorem on the KKT system."""
    Jz, Jl, Jg = kkt_system_blocks(gains, alloc, scenario)
    A1 = np.hstack([Jz, Jl])
    cond = np.linalg.cond(A1)
    if not np.isfinite(cond) or cond > 1e14:
        raise SingularKKTError(f"KKT Jacobian is singular (condition number {cond:.3e})")
    return -np.linalg.solve(A1, Jg)


def system_objective(g0, gu, scenario: Scenario) -> np.ndarray:
    """Vectorized ``min(f0, F_u)`` for rows of noise-normalized linear gains."""
    g0 = np.asarray(g0, dtype=float)
    gu = np.atleast_2d(np.asarray(gu, dtype=float))
    f0 = np.log2(1.0 + scenario.p0 * g0)
    if scenario.problem_kind == "balancing":
        ge = gu * _gain_scale(scenario.objective, scenario.weights, scenario.K)
        gamma = scenario.p_total / np.sum(1.0 / ge, axis=1)
        fu = _fu_of_gamma(gamma, scenario.objective, scenario.weights[0])
    else:
        P = sumrate_power_batch(gu, scenario.p_total, scenario.weights)
        fu = np.sum(scenario.weights * np.log2(1.0 + P * gu), axis=1)
    return np.minimum(f0, fu)
