"""Reference placement schemes and the shared evaluation metric.

Lattice schemes evaluate every point of a regular grid above the area of
interest.  Full-LOS gating is computed once per lattice column: the lowest
altitude seeing every node is the maximum of the per-node clearances.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize

from .allocation import system_objective, GainVector, balance_F
from .channel import ChannelParams, db_to_linear, los_gain_db, true_gain_db
from .citymap import CityMap, ConfigurationError, Scenario, clearance_heights, los_indicator

__all__ = [
    "EvaluationResult",
    "LatticeGrid",
    "evaluate_objective",
    "true_balance",
    "lattice",
    "exhaustive_3d",
    "exhaustive_2d",
    "los_probability",
    "fit_los_probability",
    "statistical_geometry",
    "genius_aided",
    "proposed",
    "ALTITUDE_MARGIN",
]

ALTITUDE_MARGIN = 100.0
SENTINEL = -math.inf


@dataclass
class EvaluationResult:
    scheme: str
    best_x: np.ndarray
    value: float
    trajectory_length: float
    wall_time: float
    records: dict = field(default_factory=dict)

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError(f"{self.scheme}: objective must be finite, got {self.value}")
        if self.trajectory_length < 0:
            raise ValueError("trajectory_length must be >= 0")

    def to_dict(self) -> dict:
        return {"scheme": self.scheme, "best_x": np.asarray(self.best_x).tolist(), "value": self.value,
                "trajectory_length": self.trajectory_length, "wall_time": self.wall_time,
                "records": self.records}


def _gains_at(scenario: Scenario, X, params: ChannelParams):
    """Noise-normalized linear LOS-law gains at rows of X: (g0, gu)."""
    G = np.column_stack([los_gain_db(params, X, u) for u in scenario.node_positions])
    G = db_to_linear(G, scenario.noise_power)
    return G[:, 0], G[:, 1:]


def evaluate_objective(city: CityMap, scenario: Scenario, x, params: ChannelParams = ChannelParams(),
                       gated: bool = True, seed: int = 0) -> float:
    """System objective ``min(f0, F_u)`` at ``x`` under optimal allocation.

    With ``gated`` (the default) any blocked link yields ``-inf``.  Otherwise
    blocked links carry their true shadowing penalty.
    """
    x = np.asarray(x, dtype=float)
    if not city.contains(x[:2]):
        return SENTINEL
    g = np.empty(scenario.K + 1)
    for k, u in enumerate(scenario.node_positions):
        los = los_indicator(city, x, u)
        if gated and not los:
            return SENTINEL
        g[k] = true_gain_db(params, city, x, u, k, seed, is_los=los)
    g = db_to_linear(g, scenario.noise_power)
    return float(system_objective(g[:1], g[None, 1:], scenario)[0])


def true_balance(scenario: Scenario, x, params: ChannelParams = ChannelParams()) -> float:
    """Balance function F under the LOS gain law (ignores blockage)."""
    g = db_to_linear([los_gain_db(params, x, u) for u in scenario.node_positions], scenario.noise_power)
    return balance_F(GainVector(g[0], g[1:]), scenario)


@dataclass
class LatticeGrid:
    """Regular lattice of cell-centred columns and altitude levels plus per-column full-LOS floor."""

    xs: np.ndarray
    ys: np.ndarray
    zs: np.ndarray
    floor: np.ndarray  # (len(xs), len(ys)) lowest non-LOS altitude over all nodes
    step: float

    @property
    def size(self) -> int:
        return self.xs.size * self.ys.size * self.zs.size

    def columns(self) -> np.ndarray:
        X, Y = np.meshgrid(self.xs, self.ys, indexing="ij")
        return np.column_stack([X.ravel(), Y.ravel()])


def lattice(city: CityMap, scenario: Scenario, step: float, zs=None, region=None) -> LatticeGrid:
    """Lattice over the footprint (or ``region = (xmin, xmax, ymin, ymax)``) from ``h_min`` up.

    Altitudes run from ``h_min`` to ``ceiling + ALTITUDE_MARGIN`` in ``step``
    increments unless ``zs`` is given.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    xmin, xmax, ymin, ymax = city.extent if region is None else region
    nx = math.ceil((xmax - xmin) / step - 1e-9)
    ny = math.ceil((ymax - ymin) / step - 1e-9)
    xs = xmin + step / 2 + step * np.arange(nx)
    ys = ymin + step / 2 + step * np.arange(ny)
    xs = xs[xs < city.extent[1]]
    ys = ys[ys < city.extent[3]]
    if zs is None:
        top = city.ceiling + ALTITUDE_MARGIN
        zs = city.h_min + step * np.arange(math.floor((top - city.h_min) / step + 1e-9) + 1)
    zs = np.atleast_1d(np.asarray(zs, dtype=float))
    cols = np.column_stack([np.repeat(xs, ys.size), np.tile(ys, xs.size)])
    floor = np.full(len(cols), -np.inf)
    for u in scenario.node_positions:
        floor = np.maximum(floor, clearance_heights(city, cols, u))
    return LatticeGrid(xs, ys, zs, floor.reshape(xs.size, ys.size), float(step))


def _search_lattice(grid: LatticeGrid, scenario: Scenario, params: ChannelParams, score=None):
    """Best gated lattice point; ties resolve to the lexicographically smallest position.

    ``score(X, full_los)`` overrides the objective (used by the statistical
    scheme, which ignores gating).
    """
    cols = grid.columns()
    fl = grid.floor.ravel()
    best = (-np.inf, None)
    # iterate x-major so that the first maximum in flattened order is lexicographically smallest
    vals = np.full((len(cols), grid.zs.size), -np.inf)
    for j, z in enumerate(grid.zs):
        X = np.column_stack([cols, np.full(len(cols), z)])
        ok = z > fl
        if scenario is not None:
            for u in scenario.node_positions:
                ok &= np.linalg.norm(X - u, axis=1) > 1e-9
        if score is None:
            if not ok.any():
                continue
            g0, gu = _gains_at(scenario, X[ok], params)
            vals[ok, j] = system_objective(g0, gu, scenario)
        else:
            vals[:, j] = score(X, ok)
    flat = int(np.argmax(vals))
    ic, iz = np.unravel_index(flat, vals.shape)
    v = vals[ic, iz]
    if np.isfinite(v):
        best = (float(v), np.array([cols[ic, 0], cols[ic, 1], grid.zs[iz]]))
    return best, int(np.sum(np.isfinite(vals)))


def exhaustive_3d(city: CityMap, scenario: Scenario, step: float = 5.0, params: ChannelParams = ChannelParams(),
                  region=None, grid: LatticeGrid | None = None) -> EvaluationResult:
    """Exhaustive search over the full-LOS points of the 3D lattice."""
    t0 = time.perf_counter()
    grid = lattice(city, scenario, step, region=region) if grid is None else grid
    (v, x), n_ok = _search_lattice(grid, scenario, params)
    if x is None:
        raise ConfigurationError("no lattice point has LOS to every node")
    return EvaluationResult("Exh3D", x, v, grid.size * grid.step, time.perf_counter() - t0,
                            {"lattice_points": grid.size, "full_los_points": n_ok, "length_is_proxy": True})


def exhaustive_2d(city: CityMap, scenario: Scenario, step: float = 5.0, params: ChannelParams = ChannelParams(),
                  altitude: float | None = None, region=None, grid: LatticeGrid | None = None) -> EvaluationResult:
    """Exhaustive search on one horizontal slice (default ``h_min + 50``)."""
    t0 = time.perf_counter()
    z = city.h_min + 50.0 if altitude is None else altitude
    grid = lattice(city, scenario, step, region=region) if grid is None else grid
    grid = replace(grid, zs=np.array([float(z)]))
    (v, x), n_ok = _search_lattice(grid, scenario, params)
    if x is None:
        # nothing at this altitude sees every node: fall back to the least-blocked reading
        return EvaluationResult("Exh2D", np.full(3, np.nan), _finite_floor(), grid.size * grid.step,
                                time.perf_counter() - t0, {"lattice_points": grid.size, "full_los_points": 0,
                                                           "altitude": z, "gated_value": SENTINEL,
                                                           "length_is_proxy": True})
    return EvaluationResult("Exh2D", x, v, grid.size * grid.step, time.perf_counter() - t0,
                            {"lattice_points": grid.size, "full_los_points": n_ok, "altitude": z,
                             "gated_value": v, "length_is_proxy": True})


def _finite_floor() -> float:
    # zero capacity: the value of a scheme that found no usable position
    return 0.0


# -- statistical geometry ------------------------------------------------------


def los_probability(theta_deg, a: float, b: float) -> np.ndarray:
    """Logistic LOS probability ``1 / (1 + a exp(-b (theta - a)))`` of the elevation angle in degrees."""
    return 1.0 / (1.0 + a * np.exp(-b * (np.asarray(theta_deg, dtype=float) - a)))


def _elevation_deg(X, u) -> np.ndarray:
    X = np.atleast_2d(X)
    h = np.hypot(X[:, 0] - u[0], X[:, 1] - u[1])
    return np.degrees(np.arctan2(X[:, 2] - u[2], h))


def fit_los_probability(city: CityMap, nodes, n_samples: int, rng: np.random.Generator,
                        z_range: tuple[float, float] | None = None, n_bins: int = 30):
    """Fit ``(a, b)`` of :func:`los_probability` by maximum likelihood on random UAV/node pairs.

    UAV positions are uniform over the footprint and over ``z_range`` (default
    ``h_min`` to ``ceiling + 100``).  Returns ``(a, b, info)`` with the RMSE
    between the fitted curve and the binned empirical LOS frequency.
    """
    if n_samples < 1000:
        raise ValueError("n_samples must be >= 1000")
    nodes = np.atleast_2d(np.asarray(nodes, dtype=float))
    xmin, xmax, ymin, ymax = city.extent
    zlo, zhi = z_range or (city.h_min, city.ceiling + ALTITUDE_MARGIN)
    X = np.column_stack([rng.uniform(xmin, xmax, n_samples), rng.uniform(ymin, ymax, n_samples),
                         rng.uniform(zlo, zhi, n_samples)])
    which = rng.integers(len(nodes), size=n_samples)
    los = np.empty(n_samples, dtype=bool)
    theta = np.empty(n_samples)
    for k, u in enumerate(nodes):
        m = which == k
        if m.any():
            los[m] = X[m, 2] > clearance_heights(city, X[m, :2], u)
            theta[m] = _elevation_deg(X[m], u)
    frac = los.mean()
    if frac in (0.0, 1.0):
        warnings.warn("LOS samples are all-LOS or all-NLOS; returning a flat fit", RuntimeWarning)
        a, b = (1e-9, 0.0) if frac == 1.0 else (1e9, 0.0)
        return a, b, {"rmse": 0.0, "los_fraction": float(frac), "flat": True}

    y = los.astype(float)

    def nll(p):
        a, b = math.exp(p[0]), p[1]
        z = np.log(a) - b * (theta - a)
        # log P = -log(1 + e^z), log(1 - P) = z - log(1 + e^z)
        lse = np.logaddexp(0.0, z)
        return float(np.sum(y * lse + (1 - y) * (lse - z)))

    best = None
    for a0 in (1.0, 5.0, 10.0, 20.0):
        res = minimize(nll, x0=[math.log(a0), 0.1], method="Nelder-Mead",
                       options={"xatol": 1e-6, "fatol": 1e-8, "maxiter": 4000})
        if best is None or res.fun < best.fun:
            best = res
    if not np.all(np.isfinite(best.x)):
        raise ConfigurationError("LOS probability fit failed")
    a, b = math.exp(best.x[0]), float(best.x[1])
    edges = np.quantile(theta, np.linspace(0, 1, n_bins + 1))
    idx = np.clip(np.searchsorted(edges, theta, side="right") - 1, 0, n_bins - 1)
    emp = np.array([y[idx == i].mean() if np.any(idx == i) else np.nan for i in range(n_bins)])
    mid = np.array([theta[idx == i].mean() if np.any(idx == i) else np.nan for i in range(n_bins)])
    good = np.isfinite(emp)
    rmse = float(np.sqrt(np.mean((emp[good] - los_probability(mid[good], a, b)) ** 2)))
    return a, b, {"rmse": rmse, "los_fraction": float(frac), "flat": False}


def statistical_geometry(city: CityMap, scenario: Scenario, step: float = 5.0,
                         params: ChannelParams = ChannelParams(), fit=None, rng=None, n_samples: int = 20000,
                         region=None, grid: LatticeGrid | None = None, seed: int = 0) -> EvaluationResult:
    """Maximize the LOS-probability-weighted objective over the lattice.

    Every node's dB gain is replaced by ``g + (1 - P_L) phi`` where ``P_L``
    follows the fitted logistic elevation model.  The chosen point is then
    scored on the true channel: ``value`` applies the shadowing penalty of
    each blocked link, ``records['gated_value']`` is the strict full-LOS
    objective (``-inf`` if any link is blocked).
    """
    t0 = time.perf_counter()
    if fit is None:
        rng = np.random.default_rng(seed) if rng is None else rng
        a, b, info = fit_los_probability(city, scenario.node_positions, n_samples, rng)
    else:
        a, b = fit[:2]
        info = {}
    grid = lattice(city, scenario, step, region=region) if grid is None else grid
    phi = params.nlos_penalty_mean
    nodes = scenario.node_positions

    def score(X, _ok):
        # a lattice point sitting on a node (e.g. the BS antenna) is not a placement
        out = np.full(len(X), -np.inf)
        far = np.all([np.linalg.norm(X - u, axis=1) > 1e-9 for u in nodes], axis=0)
        Xf = X[far]
        G = np.column_stack([los_gain_db(params, Xf, u) + (1.0 - los_probability(_elevation_deg(Xf, u), a, b)) * phi
                             for u in nodes])
        G = db_to_linear(G, scenario.noise_power)
        out[far] = system_objective(G[:, 0], G[:, 1:], scenario)
        return out

    (v_exp, x), _ = _search_lattice(grid, scenario, params, score=score)
    gated = evaluate_objective(city, scenario, x, params, gated=True, seed=seed)
    actual = evaluate_objective(city, scenario, x, params, gated=False, seed=seed)
    return EvaluationResult("Statistical", x, actual, grid.size * grid.step, time.perf_counter() - t0,
                            {"a_e": a, "b_e": b, "expected_value": v_exp, "gated_value": gated,
                             "fit": info, "length_is_proxy": True})


# -- online schemes ------------------------------------------------------------


def _online(name, city, scenario, config, params, seed):
    from .trajectory import run_search

    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    res = run_search(city, scenario, config, rng, params, seed=seed)
    value = res.best_value if math.isfinite(res.best_value) else _finite_floor()
    meta = dict(res.log.meta)
    return EvaluationResult(name, res.best_x, value, meta["trajectory_length"], time.perf_counter() - t0,
                            {"gated_value": res.best_value, "termination": meta["termination"],
                             "convergence_time": meta["convergence_time"], "final_time": meta["final_time"],
                             "counters": meta["counters"]}), res.log


def proposed(city: CityMap, scenario: Scenario, config=None, params: ChannelParams = ChannelParams(), seed: int = 0):
    """The measurement-driven surface search; returns (EvaluationResult, TrajectoryLog)."""
    from .trajectory import SearchConfig

    config = SearchConfig() if config is None else replace(config, genius=False)
    return _online("Proposed", city, scenario, config, params, seed)


def genius_aided(city: CityMap, scenario: Scenario, config=None, params: ChannelParams = ChannelParams(),
                 seed: int = 0):
    """The same search with exact gains and gradients and no measurement spiral."""
    from .trajectory import SearchConfig

    config = SearchConfig() if config is None else config
    config = replace(config, genius=True, r_spiral=0.0)
    return _online("Genius", city, scenario, config, params, seed)
