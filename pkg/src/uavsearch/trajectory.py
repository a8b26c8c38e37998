"""Online search for a relay position on the balance surface.

The search point ``x_s`` follows the surface ``F = 0`` with velocity
``A(x_s; q) + mu_v V(x_s)``: ``A`` comes from differentiating the KKT system
of the power allocation together with ``dF/dt = 0`` and a plane constraint
``q . xdot = 0``; ``V`` is a minimum-norm correction back onto the surface.
While every node is in LOS the plane is chosen so the motion descends
(phase 1); while blocked it keeps the backhaul objective constant (phase 2).
The UAV itself flies ``x = x_s + R(s) x_r(t)``, a circle around the search
point that feeds the local channel regressions.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .allocation import (
    GainVector,
    AllocationResult,
    SingularKKTError,
    allocate,
    balance_F,
    existence_check,
    F_partials,
    grad_F_wrt_gains,
    kkt_system_blocks,
)
from .channel import (
    ChannelParams,
    Measurement,
    db_to_linear,
    los_gain_db,
    los_gain_grad_db,
    true_gain_db,
)
from .citymap import CityMap, Scenario, clearance_heights, is_full_los, los_indicator
from .estimation import (
    DegenerateGeometryError,
    LocalChannelModel,
    MeasurementBuffer,
    fit_local_model,
)

__all__ = [
    "SearchError",
    "StallError",
    "DirectionDegenerateError",
    "InitFailure",
    "ScenarioInfeasible",
    "SearchConfig",
    "FieldEstimate",
    "SearchState",
    "TrajectoryLog",
    "SearchResult",
    "exact_field",
    "field_from_models",
    "balance_gradient",
    "tracking_direction",
    "surface_dynamics",
    "q1_direction",
    "q2_direction",
    "rotation_to",
    "spiral_offset",
    "blend_direction",
    "initialize",
    "step",
    "transition",
    "run_search",
    "PHASES",
]

E2 = np.array([0.0, 1.0, 0.0])
E3 = np.array([0.0, 0.0, 1.0])
DB_SLOPE = math.log(10.0) / 10.0
INIT, PHASE1, PHASE2, TRANSITION = "Init", "Phase1_LOS", "Phase2_NLOS", "Transition"
PHASES = (INIT, PHASE1, PHASE2, TRANSITION)


class SearchError(RuntimeError):
    pass


class StallError(SearchError):
    """The balance function has (numerically) no spatial gradient."""


class DirectionDegenerateError(SearchError):
    """A search plane normal or the reduced surface system is degenerate."""


class InitFailure(SearchError):
    pass


class ScenarioInfeasible(SearchError):
    pass


@dataclass(frozen=True)
class SearchConfig:
    """Search parameters.

    ``search_speed`` is the on-surface speed in m/s (the scale of ``v``);
    ``init_speed`` caps the tracking speed while looking for the surface.
    The search stops once the incumbent has not improved for ``patience``
    seconds (``None`` disables this), besides the altitude and time limits.
    ``v_choice`` picks the normalization vector ``v``: ``tangent`` (the
    admissible direction itself), ``previous`` (last search direction,
    falling back to ``tangent`` when nearly orthogonal) or ``fixed``.
    """

    mu_v: float = 1.0
    dt: float = 1.0
    omega: float = math.pi / 25
    r_spiral: float = 25.0
    tau: float = 5.0
    M: int = 100
    f_tol: float = 1e-2
    max_time: float = 2500.0
    v_choice: str = "tangent"
    v_fixed: tuple = (0.0, 0.0, -1.0)
    search_speed: float = 1.0
    init_speed: float = 1.0
    max_speed: float = 10.0
    max_frame_turn: float = math.radians(10.0)
    patience: float | None = 900.0
    genius: bool = False
    climb_margin: float = 1000.0

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.tau < self.dt:
            raise ValueError("tau must be >= dt")
        if self.f_tol <= 0:
            raise ValueError("f_tol must be positive")
        if self.r_spiral < 0 or self.search_speed <= 0 or self.M < 5:
            raise ValueError("invalid spiral radius, speed or buffer size")
        if self.v_choice not in ("tangent", "previous", "fixed"):
            raise ValueError(f"unknown v_choice {self.v_choice!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["v_fixed"] = list(self.v_fixed)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class FieldEstimate:
    """Gains (dB) and their spatial gradients (dB/m) of all nodes at one point, BS first."""

    g_db: np.ndarray
    grad_db: np.ndarray


def exact_field(params: ChannelParams, scenario: Scenario, x) -> FieldEstimate:
    nodes = scenario.node_positions
    x = np.asarray(x, dtype=float)
    return FieldEstimate(np.array([los_gain_db(params, x, u) for u in nodes]),
                         np.array([los_gain_grad_db(params, x, u) for u in nodes]))


def field_from_models(models, x) -> FieldEstimate:
    return FieldEstimate(np.array([m.predict(x) for m in models]), np.array([m.beta for m in models]))


def _linearize(fe: FieldEstimate, scenario: Scenario):
    g = db_to_linear(fe.g_db, scenario.noise_power)
    G = (g * DB_SLOPE)[:, None] * fe.grad_db
    return GainVector(g[0], g[1:]), G


class _Balance(NamedTuple):
    F: float
    grad: np.ndarray
    gains: GainVector
    G: np.ndarray
    alloc: AllocationResult
    nonsmooth: bool


def balance_gradient(fe: FieldEstimate, scenario: Scenario) -> _Balance:
    """F and its spatial gradient (envelope form) from a field estimate."""
    gains, G = _linearize(fe, scenario)
    alloc = allocate(gains.gu, scenario)
    F = balance_F(gains, scenario, alloc)
    dF = grad_F_wrt_gains(gains, scenario, alloc)
    grad = dF.dg0 * G[0] + dF.dgu @ G[1:]
    return _Balance(F, grad, gains, G, alloc, dF.nonsmooth)


def tracking_direction(fe: FieldEstimate, scenario: Scenario, bal: _Balance | None = None) -> np.ndarray:
    """Minimum-norm displacement zeroing the linearized balance function."""
    bal = balance_gradient(fe, scenario) if bal is None else bal
    n2 = float(bal.grad @ bal.grad)
    if not n2 > 1e-300 or not math.isfinite(n2):
        raise StallError("balance function gradient vanishes")
    return -bal.grad * bal.F / n2


def q1_direction(grad_f) -> np.ndarray:
    """Unit normal of the descent plane: ``grad F x (-e3)``, normalized."""
    grad_f = np.asarray(grad_f, dtype=float)
    c = np.cross(grad_f, -E3)
    n = np.linalg.norm(c)
    if n <= 1e-9 * max(np.linalg.norm(grad_f), 1e-300):
        raise DirectionDegenerateError("surface normal is vertical; descent plane undefined")
    return c / n


def q2_direction(grad_g0) -> np.ndarray:
    """Unit normal keeping the backhaul objective constant (parallel to grad g0)."""
    grad_g0 = np.asarray(grad_g0, dtype=float)
    n = np.linalg.norm(grad_g0)
    if not n > 1e-300:
        raise StallError("backhaul gain gradient vanishes")
    return grad_g0 / n


class SurfaceStep(NamedTuple):
    xdot: np.ndarray
    zl_dot: np.ndarray
    residual: float
    cond: float


def surface_dynamics(fe: FieldEstimate, scenario: Scenario, q, v, bal: _Balance | None = None) -> SurfaceStep:
    """Velocity keeping both the KKT conditions and F = 0 stationary, within the plane ``q . xdot = 0``.

    Solves the block system by eliminating the allocation rates:
    ``xdot = (A4 - A3 A1^-1 A2)^-1 e3``, then recovers the primal/dual rates
    and reports the residual of the full, un-reduced system.
    """
    bal = balance_gradient(fe, scenario) if bal is None else bal
    gains, G, alloc = bal.gains, bal.G, bal.alloc
    Jz, Jl, Jg = kkt_system_blocks(gains, alloc, scenario, check=False)
    A1 = np.hstack([Jz, Jl])
    A2 = Jg @ G[1:]
    dFz, dF0, dFu = F_partials(gains, alloc, scenario)
    n = A1.shape[0]
    nz = Jz.shape[1]
    A3 = np.zeros((3, n))
    A3[0, :nz] = dFz
    A4 = np.vstack([dF0 * G[0] + dFu @ G[1:], np.asarray(q, float), np.asarray(v, float)])
    try:
        c1 = np.linalg.cond(A1)
        if not c1 < 1e14:
            raise SingularKKTError(f"KKT Jacobian singular (cond {c1:.2e})")
        red = A4 - A3 @ np.linalg.solve(A1, A2)
        cr = np.linalg.cond(red)
        if not cr < 1e12:
            raise DirectionDegenerateError(f"reduced surface matrix singular (cond {cr:.2e})")
        xdot = np.linalg.solve(red, E3)
        zl = -np.linalg.solve(A1, A2 @ xdot)
    except np.linalg.LinAlgError as e:
        raise DirectionDegenerateError(str(e)) from e
    full = np.zeros((n + 3, n + 3))
    full[:n, :n] = A1
    full[:n, n:] = A2
    full[n:, :n] = A3
    full[n:, n:] = A4
    rhs = np.zeros(n + 3)
    rhs[-1] = 1.0
    res = float(np.max(np.abs(full @ np.concatenate([zl, xdot]) - rhs)))
    return SurfaceStep(xdot, zl, res, float(cr))


def _rotation_formula(s: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(s)
    s1, s2, s3 = s
    a = n + s2
    # the s1 s3 entries carry a plus sign; with a minus the matrix is not orthogonal
    P = np.eye(3) - np.array([
        [s1 * s1 / a, s1, s1 * s3 / a],
        [-s1, n - s2, -s3],
        [s1 * s3 / a, s3, s3 * s3 / a],
    ]) / n
    # the closed form maps s to e2; its transpose carries e2 onto s
    return P.T


_RZ_PI = np.diag([-1.0, -1.0, 1.0])


def rotation_to(s, return_flag: bool = False):
    """Rotation taking e2 to ``s / |s|``.

    Near ``s = -e2`` the closed form divides by ``|s| + s2``; there the
    rotation is composed with a half turn about e3 instead.
    """
    s = np.asarray(s, dtype=float)
    n = np.linalg.norm(s)
    if not n > 0:
        raise ValueError("rotation reference direction must be nonzero")
    flag = (n + s[1]) < 1e-6 * n
    R = _RZ_PI @ _rotation_formula(_RZ_PI.T @ s) if flag else _rotation_formula(s)
    return (R, flag) if return_flag else R


def spiral_offset(t, r: float, omega: float, alternating: bool = False):
    """Circular offset ``r [cos wt, 0, sin wt]`` and its time derivative.

    ``alternating=True`` gives the cross-section of the alternating spiral:
    radius ``sqrt(2/3) r`` and a vertical component that flips sign every turn.
    """
    t = float(t)
    c, s = math.cos(omega * t), math.sin(omega * t)
    if not alternating:
        return np.array([r * c, 0.0, r * s]), np.array([-r * omega * s, 0.0, r * omega * c])
    a = math.sqrt(2.0 / 3.0) * r
    sign = -1.0 if math.floor(omega * t / (2 * math.pi)) % 2 else 1.0
    return (np.array([a * c, 0.0, a * s * sign]), np.array([-a * omega * s, 0.0, a * omega * c * sign]))


def blend_direction(t: float, t1: float, tau: float, s_minus, s_plus) -> np.ndarray:
    """Linear blend from ``s_minus`` at ``t1`` to ``s_plus`` at ``t1 + tau``."""
    a = min(max((t - t1) / tau, 0.0), 1.0)
    return (1.0 - a) * np.asarray(s_minus, float) + a * np.asarray(s_plus, float)


def _turn_toward(f: np.ndarray, target: np.ndarray, max_angle: float) -> np.ndarray:
    """Rotate the spiral axis ``f`` toward the line of ``target`` by at most ``max_angle``.

    The circle only depends on the axis line, so the sign of ``target`` is
    chosen to minimize the turn.
    """
    nt = np.linalg.norm(target)
    if nt == 0:
        return f
    target = target / nt
    if f @ target < 0:
        target = -target
    cosang = float(np.clip(f @ target, -1.0, 1.0))
    ang = math.acos(cosang)
    if ang <= max_angle:
        return target
    axis = target - cosang * f
    na = np.linalg.norm(axis)
    if na < 1e-12:
        axis = np.cross(f, E3 if abs(f[2]) < 0.9 else E2)
        na = np.linalg.norm(axis)
    axis /= na
    return math.cos(max_angle) * f + math.sin(max_angle) * axis


def _min_rotation(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Smallest rotation taking unit vector a to unit vector b (Rodrigues); a, b not antiparallel."""
    v = np.cross(a, b)
    c = float(a @ b)
    if c <= -1.0 + 1e-12:
        raise ValueError("antiparallel vectors have no unique minimal rotation")
    K = np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])
    return np.eye(3) + K + K @ K / (1.0 + c)


# -- logging ---------------------------------------------------------------


class TrajectoryLog:
    """Per-step record of the search, serializable as CSV plus a JSON sidecar."""

    def __init__(self, n_nodes: int):
        self.n_nodes = n_nodes
        self.rows: list[dict] = []
        self.meta: dict = {}

    @property
    def columns(self) -> list[str]:
        return (["t", "x1", "x2", "x3", "xs1", "xs2", "xs3", "phase", "F_est", "F_true",
                 "objective", "full_los", "best_value", "best_objective"] + [f"g{k}_est" for k in range(self.n_nodes)])

    def append(self, t, x, x_s, phase, F_est, F_true, objective, full_los, best_value, g_est=None,
               best_objective=math.nan):
        if self.rows and not t > self.rows[-1]["t"]:
            raise ValueError("log times must be strictly increasing")
        row = {"t": float(t), "x1": x[0], "x2": x[1], "x3": x[2], "xs1": x_s[0], "xs2": x_s[1],
               "xs3": x_s[2], "phase": phase, "F_est": F_est, "F_true": F_true, "objective": objective,
               "full_los": bool(full_los), "best_value": best_value,
               "best_objective": best_objective}
        g_est = [math.nan] * self.n_nodes if g_est is None else g_est
        for k in range(self.n_nodes):
            row[f"g{k}_est"] = float(g_est[k])
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    @property
    def positions(self) -> np.ndarray:
        return np.array([[r["x1"], r["x2"], r["x3"]] for r in self.rows]).reshape(-1, 3)

    @property
    def search_positions(self) -> np.ndarray:
        return np.array([[r["xs1"], r["xs2"], r["xs3"]] for r in self.rows]).reshape(-1, 3)

    @property
    def length(self) -> float:
        P = self.positions
        return float(np.sum(np.linalg.norm(np.diff(P, axis=0), axis=1))) if len(P) > 1 else 0.0

    def to_csv(self, dest) -> None:
        """Write the rows to a path or an open text stream."""
        if hasattr(dest, "write"):
            self._write_csv(dest)
            return
        with open(dest, "w", newline="") as fh:
            self._write_csv(fh)

    def _write_csv(self, fh) -> None:
        w = csv.DictWriter(fh, fieldnames=self.columns, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})

    def write_sidecar(self, path) -> None:
        Path(path).write_text(json.dumps(self.meta, indent=2, sort_keys=True, default=_json_default))


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o).__name__)


# -- state -----------------------------------------------------------------


@dataclass
class SearchState:
    t: float
    x: np.ndarray
    x_s: np.ndarray
    phase: str
    best_x: np.ndarray | None = None
    best_value: float = -math.inf
    best_true: float = -math.inf
    buffers: list = field(default_factory=list)
    models: list = field(default_factory=list)
    prev_full_los: bool = False
    s: np.ndarray = field(default_factory=lambda: np.zeros(3))
    direction: np.ndarray = field(default_factory=lambda: -E3.copy())
    frame: np.ndarray = field(default_factory=lambda: E3.copy())
    rot: np.ndarray = field(default_factory=lambda: rotation_to(E3))
    transition: dict | None = None
    phase2_since: float | None = None
    last_improve: float = 0.0
    phase2_entry: bool = False
    length: float = 0.0
    done: bool = False
    reason: str = ""
    log: TrajectoryLog | None = None
    counters: dict = field(default_factory=lambda: {"stalls": 0, "degenerate": 0, "nonsmooth": 0,
                                                    "transitions": 0, "max_stale_age": 0.0})
    seed: int = 0


class SearchResult(NamedTuple):
    best_x: np.ndarray
    best_value: float
    log: TrajectoryLog


# -- per-step pieces -------------------------------------------------------


def _measure(state: SearchState, city: CityMap, scenario: Scenario, params: ChannelParams,
             rng: np.random.Generator) -> bool:
    """Sample every node at the UAV position; return whether all links are LOS."""
    all_los = True
    for k, u in enumerate(scenario.node_positions):
        los = los_indicator(city, state.x, u)
        all_los &= los
        g = true_gain_db(params, city, state.x, u, k, state.seed, is_los=los)
        y = g + params.sigma * rng.standard_normal()
        if state.buffers:
            state.buffers[k].push(Measurement(state.x.copy(), k, float(y), los, state.t))
    return bool(all_los)


def _refresh_models(state: SearchState) -> None:
    for k, buf in enumerate(state.buffers):
        old = state.models[k]
        model = None
        if len(buf) >= 5:
            try:
                model = fit_local_model(buf, state.x_s)
            except DegenerateGeometryError:
                model = None
        if model is None and old is not None:
            model = old.reanchor(state.x_s)
        state.models[k] = model
        age = state.t - buf.last_time
        if math.isfinite(age):
            state.counters["max_stale_age"] = max(state.counters["max_stale_age"], age)


def _field(state: SearchState, scenario: Scenario, params: ChannelParams, config: SearchConfig):
    if config.genius:
        return exact_field(params, scenario, state.x_s)
    if any(m is None for m in state.models):
        return None
    return field_from_models(state.models, state.x_s)


def _cap(v: np.ndarray, vmax: float) -> np.ndarray:
    n = np.linalg.norm(v)
    return v * (vmax / n) if n > vmax else v


def _phase_velocity(state: SearchState, fe: FieldEstimate, scenario: Scenario, config: SearchConfig,
                    phase: str, entry: bool):
    """Search velocity ``A + mu_v V`` for one phase; returns (s, on-surface part, balance)."""
    bal = balance_gradient(fe, scenario)
    if bal.nonsmooth:
        state.counters["nonsmooth"] += 1
    V = config.mu_v * tracking_direction(fe, scenario, bal)
    speed = config.search_speed * (0.5 if bal.nonsmooth else 1.0)
    try:
        q = q1_direction(bal.grad) if phase == PHASE1 else q2_direction(fe.grad_db[0])
    except DirectionDegenerateError:
        # horizontal surface: probe sideways toward the backhaul gain, or keep going
        state.counters["degenerate"] += 1
        h = fe.grad_db[0] * np.array([1.0, 1.0, 0.0])
        if np.linalg.norm(h) < 1e-12:
            h = state.direction * np.array([1.0, 1.0, 0.0])
        d = h / max(np.linalg.norm(h), 1e-300)
        A = speed * d
        return _cap(A + _cap(V, config.max_speed), config.max_speed), A, bal
    d = np.cross(bal.grad, q)
    nd = np.linalg.norm(d)
    if nd < 1e-300:
        raise StallError("admissible direction vanishes")
    d /= nd
    if phase == PHASE1:
        if d[2] > 1e-9 or (abs(d[2]) <= 1e-9 and d @ state.direction < 0):
            d = -d
    elif entry:
        if d[2] < 0:
            d = -d
    elif d @ state.direction < 0:
        d = -d
    if config.v_choice == "tangent":
        v = d / speed
    elif config.v_choice == "previous":
        pd = state.direction / max(np.linalg.norm(state.direction), 1e-300)
        v = pd / speed if abs(pd @ d) > 0.3 else d / speed
    else:
        vf = np.asarray(config.v_fixed, dtype=float)
        v = vf / (np.linalg.norm(vf) * speed)
    try:
        A = surface_dynamics(fe, scenario, q, v, bal).xdot
    except (DirectionDegenerateError, SingularKKTError):
        state.counters["degenerate"] += 1
        A = 0.5 * speed * d
    A = _cap(A, config.max_speed)
    return _cap(A + _cap(V, config.max_speed), config.max_speed), A, bal


def _log_row(state, city, scenario, params, fe, full_los, bal=None):
    from .baselines import evaluate_objective, true_balance

    F_est = math.nan
    g_est = None
    if fe is not None:
        g_est = fe.g_db
        try:
            F_est = balance_gradient(fe, scenario).F if bal is None else bal.F
        except (ValueError, ArithmeticError):
            F_est = math.nan
    obj = evaluate_objective(city, scenario, state.x_s, params, gated=False)
    state.log.append(state.t, state.x, state.x_s, state.phase, F_est, true_balance(scenario, state.x_s, params),
                     obj, full_los, state.best_value, g_est, state.best_true)


def _f0_est(fe: FieldEstimate, scenario: Scenario) -> float:
    return math.log2(1.0 + scenario.p0 * float(db_to_linear(fe.g_db[0], scenario.noise_power)))


def _move(state: SearchState, city: CityMap, x_s_new, frame, t_new, config: SearchConfig) -> bool:
    """Apply a move; returns False (and marks termination) if it would leave the flight domain."""
    xr, _ = spiral_offset(t_new, config.r_spiral, config.omega)
    frame = frame / np.linalg.norm(frame)
    # transport the spiral frame along the axis change so the circle never jumps
    rot = _min_rotation(state.frame, frame) @ state.rot
    x_new = x_s_new + rot @ xr
    if x_new[2] < city.h_min or x_s_new[2] < city.h_min:
        state.done, state.reason = True, "altitude"
        return False
    if not (city.contains(x_new[:2]) and city.contains(x_s_new[:2])):
        state.done, state.reason = True, "footprint"
        return False
    state.length += float(np.linalg.norm(x_new - state.x))
    state.x = x_new
    state.x_s = np.asarray(x_s_new, dtype=float)
    state.frame = frame
    state.rot = rot
    state.t = t_new
    return True


def transition(state: SearchState, config: SearchConfig, s_minus, s_plus, target: str) -> SearchState:
    """Start a frame transition: ``x_s`` holds still for ``tau`` while the spiral frame blends."""
    state.transition = {"t1": state.t - config.dt, "s_minus": np.asarray(s_minus, float),
                        "s_plus": np.asarray(s_plus, float), "target": target}
    state.phase = TRANSITION
    state.counters["transitions"] += 1
    return state


def _transition_step(state: SearchState, city: CityMap, config: SearchConfig) -> None:
    tr = state.transition
    t_new = state.t + config.dt
    xt = blend_direction(t_new, tr["t1"], config.tau, tr["s_minus"], tr["s_plus"])
    if np.linalg.norm(xt) < 1e-9 * max(np.linalg.norm(tr["s_plus"]), 1e-300):
        xt = tr["s_plus"] if np.linalg.norm(tr["s_plus"]) > 0 else state.frame
    frame = _turn_toward(state.frame, xt, config.max_frame_turn)
    if not _move(state, city, state.x_s, frame, t_new, config):
        return
    if t_new >= tr["t1"] + config.tau - 1e-9:
        state.phase = tr["target"]
        state.s = tr["s_plus"]
        state.transition = None


def step(state: SearchState, config: SearchConfig, city: CityMap, scenario: Scenario,
         rng: np.random.Generator, params: ChannelParams = ChannelParams()) -> SearchState:
    """Advance the search by one time slot (measure, refit, choose phase, move)."""
    if state.done:
        return state
    now_los = _measure(state, city, scenario, params, rng) if not config.genius else is_full_los(city, state.x, scenario)
    if not config.genius:
        _refresh_models(state)
    fe = _field(state, scenario, params, config)
    bal = None

    if state.transition is not None:
        _log_row(state, city, scenario, params, fe, now_los)
        state.prev_full_los = now_los
        _transition_step(state, city, config)
        return _check_time(state, config)

    if state.prev_full_los and now_los:
        phase = PHASE1
    elif not state.prev_full_los and not now_los:
        phase = PHASE2
    else:
        phase = PHASE1 if now_los else PHASE2
        if fe is not None:
            try:
                entry = phase == PHASE2
                s_plus, A_plus, _ = _phase_velocity(state, fe, scenario, config, phase, entry)
                if phase == PHASE2:
                    state.direction = A_plus / max(np.linalg.norm(A_plus), 1e-300)
                    state.phase2_entry = False
                    state.phase2_since = state.t
                else:
                    state.phase2_since = None
                s_minus = state.frame * max(np.linalg.norm(state.s), 1e-6)
                _log_row(state, city, scenario, params, fe, now_los)
                transition(state, config, s_minus, s_plus, phase)
                state.prev_full_los = now_los
                _transition_step(state, city, config)
                return _check_time(state, config)
            except (StallError, ValueError):
                state.counters["stalls"] += 1
    if phase == PHASE2 and state.phase2_since is None:
        state.phase2_since = state.t
        state.phase2_entry = True
    if phase == PHASE1:
        state.phase2_since = None
    state.phase = phase

    if fe is None:
        # no usable model yet: hold position and keep collecting measurements
        state.counters["stalls"] += 1
        _log_row(state, city, scenario, params, fe, now_los)
        state.prev_full_los = now_los
        _move(state, city, state.x_s, state.frame, state.t + config.dt, config)
        return _check_time(state, config)

    try:
        s, A, bal = _phase_velocity(state, fe, scenario, config, phase, state.phase2_entry)
        state.phase2_entry = False
    except (StallError, ValueError):
        state.counters["stalls"] += 1
        s, A = np.zeros(3), np.zeros(3)

    if phase == PHASE1 and is_full_los(city, state.x_s, scenario):
        f0 = _f0_est(fe, scenario)
        if f0 > state.best_value:
            from .baselines import evaluate_objective

            state.best_value = f0
            state.last_improve = state.t
            state.best_x = state.x_s.copy()
            state.best_true = evaluate_objective(city, scenario, state.x_s, params)

    _log_row(state, city, scenario, params, fe, now_los, bal)
    state.prev_full_los = now_los
    if np.linalg.norm(A) > 0:
        state.direction = A / np.linalg.norm(A)
    target = A if np.linalg.norm(A) > 0 else (s if np.linalg.norm(s) > 0 else state.frame)
    frame = _turn_toward(state.frame, target, config.max_frame_turn)
    state.s = s
    _move(state, city, state.x_s + s * config.dt, frame, state.t + config.dt, config)
    return _check_time(state, config)


def _check_time(state: SearchState, config: SearchConfig) -> SearchState:
    if state.done:
        return state
    if state.t >= config.max_time:
        state.done, state.reason = True, "max_time"
    elif config.patience is not None and state.t - state.last_improve > config.patience:
        state.done, state.reason = True, "patience"
    return state


# -- initialization and driver --------------------------------------------


def initialize(city: CityMap, scenario: Scenario, config: SearchConfig, rng: np.random.Generator,
               params: ChannelParams = ChannelParams(), seed: int = 0) -> SearchState:
    """Climb above the users to full LOS, collect a first batch of samples, then track onto the surface.

    The climb starts ``h_min + r`` above the user centroid.  Samples are
    taken while rising at ``search_speed`` with the spiral circling in the
    horizontal plane (so the geometry spans all three axes).  Tracking
    then follows ``mu_v V`` (capped at ``init_speed``), climbing whenever a
    step would leave the full-LOS region, until the estimated ``|F|`` drops
    below ``f_tol``.
    """
    nodes = scenario.node_positions
    centroid = scenario.user_positions.mean(axis=0)
    lift = np.array([0.0, 0.0, city.h_min])
    g0m = exact_field(params, scenario, scenario.bs_position + lift + 1e-6)
    gum = exact_field(params, scenario, centroid + lift)
    gains_0m, _ = _linearize(g0m, scenario)
    gains_um, _ = _linearize(gum, scenario)
    if not existence_check(scenario, gains_0m, gains_um):
        raise ScenarioInfeasible("existence condition for the balance surface fails")

    r = config.r_spiral
    floor_z = city.h_min + r
    x_s = np.array([centroid[0], centroid[1], floor_z])
    top = city.ceiling + config.climb_margin
    while not is_full_los(city, x_s, scenario):
        x_s[2] += city.cell_size
        if x_s[2] > top:
            raise ScenarioInfeasible("no full-LOS altitude above the user centroid")

    state = SearchState(t=0.0, x=x_s.copy(), x_s=x_s.copy(), phase=INIT, seed=seed)
    state.x = x_s + rotation_to(E3) @ spiral_offset(0.0, r, config.omega)[0]
    state.log = TrajectoryLog(len(nodes))
    if not config.genius:
        state.buffers = [MeasurementBuffer(k, config.M) for k in range(len(nodes))]
        state.models = [None] * len(nodes)
    limit = config.max_time / 4.0
    target = None
    # warm-up climbs one spiral radius in total: enough vertical spread for a 3D fit
    rise = E3 * max(config.r_spiral, city.cell_size) / (config.M * config.dt)

    if not config.genius:
        for _ in range(config.M):
            los = _measure(state, city, scenario, params, rng)
            _log_row(state, city, scenario, params, None, los)
            if not _move(state, city, state.x_s + rise * config.dt, E3, state.t + config.dt, config):
                raise InitFailure(f"initial climb left the flight domain ({state.reason})")

    while True:
        if state.t > limit:
            raise InitFailure(f"|F| did not fall below {config.f_tol} within {limit:.0f} s")
        los = is_full_los(city, state.x, scenario) if config.genius else _measure(state, city, scenario, params, rng)
        if not config.genius:
            _refresh_models(state)
        fe = _field(state, scenario, params, config)
        if fe is None:
            _log_row(state, city, scenario, params, fe, los)
            ok = _move(state, city, state.x_s + rise * config.dt, state.frame, state.t + config.dt, config)
            if not ok:
                raise InitFailure(f"initial climb left the flight domain ({state.reason})")
            continue
        bal = balance_gradient(fe, scenario)
        _log_row(state, city, scenario, params, fe, los, bal)
        if abs(bal.F) < config.f_tol:
            break
        V = config.mu_v * tracking_direction(fe, scenario, bal)
        move, target = _init_move(city, scenario, state.x_s, _cap(V, config.init_speed), bal,
                                  config.init_speed, floor_z, top, target)
        if move is None:
            raise InitFailure("no full-LOS move available while tracking the surface")
        x_new = state.x_s + move * config.dt
        frame = _turn_toward(state.frame, move, config.max_frame_turn) if np.linalg.norm(move) > 0 else state.frame
        if not _move(state, city, x_new, frame, state.t + config.dt, config):
            raise InitFailure(f"tracking left the flight domain ({state.reason})")
        state.s = move

    state.phase = PHASE1
    state.prev_full_los = bool(los)
    state.direction = -E3.copy()
    state.best_x = state.x_s.copy()
    state.best_value = _f0_est(fe, scenario)
    from .baselines import evaluate_objective

    state.best_true = evaluate_objective(city, scenario, state.x_s, params)
    state.last_improve = state.t
    # hover one slot so the first search row follows the last init row
    if not _move(state, city, state.x_s, state.frame, state.t + config.dt, config):
        raise InitFailure(f"initial position left the flight domain ({state.reason})")
    return state


_COMPASS = np.array([[math.cos(a), math.sin(a), 0.0] for a in np.arange(8) * math.pi / 4])
_PROBES = np.vstack([_COMPASS, (_COMPASS - E3) / math.sqrt(2.0), -E3[None, :]])


def _full_los_many(city: CityMap, X: np.ndarray, scenario: Scenario) -> np.ndarray:
    ok = np.asarray(city.contains(X[:, :2]), dtype=bool)
    for u in scenario.node_positions:
        if not ok.any():
            break
        c = np.full(len(X), np.inf)
        c[ok] = clearance_heights(city, X[ok, :2], u)
        ok &= X[:, 2] > c
    return ok


def _init_move(city, scenario, x_s, V, bal: _Balance, speed: float, floor_z: float, top: float, target=None):
    """Tracking move for initialization that lands in the full-LOS region.

    Tries the tracking step first.  Otherwise probes level and downward
    directions at a few ranges (the LOS boundary moves in whole cells) and
    heads for the feasible probe with the smallest predicted |F|; climbs when
    no probe helps.  Returns ``(move, target)``; a far target is approached
    at ``speed`` over several slots.
    """
    if target is not None:
        d = target - x_s
        n = np.linalg.norm(d)
        if n > speed:
            return d * (speed / n), target
        return d, None
    cand = x_s + V
    if cand[2] >= floor_z and _full_los_many(city, cand[None, :], scenario)[0]:
        return V, None
    scales = np.array([speed, city.cell_size, 2 * city.cell_size, 4 * city.cell_size, 8 * city.cell_size])
    D = (scales[:, None, None] * _PROBES[None, :, :]).reshape(-1, 3)
    X = x_s + D
    ok = (X[:, 2] >= floor_z) & _full_los_many(city, X, scenario)
    if ok.any():
        score = np.abs(bal.F + D @ bal.grad)
        score[~ok] = np.inf
        i = int(np.argmin(score))
        if score[i] < abs(bal.F):
            d = D[i]
            n = np.linalg.norm(d)
            if n > speed:
                return d * (speed / n), X[i]
            return d, None
    up = E3 * speed
    while not _full_los_many(city, (x_s + up)[None, :], scenario)[0]:
        up = up + E3 * city.cell_size
        if x_s[2] + up[2] > top:
            return None, None
    return up, None


def run_search(city: CityMap, scenario: Scenario, config: SearchConfig, rng: np.random.Generator,
               params: ChannelParams = ChannelParams(), seed: int = 0) -> SearchResult:
    """Run initialization and the search loop; return the incumbent and the log.

    ``best_value`` is the true, LOS-gated system objective at the incumbent
    (the decision rule itself uses the estimated backhaul objective).
    """
    state = initialize(city, scenario, config, rng, params, seed)
    init_end = state.t
    init_length = state.length
    while not state.done:
        step(state, config, city, scenario, rng, params)
    log = state.log
    log.meta.update({
        "seed": seed,
        "config": config.to_dict(),
        "config_hash": config.digest(),
        "termination": state.reason,
        "best_x": state.best_x,
        "best_value": state.best_true,
        "best_estimate": state.best_value,
        "trajectory_length": state.length,
        "search_length": state.length - init_length,
        "init_time": init_end,
        "final_time": state.t,
        "convergence_time": _convergence_time(log),
        "counters": state.counters,
    })
    return SearchResult(state.best_x, state.best_true, log)


def _convergence_time(log: TrajectoryLog) -> float:
    """First time after which the logged incumbent estimate never improves."""
    b = log.column("best_value")
    t = log.column("t")
    if len(b) == 0:
        return 0.0
    final = b[-1]
    idx = np.nonzero(b >= final)[0]
    return float(t[idx[0]]) if idx.size else float(t[-1])
