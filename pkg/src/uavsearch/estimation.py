"""Local first-order channel maps fitted from noisy dB measurements.

A node's gain around an anchor ``c0`` is modelled as
``g(x) ~ alpha + beta . (x - c0)`` and fitted by least squares over the most
recent LOS measurements.  The module also carries the variance and MSE
formulas that govern how measurement positions should be spread, and the
alternating-spiral sampling pattern that attains the variance floor.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from .channel import ChannelParams, Measurement, los_gain_db

__all__ = [
    "DegenerateGeometryError",
    "MeasurementBuffer",
    "LocalChannelModel",
    "fit_local_model",
    "fit_local_arrays",
    "variance_lower_bound",
    "check_pattern_conditions",
    "mse_bound",
    "mse_approx",
    "optimal_measurement_radius",
    "alternating_spiral_pattern",
    "estimator_error_trace",
    "empirical_gain_mse",
]

MIN_POINTS = 5


class DegenerateGeometryError(ValueError):
    """Measurement positions do not span all three spatial directions."""

    def __init__(self, msg: str, directions: np.ndarray | None = None):
        super().__init__(msg)
        self.directions = directions


class MeasurementBuffer:
    """FIFO of the last ``capacity`` LOS measurements of one node."""

    def __init__(self, node_id: int, capacity: int):
        if capacity < MIN_POINTS:
            raise ValueError(f"buffer capacity must be >= {MIN_POINTS}")
        self.node_id = node_id
        self.capacity = capacity
        self._pos = deque(maxlen=capacity)
        self._y = deque(maxlen=capacity)
        self._t = deque(maxlen=capacity)

    def push(self, m: Measurement) -> bool:
        """Append ``m`` if it is a LOS sample of this node; return whether it was kept."""
        if m.node_id != self.node_id:
            raise ValueError(f"measurement for node {m.node_id} pushed into buffer {self.node_id}")
        if not m.is_los:
            return False
        self._pos.append(np.asarray(m.position, dtype=float))
        self._y.append(m.y)
        self._t.append(m.time)
        return True

    def __len__(self) -> int:
        return len(self._y)

    @property
    def positions(self) -> np.ndarray:
        return np.array(self._pos).reshape(-1, 3)

    @property
    def values(self) -> np.ndarray:
        return np.array(self._y, dtype=float)

    @property
    def last_time(self) -> float:
        return self._t[-1] if self._t else -math.inf

    def copy(self) -> "MeasurementBuffer":
        b = MeasurementBuffer(self.node_id, self.capacity)
        b._pos.extend(self._pos)
        b._y.extend(self._y)
        b._t.extend(self._t)
        return b


@dataclass(frozen=True)
class LocalChannelModel:
    anchor: np.ndarray
    alpha: float
    beta: np.ndarray
    fit_residual: float = 0.0
    n_used: int = 0

    def predict(self, x) -> np.ndarray | float:
        x = np.asarray(x, dtype=float)
        out = self.alpha + (x - self.anchor) @ self.beta
        return float(out) if np.ndim(out) == 0 else out

    def gradient(self, x=None) -> np.ndarray:
        return self.beta

    def reanchor(self, c) -> "LocalChannelModel":
        """Same affine model expressed around a new anchor."""
        c = np.asarray(c, dtype=float)
        return LocalChannelModel(c, self.predict(c), self.beta, self.fit_residual, self.n_used)


def fit_local_arrays(X, y, c0, rcond: float = 1e-9) -> LocalChannelModel:
    """Least-squares fit of ``alpha + beta . (x - c0)`` to positions ``X`` and values ``y``.

    Solved with an SVD-based solver rather than the normal equations.  Raises
    :class:`DegenerateGeometryError` when the centered positions lack spread
    in some direction (relative singular value below ``rcond``).
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    c0 = np.asarray(c0, dtype=float)
    n = len(y)
    if n < MIN_POINTS:
        raise DegenerateGeometryError(f"need at least {MIN_POINTS} measurements, got {n}")
    D = X - c0
    centered = X - X.mean(axis=0)
    _, sv, vt = np.linalg.svd(centered, full_matrices=True)
    sv = np.concatenate([sv, np.zeros(3 - sv.size)])
    scale = max(sv[0], 1e-300)
    bad = sv / scale < rcond
    if np.any(bad):
        dirs = vt[bad]
        raise DegenerateGeometryError(
            f"measurement positions are degenerate along {np.round(dirs, 6).tolist()}", dirs)
    A = np.column_stack([np.ones(n), D])
    theta, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ theta
    return LocalChannelModel(c0.copy(), float(theta[0]), theta[1:].copy(),
                             float(np.sqrt(np.mean(resid**2))), n)


def fit_local_model(buffer: MeasurementBuffer, c0) -> LocalChannelModel:
    return fit_local_arrays(buffer.positions, buffer.values, c0)


def variance_lower_bound(M: int, r1: float, sigma: float) -> float:
    """Floor on the trace of the parameter-error covariance for M samples within radius r1."""
    if M < MIN_POINTS or r1 <= 0:
        raise ValueError("need M >= 5 and r1 > 0")
    return sigma**2 / M + 9.0 * sigma**2 / (M * r1**2)


def check_pattern_conditions(points, c0, r1: float) -> dict:
    """Residuals of the three optimality conditions, scaled by ``M r1^2``.

    cond_i: largest |sum of offsets| per axis.  cond_ii: largest |sum of
    cross products| over axis pairs.  cond_iii: largest deviation of the
    per-axis sum of squares from ``M r1^2 / 3``.
    """
    P = np.atleast_2d(np.asarray(points, dtype=float)) - np.asarray(c0, dtype=float)
    M = len(P)
    S = P.T @ P
    norm = M * r1**2
    off = S[~np.eye(3, dtype=bool)]
    return {
        "cond_i": float(np.max(np.abs(P.sum(axis=0))) / norm),
        "cond_ii": float(np.max(np.abs(off)) / norm),
        "cond_iii": float(np.max(np.abs(np.diag(S) - norm / 3.0)) / norm),
    }


def _variance_term(M, r0, r1, sigma):
    return sigma**2 / M * (1.0 + 3.0 * r0**2 / r1**2)


def mse_bound(M: int, r0: float, r1: float, sigma: float, lg: float) -> float:
    """Upper bound on E(ghat(x) - g(x))^2 at distance r0 from the anchor."""
    return _variance_term(M, r0, r1, sigma) + lg**2 / 4.0 * (r1**2 + 3.0 * r0 * r1 + r0**2) ** 2


def mse_approx(M: int, r0: float, r1: float, sigma: float, lg2: float) -> float:
    """Tighter approximation of the same MSE using the local curvature lg2."""
    return _variance_term(M, r0, r1, sigma) + lg2**2 / 4.0 * (r1**2 + r0**2) ** 2


def optimal_measurement_radius(M: int, r0: float, sigma: float, lg2: float,
                               bounds: tuple[float, float] = (0.1, 200.0)) -> float:
    """Radius r1 minimizing :func:`mse_approx`, to about 0.05 m."""
    res = minimize_scalar(lambda r1: mse_approx(M, r0, r1, sigma, lg2), bounds=bounds,
                          method="bounded", options={"xatol": 0.05})
    return float(res.x)


def alternating_spiral_pattern(M: int, r1: float, c0=(0.0, 0.0, 0.0), k: int = 1,
                               frame: np.ndarray | None = None) -> np.ndarray:
    """M samples of the alternating spiral around ``c0``, taken at t = m - 1/2.

    In its canonical frame the axis is e2: the axial coordinate advances as
    ``v r1 (t - M/2)`` with ``v = 2/sqrt(M^2 - 1)`` while the cross-section
    circles with radius ``sqrt(2/3) r1`` at ``omega = 4 k pi / M`` and flips
    the sign of its vertical part every full turn.  ``frame`` (3x3) rotates
    the canonical pattern before it is shifted to ``c0``.
    """
    if M < 2:
        raise ValueError("need M >= 2")
    t = np.arange(1, M + 1) - 0.5
    omega = 4.0 * k * math.pi / M
    v = 2.0 / math.sqrt(M * M - 1.0)
    a = math.sqrt(2.0 / 3.0) * r1
    sign = np.where(np.floor(omega * t / (2 * math.pi)) % 2 == 0, 1.0, -1.0)
    P = np.column_stack([a * np.cos(omega * t), v * r1 * (t - M / 2.0), a * np.sin(omega * t) * sign])
    if frame is not None:
        P = P @ np.asarray(frame, dtype=float).T
    return P + np.asarray(c0, dtype=float)


def estimator_error_trace(points, sigma: float, n_trials: int, rng: np.random.Generator,
                          c0=(0.0, 0.0, 0.0), theta=(-80.0, 0.1, 0.0, -0.2)) -> dict:
    """Monte Carlo covariance of the fitted (alpha, beta) on a noisy linear field.

    Returns the empirical trace, the per-parameter variances and the
    analytic trace ``sigma^2 tr((X^T X)^-1)`` for comparison.
    """
    P = np.asarray(points, dtype=float) - np.asarray(c0, dtype=float)
    A = np.column_stack([np.ones(len(P)), P])
    theta = np.asarray(theta, dtype=float)
    pinv = np.linalg.pinv(A)
    Y = (A @ theta)[None, :] + sigma * rng.standard_normal((n_trials, len(P)))
    err = Y @ pinv.T - theta
    var = err.var(axis=0, ddof=0) + err.mean(axis=0) ** 2
    return {
        "trace": float(var.sum()),
        "var_alpha": float(var[0]),
        "var_beta": float(var[1:].sum()),
        "analytic_trace": float(sigma**2 * np.trace(np.linalg.inv(A.T @ A))),
    }


def empirical_gain_mse(params: ChannelParams, node, c0, points, r0: float, sigma: float,
                       n_trials: int, rng: np.random.Generator, n_eval: int = 16) -> dict:
    """Monte Carlo MSE of the fitted gain at ``n_eval`` random points at distance r0 from c0.

    The field is the free-space LOS law around ``node``; noise is Gaussian
    with std ``sigma`` dB.  Also returns the RMS error normalized by the
    RMS true gain (both in dB).
    """
    c0 = np.asarray(c0, dtype=float)
    P = np.asarray(points, dtype=float)
    A = np.column_stack([np.ones(len(P)), P - c0])
    pinv = np.linalg.pinv(A)
    g_true = los_gain_db(params, P, node)
    Y = g_true[None, :] + sigma * rng.standard_normal((n_trials, len(P)))
    theta = Y @ pinv.T
    d = rng.standard_normal((n_eval, 3))
    d *= r0 / np.linalg.norm(d, axis=1, keepdims=True)
    E = np.column_stack([np.ones(n_eval), d])
    pred = theta @ E.T
    truth = los_gain_db(params, c0 + d, node)
    err = pred - truth[None, :]
    per_point = np.mean(err**2, axis=0)
    mse = float(per_point.mean())
    # noise expectation in closed form: squared bias plus sigma^2 e^T (A^T A)^-1 e
    bias = E @ (pinv @ g_true) - truth
    var = sigma**2 * np.einsum("ij,jk,ik->i", E, np.linalg.inv(A.T @ A), E)
    exact = bias**2 + var
    return {"mse": mse, "mse_max": float(per_point.max()),
            "mse_exact_max": float(exact.max()), "mse_exact": float(exact.mean()),
            "normalized_error": math.sqrt(mse) / float(np.sqrt(np.mean(truth**2)))}
