"""Deterministic LOS gain law, NLOS shadowing, noisy measurements and link objectives.

Gains live in dB everywhere except inside capacity and SNR formulas.  The
single crossing point is :func:`db_to_linear`, which also divides by the
noise power so that downstream formulas can use unit noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from .citymap import CityMap, los_indicator

__all__ = [
    "ChannelParams",
    "Measurement",
    "SingularityError",
    "los_gain_db",
    "los_gain_grad_db",
    "los_gain_hessian_db",
    "nlos_penalty_db",
    "true_gain_db",
    "measure",
    "db_to_linear",
    "dbm_to_watt",
    "objective_f0",
    "objective_fk",
]

LN2 = math.log(2.0)
_DB = 10.0 / math.log(10.0)


class SingularityError(ValueError):
    """Gain queried at zero distance from the node."""


@dataclass(frozen=True)
class ChannelParams:
    """Parameters of the dB-domain channel.

    ``sigma`` is the standard deviation of the additive measurement noise in
    dB.  ``lg`` bounds the curvature of the LOS gain over the region of
    interest, ``lg2`` is the local curvature used in the MSE approximation.
    """

    b0: float = -46.53
    a0: float = -2.0
    nlos_penalty_mean: float = -30.0
    nlos_penalty_std: float = 0.0
    sigma: float = math.sqrt(5.0)
    lg: float = 8.7e-4
    lg2: float = 3.5e-3

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.a0 >= 0:
            raise ValueError("a0 must be negative")
        if self.nlos_penalty_mean >= 0:
            raise ValueError("nlos_penalty_mean must be negative")
        if self.nlos_penalty_std < 0:
            raise ValueError("nlos_penalty_std must be >= 0")
        if self.lg <= 0 or self.lg2 <= 0:
            raise ValueError("lg and lg2 must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Measurement:
    position: np.ndarray
    node_id: int
    y: float
    is_los: bool
    time: float = 0.0

    def __post_init__(self):
        if not math.isfinite(self.y):
            raise ValueError("measurement value must be finite")
        if self.node_id < 0:
            raise ValueError("node_id must be >= 0")


def _distance(x, u) -> np.ndarray:
    d = np.linalg.norm(np.asarray(x, dtype=float) - np.asarray(u, dtype=float), axis=-1)
    if np.any(d <= 0):
        raise SingularityError("gain is singular at zero distance from the node")
    return d


def los_gain_db(params: ChannelParams, x, u):
    """``b0 + 10 a0 log10 d(x, u)``; vectorized over leading axes of ``x``."""
    d = _distance(x, u)
    out = params.b0 + 10.0 * params.a0 * np.log10(d)
    return float(out) if np.ndim(out) == 0 else out


def los_gain_grad_db(params: ChannelParams, x, u) -> np.ndarray:
    """Spatial gradient of :func:`los_gain_db` in dB/m."""
    x = np.asarray(x, dtype=float)
    diff = x - np.asarray(u, dtype=float)
    d2 = np.sum(diff * diff, axis=-1, keepdims=True)
    if np.any(d2 <= 0):
        raise SingularityError("gain gradient is singular at zero distance")
    return params.a0 * _DB * diff / d2


def los_gain_hessian_db(params: ChannelParams, x, u) -> np.ndarray:
    diff = np.asarray(x, dtype=float) - np.asarray(u, dtype=float)
    d2 = float(diff @ diff)
    if d2 <= 0:
        raise SingularityError("gain Hessian is singular at zero distance")
    return params.a0 * _DB * (np.eye(3) / d2 - 2.0 * np.outer(diff, diff) / d2**2)


def nlos_penalty_db(params: ChannelParams, x, node_id: int, seed: int = 0) -> float:
    """Shadowing penalty frozen per (seed, node, position at 1 mm resolution)."""
    if params.nlos_penalty_std == 0:
        return params.nlos_penalty_mean
    key = np.round(np.asarray(x, dtype=float) * 1000.0).astype(np.int64) + (1 << 40)
    rng = np.random.default_rng([int(seed), int(node_id), *key.tolist()])
    return float(params.nlos_penalty_mean + params.nlos_penalty_std * rng.standard_normal())


def true_gain_db(params: ChannelParams, city: CityMap, x, u, node_id: int = 0, seed: int = 0,
                 is_los: bool | None = None) -> float:
    """Ground-truth gain: the LOS law, plus the shadowing penalty when blocked."""
    g = los_gain_db(params, x, u)
    if is_los is None:
        is_los = los_indicator(city, x, u)
    return g if is_los else g + nlos_penalty_db(params, x, node_id, seed)


def measure(params: ChannelParams, city: CityMap, x, u, node_id: int, rng: np.random.Generator,
            time: float = 0.0, seed: int = 0) -> Measurement:
    """One noisy dB-domain sample of the gain between ``x`` and node ``u``."""
    x = np.asarray(x, dtype=float)
    los = los_indicator(city, x, u)
    g = true_gain_db(params, city, x, u, node_id, seed, is_los=los)
    y = g + params.sigma * rng.standard_normal()
    return Measurement(position=x.copy(), node_id=node_id, y=float(y), is_los=los, time=time)


def db_to_linear(g_db, noise_power: float = 1.0):
    """Linear power gain divided by noise power (the only dB/linear crossing)."""
    return np.power(10.0, np.asarray(g_db, dtype=float) / 10.0) / noise_power


def dbm_to_watt(p_dbm) -> float | np.ndarray:
    return np.power(10.0, (np.asarray(p_dbm, dtype=float) - 30.0) / 10.0)


def objective_f0(g0_linear, p0: float):
    """Backhaul capacity ``log2(1 + P0 g0)`` in bits/s/Hz."""
    g0 = np.asarray(g0_linear, dtype=float)
    if np.any(g0 <= 0):
        raise ValueError("linear gain must be positive")
    return np.log2(1.0 + p0 * g0)


def objective_fk(gk_linear, pk, kind: str = "comm", weight: float = 1.0):
    """Per-user objective: ``w log2(1 + p g)`` (comm) or ``w p g`` (sensing)."""
    g = np.asarray(gk_linear, dtype=float)
    p = np.asarray(pk, dtype=float)
    if np.any(g <= 0):
        raise ValueError("linear gain must be positive")
    if np.any(p < 0):
        raise ValueError("power must be non-negative")
    if kind == "comm":
        return weight * np.log2(1.0 + p * g)
    if kind == "sensing":
        return weight * p * g
    raise ValueError(f"unknown objective kind {kind!r}")
