"""Raster city maps, line-of-sight queries and synthetic scenarios.

Buildings are stored as a height grid.  ``heights[row, col]`` is the building
height of the cell whose lower-left corner is
``origin + (col * cell_size, row * cell_size)``, so rows run along y and
columns along x.

A segment from a node ``u`` to a UAV position ``x`` is sampled at
``cell_size / 2`` spacing of its *horizontal* projection.  Because the sample
locations do not depend on the altitude of ``x``, the set of altitudes with
line of sight above a horizontal position is an open half line
``z > clearance``.  That makes upward invariance exact.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "CityMap",
    "Scenario",
    "DomainError",
    "ConfigurationError",
    "clearance_heights",
    "los_indicator",
    "is_full_los",
    "generate_manhattan_map",
    "place_users",
    "make_scenario",
    "top_fraction_min_height",
]

_CHUNK = 4096


class DomainError(ValueError):
    """A position lies outside the map footprint."""


class ConfigurationError(ValueError):
    """Generator or scenario parameters cannot be satisfied."""


@dataclass(frozen=True, eq=False)
class CityMap:
    """Immutable height raster with a minimum flight altitude."""

    heights: np.ndarray
    cell_size: float
    h_min: float
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        h = np.array(self.heights, dtype=float)
        if h.ndim != 2 or h.shape[0] < 1 or h.shape[1] < 1:
            raise ValueError(f"heights must be a non-empty 2D grid, got shape {h.shape}")
        if not np.all(np.isfinite(h)) or np.any(h < 0):
            raise ValueError("building heights must be finite and >= 0")
        if not self.cell_size > 0:
            raise ValueError("cell_size must be positive")
        if not self.h_min > 0:
            raise ValueError("h_min must be positive")
        h.setflags(write=False)
        object.__setattr__(self, "heights", h)
        object.__setattr__(self, "cell_size", float(self.cell_size))
        object.__setattr__(self, "h_min", float(self.h_min))
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def depth(self) -> int:
        return self.heights.shape[0]

    @property
    def width(self) -> int:
        return self.heights.shape[1]

    @property
    def extent(self) -> tuple[float, float, float, float]:
        """(xmin, xmax, ymin, ymax) of the footprint in meters."""
        ox, oy = self.origin
        return ox, ox + self.width * self.cell_size, oy, oy + self.depth * self.cell_size

    @property
    def ceiling(self) -> float:
        return float(self.heights.max())

    @property
    def bcr(self) -> float:
        """Building coverage ratio: fraction of cells carrying a building."""
        return float(np.mean(self.heights > 0))

    def contains(self, xy) -> np.ndarray | bool:
        xy = np.asarray(xy, dtype=float)
        xmin, xmax, ymin, ymax = self.extent
        inside = (xy[..., 0] >= xmin) & (xy[..., 0] <= xmax) & (xy[..., 1] >= ymin) & (xy[..., 1] <= ymax)
        return bool(inside) if inside.ndim == 0 else inside

    def check_inside(self, p, what: str = "position") -> None:
        if not np.all(self.contains(np.asarray(p, dtype=float)[..., :2])):
            raise DomainError(f"{what} {np.asarray(p).tolist()} is outside the map footprint {self.extent}")

    def cell_index(self, xy) -> tuple[np.ndarray, np.ndarray]:
        """Row/column of the cell under each horizontal position (edges clamp inward)."""
        xy = np.asarray(xy, dtype=float)
        col = np.floor((xy[..., 0] - self.origin[0]) / self.cell_size).astype(np.int64)
        row = np.floor((xy[..., 1] - self.origin[1]) / self.cell_size).astype(np.int64)
        return np.clip(row, 0, self.depth - 1), np.clip(col, 0, self.width - 1)

    def height_at(self, xy) -> np.ndarray | float:
        row, col = self.cell_index(xy)
        out = self.heights[row, col]
        return float(out) if np.ndim(out) == 0 else out

    def cell_center(self, row: int, col: int, z: float = 0.0) -> np.ndarray:
        ox, oy = self.origin
        return np.array([ox + (col + 0.5) * self.cell_size, oy + (row + 0.5) * self.cell_size, z])

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "origin": list(self.origin),
            "cell_size": self.cell_size,
            "h_min": self.h_min,
            "heights": self.heights.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CityMap":
        missing = {"origin", "cell_size", "h_min", "heights"} - set(d)
        if missing:
            raise ValueError(f"map file missing fields: {sorted(missing)}")
        return cls(heights=np.asarray(d["heights"], dtype=float), cell_size=d["cell_size"],
                   h_min=d["h_min"], origin=tuple(d["origin"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "CityMap":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def with_h_min(self, h_min: float) -> "CityMap":
        return CityMap(self.heights, self.cell_size, h_min, self.origin)


def clearance_heights(city: CityMap, xy, u) -> np.ndarray:
    """Altitude above which each horizontal position in ``xy`` sees node ``u``.

    Returns an array ``c`` with ``los(x, u) <=> x[2] > c`` for ``x[:2] = xy``.
    The segment is sampled at fractions ``s = i/n`` (``i = 1..n``) with
    ``n = ceil(horizontal_distance / (cell_size/2))``; a sample at fraction
    ``s`` clears its cell iff ``u_z + s (z - u_z) > b``.
    """
    xy = np.atleast_2d(np.asarray(xy, dtype=float))[:, :2]
    u = np.asarray(u, dtype=float)
    dx = xy[:, 0] - u[0]
    dy = xy[:, 1] - u[1]
    hd = np.hypot(dx, dy)
    n = np.maximum(1, np.ceil(hd / (0.5 * city.cell_size))).astype(np.int64)
    out = np.empty(len(xy))
    for lo in range(0, len(xy), _CHUNK):
        sl = slice(lo, lo + _CHUNK)
        nc = n[sl]
        i = np.arange(1, nc.max() + 1)
        s = i[None, :] / nc[:, None]
        s = np.where(i[None, :] <= nc[:, None], s, 1.0)
        px = u[0] + s * dx[sl, None]
        py = u[1] + s * dy[sl, None]
        row, col = city.cell_index(np.stack([px, py], axis=-1))
        b = city.heights[row, col]
        out[sl] = np.max(u[2] + (b - u[2]) / s, axis=1)
    return out


def los_indicator(city: CityMap, x, u) -> bool:
    """True iff the segment from ``u`` to ``x`` clears every building it crosses."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    city.check_inside(x, "UAV position")
    city.check_inside(u, "node position")
    return bool(x[2] > clearance_heights(city, x[None, :2], u)[0])


def is_full_los(city: CityMap, x, scenario: "Scenario") -> bool:
    """Line of sight to the BS and to every user."""
    return all(los_indicator(city, x, u) for u in scenario.node_positions)


def top_fraction_min_height(building_heights, fraction: float = 0.2) -> float:
    """Minimum height among the tallest ``fraction`` of buildings."""
    hb = np.sort(np.asarray(building_heights, dtype=float))[::-1]
    if hb.size == 0:
        raise ConfigurationError("no buildings to derive h_min from")
    k = max(1, int(math.ceil(fraction * hb.size)))
    return float(hb[k - 1])


def generate_manhattan_map(
    seed: int,
    footprint: float = 1000.0,
    cell_size: float = 5.0,
    block: float = 60.0,
    street: float = 20.0,
    lot: float = 20.0,
    target_bcr: float = 0.18,
    height_median: float = 18.0,
    height_sigma: float = 0.6,
    height_range: tuple[float, float] = (4.0, 150.0),
    h_min: float | None = None,
    flat_h_min: float = 30.0,
) -> CityMap:
    """Grid-of-blocks city with lognormal building heights.

    Blocks of side ``block`` are separated by streets of width ``street`` and
    split into square lots of side ``lot``.  Lots are switched on in a seeded
    random order until the covered fraction reaches ``target_bcr``, so the
    realized BCR overshoots the target by at most one lot.  Each lot gets one
    height drawn from a lognormal clipped to ``height_range``.

    ``h_min`` defaults to the minimum height of the tallest 20% of buildings;
    a flat map (``target_bcr == 0``) uses ``flat_h_min`` instead.
    """
    if min(footprint, cell_size, block, lot) <= 0 or street < 0:
        raise ConfigurationError("map dimensions must be positive")
    if not 0 <= target_bcr < 0.6:
        raise ConfigurationError(f"target BCR {target_bcr} outside [0, 0.6)")
    for name, v in (("footprint", footprint), ("block", block), ("street", street), ("lot", lot)):
        if abs(v / cell_size - round(v / cell_size)) > 1e-9:
            raise ConfigurationError(f"{name}={v} is not a multiple of cell_size={cell_size}")
    n = int(round(footprint / cell_size))
    heights = np.zeros((n, n))
    if target_bcr == 0:
        return CityMap(heights, cell_size, flat_h_min if h_min is None else h_min)

    rng = np.random.default_rng(seed)
    bc, sc, lc = (int(round(v / cell_size)) for v in (block, street, lot))
    pitch = bc + sc
    lots = []
    for b0 in range(sc // 2, n - bc + 1, pitch):
        for b1 in range(sc // 2, n - bc + 1, pitch):
            for i in range(0, bc - lc + 1, lc):
                for j in range(0, bc - lc + 1, lc):
                    lots.append((b0 + i, b1 + j))
    capacity = len(lots) * lc * lc / (n * n)
    if capacity < target_bcr - 0.03:
        raise ConfigurationError(
            f"target BCR {target_bcr:.3f} unreachable: block geometry covers at most {capacity:.3f}")

    lo, hi = height_range
    order = rng.permutation(len(lots))
    lot_heights = np.clip(height_median * np.exp(height_sigma * rng.standard_normal(len(lots))), lo, hi)
    covered = 0
    built = []
    for idx in order:
        if covered / (n * n) >= target_bcr:
            break
        r, c = lots[idx]
        heights[r:r + lc, c:c + lc] = lot_heights[idx]
        covered += lc * lc
        built.append(lot_heights[idx])
    if h_min is None:
        h_min = top_fraction_min_height(built)
    return CityMap(heights, cell_size, h_min)


def place_users(city: CityMap, seed: int, K: int, center=None, radius: float | None = None) -> np.ndarray:
    """K distinct ground positions at centers of open (height 0) cells.

    With ``center`` and ``radius`` the draw is restricted to open cells whose
    centers lie within ``radius`` of ``center`` (a user cluster).
    """
    if K < 1:
        raise ConfigurationError("K must be >= 1")
    rows, cols = np.nonzero(city.heights == 0)
    if center is not None and radius is not None:
        ox, oy = city.origin
        cx = ox + (cols + 0.5) * city.cell_size
        cy = oy + (rows + 0.5) * city.cell_size
        keep = np.hypot(cx - center[0], cy - center[1]) <= radius
        rows, cols = rows[keep], cols[keep]
    if rows.size < K:
        raise ConfigurationError(f"only {rows.size} open cells available for {K} users")
    rng = np.random.default_rng(seed)
    pick = rng.choice(rows.size, size=K, replace=False)
    return np.array([city.cell_center(rows[i], cols[i], 0.0) for i in pick])


@dataclass(eq=False)
class Scenario:
    """BS and user layout, power budgets and the problem being solved.

    ``problem_kind`` is ``"balancing"`` or ``"sum-rate"``; ``objective`` is
    ``"comm"`` (weighted capacity) or ``"sensing"`` (weighted SNR).  Powers
    and ``noise_power`` are linear watts; gains are divided by
    ``noise_power`` before entering any capacity or SNR expression.
    """

    bs_position: np.ndarray
    user_positions: np.ndarray
    p0: float
    p_total: float
    problem_kind: str = "sum-rate"
    objective: str = "comm"
    weights: np.ndarray | None = None
    noise_power: float = 1.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.bs_position = np.asarray(self.bs_position, dtype=float).reshape(3)
        self.user_positions = np.atleast_2d(np.asarray(self.user_positions, dtype=float))
        if self.user_positions.shape[1] != 3 or len(self.user_positions) < 1:
            raise ValueError("user_positions must be a (K, 3) array with K >= 1")
        if self.weights is None:
            self.weights = np.ones(self.K)
        self.weights = np.asarray(self.weights, dtype=float).reshape(self.K)
        if self.p0 <= 0 or self.p_total <= 0:
            raise ValueError("p0 and p_total must be positive")
        if np.any(self.weights <= 0):
            raise ValueError("weights must be positive")
        if self.noise_power <= 0:
            raise ValueError("noise_power must be positive")
        if self.problem_kind not in ("balancing", "sum-rate"):
            raise ValueError(f"unknown problem kind {self.problem_kind!r}")
        if self.objective not in ("comm", "sensing"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.problem_kind == "sum-rate" and self.objective != "comm":
            raise ValueError("sum-rate is defined for communication objectives only")
        if self.problem_kind == "balancing" and self.objective == "comm" and np.ptp(self.weights) > 0:
            raise ValueError("communication balancing needs a common weight for all users")

    @property
    def K(self) -> int:
        return len(self.user_positions)

    @property
    def node_positions(self) -> np.ndarray:
        """BS first (node 0), then users 1..K."""
        return np.vstack([self.bs_position, self.user_positions])

    def validate(self, city: CityMap) -> None:
        city.check_inside(self.bs_position, "BS position")
        for u in self.user_positions:
            city.check_inside(u, "user position")

    def to_dict(self) -> dict:
        return {
            "bs_position": self.bs_position.tolist(),
            "user_positions": self.user_positions.tolist(),
            "p0": self.p0,
            "p_total": self.p_total,
            "problem_kind": self.problem_kind,
            "objective": self.objective,
            "weights": self.weights.tolist(),
            "noise_power": self.noise_power,
        }


def make_scenario(
    city: CityMap,
    seed: int,
    K: int,
    problem_kind: str = "sum-rate",
    objective: str = "comm",
    p_total: float = 1.0,
    p0: float | None = None,
    noise_power: float = 1e-9,
    cluster_radius: float = 60.0,
    bs_distance: tuple[float, float] = (300.0, 600.0),
    bs_mast: float = 5.0,
    margin: float = 100.0,
    weights=None,
) -> Scenario:
    """Random user cluster plus a rooftop BS at a bounded distance.

    The cluster center is drawn away from the map edge by ``margin``; users
    are placed on open cells within ``cluster_radius`` of it.  The BS sits
    ``bs_mast`` meters above a building at least ``h_min`` tall whose
    horizontal distance to the cluster center lies in ``bs_distance`` (any
    building if the map is flat is replaced by a ground mast).  ``p0``
    defaults to ``K * p_total``.
    """
    rng = np.random.default_rng(seed)
    xmin, xmax, ymin, ymax = city.extent
    for _ in range(200):
        center = np.array([rng.uniform(xmin + margin, xmax - margin), rng.uniform(ymin + margin, ymax - margin)])
        try:
            users = place_users(city, int(rng.integers(2**31)), K, center=center, radius=cluster_radius)
        except ConfigurationError:
            continue
        rows, cols = np.nonzero(city.heights >= (city.h_min if city.ceiling > 0 else 0.0))
        if city.ceiling == 0:
            rows, cols = np.nonzero(city.heights == 0)
        ox, oy = city.origin
        cx = ox + (cols + 0.5) * city.cell_size
        cy = oy + (rows + 0.5) * city.cell_size
        d = np.hypot(cx - center[0], cy - center[1])
        ok = np.nonzero((d >= bs_distance[0]) & (d <= bs_distance[1]))[0]
        if ok.size == 0:
            continue
        j = ok[rng.integers(ok.size)]
        bs = city.cell_center(rows[j], cols[j], city.heights[rows[j], cols[j]] + bs_mast)
        sc = Scenario(bs, users, p0=K * p_total if p0 is None else p0, p_total=p_total,
                      problem_kind=problem_kind, objective=objective, weights=weights,
                      noise_power=noise_power, meta={"seed": seed, "cluster_center": center.tolist()})
        sc.validate(city)
        return sc
    raise ConfigurationError("could not place a user cluster and BS satisfying the distance band")
