"""All schemes on one synthetic Manhattan block.

Generates a 1 km x 1 km grid city (18% building cover), places four users
and a rooftop BS, and compares the online search against the exhaustive
lattice searches and the LOS-probability baseline.  Pass a seed as the first
argument to try another city; a full run takes around half a minute.
"""

import sys
import time

from uavsearch.baselines import (
    exhaustive_2d,
    exhaustive_3d,
    genius_aided,
    lattice,
    proposed,
    statistical_geometry,
)
from uavsearch.citymap import generate_manhattan_map, make_scenario

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
city = generate_manhattan_map(seed)
sc = make_scenario(city, seed, 4, "sum-rate", p_total=1.0, noise_power=1e-9)
print(f"seed {seed}: building cover {city.bcr:.2f}, h_min {city.h_min:.0f} m, tallest {city.ceiling:.0f} m")

t0 = time.perf_counter()
grid = lattice(city, sc, 5.0)
print(f"5 m lattice: {grid.size} points ({time.perf_counter() - t0:.1f} s)\n")

rows = [exhaustive_3d(city, sc, grid=grid), exhaustive_2d(city, sc, grid=grid),
        statistical_geometry(city, sc, grid=grid, seed=seed)]
rows += [proposed(city, sc, seed=seed)[0], genius_aided(city, sc, seed=seed)[0]]
ref = rows[0].value
print(f"{'scheme':<12}{'capacity':>10}{'vs Exh3D':>10}{'length [km]':>13}  position")
for r in rows:
    note = " (lattice proxy)" if r.records.get("length_is_proxy") else ""
    print(f"{r.scheme:<12}{r.value:10.3f}{r.value / ref:10.1%}{r.trajectory_length / 1e3:13.2f}  "
          f"{[round(float(v), 1) for v in r.best_x]}{note}")
