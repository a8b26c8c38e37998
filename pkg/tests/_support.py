"""Shared scenario builders for the test suite."""

import numpy as np

from uavsearch.allocation import sphere_parameters
from uavsearch.citymap import CityMap, make_scenario


def flat_city(n=200, cell=5.0, h_min=30.0):
    return CityMap(np.zeros((n, n)), cell, h_min)


def free_space_balancing(count, r_spiral=25.0, margin=40.0, bs_ratio=3.0):
    """Yield (seed, city, scenario, sphere) for reachable free-space balancing layouts.

    K cycles through 1, 2, 4 and P0 = bs_ratio * P_T / K.  Layouts whose
    sphere top stays below h_min + r_spiral + margin are skipped.
    """
    city = flat_city()
    seed = 0
    out = 0
    while out < count:
        K = (1, 2, 4)[seed % 3]
        sc = make_scenario(city, seed, K, "balancing", p_total=1.0, p0=bs_ratio / K)
        sp = sphere_parameters(sc)
        if sp.center[2] + sp.radius >= city.h_min + r_spiral + margin:
            yield seed, city, sc, sp
            out += 1
        seed += 1


REPORT = []


def report(label, ok, detail=""):
    """Print one verdict line; the lines are repeated in the pytest terminal summary."""
    line = f"[{'PASS' if ok else 'FAIL'}] {label} {detail}".rstrip()
    REPORT.append(line)
    print(line)
    return ok
