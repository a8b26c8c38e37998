"""Follow the balance sphere in free space.

With no buildings and free-space gains the surface where the backhaul and
the user side balance is a sphere with a closed form.  This script builds
one such layout, prints the sphere, then runs the search twice: once with
exact channel knowledge and once from noisy measurements along the spiral.
For both it reports how closely the search point stayed on the sphere and
what it settled on, next to the best point of the sphere itself.
"""

import math

import numpy as np

from uavsearch.allocation import sphere_parameters
from uavsearch.baselines import evaluate_objective, genius_aided, proposed
from uavsearch.citymap import CityMap, make_scenario
from uavsearch.trajectory import PHASE1

city = CityMap(np.zeros((200, 200)), 5.0, 30.0)  # 1 km flat footprint, h_min 30 m
K = 2
sc = make_scenario(city, 1, K, "balancing", p_total=1.0, p0=3.0 / K)
sp = sphere_parameters(sc)
print(f"BS at {np.round(sc.bs_position, 1)}, users at\n{np.round(sc.user_positions, 1)}")
print(f"balance sphere: centre {np.round(sp.center, 1)}, radius {sp.radius:.1f} m")

# best point on the sphere: closest to the BS, pushed up to h_min if needed
o, R, u0 = sp.center, sp.radius, sc.bs_position
x_opt = o + R * (u0 - o) / np.linalg.norm(u0 - o)
if x_opt[2] < city.h_min:
    rc = math.sqrt(R**2 - (city.h_min - o[2]) ** 2)
    h = (u0 - o)[:2]
    x_opt = np.array([*(o[:2] + rc * h / np.linalg.norm(h)), city.h_min])
v_opt = evaluate_objective(city, sc, x_opt)
print(f"sphere optimum {np.round(x_opt, 1)}: {v_opt:.4f} bit/s/Hz\n")

for name, fn in (("genius", genius_aided), ("proposed", proposed)):
    res, log = fn(city, sc, seed=1)
    m = log.column("phase") == PHASE1
    dev = np.abs(np.linalg.norm(log.search_positions[m] - o, axis=1) - R)
    print(f"{name:>9}: value {res.value:.4f} ({res.value / v_opt:.1%} of optimum), "
          f"length {res.trajectory_length:.0f} m, stopped on {res.records['termination']}")
    print(f"{'':>9}  distance to sphere during descent: median {np.median(dev):.2f} m, max {dev.max():.2f} m")
