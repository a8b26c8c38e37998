"""How far apart should the measurements be?

A local linear map fitted from noisy dB samples has two error sources: noise,
which shrinks as the samples spread out, and curvature of the true gain,
which grows with the spread and with how far the map is used from its
anchor.  This script shows the variance floor reached by the alternating
spiral, compares a random cloud of the same size, and prints the radius that
balances the two error terms for several buffer sizes and look-ahead ranges.
"""

import numpy as np

from uavsearch.estimation import (
    alternating_spiral_pattern,
    check_pattern_conditions,
    estimator_error_trace,
    optimal_measurement_radius,
    variance_lower_bound,
)

sigma, M, r1 = 5.0, 100, 20.0
rng = np.random.default_rng(0)

P = alternating_spiral_pattern(M, r1)
print("spiral pattern, worst optimality-condition residual:",
      f"{max(check_pattern_conditions(P, np.zeros(3), r1).values()):.1e}")
floor = variance_lower_bound(M, r1, sigma)
mc = estimator_error_trace(P, sigma, 10_000, rng)["trace"]
print(f"variance floor {floor:.4f}, spiral Monte Carlo {mc:.4f}")

d = rng.normal(size=(M, 3))
d *= (r1 * rng.uniform(0, 1, M) ** (1 / 3) / np.linalg.norm(d, axis=1))[:, None]
A = np.column_stack([np.ones(M), d])
print(f"random ball of the same radius: {sigma**2 * np.trace(np.linalg.inv(A.T @ A)):.4f}\n")

print("optimal radius r1 [m] (rows: look-ahead r0, columns: buffer size M)")
Ms = (40, 60, 80, 100)
print("r0 \\ M " + "".join(f"{m:>7}" for m in Ms))
for r0 in (10.0, 20.0, 30.0):
    row = [optimal_measurement_radius(m, r0, sigma, 3.5e-3) for m in Ms]
    print(f"{r0:>6.0f} " + "".join(f"{r:7.1f}" for r in row))
