"""Scoring forecasts: weighted RMSE, zonal spectra, blur, ensembles.

The blur score compares spectral power between forecast and truth at one
wavelength; averaging ensemble members lowers RMSE but smooths the field,
and the subset curve makes that tradeoff visible.
"""

import numpy as np

from gridcast.evaluation import (blur_index, ensemble_curve, latitude_rmse,
                                 scorecard, zonal_power)
from gridcast.grid import desk_grid

spec = desk_grid()
rng = np.random.default_rng(7)
truth = rng.standard_normal((spec.rows, spec.cols))

# latitude weighting: the same error counts for less near the poles
polar = truth.copy()
polar[0] += 1.0
tropic = truth.copy()
tropic[spec.rows // 2] += 1.0
print(f"rmse, one-unit error on a polar row:    "
      f"{latitude_rmse(polar, truth, spec):.4f}")
print(f"rmse, one-unit error on a tropical row: "
      f"{latitude_rmse(tropic, truth, spec):.4f}")

p = zonal_power(truth, spec)
print(f"\nzonal power bins per row: {p.shape[1]} "
      f"(Parseval check {abs(p.sum(1) - (truth**2).mean(1)).max():.1e})")

half = truth * 0.5
double = truth * 2.0
for name, f in (("half-amplitude", half), ("truth", truth),
                ("double-amplitude", double)):
    print(f"blur at 2000 km, {name:>17}: "
          f"{blur_index(f, truth, spec, 2000.0):.3f}")

members = truth[None] + 0.8 * rng.standard_normal((12, spec.rows, spec.cols))
rows = ensemble_curve(members, truth, spec, wavelength_km=2000.0)
print(f"\n{'k':>3} {'rmse':>8} {'blur':>8}")
for r in rows:
    print(f"{r['size']:>3} {r['rmse']:>8.4f} {r['blur']:>8.4f}")

a = {"t2m.24h": 1.10, "z500.24h": 0.95}
b = {"t2m.24h": 1.25, "z500.24h": 1.00}
print(f"\nscorecard a vs b (negative = a better): {scorecard(a, b)}")
