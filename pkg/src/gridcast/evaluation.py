"""Forecast verification: weighted RMSE, zonal spectra, blur, ensembles.

Conventions used throughout:
  - fields are (rows, cols) or (times, rows, cols) float arrays
  - spatial averages weight each row by cos(latitude) but divide by the
    plain cell count, so the weights are used as given, not renormalized
  - zonal power uses the mean-square convention: the bins of one row sum
    to the spatial mean of the squared field along that row
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, DataError
from .grid import GridSpec, latitude_weights, row_circumference_km

BLUR_UNBOUNDED = float("inf")

# ensemble-mean RMSE is reported at these member counts (clipped to the
# members actually available)
DEFAULT_SUBSET_SIZES = (1, 2, 4, 8, 12, 16, 20, 24, 28, 32, 36, 40, 44, 48, 51)


def _as_time_stack(arr, spec: GridSpec, name: str) -> np.ndarray:
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3 or a.shape[1:] != (spec.rows, spec.cols):
        raise DataError(
            f"{name} must be (times, {spec.rows}, {spec.cols}); got {np.asarray(arr).shape}")
    return a


# ---------------------------------------------------------------------------
# RMSE
# ---------------------------------------------------------------------------

def latitude_rmse(pred, truth, spec: GridSpec) -> float:
    """Cos-latitude weighted RMSE, averaged over times.

    Each time contributes sqrt(sum_ij w_i d_ij^2 / (rows*cols)) with
    w_i = cos(lat_i); the result is the plain mean of those values.
    """
    p = _as_time_stack(pred, spec, "pred")
    t = _as_time_stack(truth, spec, "truth")
    if p.shape != t.shape:
        raise DataError(f"shape mismatch {p.shape} vs {t.shape}")
    w = latitude_weights(spec)[None, :, None]
    d2 = (p - t) ** 2
    per_time = np.sqrt((w * d2).sum(axis=(1, 2)) / (spec.rows * spec.cols))
    return float(per_time.mean())


# ---------------------------------------------------------------------------
# zonal spectra
# ---------------------------------------------------------------------------

def zonal_power(field, spec: GridSpec) -> np.ndarray:
    """Per-row zonal power spectrum, (rows, cols//2 + 1).

    Bin m holds the mean-square contribution of zonal wavenumber m, so each
    row's bins sum to the mean of the squared field over that row.
    """
    f = np.asarray(field, dtype=np.float64)
    if f.shape != (spec.rows, spec.cols):
        raise DataError(f"field must be {(spec.rows, spec.cols)}; got {f.shape}")
    w = spec.cols
    coef = np.fft.rfft(f, axis=1)
    p = (coef.real ** 2 + coef.imag ** 2) / (w * w)
    if w % 2 == 0:
        p[:, 1:-1] *= 2.0
    else:
        p[:, 1:] *= 2.0
    return p


def power_at_wavelength(field, spec: GridSpec, wavelength_km: float) -> float:
    """Zonal power at one wavelength, interpolated and averaged over rows.

    Along each row the discrete wavenumbers m >= 1 map to wavelengths
    circumference/m; power is interpolated linearly in log wavelength.
    Rows whose resolvable range misses the target (short polar circles)
    are left out; the rest are averaged with cos-latitude weights.
    """
    if wavelength_km <= 0:
        raise ConfigError("wavelength must be positive")
    p = zonal_power(field, spec)
    n_wave = p.shape[1] - 1
    if n_wave < 1:
        raise ConfigError("grid too narrow for any zonal wave")
    circ = row_circumference_km(spec)
    weights = latitude_weights(spec)
    x = np.log(wavelength_km)
    m = np.arange(1, n_wave + 1, dtype=np.float64)

    acc = 0.0
    wsum = 0.0
    for r in range(spec.rows):
        lam = circ[r] / m  # decreasing in m
        if not (lam[-1] <= wavelength_km <= lam[0]):
            continue
        xs = np.log(lam[::-1])
        ys = p[r, 1:][::-1]
        acc += weights[r] * float(np.interp(x, xs, ys))
        wsum += weights[r]
    if wsum == 0.0:
        raise ConfigError(
            f"wavelength {wavelength_km} km outside every row's resolvable range")
    return acc / wsum


def blur_index(pred, truth, spec: GridSpec, wavelength_km: float) -> float:
    """Sharpness loss at one wavelength: 1/sqrt(power ratio pred/truth).

    1.0 means the forecast carries the same power as the truth at that
    scale; larger is smoother. When the ratio is undefined or zero (no
    forecast power, or no truth power to compare against) the unbounded
    sentinel is returned so callers can exclude the case.
    """
    pt = power_at_wavelength(truth, spec, wavelength_km)
    pf = power_at_wavelength(pred, spec, wavelength_km)
    if pt <= 0.0:
        return BLUR_UNBOUNDED
    ratio = pf / pt
    if ratio <= 0.0:
        return BLUR_UNBOUNDED
    return float(1.0 / np.sqrt(ratio))


# ---------------------------------------------------------------------------
# ensembles
# ---------------------------------------------------------------------------

def subset_sizes(n_members: int, sizes=None) -> tuple:
    chosen = DEFAULT_SUBSET_SIZES if sizes is None else tuple(sizes)
    out = tuple(int(k) for k in chosen if 1 <= int(k) <= n_members)
    if not out:
        raise ConfigError(f"no usable subset sizes for {n_members} members")
    return out


def ensemble_curve(members, truth, spec: GridSpec, sizes=None,
                   wavelength_km=None):
    """RMSE (and optionally blur) of the leading-k ensemble mean.

    members is (n_members, rows, cols) or (n_members, times, rows, cols).
    Returns a list of {size, rmse[, blur]} rows, one per subset size.
    """
    m = np.asarray(members, dtype=np.float64)
    if m.ndim == 3:
        m = m[:, None]
    if m.ndim != 4 or m.shape[2:] != (spec.rows, spec.cols):
        raise DataError(
            f"members must be (n, times, {spec.rows}, {spec.cols}); got "
            f"{np.asarray(members).shape}")
    t = _as_time_stack(truth, spec, "truth")
    if m.shape[1:] != t.shape:
        raise DataError(f"member shape {m.shape[1:]} vs truth {t.shape}")
    rows = []
    for k in subset_sizes(m.shape[0], sizes):
        mean = m[:k].mean(axis=0)
        row = {"size": k, "rmse": latitude_rmse(mean, t, spec)}
        if wavelength_km is not None:
            blurs = [blur_index(mean[i], t[i], spec, wavelength_km)
                     for i in range(t.shape[0])]
            row["blur"] = float(np.mean(blurs))
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# scorecards
# ---------------------------------------------------------------------------

def scorecard(rmse_a: dict, rmse_b: dict) -> dict:
    """Percent RMSE change of a versus b, keyed like the inputs.

    Negative means a is better. Keys must match exactly; a zero baseline
    yields NaN for that entry.
    """
    if set(rmse_a) != set(rmse_b):
        missing = set(rmse_a) ^ set(rmse_b)
        raise DataError(f"scorecard key mismatch: {sorted(missing)}")
    out = {}
    for k in sorted(rmse_a):
        b = float(rmse_b[k])
        a = float(rmse_a[k])
        out[k] = float("nan") if b == 0.0 else 100.0 * (a - b) / b
    return out
