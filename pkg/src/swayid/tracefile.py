"""CSV import/export for uniformly sampled angle traces.

All angle traces on disk are two-column CSV (time_s, angle_rad), SI units.
"""

from __future__ import annotations

import numpy as np

from .errors import InputFormatError


def save_trace(path, samples, dt, header=("time_s", "angle_rad")):
    """Write a uniformly sampled trace as CSV with a time column."""
    samples = np.asarray(samples, dtype=np.float64)
    t = np.arange(samples.shape[0]) * dt
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for ti, xi in zip(t, samples):
            fh.write("%.17g,%.17g\n" % (ti, xi))


def load_trace(path):
    """Read a (time, angle) CSV; returns (samples, dt).

    The time column must be uniform; dt is recovered from it.
    """
    try:
        data = np.genfromtxt(path, delimiter=",", skip_header=1, dtype=np.float64)
    except OSError:
        raise
    except Exception as exc:
        raise InputFormatError(f"{path}: cannot parse trace CSV: {exc}") from exc
    if data.ndim == 1:
        data = data.reshape(1, -1)
    if data.ndim != 2 or data.shape[1] < 2 or data.shape[0] < 2:
        raise InputFormatError(f"{path}: expected >=2 rows of time,angle")
    if not np.all(np.isfinite(data[:, :2])):
        raise InputFormatError(f"{path}: non-finite values in trace")
    t, x = data[:, 0], data[:, 1]
    steps = np.diff(t)
    dt = steps[0]
    if dt <= 0 or not np.allclose(steps, dt, rtol=1e-6, atol=1e-12):
        raise InputFormatError(f"{path}: time column is not uniformly sampled")
    return x.copy(), float(dt)
