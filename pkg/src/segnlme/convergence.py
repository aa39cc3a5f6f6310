"""Geweke-style batch procedure for declaring a StEM chain stationary.

A window of ``M`` consecutive estimates is tested coordinate-wise with the
standardized difference between the means of its first 10% and last 50%;
the window is stationary when ``sum(z_p^2) < epsilon * P``.  The window
starts at iteration ``w * B`` and ``B`` advances by one every ``w``
iterations until the test passes.

The denominator uses plain sample variances (``ddof=1``) rather than
spectral-density estimates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError

MIN_SERIES = 20


def _window_len(n: int, frac: float) -> int:
    return max(1, int(math.floor(frac * n + 1e-9)))


def geweke_z(series, frac_first: float = 0.10, frac_last: float = 0.50) -> float:
    """Standardized mean difference between the head and tail of ``series``.

    Returns 0 when both windows have zero variance.
    """
    x = np.asarray(series, dtype=float).ravel()
    if x.size < MIN_SERIES:
        raise InputError(f"series needs at least {MIN_SERIES} values, got {x.size}")
    if not (0 < frac_first < 1 and 0 < frac_last < 1 and frac_first + frac_last <= 1):
        raise InputError("window fractions must lie in (0, 1) and not overlap")
    # centring on the first value keeps constant series exactly constant
    # (a plain mean can carry round-off that a zero variance then inflates)
    x = x - x[0]
    n1, n2 = _window_len(x.size, frac_first), _window_len(x.size, frac_last)
    first, last = x[:n1], x[x.size - n2:]
    v1 = float(np.var(first, ddof=1)) if n1 > 1 else 0.0
    v2 = float(np.var(last, ddof=1)) if n2 > 1 else 0.0
    if v1 == 0.0 and v2 == 0.0:
        return 0.0
    return float((first.mean() - last.mean()) / math.sqrt(v1 / n1 + v2 / n2))


@dataclass(frozen=True)
class GewekeReport:
    """Outcome of one stationarity check."""

    z: np.ndarray
    statistic: float
    threshold: float
    stationary: bool
    batch_index: int
    names: tuple = field(default=())

    def to_dict(self) -> dict:
        return {
            "batch_index": self.batch_index,
            "statistic": self.statistic,
            "threshold": self.threshold,
            "stationary": self.stationary,
            "z": dict(zip(self.names, map(float, self.z))) if self.names
            else [float(v) for v in self.z],
        }


def _chain_matrix(history) -> np.ndarray:
    if hasattr(history, "coords_array"):
        return history.coords_array()
    m = np.asarray(history, dtype=float)
    return m[:, None] if m.ndim == 1 else m


def stationarity_check(history, M: int, B: int, w: int, epsilon: float,
                       names=()) -> GewekeReport:
    """Check the window of iterations ``w*B + 1 .. w*B + M`` (1-based).

    ``history`` is a :class:`~segnlme.stem.ChainHistory` or an array with
    one row per iteration and one column per monitored coordinate.
    """
    if M < MIN_SERIES:
        raise InputError(f"batch size M must be >= {MIN_SERIES}")
    if B < 0 or w < 1:
        raise InputError("need B >= 0 and w >= 1")
    if not epsilon > 0:
        raise InputError("epsilon must be positive")
    chain = _chain_matrix(history)
    lo = w * B
    if lo + M > chain.shape[0]:
        raise InputError(
            f"window [{lo + 1}, {lo + M}] exceeds history length {chain.shape[0]}"
        )
    window = chain[lo:lo + M]
    z = np.array([geweke_z(window[:, p]) for p in range(window.shape[1])])
    stat = float(np.sum(z * z))
    thr = float(epsilon * window.shape[1])
    names = tuple(names) or tuple(getattr(history, "names", ()) or ())
    return GewekeReport(z, stat, thr, bool(stat < thr), int(B), names)


def check_due(k: int, M: int, w: int) -> int | None:
    """Batch index to test after ``k`` iterations, or ``None`` if no check is due."""
    if k < M or (k - M) % w:
        return None
    return (k - M) // w


def first_stationary_batch(history, M: int, w: int, epsilon: float):
    """Run the update rule over a complete chain; first stationary report or ``None``."""
    chain = _chain_matrix(history)
    for k in range(M, chain.shape[0] + 1):
        B = check_due(k, M, w)
        if B is None:
            continue
        rep = stationarity_check(chain, M, B, w, epsilon)
        if rep.stationary:
            return rep
    return None
