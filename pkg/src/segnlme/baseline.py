"""The empirical ``log1plus*`` pipeline.

Change points are read off consecutive pairs of reports: a pair signals
treatment start when the load drops by more than ``drop_threshold`` log10
units within ``window_width`` years, or when a detectable report is followed
by an undetectable one.  The change point is the first report time of the
first such pair.  Subjects without a signalling pair get a random time
after their last report.

The baseline estimate freezes these change points and half-limit
imputations of the censored values, and fits the remaining parameters with
the StEM engine restricted to the ``a`` and ``b`` blocks.  Its output is
also the canonical initializer of the full StEM fit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import least_squares

from .errors import ConfigurationError, DegenerateSampleError
from .model import Latents, ModelSpec, Panel, SubjectData, Theta, mean_values
from .samplers import GibbsConfig
from .stem import StemConfig, StemResult, stem_run

HALF_LIMIT = math.log10(0.5)
DAY = 1.0 / 365.25


@dataclass(frozen=True)
class Log1PlusConfig:
    """Settings of the empirical change-point rules.

    ``flip_requires_window`` also applies the window to the
    detectable-to-undetectable criterion.  ``trim_rebound`` controls whether
    the fit uses the rebound-trimmed records.  ``min_changepoint`` (years)
    floors change points before taking logs.
    """

    window_width: float = 0.25
    drop_threshold: float = 1.0
    nondetected_horizon: float = 1.0
    rng_seed: int = 0
    flip_requires_window: bool = False
    trim_rebound: bool = True
    min_changepoint: float = DAY
    init_A_var: float = 0.01
    init_B_var: float = 1.0

    def __post_init__(self):
        if not self.window_width > 0:
            raise ConfigurationError("window_width must be positive")
        if not self.drop_threshold > 0:
            raise ConfigurationError("drop_threshold must be positive")
        if not self.nondetected_horizon > 0:
            raise ConfigurationError("nondetected_horizon must be positive")
        if not self.min_changepoint > 0:
            raise ConfigurationError("min_changepoint must be positive")


@dataclass(frozen=True)
class ArtDetection:
    """First signalling pair ``(j, j + 1)`` and its change point ``t_j``."""

    change_point: float
    pair: tuple[int, int]
    criterion: str


def detect_art(subject: SubjectData, cfg: Log1PlusConfig = Log1PlusConfig()) -> ArtDetection | None:
    """Scan consecutive report pairs; first pair meeting either criterion."""
    t, y, c = subject.times, subject.values, subject.censored
    for j in range(t.size - 1):
        gap = t[j + 1] - t[j]
        in_window = gap <= cfg.window_width
        if not c[j] and not c[j + 1] and in_window and y[j] - y[j + 1] > cfg.drop_threshold:
            return ArtDetection(float(t[j]), (j, j + 1), "drop")
        if not c[j] and c[j + 1] and (in_window or not cfg.flip_requires_window):
            return ArtDetection(float(t[j]), (j, j + 1), "undetectable")
    return None


def _is_rebound(c_prev: bool, y_prev: float, c_cur: bool, y_cur: float) -> bool:
    return (not c_cur) and (c_prev or y_cur > y_prev)


def trim_to_rebound(subject: SubjectData, detection) -> SubjectData:
    """Keep records through the detecting pair, then extend until a rebound.

    A rebound is a detectable value above its predecessor, or an
    undetectable-to-detectable transition; the rebound record and everything
    after it are dropped.
    """
    pair = detection.pair if isinstance(detection, ArtDetection) else tuple(detection)
    j2 = int(pair[1])
    if not 0 < j2 < len(subject.records):
        raise ConfigurationError("detection pair out of range")
    recs = subject.records
    stop = len(recs)
    for k in range(j2 + 1, len(recs)):
        p, q = recs[k - 1], recs[k]
        if _is_rebound(p.censored, p.value, q.censored, q.value):
            stop = k
            break
    return SubjectData(subject.id, tuple(recs[:stop]))


def assign_nondetected_changepoint(subject: SubjectData, cfg: Log1PlusConfig, rng) -> float:
    """Last report time plus a Uniform(0, horizon] draw."""
    return float(subject.times[-1] + cfg.nondetected_horizon * (1.0 - rng.random()))


@dataclass(frozen=True)
class EmpiricalChangepoint:
    id: str
    time: float
    detected: bool


def empirical_changepoints(data, cfg: Log1PlusConfig, rng):
    """Change points for every subject plus the records used downstream."""
    cps, used = [], []
    for s in data:
        det = detect_art(s, cfg)
        if det is None:
            cps.append(EmpiricalChangepoint(s.id, assign_nondetected_changepoint(s, cfg, rng), False))
            used.append(s)
        else:
            cps.append(EmpiricalChangepoint(s.id, det.change_point, True))
            used.append(trim_to_rebound(s, det) if cfg.trim_rebound else s)
    return cps, used


def half_limit_values(panel: Panel) -> np.ndarray:
    """Completed response with censored records at half the detection limit."""
    y = panel.y.copy()
    c = panel.cens.astype(bool)
    y[c] = panel.dlim[c] + HALF_LIMIT
    return y


def _tau_latent(times, cfg: Log1PlusConfig, spec: ModelSpec) -> np.ndarray:
    t = np.maximum(np.asarray(times, float), cfg.min_changepoint)
    return np.log(t) if spec.tau_exp else t


def _start_points(panel: Panel, y: np.ndarray, spec: ModelSpec):
    level = math.log(10.0) * float(np.quantile(y, 0.9))
    if spec.post_segment == "biexp":
        for r1, gap, r2 in ((4.0, 7.0, -1.0), (3.0, 5.0, 0.0), (5.0, 9.0, -2.0)):
            b = np.array([level, r1, level - gap, r2])
            yield b
    else:
        for gap, r in ((7.0, 3.0), (5.0, 1.0)):
            yield np.array([level - gap + 3.0, level, r])


def population_curve_fit(panel: Panel, tau_latent: np.ndarray, y: np.ndarray,
                         spec: ModelSpec, ridge: float = 0.1):
    """Least-squares population curve with subject change points held fixed.

    Each multistart run is shrunk towards its own start point by a ridge
    term of weight ``ridge`` per record.  With late change points the
    decline is often absorbed by the pre-change slope, leaving the slow
    rate unidentified; without the ridge it then drifts to a flat plateau
    that later iterations cannot leave.  ``ridge=0`` gives plain least
    squares.

    Returns ``(alpha, beta, residual variance)`` on the latent scale.
    """
    own = panel.owner
    taus = tau_latent[own]
    pa = spec.n_a

    def resid(x):
        a = np.broadcast_to(x[:pa], (own.size, pa))
        b = np.broadcast_to(x[pa:], (own.size, spec.n_b))
        with np.errstate(all="ignore"):
            mu = mean_values(panel.t, taus, a, b, spec)
        r = y - mu
        return np.where(np.isfinite(r), r, 1e6)

    best = None
    a0 = np.zeros(pa)
    if spec.a_exp[0]:
        a0[:] = math.log(0.1)
    for b0 in _start_points(panel, y, spec):
        x0 = np.concatenate([a0, b0])
        weight = ridge * math.sqrt(y.size / x0.size)

        def penalized(x, x0=x0, weight=weight):
            return np.concatenate([resid(x), weight * (x - x0)])

        sol = least_squares(penalized, x0, method="trf", x_scale="jac")
        if best is None or sol.cost < best.cost:
            best = sol
    x = best.x
    r = resid(x)
    return x[:pa].copy(), x[pa:].copy(), float(np.dot(r, r) / r.size)


@dataclass
class BaselineResult:
    """Baseline estimate, frozen change points, and the StEM initializer."""

    theta: Theta
    changepoints: list
    panel: Panel
    latents: Latents
    stem: StemResult
    initial_theta: Theta


def baseline_fit(data, cfg: Log1PlusConfig = Log1PlusConfig(), spec: ModelSpec = ModelSpec(),
                 stem_cfg: StemConfig = StemConfig(), gibbs: GibbsConfig = GibbsConfig(),
                 rng=None, backend=None, trace=None) -> BaselineResult:
    """Empirical change points + frozen-StEM fit of the remaining parameters.

    Raises
    ------
    DegenerateSampleError
        Fewer than two subjects, or all empirical change points equal.
    """
    data = list(data)
    if len(data) < 2:
        raise DegenerateSampleError("baseline fit needs at least two subjects")
    if rng is None:
        rng = np.random.default_rng(cfg.rng_seed)
    cps, used = empirical_changepoints(data, cfg, rng)
    panel = Panel.from_subjects(used)
    tau = _tau_latent([c.time for c in cps], cfg, spec)
    tau_mean = float(np.mean(tau))
    tau_var = float(np.mean((tau - tau_mean) ** 2))
    if not tau_var > 0:
        raise DegenerateSampleError("all empirical change points are equal")
    y = half_limit_values(panel)
    alpha, beta, s2 = population_curve_fit(panel, tau, y, spec)
    theta0 = Theta(alpha, beta, tau_mean, tau_var,
                   cfg.init_A_var * np.eye(spec.n_a), cfg.init_B_var * np.eye(spec.n_b),
                   max(s2, 1e-4))
    n = panel.n_subjects
    lat0 = Latents(tau, np.tile(alpha, (n, 1)), np.tile(beta, (n, 1)), y)
    # the half-limit imputations are data here, so the blocks condition on them
    frozen = replace(gibbs, block_likelihood="completed")
    res = stem_run(panel, theta0, lat0, spec, stem_cfg, frozen, blocks=("a", "b"),
                   backend=backend, trace=trace)
    theta = res.pooled.theta if res.pooled is not None else res.history.thetas[-1]
    return BaselineResult(theta, cps, panel, res.latents, res, theta0)
