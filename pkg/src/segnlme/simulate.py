"""Synthetic surveillance-style data and the simulation benchmark harness.

Reporting times follow a first-order scheme: the first report is an
exponential draw with rate ``xi`` and each next report is
``u - log(X) / xi`` for ``X ~ Uniform(0, 1)`` given the previous time
``u``.  The equivalent form ``exp(log(-log(X)/xi + u))`` reduces to the same
expression, so gaps are i.i.d. exponential.  Reports later than the horizon
are dropped and subjects with fewer than two reports are redrawn.
"""

from __future__ import annotations

import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .baseline import Log1PlusConfig, baseline_fit
from .errors import ConfigurationError, SegNLMEError
from .model import LatentState, ModelSpec, Panel, SubjectData, Theta, mean_values
from .samplers import GibbsConfig
from .stem import StemConfig, stem_run

DETECTION_LIMIT = math.log10(200.0)
REPORT_RATE = 1.45
FAILURE_BUDGET = 0.20

# Change-point model estimates used as the simulation truth.
TRUE_ALPHA = [0.14]
TRUE_BETA = [10.72, 4.59, 4.21, -1.64]
TRUE_TAU = -1.15
TRUE_SIGMA_TAU = 1.97
TRUE_SIGMA_A = 0.02
TRUE_SIGMA_E = 0.46
TRUE_B_SD = [1.10, 0.75, 0.54, 1.41]
TRUE_B_COV = {(0, 1): -0.12, (0, 2): 0.45, (0, 3): 1.05, (1, 2): 0.21, (1, 3): 0.66, (2, 3): 0.76}


def published_B() -> np.ndarray:
    """The post-segment covariance as published (not positive definite)."""
    B = np.diag(np.square(TRUE_B_SD))
    for (i, j), v in TRUE_B_COV.items():
        B[i, j] = B[j, i] = v
    return B


def project_pd(C: np.ndarray, floor: float = 1e-3) -> np.ndarray:
    """Clip eigenvalues at ``floor`` and restore the original diagonal."""
    w, V = np.linalg.eigh(C)
    P = (V * np.maximum(w, floor)) @ V.T
    d = np.sqrt(np.diag(C) / np.diag(P))
    P = P * np.outer(d, d)
    return 0.5 * (P + P.T)


def table_truth() -> Theta:
    """Simulation truth with the post-segment covariance made positive definite."""
    return Theta(
        TRUE_ALPHA, TRUE_BETA, TRUE_TAU, TRUE_SIGMA_TAU ** 2,
        [[TRUE_SIGMA_A ** 2]], project_pd(published_B()), TRUE_SIGMA_E ** 2,
    )


def next_report_time(u: float, xi: float, X: float) -> float:
    """Report time following ``u`` for the uniform variate ``X``."""
    val = -math.log(X) / xi + u
    return math.exp(math.log(val)) if val > 0 else val


def gen_reporting_times(xi: float, horizon: float, rng) -> np.ndarray:
    """Strictly increasing report times in ``(0, horizon]``, at least two."""
    if not xi > 0 or not horizon > 0:
        raise ConfigurationError("xi and horizon must be positive")
    while True:
        times = []
        u = 0.0
        while True:
            u = u - math.log(1.0 - rng.random()) / xi
            if u > horizon:
                break
            times.append(u)
        t = np.array(times)
        if t.size >= 2 and np.all(np.diff(t) > 0) and t[0] > 0:
            return t


def _sqrt_psd(C: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(np.atleast_2d(C))
    return V * np.sqrt(np.maximum(w, 0.0))


def gen_subject(theta: Theta, times, spec: ModelSpec, rng, id="0",
                detection_limit: float = DETECTION_LIMIT):
    """Draw one subject's latents and noisy values at ``times``."""
    t = np.asarray(times, dtype=float)
    tau = theta.tau_mean + math.sqrt(max(theta.tau_var, 0.0)) * rng.standard_normal()
    a = theta.alpha + _sqrt_psd(theta.A) @ rng.standard_normal(theta.alpha.size)
    b = theta.beta + _sqrt_psd(theta.B) @ rng.standard_normal(theta.beta.size)
    mu = mean_values(t, tau, a, b, spec)
    y = mu + math.sqrt(max(theta.sigma_e2, 0.0)) * rng.standard_normal(t.size)
    subj = SubjectData.from_arrays(str(id), t, y, np.zeros(t.size, bool),
                                   np.full(t.size, detection_limit))
    return subj, LatentState(tau, a, b, {})


def apply_censoring(subjects, limit: float, target_rate: float, rng):
    """Censor a random subset of below-limit records.

    The subset size is ``round(target_rate * N)`` over all ``N`` records.
    Returns ``(subjects, achieved_rate, warning)``; ``warning`` is ``None``
    unless the below-limit pool was too small.
    """
    if not 0 <= target_rate < 1:
        raise ConfigurationError("target_rate must lie in [0, 1)")
    subjects = list(subjects)
    panel = Panel.from_subjects(subjects)
    N = panel.n_records
    want = int(round(target_rate * N))
    pool = np.flatnonzero(panel.y < limit)
    msg = None
    if want > pool.size:
        msg = (f"only {pool.size} of {N} records are below the limit; "
               f"censoring all of them instead of {want}")
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        chosen = pool
    else:
        chosen = rng.choice(pool, size=want, replace=False) if want else np.zeros(0, int)
    flag = np.zeros(N, dtype=bool)
    flag[chosen] = True
    out = []
    for i, s in enumerate(subjects):
        sl = slice(panel.offsets[i], panel.offsets[i + 1])
        c = flag[sl]
        if not c.any():
            out.append(s)
            continue
        y = np.where(c, limit, s.values)
        out.append(SubjectData.from_arrays(s.id, s.times, y, c, np.full(c.size, limit)))
    return out, (flag.sum() / N if N else 0.0), msg


@dataclass(frozen=True)
class SimScenario:
    """One simulation scenario; ``theta_true=None`` means :func:`table_truth`."""

    n_subjects: int = 100
    xi: float = REPORT_RATE
    horizon: float = 3.0
    censor_rate: float = 0.0
    detection_limit_log10: float = DETECTION_LIMIT
    theta_true: Theta | None = None
    n_replicates: int = 10
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_subjects < 2:
            raise ConfigurationError("n_subjects must be >= 2")
        if not 0 <= self.censor_rate < 1:
            raise ConfigurationError("censor_rate must lie in [0, 1)")
        if self.n_replicates < 1:
            raise ConfigurationError("n_replicates must be >= 1")
        if not self.xi > 0 or not self.horizon > 0:
            raise ConfigurationError("xi and horizon must be positive")

    @property
    def truth(self) -> Theta:
        return self.theta_true if self.theta_true is not None else table_truth()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["theta_true"] = self.truth.to_dict()
        return d


@dataclass
class SimDataset:
    subjects: list
    truth: list
    achieved_rate: float
    warning: str | None = None


def generate_dataset(scenario: SimScenario, spec: ModelSpec, rng) -> SimDataset:
    """Subjects, their true latents, and the achieved censoring rate."""
    theta = scenario.truth
    width = len(str(scenario.n_subjects))
    subjects, truth = [], []
    for i in range(scenario.n_subjects):
        t = gen_reporting_times(scenario.xi, scenario.horizon, rng)
        s, lat = gen_subject(theta, t, spec, rng, id=f"S{i + 1:0{width}d}",
                             detection_limit=scenario.detection_limit_log10)
        subjects.append(s)
        truth.append(lat)
    with warnings.catch_warnings(record=True):
        warnings.simplefilter("always")
        subjects, rate, msg = apply_censoring(
            subjects, scenario.detection_limit_log10, scenario.censor_rate, rng
        )
    return SimDataset(subjects, truth, float(rate), msg)


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class MetricsRow:
    parameter: str
    Est: float
    SE: float
    SD: float
    MSE: float | None
    Bias: float | None

    def as_dict(self) -> dict:
        return {"parameter": self.parameter, "Est": self.Est, "SE": self.SE,
                "SD": self.SD, "MSE": self.MSE, "Bias%": self.Bias}


def bias_percent(estimates, truth: float) -> float | None:
    """``mean(100 * (est - truth) / truth)``; ``None`` when ``truth == 0``."""
    if truth == 0:
        return None
    e = np.asarray(estimates, dtype=float)
    return float(np.mean(100.0 * (e - truth) / truth))


def mse_percent(estimates, ses, truth: float) -> float | None:
    """``mean(100 * sqrt((est - truth)^2 + SE) / |truth|)``; ``None`` when ``truth == 0``."""
    if truth == 0:
        return None
    e = np.asarray(estimates, dtype=float)
    s = np.asarray(ses, dtype=float)
    return float(np.mean(100.0 * np.sqrt((e - truth) ** 2 + s) / abs(truth)))


def compute_metrics(estimates, ses, truth, names) -> list[MetricsRow]:
    """Est, SE, SD, MSE and Bias% per parameter over replicates (rows)."""
    E = np.atleast_2d(np.asarray(estimates, dtype=float))
    S = np.atleast_2d(np.asarray(ses, dtype=float))
    if E.shape[0] < 1:
        raise ConfigurationError("need at least one replicate")
    rows = []
    for p, name in enumerate(names):
        e, s, tr = E[:, p], S[:, p], float(truth[p])
        sd = float(np.std(e, ddof=1)) if e.size > 1 else 0.0
        rows.append(MetricsRow(name, float(e.mean()), float(s.mean()), sd,
                               mse_percent(e, s, tr), bias_percent(e, tr)))
    return rows


# ---------------------------------------------------------------------------
# scenario runner


@dataclass(frozen=True)
class BenchConfig:
    """Method settings used for every replicate."""

    spec: ModelSpec = field(default_factory=ModelSpec)
    stem: StemConfig = field(default_factory=lambda: StemConfig(max_iterations=2000))
    baseline_stem: StemConfig = field(default_factory=lambda: StemConfig(max_iterations=2000))
    gibbs: GibbsConfig = field(default_factory=GibbsConfig)
    log1plus: Log1PlusConfig = field(default_factory=lambda: Log1PlusConfig(trim_rebound=False))


def _fixed_slice(spec: ModelSpec):
    return slice(0, spec.n_a + spec.n_b + 1)


def _seed_ints(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1, np.uint64)[0])


def run_replicate(scenario: SimScenario, bench: BenchConfig, index: int,
                  methods=("stem", "baseline")) -> dict:
    """Generate, censor and fit one replicate; returns a plain dict."""
    spec = bench.spec
    root = np.random.SeedSequence(scenario.rng_seed).spawn(scenario.n_replicates)[index]
    s_data, s_base, s_stem = root.spawn(3)
    data = generate_dataset(scenario, spec, np.random.default_rng(s_data))
    out = {"index": index, "achieved_rate": data.achieved_rate, "warning": data.warning,
           "n_records": sum(len(s.records) for s in data.subjects)}
    fx = _fixed_slice(spec)
    try:
        gb = replace(bench.gibbs, rng_seed=_seed_ints(s_base))
        base = baseline_fit(data.subjects, bench.log1plus, spec, bench.baseline_stem, gb,
                            rng=np.random.default_rng(s_base))
        if "baseline" in methods:
            pb = base.stem.pooled
            out["baseline"] = {
                "est": pb.coords[fx].tolist(), "se": pb.se[fx].tolist(),
                "iterations": base.stem.iterations, "converged": base.stem.converged,
            }
        if "stem" in methods:
            gs = replace(bench.gibbs, rng_seed=_seed_ints(s_stem))
            init = base.theta
            lat0 = base.latents
            res = stem_run(base.panel, init, lat0, spec, bench.stem, gs)
            out["stem"] = {
                "est": res.pooled.coords[fx].tolist(), "se": res.pooled.se[fx].tolist(),
                "iterations": res.iterations, "converged": res.converged,
                "violations": res.violations,
            }
    except SegNLMEError as exc:
        out["error"] = f"{type(exc).__name__}: {exc}"
    return out


@dataclass
class ScenarioResult:
    scenario: SimScenario
    metrics: dict
    replicates: list
    failures: dict
    failed: bool


def default_workers() -> int:
    env = os.environ.get("SEGNLME_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigurationError("SEGNLME_WORKERS must be an integer") from None
    return max(1, os.cpu_count() or 1)


def run_scenario(scenario: SimScenario, bench: BenchConfig = BenchConfig(),
                 methods=("stem", "baseline"), workers: int | None = None,
                 progress=None, completed=()) -> ScenarioResult:
    """All replicates of one scenario plus the per-method metrics tables.

    Replicates are independent and use seeds spawned from the scenario seed,
    so results do not depend on ``workers``.  ``completed`` holds replicate
    records from an earlier, interrupted run of the same scenario; they are
    reused instead of recomputed.  ``progress(record)`` is called as each
    new replicate finishes.
    """
    workers = default_workers() if workers is None else workers
    results = {int(r["index"]): r for r in completed}
    todo = [i for i in range(scenario.n_replicates) if i not in results]
    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            for rec in ex.map(run_replicate, [scenario] * len(todo), [bench] * len(todo),
                              todo, [methods] * len(todo)):
                results[rec["index"]] = rec
                if progress is not None:
                    progress(rec)
    else:
        for i in todo:
            rec = run_replicate(scenario, bench, i, methods)
            results[i] = rec
            if progress is not None:
                progress(rec)
    reps = [results[i] for i in range(scenario.n_replicates)]
    return summarize_replicates(scenario, bench, reps, methods)


def summarize_replicates(scenario: SimScenario, bench: BenchConfig, reps: list,
                         methods=("stem", "baseline")) -> ScenarioResult:
    """Per-method metrics over the successful replicates, with failure counts."""
    names = bench.spec.fixed_names
    truth = scenario.truth.fixed
    metrics, failures = {}, {}
    failed = False
    for m in methods:
        ok = [r[m] for r in reps if m in r]
        failures[m] = len(reps) - len(ok)
        if failures[m] > FAILURE_BUDGET * len(reps):
            failed = True
        if ok:
            metrics[m] = compute_metrics([r["est"] for r in ok], [r["se"] for r in ok],
                                         truth, names)
    return ScenarioResult(scenario, metrics, list(reps), failures, failed)
