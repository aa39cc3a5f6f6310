"""Stochastic EM: Gibbs imputation, closed-form maximization, pooling and SEs.

Each iteration performs one Gibbs sweep over all subjects (warm-started
from the previous draw) followed by the closed-form M-step.  The chain of
estimates is monitored on the internal coordinates of
:meth:`Theta.to_coords`; when the batch procedure of
:mod:`segnlme.convergence` declares the last ``M`` estimates stationary,
those ``M`` estimates are pooled into a point estimate and a standard error
combining the within-iteration (linearized Fisher information) and
between-iteration variability.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import samplers
from .convergence import GewekeReport, check_due, stationarity_check
from .errors import (
    ConfigurationError, DegenerateSampleError, DivergenceError, ParameterError,
    SingularCovarianceError,
)
from .model import (
    Latents, ModelSpec, Panel, Theta, as_latents, as_panel,
    coord_names, internal_cov_derivatives, mean_values, n_coords, record_means,
)
from .samplers import ALL_BLOCKS, GibbsConfig

SIGMA_E2_ESTIMATORS = ("pooled", "per_subject_mean")


@dataclass(frozen=True)
class StemConfig:
    """StEM loop settings.

    ``sigma_e2_estimator="pooled"`` uses the residual sum of squares over all
    records divided by their number (the maximizer of the complete-data
    likelihood); ``"per_subject_mean"`` averages each subject's mean squared
    residual instead.

    ``cov_floor`` is a lower bound applied inside the loop to the eigenvalues
    of ``A`` and ``B`` and to ``tau_var``.  Directions the data do not
    identify otherwise shrink geometrically toward zero, and the chain ends
    at a singular estimate.  Set it to 0 to disable the floor.

    During the first ``anneal_iterations`` iterations each variance
    (``tau_var``, ``sigma_e2`` and the diagonals of ``A`` and ``B``) may shrink
    by at most the factor ``anneal_factor`` per iteration; covariance
    matrices are rescaled with their correlations kept.  Starting values
    far from the estimate otherwise let the variances collapse before the
    latent states have moved, which traps the chain at a spurious fixed
    point.  ``anneal_iterations=0`` disables it.
    """

    batch_size_M: int = 300
    window_w: int = 10
    epsilon: float = 1.5
    max_iterations: int = 5000
    posterior_mean_draws: int = 100
    sigma_e2_estimator: str = "pooled"
    compute_se: bool = True
    cov_floor: float = 1e-4
    anneal_iterations: int = 100
    anneal_factor: float = 0.95

    def __post_init__(self):
        if self.batch_size_M < 2:
            raise ConfigurationError("batch_size_M must be >= 2")
        if self.window_w < 1:
            raise ConfigurationError("window_w must be >= 1")
        if not self.epsilon > 0:
            raise ConfigurationError("epsilon must be positive")
        if self.max_iterations < 1:
            raise ConfigurationError("max_iterations must be >= 1")
        if self.posterior_mean_draws < 1:
            raise ConfigurationError("posterior_mean_draws must be >= 1")
        if not self.cov_floor >= 0:
            raise ConfigurationError("cov_floor must be >= 0")
        if self.anneal_iterations < 0:
            raise ConfigurationError("anneal_iterations must be >= 0")
        if not 0 < self.anneal_factor <= 1:
            raise ConfigurationError("anneal_factor must be in (0, 1]")
        if self.sigma_e2_estimator not in SIGMA_E2_ESTIMATORS:
            raise ConfigurationError(
                f"sigma_e2_estimator must be one of {SIGMA_E2_ESTIMATORS}"
            )


@dataclass
class ChainHistory:
    """Append-only record of the parameter chain.

    ``ses`` holds per-iteration standard errors on the monitored
    coordinates; entries outside the pooling window are ``None``.
    """

    names: tuple
    thetas: list = field(default_factory=list)
    coords: list = field(default_factory=list)
    ses: list = field(default_factory=list)
    natural_ses: list = field(default_factory=list)

    def append(self, theta: Theta, se=None, natural_se=None) -> None:
        self.thetas.append(theta)
        self.coords.append(theta.to_coords())
        self.ses.append(se)
        self.natural_ses.append(natural_se)

    def set_se(self, index: int, se, natural_se=None) -> None:
        """Attach SEs to an existing entry (allowed once per entry)."""
        if self.ses[index] is not None:
            raise ConfigurationError("history entries are append-only")
        self.ses[index] = np.asarray(se, dtype=float)
        self.natural_ses[index] = None if natural_se is None else np.asarray(natural_se, float)

    def __len__(self) -> int:
        return len(self.thetas)

    def coords_array(self) -> np.ndarray:
        return np.array(self.coords, dtype=float).reshape(len(self.coords), len(self.names))


# ---------------------------------------------------------------------------
# M-step


def _cov_n(x: np.ndarray, mean: np.ndarray) -> np.ndarray:
    r = x - mean
    C = r.T @ r / x.shape[0]
    return 0.5 * (C + C.T)


def m_step(latents, data, spec: ModelSpec, sigma_e2_estimator: str = "pooled",
           check: bool = True) -> Theta:
    """Closed-form maximizer of the complete-data log-likelihood.

    Means and divide-by-``n`` covariances of the latent effects, and the
    residual variance of the completed responses.

    Raises
    ------
    DegenerateSampleError
        Fewer than two subjects.
    SingularCovarianceError
        A variance estimate is not strictly positive (when ``check``).
    """
    panel = as_panel(data)
    lat = as_latents(latents, panel)
    n = panel.n_subjects
    if n < 2:
        raise DegenerateSampleError("at least two subjects are needed for the M-step")
    if sigma_e2_estimator not in SIGMA_E2_ESTIMATORS:
        raise ConfigurationError(f"unknown sigma_e2 estimator {sigma_e2_estimator!r}")
    tau_mean = float(np.mean(lat.tau))
    tau_var = float(np.mean((lat.tau - tau_mean) ** 2))
    alpha = lat.a.mean(axis=0)
    beta = lat.b.mean(axis=0)
    A = _cov_n(lat.a, alpha)
    B = _cov_n(lat.b, beta)
    r = lat.y - record_means(lat, panel, spec)
    if sigma_e2_estimator == "pooled":
        sigma_e2 = float(np.dot(r, r) / r.size)
    else:
        ss = np.add.reduceat(r * r, panel.offsets[:-1])
        sigma_e2 = float(np.mean(ss / panel.counts))
    theta = Theta(alpha, beta, tau_mean, tau_var, A, B, sigma_e2)
    if check:
        bad = theta.singular_components()
        if bad:
            raise SingularCovarianceError(bad, theta)
    return theta


# ---------------------------------------------------------------------------
# pooling


@dataclass(frozen=True)
class PooledEstimate:
    """Pooled coordinates, their SEs, and the corresponding ``Theta``."""

    theta: Theta
    coords: np.ndarray
    se: np.ndarray
    names: tuple
    natural: np.ndarray | None = None
    natural_se: np.ndarray | None = None
    natural_names: tuple = ()


def pool_series(values, ses) -> tuple[np.ndarray, np.ndarray]:
    """Coordinate-wise pooling of ``M`` estimates and their SEs.

    ``est = mean(values)``;
    ``se = sqrt(mean(ses^2) + (1 + 1/M) * var(values, ddof=1))``.
    """
    v = np.asarray(values, dtype=float)
    s = np.asarray(ses, dtype=float)
    M = v.shape[0]
    if M < 2:
        raise ConfigurationError("pooling needs M >= 2")
    est = v.mean(axis=0)
    between = np.sum((v - est) ** 2, axis=0) / (M - 1)
    within = np.mean(s * s, axis=0)
    return est, np.sqrt(within + (1.0 + 1.0 / M) * between)


def _nearest_pd(C: np.ndarray, floor: float = 1e-10) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (C + C.T))
    if w.min() > 0:
        return C
    C2 = (V * np.maximum(w, floor * max(1.0, w.max()))) @ V.T
    return 0.5 * (C2 + C2.T)


def theta_from_coords(coords, spec: ModelSpec) -> Theta:
    """``Theta.from_coords`` with a positive-definite repair of A and B."""
    th = Theta.from_coords(coords, spec.n_a, spec.n_b)
    A, B = _nearest_pd(th.A), _nearest_pd(th.B)
    if A is th.A and B is th.B:
        return th
    return th.replace(A=A, B=B)


def pool_estimates(history: ChainHistory, M: int, spec: ModelSpec | None = None) -> PooledEstimate:
    """Pool the last ``M`` entries of ``history``."""
    if M < 2:
        raise ConfigurationError("pooling needs M >= 2")
    if len(history) < M:
        raise ConfigurationError(f"history has {len(history)} entries, need {M}")
    ses = history.ses[-M:]
    if any(s is None for s in ses):
        raise ConfigurationError("per-iteration SEs missing inside the pooling window")
    coords = history.coords_array()[-M:]
    est, se = pool_series(coords, np.array(ses))
    if spec is None:
        th = history.thetas[-1]
        spec_na, spec_nb = th.alpha.size, th.beta.size
        theta = Theta.from_coords(est, spec_na, spec_nb)
    else:
        theta = theta_from_coords(est, spec)
    natural = natural_se = None
    nat_names = ()
    nses = history.natural_ses[-M:]
    if all(s is not None for s in nses):
        nat = np.array([natural_params(t)[0] for t in history.thetas[-M:]])
        natural, natural_se = pool_series(nat, np.array(nses))
        nat_names = tuple(natural_params(history.thetas[-1])[1])
    return PooledEstimate(theta, est, se, tuple(history.names), natural, natural_se, nat_names)


# ---------------------------------------------------------------------------
# natural-scale summaries


def natural_params(theta: Theta) -> tuple[np.ndarray, list[str]]:
    """Reporting-scale parameters: fixed effects, SDs, covariances, residual SD."""
    vals = list(theta.fixed)
    pa, pb = theta.alpha.size, theta.beta.size
    names = [f"alpha{k + 1}" if pa > 1 else "alpha" for k in range(pa)]
    names += [f"beta{k + 1}" for k in range(pb)] + ["tau"]
    vals.append(math.sqrt(max(theta.tau_var, 0.0)))
    names.append("sigma_tau")
    for tag, C in (("A", theta.A), ("B", theta.B)):
        p = C.shape[0]
        for k in range(p):
            vals.append(math.sqrt(max(C[k, k], 0.0)))
            names.append(f"sd_{tag}{k + 1}")
        for k in range(p):
            for l in range(k + 1, p):
                vals.append(C[k, l])
                names.append(f"cov_{tag}{k + 1}{l + 1}")
    vals.append(math.sqrt(max(theta.sigma_e2, 0.0)))
    names.append("sigma_e")
    return np.array(vals, dtype=float), names


def natural_jacobian(theta: Theta, rel_step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of :func:`natural_params` w.r.t. the coordinates."""
    c0 = theta.to_coords()
    pa, pb = theta.alpha.size, theta.beta.size
    base = natural_params(theta)[0]
    J = np.zeros((base.size, c0.size))
    for k in range(c0.size):
        h = rel_step * max(1.0, abs(c0[k]))
        cp, cm = c0.copy(), c0.copy()
        cp[k] += h
        cm[k] -= h
        fp = natural_params(Theta.from_coords(cp, pa, pb))[0]
        fm = natural_params(Theta.from_coords(cm, pa, pb))[0]
        J[:, k] = (fp - fm) / (2 * h)
    return J


# ---------------------------------------------------------------------------
# linearized Fisher information


@dataclass(frozen=True)
class InformationResult:
    """Linearized information on the monitored coordinates.

    ``cov`` is the block-diagonal inverse (NaN where a block is singular or a
    coordinate carries no information); ``se`` its root diagonal.
    """

    matrix: np.ndarray
    cov: np.ndarray
    se: np.ndarray
    names: tuple
    singular_blocks: tuple

    def natural_se(self, theta: Theta) -> np.ndarray:
        J = natural_jacobian(theta)
        C = np.nan_to_num(self.cov, nan=0.0)
        var = np.einsum("ij,jk,ik->i", J, C, J)
        bad = (np.abs(J) > 0) @ np.isnan(np.diag(self.cov)).astype(float) > 0
        out = np.sqrt(np.maximum(var, 0.0))
        out[bad] = np.nan
        return out


def linearization_jacobian(latent_vectors: np.ndarray, panel: Panel, spec: ModelSpec,
                           rel_step: float = 1e-6) -> np.ndarray:
    """(N_records, q) central-difference derivatives of each record's mean.

    Columns follow the latent order ``[a, b, tau]``.
    """
    phi = np.asarray(latent_vectors, dtype=float)
    pa, pb = spec.n_a, spec.n_b
    own = panel.owner
    q = phi.shape[1]
    Z = np.empty((panel.n_records, q))

    def means(ph):
        return mean_values(panel.t, ph[own, -1], ph[own, :pa], ph[own, pa:pa + pb], spec)

    for k in range(q):
        h = rel_step * np.maximum(1.0, np.abs(phi[:, k]))
        pp, pm = phi.copy(), phi.copy()
        pp[:, k] += h
        pm[:, k] -= h
        Z[:, k] = (means(pp) - means(pm)) / (2.0 * h[own])
    if not np.all(np.isfinite(Z)):
        raise ParameterError("non-finite derivative in the linearization")
    return Z


def _padded(Z: np.ndarray, panel: Panel):
    n, nmax = panel.n_subjects, int(panel.counts.max())
    Zp = np.zeros((n, nmax, Z.shape[1]))
    mask = np.zeros((n, nmax))
    own = panel.owner
    pos = np.arange(panel.n_records) - panel.offsets[own]
    Zp[own, pos] = Z
    mask[own, pos] = 1.0
    return Zp, mask


def _block_inverse(I: np.ndarray):
    d = np.diag(I)
    keep = d > 0
    cov = np.full_like(I, np.nan)
    singular = not keep.all()
    if keep.any():
        sub = I[np.ix_(keep, keep)]
        try:
            L = np.linalg.cholesky(sub)
            Linv = np.linalg.inv(L)
            cov[np.ix_(keep, keep)] = Linv.T @ Linv
        except np.linalg.LinAlgError:
            singular = True
    return cov, singular


def fisher_information_linearized(theta: Theta, posterior_latents, completed_data,
                                  spec: ModelSpec, rel_step: float = 1e-6) -> InformationResult:
    """Information of the model linearized around the posterior-mean latents.

    Per subject ``mu_i(phi) ~ mu_i(phi_hat) + Z_i (phi - phi_hat)`` with
    ``phi = fixed + eta``, ``eta ~ N(0, Sigma)`` and
    ``Sigma = blockdiag(A, B, sigma_tau^2)``, so the marginal model is
    Gaussian with mean design ``Z_i`` and covariance
    ``V_i = Z_i Sigma Z_i' + sigma_e^2 I``.  The fixed-effect block is
    ``sum Z_i' V_i^-1 Z_i``; the variance block is
    ``1/2 tr(V_i^-1 dV_k V_i^-1 dV_l)`` over the internal coordinates (log
    variances, Fisher-z correlations, log residual variance).  Cross blocks
    are zero by construction.  Every record, censored or not, enters with
    its completed value.
    """
    panel = as_panel(completed_data)
    lat = as_latents(posterior_latents, panel)
    theta.validate()
    pa, pb = spec.n_a, spec.n_b
    q = pa + pb + 1
    Z = linearization_jacobian(lat.vectors, panel, spec, rel_step)
    Zp, mask = _padded(Z, panel)
    Sigma = theta.latent_cov
    V = np.einsum("iak,kl,ibl->iab", Zp, Sigma, Zp)
    nmax = mask.shape[1]
    eye = np.eye(nmax)
    # padded rows get a unit diagonal so that V stays invertible
    V = V + theta.sigma_e2 * mask[:, :, None] * eye + (1.0 - mask)[:, :, None] * eye
    try:
        Vinv = np.linalg.inv(V)
    except np.linalg.LinAlgError:
        raise SingularCovarianceError(["V"], theta) from None
    VinvZ = Vinv @ Zp
    I_fix = np.einsum("iak,ial->kl", Zp, VinvZ)

    # derivatives of Sigma with respect to the variance coordinates
    dS = []
    D = np.zeros((q, q)); D[-1, -1] = theta.tau_var
    dS.append(D)
    for Dk in internal_cov_derivatives(theta.A):
        D = np.zeros((q, q)); D[:pa, :pa] = Dk
        dS.append(D)
    for Dk in internal_cov_derivatives(theta.B):
        D = np.zeros((q, q)); D[pa:pa + pb, pa:pa + pb] = Dk
        dS.append(D)
    W = [np.einsum("iab,ibk,kl,icl->iac", Vinv, Zp, D, Zp) for D in dS]
    W.append(theta.sigma_e2 * Vinv * mask[:, None, :])
    nv = len(W)
    I_var = np.empty((nv, nv))
    for k in range(nv):
        for l in range(k, nv):
            I_var[k, l] = I_var[l, k] = 0.5 * np.einsum("iab,iba->", W[k], W[l])

    P = n_coords(pa, pb)
    nf = q
    info = np.zeros((P, P))
    # monitored order: [alpha, beta, tau, log_sigma_tau2, A..., B..., log_sigma_e2]
    info[:nf, :nf] = I_fix
    info[nf:, nf:] = I_var
    info = 0.5 * (info + info.T)
    cov = np.zeros((P, P))
    c_fix, s_fix = _block_inverse(info[:nf, :nf])
    c_var, s_var = _block_inverse(info[nf:, nf:])
    cov[:nf, :nf] = c_fix
    cov[nf:, nf:] = c_var
    sing = tuple(tag for tag, s in (("fixed", s_fix), ("variance", s_var)) if s)
    se = np.sqrt(np.diag(cov))
    return InformationResult(info, cov, se, tuple(coord_names(spec)), sing)


# ---------------------------------------------------------------------------
# the StEM loop


@dataclass
class StemResult:
    """Outcome of :func:`stem_run`."""

    history: ChainHistory
    reports: list
    converged: bool
    iterations: int
    pooled: PooledEstimate | None
    latents: Latents
    window_mean_latents: Latents | None
    mean_attempts: list
    violations: int

    @property
    def report(self) -> GewekeReport | None:
        return self.reports[-1] if self.reports else None


def _floor_eig(C: np.ndarray, floor: float) -> np.ndarray:
    w, V = np.linalg.eigh(C)
    if w.min() >= floor:
        return C
    C2 = (V * np.maximum(w, floor)) @ V.T
    return 0.5 * (C2 + C2.T)


def apply_cov_floor(theta: Theta, floor: float) -> Theta:
    """Raise eigenvalues of ``A``/``B`` and ``tau_var`` to at least ``floor``."""
    if floor <= 0:
        return theta
    A, B = _floor_eig(theta.A, floor), _floor_eig(theta.B, floor)
    tv = max(theta.tau_var, floor)
    if A is theta.A and B is theta.B and tv == theta.tau_var:
        return theta
    return theta.replace(A=A, B=B, tau_var=tv)


def _slow_shrink(C: np.ndarray, prev: np.ndarray, factor: float) -> np.ndarray:
    d = np.diag(C)
    floor = factor * np.diag(prev)
    if np.all(d >= floor):
        return C
    s = np.sqrt(np.maximum(d, floor) / d)
    return C * np.outer(s, s)


def anneal_variances(theta: Theta, prev: Theta, factor: float) -> Theta:
    """Limit the per-iteration shrinkage of every variance to ``factor``."""
    return theta.replace(
        A=_slow_shrink(theta.A, prev.A, factor),
        B=_slow_shrink(theta.B, prev.B, factor),
        tau_var=max(theta.tau_var, factor * prev.tau_var),
        sigma_e2=max(theta.sigma_e2, factor * prev.sigma_e2),
    )


def _check_finite(theta: Theta, names, k: int) -> None:
    # judged on the natural scale: a zero variance is -inf (and its
    # correlations NaN) on the monitored scale, but that is a singularity,
    # which the caller reports separately, not a divergence
    nf, pa = theta.fixed.size, theta.alpha.size
    na = pa * (pa + 1) // 2
    bad = np.flatnonzero(~np.isfinite(theta.fixed))
    if bad.size:
        raise DivergenceError(k, names[bad[0]])
    groups = ((theta.tau_var, nf), (theta.A, nf + 1), (theta.B, nf + 1 + na),
              (theta.sigma_e2, len(names) - 1))
    for value, pos in groups:
        if not np.all(np.isfinite(value)):
            raise DivergenceError(k, names[pos])


def _mean_latents(window) -> Latents:
    n = len(window)
    tau = sum(l.tau for l in window) / n
    a = sum(l.a for l in window) / n
    b = sum(l.b for l in window) / n
    y = sum(l.y for l in window) / n
    return Latents(tau, a, b, y)


def window_standard_errors(history: ChainHistory, window, panel: Panel, spec: ModelSpec,
                           lin_latents: Latents | None = None) -> None:
    """Attach linearized SEs to the last ``len(window)`` history entries.

    ``window`` holds the imputed latents of those iterations; the model is
    linearized around their mean.
    """
    M = len(window)
    lin = lin_latents if lin_latents is not None else _mean_latents(window)
    for j, lat in enumerate(window):
        idx = len(history) - M + j
        theta = history.thetas[idx]
        completed = Latents(lin.tau, lin.a, lin.b, lat.y)
        res = fisher_information_linearized(theta, completed, panel, spec)
        history.set_se(idx, res.se, res.natural_se(theta))


def stem_run(data, init_theta: Theta, init_latents, spec: ModelSpec,
             cfg: StemConfig = StemConfig(), gibbs: GibbsConfig = GibbsConfig(),
             rngs=None, blocks=ALL_BLOCKS, trace=None, backend=None,
             on_check=None) -> StemResult:
    """Run StEM until the chain is declared stationary or the budget is spent.

    ``rngs`` are the per-subject generators (default: spawned from
    ``gibbs.rng_seed``).  ``trace(k, theta)`` is called after every
    iteration and ``on_check(report)`` after every stationarity check.
    Non-convergence is reported through ``StemResult.converged``.
    """
    panel = as_panel(data)
    lat = as_latents(init_latents, panel).copy()
    theta = init_theta.validate()
    if rngs is None:
        rngs = samplers.subject_streams(gibbs.rng_seed, panel.n_subjects)
    names = tuple(coord_names(spec))
    history = ChainHistory(names)
    M, w = cfg.batch_size_M, cfg.window_w
    window = deque(maxlen=M)
    reports = []
    converged = False
    mean_attempts = []
    violations = np.zeros((panel.n_subjects, 3), dtype=np.int64)
    k = 0
    while k < cfg.max_iterations:
        k += 1
        lat, attempts = samplers.sweep_panel(
            panel, lat, theta, spec, gibbs, rngs, blocks=blocks, backend=backend,
            violations=violations,
        )
        prev = theta
        theta = m_step(lat, panel, spec, cfg.sigma_e2_estimator, check=False)
        _check_finite(theta, names, k)
        if k <= cfg.anneal_iterations:
            theta = anneal_variances(theta, prev, cfg.anneal_factor)
        theta = apply_cov_floor(theta, cfg.cov_floor)
        bad = theta.singular_components()
        if bad:
            raise SingularCovarianceError(bad, theta)
        history.append(theta)
        window.append(lat)
        mean_attempts.append(float(attempts.sum()) / panel.n_subjects)
        if trace is not None:
            trace(k, theta)
        B = check_due(k, M, w) if M >= 20 else None
        if B is not None:
            rep = stationarity_check(history, M, B, w, cfg.epsilon)
            reports.append(rep)
            if on_check is not None:
                on_check(rep)
            if rep.stationary:
                converged = True
                break
    pooled = None
    wmean = None
    if len(history) >= max(M, 2):
        wmean = _mean_latents(list(window))
        if cfg.compute_se:
            window_standard_errors(history, list(window), panel, spec, wmean)
            pooled = pool_estimates(history, M, spec)
        else:
            coords = history.coords_array()[-M:]
            est, _ = pool_series(coords, np.zeros_like(coords))
            pooled = PooledEstimate(theta_from_coords(est, spec), est,
                                    np.full(est.size, np.nan), names)
    return StemResult(history, reports, converged, k, pooled, lat, wmean,
                      mean_attempts, int(violations.sum()))


def posterior_mean_latents(data, theta: Theta, spec: ModelSpec, n_draws: int, rngs=None,
                           init_latents=None, gibbs: GibbsConfig = GibbsConfig(),
                           backend=None, return_draws: bool = False):
    """Latent-scale average of ``n_draws`` Gibbs states at fixed ``theta``.

    Starts from ``init_latents`` (default: the prior means with censored
    values at the detection limit).  With ``return_draws`` also returns the
    (n_draws, n) array of latent change-point draws.
    """
    if n_draws < 1:
        raise ConfigurationError("n_draws must be >= 1")
    panel = as_panel(data)
    if init_latents is None:
        lat = Latents.at_means(theta, panel)
    else:
        lat = as_latents(init_latents, panel).copy()
    if rngs is None:
        rngs = samplers.subject_streams(gibbs.rng_seed, panel.n_subjects)
    acc = None
    taus = np.empty((n_draws, panel.n_subjects))
    for d in range(n_draws):
        lat, _ = samplers.sweep_panel(panel, lat, theta, spec, gibbs, rngs, backend=backend)
        taus[d] = lat.tau
        if acc is None:
            acc = [lat.tau.copy(), lat.a.copy(), lat.b.copy(), lat.y.copy()]
        else:
            acc[0] += lat.tau
            acc[1] += lat.a
            acc[2] += lat.b
            acc[3] += lat.y
    mean = Latents(acc[0] / n_draws, acc[1] / n_draws, acc[2] / n_draws, acc[3] / n_draws)
    return (mean, taus) if return_draws else mean
