"""Random-number machinery for the imputation step.

Each subject owns its own random stream (spawned from the run seed by
subject ordinal), so a subject's draws do not depend on how many other
subjects are processed or in which order.

Block updates use prior-proposal rejection sampling.  With the default
``block_likelihood="observed"`` the target of the ``tau``, ``a`` and ``b``
blocks is prior x observed-data likelihood: Gaussian densities for
uncensored records and normal CDF factors for censored ones.  The censored
values are then drawn exactly from their truncated normal conditionals, so
a sweep leaves the joint conditional of ``(tau, a, b, y_cen)`` invariant.
``block_likelihood="completed"`` conditions the blocks on the completed
response instead.

Envelope.  The likelihood is always bounded by ``(2 pi sigma_e^2)^(-m/2)``
(``m`` uncensored records, see :func:`likelihood_sup_bound`), and
``bound="product"`` uses exactly that.  Its acceptance rate decays like
``exp(-RSS / (2 sigma_e^2))``, which is unusable for subjects with more than
a handful of records, so the default ``bound="optimized"`` first locates the
block maximum numerically (grid + golden section in one dimension,
restarted Nelder-Mead otherwise) and uses ``max + bound_margin`` as the log
envelope.  Should a proposal ever exceed the envelope, the envelope is
raised to that value plus the margin and the draw restarts; such events are
counted in the ``violations`` diagnostics.

Prior proposals fail when the conditional sits far in the prior's tail.
With the optimized envelope, after ``prior_attempts`` rejected prior
proposals the block switches to a second rejection sampler.  It proposes
from the defensive mixture ``0.5 prior + 0.5 N(mode, proposal_inflation *
Sigma)``, where ``mode`` is the conditional mode and ``Sigma`` the prior
covariance; its envelope is the numerically located supremum of target /
proposal.  The prior component keeps that ratio bounded by twice the
likelihood maximum even where the likelihood flattens out in the prior's
direction, which a mode-centred Gaussian alone cannot.  Each stage alone
yields an exact draw, so the combination does too.

Joint move.  Single-block updates mix slowly when ``tau`` and the curve
parameters are strongly coupled: a subject whose latents start on the wrong
side of a steep decline cannot move ``tau`` without moving ``b`` at the same
time.  The ``"joint"`` block (first in every sweep) is an iterated
sampling-importance-resampling step on ``(tau, a, b)``: it draws
``joint_proposals`` prior proposals, adds the current state, and keeps one
of the ``joint_proposals + 1`` candidates with probability proportional to
its likelihood.  The move leaves the joint conditional exactly invariant for
any number of proposals and needs no envelope; the exact block draws that
follow it are unaffected.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from . import kernels
from .errors import ConfigurationError, ParameterError, SamplingStallError
from .model import Latents, LatentState, ModelSpec, Panel, SubjectData, Theta

BLOCKS = ("tau", "a", "b")
_BLOCK_CODE = {"tau": 0, "a": 1, "b": 2}
_MASK = {"tau": 1, "a": 2, "b": 4, "ycen": 8, "joint": 16}
ALL_BLOCKS = ("joint", "tau", "a", "b", "ycen")
_MODES = {"observed": 0, "completed": 1}
_BOUNDS = {"product": 0, "optimized": 1}


@dataclass(frozen=True)
class GibbsConfig:
    """Gibbs/rejection sampler settings.

    ``batch_size`` proposals are generated per rejection round; it affects
    only the random-number consumption pattern, not the target.
    """

    sweeps_per_iteration: int = 1
    max_rejection_attempts: int = 100_000
    rng_seed: int = 0
    batch_size: int = 64
    block_likelihood: str = "observed"
    bound: str = "optimized"
    bound_margin: float = 0.1
    prior_attempts: int = 500
    proposal_inflation: float = 2.0
    joint_proposals: int = 256

    def __post_init__(self):
        if self.sweeps_per_iteration < 1:
            raise ConfigurationError("sweeps_per_iteration must be >= 1")
        if self.max_rejection_attempts < 1:
            raise ConfigurationError("max_rejection_attempts must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.block_likelihood not in _MODES:
            raise ConfigurationError(
                f"block_likelihood must be one of {sorted(_MODES)}"
            )
        if self.bound not in _BOUNDS:
            raise ConfigurationError(f"bound must be one of {sorted(_BOUNDS)}")
        if not self.bound_margin >= 0:
            raise ConfigurationError("bound_margin must be >= 0")
        if self.prior_attempts < 1:
            raise ConfigurationError("prior_attempts must be >= 1")
        if not self.proposal_inflation > 1:
            raise ConfigurationError("proposal_inflation must be > 1")
        if self.joint_proposals < 1:
            raise ConfigurationError("joint_proposals must be >= 1")


def subject_streams(seed, n: int) -> list[np.random.Generator]:
    """Independent per-subject generators derived from one master seed."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [np.random.Generator(np.random.PCG64(child)) for child in ss.spawn(n)]


def sample_truncated_normal_upper(mu, sigma, upper, rng, size=None):
    """Draw from ``N(mu, sigma^2)`` restricted to ``(-inf, upper]``.

    Inverse-CDF method; beyond about 34 standard deviations of truncation
    depth the exponential tail approximation is used instead.
    """
    if not np.all(np.asarray(sigma) > 0):
        raise ParameterError("sigma must be positive")
    mu, sigma, upper = (np.asarray(x, dtype=float) for x in (mu, sigma, upper))
    shape = size if size is not None else np.broadcast(mu, sigma, upper).shape
    u = rng.random(shape)
    u[u == 0.0] = 2.0 ** -60
    z = (upper - mu) / sigma
    p = ndtr(z)
    with np.errstate(divide="ignore", invalid="ignore"):
        x = np.where(p > 1e-250, mu + sigma * ndtri(u * p), upper + sigma * np.log(u) / np.abs(z))
    x = np.minimum(x, upper)
    return float(x) if x.ndim == 0 else x


def likelihood_sup_bound(subject: SubjectData, sigma_e2: float, mode: str = "observed") -> float:
    """Upper bound on the block likelihood: ``(2 pi sigma_e^2)^(-m/2)``.

    ``m`` counts uncensored records (every record in ``"completed"`` mode):
    each Gaussian density is at most ``(2 pi sigma_e^2)^(-1/2)`` and each
    censored CDF factor at most 1.
    """
    if not sigma_e2 > 0:
        raise ParameterError("sigma_e2 must be positive")
    cens = subject.censored
    m = cens.size if mode == "completed" else int(np.sum(~cens))
    return (2.0 * math.pi * sigma_e2) ** (-0.5 * m)


def _cholesky(m, tag):
    try:
        return np.ascontiguousarray(np.linalg.cholesky(m))
    except np.linalg.LinAlgError:
        raise ParameterError(f"{tag} is not positive definite") from None


def _blocks_mask(blocks) -> int:
    mask = 0
    for blk in blocks:
        if blk not in _MASK:
            raise ConfigurationError(f"unknown block {blk!r}")
        mask |= _MASK[blk]
    return mask


def sweep_panel(panel: Panel, latents: Latents, theta: Theta, spec: ModelSpec,
                cfg: GibbsConfig, rngs, blocks=ALL_BLOCKS, backend=None, subjects=None,
                violations=None):
    """Run ``cfg.sweeps_per_iteration`` Gibbs sweeps over the panel.

    Returns a new :class:`Latents` and the (n, 3) attempt counts of the last
    sweep.  ``rngs`` holds one generator per entry of ``subjects`` (default:
    every subject, in order).  Envelope violations are accumulated into the
    optional (n, 3) int64 array ``violations``.

    Raises
    ------
    SamplingStallError
        If a block exceeds ``cfg.max_rejection_attempts``.
    """
    impl = kernels.get(backend)
    theta.validate()
    out = latents.copy()
    if subjects is None:
        subjects = np.arange(panel.n_subjects, dtype=np.int64)
    else:
        subjects = np.asarray(subjects, dtype=np.int64)
    if len(rngs) != subjects.size:
        raise ConfigurationError("need one generator per processed subject")
    attempts = np.zeros((panel.n_subjects, 3), dtype=np.int64)
    if violations is None:
        violations = np.zeros((panel.n_subjects, 3), dtype=np.int64)
    chol_a = _cholesky(theta.A, "A")
    chol_b = _cholesky(theta.B, "B")
    mask = _blocks_mask(blocks)
    for _ in range(cfg.sweeps_per_iteration):
        stall = impl.sweep(
            panel.t, panel.cens, panel.dlim, panel.offsets,
            out.tau, out.a, out.b, out.y, list(rngs), subjects,
            theta.tau_mean, math.sqrt(theta.tau_var),
            np.ascontiguousarray(theta.alpha), chol_a,
            np.ascontiguousarray(theta.beta), chol_b,
            math.sqrt(theta.sigma_e2), spec.post_code, spec.tau_exp,
            spec.a_exp, spec.b_exp, mask, _MODES[cfg.block_likelihood],
            _BOUNDS[cfg.bound], float(cfg.bound_margin),
            cfg.batch_size, cfg.max_rejection_attempts, cfg.prior_attempts,
            float(cfg.proposal_inflation), attempts, violations,
            int(cfg.joint_proposals),
        )
        if stall is not None:
            i, blk, n_att = stall
            raise SamplingStallError(panel.ids[i], BLOCKS[blk], n_att)
    return out, attempts


def gibbs_sweep(subject: SubjectData, state: LatentState, theta: Theta,
                spec: ModelSpec, cfg: GibbsConfig, rng, backend=None) -> LatentState:
    """Gibbs update of one subject: joint move, ``tau``, ``a``, ``b``, then ``y_cen``."""
    panel = Panel.from_subjects([subject])
    lat = Latents.from_states([state], panel)
    new, _ = sweep_panel(panel, lat, theta, spec, cfg, [rng], backend=backend)
    return new.state(0, panel)


def rejection_sample_block(block: str, subject: SubjectData, state: LatentState,
                           theta: Theta, spec: ModelSpec, cfg: GibbsConfig, rng,
                           backend=None):
    """Exact draw of one latent block from its full conditional.

    Returns ``(value, attempts)``; ``value`` is a float for ``"tau"`` and an
    array for ``"a"``/``"b"``.
    """
    if block not in _BLOCK_CODE:
        raise ConfigurationError(f"unknown block {block!r}")
    panel = Panel.from_subjects([subject])
    lat = Latents.from_states([state], panel)
    new, attempts = sweep_panel(panel, lat, theta, spec, cfg, [rng],
                                blocks=(block,), backend=backend)
    value = {"tau": float(new.tau[0]), "a": new.a[0].copy(), "b": new.b[0].copy()}[block]
    return value, int(attempts[0, _BLOCK_CODE[block]])


def block_log_ratio(subject: SubjectData, state: LatentState, theta: Theta,
                    spec: ModelSpec, mode: str = "observed", backend=None) -> float:
    """``log(likelihood / likelihood_sup_bound)`` at the given state (always <= 0)."""
    impl = kernels.get(backend)
    panel = Panel.from_subjects([subject])
    lat = Latents.from_states([state], panel)
    return impl.block_loglik(
        panel.t, lat.y, panel.cens, panel.dlim, lat.tau[0],
        np.ascontiguousarray(lat.a[0]), np.ascontiguousarray(lat.b[0]),
        math.sqrt(theta.sigma_e2), spec.post_code, spec.tau_exp,
        spec.a_exp, spec.b_exp, _MODES[mode],
    )


def block_sup_log_ratio(block: str, subject: SubjectData, state: LatentState,
                        theta: Theta, spec: ModelSpec, mode: str = "observed",
                        backend=None) -> float:
    """Numerically located maximum of :func:`block_log_ratio` over one block."""
    if block not in _BLOCK_CODE:
        raise ConfigurationError(f"unknown block {block!r}")
    impl = kernels.get(backend)
    panel = Panel.from_subjects([subject])
    lat = Latents.from_states([state], panel)
    return float(impl.block_sup(
        _BLOCK_CODE[block], panel.t, lat.y, panel.cens, panel.dlim, lat.tau[0],
        np.ascontiguousarray(lat.a[0]), np.ascontiguousarray(lat.b[0]),
        theta.tau_mean, math.sqrt(theta.tau_var),
        np.ascontiguousarray(theta.alpha), _cholesky(theta.A, "A"),
        np.ascontiguousarray(theta.beta), _cholesky(theta.B, "B"),
        math.sqrt(theta.sigma_e2), spec.post_code, spec.tau_exp,
        spec.a_exp, spec.b_exp, _MODES[mode],
    ))
