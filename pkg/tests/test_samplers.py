import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from segnlme.errors import ConfigurationError, ParameterError, SamplingStallError
from segnlme.model import Latents, LatentState, Panel, SubjectData, mean_values
from segnlme.samplers import (
    GibbsConfig, block_log_ratio, block_sup_log_ratio, gibbs_sweep,
    likelihood_sup_bound, rejection_sample_block, sample_truncated_normal_upper,
    subject_streams, sweep_panel,
)

from segnlme import kernels

from conftest import BACKENDS, make_subject, small_theta

# Large-sample distribution checks run on the active backend; the other
# backend is tied to it by the draw-for-draw equivalence test below.
ACTIVE = [kernels.BACKEND]


# ---------------------------------------------------------------------------
# truncated normal


def test_truncated_normal_half_mean():
    rng = np.random.default_rng(1)
    x = sample_truncated_normal_upper(0.0, 1.0, 0.0, rng, size=100_000)
    assert np.all(x <= 0.0)
    assert abs(x.mean() + math.sqrt(2 / math.pi)) < 0.01


def test_truncated_normal_negligible_truncation():
    rng = np.random.default_rng(2)
    x = sample_truncated_normal_upper(5.0, 1.0, 10.0, rng, size=100_000)
    assert abs(x.mean() - 5.0) < 0.02


def test_truncated_normal_deep_tail_stays_below_bound():
    rng = np.random.default_rng(3)
    x = sample_truncated_normal_upper(0.0, 1.0, -60.0, rng, size=1000)
    assert np.all(x <= -60.0) and np.all(np.isfinite(x))
    # the tail of N(0,1) beyond -60 is ~exponential with rate 60
    assert abs((-60.0 - x).mean() - 1 / 60) < 0.005


@given(mu=st.floats(-20, 20), sigma=st.floats(0.01, 10), upper=st.floats(-20, 20))
def test_truncated_normal_support(mu, sigma, upper):
    rng = np.random.default_rng(0)
    x = sample_truncated_normal_upper(mu, sigma, upper, rng, size=50)
    assert np.all(x <= upper) and np.all(np.isfinite(x))


def test_truncated_normal_distribution_ks():
    rng = np.random.default_rng(5)
    mu, sigma, upper = 1.0, 2.0, 0.5
    x = sample_truncated_normal_upper(mu, sigma, upper, rng, size=20_000)
    ref = stats.truncnorm(-np.inf, (upper - mu) / sigma, loc=mu, scale=sigma)
    assert stats.kstest(x, ref.cdf).pvalue > 0.01


def test_truncated_normal_rejects_bad_sigma():
    with pytest.raises(ParameterError):
        sample_truncated_normal_upper(0.0, 0.0, 1.0, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# likelihood envelope


def test_sup_bound_all_censored_is_one():
    s = make_subject(censored=[True, True, True])
    assert likelihood_sup_bound(s, 0.3) == 1.0


def test_sup_bound_single_record():
    s = make_subject(censored=[False, True, True])
    assert likelihood_sup_bound(s, 1 / (2 * math.pi)) == pytest.approx(1.0, rel=1e-14)


def test_sup_bound_two_records():
    s = make_subject(censored=[False, False, True])
    assert likelihood_sup_bound(s, 1.0) == pytest.approx(1 / (2 * math.pi), rel=1e-14)


def test_sup_bound_completed_counts_every_record():
    s = make_subject(censored=[False, False, True])
    assert likelihood_sup_bound(s, 1.0, mode="completed") == pytest.approx(
        (2 * math.pi) ** -1.5, rel=1e-14)


def test_sup_bound_rejects_nonpositive_variance():
    with pytest.raises(ParameterError):
        likelihood_sup_bound(make_subject(), 0.0)


@pytest.mark.parametrize("backend", BACKENDS)
@given(tau=st.floats(-4, 2), a=st.floats(-1, 1), db=st.floats(-1, 1))
def test_log_ratio_never_positive(backend, tau, a, db):
    theta = small_theta()
    s = make_subject(censored=[False, True, False])
    state = LatentState(tau, [a], np.asarray(theta.beta) + db, {1: 2.0})
    assert block_log_ratio(s, state, theta, _spec(), backend=backend) <= 1e-12


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("block", ["tau", "a", "b"])
def test_block_supremum_dominates_evaluations(backend, block):
    theta = small_theta()
    s = make_subject()
    base = LatentState(theta.tau_mean, theta.alpha, theta.beta)
    sup = block_sup_log_ratio(block, s, base, theta, _spec(), backend=backend)
    assert sup <= 1e-12
    rng = np.random.default_rng(0)
    for _ in range(200):
        if block == "tau":
            st_ = LatentState(rng.normal(theta.tau_mean, 1.5), base.a, base.b)
        elif block == "a":
            st_ = LatentState(base.tau_latent, rng.normal(base.a, 0.3), base.b)
        else:
            st_ = LatentState(base.tau_latent, base.a, rng.normal(base.b, 0.5))
        assert block_log_ratio(s, st_, theta, _spec(), backend=backend) <= sup + 1e-6


# ---------------------------------------------------------------------------
# block samplers


def _spec():
    from segnlme.model import ModelSpec
    return ModelSpec()


def _replicated_panel(subject: SubjectData, n: int) -> Panel:
    subs = [SubjectData(f"c{i}", subject.records) for i in range(n)]
    return Panel.from_subjects(subs)


def _tau_grid_posterior(subject, state, theta, spec, n_grid=2000):
    """Grid-normalized prior x observed-data likelihood for the tau block."""
    sd = math.sqrt(theta.tau_var)
    grid = np.linspace(theta.tau_mean - 8 * sd, theta.tau_mean + 8 * sd, n_grid)
    t = subject.times
    mu = mean_values(t[None, :], grid[:, None], state.a[None, :], state.b[None, :], spec)
    se = math.sqrt(theta.sigma_e2)
    obs = ~subject.censored
    ll = np.sum(stats.norm.logpdf(subject.values[obs], mu[:, obs], se), axis=1)
    ll += np.sum(stats.norm.logcdf((subject.limits[~obs] - mu[:, ~obs]) / se), axis=1)
    lp = stats.norm.logpdf(grid, theta.tau_mean, sd) + ll
    w = np.exp(lp - lp.max())
    return grid, w / w.sum()


def _draw_tau(subject, state, theta, spec, n, backend, seed=0, per_call=20_000):
    out = []
    ss = np.random.SeedSequence(seed)
    while sum(map(len, out)) < n:
        k = min(per_call, n - sum(map(len, out)))
        panel = _replicated_panel(subject, k)
        lat = Latents.from_states([state] * k, panel)
        rngs = subject_streams(ss.spawn(1)[0], k)
        new, _ = sweep_panel(panel, lat, theta, spec, GibbsConfig(), rngs,
                             blocks=("tau",), backend=backend)
        out.append(new.tau)
    return np.concatenate(out)


def _tv_from_grid(draws, grid, probs):
    h = grid[1] - grid[0]
    edges = np.concatenate([[grid[0] - h / 2], grid + h / 2])
    counts, _ = np.histogram(draws, bins=edges)
    emp = counts / draws.size
    # coarsen to 100 bins: the discretization noise of 2000 bins with 1e5
    # draws alone is ~0.1 TV, the oracle itself is exact at grid resolution
    k = 20
    return 0.5 * np.sum(np.abs(emp.reshape(-1, k).sum(1) - probs.reshape(-1, k).sum(1)))


@pytest.mark.parametrize("backend", ACTIVE)
def test_tau_block_matches_grid_oracle(backend, spec):
    theta = small_theta()
    theta = theta.replace(tau_var=1.0)
    subject = make_subject(times=(0.15, 0.9), values=(4.2, 2.8), censored=[False, False])
    state = LatentState(theta.tau_mean, theta.alpha, theta.beta)
    grid, probs = _tau_grid_posterior(subject, state, theta, spec)
    draws = _draw_tau(subject, state, theta, spec, 100_000, backend)
    tv = _tv_from_grid(draws, grid, probs)
    assert tv < 0.05
    # the posterior genuinely differs from the prior, so the check has teeth
    prior = stats.norm.pdf(grid, theta.tau_mean, 1.0)
    prior /= prior.sum()
    assert 0.5 * np.abs(prior - probs).sum() > 0.1


@pytest.mark.parametrize("backend", ACTIVE)
def test_tau_block_with_censored_record_matches_oracle(backend, spec):
    theta = small_theta().replace(tau_var=1.0)
    subject = make_subject(times=(0.15, 0.9, 2.0), values=(4.2, 2.8, 0.0),
                           censored=[False, False, True])
    state = LatentState(theta.tau_mean, theta.alpha, theta.beta, {2: 2.0})
    grid, probs = _tau_grid_posterior(subject, state, theta, spec)
    draws = _draw_tau(subject, state, theta, spec, 60_000, backend, seed=3)
    assert _tv_from_grid(draws, grid, probs) < 0.05


@pytest.mark.parametrize("backend", ACTIVE)
def test_two_stage_sampler_far_tail_matches_oracle(backend, spec):
    # prior mass near the conditional is tiny, forcing the mode-centred stage
    theta = small_theta().replace(tau_mean=-4.0, tau_var=0.25)
    subject = make_subject(times=(0.1, 0.3, 0.6, 1.0, 1.5),
                           values=(4.5, 4.4, 4.3, 2.9, 2.5), censored=[False] * 5)
    state = LatentState(theta.tau_mean, theta.alpha, theta.beta)
    grid, probs = _tau_grid_posterior(subject, state, theta, spec, n_grid=4000)
    draws = _draw_tau(subject, state, theta, spec, 40_000, backend, seed=9)
    assert _tv_from_grid(draws, grid, probs) < 0.05


@pytest.mark.parametrize("backend", ACTIVE)
def test_flat_likelihood_reproduces_prior(backend, spec):
    theta = small_theta()
    limit = 60.0  # every censoring factor is 1 to machine precision
    subject = make_subject(times=(0.2, 0.7, 1.4), censored=[True] * 3, limit=limit)
    state = LatentState(theta.tau_mean, theta.alpha, theta.beta, {0: 1.0, 1: 1.0, 2: 1.0})
    n = 10_000
    panel = _replicated_panel(subject, n)
    lat = Latents.from_states([state] * n, panel)
    # with the plain envelope the acceptance ratio is exactly 1
    new, att = sweep_panel(panel, lat, theta, spec, GibbsConfig(bound="product"),
                           subject_streams(7, n), blocks=("tau", "a", "b"), backend=backend)
    assert np.all(att == 1)
    assert stats.kstest(new.tau, stats.norm(theta.tau_mean, math.sqrt(theta.tau_var)).cdf).pvalue > 0.01
    assert stats.kstest(new.a[:, 0], stats.norm(theta.alpha[0], 0.1).cdf).pvalue > 0.01
    for k in range(4):
        ref = stats.norm(theta.beta[k], math.sqrt(theta.B[k, k]))
        assert stats.kstest(new.b[:, k], ref.cdf).pvalue > 0.01


@pytest.mark.parametrize("backend", ACTIVE)
def test_product_bound_is_also_exact(backend, spec):
    theta = small_theta().replace(tau_var=1.0)
    subject = make_subject(times=(0.15, 0.9), values=(4.2, 2.8), censored=[False, False])
    state = LatentState(theta.tau_mean, theta.alpha, theta.beta)
    grid, probs = _tau_grid_posterior(subject, state, theta, spec)
    n = 30_000
    panel = _replicated_panel(subject, n)
    lat = Latents.from_states([state] * n, panel)
    cfg = GibbsConfig(bound="product")
    new, _ = sweep_panel(panel, lat, theta, spec, cfg, subject_streams(1, n),
                         blocks=("tau",), backend=backend)
    assert _tv_from_grid(new.tau, grid, probs) < 0.05


@pytest.mark.parametrize("backend", ACTIVE)
def test_gibbs_chain_preserves_tau_conditional(backend, spec):
    """A full Gibbs chain on one subject with point-mass a, b reproduces the tau oracle."""
    theta = small_theta().replace(tau_var=1.0, A=[[1e-12]], B=1e-12 * np.eye(4))
    subject = make_subject(times=(0.15, 0.9, 2.0), values=(4.2, 2.8, 0.0),
                           censored=[False, False, True])
    state = LatentState(theta.tau_mean, theta.alpha, theta.beta, {2: 2.0})
    grid, probs = _tau_grid_posterior(subject, state, theta, spec)
    rng = np.random.default_rng(21)
    panel = Panel.from_subjects([subject])
    lat = Latents.from_states([state], panel)
    draws = np.empty(20_000)
    for i in range(draws.size):
        lat, _ = sweep_panel(panel, lat, theta, spec, GibbsConfig(), [rng], backend=backend)
        draws[i] = lat.tau[0]
    assert _tv_from_grid(draws, grid, probs) < 0.05


def _point_mass_instance():
    theta = small_theta().replace(tau_var=1.0, A=[[1e-12]], B=1e-12 * np.eye(4))
    subject = make_subject(times=(0.15, 0.9), values=(4.2, 2.8), censored=[False, False])
    state = LatentState(theta.tau_mean, theta.alpha, theta.beta)
    return theta, subject, state


def _joint_sweeps(subject, tau0, theta, spec, backend, sweeps, seed):
    panel = _replicated_panel(subject, tau0.size)
    lat = Latents.at_means(theta, panel)
    lat.tau[:] = tau0
    rngs = subject_streams(seed, tau0.size)
    for _ in range(sweeps):
        lat, _ = sweep_panel(panel, lat, theta, spec, GibbsConfig(), rngs,
                             blocks=("joint",), backend=backend)
    return lat.tau


@pytest.mark.parametrize("backend", ACTIVE)
def test_joint_move_preserves_conditional(backend, spec):
    """Exact conditional draws stay exact after a joint (tau, a, b) move."""
    theta, subject, state = _point_mass_instance()
    grid, probs = _tau_grid_posterior(subject, state, theta, spec)
    start = _draw_tau(subject, state, theta, spec, 100_000, backend, seed=5)
    moved = _joint_sweeps(subject, start, theta, spec, backend, 1, 6)
    assert np.mean(moved != start) > 0.5
    assert _tv_from_grid(moved, grid, probs) < 0.05


@pytest.mark.parametrize("backend", ACTIVE)
def test_joint_move_leaves_a_far_start(backend, spec):
    theta, subject, state = _point_mass_instance()
    grid, probs = _tau_grid_posterior(subject, state, theta, spec)
    start = np.full(100_000, theta.tau_mean + 4.0)
    moved = _joint_sweeps(subject, start, theta, spec, backend, 3, 7)
    assert _tv_from_grid(moved, grid, probs) < 0.05


# ---------------------------------------------------------------------------
# sweeps


@pytest.mark.parametrize("backend", BACKENDS)
def test_sweep_without_censored_records_updates_latents(backend, spec):
    theta = small_theta()
    s = make_subject()
    state = LatentState(theta.tau_mean, theta.alpha, theta.beta)
    new = gibbs_sweep(s, state, theta, spec, GibbsConfig(), np.random.default_rng(0),
                      backend=backend)
    assert new.y_cen == {}
    assert new.tau_latent != state.tau_latent
    assert not np.array_equal(new.b, state.b)


@pytest.mark.parametrize("backend", BACKENDS)
def test_sweep_deterministic_replay(backend, spec, dataset):
    theta = small_theta()
    panel = Panel.from_subjects(dataset.subjects)
    lat = Latents.at_means(theta, panel)
    cens = panel.cens.astype(bool)
    lat.y[cens] = panel.dlim[cens] - 0.3

    def run():
        out, att = sweep_panel(panel, lat, theta, spec, GibbsConfig(sweeps_per_iteration=2),
                               subject_streams(5, panel.n_subjects), backend=backend)
        return out, att

    (o1, a1), (o2, a2) = run(), run()
    for x, y in ((o1.tau, o2.tau), (o1.a, o2.a), (o1.b, o2.b), (o1.y, o2.y), (a1, a2)):
        assert np.array_equal(x, y)


@pytest.mark.parametrize("backend", BACKENDS)
def test_sweep_keeps_observed_values_and_censoring(backend, spec, dataset):
    theta = small_theta()
    panel = Panel.from_subjects(dataset.subjects)
    lat = Latents.at_means(theta, panel)
    cens = panel.cens.astype(bool)
    lat.y[cens] = panel.dlim[cens] - 0.3
    new, _ = sweep_panel(panel, lat, theta, spec, GibbsConfig(),
                         subject_streams(1, panel.n_subjects), backend=backend)
    obs = ~panel.cens.astype(bool)
    assert np.array_equal(new.y[obs], panel.y[obs])
    assert np.all(new.y[~obs] <= panel.dlim[~obs])
    # the input latents are not mutated
    assert np.all(lat.y[~obs] == panel.dlim[~obs] - 0.3)


@pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled backend not built")
def test_backends_agree_draw_for_draw(spec, dataset):
    theta = small_theta()
    panel = Panel.from_subjects(dataset.subjects)
    lat = Latents.at_means(theta, panel)
    cens = panel.cens.astype(bool)
    lat.y[cens] = panel.dlim[cens] - 0.3
    res = {}
    for b in BACKENDS:
        cur = lat
        rngs = subject_streams(123, panel.n_subjects)
        for _ in range(3):
            cur, att = sweep_panel(panel, cur, theta, spec, GibbsConfig(), rngs, backend=b)
        res[b] = (cur, att)
    (c1, a1), (c2, a2) = res.values()
    assert np.array_equal(a1, a2)
    for x, y in ((c1.tau, c2.tau), (c1.a, c2.a), (c1.b, c2.b), (c1.y, c2.y)):
        np.testing.assert_allclose(x, y, rtol=1e-10, atol=1e-12)


def test_subject_streams_independent_of_panel_size():
    a = subject_streams(9, 3)
    b = subject_streams(9, 10)
    for g1, g2 in zip(a, b):
        assert g1.random() == g2.random()


@pytest.mark.parametrize("backend", BACKENDS)
def test_stall_error_names_subject_and_block(backend, spec):
    theta = small_theta()
    # far-off data with the plain envelope: acceptance probability ~ 0
    s = make_subject("far", times=np.linspace(0.1, 3, 12), values=np.full(12, 9.0))
    state = LatentState(theta.tau_mean, theta.alpha, theta.beta)
    cfg = GibbsConfig(bound="product", max_rejection_attempts=50, batch_size=8)
    with pytest.raises(SamplingStallError) as ei:
        rejection_sample_block("tau", s, state, theta, spec, cfg, np.random.default_rng(0),
                               backend=backend)
    assert ei.value.subject_id == "far"
    assert ei.value.block == "tau"


@pytest.mark.parametrize("backend", BACKENDS)
def test_rejection_sample_block_returns_attempts(backend, spec):
    theta = small_theta()
    s = make_subject()
    state = LatentState(theta.tau_mean, theta.alpha, theta.beta)
    val, n = rejection_sample_block("b", s, state, theta, spec, GibbsConfig(),
                                    np.random.default_rng(2), backend=backend)
    assert val.shape == (4,) and n >= 1


def test_config_validation():
    for bad in (dict(sweeps_per_iteration=0), dict(max_rejection_attempts=0),
                dict(batch_size=0), dict(block_likelihood="x"), dict(bound="x"),
                dict(bound_margin=-1), dict(prior_attempts=0), dict(proposal_inflation=1.0),
                dict(joint_proposals=0)):
        with pytest.raises(ConfigurationError):
            GibbsConfig(**bad)


def test_unknown_block_rejected(spec):
    theta = small_theta()
    state = LatentState(theta.tau_mean, theta.alpha, theta.beta)
    with pytest.raises(ConfigurationError):
        rejection_sample_block("z", make_subject(), state, theta, spec, GibbsConfig(),
                               np.random.default_rng(0))


def test_generator_count_must_match(spec, dataset):
    theta = small_theta()
    panel = Panel.from_subjects(dataset.subjects)
    with pytest.raises(ConfigurationError):
        sweep_panel(panel, Latents.at_means(theta, panel), theta, spec, GibbsConfig(),
                    subject_streams(0, 2))
