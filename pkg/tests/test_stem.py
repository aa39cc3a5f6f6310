import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import optimize

from segnlme import stem as stem_mod
from segnlme.errors import (
    ConfigurationError, DegenerateSampleError, DivergenceError, SingularCovarianceError,
)
from segnlme.model import (
    Latents, LatentState, ModelSpec, Panel, SubjectData, Theta, complete_data_loglik,
    mean_values,
)
from segnlme.samplers import GibbsConfig
from segnlme.stem import (
    ChainHistory, StemConfig, anneal_variances, apply_cov_floor, fisher_information_linearized, m_step,
    natural_params, pool_estimates, pool_series, posterior_mean_latents, stem_run,
)

from conftest import make_subject, small_theta


# ---------------------------------------------------------------------------
# helpers


def random_instance(rng, n=10, spec=ModelSpec()):
    """n subjects with 3-6 records and latents drawn around ``small_theta``."""
    th = small_theta()
    subjects, states = [], []
    for i in range(n):
        m = int(rng.integers(3, 7))
        t = np.sort(rng.uniform(0.02, 3.0, m))
        a = rng.normal(th.alpha, 0.1)
        b = rng.multivariate_normal(th.beta, th.B)
        tau = rng.normal(th.tau_mean, math.sqrt(th.tau_var))
        mu = mean_values(t, tau, a, b, spec)
        y = mu + rng.normal(0, 0.45, m)
        cens = rng.random(m) < 0.3
        lim = np.full(m, float(np.median(y)))
        obs = np.where(cens, lim, y)
        subjects.append(SubjectData.from_arrays(f"r{i}", t, obs, cens, lim))
        states.append(LatentState(tau, a, b, {int(j): float(y[j]) for j in np.flatnonzero(cens)}))
    return subjects, states


def _chol_theta(x, pa=1, pb=4):
    """Theta from an unconstrained vector: means, log variances, Cholesky factors."""
    i = 0
    alpha = x[i:i + pa]; i += pa
    beta = x[i:i + pb]; i += pb
    tau = x[i]; i += 1
    tv = math.exp(x[i]); i += 1

    def chol(p):
        nonlocal i
        L = np.zeros((p, p))
        for r in range(p):
            for c in range(r + 1):
                L[r, c] = math.exp(x[i]) if r == c else x[i]
                i += 1
        return L @ L.T

    A = chol(pa)
    B = chol(pb)
    s2 = math.exp(x[i])
    return Theta(alpha, beta, tau, tv, A, B, s2)


def _numeric_maximizer(states, subjects, spec):
    panel = Panel.from_subjects(subjects)
    lat = Latents.from_states(states, panel)

    def neg(x):
        return -complete_data_loglik(_chol_theta(x), lat, panel, spec).total

    x0 = np.zeros(1 + 4 + 1 + 1 + 1 + 10 + 1)
    res = optimize.minimize(neg, x0, method="BFGS", jac="3-point",
                            options=dict(gtol=1e-10, maxiter=5000))
    # polish from the BFGS point
    res = optimize.minimize(neg, res.x, method="BFGS", jac="3-point",
                            options=dict(gtol=1e-11, maxiter=5000))
    return _chol_theta(res.x)


def _natural_entries(th: Theta):
    """(value, scale) pairs for every free parameter."""
    out = [(v, abs(v)) for v in th.alpha] + [(v, abs(v)) for v in th.beta]
    out += [(th.tau_mean, abs(th.tau_mean)), (th.tau_var, th.tau_var),
            (th.sigma_e2, th.sigma_e2)]
    for C in (th.A, th.B):
        d = np.sqrt(np.diag(C))
        for k in range(C.shape[0]):
            for l in range(k, C.shape[0]):
                # off-diagonal covariances are compared relative to sd_k sd_l
                out.append((C[k, l], abs(C[k, l]) if k == l else d[k] * d[l]))
    return out


# ---------------------------------------------------------------------------
# M-step


def _three_subjects(taus):
    subs = [make_subject(f"s{i}") for i in range(len(taus))]
    th = small_theta()
    states = [LatentState(t, th.alpha + 0.01 * i, th.beta + 0.1 * i) for i, t in enumerate(taus)]
    return subs, states


def test_m_step_change_point_closed_form(spec):
    subs, states = _three_subjects([-1.0, -2.0, -3.0])
    th = m_step(states, subs, spec, check=False)
    assert th.tau_mean == pytest.approx(-2.0, abs=1e-15)
    assert th.tau_var == pytest.approx(2 / 3, rel=1e-14)


def test_m_step_identical_latents_zero_covariances(spec):
    subs = [make_subject(f"s{i}") for i in range(3)]
    th0 = small_theta()
    states = [LatentState(th0.tau_mean, th0.alpha, th0.beta)] * 3
    th = m_step(states, subs, spec, check=False)
    assert th.tau_var == 0.0
    assert np.all(th.A == 0.0) and np.all(th.B == 0.0)
    with pytest.raises(SingularCovarianceError) as ei:
        m_step(states, subs, spec)
    assert set(ei.value.tags) == {"tau", "A", "B"}


def test_m_step_needs_two_subjects(spec):
    subs, states = _three_subjects([-1.0])
    with pytest.raises(DegenerateSampleError):
        m_step(states, subs, spec)


def test_m_step_residual_variance_estimators(spec):
    rng = np.random.default_rng(3)
    subs, states = random_instance(rng)
    panel = Panel.from_subjects(subs)
    lat = Latents.from_states(states, panel)
    r = lat.y - mean_values(panel.t, lat.tau[panel.owner], lat.a[panel.owner],
                            lat.b[panel.owner], spec)
    pooled = m_step(states, subs, spec).sigma_e2
    per = m_step(states, subs, spec, sigma_e2_estimator="per_subject_mean").sigma_e2
    assert pooled == pytest.approx(np.mean(r * r), rel=1e-13)
    per_ref = np.mean([np.mean(r[panel.offsets[i]:panel.offsets[i + 1]] ** 2)
                       for i in range(panel.n_subjects)])
    assert per == pytest.approx(per_ref, rel=1e-13)
    with pytest.raises(ConfigurationError):
        m_step(states, subs, spec, sigma_e2_estimator="x")


@pytest.mark.parametrize("seed", range(20))
def test_m_step_matches_numerical_maximizer(seed, spec):
    rng = np.random.default_rng(1000 + seed)
    subs, states = random_instance(rng)
    closed = m_step(states, subs, spec)
    numeric = _numeric_maximizer(states, subs, spec)
    for (c, scale), (v, _) in zip(_natural_entries(closed), _natural_entries(numeric)):
        assert abs(c - v) <= 1e-6 * scale


@given(seed=st.integers(0, 10_000), k=st.integers(0, 18), sign=st.sampled_from([-1, 1]))
def test_m_step_perturbation_never_improves(seed, k, sign):
    spec = ModelSpec()
    rng = np.random.default_rng(seed)
    subs, states = random_instance(rng, n=6)
    th = m_step(states, subs, spec)
    base = complete_data_loglik(th, states, subs, spec).total
    c = th.to_coords()
    c[k] += sign * 1e-3
    moved = Theta.from_coords(c, 1, 4)
    assert complete_data_loglik(moved, states, subs, spec).total <= base + 1e-9


# ---------------------------------------------------------------------------
# pooling


def test_pool_constant_chain():
    est, se = pool_series(np.full((10, 3), 2.5), np.full((10, 3), 0.4))
    np.testing.assert_allclose(est, 2.5)
    np.testing.assert_allclose(se, 0.4)


def test_pool_two_values():
    est, se = pool_series([[0.0], [2.0]], [[0.0], [0.0]])
    assert est[0] == 1.0
    assert se[0] == pytest.approx(math.sqrt(3.0), rel=1e-15)


def test_pool_needs_two():
    with pytest.raises(ConfigurationError):
        pool_series([[1.0]], [[0.1]])


@given(shift=st.floats(-100, 100), scale=st.floats(-10, 10).filter(lambda s: abs(s) > 1e-3),
       seed=st.integers(0, 1000))
def test_pool_affine_equivariance(shift, scale, seed):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(15, 4))
    zero = np.zeros_like(v)
    est, se = pool_series(v, zero)
    est2, se2 = pool_series(shift + scale * v, zero)
    np.testing.assert_allclose(est2, shift + scale * est, rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(se2, abs(scale) * se, rtol=1e-9)


def _history(spec, thetas, se=0.1):
    from segnlme.model import coord_names
    h = ChainHistory(tuple(coord_names(spec)))
    for t in thetas:
        h.append(t, np.full(len(h.names), se))
    return h


def test_pool_estimates_on_history(spec):
    base = small_theta()
    thetas = [base.replace(tau_mean=base.tau_mean + d) for d in (0.0, 0.2, -0.2, 0.1, -0.1)]
    h = _history(spec, thetas)
    pooled = pool_estimates(h, 4, spec)
    assert pooled.theta.tau_mean == pytest.approx(base.tau_mean, abs=1e-14)
    k = h.names.index("tau")
    vals = np.array([0.2, -0.2, 0.1, -0.1])
    assert pooled.se[k] == pytest.approx(math.sqrt(0.01 + 1.25 * vals.var(ddof=1)))
    with pytest.raises(ConfigurationError):
        pool_estimates(h, 6, spec)
    with pytest.raises(ConfigurationError):
        pool_estimates(h, 1, spec)


def test_history_is_append_only(spec):
    h = _history(spec, [small_theta()])
    with pytest.raises(ConfigurationError):
        h.set_se(0, np.zeros(len(h.names)))


# ---------------------------------------------------------------------------
# linearized information


def _linear_case():
    spec = ModelSpec(tau_transform="identity", post_segment="onecomp")
    rng = np.random.default_rng(7)
    subjects, states = [], []
    th = Theta(alpha=[0.3], beta=[1.0, 0.5, 0.2], tau_mean=50.0, tau_var=0.3,
               A=[[0.05]], B=np.diag([0.2, 0.1, 0.05]), sigma_e2=0.25)
    for i in range(12):
        m = int(rng.integers(3, 7))
        t = np.sort(rng.uniform(0, 3, m))
        y = rng.normal(size=m)
        subjects.append(SubjectData.from_arrays(f"g{i}", t, y, np.zeros(m, bool),
                                                np.full(m, -9.0)))
        states.append(LatentState(th.tau_mean + rng.normal(0, 0.1), th.alpha + rng.normal(0, 0.05),
                                  th.beta + rng.normal(0, 0.1, 3)))
    return spec, th, subjects, states


def test_information_linear_case_matches_gls():
    """Pre-segment only: the mean is linear in [a, tau], constant in b."""
    spec, th, subjects, states = _linear_case()
    res = fisher_information_linearized(th, states, subjects, spec)
    q = 5
    Sigma = th.latent_cov
    I_ref = np.zeros((q, q))
    for s, stt in zip(subjects, states):
        t = s.times
        b = stt.b
        # d/d b of log10(e^b1 + e^(b2 - e^b3 * 0)) at s = 0
        w1, w2 = math.exp(b[0]), math.exp(b[1])
        g = np.array([w1, w2]) / ((w1 + w2) * math.log(10))
        X = np.column_stack([t - stt.tau_latent, np.full(t.size, g[0]),
                             np.full(t.size, g[1]), np.zeros(t.size),
                             np.full(t.size, -stt.a[0])])
        V = X @ Sigma @ X.T + th.sigma_e2 * np.eye(t.size)
        I_ref += X.T @ np.linalg.solve(V, X)
    np.testing.assert_allclose(res.matrix[:q, :q], I_ref, rtol=1e-6, atol=1e-9 * np.abs(I_ref).max())
    # the b3 column carries no information and is reported as absent
    names = list(res.names)
    assert np.isnan(res.se[names.index("beta3")])
    assert "fixed" in res.singular_blocks


def test_information_zero_latent_covariance(spec):
    rng = np.random.default_rng(2)
    subs, states = random_instance(rng)
    tiny = 1e-300
    th = small_theta().replace(tau_var=tiny, A=[[tiny]], B=tiny * np.eye(4))
    res = fisher_information_linearized(th, states, subs, spec)
    panel = Panel.from_subjects(subs)
    lat = Latents.from_states(states, panel)
    Z = stem_mod.linearization_jacobian(lat.vectors, panel, spec)
    np.testing.assert_allclose(res.matrix[:6, :6], Z.T @ Z / th.sigma_e2, rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_information_symmetric_psd_block_diagonal(seed, spec):
    rng = np.random.default_rng(seed)
    subs, states = random_instance(rng)
    th = m_step(states, subs, spec)
    res = fisher_information_linearized(th, states, subs, spec)
    I = res.matrix
    assert np.array_equal(I, I.T)
    assert np.linalg.eigvalsh(I).min() >= -1e-10 * np.abs(I).max()
    assert np.all(I[:6, 6:] == 0.0) and np.all(I[6:, :6] == 0.0)
    assert np.all(res.se[np.isfinite(res.se)] > 0)
    assert res.natural_se(th).shape == natural_params(th)[0].shape


def test_natural_se_delta_method(spec):
    rng = np.random.default_rng(11)
    subs, states = random_instance(rng, n=15)
    th = m_step(states, subs, spec)
    res = fisher_information_linearized(th, states, subs, spec)
    nse = res.natural_se(th)
    names = natural_params(th)[1]
    k = names.index("sigma_e")
    j = list(res.names).index("log_sigma_e2")
    # sigma_e = exp(c / 2): d sigma_e / dc = sigma_e / 2
    assert nse[k] == pytest.approx(0.5 * math.sqrt(th.sigma_e2) * res.se[j], rel=1e-5)
    k, j = names.index("beta1"), list(res.names).index("beta1")
    assert nse[k] == pytest.approx(res.se[j], rel=1e-9)


# ---------------------------------------------------------------------------
# covariance floor


def test_cov_floor_raises_small_eigenvalues():
    th = small_theta().replace(tau_var=1e-8, B=np.diag([1e-7, 0.1, 0.2, 0.3]))
    out = apply_cov_floor(th, 1e-4)
    assert out.tau_var == 1e-4
    assert np.linalg.eigvalsh(out.B).min() == pytest.approx(1e-4)
    np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(out.B))[1:], [0.1, 0.2, 0.3])
    assert apply_cov_floor(small_theta(), 1e-4) is not None
    assert apply_cov_floor(th, 0.0) is th


# ---------------------------------------------------------------------------
# the loop


def _small_run(dataset, spec, **kw):
    th = small_theta()
    panel = Panel.from_subjects(dataset.subjects)
    lat = Latents.at_means(th, panel)
    cens = panel.cens.astype(bool)
    lat.y[cens] = panel.dlim[cens] - 0.3
    cfg = StemConfig(batch_size_M=20, window_w=5, max_iterations=kw.pop("iters", 30), **kw)
    return stem_run(panel, th, lat, spec, cfg, GibbsConfig(rng_seed=5))


def test_stem_run_seed_determinism(dataset, spec):
    r1 = _small_run(dataset, spec)
    r2 = _small_run(dataset, spec)
    assert np.array_equal(r1.history.coords_array(), r2.history.coords_array())
    for a, b in zip(r1.history.ses, r2.history.ses):
        assert (a is None and b is None) or np.array_equal(a, b)
    assert np.array_equal(r1.pooled.se, r2.pooled.se)
    assert r1.iterations == r2.iterations


def test_stem_run_reports_checks_and_pools(dataset, spec):
    seen = []
    th = small_theta()
    panel = Panel.from_subjects(dataset.subjects)
    lat = Latents.at_means(th, panel)
    cens = panel.cens.astype(bool)
    lat.y[cens] = panel.dlim[cens]
    traced = []
    cfg = StemConfig(batch_size_M=20, window_w=5, max_iterations=40)
    res = stem_run(panel, th, lat, spec, cfg, GibbsConfig(rng_seed=1),
                   trace=lambda k, t: traced.append(k), on_check=seen.append)
    assert traced == list(range(1, res.iterations + 1))
    # checks at k = 20, 25, 30, ... with batch index (k - 20) / 5
    assert [r.batch_index for r in seen] == list(range(len(seen)))
    assert len(seen) == (res.iterations - 20) // 5 + 1
    assert res.converged == seen[-1].stationary
    assert res.pooled is not None and np.all(np.isfinite(res.pooled.coords))
    # SEs attached exactly to the pooling window
    assert all(s is None for s in res.history.ses[:-20])
    assert all(s is not None for s in res.history.ses[-20:])


def test_stem_run_non_convergence_is_reported(dataset, spec):
    res = _small_run(dataset, spec, iters=22, epsilon=1e-12)
    assert not res.converged and res.iterations == 22


def test_stem_run_divergence(dataset, spec, monkeypatch):
    real = stem_mod.m_step
    calls = {"n": 0}

    def broken(*a, **k):
        calls["n"] += 1
        th = real(*a, **k)
        return th.replace(tau_mean=math.nan) if calls["n"] == 3 else th

    monkeypatch.setattr(stem_mod, "m_step", broken)
    with pytest.raises(DivergenceError) as ei:
        _small_run(dataset, spec)
    assert ei.value.iteration == 3
    assert ei.value.coordinate == "tau"


def test_stem_run_singular_without_floor(spec):
    subs = [make_subject(f"s{i}", censored=[False, False, True]) for i in range(4)]
    th = small_theta()
    states = [LatentState(th.tau_mean, th.alpha, th.beta, {2: 2.0})] * 4
    # annealing would hold the variances up, so it is off here
    cfg = StemConfig(batch_size_M=20, max_iterations=3, cov_floor=0.0, anneal_iterations=0)
    # only the censored values are imputed, so the latent effects stay identical
    with pytest.raises(SingularCovarianceError):
        stem_run(subs, th, states, spec, cfg, blocks=("ycen",))
    res = stem_run(subs, th, states, spec,
                   StemConfig(batch_size_M=20, max_iterations=3, anneal_iterations=0),
                   blocks=("ycen",))
    assert res.history.thetas[-1].tau_var == 1e-4


# ---------------------------------------------------------------------------
# posterior means


def test_posterior_mean_point_mass_prior(spec):
    tiny = 1e-12
    th = small_theta().replace(tau_var=tiny, A=[[tiny]], B=tiny * np.eye(4))
    s = make_subject()
    mean = posterior_mean_latents([s, make_subject("s2")], th, spec, 20)
    np.testing.assert_allclose(mean.tau, th.tau_mean, atol=1e-4)
    np.testing.assert_allclose(mean.b, np.tile(th.beta, (2, 1)), atol=1e-4)


def test_posterior_mean_tau_matches_grid(spec):
    from test_samplers import _tau_grid_posterior
    tiny = 1e-12
    th = small_theta().replace(tau_var=1.0, A=[[tiny]], B=tiny * np.eye(4))
    s = make_subject(times=(0.15, 0.9), values=(4.2, 2.8), censored=[False, False])
    grid, probs = _tau_grid_posterior(s, LatentState(th.tau_mean, th.alpha, th.beta), th, spec)
    ref = float(np.sum(grid * probs))
    n = 400
    subs = [SubjectData(f"c{i}", s.records) for i in range(n)]
    mean, taus = posterior_mean_latents(subs, th, spec, 50, return_draws=True)
    assert taus.shape == (50, n)
    assert abs(taus.mean() - ref) < 0.02
    np.testing.assert_allclose(mean.tau, taus.mean(axis=0), rtol=1e-12)


def test_posterior_mean_is_on_the_latent_scale(spec):
    th = small_theta()
    subs = [make_subject("a"), make_subject("b")]
    mean, taus = posterior_mean_latents(subs, th, spec, 30, return_draws=True)
    np.testing.assert_allclose(mean.tau, taus.mean(axis=0), rtol=1e-12)
    assert not np.allclose(np.exp(mean.tau), np.exp(taus).mean(axis=0))


def test_posterior_mean_rejects_zero_draws(spec):
    with pytest.raises(ConfigurationError):
        posterior_mean_latents([make_subject()], small_theta(), spec, 0)


def test_stem_config_validation():
    for bad in (dict(batch_size_M=1), dict(window_w=0), dict(epsilon=0),
                dict(max_iterations=0), dict(posterior_mean_draws=0),
                dict(cov_floor=-1), dict(sigma_e2_estimator="x"),
                dict(anneal_iterations=-1), dict(anneal_factor=0), dict(anneal_factor=1.5)):
        with pytest.raises(ConfigurationError):
            StemConfig(**bad)


# ---------------------------------------------------------------------------
# variance annealing


def test_annealing_limits_shrinkage_and_keeps_correlations():
    prev = small_theta().replace(B=np.array([[1.0, 0.5, 0, 0], [0.5, 1.0, 0, 0],
                                             [0, 0, 1.0, 0], [0, 0, 0, 1.0]]))
    new = prev.replace(B=0.1 * prev.B, tau_var=0.01, sigma_e2=0.5, A=[[0.001]])
    out = anneal_variances(new, prev, 0.9)
    np.testing.assert_allclose(np.diag(out.B), 0.9 * np.diag(prev.B), rtol=1e-14)
    assert out.B[0, 1] / math.sqrt(out.B[0, 0] * out.B[1, 1]) == pytest.approx(0.5, rel=1e-14)
    assert out.tau_var == pytest.approx(0.9 * prev.tau_var)
    assert out.A[0, 0] == pytest.approx(0.9 * prev.A[0, 0])
    assert out.sigma_e2 == 0.5  # growth is never limited


@given(seed=st.integers(0, 1000), factor=st.floats(0.5, 1.0))
def test_annealing_keeps_covariances_positive_definite(seed, factor):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(6, 4))
    prev = small_theta().replace(B=X.T @ X + 0.1 * np.eye(4))
    Y = rng.normal(size=(6, 4))
    new = prev.replace(B=Y.T @ Y * 0.01 + 1e-3 * np.eye(4))
    out = anneal_variances(new, prev, factor)
    assert np.linalg.eigvalsh(out.B).min() > 0
    assert np.all(np.diag(out.B) >= factor * np.diag(prev.B) * (1 - 1e-12))


def test_annealing_is_identity_without_shrinkage():
    th = small_theta()
    out = anneal_variances(th, th.replace(B=0.5 * th.B, tau_var=0.1, sigma_e2=0.1,
                                          A=[[0.001]]), 0.95)
    assert np.array_equal(out.B, th.B) and out.tau_var == th.tau_var
