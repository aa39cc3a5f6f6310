# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled Gibbs sweep over a packed panel.

Mirrors ``_fallback.py`` draw-for-draw: each rejection batch consumes
``batch * dim`` uniforms for the proposal normals (via ``ndtri``) followed by
``batch`` acceptance uniforms, and each censored record consumes one uniform.
The supremum search of the optimized bound is deterministic and consumes no
random numbers.
"""

import numpy as np
from cpython.pycapsule cimport PyCapsule_GetPointer
from libc.math cimport exp, floor, log, log1p, log2, pow, sqrt, fabs, isfinite, INFINITY
from libc.stdlib cimport malloc, free
from numpy.random cimport bitgen_t
from scipy.special.cython_special cimport ndtri, ndtr, log_ndtr

cdef double LN10 = 2.302585092994046
cdef double TINY_U = 8.673617379884035e-19  # 2**-60
cdef double TAIL_P = 1e-250
cdef double INVPHI = 0.6180339887498949
cdef double LOG2 = 0.6931471805599453
cdef double FLAT_TOL = 1e-11
cdef double HESS_STEP = 1e-4
cdef double SCALE_MAX = 1048576.0

DEF MAX_DIM = 8
DEF GRID = 97
DEF GOLDEN_ITERS = 40
DEF NM_EVALS = 400


cdef inline double _uniform(bitgen_t* rng) nogil:
    cdef double u = rng.next_double(rng.state)
    if u == 0.0:
        u = TINY_U
    return u


cdef inline double _lse(double x1, double x2) nogil:
    if x1 == x2:
        return x1 + 0.6931471805599453
    if x1 > x2:
        return x1 + log1p(exp(x2 - x1))
    return x2 + log1p(exp(x1 - x2))


cdef struct Curve:
    double tau_nat
    double a_nat
    double c1
    double r1
    double c2
    double r2
    double h0


cdef inline void _curve(Curve* cv, double tau, double* a, double* b,
                        int post_code, int tau_exp, int* a_exp, int* b_exp) nogil:
    cv.tau_nat = exp(tau) if tau_exp else tau
    cv.a_nat = exp(a[0]) if a_exp[0] else a[0]
    if post_code == 0:
        cv.c1 = b[0] if b_exp[0] else log(b[0])
        cv.r1 = exp(b[1]) if b_exp[1] else b[1]
        cv.c2 = b[2] if b_exp[2] else log(b[2])
        cv.r2 = exp(b[3]) if b_exp[3] else b[3]
    else:
        cv.c1 = b[0] if b_exp[0] else log(b[0])
        cv.r1 = 0.0
        cv.c2 = b[1] if b_exp[1] else log(b[1])
        cv.r2 = exp(b[2]) if b_exp[2] else b[2]
    cv.h0 = _lse(cv.c1, cv.c2) / LN10


cdef inline double _mean(Curve* cv, double t) nogil:
    cdef double s = t - cv.tau_nat
    if s <= 0.0:
        return cv.a_nat * s + cv.h0
    return _lse(cv.c1 - cv.r1 * s, cv.c2 - cv.r2 * s) / LN10


cdef inline double _loglik(Curve* cv, double* t, double* y, unsigned char* cens,
                           double* dlim, Py_ssize_t m, double sigma, double inv2s2,
                           int mode, double thresh) nogil:
    # normalized by the product-of-maxima bound, so every term is <= 0 and
    # the running sum can stop as soon as it falls below the threshold
    cdef double ll = 0.0, mu, r
    cdef Py_ssize_t j
    for j in range(m):
        mu = _mean(cv, t[j])
        if not isfinite(mu):
            return -INFINITY
        if cens[j] and mode == 0:
            ll += log_ndtr((dlim[j] - mu) / sigma)
        else:
            r = y[j] - mu
            ll -= r * r * inv2s2
        if ll < thresh:
            return ll
    return ll


cdef struct Ctx:
    double* t
    double* y
    unsigned char* cens
    double* dlim
    Py_ssize_t m
    double* tau
    double* a
    double* b
    double* target
    double* mean
    double* chol
    Py_ssize_t dim
    double sigma
    double inv2s2
    int post_code
    int tau_exp
    int* a_exp
    int* b_exp
    int mode
    int obj          # 0: log ratio, 1: + log prior, 2: + log prior - log proposal
    double lzn       # -dim/2 * log(lam): normalizer of the isotropic mode-centred component
    double lzs       # lzn + sum log sc: normalizer of the curvature-scaled component
    double* sc       # per-coordinate precision scales of the latter
    double* zm
    double lam


cdef inline void _set_from_z(Ctx* c, double* z) nogil:
    # target = mean + chol @ z (lower triangular), accumulated left to right
    cdef Py_ssize_t i, j
    cdef double acc
    for i in range(c.dim):
        acc = c.mean[i]
        for j in range(i + 1):
            acc = acc + c.chol[i * c.dim + j] * z[j]
        c.target[i] = acc


cdef inline double _ll_z(Ctx* c, double* z, double thresh) nogil:
    cdef Curve cv
    _set_from_z(c, z)
    _curve(&cv, c.tau[0], c.a, c.b, c.post_code, c.tau_exp, c.a_exp, c.b_exp)
    return _loglik(&cv, c.t, c.y, c.cens, c.dlim, c.m, c.sigma, c.inv2s2, c.mode, thresh)


cdef inline double _sq(Ctx* c, double* z) nogil:
    cdef double acc = 0.0
    cdef Py_ssize_t j
    for j in range(c.dim):
        acc = acc + z[j] * z[j]
    return acc


cdef inline double _sqm(Ctx* c, double* z) nogil:
    cdef double acc = 0.0, d
    cdef Py_ssize_t j
    for j in range(c.dim):
        d = z[j] - c.zm[j]
        acc = acc + d * d
    return acc


cdef inline double _sqs(Ctx* c, double* z) nogil:
    cdef double acc = 0.0, d
    cdef Py_ssize_t j
    for j in range(c.dim):
        d = c.sc[j] * (z[j] - c.zm[j])
        acc = acc + d * d
    return acc


cdef inline double _log_mix(Ctx* c, double* z) nogil:
    # log of the defensive-mixture proposal density
    # 0.5 N(0, I) + 0.25 N(zm, lam I) + 0.25 N(zm, lam S^-2), relative to the
    # common (2 pi)^(-dim/2) factor
    cdef double x1 = -0.5 * _sq(c, z)
    cdef double x2 = c.lzn - 0.5 * _sqm(c, z) / c.lam - LOG2
    cdef double x3 = c.lzs - 0.5 * _sqs(c, z) / c.lam - LOG2
    return _lse(x1, _lse(x2, x3)) - LOG2


cdef inline double _obj(Ctx* c, double* z) nogil:
    cdef double f = _ll_z(c, z, -INFINITY)
    if c.obj == 0:
        return f
    if c.obj == 1:
        return f - 0.5 * _sq(c, z)
    return f - 0.5 * _sq(c, z) - _log_mix(c, z)


cdef inline bint _gain(double f, double ref) nogil:
    # improvements at rounding level are ignored, so that searches over a
    # flat objective do not follow last-digit noise (which differs between
    # math libraries)
    return f > ref + FLAT_TOL * (1.0 + fabs(ref))


cdef double _max_1d(Ctx* c, double center, double half, double z_cur, double* zout) nogil:
    """Grid over ``center +- half`` plus golden-section refinement of the best cell."""
    cdef double best = _obj(c, &z_cur)
    cdef double zb = z_cur, z, f, lo, hi, x1, x2, f1, f2
    cdef double step = 2.0 * half / (GRID - 1)
    cdef Py_ssize_t g
    for g in range(GRID):
        z = center - half + step * g
        f = _obj(c, &z)
        if _gain(f, best):
            best = f
            zb = z
    lo = zb - step
    hi = zb + step
    x1 = hi - INVPHI * (hi - lo)
    x2 = lo + INVPHI * (hi - lo)
    f1 = _obj(c, &x1)
    f2 = _obj(c, &x2)
    for g in range(GOLDEN_ITERS):
        if not _gain(f2, f1):
            hi = x2
            x2 = x1
            f2 = f1
            x1 = hi - INVPHI * (hi - lo)
            f1 = _obj(c, &x1)
        else:
            lo = x1
            x1 = x2
            f1 = f2
            x2 = lo + INVPHI * (hi - lo)
            f2 = _obj(c, &x2)
        if _gain(f1, best):
            best = f1
            zb = x1
        if _gain(f2, best):
            best = f2
            zb = x2
    zout[0] = zb
    return best


cdef double _nelder_mead(Ctx* c, double* z0, double step, int max_evals, double* zout) nogil:
    """Maximize the block log-likelihood over z; returns the best value."""
    cdef Py_ssize_t d = c.dim, i, j, k, worst, best_i, second
    cdef double simplex[MAX_DIM + 1][MAX_DIM]
    cdef double fv[MAX_DIM + 1]
    cdef double cen[MAX_DIM]
    cdef double xr[MAX_DIM]
    cdef double xe[MAX_DIM]
    cdef double fr, fe, fc, tmp
    cdef int evals = 0
    for i in range(d + 1):
        for j in range(d):
            simplex[i][j] = z0[j]
        if i > 0:
            simplex[i][i - 1] += step
        fv[i] = _obj(c, simplex[i])
        evals += 1
    while evals < max_evals:
        best_i = 0
        worst = 0
        for i in range(1, d + 1):
            if fv[i] > fv[best_i]:
                best_i = i
            if fv[i] < fv[worst]:
                worst = i
        second = best_i
        for i in range(d + 1):
            if i != worst and fv[i] < fv[second]:
                second = i
        if fv[best_i] - fv[worst] < 1e-9:
            break
        for j in range(d):
            tmp = 0.0
            for i in range(d + 1):
                if i != worst:
                    tmp = tmp + simplex[i][j]
            cen[j] = tmp / d
        for j in range(d):
            xr[j] = cen[j] + (cen[j] - simplex[worst][j])
        fr = _obj(c, xr)
        evals += 1
        if fr > fv[best_i]:
            for j in range(d):
                xe[j] = cen[j] + 2.0 * (cen[j] - simplex[worst][j])
            fe = _obj(c, xe)
            evals += 1
            if fe > fr:
                for j in range(d):
                    simplex[worst][j] = xe[j]
                fv[worst] = fe
            else:
                for j in range(d):
                    simplex[worst][j] = xr[j]
                fv[worst] = fr
        elif fr > fv[second]:
            for j in range(d):
                simplex[worst][j] = xr[j]
            fv[worst] = fr
        else:
            for j in range(d):
                xe[j] = cen[j] + 0.5 * (simplex[worst][j] - cen[j])
            fc = _obj(c, xe)
            evals += 1
            if fc > fv[worst]:
                for j in range(d):
                    simplex[worst][j] = xe[j]
                fv[worst] = fc
            else:
                for i in range(d + 1):
                    if i == best_i:
                        continue
                    for j in range(d):
                        simplex[i][j] = simplex[best_i][j] + 0.5 * (simplex[i][j] - simplex[best_i][j])
                    fv[i] = _obj(c, simplex[i])
                    evals += 1
    best_i = 0
    for i in range(1, d + 1):
        if fv[i] > fv[best_i]:
            best_i = i
    for j in range(d):
        zout[j] = simplex[best_i][j]
    return fv[best_i]


cdef double _maximize(Ctx* c, double* starts, int n_starts, double center,
                      double half, double* zout) nogil:
    """Maximize the current objective; ``starts`` holds candidate start points."""
    cdef double z1[MAX_DIM]
    cdef double z2[MAX_DIM]
    cdef double f, fb, f1, f2
    cdef Py_ssize_t j
    cdef int s, sb = 0
    if c.dim == 1:
        fb = _obj(c, starts)
        for s in range(1, n_starts):
            f = _obj(c, starts + s * MAX_DIM)
            if f > fb:
                fb = f
                sb = s
        return _max_1d(c, center, half, starts[sb * MAX_DIM], zout)
    fb = _obj(c, starts)
    for s in range(1, n_starts):
        f = _obj(c, starts + s * MAX_DIM)
        if f > fb:
            fb = f
            sb = s
    f1 = _nelder_mead(c, starts + sb * MAX_DIM, 0.5, NM_EVALS, z1)
    f2 = _nelder_mead(c, z1, 0.1, NM_EVALS // 2, z2)
    if f2 >= f1:
        for j in range(c.dim):
            zout[j] = z2[j]
        f1 = f2
    else:
        for j in range(c.dim):
            zout[j] = z1[j]
    if fb > f1:
        for j in range(c.dim):
            zout[j] = starts[sb * MAX_DIM + j]
        f1 = fb
    return f1


cdef double _sup(Ctx* c, double* z_cur, double* zout) nogil:
    """Maximum of the block log ratio, started from the current value and 0."""
    cdef double starts[2 * MAX_DIM]
    cdef Py_ssize_t j
    for j in range(c.dim):
        starts[j] = z_cur[j]
        starts[MAX_DIM + j] = 0.0
    c.obj = 0
    return _maximize(c, starts, 2, 0.0, 6.0, zout)


cdef void _z_of_target(Ctx* c, double* z) nogil:
    # forward substitution: chol @ z = target - mean
    cdef Py_ssize_t i, j
    cdef double acc
    for i in range(c.dim):
        acc = c.target[i] - c.mean[i]
        for j in range(i):
            acc = acc - c.chol[i * c.dim + j] * z[j]
        z[i] = acc / c.chol[i * c.dim + i]


cdef void _mode_scales(Ctx* c, double* zm, double* sc) nogil:
    """Per-coordinate curvature scales of the current objective at ``zm``.

    ``sc[j]`` approximates the square root of the negative second derivative
    (central differences, step ``HESS_STEP``), rounded to a power of
    2^(1/4) so that last-digit noise in the objective cannot change it, and
    clamped to [1, 2^20]: the component it defines is never wider than the
    isotropic one.
    """
    cdef Py_ssize_t j
    cdef double z[MAX_DIM]
    cdef double h = HESS_STEP, f0, fp, fm, curv
    for j in range(c.dim):
        z[j] = zm[j]
    f0 = _obj(c, z)
    for j in range(c.dim):
        z[j] = zm[j] + h
        fp = _obj(c, z)
        z[j] = zm[j] - h
        fm = _obj(c, z)
        z[j] = zm[j]
        curv = -(fp - 2.0 * f0 + fm) / (h * h)
        if not (curv > 1.0 and isfinite(curv)):
            sc[j] = 1.0
        else:
            sc[j] = pow(2.0, floor(2.0 * log2(curv) + 0.5) / 4.0)
            if sc[j] > SCALE_MAX:
                sc[j] = SCALE_MAX


cdef long _sample_block(Ctx* c, bitgen_t* rng, int bound_mode, double margin,
                        Py_ssize_t batch, long max_attempts, long prior_attempts,
                        double lam, double* buf, long* violations):
    """Returns the attempt count, or -attempts on stall.

    Prior proposals first; after ``prior_attempts`` failures (optimized
    bound only) proposals come from the mixture 0.5 N(0, I) + 0.25 N(mode, lam I)
    + 0.25 N(mode, lam S^-2) in whitened coordinates, S holding the curvature
    scales of the conditional at its mode.
    """
    cdef Py_ssize_t dim = c.dim
    cdef double save[MAX_DIM]
    cdef double zc[MAX_DIM]
    cdef double zs[MAX_DIM]
    cdef double zmode[MAX_DIM]
    cdef double starts[4 * MAX_DIM]
    cdef double zsup[MAX_DIM]
    cdef double sc[MAX_DIM]
    cdef double* w = buf + batch * dim
    cdef double* uc = w + batch
    cdef double* z
    cdef double thresh, ll, r, adj, log_xi = 0.0, sl
    cdef long attempts = 0
    cdef Py_ssize_t k, i, j, n = batch * dim
    cdef int stage = 0
    for i in range(dim):
        save[i] = c.target[i]
    c.zm = zmode
    c.lam = lam
    c.lzn = -0.5 * dim * log(lam)
    c.sc = sc
    if bound_mode == 1:
        _z_of_target(c, zc)
        log_xi = _sup(c, zc, zs) + margin
        for i in range(dim):
            c.target[i] = save[i]
    while True:
        if stage == 0 and bound_mode == 1 and attempts >= prior_attempts:
            # switch to the mode-centred proposal
            stage = 1
            for j in range(dim):
                starts[j] = zc[j]
                starts[MAX_DIM + j] = 0.0
                starts[2 * MAX_DIM + j] = zs[j]
            c.obj = 1
            _maximize(c, starts, 3, 0.0, 8.0, zmode)
            _mode_scales(c, zmode, sc)
            c.lzs = c.lzn
            for j in range(dim):
                c.lzs = c.lzs + log(sc[j])
            c.obj = 2
            # the ratio peaks either near the mode or where the prior
            # component dominates; search both regions
            for j in range(dim):
                starts[j] = zmode[j]
                starts[MAX_DIM + j] = zc[j]
                starts[2 * MAX_DIM + j] = zs[j]
                starts[3 * MAX_DIM + j] = 0.0
            log_xi = _maximize(c, starts, 2, zmode[0], 8.0 * sqrt(lam), zsup)
            r = _maximize(c, starts + 2 * MAX_DIM, 2, 0.0, 8.0, zsup)
            if r > log_xi:
                log_xi = r
            if sc[0] > 1.0:
                r = _maximize(c, starts, 2, zmode[0], 8.0 * sqrt(lam) / sc[0], zsup)
                if r > log_xi:
                    log_xi = r
            log_xi = log_xi + margin
            c.obj = 0
            for i in range(dim):
                c.target[i] = save[i]
        sl = sqrt(lam)
        for i in range(n):
            buf[i] = ndtri(_uniform(rng))
        for i in range(batch):
            w[i] = _uniform(rng)
        if stage == 1:
            for i in range(batch):
                uc[i] = _uniform(rng)
            for k in range(batch):
                if uc[k] >= 0.75:
                    for j in range(dim):
                        buf[k * dim + j] = zmode[j] + sl * buf[k * dim + j] / sc[j]
                elif uc[k] >= 0.5:
                    for j in range(dim):
                        buf[k * dim + j] = zmode[j] + sl * buf[k * dim + j]
        for k in range(batch):
            attempts += 1
            if attempts > max_attempts:
                for i in range(dim):
                    c.target[i] = save[i]
                return -max_attempts
            z = buf + k * dim
            if stage == 1:
                adj = 0.5 * _sq(c, z) + _log_mix(c, z)
            else:
                adj = 0.0
            thresh = log(w[k]) + log_xi + adj
            ll = _ll_z(c, z, thresh)
            if ll >= thresh:
                r = ll - adj
                if r > log_xi:
                    # envelope violated: raise the bound and redraw from scratch
                    violations[0] += 1
                    log_xi = r + margin
                    break
                return attempts
            if stage == 0 and bound_mode == 1 and attempts >= prior_attempts:
                break
    return attempts


cdef void _impute(bitgen_t* rng, double* t, double* y, unsigned char* cens,
                  double* dlim, Py_ssize_t m, double tau, double* a, double* b,
                  double sigma, int post_code, int tau_exp, int* a_exp, int* b_exp):
    cdef Curve cv
    cdef Py_ssize_t j
    cdef double mu, zc, p, u, x
    _curve(&cv, tau, a, b, post_code, tau_exp, a_exp, b_exp)
    for j in range(m):
        if not cens[j]:
            continue
        u = _uniform(rng)
        mu = _mean(&cv, t[j])
        zc = (dlim[j] - mu) / sigma
        p = ndtr(zc)
        if p > TAIL_P:
            x = mu + sigma * ndtri(u * p)
        else:
            # exponential tail approximation beyond ~34 sd
            x = dlim[j] + sigma * log(u) / fabs(zc)
        if x > dlim[j]:
            x = dlim[j]
        y[j] = x


cdef inline void _joint_target(double* z, double tau_m, double tau_s, double* alpha,
                               double* chol_a, Py_ssize_t pa, double* beta, double* chol_b,
                               Py_ssize_t pb, double* cand) nogil:
    cdef Py_ssize_t i, j
    cdef double acc
    cand[0] = tau_m + tau_s * z[0]
    for i in range(pa):
        acc = alpha[i]
        for j in range(i + 1):
            acc = acc + chol_a[i * pa + j] * z[1 + j]
        cand[1 + i] = acc
    for i in range(pb):
        acc = beta[i]
        for j in range(i + 1):
            acc = acc + chol_b[i * pb + j] * z[1 + pa + j]
        cand[1 + pa + i] = acc


cdef void _joint_block(Ctx* c, bitgen_t* rng, double tau_m, double tau_s,
                       double* alpha, double* chol_a, Py_ssize_t pa, double* beta,
                       double* chol_b, Py_ssize_t pb, long k_prop, double* z, double* w,
                       double* cand) nogil:
    # iterated sampling-importance-resampling move on (tau, a, b): k_prop
    # prior proposals plus the current state, one picked with probability
    # proportional to its likelihood
    cdef Py_ssize_t dim = 1 + pa + pb, k, i
    cdef Curve cv
    cdef double mx, tot, u
    cdef long pick
    for k in range(k_prop * dim):
        z[k] = ndtri(_uniform(rng))
    _curve(&cv, c.tau[0], c.a, c.b, c.post_code, c.tau_exp, c.a_exp, c.b_exp)
    w[0] = _loglik(&cv, c.t, c.y, c.cens, c.dlim, c.m, c.sigma, c.inv2s2, c.mode, -INFINITY)
    for k in range(k_prop):
        _joint_target(&z[k * dim], tau_m, tau_s, alpha, chol_a, pa, beta, chol_b, pb, cand)
        _curve(&cv, cand[0], &cand[1], &cand[1 + pa], c.post_code, c.tau_exp, c.a_exp,
               c.b_exp)
        w[k + 1] = _loglik(&cv, c.t, c.y, c.cens, c.dlim, c.m, c.sigma, c.inv2s2, c.mode,
                           -INFINITY)
    mx = w[0]
    for k in range(1, k_prop + 1):
        if w[k] > mx:
            mx = w[k]
    u = _uniform(rng)
    if not isfinite(mx):
        return
    tot = 0.0
    for k in range(k_prop + 1):
        tot = tot + exp(w[k] - mx)
        w[k] = tot
    u = u * tot
    pick = k_prop
    for k in range(k_prop + 1):
        if w[k] > u:
            pick = k
            break
    if pick == 0:
        return
    _joint_target(&z[(pick - 1) * dim], tau_m, tau_s, alpha, chol_a, pa, beta, chol_b, pb,
                  cand)
    c.tau[0] = cand[0]
    for i in range(pa):
        c.a[i] = cand[1 + i]
    for i in range(pb):
        c.b[i] = cand[1 + pa + i]


def sweep(const double[::1] t, const unsigned char[::1] cens, const double[::1] dlim,
          const long[::1] offsets, double[::1] tau, double[:, ::1] a,
          double[:, ::1] b, double[::1] y, list rngs, const long[::1] subjects,
          double tau_mean, double tau_sd, const double[::1] alpha,
          const double[:, ::1] chol_a, const double[::1] beta,
          const double[:, ::1] chol_b, double sigma, int post_code,
          int tau_exp, const int[::1] a_exp, const int[::1] b_exp, int blocks,
          int mode, int bound_mode, double margin, Py_ssize_t batch,
          long max_attempts, long prior_attempts, double lam,
          long[:, ::1] attempts_out, long[:, ::1] violations_out, long joint_k=0):
    """One Gibbs sweep ([joint ->] tau -> a -> b -> y_cen) for each listed subject.

    Updates ``tau``, ``a``, ``b`` and ``y`` in place.  Returns ``None`` or a
    ``(subject, block, attempts)`` tuple describing a stall.
    """
    cdef Py_ssize_t pa = a.shape[1], pb = b.shape[1]
    cdef Py_ssize_t dmax = pa if pa > pb else pb
    cdef Py_ssize_t s, i, lo
    cdef int blk
    cdef long res
    cdef bitgen_t* rng
    cdef Ctx c
    cdef double tau_m = tau_mean, tau_s = tau_sd
    if dmax > MAX_DIM:
        raise ValueError("latent block too large for compiled kernel")
    cdef double* buf = <double*>malloc(batch * (dmax + 2) * sizeof(double))
    cdef double* jbuf = <double*>malloc(((joint_k + 1) * (pa + pb + 2) + 1) * sizeof(double))
    if buf == NULL or jbuf == NULL:
        free(buf)
        free(jbuf)
        raise MemoryError()
    c.sigma = sigma
    c.inv2s2 = 0.5 / (sigma * sigma)
    c.post_code = post_code
    c.tau_exp = tau_exp
    c.a_exp = <int*>&a_exp[0]
    c.b_exp = <int*>&b_exp[0]
    c.mode = mode
    c.obj = 0
    c.lam = lam
    try:
        for s in range(subjects.shape[0]):
            i = subjects[s]
            rng = <bitgen_t*>PyCapsule_GetPointer(rngs[s].bit_generator.capsule, "BitGenerator")
            lo = offsets[i]
            c.t = <double*>&t[lo]
            c.y = &y[lo]
            c.cens = <unsigned char*>&cens[lo]
            c.dlim = <double*>&dlim[lo]
            c.m = offsets[i + 1] - lo
            c.tau = &tau[i]
            c.a = &a[i, 0]
            c.b = &b[i, 0]
            if (blocks >> 4) & 1:
                _joint_block(&c, rng, tau_m, tau_s, <double*>&alpha[0],
                             <double*>&chol_a[0, 0], pa, <double*>&beta[0],
                             <double*>&chol_b[0, 0], pb, joint_k, jbuf,
                             &jbuf[joint_k * (1 + pa + pb)],
                             &jbuf[joint_k * (1 + pa + pb) + joint_k + 1])
            for blk in range(3):
                if not (blocks >> blk) & 1:
                    continue
                if blk == 0:
                    c.target = c.tau
                    c.mean = &tau_m
                    c.chol = &tau_s
                    c.dim = 1
                elif blk == 1:
                    c.target = c.a
                    c.mean = <double*>&alpha[0]
                    c.chol = <double*>&chol_a[0, 0]
                    c.dim = pa
                else:
                    c.target = c.b
                    c.mean = <double*>&beta[0]
                    c.chol = <double*>&chol_b[0, 0]
                    c.dim = pb
                res = _sample_block(&c, rng, bound_mode, margin, batch, max_attempts,
                                    prior_attempts, lam, buf, &violations_out[i, blk])
                if res < 0:
                    attempts_out[i, blk] = -res
                    return (int(i), blk, int(-res))
                attempts_out[i, blk] = res
            if (blocks >> 3) & 1:
                _impute(rng, c.t, c.y, c.cens, c.dlim, c.m, tau[i], c.a, c.b, sigma,
                        post_code, tau_exp, c.a_exp, c.b_exp)
    finally:
        free(buf)
        free(jbuf)
    return None


def block_loglik(const double[::1] t, const double[::1] y,
                 const unsigned char[::1] cens, const double[::1] dlim, double tau,
                 const double[::1] a, const double[::1] b, double sigma,
                 int post_code, int tau_exp, const int[::1] a_exp,
                 const int[::1] b_exp, int mode):
    """Log of likelihood / product-of-maxima bound for one configuration."""
    cdef Curve cv
    _curve(&cv, tau, <double*>&a[0], <double*>&b[0], post_code, tau_exp,
           <int*>&a_exp[0], <int*>&b_exp[0])
    return _loglik(&cv, <double*>&t[0], <double*>&y[0], <unsigned char*>&cens[0],
                   <double*>&dlim[0], t.shape[0], sigma, 0.5 / (sigma * sigma),
                   mode, -INFINITY)


def block_sup(int block, const double[::1] t, const double[::1] y,
              const unsigned char[::1] cens, const double[::1] dlim, double tau,
              const double[::1] a, const double[::1] b, double tau_mean,
              double tau_sd, const double[::1] alpha, const double[:, ::1] chol_a,
              const double[::1] beta, const double[:, ::1] chol_b, double sigma,
              int post_code, int tau_exp, const int[::1] a_exp,
              const int[::1] b_exp, int mode):
    """Numerical supremum of the block log ratio (relative to the product bound)."""
    cdef Ctx c
    cdef double tau_v = tau, tau_m = tau_mean, tau_s = tau_sd
    cdef double av[MAX_DIM]
    cdef double bv[MAX_DIM]
    cdef double zc[MAX_DIM]
    cdef double zs[MAX_DIM]
    cdef Py_ssize_t j
    cdef double res
    for j in range(a.shape[0]):
        av[j] = a[j]
    for j in range(b.shape[0]):
        bv[j] = b[j]
    c.t = <double*>&t[0]
    c.y = <double*>&y[0]
    c.cens = <unsigned char*>&cens[0]
    c.dlim = <double*>&dlim[0]
    c.m = t.shape[0]
    c.tau = &tau_v
    c.a = av
    c.b = bv
    c.sigma = sigma
    c.inv2s2 = 0.5 / (sigma * sigma)
    c.post_code = post_code
    c.tau_exp = tau_exp
    c.a_exp = <int*>&a_exp[0]
    c.b_exp = <int*>&b_exp[0]
    c.mode = mode
    c.obj = 0
    c.lam = 1.0
    if block == 0:
        c.target = c.tau
        c.mean = &tau_m
        c.chol = &tau_s
        c.dim = 1
    elif block == 1:
        c.target = c.a
        c.mean = <double*>&alpha[0]
        c.chol = <double*>&chol_a[0, 0]
        c.dim = a.shape[0]
    else:
        c.target = c.b
        c.mean = <double*>&beta[0]
        c.chol = <double*>&chol_b[0, 0]
        c.dim = b.shape[0]
    _z_of_target(&c, zc)
    res = _sup(&c, zc, zs)
    return res
