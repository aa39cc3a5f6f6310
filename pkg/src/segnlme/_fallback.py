"""Pure numpy implementation of the sweep kernels.

Same signatures and the same random-number consumption as the compiled
``_kernels`` module; rejection batches are vectorized over proposals.
"""

import math

import numpy as np
from scipy.special import log_ndtr, ndtr, ndtri

LN10 = math.log(10.0)
LOG2 = 0.6931471805599453
TINY_U = 2.0 ** -60
TAIL_P = 1e-250


def _uniforms(rng, n):
    u = rng.random(n)
    u[u == 0.0] = TINY_U
    return u


def _curve(tau, a, b, post_code, tau_exp, a_exp, b_exp):
    """Curve constants for proposals; inputs are (K,), (K, pa), (K, pb)."""
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        tau_nat = np.exp(tau) if tau_exp else tau
        a_nat = np.exp(a[:, 0]) if a_exp[0] else a[:, 0]

        def lvl(k):
            return b[:, k] if b_exp[k] else np.log(b[:, k])

        def rate(k):
            return np.exp(b[:, k]) if b_exp[k] else b[:, k]

        if post_code == 0:
            c1, r1, c2, r2 = lvl(0), rate(1), lvl(2), rate(3)
        else:
            c1, r1, c2, r2 = lvl(0), np.zeros_like(tau_nat), lvl(1), rate(2)
        h0 = np.logaddexp(c1, c2) / LN10
    return tau_nat, a_nat, c1, r1, c2, r2, h0


def _mean(curve, t):
    tau_nat, a_nat, c1, r1, c2, r2, h0 = curve
    s = t - tau_nat
    with np.errstate(over="ignore", invalid="ignore"):
        post = np.logaddexp(c1 - r1 * s, c2 - r2 * s) / LN10
        return np.where(s <= 0.0, a_nat * s + h0, post)


def _loglik(curve, t, y, cens, dlim, sigma, mode):
    inv2s2 = 0.5 / (sigma * sigma)
    ll = np.zeros_like(curve[0])
    bad = np.zeros(ll.shape, dtype=bool)
    for j in range(t.size):
        mu = _mean(curve, t[j])
        bad |= ~np.isfinite(mu)
        if cens[j] and mode == 0:
            with np.errstate(invalid="ignore"):
                ll = ll + log_ndtr((dlim[j] - mu) / sigma)
        else:
            r = y[j] - mu
            ll = ll - r * r * inv2s2
    ll[bad] = -np.inf
    return ll


def _propose(z, mean, chol):
    dim = mean.size
    out = np.empty_like(z)
    for i in range(dim):
        acc = np.full(z.shape[0], mean[i])
        for j in range(i + 1):
            acc = acc + chol[i, j] * z[:, j]
        out[:, i] = acc
    return out


class _Ctx:
    """Conditional log ratio of one block as a function of its prior z-score."""

    def __init__(self, block, t, y, cens, dlim, tau, a, b, prior, sigma, codes, mode):
        tau_mean, tau_sd, alpha, chol_a, beta, chol_b = prior
        self.block = block
        self.args = (t, y, cens, dlim, sigma, mode)
        self.codes = codes
        self.tau, self.a, self.b = tau, np.asarray(a, float), np.asarray(b, float)
        if block == 0:
            self.mean, self.chol = np.array([tau_mean]), np.array([[tau_sd]])
            self.current = np.array([tau])
        elif block == 1:
            self.mean, self.chol, self.current = alpha, chol_a, self.a
        else:
            self.mean, self.chol, self.current = beta, chol_b, self.b
        self.dim = self.mean.size

    def targets(self, z):
        return _propose(np.atleast_2d(z), self.mean, self.chol)

    def ll(self, z):
        """Log ratios for the rows of ``z`` (shape (K, dim))."""
        x = self.targets(z)
        k = x.shape[0]
        taus = np.full(k, self.tau)
        As = np.tile(self.a, (k, 1))
        Bs = np.tile(self.b, (k, 1))
        if self.block == 0:
            taus = x[:, 0]
        elif self.block == 1:
            As = x
        else:
            Bs = x
        t, y, cens, dlim, sigma, mode = self.args
        post_code, tau_exp, a_exp, b_exp = self.codes
        curve = _curve(taus, As, Bs, post_code, tau_exp, a_exp, b_exp)
        return _loglik(curve, t, y, cens, dlim, sigma, mode)

    def f(self, z):
        z = np.asarray(z, float)
        v = float(self.ll(z[None, :])[0])
        if self.obj == 0:
            return v
        if self.obj == 1:
            return v - 0.5 * _sumsq(z)
        return v - 0.5 * _sumsq(z) - self.log_mix(z)

    def log_mix(self, z):
        """Log density of 0.5 N(0, I) + 0.25 N(zm, lam I) + 0.25 N(zm, lam S^-2).

        Without the common (2 pi)^(-dim/2) factor.
        """
        x1 = -0.5 * _sumsq(z)
        x2 = -0.5 * self.dim * math.log(self.lam) - 0.5 * _sumsq(z - self.zm) / self.lam - LOG2
        x3 = self.lzs - 0.5 * _sumsq(self.sc * (z - self.zm)) / self.lam - LOG2
        return _lse(x1, _lse(x2, x3)) - LOG2

    obj = 0
    zm = None
    lam = 1.0
    sc = None
    lzs = 0.0

    def z_of_current(self):
        # forward substitution in the same order as the compiled kernel
        z = np.empty(self.dim)
        for i in range(self.dim):
            acc = self.current[i] - self.mean[i]
            for j in range(i):
                acc = acc - self.chol[i, j] * z[j]
            z[i] = acc / self.chol[i, i]
        return z


def _lse(x1, x2):
    if x1 == x2:
        return x1 + LOG2
    if x1 > x2:
        return x1 + math.log1p(math.exp(x2 - x1))
    return x2 + math.log1p(math.exp(x1 - x2))


def _mode_scales(ctx, zm):
    """Per-coordinate curvature scales of the current objective at ``zm``.

    Square roots of the negative central second differences (step
    ``HESS_STEP``), rounded to a power of 2^(1/4) and clamped to [1, 2^20].
    """
    z = np.array(zm, float)
    h = HESS_STEP
    f0 = ctx.f(z)
    sc = np.ones(ctx.dim)
    for j in range(ctx.dim):
        z[j] = zm[j] + h
        fp = ctx.f(z)
        z[j] = zm[j] - h
        fm = ctx.f(z)
        z[j] = zm[j]
        curv = -(fp - 2.0 * f0 + fm) / (h * h)
        if curv > 1.0 and math.isfinite(curv):
            sc[j] = min(2.0 ** (math.floor(2.0 * math.log2(curv) + 0.5) / 4.0), SCALE_MAX)
    return sc


def _sumsq(z):
    acc = 0.0
    for v in z:
        acc = acc + v * v
    return acc


GRID = 97
GOLDEN_ITERS = 40
NM_EVALS = 400
INVPHI = 0.6180339887498949
HESS_STEP = 1e-4
SCALE_MAX = 1048576.0
FLAT_TOL = 1e-11


def _gain(f, ref):
    # improvements at rounding level are ignored, so that searches over a
    # flat objective do not follow last-digit noise (which differs between
    # math libraries)
    return f > ref + FLAT_TOL * (1.0 + abs(ref))


def _max_1d(ctx, center, half, z_cur):
    best = ctx.f([z_cur])
    zb = z_cur
    step = 2.0 * half / (GRID - 1)
    for g in range(GRID):
        z = center - half + step * g
        f = ctx.f([z])
        if _gain(f, best):
            best, zb = f, z
    lo, hi = zb - step, zb + step
    x1 = hi - INVPHI * (hi - lo)
    x2 = lo + INVPHI * (hi - lo)
    f1, f2 = ctx.f([x1]), ctx.f([x2])
    for _ in range(GOLDEN_ITERS):
        if not _gain(f2, f1):
            hi, x2, f2 = x2, x1, f1
            x1 = hi - INVPHI * (hi - lo)
            f1 = ctx.f([x1])
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + INVPHI * (hi - lo)
            f2 = ctx.f([x2])
        if _gain(f1, best):
            best, zb = f1, x1
        if _gain(f2, best):
            best, zb = f2, x2
    return float(best), np.array([zb])


def _nelder_mead(ctx, z0, step, max_evals):
    """Maximize the block log ratio over z; returns (best value, best point)."""
    d = ctx.dim
    simplex = np.tile(np.asarray(z0, float), (d + 1, 1))
    for i in range(1, d + 1):
        simplex[i, i - 1] += step
    fv = [ctx.f(simplex[i]) for i in range(d + 1)]
    evals = d + 1
    while evals < max_evals:
        best_i = worst = 0
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
        cen = np.empty(d)
        for j in range(d):
            tmp = 0.0
            for i in range(d + 1):
                if i != worst:
                    tmp = tmp + simplex[i, j]
            cen[j] = tmp / d
        xr = cen + (cen - simplex[worst])
        fr = ctx.f(xr)
        evals += 1
        if fr > fv[best_i]:
            xe = cen + 2.0 * (cen - simplex[worst])
            fe = ctx.f(xe)
            evals += 1
            if fe > fr:
                simplex[worst], fv[worst] = xe, fe
            else:
                simplex[worst], fv[worst] = xr, fr
        elif fr > fv[second]:
            simplex[worst], fv[worst] = xr, fr
        else:
            xc = cen + 0.5 * (simplex[worst] - cen)
            fc = ctx.f(xc)
            evals += 1
            if fc > fv[worst]:
                simplex[worst], fv[worst] = xc, fc
            else:
                for i in range(d + 1):
                    if i == best_i:
                        continue
                    simplex[i] = simplex[best_i] + 0.5 * (simplex[i] - simplex[best_i])
                    fv[i] = ctx.f(simplex[i])
                    evals += 1
    best_i = int(np.argmax(fv))
    return fv[best_i], simplex[best_i].copy()


def _maximize(ctx, starts, center, half):
    """Maximize the context's current objective; returns (value, argmax)."""
    vals = [ctx.f(z) for z in starts]
    sb = 0
    for i in range(1, len(starts)):
        if vals[i] > vals[sb]:
            sb = i
    if ctx.dim == 1:
        return _max_1d(ctx, center, half, float(starts[sb][0]))
    f1, z1 = _nelder_mead(ctx, starts[sb], 0.5, NM_EVALS)
    f2, z2 = _nelder_mead(ctx, z1, 0.1, NM_EVALS // 2)
    if f2 >= f1:
        f1, z1 = f2, z2
    if vals[sb] > f1:
        return float(vals[sb]), np.array(starts[sb], float)
    return float(f1), z1


def _sup(ctx, z_cur):
    ctx.obj = 0
    return _maximize(ctx, [z_cur, np.zeros(ctx.dim)], 0.0, 6.0)


def _sample_block(ctx, rng, bound_mode, margin, batch, max_attempts, prior_attempts, lam):
    """Returns (value, attempts, violations); attempts is negative on stall."""
    dim = ctx.dim
    log_xi = 0.0
    zc = ctx.z_of_current()
    if bound_mode == 1:
        v, zs = _sup(ctx, zc)
        log_xi = v + margin
    attempts = 0
    violations = 0
    stage = 0
    zmode = None
    while True:
        if stage == 0 and bound_mode == 1 and attempts >= prior_attempts:
            stage = 1
            ctx.obj = 1
            _, zmode = _maximize(ctx, [zc, np.zeros(dim), zs], 0.0, 8.0)
            sc = _mode_scales(ctx, zmode)
            lzs = -0.5 * dim * math.log(lam)
            for j in range(dim):
                lzs = lzs + math.log(sc[j])
            ctx.obj, ctx.zm, ctx.lam, ctx.sc, ctx.lzs = 2, zmode, lam, sc, lzs
            # the ratio peaks either near the mode or where the prior
            # component dominates; search both regions
            v, _ = _maximize(ctx, [zmode, zc], float(zmode[0]), 8.0 * math.sqrt(lam))
            r, _ = _maximize(ctx, [zs, np.zeros(dim)], 0.0, 8.0)
            if r > v:
                v = r
            if sc[0] > 1.0:
                r, _ = _maximize(ctx, [zmode, zc], float(zmode[0]), 8.0 * math.sqrt(lam) / sc[0])
                if r > v:
                    v = r
            log_xi = v + margin
            ctx.obj = 0
        z = ndtri(_uniforms(rng, batch * dim)).reshape(batch, dim)
        w = _uniforms(rng, batch)
        if stage == 1:
            uc = _uniforms(rng, batch)
            sl = math.sqrt(lam)
            narrow = uc >= 0.75
            wide = (uc >= 0.5) & ~narrow
            z[narrow] = zmode[None, :] + sl * z[narrow] / sc[None, :]
            z[wide] = zmode[None, :] + sl * z[wide]
            ctx.lam, ctx.zm, ctx.sc, ctx.lzs = lam, zmode, sc, lzs
            adj = np.array([0.5 * _sumsq(zk) + ctx.log_mix(zk) for zk in z])
        else:
            adj = np.zeros(batch)
        limit = batch
        if stage == 0 and bound_mode == 1:
            limit = min(batch, prior_attempts - attempts)
        ll = ctx.ll(z)
        thresh = np.log(w) + log_xi + adj
        hits = np.flatnonzero(ll[:limit] >= thresh[:limit])
        if hits.size:
            k = int(hits[0])
            if attempts + k + 1 > max_attempts:
                return None, -max_attempts, violations
            attempts += k + 1
            r = float(ll[k] - adj[k])
            if r > log_xi:
                violations += 1
                log_xi = r + margin
                continue
            return ctx.targets(z[k])[0], attempts, violations
        attempts += limit
        if attempts > max_attempts:
            return None, -max_attempts, violations


def _joint_block(rng, ti, yi, ci, di, sigma, codes, mode, prior, tau, a, b, k_prop):
    """i-SIR move on ``(tau, a, b)``; returns the (possibly unchanged) state."""
    tau_mean, tau_sd, alpha, chol_a, beta, chol_b = prior
    pa, pb = alpha.size, beta.size
    dim = 1 + pa + pb
    z = ndtri(_uniforms(rng, k_prop * dim)).reshape(k_prop, dim)
    taus = np.concatenate([[tau], tau_mean + tau_sd * z[:, 0]])
    As = np.vstack([a[None, :], _propose(z[:, 1:1 + pa], alpha, chol_a)])
    Bs = np.vstack([b[None, :], _propose(z[:, 1 + pa:], beta, chol_b)])
    post_code, tau_exp, a_exp, b_exp = codes
    w = _loglik(_curve(taus, As, Bs, post_code, tau_exp, a_exp, b_exp), ti, yi, ci, di,
                sigma, mode)
    u = float(_uniforms(rng, 1)[0])
    mx = float(w.max())
    if not math.isfinite(mx):
        return tau, a, b
    cum = []
    tot = 0.0
    for v in w:
        tot = tot + math.exp(float(v) - mx)
        cum.append(tot)
    u = u * tot
    pick = k_prop
    for k, c in enumerate(cum):
        if c > u:
            pick = k
            break
    return float(taus[pick]), As[pick].copy(), Bs[pick].copy()


def _impute(rng, t, y, cens, dlim, tau, a, b, sigma, codes):
    post_code, tau_exp, a_exp, b_exp = codes
    idx = np.flatnonzero(cens)
    if idx.size == 0:
        return
    u = _uniforms(rng, idx.size)
    curve = _curve(np.array([tau]), a[None, :], b[None, :], post_code, tau_exp, a_exp, b_exp)
    mu = _mean(curve, t[idx])
    zc = (dlim[idx] - mu) / sigma
    p = ndtr(zc)
    body = p > TAIL_P
    with np.errstate(divide="ignore", invalid="ignore"):
        x = np.where(
            body,
            mu + sigma * ndtri(u * p),
            dlim[idx] + sigma * np.log(u) / np.abs(zc),
        )
    y[idx] = np.minimum(x, dlim[idx])


def sweep(t, cens, dlim, offsets, tau, a, b, y, rngs, subjects, tau_mean,
          tau_sd, alpha, chol_a, beta, chol_b, sigma, post_code, tau_exp,
          a_exp, b_exp, blocks, mode, bound_mode, margin, batch, max_attempts,
          prior_attempts, lam, attempts_out, violations_out, joint_k=0):
    """One Gibbs sweep ([joint ->] tau -> a -> b -> y_cen) for each listed subject."""
    prior = (tau_mean, tau_sd, np.asarray(alpha), np.asarray(chol_a),
             np.asarray(beta), np.asarray(chol_b))
    codes = (post_code, tau_exp, np.asarray(a_exp), np.asarray(b_exp))
    for s, i in enumerate(subjects):
        rng = rngs[s]
        lo, hi = offsets[i], offsets[i + 1]
        ti, yi, ci, di = t[lo:hi], y[lo:hi], cens[lo:hi], dlim[lo:hi]
        if (blocks >> 4) & 1:
            tau[i], a[i], b[i] = _joint_block(rng, ti, yi, ci, di, sigma, codes, mode, prior,
                                              tau[i], np.asarray(a[i], float),
                                              np.asarray(b[i], float), joint_k)
        for blk in range(3):
            if not (blocks >> blk) & 1:
                continue
            ctx = _Ctx(blk, ti, yi, ci, di, tau[i], a[i], b[i], prior, sigma, codes, mode)
            val, res, viol = _sample_block(ctx, rng, bound_mode, margin, batch, max_attempts,
                                           prior_attempts, lam)
            violations_out[i, blk] += viol
            if res < 0:
                attempts_out[i, blk] = -res
                return (int(i), blk, int(-res))
            attempts_out[i, blk] = res
            if blk == 0:
                tau[i] = val[0]
            elif blk == 1:
                a[i] = val
            else:
                b[i] = val
        if (blocks >> 3) & 1:
            _impute(rng, ti, yi, ci, di, tau[i], a[i], b[i], sigma, codes)
    return None


def block_loglik(t, y, cens, dlim, tau, a, b, sigma, post_code, tau_exp,
                 a_exp, b_exp, mode):
    """Normalized log acceptance ratio of a single latent configuration."""
    curve = _curve(np.array([tau]), np.asarray(a)[None, :], np.asarray(b)[None, :],
                   post_code, tau_exp, a_exp, b_exp)
    return float(_loglik(curve, np.asarray(t), np.asarray(y), np.asarray(cens),
                         np.asarray(dlim), sigma, mode)[0])


def block_sup(block, t, y, cens, dlim, tau, a, b, tau_mean, tau_sd, alpha,
              chol_a, beta, chol_b, sigma, post_code, tau_exp, a_exp, b_exp, mode):
    """Numerical supremum of the block log ratio (relative to the product bound)."""
    prior = (tau_mean, tau_sd, np.asarray(alpha), np.asarray(chol_a),
             np.asarray(beta), np.asarray(chol_b))
    codes = (post_code, tau_exp, np.asarray(a_exp), np.asarray(b_exp))
    ctx = _Ctx(block, np.asarray(t), np.asarray(y), np.asarray(cens), np.asarray(dlim),
               tau, a, b, prior, sigma, codes, mode)
    return _sup(ctx, ctx.z_of_current())[0]
