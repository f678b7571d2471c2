"""Compiled inner loop for single-study SVI.

One SVI iteration does O(batch * P * J) work, which is far too little to
amortize numpy call dispatch, so the whole iteration is fused into a numba
kernel (cached to disk). The numpy implementation in fa_svi.svi_step_fa is
the readable reference; the test suite asserts the two paths agree.

Status codes: 0 ok, 1 Cholesky failure after jitter, 2 nonpositive psi rate.
"""

import numpy as np

try:
    from numba import njit

    AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    AVAILABLE = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap if not (len(args) == 1 and callable(args[0])) else args[0]


JITTER_SCALE = 1e-8


@njit(cache=True)
def _chol_small(a, ell):
    d = a.shape[0]
    for i in range(d):
        for j in range(i + 1):
            acc = a[i, j]
            for k in range(j):
                acc -= ell[i, k] * ell[j, k]
            if i == j:
                if acc <= 0.0:
                    return False
                ell[i, i] = np.sqrt(acc)
            else:
                ell[i, j] = acc / ell[j, j]
        for j in range(i + 1, d):
            ell[i, j] = 0.0
    return True


@njit(cache=True)
def _invert_spd_ws(a, out, ell, linv):
    """out = a^-1 via Cholesky with one jitter retry; False if it fails twice.

    `a` is clobbered (jitter may be added); ell/linv are (d, d) workspaces.
    """
    d = a.shape[0]
    if not _chol_small(a, ell):
        trace = 0.0
        for i in range(d):
            trace += a[i, i]
        jitter = JITTER_SCALE * trace / d
        for i in range(d):
            a[i, i] += jitter
        if not _chol_small(a, ell):
            return False
    # Invert L by forward substitution, then out = L^-T L^-1.
    for i in range(d):
        for j in range(d):
            linv[i, j] = 0.0
    for i in range(d):
        linv[i, i] = 1.0 / ell[i, i]
        for j in range(i):
            acc = 0.0
            for k in range(j, i):
                acc -= ell[i, k] * linv[k, j]
            linv[i, j] = acc / ell[i, i]
    for i in range(d):
        for j in range(d):
            acc = 0.0
            for k in range(max(i, j), d):
                acc += linv[k, i] * linv[k, j]
            out[i, j] = acc
    return True


@njit(cache=True)
def _invert_spd_small(a, out):
    d = a.shape[0]
    return _invert_spd_ws(a, out, np.empty((d, d)), np.empty((d, d)))


@njit(cache=True)
def _splitmix64(state):
    z = (state + np.uint64(0x9E3779B97F4A7C15)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@njit(cache=True)
def keyed_minibatch(n, base, out):
    """Uniform without-replacement draw of out.size indices from range(n);
    the randomness is a splitmix64 stream from one 64-bit base key, so the
    draw is a pure function of that key. Result is sorted."""
    size = out.shape[0]
    pool = np.arange(n)
    for i in range(size):
        word = _splitmix64(base + np.uint64(i))
        j = i + int(word % np.uint64(n - i))
        tmp = pool[i]
        pool[i] = pool[j]
        pool[j] = tmp
        out[i] = pool[i]
    out.sort()


@njit(cache=True)
def fa_svi_iteration(x, idx, rho, weight, nu, b_psi,
                     load_mean, load_cov, score_mean, score_cov,
                     eta1, eta2, psi_shape, psi_rate,
                     omega_shape, omega_rate, delta_shape, delta_rate,
                     prev_load, out_msd):
    """One in-place SVI iteration; eta1/eta2 must mirror load_cov/load_mean.

    prev_load carries the previous loading means and is refreshed in place;
    out_msd[0] receives the mean squared change of the loading means.
    """
    p, j = load_mean.shape
    nb = idx.shape[0]

    e_psi = np.empty(p)
    for q in range(p):
        e_psi[q] = psi_shape[q] / psi_rate[q]

    # Shared score covariance given current loadings.
    prec = np.eye(j)
    for q in range(p):
        c = e_psi[q]
        for a in range(j):
            for b in range(a + 1):
                v = c * (load_mean[q, a] * load_mean[q, b] + load_cov[q, a, b])
                prec[a, b] += v
                if a != b:
                    prec[b, a] += v
    ws_a = np.empty((j, j))
    ws_l = np.empty((j, j))
    ws_li = np.empty((j, j))
    scov = np.empty((j, j))
    if not _invert_spd_ws(prec, scov, ws_l, ws_li):
        return 1

    # Minibatch score means and the batch projections sum_i x_ip mu_i.
    wload = np.empty((p, j))
    for q in range(p):
        for a in range(j):
            wload[q, a] = load_mean[q, a] * e_psi[q]
    xb = np.empty((nb, p))
    for m in range(nb):
        i = idx[m]
        for q in range(p):
            xb[m, q] = x[i, q]
    mus = (xb @ wload) @ scov                 # (nb, j) minibatch score means
    proj = xb.T @ mus                         # (p, j)
    second = mus.T @ mus
    for a in range(j):
        for b in range(j):
            second[a, b] += nb * scov[a, b]
    for m in range(nb):
        i = idx[m]
        for a in range(j):
            score_mean[i, a] = mus[m, a]
            for b in range(j):
                score_cov[i, a, b] = scov[a, b]

    # Prior precisions from the current shrinkage families.
    tau = np.empty(j)
    running = 1.0
    for a in range(j):
        running *= delta_shape[a] / delta_rate[a]
        tau[a] = running

    # Noisy psi rates from the pre-blend loadings and minibatch scores.
    fit = mus @ load_mean.T                   # (nb, p)
    rate_hat = np.empty(p)
    for q in range(p):
        rss = 0.0
        for m in range(nb):
            r = xb[m, q] - fit[m, q]
            rss += r * r
        trace = 0.0
        quad = 0.0
        for a in range(j):
            for b in range(j):
                trace += weight * second[a, b] * load_cov[q, a, b]
                quad += load_mean[q, a] * (weight * nb * scov[a, b]) * load_mean[q, b]
        rate_hat[q] = b_psi + 0.5 * (weight * rss + trace + quad)

    # Blend loading naturals and recover (cov, mean) per row.
    hat = np.empty((j, j))
    for q in range(p):
        cw = e_psi[q] * weight
        for a in range(j):
            for b in range(j):
                hat[a, b] = cw * second[a, b]
            hat[a, a] += (omega_shape[q, a] / omega_rate[q, a]) * tau[a]
        for a in range(j):
            for b in range(j):
                eta1[q, a, b] = (1.0 - rho) * eta1[q, a, b] + rho * hat[a, b]
            eta2[q, a] = (1.0 - rho) * eta2[q, a] + rho * cw * proj[q, a]
        for a in range(j):
            for b in range(j):
                ws_a[a, b] = eta1[q, a, b]
        if not _invert_spd_ws(ws_a, load_cov[q], ws_l, ws_li):
            return 1
        for a in range(j):
            acc = 0.0
            for b in range(j):
                acc += load_cov[q, a, b] * eta2[q, b]
            load_mean[q, a] = acc

    # Blend the psi rates.
    for q in range(p):
        psi_rate[q] = (1.0 - rho) * psi_rate[q] + rho * rate_hat[q]
        if psi_rate[q] <= 0.0:
            return 2

    # Local shrinkage (uses tau from before the delta refresh, as in CAVI).
    m2 = np.empty((p, j))
    for q in range(p):
        for a in range(j):
            m2[q, a] = load_mean[q, a] * load_mean[q, a] + load_cov[q, a, a]
            omega_rate[q, a] = 0.5 * (nu + tau[a] * m2[q, a])

    # Global shrinkage, sequential in the column index.
    weights_col = np.zeros(j)
    for q in range(p):
        for a in range(j):
            weights_col[a] += (omega_shape[q, a] / omega_rate[q, a]) * m2[q, a]
    e_delta = np.empty(j)
    for a in range(j):
        e_delta[a] = delta_shape[a] / delta_rate[a]
    for l in range(j):
        acc = 0.0
        running = 1.0
        for a in range(j):
            if a != l:
                running *= e_delta[a]
            if a >= l:
                acc += running * weights_col[a]
        delta_rate[l] = 1.0 + 0.5 * acc
        e_delta[l] = delta_shape[l] / delta_rate[l]

    # Convergence statistic on the loading means.
    acc = 0.0
    for q in range(p):
        for a in range(j):
            dmean = load_mean[q, a] - prev_load[q, a]
            acc += dmean * dmean
            prev_load[q, a] = load_mean[q, a]
    out_msd[0] = acc / (p * j)
    return 0


# ---------------------------------------------------------------------------
# Multi-study SVI pieces
# ---------------------------------------------------------------------------

@njit(cache=True)
def blend_gaussian_stack(eta1, eta2, hat1, hat2, rho, mean_out, cov_out):
    """Blend carried naturals toward the noisy estimates and recover moments."""
    p, d = eta2.shape
    ws_a = np.empty((d, d))
    ws_l = np.empty((d, d))
    ws_li = np.empty((d, d))
    for q in range(p):
        for a in range(d):
            for b in range(d):
                eta1[q, a, b] = (1.0 - rho) * eta1[q, a, b] + rho * hat1[q, a, b]
                ws_a[a, b] = eta1[q, a, b]
            eta2[q, a] = (1.0 - rho) * eta2[q, a] + rho * hat2[q, a]
        if not _invert_spd_ws(ws_a, cov_out[q], ws_l, ws_li):
            return 1
        for a in range(d):
            acc = 0.0
            for b in range(d):
                acc += cov_out[q, a, b] * eta2[q, b]
            mean_out[q, a] = acc
    return 0


@njit(cache=True)
def shrinkage_family(load_mean, load_cov, omega_shape, omega_rate,
                     delta_shape, delta_rate, nu):
    """Coordinate updates for one (omega, delta) family given its loadings."""
    p, j = load_mean.shape
    running = 1.0
    tau = np.empty(j)
    for a in range(j):
        running *= delta_shape[a] / delta_rate[a]
        tau[a] = running
    weights_col = np.zeros(j)
    for q in range(p):
        for a in range(j):
            m2 = load_mean[q, a] * load_mean[q, a] + load_cov[q, a, a]
            omega_rate[q, a] = 0.5 * (nu + tau[a] * m2)
            weights_col[a] += (omega_shape[q, a] / omega_rate[q, a]) * m2
    e_delta = np.empty(j)
    for a in range(j):
        e_delta[a] = delta_shape[a] / delta_rate[a]
    for l in range(j):
        acc = 0.0
        running = 1.0
        for a in range(j):
            if a != l:
                running *= e_delta[a]
            if a >= l:
                acc += running * weights_col[a]
        delta_rate[l] = 1.0 + 0.5 * acc
        e_delta[l] = delta_shape[l] / delta_rate[l]


@njit(cache=True)
def msfa_svi_study(x_s, idx, weight, b_psi,
                   phi_mean, phi_cov, lam_mean, lam_cov,
                   f_mean, f_cov, l_mean, l_cov,
                   psi_shape_s, psi_rate_s,
                   omega_sp_shape, omega_sp_rate, delta_sp_shape, delta_sp_rate,
                   lam_hat1, lam_hat2, phi_contrib1, phi_contrib2, rate_hat):
    """Local refresh plus all noisy naturals for one study.

    Fills lam_hat1/lam_hat2 (study-specific loading naturals), the study's
    data contribution to the shared-loading naturals, and the noisy psi
    rates. Scores at the sampled rows are updated in place.
    """
    p, k = phi_mean.shape
    js = lam_mean.shape[1]
    nb = idx.shape[0]

    e_psi = np.empty(p)
    for q in range(p):
        e_psi[q] = psi_shape_s[q] / psi_rate_s[q]

    # Shared per-study score covariances.
    prec_l = np.eye(js)
    for q in range(p):
        c = e_psi[q]
        for a in range(js):
            for b in range(a + 1):
                v = c * (lam_mean[q, a] * lam_mean[q, b] + lam_cov[q, a, b])
                prec_l[a, b] += v
                if a != b:
                    prec_l[b, a] += v
    scov_l = np.empty((js, js))
    if not _invert_spd_small(prec_l, scov_l):
        return 1
    prec_f = np.eye(k)
    for q in range(p):
        c = e_psi[q]
        for a in range(k):
            for b in range(a + 1):
                v = c * (phi_mean[q, a] * phi_mean[q, b] + phi_cov[q, a, b])
                prec_f[a, b] += v
                if a != b:
                    prec_f[b, a] += v
    scov_f = np.empty((k, k))
    if not _invert_spd_small(prec_f, scov_f):
        return 1

    xb = np.empty((nb, p))
    f_old = np.empty((nb, k))
    for m in range(nb):
        i = idx[m]
        for q in range(p):
            xb[m, q] = x_s[i, q]
        for a in range(k):
            f_old[m, a] = f_mean[i, a]

    wlam = np.empty((p, js))
    for q in range(p):
        for a in range(js):
            wlam[q, a] = lam_mean[q, a] * e_psi[q]
    wphi = np.empty((p, k))
    for q in range(p):
        for a in range(k):
            wphi[q, a] = phi_mean[q, a] * e_psi[q]

    # Study-specific scores first (using the stored shared scores), then the
    # shared scores with the refreshed study-specific means.
    mul = ((xb - f_old @ phi_mean.T) @ wlam) @ scov_l      # (nb, js)
    muf = ((xb - mul @ lam_mean.T) @ wphi) @ scov_f        # (nb, k)
    for m in range(nb):
        i = idx[m]
        for a in range(js):
            l_mean[i, a] = mul[m, a]
            for b in range(js):
                l_cov[i, a, b] = scov_l[a, b]
        for a in range(k):
            f_mean[i, a] = muf[m, a]
            for b in range(k):
                f_cov[i, a, b] = scov_f[a, b]

    second_l = mul.T @ mul
    for a in range(js):
        for b in range(js):
            second_l[a, b] += nb * scov_l[a, b]
    second_f = muf.T @ muf
    for a in range(k):
        for b in range(k):
            second_f[a, b] += nb * scov_f[a, b]

    # Study-specific loading naturals.
    tau = np.empty(js)
    running = 1.0
    for a in range(js):
        running *= delta_sp_shape[a] / delta_sp_rate[a]
        tau[a] = running
    resid_l = xb - muf @ phi_mean.T
    proj_l = resid_l.T @ mul                                # (p, js)
    for q in range(p):
        cw = e_psi[q] * weight
        for a in range(js):
            for b in range(js):
                lam_hat1[q, a, b] = cw * second_l[a, b]
            lam_hat1[q, a, a] += (omega_sp_shape[q, a] / omega_sp_rate[q, a]) * tau[a]
            lam_hat2[q, a] = cw * proj_l[q, a]

    # Contribution to the shared loading naturals.
    resid_f = xb - mul @ lam_mean.T
    proj_f = resid_f.T @ muf                                # (p, k)
    for q in range(p):
        cw = e_psi[q] * weight
        for a in range(k):
            for b in range(k):
                phi_contrib1[q, a, b] += cw * second_f[a, b]
            phi_contrib2[q, a] += cw * proj_f[q, a]

    # Noisy psi rates.
    fit = muf @ phi_mean.T + mul @ lam_mean.T
    for q in range(p):
        rss = 0.0
        for m in range(nb):
            r = xb[m, q] - fit[m, q]
            rss += r * r
        quad_phi = 0.0
        tr_phi = 0.0
        for a in range(k):
            for b in range(k):
                tr_phi += weight * second_f[a, b] * phi_cov[q, a, b]
                quad_phi += phi_mean[q, a] * (weight * nb * scov_f[a, b]) * phi_mean[q, b]
        quad_lam = 0.0
        tr_lam = 0.0
        for a in range(js):
            for b in range(js):
                tr_lam += weight * second_l[a, b] * lam_cov[q, a, b]
                quad_lam += lam_mean[q, a] * (weight * nb * scov_l[a, b]) * lam_mean[q, b]
        rate_hat[q] = b_psi + 0.5 * (weight * rss + quad_phi + quad_lam + tr_phi + tr_lam)
    return 0
