"""Independent reference implementations used as test oracles.

These are written for clarity, not speed: plain loops, explicit inverses and
dense matrices, sharing no code with the package beyond its data types.
"""
import math

import numpy as np

from saekit.frame import Domain, EstimationUnit, PlotVisit, Stratum, build_frame


# -- survey frames ------------------------------------------------------------------

def random_small_frame(rng, max_units=5, max_strata=4, max_plots=12, year=2019):
    """A random single-panel frame plus the raw nested lists it was built from.

    Returns ``(frame, domain, raw)`` where ``raw`` maps unit id to
    ``(unit_area, [(stratum_area, [responses...]), ...])``.
    """
    raw = {}
    units, strata, visits = [], [], []
    for u in range(int(rng.integers(1, max_units + 1))):
        uid = f"U{u}"
        rows = []
        for h in range(int(rng.integers(1, max_strata + 1))):
            sid = f"{uid}S{h}"
            area = float(rng.uniform(10.0, 5000.0))
            ys = [float(v) for v in rng.gamma(2.0, 50.0, size=int(rng.integers(1, max_plots + 1)))]
            rows.append((area, ys))
            strata.append(Stratum(sid, uid, area))
            visits += [PlotVisit(f"{sid}P{i}", sid, year, y) for i, y in enumerate(ys)]
        unit_area = math.fsum(a for a, _ in rows)
        raw[uid] = (unit_area, rows)
        units.append(EstimationUnit(uid, unit_area))
    frame = build_frame(units, strata, visits)
    domain = Domain("D", tuple(raw), math.fsum(a for a, _ in raw.values()))
    return frame, domain, raw


def post_stratified_oracle(unit_area, rows):
    """Mean and variance of the post-stratified estimator for one unit."""
    n = sum(len(ys) for _, ys in rows)
    mean = 0.0
    va = vb = 0.0
    for area, ys in rows:
        w = area / unit_area
        nh = len(ys)
        ybar = sum(ys) / nh
        s2 = sum((y - ybar) ** 2 for y in ys) / (nh - 1) if nh > 1 else 0.0
        mean += w * ybar
        va += w * s2
        vb += (1.0 - w) * s2
    return mean, va / n + vb / n**2


def domain_oracle(raw, unit_ids=None):
    """Domain mean, variance of mean and area by summing unit totals."""
    unit_ids = list(raw) if unit_ids is None else unit_ids
    total = var_total = area = 0.0
    for uid in unit_ids:
        a, rows = raw[uid]
        m, v = post_stratified_oracle(a, rows)
        total += a * m
        var_total += a * a * v
        area += a
    return total / area, var_total / area**2, area


# -- SAR and Fay-Herriot --------------------------------------------------------------

def ring3_sar_covariance(rho, sigma2):
    """sigma2 * [(I - rho W)^T (I - rho W)]^{-1} for the 3-ring by cofactor expansion.

    On the 3-ring every off-diagonal of the row-standardized W is 1/2, so
    ``M = (I - rho W)^T (I - rho W)`` has constant diagonal ``a`` and constant
    off-diagonal ``b``.
    """
    a = 1.0 + rho**2 / 2.0
    b = -rho + rho**2 / 4.0
    M = [[a, b, b], [b, a, b], [b, b, a]]

    def minor(i, j):
        r = [k for k in range(3) if k != i]
        c = [k for k in range(3) if k != j]
        return M[r[0]][c[0]] * M[r[1]][c[1]] - M[r[0]][c[1]] * M[r[1]][c[0]]

    det = sum((-1) ** j * M[0][j] * minor(0, j) for j in range(3))
    return np.array([[sigma2 * (-1) ** (i + j) * minor(j, i) / det for j in range(3)] for i in range(3)])


def dense_reml_loglik(sigma2, rho, y, X, W, psi):
    """Restricted log-likelihood computed with explicit inverses."""
    D, p = X.shape
    B = np.eye(D) - rho * W
    V = sigma2 * np.linalg.inv(B.T @ B) + np.diag(psi)
    Vi = np.linalg.inv(V)
    XtViX = X.T @ Vi @ X
    P = Vi - Vi @ X @ np.linalg.inv(XtViX) @ X.T @ Vi
    return -0.5 * ((D - p) * math.log(2 * math.pi) + np.linalg.slogdet(V)[1]
                   + np.linalg.slogdet(XtViX)[1] + y @ P @ y)


def grid_refined_optimum(y, X, W, psi, s2_max, n=41, levels=5, rho_bound=0.999):
    """Maximize ``dense_reml_loglik`` by repeatedly zooming a dense grid."""
    s_lo, s_hi, r_lo, r_hi = 0.0, s2_max, -rho_bound, rho_bound
    best = (-np.inf, 0.0, 0.0)
    for _ in range(levels):
        for s in np.linspace(s_lo, s_hi, n):
            for r in np.linspace(r_lo, r_hi, n):
                ll = dense_reml_loglik(s, r, y, X, W, psi)
                if ll > best[0]:
                    best = (ll, s, r)
        ds, dr = 2 * (s_hi - s_lo) / (n - 1), 2 * (r_hi - r_lo) / (n - 1)
        _, s, r = best
        s_lo, s_hi = max(0.0, s - ds), s + ds
        r_lo, r_hi = max(-rho_bound, r - dr), min(rho_bound, r + dr)
    return best


def nonspatial_fh_oracle(y, X, psi, sigma2):
    """Scalar non-spatial Fay-Herriot: GLS beta, shrinkage EBLUP, g1 and g2."""
    D, p = X.shape
    A = np.zeros((p, p))
    b = np.zeros(p)
    for d in range(D):
        w = 1.0 / (sigma2 + psi[d])
        A += w * np.outer(X[d], X[d])
        b += w * X[d] * y[d]
    beta = np.linalg.solve(A, b)
    Ainv = np.linalg.inv(A)
    eb, g1, g2 = np.empty(D), np.empty(D), np.empty(D)
    for d in range(D):
        gamma = sigma2 / (sigma2 + psi[d])
        eb[d] = gamma * y[d] + (1 - gamma) * X[d] @ beta
        g1[d] = gamma * psi[d]
        g2[d] = (1 - gamma) ** 2 * X[d] @ Ainv @ X[d]
    return beta, eb, g1, g2


def row_normalize_oracle(adj):
    D = len(adj)
    W = np.zeros((D, D))
    for i in range(D):
        k = sum(adj[i])
        for j in range(D):
            if k:
                W[i][j] = adj[i][j] / k
    return W


# -- unit-level model ---------------------------------------------------------------

def gaussian_trend_posterior(frame, scales, alpha_prior=(50.0, 250.0), beta_prior=(0.0, 100.0)):
    """Exact posterior mean and covariance of (alpha, beta) with all SDs known.

    Stratum and plot deviations are integrated out into the marginal
    covariance of y, leaving a two-parameter Gaussian linear model.
    """
    visits = frame.visits
    t = np.array([frame.t(v) for v in visits], dtype=float)
    y = np.array([v.response for v in visits])
    strata = sorted({v.stratum_id for v in visits})
    plots = sorted({v.plot_id for v in visits})
    Zh = np.array([[v.stratum_id == s for s in strata] for v in visits], dtype=float)
    Zp = np.array([[v.plot_id == p for p in plots] for v in visits], dtype=float)
    Zht, Zpt = Zh * t[:, None], Zp * t[:, None]
    V = (scales["sigma_alpha_h"] ** 2 * Zh @ Zh.T + scales["sigma_beta_h"] ** 2 * Zht @ Zht.T
         + scales["sigma_alpha_hi"] ** 2 * Zp @ Zp.T + scales["sigma_beta_hi"] ** 2 * Zpt @ Zpt.T
         + scales["sigma_eps"] ** 2 * np.eye(len(y)))
    X = np.column_stack([np.ones_like(t), t])
    prior_prec = np.diag([alpha_prior[1] ** -2, beta_prior[1] ** -2])
    prior_mean = np.array([alpha_prior[0], beta_prior[0]])
    Vi = np.linalg.inv(V)
    cov = np.linalg.inv(prior_prec + X.T @ Vi @ X)
    mean = cov @ (prior_prec @ prior_mean + X.T @ Vi @ y)
    return mean, cov


def weighted_sum_oracle(alpha, alpha_h, areas):
    """sum_h A_h (alpha + alpha_h) / sum_h A_h for one draw, by plain loops."""
    num = 0.0
    for a_h, A_h in zip(alpha_h, areas):
        num += A_h * (alpha + a_h)
    return num / sum(areas)


def batch_means_se(x, n_batches=30):
    """Monte Carlo standard error of the mean of ``x`` by non-overlapping batch means."""
    x = np.asarray(x, dtype=float)
    m = len(x) // n_batches
    b = x[: m * n_batches].reshape(n_batches, m).mean(axis=1)
    return float(b.std(ddof=1) / math.sqrt(n_batches))
