"""Spatial Fay-Herriot model fitted by restricted maximum likelihood.

Model for D domains::

    y = X beta + v + e,   e ~ N(0, diag(psi)),   v = rho W v + tau,   tau ~ N(0, sigma2 I)

so ``Cov(v) = sigma2 [(I - rho W)^T (I - rho W)]^{-1}``. The EBLUP, its
second-order MSE approximation (g1 + g2 + 2 g3), coefficients of variation
and standard-error ratios are computed from the REML fit.
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import linalg, optimize

from .errors import DomainError, SingularityError

ROW_SUM_TOL = 1e-9


def row_standardize(adjacency: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-standardize a symmetric 0/1 adjacency matrix.

    Returns ``(W, isolated)``; domains without neighbours keep an all-zero row
    and are marked in the boolean ``isolated`` mask.
    """
    a = np.asarray(adjacency, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DomainError("adjacency must be a square matrix")
    if not np.isin(a, (0.0, 1.0)).all():
        raise DomainError("adjacency entries must be 0 or 1")
    if np.any(np.diag(a) != 0):
        raise DomainError("adjacency has self-loops on the diagonal")
    if not np.array_equal(a, a.T):
        raise DomainError("adjacency is not symmetric")
    deg = a.sum(axis=1)
    isolated = deg == 0
    W = np.divide(a, deg[:, None], out=np.zeros_like(a), where=~isolated[:, None])
    return W, isolated


@dataclass(frozen=True)
class AreaLevelData:
    """Direct estimates, their variances, covariates and proximity for D domains.

    ``psi`` may contain zeros at construction (simulated noiseless data) but
    fitting requires it to be strictly positive.
    """

    domains: tuple
    y: np.ndarray
    psi: np.ndarray
    X: np.ndarray
    W: np.ndarray
    covariate_names: tuple[str, ...] = ()
    excluded: tuple = ()

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        psi = np.asarray(self.psi, dtype=float)
        X = np.asarray(self.X, dtype=float)
        W = np.asarray(self.W, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        D = len(self.domains)
        if y.shape != (D,) or psi.shape != (D,) or X.shape[0] != D or W.shape != (D, D):
            raise DomainError("area-level arrays are not aligned with the domain list")
        if not (np.isfinite(y).all() and np.isfinite(psi).all() and np.isfinite(X).all()):
            raise DomainError("area-level data contain non-finite values")
        if np.any(psi < 0):
            raise DomainError("direct variances must be nonnegative")
        if np.any(W < 0) or np.any(np.diag(W) != 0):
            raise DomainError("W must be nonnegative with a zero diagonal")
        rs = W.sum(axis=1)
        bad = ~((np.abs(rs - 1) <= ROW_SUM_TOL) | (rs == 0))
        if bad.any():
            raise DomainError(f"W is not row-standardized (row {int(np.argmax(bad))})")
        if np.linalg.matrix_rank(X) < X.shape[1]:
            raise DomainError("design matrix X is not of full column rank")
        for name, arr in (("y", y), ("psi", psi), ("X", X), ("W", W)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "domains", tuple(self.domains))

    @property
    def n_domains(self) -> int:
        return len(self.domains)

    @property
    def isolated(self) -> tuple:
        rs = self.W.sum(axis=1)
        return tuple(d for d, s in zip(self.domains, rs) if s == 0)

    def permuted(self, order: Sequence[int]) -> "AreaLevelData":
        idx = np.asarray(order)
        return replace(
            self,
            domains=tuple(self.domains[i] for i in idx),
            y=self.y[idx],
            psi=self.psi[idx],
            X=self.X[idx],
            W=self.W[np.ix_(idx, idx)],
        )


@dataclass(frozen=True)
class FitOptions:
    grid_size: int = 15
    rho_bound: float = 0.999
    max_iter: int = 2000
    xatol: float = 1e-8
    fatol: float = 1e-11
    boundary_tol: float = 1e-6


@dataclass
class SpatialFHFit:
    domains: tuple
    beta: np.ndarray
    sigma2: float
    rho: float
    eblup: np.ndarray
    mse: np.ndarray
    g1: np.ndarray
    g2: np.ndarray
    g3: np.ndarray
    reml_loglik: float
    fisher_info: np.ndarray
    converged: bool
    iterations: int
    flags: tuple[str, ...] = field(default=())


def sar_covariance(rho: float, W: np.ndarray, sigma2: float) -> np.ndarray:
    """Covariance ``sigma2 [(I - rho W)^T (I - rho W)]^{-1}`` of a SAR(1) process."""
    if not -1.0 < rho < 1.0:
        raise DomainError(f"rho must lie in (-1, 1), got {rho}")
    if sigma2 < 0:
        raise DomainError(f"sigma2 must be nonnegative, got {sigma2}")
    W = np.asarray(W, dtype=float)
    D = W.shape[0]
    if sigma2 == 0:
        return np.zeros((D, D))
    B = np.eye(D) - rho * W
    try:
        cf = linalg.cho_factor(B.T @ B, lower=True)
    except linalg.LinAlgError as exc:
        raise SingularityError(f"I - rho W is singular at rho={rho}") from exc
    diag = np.diag(cf[0])
    if diag.min() <= diag.max() * 1e-8:
        raise SingularityError(f"I - rho W is numerically singular at rho={rho}")
    C = linalg.cho_solve(cf, np.eye(D))
    G = sigma2 * C
    return 0.5 * (G + G.T)


def _sar_precision_derivative(rho: float, W: np.ndarray) -> np.ndarray:
    # d/drho of (I - rho W)^T (I - rho W)
    return 2.0 * rho * (W.T @ W) - W - W.T


class RemlObjective:
    """Restricted log-likelihood of (sigma2, rho) for fixed data.

    Uses ``V^{-1} = B^T (sigma2 I + B Psi B^T)^{-1} B`` with ``B = I - rho W``
    and ``log|V| = log|sigma2 I + B Psi B^T| - 2 log|det B|``.
    """

    def __init__(self, data: AreaLevelData):
        if np.any(data.psi <= 0):
            raise DomainError("direct variances must be strictly positive for fitting")
        self.data = data
        self.D, self.p = data.X.shape
        self._eig = np.linalg.eigvals(data.W)
        self._const = (self.D - self.p) * np.log(2.0 * np.pi)
        self.n_evals = 0

    def _logdet_B(self, rho: float) -> float:
        return float(np.sum(np.log(np.abs(1.0 - rho * self._eig))))

    def __call__(self, sigma2: float, rho: float) -> float:
        self.n_evals += 1
        d = self.data
        B = np.eye(self.D) - rho * d.W
        M = (B * d.psi) @ B.T
        M[np.diag_indices_from(M)] += sigma2
        try:
            cf = linalg.cho_factor(M, lower=True)
        except linalg.LinAlgError:
            return -np.inf
        logdet_V = 2.0 * np.sum(np.log(np.diag(cf[0]))) - 2.0 * self._logdet_B(rho)
        BX = B @ d.X
        By = B @ d.y
        MiBX = linalg.cho_solve(cf, BX)
        MiBy = linalg.cho_solve(cf, By)
        XtVX = BX.T @ MiBX
        XtVy = BX.T @ MiBy
        try:
            cx = linalg.cho_factor(XtVX, lower=True)
        except linalg.LinAlgError:
            return -np.inf
        logdet_X = 2.0 * np.sum(np.log(np.diag(cx[0])))
        beta = linalg.cho_solve(cx, XtVy)
        yPy = By @ MiBy - XtVy @ beta
        return float(-0.5 * (self._const + logdet_V + logdet_X + yPy))

    def grid(self, sigma2_values, rho_values) -> np.ndarray:
        """Evaluate the objective on a grid; one eigendecomposition per rho value."""
        d = self.data
        s2 = np.asarray(sigma2_values, dtype=float)
        out = np.empty((len(s2), len(rho_values)))
        for j, rho in enumerate(rho_values):
            B = np.eye(self.D) - rho * d.W
            K = (B * d.psi) @ B.T
            lam, Q = np.linalg.eigh(0.5 * (K + K.T))
            QBX = Q.T @ (B @ d.X)
            QBy = Q.T @ (B @ d.y)
            ldB = self._logdet_B(rho)
            for i, s in enumerate(s2):
                w = 1.0 / (lam + s)
                logdet_V = np.sum(np.log(lam + s)) - 2.0 * ldB
                XtVX = (QBX * w[:, None]).T @ QBX
                XtVy = QBX.T @ (w * QBy)
                sign, logdet_X = np.linalg.slogdet(XtVX)
                beta = np.linalg.solve(XtVX, XtVy)
                yPy = QBy @ (w * QBy) - XtVy @ beta
                out[i, j] = -0.5 * (self._const + logdet_V + logdet_X + yPy)
        self.n_evals += out.size
        return out


def gls_beta(sigma2: float, rho: float, data: AreaLevelData) -> np.ndarray:
    V = sar_covariance(rho, data.W, sigma2) + np.diag(data.psi)
    cf = linalg.cho_factor(V, lower=True)
    ViX = linalg.cho_solve(cf, data.X)
    return np.linalg.solve(data.X.T @ ViX, ViX.T @ data.y)


def reml_loglik(sigma2: float, rho: float, data: AreaLevelData) -> float:
    return RemlObjective(data)(sigma2, rho)


def _sigma2_scale(data: AreaLevelData) -> float:
    beta, *_ = np.linalg.lstsq(data.X, data.y, rcond=None)
    resid = data.y - data.X @ beta
    return float(max(np.var(resid), np.mean(data.psi), 1e-12))


def reml_fit(data: AreaLevelData, opts: FitOptions | None = None) -> SpatialFHFit:
    """Fit the spatial Fay-Herriot model by REML.

    A coarse grid over (sigma2, rho) seeds a bounded Nelder-Mead search,
    restarted once from its own optimum. ``sigma2`` is pinned to 0 when the
    likelihood is no better in the interior, and the fit is flagged.
    """
    opts = opts or FitOptions()
    D, p = data.X.shape
    if D <= p + 2:
        raise DomainError(f"need more than p + 2 = {p + 2} domains, got {D}")
    obj = RemlObjective(data)
    scale = _sigma2_scale(data)
    rb = opts.rho_bound

    s_grid = np.linspace(0.0, 2.0 * scale, opts.grid_size)
    r_grid = np.linspace(-0.95 * rb, 0.95 * rb, opts.grid_size)
    ll = obj.grid(s_grid, r_grid)
    i, j = np.unravel_index(np.nanargmax(ll), ll.shape)
    x0 = np.array([s_grid[i], r_grid[j]])
    step = np.array([s_grid[1] - s_grid[0], r_grid[1] - r_grid[0]])

    def negll(x):
        return -obj(max(x[0], 0.0), float(np.clip(x[1], -rb, rb)))

    bounds = [(0.0, None), (-rb, rb)]
    converged = True
    iterations = 0
    for _ in range(2):
        simplex = np.array([x0, x0 + [step[0], 0.0], x0 + [0.0, step[1]]])
        simplex[:, 0] = np.maximum(simplex[:, 0], 0.0)
        simplex[:, 1] = np.clip(simplex[:, 1], -rb, rb)
        res = optimize.minimize(
            negll, x0, method="Nelder-Mead", bounds=bounds,
            options={"initial_simplex": simplex, "maxiter": opts.max_iter,
                     "xatol": opts.xatol, "fatol": opts.fatol},
        )
        iterations += int(res.nit)
        converged = bool(res.success)
        x0 = res.x
        step = step / 10.0
    sigma2, rho = max(float(x0[0]), 0.0), float(np.clip(x0[1], -rb, rb))
    loglik = obj(sigma2, rho)

    flags = []
    if sigma2 <= opts.boundary_tol * scale:
        at_zero = obj(0.0, rho)
        if at_zero >= loglik - opts.fatol * max(1.0, abs(loglik)):
            sigma2, loglik = 0.0, at_zero
            flags.append("sigma2_boundary")
    if abs(rho) >= rb - 1e-6:
        flags.append("rho_boundary")
    if data.isolated:
        flags.append("isolated_domains")
    if not converged:
        flags.append("not_converged")

    beta = gls_beta(sigma2, rho, data)
    fit = SpatialFHFit(
        domains=data.domains, beta=beta, sigma2=sigma2, rho=rho,
        eblup=eblup(beta, sigma2, rho, data),
        mse=np.empty(D), g1=np.empty(D), g2=np.empty(D), g3=np.empty(D),
        reml_loglik=loglik, fisher_info=fisher_information(sigma2, rho, data),
        converged=converged, iterations=iterations, flags=tuple(flags),
    )
    mse, comps, degraded = _mse_components(fit, data)
    fit.mse, (fit.g1, fit.g2, fit.g3) = mse, comps
    if degraded:
        fit.flags = fit.flags + ("degraded_mse",)
    return fit


def eblup(beta: np.ndarray, sigma2: float, rho: float, data: AreaLevelData) -> np.ndarray:
    """``X beta + G V^{-1} (y - X beta)`` at the given parameter values."""
    beta = np.asarray(beta, dtype=float)
    G = sar_covariance(rho, data.W, sigma2)
    V = G + np.diag(data.psi)
    resid = data.y - data.X @ beta
    return data.X @ beta + G @ linalg.solve(V, resid, assume_a="pos")


def fisher_information(sigma2: float, rho: float, data: AreaLevelData) -> np.ndarray:
    """Expected REML information ``0.5 tr(P V_i P V_j)`` for (sigma2, rho)."""
    W = data.W
    C = sar_covariance(rho, W, 1.0)
    V = sigma2 * C + np.diag(data.psi)
    Vi = linalg.inv(V, check_finite=False)
    Vi = 0.5 * (Vi + Vi.T)
    ViX = Vi @ data.X
    P = Vi - ViX @ np.linalg.solve(data.X.T @ ViX, ViX.T)
    dV_rho = -sigma2 * C @ _sar_precision_derivative(rho, W) @ C
    PC = P @ C
    PR = P @ dV_rho
    info = np.empty((2, 2))
    info[0, 0] = 0.5 * np.sum(PC * PC.T)
    info[0, 1] = info[1, 0] = 0.5 * np.sum(PC * PR.T)
    info[1, 1] = 0.5 * np.sum(PR * PR.T)
    return info


def _mse_components(fit: SpatialFHFit, data: AreaLevelData, include_g3: bool = True):
    sigma2, rho = fit.sigma2, fit.rho
    X, W = data.X, data.W
    D = X.shape[0]
    C = sar_covariance(rho, W, 1.0)
    G = sigma2 * C
    V = G + np.diag(data.psi)
    Vi = linalg.inv(V, check_finite=False)
    Vi = 0.5 * (Vi + Vi.T)
    GVi = G @ Vi
    g1 = np.diag(G - GVi @ G).copy()
    A = np.eye(D) - GVi
    AX = A @ X
    Q = np.linalg.inv(X.T @ Vi @ X)
    g2 = np.einsum("ij,jk,ik->i", AX, Q, AX)

    g3 = np.zeros(D)
    degraded = False
    if include_g3:
        info = fit.fisher_info
        try:
            np.linalg.cholesky(info)
            info_inv = np.linalg.inv(info)
        except np.linalg.LinAlgError:
            degraded = True
        else:
            dG = (C, -sigma2 * C @ _sar_precision_derivative(rho, W) @ C)
            L = [A @ dg @ Vi for dg in dG]  # rows are d(b_d^T)/d(theta)
            LV = [l @ V for l in L]
            for a in range(2):
                for b in range(2):
                    g3 += info_inv[a, b] * np.sum(LV[a] * L[b], axis=1)
    g1 = np.maximum(g1, 0.0)
    g2 = np.maximum(g2, 0.0)
    g3 = np.maximum(g3, 0.0)
    return g1 + g2 + 2.0 * g3, (g1, g2, g3), degraded


def eblup_mse(fit: SpatialFHFit, data: AreaLevelData, include_g3: bool = True) -> np.ndarray:
    """Analytic MSE of the EBLUP, ``g1 + g2 + 2 g3``.

    ``g3`` is dropped (and only g1 + g2 returned) when ``include_g3`` is
    False or the Fisher information is not positive definite.
    """
    return _mse_components(fit, data, include_g3)[0]


def cv_eblup(fit: SpatialFHFit) -> np.ndarray:
    """Per-domain CV of the EBLUP in percent; NaN where the EBLUP is zero."""
    with np.errstate(divide="ignore", invalid="ignore"):
        cv = 100.0 * np.sqrt(fit.mse) / fit.eblup
    return np.where(fit.eblup == 0, np.nan, cv)


def ser(direct, fit: SpatialFHFit) -> np.ndarray:
    """Standard-error ratio sqrt(v(direct)) / sqrt(MSE(EBLUP)) per domain.

    ``direct`` is either an array of direct variances aligned with
    ``fit.domains`` or a sequence of :class:`DomainEstimate` matched by id.
    Domains with zero MSE get ``inf``.
    """
    if isinstance(direct, np.ndarray) or (len(direct) and np.isscalar(direct[0])):
        var = np.asarray(direct, dtype=float)
    else:
        by_id = {e.domain_id: e.variance_of_mean for e in direct}
        var = np.array([by_id[d] for d in fit.domains], dtype=float)
    with np.errstate(divide="ignore"):
        return np.sqrt(var) / np.sqrt(fit.mse)


def _bootstrap_replicate(args):
    data, beta, sigma2, rho, seed, opts = args
    rng = np.random.default_rng(seed)
    D = data.n_domains
    G = sar_covariance(rho, data.W, sigma2)
    v = np.linalg.cholesky(G + 1e-14 * np.eye(D)) @ rng.standard_normal(D) if sigma2 > 0 else np.zeros(D)
    Z = data.X @ beta + v
    y = Z + np.sqrt(data.psi) * rng.standard_normal(D)
    fit = reml_fit(replace(data, y=y), opts)
    return (fit.eblup - Z) ** 2


def bootstrap_mse(
    fit: SpatialFHFit,
    data: AreaLevelData,
    n_boot: int = 200,
    seed: int = 0,
    threads: int = 1,
    opts: FitOptions | None = None,
) -> np.ndarray:
    """Parametric-bootstrap MSE of the EBLUP under the fitted model.

    Replicate seeds are spawned from ``seed`` so the result does not depend
    on ``threads``.
    """
    seeds = np.random.SeedSequence(seed).spawn(n_boot)
    jobs = [(data, fit.beta, fit.sigma2, fit.rho, s, opts) for s in seeds]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            sq = list(ex.map(_bootstrap_replicate, jobs))
    else:
        sq = [_bootstrap_replicate(j) for j in jobs]
    return np.mean(sq, axis=0)
