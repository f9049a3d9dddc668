"""Variance-component and mean estimation stages.

Every likelihood here is the standard Gaussian negative log-density (a half
on both the quadratic and the log-determinant term). Optimization runs over
log-parameters with L-BFGS and analytic gradients; objectives are divided by
the number of observations so that tolerances do not depend on data size.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import minimize

from .core_types import ExpressionDataset, ModelParams, MotifLoadings
from .ortho import numerical_rank, sandwich_logdet
from .workspace import FitWorkspace, GroupEigen, MotifEigen, SigmaCache

log = logging.getLogger(__name__)
LOG2PI = np.log(2.0 * np.pi)


class ConvergenceError(RuntimeError):
    """The optimizer stopped without meeting the tolerances."""


@dataclass(frozen=True)
class OptimizerConfig:
    """Stopping rules for the log-parameter quasi-Newton optimizer.

    ``grad_tol`` bounds the sup-norm of the gradient of the per-observation
    objective with respect to log-parameters; ``rel_tol`` bounds the relative
    objective change between iterations.
    """

    max_iters: int = 500
    grad_tol: float = 1e-6
    rel_tol: float = 1e-9
    log_parameterization: bool = True

    def __post_init__(self):
        if self.grad_tol <= 0 or self.rel_tol <= 0 or self.max_iters < 1:
            raise ValueError("tolerances and iteration limit must be positive")


@dataclass
class OptimReport:
    """Summary of one optimizer run, recorded in the run log."""

    objective: float
    n_iter: int
    grad_norm: float
    message: str
    history: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"objective": self.objective, "n_iter": self.n_iter,
                "grad_norm": self.grad_norm, "message": self.message,
                "history": list(self.history)}


def minimize_log(fun: Callable[[np.ndarray], tuple[float, np.ndarray]], x0: np.ndarray,
                 cfg: OptimizerConfig, what: str) -> tuple[np.ndarray, OptimReport]:
    """Minimize ``fun`` (returning value and gradient) with L-BFGS."""
    history = []

    def callback(intermediate_result):
        history.append(float(intermediate_result.fun))

    res = minimize(fun, x0, jac=True, method="L-BFGS-B", callback=callback,
                   options={"maxiter": cfg.max_iters, "gtol": cfg.grad_tol,
                            "ftol": cfg.rel_tol, "maxcor": 20})
    gnorm = float(np.max(np.abs(res.jac))) if res.jac.size else 0.0
    report = OptimReport(float(res.fun), int(res.nit), gnorm, str(res.message), history)
    if not res.success:
        if res.nit >= cfg.max_iters:
            raise ConvergenceError(f"{what}: no convergence after {res.nit} iterations "
                                   f"(gradient sup-norm {gnorm:.3g})")
        # line-search stalls at the floating-point floor of the objective are
        # accepted when the gradient is already small
        if gnorm > np.sqrt(cfg.grad_tol):
            raise ConvergenceError(f"{what}: {res.message} (gradient sup-norm {gnorm:.3g})")
        log.debug("%s: %s, gradient sup-norm %.3g", what, res.message, gnorm)
    return res.x, report


# ------------------------------------------------------------ noise (D) REML

def _group_aggregate(gram: np.ndarray, group_of: np.ndarray, g: int):
    E = np.zeros((g, gram.shape[0]))
    E[group_of, np.arange(gram.shape[0])] = 1.0
    return E @ np.diag(gram), E @ gram @ E.T


def _sandwich_objective(a, Wg, sizes, sigma, mult):
    """``1/2 [tr(P gram) + mult ln det(H D H^T)]`` and its gradient in ``sigma``.

    The Gram matrix enters only through its group aggregates ``a`` (diagonal
    sums) and ``Wg`` (block sums).
    """
    x = 1.0 / sigma
    omega = sizes @ x
    quad = x @ Wg @ x
    tr = a @ x - quad / omega
    logdet = sizes @ np.log(sigma) + np.log(omega) - np.log(sizes.sum())
    dtr_dx = a - 2.0 * (Wg @ x) / omega + (quad / omega ** 2) * sizes
    grad = 0.5 * (-(x ** 2) * dtr_dx + mult * (sizes * x - sizes * x ** 2 / omega))
    return 0.5 * (tr + mult * logdet), grad


def reml_negloglik(ws: FitWorkspace, sigma, with_grad: bool = False):
    """Negative REML log-density of the double-centered null-space data.

    The data are ``Q_N^T Y H_n^T`` with ``(p - r)`` rows and ``n - 1`` columns,
    distributed with row covariance ``I`` and column covariance ``H D H^T``.
    """
    sigma = np.asarray(sigma, dtype=float)
    q = ws.p - ws.r
    a, Wg = _group_aggregate(ws.gram_null, ws.group_of, ws.g)
    val, grad = _sandwich_objective(a, Wg, ws.group_sizes.astype(float), sigma, q)
    val += 0.5 * q * (ws.n - 1) * LOG2PI
    return (val, grad) if with_grad else val


def _initial_sigma(ws: FitWorkspace) -> np.ndarray:
    G = ws.gram_null
    n = ws.n
    C = G - G.mean(axis=0, keepdims=True) - G.mean(axis=1, keepdims=True) + G.mean()
    per_sample = np.diag(C) / (ws.p - ws.r) * n / (n - 1)
    sig = np.bincount(ws.group_of, weights=per_sample, minlength=ws.g) / ws.group_sizes
    floor = max(np.mean(per_sample), 1e-12) * 1e-3
    return np.maximum(sig, floor)


def estimate_D(ws: FitWorkspace, dataset: Optional[ExpressionDataset] = None,
               cfg: OptimizerConfig = OptimizerConfig(), report: Optional[dict] = None
               ) -> np.ndarray:
    """REML estimate of the per-group noise variances.

    With a single group the estimate has the closed form
    ``||Q_N^T Y H^T||_F^2 / ((p - r)(n - 1))``.
    """
    if ws.n < 2:
        raise ValueError("at least two samples are required")
    if np.any(ws.group_sizes == 1):
        warnings.warn("groups of size one: their noise variance is pooled across promoters only")
    q = ws.p - ws.r
    if q < 1:
        raise ValueError("loading matrix spans the whole centered promoter space")
    if ws.g == 1:
        G = ws.gram_null
        sigma = np.array([(np.trace(G) - G.sum() / ws.n) / (q * (ws.n - 1))])
        if report is not None:
            report["reml"] = OptimReport(float(reml_negloglik(ws, sigma)), 0, 0.0,
                                          "closed form").to_dict()
        return sigma
    scale = q * (ws.n - 1)
    a, Wg = _group_aggregate(ws.gram_null, ws.group_of, ws.g)
    sizes = ws.group_sizes.astype(float)

    def fun(theta):
        s = np.exp(theta)
        val, grad = _sandwich_objective(a, Wg, sizes, s, q)
        return val / scale, grad * s / scale

    theta, rep = minimize_log(fun, np.log(_initial_sigma(ws)), cfg, "noise REML")
    if report is not None:
        report["reml"] = rep.to_dict()
    return np.exp(theta)


def estimate_mu_p(ws: FitWorkspace, sigma) -> np.ndarray:
    """Minimum-norm promoter intercepts given the noise variances."""
    d = np.asarray(sigma, dtype=float)[ws.group_of]
    v = ws.Y_centered @ (1.0 / d)
    v = v - ws.qc @ (ws.qc.T @ v)
    return ws.row_op.apply_t(v) / np.sum(1.0 / d)


# -------------------------------------------------- activity covariance (Sigma, G)

@dataclass
class SGTerms:
    """Intermediate quantities of the activity-covariance likelihood."""

    value: float
    eig_A: GroupEigen
    eig_B: MotifEigen
    W: np.ndarray
    S: np.ndarray


def sg_negloglik(ws: FitWorkspace, sigma, tau, nu, with_grad: bool = False,
                 cache: Optional[SigmaCache] = None):
    """Negative log-density of ``Y L^{-T}`` given noise, motif and group scales.

    ``L L^T = H D H^T``. The covariance of the whitened data is
    ``A A^T (x) C C^T + I`` with ``C = B Sigma^{1/2}`` and
    ``A = L^{-1} H G^{1/2}``; it is handled through the eigendecompositions of
    ``A^T A`` (structured, see :class:`GroupEigen`) and ``C^T C``.

    Returns the value, or ``(value, grad_tau, grad_nu)`` with raw-parameter
    gradients when ``with_grad`` is set.
    """
    sigma = np.asarray(sigma, dtype=float)
    tau = np.asarray(tau, dtype=float)
    nu = np.asarray(nu, dtype=float)
    cache = cache or ws.sigma_cache(sigma)
    eA = GroupEigen.build(ws.group_of, sigma, nu)
    eB = MotifEigen.build(ws.BtB, tau)
    st = np.sqrt(tau)
    XA = eA.project(cache.Z * np.sqrt(nu[ws.group_of]))
    W = eB.Q.T @ (st[:, None] * XA)
    ab = np.outer(eB.beta, eA.alpha)
    S = 1.0 / (ab + 1.0)
    q = cache.trace - np.sum(W ** 2 * S)
    logdet = np.sum(np.log1p(ab))
    value = 0.5 * (q + logdet + ws.p * (ws.n - 1) * LOG2PI)
    if not with_grad:
        return value
    WS = W * S
    Lam = eB.Q @ WS
    lam_sq = np.sum(Lam ** 2, axis=1)
    back = eA.unproject(Lam)
    nu_sq = np.bincount(ws.group_of, weights=np.sum(back ** 2, axis=0), minlength=ws.g)
    with np.errstate(divide="ignore", invalid="ignore"):
        dq_tau = -lam_sq / tau
        dq_nu = -nu_sq / nu
        beta_side = eB.beta * (S @ eA.alpha)
        dld_tau = (eB.Q ** 2 @ beta_side) / tau
        alpha_side = eA.alpha * (eB.beta @ S)
        dld_nu = (eA.theta @ alpha_side) / nu
    return value, 0.5 * (dq_tau + dld_tau), 0.5 * (dq_nu + dld_nu)


@dataclass
class SigmaGResult:
    tau: np.ndarray
    nu: np.ndarray
    fixed_index: Optional[int]
    report: OptimReport


def pinned_group(sigma) -> int:
    """Group whose activity scale is held fixed: the one with the smallest noise."""
    return int(np.argmin(sigma))


def estimate_sigma_G(ws: FitWorkspace, sigma, cfg: OptimizerConfig = OptimizerConfig(),
                     estimate_tau: bool = True) -> SigmaGResult:
    """Maximum-likelihood motif variances ``tau`` and group scales ``nu``.

    The likelihood depends on ``(Sigma, G)`` only through ``Sigma (x) G``, so
    when ``tau`` is estimated the scale ``nu_j`` of the least noisy group is
    fixed at ``sigma_j / 4``. With ``estimate_tau=False`` the motif variances
    are held at one and every ``nu`` is free.
    """
    sigma = np.asarray(sigma, dtype=float)
    cache = ws.sigma_cache(sigma)
    m, g = ws.m, ws.g
    scale = ws.p * (ws.n - 1)
    nu0 = np.ones(g)
    if estimate_tau:
        j = pinned_group(sigma)
        nu0[j] = sigma[j] / 4.0
        free_nu = np.arange(g) != j
    else:
        j = None
        free_nu = np.ones(g, dtype=bool)

    def unpack(theta):
        if estimate_tau:
            tau = np.exp(theta[:m])
            rest = theta[m:]
        else:
            tau = np.ones(m)
            rest = theta
        nu = nu0.copy()
        nu[free_nu] = np.exp(rest)
        return tau, nu

    def fun(theta):
        tau, nu = unpack(theta)
        val, gt, gn = sg_negloglik(ws, sigma, tau, nu, with_grad=True, cache=cache)
        parts = [gt * tau] if estimate_tau else []
        parts.append((gn * nu)[free_nu])
        return val / scale, np.concatenate(parts) / scale

    x0 = np.concatenate(([np.zeros(m)] if estimate_tau else []) + [np.log(nu0[free_nu])])
    theta, rep = minimize_log(fun, x0, cfg, "activity covariance ML")
    tau, nu = unpack(theta)
    return SigmaGResult(tau, nu, j, rep)


# ----------------------------------------------------------- motif means

def estimate_mu_m(ws: FitWorkspace, params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Generalized least-squares motif means and their information matrix.

    Each sample column of the intercept-corrected data is distributed as
    ``N(B mu_m, nu_i B Sigma B^T + sigma_i I)``; the columns are independent.
    Every term is assembled in motif space from ``B^T B`` and the eigenpairs
    of ``Sigma^{1/2} B^T B Sigma^{1/2}``.

    Returns
    -------
    mu_m : ndarray, shape (m,)
    info : ndarray, shape (m, m)
        Fisher information of ``mu_m`` (inverse of its asymptotic covariance).
    """
    sigma, nu, tau = params.sigma, params.nu, params.tau
    eB = MotifEigen.build(ws.BtB, tau)
    Aq = (ws.BtB * np.sqrt(tau)[None, :]) @ eB.Q
    sizes = ws.group_sizes.astype(float)
    shift = ws.B.T @ ws.row_op.apply(params.mu_p)
    bx = ws.BtY - shift[:, None]
    bs = np.stack([bx[:, ws.group_of == k].sum(axis=1) for k in range(ws.g)], axis=1)
    H = 1.0 / (sigma[:, None] / nu[:, None] + eB.beta[None, :])
    weights = (sizes / sigma) @ H
    info = np.sum(sizes / sigma) * ws.BtB - (Aq * weights) @ Aq.T
    proj = eB.Q.T @ (np.sqrt(tau)[:, None] * bs)
    rhs = bs @ (1.0 / sigma) - Aq @ np.sum(H.T * proj / sigma[None, :], axis=1)
    info = 0.5 * (info + info.T)
    if numerical_rank(np.linalg.svd(info, compute_uv=False), info.shape) < ws.m:
        raise np.linalg.LinAlgError("motif-mean system is singular: B^T B is rank deficient")
    return np.linalg.solve(info, rhs), info


# ------------------------------------------------------ promoter variances (K)

def _complement_basis(Bd: np.ndarray) -> np.ndarray:
    """Orthonormal basis of ``span{1, columns of B}``."""
    X = np.hstack([np.ones((Bd.shape[0], 1)), Bd])
    U, s, _ = np.linalg.svd(X, full_matrices=False)
    return U[:, :numerical_rank(s, X.shape)]


def promoter_negloglik(Yd: np.ndarray, W: np.ndarray, group_of: np.ndarray, k, sigma,
                       with_grad: bool = False):
    """Negative REML log-density for diagonal promoter and noise variances.

    The data ``F Y H_n^T`` use every semi-orthogonal ``F`` whose rows are
    orthogonal to the columns of ``W`` (constants and loadings); their row
    covariance ``F K F^T`` is handled through
    ``F^T (F K F^T)^{-1} F = K^{-1} - K^{-1} W (W^T K^{-1} W)^{-1} W^T K^{-1}``
    and ``det(F K F^T) = det(K) det(W^T K^{-1} W)``.
    """
    k = np.asarray(k, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    P, n = Yd.shape
    q = P - W.shape[1]
    g = sigma.size
    Wk = W / k[:, None]
    GW = W.T @ Wk
    cho = np.linalg.cholesky(GW)
    Yk = Yd / k[:, None]
    T = W.T @ Yk
    GinvT = np.linalg.solve(GW, T)
    NK = Yd.T @ Yk - T.T @ GinvT
    NK = 0.5 * (NK + NK.T)
    a, Wg = _group_aggregate(NK, group_of, g)
    sizes = np.bincount(group_of, minlength=g).astype(float)
    half, grad_sigma = _sandwich_objective(a, Wg, sizes, sigma, q)
    ld_gw = 2.0 * np.sum(np.log(np.diag(cho)))
    value = half + 0.5 * (n - 1) * (np.sum(np.log(k)) + ld_gw) + 0.5 * q * (n - 1) * LOG2PI
    if not with_grad:
        return value
    lev = np.sum(W * np.linalg.solve(GW, W.T).T, axis=1)
    R = Yk - (W @ GinvT) / k[:, None]
    d = sigma[group_of]
    x = 1.0 / d
    Rx = R @ x
    quad = (R ** 2) @ x - Rx ** 2 / x.sum()
    grad_k = 0.5 * ((n - 1) * (1.0 / k - lev / k ** 2) - quad)
    return value, grad_k, grad_sigma


@dataclass
class PromoterVarianceResult:
    promoter_var: np.ndarray
    sigma: np.ndarray
    report: OptimReport
    excluded: np.ndarray


def estimate_promoter_variances(dataset: ExpressionDataset, loadings: MotifLoadings,
                                cfg: OptimizerConfig = OptimizerConfig()
                                ) -> PromoterVarianceResult:
    """REML estimate of per-promoter noise multipliers ``K``.

    The noise of promoter ``i`` in group ``k`` has variance ``K_i sigma_k``.
    ``K`` and ``sigma`` share one scale; ``sigma`` is normalized to unit
    geometric mean so the whole scale is carried by ``K`` (rescaling the data
    by ``c`` rescales ``K`` by ``c^2``). Zero-variance promoters are excluded
    and receive the median of the other estimates.
    """
    Yd = dataset.values
    n = dataset.n_samples
    if n < 16:
        warnings.warn("promoter variances from fewer than 16 samples are poorly determined")
    keep = np.ptp(Yd, axis=1) > 0
    if not np.all(keep):
        warnings.warn(f"{int((~keep).sum())} zero-variance promoters excluded from "
                      "promoter variance estimation")
    Y = Yd[keep]
    W = _complement_basis(loadings.values[keep])
    P = Y.shape[0]
    q = P - W.shape[1]
    if q < 1:
        raise ValueError("too few promoters to estimate promoter variances")
    group_of = dataset.group_of
    g = dataset.n_groups
    scale = q * (n - 1)
    resid = Y - W @ (W.T @ Y)
    resid = resid - resid.mean(axis=1, keepdims=True)
    k0 = np.maximum(np.sum(resid ** 2, axis=1) / max(n - 1, 1), 1e-8 * np.mean(resid ** 2) + 1e-300)

    def fun(theta):
        k = np.exp(theta[:P])
        s = np.exp(theta[P:])
        val, gk, gs = promoter_negloglik(Y, W, group_of, k, s, with_grad=True)
        return val / scale, np.concatenate([gk * k, gs * s]) / scale

    theta, rep = minimize_log(fun, np.concatenate([np.log(k0), np.zeros(g)]), cfg,
                              "promoter variance REML")
    k = np.exp(theta[:P])
    sigma = np.exp(theta[P:])
    c = np.exp(np.mean(np.log(sigma)))
    k_full = np.full(Yd.shape[0], np.median(k * c))
    k_full[keep] = k * c
    return PromoterVarianceResult(k_full, sigma / c, rep, np.flatnonzero(~keep))
