"""Group-level activity posteriors, signal-to-noise tuning and activity tests."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .core_types import ModelParams, PosteriorActivities, TestTable
from .fisher import FimResult
from .workspace import FitWorkspace

DEFAULT_GRID = np.logspace(-3, 3, 17)
OFFTEST_DRAWS = 10_000


def _group_sums(ws: FitWorkspace, mu_p: np.ndarray) -> np.ndarray:
    """``B^T`` applied to per-group sums of the intercept-corrected data, ``m x g``."""
    shift = ws.B.T @ ws.row_op.apply(mu_p)
    bx = ws.BtY - shift[:, None]
    return np.stack([bx[:, ws.group_of == k].sum(axis=1) for k in range(ws.g)], axis=1)


def _prior_scale(params: ModelParams) -> np.ndarray:
    if params.snr is not None:
        return params.snr * params.sigma
    return params.nu


def _posterior_parts(BtB, tau, prior_nu, n_hat, sigma):
    """``Z = S^{1/2} M S^{1/2}`` with ``M = (I + S^{1/2} Pr S^{1/2})^{-1}``.

    ``S = prior_nu * diag(tau)`` and ``Pr = (n_hat / sigma) B^T B``. This form
    stays finite when some ``tau`` are zero.
    """
    sq = np.sqrt(prior_nu * tau)
    Pr = (n_hat / sigma) * BtB
    M = np.linalg.inv(np.eye(tau.size) + sq[:, None] * Pr * sq[None, :])
    M = 0.5 * (M + M.T)
    return sq, M, Pr


def map_activities(ws: FitWorkspace, params: ModelParams, dataset=None,
                   mu_m_info: Optional[np.ndarray] = None) -> PosteriorActivities:
    """Posterior mean and covariance of every group's activity vector.

    For group ``k`` with ``N_k`` samples the activity has prior
    ``N(mu_m, nu_k Sigma)`` and the group mean of the data is
    ``B u + noise`` with noise variance ``sigma_k / N_k``. Hence
    ``Z = (Sigma~^{-1} + (N_k / sigma_k) B^T B)^{-1}`` and
    ``u = mu_m + (N_k / sigma_k) Z B^T (Ybar - B mu_m)``. When ``params.snr``
    is set the prior scale becomes ``snr * sigma_k``.

    If ``mu_m_info`` is given, per-group test statistics for the deviation of
    each activity from the motif mean are attached (see :func:`activity_zscores`).
    """
    tau = params.tau
    m, g = ws.m, ws.g
    sizes = ws.group_sizes.astype(float)
    prior = _prior_scale(params)
    bs = _group_sums(ws, params.mu_p)
    mean = np.empty((m, g))
    dev = np.empty((m, g))
    cov = np.empty((g, m, m))
    z = np.zeros((m, g))
    for k in range(g):
        sq, M, Pr = _posterior_parts(ws.BtB, tau, prior[k], sizes[k], params.sigma[k])
        b = bs[:, k] / params.sigma[k] - Pr @ params.mu_m
        Msb = M @ (sq * b)
        dev[:, k] = sq * Msb
        mean[:, k] = params.mu_m + dev[:, k]
        cov[k] = sq[:, None] * M * sq[None, :]
        if mu_m_info is not None and g > 1:
            V = Pr - Pr @ np.linalg.solve(mu_m_info, Pr)
            K = M * sq[None, :]
            var = np.einsum("ij,jk,ik->i", K, V, K)
            with np.errstate(divide="ignore", invalid="ignore"):
                z[:, k] = np.where(var > 0, Msb / np.sqrt(np.maximum(var, 0)), 0.0)
    flagged = tau == 0
    z[flagged] = 0.0
    post = PosteriorActivities(mean=mean, covariance=cov, flagged=flagged, deviation=dev)
    if mu_m_info is not None:
        if g == 1:
            z[:, 0] = _mu_m_wald(params.mu_m, mu_m_info)[0]
        post.zscores = z
        post.zpvalues = 2.0 * stats.norm.sf(np.abs(z))
    return post


def activity_zscores(ws: FitWorkspace, params: ModelParams, mu_m_info: np.ndarray):
    """Studentized deviation of each group activity from the motif mean.

    The deviation ``u_k - mu_m`` is divided by its sampling standard deviation
    under the hypothesis of no group-specific effect. That variance accounts for
    ``mu_m`` being estimated from the same data:
    ``Var(b_k) = Pr_k - Pr_k J^{-1} Pr_k`` for the score ``b_k`` of group ``k``
    and information ``J`` of ``mu_m``. With a single group the deviation is
    identically zero and the motif-mean Wald statistic is returned instead.
    """
    post = map_activities(ws, params, mu_m_info=mu_m_info)
    return post.zscores, post.zpvalues


def tune_snr(ws: FitWorkspace, params: ModelParams, dataset=None,
             grid: Sequence[float] = DEFAULT_GRID, folds: int = 5, seed: int = 0,
             return_scores: bool = False):
    """Choose the signal-to-noise ratio ``nu / sigma`` by promoter cross-validation.

    For each candidate ``mu`` the prior of group ``k`` becomes
    ``N(mu_m, mu sigma_k Sigma)``. Activities are fitted on the training
    promoters and held-out group means are scored by their Gaussian
    log-density with variance ``sigma_k / N_k``. Scores within a relative
    ``1e-9`` of the best count as ties and the smallest such ``mu`` wins.
    """
    grid = np.sort(np.asarray(grid, dtype=float))
    if grid.size == 0:
        raise ValueError("empty signal-to-noise grid")
    if grid.size == 1:
        return (float(grid[0]), np.zeros(1)) if return_scores else float(grid[0])
    Bp = ws.row_op.apply_t(ws.B)
    X = ws.Y_centered - ws.row_op.apply(params.mu_p)[:, None]
    sizes = ws.group_sizes.astype(float)
    Ybar = np.stack([X[:, ws.group_of == k].mean(axis=1) for k in range(ws.g)], axis=1)
    Ybar = ws.row_op.apply_t(Ybar)
    P = Bp.shape[0]
    rng = np.random.default_rng(seed)
    splits = np.array_split(rng.permutation(P), folds)
    tau, mu_m, sigma = params.tau, params.mu_m, params.sigma
    scores = np.zeros(grid.size)
    for test in splits:
        train = np.setdiff1d(np.arange(P), test)
        Bt, Bh = Bp[train], Bp[test]
        BtB = Bt.T @ Bt
        r_train = Ybar[train] - (Bt @ mu_m)[:, None]
        r_test = Ybar[test] - (Bh @ mu_m)[:, None]
        Btr = Bt.T @ r_train
        for a, mu in enumerate(grid):
            for k in range(ws.g):
                sq, M, _ = _posterior_parts(BtB, tau, mu * sigma[k], sizes[k], sigma[k])
                u = sq * (M @ (sq * Btr[:, k])) * (sizes[k] / sigma[k])
                resid = r_test[:, k] - Bh @ u
                scores[a] -= 0.5 * sizes[k] / sigma[k] * (resid @ resid)
    best = scores.max()
    tol = 1e-9 * max(abs(best), 1e-300)
    choice = float(grid[np.flatnonzero(scores >= best - tol)[0]])
    return (choice, scores) if return_scores else choice


def blue_mean(U: np.ndarray, covs: Sequence[np.ndarray]) -> np.ndarray:
    """Best linear unbiased common mean of group vectors ``U[:, k]`` with covariances."""
    precs = [np.linalg.inv(c) for c in covs]
    total = np.sum(precs, axis=0)
    rhs = np.sum([P @ U[:, k] for k, P in enumerate(precs)], axis=0)
    return np.linalg.solve(total, rhs)


def anova_test(mean: np.ndarray, variances: np.ndarray):
    """Per-motif chi-square heterogeneity statistic across groups.

    Each motif's group activities are compared with their precision-weighted
    (BLUE) common mean; the statistic has ``g - 1`` degrees of freedom.
    Motifs with a zero posterior variance in any group get statistic 0.
    """
    g = mean.shape[1]
    with np.errstate(divide="ignore", invalid="ignore"):
        w = 1.0 / variances
        mu = np.sum(w * mean, axis=1) / np.sum(w, axis=1)
        chi2 = np.sum(w * (mean - mu[:, None]) ** 2, axis=1)
    chi2 = np.where(np.all(variances > 0, axis=1), chi2, 0.0)
    return chi2, stats.chi2.sf(chi2, g - 1)


def offtest(mean: np.ndarray, variances: np.ndarray, seed: int = 0,
            draws: int = OFFTEST_DRAWS) -> np.ndarray:
    """Monte Carlo p-value for "some group shows no activity" per motif.

    The observed statistic is the minimum over groups of the squared
    studentized activity ``u_k^2 / Z_kk``. Reference draws come from the fitted
    posterior, in which every group keeps its estimated activity. The p-value
    is the fraction of draws whose minimum is at or below the observed one, so
    small values mean a group activity is closer to zero than the posterior
    spread supports. Each motif uses its own seeded stream.
    """
    m, g = mean.shape
    out = np.ones(m)
    for i in range(m):
        v = variances[i]
        if np.any(v <= 0):
            continue
        zs = mean[i] / np.sqrt(v)
        obs = np.min(zs ** 2)
        rng = np.random.default_rng([seed, i])
        sims = np.min((zs + rng.standard_normal((draws, g))) ** 2, axis=1)
        out[i] = np.mean(sims <= obs)
    return out


def _mu_m_wald(mu_m: np.ndarray, info: np.ndarray):
    se = np.sqrt(np.diag(np.linalg.inv(info)))
    z = mu_m / se
    return z, se, 2.0 * stats.norm.sf(np.abs(z))


def run_tests(posterior: PosteriorActivities, params: ModelParams, fim: Optional[FimResult],
              mu_m_info: np.ndarray, seed: int = 0) -> TestTable:
    """Assemble every per-motif test.

    * one-sided Wald test of ``tau_i > 0`` from the inverse information;
    * two-sided Wald test of ``mu_m,i != 0``;
    * chi-square heterogeneity (ANOVA) across groups and the off-test
      (skipped, i.e. statistic 0 and p-value 1, for a single group);
    * per-group activity z-scores carried from the posterior.
    """
    m, g = posterior.mean.shape
    if fim is not None and any(name == "tau" for name, _ in fim.ordering):
        se_tau = fim.standard_errors("tau", m)
        tau_z = params.tau / se_tau
        tau_p = stats.norm.sf(tau_z)
    else:
        tau_z = np.full(m, np.nan)
        tau_p = np.full(m, np.nan)
    mu_z, mu_se, mu_p = _mu_m_wald(params.mu_m, mu_m_info)
    variances = np.stack([np.diag(c) for c in posterior.covariance], axis=1)
    if g > 1:
        chi2, chi2_p = anova_test(posterior.mean, variances)
        off_p = offtest(posterior.mean, variances, seed)
    else:
        chi2, chi2_p, off_p = np.zeros(m), np.ones(m), np.ones(m)
    zs = posterior.zscores if posterior.zscores is not None else np.zeros((m, g))
    posterior.anova_stat, posterior.anova_pvalue, posterior.offtest_pvalue = chi2, chi2_p, off_p
    return TestTable(tau_hat=params.tau, tau_z=tau_z, tau_p=tau_p, mu_m_hat=params.mu_m,
                     mu_m_se=mu_se, mu_m_p=mu_p, anova_chi2=chi2, anova_p=chi2_p,
                     offtest_p=off_p, activity=posterior.mean, z=zs)
