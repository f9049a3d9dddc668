"""Promoter-level motif effect probabilities by likelihood comparison."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.special import expit

from .core_types import ExpressionDataset, ModelParams, MotifLoadings, PosteriorActivities

DELTA_FLOOR = 1e-12
SPARSITY = 0.01


def fitted_expression(dataset: ExpressionDataset, loadings: MotifLoadings,
                      params: ModelParams, posterior: PosteriorActivities) -> np.ndarray:
    """Model prediction ``a 1^T + mu_p 1^T + B U`` with per-sample intercepts ``a``.

    ``U`` holds each sample's group activity; the sample intercepts are the
    promoter averages of what the other terms leave unexplained.
    """
    U = posterior.mean[:, dataset.group_of]
    core = params.mu_p[:, None] + loadings.values @ U
    a = (dataset.values - core).mean(axis=0)
    return core + a[None, :]


def grn_scores(dataset: ExpressionDataset, loadings: MotifLoadings, params: ModelParams,
               posterior: PosteriorActivities, prior_h0: float = 0.5) -> np.ndarray:
    """Posterior probability that motif ``k`` affects promoter ``i`` in group ``j``.

    Within a group, the observations of promoter ``i`` are modelled as the
    fitted values plus ``N(0, delta_ij^2)`` noise, with ``delta_ij^2`` the mean
    squared residual. The alternative removes ``B_ik u_jk`` from the fitted
    values while keeping ``delta_ij^2``.

    Returns
    -------
    ndarray, shape (P, m, g)
        ``nan`` where the group has a single sample; ``prior_h0`` where
        ``B_ik = 0``.
    """
    if not 0.0 <= prior_h0 <= 1.0:
        raise ValueError("prior probability must lie in [0, 1]")
    B = loadings.values
    P, m = B.shape
    g = dataset.n_groups
    resid = dataset.values - fitted_expression(dataset, loadings, params, posterior)
    with np.errstate(divide="ignore"):
        logit = np.log(prior_h0) - np.log1p(-prior_h0)
    out = np.full((P, m, g), np.nan)
    for j in range(g):
        cols = dataset.group_of == j
        N = int(cols.sum())
        if N < 2:
            continue
        R = resid[:, cols]
        delta2 = np.maximum(np.mean(R ** 2, axis=1), DELTA_FLOOR)
        C = B * posterior.mean[:, j][None, :]
        llr = (2.0 * C * R.sum(axis=1)[:, None] + N * C ** 2) / (2.0 * delta2[:, None])
        with np.errstate(invalid="ignore"):
            prob = expit(llr + logit)
        if prior_h0 in (0.0, 1.0):
            prob = np.full_like(llr, prior_h0)
        prob[B == 0] = prior_h0
        out[:, :, j] = prob
    return out


def write_grn(path, probs: np.ndarray, promoter_ids, motif_ids, group_labels,
              prior_h0: float = 0.5):
    """Write entries whose probability differs from the prior by at least 0.01."""
    path = Path(path)
    with open(path, "w") as fh:
        fh.write("promoter_id\tmotif_id\tgroup\tp_h0\n")
        for i, pid in enumerate(promoter_ids):
            block = probs[i]
            keep = np.abs(block - prior_h0) >= SPARSITY
            for k, j in zip(*np.nonzero(keep)):
                fh.write(f"{pid}\t{motif_ids[k]}\t{group_labels[j]}\t{block[k, j]:.17g}\n")
