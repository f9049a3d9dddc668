"""End-to-end fit: centering, variance components, means, posteriors and tests."""
from __future__ import annotations

import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .clustering import ClusterResult, hard_cluster
from .core_types import (ExpressionDataset, ModelParams, MotifLoadings, PosteriorActivities,
                         TestTable)
from .estimation import (OptimizerConfig, estimate_D, estimate_mu_m, estimate_mu_p,
                         estimate_promoter_variances, estimate_sigma_G)
from .fisher import FimResult, NonIdentifiableError, fisher_information
from .ortho import complement_of_vector
from .posterior import DEFAULT_GRID, map_activities, run_tests, tune_snr
from .workspace import FitWorkspace, prepare_workspace

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    """A pipeline stage failed; the message names the stage."""


@dataclass(frozen=True)
class FitOptions:
    promoter_variance: bool = False
    motif_variance: bool = True
    clusters: Optional[int] = None
    tune_snr: bool = False
    seed: int = 0
    optimizer: OptimizerConfig = OptimizerConfig()
    snr_grid: tuple = tuple(DEFAULT_GRID)
    folds: int = 5
    run_tests: bool = True


@dataclass
class FitResult:
    """Everything produced by :func:`fit_model`.

    ``params`` is on the scale of the input data. ``internal_params`` is on
    the scale of ``workspace`` (they differ only when promoter variances were
    estimated, in which case data and loadings were divided by ``sqrt(K)``).
    """

    params: ModelParams
    internal_params: ModelParams
    posterior: PosteriorActivities
    tests: Optional[TestTable]
    fim: Optional[FimResult]
    mu_m_info: np.ndarray
    workspace: FitWorkspace
    loadings: MotifLoadings
    clusters: Optional[ClusterResult]
    run_log: dict = field(default_factory=dict)

    @property
    def motif_ids(self):
        return self.loadings.motif_ids


@contextmanager
def _stage(name: str, run_log: dict):
    t0 = time.perf_counter()
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(f"stage '{name}' failed: {exc}") from exc
    finally:
        run_log.setdefault("timings", {})[name] = time.perf_counter() - t0


def rescale_by_promoter_variance(dataset: ExpressionDataset, loadings: MotifLoadings,
                                 promoter_var: np.ndarray):
    """Divide data and loadings by ``sqrt(K)``; the sample intercepts then lie
    along ``K^{-1/2} 1``, which the returned row operator removes."""
    w = 1.0 / np.sqrt(promoter_var)
    ds = dataset.with_values(dataset.values * w[:, None])
    ld = MotifLoadings(loadings.values * w[:, None], loadings.motif_ids, loadings.promoter_ids)
    return ds, ld, complement_of_vector(w)


def fit_model(dataset: ExpressionDataset, loadings: MotifLoadings,
              options: FitOptions = FitOptions()) -> FitResult:
    """Run every estimation stage in order and collect the results."""
    run_log: dict = {"options": {"promoter_variance": options.promoter_variance,
                                 "motif_variance": options.motif_variance,
                                 "clusters": options.clusters,
                                 "tune_snr": options.tune_snr, "seed": options.seed}}
    cfg = options.optimizer
    clusters = None
    if options.clusters is not None:
        with _stage("cluster", run_log):
            clusters = hard_cluster(loadings, options.clusters, options.seed,
                                    scale_by_size=not options.motif_variance)
            loadings = clusters.loadings
    ds_fit, ld_fit, row_op, pvar = dataset, loadings, None, None
    if options.promoter_variance:
        with _stage("promoter_variance", run_log):
            pv = estimate_promoter_variances(dataset, loadings, cfg)
            pvar = pv.promoter_var
            run_log["promoter_variance"] = pv.report.to_dict()
            ds_fit, ld_fit, row_op = rescale_by_promoter_variance(dataset, loadings, pvar)
    with _stage("center", run_log):
        ws = prepare_workspace(ds_fit, ld_fit, row_op)
        run_log["rank"] = ws.r
    with _stage("noise_reml", run_log):
        sigma = estimate_D(ws, ds_fit, cfg, report=run_log)
    with _stage("mu_p", run_log):
        mu_p = estimate_mu_p(ws, sigma)
    with _stage("activity_covariance", run_log):
        sg = estimate_sigma_G(ws, sigma, cfg, estimate_tau=options.motif_variance)
        run_log["activity_covariance"] = sg.report.to_dict()
    internal = ModelParams(sigma=sigma, nu=sg.nu, tau=sg.tau, mu_p=mu_p,
                           mu_m=np.zeros(ws.m), fixed_index=sg.fixed_index)
    with _stage("mu_m", run_log):
        mu_m, info = estimate_mu_m(ws, internal)
        internal.mu_m = mu_m
    if options.tune_snr:
        with _stage("tune_snr", run_log):
            internal.snr = tune_snr(ws, internal, ds_fit, options.snr_grid, options.folds,
                                    options.seed)
    with _stage("posterior", run_log):
        posterior = map_activities(ws, internal, ds_fit, mu_m_info=info)
    fim = None
    tests = None
    if options.run_tests:
        with _stage("fisher_information", run_log):
            try:
                fim = fisher_information(ws, internal, estimate_tau=options.motif_variance)
            except NonIdentifiableError as exc:
                log.warning("%s", exc)
                run_log["fisher_information"] = str(exc)
        with _stage("tests", run_log):
            tests = run_tests(posterior, internal, fim, info, options.seed)
    mu_p_out = mu_p if pvar is None else mu_p * np.sqrt(pvar)
    params = ModelParams(sigma=sigma, nu=sg.nu, tau=sg.tau, mu_p=mu_p_out, mu_m=mu_m,
                         promoter_var=pvar, snr=internal.snr, fixed_index=sg.fixed_index)
    return FitResult(params, internal, posterior, tests, fim, info, ws, loadings, clusters,
                     run_log)
