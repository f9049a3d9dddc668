"""Synthetic data generator, evaluation metrics and a ridge-regression baseline."""
from __future__ import annotations

import dataclasses
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core_types import (ExpressionDataset, ModelParams, MotifLoadings, PosteriorActivities,
                         dataset_from_labels, save_dataset, save_fit,
                         write_matrix_tsv)

# Named configurations. Each row holds the base knobs and the knob that is swept
# together with its values; ``GeneratorConfig.from_row`` takes the first value.
TABLE_ROWS = {
    "A": ({}, "p", (1000, 2000, 4000, 5000, 8000, 10000, 20000)),
    "B": ({}, "s", (2, 4, 8, 16, 20, 32, 64, 128)),
    "C": ({}, "variance_ratio", (0.05, 0.1, 0.2, 0.3)),
    "D": ({}, "zm_frac", (0.0, 0.05, 0.1, 0.2, 0.3, 0.4)),
    "E": ({"sigma_het": True}, "sigma_var", (0.1, 0.5, 1.0, 2.0, 4.0, 10.0, 32.0)),
    "F": ({"s_het": True}, "s_var_max", (1.5, 2.0, 4.0, 8.0, 16.0, 32.0)),
    "G": ({"s_het": True, "s_var_max": 2.0}, "s", (8, 16, 32, 64, 128, 256)),
    "H": ({"s_het": True, "s_var_max": 2.5, "s_het_sample": True, "s_sample_var": 0.1},
          "s", (8, 16, 32, 48, 64, 128, 256)),
    "I": ({"s": 32, "s_het": True, "s_var_max": 2.5, "s_het_sample": True},
          "s_sample_var", (0.1, 0.15, 0.2, 0.4, 1.0)),
    "J": ({"s": 128, "s_het": True, "s_var_max": 2.5, "s_het_sample": True},
          "s_sample_var", (0.1, 0.15, 0.2, 0.4, 1.0)),
    "K": ({"s_het": True, "s_var_max": 2.5, "s_het_sample": True, "s_sample_var": 0.2,
           "sigma_het": True, "sigma_var": 4.0, "zm_frac": 0.2},
          "s", (8, 16, 32, 48, 64, 128, 256)),
}


@dataclass(frozen=True)
class GeneratorConfig:
    """Knobs of the synthetic generator.

    ``groups`` defaults to 4 equal groups when ``s >= 8`` and 2 otherwise.
    """

    p: int = 5000
    s: int = 20
    m: int = 100
    variance_ratio: float = 0.1
    zm_frac: float = 0.0
    sigma_het: bool = False
    sigma_var: float = 1.0
    s_het: bool = False
    s_var_max: float = 1.0
    s_het_sample: bool = False
    s_sample_var: float = 0.1
    groups: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if min(self.p, self.s, self.m) < 1:
            raise ValueError("p, s and m must be positive")
        if not 0.0 < self.variance_ratio < 1.0:
            raise ValueError("variance_ratio must lie in (0, 1)")
        if not 0.0 <= self.zm_frac <= 1.0:
            raise ValueError("zm_frac must lie in [0, 1]")
        if self.s_het and self.s_var_max <= 0.1:
            raise ValueError("s_var_max must exceed 0.1")
        if self.sigma_var < 0 or self.s_sample_var < 0:
            raise ValueError("variances must be non-negative")
        if self.groups is not None and not 1 <= self.groups <= self.s:
            raise ValueError("groups must lie in 1..s")

    @property
    def n_groups(self) -> int:
        if self.groups is not None:
            return self.groups
        return 4 if self.s >= 8 else 2

    @classmethod
    def from_row(cls, row: str, **overrides) -> "GeneratorConfig":
        try:
            base, knob, values = TABLE_ROWS[row.upper()]
        except KeyError:
            raise ValueError(f"unknown table row {row!r}; choose from "
                             f"{', '.join(TABLE_ROWS)}") from None
        kw = dict(base)
        kw.setdefault(knob, values[0])
        kw.update(overrides)
        return cls(**kw)

    @classmethod
    def from_file(cls, path) -> "GeneratorConfig":
        """Read ``key = value`` lines (``#`` comments allowed); ``row`` names a preset."""
        kv = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            k, v = (x.strip() for x in line.split("=", 1))
            kv[k] = v
        row = kv.pop("row", None)
        parsed = {k: _parse_field(k, v) for k, v in kv.items()}
        return cls.from_row(row, **parsed) if row else cls(**parsed)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["groups"] = self.n_groups
        return d


def _parse_field(name: str, value: str):
    fields = {f.name: f for f in dataclasses.fields(GeneratorConfig)}
    if name not in fields:
        raise ValueError(f"unknown generator knob {name!r}")
    default = getattr(GeneratorConfig, name)
    if isinstance(default, bool):
        if value.lower() in ("true", "1", "yes"):
            return True
        if value.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {value!r}")
    if name in ("p", "s", "m", "groups", "seed"):
        return int(value)
    return float(value)


@dataclass
class SimulatedData:
    dataset: ExpressionDataset
    loadings: MotifLoadings
    truth: ModelParams
    U: np.ndarray  # per-sample activities, m x s
    mu_n: np.ndarray
    noise_var: np.ndarray  # per-entry noise variance, p x s
    config: GeneratorConfig

    @property
    def group_activities(self) -> np.ndarray:
        """Group means of the per-sample activities, ``m x g``."""
        return group_average(self.U, self.dataset.group_of, self.dataset.n_groups)


def group_average(X: np.ndarray, group_of: np.ndarray, g: int) -> np.ndarray:
    return np.stack([X[:, group_of == k].mean(axis=1) for k in range(g)], axis=1)


def generate(cfg: GeneratorConfig) -> SimulatedData:
    """Draw one dataset.

    Activities are ``U = mu_m 1^T + diag(tau)^{1/2} Z G^{1/2}`` and expression is
    ``Y = mu_p 1^T + 1 mu_n^T + B U + E`` with ``Var(E_ij) = k_ij sigma_g(j)``.
    Inactive motifs get ``tau = 0`` and ``mu_m = 0``. The group noise scales
    are multiplied by one constant so that the expected share of the random
    activity term in the promoter-centered variance equals ``variance_ratio``.
    """
    rng = np.random.default_rng(cfg.seed)
    p, s, m, g = cfg.p, cfg.s, cfg.m, cfg.n_groups
    group_of = np.concatenate([np.full(len(c), k) for k, c in
                               enumerate(np.array_split(np.arange(s), g))])
    B = rng.uniform(0.1, 1.1, size=(p, m))
    if cfg.sigma_het:
        tau = rng.lognormal(0.0, math.sqrt(cfg.sigma_var), size=m)
    else:
        tau = np.ones(m)
    n_zero_exact = cfg.zm_frac * m
    n_zero = int(math.floor(n_zero_exact + 1e-9))
    if abs(n_zero_exact - n_zero) > 1e-9:
        warnings.warn(f"zm_frac * m = {n_zero_exact:g} is not integral; using {n_zero}")
    inactive = rng.choice(m, size=n_zero, replace=False) if n_zero else np.array([], int)
    tau[inactive] = 0.0
    nu = rng.uniform(0.1, 2.0, size=g)
    sigma = rng.uniform(1.0, 2.5, size=g)
    mu_p = rng.standard_normal(p)
    mu_n = rng.standard_normal(s)
    mu_m = rng.standard_normal(m)
    mu_m[inactive] = 0.0
    if cfg.s_het:
        k_hat = rng.uniform(0.1, cfg.s_var_max, size=p)
    else:
        k_hat = np.ones(p)
    if cfg.s_het_sample:
        kvar = np.exp(np.log(k_hat)[:, None]
                      + math.sqrt(cfg.s_sample_var) * rng.standard_normal((p, s)))
    else:
        kvar = np.repeat(k_hat[:, None], s, axis=1)
    Bc = B - B.mean(axis=0)
    var_bu = np.mean(Bc ** 2 @ tau) * np.mean(nu[group_of])
    var_e = np.mean(kvar * sigma[group_of][None, :])
    if var_bu > 0:
        sigma = sigma * var_bu * (1.0 - cfg.variance_ratio) / (cfg.variance_ratio * var_e)
    Z = rng.standard_normal((m, s))
    U = mu_m[:, None] + np.sqrt(tau)[:, None] * Z * np.sqrt(nu[group_of])[None, :]
    noise_var = kvar * sigma[group_of][None, :]
    E = np.sqrt(noise_var) * rng.standard_normal((p, s))
    Y = mu_p[:, None] + mu_n[None, :] + B @ U + E
    pids = [f"p{i}" for i in range(p)]
    sids = [f"s{j}" for j in range(s)]
    mids = [f"m{k}" for k in range(m)]
    labels = [f"g{k}" for k in group_of]
    ds = dataset_from_labels(Y, pids, sids, labels)
    ld = MotifLoadings(B, mids, pids)
    truth = ModelParams(sigma=sigma, nu=nu, tau=tau, mu_p=mu_p, mu_m=mu_m,
                        promoter_var=k_hat if cfg.s_het else None)
    return SimulatedData(ds, ld, truth, U, mu_n, noise_var, cfg)


def save_simulation(sim: SimulatedData, out_dir) -> Path:
    """Write the dataset files, ``manifest.txt`` and a ``truth/`` directory.

    ``truth/`` is laid out like a fit directory (``params.txt`` and
    ``activities.tsv`` with group-mean activities) so fits and truth can be
    compared with the same reader; ``U.tsv`` holds per-sample activities.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(sim.dataset, sim.loadings, out)
    with open(out / "manifest.txt", "w") as fh:
        for k, v in sim.config.to_dict().items():
            fh.write(f"{k} = {v}\n")
    tdir = out / "truth"
    tdir.mkdir(exist_ok=True)
    save_fit(sim.truth, None, tdir, sim.loadings.motif_ids, sim.dataset.group_labels,
             sim.dataset.promoter_ids)
    write_matrix_tsv(tdir / "activities.tsv", sim.group_activities, sim.loadings.motif_ids,
                     sim.dataset.group_labels, index_name="motif_id")
    write_matrix_tsv(tdir / "U.tsv", sim.U, sim.loadings.motif_ids, sim.dataset.sample_ids,
                     index_name="motif_id")
    return out


def double_center(Y: np.ndarray) -> np.ndarray:
    return Y - Y.mean(axis=1, keepdims=True) - Y.mean(axis=0, keepdims=True) + Y.mean()


def ridge_activities(Bc: np.ndarray, Yc: np.ndarray, ridge: float) -> np.ndarray:
    m = Bc.shape[1]
    return np.linalg.solve(Bc.T @ Bc + ridge * np.eye(m), Bc.T @ Yc)


def mara_baseline(dataset: ExpressionDataset, loadings: MotifLoadings,
                  ridge: Optional[float] = None, grid: Optional[Sequence[float]] = None,
                  folds: int = 5, seed: int = 0):
    """Classic per-sample ridge regression on double-centered data.

    Expression is centered over promoters and samples, loadings over
    promoters, and ``(B^T B + lambda I) A = B^T Y`` is solved for the ``m x n``
    activity matrix. Without ``ridge`` the penalty is chosen by promoter-fold
    cross-validation over ``lambda = 1 / mu`` for ``mu`` on the
    signal-to-noise grid (ties go to the larger penalty).

    Returns
    -------
    activities : ndarray, shape (m, n)
    ridge : float
    """
    from .posterior import DEFAULT_GRID

    Yc = double_center(dataset.values)
    Bc = loadings.values - loadings.values.mean(axis=0)
    if ridge is None:
        lambdas = np.sort(1.0 / np.asarray(DEFAULT_GRID if grid is None else grid))[::-1]
        P = Bc.shape[0]
        rng = np.random.default_rng(seed)
        splits = np.array_split(rng.permutation(P), folds)
        err = np.zeros(lambdas.size)
        for test in splits:
            train = np.setdiff1d(np.arange(P), test)
            Bt, Bh = Bc[train], Bc[test]
            BtB, BtY = Bt.T @ Bt, Bt.T @ Yc[train]
            for a, lam in enumerate(lambdas):
                A = np.linalg.solve(BtB + lam * np.eye(Bc.shape[1]), BtY)
                err[a] += np.sum((Yc[test] - Bh @ A) ** 2)
        best = err.min()
        ridge = float(lambdas[np.flatnonzero(err <= best * (1 + 1e-9))[0]])
    return ridge_activities(Bc, Yc, ridge), ridge


def pearson(a, b) -> float:
    a = np.ravel(a).astype(float)
    b = np.ravel(b).astype(float)
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float(a @ a) * float(b @ b))
    return float(a @ b) / den if den > 0 else float("nan")


def _row_center(X: np.ndarray) -> np.ndarray:
    return X - X.mean(axis=1, keepdims=True)


def _geo_normalize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x / np.exp(np.mean(np.log(x)))


def mape(est, true) -> float:
    est = np.asarray(est, dtype=float)
    true = np.asarray(true, dtype=float)
    return float(np.mean(np.abs(est - true) / np.abs(true)))


def holdout_split(P: int, frac: float, seed: int):
    """Promoter indices (train, test) with ``round(frac * P)`` (at least 1) held out."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(P)
    n_test = max(1, int(round(frac * P)))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def predictive_pcc(train_fit, dataset: ExpressionDataset, loadings: MotifLoadings,
                   test_idx: np.ndarray, activities: Optional[np.ndarray] = None) -> float:
    """PCC between double-centered held-out expression and ``B_test U``.

    Activities are expanded to samples through their group; double centering
    removes the promoter and sample intercepts that are not predictable for
    unseen promoters.
    """
    if activities is None:
        activities = train_fit.posterior.mean[:, dataset.group_of]
    pred = loadings.values[test_idx] @ activities
    obs = dataset.values[test_idx]
    return pearson(double_center(pred), double_center(obs))


def evaluate(params: Optional[ModelParams], posterior: Optional[PosteriorActivities],
             truth: Optional[ModelParams] = None, true_activities: Optional[np.ndarray] = None,
             dataset: Optional[ExpressionDataset] = None,
             loadings: Optional[MotifLoadings] = None, holdout_frac: float = 0.1,
             fit_options=None, seed: int = 0) -> dict:
    """Metrics of a fit against ground truth.

    Parameters
    ----------
    params, posterior
        Fitted parameters and group activities.
    truth, true_activities
        Generating parameters and ``m x g`` group-mean activities. Either may
        be missing, in which case the corresponding metrics are omitted.
    dataset, loadings
        When both are given, the model is refit with ``fit_options`` on a
        ``1 - holdout_frac`` promoter split (seeded by ``seed + 1``) and the
        predictive PCC on the held-out promoters is reported.

    Notes
    -----
    ``nu`` is compared after scaling estimate and truth to unit geometric mean.
    ``sigma`` is normalized the same way when promoter variances were estimated,
    since the overall noise scale then moves into ``K``.
    """
    out = {}
    if dataset is not None and loadings is not None:
        from .pipeline import FitOptions, fit_model

        opts = fit_options or FitOptions(seed=seed)
        opts = dataclasses.replace(opts, run_tests=False)
        train, test = holdout_split(dataset.n_promoters, holdout_frac, seed + 1)
        fit = fit_model(dataset.subset_promoters(train), loadings.subset_promoters(train), opts)
        out["pcc_holdout"] = predictive_pcc(fit, dataset, loadings, test)
    if posterior is not None and true_activities is not None:
        out["pcc_U"] = pearson(posterior.mean, true_activities)
        out["pcc_U_centered"] = pearson(_row_center(posterior.mean),
                                        _row_center(true_activities))
    if params is not None and truth is not None:
        if params.promoter_var is not None:
            out["mape_sigma"] = mape(_geo_normalize(params.sigma), _geo_normalize(truth.sigma))
        else:
            out["mape_sigma"] = mape(params.sigma, truth.sigma)
        out["mape_nu"] = mape(_geo_normalize(params.nu), _geo_normalize(truth.nu))
        if params.promoter_var is not None and truth.promoter_var is not None:
            out["pcc_K"] = pearson(params.promoter_var, truth.promoter_var)
            out["mape_K"] = mape(_geo_normalize(params.promoter_var),
                                 _geo_normalize(truth.promoter_var))
    return out


def baseline_metrics(sim: SimulatedData, holdout_frac: float = 0.1, seed: int = 0) -> dict:
    """Activity PCC and predictive PCC of :func:`mara_baseline` on a simulation.

    ``pcc_U`` compares group averages of the baseline activities with the true
    group activities; ``pcc_U_centered`` first removes each motif's mean
    across groups from the truth, which the baseline cannot estimate.
    """
    ds, ld = sim.dataset, sim.loadings
    A, _ = mara_baseline(ds, ld, seed=seed)
    Ubar = group_average(A, ds.group_of, ds.n_groups)
    out = {"pcc_U": pearson(Ubar, sim.group_activities),
           "pcc_U_centered": pearson(Ubar, _row_center(sim.group_activities))}
    train, test = holdout_split(ds.n_promoters, holdout_frac, seed + 1)
    A_tr, _ = mara_baseline(ds.subset_promoters(train), ld.subset_promoters(train), seed=seed)
    out["pcc_holdout"] = predictive_pcc(None, ds, ld, test, activities=A_tr)
    return out
