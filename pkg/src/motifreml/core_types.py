"""Data containers, validation and TSV/text persistence."""
from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

FLOAT_FORMAT = "%.17g"


class InputError(ValueError):
    """Malformed or inconsistent input files."""


def _frozen(a, dtype=float) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


def _check_unique(ids: Sequence[str], what: str):
    seen = set()
    for i in ids:
        if i in seen:
            raise InputError(f"duplicate {what} id: {i!r}")
        seen.add(i)


@dataclass(frozen=True)
class ExpressionDataset:
    """Promoter x sample log-expression matrix with a sample grouping.

    Parameters
    ----------
    values : ndarray, shape (P, n)
        Log-scale expression, one row per promoter.
    promoter_ids, sample_ids : list of str
        Unique identifiers of rows and columns.
    group_of : ndarray of int, shape (n,)
        Dense 0-based group index of every sample.
    group_labels : list of str, optional
        Original group names, indexed by group index.
    """

    values: np.ndarray
    promoter_ids: tuple
    sample_ids: tuple
    group_of: np.ndarray
    group_labels: tuple = ()

    def __post_init__(self):
        values = _frozen(self.values)
        group_of = _frozen(self.group_of, dtype=np.int64)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "group_of", group_of)
        object.__setattr__(self, "promoter_ids", tuple(map(str, self.promoter_ids)))
        object.__setattr__(self, "sample_ids", tuple(map(str, self.sample_ids)))
        if values.ndim != 2:
            raise InputError("expression must be a matrix")
        P, n = values.shape
        if len(self.promoter_ids) != P or len(self.sample_ids) != n:
            raise InputError("identifier lists do not match the expression shape")
        if group_of.shape != (n,):
            raise InputError("group assignment must cover every sample")
        if not np.all(np.isfinite(values)):
            raise InputError("expression contains non-finite values")
        _check_unique(self.promoter_ids, "promoter")
        _check_unique(self.sample_ids, "sample")
        g = int(group_of.max()) + 1 if n else 0
        if group_of.min(initial=0) < 0 or np.any(np.bincount(group_of, minlength=g) == 0):
            raise InputError("group indices must be dense 0..g-1")
        labels = tuple(map(str, self.group_labels)) or tuple(str(k) for k in range(g))
        if len(labels) != g:
            raise InputError("group labels do not match the number of groups")
        object.__setattr__(self, "group_labels", labels)

    @property
    def n_promoters(self) -> int:
        return self.values.shape[0]

    @property
    def n_samples(self) -> int:
        return self.values.shape[1]

    @property
    def n_groups(self) -> int:
        return len(self.group_labels)

    @property
    def group_sizes(self) -> np.ndarray:
        return np.bincount(self.group_of, minlength=self.n_groups)

    def subset_promoters(self, idx) -> "ExpressionDataset":
        idx = np.asarray(idx)
        return ExpressionDataset(self.values[idx], [self.promoter_ids[i] for i in idx],
                                 self.sample_ids, self.group_of, self.group_labels)

    def with_values(self, values) -> "ExpressionDataset":
        return ExpressionDataset(values, self.promoter_ids, self.sample_ids,
                                 self.group_of, self.group_labels)


@dataclass(frozen=True)
class MotifLoadings:
    """Non-negative promoter x motif loading matrix."""

    values: np.ndarray
    motif_ids: tuple
    promoter_ids: tuple = ()
    rank: Optional[int] = None

    def __post_init__(self):
        values = _frozen(self.values)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "motif_ids", tuple(map(str, self.motif_ids)))
        object.__setattr__(self, "promoter_ids", tuple(map(str, self.promoter_ids)))
        if values.ndim != 2:
            raise InputError("loadings must be a matrix")
        if len(self.motif_ids) != values.shape[1]:
            raise InputError("motif ids do not match the loading shape")
        if self.promoter_ids and len(self.promoter_ids) != values.shape[0]:
            raise InputError("promoter ids do not match the loading shape")
        _check_unique(self.motif_ids, "motif")
        if not np.all(np.isfinite(values)):
            raise InputError("loadings contain non-finite values")
        if np.any(values < 0):
            raise InputError("negative loading")
        if not np.any(values):
            raise InputError("loading matrix is all zero")

    @property
    def n_motifs(self) -> int:
        return self.values.shape[1]

    def subset_promoters(self, idx) -> "MotifLoadings":
        idx = np.asarray(idx)
        pids = [self.promoter_ids[i] for i in idx] if self.promoter_ids else ()
        return MotifLoadings(self.values[idx], self.motif_ids, pids)


@dataclass
class ModelParams:
    """Fitted (or ground-truth) model parameters.

    ``sigma`` and ``nu`` are per-group noise and activity scales, ``tau`` the
    per-motif activity variances, ``fixed_index`` the group whose ``nu`` was
    held fixed during estimation (``None`` when nothing was pinned).
    """

    sigma: np.ndarray
    nu: np.ndarray
    tau: np.ndarray
    mu_p: np.ndarray
    mu_m: np.ndarray
    promoter_var: Optional[np.ndarray] = None
    snr: Optional[float] = None
    fixed_index: Optional[int] = None

    def __post_init__(self):
        for name in ("sigma", "nu", "tau", "mu_p", "mu_m", "promoter_var"):
            v = getattr(self, name)
            if v is not None:
                setattr(self, name, np.asarray(v, dtype=float))
        if np.any(self.sigma <= 0) or np.any(self.nu <= 0):
            raise ValueError("sigma and nu must be strictly positive")
        if np.any(self.tau < 0):
            raise ValueError("tau must be non-negative")
        if self.promoter_var is not None and np.any(self.promoter_var <= 0):
            raise ValueError("promoter variances must be positive")

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.tolist() if isinstance(v, np.ndarray) else v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        return cls(**{f.name: d.get(f.name) for f in fields(cls)})


@dataclass
class PosteriorActivities:
    """Per-group activity posterior summaries and test statistics.

    Attributes
    ----------
    mean : ndarray, shape (m, g)
        Absolute activity estimate (deviation MAP plus the fitted motif mean).
    covariance : ndarray, shape (g, m, m)
        Posterior covariance of the group activity given the fitted variances.
    zscores, zpvalues : ndarray, shape (m, g)
        Per-group activity test statistics and two-sided p-values.
    flagged : ndarray of bool, shape (m,)
        Motifs with zero fitted variance (activity fixed at the motif mean).
    """

    mean: np.ndarray
    covariance: np.ndarray
    zscores: Optional[np.ndarray] = None
    zpvalues: Optional[np.ndarray] = None
    anova_stat: Optional[np.ndarray] = None
    anova_pvalue: Optional[np.ndarray] = None
    offtest_pvalue: Optional[np.ndarray] = None
    flagged: Optional[np.ndarray] = None
    deviation: Optional[np.ndarray] = None

    @property
    def n_groups(self) -> int:
        return self.mean.shape[1]


@dataclass
class TestTable:
    """Per-motif asymptotic and posterior test results."""

    __test__ = False  # not a pytest class despite the name

    tau_hat: np.ndarray
    tau_z: np.ndarray
    tau_p: np.ndarray
    mu_m_hat: np.ndarray
    mu_m_se: np.ndarray
    mu_m_p: np.ndarray
    anova_chi2: np.ndarray
    anova_p: np.ndarray
    offtest_p: np.ndarray
    activity: np.ndarray
    z: np.ndarray

    columns = ("tau_hat", "tau_z", "tau_p", "mu_m_hat", "mu_m_se", "mu_m_p",
               "anova_chi2", "anova_p", "offtest_p")


# ---------------------------------------------------------------- ingestion

def _read_rows(path) -> list[list[str]]:
    path = Path(path)
    if not path.exists():
        raise InputError(f"file not found: {path}")
    with open(path, newline="") as fh:
        rows = [line.rstrip("\r\n").split("\t") for line in fh if line.strip()]
    if not rows:
        raise InputError(f"empty file: {path}")
    return rows


def _read_matrix(path, kind: str):
    rows = _read_rows(path)
    header, body = rows[0][1:], rows[1:]
    ids = []
    for lineno, row in enumerate(body, start=2):
        if len(row) != len(header) + 1:
            raise InputError(f"{path}: line {lineno} has {len(row) - 1} values, "
                             f"header has {len(header)}")
        ids.append(row[0])
    try:
        values = np.array([row[1:] for row in body], dtype=float).reshape(len(body), len(header))
    except ValueError as exc:
        raise InputError(f"{path}: non-numeric cell ({exc})") from None
    _check_unique(ids, kind)
    return ids, header, values


def load_groups(path) -> dict:
    """Read ``sample_id -> group label`` pairs, preserving file order."""
    rows = _read_rows(path)
    if rows[0][:2] == ["sample_id", "group"]:
        rows = rows[1:]
    mapping = {}
    for row in rows:
        if len(row) != 2:
            raise InputError(f"{path}: groups file must have two columns")
        if row[0] in mapping:
            raise InputError(f"duplicate sample id in groups file: {row[0]!r}")
        mapping[row[0]] = row[1]
    return mapping


def dataset_from_labels(values, promoter_ids, sample_ids, labels) -> ExpressionDataset:
    """Build a dataset mapping group labels to indices by first appearance."""
    order = {}
    for lab in labels:
        order.setdefault(lab, len(order))
    group_of = np.array([order[lab] for lab in labels], dtype=np.int64)
    return ExpressionDataset(values, promoter_ids, sample_ids, group_of, tuple(order))


def load_dataset(expression_path, groups_path) -> ExpressionDataset:
    """Load an expression TSV and a two-column groups TSV.

    Group labels are mapped to dense indices in the order they first appear in
    the groups file. Samples in the groups file that are not in the expression
    matrix are ignored.
    """
    promoter_ids, sample_ids, values = _read_matrix(expression_path, "promoter")
    _check_unique(sample_ids, "sample")
    groups = load_groups(groups_path)
    missing = [s for s in sample_ids if s not in groups]
    if missing:
        raise InputError(f"samples absent from groups file: {missing[:5]}")
    order = {}
    for lab in groups.values():
        order.setdefault(lab, None)
    used = [lab for lab in order if lab in {groups[s] for s in sample_ids}]
    index = {lab: k for k, lab in enumerate(used)}
    group_of = np.array([index[groups[s]] for s in sample_ids], dtype=np.int64)
    ds = ExpressionDataset(values, promoter_ids, sample_ids, group_of, tuple(used))
    flat = np.ptp(ds.values, axis=1) == 0
    if np.any(flat):
        warnings.warn(f"{int(flat.sum())} promoters have zero variance across samples; "
                      "non-expressed promoters can distort variance estimates")
    return ds


def load_loadings(path, dataset: ExpressionDataset) -> MotifLoadings:
    """Load a promoter x motif TSV and reorder its rows to match ``dataset``."""
    promoter_ids, motif_ids, values = _read_matrix(path, "promoter")
    if np.any(values < 0):
        raise InputError("negative loading")
    pos = {pid: i for i, pid in enumerate(promoter_ids)}
    known = set(dataset.promoter_ids)
    unknown = [pid for pid in promoter_ids if pid not in known]
    if unknown:
        raise InputError(f"unknown promoter id in loadings: {unknown[0]!r}")
    absent = [pid for pid in dataset.promoter_ids if pid not in pos]
    if absent:
        raise InputError(f"promoters without loadings: {absent[:5]}")
    idx = [pos[pid] for pid in dataset.promoter_ids]
    return MotifLoadings(values[idx], motif_ids, dataset.promoter_ids)


# -------------------------------------------------------------- persistence

def write_matrix_tsv(path, values, row_ids, col_ids, index_name: str = "id"):
    df = pd.DataFrame(np.asarray(values), index=list(row_ids), columns=list(col_ids))
    df.index.name = index_name
    df.to_csv(path, sep="\t", float_format=FLOAT_FORMAT, lineterminator="\n")


def read_matrix_tsv(path):
    ids, header, values = _read_matrix(path, "row")
    return ids, header, values


def save_dataset(dataset: ExpressionDataset, loadings: Optional[MotifLoadings], out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_matrix_tsv(out / "expression.tsv", dataset.values, dataset.promoter_ids,
                     dataset.sample_ids)
    with open(out / "groups.tsv", "w") as fh:
        fh.write("sample_id\tgroup\n")
        for s, k in zip(dataset.sample_ids, dataset.group_of):
            fh.write(f"{s}\t{dataset.group_labels[k]}\n")
    if loadings is not None:
        write_matrix_tsv(out / "loadings.tsv", loadings.values, dataset.promoter_ids,
                         loadings.motif_ids)


def _safe_name(label: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in label)


def save_fit(params: ModelParams, posterior: Optional[PosteriorActivities], out_dir,
             motif_ids: Sequence[str] = (), group_labels: Sequence[str] = (),
             promoter_ids: Sequence[str] = (), tests: Optional[TestTable] = None):
    """Write parameters, activities, tests and posterior covariances to ``out_dir``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {out}: {exc}") from None
    if not os.access(out, os.W_OK):
        raise InputError(f"output directory is not writable: {out}")
    doc = {"params": params.to_dict(), "motif_ids": list(motif_ids),
           "group_labels": list(group_labels), "promoter_ids": list(promoter_ids)}
    with open(out / "params.txt", "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")
    if posterior is None:
        return
    m, g = posterior.mean.shape
    motif_ids = list(motif_ids) or [f"motif{i}" for i in range(m)]
    group_labels = list(group_labels) or [str(k) for k in range(g)]
    write_matrix_tsv(out / "activities.tsv", posterior.mean, motif_ids, group_labels)
    for k, lab in enumerate(group_labels):
        write_matrix_tsv(out / f"posterior_cov_{_safe_name(lab)}.tsv",
                         posterior.covariance[k], motif_ids, motif_ids)
    if tests is not None:
        cols = {c: getattr(tests, c) for c in TestTable.columns}
        for k, lab in enumerate(group_labels):
            cols[f"activity_{lab}"] = tests.activity[:, k]
        for k, lab in enumerate(group_labels):
            cols[f"z_{lab}"] = tests.z[:, k]
        df = pd.DataFrame(cols, index=motif_ids)
        df.index.name = "motif_id"
        df.to_csv(out / "tests.tsv", sep="\t", float_format=FLOAT_FORMAT,
                  lineterminator="\n", na_rep="nan")


def load_fit(out_dir):
    """Inverse of :func:`save_fit`.

    Returns
    -------
    params : ModelParams
    posterior : PosteriorActivities or None
    meta : dict
        ``motif_ids``, ``group_labels`` and ``promoter_ids`` as saved.
    """
    out = Path(out_dir)
    with open(out / "params.txt") as fh:
        doc = json.load(fh)
    params = ModelParams.from_dict(doc["params"])
    meta = {k: doc.get(k, []) for k in ("motif_ids", "group_labels", "promoter_ids")}
    act = out / "activities.tsv"
    if not act.exists():
        return params, None, meta
    _, _, mean = read_matrix_tsv(act)
    m, g = mean.shape
    cov = np.full((g, m, m), np.nan)
    for k, lab in enumerate(meta["group_labels"]):
        cpath = out / f"posterior_cov_{_safe_name(lab)}.tsv"
        if cpath.exists():
            cov[k] = read_matrix_tsv(cpath)[2]
    posterior = PosteriorActivities(mean, cov)
    tpath = out / "tests.tsv"
    if tpath.exists():
        df = pd.read_csv(tpath, sep="\t", index_col=0, float_precision="round_trip")
        z = df.iloc[:, len(TestTable.columns) + g:].to_numpy(float)
        posterior.zscores = z
        posterior.anova_stat = df["anova_chi2"].to_numpy(float)
        posterior.anova_pvalue = df["anova_p"].to_numpy(float)
        posterior.offtest_pvalue = df["offtest_p"].to_numpy(float)
    return params, posterior, meta
