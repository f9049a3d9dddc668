"""Cached transforms shared by the estimation, information and posterior stages."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .core_types import ExpressionDataset, MotifLoadings
from .ortho import (HelmertOperator, OrthoComplement, SvdFactors, build_complement,
                    sandwich_inverse_apply)

RowOperator = Union[HelmertOperator, OrthoComplement]


@dataclass
class FitWorkspace:
    """Centered data, the complement of the loading column space, and Gram caches.

    ``Y_centered`` and ``B`` live in the ``p``-dimensional space obtained by
    applying the row operator (Helmert contrasts by default, which removes
    promoter-independent sample intercepts). ``Y_null`` is the projection of
    ``Y_centered`` onto the orthogonal complement of ``B``'s column space,
    which removes every motif-driven term.
    """

    row_op: RowOperator
    Y_centered: np.ndarray
    B: np.ndarray
    oc: OrthoComplement
    svd: SvdFactors
    Y_null: np.ndarray
    group_of: np.ndarray
    group_sizes: np.ndarray
    gram_null: np.ndarray
    gram_Y: np.ndarray
    BtY: np.ndarray
    BtB: np.ndarray
    _sigma_cache: dict = field(default_factory=dict, repr=False)

    @property
    def p(self) -> int:
        return self.Y_centered.shape[0]

    @property
    def n(self) -> int:
        return self.Y_centered.shape[1]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def r(self) -> int:
        return self.svd.rank

    @property
    def g(self) -> int:
        return self.group_sizes.size

    @property
    def qc(self) -> np.ndarray:
        return self.svd.qc

    @property
    def householder_vectors(self) -> tuple:
        return self.oc.vectors

    @property
    def Y_double(self) -> np.ndarray:
        return HelmertOperator(self.n).apply_right(self.Y_centered)

    @property
    def Y_reml(self) -> np.ndarray:
        return HelmertOperator(self.n).apply_right(self.Y_null)

    def sigma_cache(self, sigma) -> "SigmaCache":
        sigma = np.asarray(sigma, dtype=float)
        key = sigma.tobytes()
        if key not in self._sigma_cache:
            self._sigma_cache = {key: SigmaCache.build(self, sigma)}
        return self._sigma_cache[key]


def prepare_workspace(dataset: ExpressionDataset, loadings: MotifLoadings,
                      row_op: Optional[RowOperator] = None) -> FitWorkspace:
    """Center expression and loadings and build the loading-space complement."""
    Yd = dataset.values
    Bd = loadings.values
    if Bd.shape[0] != Yd.shape[0]:
        raise ValueError("loadings and expression have different promoter counts")
    if dataset.n_samples < 2:
        raise ValueError("at least two samples are required")
    if row_op is None:
        row_op = HelmertOperator(Yd.shape[0])
    Y = row_op.apply(Yd)
    B = row_op.apply(Bd)
    oc, svd = build_complement(B)
    Y_null = oc.apply(Y)
    return FitWorkspace(
        row_op=row_op, Y_centered=Y, B=B, oc=oc, svd=svd, Y_null=Y_null,
        group_of=np.asarray(dataset.group_of), group_sizes=dataset.group_sizes,
        gram_null=Y_null.T @ Y_null, gram_Y=Y.T @ Y, BtY=B.T @ Y, BtB=B.T @ B)


def sandwich_trace(gram: np.ndarray, d: np.ndarray) -> float:
    """``tr(P gram)`` with ``P = H^T (H D H^T)^{-1} H`` for symmetric ``gram``."""
    x = 1.0 / d
    return float(np.diag(gram) @ x - (x @ gram @ x) / x.sum())


@dataclass(frozen=True)
class SigmaCache:
    """Noise-dependent quantities that stay fixed while ``tau`` and ``nu`` vary.

    ``Z = B^T Y P`` with ``P`` the sandwich inverse over samples is computed
    once per noise vector; ``trace`` is ``tr(Y P Y^T)``.
    """

    sigma: np.ndarray
    d: np.ndarray
    omega: float
    Z: np.ndarray
    trace: float

    @classmethod
    def build(cls, ws: FitWorkspace, sigma: np.ndarray) -> "SigmaCache":
        d = sigma[ws.group_of]
        Z = sandwich_inverse_apply(d, ws.BtY.T).T
        return cls(sigma, d, float(np.sum(1.0 / d)), Z, sandwich_trace(ws.gram_Y, d))


@dataclass(frozen=True)
class GroupEigen:
    """Structured eigendecomposition of ``G^{1/2} P G^{1/2}`` over samples.

    With ``P`` the sandwich inverse for ``D``, the matrix equals
    ``diag(nu/sigma) - w w^T / omega`` with ``w_i = sqrt(nu_i) / sigma_i``.
    Within-group contrasts are eigenvectors with eigenvalue ``nu_k / sigma_k``
    (multiplicity ``N_k - 1``); the remaining ``g`` eigenpairs come from a
    ``g x g`` problem on group indicator directions, one of them zero.

    Eigen-columns are ordered as the contrasts of group 0, 1, ..., followed by
    the ``g`` group-level directions.
    """

    alpha: np.ndarray
    theta: np.ndarray
    group_index: tuple
    reduced_vectors: np.ndarray
    n: int

    @classmethod
    def build(cls, group_of: np.ndarray, sigma: np.ndarray, nu: np.ndarray) -> "GroupEigen":
        group_of = np.asarray(group_of)
        g = sigma.size
        sizes = np.bincount(group_of, minlength=g).astype(float)
        index = tuple(np.flatnonzero(group_of == k) for k in range(g))
        c = nu / sigma
        omega = np.sum(sizes / sigma)
        w_hat = np.sqrt(sizes * nu) / sigma
        red = np.diag(c) - np.outer(w_hat, w_hat) / omega
        a_red, Yr = np.linalg.eigh(red)
        a_red = np.clip(a_red, 0.0, None)
        alpha = np.concatenate([np.repeat(c, sizes.astype(int) - 1), a_red])
        theta = np.zeros((g, group_of.size))
        col = 0
        for k in range(g):
            theta[k, col:col + int(sizes[k]) - 1] = 1.0
            col += int(sizes[k]) - 1
        theta[:, col:] = Yr ** 2
        return cls(alpha, theta, index, Yr, group_of.size)

    @property
    def g(self) -> int:
        return len(self.group_index)

    def project(self, X: np.ndarray) -> np.ndarray:
        """Return ``X Q_A`` for ``X`` with sample columns."""
        blocks = []
        sums = np.empty((X.shape[0], self.g))
        for k, idx in enumerate(self.group_index):
            if idx.size > 1:
                blocks.append(HelmertOperator(idx.size).apply_right(X[:, idx]))
            sums[:, k] = X[:, idx].sum(axis=1) / np.sqrt(idx.size)
        blocks.append(sums @ self.reduced_vectors)
        return np.hstack(blocks)

    def unproject(self, W: np.ndarray) -> np.ndarray:
        """Return ``W Q_A^T`` for ``W`` with eigen-columns."""
        out = np.empty((W.shape[0], self.n))
        red = W[:, self.n - self.g:] @ self.reduced_vectors.T
        col = 0
        for k, idx in enumerate(self.group_index):
            out[:, idx] = red[:, [k]] / np.sqrt(idx.size)
            if idx.size > 1:
                out[:, idx] += HelmertOperator(idx.size).apply_right_t(W[:, col:col + idx.size - 1])
                col += idx.size - 1
        return out

    def dense(self) -> np.ndarray:
        """Materialize ``Q_A``. Test oracles only."""
        return self.project(np.eye(self.n))


@dataclass(frozen=True)
class MotifEigen:
    """Eigendecomposition of ``Sigma^{1/2} B^T B Sigma^{1/2}``."""

    beta: np.ndarray
    Q: np.ndarray

    @classmethod
    def build(cls, BtB: np.ndarray, tau: np.ndarray) -> "MotifEigen":
        st = np.sqrt(tau)
        beta, Q = np.linalg.eigh(st[:, None] * BtB * st[None, :])
        return cls(np.clip(beta, 0.0, None), Q)
