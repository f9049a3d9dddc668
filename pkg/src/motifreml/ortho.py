"""Implicit orthogonal operators used to remove nuisance means.

All operators here act on columns (or rows) of dense arrays without ever
building the underlying square or rectangular orthogonal matrix, so memory
stays linear in the ambient dimension.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _helmert_coefs(k: int) -> np.ndarray:
    j = np.arange(1, k, dtype=float)
    return np.sqrt(j / (j + 1.0))


@dataclass(frozen=True)
class HelmertOperator:
    """Semi-orthogonal ``(k-1) x k`` contrast matrix annihilating constants.

    Row ``j`` (1-based) is ``(1, ..., 1, -j, 0, ..., 0) / sqrt(j (j + 1))``
    with ``j`` leading ones, i.e. it contrasts element ``j`` against the mean
    of the preceding ones. Rows are orthonormal and orthogonal to the vector
    of ones, hence ``H^T H = I - 11^T / k``.
    """

    k: int

    def __post_init__(self):
        if self.k < 2:
            raise ValueError(f"Helmert operator needs k >= 2, got {self.k}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.k - 1, self.k

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Return ``H X`` for ``X`` of shape ``(k, ...)``."""
        X = np.asarray(X, dtype=float)
        if X.shape[0] != self.k:
            raise ValueError(f"expected {self.k} rows, got {X.shape[0]}")
        j = np.arange(1, self.k, dtype=float).reshape((-1,) + (1,) * (X.ndim - 1))
        c = _helmert_coefs(self.k).reshape(j.shape)
        prefix = np.cumsum(X[:-1], axis=0)
        return (prefix / j - X[1:]) * c

    def apply_t(self, Y: np.ndarray) -> np.ndarray:
        """Return ``H^T Y`` for ``Y`` of shape ``(k - 1, ...)``."""
        Y = np.asarray(Y, dtype=float)
        if Y.shape[0] != self.k - 1:
            raise ValueError(f"expected {self.k - 1} rows, got {Y.shape[0]}")
        shape = (-1,) + (1,) * (Y.ndim - 1)
        j = np.arange(1, self.k, dtype=float).reshape(shape)
        c = _helmert_coefs(self.k).reshape(shape)
        w = Y * (c / j)
        out = np.zeros((self.k,) + Y.shape[1:])
        # element i receives c_j / j * y_j from every row j > i
        out[:-1] = np.cumsum(w[::-1], axis=0)[::-1]
        out[1:] -= c * Y
        return out

    def apply_right(self, X: np.ndarray) -> np.ndarray:
        """Return ``X H^T`` for ``X`` of shape ``(c, k)``."""
        return self.apply(np.asarray(X, dtype=float).T).T

    def apply_right_t(self, Y: np.ndarray) -> np.ndarray:
        """Return ``Y H`` for ``Y`` of shape ``(c, k - 1)``."""
        return self.apply_t(np.asarray(Y, dtype=float).T).T

    def dense(self) -> np.ndarray:
        """Materialize ``H``. Intended for small test oracles only."""
        return self.apply(np.eye(self.k))


def helmert_apply(op: HelmertOperator, X: np.ndarray, side: str = "left") -> np.ndarray:
    """Apply a Helmert operator from the left (``H X``) or right (``X H^T``)."""
    if side == "left":
        return op.apply(X)
    if side in ("right", "right-transpose"):
        return op.apply_right(X)
    raise ValueError(f"unknown side {side!r}")


def _check_positive(d: np.ndarray) -> np.ndarray:
    d = np.asarray(d, dtype=float)
    if d.ndim != 1 or not np.all(d > 0):
        raise ValueError("diagonal entries must be a vector of positive reals")
    return d


def sandwich_inverse_apply(d: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Compute ``H^T (H D H^T)^{-1} H v`` for ``D = diag(d)`` in linear time.

    The product equals ``D^{-1} v - (1^T D^{-1} v / 1^T D^{-1} 1) D^{-1} 1``.
    ``v`` may be a matrix, in which case the operator acts on its columns.
    """
    d = _check_positive(d)
    v = np.asarray(v, dtype=float)
    inv = (1.0 / d).reshape((-1,) + (1,) * (v.ndim - 1))
    dv = inv * v
    return dv - inv * (dv.sum(axis=0) / inv.sum())


def sandwich_logdet(d: np.ndarray) -> float:
    """``ln det(H D H^T) = sum ln d + ln sum(1/d) - ln k``."""
    d = _check_positive(d)
    return float(np.sum(np.log(d)) + np.log(np.sum(1.0 / d)) - np.log(d.size))


def sandwich_prefactor(d: np.ndarray) -> float:
    """Scalar ``det(D) / (k det(H D H^T))``, which simplifies to ``1 / 1^T D^{-1} 1``."""
    d = _check_positive(d)
    return float(1.0 / np.sum(1.0 / d))


class RankError(ValueError):
    """Raised when a loading matrix has no numerically non-zero singular value."""


@dataclass(frozen=True)
class OrthoComplement:
    """Orthonormal complement ``Q_N`` of an orthonormal basis ``Q_C``.

    Stored as ``r`` Householder reflections ``I - tau_j u_j u_j^T`` with
    ``u_j[0] = 1``; their product ``Q`` has ``Q[:, :r] = Q_C diag(signs)`` and
    ``Q[:, r:] = Q_N``. Storage is ``O(p r)``.
    """

    vectors: tuple
    taus: np.ndarray
    signs: np.ndarray
    p: int

    @property
    def r(self) -> int:
        return len(self.vectors)

    @classmethod
    def from_basis(cls, qc: np.ndarray) -> "OrthoComplement":
        """Build reflections from an orthonormal ``p x r`` basis via Householder QR."""
        R = np.array(qc, dtype=float, copy=True)
        p, r = R.shape
        if r > p:
            raise ValueError("basis has more columns than rows")
        vectors, taus, signs = [], np.zeros(r), np.zeros(r)
        for j in range(r):
            x = R[j:, j]
            norm = np.linalg.norm(x)
            s = 1.0 if x[0] >= 0 else -1.0
            alpha = -s * norm
            u = x.copy()
            u[0] -= alpha
            if u[0] == 0.0:
                # x is already -alpha e_1; identity reflection
                u = np.zeros_like(x)
                u[0] = 1.0
                tau = 0.0
                alpha = x[0]
            else:
                u /= u[0]
                tau = 2.0 / (u @ u)
            R[j:, j:] -= tau * np.outer(u, u @ R[j:, j:])
            vectors.append(u)
            taus[j] = tau
            signs[j] = 1.0 if alpha >= 0 else -1.0
        return cls(tuple(vectors), taus, signs, p)

    def _reflect_forward(self, X: np.ndarray) -> np.ndarray:
        # computes Q^T X = H_r ... H_1 X
        X = np.array(X, dtype=float, copy=True)
        for j, (u, tau) in enumerate(zip(self.vectors, self.taus)):
            if tau != 0.0:
                X[j:] -= tau * np.multiply.outer(u, u @ X[j:])
        return X

    def _reflect_backward(self, X: np.ndarray) -> np.ndarray:
        # computes Q X = H_1 ... H_r X
        X = np.array(X, dtype=float, copy=True)
        for j in range(self.r - 1, -1, -1):
            u, tau = self.vectors[j], self.taus[j]
            if tau != 0.0:
                X[j:] -= tau * np.multiply.outer(u, u @ X[j:])
        return X

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Return ``Q_N^T X`` of shape ``(p - r, ...)``."""
        X = np.asarray(X, dtype=float)
        if X.shape[0] != self.p:
            raise ValueError(f"expected {self.p} rows, got {X.shape[0]}")
        return self._reflect_forward(X)[self.r:]

    def apply_t(self, Y: np.ndarray) -> np.ndarray:
        """Return ``Q_N Y`` for ``Y`` of shape ``(p - r, ...)``."""
        Y = np.asarray(Y, dtype=float)
        if Y.shape[0] != self.p - self.r:
            raise ValueError(f"expected {self.p - self.r} rows, got {Y.shape[0]}")
        full = np.zeros((self.p,) + Y.shape[1:])
        full[self.r:] = Y
        return self._reflect_backward(full)

    def basis_apply(self, X: np.ndarray) -> np.ndarray:
        """Return ``Q_C^T X`` using the stored reflections and sign corrections."""
        top = self._reflect_forward(X)[: self.r]
        return top * self.signs.reshape((-1,) + (1,) * (top.ndim - 1))


@dataclass(frozen=True)
class SvdFactors:
    """Reduced SVD ``B = Q_C diag(s) V``, truncated at the numerical rank."""

    qc: np.ndarray
    s: np.ndarray
    vt: np.ndarray

    @property
    def rank(self) -> int:
        return self.s.size


def numerical_rank(s: np.ndarray, shape: tuple[int, int]) -> int:
    if s.size == 0 or s[0] == 0:
        return 0
    tol = max(shape) * np.finfo(float).eps * s[0]
    return int(np.sum(s > tol))


def build_complement(B: np.ndarray) -> tuple[OrthoComplement, SvdFactors]:
    """Split ``R^p`` into the column space of ``B`` and its orthogonal complement."""
    B = np.asarray(B, dtype=float)
    U, s, Vt = np.linalg.svd(B, full_matrices=False)
    r = numerical_rank(s, B.shape)
    if r == 0:
        raise RankError("loading matrix has rank 0 after centering")
    svd = SvdFactors(U[:, :r], s[:r], Vt[:r])
    return OrthoComplement.from_basis(svd.qc), svd


def complement_apply(oc: OrthoComplement, X: np.ndarray) -> np.ndarray:
    """Return ``Q_N^T X``."""
    return oc.apply(X)


def commutation_permutation(n: int, m: int) -> np.ndarray:
    """Diagonal permutation induced by conjugation with the commutation matrix.

    For ``C`` with ``C vec(A) = vec(A^T)`` (``A`` of shape ``n x m``,
    column-major ``vec``) and diagonal ``S``, ``diag(C S C^T) = diag(S)[pi]``
    with ``pi(i) = n (i mod m) + floor(i / m)``.
    """
    if n < 1 or m < 1:
        raise ValueError("dimensions must be positive")
    i = np.arange(n * m)
    return n * (i % m) + i // m


def complement_of_vector(v: np.ndarray) -> OrthoComplement:
    """Semi-orthogonal ``(k-1) x k`` operator whose rows are orthogonal to ``v``."""
    v = np.asarray(v, dtype=float)
    norm = np.linalg.norm(v)
    if norm == 0:
        raise ValueError("zero vector has no complement direction")
    return OrthoComplement.from_basis((v / norm)[:, None])
