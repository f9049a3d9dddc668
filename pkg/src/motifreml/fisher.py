"""Expected Fisher information of the activity covariance parameters.

With ``S`` the covariance of the whitened data and ``S_i`` its derivative in
parameter ``i``, the information is ``1/2 tr(S^{-1} S_i S^{-1} S_j)``. In the
joint eigenbasis of ``A^T A (x) C^T C`` every block reduces to sums over the
eigenvalue products ``t = ab / (ab + 1)``, and no ``nm x nm`` matrix is formed.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core_types import ModelParams
from .ortho import commutation_permutation
from .workspace import FitWorkspace, GroupEigen, MotifEigen

IDENT_TOL = 1e-10
UNDERFLOW = 1e-300


class NonIdentifiableError(np.linalg.LinAlgError):
    """The assembled information matrix is not positive definite."""


@dataclass(frozen=True)
class _Spectrum:
    eA: GroupEigen
    eB: MotifEigen
    t: np.ndarray  # (m, n): t[l, k] for motif eigenvalue l and sample eigenvalue k


def _spectrum(ws: FitWorkspace, params: ModelParams) -> _Spectrum:
    eA = GroupEigen.build(ws.group_of, params.sigma, params.nu)
    eB = MotifEigen.build(ws.BtB, params.tau)
    # eigenvalues of the Kronecker product in sample-major order, then
    # regrouped motif-major with the commutation permutation
    ab = np.multiply.outer(eA.alpha, eB.beta).ravel()
    s = ab / (ab + 1.0)
    t = s[commutation_permutation(ws.m, ws.n)].reshape(ws.m, ws.n)
    return _Spectrum(eA, eB, t)


def _unique_columns(eA: GroupEigen):
    """Sample eigen-columns grouped by identical eigenvalue: (column, multiplicity)."""
    cols, mult = [], []
    col = 0
    for idx in eA.group_index:
        if idx.size > 1:
            cols.append(col)
            mult.append(idx.size - 1)
            col += idx.size - 1
    for r in range(eA.g):
        cols.append(col + r)
        mult.append(1)
    return np.array(cols), np.array(mult, dtype=float)


def fim_tau_block(ws: FitWorkspace, params: ModelParams,
                  spectrum: Optional[_Spectrum] = None) -> np.ndarray:
    """Information block of the motif variances ``tau``.

    Equals ``1/2 sum_k Lam_k * Lam_k / (tau tau^T)`` with
    ``Lam_k = Q_B diag(t[:, k]) Q_B^T``; sample eigenvalues shared by a whole
    group's contrasts are visited once with their multiplicity.
    """
    spectrum = spectrum or _spectrum(ws, params)
    Q = spectrum.eB.Q
    acc = np.zeros((ws.m, ws.m))
    cols, mult = _unique_columns(spectrum.eA)
    for c, w in zip(cols, mult):
        Lam = (Q * spectrum.t[:, c]) @ Q.T
        acc += w * Lam * Lam
    tau = params.tau
    return 0.5 * acc / np.outer(tau, tau)


def fim_nu_block(ws: FitWorkspace, params: ModelParams,
                 spectrum: Optional[_Spectrum] = None) -> np.ndarray:
    """Information block of the group scales ``nu``.

    For motif eigenvalue ``l`` let ``Gam_l = Q_A diag(t[l, :]) Q_A^T`` over
    samples. Its group-aggregated square ``Ind (Gam_l * Gam_l) Ind^T`` equals
    ``R_l * R_l + diag((N_k - 1) t_c^2)`` where ``R_l`` is the ``g x g`` image on
    group-level directions and ``t_c`` the within-group contrast values.
    """
    spectrum = spectrum or _spectrum(ws, params)
    eA = spectrum.eA
    g = eA.g
    red = spectrum.t[:, ws.n - g:]
    Yr = eA.reduced_vectors
    acc = np.zeros((g, g))
    for l in range(ws.m):
        R = (Yr * red[l]) @ Yr.T
        acc += R * R
    cols, mult = _unique_columns(eA)
    ncontrast = len(cols) - g
    sizes = np.array([idx.size for idx in eA.group_index])
    contrast_groups = np.flatnonzero(sizes > 1)
    for c, w, k in zip(cols[:ncontrast], mult[:ncontrast], contrast_groups):
        acc[k, k] += w * np.sum(spectrum.t[:, c] ** 2)
    nu = params.nu
    return 0.5 * acc / np.outer(nu, nu)


def fim_mixed_block(ws: FitWorkspace, params: ModelParams,
                    spectrum: Optional[_Spectrum] = None) -> np.ndarray:
    """Cross information between ``tau`` (rows) and ``nu`` (columns).

    Entry ``(i, j)`` is ``1/2 sum_{l,k} t[l,k]^2 Q_B[i,l]^2 theta[j,k] / (tau_i nu_j)``
    where ``theta[j, k]`` is the squared mass of sample eigenvector ``k`` on group
    ``j``. The double sum is evaluated as two thin matrix products, so only
    ``m x n`` and ``m x g`` intermediates exist.
    """
    spectrum = spectrum or _spectrum(ws, params)
    zeta = spectrum.t ** 2
    zeta[zeta < UNDERFLOW] = 0.0
    acc = (spectrum.eB.Q ** 2) @ zeta @ spectrum.eA.theta.T
    return 0.5 * acc / np.outer(params.tau, params.nu)


@dataclass(frozen=True)
class FimResult:
    """Assembled information matrix with the pinned parameter removed.

    ``ordering`` lists ``("tau", i)`` entries followed by ``("nu", j)`` entries.
    """

    matrix: np.ndarray
    ordering: tuple
    covariance: np.ndarray

    def standard_errors(self, kind: str, size: int) -> np.ndarray:
        se = np.full(size, np.nan)
        diag = np.sqrt(np.diag(self.covariance))
        for pos, (name, idx) in enumerate(self.ordering):
            if name == kind:
                se[idx] = diag[pos]
        return se


def assemble_fim(tau_block: Optional[np.ndarray], nu_block: np.ndarray,
                 mixed_block: Optional[np.ndarray], fixed_index: Optional[int]) -> FimResult:
    """Stack the blocks (``tau`` first), drop the pinned ``nu`` and invert by Cholesky."""
    g = nu_block.shape[0]
    keep_nu = [j for j in range(g) if j != fixed_index]
    if tau_block is None:
        F = nu_block
        ordering = [("nu", j) for j in range(g)]
        sel = keep_nu
    else:
        m = tau_block.shape[0]
        F = np.block([[tau_block, mixed_block], [mixed_block.T, nu_block]])
        ordering = [("tau", i) for i in range(m)] + [("nu", j) for j in range(g)]
        sel = list(range(m)) + [m + j for j in keep_nu]
    F = F[np.ix_(sel, sel)]
    F = 0.5 * (F + F.T)
    ordering = tuple(ordering[i] for i in sel)
    err = NonIdentifiableError("information matrix is not positive definite; "
                               "the fit is not identifiable")
    # judge definiteness on the scale-free correlation form, where round-off
    # can no longer pass a flat direction off as a tiny positive eigenvalue
    d = np.sqrt(np.diag(F))
    if not np.all(d > 0) or np.linalg.eigvalsh(F / np.outer(d, d))[0] < IDENT_TOL:
        raise err
    try:
        L = np.linalg.cholesky(F)
    except np.linalg.LinAlgError:
        raise err from None
    Linv = np.linalg.solve(L, np.eye(F.shape[0]))
    return FimResult(F, ordering, Linv.T @ Linv)


def fisher_information(ws: FitWorkspace, params: ModelParams, estimate_tau: bool = True
                       ) -> FimResult:
    spectrum = _spectrum(ws, params)
    nu_block = fim_nu_block(ws, params, spectrum)
    if not estimate_tau:
        return assemble_fim(None, nu_block, None, None)
    return assemble_fim(fim_tau_block(ws, params, spectrum), nu_block,
                        fim_mixed_block(ws, params, spectrum), params.fixed_index)
