"""Sparse Cholesky factorization specialized to the random-effects ordering.

The negative Hessian of the penalized objective has a fixed pattern: the
leading student coordinates form independent small blocks (a student's
effects only couple to teacher effects, never to other students), followed by
a comparatively small teacher part.  Eliminating the student blocks first is a
fill-free ordering for that leading part; all fill lands in the dense Schur
complement over teacher coordinates, which is factorized densely.
"""

from __future__ import annotations

from functools import cached_property

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp


class NotPositiveDefinite(np.linalg.LinAlgError):
    pass


def block_diag_sparse(blocks: np.ndarray) -> sp.csr_matrix:
    """Sparse block-diagonal matrix from an (n, d, d) stack."""
    n, d, _ = blocks.shape
    base = np.arange(n)[:, None, None] * d
    rows = np.broadcast_to(base + np.arange(d)[None, :, None], blocks.shape).ravel()
    cols = np.broadcast_to(base + np.arange(d)[None, None, :], blocks.shape).ravel()
    return sp.csr_matrix((blocks.ravel(), (rows, cols)), shape=(n * d, n * d))


def extract_diag_blocks(A: sp.spmatrix, n: int, d: int) -> np.ndarray:
    """The (n, d, d) diagonal blocks of the leading n*d coordinates of A."""
    out = np.empty((n, d, d))
    for k in range(d):
        diag = A.diagonal(k)
        for a in range(d - k):
            vals = diag[a: n * d: d][:n]
            out[:, a, a + k] = vals
            out[:, a + k, a] = vals
    return out


class StructuredCholesky:
    """Factorization of a symmetric positive definite ``A`` (q x q, sparse).

    ``n_blocks`` blocks of size ``block_dim`` lead the ordering.
    """

    def __init__(self, A: sp.spmatrix, n_blocks: int, block_dim: int):
        A = sp.csr_matrix(A)
        self.q = A.shape[0]
        self.n = n_blocks
        self.d = block_dim
        ns = self.ns = n_blocks * block_dim
        self.qt = self.q - ns
        blocks = extract_diag_blocks(A, n_blocks, block_dim)
        try:
            chol = np.linalg.cholesky(blocks)
        except np.linalg.LinAlgError:
            raise NotPositiveDefinite("student block not positive definite") from None
        self.blocks = blocks
        self.block_inv = np.linalg.inv(blocks)
        self.block_inv = 0.5 * (self.block_inv + np.transpose(self.block_inv, (0, 2, 1)))
        self._logdet_s = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2)))
        self.Dinv = block_diag_sparse(self.block_inv)
        if self.qt:
            B = A[:ns, ns:]
            self.M = (self.Dinv @ B).tocsr()
            C = A[ns:, ns:].toarray() - (B.T @ self.M).toarray()
            C = 0.5 * (C + C.T)
            try:
                self.Lc = sla.cholesky(C, lower=True, check_finite=False)
            except sla.LinAlgError:
                raise NotPositiveDefinite("teacher Schur complement not positive definite") from None
            if not np.all(np.isfinite(self.Lc)):
                raise NotPositiveDefinite("non-finite factor")
            self._logdet_t = 2.0 * np.sum(np.log(np.diag(self.Lc)))
        else:
            self.M = sp.csr_matrix((ns, 0))
            self.Lc = np.zeros((0, 0))
            self._logdet_t = 0.0

    @property
    def logdet(self) -> float:
        return float(self._logdet_s + self._logdet_t)

    def _solve_C(self, b):
        return sla.cho_solve((self.Lc, True), b, check_finite=False)

    def solve(self, b: np.ndarray) -> np.ndarray:
        bs, bt = b[: self.ns], b[self.ns:]
        if self.qt:
            xt = self._solve_C(bt - self.M.T @ bs)
            xs = self.Dinv @ bs - self.M @ xt
        else:
            xt = bt[:0]
            xs = self.Dinv @ bs
        return np.concatenate([xs, xt])

    # -- pieces of the inverse ----------------------------------------------

    @cached_property
    def V_tt(self) -> np.ndarray:
        if not self.qt:
            return np.zeros((0, 0))
        V = self._solve_C(np.eye(self.qt))
        return 0.5 * (V + V.T)

    @cached_property
    def V_st(self) -> np.ndarray:
        return -(self.M @ self.V_tt)

    @cached_property
    def V_ss_blocks(self) -> np.ndarray:
        """(n, d, d) diagonal blocks of the student part of A^{-1}."""
        out = self.block_inv.copy()
        if self.qt:
            P = -self.V_st  # M V_tt
            Md = self.M.toarray()
            d = self.d
            for a in range(d):
                for b in range(a, d):
                    v = np.einsum("ik,ik->i", P[a::d], Md[b::d])
                    out[:, a, b] += v
                    if b != a:
                        out[:, b, a] += v
        return out

    @cached_property
    def diag_inv(self) -> np.ndarray:
        ds = np.diagonal(self.V_ss_blocks, axis1=1, axis2=2).ravel()
        return np.concatenate([ds, np.diag(self.V_tt)])

    def quad_rows(self, D: sp.spmatrix) -> np.ndarray:
        """diag(D A^{-1} D') for a sparse row matrix D (N x q).

        With Q = D_t - D_s M the student-student part of A^{-1} contributes
        through D^{-1} and the rest collapses to rowdot(Q V_tt, Q).
        """
        D = sp.csr_matrix(D)
        Ds = D[:, : self.ns]
        out = np.asarray((Ds @ self.Dinv).multiply(Ds).sum(axis=1)).ravel()
        if self.qt:
            Q = D[:, self.ns:].toarray() - np.asarray((Ds @ self.M).todense())
            out += np.einsum("ij,ij->i", Q @ self.V_tt, Q)
        return out
