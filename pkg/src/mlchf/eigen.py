"""Generalized symmetric eigensolvers ``A x = lambda B x``."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .poisson import DIRECT_LIMIT, SolverError

__all__ = ["EigResult", "solve_dense_generalized", "solve_sparse_lowest", "b_orthonormalize"]

DENSE_LIMIT = 400

Operator = Union[np.ndarray, sp.spmatrix, spla.LinearOperator]


@dataclass
class EigResult:
    """Eigenpairs sorted ascending; ``vectors`` has B-orthonormal columns."""

    values: np.ndarray
    vectors: np.ndarray
    residuals: np.ndarray
    iterations: int = 0
    method: str = "dense"


def _residuals(A, B, X, lam):
    R = A @ X - (B @ X) * lam
    scale = np.maximum(np.linalg.norm(A @ X, axis=0), np.finfo(float).tiny)
    return np.linalg.norm(R, axis=0) / scale


def solve_dense_generalized(A, B) -> EigResult:
    """Full spectrum of a dense symmetric-definite pencil."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.shape != B.shape or A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"incompatible shapes {A.shape} and {B.shape}")
    try:
        lam, X = sla.eigh(0.5 * (A + A.T), 0.5 * (B + B.T))
    except np.linalg.LinAlgError as exc:
        raise SolverError(f"B is not positive definite: {exc}") from exc
    return EigResult(lam, X, _residuals(A, B, X, lam), 0, "dense")


def b_orthonormalize(X: np.ndarray, B) -> np.ndarray:
    """Symmetric (Loewdin) orthonormalization of the columns of ``X``."""
    S = X.T @ (B @ X)
    w, U = np.linalg.eigh(0.5 * (S + S.T))
    if w.min() <= 0:
        raise SolverError("columns are linearly dependent")
    return X @ (U / np.sqrt(w)) @ U.T


def _as_dense(A, n):
    if isinstance(A, np.ndarray):
        return A
    if sp.issparse(A):
        return A.toarray()
    return A @ np.eye(n)


def _rayleigh_ritz(A, B, X, n_pairs):
    AX = A @ X
    BX = B @ X
    a = X.T @ AX
    b = X.T @ BX
    lam, C = sla.eigh(0.5 * (a + a.T), 0.5 * (b + b.T))
    return lam[:n_pairs], X @ C[:, :n_pairs]


def _default_shift(A, B):
    if sp.issparse(A) or isinstance(A, np.ndarray):
        ratio = np.asarray(A.diagonal()) / np.asarray(B.diagonal())
        return min(0.0, 1.5 * float(ratio.min())) - 1e-8 * max(1.0, abs(float(ratio.max())))
    return 0.0


def _preconditioner(A, B, precond, shift):
    if isinstance(precond, spla.LinearOperator):
        return precond
    if precond is None:
        if not sp.issparse(A):
            return None
        precond = A - shift * B
    mat = sp.csr_matrix(precond)
    if mat.shape[0] <= DIRECT_LIMIT:
        lu = spla.splu(mat.tocsc())
        return spla.LinearOperator(mat.shape, matvec=lu.solve, matmat=lu.solve, dtype=float)
    import pyamg

    ml = pyamg.smoothed_aggregation_solver(mat, symmetry="symmetric")
    return ml.aspreconditioner(cycle="V")


def solve_sparse_lowest(
    A: Operator,
    B: Operator,
    n_pairs: int,
    tol: float = 1e-9,
    x0: Optional[np.ndarray] = None,
    precond=None,
    maxiter: int = 500,
    method: str = "auto",
    seed: int = 0,
    restarts: int = 3,
) -> EigResult:
    """Lowest ``n_pairs`` eigenpairs of a large sparse symmetric pencil.

    Parameters
    ----------
    A : sparse matrix, dense array or LinearOperator
        Symmetric.
    B : sparse matrix or dense array
        Symmetric positive definite.
    tol : float
        Target relative residual ``|A x - lambda B x| / |A x|``.
    x0 : array, optional
        Warm-start block; padded with seeded random columns.
    precond : SPD matrix or LinearOperator, optional
        Approximation whose inverse is applied as preconditioner. Defaults
        to ``A - s B`` with a diagonal-based shift ``s``.
    method : {"auto", "lobpcg", "dense"}
        ``"auto"`` uses a dense solve below a few hundred unknowns.
    restarts : int
        Warm restarts of LOBPCG allowed when the residual check fails.

    Notes
    -----
    The iterative path runs LOBPCG, then a Rayleigh-Ritz step on the
    returned block and a residual check. If the check fails, shift-invert
    Lanczos is used when the system is small enough to factorize.
    """
    n = A.shape[0]
    if not 1 <= n_pairs <= n:
        raise ValueError(f"n_pairs must be in [1, {n}], got {n_pairs}")
    if method == "dense" or (method == "auto" and n <= DENSE_LIMIT):
        res = solve_dense_generalized(_as_dense(A, n), _as_dense(B, n))
        return EigResult(res.values[:n_pairs], res.vectors[:, :n_pairs], res.residuals[:n_pairs], 0, "dense")

    block = min(n, n_pairs + max(2, n_pairs // 2))
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, block))
    if x0 is not None:
        x0 = np.asarray(x0, dtype=float).reshape(n, -1)[:, :block]
        X[:, : x0.shape[1]] = x0
    shift = _default_shift(A, B)
    M = _preconditioner(A, B, precond, shift)
    iters = 0
    for _ in range(restarts + 1):
        # lobpcg's tolerance is absolute; scale it by the size of A x
        X = b_orthonormalize(X, B)
        abs_tol = 0.1 * tol * float(np.linalg.norm(A @ X, axis=0).min())
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            lam, V, hist = spla.lobpcg(
                A, X, B=B, M=M, tol=abs_tol, maxiter=maxiter, largest=False, retResidualNormsHistory=True
            )
        iters += len(hist)
        lam, V = _rayleigh_ritz(A, B, V, n_pairs)
        V = b_orthonormalize(V, B)
        lam, V = _rayleigh_ritz(A, B, V, n_pairs)
        res = _residuals(A, B, V, lam)
        if res.max() <= tol:
            break
        X = np.concatenate([V, rng.standard_normal((n, block - n_pairs))], axis=1)
    method_used = "lobpcg"
    if res.max() > tol:
        if n > DIRECT_LIMIT or not sp.issparse(A):
            raise SolverError(f"LOBPCG residual {res.max():.2e} above tolerance {tol:.1e}")
        sigma = min(shift, float(lam[0]) - 1.0)
        lam, V = spla.eigsh(sp.csc_matrix(A), k=n_pairs, M=sp.csc_matrix(B), sigma=sigma, which="LM", tol=tol * 1e-3)
        order = np.argsort(lam, kind="stable")
        lam, V = lam[order], b_orthonormalize(V[:, order], B)
        res = _residuals(A, B, V, lam)
        method_used = "shift-invert"
    return EigResult(lam, V, res, iters, method_used)
