"""Sparse linear algebra: restarted GMRES, ILU(0) and block preconditioners.

Sparse matrices are ``scipy.sparse`` CSR matrices with sorted indices.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numba
import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)

__all__ = [
    "GmresConfig",
    "SolveStats",
    "GmresError",
    "SingularMatrixError",
    "PivotWarning",
    "as_csr",
    "spmv",
    "gmres",
    "ILU0",
    "Preconditioner",
    "build_preconditioner",
    "dense_solve",
    "write_matrix_market",
]

PRECONDITIONERS = ("none", "block_jacobi", "block_ilu0", "coupled_ilu0", "direct")


@dataclass
class GmresConfig:
    rel_tol: float = 1e-7
    max_iters: int = 20000
    restart: int = 200
    preconditioner: str = "coupled_ilu0"

    def __post_init__(self):
        if not 0.0 < self.rel_tol < 1.0:
            raise ValueError("rel_tol must lie in (0, 1)")
        if self.restart < 1:
            raise ValueError("restart must be >= 1")
        if self.preconditioner not in PRECONDITIONERS:
            raise ValueError(f"unknown preconditioner {self.preconditioner!r}")


@dataclass
class SolveStats:
    iterations: int = 0
    rel_residual: float = np.nan
    wall_time: float = 0.0
    converged: bool = False
    history: list[float] = field(default_factory=list)


class GmresError(RuntimeError):
    """GMRES did not reach the requested tolerance; carries the best iterate."""

    def __init__(self, message: str, x: np.ndarray, stats: SolveStats):
        super().__init__(message)
        self.x = x
        self.stats = stats


class SingularMatrixError(np.linalg.LinAlgError):
    pass


class PivotWarning(RuntimeWarning):
    pass


def as_csr(A) -> sp.csr_matrix:
    A = sp.csr_matrix(A)
    A.sum_duplicates()
    A.sort_indices()
    return A


def spmv(A: sp.csr_matrix, x: np.ndarray) -> np.ndarray:
    if A.shape[1] != x.shape[0]:
        raise ValueError(f"dimension mismatch: {A.shape} times {x.shape}")
    return A @ x


# -- GMRES --------------------------------------------------------------------

def gmres(A, b: np.ndarray, config: GmresConfig | None = None,
          M: Callable[[np.ndarray], np.ndarray] | None = None,
          x0: np.ndarray | None = None) -> tuple[np.ndarray, SolveStats]:
    """Restarted GMRES with right preconditioning.

    Minimises the true residual ``||b - A x||`` over the Krylov space of
    ``A M``; convergence is declared when it drops below
    ``rel_tol * ||b||``. Raises :class:`GmresError` with the best iterate
    if ``max_iters`` is exhausted or the iteration stagnates.
    """
    cfg = config or GmresConfig()
    t0 = time.perf_counter()
    n = b.shape[0]
    if A.shape != (n, n):
        raise ValueError("GMRES needs a square system matching b")
    if not np.all(np.isfinite(b)):
        raise ValueError("right-hand side is not finite")
    apply_M = M if M is not None else (lambda v: v)
    matvec = (lambda v: A @ v) if not callable(A) else A

    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    bnorm = np.linalg.norm(b)
    stats = SolveStats()
    if bnorm == 0.0:
        stats.converged, stats.rel_residual = True, 0.0
        return np.zeros(n), stats
    target = cfg.rel_tol * bnorm
    m = cfg.restart
    total = 0
    r = b - matvec(x)
    beta = np.linalg.norm(r)
    stats.history.append(beta / bnorm)
    stagnant_cycles = 0
    while beta > target and total < cfg.max_iters:
        V = np.empty((m + 1, n))
        Z = np.empty((m, n))
        H = np.zeros((m + 1, m))
        cs = np.zeros(m)
        sn = np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        V[0] = r / beta
        k = 0
        res = beta
        while k < m and total < cfg.max_iters:
            Z[k] = apply_M(V[k])
            w = matvec(Z[k])
            # modified Gram-Schmidt with one reorthogonalisation pass
            for _ in range(2):
                h = V[:k + 1] @ w
                w = w - h @ V[:k + 1]
                H[:k + 1, k] += h
            H[k + 1, k] = np.linalg.norm(w)
            breakdown = H[k + 1, k] <= 1e-14 * np.abs(H[:k + 1, k]).max(initial=1.0)
            if not breakdown:
                V[k + 1] = w / H[k + 1, k]
            for i in range(k):
                t = cs[i] * H[i, k] + sn[i] * H[i + 1, k]
                H[i + 1, k] = -sn[i] * H[i, k] + cs[i] * H[i + 1, k]
                H[i, k] = t
            denom = np.hypot(H[k, k], H[k + 1, k])
            cs[k], sn[k] = H[k, k] / denom, H[k + 1, k] / denom
            H[k, k] = denom
            H[k + 1, k] = 0.0
            g[k + 1] = -sn[k] * g[k]
            g[k] = cs[k] * g[k]
            res = abs(g[k + 1])
            k += 1
            total += 1
            stats.history.append(res / bnorm)
            if res <= target or breakdown:
                break
        y = scipy.linalg.solve_triangular(H[:k, :k], g[:k])
        x = x + y @ Z[:k]
        r = b - matvec(x)
        new_beta = np.linalg.norm(r)
        if new_beta >= 0.999 * beta:
            stagnant_cycles += 1
            if stagnant_cycles >= 3:
                break
        else:
            stagnant_cycles = 0
        beta = new_beta
    stats.iterations = total
    stats.rel_residual = beta / bnorm
    stats.wall_time = time.perf_counter() - t0
    stats.converged = beta <= target
    if not stats.converged:
        raise GmresError(
            f"GMRES stopped at relative residual {stats.rel_residual:.3e} "
            f"after {total} iterations (target {cfg.rel_tol:.1e})", x, stats)
    return x, stats


# -- ILU(0) -------------------------------------------------------------------

@numba.njit(cache=True)
def _ilu0_factor(indptr, indices, data, pivot_floor):
    n = indptr.size - 1
    a = data.copy()
    diag = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        for k in range(indptr[i], indptr[i + 1]):
            if indices[k] == i:
                diag[i] = k
                break
    where = np.full(n, -1, dtype=np.int64)
    n_perturbed = 0
    for i in range(n):
        for k in range(indptr[i], indptr[i + 1]):
            where[indices[k]] = k
        for kk in range(indptr[i], indptr[i + 1]):
            j = indices[kk]
            if j >= i:
                break
            a[kk] /= a[diag[j]]
            lij = a[kk]
            for m in range(diag[j] + 1, indptr[j + 1]):
                pos = where[indices[m]]
                if pos >= 0:
                    a[pos] -= lij * a[m]
        if diag[i] < 0:
            return a, diag, -1
        if abs(a[diag[i]]) < pivot_floor:
            a[diag[i]] = pivot_floor if a[diag[i]] >= 0 else -pivot_floor
            n_perturbed += 1
        for k in range(indptr[i], indptr[i + 1]):
            where[indices[k]] = -1
    return a, diag, n_perturbed


@numba.njit(cache=True)
def _ilu0_solve(indptr, indices, a, diag, b):
    n = b.size
    y = b.copy()
    for i in range(n):
        s = y[i]
        for k in range(indptr[i], diag[i]):
            s -= a[k] * y[indices[k]]
        y[i] = s
    for i in range(n - 1, -1, -1):
        s = y[i]
        for k in range(diag[i] + 1, indptr[i + 1]):
            s -= a[k] * y[indices[k]]
        y[i] = s / a[diag[i]]
    return y


class ILU0:
    """Incomplete LU factorisation with the sparsity pattern of ``A``.

    Pivots smaller than ``pivot_rel * max|a_ii|`` are replaced by that floor
    and a :class:`PivotWarning` is issued.
    """

    def __init__(self, A, pivot_rel: float = 1e-12):
        A = sp.coo_matrix(A)
        if A.shape[0] != A.shape[1]:
            raise ValueError("ILU(0) needs a square matrix")
        # explicit (possibly zero) diagonal entries so every row has a pivot slot
        d = np.arange(A.shape[0])
        A = sp.csr_matrix((np.concatenate([A.data, np.zeros(d.size)]),
                           (np.concatenate([A.row, d]), np.concatenate([A.col, d]))),
                          shape=A.shape)
        A.sum_duplicates()
        A.sort_indices()
        self.shape = A.shape
        self.indptr = A.indptr.astype(np.int64)
        self.indices = A.indices.astype(np.int64)
        floor = pivot_rel * max(np.abs(A.diagonal()).max(initial=0.0), 1e-300)
        self.data, self.diag, npert = _ilu0_factor(
            self.indptr, self.indices, A.data.astype(float), floor)
        if npert < 0:
            raise SingularMatrixError("ILU(0) needs every diagonal entry in the pattern")
        self.n_perturbed = int(npert)
        if npert:
            warnings.warn(f"ILU(0): perturbed {npert} small pivots", PivotWarning,
                          stacklevel=2)

    def solve(self, b: np.ndarray) -> np.ndarray:
        return _ilu0_solve(self.indptr, self.indices, self.data, self.diag,
                           np.ascontiguousarray(b, dtype=float))

    __call__ = solve


# -- block preconditioners ------------------------------------------------------

class Preconditioner:
    """Fixed linear operator approximating the inverse of a 2x2 block matrix."""

    def __init__(self, kind: str, apply: Callable[[np.ndarray], np.ndarray]):
        self.kind = kind
        self._apply = apply

    def __call__(self, v: np.ndarray) -> np.ndarray:
        return self._apply(v)


def _splu(A):
    return spla.splu(sp.csc_matrix(A), permc_spec="COLAMD")


def build_preconditioner(blocks, kind: str = "coupled_ilu0",
                         interleave: np.ndarray | None = None) -> Preconditioner:
    """Preconditioner for ``[[A11, A12], [A21, A22]]``.

    ``blocks`` is a sequence ``(A11, A12, A21, A22)``. Kinds:

    ``none``
        identity.
    ``block_jacobi``
        exact (sparse LU) solves with the diagonal blocks.
    ``block_ilu0``
        ILU(0) of each diagonal block.
    ``coupled_ilu0``
        ILU(0) of the whole matrix after ``interleave`` reorders unknowns so
        that the state and adjoint unknowns of one vertex are adjacent.
    ``direct``
        sparse LU of the whole matrix (GMRES then converges in one step).
    """
    A11, A12, A21, A22 = blocks
    n1 = A11.shape[0]
    if kind == "none":
        return Preconditioner(kind, lambda v: v)
    if kind in ("block_jacobi", "block_ilu0"):
        if kind == "block_jacobi":
            f1, f2 = _splu(A11), _splu(A22)
        else:
            f1, f2 = ILU0(A11), ILU0(A22)

        def apply(v):
            return np.concatenate([f1.solve(v[:n1]), f2.solve(v[n1:])])

        return Preconditioner(kind, apply)
    full = as_csr(sp.bmat([[A11, A12], [A21, A22]]))
    if kind == "direct":
        lu = _splu(full)
        return Preconditioner(kind, lu.solve)
    if kind == "coupled_ilu0":
        perm = np.arange(full.shape[0]) if interleave is None else np.asarray(interleave)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(perm.size)
        ilu = ILU0(full[perm][:, perm])

        def apply(v):
            return ilu.solve(v[perm])[inv]

        return Preconditioner(kind, apply)
    raise ValueError(f"unknown preconditioner {kind!r}")


# -- dense fallback -----------------------------------------------------------

def dense_solve(A, b: np.ndarray) -> np.ndarray:
    """LU with partial pivoting for small dense systems (n <= 2000)."""
    A = np.asarray(A.toarray() if sp.issparse(A) else A, dtype=float)
    b = np.asarray(b, dtype=float)
    n = A.shape[0]
    if n > 2000:
        raise ValueError("dense_solve is limited to n <= 2000")
    if not np.any(b):
        return np.zeros_like(b)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(A, check_finite=True)
    d = np.abs(np.diag(lu))
    if d.min() <= np.finfo(float).eps * max(d.max(), 1e-300) * n:
        raise SingularMatrixError("matrix is singular to working precision")
    return scipy.linalg.lu_solve((lu, piv), b)


def write_matrix_market(path, A) -> None:
    import scipy.io
    scipy.io.mmwrite(str(path), sp.coo_matrix(A))
