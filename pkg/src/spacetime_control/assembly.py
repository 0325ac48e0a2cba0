"""Assembly of the space-time bilinear forms and block systems.

All element integrals are computed for every cell at once and scattered
into a vertex-indexed CSR matrix; DOF restriction and Dirichlet lifting
happen afterwards in :func:`apply_constraints`.
"""

from __future__ import annotations

import weakref
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .fem import (DofMap, SpaceKind, build_dof_map, quadrature,
                  quadrature_points)
from .linalg import as_csr, write_matrix_market
from .mesh import SpaceTimeMesh

__all__ = [
    "AssembledForm",
    "BlockSystem",
    "heat_element_matrices",
    "stiffness_x_element_matrices",
    "time_derivative_element_matrices",
    "assemble_element_matrices",
    "mass_element_matrices",
    "assemble_heat_form",
    "assemble_mass",
    "assemble_load",
    "assemble_coupled_system",
    "assemble_newton_system",
    "apply_constraints",
    "coefficient_at_quadrature",
    "cellwise_coupling",
    "spaces_for",
]

# a coefficient is a callable of points (N, 3) or an array of shape (M, nq)
Coefficient = Callable[[np.ndarray], np.ndarray] | np.ndarray | float | None


@dataclass(frozen=True, eq=False)
class AssembledForm:
    matrix: sp.csr_matrix
    row_space: DofMap
    col_space: DofMap

    def __post_init__(self):
        if self.matrix.shape != (self.row_space.n_dofs, self.col_space.n_dofs):
            raise ValueError("matrix shape does not match the DOF counts")


@dataclass(frozen=True, eq=False)
class BlockSystem:
    """Two-by-two block system ``[[A11, A12], [A21, A22]] (u, p) = (rhs1, rhs2)``."""

    A11: AssembledForm
    A12: AssembledForm
    A21: AssembledForm
    A22: AssembledForm
    rhs1: np.ndarray
    rhs2: np.ndarray

    def __post_init__(self):
        n1, n2 = self.A11.matrix.shape[0], self.A22.matrix.shape[0]
        ok = (self.A12.matrix.shape == (n1, self.A22.matrix.shape[1])
              and self.A21.matrix.shape == (n2, self.A11.matrix.shape[1])
              and self.rhs1.shape == (n1,) and self.rhs2.shape == (n2,))
        if not ok:
            raise ValueError("inconsistent block dimensions")

    @property
    def blocks(self):
        return (self.A11.matrix, self.A12.matrix, self.A21.matrix, self.A22.matrix)

    @property
    def sizes(self) -> tuple[int, int]:
        return self.A11.matrix.shape[1], self.A22.matrix.shape[1]

    def matrix(self) -> sp.csr_matrix:
        return as_csr(sp.bmat([[self.A11.matrix, self.A12.matrix],
                               [self.A21.matrix, self.A22.matrix]]))

    def rhs(self) -> np.ndarray:
        return np.concatenate([self.rhs1, self.rhs2])

    def residual(self, x: np.ndarray) -> np.ndarray:
        return self.matrix() @ x - self.rhs()

    def interleaving(self) -> np.ndarray:
        """Permutation placing the two unknowns of each vertex next to each other."""
        v1 = self.A11.col_space.free
        v2 = self.A22.col_space.free
        key = np.concatenate([2 * v1, 2 * v2 + 1])
        return np.argsort(key, kind="stable")

    def export(self, path) -> None:
        write_matrix_market(path, self.matrix())


# -- element matrices -----------------------------------------------------------

def heat_element_matrices(mesh: SpaceTimeMesh, time_sign: int = 1) -> np.ndarray:
    """(M, 4, 4) element matrices of ``sign * dt(u) v + grad_x u . grad_x v``.

    Row index is the test function, column index the trial function.
    """
    return stiffness_x_element_matrices(mesh) + time_sign * time_derivative_element_matrices(mesh)


def stiffness_x_element_matrices(mesh: SpaceTimeMesh) -> np.ndarray:
    """(M, 4, 4) element matrices of ``grad_x u . grad_x v``."""
    gx = mesh.basis_gradients[:, :, :2]
    return np.einsum("c,cid,cjd->cij", mesh.volumes, gx, gx)


def time_derivative_element_matrices(mesh: SpaceTimeMesh) -> np.ndarray:
    """(M, 4, 4) element matrices of ``dt(u) v`` (row: test, column: trial)."""
    g = mesh.basis_gradients
    return (mesh.volumes / 4.0)[:, None, None] * np.broadcast_to(
        g[:, None, :, 2], (mesh.n_cells, 4, 4))


_P1_MASS = (np.ones((4, 4)) + np.eye(4)) / 20.0


def coefficient_at_quadrature(mesh: SpaceTimeMesh, coeff: Coefficient, degree: int
                              ) -> np.ndarray | None:
    """Evaluate ``coeff`` at the points of the degree-``degree`` rule, shape (M, nq)."""
    if coeff is None:
        return None
    rule = quadrature(degree)
    shape = (mesh.n_cells, rule.weights.size)
    if callable(coeff):
        pts = quadrature_points(mesh, rule).reshape(-1, 3)
        vals = np.asarray(coeff(pts), dtype=float)
        return np.broadcast_to(vals, (pts.shape[0],)).reshape(shape)
    arr = np.asarray(coeff, dtype=float)
    if arr.ndim == 0:
        return np.full(shape, float(arr))
    if arr.shape != shape:
        raise ValueError(f"coefficient array has shape {arr.shape}, expected {shape}")
    return arr


def mass_element_matrices(mesh: SpaceTimeMesh, weight: Coefficient = None,
                          degree: int = 4) -> np.ndarray:
    """(M, 4, 4) element matrices of ``w u v``; exact closed form for ``w = 1``."""
    if weight is None:
        return mesh.volumes[:, None, None] * _P1_MASS
    rule = quadrature(degree)
    w = coefficient_at_quadrature(mesh, weight, degree)
    lam = rule.points
    return np.einsum("c,cq,q,qi,qj->cij", mesh.volumes, w, rule.weights, lam, lam,
                     optimize=True)


# -- scatter --------------------------------------------------------------------

class _Pattern:
    """Vertex-level CSR pattern and the map from element entries into it."""

    def __init__(self, mesh: SpaceTimeMesh):
        c = mesh.cells
        rows = np.repeat(c, 4, axis=1).ravel()
        cols = np.tile(c, (1, 4)).ravel()
        n = mesh.n_vertices
        key = rows.astype(np.int64) * n + cols
        uniq, self.slot = np.unique(key, return_inverse=True)
        r, cc = np.divmod(uniq, n)
        self.indptr = np.concatenate([[0], np.cumsum(np.bincount(r, minlength=n))])
        self.indices = cc
        self.n = n
        self.nnz = uniq.size

    def matrix(self, E: np.ndarray) -> sp.csr_matrix:
        data = np.bincount(self.slot, weights=E.reshape(-1), minlength=self.nnz)
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.n, self.n))


_PATTERNS: "weakref.WeakKeyDictionary[SpaceTimeMesh, _Pattern]" = weakref.WeakKeyDictionary()


def _scatter(mesh: SpaceTimeMesh, E: np.ndarray) -> sp.csr_matrix:
    pat = _PATTERNS.get(mesh)
    if pat is None:
        pat = _PATTERNS[mesh] = _Pattern(mesh)
    return pat.matrix(E)


def _scatter_vector(mesh: SpaceTimeMesh, e: np.ndarray) -> np.ndarray:
    return np.bincount(mesh.cells.ravel(), weights=e.ravel(), minlength=mesh.n_vertices)


def _check_maps(mesh: SpaceTimeMesh, *maps: DofMap) -> None:
    for m in maps:
        if m.n_vertices != mesh.n_vertices:
            raise ValueError("DOF map belongs to a different mesh")


def _restrict(A: sp.csr_matrix, test: DofMap, trial: DofMap) -> sp.csr_matrix:
    return as_csr(A[test.free][:, trial.free])


# -- public assembly --------------------------------------------------------------

def assemble_element_matrices(mesh: SpaceTimeMesh, E: np.ndarray, trial: DofMap,
                              test: DofMap) -> AssembledForm:
    """Scatter (M, 4, 4) element matrices and restrict to the given DOFs."""
    _check_maps(mesh, trial, test)
    E = np.asarray(E, dtype=float)
    if E.shape != (mesh.n_cells, 4, 4):
        raise ValueError(f"element matrices must have shape ({mesh.n_cells}, 4, 4)")
    return AssembledForm(_restrict(_scatter(mesh, E), test, trial), test, trial)


def assemble_heat_form(mesh: SpaceTimeMesh, trial: DofMap, test: DofMap,
                       reaction_coeff: Coefficient = None, time_sign: int = 1,
                       quad_degree: int = 4) -> AssembledForm:
    """Matrix of ``int_Q sign*dt(u) v + grad_x u . grad_x v + c u v``."""
    _check_maps(mesh, trial, test)
    if time_sign not in (1, -1):
        raise ValueError("time_sign must be +1 or -1")
    E = heat_element_matrices(mesh, time_sign)
    if reaction_coeff is not None:
        E = E + mass_element_matrices(mesh, reaction_coeff, quad_degree)
    return AssembledForm(_restrict(_scatter(mesh, E), test, trial), test, trial)


def assemble_mass(mesh: SpaceTimeMesh, trial: DofMap, test: DofMap,
                  weight: Coefficient = None, quad_degree: int = 4) -> AssembledForm:
    _check_maps(mesh, trial, test)
    E = mass_element_matrices(mesh, weight, quad_degree)
    return AssembledForm(_restrict(_scatter(mesh, E), test, trial), test, trial)


def load_vector(mesh: SpaceTimeMesh, f: Coefficient, quad_degree: int = 4) -> np.ndarray:
    """Vertex-indexed vector of ``int_Q f phi_i`` over all vertices."""
    if f is None:
        return np.zeros(mesh.n_vertices)
    rule = quadrature(quad_degree)
    vals = coefficient_at_quadrature(mesh, f, quad_degree)
    e = np.einsum("c,cq,q,qi->ci", mesh.volumes, vals, rule.weights, rule.points)
    return _scatter_vector(mesh, e)


def assemble_load(mesh: SpaceTimeMesh, f: Coefficient, test: DofMap,
                  quad_degree: int = 4) -> np.ndarray:
    _check_maps(mesh, test)
    return load_vector(mesh, f, quad_degree)[test.free]


def cellwise_coupling(mesh: SpaceTimeMesh, rho: float, cells: np.ndarray | None = None
                      ) -> sp.csr_matrix:
    """Vertex-level matrix of ``(1/rho) (Pi_0 p, v)`` with ``Pi_0`` the cell mean.

    Restricted to ``cells`` when given (the inactive set of a box-constrained
    control). Entries per cell are ``|tau| / (16 rho)``.
    """
    w = mesh.volumes / (16.0 * rho)
    if cells is not None:
        mask = np.zeros(mesh.n_cells)
        mask[cells] = 1.0
        w = w * mask
    E = np.broadcast_to(w[:, None, None], (mesh.n_cells, 4, 4))
    return _scatter(mesh, np.ascontiguousarray(E))


# -- constraints ----------------------------------------------------------------

def apply_constraints(full: tuple, rhs: tuple, trial_maps: tuple, test_maps: tuple
                      ) -> BlockSystem:
    """Eliminate constrained vertices from a vertex-indexed block system.

    ``full`` holds four vertex-level matrices ``(A11, A12, A21, A22)``,
    ``rhs`` two vertex-level vectors. Rows of constrained test vertices are
    dropped; columns of constrained trial vertices are moved to the right-hand
    side with their Dirichlet values.
    """
    X1, X2 = trial_maps
    Y1, Y2 = test_maps
    g1, g2 = X1.lifting(), X2.lifting()
    A11, A12, A21, A22 = (as_csr(A) for A in full)
    b1 = rhs[0] - A11 @ g1 - A12 @ g2
    b2 = rhs[1] - A21 @ g1 - A22 @ g2
    return BlockSystem(
        AssembledForm(_restrict(A11, Y1, X1), Y1, X1),
        AssembledForm(_restrict(A12, Y1, X2), Y1, X2),
        AssembledForm(_restrict(A21, Y2, X1), Y2, X1),
        AssembledForm(_restrict(A22, Y2, X2), Y2, X2),
        b1[Y1.free].copy(), b2[Y2.free].copy())


def spaces_for(mesh: SpaceTimeMesh, bc_regime: str = "dirichlet", u0=None):
    """State and adjoint DOF maps ``(X1, X2)`` for a boundary regime.

    Test spaces coincide with trial spaces: the state is tested with ``X2``'s
    counterpart ``Y0h = X0h`` and the adjoint with ``YTh = XTh``.
    """
    if bc_regime == "dirichlet":
        k1, k2 = SpaceKind.X0H, SpaceKind.XTH
    elif bc_regime == "neumann":
        k1, k2 = SpaceKind.X0H_NEUMANN, SpaceKind.XTH_NEUMANN
    else:
        raise ValueError(f"unknown boundary regime {bc_regime!r}")
    data = None
    if u0 is not None:
        from .mesh import BoundaryTag
        data = {BoundaryTag.SIGMA_ZERO: u0}
    return build_dof_map(mesh, k1, data), build_dof_map(mesh, k2)


def assemble_coupled_system(mesh: SpaceTimeMesh, rho: float, u_d: Coefficient,
                            bc_regime: str = "dirichlet", u0=None,
                            quad_degree: int = 4) -> BlockSystem:
    """Linear optimality system with the control eliminated by ``z = -p/rho``.

    Rows: ``rho * b(u, v) + (p, v) = 0`` and ``b'(p, q) - (u, q) = -(u_d, q)``
    with ``b'`` the backward heat form.
    """
    if not rho > 0:
        raise ValueError("rho must be positive")
    X1, X2 = spaces_for(mesh, bc_regime, u0)
    K = _scatter(mesh, heat_element_matrices(mesh, 1))
    Kt = _scatter(mesh, heat_element_matrices(mesh, -1))
    M = _scatter(mesh, mass_element_matrices(mesh))
    rhs2 = -load_vector(mesh, u_d, quad_degree)
    return apply_constraints((rho * K, M, -M, Kt), (np.zeros(mesh.n_vertices), rhs2),
                             (X1, X2), (X1, X2))


def assemble_newton_system(mesh: SpaceTimeMesh, rho: float, u_n: np.ndarray,
                           p_n: np.ndarray, R, dR, d2R, u_d: Coefficient,
                           e_u: Coefficient = None, e_z: Coefficient = None,
                           bc_regime: str = "dirichlet", u0=None,
                           box: tuple[np.ndarray, np.ndarray] | None = None,
                           quad_degree: int = 4) -> BlockSystem:
    """Linearised optimality system around the full nodal iterates ``u_n, p_n``.

    State row ``b(u,v) + (R'(u_n) u, v) - (z(p), v) = (e_u, v) - (R(u_n) - R'(u_n) u_n, v)``
    where ``z(p) = -(p + e_z)/rho``. Adjoint row
    ``b'(p,q) + (R'(u_n) p, q) + (p_n R''(u_n) u, q) - (u, q)
    = -(u_d, q) + (p_n R''(u_n) u_n, q)``.

    With ``box = (z_n, inactive)`` the control is the cellwise projected one:
    ``z_n`` holds the per-cell control at the iterate and ``inactive`` the
    cells where its generalised derivative is nonzero.
    """
    u_n = np.asarray(u_n, dtype=float)
    p_n = np.asarray(p_n, dtype=float)
    if not (np.all(np.isfinite(u_n)) and np.all(np.isfinite(p_n))):
        raise ValueError("Newton iterates must be finite")
    if not rho > 0:
        raise ValueError("rho must be positive")
    X1, X2 = spaces_for(mesh, bc_regime, u0)
    rule = quadrature(quad_degree)
    uq = u_n[mesh.cells] @ rule.points.T
    pq = p_n[mesh.cells] @ rule.points.T
    r0, r1, r2 = R(uq), dR(uq), d2R(uq)

    K = _scatter(mesh, heat_element_matrices(mesh, 1)
                 + mass_element_matrices(mesh, r1, quad_degree))
    Kt = _scatter(mesh, heat_element_matrices(mesh, -1)
                  + mass_element_matrices(mesh, r1, quad_degree))
    M = _scatter(mesh, mass_element_matrices(mesh))
    A21 = _scatter(mesh, mass_element_matrices(mesh, pq * r2, quad_degree)) - M

    rhs1 = load_vector(mesh, e_u, quad_degree) + load_vector(mesh, r1 * uq - r0, quad_degree)
    rhs2 = -load_vector(mesh, u_d, quad_degree) + load_vector(mesh, pq * r2 * uq, quad_degree)
    if box is None:
        A12 = M / rho
        rhs1 = rhs1 - load_vector(mesh, e_z, quad_degree) / rho
    else:
        z_n, inactive = box
        A12 = cellwise_coupling(mesh, rho, inactive)
        rhs1 = rhs1 + _scatter_vector(
            mesh, np.repeat((mesh.volumes * z_n / 4.0)[:, None], 4, axis=1)) + A12 @ p_n
    return apply_constraints((K, A12, A21, Kt), (rhs1, rhs2), (X1, X2), (X1, X2))
