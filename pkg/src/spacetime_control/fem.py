"""Continuous piecewise-linear finite elements on space-time meshes."""

from __future__ import annotations

import enum
import warnings
from collections.abc import Callable, Mapping
from dataclasses import dataclass
from math import factorial

import numpy as np

from .mesh import BoundaryTag, MeshError, SpaceTimeMesh

__all__ = [
    "SpaceKind",
    "DofMap",
    "ElementGeometry",
    "QuadratureRule",
    "InterpolationWarning",
    "OutOfDomainError",
    "DegenerateElementError",
    "build_dof_map",
    "element_geometry",
    "barycentric_gradients",
    "quadrature",
    "quadrature_points",
    "fe_at_quadrature",
    "evaluate_fe",
    "interpolate",
    "simplex_monomial_integral",
]

Function = Callable[[np.ndarray], np.ndarray]


class SpaceKind(enum.Enum):
    X0H = "X0h"  # zero on Sigma_0 and lateral boundary
    XTH = "XTh"  # zero on Sigma_T and lateral boundary
    X0H_NEUMANN = "X0hNeumann"  # zero on Sigma_0 only
    XTH_NEUMANN = "XThNeumann"  # zero on Sigma_T only
    FULL = "Full"

    @property
    def constrained_tags(self) -> tuple[BoundaryTag, ...]:
        return _CONSTRAINED[self]

    @property
    def neumann(self) -> bool:
        return self in (SpaceKind.X0H_NEUMANN, SpaceKind.XTH_NEUMANN)


_CONSTRAINED = {
    SpaceKind.X0H: (BoundaryTag.SIGMA_ZERO, BoundaryTag.LATERAL),
    SpaceKind.XTH: (BoundaryTag.SIGMA_T, BoundaryTag.LATERAL),
    SpaceKind.X0H_NEUMANN: (BoundaryTag.SIGMA_ZERO,),
    SpaceKind.XTH_NEUMANN: (BoundaryTag.SIGMA_T,),
    SpaceKind.FULL: (),
}


class InterpolationWarning(UserWarning):
    pass


class OutOfDomainError(ValueError):
    pass


class DegenerateElementError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DofMap:
    """Numbering of the unconstrained vertices of a P1 space.

    ``dirichlet_values[i]`` is the prescribed value at vertex
    ``constrained[i]``.
    """

    kind: SpaceKind
    vertex_to_dof: np.ndarray
    free: np.ndarray
    constrained: np.ndarray
    dirichlet_values: np.ndarray

    @property
    def n_dofs(self) -> int:
        return self.free.size

    @property
    def n_vertices(self) -> int:
        return self.vertex_to_dof.size

    def expand(self, x: np.ndarray) -> np.ndarray:
        """Full nodal vector from DOF values plus Dirichlet values."""
        full = np.empty(self.n_vertices)
        full[self.free] = x
        full[self.constrained] = self.dirichlet_values
        return full

    def restrict(self, full: np.ndarray) -> np.ndarray:
        return np.asarray(full)[self.free]

    def lifting(self) -> np.ndarray:
        """Nodal vector that is zero on free vertices and carries Dirichlet data."""
        full = np.zeros(self.n_vertices)
        full[self.constrained] = self.dirichlet_values
        return full


def build_dof_map(mesh: SpaceTimeMesh, kind: SpaceKind,
                  dirichlet_data: Function | Mapping[BoundaryTag, Function] | None = None
                  ) -> DofMap:
    """Mark vertices on the boundary parts fixed by ``kind`` as constrained.

    ``dirichlet_data`` is either one function applied at every constrained
    vertex or a mapping from boundary tag to function; constrained vertices
    not covered by the mapping get the value 0.
    """
    kind = SpaceKind(kind)
    tags = kind.constrained_tags
    if tags:
        constrained = mesh.boundary_vertices(*tags)
    else:
        constrained = np.empty(0, dtype=np.int64)
    vertex_to_dof = np.full(mesh.n_vertices, -1, dtype=np.int64)
    mask = np.ones(mesh.n_vertices, dtype=bool)
    mask[constrained] = False
    free = np.flatnonzero(mask)
    vertex_to_dof[free] = np.arange(free.size)

    values = np.zeros(constrained.size)
    if dirichlet_data is not None:
        if isinstance(dirichlet_data, Mapping):
            for tag, fn in dirichlet_data.items():
                tag = BoundaryTag(tag)
                if tag not in tags:
                    raise ValueError(
                        f"Dirichlet data on {tag.name} is not a constrained part of {kind.value}")
                on_tag = np.isin(constrained, mesh.boundary_vertices(tag))
                values[on_tag] = fn(mesh.vertices[constrained[on_tag]])
        else:
            values[:] = dirichlet_data(mesh.vertices[constrained])
    return DofMap(kind, vertex_to_dof, free, constrained, values)


# -- geometry -----------------------------------------------------------------

@dataclass(frozen=True)
class ElementGeometry:
    volume: float
    grad_phi: np.ndarray  # (4, 3)

    @property
    def grad_x_phi(self) -> np.ndarray:
        return self.grad_phi[:, :2]

    @property
    def dt_phi(self) -> np.ndarray:
        return self.grad_phi[:, 2]


def barycentric_gradients(mesh: SpaceTimeMesh) -> np.ndarray:
    """(M, 4, 3) constant gradients of the four P1 basis functions per cell."""
    if np.any(mesh.volumes <= 1e-14 * mesh.h ** 3):
        raise DegenerateElementError("mesh contains a degenerate cell")
    return mesh.basis_gradients


def element_geometry(mesh: SpaceTimeMesh, cell: int) -> ElementGeometry:
    X = mesh.vertices[mesh.cells[cell]]
    J = (X[1:] - X[0]).T
    vol = abs(np.linalg.det(J)) / 6.0
    if vol <= 1e-14:
        raise DegenerateElementError(f"cell {cell} has volume {vol:g}")
    inv = np.linalg.inv(J)
    g = np.vstack([-inv.sum(axis=0), inv])
    return ElementGeometry(vol, g)


# -- quadrature ---------------------------------------------------------------

@dataclass(frozen=True)
class QuadratureRule:
    """Rule on the reference tetrahedron in barycentric coordinates.

    Weights sum to one; multiply by the cell volume on use.
    """

    points: np.ndarray  # (nq, 4)
    weights: np.ndarray  # (nq,)
    exactness_degree: int


def _orbit(*coords):
    from itertools import permutations
    return sorted(set(permutations(coords)))


def _build_rules() -> dict[int, QuadratureRule]:
    rules = {}
    rules[1] = QuadratureRule(np.full((1, 4), 0.25), np.ones(1), 1)

    a, b = 0.5854101966249685, 0.1381966011250105
    rules[2] = QuadratureRule(np.array(_orbit(a, b, b, b)), np.full(4, 0.25), 2)

    # 14-point rule with positive weights, exact for degree 5
    a1, w1 = 0.3108859192633006, 0.1126879257180159
    a2, w2 = 0.0927352503108912, 0.0734930431163620
    b3, w3 = 0.0455037041256496, 0.0425460207770815
    pts, wts = [], []
    for aa, ww in ((a1, w1), (a2, w2)):
        o = _orbit(aa, aa, aa, 1 - 3 * aa)
        pts += o
        wts += [ww] * len(o)
    o = _orbit(b3, b3, 0.5 - b3, 0.5 - b3)
    pts += o
    wts += [w3] * len(o)
    w = np.array(wts)
    rules[4] = QuadratureRule(np.array(pts), w / w.sum(), 5)
    return rules


_RULES = _build_rules()


def quadrature(degree: int) -> QuadratureRule:
    try:
        return _RULES[int(degree)]
    except KeyError:
        raise ValueError(f"unsupported quadrature degree {degree}; use 1, 2 or 4") from None


def simplex_monomial_integral(alpha) -> float:
    """Integral of prod(lambda_i^alpha_i) over a simplex of unit volume."""
    alpha = [int(a) for a in alpha]
    num = np.prod([factorial(a) for a in alpha]) * factorial(len(alpha) - 1)
    return num / factorial(sum(alpha) + len(alpha) - 1)


def quadrature_points(mesh: SpaceTimeMesh, rule: QuadratureRule,
                      cells: np.ndarray | None = None) -> np.ndarray:
    """(M, nq, 3) physical quadrature points."""
    X = mesh.cell_coords if cells is None else mesh.cell_coords[cells]
    return np.einsum("qi,cid->cqd", rule.points, X)


def fe_at_quadrature(mesh: SpaceTimeMesh, nodal: np.ndarray, rule: QuadratureRule
                     ) -> np.ndarray:
    """(M, nq) values of a P1 function given by full nodal values."""
    return nodal[mesh.cells] @ rule.points.T


# -- evaluation ---------------------------------------------------------------

def _locate(mesh: SpaceTimeMesh, point: np.ndarray, tol: float = 1e-12):
    inv = mesh.inverse_jacobians
    x0 = mesh.cell_coords[:, 0, :]
    lam = np.einsum("cij,cj->ci", inv, point - x0)
    lam = np.column_stack([1.0 - lam.sum(axis=1), lam])
    inside = np.all(lam >= -tol, axis=1)
    if not np.any(inside):
        raise OutOfDomainError(f"point {point} is outside the mesh")
    c = int(np.argmax(inside))
    return c, lam[c]


def evaluate_fe(mesh: SpaceTimeMesh, nodal: np.ndarray, point) -> float:
    """Value at ``point`` of the P1 function with full nodal values ``nodal``."""
    point = np.asarray(point, dtype=float)
    if np.any(point < -1e-12) or np.any(point > 1 + 1e-12):
        raise OutOfDomainError(f"point {point} is outside Q")
    c, lam = _locate(mesh, point)
    return float(lam @ nodal[mesh.cells[c]])


def interpolate(f: Function, mesh: SpaceTimeMesh, dofmap: DofMap | None = None,
                tol: float = 1e-10) -> np.ndarray:
    """Nodal interpolant.

    With a ``dofmap`` the DOF vector is returned; constrained vertices keep
    their Dirichlet values, and a warning is issued where ``f`` disagrees
    with them by more than ``tol``. Without one, full nodal values are
    returned.
    """
    vals = np.asarray(f(mesh.vertices), dtype=float)
    if vals.shape != (mesh.n_vertices,):
        vals = np.broadcast_to(vals, (mesh.n_vertices,)).copy()
    if not np.all(np.isfinite(vals)):
        raise MeshError("interpolated function is not finite at all vertices")
    if dofmap is None:
        return vals
    gap = np.abs(vals[dofmap.constrained] - dofmap.dirichlet_values)
    if gap.size and gap.max() > tol:
        warnings.warn(
            f"interpolant differs from Dirichlet data by {gap.max():.3e} "
            f"on {int((gap > tol).sum())} constrained vertices",
            InterpolationWarning, stacklevel=2)
    return vals[dofmap.free]
