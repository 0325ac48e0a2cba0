"""Residual error indicators, marking and the adaptive solve-estimate-mark-refine loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fem import quadrature, quadrature_points
from .linalg import GmresError
from .mesh import SpaceTimeMesh, is_conforming, min_dihedral_angle, prolongate, refine_adaptive
from .opt_solver import (ControlProblem, NewtonConfig, NewtonError, Solution, ZERO_REACTION,
                         lagrange_newton, objective, semismooth_newton_box, solve,
                         solve_linear_tracking)
from .vtk import write_vtk

__all__ = [
    "IndicatorField",
    "MarkingConfig",
    "AdaptStep",
    "estimate",
    "mark",
    "adapt_loop",
    "write_adapt_csv",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class IndicatorField:
    """Per-cell indicators ``eta`` with ``total = sqrt(sum eta^2)``."""

    eta: np.ndarray
    parts: dict = field(default_factory=dict)

    def __post_init__(self):
        eta = np.asarray(self.eta, dtype=float)
        if eta.ndim != 1 or np.any(eta < 0) or not np.all(np.isfinite(eta)):
            raise ValueError("indicators must be a finite nonnegative vector")
        object.__setattr__(self, "eta", eta)

    @property
    def total(self) -> float:
        return float(np.sqrt(np.sum(self.eta ** 2)))

    def __len__(self) -> int:
        return self.eta.size


@dataclass(frozen=True)
class MarkingConfig:
    """Dörfler marking with parameter ``theta`` or marking a fixed fraction of cells."""

    strategy: str = "doerfler"
    theta: float = 0.5
    fraction: float = 0.1

    def __post_init__(self):
        if self.strategy not in ("doerfler", "fixed_fraction"):
            raise ValueError(f"unknown marking strategy {self.strategy!r}")
        if not 0.0 < self.theta < 1.0 or not 0.0 < self.fraction < 1.0:
            raise ValueError("theta and fraction must lie in (0, 1)")


def _facet_geometry(mesh: SpaceTimeMesh, faces: np.ndarray):
    X = mesh.vertices[faces]
    n = np.cross(X[:, 1] - X[:, 0], X[:, 2] - X[:, 0])
    two_area = np.linalg.norm(n, axis=1)
    return n / two_area[:, None], 0.5 * two_area


def estimate(solution: Solution, problem: ControlProblem, mesh: SpaceTimeMesh | None = None,
             quad_degree: int = 4) -> IndicatorField:
    """Residual indicator of the coupled state/adjoint system.

    ``eta^2 = h^2 |r_state|^2 + h^2 |r_adjoint|^2 + h |[grad_x u_h . n_x]|^2
    + h |[grad_x p_h . n_x]|^2`` per cell, where ``h`` is the local axis
    spacing and each interior facet term is shared equally by its two cells.
    """
    mesh = mesh or solution.mesh
    rule = quadrature(quad_degree)
    pts = quadrature_points(mesh, rule)
    w = mesh.volumes[:, None] * rule.weights[None, :]
    g = mesh.basis_gradients
    u_c, p_c = solution.u_h[mesh.cells], solution.p_h[mesh.cells]
    uq, pq = u_c @ rule.points.T, p_c @ rule.points.T
    dt_u = np.einsum("ci,ci->c", u_c, g[:, :, 2])[:, None]
    dt_p = np.einsum("ci,ci->c", p_c, g[:, :, 2])[:, None]
    reaction = problem.reaction or ZERO_REACTION

    def at(f):
        if f is None:
            return 0.0
        return f(pts) if callable(f) else np.asarray(f, dtype=float)

    if problem.has_bounds:
        zq = np.broadcast_to(solution.z_elem[:, None], w.shape)
    else:
        zq = -(pq + at(problem.e_z)) / problem.rho
    r_state = zq + at(problem.e_u) - dt_u - reaction.R(uq)
    r_adj = uq - at(problem.u_d) + dt_p - reaction.dR(uq) * pq

    h = mesh.cell_sizes
    cell_state = h ** 2 * np.sum(w * r_state ** 2, axis=1)
    cell_adj = h ** 2 * np.sum(w * r_adj ** 2, axis=1)

    faces, ca, cb = mesh.interior_faces
    normal, area = _facet_geometry(mesh, faces)
    nx = normal[:, :2]
    jumps = {}
    for name, vals in (("jump_u", u_c), ("jump_p", p_c)):
        grad = np.einsum("ci,cid->cd", vals, g[:, :, :2])
        j = np.einsum("fd,fd->f", grad[ca] - grad[cb], nx)
        facet = j ** 2 * area
        acc = np.zeros(mesh.n_cells)
        np.add.at(acc, ca, 0.5 * h[ca] * facet)
        np.add.at(acc, cb, 0.5 * h[cb] * facet)
        jumps[name] = acc
    eta2 = cell_state + cell_adj + jumps["jump_u"] + jumps["jump_p"]
    parts = {"state": cell_state, "adjoint": cell_adj, **jumps}
    return IndicatorField(np.sqrt(eta2), parts)


def mark(indicators: IndicatorField | np.ndarray, config: MarkingConfig | None = None
         ) -> np.ndarray:
    """Cells to refine, as a sorted index array.

    Dörfler marking picks the smallest set of largest indicators whose
    squares sum to at least ``theta * total^2``; equal indicators are taken
    in order of cell index. Cells with zero indicator are never marked.
    """
    config = config or MarkingConfig()
    eta = indicators.eta if isinstance(indicators, IndicatorField) else np.asarray(indicators)
    if eta.size == 0:
        raise ValueError("cannot mark an empty indicator field")
    e2 = eta.astype(float) ** 2
    order = np.lexsort((np.arange(e2.size), -e2))
    positive = int(np.count_nonzero(e2 > 0))
    if positive == 0:
        return np.empty(0, dtype=np.int64)
    if config.strategy == "fixed_fraction":
        k = math.ceil(config.fraction * eta.size)
    else:
        csum = np.cumsum(e2[order])
        goal = config.theta * csum[-1] * (1.0 - 1e-12)
        k = int(np.searchsorted(csum, goal, side="left")) + 1
    k = min(max(k, 1), positive)
    return np.sort(order[:k])


@dataclass
class AdaptStep:
    """One solve of the adaptive loop; ``mesh``/``solution`` may be dropped later."""

    step: int
    mesh: SpaceTimeMesh | None
    solution: Solution | None
    indicators: IndicatorField
    J: float
    marked: np.ndarray
    n_vertices: int = 0
    conforming: bool = True
    min_angle: float = math.nan

    @property
    def n_dofs(self) -> int:
        return 2 * self.n_vertices


def _run_solver(problem: ControlProblem, mesh: SpaceTimeMesh, solver: str,
                config: NewtonConfig, initial) -> Solution:
    if solver == "auto":
        return solve(problem, mesh, config, initial)
    if solver == "linear":
        return solve_linear_tracking(problem, mesh, config.gmres)
    if solver == "newton":
        return lagrange_newton(problem, mesh, initial, config)
    if solver == "semismooth":
        return semismooth_newton_box(problem, mesh, initial, config)
    raise ValueError(f"unknown solver kind {solver!r}")


def write_adapt_csv(path, steps: list[AdaptStep]) -> Path:
    """Per-step table: step, #vertices, #DOFs, total eta, J (4 significant digits)."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "#vertices", "#DOFs", "eta", "J"])
        for s in steps:
            w.writerow([s.step, s.n_vertices, s.n_dofs, f"{s.indicators.total:.3e}",
                        f"{s.J:.3e}"])
    return path


def _dump_vtk(vtk_dir: Path, step: AdaptStep) -> None:
    sol = step.solution
    write_vtk(vtk_dir / f"step_{step.step:03d}.vtk", step.mesh,
              point_data={"u": sol.u_h, "p": sol.p_h, "z": sol.z_nodal},
              cell_data={"z_cell": sol.z_elem, "eta": step.indicators.eta},
              title=f"adaptive step {step.step}")


def adapt_loop(problem: ControlProblem, mesh: SpaceTimeMesh, solver: str = "auto",
               marking: MarkingConfig | None = None, max_steps: int = 15,
               max_vertices: int = 1_000_000, config: NewtonConfig | None = None,
               bisections: int = 1, nested: bool = True, keep: str = "all",
               csv_path=None, vtk_dir=None, on_step=None) -> list[AdaptStep]:
    """Solve, estimate, mark and refine until a step or vertex budget is hit.

    Step ``k`` is the solve on the ``k``-th mesh; at most ``max_steps``
    solves are done, and a refined mesh with more than ``max_vertices``
    vertices is not solved on. With ``nested`` the previous solution is
    prolongated as the initial Newton iterate. A solver failure ends the
    loop; the steps completed so far are returned. ``keep="last"`` drops
    meshes and solutions of earlier steps to save memory; ``on_step(step)``
    is called while the step still holds its mesh and solution.
    """
    if max_steps < 1 or max_vertices < 1:
        raise ValueError("budgets must be positive")
    if keep not in ("all", "last"):
        raise ValueError("keep must be 'all' or 'last'")
    marking = marking or MarkingConfig()
    config = config or NewtonConfig()
    if vtk_dir is not None:
        vtk_dir = Path(vtk_dir)
        vtk_dir.mkdir(parents=True, exist_ok=True)
    steps: list[AdaptStep] = []
    initial = None
    try:
        for k in range(max_steps):
            try:
                sol = _run_solver(problem, mesh, solver, config, initial)
            except (NewtonError, GmresError) as exc:
                log.warning("adaptive step %d: solver failed (%s); stopping", k, exc)
                break
            ind = estimate(sol, problem, mesh)
            cellwise = problem.has_bounds
            J = objective(sol.u_h, sol.z_elem if cellwise else sol.z_nodal, problem, mesh,
                          cellwise=cellwise)
            marked = mark(ind, marking)
            ok, angle = mesh_quality(mesh)
            step = AdaptStep(k, mesh, sol, ind, J, marked, mesh.n_vertices, ok, angle)
            log.info("adaptive step %d: %d vertices, eta=%.4e, J=%.6e, %d marked",
                     k, mesh.n_vertices, ind.total, J, marked.size)
            if vtk_dir is not None:
                _dump_vtk(vtk_dir, step)
            if on_step is not None:
                on_step(step)
            if keep == "last" and steps:
                prev = steps[-1]
                prev.mesh, prev.solution = None, None
            steps.append(step)
            if k + 1 == max_steps or marked.size == 0:
                break
            fine = refine_adaptive(mesh, marked, bisections=bisections)
            if fine.n_vertices > max_vertices:
                log.info("vertex budget %d reached; stopping", max_vertices)
                break
            initial = ((prolongate(fine, sol.u_h), prolongate(fine, sol.p_h))
                       if nested else None)
            mesh = fine
    finally:
        if csv_path is not None and steps:
            write_adapt_csv(csv_path, steps)
    return steps


def mesh_quality(mesh: SpaceTimeMesh) -> tuple[bool, float]:
    """Conformity flag and smallest dihedral angle (radians)."""
    return is_conforming(mesh), min_dihedral_angle(mesh)
