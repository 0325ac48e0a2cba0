"""Solvers for tracking-type parabolic optimal control problems.

The control is eliminated through the gradient equation, so every solver
works with the state ``u`` and the adjoint ``p`` only and recovers the
control afterwards.
"""

from __future__ import annotations

import logging
import time
from collections.abc import Callable
from dataclasses import dataclass, field, replace

import numpy as np

from .assembly import (assemble_coupled_system, assemble_newton_system,
                       coefficient_at_quadrature, spaces_for)
from .fem import quadrature
from .linalg import GmresConfig, SolveStats, build_preconditioner, gmres
from .mesh import SpaceTimeMesh

__all__ = [
    "Reaction",
    "CUBIC_REACTION",
    "ControlProblem",
    "NewtonConfig",
    "Solution",
    "NewtonError",
    "solve_linear_tracking",
    "lagrange_newton",
    "semismooth_newton_box",
    "solve",
    "newton_system",
    "project_control",
    "nodal_control",
    "build_ez",
    "objective",
]

log = logging.getLogger(__name__)

Fn = Callable[[np.ndarray], np.ndarray]

UNBOUNDED = 1e6


@dataclass(frozen=True)
class Reaction:
    R: Fn
    dR: Fn
    d2R: Fn


def _cubic(u1: float, u2: float, u3: float) -> Reaction:
    s1 = u1 + u2 + u3
    s2 = u1 * u2 + u1 * u3 + u2 * u3
    s3 = u1 * u2 * u3
    return Reaction(lambda u: u ** 3 - s1 * u ** 2 + s2 * u - s3,
                    lambda u: 3 * u ** 2 - 2 * s1 * u + s2,
                    lambda u: 6 * u - 2 * s1)


# R(u) = u (u - 0.25) (u + 1)
CUBIC_REACTION = _cubic(0.0, 0.25, -1.0)
ZERO_REACTION = Reaction(np.zeros_like, np.zeros_like, np.zeros_like)


@dataclass(frozen=True)
class ControlProblem:
    """Data of ``min 1/2 |u - u_d|^2 + rho/2 |z|^2 + (e_z, z)`` subject to
    ``dt u - lap u + R(u) = z + e_u`` and ``a <= z <= b``."""

    rho: float
    u_d: Fn | float
    e_u: Fn | None = None
    e_z: Fn | None = None
    reaction: Reaction | None = None
    a: float = -UNBOUNDED
    b: float = UNBOUNDED
    bc_regime: str = "dirichlet"
    u0: Fn | None = None

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if not self.a < self.b:
            raise ValueError("bounds must satisfy a < b")
        if self.bc_regime not in ("dirichlet", "neumann"):
            raise ValueError(f"unknown boundary regime {self.bc_regime!r}")

    @property
    def is_linear(self) -> bool:
        return self.reaction is None and not self.has_bounds

    @property
    def has_bounds(self) -> bool:
        return self.a > -UNBOUNDED or self.b < UNBOUNDED


@dataclass
class NewtonConfig:
    rel_residual_tol: float = 1e-8
    max_iters: int = 20
    gmres: GmresConfig = field(default_factory=GmresConfig)
    line_search: bool = True
    max_backtracks: int = 8

    def __post_init__(self):
        if not 0.0 < self.rel_residual_tol < 1.0:
            raise ValueError("rel_residual_tol must lie in (0, 1)")
        if self.max_iters < 0 or self.max_backtracks < 0:
            raise ValueError("iteration limits must be nonnegative")


@dataclass
class Solution:
    """Discrete optimal state, adjoint and control.

    ``u_h`` and ``p_h`` are full nodal vectors (boundary values included).
    ``z_elem`` holds one control value per cell and ``z_nodal`` the
    postprocessed continuous control.
    """

    mesh: SpaceTimeMesh
    u_h: np.ndarray
    p_h: np.ndarray
    z_elem: np.ndarray
    z_nodal: np.ndarray
    newton_history: list[float] = field(default_factory=list)
    stats: list[SolveStats] = field(default_factory=list)
    active_history: list[int] = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def iterations(self) -> int:
        return max(len(self.newton_history) - 1, 0)

    @property
    def gmres_iterations(self) -> int:
        return sum(s.iterations for s in self.stats)


class NewtonError(RuntimeError):
    def __init__(self, message: str, history: list[float], active_history: list[int]):
        super().__init__(message)
        self.history = history
        self.active_history = active_history


# -- control formulas -------------------------------------------------------------

def build_ez(p: Fn, z: Fn, rho: float, a: float, b: float) -> Fn:
    """Shift function making a prescribed ``(p, z)`` satisfy the projection formula.

    The active sets are read off the prescribed control: ``z = a`` on the
    lower set, ``z = b`` on the upper one, inactive elsewhere.
    """
    def e_z(pts):
        pp = p(pts)
        zz = z(pts)
        out = -(pp + rho * zz)
        low = zz <= a
        high = zz >= b
        out = np.where(low, np.maximum(-(pp + rho * a), 0.0), out)
        out = np.where(high, -np.maximum(pp + rho * b, 0.0), out)
        return out

    return e_z


def _cell_means(mesh: SpaceTimeMesh, nodal: np.ndarray, f: Fn | None, degree: int = 4):
    mean = nodal[mesh.cells].mean(axis=1)
    if f is not None:
        rule = quadrature(degree)
        mean = mean + coefficient_at_quadrature(mesh, f, degree) @ rule.weights
    return mean


def project_control(p_h: np.ndarray, e_z: Fn | None, rho: float, a: float, b: float,
                    mesh: SpaceTimeMesh, quad_degree: int = 4) -> np.ndarray:
    """Per-cell control ``clamp(-(1/(rho |tau|)) int_tau (p_h + e_z), a, b)``."""
    return np.clip(-_cell_means(mesh, p_h, e_z, quad_degree) / rho, a, b)


def nodal_control(p_h: np.ndarray, e_z: Fn | None, rho: float, a: float, b: float,
                  mesh: SpaceTimeMesh) -> np.ndarray:
    """Continuous control ``clamp(-(p_h + e_z)/rho, a, b)`` at the vertices."""
    s = p_h if e_z is None else p_h + e_z(mesh.vertices)
    return np.clip(-s / rho, a, b)


def objective(u_h: np.ndarray, z, problem: ControlProblem, mesh: SpaceTimeMesh,
              quad_degree: int = 4, cellwise: bool | None = None) -> float:
    """``1/2 |u_h - u_d|^2 + rho/2 |z|^2 + (e_z, z)`` by quadrature.

    ``z`` is a callable, a nodal vector or a per-cell vector; ``cellwise``
    resolves the ambiguity when both lengths agree.
    """
    rule = quadrature(quad_degree)
    w = mesh.volumes[:, None] * rule.weights[None, :]
    pts = None

    def at_points(f):
        nonlocal pts
        if pts is None:
            from .fem import quadrature_points
            pts = quadrature_points(mesh, rule)
        return np.broadcast_to(np.asarray(f(pts), dtype=float), w.shape)

    uq = np.asarray(u_h)[mesh.cells] @ rule.points.T
    ud = at_points(problem.u_d) if callable(problem.u_d) else problem.u_d
    if callable(z):
        zq = at_points(z)
    else:
        z = np.asarray(z, dtype=float)
        if cellwise is None:
            cellwise = z.shape[0] == mesh.n_cells and z.shape[0] != mesh.n_vertices
        zq = np.broadcast_to(z[:, None], w.shape) if cellwise else z[mesh.cells] @ rule.points.T
    J = 0.5 * np.sum(w * (uq - ud) ** 2) + 0.5 * problem.rho * np.sum(w * zq ** 2)
    if problem.e_z is not None:
        J += np.sum(w * at_points(problem.e_z) * zq)
    return float(J)


# -- linear solves ----------------------------------------------------------------

def _solve(system, cfg: GmresConfig, rhs=None, x0=None):
    blocks = system.blocks
    M = build_preconditioner(blocks, cfg.preconditioner, system.interleaving())
    return gmres(system.matrix(), system.rhs() if rhs is None else rhs, cfg, M=M, x0=x0)


def solve_linear_tracking(problem: ControlProblem, mesh: SpaceTimeMesh,
                          config: GmresConfig | None = None) -> Solution:
    """Solve the linear optimality system; the control is ``z = -p_h / rho``."""
    if problem.reaction is not None:
        raise ValueError("linear tracking needs a problem without reaction term")
    cfg = config or GmresConfig()
    t0 = time.perf_counter()
    system = assemble_coupled_system(mesh, problem.rho, problem.u_d, problem.bc_regime,
                                     problem.u0)
    if problem.e_u is not None or problem.e_z is not None:
        raise ValueError("linear tracking does not support e_u / e_z shifts")
    x, stats = _solve(system, cfg)
    X1, X2 = system.A11.col_space, system.A22.col_space
    n1 = X1.n_dofs
    u, p = X1.expand(x[:n1]), X2.expand(x[n1:])
    log.info("linear tracking: %d unknowns, %d GMRES its, rel. residual %.2e",
             x.size, stats.iterations, stats.rel_residual)
    z_nodal = -p / problem.rho
    z_elem = -_cell_means(mesh, p, None) / problem.rho
    return Solution(mesh, u, p, z_elem, z_nodal, stats=[stats],
                    wall_time=time.perf_counter() - t0)


# -- Newton -------------------------------------------------------------------------

def newton_system(problem: ControlProblem, mesh: SpaceTimeMesh, u: np.ndarray, p: np.ndarray,
                  box: bool | None = None):
    """Newton system at the full nodal iterate ``(u, p)`` and the active cell mask.

    ``box`` defaults to ``problem.has_bounds``; without it the mask is ``None``.
    """
    box = problem.has_bounds if box is None else box
    reaction = problem.reaction or ZERO_REACTION
    box_data = None
    active = None
    if box:
        raw = -_cell_means(mesh, p, problem.e_z) / problem.rho
        z_n = np.clip(raw, problem.a, problem.b)
        active = (raw < problem.a) | (raw > problem.b)
        box_data = (z_n, np.flatnonzero(~active))
    system = assemble_newton_system(
        mesh, problem.rho, u, p, reaction.R, reaction.dR, reaction.d2R,
        problem.u_d, problem.e_u, problem.e_z, problem.bc_regime, problem.u0,
        box=box_data)
    return system, active


def _newton(problem: ControlProblem, mesh: SpaceTimeMesh, config: NewtonConfig,
            box: bool, initial: tuple[np.ndarray, np.ndarray] | None) -> Solution:
    t0 = time.perf_counter()
    X1, X2 = spaces_for(mesh, problem.bc_regime, problem.u0)
    n1 = X1.n_dofs
    if initial is None:
        u, p = X1.lifting(), np.zeros(mesh.n_vertices)
    else:
        u, p = X1.expand(X1.restrict(initial[0])), X2.expand(X2.restrict(initial[1]))
    history: list[float] = []
    active_history: list[int] = []
    stats: list[SolveStats] = []
    prev_active = None
    r0 = None
    tol = config.rel_residual_tol

    def residual(u, p):
        system, active = newton_system(problem, mesh, u, p, box)
        x = np.concatenate([X1.restrict(u), X2.restrict(p)])
        r = system.matrix() @ x - system.rhs()
        return system, active, x, r, float(np.linalg.norm(r))

    system, active, x, r, rn = residual(u, p)
    for it in range(config.max_iters + 1):
        if box:
            active_history.append(int(active.sum()))
        history.append(rn)
        if r0 is None:
            r0 = rn
        rel = rn / r0 if r0 > 0 else 0.0
        log.info("newton it %d: rel. residual %.3e, GMRES its %d, active cells %s",
                 it, rel, stats[-1].iterations if stats else 0,
                 active_history[-1] if box else "-")
        sets_stable = not box or np.array_equal(active, prev_active)
        if rn == 0.0 or (it > 0 and rel <= tol and sets_stable):
            break
        if it == config.max_iters:
            raise NewtonError(
                f"Newton did not converge in {config.max_iters} iterations "
                f"(rel. residual {rel:.3e})", history, active_history)
        prev_active = active
        eta = max(min(config.gmres.rel_tol, 0.5 * tol * r0 / rn), 1e-12)
        delta, st = _solve(system, replace(config.gmres, rel_tol=eta), rhs=-r)
        stats.append(st)
        # Backtracking on the residual norm; the last trial is kept if none decreases it.
        step = 1.0
        for k in range(config.max_backtracks + 1 if config.line_search else 1):
            xt = x + step * delta
            ut, pt = X1.expand(xt[:n1]), X2.expand(xt[n1:])
            if not (np.all(np.isfinite(ut)) and np.all(np.isfinite(pt))):
                raise NewtonError("Newton iterates diverged", history, active_history)
            trial = residual(ut, pt)
            if trial[4] <= (1.0 - 1e-4 * step) * rn:
                break
            step *= 0.5
        if step < 1.0:
            log.info("newton it %d: damped step %.3g", it, step)
        u, p = ut, pt
        system, active, x, r, rn = trial

    if box:
        z_elem = project_control(p, problem.e_z, problem.rho, problem.a, problem.b, mesh)
    else:
        z_elem = -_cell_means(mesh, p, problem.e_z) / problem.rho
    z_nodal = nodal_control(p, problem.e_z, problem.rho,
                            problem.a if box else -np.inf, problem.b if box else np.inf, mesh)
    return Solution(mesh, u, p, z_elem, z_nodal, history, stats, active_history,
                    time.perf_counter() - t0)


def lagrange_newton(problem: ControlProblem, mesh: SpaceTimeMesh,
                    initial: tuple[np.ndarray, np.ndarray] | None = None,
                    config: NewtonConfig | None = None) -> Solution:
    """Newton's method on the optimality system with ``z = -(p + e_z)/rho``.

    Bounds are ignored; with the default sentinels they are never active.
    """
    return _newton(problem, mesh, config or NewtonConfig(), False, initial)


def semismooth_newton_box(problem: ControlProblem, mesh: SpaceTimeMesh,
                          initial: tuple[np.ndarray, np.ndarray] | None = None,
                          config: NewtonConfig | None = None) -> Solution:
    """Semismooth Newton with the cellwise projected control.

    The generalised derivative of the projection is taken as 1 on inactive
    cells and 0 on active ones.
    """
    return _newton(problem, mesh, config or NewtonConfig(), True, initial)


def solve(problem: ControlProblem, mesh: SpaceTimeMesh,
          config: NewtonConfig | None = None,
          initial: tuple[np.ndarray, np.ndarray] | None = None) -> Solution:
    """Pick the solver matching the problem type."""
    config = config or NewtonConfig()
    if problem.has_bounds:
        return semismooth_newton_box(problem, mesh, initial, config)
    if problem.reaction is not None or problem.e_u is not None or problem.e_z is not None \
            or problem.u0 is not None:
        return lagrange_newton(problem, mesh, initial, config)
    return solve_linear_tracking(problem, mesh, config.gmres)
