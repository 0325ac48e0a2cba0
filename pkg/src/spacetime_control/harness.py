"""Error norms, convergence studies, inf-sup oracles and run reporting."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import platform
import time
from collections.abc import Callable, Iterable, Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from .assembly import (assemble_coupled_system, assemble_element_matrices, spaces_for,
                       stiffness_x_element_matrices, time_derivative_element_matrices)
from .fem import SpaceKind, build_dof_map, quadrature, quadrature_points
from .linalg import PRECONDITIONERS, GmresConfig
from .mesh import SpaceTimeMesh, build_unit_cube_mesh, refine_uniform
from .opt_solver import (NewtonConfig, Solution, lagrange_newton, objective,
                         semismooth_newton_box, solve, solve_linear_tracking)
from .problems import TRACKING_VARIANTS, BenchmarkSpec, get_problem

__all__ = [
    "y_norm_error",
    "l2_norm_error",
    "eoc",
    "ConvergenceRecord",
    "RunConfig",
    "DenseBudgetError",
    "build_mesh",
    "solve_problem",
    "convergence_study",
    "write_study_csv",
    "inf_sup_state",
    "state_form_singular_values",
    "inf_sup_coupled",
    "write_manifest",
    "run_cli",
    "DENSE_DOF_BUDGET",
]

log = logging.getLogger(__name__)

DENSE_DOF_BUDGET = 500
SOLVERS = ("auto", "linear", "newton", "semismooth")


# -- norms ----------------------------------------------------------------------------

def _weights(mesh: SpaceTimeMesh, rule) -> np.ndarray:
    return mesh.volumes[:, None] * rule.weights[None, :]


def y_norm_error(nodal: np.ndarray | None, grad_x_exact: Callable | None,
                 mesh: SpaceTimeMesh, quad_degree: int = 4) -> float:
    """``|| grad_x (u - u_h) ||_{L2(Q)}`` with the exact spatial gradient supplied.

    ``nodal`` or ``grad_x_exact`` may be ``None`` for a zero field.
    """
    rule = quadrature(quad_degree)
    diff = np.zeros((mesh.n_cells, rule.weights.size, 2))
    if grad_x_exact is not None:
        diff += grad_x_exact(quadrature_points(mesh, rule))
    if nodal is not None:
        gh = np.einsum("ci,cid->cd", np.asarray(nodal)[mesh.cells],
                       mesh.basis_gradients[:, :, :2])
        diff -= gh[:, None, :]
    return float(np.sqrt(np.sum(_weights(mesh, rule) * np.sum(diff ** 2, axis=-1))))


def l2_norm_error(field: np.ndarray | None, exact: Callable | None, mesh: SpaceTimeMesh,
                  quad_degree: int = 4, cellwise: bool | None = None) -> float:
    """``|| u - u_h ||_{L2(Q)}`` for a nodal P1 or a per-cell constant field."""
    rule = quadrature(quad_degree)
    diff = np.zeros((mesh.n_cells, rule.weights.size))
    if exact is not None:
        diff += exact(quadrature_points(mesh, rule))
    if field is not None:
        field = np.asarray(field, dtype=float)
        if cellwise is None:
            cellwise = field.shape[0] == mesh.n_cells and field.shape[0] != mesh.n_vertices
        diff -= field[:, None] if cellwise else field[mesh.cells] @ rule.points.T
    return float(np.sqrt(np.sum(_weights(mesh, rule) * diff ** 2)))


def eoc(errors: Iterable[float], hs: Iterable[float] | None = None) -> list[float]:
    """Estimated orders ``log2(e_{k-1} / e_k)`` for consecutive mesh halvings.

    A pair involving a nonpositive or non-finite error yields ``nan``.
    """
    e = [float(x) for x in errors]
    if hs is not None:
        h = [float(x) for x in hs]
        if len(h) != len(e):
            raise ValueError("errors and hs must have the same length")
        for a, b in zip(h[:-1], h[1:]):
            if not math.isclose(a, 2.0 * b, rel_tol=1e-9):
                raise ValueError("mesh sizes must halve from one level to the next")
    out = []
    for a, b in zip(e[:-1], e[1:]):
        ok = a > 0 and b > 0 and math.isfinite(a) and math.isfinite(b)
        out.append(math.log2(a / b) if ok else math.nan)
    return out


# -- configuration -------------------------------------------------------------------

@dataclass
class RunConfig:
    """Settings shared by all CLI subcommands.

    Every field can be given in a ``key = value`` file and overridden on the
    command line.
    """

    problem: str = "ex1"
    solver: str = "auto"
    levels: int = 4
    coarse_n: int = 4
    layout: str = "prism"
    constrained: bool = False
    tracking: str = "consistent"
    adapt: bool = False
    steps: int = 15
    theta: float = 0.5
    bisections: int = 1
    max_vertices: int = 1_000_000
    rho: float | None = None
    gmres_tol: float = 1e-7
    gmres_max_iters: int = 20000
    gmres_restart: int = 200
    preconditioner: str = "coupled_ilu0"
    newton_tol: float = 1e-8
    newton_max_iters: int = 20
    n: int = 3
    out_dir: str = "out"
    vtk: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.levels < 1:
            raise ValueError("levels must be at least 1")
        if self.coarse_n < 1 or self.n < 1:
            raise ValueError("subdivision counts must be positive")
        if self.solver not in SOLVERS:
            raise ValueError(f"solver must be one of {SOLVERS}")
        if self.layout not in ("prism", "kuhn"):
            raise ValueError("layout must be 'prism' or 'kuhn'")
        if self.tracking not in TRACKING_VARIANTS:
            raise ValueError(f"tracking must be one of {TRACKING_VARIANTS}")
        if not 0.0 < self.theta < 1.0:
            raise ValueError("theta must lie in (0, 1)")
        if self.steps < 1 or self.max_vertices < 1 or self.bisections < 1:
            raise ValueError("steps, max_vertices and bisections must be positive")
        if self.rho is not None and not self.rho > 0:
            raise ValueError("rho must be positive")
        if self.preconditioner not in PRECONDITIONERS:
            raise ValueError(f"preconditioner must be one of {PRECONDITIONERS}")

    @classmethod
    def field_types(cls) -> dict[str, type]:
        """Scalar type of each field (``float`` for the optional ``rho``)."""
        out = {}
        for f in dataclasses.fields(cls):
            default = f.default
            out[f.name] = float if default is None else type(default)
        return out

    @classmethod
    def from_mapping(cls, values: Mapping[str, object]) -> RunConfig:
        types = cls.field_types()
        kwargs = {}
        for key, raw in values.items():
            name = key.strip().replace("-", "_")
            if name not in types:
                raise ValueError(f"unknown configuration key {key!r}")
            kwargs[name] = _coerce(raw, types[name], name)
        return cls(**kwargs)

    def gmres_config(self) -> GmresConfig:
        return GmresConfig(rel_tol=self.gmres_tol, max_iters=self.gmres_max_iters,
                           restart=self.gmres_restart, preconditioner=self.preconditioner)

    def newton_config(self) -> NewtonConfig:
        return NewtonConfig(rel_residual_tol=self.newton_tol, max_iters=self.newton_max_iters,
                            gmres=self.gmres_config())

    def benchmark(self) -> BenchmarkSpec:
        spec = get_problem(self.problem, self.constrained, self.tracking)
        if self.rho is not None:
            spec = dataclasses.replace(
                spec, problem=dataclasses.replace(spec.problem, rho=self.rho))
        return spec


def _coerce(raw, typ: type, name: str):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    if name == "rho" and text.lower() in ("", "none", "default"):
        return None
    try:
        if typ is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if typ is int:
            return int(float(text)) if "e" in text.lower() else int(text)
        return typ(text)
    except ValueError:
        raise ValueError(f"invalid value {raw!r} for {name}") from None


# -- studies -----------------------------------------------------------------------------

@dataclass
class ConvergenceRecord:
    """One row of a convergence table; eoc entries are ``nan`` on the first level."""

    level: int
    n_dofs: int
    h: float
    err_Y_u: float = math.nan
    err_Y_p: float = math.nan
    err_L2_u: float = math.nan
    err_L2_p: float = math.nan
    err_L2_z: float = math.nan
    J_h: float = math.nan
    J_gap: float = math.nan
    eoc_Y_u: float = math.nan
    eoc_Y_p: float = math.nan
    eoc_L2_u: float = math.nan
    eoc_L2_p: float = math.nan
    eoc_L2_z: float = math.nan
    eoc_J: float = math.nan
    newton_iterations: int = 0
    gmres_iterations: int = 0
    wall_time: float = 0.0
    newton_history: list[float] = field(default_factory=list)


_ERROR_COLUMNS = ("err_Y_u", "err_Y_p", "err_L2_u", "err_L2_p", "err_L2_z", "J_gap")
_EOC_OF = {"err_Y_u": "eoc_Y_u", "err_Y_p": "eoc_Y_p", "err_L2_u": "eoc_L2_u",
           "err_L2_p": "eoc_L2_p", "err_L2_z": "eoc_L2_z", "J_gap": "eoc_J"}


def build_mesh(cfg: RunConfig) -> SpaceTimeMesh:
    """Coarse mesh with ``cfg.coarse_n`` subdivisions per axis."""
    return build_unit_cube_mesh(cfg.coarse_n + 1, cfg.layout)


def solve_problem(spec: BenchmarkSpec, mesh: SpaceTimeMesh, cfg: RunConfig,
                  initial=None) -> Solution:
    """Run the solver selected by ``cfg.solver`` (``auto`` picks by problem type)."""
    kind = cfg.solver
    problem = spec.problem
    if kind == "auto":
        return solve(problem, mesh, cfg.newton_config(), initial)
    if kind == "linear":
        return solve_linear_tracking(problem, mesh, cfg.gmres_config())
    if kind == "newton":
        return lagrange_newton(problem, mesh, initial, cfg.newton_config())
    return semismooth_newton_box(problem, mesh, initial, cfg.newton_config())


def control_for_objective(spec: BenchmarkSpec, sol: Solution) -> tuple[np.ndarray, bool]:
    """Discrete control entering ``J``: per cell for box problems, nodal otherwise."""
    if spec.problem.has_bounds:
        return sol.z_elem, True
    return sol.z_nodal, False


def level_record(spec: BenchmarkSpec, mesh: SpaceTimeMesh, sol: Solution,
                 level: int) -> ConvergenceRecord:
    rec = ConvergenceRecord(level=level, n_dofs=2 * mesh.n_vertices, h=mesh.h,
                            newton_iterations=sol.iterations,
                            gmres_iterations=sol.gmres_iterations,
                            wall_time=sol.wall_time, newton_history=list(sol.newton_history))
    if spec.grad_x_u is not None:
        rec.err_Y_u = y_norm_error(sol.u_h, spec.grad_x_u, mesh)
    if spec.grad_x_p is not None:
        rec.err_Y_p = y_norm_error(sol.p_h, spec.grad_x_p, mesh)
    if spec.exact_u is not None:
        rec.err_L2_u = l2_norm_error(sol.u_h, spec.exact_u, mesh)
    if spec.exact_p is not None:
        rec.err_L2_p = l2_norm_error(sol.p_h, spec.exact_p, mesh)
    z, cellwise = control_for_objective(spec, sol)
    if spec.exact_z is not None and spec.problem.has_bounds:
        rec.err_L2_z = l2_norm_error(sol.z_elem, spec.exact_z, mesh, cellwise=True)
    rec.J_h = objective(sol.u_h, z, spec.problem, mesh, cellwise=cellwise)
    if spec.reference_J is not None:
        rec.J_gap = abs(rec.J_h - spec.reference_J)
    return rec


def _fill_eoc(records: list[ConvergenceRecord]) -> None:
    for col in _ERROR_COLUMNS:
        rates = eoc([getattr(r, col) for r in records])
        for r, rate in zip(records[1:], rates):
            setattr(r, _EOC_OF[col], rate)


def convergence_study(cfg: RunConfig, csv_path=None,
                      on_level: Callable[[ConvergenceRecord, SpaceTimeMesh, Solution], None]
                      | None = None) -> list[ConvergenceRecord]:
    """Solve on ``cfg.levels`` uniformly refined meshes and tabulate errors.

    A solver failure stops the study; the rows computed so far are kept
    (and written) and the exception is re-raised.
    """
    spec = cfg.benchmark()
    mesh = build_mesh(cfg)
    records: list[ConvergenceRecord] = []
    try:
        for level in range(cfg.levels):
            if level:
                mesh = refine_uniform(mesh)
            sol = solve_problem(spec, mesh, cfg)
            rec = level_record(spec, mesh, sol, level)
            records.append(rec)
            _fill_eoc(records)
            log.info("level %d: %d dofs, h=%.4g, J=%.6e, %.1f s", level, rec.n_dofs, rec.h,
                     rec.J_h, rec.wall_time)
            if on_level is not None:
                on_level(rec, mesh, sol)
    finally:
        if csv_path is not None and records:
            write_study_csv(csv_path, records, spec)
    return records


def _fmt(x: float) -> str:
    return "-" if x is None or not math.isfinite(x) else f"{x:.3e}"


def write_study_csv(path, records: list[ConvergenceRecord], spec: BenchmarkSpec | None = None
                    ) -> Path:
    """CSV with the table layout: #Dofs, h, then each error with its eoc.

    Values carry 4 significant digits; columns without data are omitted.
    """
    cols = [c for c in _ERROR_COLUMNS if any(math.isfinite(getattr(r, c)) for r in records)]
    header = ["#Dofs", "h"]
    for c in cols:
        if c == "J_gap":
            header += ["J_h", "J_gap", "eoc_J"]
        else:
            header += [c, _EOC_OF[c]]
    if "J_gap" not in cols:
        header.append("J_h")
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in records:
            row = [str(r.n_dofs), _fmt(r.h)]
            for c in cols:
                if c == "J_gap":
                    row += [_fmt(r.J_h), _fmt(r.J_gap), _fmt(r.eoc_J)]
                else:
                    row += [_fmt(getattr(r, c)), _fmt(getattr(r, _EOC_OF[c]))]
            if "J_gap" not in cols:
                row.append(_fmt(r.J_h))
            w.writerow(row)
    return path


# -- inf-sup oracles -------------------------------------------------------------------

class DenseBudgetError(ValueError):
    """Raised when a dense oracle would exceed its DOF budget."""


def _check_budget(n: int) -> None:
    if n > DENSE_DOF_BUDGET:
        raise DenseBudgetError(
            f"{n} DOFs exceed the dense oracle budget of {DENSE_DOF_BUDGET}")


def _gen_singular_values(B: np.ndarray, G_test: np.ndarray, G_trial: np.ndarray
                         ) -> np.ndarray:
    """Singular values of ``B`` measured in the Gram norms of test and trial side.

    They are the square roots of the eigenvalues of
    ``B^T G_test^{-1} B x = lambda G_trial x``.
    """
    H = B.T @ scipy.linalg.solve(G_test, B, assume_a="pos")
    H = 0.5 * (H + H.T)
    lam = scipy.linalg.eigh(H, G_trial, eigvals_only=True)
    return np.sqrt(np.clip(lam, 0.0, None))


def state_form_singular_values(mesh: SpaceTimeMesh, use_discrete_X0h_norm: bool = True
                               ) -> tuple[float, float]:
    """Extreme singular values of the heat form on ``X_0h x X_0h``.

    The test side is measured in ``||v||_Y = ||grad_x v||``. The trial side
    uses the discrete norm ``(||u||_Y^2 + ||w_u||_Y^2)^(1/2)``, where
    ``w_u`` solves ``(grad_x w, grad_x v) = (dt u, v)`` for all test ``v``,
    or the plain Y-norm when ``use_discrete_X0h_norm`` is false.
    Returns ``(nan, nan)`` if the space has no degrees of freedom.
    """
    X = build_dof_map(mesh, SpaceKind.X0H)
    if X.n_dofs == 0:
        return math.nan, math.nan
    _check_budget(X.n_dofs)
    S = assemble_element_matrices(mesh, stiffness_x_element_matrices(mesh), X, X).matrix.toarray()
    C = assemble_element_matrices(mesh, time_derivative_element_matrices(mesh), X, X
                                  ).matrix.toarray()
    K = S + C
    G_trial = S + C.T @ scipy.linalg.solve(S, C, assume_a="pos") if use_discrete_X0h_norm else S
    sv = _gen_singular_values(K, S, 0.5 * (G_trial + G_trial.T))
    return float(sv.min()), float(sv.max())


def inf_sup_state(mesh: SpaceTimeMesh, use_discrete_X0h_norm: bool = True) -> float:
    """Discrete inf-sup constant of the heat form (smallest singular value)."""
    return state_form_singular_values(mesh, use_discrete_X0h_norm)[0]


def inf_sup_coupled(mesh: SpaceTimeMesh, rho: float) -> float:
    """Discrete inf-sup constant of the coupled state-adjoint form.

    Trial and test pairs are measured in ``(rho ||u||_Y^2 + ||p||_Y^2)^(1/2)``.
    Returns ``nan`` if the spaces have no degrees of freedom.
    """
    if not rho > 0:
        raise ValueError("rho must be positive")
    system = assemble_coupled_system(mesh, rho, 0.0)
    n1, n2 = system.sizes
    if n1 + n2 == 0:
        return math.nan
    _check_budget(n1 + n2)
    X1, X2 = spaces_for(mesh)
    S = stiffness_x_element_matrices(mesh)
    G1 = assemble_element_matrices(mesh, S, X1, X1).matrix.toarray()
    G2 = assemble_element_matrices(mesh, S, X2, X2).matrix.toarray()
    G = scipy.linalg.block_diag(rho * G1, G2)
    sv = _gen_singular_values(system.matrix().toarray(), G, G)
    return float(sv.min())


# -- reporting --------------------------------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, (np.floating, float)):
        return None if not math.isfinite(float(obj)) else float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return [_jsonable(x) for x in obj.tolist()]
    if isinstance(obj, Mapping):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(x) for x in obj]
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return _jsonable(dataclasses.asdict(obj))
    return obj


def write_manifest(out_dir, cfg: RunConfig, command: str, results: Mapping | None = None,
                   started: float | None = None) -> Path:
    """Write ``manifest.json``: configuration echo, timings and solver statistics."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = {
        "command": command,
        "config": dataclasses.asdict(cfg),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "wall_time": None if started is None else time.perf_counter() - started,
        "results": results or {},
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(_jsonable(data), indent=2) + "\n")
    return path


def run_cli(args: list[str] | None = None) -> int:
    """Entry point of the command line interface; returns the exit status."""
    from .cli import main

    return main(args)
