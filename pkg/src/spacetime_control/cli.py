"""Command line interface: ``solve``, ``study``, ``adapt``, ``infsup`` and ``export``.

Settings come from :class:`~spacetime_control.harness.RunConfig`. A flat
``key = value`` file given with ``--config`` overrides the defaults, and
command line flags override the file.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .adaptivity import MarkingConfig, adapt_loop
from .harness import (RunConfig, build_mesh, convergence_study, inf_sup_coupled,
                      level_record, solve_problem, state_form_singular_values,
                      write_manifest, write_study_csv)
from .mesh import build_unit_cube_mesh, refine_uniform
from .opt_solver import NewtonError, newton_system
from .linalg import GmresError
from .assembly import assemble_coupled_system, spaces_for
from .vtk import write_vtk

__all__ = ["main", "build_parser", "parse_config_file", "resolve_config"]

log = logging.getLogger("spacetime_control")

COMMANDS = ("solve", "study", "adapt", "infsup", "export")

_HELP = {
    "problem": "benchmark id (ex1..ex5)",
    "solver": "auto, linear, newton or semismooth",
    "levels": "number of uniform levels (solve uses the finest)",
    "coarse_n": "subdivisions per axis of the coarse mesh",
    "layout": "coarse mesh layout: prism or kuhn",
    "constrained": "use the box-constrained variant of ex5",
    "tracking": "target data of ex3/ex4: consistent or published",
    "adapt": "solve: run the adaptive loop",
    "steps": "maximal number of adaptive solves",
    "theta": "Doerfler marking parameter",
    "bisections": "bisections per marked cell and adaptive step",
    "max_vertices": "vertex budget of the adaptive loop",
    "rho": "override the regularisation parameter",
    "gmres_tol": "relative GMRES tolerance",
    "gmres_max_iters": "GMRES iteration limit",
    "gmres_restart": "GMRES restart length",
    "preconditioner": "none, block_jacobi, block_ilu0, coupled_ilu0 or direct",
    "newton_tol": "relative Newton residual tolerance",
    "newton_max_iters": "Newton iteration limit",
    "n": "infsup: subdivisions per axis",
    "out_dir": "output directory",
    "vtk": "write VTK files",
}


class CliError(Exception):
    """User-facing error; reported without a traceback."""


def parse_config_file(path) -> dict[str, str]:
    """Read ``key = value`` lines; blank lines and ``#`` comments are ignored."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(f"cannot read config file {path}: {exc.strerror}") from None
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise CliError(f"{path}:{lineno}: empty key")
        values[key] = value
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spacetime-control",
        description="Space-time finite element solvers for parabolic optimal control.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    types = RunConfig.field_types()
    for name in COMMANDS:
        p = sub.add_parser(name, help=f"{name} subcommand")
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("-v", "--verbose", action="count", default=0,
                       help="more log output (repeatable)")
        for field_name, typ in types.items():
            flag = "--" + field_name.replace("_", "-")
            if typ is bool:
                p.add_argument(flag, dest=field_name, action=argparse.BooleanOptionalAction,
                               default=None, help=_HELP.get(field_name))
            else:
                p.add_argument(flag, dest=field_name, default=None, metavar=typ.__name__.upper(),
                               help=_HELP.get(field_name))
    return parser


def resolve_config(ns: argparse.Namespace) -> RunConfig:
    """Defaults, then the config file, then explicit flags."""
    values: dict[str, object] = {}
    if ns.config:
        values.update(parse_config_file(ns.config))
    for name in RunConfig.field_types():
        v = getattr(ns, name, None)
        if v is not None:
            values[name] = v
    try:
        return RunConfig.from_mapping(values)
    except (ValueError, TypeError) as exc:
        raise CliError(f"invalid configuration: {exc}") from None


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise CliError(f"output directory {out} is not writable: {exc.strerror}") from None
    return out


def _benchmark(cfg: RunConfig):
    try:
        return cfg.benchmark()
    except KeyError as exc:
        raise CliError(str(exc.args[0])) from None


def _solution_vtk(path: Path, mesh, sol, extra_cells=None) -> None:
    cells = {"z_cell": sol.z_elem}
    cells.update(extra_cells or {})
    write_vtk(path, mesh, point_data={"u": sol.u_h, "p": sol.p_h, "z": sol.z_nodal},
              cell_data=cells)


def _adapt(cfg: RunConfig, out: Path) -> dict:
    spec = _benchmark(cfg)
    steps = adapt_loop(spec.problem, build_mesh(cfg), solver=cfg.solver,
                       marking=MarkingConfig(theta=cfg.theta), max_steps=cfg.steps,
                       max_vertices=cfg.max_vertices, config=cfg.newton_config(),
                       bisections=cfg.bisections, keep="last", csv_path=out / "adapt.csv",
                       vtk_dir=out / "vtk" if cfg.vtk else None)
    for s in steps:
        print(f"step {s.step:3d}  vertices {s.n_vertices:9d}  eta {s.indicators.total:.3e}  "
              f"J {s.J:.6e}")
    return {"steps": [{"step": s.step, "n_vertices": s.n_vertices, "eta": s.indicators.total,
                       "J": s.J, "marked": int(s.marked.size), "conforming": s.conforming,
                       "min_angle": s.min_angle} for s in steps]}


def _cmd_solve(cfg: RunConfig, out: Path) -> dict:
    if cfg.adapt:
        return _adapt(cfg, out)
    spec = _benchmark(cfg)
    mesh = build_mesh(cfg)
    for _ in range(cfg.levels - 1):
        mesh = refine_uniform(mesh)
    sol = solve_problem(spec, mesh, cfg)
    rec = level_record(spec, mesh, sol, cfg.levels - 1)
    write_study_csv(out / "solve.csv", [rec], spec)
    if cfg.vtk:
        _solution_vtk(out / "solution.vtk", mesh, sol)
    print(f"{spec.id}: {rec.n_dofs} dofs, h={rec.h:.4g}, J={rec.J_h:.6e}, "
          f"Newton its {sol.iterations}, GMRES its {sol.gmres_iterations}")
    return {"record": rec}


def _cmd_study(cfg: RunConfig, out: Path) -> dict:
    def on_level(rec, mesh, sol):
        cols = [f"{k}={getattr(rec, k):.4e}" for k in ("err_Y_u", "err_Y_p", "err_L2_u", "J_h")
                if math.isfinite(getattr(rec, k))]
        print(f"level {rec.level}: #Dofs {rec.n_dofs}  h {rec.h:.4g}  " + "  ".join(cols))
        if cfg.vtk:
            _solution_vtk(out / f"level_{rec.level}.vtk", mesh, sol)

    records = convergence_study(cfg, csv_path=out / "study.csv", on_level=on_level)
    return {"records": records}


def _cmd_infsup(cfg: RunConfig, out: Path) -> dict:
    mesh = build_unit_cube_mesh(cfg.n + 1, cfg.layout)
    rho = 1.0 if cfg.rho is None else cfg.rho
    smin, smax = state_form_singular_values(mesh)
    coupled = inf_sup_coupled(mesh, rho)
    bound = 1.0 / (2.0 * math.sqrt(2.0))
    print(f"state inf-sup   {smin:.6f}  (lower bound {bound:.6f})")
    print(f"state sup       {smax:.6f}  (upper bound {math.sqrt(2.0):.6f})")
    print(f"coupled inf-sup {coupled:.6f}  (rho = {rho:g})")
    (out / "infsup.csv").write_text(
        "n,rho,state_min,state_max,coupled_min\n"
        f"{cfg.n},{rho:.3e},{smin:.6e},{smax:.6e},{coupled:.6e}\n")
    return {"state_min": smin, "state_max": smax, "coupled_min": coupled, "rho": rho}


def _cmd_export(cfg: RunConfig, out: Path) -> dict:
    """Write the first linear(ized) system in Matrix Market format and the mesh."""
    spec = _benchmark(cfg)
    mesh = build_mesh(cfg)
    for _ in range(cfg.levels - 1):
        mesh = refine_uniform(mesh)
    pb = spec.problem
    if pb.reaction is None and not pb.has_bounds and pb.e_u is None and pb.e_z is None \
            and pb.u0 is None:
        system = assemble_coupled_system(mesh, pb.rho, pb.u_d, pb.bc_regime, pb.u0)
    else:
        X1, _ = spaces_for(mesh, pb.bc_regime, pb.u0)
        system, _ = newton_system(pb, mesh, X1.lifting(), np.zeros(mesh.n_vertices))
    system.export(out / "system.mtx")
    (out / "rhs.txt").write_text("\n".join(f"{v:.17g}" for v in system.rhs()) + "\n")
    write_vtk(out / "mesh.vtk", mesh)
    n1, n2 = system.sizes
    print(f"exported {n1}+{n2} unknowns to {out / 'system.mtx'}")
    return {"n_state": n1, "n_adjoint": n2}


_COMMANDS = {"solve": _cmd_solve, "study": _cmd_study, "adapt": _adapt,
             "infsup": _cmd_infsup, "export": _cmd_export}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(ns.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    started = time.perf_counter()
    try:
        cfg = resolve_config(ns)
        out = _out_dir(cfg)
        results = _COMMANDS[ns.command](cfg, out)
        write_manifest(out, cfg, ns.command, results, started)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NewtonError, GmresError) as exc:
        print(f"error: solver failed: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
