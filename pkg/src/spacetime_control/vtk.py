"""Legacy ASCII VTK output of space-time meshes and fields."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .mesh import SpaceTimeMesh

__all__ = ["write_vtk"]

_VTK_TETRA = 10


def _check(name: str, values, n: int, what: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.shape != (n,):
        raise ValueError(f"{what} field {name!r} must have shape ({n},), got {arr.shape}")
    return arr


def write_vtk(path, mesh: SpaceTimeMesh, point_data: dict | None = None,
              cell_data: dict | None = None, title: str = "space-time solution") -> Path:
    """Write an unstructured tetrahedral grid with scalar fields.

    Parameters
    ----------
    path : str or Path
        Output file; a ``.vtk`` suffix is appended if missing.
    mesh : SpaceTimeMesh
        The third coordinate is time.
    point_data, cell_data : dict of name -> array
        Nodal fields of length ``n_vertices`` and per-cell fields of length
        ``n_cells``.
    """
    path = Path(path)
    if path.suffix != ".vtk":
        path = path.with_suffix(path.suffix + ".vtk")
    point_data = {k: _check(k, v, mesh.n_vertices, "point") for k, v in (point_data or {}).items()}
    cell_data = {k: _check(k, v, mesh.n_cells, "cell") for k, v in (cell_data or {}).items()}

    nc = mesh.n_cells
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write(title.replace("\n", " ")[:255] + "\n")
        fh.write("ASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {mesh.n_vertices} double\n")
        np.savetxt(fh, mesh.vertices, fmt="%.17g")
        fh.write(f"CELLS {nc} {5 * nc}\n")
        np.savetxt(fh, np.column_stack([np.full(nc, 4), mesh.cells]), fmt="%d")
        fh.write(f"CELL_TYPES {nc}\n")
        np.savetxt(fh, np.full(nc, _VTK_TETRA), fmt="%d")
        for header, n, fields in (("POINT_DATA", mesh.n_vertices, point_data),
                                  ("CELL_DATA", nc, cell_data)):
            if not fields:
                continue
            fh.write(f"{header} {n}\n")
            for name, arr in fields.items():
                fh.write(f"SCALARS {name.replace(' ', '_')} double 1\nLOOKUP_TABLE default\n")
                np.savetxt(fh, arr, fmt="%.17g")
    return path
