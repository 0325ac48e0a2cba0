"""Simplicial meshes of the space-time cylinder Q = (0,1)^2 x (0,1).

Coordinates are ordered ``(x1, x2, t)``. Cells are tetrahedra stored as
vertex-index rows whose order matters: the structured coarse meshes store
every tetrahedron as a monotone vertex path, which makes newest-vertex style
bisection conforming and shape regular.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

__all__ = [
    "BoundaryTag",
    "MeshError",
    "SpaceTimeMesh",
    "build_unit_cube_mesh",
    "classify_boundary",
    "refine_uniform",
    "refine_adaptive",
    "prolongate",
    "is_conforming",
    "min_dihedral_angle",
]

_GEOM_TOL = 1e-12

# local vertex pairs of the six tetrahedron edges
_EDGES = np.array([(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)])
# local vertex triples of the four faces (face i is opposite vertex i)
_FACES = np.array([(1, 2, 3), (0, 2, 3), (0, 1, 3), (0, 1, 2)])


class MeshError(ValueError):
    """Raised for invalid mesh input or an internally inconsistent mesh."""


class BoundaryTag(enum.IntEnum):
    SIGMA_ZERO = 0  # t = 0
    SIGMA_T = 1  # t = T
    LATERAL = 2  # boundary of the spatial domain times (0, T)


@dataclass(frozen=True, eq=False)
class SpaceTimeMesh:
    """Conforming tetrahedral mesh of the unit space-time cube.

    Attributes
    ----------
    vertices : (N, 3) float array
    cells : (M, 4) int array
    tags : (M,) int array
        Bisection tag per cell; the refinement edge of a cell is
        ``(cells[c, 0], cells[c, tags[c]])``.
    generation : (M,) int array
        Number of bisections separating a cell from the initial mesh
        (one red refinement counts as three).
    boundary_facets : (F, 3) int array
    boundary_tags : (F,) int array of :class:`BoundaryTag`
    boundary_owner : (F,) int array, cell owning each boundary facet
    refinement_level : int
        Number of refinement calls applied since construction.
    """

    vertices: np.ndarray
    cells: np.ndarray
    tags: np.ndarray
    generation: np.ndarray
    boundary_facets: np.ndarray
    boundary_tags: np.ndarray
    boundary_owner: np.ndarray
    refinement_level: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for arr in (self.vertices, self.cells, self.tags, self.generation,
                    self.boundary_facets, self.boundary_tags, self.boundary_owner):
            arr.setflags(write=False)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_cells(self) -> int:
        return self.cells.shape[0]

    @cached_property
    def cell_coords(self) -> np.ndarray:
        """(M, 4, 3) vertex coordinates per cell."""
        return self.vertices[self.cells]

    @cached_property
    def jacobians(self) -> np.ndarray:
        """(M, 3, 3) affine maps; column j is ``v_{j+1} - v_0``."""
        X = self.cell_coords
        return np.transpose(X[:, 1:, :] - X[:, :1, :], (0, 2, 1))

    @cached_property
    def signed_volumes(self) -> np.ndarray:
        return np.linalg.det(self.jacobians) / 6.0

    @cached_property
    def volumes(self) -> np.ndarray:
        return np.abs(self.signed_volumes)

    @cached_property
    def orientation(self) -> np.ndarray:
        """Sign (+1/-1) of each cell's stored vertex order."""
        return np.where(self.signed_volumes > 0, 1, -1).astype(np.int8)

    @cached_property
    def cell_sizes(self) -> np.ndarray:
        """Local axis spacing ``(6 |tau|)^(1/3)``; equals 1/(n-1) on Kuhn cells."""
        return np.cbrt(6.0 * self.volumes)

    @cached_property
    def diameters(self) -> np.ndarray:
        X = self.cell_coords
        d = X[:, _EDGES[:, 0], :] - X[:, _EDGES[:, 1], :]
        return np.sqrt((d ** 2).sum(axis=2)).max(axis=1)

    @property
    def h(self) -> float:
        """Mesh size as per-axis spacing of the coarsest cell."""
        return float(self.cell_sizes.max())

    @cached_property
    def inverse_jacobians(self) -> np.ndarray:
        return np.linalg.inv(self.jacobians)

    @cached_property
    def basis_gradients(self) -> np.ndarray:
        """(M, 4, 3) gradients of the barycentric coordinates per cell."""
        inv = self.inverse_jacobians
        g = np.empty((self.n_cells, 4, 3))
        g[:, 1:, :] = inv
        g[:, 0, :] = -inv.sum(axis=1)
        return g

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.cell_coords.mean(axis=1)

    def boundary_vertices(self, *tags: BoundaryTag) -> np.ndarray:
        """Sorted unique vertex ids lying on facets with any of ``tags``."""
        sel = np.isin(self.boundary_tags, np.asarray(tags, dtype=int))
        return np.unique(self.boundary_facets[sel])

    @cached_property
    def interior_faces(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Faces shared by two cells: ``(faces (K,3), cell_a, cell_b)``."""
        keys, faces, owner = _face_table(self.cells, self.n_vertices)
        order = np.argsort(keys, kind="stable")
        ks = keys[order]
        same = ks[1:] == ks[:-1]
        first = order[:-1][same]
        second = order[1:][same]
        return faces[first], owner[first], owner[second]


def _face_table(cells: np.ndarray, n_vertices: int):
    faces = np.sort(cells[:, _FACES].reshape(-1, 3), axis=1)
    n = np.int64(n_vertices)
    keys = (faces[:, 0].astype(np.int64) * n + faces[:, 1]) * n + faces[:, 2]
    owner = np.repeat(np.arange(cells.shape[0]), 4)
    return keys, faces, owner


def _make_mesh(vertices, cells, tags, generation, level, meta=None) -> SpaceTimeMesh:
    facets, ftags, owner = classify_boundary_arrays(vertices, cells)
    return SpaceTimeMesh(
        vertices=np.ascontiguousarray(vertices, dtype=float),
        cells=np.ascontiguousarray(cells, dtype=np.int64),
        tags=np.ascontiguousarray(tags, dtype=np.int8),
        generation=np.ascontiguousarray(generation, dtype=np.int32),
        boundary_facets=facets,
        boundary_tags=ftags,
        boundary_owner=owner,
        refinement_level=level,
        meta=dict(meta or {}),
    )


def build_unit_cube_mesh(n_vertices_per_axis: int, layout: str = "prism") -> SpaceTimeMesh:
    """Structured tetrahedral mesh of (0,1)^3 with ``n`` vertices per axis.

    Parameters
    ----------
    n_vertices_per_axis : int
        ``n >= 2``; the mesh size is ``h = 1/(n-1)``.
    layout : {"prism", "kuhn"}
        ``"prism"``: every spatial square is cut along its anti-diagonal
        (from ``(1,0)`` to ``(0,1)``), and each triangle times a time slab is
        split into three tetrahedra. This is the default benchmark mesh.
        ``"kuhn"``: every cube is split into six tetrahedra around its main
        diagonal.

    Notes
    -----
    Both layouts are affine images of the Kuhn subdivision and are stored as
    monotone vertex paths with tag 3, so adaptive bisection of the returned
    mesh stays conforming.
    """
    n = int(n_vertices_per_axis)
    if n < 2:
        raise MeshError(f"need at least 2 vertices per axis, got {n}")
    if layout not in ("prism", "kuhn"):
        raise MeshError(f"unknown layout {layout!r}")
    g = np.linspace(0.0, 1.0, n)
    # vertex id = i + n*j + n*n*k for (x1, x2, t) = (g[i], g[j], g[k])
    k, j, i = np.meshgrid(np.arange(n), np.arange(n), np.arange(n), indexing="ij")
    vertices = np.column_stack([g[i.ravel()], g[j.ravel()], g[k.ravel()]])

    m = n - 1
    ck, cj, ci = np.meshgrid(np.arange(m), np.arange(m), np.arange(m), indexing="ij")
    corner = (ci + n * cj + n * n * ck).ravel()
    meta = {"refinement": "red", "layout": layout, "bisection_compatible": True}
    if layout == "kuhn":
        step = np.array([1, n, n * n])
        cells = []
        for perm in itertools.permutations(range(3)):
            offs = np.cumsum([0] + [step[a] for a in perm])
            cells.append(corner[:, None] + offs[None, :])
        cells = np.stack(cells, axis=1).reshape(-1, 4)
    else:
        up = n * n
        # the two triangles of a square, vertex ids sorted: (v00, v10, v01), (v10, v01, v11)
        tri_offsets = ((0, 1, n), (1, n, n + 1))
        cells = []
        for A, B, C in tri_offsets:
            a, b, c = (corner + A), (corner + B), (corner + C)
            cells += [np.stack([a, b, c, c + up], axis=1),
                      np.stack([a, b, b + up, c + up], axis=1),
                      np.stack([a, a + up, b + up, c + up], axis=1)]
        cells = np.stack(cells, axis=1).reshape(-1, 4)
        # vertex order used by the first red refinement to break diagonal ties
        red = np.tile(np.arange(4), (6, 1))
        red[0] = (1, 0, 2, 3)
        red[3] = (0, 2, 1, 3)
        meta["red_order"] = np.tile(red, (corner.size, 1))
    tags = np.full(cells.shape[0], 3)
    gen = np.zeros(cells.shape[0], dtype=np.int32)
    return _make_mesh(vertices, cells, tags, gen, 0, meta=meta)


def classify_boundary_arrays(vertices: np.ndarray, cells: np.ndarray):
    keys, faces, owner = _face_table(cells, vertices.shape[0])
    _, idx, counts = np.unique(keys, return_index=True, return_counts=True)
    if np.any(counts > 2):
        raise MeshError("face shared by more than two cells")
    bidx = idx[counts == 1]
    facets = faces[bidx]
    fowner = owner[bidx]
    fx = vertices[facets]  # (F, 3, 3)
    on_plane = np.zeros((facets.shape[0], 3, 2), dtype=bool)
    for ax in range(3):
        on_plane[:, ax, 0] = np.all(np.abs(fx[:, :, ax]) <= _GEOM_TOL, axis=1)
        on_plane[:, ax, 1] = np.all(np.abs(fx[:, :, ax] - 1.0) <= _GEOM_TOL, axis=1)
    if not np.all(on_plane.reshape(-1, 6).any(axis=1)):
        raise MeshError("boundary facet not on the boundary of Q (hanging node?)")
    ftags = np.full(facets.shape[0], int(BoundaryTag.LATERAL), dtype=np.int8)
    ftags[on_plane[:, 2, 0]] = BoundaryTag.SIGMA_ZERO
    ftags[on_plane[:, 2, 1]] = BoundaryTag.SIGMA_T
    return facets, ftags, fowner


def classify_boundary(mesh: SpaceTimeMesh) -> SpaceTimeMesh:
    """Recompute boundary facets and their tags from the cell complex."""
    return _make_mesh(mesh.vertices, mesh.cells, mesh.tags, mesh.generation,
                      mesh.refinement_level, mesh.meta)


# -- red refinement -----------------------------------------------------------

# children in terms of local ids 0..3 (vertices) and 4..9 (edge midpoints in
# _EDGES order: 01, 02, 03, 12, 13, 23), interior diagonal 02-13
_RED_CHILDREN = np.array([
    (0, 4, 5, 6),
    (4, 1, 7, 8),
    (5, 7, 2, 9),
    (6, 8, 9, 3),
    (4, 5, 6, 8),
    (4, 5, 7, 8),
    (5, 6, 8, 9),
    (5, 7, 8, 9),
])
# vertex permutations moving the chosen diagonal onto 02-13
_DIAG_PERM = {0: (0, 2, 1, 3), 1: (0, 1, 2, 3), 2: (0, 1, 3, 2)}


def _edge_keys(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    lo = np.minimum(a, b).astype(np.int64)
    hi = np.maximum(a, b).astype(np.int64)
    return (lo << 31) | hi


def refine_uniform(mesh: SpaceTimeMesh) -> SpaceTimeMesh:
    """Red refinement: each tetrahedron is split into eight children.

    The interior octahedron is cut along its shortest diagonal, ties resolved
    in favour of the lowest local edge indices (in the order given by
    ``meta["red_order"]`` when present). Meshes produced by adaptive
    bisection are instead refined by three rounds of bisection of every cell
    (also 8-to-1), which keeps later bisections conforming.
    """
    if mesh.meta.get("refinement") != "red":
        return refine_adaptive(mesh, np.arange(mesh.n_cells))
    cells = mesh.cells
    order = mesh.meta.get("red_order")
    if order is not None:
        cells = np.take_along_axis(cells, np.asarray(order), axis=1)
    X = mesh.vertices
    nv = mesh.n_vertices

    ekeys = _edge_keys(cells[:, _EDGES[:, 0]], cells[:, _EDGES[:, 1]])
    uniq, inv = np.unique(ekeys.ravel(), return_inverse=True)
    lo = (uniq >> 31).astype(np.int64)
    hi = (uniq & ((1 << 31) - 1)).astype(np.int64)
    new_vertices = 0.5 * (X[lo] + X[hi])
    mids = nv + inv.reshape(-1, 6)
    allv = np.concatenate([X, new_vertices])

    # shortest octahedron diagonal: pairs of opposite edges (01,23), (02,13), (03,12)
    opp = [(0, 5), (1, 4), (2, 3)]
    dl = np.stack([np.linalg.norm(allv[mids[:, a]] - allv[mids[:, b]], axis=1)
                   for a, b in opp], axis=1)
    dmin = dl.min(axis=1, keepdims=True)
    choice = np.argmax(dl <= dmin * (1 + 1e-12), axis=1)

    local = np.empty((cells.shape[0], 10), dtype=np.int64)
    for c, perm in _DIAG_PERM.items():
        sel = choice == c
        if not np.any(sel):
            continue
        pc = cells[sel][:, perm]
        pk = _edge_keys(pc[:, _EDGES[:, 0]], pc[:, _EDGES[:, 1]])
        pos = np.searchsorted(uniq, pk)
        local[sel, :4] = pc
        local[sel, 4:] = nv + pos
    children = local[:, _RED_CHILDREN].reshape(-1, 4)
    tags = np.full(children.shape[0], 3)
    gen = np.repeat(mesh.generation + 3, 8)
    meta = dict(mesh.meta)
    meta.pop("red_order", None)
    # Kuhn cells refine into Kuhn cells; other layouts lose path ordering
    meta["bisection_compatible"] = bool(mesh.meta.get("bisection_compatible")
                                        and mesh.meta.get("layout") == "kuhn")
    return _make_mesh(allv, children, tags, gen, mesh.refinement_level + 1, meta)


# -- adaptive refinement by bisection ----------------------------------------

class _Bisector:
    """Mutable working state for one adaptive refinement call."""

    def __init__(self, mesh: SpaceTimeMesh):
        self.verts = [mesh.vertices]
        self.nv = mesh.n_vertices
        self.cells = mesh.cells.copy()
        self.tags = mesh.tags.astype(np.int64)
        self.gen = mesh.generation.astype(np.int64)
        self.target = np.full(self.cells.shape[0], -1, dtype=np.int64)
        self.mid_keys = np.empty(0, dtype=np.int64)
        self.mid_ids = np.empty(0, dtype=np.int64)
        # parent edges of new vertices, one array per batch, in creation order
        self.parents: list[np.ndarray] = []

    def _midpoints(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        keys = _edge_keys(a, b)
        out = np.empty(keys.shape[0], dtype=np.int64)
        if self.mid_keys.size:
            pos = np.minimum(np.searchsorted(self.mid_keys, keys), self.mid_keys.size - 1)
            known = self.mid_keys[pos] == keys
            out[known] = self.mid_ids[pos[known]]
        else:
            known = np.zeros(keys.shape[0], dtype=bool)
        new_keys, inv = np.unique(keys[~known], return_inverse=True)
        if new_keys.size:
            lo = (new_keys >> 31).astype(np.int64)
            hi = (new_keys & ((1 << 31) - 1)).astype(np.int64)
            X = np.concatenate(self.verts) if len(self.verts) > 1 else self.verts[0]
            self.verts = [X, 0.5 * (X[lo] + X[hi])]
            self.parents.append(np.column_stack([lo, hi]))
            ids = self.nv + np.arange(new_keys.size)
            self.nv += new_keys.size
            out[~known] = ids[inv]
            allk = np.concatenate([self.mid_keys, new_keys])
            alli = np.concatenate([self.mid_ids, ids])
            o = np.argsort(allk, kind="stable")
            self.mid_keys, self.mid_ids = allk[o], alli[o]
        return out

    def bisect(self, sel: np.ndarray) -> None:
        if sel.size == 0:
            return
        C = self.cells[sel]
        k = self.tags[sel]
        rows = np.arange(sel.size)
        z = self._midpoints(C[:, 0], C[rows, k])
        t1 = C.copy()
        t1[rows, k] = z
        t2 = np.empty_like(C)
        for kk in (1, 2, 3):
            s = k == kk
            if not np.any(s):
                continue
            # (x1, ..., xk, z, x_{k+1}, ..., x3)
            t2[s] = np.column_stack(
                [C[s, 1:kk + 1], z[s, None], C[s, kk + 1:]]
            )
        newtag = np.where(k > 1, k - 1, 3)
        self.cells[sel] = t1
        self.tags[sel] = newtag
        self.gen[sel] += 1
        self.cells = np.concatenate([self.cells, t2])
        self.tags = np.concatenate([self.tags, newtag])
        self.gen = np.concatenate([self.gen, self.gen[sel]])
        self.target = np.concatenate([self.target, self.target[sel]])

    def hanging(self) -> np.ndarray:
        if self.mid_keys.size == 0:
            return np.empty(0, dtype=np.int64)
        ek = _edge_keys(self.cells[:, _EDGES[:, 0]], self.cells[:, _EDGES[:, 1]])
        bad = np.isin(ek, self.mid_keys).any(axis=1)
        return np.flatnonzero(bad)

    def close(self) -> None:
        while True:
            bad = self.hanging()
            if bad.size == 0:
                return
            self.bisect(bad)

    def vertices(self) -> np.ndarray:
        return np.concatenate(self.verts) if len(self.verts) > 1 else self.verts[0]


def refine_adaptive(mesh: SpaceTimeMesh, marked, bisections: int = 3) -> SpaceTimeMesh:
    """Refine the marked cells and restore conformity.

    Each marked cell is bisected ``bisections`` times (three bisections halve
    the local mesh size, matching one red refinement); neighbours carrying a
    hanging vertex are bisected until the mesh is conforming again. The
    bisection rule keeps the number of similarity classes finite, so shape
    regularity is retained over arbitrarily many calls.
    """
    marked = np.unique(np.asarray(list(marked) if not isinstance(marked, np.ndarray)
                                  else marked, dtype=np.int64))
    if marked.size == 0:
        return mesh
    if marked.min() < 0 or marked.max() >= mesh.n_cells:
        raise MeshError("marked cell index out of range")
    if not mesh.meta.get("bisection_compatible", True):
        raise MeshError("cell ordering not suitable for bisection; refine adaptively "
                        "from a structured coarse mesh or a bisection-refined mesh")
    work = _Bisector(mesh)
    work.target[marked] = mesh.generation[marked] + bisections
    while True:
        sel = np.flatnonzero(work.gen < work.target)
        if sel.size == 0:
            break
        work.bisect(sel)
        work.close()
    meta = dict(mesh.meta)
    meta.pop("red_order", None)
    meta["refinement"] = "bisection"
    meta["parent_mesh_vertices"] = mesh.n_vertices
    meta["vertex_parents"] = tuple(work.parents)
    return _make_mesh(work.vertices(), work.cells, work.tags, work.gen,
                      mesh.refinement_level + 1, meta)


def prolongate(fine: SpaceTimeMesh, values: np.ndarray) -> np.ndarray:
    """Carry a P1 field from the parent mesh to ``fine`` produced by :func:`refine_adaptive`.

    New vertices are edge midpoints, so their values are edge averages.
    """
    batches = fine.meta.get("vertex_parents")
    n0 = fine.meta.get("parent_mesh_vertices")
    values = np.asarray(values, dtype=float)
    if batches is None or values.shape != (n0,):
        raise MeshError("field does not live on the parent of this mesh")
    out = np.empty(fine.n_vertices)
    out[:n0] = values
    pos = n0
    for lohi in batches:
        out[pos:pos + lohi.shape[0]] = 0.5 * (out[lohi[:, 0]] + out[lohi[:, 1]])
        pos += lohi.shape[0]
    return out


# -- diagnostics --------------------------------------------------------------

def is_conforming(mesh: SpaceTimeMesh) -> bool:
    """True if faces are shared by at most two cells and unshared faces lie on dQ."""
    try:
        classify_boundary_arrays(mesh.vertices, mesh.cells)
    except MeshError:
        return False
    return bool(np.all(mesh.volumes > 0))


def min_dihedral_angle(mesh: SpaceTimeMesh) -> float:
    """Smallest dihedral angle (radians) over all cells."""
    # inward face normals are the gradients of the barycentric coordinates
    g = mesh.basis_gradients
    n = g / np.linalg.norm(g, axis=2, keepdims=True)
    best = np.inf
    for a, b in _EDGES:
        cos = -(n[:, a, :] * n[:, b, :]).sum(axis=1)
        best = min(best, float(np.arccos(np.clip(cos, -1.0, 1.0)).min()))
    return best
