"""Triangle mesh container and Wavefront OBJ subset IO.

Vertices are float64 (V, 3) arrays in model units, triangles int64 (T, 3)
index triples. All arrays are frozen after construction so meshes can be
shared freely between workers.
"""

from __future__ import annotations

import numpy as np

from .errors import FormatError, MeshError, UnsupportedFaceError

DEGENERATE_AREA = 1e-12


def triangle_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Unsigned area of every triangle."""
    a = vertices[triangles[:, 0]]
    b = vertices[triangles[:, 1]]
    c = vertices[triangles[:, 2]]
    cross = np.cross(b - a, c - a)
    return 0.5 * np.linalg.norm(cross, axis=1)


class TriMesh:
    """Immutable triangle mesh with derived one-ring adjacency.

    Raises MeshError on out-of-range indices, repeated vertices within a
    triangle, or triangles with area below ``DEGENERATE_AREA``.
    """

    def __init__(self, vertices, triangles):
        v = np.ascontiguousarray(vertices, dtype=np.float64)
        t = np.ascontiguousarray(triangles, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"vertices must be (V, 3), got {v.shape}")
        if t.ndim != 2 or t.shape[1] != 3:
            raise MeshError(f"triangles must be (T, 3), got {t.shape}")
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise MeshError("triangle index out of range")
        if t.size:
            if np.any((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])):
                raise MeshError("triangle with repeated vertex")
            areas = triangle_areas(v, t)
            if np.any(areas <= DEGENERATE_AREA):
                bad = int(np.argmin(areas))
                raise MeshError(f"degenerate triangle {bad} (area {areas[bad]:.3e})")
        v.setflags(write=False)
        t.setflags(write=False)
        self.vertices = v
        self.triangles = t
        self._adj_indptr, self._adj_indices = self._build_adjacency()

    def _build_adjacency(self):
        """One-ring vertex adjacency in CSR layout, neighbors sorted."""
        t = self.triangles
        n = self.num_vertices
        if t.size == 0:
            return np.zeros(n + 1, dtype=np.int64), np.zeros(0, dtype=np.int64)
        src = np.concatenate([t[:, 0], t[:, 1], t[:, 1], t[:, 2], t[:, 2], t[:, 0]])
        dst = np.concatenate([t[:, 1], t[:, 0], t[:, 2], t[:, 1], t[:, 0], t[:, 2]])
        pairs = np.unique(np.stack([src, dst], axis=1), axis=0)
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(indptr, pairs[:, 0] + 1, 1)
        np.cumsum(indptr, out=indptr)
        return indptr, np.ascontiguousarray(pairs[:, 1])

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_triangles(self) -> int:
        return len(self.triangles)

    def one_ring(self, vertex: int) -> np.ndarray:
        """Sorted neighbor vertex ids of ``vertex``."""
        return self._adj_indices[self._adj_indptr[vertex]:self._adj_indptr[vertex + 1]]

    def adjacency(self):
        """(indptr, indices) CSR adjacency; rebuilt arrays are bit-identical."""
        return self._adj_indptr, self._adj_indices

    def edges(self) -> np.ndarray:
        """Unique undirected edges as (E, 2) with first index smaller."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    def mean_edge_length(self) -> float:
        e = self.edges()
        d = self.vertices[e[:, 0]] - self.vertices[e[:, 1]]
        return float(np.mean(np.linalg.norm(d, axis=1)))

    def areas(self) -> np.ndarray:
        return triangle_areas(self.vertices, self.triangles)

    def total_area(self) -> float:
        return float(np.sum(self.areas()))

    def scaled(self, factor: float) -> "TriMesh":
        return TriMesh(self.vertices * factor, self.triangles)


def grid_mesh(rows: int, cols: int | None = None, spacing: float = 1.0,
              origin=(0.0, 0.0, 0.0), heights=None) -> TriMesh:
    """Regular grid in the z=0 plane, each cell split along one diagonal.

    ``heights`` optionally supplies a (rows, cols) z field. Vertex (r, c)
    gets index r*cols + c; cell (r, c) yields triangles
    (v, v+1, v+cols) and (v+1, v+cols+1, v+cols).
    """
    if cols is None:
        cols = rows
    if rows < 2 or cols < 2:
        raise MeshError("grid needs at least 2x2 vertices")
    rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    x = origin[0] + cc.ravel() * spacing
    y = origin[1] + rr.ravel() * spacing
    z = np.full(rows * cols, origin[2], dtype=np.float64)
    if heights is not None:
        z = z + np.asarray(heights, dtype=np.float64).reshape(rows * cols)
    vertices = np.stack([x, y, z], axis=1)

    r0 = np.repeat(np.arange(rows - 1), cols - 1)
    c0 = np.tile(np.arange(cols - 1), rows - 1)
    v = r0 * cols + c0
    tri_a = np.stack([v, v + 1, v + cols], axis=1)
    tri_b = np.stack([v + 1, v + cols + 1, v + cols], axis=1)
    triangles = np.concatenate([tri_a, tri_b])
    return TriMesh(vertices, triangles)


def save_mesh_obj(mesh: TriMesh, path) -> None:
    """Write 'v'/'f' records; coordinates use round-trip-exact reprs."""
    with open(path, "w", encoding="ascii") as fh:
        for x, y, z in mesh.vertices:
            fh.write(f"v {x:.17g} {y:.17g} {z:.17g}\n")
        for a, b, c in mesh.triangles:
            fh.write(f"f {a + 1} {b + 1} {c + 1}\n")


def load_mesh_obj(path) -> TriMesh:
    """Parse the OBJ subset: 'v' and 'f' records, triangular faces only.

    Unknown record types are ignored. Face indices may carry the usual
    '/texture/normal' suffixes, which are dropped. Errors report the
    1-based line number.
    """
    vertices = []
    faces = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise FormatError(f"{path}:{lineno}: vertex needs 3 coordinates")
                try:
                    vertices.append([float(parts[1]), float(parts[2]), float(parts[3])])
                except ValueError as exc:
                    raise FormatError(f"{path}:{lineno}: bad vertex coordinate") from exc
            elif tag == "f":
                idx = parts[1:]
                if len(idx) != 3:
                    raise UnsupportedFaceError(
                        f"{path}:{lineno}: face with {len(idx)} vertices (triangles only)")
                face = []
                for token in idx:
                    head = token.split("/")[0]
                    try:
                        i = int(head)
                    except ValueError as exc:
                        raise FormatError(f"{path}:{lineno}: bad face index {token!r}") from exc
                    if i < 0:
                        raise FormatError(f"{path}:{lineno}: negative face index unsupported")
                    face.append(i - 1)
                faces.append(face)
    if not vertices:
        raise FormatError(f"{path}: no vertex records")
    return TriMesh(np.asarray(vertices), np.asarray(faces, dtype=np.int64))
