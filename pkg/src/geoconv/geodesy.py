"""On-surface geodesic distance fields.

The production path is the three-step heat-diffusion method: a short-time
implicit heat solve from a point source, normalization of the negated heat
gradient into a unit direction field, and a Poisson solve that integrates
that field back into a distance. A Dijkstra solve over the edge graph acts
as the independent oracle; it never shares code with the heat path beyond
the mesh itself.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components, dijkstra

from .errors import FormatError, MeshError, SolverError
from .mesh import DEGENERATE_AREA, TriMesh

SYMMETRY_TOL = 1e-12


class SparseSym:
    """Sparse matrix in canonical CSR form (duplicates summed, explicit
    zeros dropped, column indices sorted), optionally flagged symmetric.

    The symmetry flag is verified at construction: max |A - A^T| entry
    must not exceed 1e-12.
    """

    def __init__(self, csr: sp.csr_matrix, symmetric: bool = True):
        if csr.shape[0] != csr.shape[1]:
            raise ValueError(f"matrix must be square, got {csr.shape}")
        csr = csr.copy()
        csr.sum_duplicates()
        csr.eliminate_zeros()
        csr.sort_indices()
        if symmetric:
            skew = (csr - csr.T).tocoo()
            if skew.nnz and np.max(np.abs(skew.data)) > SYMMETRY_TOL:
                raise ValueError("matrix flagged symmetric but entries mismatch")
        self._csr = csr
        self.symmetric = symmetric
        self._diag = None

    @staticmethod
    def from_coo(n: int, rows, cols, vals, symmetric: bool = True) -> "SparseSym":
        mat = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
        return SparseSym(mat, symmetric=symmetric)

    @property
    def n(self) -> int:
        return self._csr.shape[0]

    @property
    def nnz(self) -> int:
        return self._csr.nnz

    @property
    def indptr(self):
        return self._csr.indptr

    @property
    def indices(self):
        return self._csr.indices

    @property
    def data(self):
        return self._csr.data

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self._csr @ x

    def diagonal(self) -> np.ndarray:
        if self._diag is None:
            self._diag = self._csr.diagonal()
        return self._diag

    def to_scipy(self) -> sp.csr_matrix:
        return self._csr

    def scaled_add(self, scale: float, diag: np.ndarray) -> "SparseSym":
        """scale * self + diag(diag), preserving symmetry."""
        return SparseSym(scale * self._csr + sp.diags(diag).tocsr(), symmetric=self.symmetric)


def _corner_cotangents(mesh: TriMesh) -> np.ndarray:
    """(T, 3) cotangent of the interior angle at each triangle corner."""
    v = mesh.vertices
    t = mesh.triangles
    cots = np.empty((len(t), 3))
    for c in range(3):
        p = v[t[:, c]]
        q = v[t[:, (c + 1) % 3]]
        r = v[t[:, (c + 2) % 3]]
        u = q - p
        w = r - p
        cross = np.linalg.norm(np.cross(u, w), axis=1)
        if np.any(cross <= 2.0 * DEGENERATE_AREA):
            raise MeshError("degenerate triangle in cotangent computation")
        cots[:, c] = np.einsum("ij,ij->i", u, w) / cross
    return cots


def cotan_laplacian(mesh: TriMesh) -> SparseSym:
    """Positive semi-definite cotangent stiffness matrix.

    Off-diagonal (i, j) is -(cot a + cot b)/2 summed over the triangles
    sharing edge ij; the diagonal is minus the off-diagonal row sum, so
    every row sums to zero and the quadratic form is >= 0.
    """
    t = mesh.triangles
    cots = _corner_cotangents(mesh)
    rows, cols, vals = [], [], []
    for c in range(3):
        i = t[:, (c + 1) % 3]
        j = t[:, (c + 2) % 3]
        w = 0.5 * cots[:, c]
        rows.extend([i, j, i, j])
        cols.extend([j, i, i, j])
        vals.extend([-w, -w, w, w])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    return SparseSym.from_coo(mesh.num_vertices, rows, cols, vals, symmetric=True)


def lumped_mass(mesh: TriMesh) -> np.ndarray:
    """Barycentric vertex masses: one third of the incident triangle area."""
    areas = mesh.areas()
    mass = np.zeros(mesh.num_vertices)
    for c in range(3):
        np.add.at(mass, mesh.triangles[:, c], areas / 3.0)
    if np.any(mass <= 0):
        raise MeshError("vertex with no incident triangle area")
    return mass


def solve_spd(A: SparseSym, b: np.ndarray, tol: float = 1e-10,
              max_iter: int | None = None) -> np.ndarray:
    """Conjugate gradient with Jacobi preconditioner.

    Stops when the relative residual ||Ax - b|| / ||b|| drops to ``tol``.
    For singular positive semi-definite systems the caller must supply a
    right-hand side orthogonal to the null space. Raises SolverError with
    the final residual on non-convergence.
    """
    b = np.asarray(b, dtype=np.float64)
    n = A.n
    if b.shape != (n,):
        raise ValueError(f"rhs shape {b.shape} does not match matrix size {n}")
    b_norm = np.linalg.norm(b)
    if b_norm == 0.0:
        return np.zeros(n)
    if max_iter is None:
        max_iter = 2 * n + 100
    diag = A.diagonal()
    inv_diag = np.where(np.abs(diag) > 0.0, 1.0 / np.where(diag == 0.0, 1.0, diag), 1.0)

    x = np.zeros(n)
    r = b.copy()
    z = inv_diag * r
    p = z.copy()
    rz = float(r @ z)
    residual = 1.0
    for _ in range(max_iter):
        Ap = A.matvec(p)
        pAp = float(p @ Ap)
        if pAp <= 0.0:
            raise SolverError("matrix is not positive definite along search direction",
                              residual=residual)
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        residual = float(np.linalg.norm(r) / b_norm)
        if residual <= tol:
            return x
        z = inv_diag * r
        rz_new = float(r @ z)
        beta = rz_new / rz
        p = z + beta * p
        rz = rz_new
    raise SolverError(f"conjugate gradient stalled at residual {residual:.3e}",
                      residual=residual, iterations=max_iter)


@dataclass(frozen=True)
class GeodesicField:
    """Distances from one source vertex to every vertex (inf = unreachable)."""

    source: int
    distances: np.ndarray


HEAT_SOLVE_TOL = 3e-14
POISSON_SOLVE_TOL = 1e-12


class HeatSolver:
    """Shared per-mesh state for heat-method geodesics.

    Assembles the stiffness/mass operators, the implicit heat-step matrix,
    per-triangle gradient operators and the integrated-divergence matrix
    once; each ``field`` call then costs two or three conjugate-gradient
    solves. The heat and Poisson steps use tolerances well below the
    general solver default: the heat value decays exponentially with
    distance, so far-field gradients stay above the solver's error floor
    only when the residual is pushed near machine precision.
    """

    def __init__(self, mesh: TriMesh, t_scale: float = 1.0):
        if t_scale <= 0:
            raise ValueError("t_scale must be positive")
        self.mesh = mesh
        self.laplacian = cotan_laplacian(mesh)
        self.mass = lumped_mass(mesh)
        h = mesh.mean_edge_length()
        self.t = t_scale * h * h
        self.heat_matrix = self.laplacian.scaled_add(self.t, self.mass)

        v = mesh.vertices
        t = mesh.triangles
        e0 = v[t[:, 2]] - v[t[:, 1]]
        e1 = v[t[:, 0]] - v[t[:, 2]]
        e2 = v[t[:, 1]] - v[t[:, 0]]
        normal = np.cross(-e2, e1)  # (p1-p0) x (p2-p0)
        double_area = np.linalg.norm(normal, axis=1)
        unit_n = normal / double_area[:, None]
        # gradient of linear u on triangle f: sum_c u[corner c] * G[f, c]
        self._grad_ops = np.stack([
            np.cross(unit_n, e0) / double_area[:, None],
            np.cross(unit_n, e1) / double_area[:, None],
            np.cross(unit_n, e2) / double_area[:, None],
        ], axis=1)

        cots = _corner_cotangents(mesh)
        rows, cols, vals = [], [], []
        for c in range(3):
            nxt = (c + 1) % 3
            prv = (c + 2) % 3
            edge1 = v[t[:, nxt]] - v[t[:, c]]   # opposite angle at prv
            edge2 = v[t[:, prv]] - v[t[:, c]]   # opposite angle at nxt
            w = 0.5 * (cots[:, prv, None] * edge1 + cots[:, nxt, None] * edge2)
            for axis in range(3):
                rows.append(t[:, c])
                cols.append(3 * np.arange(len(t)) + axis)
                vals.append(w[:, axis])
        self._div = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(mesh.num_vertices, 3 * len(t))).tocsr()

        adj = sp.coo_matrix(
            (np.ones(len(t) * 6),
             (np.concatenate([t[:, 0], t[:, 1], t[:, 1], t[:, 2], t[:, 2], t[:, 0]]),
              np.concatenate([t[:, 1], t[:, 0], t[:, 2], t[:, 1], t[:, 0], t[:, 2]]))),
            shape=(mesh.num_vertices, mesh.num_vertices)).tocsr()
        self._n_components, self._component = connected_components(adj, directed=False)

        # Boundary vertices (edges with a single incident triangle). Heat
        # solutions on meshes with boundary average the reflecting (Neumann)
        # and absorbing (Dirichlet) variants; the restricted interior system
        # is shared by all interior sources, so build it once.
        edge = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        edge.sort(axis=1)
        uniq, counts = np.unique(edge, axis=0, return_counts=True)
        self._boundary = np.unique(uniq[counts == 1])
        self._is_boundary = np.zeros(mesh.num_vertices, dtype=bool)
        self._is_boundary[self._boundary] = True
        if len(self._boundary):
            self._interior = np.flatnonzero(~self._is_boundary)
            sub = self.heat_matrix.to_scipy()[np.ix_(self._interior, self._interior)]
            self._heat_interior = SparseSym(sub.tocsr(), symmetric=True)
            self._interior_pos = np.full(mesh.num_vertices, -1)
            self._interior_pos[self._interior] = np.arange(len(self._interior))
        else:
            self._heat_interior = None

    def _heat_solution(self, source: int, delta: np.ndarray) -> np.ndarray:
        u = solve_spd(self.heat_matrix, delta, tol=HEAT_SOLVE_TOL)
        if self._heat_interior is None or self._is_boundary[source]:
            return u
        rhs = delta[self._interior]
        u_abs = np.zeros(len(delta))
        u_abs[self._interior] = solve_spd(self._heat_interior, rhs, tol=HEAT_SOLVE_TOL)
        return 0.5 * (u + u_abs)

    def field(self, source: int) -> GeodesicField:
        n = self.mesh.num_vertices
        if not 0 <= source < n:
            raise ValueError(f"source {source} out of range")
        comp = self._component[source]
        in_comp = self._component == comp
        if int(np.sum(in_comp)) < 3:
            raise MeshError("source component has fewer than 3 vertices")

        delta = np.zeros(n)
        delta[source] = 1.0
        u = self._heat_solution(source, delta)

        t = self.mesh.triangles
        grad = (u[t[:, 0], None] * self._grad_ops[:, 0]
                + u[t[:, 1], None] * self._grad_ops[:, 1]
                + u[t[:, 2], None] * self._grad_ops[:, 2])
        norm = np.linalg.norm(grad, axis=1)
        safe = np.where(norm > 0.0, norm, 1.0)
        direction = -grad / safe[:, None]
        direction[norm == 0.0] = 0.0

        rhs = -(self._div @ direction.ravel())
        if self._n_components == 1:
            rhs -= rhs.mean()
        else:
            for c in range(self._n_components):
                m = self._component == c
                rhs[m] -= rhs[m].mean()
        phi = solve_spd(self.laplacian, rhs, tol=POISSON_SOLVE_TOL)

        # Anchor the shift against the source's one-ring rather than the
        # source vertex itself: the piecewise-linear fit rounds the cone tip
        # by a near-constant fraction of the edge length, which would bias
        # every distance when anchored at the tip.
        ring = self.mesh.one_ring(source)
        edge_len = np.linalg.norm(self.mesh.vertices[ring] - self.mesh.vertices[source],
                                  axis=1)
        shift = float(np.mean(phi[ring] - edge_len))
        dist = np.abs(phi - shift)
        dist[~in_comp] = np.inf
        # distances to edge-adjacent vertices are known exactly: the straight
        # edge lies on the surface and is also the 3D lower bound
        dist[ring] = edge_len
        dist[source] = 0.0
        return GeodesicField(source=int(source), distances=dist)


def heat_geodesic(mesh: TriMesh, source: int, t_scale: float = 1.0) -> GeodesicField:
    """Heat-method geodesic distances from one source vertex."""
    return HeatSolver(mesh, t_scale=t_scale).field(source)


def dijkstra_geodesic(mesh: TriMesh, source: int) -> GeodesicField:
    """Exact shortest paths over the edge graph with Euclidean lengths.

    Upper-bounds the true surface geodesic; used as the oracle for the
    heat method.
    """
    e = mesh.edges()
    lengths = np.linalg.norm(mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]], axis=1)
    n = mesh.num_vertices
    graph = sp.coo_matrix(
        (np.concatenate([lengths, lengths]),
         (np.concatenate([e[:, 0], e[:, 1]]), np.concatenate([e[:, 1], e[:, 0]]))),
        shape=(n, n)).tocsr()
    dist = dijkstra(graph, directed=False, indices=source)
    return GeodesicField(source=int(source), distances=dist)


def geodesic_batch(mesh: TriMesh, sources, t_scale: float = 1.0):
    """Heat-method fields for many sources sharing one assembled solver.

    Returns (fields, errors): per-source GeodesicField results plus any
    per-source failures, keyed by vertex id. Matrix assembly is done once;
    every source then follows exactly the single-call solve path.
    """
    solver = HeatSolver(mesh, t_scale=t_scale)
    fields: dict[int, GeodesicField] = {}
    errors: dict[int, Exception] = {}
    for s in sources:
        s = int(s)
        if s in fields or s in errors:
            continue
        try:
            fields[s] = solver.field(s)
        except (SolverError, MeshError, ValueError) as exc:
            errors[s] = exc
    return fields, errors


FIELD_MAGIC = b"GFD1"


def save_geodesic_field(field: GeodesicField, path) -> None:
    with open(path, "wb") as fh:
        fh.write(FIELD_MAGIC)
        fh.write(struct.pack("<II", len(field.distances), field.source))
        fh.write(np.asarray(field.distances, dtype="<f8").tobytes())


def load_geodesic_field(path) -> GeodesicField:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FIELD_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        header = fh.read(8)
        if len(header) != 8:
            raise FormatError(f"{path}: truncated header")
        n, source = struct.unpack("<II", header)
        payload = fh.read(8 * n)
        if len(payload) != 8 * n:
            raise FormatError(f"{path}: truncated distance payload")
        dist = np.frombuffer(payload, dtype="<f8").copy()
    return GeodesicField(source=source, distances=dist)
