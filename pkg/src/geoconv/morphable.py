"""Parametric face shape model: mean shape plus identity/expression bases.

Shapes are stored flat, interleaved xyz per vertex (length 3V), so vertex i
of an assembled shape is ``flat[3*i : 3*i+3]``. Basis matrices are (3V, n)
with one displacement field per column.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, FormatError, VersionError
from .mesh import TriMesh, grid_mesh

MODEL_MAGIC = b"GMM1"
DEFAULT_ID_DIMS = 100
DEFAULT_EXP_DIMS = 79

# Analytic feature regions of the synthetic face, in the grid's [-1, 1]^2
# coordinates. Expression columns 0 and 1 are hard-masked to these.
BROW_REGION = {"x_abs": (0.10, 0.62), "y": (0.22, 0.64)}
MOUTH_REGION = {"x_abs": (0.0, 0.42), "y": (-0.70, -0.26)}


class MorphableModel:
    """Mean shape + PCA-style identity and expression displacement bases."""

    def __init__(self, mean_shape, id_basis, exp_basis, triangles):
        mean = np.ascontiguousarray(mean_shape, dtype=np.float64).ravel()
        idb = np.ascontiguousarray(id_basis, dtype=np.float64)
        expb = np.ascontiguousarray(exp_basis, dtype=np.float64)
        tris = np.ascontiguousarray(triangles, dtype=np.int64)
        if mean.size % 3 != 0:
            raise DimensionError("mean shape length must be a multiple of 3")
        if idb.ndim != 2 or expb.ndim != 2:
            raise DimensionError("bases must be 2-d matrices")
        if idb.shape[0] != mean.size or expb.shape[0] != mean.size:
            raise DimensionError(
                f"basis rows ({idb.shape[0]}/{expb.shape[0]}) must equal "
                f"mean shape length ({mean.size})")
        nv = mean.size // 3
        if tris.size and tris.max() >= nv:
            raise DimensionError("triangle index exceeds vertex count")
        for arr in (mean, idb, expb, tris):
            arr.setflags(write=False)
        self.mean_shape = mean
        self.id_basis = idb
        self.exp_basis = expb
        self.triangles = tris

    @property
    def num_vertices(self) -> int:
        return self.mean_shape.size // 3

    @property
    def num_id(self) -> int:
        return self.id_basis.shape[1]

    @property
    def num_exp(self) -> int:
        return self.exp_basis.shape[1]


@dataclass(frozen=True)
class ShapeCoeffs:
    """Identity and expression coefficient vectors."""

    w_id: np.ndarray
    w_exp: np.ndarray

    @staticmethod
    def zeros(model: MorphableModel) -> "ShapeCoeffs":
        return ShapeCoeffs(np.zeros(model.num_id), np.zeros(model.num_exp))


def build_shape(model: MorphableModel, coeffs: ShapeCoeffs) -> TriMesh:
    """Assemble mean + id_basis @ w_id + exp_basis @ w_exp into a mesh."""
    w_id = np.asarray(coeffs.w_id, dtype=np.float64).ravel()
    w_exp = np.asarray(coeffs.w_exp, dtype=np.float64).ravel()
    if w_id.size != model.num_id:
        raise DimensionError(
            f"identity coefficients have {w_id.size} entries, model expects {model.num_id}")
    if w_exp.size != model.num_exp:
        raise DimensionError(
            f"expression coefficients have {w_exp.size} entries, model expects {model.num_exp}")
    flat = model.mean_shape + model.id_basis @ w_id + model.exp_basis @ w_exp
    return TriMesh(flat.reshape(-1, 3), model.triangles)


def save_morphable_model(model: MorphableModel, path) -> None:
    """Binary layout: GMM1 | u32 V,nId,nExp,T | mean f64 | bases column-major f64 | tris u32."""
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<IIII", model.num_vertices, model.num_id,
                             model.num_exp, len(model.triangles)))
        fh.write(model.mean_shape.astype("<f8").tobytes())
        fh.write(model.id_basis.astype("<f8").tobytes(order="F"))
        fh.write(model.exp_basis.astype("<f8").tobytes(order="F"))
        fh.write(model.triangles.astype("<u4").tobytes())


def _read_exact(fh, count: int, what: str, path) -> bytes:
    buf = fh.read(count)
    if len(buf) != count:
        raise FormatError(f"{path}: truncated while reading {what}")
    return buf


def load_morphable_model(path) -> MorphableModel:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MODEL_MAGIC:
            if magic[:3] == MODEL_MAGIC[:3]:
                raise VersionError(f"{path}: unsupported model version {magic!r}")
            raise FormatError(f"{path}: bad magic {magic!r}")
        nv, n_id, n_exp, nt = struct.unpack("<IIII", _read_exact(fh, 16, "header", path))
        mean = np.frombuffer(_read_exact(fh, 8 * 3 * nv, "mean shape", path), dtype="<f8")
        idb = np.frombuffer(_read_exact(fh, 8 * 3 * nv * n_id, "identity basis", path),
                            dtype="<f8").reshape((3 * nv, n_id), order="F")
        expb = np.frombuffer(_read_exact(fh, 8 * 3 * nv * n_exp, "expression basis", path),
                             dtype="<f8").reshape((3 * nv, n_exp), order="F")
        tris = np.frombuffer(_read_exact(fh, 4 * 3 * nt, "triangles", path),
                             dtype="<u4").reshape(nt, 3)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after payload")
    return MorphableModel(mean, idb, expb, tris.astype(np.int64))


def _grid_xy(resolution: int):
    """Grid coordinates over [-1, 1]^2, row-major to match grid_mesh indexing."""
    lin = np.linspace(-1.0, 1.0, resolution)
    yy, xx = np.meshgrid(lin, lin, indexing="ij")
    return xx.ravel(), yy.ravel()


def _bump(x, y, cx, cy, sx, sy):
    return np.exp(-((x - cx) ** 2 / sx + (y - cy) ** 2 / sy))


def _face_heights(x, y):
    z = 0.42 * np.exp(-(x ** 2 + y ** 2) / 0.5)
    z += 0.30 * _bump(x, y, 0.0, -0.05, 0.012, 0.045)            # nose ridge
    z += 0.10 * _bump(x, y, 0.35, 0.42, 0.02, 0.008)             # right brow
    z += 0.10 * _bump(x, y, -0.35, 0.42, 0.02, 0.008)            # left brow
    z += 0.08 * _bump(x, y, 0.0, -0.48, 0.05, 0.006)             # lips
    z -= 0.06 * _bump(x, y, 0.30, 0.18, 0.012, 0.008)            # right eye
    z -= 0.06 * _bump(x, y, -0.30, 0.18, 0.012, 0.008)           # left eye
    return z


def synthetic_expression_support(resolution: int, column: int) -> np.ndarray:
    """Boolean vertex mask of the declared support of expression column 0 or 1."""
    x, y = _grid_xy(resolution)
    if column == 0:
        r = BROW_REGION
        return (np.abs(x) >= r["x_abs"][0]) & (np.abs(x) <= r["x_abs"][1]) \
            & (y >= r["y"][0]) & (y <= r["y"][1])
    if column == 1:
        r = MOUTH_REGION
        return (np.abs(x) <= r["x_abs"][1]) & (y >= r["y"][0]) & (y <= r["y"][1])
    raise ValueError("only columns 0 and 1 carry declared support regions")


def make_synthetic_face_model(resolution: int, seed: int) -> MorphableModel:
    """Deterministic stand-in face model on a resolution x resolution grid.

    The mean shape is a height-field face (dome, nose, brows, lips, eye
    sockets) over [-1, 1]^2. Identity columns are smooth low-frequency
    displacement fields; expression column 0 is a localized brow raise and
    column 1 a localized mouth-open deformation, both hard-masked to their
    declared regions so coefficient-driven labels stay local.
    """
    if resolution < 8:
        raise DimensionError("resolution must be >= 8")
    x, y = _grid_xy(resolution)
    nv = resolution * resolution
    spacing = 2.0 / (resolution - 1)
    base = grid_mesh(resolution, resolution, spacing=spacing, origin=(-1.0, -1.0, 0.0),
                     heights=_face_heights(x, y).reshape(resolution, resolution))
    mean = base.vertices.ravel()

    rng = np.random.default_rng(seed)

    id_basis = np.zeros((3 * nv, DEFAULT_ID_DIMS))
    freqs = [(p, q) for p in range(3) for q in range(3)]
    for col in range(DEFAULT_ID_DIMS):
        coef = rng.standard_normal(len(freqs))
        dz = np.zeros(nv)
        for (p, q), a in zip(freqs, coef):
            dz += a * np.cos(0.5 * np.pi * p * (x + 1)) * np.cos(0.5 * np.pi * q * (y + 1))
        dz *= 0.05 / max(np.sqrt(np.mean(dz ** 2)), 1e-9)
        dxy = rng.standard_normal(2) * 0.01
        field = np.zeros((nv, 3))
        field[:, 0] = dxy[0] * dz / 0.05 * 0.2
        field[:, 1] = dxy[1] * dz / 0.05 * 0.2
        field[:, 2] = dz
        id_basis[:, col] = field.ravel()

    exp_basis = np.zeros((3 * nv, DEFAULT_EXP_DIMS))

    brow_mask = synthetic_expression_support(resolution, 0)
    brow = 0.22 * (_bump(x, y, 0.35, 0.42, 0.03, 0.012)
                   + _bump(x, y, -0.35, 0.42, 0.03, 0.012))
    field = np.zeros((nv, 3))
    field[:, 2] = np.where(brow_mask, brow, 0.0)
    field[:, 1] = np.where(brow_mask, 0.35 * brow, 0.0)
    exp_basis[:, 0] = field.ravel()

    mouth_mask = synthetic_expression_support(resolution, 1)
    mouth = _bump(x, y, 0.0, -0.48, 0.03, 0.012)
    field = np.zeros((nv, 3))
    field[:, 2] = np.where(mouth_mask, -0.26 * mouth, 0.0)
    field[:, 1] = np.where(mouth_mask, -0.12 * mouth, 0.0)
    exp_basis[:, 1] = field.ravel()

    for col in range(2, DEFAULT_EXP_DIMS):
        cx, cy = rng.uniform(-0.7, 0.7, size=2)
        amp = 0.04 * rng.standard_normal()
        field = np.zeros((nv, 3))
        field[:, 2] = amp * _bump(x, y, cx, cy, 0.02, 0.02)
        exp_basis[:, col] = field.ravel()

    return MorphableModel(mean, id_basis, exp_basis, base.triangles)
