"""Camera projection and software rasterization.

Establishes the pixel-to-surface correspondence every geodesic kernel
weight needs: each covered pixel gets the nearest-depth triangle, its
barycentric coordinates at the pixel center, the nearest vertex (largest
barycentric, ties to the smallest vertex id) and the camera-space depth.

Conventions: image origin top-left, y down, pixel (row, col) center at
continuous coordinates (col + 0.5, row + 0.5).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, NoCorrespondenceError
from .mesh import TriMesh

ORTHOGRAPHIC = "orthographic"
PERSPECTIVE = "perspective"


@dataclass(frozen=True)
class Camera:
    mode: str = ORTHOGRAPHIC
    scale: float = 1.0                      # px per model unit (ortho) or focal px
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    width: int = 64
    height: int = 64

    def __post_init__(self):
        rot = np.ascontiguousarray(self.rotation, dtype=np.float64)
        if rot.shape != (3, 3) or np.max(np.abs(rot @ rot.T - np.eye(3))) > 1e-8:
            raise ValueError("camera rotation must be orthonormal (3, 3)")
        if self.mode not in (ORTHOGRAPHIC, PERSPECTIVE):
            raise ValueError(f"unknown camera mode {self.mode!r}")
        if self.scale <= 0:
            raise ValueError("scale/focal must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(
            self, "translation",
            np.ascontiguousarray(self.translation, dtype=np.float64).reshape(3))


def default_face_camera(image_size: int = 64, span: float = 2.2) -> Camera:
    """Frontal orthographic view of the synthetic face (model XY in [-1, 1])."""
    scale = image_size / span
    return Camera(
        mode=ORTHOGRAPHIC,
        scale=scale,
        rotation=np.diag([1.0, -1.0, -1.0]),
        translation=np.array([span / 2, span / 2, 2.0]),
        width=image_size,
        height=image_size,
    )


def project_vertices(mesh_or_vertices, camera: Camera):
    """Project to continuous pixel coordinates.

    Returns (xy (V, 2), depth (V,), valid (V,)). Depth is camera-space z;
    smaller is closer. Perspective points at or behind the camera plane are
    flagged invalid.
    """
    if isinstance(mesh_or_vertices, TriMesh):
        verts = mesh_or_vertices.vertices
    else:
        verts = np.asarray(mesh_or_vertices, dtype=np.float64)
    cam = verts @ camera.rotation.T + camera.translation
    depth = cam[:, 2]
    if camera.mode == ORTHOGRAPHIC:
        xy = camera.scale * cam[:, :2]
        valid = np.ones(len(verts), dtype=bool)
    else:
        valid = depth > 1e-9
        safe_z = np.where(valid, depth, 1.0)
        xy = camera.scale * cam[:, :2] / safe_z[:, None]
        xy = xy + np.array([camera.width / 2.0, camera.height / 2.0])
    return xy, depth, valid


class CorrespondenceMap:
    """Per-pixel surface correspondence from one rasterization pass."""

    def __init__(self, width, height, triangle_id, bary, nearest_vertex, depth):
        self.width = int(width)
        self.height = int(height)
        self.triangle_id = np.ascontiguousarray(triangle_id, dtype=np.int32)
        self.bary = np.ascontiguousarray(bary, dtype=np.float32)
        self.nearest_vertex = np.ascontiguousarray(nearest_vertex, dtype=np.uint32)
        self.depth = np.ascontiguousarray(depth, dtype=np.float32)
        for arr in (self.triangle_id, self.bary, self.nearest_vertex, self.depth):
            arr.setflags(write=False)

    @property
    def mask(self) -> np.ndarray:
        return self.triangle_id >= 0

    def coverage(self) -> float:
        return float(np.mean(self.mask))


def rasterize(mesh: TriMesh, camera: Camera) -> CorrespondenceMap:
    """Z-buffered rasterization at pixel centers.

    Triangles are processed in index order; a pixel is reassigned only on a
    strictly smaller depth, so at exactly equal depth the lowest triangle id
    wins. Output is deterministic for fixed inputs.
    """
    h, w = camera.height, camera.width
    xy, depth, valid = project_vertices(mesh, camera)
    zbuf = np.full((h, w), np.inf)
    tri_id = np.full((h, w), -1, dtype=np.int64)
    bary = np.zeros((h, w, 3))
    for f, (i, j, k) in enumerate(mesh.triangles):
        if not (valid[i] and valid[j] and valid[k]):
            continue
        p0, p1, p2 = xy[i], xy[j], xy[k]
        area = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1])
        if abs(area) < 1e-12:
            continue
        xs = (p0[0], p1[0], p2[0])
        ys = (p0[1], p1[1], p2[1])
        c0 = max(0, int(np.ceil(min(xs) - 0.5)))
        c1 = min(w - 1, int(np.floor(max(xs) - 0.5)))
        r0 = max(0, int(np.ceil(min(ys) - 0.5)))
        r1 = min(h - 1, int(np.floor(max(ys) - 0.5)))
        if c0 > c1 or r0 > r1:
            continue
        px = np.arange(c0, c1 + 1) + 0.5
        py = (np.arange(r0, r1 + 1) + 0.5)[:, None]
        b0 = ((p1[0] - px) * (p2[1] - py) - (p2[0] - px) * (p1[1] - py)) / area
        b1 = ((p2[0] - px) * (p0[1] - py) - (p0[0] - px) * (p2[1] - py)) / area
        b2 = 1.0 - b0 - b1
        inside = (b0 >= 0.0) & (b1 >= 0.0) & (b2 >= 0.0)
        if not inside.any():
            continue
        d = b0 * depth[i] + b1 * depth[j] + b2 * depth[k]
        window = (slice(r0, r1 + 1), slice(c0, c1 + 1))
        closer = inside & (d < zbuf[window])
        if not closer.any():
            continue
        zbuf[window] = np.where(closer, d, zbuf[window])
        tri_id[window] = np.where(closer, f, tri_id[window])
        b_stack = np.stack([np.broadcast_to(b0, closer.shape),
                            np.broadcast_to(b1, closer.shape),
                            np.broadcast_to(b2, closer.shape)], axis=-1)
        bary[window] = np.where(closer[..., None], b_stack, bary[window])

    covered = tri_id >= 0
    nearest = np.zeros((h, w), dtype=np.uint32)
    bary32 = bary.astype(np.float32)
    if covered.any():
        rows, cols = np.nonzero(covered)
        tri_verts = mesh.triangles[tri_id[rows, cols]]          # (n, 3)
        # ties resolved on the stored single precision, lowest vertex id wins
        b = bary32[rows, cols]
        best = b.max(axis=1, keepdims=True)
        candidates = np.where(b == best, tri_verts, np.iinfo(np.int64).max)
        nearest[rows, cols] = candidates.min(axis=1).astype(np.uint32)
    depth_out = np.where(covered, zbuf, 0.0)
    return CorrespondenceMap(w, h, tri_id, bary32, nearest, depth_out)


def depth_map(corr: CorrespondenceMap, background_fill: float | None = None) -> np.ndarray:
    """Depth tensor (1, H, W) min-max normalized over the filled map.

    Background pixels default to one model unit behind the farthest covered
    depth; an empty or constant map normalizes to zeros.
    """
    mask = corr.mask
    d = corr.depth.astype(np.float64)
    if not mask.any():
        return np.zeros((1, corr.height, corr.width))
    fill = background_fill if background_fill is not None else float(d[mask].max()) + 1.0
    d = np.where(mask, d, fill)
    lo, hi = float(d.min()), float(d.max())
    if hi - lo <= 0.0:
        return np.zeros((1, corr.height, corr.width))
    return ((d - lo) / (hi - lo))[None, :, :]


def surface_point_for(corr: CorrespondenceMap, pixel) -> int:
    """Nearest vertex id for a covered (row, col) pixel."""
    row, col = int(pixel[0]), int(pixel[1])
    if not (0 <= row < corr.height and 0 <= col < corr.width):
        raise NoCorrespondenceError(f"pixel ({row}, {col}) outside the image")
    if corr.triangle_id[row, col] < 0:
        raise NoCorrespondenceError(f"pixel ({row}, {col}) not covered by the surface")
    return int(corr.nearest_vertex[row, col])


CORR_MAGIC = b"CRS1"
_PIXEL_DTYPE = np.dtype([
    ("tri", "<i4"),
    ("bary", "<f4", (3,)),
    ("vertex", "<u4"),
    ("depth", "<f4"),
])


def save_correspondence(corr: CorrespondenceMap, path) -> None:
    rec = np.zeros(corr.height * corr.width, dtype=_PIXEL_DTYPE)
    rec["tri"] = corr.triangle_id.ravel()
    rec["bary"] = corr.bary.reshape(-1, 3)
    rec["vertex"] = corr.nearest_vertex.ravel()
    rec["depth"] = corr.depth.ravel()
    with open(path, "wb") as fh:
        fh.write(CORR_MAGIC)
        fh.write(struct.pack("<II", corr.width, corr.height))
        fh.write(rec.tobytes())


def load_correspondence(path) -> CorrespondenceMap:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CORR_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        header = fh.read(8)
        if len(header) != 8:
            raise FormatError(f"{path}: truncated header")
        w, h = struct.unpack("<II", header)
        payload = fh.read(h * w * _PIXEL_DTYPE.itemsize)
        if len(payload) != h * w * _PIXEL_DTYPE.itemsize:
            raise FormatError(f"{path}: truncated pixel payload")
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes")
    rec = np.frombuffer(payload, dtype=_PIXEL_DTYPE)
    return CorrespondenceMap(
        w, h,
        rec["tri"].reshape(h, w),
        rec["bary"].reshape(h, w, 3),
        rec["vertex"].reshape(h, w),
        rec["depth"].reshape(h, w),
    )
