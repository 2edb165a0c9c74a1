"""Per-layer geodesic kernel weight compilation.

For every spatial location of a geodesic-weighted conv layer, the kernel's
K x K taps get dimensionless weights derived from the ratio of on-surface
geodesic distance to image-plane Euclidean distance between the receptive
field centers of the tap and the center location. Ratios are turned into
weights by a softmax over the K^2 - 1 neighbor taps scaled by (K^2 - 1);
the center tap weight is exactly 1. Equal ratios therefore reduce every
weight to 1 and the layer degenerates to a regular convolution.

Layer geometry follows the standard receptive-field recursion for the
supported algebra (stride-1 same-padded convs, 2 x 2 stride-2 pools):
entering a conv leaves the cumulative stride s and center offset c
unchanged; a pool doubles s and adds the old s / 2 to c.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ArchitectureError, FormatError, PrecomputeError, VersionError
from .geodesy import GeodesicField, geodesic_batch
from .mesh import TriMesh
from .projection import ORTHOGRAPHIC, Camera, CorrespondenceMap

DEFAULT_CLAMP_RATIO = 8.0


@dataclass(frozen=True)
class LayerGeometry:
    """Back-projection data for one conv layer's output grid."""

    index: int        # conv ordinal within the branch, 0-based
    stride: int       # input pixels per unit output step
    offset: float     # input-pixel coordinate of output location (0, 0)
    kernel: int
    height: int
    width: int


def layer_geometry_chain(layers, input_height: int, input_width: int):
    """Geometry of every conv layer in a conv/pool sequence.

    ``layers`` is a sequence of ("conv", K) and ("pool", 2) records in
    network order. Returns one LayerGeometry per conv.
    """
    stride = 1
    offset = 0.0
    h, w = int(input_height), int(input_width)
    out = []
    conv_index = 0
    for entry in layers:
        kind = entry[0]
        if kind == "conv":
            k = int(entry[1])
            if k % 2 != 1 or k < 1:
                raise ArchitectureError(f"conv kernel must be odd, got {k}")
            # stride-1 same-padded conv: geometry and dims unchanged
            out.append(LayerGeometry(conv_index, stride, offset, k, h, w))
            conv_index += 1
        elif kind == "pool":
            if len(entry) > 1 and int(entry[1]) != 2:
                raise ArchitectureError("only 2x2 stride-2 pooling is supported")
            if h % 2 or w % 2:
                raise ArchitectureError(f"pool on odd spatial dims {h}x{w}")
            offset = offset + stride / 2.0
            stride *= 2
            h //= 2
            w //= 2
        else:
            raise ArchitectureError(f"unsupported layer type {kind!r}")
    return out


@dataclass(frozen=True)
class GeoArchitecture:
    """Conv/pool pattern of the geodesic branch plus its placement mask."""

    layers: tuple
    geo_mask: tuple

    def __post_init__(self):
        convs = sum(1 for e in self.layers if e[0] == "conv")
        if len(self.geo_mask) != convs:
            raise ArchitectureError(
                f"mask length {len(self.geo_mask)} != conv count {convs}")
        if any(flag not in (0, 1) for flag in self.geo_mask):
            raise ArchitectureError("mask entries must be 0 or 1")

    @staticmethod
    def five_layer(kernel: int = 3, geo_mask=(1, 1, 1, 1, 1)) -> "GeoArchitecture":
        layers = tuple(x for _ in range(5) for x in (("conv", kernel), ("pool", 2)))
        return GeoArchitecture(layers=layers, geo_mask=tuple(geo_mask))


def pixel_scale(camera: Camera, corr: CorrespondenceMap) -> float:
    """Pixels per model unit for converting geodesic distances."""
    if camera.mode == ORTHOGRAPHIC:
        return camera.scale
    mask = corr.mask
    if not mask.any():
        return camera.scale
    return camera.scale / float(np.mean(corr.depth[mask].astype(np.float64)))


def _pixel_index(coords: np.ndarray, size: int) -> np.ndarray:
    """Nearest pixel index for continuous index-space coordinates, -1 outside."""
    p = np.floor(coords + 0.5).astype(np.int64)
    return np.where((p >= 0) & (p < size), p, -1)


def _vertex_grid(corr: CorrespondenceMap, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """(len(rows), len(cols)) nearest-vertex ids; -1 off-image or off-face."""
    safe_r = np.clip(rows, 0, corr.height - 1)
    safe_c = np.clip(cols, 0, corr.width - 1)
    vid = corr.nearest_vertex[np.ix_(safe_r, safe_c)].astype(np.int64)
    covered = corr.triangle_id[np.ix_(safe_r, safe_c)] >= 0
    ok = covered & (rows >= 0)[:, None] & (cols >= 0)[None, :]
    return np.where(ok, vid, -1)


def ratio_field(corr: CorrespondenceMap, fields: dict[int, GeodesicField],
                geom: LayerGeometry, scale: float,
                clamp_ratio: float = DEFAULT_CLAMP_RATIO,
                hierarchy_compensation: bool = True) -> np.ndarray:
    """Geodesic/Euclidean distance ratios, shape (H, W, K, K).

    The center slot is 0 (it carries no ratio). Fallbacks: taps whose
    center pixel is off-image (padding) or off-face get ratio 1; pairs in
    different surface components (infinite geodesic distance) get the
    clamp value; everything is clamped to [0, clamp_ratio]. With
    ``hierarchy_compensation`` off, the Euclidean divisor is forced to 1.
    """
    k = geom.kernel
    radius = k // 2
    rows_c = geom.offset + geom.stride * np.arange(geom.height)
    cols_c = geom.offset + geom.stride * np.arange(geom.width)
    v0 = _vertex_grid(corr, _pixel_index(rows_c, corr.height),
                      _pixel_index(cols_c, corr.width))

    needed = np.unique(v0[v0 >= 0])
    missing = [int(v) for v in needed if int(v) not in fields]
    if missing:
        raise PrecomputeError(f"missing geodesic fields for sources {missing[:8]}")

    n_vertices = len(next(iter(fields.values())).distances) if fields else 0
    field_row = np.full(n_vertices, -1, dtype=np.int64) if n_vertices else None
    if fields:
        matrix = np.empty((len(fields), n_vertices))
        for pos, (src, fld) in enumerate(sorted(fields.items())):
            matrix[pos] = fld.distances
            field_row[src] = pos

    ratios = np.ones((geom.height, geom.width, k, k))
    for dr in range(-radius, radius + 1):
        for dc in range(-radius, radius + 1):
            if dr == 0 and dc == 0:
                continue
            vi = _vertex_grid(corr,
                              _pixel_index(rows_c + geom.stride * dr, corr.height),
                              _pixel_index(cols_c + geom.stride * dc, corr.width))
            pair = (v0 >= 0) & (vi >= 0)
            slot = np.ones((geom.height, geom.width))
            if pair.any():
                src_rows = field_row[v0[pair]]
                d_geo = matrix[src_rows, vi[pair]] * scale
                d_eu = geom.stride * float(np.hypot(dr, dc)) if hierarchy_compensation else 1.0
                ratio = d_geo / d_eu
                ratio = np.where(np.isfinite(ratio), ratio, clamp_ratio)
                slot[pair] = np.clip(ratio, 0.0, clamp_ratio)
            ratios[:, :, dr + radius, dc + radius] = slot
    ratios[:, :, radius, radius] = 0.0
    return ratios


def geo_weights_from_ratios(ratios: np.ndarray) -> np.ndarray:
    """Softmax of negated neighbor ratios scaled by (K^2 - 1); center = 1.

    Accepts any leading shape ending in (K, K). Numerically stabilized by
    max subtraction, so equal ratios give exactly 1 everywhere.
    """
    r = np.asarray(ratios, dtype=np.float64)
    k = r.shape[-1]
    if r.shape[-2] != k or k % 2 != 1:
        raise ValueError(f"ratio slices must be odd square, got {r.shape[-2:]}")
    center = k // 2
    neighbor = np.ones((k, k), dtype=bool)
    neighbor[center, center] = False
    if not np.isfinite(r[..., neighbor]).all():
        raise ValueError("ratios must be finite (clamp before weighting)")
    z = np.where(neighbor, -r, -np.inf)
    z_max = z.max(axis=(-1, -2), keepdims=True)
    e = np.exp(z - z_max)
    e[..., center, center] = 0.0
    total = e.sum(axis=(-1, -2), keepdims=True)
    w = e * (k * k - 1) / total
    w[..., center, center] = 1.0
    return w


class GeoWeightStack:
    """Compiled per-layer weight tensors for one image.

    ``layers`` maps conv ordinal -> float32 (H, W, K, K) tensor; metadata
    records the image id, clamp ratio, compensation flag and the geometry
    chain that produced the tensors.
    """

    def __init__(self, layers: dict[int, np.ndarray], metadata: dict):
        self.layers = {}
        for idx in sorted(layers):
            arr = np.ascontiguousarray(layers[idx], dtype=np.float32)
            arr.setflags(write=False)
            self.layers[int(idx)] = arr
        self.metadata = dict(metadata)

    def __eq__(self, other):
        if not isinstance(other, GeoWeightStack):
            return NotImplemented
        return (self.metadata == other.metadata
                and list(self.layers) == list(other.layers)
                and all(np.array_equal(self.layers[i], other.layers[i])
                        for i in self.layers))


def compile_weights(corr: CorrespondenceMap, mesh: TriMesh, camera: Camera,
                    architecture: GeoArchitecture,
                    clamp_ratio: float = DEFAULT_CLAMP_RATIO,
                    t_scale: float = 1.0,
                    hierarchy_compensation: bool = True,
                    image_id: str = "") -> GeoWeightStack:
    """Compile weight tensors for every masked conv layer of one image.

    Enumerates the input-plane receptive-field centers of all geodesic
    layers, solves one geodesic field per unique covered nearest vertex
    (shared across layers), then assembles ratio fields and weights.
    Deterministic; raises instead of emitting a partial stack.
    """
    chain = layer_geometry_chain(architecture.layers, corr.height, corr.width)
    geo_layers = [g for g, flag in zip(chain, architecture.geo_mask) if flag]
    scale = pixel_scale(camera, corr)

    meta = {
        "imageId": image_id,
        "clampRatio": float(clamp_ratio),
        "tScale": float(t_scale),
        "hierarchyCompensation": bool(hierarchy_compensation),
        "convIndices": [g.index for g in geo_layers],
        "geometryChain": [
            {"index": g.index, "stride": g.stride, "offset": g.offset,
             "kernel": g.kernel, "height": g.height, "width": g.width}
            for g in geo_layers
        ],
    }
    if not geo_layers:
        return GeoWeightStack({}, meta)

    sources = []
    for geom in geo_layers:
        v0 = _vertex_grid(corr, _pixel_index(
            geom.offset + geom.stride * np.arange(geom.height), corr.height),
            _pixel_index(geom.offset + geom.stride * np.arange(geom.width), corr.width))
        sources.append(v0[v0 >= 0])
    unique_sources = np.unique(np.concatenate(sources)) if sources else np.array([], int)

    fields, errors = geodesic_batch(mesh, unique_sources, t_scale=t_scale)
    if errors:
        first = next(iter(errors.items()))
        raise PrecomputeError(
            f"geodesic solve failed for {len(errors)} sources "
            f"(first: vertex {first[0]}: {first[1]})")

    tensors = {}
    for geom in geo_layers:
        ratios = ratio_field(corr, fields, geom, scale, clamp_ratio,
                             hierarchy_compensation)
        tensors[geom.index] = geo_weights_from_ratios(ratios).astype(np.float32)
    return GeoWeightStack(tensors, meta)


STACK_MAGIC = b"GWS1"


def save_weight_stack(stack: GeoWeightStack, path) -> None:
    """GWS1 | u32 layerCount | per layer u32 H, W, K + f32 data | JSON metadata."""
    with open(path, "wb") as fh:
        fh.write(STACK_MAGIC)
        fh.write(struct.pack("<I", len(stack.layers)))
        for idx in stack.layers:
            arr = stack.layers[idx]
            h, w, k, _ = arr.shape
            fh.write(struct.pack("<III", h, w, k))
            fh.write(arr.astype("<f4").tobytes())
        meta = dict(stack.metadata)
        meta["convIndices"] = [int(i) for i in stack.layers]
        fh.write(json.dumps(meta, sort_keys=True).encode("utf-8"))


def load_weight_stack(path) -> GeoWeightStack:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != STACK_MAGIC:
            if magic[:3] == STACK_MAGIC[:3]:
                raise VersionError(f"{path}: unsupported weight-stack version {magic!r}")
            raise FormatError(f"{path}: bad magic {magic!r}")
        head = fh.read(4)
        if len(head) != 4:
            raise FormatError(f"{path}: truncated header")
        (count,) = struct.unpack("<I", head)
        arrays = []
        for n in range(count):
            dims = fh.read(12)
            if len(dims) != 12:
                raise FormatError(f"{path}: truncated layer {n} header")
            h, w, k = struct.unpack("<III", dims)
            nbytes = 4 * h * w * k * k
            payload = fh.read(nbytes)
            if len(payload) != nbytes:
                raise FormatError(f"{path}: truncated layer {n} payload")
            arrays.append(np.frombuffer(payload, dtype="<f4").reshape(h, w, k, k))
        tail = fh.read()
    if not tail:
        raise FormatError(f"{path}: missing metadata block")
    try:
        meta = json.loads(tail.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: bad metadata block: {exc}") from exc
    indices = meta.get("convIndices", list(range(count)))
    if len(indices) != count:
        raise FormatError(f"{path}: metadata lists {len(indices)} layers, file has {count}")
    return GeoWeightStack(dict(zip(indices, arrays)), meta)
