"""3D volume data model, RVOL file I/O, resampling and voxel-level operations.

Volumes are axis-aligned scalar grids with physical spacing and origin in mm.
Voxel data is held in a ``(W, H, D)`` array indexed ``data[i, j, k]`` where
``i`` runs along x. On disk the raw payload is x-fastest (y next, z slowest).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

__all__ = [
    "Volume3D",
    "SubvolumeSpec",
    "ForegroundStats",
    "EmptyCropError",
    "load_volume",
    "save_volume",
    "extract_subvolume",
    "resample_to_grid",
    "normalize_zscore",
    "normalize_ct_foreground",
    "compute_foreground_stats",
    "distance_transform",
    "largest_connected_component",
]

KINDS = ("intensity", "probability", "binary")


class EmptyCropError(ValueError):
    """Requested subvolume lies entirely outside the source volume."""


@dataclass(frozen=True)
class Volume3D:
    """Scalar grid with world-space placement.

    Attributes:
        data: float32 array of shape (W, H, D), x index first.
        spacing: (sx, sy, sz) mm per voxel, all > 0.
        origin: world position (mm) of the center of voxel (0, 0, 0).
        kind: "intensity", "probability" or "binary".
    """

    data: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    kind: str = "intensity"

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 3:
            raise ValueError("volume data must be 3-dimensional")
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        if any(s <= 0 for s in self.spacing):
            raise ValueError("spacing must be positive")
        if self.kind not in KINDS:
            raise ValueError(f"unknown volume kind {self.kind!r}")
        if self.kind == "probability":
            if arr.size and (arr.min() < -1e-6 or arr.max() > 1 + 1e-6):
                raise ValueError("probability volume has values outside [0, 1]")
        if self.kind == "binary":
            if not np.isin(arr, (0.0, 1.0)).all():
                raise ValueError("binary volume has values outside {0, 1}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def index_to_world(self, idx) -> np.ndarray:
        """World coordinates (mm) of voxel center(s) at (possibly fractional) index."""
        idx = np.asarray(idx, dtype=np.float64)
        return np.asarray(self.origin) + idx * np.asarray(self.spacing)

    def world_to_index(self, point) -> np.ndarray:
        """Continuous index coordinates of world point(s)."""
        point = np.asarray(point, dtype=np.float64)
        return (point - np.asarray(self.origin)) / np.asarray(self.spacing)

    def nearest_index(self, point) -> np.ndarray:
        return np.rint(self.world_to_index(point)).astype(np.int64)

    def contains_index(self, idx) -> bool:
        idx = np.asarray(idx)
        return bool(np.all(idx >= 0) and np.all(idx < np.asarray(self.dims)))

    def value_at_index(self, idx) -> float:
        i, j, k = (int(x) for x in idx)
        return float(self.data[i, j, k])

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """World-space extent of the voxel cells (outer faces, mm)."""
        o = np.asarray(self.origin)
        s = np.asarray(self.spacing)
        d = np.asarray(self.dims)
        return o - 0.5 * s, o + (d - 0.5) * s

    def with_data(self, data, kind=None) -> "Volume3D":
        return replace(self, data=data, kind=kind or self.kind)


@dataclass(frozen=True)
class SubvolumeSpec:
    """Axis-aligned world-space cube sampled on an n^3 grid.

    The cube is [center - side/2, center + side/2]^3; sample points are the
    centers of n^3 equal cells, so the output spacing is side / n.
    """

    center: tuple[float, float, float]
    side: float
    voxels_per_side: int = 64

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "side", float(self.side))
        if self.side <= 0:
            raise ValueError("side must be positive")
        if self.voxels_per_side < 8:
            raise ValueError("voxels_per_side must be >= 8")

    @property
    def spacing(self) -> float:
        return self.side / self.voxels_per_side

    @property
    def origin(self) -> np.ndarray:
        c = np.asarray(self.center)
        return c - 0.5 * self.side + 0.5 * self.spacing


@dataclass(frozen=True)
class ForegroundStats:
    """Clip percentiles and moments of foreground (vessel) intensities."""

    p0_5: float
    p99_5: float
    mu: float
    sigma: float


# ---------------------------------------------------------------------------
# RVOL file I/O

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


def _header_path(path: str) -> str:
    path = str(path)
    if not path.endswith(".rvol.json"):
        path = path + ".rvol.json"
    return path


def save_volume(v: Volume3D, path: str) -> None:
    """Write a volume as an RVOL header/payload pair.

    Binary volumes are stored as u8, everything else as little-endian f32.
    """
    header_path = _header_path(path)
    base = os.path.basename(header_path)[: -len(".rvol.json")]
    raw_name = base + ".raw"
    dtype_name = "u8" if v.kind == "binary" else "f32"
    raw = np.ascontiguousarray(v.data.transpose(2, 1, 0)).astype(_DTYPES[dtype_name])
    header = {
        "dims": list(v.dims),
        "spacing": list(v.spacing),
        "origin": list(v.origin),
        "dtype": dtype_name,
        "order": "x-fastest",
        "data": raw_name,
        "kind": v.kind,
    }
    out_dir = os.path.dirname(os.path.abspath(header_path))
    os.makedirs(out_dir, exist_ok=True)
    raw.tofile(os.path.join(out_dir, raw_name))
    with open(header_path, "w", encoding="utf-8") as fh:
        json.dump(header, fh, indent=1)


def load_volume(path: str) -> Volume3D:
    """Read an RVOL header/payload pair written by :func:`save_volume`."""
    header_path = _header_path(path)
    if not os.path.exists(header_path):
        raise FileNotFoundError(header_path)
    with open(header_path, "r", encoding="utf-8") as fh:
        header = json.load(fh)
    dims = tuple(int(d) for d in header["dims"])
    spacing = tuple(float(s) for s in header["spacing"])
    origin = tuple(float(o) for o in header.get("origin", (0.0, 0.0, 0.0)))
    if any(s <= 0 for s in spacing):
        raise ValueError("nonpositive spacing in header")
    if header.get("order", "x-fastest") != "x-fastest":
        raise ValueError(f"unsupported payload order {header.get('order')!r}")
    dtype = _DTYPES.get(header["dtype"])
    if dtype is None:
        raise ValueError(f"unsupported dtype {header['dtype']!r}")
    raw_path = os.path.join(os.path.dirname(os.path.abspath(header_path)), header["data"])
    if not os.path.exists(raw_path):
        raise FileNotFoundError(raw_path)
    expected = dims[0] * dims[1] * dims[2] * dtype.itemsize
    actual = os.path.getsize(raw_path)
    if actual != expected:
        raise ValueError(f"size mismatch: payload has {actual} bytes, expected {expected}")
    flat = np.fromfile(raw_path, dtype=dtype)
    data = flat.reshape(dims[2], dims[1], dims[0]).transpose(2, 1, 0)
    kind = header.get("kind")
    if kind is None:
        kind = "binary" if header["dtype"] == "u8" else "intensity"
    return Volume3D(data=data.astype(np.float32), spacing=spacing, origin=origin, kind=kind)


# ---------------------------------------------------------------------------
# Resampling

def _catmull_rom_weights(t: np.ndarray) -> list[np.ndarray]:
    t2 = t * t
    t3 = t2 * t
    return [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ]


def _resample_axis(arr, coords, axis, order, pad_value):
    """Resample one axis at fractional source-index positions ``coords``.

    Out-of-range positions read a constant pad value (local Catmull-Rom for
    order 3, linear for order 1; both interpolate exactly at grid nodes).
    """
    pad = 2 if order == 3 else 1
    n_src = arr.shape[axis]
    pad_width = [(0, 0)] * arr.ndim
    pad_width[axis] = (pad, pad)
    arrp = np.pad(arr, pad_width, mode="constant", constant_values=pad_value)
    base = np.floor(coords).astype(np.int64)
    t = coords - base
    if order == 3:
        weights = _catmull_rom_weights(t)
        offsets = (-1, 0, 1, 2)
    else:
        weights = [1.0 - t, t]
        offsets = (0, 1)
    shape = [1] * arr.ndim
    shape[axis] = len(coords)
    acc = 0.0
    for w, off in zip(weights, offsets):
        idx = np.clip(base + off + pad, 0, n_src + 2 * pad - 1)
        acc = acc + np.take(arrp, idx, axis=axis) * w.reshape(shape)
    return acc


def _sample_on_grid(v: Volume3D, out_dims, out_spacing, out_origin, mode: str) -> np.ndarray:
    order = 3 if mode == "tricubic" else 1
    pad_value = float(v.data.min()) if v.data.size else 0.0
    out = v.data.astype(np.float64)
    for axis in range(3):
        xs = out_origin[axis] + np.arange(out_dims[axis]) * out_spacing[axis]
        coords = (xs - v.origin[axis]) / v.spacing[axis]
        out = _resample_axis(out, coords, axis, order, pad_value)
    if mode == "labels":
        out = (out >= 0.5).astype(np.float64)
    return out


def _mode_for_kind(kind: str) -> str:
    return {"intensity": "tricubic", "probability": "trilinear", "binary": "labels"}[kind]


def extract_subvolume(v: Volume3D, spec: SubvolumeSpec, interpolation: str | None = None) -> Volume3D:
    """Crop and resample a world-space cube onto an n^3 grid.

    Interpolation defaults by kind: tricubic for intensity, trilinear for
    probability, label-preserving (trilinear + 0.5 threshold) for binary.
    Regions outside the source are padded with the source minimum value.
    """
    mode = interpolation or _mode_for_kind(v.kind)
    if mode not in ("tricubic", "trilinear", "labels"):
        raise ValueError(f"unknown interpolation {mode!r}")
    lo, hi = v.bounds()
    c = np.asarray(spec.center)
    if np.any(c + spec.side / 2 < lo) or np.any(c - spec.side / 2 > hi):
        raise EmptyCropError("empty crop")
    n = spec.voxels_per_side
    out_spacing = (spec.spacing,) * 3
    out_origin = spec.origin
    data = _sample_on_grid(v, (n, n, n), out_spacing, out_origin, mode)
    kind = "binary" if mode == "labels" else v.kind
    if kind == "probability":
        data = np.clip(data, 0.0, 1.0)
    return Volume3D(data=data, spacing=out_spacing, origin=tuple(out_origin), kind=kind)


def resample_to_grid(v: Volume3D, template: Volume3D, interpolation: str | None = None) -> Volume3D:
    """Resample a volume onto another volume's grid (dims/spacing/origin)."""
    mode = interpolation or _mode_for_kind(v.kind)
    data = _sample_on_grid(v, template.dims, template.spacing, template.origin, mode)
    kind = "binary" if mode == "labels" else v.kind
    if kind == "probability":
        data = np.clip(data, 0.0, 1.0)
    return Volume3D(data=data, spacing=template.spacing, origin=template.origin, kind=kind)


# ---------------------------------------------------------------------------
# Normalization

def normalize_zscore(v: Volume3D) -> tuple[Volume3D, tuple[float, float]]:
    """Whole-image z-scoring; returns the normalized volume and (mu, sigma)."""
    mu = float(v.data.mean())
    sigma = float(v.data.std())
    if sigma == 0:
        raise ValueError("constant image")
    out = (v.data.astype(np.float64) - mu) / sigma
    return v.with_data(out, kind="intensity"), (mu, sigma)


def normalize_ct_foreground(v: Volume3D, stats: ForegroundStats) -> Volume3D:
    """Clip to the foreground 0.5/99.5 percentiles, then z-score with fixed moments."""
    if stats.sigma <= 0:
        raise ValueError("nonpositive sigma in foreground stats")
    clipped = np.clip(v.data.astype(np.float64), stats.p0_5, stats.p99_5)
    return v.with_data((clipped - stats.mu) / stats.sigma, kind="intensity")


def compute_foreground_stats(images, masks) -> ForegroundStats:
    """Percentiles and moments over the union of mask-selected voxels."""
    if len(images) != len(masks):
        raise ValueError("images and masks must pair up")
    values = []
    for img, mask in zip(images, masks):
        if img.dims != mask.dims:
            raise ValueError("image/mask dims mismatch")
        values.append(img.data[mask.data > 0.5])
    values = np.concatenate(values) if values else np.empty(0)
    if values.size == 0:
        raise ValueError("empty foreground")
    p0_5, p99_5 = np.percentile(values, [0.5, 99.5])
    return ForegroundStats(
        p0_5=float(p0_5),
        p99_5=float(p99_5),
        mu=float(values.mean()),
        sigma=float(values.std()),
    )


# ---------------------------------------------------------------------------
# Voxel-level operations

def distance_transform(mask: Volume3D) -> Volume3D:
    """Exact Euclidean distance (mm) from inside voxel centers to the nearest
    background voxel center; zero outside. Everything beyond the grid counts
    as background.
    """
    inside = mask.data > 0.5
    padded = np.pad(inside, 1, mode="constant", constant_values=False)
    dist = ndimage.distance_transform_edt(padded, sampling=mask.spacing)
    return mask.with_data(dist[1:-1, 1:-1, 1:-1], kind="intensity")


_STRUCTURES = {
    6: ndimage.generate_binary_structure(3, 1),
    26: ndimage.generate_binary_structure(3, 3),
}


def largest_connected_component(mask: Volume3D, connectivity: int = 26) -> Volume3D:
    """Keep only the largest connected component of a binary mask.

    Size ties are broken by the component containing the smallest x-fastest
    linear voxel index.
    """
    if connectivity not in _STRUCTURES:
        raise ValueError("connectivity must be 6 or 26")
    labels, n = ndimage.label(mask.data > 0.5, structure=_STRUCTURES[connectivity])
    if n == 0:
        return mask.with_data(np.zeros(mask.dims), kind="binary")
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    best = sizes.max()
    candidates = np.flatnonzero(sizes == best)
    if len(candidates) == 1:
        keep = candidates[0]
    else:
        flat = labels.flatten(order="F")  # x-fastest linear order
        keep = min(candidates, key=lambda lab: int(np.argmax(flat == lab)))
    return mask.with_data((labels == keep).astype(np.float32), kind="binary")
