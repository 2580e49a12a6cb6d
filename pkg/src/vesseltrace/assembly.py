"""Fusion of overlapping local probability maps into one global segmentation.

Each local prediction is splatted onto a fixed target grid with a Gaussian
weight favoring the subvolume center; the global map is the weighted mean.
Finalization thresholds the mean, keeps the largest connected component and
extracts a smoothed surface mesh.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .surface import TriMesh, marching_cubes, smooth_windowed_sinc
from .volume import (
    SubvolumeSpec,
    Volume3D,
    largest_connected_component,
    resample_to_grid,
)

__all__ = [
    "GlobalAccumulator",
    "gaussian_weight_map",
    "accumulate",
    "finalize",
]

_OVERFLOW_BIT = np.uint64(1) << np.uint64(63)


def gaussian_weight_map(spec: SubvolumeSpec, exponent: str = "squared") -> Volume3D:
    """Per-voxel fusion weights for a subvolume: exp(-|p - c|^2 / (2 sigma^2))
    with sigma = L/4. ``exponent="linear"`` uses the unsquared distance
    instead (kept for comparison; dimensionally odd but sometimes printed).
    """
    n = spec.voxels_per_side
    sigma = spec.side / 4.0
    axes = [spec.origin[a] + np.arange(n) * spec.spacing - spec.center[a] for a in range(3)]
    d2 = (axes[0][:, None, None] ** 2 + axes[1][None, :, None] ** 2
          + axes[2][None, None, :] ** 2)
    if exponent == "squared":
        w = np.exp(-d2 / (2.0 * sigma ** 2))
    elif exponent == "linear":
        w = np.exp(-np.sqrt(d2) / (2.0 * sigma ** 2))
    else:
        raise ValueError("exponent must be 'squared' or 'linear'")
    return Volume3D(data=w, spacing=(spec.spacing,) * 3, origin=tuple(spec.origin),
                    kind="intensity")


@dataclass
class GlobalAccumulator:
    """Weighted-sum / weight-sum pair on an isotropic target grid, plus a
    per-voxel bitmask of contributing branch ids (63 distinct ids; higher
    ids share an overflow bit that always counts as another branch).
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]
    weight_exponent: str = "squared"
    weighted_sum: np.ndarray = field(init=False)
    weight_sum: np.ndarray = field(init=False)
    branch_touch: np.ndarray = field(init=False)
    n_contributions: int = field(init=False, default=0)

    def __post_init__(self):
        self.weighted_sum = np.zeros(self.dims, dtype=np.float64)
        self.weight_sum = np.zeros(self.dims, dtype=np.float64)
        self.branch_touch = np.zeros(self.dims, dtype=np.uint64)

    @classmethod
    def for_image(cls, image: Volume3D, weight_exponent: str = "squared") -> "GlobalAccumulator":
        """Target grid covering the image's voxel centers at isotropic
        min-spacing resolution."""
        st = float(min(image.spacing))
        dims = tuple(
            int(round((image.dims[a] - 1) * image.spacing[a] / st)) + 1 for a in range(3)
        )
        return cls(dims=dims, spacing=(st, st, st), origin=image.origin,
                   weight_exponent=weight_exponent)

    def grid_template(self) -> Volume3D:
        return Volume3D(data=np.zeros(self.dims, dtype=np.float32),
                        spacing=self.spacing, origin=self.origin, kind="intensity")

    def mean_map(self) -> Volume3D:
        mean = np.divide(self.weighted_sum, self.weight_sum,
                         out=np.zeros(self.dims), where=self.weight_sum > 0)
        return Volume3D(data=np.clip(mean, 0.0, 1.0), spacing=self.spacing,
                        origin=self.origin, kind="probability")

    # -- retrace support -------------------------------------------------
    def _voxel_index(self, point) -> tuple[int, int, int] | None:
        idx = np.rint((np.asarray(point, dtype=np.float64) - np.asarray(self.origin))
                      / np.asarray(self.spacing)).astype(int)
        if np.any(idx < 0) or np.any(idx >= np.asarray(self.dims)):
            return None
        return tuple(int(i) for i in idx)

    def mean_probability_at(self, point) -> float:
        idx = self._voxel_index(point)
        if idx is None or self.weight_sum[idx] == 0:
            return 0.0
        return float(self.weighted_sum[idx] / self.weight_sum[idx])

    def touched_by_other_branch(self, point, branch_id: int) -> bool:
        idx = self._voxel_index(point)
        if idx is None:
            return False
        own = _branch_bit(branch_id) if branch_id < 63 else np.uint64(0)
        return bool(self.branch_touch[idx] & ~own)


def _branch_bit(branch_id: int) -> np.uint64:
    if branch_id < 63:
        return np.uint64(1) << np.uint64(branch_id)
    return _OVERFLOW_BIT


def accumulate(acc: GlobalAccumulator, prob: Volume3D, spec: SubvolumeSpec,
               branch_id: int) -> None:
    """Splat one local probability map into the accumulator.

    Each subvolume sample distributes weight * probability (and weight) to
    the 8 target voxels enclosing it (trilinear splat).
    """
    n = spec.voxels_per_side
    if prob.dims != (n, n, n) or not np.allclose(prob.spacing, (spec.spacing,) * 3) \
            or not np.allclose(prob.origin, spec.origin):
        raise ValueError("probability map grid does not match the subvolume spec")
    w = gaussian_weight_map(spec, acc.weight_exponent).data

    # continuous target-index coordinates per sample, axis-separable
    coords = [
        (spec.origin[a] + np.arange(n) * spec.spacing - acc.origin[a]) / acc.spacing[a]
        for a in range(3)
    ]
    base = [np.floor(c).astype(np.int64) for c in coords]
    frac = [c - b for c, b in zip(coords, base)]

    W, H, D = acc.dims
    pw = (w * prob.data.astype(np.float64)).ravel()
    wf = w.ravel()
    size = W * H * D
    touched_parts = []
    for oi in (0, 1):
        fi = (1.0 - frac[0]) if oi == 0 else frac[0]
        ii = base[0] + oi
        for oj in (0, 1):
            fj = (1.0 - frac[1]) if oj == 0 else frac[1]
            jj = base[1] + oj
            for ok in (0, 1):
                fk = (1.0 - frac[2]) if ok == 0 else frac[2]
                kk = base[2] + ok
                corner_w = (fi[:, None, None] * fj[None, :, None] * fk[None, None, :]).ravel()
                valid = ((ii >= 0) & (ii < W))[:, None, None] \
                    & ((jj >= 0) & (jj < H))[None, :, None] \
                    & ((kk >= 0) & (kk < D))[None, None, :]
                valid = valid.ravel()
                flat = ((np.clip(ii, 0, W - 1)[:, None, None] * H
                         + np.clip(jj, 0, H - 1)[None, :, None]) * D
                        + np.clip(kk, 0, D - 1)[None, None, :]).ravel()
                contrib = corner_w * valid
                acc.weighted_sum.ravel()[:] += np.bincount(flat, weights=pw * contrib,
                                                           minlength=size)
                acc.weight_sum.ravel()[:] += np.bincount(flat, weights=wf * contrib,
                                                         minlength=size)
                touched_parts.append(flat[contrib > 0])
    bit = _branch_bit(branch_id)
    flat_touch = acc.branch_touch.ravel()
    flat_touch[np.unique(np.concatenate(touched_parts))] |= bit
    acc.n_contributions += 1


def finalize(acc: GlobalAccumulator, original_grid: Volume3D, threshold: float = 0.5,
             smooth_iterations: int = 10, smooth_passband: float = 0.01
             ) -> tuple[Volume3D, TriMesh]:
    """Weighted mean -> resample to the original grid -> threshold -> largest
    connected component -> marching cubes -> windowed-sinc smoothing."""
    if acc.n_contributions == 0:
        raise ValueError("empty accumulator")
    mean = acc.mean_map()
    on_grid = resample_to_grid(mean, original_grid, interpolation="trilinear")
    binary = on_grid.with_data((on_grid.data >= threshold).astype(np.float32), kind="binary")
    binary = largest_connected_component(binary, connectivity=26)
    mesh = marching_cubes(binary, iso=0.5)
    mesh = smooth_windowed_sinc(mesh, iterations=smooth_iterations, passband=smooth_passband)
    return binary, mesh
