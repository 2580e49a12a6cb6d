"""Segmentation evaluation: Dice, Hausdorff distance, centerline overlap,
centerline-radius evaluation masking and the Wilcoxon signed-rank test.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from scipy.stats import rankdata

from .centerline import CenterlinePath
from .volume import Volume3D

__all__ = [
    "MetricsReport",
    "dice",
    "hausdorff",
    "centerline_overlap",
    "eval_mask",
    "wilcoxon_signed_rank",
    "write_reports_csv",
]


@dataclass
class MetricsReport:
    dice: float
    hausdorff_px: float
    centerline_overlap: float
    masked: bool
    case_id: str = ""


def _require_same_grid(x: Volume3D, y: Volume3D):
    if x.dims != y.dims or not np.allclose(x.spacing, y.spacing) \
            or not np.allclose(x.origin, y.origin):
        raise ValueError("volumes are on different grids")


def dice(x: Volume3D, y: Volume3D) -> float:
    """Voxel-count Dice overlap; 1 when both masks are empty."""
    _require_same_grid(x, y)
    a = x.data > 0.5
    b = y.data > 0.5
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def _boundary_points(mask: Volume3D) -> np.ndarray:
    """World coordinates (mm) of boundary voxel centers: inside voxels with a
    6-neighbor background voxel (volume edges count as background)."""
    inside = mask.data > 0.5
    eroded = ndimage.binary_erosion(inside, structure=ndimage.generate_binary_structure(3, 1),
                                    border_value=0)
    boundary = inside & ~eroded
    idx = np.argwhere(boundary)
    return mask.index_to_world(idx)


def hausdorff(x: Volume3D, y: Volume3D) -> float:
    """Symmetric Hausdorff distance between boundary voxel sets, in voxel
    units (mm distances divided by the smallest spacing)."""
    _require_same_grid(x, y)
    px = _boundary_points(x)
    py = _boundary_points(y)
    if len(px) == 0 or len(py) == 0:
        raise ValueError("hausdorff requires two nonempty masks")
    tx = cKDTree(px)
    ty = cKDTree(py)
    d_xy = ty.query(px)[0].max()
    d_yx = tx.query(py)[0].max()
    return float(max(d_xy, d_yx) / min(x.spacing))


def centerline_overlap(y: Volume3D, ct: list[CenterlinePath]) -> float:
    """Arclength fraction of the centerlines whose containing voxel in ``y``
    is foreground. Points outside the grid count as uncovered."""
    covered = 0.0
    total = 0.0
    dims = np.asarray(y.dims)
    for path in ct:
        pts = path.points
        if len(pts) < 2:
            continue
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        weights = np.zeros(len(pts))
        weights[:-1] += 0.5 * seg
        weights[1:] += 0.5 * seg
        idx = np.rint(y.world_to_index(pts)).astype(int)
        in_grid = np.all((idx >= 0) & (idx < dims), axis=1)
        values = np.zeros(len(pts))
        ig = np.nonzero(in_grid)[0]
        values[ig] = y.data[idx[ig, 0], idx[ig, 1], idx[ig, 2]] > 0.5
        covered += float((weights * values).sum())
        total += float(weights.sum())
    if total == 0:
        raise ValueError("zero-length centerline")
    return covered / total


def eval_mask(ct: list[CenterlinePath], grid: Volume3D) -> Volume3D:
    """Binary mask of voxels within six local radii of any centerline point;
    used to restrict predictions to the annotated neighborhood before
    computing metrics."""
    out = np.zeros(grid.dims, dtype=bool)
    spacing = np.asarray(grid.spacing)
    dims = np.asarray(grid.dims)
    for path in ct:
        for p, r in zip(path.points, path.radii):
            reach = 6.0 * float(r)
            lo = np.maximum(np.floor(grid.world_to_index(p - reach)).astype(int), 0)
            hi = np.minimum(np.ceil(grid.world_to_index(p + reach)).astype(int) + 1, dims)
            if np.any(lo >= hi):
                continue
            ii, jj, kk = np.meshgrid(*[np.arange(lo[a], hi[a]) for a in range(3)],
                                     indexing="ij")
            centers = np.stack([
                grid.origin[0] + ii * spacing[0],
                grid.origin[1] + jj * spacing[1],
                grid.origin[2] + kk * spacing[2],
            ], axis=-1)
            ball = np.linalg.norm(centers - np.asarray(p), axis=-1) <= reach
            out[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] |= ball
    return grid.with_data(out.astype(np.float32), kind="binary")


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank test

def _exact_sf_distribution(ranks: np.ndarray) -> np.ndarray:
    """Counts of each achievable doubled rank-sum W+ over all sign vectors.

    Ranks may be half-integral (midranks); doubling makes them integers so
    the null distribution is a polynomial convolution.
    """
    doubled = np.rint(2 * ranks).astype(int)
    dist = np.zeros(doubled.sum() + 1)
    dist[0] = 1.0
    for r in doubled:
        shifted = np.zeros_like(dist)
        shifted[r:] = dist[:len(dist) - r]
        dist = dist + shifted
    return dist


def wilcoxon_signed_rank(a, b, exact_max_n: int = 20) -> dict[str, float]:
    """Two-sided Wilcoxon signed-rank test on paired samples.

    Zero differences are dropped; |differences| are midranked. The statistic
    is W = min(W+, W-). The p-value is exact (full sign-assignment null
    distribution) for n <= ``exact_max_n``, otherwise a normal approximation
    with tie and continuity corrections.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("length mismatch")
    d = a - b
    d = d[d != 0]
    if len(d) == 0:
        raise ValueError("all differences zero")
    if len(d) < 5:
        raise ValueError("need at least 5 nonzero differences")
    n = len(d)
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    statistic = min(w_plus, w_minus)

    if n <= exact_max_n:
        dist = _exact_sf_distribution(ranks)
        total = dist.sum()
        cdf = np.cumsum(dist)
        w2 = int(round(2 * w_plus))
        p_le = cdf[w2] / total
        p_ge = (total - (cdf[w2 - 1] if w2 > 0 else 0.0)) / total
        p = min(2.0 * min(p_le, p_ge), 1.0)
    else:
        mu = n * (n + 1) / 4.0
        var = n * (n + 1) * (2 * n + 1) / 24.0
        _, counts = np.unique(ranks, return_counts=True)
        var -= (counts ** 3 - counts).sum() / 48.0
        sd = math.sqrt(var)
        z = (statistic - mu + 0.5) / sd  # continuity correction toward the mean
        p = min(2.0 * 0.5 * math.erfc(-z / math.sqrt(2)), 1.0)
    return {"statistic": statistic, "p_two_sided": p}


def write_reports_csv(reports: list[MetricsReport], path: str) -> None:
    """Aggregate per-case reports into one CSV table."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["case_id", "dice", "hausdorff_px", "centerline_overlap", "masked"]
        )
        writer.writeheader()
        for rep in reports:
            row = asdict(rep)
            writer.writerow({k: row[k] for k in writer.fieldnames})
