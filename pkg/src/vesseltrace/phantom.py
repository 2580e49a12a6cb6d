"""Synthetic branched-vessel phantoms: tree generation, rasterization to
image/mask volumes, and ground-truth centerline export.

Phantoms stand in for clinical data: the geometry is analytic, so masks and
centerlines are known exactly and tracing logic can be verified against them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .centerline import CenterlinePath
from .volume import Volume3D

__all__ = [
    "Branch",
    "PhantomTree",
    "PhantomConfig",
    "generate_tree",
    "rasterize_phantom",
    "phantom_ground_truth",
    "densify_polyline",
    "load_phantom_config",
]


@dataclass
class Branch:
    points: np.ndarray  # (N, 3) mm
    radii: np.ndarray  # (N,) mm
    parent: tuple[int, int] | None = None  # (branch index, point index)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.radii = np.asarray(self.radii, dtype=np.float64).reshape(-1)
        if np.any(self.radii <= 0):
            raise ValueError("branch radii must be positive")


@dataclass
class PhantomTree:
    branches: list[Branch] = field(default_factory=list)


@dataclass
class PhantomConfig:
    depth: int = 2
    root_radius: float = 4.0
    radius_decay: float = 0.7
    branch_angle_deg: tuple[float, float] = (25.0, 40.0)
    tortuosity_amp: float = 1.0
    tortuosity_period: float = 30.0
    vessel_intensity: float = 300.0
    background_intensity: float = 0.0
    noise_sd: float = 10.0
    rng_seed: int = 0
    length_factor: float = 12.0  # branch length = length_factor * radius

    def __post_init__(self):
        if self.vessel_intensity <= self.background_intensity + 3 * self.noise_sd:
            raise ValueError(
                "vessel intensity must exceed background by more than 3 noise SDs"
            )
        if not 0 < self.radius_decay < 1:
            raise ValueError("radius_decay must be in (0, 1)")


def load_phantom_config(path: str) -> PhantomConfig:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    known = set(PhantomConfig.__dataclass_fields__)
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown phantom config keys: {sorted(unknown)}")
    if "branch_angle_deg" in doc:
        doc["branch_angle_deg"] = tuple(doc["branch_angle_deg"])
    return PhantomConfig(**doc)


def _perpendicular(direction: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random unit vector perpendicular to ``direction``."""
    while True:
        v = rng.normal(size=3)
        v -= v.dot(direction) * direction
        n = np.linalg.norm(v)
        if n > 1e-6:
            return v / n


def generate_tree(cfg: PhantomConfig, bounds) -> PhantomTree:
    """Deterministic binary tree of tortuous tubes inside a world-space box.

    ``bounds`` is (lo, hi) in mm. The root starts near the low-x face and
    grows along +x; each branch carries a sinusoidal lateral perturbation and
    spawns two children (radius scaled by ``radius_decay``) until ``depth``
    levels have been added. Points leaving the box are truncated.
    """
    lo = np.asarray(bounds[0], dtype=np.float64)
    hi = np.asarray(bounds[1], dtype=np.float64)
    extent = hi - lo
    if np.any(extent < 6 * cfg.root_radius):
        raise ValueError("bounds too small for root radius")
    rng = np.random.default_rng(cfg.rng_seed)
    tree = PhantomTree()

    start = np.array([lo[0] + 1.5 * cfg.root_radius,
                      lo[1] + 0.5 * extent[1],
                      lo[2] + 0.5 * extent[2]])
    root_dir = np.array([1.0, 0.0, 0.0])

    def grow(p0, direction, radius, depth_left, parent):
        length = cfg.length_factor * radius
        n_pts = max(int(np.ceil(length / (0.25 * radius))), 8)
        s = np.linspace(0.0, length, n_pts)
        lateral = _perpendicular(direction, rng)
        phase = rng.uniform(0.0, 2 * np.pi)
        wave = cfg.tortuosity_amp * (
            np.sin(2 * np.pi * s / cfg.tortuosity_period + phase) - np.sin(phase)
        )
        pts = p0[None, :] + s[:, None] * direction[None, :] + wave[:, None] * lateral[None, :]
        keep = np.all((pts >= lo) & (pts <= hi), axis=1)
        if not keep[0]:
            return None
        cut = int(np.argmin(keep)) if not keep.all() else len(pts)
        if cut < 2:
            return None
        pts = pts[:cut]
        branch = Branch(points=pts, radii=np.full(len(pts), radius), parent=parent)
        tree.branches.append(branch)
        idx = len(tree.branches) - 1
        truncated = cut < n_pts

        if depth_left > 0 and not truncated:
            end = pts[-1]
            end_dir = pts[-1] - pts[-2]
            end_dir /= np.linalg.norm(end_dir)
            split_axis = _perpendicular(end_dir, rng)
            for sign in (1.0, -1.0):
                angle = np.deg2rad(rng.uniform(*cfg.branch_angle_deg))
                child_dir = np.cos(angle) * end_dir + sign * np.sin(angle) * split_axis
                child_dir /= np.linalg.norm(child_dir)
                grow(end, child_dir, radius * cfg.radius_decay, depth_left - 1,
                     (idx, len(pts) - 1))
        return idx

    grow(start, root_dir, cfg.root_radius, cfg.depth, None)
    return tree


def densify_polyline(points: np.ndarray, radii: np.ndarray, step: float):
    """Resample a polyline by arclength at spacing <= step (endpoints kept)."""
    points = np.asarray(points, dtype=np.float64)
    radii = np.asarray(radii, dtype=np.float64)
    if len(points) < 2:
        return points.copy(), radii.copy()
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    total = arc[-1]
    n = max(int(np.ceil(total / step)) + 1, 2)
    samples = np.linspace(0.0, total, n)
    out_pts = np.column_stack([np.interp(samples, arc, points[:, a]) for a in range(3)])
    out_radii = np.interp(samples, arc, radii)
    return out_pts, out_radii


def rasterize_phantom(tree: PhantomTree, grid: Volume3D, cfg: PhantomConfig):
    """Render a tree into (image, mask) volumes on the template grid.

    A voxel is inside the mask iff its center is within the local radius of
    the densified centerline. The image ramps from background to vessel
    intensity over a one-voxel band at the surface (smoothstep) plus seeded
    Gaussian noise.
    """
    spacing = np.asarray(grid.spacing)
    h = float(spacing.min())
    field_arr = np.full(grid.dims, np.inf)
    margin = 1.5 * h

    for branch in tree.branches:
        pts, radii = densify_polyline(branch.points, branch.radii, 0.5 * h)
        for p, r in zip(pts, radii):
            reach = r + margin
            lo_idx = np.maximum(np.floor(grid.world_to_index(p - reach)).astype(int), 0)
            hi_idx = np.minimum(np.ceil(grid.world_to_index(p + reach)).astype(int) + 1,
                                np.asarray(grid.dims))
            if np.any(lo_idx >= hi_idx):
                continue
            ii, jj, kk = np.meshgrid(*[np.arange(lo_idx[a], hi_idx[a]) for a in range(3)],
                                     indexing="ij")
            centers = np.stack([
                grid.origin[0] + ii * spacing[0],
                grid.origin[1] + jj * spacing[1],
                grid.origin[2] + kk * spacing[2],
            ], axis=-1)
            d = np.linalg.norm(centers - p, axis=-1) - r
            region = field_arr[lo_idx[0]:hi_idx[0], lo_idx[1]:hi_idx[1], lo_idx[2]:hi_idx[2]]
            np.minimum(region, d, out=region)

    mask = (field_arr <= 0.0).astype(np.float32)
    t = np.clip(0.5 - field_arr / h, 0.0, 1.0)
    smooth = t * t * (3.0 - 2.0 * t)
    image = cfg.background_intensity + (cfg.vessel_intensity - cfg.background_intensity) * smooth
    if cfg.noise_sd > 0:
        rng = np.random.default_rng(cfg.rng_seed + 0x5EED)
        image = image + rng.normal(0.0, cfg.noise_sd, size=grid.dims)
    image_vol = Volume3D(data=image, spacing=grid.spacing, origin=grid.origin, kind="intensity")
    mask_vol = Volume3D(data=mask, spacing=grid.spacing, origin=grid.origin, kind="binary")
    return image_vol, mask_vol


def phantom_ground_truth(tree: PhantomTree, step: float = 0.5) -> list[CenterlinePath]:
    """Densified per-branch centerlines with radii, one path per branch."""
    paths = []
    for branch in tree.branches:
        pts, radii = densify_polyline(branch.points, branch.radii, step)
        paths.append(CenterlinePath(points=pts, radii=radii))
    return paths
