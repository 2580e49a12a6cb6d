"""Local centerline extraction from a binary segmentation subvolume.

Pipeline: detect caps (vessel cross-sections on the subvolume boundary),
pick the source cap nearest the previous stepping point, solve the eikonal
equation |grad T| * F = 1 inside the mask with a boundary-distance speed F by
fast marching, then gradient-descend T from each target cap back to the
source. Radii come from the distance transform sampled along the path.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy import ndimage

from .volume import Volume3D

__all__ = [
    "Cap",
    "CenterlinePath",
    "CenterlineExtractionFailure",
    "BacktraceFailure",
    "detect_caps",
    "select_source",
    "solve_eikonal",
    "backtrace_path",
    "extract_local_centerlines",
    "save_centerlines",
    "load_centerlines",
]

FACES = ("-x", "+x", "-y", "+y", "-z", "+z")


class CenterlineExtractionFailure(RuntimeError):
    """No usable caps or no successful backtrace in the local segmentation."""


class BacktraceFailure(RuntimeError):
    """Gradient descent on the arrival-time map failed to reach the source."""


@dataclass(frozen=True)
class Cap:
    """A vessel truncation boundary: mask cross-section on a subvolume face."""

    face: str
    center: tuple[float, float, float]
    mean_radius: float
    voxel_count: int


@dataclass
class CenterlinePath:
    """Ordered centerline points (source to target) with per-point radii (mm)."""

    points: np.ndarray
    radii: np.ndarray
    source_cap: Cap | None = None
    target_cap: Cap | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.radii = np.asarray(self.radii, dtype=np.float64).reshape(-1)
        if len(self.points) != len(self.radii):
            raise ValueError("points and radii length mismatch")

    def length(self) -> float:
        if len(self.points) < 2:
            return 0.0
        return float(np.linalg.norm(np.diff(self.points, axis=0), axis=1).sum())


# ---------------------------------------------------------------------------
# Caps

_FACE_SLICES = {
    "-x": (0, 0), "+x": (0, -1),
    "-y": (1, 0), "+y": (1, -1),
    "-z": (2, 0), "+z": (2, -1),
}

_STRUCT_2D = np.ones((3, 3), dtype=bool)


def detect_caps(mask: Volume3D) -> list[Cap]:
    """Connected mask regions (2D 8-connectivity) on each boundary face.

    The cap center is the centroid of face voxel centers; the radius is the
    radius of the disc with the same area as the cap cross-section.
    """
    caps = []
    inside = mask.data > 0.5
    spacing = np.asarray(mask.spacing)
    for face in FACES:
        axis, end = _FACE_SLICES[face]
        idx = [slice(None)] * 3
        idx[axis] = end
        plane = inside[tuple(idx)]
        labels, n = ndimage.label(plane, structure=_STRUCT_2D)
        if n == 0:
            continue
        other = [a for a in range(3) if a != axis]
        area = spacing[other[0]] * spacing[other[1]]
        fixed = 0 if end == 0 else mask.dims[axis] - 1
        for lab in range(1, n + 1):
            rows, cols = np.nonzero(labels == lab)
            count = len(rows)
            ijk = np.zeros((count, 3))
            ijk[:, axis] = fixed
            ijk[:, other[0]] = rows
            ijk[:, other[1]] = cols
            center = mask.index_to_world(ijk).mean(axis=0)
            caps.append(Cap(
                face=face,
                center=tuple(float(c) for c in center),
                mean_radius=float(math.sqrt(count * area / math.pi)),
                voxel_count=count,
            ))
    return caps


def select_source(caps: list[Cap], prev_point) -> tuple[Cap, list[Cap]]:
    """Source = cap closest to the previous stepping point; rest are targets.

    Distance ties break on face order then centroid, so the choice is
    reproducible across runs.
    """
    if not caps:
        raise CenterlineExtractionFailure("no caps")
    prev_point = np.asarray(prev_point, dtype=np.float64)

    def key(cap: Cap):
        d = float(np.linalg.norm(np.asarray(cap.center) - prev_point))
        return (d, FACES.index(cap.face), cap.center)

    ordered = sorted(caps, key=key)
    return ordered[0], ordered[1:]


# ---------------------------------------------------------------------------
# Fast marching

_FAR, _NARROW, _ACCEPTED = 0, 1, 2


@njit(cache=True)
def _fmm_kernel(speed, inside, spacing, src, T, accept_seq):
    W, H, D = speed.shape
    state = np.zeros(speed.shape, dtype=np.uint8)
    n_total = W * H * D
    # binary min-heap of (value, flat index); lazy deletion via stale values
    heap_val = np.empty(n_total * 4, dtype=np.float64)
    heap_idx = np.empty(n_total * 4, dtype=np.int64)
    heap_size = 0

    def flat(i, j, k):
        return (i * H + j) * D + k

    si, sj, sk = src
    T[si, sj, sk] = 0.0
    heap_val[0] = 0.0
    heap_idx[0] = flat(si, sj, sk)
    heap_size = 1
    state[si, sj, sk] = _NARROW

    n_accepted = 0
    vals = np.empty(3, dtype=np.float64)
    hs = np.empty(3, dtype=np.float64)

    while heap_size > 0:
        # pop min
        top_val = heap_val[0]
        top_idx = heap_idx[0]
        heap_size -= 1
        heap_val[0] = heap_val[heap_size]
        heap_idx[0] = heap_idx[heap_size]
        pos = 0
        while True:
            left = 2 * pos + 1
            right = left + 1
            smallest = pos
            if left < heap_size and heap_val[left] < heap_val[smallest]:
                smallest = left
            if right < heap_size and heap_val[right] < heap_val[smallest]:
                smallest = right
            if smallest == pos:
                break
            heap_val[pos], heap_val[smallest] = heap_val[smallest], heap_val[pos]
            heap_idx[pos], heap_idx[smallest] = heap_idx[smallest], heap_idx[pos]
            pos = smallest
        i = top_idx // (H * D)
        j = (top_idx // D) % H
        k = top_idx % D
        if state[i, j, k] == _ACCEPTED or top_val > T[i, j, k]:
            continue  # stale entry
        state[i, j, k] = _ACCEPTED
        accept_seq[n_accepted] = T[i, j, k]
        n_accepted += 1

        for axis in range(3):
            for direction in (-1, 1):
                ni, nj, nk = i, j, k
                if axis == 0:
                    ni += direction
                elif axis == 1:
                    nj += direction
                else:
                    nk += direction
                if ni < 0 or ni >= W or nj < 0 or nj >= H or nk < 0 or nk >= D:
                    continue
                if not inside[ni, nj, nk] or state[ni, nj, nk] == _ACCEPTED:
                    continue
                # upwind quadratic update from accepted neighbors
                m = 0
                for a2 in range(3):
                    best = np.inf
                    for d2 in (-1, 1):
                        qi, qj, qk = ni, nj, nk
                        if a2 == 0:
                            qi += d2
                        elif a2 == 1:
                            qj += d2
                        else:
                            qk += d2
                        if qi < 0 or qi >= W or qj < 0 or qj >= H or qk < 0 or qk >= D:
                            continue
                        if state[qi, qj, qk] == _ACCEPTED and T[qi, qj, qk] < best:
                            best = T[qi, qj, qk]
                    if best < np.inf:
                        vals[m] = best
                        hs[m] = spacing[a2]
                        m += 1
                if m == 0:
                    continue
                # sort the m (value, h) pairs by value (m <= 3)
                for p in range(1, m):
                    vv = vals[p]
                    hh = hs[p]
                    q = p - 1
                    while q >= 0 and vals[q] > vv:
                        vals[q + 1] = vals[q]
                        hs[q + 1] = hs[q]
                        q -= 1
                    vals[q + 1] = vv
                    hs[q + 1] = hh
                rhs = 1.0 / (speed[ni, nj, nk] * speed[ni, nj, nk])
                t_new = np.inf
                for use in range(m, 0, -1):
                    a = 0.0
                    b = 0.0
                    c = -rhs
                    for p in range(use):
                        w = 1.0 / (hs[p] * hs[p])
                        a += w
                        b -= 2.0 * vals[p] * w
                        c += vals[p] * vals[p] * w
                    disc = b * b - 4.0 * a * c
                    if disc >= 0.0:
                        cand = (-b + math.sqrt(disc)) / (2.0 * a)
                        if use == 1 or cand >= vals[use - 1]:
                            t_new = cand
                            break
                if t_new == np.inf:
                    t_new = vals[0] + hs[0] / speed[ni, nj, nk]
                if t_new < T[ni, nj, nk]:
                    T[ni, nj, nk] = t_new
                    state[ni, nj, nk] = _NARROW
                    # push
                    if heap_size >= heap_val.shape[0]:
                        continue  # heap full; stale entries will still resolve
                    pos = heap_size
                    heap_val[pos] = t_new
                    heap_idx[pos] = flat(ni, nj, nk)
                    heap_size += 1
                    while pos > 0:
                        parent = (pos - 1) // 2
                        if heap_val[parent] <= heap_val[pos]:
                            break
                        heap_val[pos], heap_val[parent] = heap_val[parent], heap_val[pos]
                        heap_idx[pos], heap_idx[parent] = heap_idx[parent], heap_idx[pos]
                        pos = parent
    return n_accepted


def _interior_distance(mask: Volume3D) -> Volume3D:
    """Distance (mm) to the nearest background voxel center, ignoring the
    subvolume faces: a vessel cut by the crop boundary keeps its full radius
    there instead of decaying toward the artificial cut plane."""
    dist = ndimage.distance_transform_edt(mask.data > 0.5, sampling=mask.spacing)
    return mask.with_data(dist.astype(np.float32), kind="intensity")


def _snap_to_inside(mask: Volume3D, dt: Volume3D, point) -> tuple[int, int, int] | None:
    """Nearest inside voxel to a world point, preferring the largest
    boundary-distance value within the surrounding 3^3 neighborhood."""
    idx = np.clip(mask.nearest_index(point), 0, np.asarray(mask.dims) - 1)
    best = None
    best_val = -1.0
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            for dk in (-1, 0, 1):
                c = idx + np.array([di, dj, dk])
                if not mask.contains_index(c):
                    continue
                i, j, k = (int(x) for x in c)
                if mask.data[i, j, k] > 0.5 and dt.data[i, j, k] > best_val:
                    best_val = float(dt.data[i, j, k])
                    best = (i, j, k)
    return best


def solve_eikonal(mask: Volume3D, source, speed: np.ndarray | None = None,
                  return_accept_sequence: bool = False):
    """First-order upwind fast-marching arrival times restricted to the mask.

    The default speed is the boundary-distance transform clamped below at
    half the smallest voxel spacing and scaled to a maximum of 1 (arrival
    times are only used for backtracing, which is scale-invariant).
    ``speed`` overrides the default; pass an all-ones array for unit speed.
    """
    inside = mask.data > 0.5
    dt = _interior_distance(mask)
    src_idx = mask.nearest_index(source)
    if not mask.contains_index(src_idx) or not inside[tuple(src_idx)]:
        raise ValueError("source outside segmentation")
    if speed is None:
        eps = 0.5 * min(mask.spacing)
        f = np.maximum(dt.data.astype(np.float64), eps)
        f = f / f.max()
    else:
        f = np.asarray(speed, dtype=np.float64)
        if f.shape != mask.dims:
            raise ValueError("speed shape mismatch")
    T = np.full(mask.dims, np.inf)
    T[~inside] = np.inf
    accept_seq = np.empty(int(inside.sum()) + 1)
    n_acc = _fmm_kernel(f, inside, np.asarray(mask.spacing), tuple(int(x) for x in src_idx),
                        T, accept_seq)
    T_vol = mask.with_data(np.where(inside, T, np.inf).astype(np.float32), kind="intensity")
    if return_accept_sequence:
        return T_vol, accept_seq[:n_acc]
    return T_vol


def backtrace_path(T: Volume3D, target, source, h: float | None = None,
                   max_steps: int = 10_000) -> np.ndarray:
    """Trace from target to source by normalized gradient descent on T.

    Returns the points visited (target first, source appended last), spaced
    at most ``h`` apart (default half the smallest voxel spacing).
    """
    target = np.asarray(target, dtype=np.float64)
    source = np.asarray(source, dtype=np.float64)
    if h is None:
        h = 0.5 * min(T.spacing)
    tol = 1.5 * min(T.spacing)
    tgt_idx = T.nearest_index(target)
    if not T.contains_index(tgt_idx) or not np.isfinite(T.value_at_index(np.clip(tgt_idx, 0, np.asarray(T.dims) - 1))):
        raise BacktraceFailure("arrival time not finite at target")

    finite = np.isfinite(T.data)
    t_max = float(T.data[finite].max()) if finite.any() else 0.0
    filled = np.where(finite, T.data.astype(np.float64), t_max * 1.1 + 1.0)
    grads = np.gradient(filled, *T.spacing)

    points = [target.copy()]
    x = target.copy()
    for _ in range(max_steps):
        if np.linalg.norm(x - source) <= tol:
            points.append(source.copy())
            return np.asarray(points)
        coords = T.world_to_index(x).reshape(3, 1)
        g = np.array([
            float(ndimage.map_coordinates(gc, coords, order=1, mode="nearest")[0])
            for gc in grads
        ])
        norm = np.linalg.norm(g)
        if norm < 1e-12:
            raise BacktraceFailure("vanishing gradient")
        x = x - h * g / norm
        points.append(x.copy())
    raise BacktraceFailure("did not reach source")


def extract_local_centerlines(mask: Volume3D, prev_point) -> list[CenterlinePath]:
    """Caps -> source selection -> fast marching -> backtrace per target.

    Returns one source-to-target path per target cap whose backtrace
    succeeded; an empty list if the sole cap is the source. Raises
    CenterlineExtractionFailure when no caps exist or every backtrace fails.
    """
    caps = detect_caps(mask)
    if not caps:
        raise CenterlineExtractionFailure("no caps on subvolume boundary")
    source_cap, target_caps = select_source(caps, prev_point)
    dt = _interior_distance(mask)
    src_idx = _snap_to_inside(mask, dt, source_cap.center)
    if src_idx is None:
        raise CenterlineExtractionFailure("source cap has no inside voxel")
    src_point = mask.index_to_world(np.asarray(src_idx))
    T = solve_eikonal(mask, src_point)

    paths = []
    for cap in target_caps:
        tgt_idx = _snap_to_inside(mask, dt, cap.center)
        if tgt_idx is None:
            continue
        tgt_point = mask.index_to_world(np.asarray(tgt_idx))
        try:
            pts = backtrace_path(T, tgt_point, src_point)
        except BacktraceFailure:
            continue
        pts = pts[::-1]  # run source -> target
        radii = _sample_radii(dt, pts)
        paths.append(CenterlinePath(points=pts, radii=radii,
                                    source_cap=source_cap, target_cap=cap))
    if target_caps and not paths:
        raise CenterlineExtractionFailure("all backtraces failed")
    return _dedupe_paths(paths)


def _dedupe_paths(paths: list[CenterlinePath]) -> list[CenterlinePath]:
    """Drop paths whose tail runs inside another path's tube.

    A vessel clipped across a subvolume edge or grazing a face yields more
    than one cap, and every such cap backtraces along the same tube, so the
    extra paths would be stepped or queued twice. Distinct vessels share at
    most the stretch between the source and their junction, so only the tail
    (the last quarter of each path) is compared. The larger cap wins.
    """
    if len(paths) < 2:
        return paths
    kept: list[CenterlinePath] = []
    for path in sorted(paths, key=lambda p: -p.target_cap.mean_radius):
        if any(_tail_inside_tube(path, other) for other in kept):
            continue
        kept.append(path)
    order = {id(p): i for i, p in enumerate(paths)}
    kept.sort(key=lambda p: order[id(p)])
    return kept


def _tail_inside_tube(path: CenterlinePath, other: CenterlinePath,
                      tail_fraction: float = 0.25) -> bool:
    """Whether most of the last ``tail_fraction`` of ``path`` lies within the
    local radius of ``other``'s centerline."""
    n = len(path.points)
    tail = path.points[max(n - max(int(round(n * tail_fraction)), 1), 0):]
    d2 = ((tail[:, None, :] - other.points[None, :, :]) ** 2).sum(axis=2)
    j = d2.argmin(axis=1)
    dist = np.sqrt(d2[np.arange(len(tail)), j])
    return float((dist < other.radii[j]).mean()) >= 0.5


def _sample_radii(dt: Volume3D, points: np.ndarray) -> np.ndarray:
    coords = dt.world_to_index(points).T
    radii = ndimage.map_coordinates(dt.data.astype(np.float64), coords, order=1, mode="nearest")
    return np.maximum(radii, 0.25 * min(dt.spacing))


# ---------------------------------------------------------------------------
# Centerline JSON

def save_centerlines(paths: list[CenterlinePath], path: str,
                     parents: list | None = None) -> None:
    """Write paths as centerline JSON. ``parents`` optionally attaches a
    parent link (or None) per path."""
    records = []
    for i, p in enumerate(paths):
        rec = {
            "points": np.asarray(p.points).tolist(),
            "radii": np.asarray(p.radii).tolist(),
            "source_face": p.source_cap.face if p.source_cap else None,
            "target_face": p.target_cap.face if p.target_cap else None,
        }
        if parents is not None:
            rec["parent"] = parents[i]
        records.append(rec)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"paths": records}, fh)


def load_centerlines(path: str) -> list[CenterlinePath]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    paths = []
    for rec in doc["paths"]:
        src = Cap(rec["source_face"], (0, 0, 0), 0.0, 1) if rec.get("source_face") else None
        tgt = Cap(rec["target_face"], (0, 0, 0), 0.0, 1) if rec.get("target_face") else None
        paths.append(CenterlinePath(points=np.asarray(rec["points"]),
                                    radii=np.asarray(rec["radii"]),
                                    source_cap=src, target_cap=tgt))
    return paths
