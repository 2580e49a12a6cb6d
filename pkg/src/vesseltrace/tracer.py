"""Sequential vessel tracing: stepping, subvolume sizing and enlargement,
retry chances, bifurcation queue and stop criteria.

From a single seed (point, direction, radius) the tracer repeatedly extracts
a radius-scaled subvolume, segments it, extracts local centerlines, steps to
80% along the largest branch and queues the others as bifurcations. Local
predictions are fused into a global accumulator as it goes.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .assembly import GlobalAccumulator, accumulate
from .centerline import (
    CenterlineExtractionFailure,
    CenterlinePath,
    detect_caps,
    extract_local_centerlines,
)
from .segmenter import SegmentationFailure, SegmenterBackend, segment
from .volume import (
    EmptyCropError,
    SubvolumeSpec,
    Volume3D,
    extract_subvolume,
    largest_connected_component,
    normalize_zscore,
)

__all__ = [
    "StepPoint",
    "TraceConfig",
    "TraceResult",
    "TracedBranch",
    "ChancesExhausted",
    "subvolume_size",
    "segment_with_enlargement",
    "choose_step_points",
    "chance_advance",
    "check_retrace",
    "trace",
]

STOP_REASONS = (
    "boundary", "centerline_failure", "chances_exhausted",
    "R_min", "N_max", "NB_max", "retrace",
)


class ChancesExhausted(RuntimeError):
    """The retry counter for the current obstacle ran out."""


@dataclass(frozen=True)
class StepPoint:
    """Current tracing location with direction and radius estimates."""

    point: tuple[float, float, float]
    tangent: tuple[float, float, float]
    radius: float
    prev_radius: float | None = None
    branch_id: int = 0
    chances: int = 0
    parent_branch: int | None = None
    junction: tuple[float, float, float] | None = None  # fork point, bifurcations only

    def __post_init__(self):
        t = np.asarray(self.tangent, dtype=np.float64)
        norm = np.linalg.norm(t)
        if norm < 1e-12:
            raise ValueError("zero tangent")
        object.__setattr__(self, "tangent", tuple(t / norm))
        object.__setattr__(self, "point", tuple(float(x) for x in self.point))
        if self.radius <= 0:
            raise ValueError("radius must be positive")


@dataclass(frozen=True)
class TraceConfig:
    gamma_star: float = 0.30
    max_chances: int = 3
    N_max: int = 500
    R_min: float = 0.5
    NB_max: int | None = None  # off by default
    step_fraction: float = 0.8
    retrace_check_period: int = 5
    queue_sort_period: int = 10
    voxels_per_side: int = 64
    normalization: str = "zscore"  # zscore | none
    weight_exponent: str = "squared"

    def __post_init__(self):
        if not 0 < self.gamma_star < 1:
            raise ValueError("gamma_star must be in (0, 1)")
        if not 0 < self.step_fraction < 1:
            raise ValueError("step_fraction must be in (0, 1)")


@dataclass
class TracedBranch:
    branch_id: int
    parent_branch: int | None
    origin: tuple | None = None  # queued stepping point that started the branch
    points: list = field(default_factory=list)
    radii: list = field(default_factory=list)
    stop_reason: str = ""


@dataclass
class TraceResult:
    accumulator: GlobalAccumulator
    branches: list[TracedBranch]
    step_log: list[dict]

    def bifurcation_events(self) -> int:
        return sum(rec.get("bifurcations_queued", 0) for rec in self.step_log)

    def branch_tree_paths(self) -> tuple[list[CenterlinePath], list]:
        """Centerline tree as anatomical branches plus parent path indices.

        The tracer continues through junctions along the largest outlet, so a
        single traced branch can span several anatomical vessel segments. For
        export, each traced polyline is split where a queued bifurcation
        attaches, giving one path per vessel segment between junctions.
        """
        traced = [br for br in self.branches if br.points]
        by_id = {br.branch_id: br for br in traced}
        # attachment of each child on its parent polyline (nearest point)
        cuts: dict[int, dict[int, int]] = {br.branch_id: {} for br in traced}
        for br in traced:
            pid = br.parent_branch
            if pid is None or pid not in by_id:
                continue
            parent_pts = np.asarray(by_id[pid].points)
            origin = np.asarray(br.origin if br.origin is not None else br.points[0])
            j = int(np.argmin(np.linalg.norm(parent_pts - origin, axis=1)))
            cuts[pid].setdefault(br.branch_id, j)

        paths: list[CenterlinePath] = []
        parents: list[int | None] = []
        seg_ranges: dict[int, list[tuple[int, int, int]]] = {}

        def segment_at(branch_id: int, j: int) -> int | None:
            for start, end, idx in seg_ranges.get(branch_id, []):
                if start <= j <= end:
                    return idx
            return None

        for br in traced:  # parents precede children in pop order
            pts = np.asarray(br.points)
            radii = np.asarray(br.radii)
            n = len(pts)
            breaks = sorted({j for j in cuts[br.branch_id].values() if 0 < j < n - 1})
            bounds = [0] + breaks + [n - 1]
            ranges = []
            for start, end in zip(bounds[:-1], bounds[1:]):
                if br.parent_branch is None or br.parent_branch not in by_id:
                    parent_idx = None
                else:
                    parent_idx = segment_at(br.parent_branch,
                                            cuts[br.parent_branch][br.branch_id])
                if ranges:  # continuation segments hang off the previous one
                    parent_idx = ranges[-1][2]
                paths.append(CenterlinePath(points=pts[start:end + 1],
                                            radii=radii[start:end + 1]))
                parents.append(parent_idx)
                ranges.append((start, end, len(paths) - 1))
            seg_ranges[br.branch_id] = ranges
        return paths, parents


def subvolume_size(r_i: float, r_prev: float | None = None) -> float:
    """Subvolume side length: five times the average of the current and
    previous radius estimates (first step: previous := current)."""
    if r_i <= 0 or (r_prev is not None and r_prev <= 0):
        raise ValueError("radii must be positive")
    if r_prev is None:
        r_prev = r_i
    return 5.0 * (r_i + r_prev) / 2.0


def _normalize(sub: Volume3D, mode: str) -> Volume3D:
    if mode == "zscore":
        return normalize_zscore(sub)[0]
    if mode == "none":
        return sub
    raise ValueError(f"unknown normalization {mode!r}")


@dataclass
class EnlargementResult:
    prob: Volume3D
    spec: SubvolumeSpec
    side: float
    gamma: float
    calls: int


def segment_with_enlargement(backend: SegmenterBackend, image: Volume3D, center,
                             L0: float, cfg: TraceConfig) -> EnlargementResult:
    """Segment at side L0, growing the subvolume by 10% per round while the
    vessel-voxel fraction gamma stays at or above gamma_star, up to a 30%
    total increase. Returns the last segmentation."""
    L = L0
    calls = 0
    while True:
        spec = SubvolumeSpec(center=tuple(center), side=L,
                             voxels_per_side=cfg.voxels_per_side)
        sub = extract_subvolume(image, spec, interpolation="tricubic")
        sub = _normalize(sub, cfg.normalization)
        prob = segment(backend, sub)
        calls += 1
        gamma = float((prob.data >= 0.5).mean())
        if gamma < cfg.gamma_star:
            break
        L_next = L * 1.1
        if calls >= 4 or L / L0 > 1.3:
            break
        L = L_next
    return EnlargementResult(prob=prob, spec=spec, side=L, gamma=gamma, calls=calls)


def _point_at_fraction(path: CenterlinePath, fraction: float):
    """Point, tangent and radius at an arclength fraction along a path."""
    pts = path.points
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    target = fraction * arc[-1]
    i = int(np.searchsorted(arc, target, side="right") - 1)
    i = min(max(i, 0), len(pts) - 2)
    denom = seg[i] if seg[i] > 0 else 1.0
    t = (target - arc[i]) / denom
    point = pts[i] + t * (pts[i + 1] - pts[i])
    radius = float(path.radii[i] + t * (path.radii[i + 1] - path.radii[i]))
    lo = max(i - 1, 0)
    hi = min(i + 2, len(pts) - 1)
    tangent = pts[hi] - pts[lo]
    return point, tangent, radius


def choose_step_points(paths: list[CenterlinePath], cfg: TraceConfig,
                       current: StepPoint) -> tuple[StepPoint, list[StepPoint]]:
    """Next stepping point at ``step_fraction`` along each path; the largest
    radius continues the branch, the rest are queued bifurcations.

    Candidates behind the plane through the current point perpendicular to
    the current tangent are dropped: within a subvolume of ~5 radii a real
    vessel does not double back, so such paths re-enter already-traced tube
    (e.g. the inlet clipped across a cube corner shows up as a second cap).
    """
    if not paths:
        raise ValueError("no paths")
    here = np.asarray(current.point)
    heading = np.asarray(current.tangent)
    candidates = []
    cand_paths = []
    for path in paths:
        if len(path.points) < 2:
            continue
        point, tangent, radius = _point_at_fraction(path, cfg.step_fraction)
        if float(np.dot(point - here, heading)) <= 0.0:
            continue
        candidates.append(StepPoint(
            point=tuple(point), tangent=tuple(tangent), radius=radius,
            prev_radius=current.radius, branch_id=current.branch_id,
            parent_branch=current.branch_id,
        ))
        cand_paths.append(path)
    if not candidates:
        raise ValueError("no usable paths")
    # candidates within one tube radius of each other sit in the same vessel
    # (face-grazing caps produce such twins); the larger radius wins
    order = sorted(range(len(candidates)), key=lambda i: -candidates[i].radius)
    unique: list[int] = []
    for i in order:
        pt = np.asarray(candidates[i].point)
        if any(np.linalg.norm(pt - np.asarray(candidates[u].point))
               < max(candidates[u].radius, candidates[i].radius) for u in unique):
            continue
        unique.append(i)
    nxt = replace(candidates[unique[0]], parent_branch=current.parent_branch)
    next_path = cand_paths[unique[0]]
    bifurcations = []
    for i in unique[1:]:
        junction = _fork_point(next_path, cand_paths[i],
                               max(nxt.radius, candidates[i].radius))
        bifurcations.append(replace(candidates[i], junction=tuple(junction)))
    return nxt, bifurcations


def _fork_point(next_path: CenterlinePath, branch_path: CenterlinePath,
                tol: float) -> np.ndarray:
    """Point where a bifurcation path diverges from the continuing path.

    Both paths start at the same source cap and share the tube up to the
    junction; the fork is the last continuing-path point still within ``tol``
    of the branch path. Used to recognize the same junction rediscovered from
    a later subvolume.
    """
    a = next_path.points
    b = branch_path.points
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2).min(axis=1)
    beyond = np.nonzero(d2 > tol * tol)[0]
    if len(beyond) == 0:
        return a[-1]
    return a[max(int(beyond[0]) - 1, 0)]


def chance_advance(sp: StepPoint, max_chances: int = 3) -> StepPoint:
    """Move one radius further along the tangent after a local failure."""
    if sp.chances >= max_chances:
        raise ChancesExhausted("branch terminated: chances exhausted")
    new_point = np.asarray(sp.point) + sp.radius * np.asarray(sp.tangent)
    return replace(sp, point=tuple(new_point), chances=sp.chances + 1)


def check_retrace(candidate: StepPoint, acc: GlobalAccumulator) -> bool:
    """True when the candidate lands in a voxel already segmented (mean
    probability >= 0.5) by a branch other than the candidate's own."""
    return (acc.mean_probability_at(candidate.point) >= 0.5
            and acc.touched_by_other_branch(candidate.point, candidate.branch_id))


def _local_mask(prob: Volume3D) -> Volume3D:
    """Binarize a probability map, keep the component at the subvolume center
    (largest component if the center voxel is background) and fill enclosed
    holes: a vessel has no interior background, so enclosed holes are noise
    that would otherwise wreck the boundary-distance speed and radii."""
    from scipy import ndimage
    binary = prob.with_data((prob.data >= 0.5).astype(np.float32), kind="binary")
    center = tuple(d // 2 for d in binary.dims)
    if binary.data[center] > 0.5:
        labels, _ = ndimage.label(binary.data > 0.5,
                                  structure=ndimage.generate_binary_structure(3, 3))
        keep = binary.with_data((labels == labels[center]).astype(np.float32),
                                kind="binary")
    else:
        keep = largest_connected_component(binary, connectivity=26)
    filled = ndimage.binary_fill_holes(keep.data > 0.5)
    return keep.with_data(filled.astype(np.float32), kind="binary")


def _known_junction(candidate: StepPoint, junctions: list) -> bool:
    """Whether the candidate forks from a junction that was already queued.

    Consecutive subvolumes re-see the same junction from different positions
    and produce candidates at different spots along the side branch, so
    deduplication compares fork points, not candidate points."""
    if candidate.junction is None:
        return False
    jc = np.asarray(candidate.junction)
    for pt, radius in junctions:
        if np.linalg.norm(jc - pt) < 2.0 * max(radius, candidate.radius):
            return True
    return False


def trace(image: Volume3D, seed: StepPoint, backend: SegmenterBackend,
          cfg: TraceConfig | None = None) -> TraceResult:
    """Trace the full tree reachable from the seed.

    Deterministic given seed, config and backend. Every branch ends with a
    stop reason from STOP_REASONS; queued bifurcations that are never traced
    (global N_max / NB_max cutoffs) are logged with that reason too.
    """
    cfg = cfg or TraceConfig()
    lo, hi = image.bounds()
    if np.any(np.asarray(seed.point) < lo) or np.any(np.asarray(seed.point) > hi):
        raise ValueError("seed outside image")

    acc = GlobalAccumulator.for_image(image, weight_exponent=cfg.weight_exponent)
    queue: list[StepPoint] = [replace(seed, chances=0)]
    branches: list[TracedBranch] = []
    step_log: list[dict] = []
    queued_junctions: list = []  # dedupe record: (fork point, radius)
    steps_taken = 0
    next_branch_id = 0
    hit_n_max = False

    def log_step(branch_id, sp, side, gamma, n_caps, outcome, n_bif=0):
        step_log.append({
            "step": len(step_log),
            "branch_id": branch_id,
            "point": [float(x) for x in sp.point],
            "L": float(side) if side is not None else None,
            "gamma": float(gamma) if gamma is not None else None,
            "n_caps": n_caps,
            "outcome": outcome,
            "bifurcations_queued": n_bif,
        })

    while queue:
        if cfg.NB_max is not None and len(branches) >= cfg.NB_max:
            for pending in queue:
                branches.append(TracedBranch(branch_id=next_branch_id,
                                             parent_branch=pending.parent_branch,
                                             origin=pending.junction or pending.point,
                                             stop_reason="NB_max"))
                next_branch_id += 1
            break
        if hit_n_max:
            for pending in queue:
                branches.append(TracedBranch(branch_id=next_branch_id,
                                             parent_branch=pending.parent_branch,
                                             origin=pending.junction or pending.point,
                                             stop_reason="N_max"))
                next_branch_id += 1
            break

        sp = replace(queue.pop(0), branch_id=next_branch_id, chances=0)
        branch = TracedBranch(branch_id=next_branch_id,
                              parent_branch=sp.parent_branch,
                              origin=sp.junction or sp.point)
        next_branch_id += 1
        prev_point = np.asarray(sp.point) - sp.radius * np.asarray(sp.tangent)
        branch_steps = 0

        while True:
            if steps_taken >= cfg.N_max:
                branch.stop_reason = "N_max"
                hit_n_max = True
                break
            if sp.radius < cfg.R_min:
                branch.stop_reason = "R_min"
                break
            side0 = subvolume_size(sp.radius, sp.prev_radius)
            steps_taken += 1
            try:
                result = segment_with_enlargement(backend, image, sp.point, side0, cfg)
            except EmptyCropError:
                log_step(branch.branch_id, sp, side0, None, None, "failure:boundary")
                branch.stop_reason = "boundary"
                break
            except (SegmentationFailure, ValueError) as exc:
                log_step(branch.branch_id, sp, side0, None, None,
                         f"failure:segmentation:{exc}")
                try:
                    sp = chance_advance(sp, cfg.max_chances)
                except ChancesExhausted:
                    branch.stop_reason = "chances_exhausted"
                    break
                continue

            mask = _local_mask(result.prob)
            if mask.data.sum() == 0:
                log_step(branch.branch_id, sp, result.side, result.gamma, 0,
                         "failure:empty_segmentation")
                try:
                    sp = chance_advance(sp, cfg.max_chances)
                except ChancesExhausted:
                    branch.stop_reason = "chances_exhausted"
                    break
                continue

            try:
                paths = extract_local_centerlines(mask, prev_point)
            except CenterlineExtractionFailure as exc:
                log_step(branch.branch_id, sp, result.side, result.gamma,
                         len(detect_caps(mask)), f"failure:centerline:{exc}")
                try:
                    sp = chance_advance(sp, cfg.max_chances)
                except ChancesExhausted:
                    branch.stop_reason = "chances_exhausted"
                    break
                continue
            n_caps = len(detect_caps(mask))
            if not paths:  # single cap: dead-end look, retried like a failure
                log_step(branch.branch_id, sp, result.side, result.gamma, n_caps,
                         "failure:no_outlets")
                try:
                    sp = chance_advance(sp, cfg.max_chances)
                except ChancesExhausted:
                    branch.stop_reason = "chances_exhausted"
                    break
                continue

            try:
                next_sp, bifurcations = choose_step_points(paths, cfg, sp)
            except ValueError:
                # every outlet points backward: dead-end look, retried
                log_step(branch.branch_id, sp, result.side, result.gamma, n_caps,
                         "failure:no_forward_outlets")
                try:
                    sp = chance_advance(sp, cfg.max_chances)
                except ChancesExhausted:
                    branch.stop_reason = "chances_exhausted"
                    break
                continue

            # successful step
            accumulate(acc, result.prob, result.spec, branch.branch_id)
            kept_bifs = []
            for bif in bifurcations:
                if _known_junction(bif, queued_junctions):
                    continue
                if check_retrace(bif, acc):
                    continue
                kept_bifs.append(replace(bif, parent_branch=branch.branch_id))
                queued_junctions.append((np.asarray(bif.junction), bif.radius))
            queue.extend(kept_bifs)
            log_step(branch.branch_id, sp, result.side, result.gamma, n_caps,
                     "ok", n_bif=len(kept_bifs))
            branch.points.append(list(next_sp.point))
            branch.radii.append(next_sp.radius)
            branch_steps += 1

            if cfg.queue_sort_period and steps_taken % cfg.queue_sort_period == 0:
                queue.sort(key=lambda q: -q.radius)
            if cfg.retrace_check_period and branch_steps % cfg.retrace_check_period == 0:
                if check_retrace(next_sp, acc):
                    branch.stop_reason = "retrace"
                    break

            prev_point = np.asarray(sp.point)
            sp = replace(next_sp, chances=0)

        branches.append(branch)

    return TraceResult(accumulator=acc, branches=branches, step_log=step_log)
