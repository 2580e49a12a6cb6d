"""Pluggable local segmentation backends, training-patch sampling and loss.

A backend is any callable taking a (normalized) image subvolume and
returning a probability volume on the same grid. The oracle backends let the
tracing engine be tested without a trained network: ``oracle_gtcrop`` answers
from a known ground-truth mask, ``oracle_threshold`` from raw intensities.
``external_backend`` shells out to an arbitrary command via RVOL files, which
is where a real model plugs in.
"""

from __future__ import annotations

import json
import os
import subprocess
import tempfile
import zlib
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from .centerline import CenterlinePath
from .volume import (
    SubvolumeSpec,
    Volume3D,
    extract_subvolume,
    load_volume,
    resample_to_grid,
    save_volume,
)

__all__ = [
    "SegmenterBackend",
    "SegmentationFailure",
    "PatchSampleParams",
    "PatchSample",
    "segment",
    "oracle_gtcrop",
    "oracle_threshold",
    "external_backend",
    "sample_training_patches",
    "write_patch_dataset",
    "evaluate_loss",
]

SegmenterBackend = Callable[[Volume3D], Volume3D]


class SegmentationFailure(RuntimeError):
    """Backend failed or returned a map violating the backend contract."""


def segment(backend: SegmenterBackend, sub_image: Volume3D) -> Volume3D:
    """Run a backend and enforce the probability-map contract."""
    try:
        out = backend(sub_image)
    except SegmentationFailure:
        raise
    except Exception as exc:
        raise SegmentationFailure(f"backend raised: {exc}") from exc
    if out.kind != "probability":
        raise SegmentationFailure(f"backend returned kind {out.kind!r}, expected probability")
    if out.dims != sub_image.dims:
        raise SegmentationFailure("backend output dims differ from input")
    if not np.allclose(out.spacing, sub_image.spacing) or not np.allclose(out.origin, sub_image.origin):
        raise SegmentationFailure("backend output grid differs from input")
    return out


def oracle_gtcrop(gt_mask: Volume3D) -> SegmenterBackend:
    """Backend answering every request by cropping a ground-truth mask onto
    the request grid (label-preserving resampling). Requests entirely outside
    the mask yield an all-zero map."""

    def run(sub_image: Volume3D) -> Volume3D:
        crop = resample_to_grid(gt_mask, sub_image, interpolation="labels")
        return crop.with_data(crop.data, kind="probability")

    return run


def oracle_threshold(cut: float, flip_prob: float = 0.0, rng_seed: int = 0) -> SegmenterBackend:
    """Backend thresholding the request's intensities at ``cut``, then
    flipping each voxel independently with probability ``flip_prob``.

    The flip noise is seeded from ``rng_seed`` plus a checksum of the request,
    so identical requests always get identical answers.
    """

    def run(sub_image: Volume3D) -> Volume3D:
        out = (sub_image.data > cut).astype(np.float64)
        if flip_prob > 0:
            digest = zlib.crc32(np.ascontiguousarray(sub_image.data).tobytes())
            digest = zlib.crc32(np.asarray(sub_image.origin).tobytes(), digest)
            rng = np.random.default_rng([rng_seed, digest])
            flips = rng.random(sub_image.dims) < flip_prob
            out = np.where(flips, 1.0 - out, out)
        return sub_image.with_data(out, kind="probability")

    return run


def external_backend(command_template: str, workdir: str) -> SegmenterBackend:
    """Backend delegating to an external command.

    The template must contain ``{input}`` and ``{output}`` placeholders;
    the request is written as an RVOL pair, the reply read back as an RVOL
    probability volume. Nonzero exit or a missing/ill-shaped reply raises
    SegmentationFailure. Each call uses its own temp directory, so concurrent
    calls do not collide.
    """
    if "{input}" not in command_template or "{output}" not in command_template:
        raise ValueError("command template needs {input} and {output} placeholders")
    os.makedirs(workdir, exist_ok=True)

    def run(sub_image: Volume3D) -> Volume3D:
        with tempfile.TemporaryDirectory(dir=workdir) as tmp:
            in_path = os.path.join(tmp, "request.rvol.json")
            out_path = os.path.join(tmp, "reply.rvol.json")
            save_volume(sub_image, in_path)
            cmd = command_template.format(input=in_path, output=out_path)
            proc = subprocess.run(cmd, shell=True, capture_output=True, text=True)
            if proc.returncode != 0:
                raise SegmentationFailure(
                    f"command exited {proc.returncode}: {proc.stderr.strip()[:200]}"
                )
            try:
                reply = load_volume(out_path)
            except (FileNotFoundError, ValueError) as exc:
                raise SegmentationFailure(f"bad reply volume: {exc}") from exc
            data = np.clip(reply.data, 0.0, 1.0)
            return Volume3D(data=data, spacing=reply.spacing, origin=reply.origin,
                            kind="probability")

    return run


# ---------------------------------------------------------------------------
# Training-patch sampling

@dataclass(frozen=True)
class PatchSampleParams:
    """Distribution parameters for patch size/shift sampling.

    ``sigma_r`` and ``sigma_s`` are variances: patch side ratios are drawn
    from N(mu_r, sigma_r) and center shift ratios from N(mu_s, sigma_s),
    both in units of the local radius. Nonpositive side-ratio draws are
    rejected and redrawn.
    """

    mu_r: float = 5.0
    sigma_r: float = 1.0
    mu_s: float = 0.0
    sigma_s: float = 0.8
    samples_per_centerline_point: int = 1
    rng_seed: int = 0

    def __post_init__(self):
        if self.mu_r <= 0:
            raise ValueError("mu_r must be positive")


@dataclass
class PatchSample:
    image: Volume3D
    label: Volume3D
    centerline_point_index: int
    side_mm: float
    center_mm: tuple[float, float, float]
    perpendicular: np.ndarray


def _tangent_frame(tangent: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic orthonormal (u, v) perpendicular to the tangent: start
    from the global axis least aligned with it."""
    axis = np.zeros(3)
    axis[np.argmin(np.abs(tangent))] = 1.0
    u = axis - axis.dot(tangent) * tangent
    u /= np.linalg.norm(u)
    v = np.cross(tangent, u)
    return u, v


def sample_training_patches(
    image: Volume3D,
    gt_mask: Volume3D,
    centerlines: list[CenterlinePath],
    params: PatchSampleParams,
    voxels_per_side: int = 64,
) -> Iterator[PatchSample]:
    """Yield (image, label) subvolume pairs sampled along centerlines.

    Per centerline point with radius R, each sample uses side L = R * alpha
    and center shifted by beta * R along a random direction in the plane
    perpendicular to the local tangent. Deterministic under the seed.
    """
    rng = np.random.default_rng(params.rng_seed)
    point_index = 0
    for path in centerlines:
        pts = path.points
        for i in range(len(pts)):
            lo = max(i - 1, 0)
            hi = min(i + 1, len(pts) - 1)
            tangent = pts[hi] - pts[lo]
            norm = np.linalg.norm(tangent)
            this_index = point_index
            point_index += 1
            if norm < 1e-12:
                continue  # degenerate tangent
            tangent = tangent / norm
            u, v = _tangent_frame(tangent)
            radius = float(path.radii[i])
            for _ in range(params.samples_per_centerline_point):
                alpha = rng.normal(params.mu_r, np.sqrt(params.sigma_r)) if params.sigma_r > 0 else params.mu_r
                while alpha <= 0:
                    alpha = rng.normal(params.mu_r, np.sqrt(params.sigma_r))
                beta = rng.normal(params.mu_s, np.sqrt(params.sigma_s)) if params.sigma_s > 0 else params.mu_s
                a = rng.uniform(-1.0, 1.0)
                b = rng.uniform(-1.0, 1.0)
                while abs(a) + abs(b) < 1e-12:
                    a = rng.uniform(-1.0, 1.0)
                    b = rng.uniform(-1.0, 1.0)
                w = (a * u + b * v) / np.linalg.norm(a * u + b * v)
                side = radius * alpha
                center = pts[i] + beta * radius * w
                spec = SubvolumeSpec(center=tuple(center), side=side,
                                     voxels_per_side=voxels_per_side)
                yield PatchSample(
                    image=extract_subvolume(image, spec, interpolation="tricubic"),
                    label=extract_subvolume(gt_mask, spec, interpolation="labels"),
                    centerline_point_index=this_index,
                    side_mm=side,
                    center_mm=tuple(float(c) for c in center),
                    perpendicular=w,
                )


def write_patch_dataset(samples, out_dir: str, source_case: str = "") -> list[dict]:
    """Write sampled patches as RVOL pairs plus a JSON manifest; returns the
    manifest records."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = []
    for n, sample in enumerate(samples):
        img_name = f"patch_{n:05d}_img"
        lbl_name = f"patch_{n:05d}_lbl"
        save_volume(sample.image, os.path.join(out_dir, img_name))
        save_volume(sample.label, os.path.join(out_dir, lbl_name))
        manifest.append({
            "image": img_name + ".rvol.json",
            "label": lbl_name + ".rvol.json",
            "source_case": source_case,
            "centerline_point_index": sample.centerline_point_index,
            "L_mm": sample.side_mm,
            "center_mm": list(sample.center_mm),
        })
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
    return manifest


# ---------------------------------------------------------------------------
# Loss

def evaluate_loss(pred: Volume3D, truth: Volume3D) -> dict[str, float]:
    """Soft Dice, binary cross-entropy and their combinations.

    ``combined_printed`` is 1 - dice - bce (the form some sources print,
    which decreases as cross-entropy grows); ``combined`` is the
    conventional minimizable 1 - dice + bce. Both are returned.
    """
    if pred.dims != truth.dims:
        raise ValueError("pred/truth dims mismatch")
    p = pred.data.astype(np.float64).ravel()
    t = truth.data.astype(np.float64).ravel()
    denom = p.sum() + t.sum()
    if denom == 0:
        dice = 1.0  # both empty: perfect agreement
    else:
        dice = float(2.0 * (p * t).sum() / denom)
    pc = np.clip(p, 1e-7, 1.0 - 1e-7)
    bce = float(-(t * np.log(pc) + (1.0 - t) * np.log(1.0 - pc)).mean())
    return {
        "dice": dice,
        "bce": bce,
        "combined": 1.0 - dice + bce,
        "combined_printed": 1.0 - dice - bce,
    }
