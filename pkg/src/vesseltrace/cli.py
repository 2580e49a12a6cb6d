"""Command-line entry points: trace, phantom, metrics, sample-patches.

Exit codes: 0 success, 1 usage/validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from . import __version__
from .assembly import finalize
from .centerline import load_centerlines, save_centerlines
from .metrics import MetricsReport, centerline_overlap, dice, eval_mask, hausdorff
from .phantom import (
    PhantomConfig,
    generate_tree,
    load_phantom_config,
    phantom_ground_truth,
    rasterize_phantom,
)
from .segmenter import (
    PatchSampleParams,
    external_backend,
    oracle_gtcrop,
    oracle_threshold,
    sample_training_patches,
    write_patch_dataset,
)
from .surface import save_mesh
from .tracer import StepPoint, TraceConfig, trace
from .volume import Volume3D, largest_connected_component, load_volume, save_volume


class ValidationError(ValueError):
    pass


def _parse_vec(text: str, name: str) -> tuple[float, float, float]:
    parts = text.split(",")
    if len(parts) != 3:
        raise ValidationError(f"{name} must be three comma-separated numbers")
    return tuple(float(p) for p in parts)


def _load_trace_config(path: str | None, overrides: dict) -> TraceConfig:
    doc = {}
    if path:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        known = set(TraceConfig.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    doc.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return TraceConfig(**doc)
    except (TypeError, ValueError) as exc:
        raise ValidationError(str(exc)) from exc


def _build_backend(args):
    if args.backend == "oracle-gt":
        if not args.gt_mask:
            raise ValidationError("--gt-mask is required for the oracle-gt backend")
        return oracle_gtcrop(load_volume(args.gt_mask))
    if args.backend == "oracle-threshold":
        return oracle_threshold(args.cut, args.flip_prob, args.seed_rng)
    if args.backend == "external":
        if not args.command:
            raise ValidationError("--command is required for the external backend")
        return external_backend(args.command, args.workdir or ".")
    raise ValidationError(f"unknown backend {args.backend!r}")


def cmd_trace(args) -> int:
    if args.radius <= 0:
        raise ValidationError("--radius must be positive")
    seed_point = _parse_vec(args.seed, "--seed")
    direction = _parse_vec(args.direction, "--direction")
    cfg = _load_trace_config(args.config, {
        "voxels_per_side": args.voxels_per_side,
        "N_max": args.n_max,
        "NB_max": args.nb_max,
    })
    backend = _build_backend(args)
    image = load_volume(args.image)
    seed = StepPoint(point=seed_point, tangent=direction, radius=args.radius)

    result = trace(image, seed, backend, cfg)

    os.makedirs(args.out, exist_ok=True)
    ok_steps = sum(1 for rec in result.step_log if rec["outcome"] == "ok")
    with open(os.path.join(args.out, "steps.jsonl"), "w", encoding="utf-8") as fh:
        for rec in result.step_log:
            fh.write(json.dumps(rec) + "\n")
    if ok_steps == 0:
        print("trace failed: no successful steps", file=sys.stderr)
        return 2
    save_volume(result.accumulator.mean_map(), os.path.join(args.out, "global_probability"))
    binary, mesh = finalize(result.accumulator, image)
    save_volume(binary, os.path.join(args.out, "global_binary"))
    save_mesh(mesh, os.path.join(args.out, "surface.ply"))
    paths, parents = result.branch_tree_paths()
    save_centerlines(paths, os.path.join(args.out, "centerlines.json"), parents=parents)
    print(f"traced {len(result.branches)} branches in {len(result.step_log)} steps")
    return 0


def cmd_phantom(args) -> int:
    try:
        cfg = load_phantom_config(args.config) if args.config else PhantomConfig()
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    dims = tuple(int(d) for d in args.dims.split(","))
    spacing = _parse_vec(args.spacing, "--spacing")
    grid = Volume3D(data=np.zeros(dims, dtype=np.float32), spacing=spacing, kind="intensity")
    lo, hi = grid.bounds()
    tree = generate_tree(cfg, (lo, hi))
    image, mask = rasterize_phantom(tree, grid, cfg)
    os.makedirs(args.out, exist_ok=True)
    save_volume(image, os.path.join(args.out, "image"))
    save_volume(mask, os.path.join(args.out, "mask"))
    save_centerlines(phantom_ground_truth(tree, step=0.5 * min(spacing)),
                     os.path.join(args.out, "centerlines.json"))
    print(f"phantom with {len(tree.branches)} branches written to {args.out}")
    return 0


def cmd_metrics(args) -> int:
    pred = load_volume(args.pred)
    truth = load_volume(args.truth)
    centerlines = load_centerlines(args.centerlines) if args.centerlines else []
    if args.largest_component:
        pred = largest_connected_component(pred, connectivity=26)
    masked = False
    if args.mask_from_centerline:
        if not centerlines:
            raise ValidationError("--mask-from-centerline requires --centerlines")
        region = eval_mask(centerlines, truth)
        pred = pred.with_data(np.minimum(pred.data, region.data), kind="binary")
        truth = truth.with_data(np.minimum(truth.data, region.data), kind="binary")
        masked = True
    report = MetricsReport(
        dice=dice(pred, truth),
        hausdorff_px=hausdorff(pred, truth),
        centerline_overlap=centerline_overlap(pred, centerlines) if centerlines else float("nan"),
        masked=masked,
        case_id=args.case_id,
    )
    text = json.dumps(asdict(report), indent=1)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return 0


def cmd_sample_patches(args) -> int:
    image = load_volume(args.image)
    mask = load_volume(args.mask)
    centerlines = load_centerlines(args.centerlines)
    params = PatchSampleParams(
        mu_r=args.mu_r, sigma_r=args.sigma_r, mu_s=args.mu_s, sigma_s=args.sigma_s,
        samples_per_centerline_point=args.samples_per_point, rng_seed=args.seed_rng,
    )
    samples = sample_training_patches(image, mask, centerlines, params,
                                      voxels_per_side=args.voxels_per_side)
    manifest = write_patch_dataset(samples, args.out, source_case=args.case_id)
    print(f"wrote {len(manifest)} patches to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vesseltrace",
                                     description="Sequential vessel tracing toolkit")
    parser.add_argument("--version", action="version", version=f"vesseltrace {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("trace", help="trace a vessel tree from a seed point")
    p.add_argument("--image", required=True)
    p.add_argument("--seed", required=True, help="x,y,z in mm")
    p.add_argument("--direction", required=True, help="dx,dy,dz")
    p.add_argument("--radius", type=float, required=True, help="seed radius (mm)")
    p.add_argument("--backend", required=True,
                   choices=["oracle-gt", "oracle-threshold", "external"])
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON file with TraceConfig overrides")
    p.add_argument("--gt-mask", help="ground-truth mask RVOL (oracle-gt)")
    p.add_argument("--cut", type=float, default=0.5, help="threshold (oracle-threshold)")
    p.add_argument("--flip-prob", type=float, default=0.0)
    p.add_argument("--command", help="command template with {input}/{output} (external)")
    p.add_argument("--workdir")
    p.add_argument("--voxels-per-side", type=int, default=None)
    p.add_argument("--n-max", type=int, default=None)
    p.add_argument("--nb-max", type=int, default=None)
    p.add_argument("--seed-rng", type=int, default=0)
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("phantom", help="generate a synthetic vascular phantom")
    p.add_argument("--config", help="phantom.json config file")
    p.add_argument("--dims", default="128,128,128")
    p.add_argument("--spacing", default="1,1,1")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("metrics", help="compare a prediction against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--centerlines")
    p.add_argument("--mask-from-centerline", action="store_true")
    p.add_argument("--largest-component", action="store_true")
    p.add_argument("--out")
    p.add_argument("--case-id", default="")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("sample-patches", help="sample training patches along centerlines")
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--centerlines", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mu-r", type=float, default=5.0)
    p.add_argument("--sigma-r", type=float, default=1.0)
    p.add_argument("--mu-s", type=float, default=0.0)
    p.add_argument("--sigma-s", type=float, default=0.8)
    p.add_argument("--samples-per-point", type=int, default=1)
    p.add_argument("--voxels-per-side", type=int, default=64)
    p.add_argument("--seed-rng", type=int, default=0)
    p.add_argument("--case-id", default="")
    p.set_defaults(func=cmd_sample_patches)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad flags; remap to the validation exit code
        return 0 if exc.code == 0 else 1
    try:
        return args.func(args)
    except (ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
