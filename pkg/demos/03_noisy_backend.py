"""Trace with an imperfect segmentation backend and watch the safeguards.

Instead of the ground-truth oracle this run thresholds raw intensities and
randomly flips 2% of the voxels in every local prediction. The tracer has
to survive holes, speckle and occasional dead-end looks: enclosed holes
are filled, failed steps retry by advancing one radius (the "chances"
mechanism), and subvolumes grow when the vessel fills too much of the view.

Run:  python3 demos/03_noisy_backend.py
"""

import numpy as np

import vesseltrace as vt


def run(backend, label, image, mask, tree, seed):
    result = vt.trace(image, seed, backend, vt.TraceConfig())
    binary, _ = vt.finalize(result.accumulator, image)
    truth_ct = vt.phantom_ground_truth(tree, step=0.5)
    retries = sum(1 for rec in result.step_log if rec["outcome"] != "ok")
    grown = sum(1 for rec in result.step_log
                if rec["L"] is not None and rec["gamma"] is not None
                and rec["gamma"] >= 0.30)
    print(f"{label:22s} dice {vt.dice(binary, mask):.3f}  "
          f"overlap {vt.centerline_overlap(binary, truth_ct):.3f}  "
          f"retries {retries}  crowded-view steps {grown}")


def main():
    cfg = vt.PhantomConfig(depth=2, root_radius=4.0, rng_seed=7)
    grid = vt.Volume3D(data=np.zeros((128, 128, 128), dtype=np.float32),
                       spacing=(1.0, 1.0, 1.0), kind="intensity")
    tree = vt.generate_tree(cfg, grid.bounds())
    image, mask = vt.rasterize_phantom(tree, grid, cfg)
    seed = vt.StepPoint(point=tuple(tree.branches[0].points[12]),
                        tangent=(1.0, 0.0, 0.0), radius=4.0)

    # the backend sees z-scored subvolumes, so the cut is in sigma units
    run(vt.oracle_gtcrop(mask), "ground-truth oracle", image, mask, tree, seed)
    run(vt.oracle_threshold(0.5), "intensity threshold", image, mask, tree, seed)
    run(vt.oracle_threshold(0.5, flip_prob=0.02, rng_seed=0),
        "threshold + 2% flips", image, mask, tree, seed)


if __name__ == "__main__":
    main()
