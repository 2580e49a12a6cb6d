"""Shared fixtures and mask-building helpers for the test suite."""

import numpy as np
import pytest

import vesseltrace as vt


def make_grid(dims=(128, 128, 128), spacing=(1.0, 1.0, 1.0)):
    return vt.Volume3D(data=np.zeros(dims, dtype=np.float32), spacing=spacing,
                       kind="intensity")


def build_phantom(depth, rng_seed=7, tortuosity_amp=1.0, dims=(128, 128, 128)):
    """Standard phantom: root radius 4 mm on a 1 mm isotropic grid."""
    cfg = vt.PhantomConfig(depth=depth, root_radius=4.0, rng_seed=rng_seed,
                           tortuosity_amp=tortuosity_amp)
    grid = make_grid(dims)
    tree = vt.generate_tree(cfg, grid.bounds())
    image, mask = vt.rasterize_phantom(tree, grid, cfg)
    return cfg, tree, image, mask


def root_seed(tree):
    """Seed a dozen ground-truth points into the root, heading along +x."""
    return vt.StepPoint(point=tuple(tree.branches[0].points[12]),
                        tangent=(1.0, 0.0, 0.0), radius=4.0)


def tube_mask(dims=(60, 17, 17), spacing=(1.0, 1.0, 1.0), radius=4.0):
    """Binary straight tube along x, axis through the volume center."""
    grid = make_grid(dims, spacing)
    ii, jj, kk = np.meshgrid(*[np.arange(d) for d in dims], indexing="ij")
    cy = grid.origin[1] + (dims[1] - 1) / 2.0 * spacing[1]
    cz = grid.origin[2] + (dims[2] - 1) / 2.0 * spacing[2]
    y = grid.origin[1] + jj * spacing[1]
    z = grid.origin[2] + kk * spacing[2]
    inside = (y - cy) ** 2 + (z - cz) ** 2 <= radius ** 2
    return grid.with_data(inside.astype(np.float32), kind="binary")


def y_mask(dims=(64, 48, 17), spacing=(1.0, 1.0, 1.0), radius=4.0):
    """Binary Y junction: trunk along +x splitting into two straight limbs."""
    grid = make_grid(dims, spacing)
    cy = (dims[1] - 1) / 2.0
    cz = (dims[2] - 1) / 2.0
    fork = np.array([dims[0] / 2.0, cy, cz])
    segs = [
        (np.array([-1.0, cy, cz]), fork),
        (fork, fork + 40.0 * np.array([2.0, 1.0, 0.0]) / np.sqrt(5)),
        (fork, fork + 40.0 * np.array([2.0, -1.0, 0.0]) / np.sqrt(5)),
    ]
    ii, jj, kk = np.meshgrid(*[np.arange(d) for d in dims], indexing="ij")
    pts = np.stack([ii * spacing[0] + grid.origin[0],
                    jj * spacing[1] + grid.origin[1],
                    kk * spacing[2] + grid.origin[2]], axis=-1)
    inside = np.zeros(dims, dtype=bool)
    for a, b in segs:
        ab = b - a
        t = np.clip(((pts - a) @ ab) / (ab @ ab), 0.0, 1.0)
        d = np.linalg.norm(pts - (a + t[..., None] * ab), axis=-1)
        inside |= d <= radius
    return grid.with_data(inside.astype(np.float32), kind="binary")


@pytest.fixture(scope="session")
def depth2_phantom():
    return build_phantom(depth=2)


@pytest.fixture(scope="session")
def depth2_trace(depth2_phantom):
    import time
    cfg, tree, image, mask = depth2_phantom
    t0 = time.monotonic()
    result = vt.trace(image, root_seed(tree), vt.oracle_gtcrop(mask), vt.TraceConfig())
    elapsed = time.monotonic() - t0
    return result, elapsed


@pytest.fixture(scope="session")
def tube_phantom():
    return build_phantom(depth=0)
