import numpy as np
import pytest
from scipy import ndimage

import vesseltrace as vt
from vesseltrace.volume import compute_foreground_stats, normalize_ct_foreground


def random_volume(rng, dims=(6, 5, 4), spacing=(1.0, 1.0, 1.0), kind="intensity"):
    data = rng.normal(size=dims)
    if kind == "binary":
        data = (data > 0).astype(np.float32)
    return vt.Volume3D(data=data, spacing=spacing, origin=(1.0, -2.0, 0.5), kind=kind)


# ---------------------------------------------------------------------------
# data model

def test_volume_validation():
    with pytest.raises(ValueError):
        vt.Volume3D(data=np.zeros((4, 4)), spacing=(1, 1, 1))
    with pytest.raises(ValueError):
        vt.Volume3D(data=np.zeros((4, 4, 4)), spacing=(1, 0, 1))
    with pytest.raises(ValueError):
        vt.Volume3D(data=np.zeros((4, 4, 4)), spacing=(1, 1, 1), kind="mystery")
    with pytest.raises(ValueError):
        vt.Volume3D(data=np.full((4, 4, 4), 1.5), spacing=(1, 1, 1), kind="probability")
    with pytest.raises(ValueError):
        vt.Volume3D(data=np.full((4, 4, 4), 0.3), spacing=(1, 1, 1), kind="binary")


def test_world_index_round_trip():
    v = vt.Volume3D(data=np.zeros((8, 8, 8)), spacing=(0.5, 1.0, 2.0), origin=(3, -1, 7))
    idx = np.array([2, 5, 3])
    world = v.index_to_world(idx)
    assert np.allclose(world, [3 + 1.0, -1 + 5.0, 7 + 6.0])
    assert np.allclose(v.world_to_index(world), idx)
    assert np.array_equal(v.nearest_index(world + 0.2), idx)


def test_bounds_are_outer_cell_faces():
    v = vt.Volume3D(data=np.zeros((4, 4, 4)), spacing=(2.0, 2.0, 2.0))
    lo, hi = v.bounds()
    assert np.allclose(lo, [-1, -1, -1])
    assert np.allclose(hi, [7, 7, 7])


def test_subvolume_spec_geometry():
    spec = vt.SubvolumeSpec(center=(0, 0, 0), side=16.0, voxels_per_side=32)
    assert spec.spacing == pytest.approx(0.5)
    assert np.allclose(spec.origin, [-7.75, -7.75, -7.75])
    with pytest.raises(ValueError):
        vt.SubvolumeSpec(center=(0, 0, 0), side=0.0)
    with pytest.raises(ValueError):
        vt.SubvolumeSpec(center=(0, 0, 0), side=5.0, voxels_per_side=4)


# ---------------------------------------------------------------------------
# RVOL I/O

def test_rvol_round_trip_intensity(tmp_path):
    rng = np.random.default_rng(0)
    v = random_volume(rng)
    path = str(tmp_path / "vol")
    vt.save_volume(v, path)
    back = vt.load_volume(path)
    assert back.dims == v.dims
    assert back.kind == "intensity"
    assert np.allclose(back.spacing, v.spacing)
    assert np.allclose(back.origin, v.origin)
    assert np.array_equal(back.data, v.data.astype(np.float32))


def test_rvol_round_trip_binary_u8(tmp_path):
    rng = np.random.default_rng(1)
    v = random_volume(rng, kind="binary")
    vt.save_volume(v, str(tmp_path / "mask"))
    back = vt.load_volume(str(tmp_path / "mask"))
    assert back.kind == "binary"
    assert np.array_equal(back.data, v.data)
    # payload really is one byte per voxel
    raw = (tmp_path / "mask.raw").read_bytes()
    assert len(raw) == v.data.size


def test_rvol_payload_is_x_fastest(tmp_path):
    data = np.arange(24, dtype=np.float32).reshape(2, 3, 4)  # (W, H, D)
    v = vt.Volume3D(data=data, spacing=(1, 1, 1))
    vt.save_volume(v, str(tmp_path / "v"))
    flat = np.fromfile(tmp_path / "v.raw", dtype="<f4")
    # first two payload values walk along x at y=z=0
    assert flat[0] == data[0, 0, 0]
    assert flat[1] == data[1, 0, 0]


def test_rvol_load_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        vt.load_volume(str(tmp_path / "nothing"))
    v = random_volume(np.random.default_rng(2))
    vt.save_volume(v, str(tmp_path / "v"))
    # truncate the payload
    raw = tmp_path / "v.raw"
    raw.write_bytes(raw.read_bytes()[:-4])
    with pytest.raises(ValueError, match="size mismatch"):
        vt.load_volume(str(tmp_path / "v"))


# ---------------------------------------------------------------------------
# cropping / resampling

def test_extract_subvolume_identity_on_aligned_grid():
    rng = np.random.default_rng(3)
    v = vt.Volume3D(data=rng.normal(size=(16, 16, 16)), spacing=(1, 1, 1))
    # 8^3 crop whose sample points coincide with source voxel centers 4..11
    spec = vt.SubvolumeSpec(center=(7.5, 7.5, 7.5), side=8.0, voxels_per_side=8)
    out = vt.extract_subvolume(v, spec, interpolation="tricubic")
    assert np.allclose(out.data, v.data[4:12, 4:12, 4:12], atol=1e-5)


def test_extract_subvolume_labels_mode_is_binary():
    mask = vt.Volume3D(data=(np.random.default_rng(4).random((16, 16, 16)) > 0.5)
                       .astype(np.float32), spacing=(1, 1, 1), kind="binary")
    spec = vt.SubvolumeSpec(center=(7.5, 7.5, 7.5), side=10.0, voxels_per_side=16)
    out = vt.extract_subvolume(mask, spec)
    assert out.kind == "binary"
    assert np.isin(out.data, (0.0, 1.0)).all()


def test_extract_subvolume_empty_crop():
    v = vt.Volume3D(data=np.zeros((8, 8, 8)), spacing=(1, 1, 1))
    spec = vt.SubvolumeSpec(center=(100, 100, 100), side=8.0)
    with pytest.raises(vt.EmptyCropError):
        vt.extract_subvolume(v, spec)


def test_resample_to_grid_identity():
    rng = np.random.default_rng(5)
    v = random_volume(rng, dims=(7, 6, 5))
    out = vt.resample_to_grid(v, v)
    assert np.allclose(out.data, v.data, atol=1e-5)


# ---------------------------------------------------------------------------
# normalization

def test_normalize_zscore():
    rng = np.random.default_rng(6)
    v = random_volume(rng, dims=(10, 10, 10))
    out, (mu, sigma) = vt.normalize_zscore(v)
    assert out.data.mean() == pytest.approx(0.0, abs=1e-5)
    assert out.data.std() == pytest.approx(1.0, abs=1e-5)
    assert mu == pytest.approx(float(v.data.mean()))
    with pytest.raises(ValueError, match="constant"):
        vt.normalize_zscore(v.with_data(np.ones(v.dims)))


def test_foreground_stats_and_ct_normalization():
    rng = np.random.default_rng(7)
    img = random_volume(rng, dims=(12, 12, 12))
    mask = img.with_data((rng.random((12, 12, 12)) > 0.5).astype(np.float32),
                         kind="binary")
    stats = compute_foreground_stats([img], [mask])
    fg = img.data[mask.data > 0.5]
    assert stats.p0_5 == pytest.approx(np.percentile(fg, 0.5))
    assert stats.p99_5 == pytest.approx(np.percentile(fg, 99.5))
    out = normalize_ct_foreground(img, stats)
    assert out.data.max() <= (stats.p99_5 - stats.mu) / stats.sigma + 1e-6
    assert out.data.min() >= (stats.p0_5 - stats.mu) / stats.sigma - 1e-6
    with pytest.raises(ValueError, match="empty foreground"):
        compute_foreground_stats([img], [mask.with_data(np.zeros(mask.dims))])


# ---------------------------------------------------------------------------
# voxel operations

def brute_force_edt(inside, spacing):
    """Reference distance: minimum over all background voxel centers, where
    everything beyond the grid counts as background."""
    dims = inside.shape
    out = np.zeros(dims)
    bg = np.argwhere(~inside).astype(np.float64) * spacing
    for i, j, k in np.argwhere(inside):
        p = np.array([i, j, k], dtype=np.float64) * spacing
        best = min(
            (i + 1) * spacing[0], (dims[0] - i) * spacing[0],
            (j + 1) * spacing[1], (dims[1] - j) * spacing[1],
            (k + 1) * spacing[2], (dims[2] - k) * spacing[2],
        )
        if len(bg):
            best = min(best, float(np.linalg.norm(bg - p, axis=1).min()))
        out[i, j, k] = best
    return out


def test_distance_transform_matches_brute_force():
    rng = np.random.default_rng(8)
    for spacing in [(1.0, 1.0, 1.0), (0.7, 1.3, 2.1)]:
        inside = rng.random((8, 8, 8)) > 0.4
        mask = vt.Volume3D(data=inside.astype(np.float32), spacing=spacing, kind="binary")
        got = vt.distance_transform(mask).data
        want = brute_force_edt(inside, np.asarray(spacing))
        assert np.allclose(got, want, atol=1e-5)


def flood_fill_components(inside, connectivity):
    struct = ndimage.generate_binary_structure(3, 3 if connectivity == 26 else 1)
    labels, n = ndimage.label(inside, structure=struct)
    return labels, n


def test_largest_connected_component():
    data = np.zeros((10, 10, 10), dtype=np.float32)
    data[1:4, 1:4, 1:4] = 1.0  # 27 voxels
    data[7:9, 7:9, 7:9] = 1.0  # 8 voxels
    mask = vt.Volume3D(data=data, spacing=(1, 1, 1), kind="binary")
    out = vt.largest_connected_component(mask)
    assert out.data.sum() == 27
    assert out.data[2, 2, 2] == 1.0 and out.data[7, 7, 7] == 0.0


def test_lcc_connectivity_modes():
    # two voxels touching only at a corner: one 26-component, two 6-components
    data = np.zeros((4, 4, 4), dtype=np.float32)
    data[0, 0, 0] = 1.0
    data[1, 1, 1] = 1.0
    mask = vt.Volume3D(data=data, spacing=(1, 1, 1), kind="binary")
    assert vt.largest_connected_component(mask, connectivity=26).data.sum() == 2
    assert vt.largest_connected_component(mask, connectivity=6).data.sum() == 1
    with pytest.raises(ValueError):
        vt.largest_connected_component(mask, connectivity=18)


def test_lcc_tie_break_smallest_x_fastest_index():
    # equal-size components; the x-fastest linear index orders (k, j, i)
    data = np.zeros((4, 4, 4), dtype=np.float32)
    data[0, 0, 2] = 1.0  # linear index 32
    data[2, 2, 0] = 1.0  # linear index 10 -> wins
    mask = vt.Volume3D(data=data, spacing=(1, 1, 1), kind="binary")
    out = vt.largest_connected_component(mask)
    assert out.data[2, 2, 0] == 1.0
    assert out.data[0, 0, 2] == 0.0


def test_lcc_empty_mask():
    mask = vt.Volume3D(data=np.zeros((4, 4, 4)), spacing=(1, 1, 1), kind="binary")
    out = vt.largest_connected_component(mask)
    assert out.data.sum() == 0
