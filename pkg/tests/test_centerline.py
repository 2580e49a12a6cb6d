import numpy as np
import pytest

import vesseltrace as vt
from vesseltrace.centerline import CenterlineExtractionFailure, BacktraceFailure

from conftest import tube_mask, y_mask


def test_detect_caps_straight_tube():
    mask = tube_mask(radius=4.0)
    caps = vt.detect_caps(mask)
    faces = sorted(c.face for c in caps)
    assert faces == ["+x", "-x"]
    for cap in caps:
        # area-equivalent radius of the circular cross-section
        assert cap.mean_radius == pytest.approx(4.0, rel=0.1)
        assert cap.voxel_count == int((mask.data[0] > 0.5).sum())
        # centroid sits on the tube axis
        assert cap.center[1] == pytest.approx(8.0)
        assert cap.center[2] == pytest.approx(8.0)


def test_detect_caps_y_junction():
    caps = vt.detect_caps(y_mask())
    assert len(caps) == 3
    assert sorted(c.face for c in caps) == ["+x", "+x", "-x"]


def test_detect_caps_interior_blob():
    data = np.zeros((12, 12, 12), dtype=np.float32)
    data[4:8, 4:8, 4:8] = 1.0
    mask = vt.Volume3D(data=data, spacing=(1, 1, 1), kind="binary")
    assert vt.detect_caps(mask) == []


def test_select_source_nearest_cap():
    mask = tube_mask()
    caps = vt.detect_caps(mask)
    source, targets = vt.select_source(caps, prev_point=(-5.0, 8.0, 8.0))
    assert source.face == "-x"
    assert [t.face for t in targets] == ["+x"]
    source, _ = vt.select_source(caps, prev_point=(100.0, 8.0, 8.0))
    assert source.face == "+x"
    with pytest.raises(CenterlineExtractionFailure):
        vt.select_source([], (0, 0, 0))


def test_eikonal_source_time_zero_and_monotone_accepts():
    mask = tube_mask()
    src = (2.0, 8.0, 8.0)
    T, accepts = vt.solve_eikonal(mask, src, return_accept_sequence=True)
    assert T.value_at_index(mask.nearest_index(src)) == 0.0
    assert np.all(np.diff(accepts) >= -1e-9)  # fast marching accepts in order
    # outside the mask the arrival time stays infinite
    assert not np.isfinite(T.data[0, 0, 0])


def test_eikonal_source_outside_mask():
    mask = tube_mask()
    with pytest.raises(ValueError, match="source outside segmentation"):
        vt.solve_eikonal(mask, (2.0, 1.0, 1.0))


def test_eikonal_speed_shape_check():
    mask = tube_mask()
    with pytest.raises(ValueError, match="speed shape"):
        vt.solve_eikonal(mask, (2.0, 8.0, 8.0), speed=np.ones((3, 3, 3)))


def test_backtrace_requires_finite_target():
    mask = tube_mask()
    T = vt.solve_eikonal(mask, (2.0, 8.0, 8.0))
    with pytest.raises(BacktraceFailure):
        vt.backtrace_path(T, (0.0, 0.0, 0.0), (2.0, 8.0, 8.0))


def test_extract_centerline_straight_tube():
    mask = tube_mask(radius=4.0)
    paths = vt.extract_local_centerlines(mask, prev_point=(-5.0, 8.0, 8.0))
    assert len(paths) == 1
    path = paths[0]
    assert path.source_cap.face == "-x" and path.target_cap.face == "+x"
    # runs source -> target
    assert path.points[0, 0] < path.points[-1, 0]
    # interior radii estimate the true tube radius closely (the interior
    # distance transform ignores the crop faces, so no sag near the ends)
    n = len(path.points)
    interior = slice(n // 5, -(n // 5)) if n >= 10 else slice(None)
    radii = path.radii[interior]
    assert radii.std() / radii.mean() < 0.10
    # lateral deviation from the true axis stays subvoxel
    lateral = np.linalg.norm(path.points[interior][:, 1:] - 8.0, axis=1)
    assert lateral.max() < 1.0


def test_extract_centerline_y_junction():
    mask = y_mask()
    paths = vt.extract_local_centerlines(mask, prev_point=(-5.0, 23.5, 8.0))
    assert len(paths) == 2
    ends = sorted(p.points[-1, 1] for p in paths)
    assert ends[0] < 20.0 and ends[1] > 27.0  # one limb up, one limb down


def test_extract_centerline_single_cap_is_dead_end():
    # tube entering the volume but ending inside: only the source cap exists
    mask = tube_mask()
    data = mask.data.copy()
    data[30:] = 0.0
    capped = mask.with_data(data, kind="binary")
    paths = vt.extract_local_centerlines(capped, prev_point=(-5.0, 8.0, 8.0))
    assert paths == []


def test_extract_centerline_no_caps():
    data = np.zeros((12, 12, 12), dtype=np.float32)
    data[4:8, 4:8, 4:8] = 1.0
    blob = vt.Volume3D(data=data, spacing=(1, 1, 1), kind="binary")
    with pytest.raises(CenterlineExtractionFailure, match="no caps"):
        vt.extract_local_centerlines(blob, (0, 0, 0))


def test_centerline_json_round_trip(tmp_path):
    mask = tube_mask()
    paths = vt.extract_local_centerlines(mask, prev_point=(-5.0, 8.0, 8.0))
    out = str(tmp_path / "ct.json")
    vt.save_centerlines(paths, out, parents=[None])
    back = vt.load_centerlines(out)
    assert len(back) == len(paths)
    assert np.allclose(back[0].points, paths[0].points)
    assert np.allclose(back[0].radii, paths[0].radii)
    assert back[0].source_cap.face == "-x"
    assert back[0].target_cap.face == "+x"
