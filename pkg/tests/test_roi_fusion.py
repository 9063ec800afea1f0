from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vision_inspect.cylinder_fit import CulvertModel
from vision_inspect.errors import EmptyBox, NoValidDepth
from vision_inspect.geometry import DEFAULT_INTRINSICS, RigConfig
from vision_inspect.roi_fusion import (
    DepthImage,
    EnrichedRoi,
    PixelRect,
    RoiProposal,
    box_to_pixels,
    enrich,
    load_depth,
    local_point_cloud,
    sample_depth_stats,
    save_depth,
)
from vision_inspect.simulator import Defect, SceneConfig, defect_center, defect_to_roi, render_depth

K = DEFAULT_INTRINSICS
RIG = RigConfig()
MODEL = CulvertModel(0.6)


def const_depth(value=2.0, w=640, h=480):
    return DepthImage(np.full((h, w), value))


# --- proposals ----------------------------------------------------------------


@pytest.mark.parametrize(
    "box",
    [(0.5, 0.2, 0.4, 0.3), (0.1, 0.3, 0.2, 0.3), (-0.1, 0, 0.5, 0.5), (0, 0, 1.2, 1), (0, 0, math.nan, 1)],
)
def test_invalid_boxes_rejected(box):
    with pytest.raises(ValueError):
        RoiProposal(box, "x", 0.5)


def test_confidence_bounds():
    with pytest.raises(ValueError):
        RoiProposal((0, 0, 1, 1), "x", 1.5)


def test_proposal_dict_round_trip():
    p = RoiProposal((0.1, 0.2, 0.3, 0.4), "crack-like line", 0.25)
    assert RoiProposal.from_dict(p.to_dict()) == p


# --- box_to_pixels ------------------------------------------------------------


def test_full_frame_box():
    assert box_to_pixels((0, 0, 1, 1), K).as_tuple() == (0, 0, 639, 479)


def test_box_scaling_with_clamp():
    assert box_to_pixels((0.25, 0.5, 0.75, 1.0), K).as_tuple() == (160, 240, 480, 479)


def test_round_half_up():
    # 0.5 px lands on the upper integer
    rect = box_to_pixels((100.5 / 640, 10.5 / 480, 200.5 / 640, 20.5 / 480), K)
    assert rect.as_tuple() == (101, 11, 201, 21)


def test_degenerate_box_is_empty():
    with pytest.raises(EmptyBox):
        box_to_pixels((0.5, 0.5, 0.5, 0.6), K)
    with pytest.raises(EmptyBox):
        box_to_pixels((0.5, 0.5, 0.5005, 0.6), K)


# --- depth statistics -----------------------------------------------------------


def test_uniform_depth_stats():
    assert sample_depth_stats(const_depth(2.0), PixelRect(10, 10, 50, 40)) == (2.0, 2.0, 2.0, 1.0)


def test_half_invalid_stats():
    vals = np.full((480, 640), 3.0)
    vals[:, :320] = np.nan
    assert sample_depth_stats(DepthImage(vals), PixelRect(300, 0, 339, 9)) == (3.0, 3.0, 3.0, 0.5)


def test_lower_middle_median():
    vals = np.full((4, 4), np.nan)
    vals[0, :4] = [4.0, 1.0, 3.0, 2.0]
    med, lo, hi, frac = sample_depth_stats(DepthImage(vals), PixelRect(0, 0, 3, 0))
    assert (med, lo, hi, frac) == (2.0, 1.0, 4.0, 1.0)


def test_nonpositive_values_are_invalid():
    vals = np.array([[0.0, -1.0], [2.0, np.inf]])
    assert sample_depth_stats(DepthImage(vals), PixelRect(0, 0, 1, 1)) == (2.0, 2.0, 2.0, 0.25)


def test_all_invalid_raises():
    with pytest.raises(NoValidDepth):
        sample_depth_stats(DepthImage(np.full((5, 5), np.nan)), PixelRect(0, 0, 4, 4))


@given(st.lists(st.floats(0.01, 100.0), min_size=1, max_size=40))
def test_stats_match_sort_oracle(values):
    vals = np.array(values)[None, :]
    med, lo, hi, frac = sample_depth_stats(DepthImage(vals), PixelRect(0, 0, len(values) - 1, 0))
    ordered = sorted(values)
    assert med == ordered[(len(ordered) - 1) // 2]
    assert (lo, hi, frac) == (ordered[0], ordered[-1], 1.0)
    assert lo <= med <= hi


# --- enrich -------------------------------------------------------------------


def rendered_defect(angle_deg, x, sigma=0.0, invalid=0.0):
    scene = SceneConfig(defects=(Defect(math.radians(angle_deg), x),), depth_noise_sigma=sigma, invalid_fraction=invalid)
    pose = RIG.camera1_at(0.0)
    frame = render_depth(scene, pose, K)
    return scene, frame, defect_to_roi(scene, 0, pose, K)


def test_invert_defect_three_meters_ahead():
    cam_x = RIG.T_SC1.translation[0]
    scene, frame, prop = rendered_defect(-90, 3.0 + cam_x)
    roi = enrich(prop, frame.depth, K, RIG, MODEL)
    # one row of pixels spans about d^2 / (f h) along the floor at this range
    footprint = (3.0**2 + 0.55**2) / (K.fy * 0.55)
    assert abs(roi.center_ccf[0] - (3.0 + cam_x)) < footprint
    assert abs(roi.center_ccf[1]) < 3.0 / K.fx
    assert roi.center_ccf[2] == pytest.approx(-0.6, abs=1e-9)
    np.testing.assert_allclose(roi.normal_ccf, [0, 0, 1], atol=1e-6)


def test_full_frame_constant_depth():
    roi = enrich(RoiProposal((0, 0, 1, 1), "all", 1.0), const_depth(0.4), K, RIG, MODEL)
    assert roi.valid_fraction == 1.0
    assert np.hypot(roi.center_ccf[1], roi.center_ccf[2]) == pytest.approx(0.6, abs=1e-9)
    assert roi.depth_min == roi.depth_median == roi.depth_max == 0.4


def test_all_invalid_region():
    vals = np.full((480, 640), 2.0)
    vals[100:200, 100:200] = np.nan
    with pytest.raises(NoValidDepth):
        enrich(RoiProposal((110 / 640, 110 / 480, 180 / 640, 180 / 480)), DepthImage(vals), K, RIG, MODEL)


def test_sparse_depth_below_min_fraction():
    vals = np.full((480, 640), np.nan)
    vals[0, 0] = 2.0
    with pytest.raises(NoValidDepth):
        enrich(RoiProposal((0, 0, 0.1, 0.1)), DepthImage(vals), K, RIG, MODEL)


def test_mismatched_depth_size():
    with pytest.raises(ValueError):
        enrich(RoiProposal((0, 0, 1, 1)), const_depth(1.0, 320, 240), K, RIG, MODEL)


def _frame_for_properties():
    _, frame, _ = rendered_defect(-90, 3.0, sigma=0.005, invalid=0.2)
    return frame


FRAME = _frame_for_properties()
box_coord = st.floats(0.0, 1.0)


@given(box_coord, box_coord, st.floats(0.02, 1.0), st.floats(0.02, 1.0))
def test_enrich_invariants(x0, y0, w, h):
    box = (x0, y0, min(x0 + w, 1.0), min(y0 + h, 1.0))
    if box[2] - box[0] < 0.02 or box[3] - box[1] < 0.02:
        return
    try:
        roi = enrich(RoiProposal(box, "p", 0.5), FRAME.depth, K, RIG, MODEL)
    except NoValidDepth:
        return
    assert len(roi.vertices_ccf) == 8
    rho = np.hypot(roi.vertices_ccf[:, 1], roi.vertices_ccf[:, 2])
    assert np.all(np.abs(rho - 0.6) < 1e-6)
    xs = roi.vertices_ccf[:, 0]
    assert xs.min() <= roi.center_ccf[0] <= xs.max()
    assert roi.depth_min <= roi.depth_median <= roi.depth_max
    assert 0.0 <= roi.valid_fraction <= 1.0
    assert abs(np.linalg.norm(roi.normal_ccf) - 1.0) < 1e-9


def test_enrich_deterministic():
    prop = RoiProposal((0.4, 0.6, 0.6, 0.8), "p", 0.5)
    a = enrich(prop, FRAME.depth, K, RIG, MODEL)
    b = enrich(prop, FRAME.depth, K, RIG, MODEL)
    assert a == b
    np.testing.assert_array_equal(a.vertices_ccf, b.vertices_ccf)


def test_enriched_roi_dict_round_trip():
    roi = enrich(RoiProposal((0.4, 0.6, 0.6, 0.8), "p", 0.5), FRAME.depth, K, RIG, MODEL, image_ref="q.depth")
    back = EnrichedRoi.from_dict(roi.to_dict())
    assert back == roi
    assert back.to_dict()["depth"]["spread"] == roi.depth_max - roi.depth_min


def test_mirror_reflects_geometry():
    roi = enrich(RoiProposal((0.1, 0.6, 0.3, 0.8), "p", 0.5), FRAME.depth, K, RIG, MODEL)
    m = roi.mirrored_y()
    np.testing.assert_array_equal(m.vertices_ccf[:, 1], -roi.vertices_ccf[:, 1])
    np.testing.assert_array_equal(m.center_ccf[[0, 2]], roi.center_ccf[[0, 2]])


def test_local_point_cloud_lies_near_wall():
    cloud = local_point_cloud(FRAME.depth, K, RIG)
    assert len(cloud) == 5000
    rho = np.hypot(cloud[:, 1], cloud[:, 2])
    assert np.median(np.abs(rho - 0.6)) < 0.01


def test_rendered_defect_center_reference():
    scene, frame, prop = rendered_defect(-90, 3.25)
    np.testing.assert_allclose(defect_center(scene, scene.defects[0]), [3.25, 0, -0.6], atol=1e-12)


# --- depth I/O ------------------------------------------------------------------


@pytest.mark.parametrize("name", ["d.depth", "d.tif", "d.TIFF"])
def test_depth_round_trip(tmp_path, name):
    vals = np.random.default_rng(0).uniform(0.5, 3.0, (6, 9))
    vals[1, 2] = np.nan
    save_depth(tmp_path / name, DepthImage(vals))
    back = load_depth(tmp_path / name).values
    assert back.shape == (6, 9)
    assert np.isnan(back[1, 2])
    np.testing.assert_allclose(np.nan_to_num(back), np.nan_to_num(vals.astype(np.float32)), atol=0)


def test_raw_depth_layout(tmp_path):
    path = tmp_path / "raw.depth"
    path.write_bytes(
        np.array([3, 2], dtype="<u4").tobytes() + np.arange(6, dtype="<f4").tobytes()
    )
    np.testing.assert_array_equal(load_depth(path).values, [[0, 1, 2], [3, 4, 5]])


def test_raw_depth_truncated(tmp_path):
    path = tmp_path / "bad.depth"
    path.write_bytes(np.array([3, 2], dtype="<u4").tobytes() + b"\0\0\0\0")
    with pytest.raises(ValueError):
        load_depth(path)
    path.write_bytes(b"\1")
    with pytest.raises(ValueError):
        load_depth(path)
