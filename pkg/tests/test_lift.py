"""Backprojection, crop planning, and edited-image lifting.

Backprojection expectations are hand-computed from the pinhole model:
    point = depth * ((u - cx)/fx, (v - cy)/fy, 1)
Reprojection is the test-side inverse: u = fx*x/z + cx, v = fy*y/z + cy.
"""

import numpy as np
import pytest

from editlift.core import CameraIntrinsics, Label, Mask
from editlift.errors import (
    AllDepthInvalid,
    DepthSourceFailure,
    DimensionMismatch,
    EmptyMask,
)
from editlift.lift import (
    ConstantDepthSource,
    DepthMap,
    FixedDepthSource,
    ImageFrame,
    MockDepthSource,
    backproject,
    build_source_canvas,
    lift_edited,
    plan_crop,
)


def _rasters(h, w, depth_value=1.0, d=8):
    depth = DepthMap.from_raster(np.full((h, w), depth_value))
    rgb = ImageFrame.from_raster(np.zeros((h, w, 3), dtype=np.uint8))
    feats = np.ones((h, w, d), dtype=np.float32)
    masks = {
        "active": Mask.from_bits(np.zeros((h, w), dtype=bool)),
        "passive": Mask.from_bits(np.zeros((h, w), dtype=bool)),
    }
    return depth, rgb, feats, masks


class TestBackproject:
    def test_principal_point_ray(self):
        # Pixel at (cx, cy) with depth 1.0 -> (0, 0, 1)
        h, w = 16, 16
        intr = CameraIntrinsics(fx=100.0, fy=100.0, cx=8.0, cy=8.0, width=w, height=h)
        depth, rgb, feats, masks = _rasters(h, w)
        cloud = backproject(depth, intr, rgb, feats, masks)
        at = np.nonzero((cloud.pixel_index == [8, 8]).all(axis=1))[0][0]
        assert np.allclose(cloud.points[at], [0.0, 0.0, 1.0])

    def test_hand_computed_pinhole(self):
        # fx=fy=500, cx=320, cy=240, pixel (u=820, v=240), depth 2.0
        # -> x = 2*(820-320)/500 = 2.0, y = 0, z = 2.0
        h, w = 480, 1024
        intr = CameraIntrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=w, height=h)
        raster = np.full((h, w), np.nan)
        raster[240, 820] = 2.0
        depth = DepthMap.from_raster(raster)
        rgb = ImageFrame.from_raster(np.zeros((h, w, 3), dtype=np.uint8))
        feats = np.ones((h, w, 4), dtype=np.float32)
        masks = {
            "active": Mask.from_bits(np.zeros((h, w), dtype=bool)),
            "passive": Mask.from_bits(np.zeros((h, w), dtype=bool)),
        }
        cloud = backproject(depth, intr, rgb, feats, masks)
        assert len(cloud) == 1
        assert np.allclose(cloud.points[0], [2.0, 0.0, 2.0])
        assert tuple(cloud.pixel_index[0]) == (240, 820)

    def test_reprojection_round_trip(self):
        # Pixel alignment: reprojecting points lands within 0.5 px of
        # pixel_index (here: to fp precision).
        rng = np.random.default_rng(0)
        h, w = 32, 48
        intr = CameraIntrinsics(fx=80.0, fy=64.0, cx=24.0, cy=16.0, width=w, height=h)
        depth = DepthMap.from_raster(rng.uniform(0.5, 2.0, size=(h, w)))
        rgb = ImageFrame.from_raster(np.zeros((h, w, 3), dtype=np.uint8))
        feats = np.ones((h, w, 4), dtype=np.float32)
        masks = {
            "active": Mask.from_bits(np.zeros((h, w), dtype=bool)),
            "passive": Mask.from_bits(np.zeros((h, w), dtype=bool)),
        }
        cloud = backproject(depth, intr, rgb, feats, masks)
        u = intr.fx * cloud.points[:, 0] / cloud.points[:, 2] + intr.cx
        v = intr.fy * cloud.points[:, 1] / cloud.points[:, 2] + intr.cy
        assert np.abs(u - cloud.pixel_index[:, 1]).max() < 1e-6
        assert np.abs(v - cloud.pixel_index[:, 0]).max() < 1e-6

    def test_label_counts_match_masks_on_valid_depth(self):
        rng = np.random.default_rng(1)
        h, w = 24, 24
        intr = CameraIntrinsics(fx=50.0, fy=50.0, cx=12.0, cy=12.0, width=w, height=h)
        raster = rng.uniform(0.5, 1.5, size=(h, w))
        raster[rng.random((h, w)) < 0.3] = np.nan
        depth = DepthMap.from_raster(raster)
        rgb = ImageFrame.from_raster(np.zeros((h, w, 3), dtype=np.uint8))
        feats = np.ones((h, w, 4), dtype=np.float32)
        a_bits = np.zeros((h, w), dtype=bool)
        a_bits[2:8, 3:9] = True
        p_bits = np.zeros((h, w), dtype=bool)
        p_bits[12:20, 10:18] = True
        masks = {"active": Mask.from_bits(a_bits), "passive": Mask.from_bits(p_bits)}
        cloud = backproject(depth, intr, rgb, feats, masks)
        valid = depth.valid_mask()
        assert (cloud.labels == int(Label.ACTIVE)).sum() == (a_bits & valid).sum()
        assert (cloud.labels == int(Label.PASSIVE)).sum() == (p_bits & valid).sum()

    def test_overlap_resolves_active_with_warning(self):
        h, w = 8, 8
        intr = CameraIntrinsics(fx=10.0, fy=10.0, cx=4.0, cy=4.0, width=w, height=h)
        depth, rgb, feats, _ = _rasters(h, w)
        both = np.zeros((h, w), dtype=bool)
        both[4, 4] = True
        masks = {"active": Mask.from_bits(both), "passive": Mask.from_bits(both)}
        with pytest.warns(RuntimeWarning, match="both masks"):
            cloud = backproject(depth, intr, rgb, feats, masks)
        at = np.nonzero((cloud.pixel_index == [4, 4]).all(axis=1))[0][0]
        assert cloud.labels[at] == int(Label.ACTIVE)

    def test_dimension_mismatch(self):
        h, w = 8, 8
        intr = CameraIntrinsics(fx=10.0, fy=10.0, cx=4.0, cy=4.0, width=w, height=h)
        depth, rgb, feats, masks = _rasters(h, w)
        bad_feats = np.ones((h, w + 1, 4), dtype=np.float32)
        with pytest.raises(DimensionMismatch):
            backproject(depth, intr, rgb, bad_feats, masks)

    def test_all_depth_invalid(self):
        h, w = 8, 8
        intr = CameraIntrinsics(fx=10.0, fy=10.0, cx=4.0, cy=4.0, width=w, height=h)
        depth = DepthMap.from_raster(np.full((h, w), np.nan))
        rgb = ImageFrame.from_raster(np.zeros((h, w, 3), dtype=np.uint8))
        feats = np.ones((h, w, 4), dtype=np.float32)
        masks = {
            "active": Mask.from_bits(np.zeros((h, w), dtype=bool)),
            "passive": Mask.from_bits(np.zeros((h, w), dtype=bool)),
        }
        with pytest.raises(AllDepthInvalid):
            backproject(depth, intr, rgb, feats, masks)


class TestPlanCrop:
    def test_full_frame_mask_native_equals_frame(self):
        bits = np.ones((64, 64), dtype=bool)
        plan = plan_crop(Mask.from_bits(bits), 64, 64, margin=0)
        assert plan.source_box == (0, 0, 64, 64)
        assert plan.mode == "pad"
        assert plan.scale_x == plan.scale_y == 1.0
        assert (plan.offset_x, plan.offset_y) == (0, 0)

    def test_small_box_fits_native(self):
        bits = np.zeros((600, 600), dtype=bool)
        bits[100:200, 150:250] = True  # 100x100 box
        plan = plan_crop(Mask.from_bits(bits), 518, 518, margin=0)
        assert plan.mode == "pad"
        assert plan.scale_x == 1.0
        assert plan.box_width == 100 and plan.box_height == 100

    def test_wide_box_resizes_with_vertical_letterbox(self):
        # 1000x400 box into 518x518: scale = 518/1000 = 0.518 on both axes,
        # scaled height 207 < 518 leaves vertical letterbox bands.
        bits = np.zeros((500, 1200), dtype=bool)
        bits[50:450, 100:1100] = True
        plan = plan_crop(Mask.from_bits(bits), 518, 518, margin=0)
        assert plan.mode == "resize"
        assert plan.scale_x == pytest.approx(0.518)
        assert plan.scale_y == pytest.approx(0.518)
        assert plan.scaled_width == 518
        assert plan.scaled_height == round(400 * 0.518)
        assert plan.offset_y > 0 and plan.offset_x == 0

    def test_margin_expands_and_clamps(self):
        bits = np.zeros((64, 64), dtype=bool)
        bits[0:4, 0:4] = True
        plan = plan_crop(Mask.from_bits(bits), 128, 128, margin=8)
        assert plan.source_box == (0, 0, 12, 12)

    def test_empty_mask(self):
        with pytest.raises(EmptyMask):
            plan_crop(Mask.from_bits(np.zeros((8, 8), dtype=bool)), 64, 64)


def _edit_setup(h=64, w=64, d=6):
    rng = np.random.default_rng(7)
    rgb = ImageFrame.from_raster(rng.integers(0, 255, size=(h, w, 3), dtype=np.uint8))
    feats = rng.normal(size=(h, w, d)).astype(np.float32)
    a_bits = np.zeros((h, w), dtype=bool)
    a_bits[10:22, 8:24] = True
    p_bits = np.zeros((h, w), dtype=bool)
    p_bits[30:50, 28:52] = True
    masks = {"active": Mask.from_bits(a_bits), "passive": Mask.from_bits(p_bits)}
    intr = CameraIntrinsics(fx=80.0, fy=80.0, cx=w / 2, cy=h / 2, width=w, height=h)
    return rgb, feats, masks, intr


class TestLiftEdited:
    def test_pad_mode_is_lossless(self):
        # A source returning ground-truth canvas depth must reproduce the
        # direct backprojection of that depth exactly.
        rgb, feats, masks, intr = _edit_setup()
        union = masks["active"].union(masks["passive"])
        plan = plan_crop(union, 128, 128)
        assert plan.mode == "pad"

        rng = np.random.default_rng(8)
        full_gt = rng.uniform(0.6, 0.9, size=(64, 64))
        x0, y0, x1, y1 = plan.source_box
        canvas = np.full((128, 128), np.nan)
        canvas[
            plan.offset_y : plan.offset_y + plan.box_height,
            plan.offset_x : plan.offset_x + plan.box_width,
        ] = full_gt[y0:y1, x0:x1]
        src = FixedDepthSource(DepthMap.from_raster(canvas))

        cloud = lift_edited(rgb, masks, src, intr, feats)

        restricted = np.where(union.bits, full_gt, np.nan)
        direct = backproject(DepthMap.from_raster(restricted), intr, rgb, feats, masks)
        assert np.array_equal(cloud.points, direct.points)
        assert np.array_equal(cloud.pixel_index, direct.pixel_index)
        assert np.array_equal(cloud.labels, direct.labels)

    def test_resize_mode_constant_plane(self):
        # Constant depth fields are interpolation-invariant: every lifted
        # point sits on the plane regardless of the resize.
        rgb, feats, masks, intr = _edit_setup()
        src = ConstantDepthSource(0.75, native_resolution=(24, 24))
        union = masks["active"].union(masks["passive"])
        plan = plan_crop(union, 24, 24)
        assert plan.mode == "resize"
        cloud = lift_edited(rgb, masks, src, intr, feats)
        assert len(cloud) > 0
        assert np.abs(cloud.points[:, 2] - 0.75).max() < 1e-6

    def test_pixel_indices_in_original_coordinates(self):
        rgb, feats, masks, intr = _edit_setup()
        src = ConstantDepthSource(0.8, native_resolution=(24, 24))
        cloud = lift_edited(rgb, masks, src, intr, feats)
        union = masks["active"].union(masks["passive"])
        assert union.bits[cloud.pixel_index[:, 0], cloud.pixel_index[:, 1]].all()

    def test_discontinuity_rejection(self):
        # A step edge in native depth larger than 5 cm must not be averaged
        # into intermediate values.
        rgb, feats, masks, intr = _edit_setup()
        native = np.full((24, 24), 0.6)
        native[:, 12:] = 1.0  # 40 cm step
        src = FixedDepthSource(DepthMap.from_raster(native))
        cloud = lift_edited(rgb, masks, src, intr, feats)
        z = cloud.points[:, 2]
        near = np.abs(z - 0.6) < 0.06
        far = np.abs(z - 1.0) < 0.06
        assert (near | far).all(), "interpolated depths crossed the step edge"

    def test_depth_source_failure_on_wrong_resolution(self):
        rgb, feats, masks, intr = _edit_setup()

        class LyingSource:
            native_resolution = (24, 24)

            def __call__(self, image):
                return DepthMap.from_raster(np.full((10, 10), 1.0))

        with pytest.raises(DepthSourceFailure):
            lift_edited(rgb, masks, LyingSource(), intr, feats)

    def test_depth_source_exception_is_wrapped(self):
        rgb, feats, masks, intr = _edit_setup()

        class BrokenSource:
            native_resolution = (24, 24)

            def __call__(self, image):
                raise RuntimeError("weights not loaded")

        with pytest.raises(DepthSourceFailure):
            lift_edited(rgb, masks, BrokenSource(), intr, feats)

    def test_lift_error_bounded_by_source_error(self):
        # With a noisy resize-mode source, the upsampled-lifted depth error
        # stays below 2x the source's own error on the cropped grid.
        rng = np.random.default_rng(9)
        h = w = 64
        rgb, feats, masks, intr = _edit_setup(h, w)
        union = masks["active"].union(masks["passive"])
        native_res = 24
        plan = plan_crop(union, native_res, native_res)
        assert plan.mode == "resize"

        gt_full = 0.7 + 0.05 * np.sin(np.arange(w) / 9.0)[None, :] * np.ones((h, 1))
        x0, y0, x1, y1 = plan.source_box
        xs = np.clip((np.arange(plan.scaled_width) + 0.5) / plan.scale_x - 0.5 + x0, 0, w - 1)
        ys = np.clip((np.arange(plan.scaled_height) + 0.5) / plan.scale_y - 0.5 + y0, 0, h - 1)
        ideal_canvas = gt_full[np.ix_(np.rint(ys).astype(int), np.rint(xs).astype(int))]
        sigma = 0.003
        noisy = ideal_canvas + rng.normal(scale=sigma, size=ideal_canvas.shape)
        canvas = np.full((native_res, native_res), np.nan)
        canvas[
            plan.offset_y : plan.offset_y + plan.scaled_height,
            plan.offset_x : plan.offset_x + plan.scaled_width,
        ] = noisy
        source_err = np.abs(noisy - ideal_canvas).mean()

        cloud = lift_edited(rgb, masks, FixedDepthSource(DepthMap.from_raster(canvas)), intr, feats)
        gt_at_pixels = gt_full[cloud.pixel_index[:, 0], cloud.pixel_index[:, 1]]
        lift_err = np.abs(cloud.points[:, 2] - gt_at_pixels).mean()
        assert lift_err < 2.0 * source_err

    def test_mock_source_is_seeded_deterministic(self):
        a = MockDepthSource(seed=3)
        b = MockDepthSource(seed=3)
        img = ImageFrame.from_raster(np.zeros((8, 8, 3), dtype=np.uint8))
        assert np.array_equal(a(img).depth, b(img).depth)
        c = MockDepthSource(seed=4)
        assert not np.array_equal(a(img).depth, c(img).depth)

    def test_canvas_build_matches_plan(self):
        rgb, feats, masks, intr = _edit_setup()
        union = masks["active"].union(masks["passive"])
        plan = plan_crop(union, 128, 128)
        canvas = build_source_canvas(rgb, plan)
        assert (canvas.width, canvas.height) == (128, 128)
        x0, y0, _, _ = plan.source_box
        assert np.array_equal(
            canvas.rgb[plan.offset_y, plan.offset_x], rgb.rgb[y0, x0]
        )
