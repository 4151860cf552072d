"""Similarity solve and the relative/world transform chain.

Expected values come from generating parameters (the construction is the
oracle), from closed-form identities, or from direct perturbation checks,
never from the code under test.
"""

import numpy as np
import pytest

from editlift.core import (
    FeatureCloud,
    Label,
    RigidTransform,
    SimilarityTransform,
    rot_z,
    rotation_angle,
)
from editlift.correspond import CorrespondenceSet
from editlift.errors import (
    DegenerateGeometry,
    ScaleMismatch,
    TooFewPoints,
    UnifiedScaleNonPositive,
)
from editlift.registration import (
    fixed_scale_align,
    jacobi_svd3,
    register_pair,
    relative_transform,
    to_world,
    umeyama,
)


def _random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


class TestJacobiSVD:
    def test_matches_lapack_singular_values(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            a = rng.normal(size=(3, 3))
            u, s, vt = jacobi_svd3(a)
            s_ref = np.linalg.svd(a, compute_uv=False)
            assert np.abs(s - s_ref).max() < 1e-12 * max(1.0, s_ref[0])
            assert np.abs(u @ np.diag(s) @ vt - a).max() < 1e-12 * max(1.0, s_ref[0])
            assert np.abs(u @ u.T - np.eye(3)).max() < 1e-12
            assert np.abs(vt @ vt.T - np.eye(3)).max() < 1e-12

    def test_rank_deficient(self):
        rng = np.random.default_rng(1)
        col = rng.normal(size=3)
        a = np.outer(col, [1.0, 2.0, 3.0])  # rank 1
        u, s, vt = jacobi_svd3(a)
        assert s[1] < 1e-12 * s[0]
        assert np.abs(u @ np.diag(s) @ vt - a).max() < 1e-12 * s[0]
        assert np.abs(u @ u.T - np.eye(3)).max() < 1e-9


class TestUmeyama:
    def test_identity(self):
        rng = np.random.default_rng(2)
        pts = rng.normal(size=(50, 3))
        t = umeyama(pts, pts)
        assert abs(t.scale - 1.0) < 1e-12
        assert np.abs(t.rotation - np.eye(3)).max() < 1e-12
        assert np.abs(t.translation).max() < 1e-12

    def test_known_parameters(self):
        # 100 random points mapped by s=1.3, Rz(30 deg), t=(0.1,-0.2,0.05)
        rng = np.random.default_rng(3)
        src = rng.normal(size=(100, 3))
        r = rot_z(np.radians(30))
        t_true = np.array([0.1, -0.2, 0.05])
        dst = 1.3 * (src @ r.T) + t_true
        est = umeyama(src, dst)
        assert abs(est.scale - 1.3) < 1e-9
        assert np.abs(est.rotation - r).max() < 1e-9
        assert np.abs(est.translation - t_true).max() < 1e-9

    def test_collinear_raises(self):
        src = np.array([[0, 0, 0], [1, 1, 1], [2, 2, 2]], dtype=float)
        with pytest.raises(DegenerateGeometry):
            umeyama(src, src + 1.0)

    def test_too_few_points(self):
        with pytest.raises(TooFewPoints):
            umeyama(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_planar_input_is_fine(self):
        rng = np.random.default_rng(4)
        src = rng.normal(size=(60, 3))
        src[:, 2] = 0.0  # rank-2 spread
        r = _random_rotation(rng)
        dst = 0.8 * (src @ r.T) + [0.2, 0.0, -0.1]
        est = umeyama(src, dst)
        assert abs(est.scale - 0.8) < 1e-9
        assert np.abs(est.rotation @ src.T - (dst - est.translation).T / est.scale).max() < 1e-8

    def test_reflected_data_still_returns_proper_rotation(self):
        rng = np.random.default_rng(5)
        src = rng.normal(size=(40, 3))
        dst = src @ np.diag([1.0, 1.0, -1.0])  # a reflection, not a rotation
        est = umeyama(src, dst)
        assert np.linalg.det(est.rotation) == pytest.approx(1.0, abs=1e-9)

    def test_residual_optimality_under_perturbation(self):
        # No random nudge of (s, R, t) may lower the sum of squares.
        rng = np.random.default_rng(6)
        src = rng.normal(size=(80, 3))
        dst = 1.2 * (src @ _random_rotation(rng).T) + [0.1, 0.3, -0.2]
        dst += rng.normal(scale=0.01, size=dst.shape)
        est = umeyama(src, dst)

        def resid(s, r, t):
            e = s * (src @ r.T) + t - dst
            return (e * e).sum()

        base = resid(est.scale, est.rotation, est.translation)
        for _ in range(100):
            ds = 1.0 + rng.normal(scale=1e-4)
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            ang = rng.normal(scale=1e-4)
            k = np.array(
                [[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]]
            )
            dr = np.eye(3) + np.sin(ang) * k + (1 - np.cos(ang)) * (k @ k)
            dt = rng.normal(scale=1e-5, size=3)
            perturbed = resid(est.scale * ds, dr @ est.rotation, est.translation + dt)
            assert perturbed >= base - 1e-12


class TestFixedScaleAlign:
    def test_matches_umeyama_at_optimal_scale(self):
        rng = np.random.default_rng(7)
        src = rng.normal(size=(50, 3))
        dst = 1.4 * (src @ _random_rotation(rng).T) + [0.3, 0.1, 0.2]
        est = umeyama(src, dst)
        r, t = fixed_scale_align(src, dst, est.scale)
        assert np.abs(r - est.rotation).max() < 1e-12
        assert np.abs(t - est.translation).max() < 1e-12

    def test_unit_scale_pure_translation(self):
        rng = np.random.default_rng(8)
        src = rng.normal(size=(30, 3))
        dst = src + [0.5, -0.25, 0.75]
        r, t = fixed_scale_align(src, dst, 1.0)
        assert np.abs(r - np.eye(3)).max() < 1e-9
        assert np.allclose(t, [0.5, -0.25, 0.75])

    def test_forced_double_scale_shifts_translation_analytically(self):
        # With s forced to 2x the true scale on a rigid pair, R is unchanged
        # and t moves by (s_true - s) * R @ mean(src); confirmed against a
        # direct least-squares grid refinement around the analytic optimum.
        rng = np.random.default_rng(9)
        src = rng.normal(size=(60, 3)) + [1.0, 2.0, 0.5]
        r_true = _random_rotation(rng)
        t_true = np.array([0.1, 0.2, 0.3])
        dst = src @ r_true.T + t_true  # s_true = 1
        forced = 2.0
        r, t = fixed_scale_align(src, dst, forced)
        assert np.abs(r - r_true).max() < 1e-9
        expected_t = t_true + (1.0 - forced) * (r_true @ src.mean(axis=0))
        assert np.abs(t - expected_t).max() < 1e-9

        def resid(tv):
            e = forced * (src @ r.T) + tv - dst
            return (e * e).sum()

        base = resid(t)
        for delta in np.linspace(-1e-3, 1e-3, 9):
            for axis in range(3):
                tv = t.copy()
                tv[axis] += delta
                assert resid(tv) >= base - 1e-12


class TestRelativeAndWorld:
    def test_equal_transforms_collapse_to_identity(self):
        rng = np.random.default_rng(10)
        sim = SimilarityTransform(1.7, _random_rotation(rng), rng.normal(size=3))
        rel = relative_transform(sim, sim)
        assert np.abs(rel.rotation - np.eye(3)).max() < 1e-12
        assert np.abs(rel.translation).max() < 1e-12

    def test_passive_at_origin_frame(self):
        rng = np.random.default_rng(11)
        r_a = _random_rotation(rng)
        t_a = rng.normal(size=3)
        t_p = rng.normal(size=3)
        passive = SimilarityTransform(1.0, np.eye(3), t_p)
        active = SimilarityTransform(1.0, r_a, t_a)
        rel = relative_transform(passive, active)
        assert np.abs(rel.rotation - r_a).max() < 1e-12
        assert np.abs(rel.translation - (t_a - t_p)).max() < 1e-12

    def test_scale_mismatch_raises(self):
        a = SimilarityTransform(1.0, np.eye(3), np.zeros(3))
        b = SimilarityTransform(1.5, np.eye(3), np.zeros(3))
        with pytest.raises(ScaleMismatch):
            relative_transform(a, b)

    def test_to_world_identity_camera(self):
        rng = np.random.default_rng(12)
        rel = RigidTransform(_random_rotation(rng), rng.normal(size=3))
        out = to_world(rel, RigidTransform.identity())
        assert np.abs(out.rotation - rel.rotation).max() < 1e-12
        assert np.abs(out.translation - rel.translation).max() < 1e-12

    def test_identity_motion_conjugates_to_identity(self):
        rng = np.random.default_rng(13)
        for _ in range(10):
            o2w = RigidTransform(_random_rotation(rng), rng.normal(size=3))
            out = to_world(RigidTransform.identity(), o2w)
            assert np.abs(out.rotation - np.eye(3)).max() < 1e-12
            assert np.abs(out.translation).max() < 1e-12

    def test_world_transform_moves_points_consistently(self):
        # Applying T_world to o2w-mapped points equals o2w-mapping the
        # rel-transformed points.
        rng = np.random.default_rng(14)
        for _ in range(20):
            rel = RigidTransform(_random_rotation(rng), rng.normal(size=3))
            o2w = RigidTransform(_random_rotation(rng), rng.normal(size=3))
            pts_obs = rng.normal(size=(40, 3))
            t_w = to_world(rel, o2w)
            left = t_w.apply(o2w.apply(pts_obs))
            right = o2w.apply(rel.apply(pts_obs))
            assert np.abs(left - right).max() < 1e-9


def _make_cloud(points, features, labels, h=64, w=64):
    n = len(points)
    pix = np.stack([np.arange(n) // w, np.arange(n) % w], axis=1)
    return FeatureCloud(
        points=np.asarray(points, float),
        features=np.asarray(features, np.float32),
        pixel_index=pix,
        labels=np.asarray(labels, np.int8),
        image_height=h,
        image_width=w,
    )


def _direct_scene(rng, n_active=200, n_passive=300, active_scale=1.0):
    """Hand-built observed/edited clouds with exact correspondences."""
    r_g = _random_rotation(rng)
    t_g = rng.normal(scale=0.2, size=3)
    active_obs = rng.normal(scale=0.05, size=(n_active, 3)) + [0.1, 0.0, 0.8]
    passive = rng.normal(scale=0.08, size=(n_passive, 3)) + [-0.1, 0.05, 0.9]
    active_edit = active_obs @ r_g.T + t_g
    if active_scale != 1.0:
        centroid = active_edit.mean(axis=0)
        active_edit = centroid + active_scale * (active_edit - centroid)

    d = 16
    feats_a = rng.normal(size=(n_active, d)).astype(np.float32)
    feats_p = rng.normal(size=(n_passive, d)).astype(np.float32)
    obs = _make_cloud(
        np.vstack([active_obs, passive]),
        np.vstack([feats_a, feats_p]),
        [Label.ACTIVE] * n_active + [Label.PASSIVE] * n_passive,
    )
    edit = _make_cloud(
        np.vstack([active_edit, passive]),
        np.vstack([feats_a, feats_p]),
        [Label.ACTIVE] * n_active + [Label.PASSIVE] * n_passive,
    )
    c_p = CorrespondenceSet(
        pairs=np.stack([np.arange(n_active, n_active + n_passive)] * 2, axis=1),
        feat_dist=np.zeros(n_passive),
        kind="passive_dense",
    )
    c_a = CorrespondenceSet(
        pairs=np.stack([np.arange(n_active)] * 2, axis=1),
        feat_dist=np.zeros(n_active),
        kind="active_feature",
    )
    gt = RigidTransform(r_g, t_g)
    return obs, edit, c_p, c_a, gt


class TestRegisterPair:
    def test_exact_scene_recovers_world_motion(self):
        rng = np.random.default_rng(15)
        obs, edit, c_p, c_a, gt = _direct_scene(rng)
        o2w = RigidTransform(_random_rotation(rng), rng.normal(size=3))
        gt_world = RigidTransform(
            o2w.rotation @ gt.rotation @ o2w.rotation.T,
            o2w.rotation @ gt.translation + o2w.translation
            - (o2w.rotation @ gt.rotation @ o2w.rotation.T) @ o2w.translation,
        )
        reg = register_pair(obs, edit, c_p, c_a, o2w)
        assert rotation_angle(reg.t_a_world.rotation @ gt_world.rotation.T) < 1e-9
        assert np.abs(reg.t_a_world.translation - gt_world.translation).max() < 1e-9
        assert reg.active_unified.scale == reg.passive.scale  # bitwise
        assert reg.residual_passive < 1e-12
        assert reg.scale_gap < 1e-12

    def test_scale_gap_warning_threshold(self):
        # s_a_raw = 1.6 * s_p -> warn, but computation proceeds.
        rng = np.random.default_rng(16)
        obs, edit, c_p, c_a, _ = _direct_scene(rng, active_scale=1.6)
        with pytest.warns(RuntimeWarning, match="scale gap"):
            reg = register_pair(obs, edit, c_p, c_a, RigidTransform.identity())
        assert reg.scale_gap == pytest.approx(0.6, abs=1e-6)

    def test_no_warning_below_threshold(self):
        rng = np.random.default_rng(17)
        obs, edit, c_p, c_a, _ = _direct_scene(rng, active_scale=1.2)
        import warnings as w

        with w.catch_warnings():
            w.simplefilter("error")
            reg = register_pair(obs, edit, c_p, c_a, RigidTransform.identity())
        assert reg.scale_gap == pytest.approx(0.2, abs=1e-6)

    def test_unified_scale_guard(self):
        rng = np.random.default_rng(18)
        obs, edit, c_p, c_a, _ = _direct_scene(rng)
        shrunk = FeatureCloud(
            points=edit.points * 1e-9,
            features=edit.features,
            pixel_index=edit.pixel_index,
            labels=edit.labels,
            image_height=edit.image_height,
            image_width=edit.image_width,
        )
        with pytest.raises(UnifiedScaleNonPositive):
            register_pair(obs, shrunk, c_p, c_a, RigidTransform.identity())

    def test_viewpoint_equivariance_by_conjugation(self):
        # Rigidly moving BOTH clouds by a camera motion C and updating o2w
        # accordingly leaves T_a_world unchanged.
        rng = np.random.default_rng(19)
        obs, edit, c_p, c_a, _ = _direct_scene(rng)
        o2w = RigidTransform(_random_rotation(rng), rng.normal(size=3))
        base = register_pair(obs, edit, c_p, c_a, o2w)
        for _ in range(5):
            cam = RigidTransform(_random_rotation(rng), rng.normal(size=3))
            cam_inv = cam.inverse()

            def move(cloud):
                return FeatureCloud(
                    points=cam_inv.apply(cloud.points),
                    features=cloud.features,
                    pixel_index=cloud.pixel_index,
                    labels=cloud.labels,
                    image_height=cloud.image_height,
                    image_width=cloud.image_width,
                )

            from editlift.core import compose

            moved = register_pair(move(obs), move(edit), c_p, c_a, compose(o2w, cam))
            assert rotation_angle(
                moved.t_a_world.rotation @ base.t_a_world.rotation.T
            ) < 1e-9
            assert np.abs(
                moved.t_a_world.translation - base.t_a_world.translation
            ).max() < 1e-9

            # Per-object transforms change by conjugation with C.
            pred_rot = moved.passive.rotation
            conj = base.passive.rotation @ cam.rotation
            assert np.abs(cam.rotation @ pred_rot - conj).max() < 1e-9

    def test_no_scale_align_uses_decoupled_scales(self):
        rng = np.random.default_rng(20)
        obs, edit, c_p, c_a, gt = _direct_scene(rng, active_scale=1.2)
        reg = register_pair(obs, edit, c_p, c_a, RigidTransform.identity())
        reg_dec = register_pair(
            obs, edit, c_p, c_a, RigidTransform.identity(), scale_align=False
        )
        # Rotation identical; translations differ by the scale-gap drift.
        assert rotation_angle(reg.rel_obs.rotation @ reg_dec.rel_obs.rotation.T) < 1e-9
        assert np.abs(reg.rel_obs.translation - reg_dec.rel_obs.translation).max() > 1e-4
