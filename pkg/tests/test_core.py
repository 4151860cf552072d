"""Core geometric types: construction invariants, compose/apply semantics."""

import numpy as np
import pytest

from editlift.core import (
    FeatureCloud,
    Label,
    Mask,
    RigidTransform,
    SimilarityTransform,
    apply,
    compose,
    polar_orthonormalize,
    rot_z,
    rotation_defect,
)
from editlift.errors import InvariantViolation


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


def _random_rigid(rng):
    return RigidTransform(_random_rotation(rng), rng.normal(scale=0.5, size=3))


def _random_similarity(rng):
    return SimilarityTransform(
        float(rng.uniform(0.3, 3.0)), _random_rotation(rng), rng.normal(scale=0.5, size=3)
    )


class TestRigidTransform:
    def test_identity_compose_identity(self):
        ident = RigidTransform.identity()
        out = compose(ident, ident)
        assert np.allclose(out.rotation, np.eye(3))
        assert np.allclose(out.translation, 0.0)

    def test_inverse_cancellation(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            t = _random_rigid(rng)
            out = compose(t, t.inverse())
            assert np.abs(out.rotation - np.eye(3)).max() < 1e-12
            assert np.abs(out.translation).max() < 1e-12

    def test_rotation_composition_closed_form(self):
        # Rz(30) ∘ Rz(60) = Rz(90)
        a = RigidTransform(rot_z(np.radians(30)), np.zeros(3))
        b = RigidTransform(rot_z(np.radians(60)), np.zeros(3))
        out = compose(a, b)
        assert np.abs(out.rotation - rot_z(np.radians(90))).max() < 1e-12

    def test_compose_order_is_b_then_a(self):
        rng = np.random.default_rng(2)
        a, b = _random_rigid(rng), _random_rigid(rng)
        p = rng.normal(size=(10, 3))
        assert np.allclose(compose(a, b).apply(p), a.apply(b.apply(p)))

    def test_associativity(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            a, b, c = (_random_rigid(rng) for _ in range(3))
            left = compose(compose(a, b), c)
            right = compose(a, compose(b, c))
            assert np.abs(left.rotation - right.rotation).max() < 1e-12
            assert np.abs(left.translation - right.translation).max() < 1e-12

    def test_rejects_non_orthonormal(self):
        with pytest.raises(InvariantViolation):
            RigidTransform(np.eye(3) * 1.001, np.zeros(3))

    def test_rejects_reflection(self):
        refl = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(InvariantViolation):
            RigidTransform(refl, np.zeros(3))

    def test_rejects_non_finite(self):
        with pytest.raises(InvariantViolation):
            RigidTransform(np.eye(3), [np.nan, 0, 0])

    def test_long_chain_orthonormality_with_polar_cleanup(self):
        rng = np.random.default_rng(4)
        acc = RigidTransform.identity()
        for _ in range(1000):
            step = _random_rigid(rng)
            rot = acc.rotation @ step.rotation
            if rotation_defect(rot) > 1e-9:
                rot = polar_orthonormalize(rot)
            acc = RigidTransform(rot, acc.rotation @ step.translation + acc.translation)
        assert rotation_defect(acc.rotation) < 1e-9


def _tiny_cloud(points, features=None, h=4, w=4):
    points = np.asarray(points, dtype=float)
    n = len(points)
    if features is None:
        features = np.tile(np.eye(3, 8)[0], (n, 1))
    pix = np.stack([np.arange(n) // w, np.arange(n) % w], axis=1)
    return FeatureCloud(
        points=points,
        features=features,
        pixel_index=pix,
        labels=np.zeros(n, dtype=np.int8),
        image_height=h,
        image_width=w,
    )


class TestSimilarityApply:
    def test_identity_keeps_cloud(self):
        cloud = _tiny_cloud([[0.1, 0.2, 0.3], [1, 2, 3]])
        out = apply(SimilarityTransform.identity(), cloud)
        assert np.array_equal(out.points, cloud.points)
        assert np.array_equal(out.features, cloud.features)
        assert np.array_equal(out.pixel_index, cloud.pixel_index)
        assert np.array_equal(out.labels, cloud.labels)

    def test_pure_scaling(self):
        cloud = _tiny_cloud([[1.0, 1.0, 1.0]])
        out = apply(SimilarityTransform(2.0, np.eye(3), np.zeros(3)), cloud)
        assert np.allclose(out.points, [[2.0, 2.0, 2.0]])

    def test_inverse_round_trip(self):
        rng = np.random.default_rng(5)
        cloud = _tiny_cloud(rng.normal(size=(16, 3)))
        for _ in range(20):
            t = _random_similarity(rng)
            back = apply(t, apply(t.inverse(), cloud))
            assert np.abs(back.points - cloud.points).max() < 1e-9

    def test_inverse_formula(self):
        # s' = 1/s, R' = R^T, t' = -(1/s) R^T t
        rng = np.random.default_rng(6)
        t = _random_similarity(rng)
        inv = t.inverse()
        assert inv.scale == pytest.approx(1.0 / t.scale)
        assert np.allclose(inv.rotation, t.rotation.T)
        assert np.allclose(inv.translation, -(1.0 / t.scale) * (t.rotation.T @ t.translation))

    def test_scale_must_be_positive(self):
        with pytest.raises(InvariantViolation):
            SimilarityTransform(0.0, np.eye(3), np.zeros(3))


class TestMask:
    def test_shape_mismatch(self):
        with pytest.raises(InvariantViolation):
            Mask(width=3, height=2, bits=np.zeros((3, 3), dtype=bool))

    def test_set_operations(self):
        a = Mask.from_bits(np.array([[1, 0], [0, 0]], dtype=bool))
        b = Mask.from_bits(np.array([[1, 1], [0, 0]], dtype=bool))
        assert a.union(b).count() == 2
        assert a.intersection(b).count() == 1
        assert not a.is_empty()


class TestFeatureCloud:
    def test_normalizes_on_ingest(self):
        feats = np.array([[3.0, 0.0, 0.0, 0.0]], dtype=np.float32)
        cloud = _tiny_cloud([[0, 0, 1.0]], features=feats)
        assert np.linalg.norm(cloud.features[0]) == pytest.approx(1.0, abs=1e-6)

    def test_rejects_zero_feature(self):
        with pytest.raises(InvariantViolation):
            _tiny_cloud([[0, 0, 1.0]], features=np.zeros((1, 4), dtype=np.float32))

    def test_rejects_out_of_bounds_pixel(self):
        with pytest.raises(InvariantViolation):
            FeatureCloud(
                points=np.zeros((1, 3)),
                features=np.ones((1, 4), dtype=np.float32),
                pixel_index=np.array([[5, 0]]),
                labels=np.zeros(1, dtype=np.int8),
                image_height=4,
                image_width=4,
            )

    def test_rejects_length_mismatch(self):
        with pytest.raises(InvariantViolation):
            FeatureCloud(
                points=np.zeros((2, 3)),
                features=np.ones((1, 4), dtype=np.float32),
                pixel_index=np.zeros((2, 2), dtype=int),
                labels=np.zeros(2, dtype=np.int8),
                image_height=4,
                image_width=4,
            )

    def test_label_mask_round_trip(self):
        cloud = FeatureCloud(
            points=np.zeros((2, 3)),
            features=np.ones((2, 4), dtype=np.float32),
            pixel_index=np.array([[0, 0], [1, 2]]),
            labels=np.array([Label.ACTIVE, Label.PASSIVE], dtype=np.int8),
            image_height=4,
            image_width=4,
        )
        m = cloud.label_mask_raster(Label.ACTIVE)
        assert m.count() == 1 and m.bits[0, 0]
