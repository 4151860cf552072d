"""Foundational geometric types and deterministic linear-algebra helpers.

Geometry is carried in 64-bit floats throughout; per-point feature vectors
are 32-bit (they originate in learned models where float32 is native).
Rotations are stored as 3x3 matrices rather than quaternions so the
matrix-form frame conjugations used downstream stay literal and tests are
free of double-cover ambiguity.

All types are immutable after construction and safe to share across
threads; the operations in this module are pure functions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .errors import InvariantViolation

ORTHONORMAL_TOL = 1e-9


def as_vec3(v) -> np.ndarray:
    """Validate and return ``v`` as a float64 array of shape (3,)."""
    a = np.asarray(v, dtype=np.float64)
    if a.shape != (3,):
        raise InvariantViolation(f"expected 3-vector, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvariantViolation("vector has non-finite components")
    return a


def as_mat3(m) -> np.ndarray:
    """Validate and return ``m`` as a float64 array of shape (3, 3)."""
    a = np.asarray(m, dtype=np.float64)
    if a.shape != (3, 3):
        raise InvariantViolation(f"expected 3x3 matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvariantViolation("matrix has non-finite components")
    return a


def rotation_defect(r: np.ndarray) -> float:
    """Max-norm deviation of ``r`` from a proper rotation (orthonormality + det)."""
    err = np.abs(r @ r.T - np.eye(3)).max()
    return max(float(err), abs(float(np.linalg.det(r)) - 1.0))


def check_rotation(r: np.ndarray, tol: float = ORTHONORMAL_TOL) -> np.ndarray:
    r = as_mat3(r)
    defect = rotation_defect(r)
    if defect > tol:
        raise InvariantViolation(
            f"rotation fails orthonormality/det check by {defect:.3e} (tol {tol:.1e})"
        )
    return r


def polar_orthonormalize(m: np.ndarray) -> np.ndarray:
    """Nearest proper rotation to ``m`` via polar decomposition.

    Used to scrub drift out of long composition chains; flips the smallest
    singular direction if needed so the determinant stays +1.
    """
    u, _, vt = np.linalg.svd(as_mat3(m))
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] = -u[:, -1]
        r = u @ vt
    return r


def rotation_angle(r: np.ndarray) -> float:
    """Rotation angle in radians of a rotation matrix, stable near identity."""
    r = as_mat3(r)
    skew = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    sin_t = 0.5 * np.linalg.norm(skew)
    cos_t = 0.5 * (np.trace(r) - 1.0)
    return float(np.arctan2(sin_t, np.clip(cos_t, -1.0, 1.0)))


def rot_z(angle_rad: float) -> np.ndarray:
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) pose: ``p -> rotation @ p + translation`` (translation in meters)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", check_rotation(self.rotation))
        object.__setattr__(self, "translation", as_vec3(self.translation))

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Apply to one point (3,) or a stack (N, 3)."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -(rt @ self.translation))


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Composition ``a ∘ b``: applying the result equals applying b then a."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


@dataclass(frozen=True)
class SimilarityTransform:
    """Sim(3) map ``p -> scale * rotation @ p + translation`` with scale > 0."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        if not np.isfinite(self.scale) or self.scale <= 0:
            raise InvariantViolation(f"scale must be positive and finite, got {self.scale}")
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "rotation", check_rotation(self.rotation))
        object.__setattr__(self, "translation", as_vec3(self.translation))

    @staticmethod
    def identity() -> "SimilarityTransform":
        return SimilarityTransform(1.0, np.eye(3), np.zeros(3))

    def apply_points(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return self.scale * (p @ self.rotation.T) + self.translation

    def inverse(self) -> "SimilarityTransform":
        rt = self.rotation.T
        s_inv = 1.0 / self.scale
        return SimilarityTransform(s_inv, rt, -s_inv * (rt @ self.translation))


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics; focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise InvariantViolation("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvariantViolation("principal point outside image bounds")
        if self.width <= 0 or self.height <= 0:
            raise InvariantViolation("image dimensions must be positive")


@dataclass(frozen=True)
class Mask:
    """Binary raster of shape (height, width)."""

    width: int
    height: int
    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        if bits.shape != (self.height, self.width):
            raise InvariantViolation(
                f"mask raster shape {bits.shape} does not match "
                f"(height={self.height}, width={self.width})"
            )
        object.__setattr__(self, "bits", bits)

    @staticmethod
    def from_bits(bits: np.ndarray) -> "Mask":
        bits = np.asarray(bits, dtype=bool)
        return Mask(width=bits.shape[1], height=bits.shape[0], bits=bits)

    def count(self) -> int:
        return int(self.bits.sum())

    def is_empty(self) -> bool:
        return not bool(self.bits.any())

    def union(self, other: "Mask") -> "Mask":
        self._check_dims(other)
        return Mask.from_bits(self.bits | other.bits)

    def intersection(self, other: "Mask") -> "Mask":
        self._check_dims(other)
        return Mask.from_bits(self.bits & other.bits)

    def _check_dims(self, other: "Mask"):
        if (self.width, self.height) != (other.width, other.height):
            raise InvariantViolation("mask dimensions differ")


class Label(IntEnum):
    """Per-point object label; filtering operates on full frames and masks
    can be re-derived from these."""

    BACKGROUND = 0
    ACTIVE = 1
    PASSIVE = 2


FEATURE_NORM_TOL = 1e-6


@dataclass(frozen=True)
class FeatureCloud:
    """Pixel-aligned 3D points with per-point features, pixel indices, labels.

    points       (N, 3) float64, meters, camera frame
    features     (N, D) float32, L2-normalized on ingest
    pixel_index  (N, 2) int32, (row, col) into the source image
    labels       (N,)   int8, values from Label
    image_height/image_width: bounds of the source pixel grid
    """

    points: np.ndarray
    features: np.ndarray
    pixel_index: np.ndarray
    labels: np.ndarray
    image_height: int
    image_width: int

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        feats = np.asarray(self.features, dtype=np.float32)
        pix = np.asarray(self.pixel_index, dtype=np.int32)
        labs = np.asarray(self.labels, dtype=np.int8)
        n = pts.shape[0]
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise InvariantViolation(f"points must be (N, 3), got {pts.shape}")
        if feats.ndim != 2 or feats.shape[0] != n:
            raise InvariantViolation(
                f"features length {feats.shape[0] if feats.ndim == 2 else feats.shape} "
                f"does not match {n} points"
            )
        if pix.shape != (n, 2):
            raise InvariantViolation(f"pixel_index must be (N, 2), got {pix.shape}")
        if labs.shape != (n,):
            raise InvariantViolation(f"labels must be (N,), got {labs.shape}")
        if not np.all(np.isfinite(pts)):
            raise InvariantViolation("points contain non-finite values")
        if n > 0:
            norms = np.linalg.norm(feats.astype(np.float64), axis=1)
            if np.any(norms <= 0) or not np.all(np.isfinite(norms)):
                raise InvariantViolation("feature vectors must be nonzero and finite")
            if np.any(np.abs(norms - 1.0) > FEATURE_NORM_TOL):
                feats = (feats.astype(np.float64) / norms[:, None]).astype(np.float32)
            if (
                pix[:, 0].min(initial=0) < 0
                or pix[:, 1].min(initial=0) < 0
                or pix[:, 0].max(initial=0) >= self.image_height
                or pix[:, 1].max(initial=0) >= self.image_width
            ):
                raise InvariantViolation("pixel_index entries outside the source image bounds")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "pixel_index", pix)
        object.__setattr__(self, "labels", labs)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices: np.ndarray) -> "FeatureCloud":
        idx = np.asarray(indices)
        return FeatureCloud(
            points=self.points[idx],
            features=self.features[idx],
            pixel_index=self.pixel_index[idx],
            labels=self.labels[idx],
            image_height=self.image_height,
            image_width=self.image_width,
        )

    def label_indices(self, label: Label) -> np.ndarray:
        return np.nonzero(self.labels == int(label))[0]

    def label_mask_raster(self, label: Label) -> Mask:
        """Re-derive the binary mask of one label on the source pixel grid."""
        bits = np.zeros((self.image_height, self.image_width), dtype=bool)
        idx = self.label_indices(label)
        bits[self.pixel_index[idx, 0], self.pixel_index[idx, 1]] = True
        return Mask.from_bits(bits)


def apply(t: SimilarityTransform, cloud: FeatureCloud) -> FeatureCloud:
    """Map every point through ``t``; features, pixel indices, labels are kept."""
    return FeatureCloud(
        points=t.apply_points(cloud.points),
        features=cloud.features,
        pixel_index=cloud.pixel_index,
        labels=cloud.labels,
        image_height=cloud.image_height,
        image_width=cloud.image_width,
    )


def concatenate_clouds(clouds: list[FeatureCloud]) -> FeatureCloud:
    """Merge clouds that share one source grid (used after per-object filtering)."""
    if not clouds:
        raise InvariantViolation("cannot concatenate zero clouds")
    h, w = clouds[0].image_height, clouds[0].image_width
    d = clouds[0].feature_dim
    for c in clouds[1:]:
        if (c.image_height, c.image_width, c.feature_dim) != (h, w, d):
            raise InvariantViolation("clouds disagree on grid size or feature dim")
    return FeatureCloud(
        points=np.concatenate([c.points for c in clouds]),
        features=np.concatenate([c.features for c in clouds]),
        pixel_index=np.concatenate([c.pixel_index for c in clouds]),
        labels=np.concatenate([c.labels for c in clouds]),
        image_height=h,
        image_width=w,
    )
