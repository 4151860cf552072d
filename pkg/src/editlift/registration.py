"""Similarity estimation and the relative/world-frame transform chain.

Per-object similarity transforms come from the closed-form least-squares
solve over corresponded points. The active object's scale is then forced
to the passive object's (the passive pixel-to-pixel registration is the
trustworthy scale reference), its rotation/translation recomputed at that
fixed scale, and the scale-free relative transform conjugated into the
world frame.

The 3x3 SVD backing the solve is a one-sided Jacobi iteration: it is
self-contained, deterministic across platforms, and needs no external
solver. It iterates until the off-diagonal norm falls below 1e-14.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import FeatureCloud, RigidTransform, SimilarityTransform
from .correspond import CorrespondenceSet
from .errors import (
    DegenerateGeometry,
    ScaleMismatch,
    TooFewPoints,
    UnifiedScaleNonPositive,
)

_JACOBI_TOL = 1e-14
_JACOBI_MAX_SWEEPS = 60

# Raw-vs-passive scale ratios usually stay well under this; a larger gap is
# worth a warning but not an abort.
SCALE_GAP_WARN = 0.5

MIN_PASSIVE_SCALE = 1e-6


def jacobi_svd3(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """SVD of a 3x3 matrix via one-sided Jacobi: ``a = u @ diag(s) @ vt``.

    Singular values are returned in descending order. Columns of ``u``
    belonging to (near-)zero singular values are completed to an
    orthonormal basis with cross products, so ``u`` is always orthogonal.
    """
    w = np.array(a, dtype=np.float64)
    if w.shape != (3, 3):
        raise ValueError(f"expected 3x3, got {w.shape}")
    v = np.eye(3)
    for _ in range(_JACOBI_MAX_SWEEPS):
        off = 0.0
        for i, j in ((0, 1), (0, 2), (1, 2)):
            ci = w[:, i]
            cj = w[:, j]
            alpha = float(ci @ ci)
            beta = float(cj @ cj)
            gamma = float(ci @ cj)
            scale = np.sqrt(alpha * beta)
            if scale > 0:
                off = max(off, abs(gamma) / scale)
            if scale == 0 or abs(gamma) <= _JACOBI_TOL * scale:
                continue
            # Rotation angle that orthogonalizes columns i and j.
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            if zeta == 0.0:
                t = 1.0
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            w[:, i], w[:, j] = c * ci - s * cj, s * ci + c * cj
            v[:, i], v[:, j] = c * v[:, i] - s * v[:, j], s * v[:, i] + c * v[:, j]
        if off <= _JACOBI_TOL:
            break

    sing = np.linalg.norm(w, axis=0)
    order = np.argsort(-sing, kind="stable")
    sing = sing[order]
    w = w[:, order]
    v = v[:, order]

    u = np.zeros((3, 3))
    tiny = sing[0] * 1e-300 if sing[0] > 0 else 0.0
    good = sing > max(tiny, sing[0] * 1e-15)
    for k in range(3):
        if good[k]:
            u[:, k] = w[:, k] / sing[k]
    # Complete zero columns so u stays orthogonal.
    if not good[2] and good[0] and good[1]:
        u[:, 2] = np.cross(u[:, 0], u[:, 1])
    elif not good[1] and good[0]:
        helper = np.eye(3)[np.argmin(np.abs(u[:, 0]))]
        u[:, 1] = np.cross(u[:, 0], helper)
        u[:, 1] /= np.linalg.norm(u[:, 1])
        u[:, 2] = np.cross(u[:, 0], u[:, 1])
    elif not good[0]:
        u = np.eye(3)
    return u, sing, v.T


def _validate_pair_arrays(obs_pts, edit_pts) -> tuple[np.ndarray, np.ndarray]:
    src = np.asarray(obs_pts, dtype=np.float64)
    dst = np.asarray(edit_pts, dtype=np.float64)
    if src.ndim != 2 or src.shape[1] != 3 or src.shape != dst.shape:
        raise ValueError(f"point arrays must both be (N, 3); got {src.shape} vs {dst.shape}")
    if src.shape[0] < 3:
        raise TooFewPoints(f"need at least 3 corresponded points, got {src.shape[0]}")
    return src, dst


def _cross_covariance(src, dst):
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    x = src - mu_s
    y = dst - mu_d
    cov = (y.T @ x) / src.shape[0]
    return cov, mu_s, mu_d, x


def _rotation_from_covariance(cov: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    u, d, vt = jacobi_svd3(cov)
    if d[0] <= 0.0 or d[1] <= d[0] * 1e-9:
        raise DegenerateGeometry(
            "centered covariance has rank < 2 (collinear or coincident points)"
        )
    sign = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sign[2] = -1.0
    r = (u * sign) @ vt
    return r, d, sign


def umeyama(obs_pts: np.ndarray, edit_pts: np.ndarray) -> SimilarityTransform:
    """Least-squares similarity ``(s, R, t)`` minimizing sum ||s R p + t - q||^2.

    Reflections are handled by the standard sign correction on the smallest
    singular value, so the returned rotation always has det +1.

    Raises
    ------
    TooFewPoints
        Fewer than 3 pairs.
    DegenerateGeometry
        Centered covariance rank < 2 (e.g. collinear input).
    """
    src, dst = _validate_pair_arrays(obs_pts, edit_pts)
    cov, mu_s, mu_d, x = _cross_covariance(src, dst)
    r, d, sign = _rotation_from_covariance(cov)
    var_src = float((x * x).sum() / src.shape[0])
    if var_src <= 0:
        raise DegenerateGeometry("source points are coincident")
    s = float((d * sign).sum() / var_src)
    if s <= 0:
        raise DegenerateGeometry(f"non-positive optimal scale {s}")
    t = mu_d - s * (r @ mu_s)
    return SimilarityTransform(scale=s, rotation=r, translation=t)


def fixed_scale_align(
    obs_pts: np.ndarray, edit_pts: np.ndarray, s: float
) -> tuple[np.ndarray, np.ndarray]:
    """Optimal (R, t) for a prescribed scale ``s``.

    The rotation equals the free-scale optimum (a uniform scale does not
    change the argmax of the trace term); only the translation shifts:
    ``t = mean(edit) - s * R @ mean(obs)``.
    """
    if s <= 0:
        raise ValueError(f"scale must be positive, got {s}")
    src, dst = _validate_pair_arrays(obs_pts, edit_pts)
    cov, mu_s, mu_d, _ = _cross_covariance(src, dst)
    r, _, _ = _rotation_from_covariance(cov)
    t = mu_d - s * (r @ mu_s)
    return r, t


def relative_transform(
    res_p: SimilarityTransform, res_a: SimilarityTransform
) -> RigidTransform:
    """Scale-free relative transform of active w.r.t. passive, observation frame.

    ``R_rel = R_p^T R_a`` and ``t_rel = R_p^T (t_a / s_a - t_p / s_p)``;
    requires the two scales to be unified beforehand.
    """
    if res_a.scale != res_p.scale:
        raise ScaleMismatch(
            f"scales differ (active {res_a.scale!r} vs passive {res_p.scale!r}); unify first"
        )
    return _relative_transform_any_scale(res_p, res_a)


def _relative_transform_any_scale(res_p, res_a) -> RigidTransform:
    rp_t = res_p.rotation.T
    r_rel = rp_t @ res_a.rotation
    t_rel = rp_t @ (res_a.translation / res_a.scale - res_p.translation / res_p.scale)
    return RigidTransform(rotation=r_rel, translation=t_rel)


def to_world(rel: RigidTransform, o2w: RigidTransform) -> RigidTransform:
    """Conjugate an observation-frame motion into the world frame.

    ``R_w = R_o2w R_rel R_o2w^T`` and
    ``t_w = R_o2w t_rel + t_o2w - R_w t_o2w``.
    """
    r_w = o2w.rotation @ rel.rotation @ o2w.rotation.T
    t_w = o2w.rotation @ rel.translation + o2w.translation - r_w @ o2w.translation
    return RigidTransform(rotation=r_w, translation=t_w)


@dataclass(frozen=True)
class RegistrationResult:
    """Everything the two per-object solves produce.

    residuals are RMS point errors in the edited frame (meters); the active
    residual is evaluated at the unified-scale solution. scale_gap is
    ``|s_a_raw / s_p - 1|``.
    """

    passive: SimilarityTransform
    active_raw: SimilarityTransform
    active_unified: SimilarityTransform
    rel_obs: RigidTransform
    t_a_world: RigidTransform
    residual_passive: float
    residual_active: float
    scale_gap: float


def _rms_residual(t: SimilarityTransform, src, dst) -> float:
    err = t.apply_points(src) - dst
    return float(np.sqrt((err * err).sum(axis=1).mean()))


def _pairs_points(cloud_obs, cloud_edit, cset) -> tuple[np.ndarray, np.ndarray]:
    pairs = cset.pairs
    return cloud_obs.points[pairs[:, 0]], cloud_edit.points[pairs[:, 1]]


def register_pair(
    obs: FeatureCloud,
    edit: FeatureCloud,
    c_p: CorrespondenceSet,
    c_a: CorrespondenceSet,
    o2w: RigidTransform,
    scale_align: bool = True,
    pair_filter: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None,
) -> RegistrationResult:
    """Run both per-object solves and chain the relative/world transforms.

    ``pair_filter`` is a reserved outlier-rejection hook (maps the paired
    point arrays to a boolean keep-mask); off by default, matching the
    plain unweighted solve over thresholded correspondences.

    With ``scale_align=False`` the relative transform is computed from the
    raw decoupled scales (the "wo scale" ablation path); the unified
    solution is still reported.
    """
    src_p, dst_p = _pairs_points(obs, edit, c_p)
    src_a, dst_a = _pairs_points(obs, edit, c_a)
    if pair_filter is not None:
        keep_p = pair_filter(src_p, dst_p)
        src_p, dst_p = src_p[keep_p], dst_p[keep_p]
        keep_a = pair_filter(src_a, dst_a)
        src_a, dst_a = src_a[keep_a], dst_a[keep_a]

    passive = umeyama(src_p, dst_p)
    if passive.scale < MIN_PASSIVE_SCALE:
        raise UnifiedScaleNonPositive(
            f"passive scale {passive.scale:.3e} below {MIN_PASSIVE_SCALE:.0e}"
        )
    active_raw = umeyama(src_a, dst_a)

    r_u, t_u = fixed_scale_align(src_a, dst_a, passive.scale)
    active_unified = SimilarityTransform(
        scale=passive.scale, rotation=r_u, translation=t_u
    )

    scale_gap = abs(active_raw.scale / passive.scale - 1.0)
    if scale_gap >= SCALE_GAP_WARN:
        warnings.warn(
            f"raw/passive scale gap {scale_gap:.3f} >= {SCALE_GAP_WARN}; "
            "edited geometry may be inconsistent",
            RuntimeWarning,
            stacklevel=2,
        )

    if scale_align:
        rel = relative_transform(passive, active_unified)
    else:
        rel = _relative_transform_any_scale(passive, active_raw)
    t_a_world = to_world(rel, o2w)

    return RegistrationResult(
        passive=passive,
        active_raw=active_raw,
        active_unified=active_unified,
        rel_obs=rel,
        t_a_world=t_a_world,
        residual_passive=_rms_residual(passive, src_p, dst_p),
        residual_active=_rms_residual(active_unified, src_a, dst_a),
        scale_gap=scale_gap,
    )
