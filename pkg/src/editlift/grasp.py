"""Edited-goal-informed grasp filtering.

Candidate grasps come from an external generator and are task-agnostic.
Transporting each grasp by the estimated active-object transform (gripper
and object assumed rigidly attached) and rejecting those whose gripper
geometry collides with the convex hull of the passive object's cloud keeps
only grasps that remain feasible at the goal state.

The gripper is represented as a surface/volume point sample rather than a
mesh; at <= 5 mm spacing the default 5 mm margin bounds what sampling can
miss, and points keep the hull test exact against its half-space form.
Collision is checked at the goal state only; swept-path collision belongs
to motion planning, not here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull as _QHull
from scipy.spatial import QhullError

from .core import RigidTransform, compose
from .errors import DegenerateInput

DEFAULT_MARGIN = 0.005  # compensates the gripper point-sampling gaps
OBB_INFLATE = 0.005  # thin passive clouds still need a collision volume


@dataclass(frozen=True)
class GraspCandidate:
    """A gripper pose (gripper frame -> world), its score, and its geometry."""

    pose: RigidTransform
    score: float
    gripper_points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.gripper_points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] == 0:
            raise ValueError(f"gripper_points must be nonempty (M, 3), got {pts.shape}")
        object.__setattr__(self, "gripper_points", pts)


@dataclass(frozen=True)
class ConvexHull:
    """Watertight triangulated hull with outward face normals."""

    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) indices into vertices
    normals: np.ndarray  # (F, 3) outward unit normals
    offsets: np.ndarray  # (F,) plane offsets: n . x = offset on the face

    def __post_init__(self):
        edges: dict[tuple[int, int], int] = {}
        for tri in self.faces:
            for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
                key = (min(a, b), max(a, b))
                edges[key] = edges.get(key, 0) + 1
        if any(count != 2 for count in edges.values()):
            raise DegenerateInput("hull is not watertight: an edge is not shared by 2 faces")

    def signed_distance(self, pts: np.ndarray) -> np.ndarray:
        """Max over faces of the face-plane distance; negative strictly inside.

        For exterior points this is the supporting-plane distance, a lower
        bound on the Euclidean distance to the hull, which makes margin
        checks conservative.
        """
        p = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        return (p @ self.normals.T - self.offsets).max(axis=1)

    def volume(self) -> float:
        v = self.vertices
        total = 0.0
        for tri in self.faces:
            total += np.dot(np.cross(v[tri[0]], v[tri[1]]), v[tri[2]])
        return total / 6.0


def convex_hull(points: np.ndarray) -> ConvexHull:
    """3-D quickhull of a point set with outward-oriented triangle faces.

    Raises DegenerateInput for fewer than 4 points or (near-)coplanar
    input; callers needing a collision volume for flat clouds should fall
    back to passive_collision_hull.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"points must be (N, 3), got {pts.shape}")
    if pts.shape[0] < 4:
        raise DegenerateInput(f"need >= 4 points, got {pts.shape[0]}")
    centered = pts - pts.mean(axis=0)
    sing = np.linalg.svd(centered, compute_uv=False)
    if sing[2] <= max(sing[0] * 1e-9, 1e-12):
        raise DegenerateInput("points are coplanar or collinear")

    try:
        qh = _QHull(pts)
    except QhullError as e:
        raise DegenerateInput(f"quickhull failed: {e}") from e

    vert_map = {int(v): i for i, v in enumerate(qh.vertices)}
    vertices = pts[qh.vertices]
    faces = np.array(
        [[vert_map[int(i)] for i in simplex] for simplex in qh.simplices], dtype=np.int32
    )
    normals = qh.equations[:, :3].copy()
    offsets = -qh.equations[:, 3].copy()

    # Reorient triangles so their winding matches the outward normal.
    v = vertices
    for f, tri in enumerate(faces):
        cross = np.cross(v[tri[1]] - v[tri[0]], v[tri[2]] - v[tri[0]])
        if np.dot(cross, normals[f]) < 0:
            faces[f] = tri[[0, 2, 1]]

    hull = ConvexHull(vertices=vertices, faces=faces, normals=normals, offsets=offsets)
    worst = hull.signed_distance(pts).max()
    if worst > 1e-9:
        raise DegenerateInput(f"hull fails containment self-check by {worst:.2e}")
    return hull


def oriented_bbox_hull(points: np.ndarray, inflate: float = OBB_INFLATE) -> ConvexHull:
    """Hull of the PCA-oriented bounding box, inflated on every axis.

    The inflation guarantees a full-rank box even for planar/linear input.
    """
    pts = np.asarray(points, dtype=np.float64)
    center = pts.mean(axis=0)
    centered = pts - center
    _, _, vt = np.linalg.svd(centered, full_matrices=True)
    # Deterministic axis signs: make each axis's largest-|.| component positive.
    for k in range(3):
        j = int(np.argmax(np.abs(vt[k])))
        if vt[k, j] < 0:
            vt[k] = -vt[k]
    local = centered @ vt.T
    lo = local.min(axis=0) - inflate
    hi = local.max(axis=0) + inflate
    corners_local = np.array(
        [[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])]
    )
    return convex_hull(corners_local @ vt + center)


def passive_collision_hull(points: np.ndarray, inflate: float = OBB_INFLATE) -> ConvexHull:
    """Collision volume for the passive cloud, robust to flat geometry."""
    try:
        return convex_hull(points)
    except DegenerateInput:
        return oriented_bbox_hull(points, inflate)


def collides(hull: ConvexHull, pts: np.ndarray, margin: float) -> bool:
    """True iff any point's signed distance to the hull is below ``margin``."""
    return bool((hull.signed_distance(pts) < margin).any())


def filter_grasps(
    cands: list[GraspCandidate],
    t_a: RigidTransform,
    hull: ConvexHull,
    margin: float = DEFAULT_MARGIN,
) -> list[GraspCandidate]:
    """Keep candidates whose goal-state gripper geometry clears the hull.

    Each candidate's gripper points are transported by ``t_a ∘ pose`` (the
    grasp rides the active object). Input order, and therefore any score
    ordering the caller established, is preserved. An empty result is a
    valid outcome the caller must handle.
    """
    kept = []
    for cand in cands:
        goal_pose = compose(t_a, cand.pose)
        if not collides(hull, goal_pose.apply(cand.gripper_points), margin):
            kept.append(cand)
    return kept


def default_gripper_points(
    jaw_span: float = 0.08,
    finger_depth: float = 0.05,
    finger_thickness: float = 0.01,
    palm_depth: float = 0.02,
    spacing: float = 0.005,
) -> np.ndarray:
    """Point-sampled parallel-jaw gripper in the gripper frame.

    Fingers close along +/-x, approach is +z with the grasp point at the
    origin; the palm sits behind the fingers. Which parts to include is the
    caller's policy decision, so the geometry is fully parameterized.
    """
    pts = []
    zs = np.arange(-finger_depth, spacing / 2, spacing)
    ys = np.arange(-finger_thickness, finger_thickness + spacing / 2, spacing)
    ts = np.arange(0.0, finger_thickness + spacing / 2, spacing)
    for side in (-1.0, 1.0):
        for z in zs:
            for y in ys:
                for t in ts:
                    pts.append((side * (jaw_span / 2 + t), y, z))
    xs = np.arange(-jaw_span / 2, jaw_span / 2 + spacing / 2, spacing)
    for x in xs:
        for y in ys:
            for z in np.arange(-finger_depth - palm_depth, -finger_depth, spacing):
                pts.append((x, y, z))
    return np.asarray(pts, dtype=np.float64)
