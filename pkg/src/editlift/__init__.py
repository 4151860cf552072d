"""editlift: observed/edited RGB-D scene pairs to inter-object rigid transforms."""

from .core import (
    CameraIntrinsics,
    FeatureCloud,
    Label,
    Mask,
    RigidTransform,
    SimilarityTransform,
    apply,
    compose,
)
from .correspond import CorrespondenceSet, MatchConfig, active_pairs, passive_pairs
from .filtering import FilterConfig, FilterResult, hierarchical_filter
from .grasp import ConvexHull, GraspCandidate, collides, convex_hull, filter_grasps
from .lift import CropPlan, DepthMap, ImageFrame, backproject, lift_edited, plan_crop
from .registration import (
    RegistrationResult,
    fixed_scale_align,
    register_pair,
    relative_transform,
    to_world,
    umeyama,
)
from .synth import SceneBundle, SceneNoise, SyntheticScene, camera_orbit, generate

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics",
    "FeatureCloud",
    "Label",
    "Mask",
    "RigidTransform",
    "SimilarityTransform",
    "apply",
    "compose",
    "CorrespondenceSet",
    "MatchConfig",
    "active_pairs",
    "passive_pairs",
    "FilterConfig",
    "FilterResult",
    "hierarchical_filter",
    "ConvexHull",
    "GraspCandidate",
    "collides",
    "convex_hull",
    "filter_grasps",
    "CropPlan",
    "DepthMap",
    "ImageFrame",
    "backproject",
    "lift_edited",
    "plan_crop",
    "RegistrationResult",
    "fixed_scale_align",
    "register_pair",
    "relative_transform",
    "to_world",
    "umeyama",
    "SceneBundle",
    "SceneNoise",
    "SyntheticScene",
    "camera_orbit",
    "generate",
    "__version__",
]
