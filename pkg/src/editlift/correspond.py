"""Cross-state correspondence sets.

The passive object is pixel-static across the observed and edited states,
so its pairs come straight from the pixel-index intersection of the two
passive masks. The active object moves, so its pairs come from exact
nearest-neighbor search in feature space under a cosine-distance
threshold. Features are unit-norm, which reduces cosine distance to
``1 - dot`` and makes the threshold comparison branch-free.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .core import FeatureCloud, Label
from .errors import DimensionMismatch, NoOverlap, TooFewMatches

# Block size for the exact blocked dot-product search. Exactness is what
# lets the brute-force oracle check pass verbatim; never approximate here.
_SEARCH_BLOCK = 1024


@dataclass(frozen=True)
class MatchConfig:
    """Thresholds for active-object feature matching.

    ``spatial_gate`` optionally also requires the matched pair's 3D
    distance to stay below the given value (meters); disabled by default
    because the two clouds live in different, unaligned frames, where a
    metric gate is not meaningful in general.
    """

    d_thr: float = 0.3
    min_pairs: int = 10
    spatial_gate: float | None = None

    def __post_init__(self):
        if not (0.0 < self.d_thr <= 2.0):
            raise ValueError(f"d_thr must be in (0, 2], got {self.d_thr}")
        if self.min_pairs < 3:
            raise ValueError(f"min_pairs must be >= 3, got {self.min_pairs}")


@dataclass(frozen=True)
class CorrespondenceSet:
    """Paired indices into two FeatureClouds plus per-pair feature distance."""

    pairs: np.ndarray  # (M, 2) int64: (obs_index, edit_index)
    feat_dist: np.ndarray  # (M,) float64
    kind: Literal["passive_dense", "active_feature"]

    def __post_init__(self):
        pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        dist = np.asarray(self.feat_dist, dtype=np.float64).reshape(-1)
        if pairs.shape[0] != dist.shape[0]:
            raise ValueError("pairs and feat_dist lengths differ")
        object.__setattr__(self, "pairs", pairs)
        object.__setattr__(self, "feat_dist", dist)

    def __len__(self) -> int:
        return self.pairs.shape[0]


def _pixel_keys(cloud: FeatureCloud, indices: np.ndarray) -> np.ndarray:
    pix = cloud.pixel_index[indices].astype(np.int64)
    return pix[:, 0] * cloud.image_width + pix[:, 1]


def passive_pairs(obs: FeatureCloud, edit: FeatureCloud) -> CorrespondenceSet:
    """Dense pixel-to-pixel pairs over the passive-mask intersection.

    Every pixel index carrying a passive-labeled point in both clouds is
    paired with itself. Feature distances are recorded for inspection but
    play no role in the pairing.

    Raises NoOverlap when the intersection is empty, which signals that
    editing destroyed the static region.
    """
    if (obs.image_width, obs.image_height) != (edit.image_width, edit.image_height):
        raise DimensionMismatch("clouds are not on the same image grid")
    obs_idx = obs.label_indices(Label.PASSIVE)
    edit_idx = edit.label_indices(Label.PASSIVE)
    obs_keys = _pixel_keys(obs, obs_idx)
    edit_keys = _pixel_keys(edit, edit_idx)

    common, obs_pos, edit_pos = np.intersect1d(
        obs_keys, edit_keys, assume_unique=True, return_indices=True
    )
    if common.size == 0:
        raise NoOverlap("passive masks share no pixels across states")

    oi = obs_idx[obs_pos]
    ei = edit_idx[edit_pos]
    dots = np.einsum(
        "ij,ij->i",
        obs.features[oi].astype(np.float64),
        edit.features[ei].astype(np.float64),
    )
    return CorrespondenceSet(
        pairs=np.stack([oi, ei], axis=1),
        feat_dist=1.0 - dots,
        kind="passive_dense",
    )


def active_pairs(
    obs: FeatureCloud, edit: FeatureCloud, cfg: MatchConfig
) -> CorrespondenceSet:
    """Feature-nearest-neighbor pairs for the active object.

    For each edited active point, the observed active point minimizing
    cosine distance ``1 - <f_obs, f_edit>`` is found by exact blocked
    dot-product evaluation; the pair is kept iff that distance is below
    ``cfg.d_thr``. Argmin ties break to the lowest observed index. Each
    edited point is matched at most once (observed points may repeat).

    Raises TooFewMatches when fewer than ``cfg.min_pairs`` pairs survive.
    """
    obs_idx = obs.label_indices(Label.ACTIVE)
    edit_idx = edit.label_indices(Label.ACTIVE)
    if obs_idx.size == 0 or edit_idx.size == 0:
        raise TooFewMatches("a cloud has no active-labeled points")

    obs_f = obs.features[obs_idx].astype(np.float64)
    edit_f = edit.features[edit_idx].astype(np.float64)

    best_obs = np.empty(edit_idx.size, dtype=np.int64)
    best_dot = np.empty(edit_idx.size, dtype=np.float64)
    for start in range(0, edit_idx.size, _SEARCH_BLOCK):
        stop = min(start + _SEARCH_BLOCK, edit_idx.size)
        dots = edit_f[start:stop] @ obs_f.T
        arg = np.argmax(dots, axis=1)  # first max = lowest obs index on ties
        best_obs[start:stop] = arg
        best_dot[start:stop] = dots[np.arange(stop - start), arg]

    dist = 1.0 - best_dot
    keep = dist < cfg.d_thr
    if cfg.spatial_gate is not None:
        delta = obs.points[obs_idx[best_obs]] - edit.points[edit_idx]
        keep &= np.linalg.norm(delta, axis=1) < cfg.spatial_gate

    kept = np.nonzero(keep)[0]
    if kept.size < cfg.min_pairs:
        raise TooFewMatches(
            f"{kept.size} matches below d_thr={cfg.d_thr} "
            f"(need {cfg.min_pairs}); features disagree across states"
        )
    return CorrespondenceSet(
        pairs=np.stack([obs_idx[best_obs[kept]], edit_idx[kept]], axis=1),
        feat_dist=dist[kept],
        kind="active_feature",
    )


def brute_force_active_pairs(
    obs: FeatureCloud, edit: FeatureCloud, cfg: MatchConfig
) -> CorrespondenceSet:
    """Exhaustive O(N^2) reference for ``active_pairs``; oracle use only.

    Every candidate pair is evaluated, one edited point per matrix-vector
    product, with the lowest-index tie rule made explicit. Kept separate
    from the blocked search so the two can disagree only if one is wrong.
    """
    obs_idx = obs.label_indices(Label.ACTIVE)
    edit_idx = edit.label_indices(Label.ACTIVE)
    if obs_idx.size == 0 or edit_idx.size == 0:
        raise TooFewMatches("a cloud has no active-labeled points")
    obs_f = obs.features[obs_idx].astype(np.float64)
    edit_f = edit.features[edit_idx].astype(np.float64)

    pairs = []
    dists = []
    for j in range(edit_idx.size):
        d = 1.0 - obs_f @ edit_f[j]
        best_i = int(np.flatnonzero(d == d.min())[0])  # ties: lowest obs index
        dist = float(d[best_i])
        if dist < cfg.d_thr:
            if cfg.spatial_gate is not None:
                gap = np.linalg.norm(obs.points[obs_idx[best_i]] - edit.points[edit_idx[j]])
                if gap >= cfg.spatial_gate:
                    continue
            pairs.append((obs_idx[best_i], edit_idx[j]))
            dists.append(dist)
    if len(pairs) < cfg.min_pairs:
        raise TooFewMatches(f"{len(pairs)} matches below d_thr={cfg.d_thr}")
    return CorrespondenceSet(
        pairs=np.asarray(pairs, dtype=np.int64),
        feat_dist=np.asarray(dists, dtype=np.float64),
        kind="active_feature",
    )
