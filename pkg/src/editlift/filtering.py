"""Hierarchical 2D-3D fused point-cloud filtering.

Flying-edge points sit spatially next to valid geometry, so purely spatial
density filters keep them. They are, however, far from the object in
feature space. The filter exploits that: standardize features, layer the
cloud by K-Means in feature space, run DBSCAN inside each layer and keep
only the dominant spatial cluster when it is large enough, then run one
global DBSCAN over all survivors and keep its dominant cluster.

Stage 2 intentionally drops K-Means layers smaller than MinPts outright
(their points keep label -1). That discards small genuine parts along with
artifacts; the trade-off is accepted for predictability. Stage 3 reuses the
same (eps, MinPts) as stage 2.

DBSCAN neighborhoods are found through a uniform voxel grid of cell size
eps: expected O(N) work and a deterministic iteration order by point
index. Per-layer runs are independent and could execute in parallel;
results merge deterministically by layer id either way.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .core import FeatureCloud, Mask
from .errors import AllPointsRejected, EmptyCloud, TooFewPoints


@dataclass(frozen=True)
class FilterConfig:
    """Knobs of the hierarchical filter.

    Defaults target tabletop scenes at roughly 0.5-1.5 m range; expose them
    on the CLI rather than hard-coding scene-specific values.
    """

    k_layers: int = 5
    eps: float = 0.02
    min_pts: int = 10
    s_min: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.k_layers < 1:
            raise ValueError("k_layers must be >= 1")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.min_pts < 1:
            raise ValueError("min_pts must be >= 1")
        if self.s_min < self.min_pts:
            raise ValueError("s_min must be >= min_pts")


@dataclass(frozen=True)
class StageStats:
    input_points: int
    kmeans_layers: int
    stage2_kept: int
    stage3_kept: int


@dataclass(frozen=True)
class FilterResult:
    """Kept subset plus bookkeeping.

    cluster_labels holds, per input point, the stage-2 layer-cluster id of
    points that survived both stages and -1 for rejected points.
    """

    kept: FeatureCloud
    kept_mask: Mask
    cluster_labels: np.ndarray
    stage_stats: StageStats


def standardize_features(features: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-variance per dimension.

    Dimensions with variance below 1e-12 are centered but not divided, so
    constant channels cannot blow up.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 2:
        raise TooFewPoints("standardization needs at least 2 points")
    mu = f.mean(axis=0)
    var = f.var(axis=0)
    sd = np.sqrt(var)
    sd[var < 1e-12] = 1.0
    return (f - mu) / sd


def kmeans(features: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Seeded, deterministic Lloyd k-means with k-means++ initialization.

    Runs until the assignment reaches a fixpoint or 100 iterations. Empty
    clusters are re-seeded from the point farthest from its current center.
    Identical inputs and seed give identical assignments.

    The k-means++ draws are made over a value-ordered view of the points
    (seeded uniform/D^2-CDF sampling along a lexicographic order), so the
    partition depends on the feature multiset, not on row order. Clouds
    holding the same features in a different order therefore layer
    identically, which downstream correspondence exactness relies on.
    """
    f = np.asarray(features, dtype=np.float64)
    n = f.shape[0]
    if n < k:
        raise TooFewPoints(f"{n} points cannot form {k} clusters")
    rng = np.random.default_rng(seed)
    lex = np.lexsort(f.T[::-1])  # value order; permutation-covariant

    centers = np.empty((k, f.shape[1]))
    centers[0] = f[lex[int(rng.random() * n)]]
    d2 = ((f - centers[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = lex[int(rng.random() * n)]
        else:
            cdf = np.cumsum(d2[lex])
            idx = lex[int(np.searchsorted(cdf, rng.random() * total, side="right"))]
        centers[c] = f[idx]
        d2 = np.minimum(d2, ((f - centers[c]) ** 2).sum(axis=1))

    assign = np.full(n, -1, dtype=np.int32)
    f_sq = (f * f).sum(axis=1)
    for _ in range(100):
        dists = f_sq[:, None] - 2.0 * (f @ centers.T) + (centers * centers).sum(axis=1)
        new_assign = np.argmin(dists, axis=1).astype(np.int32)  # ties -> lowest id
        for c in range(k):
            members = new_assign == c
            if members.any():
                centers[c] = f[members].mean(axis=0)
            else:
                worst_dist = dists[np.arange(n), new_assign]
                worst = int(np.argmax(worst_dist))
                if worst_dist[worst] <= 0:
                    continue  # all points coincide; reseeding is meaningless
                centers[c] = f[worst]
                new_assign[worst] = c
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    return assign


def dbscan(points: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """DBSCAN labels (noise = -1) with voxel-grid neighborhood search.

    The epsilon-neighborhood count includes the point itself. Cluster ids
    are numbered by the lowest point index they contain; border points
    attach to the cluster of their lowest-index core neighbor. Fully
    deterministic for a given input order.
    """
    p = np.asarray(points, dtype=np.float64)
    n = p.shape[0]
    labels = np.full(n, -1, dtype=np.int32)
    if n == 0:
        return labels

    pairs_i, pairs_j = _eps_neighbor_pairs(p, eps)
    counts = np.bincount(pairs_i, minlength=n)
    core = counts >= min_pts
    if not core.any():
        return labels

    cc = pairs_i[core[pairs_i] & core[pairs_j]]
    dd = pairs_j[core[pairs_i] & core[pairs_j]]
    core_ids = np.nonzero(core)[0]
    remap = np.full(n, -1, dtype=np.int64)
    remap[core_ids] = np.arange(core_ids.size)
    graph = coo_matrix(
        (np.ones(cc.size, dtype=np.int8), (remap[cc], remap[dd])),
        shape=(core_ids.size, core_ids.size),
    )
    n_comp, comp = connected_components(graph, directed=False)

    # Renumber components by the lowest original point index they contain.
    first_idx = np.full(n_comp, n, dtype=np.int64)
    np.minimum.at(first_idx, comp, core_ids)
    order = np.argsort(first_idx, kind="stable")
    rank = np.empty(n_comp, dtype=np.int32)
    rank[order] = np.arange(n_comp, dtype=np.int32)
    labels[core_ids] = rank[comp]

    # Border points inherit from their lowest-index core neighbor.
    border_edges = ~core[pairs_i] & core[pairs_j]
    bi = pairs_i[border_edges]
    bj = pairs_j[border_edges]
    if bi.size:
        best = np.full(n, n, dtype=np.int64)
        np.minimum.at(best, bi, bj)
        has = best < n
        labels[has] = labels[best[has]]
    return labels


def _eps_neighbor_pairs(p: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """All index pairs (i, j) with ||p_i - p_j|| <= eps, including i == j."""
    cells = np.floor(p / eps).astype(np.int64)
    cells -= cells.min(axis=0)  # keys stay non-negative and packable
    span = cells.max(axis=0) + 2
    packed = (cells[:, 0] * span[1] + cells[:, 1]) * span[2] + cells[:, 2]
    order = np.argsort(packed, kind="stable")
    sorted_keys = packed[order]

    out_i: list[np.ndarray] = []
    out_j: list[np.ndarray] = []
    eps2 = eps * eps
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                target = packed + (dx * span[1] + dy) * span[2] + dz
                left = np.searchsorted(sorted_keys, target, side="left")
                right = np.searchsorted(sorted_keys, target, side="right")
                width = right - left
                if not width.any():
                    continue
                src = np.repeat(np.arange(p.shape[0]), width)
                offs = np.arange(width.sum()) - np.repeat(
                    np.cumsum(width) - width, width
                )
                dst = order[np.repeat(left, width) + offs]
                d2 = ((p[src] - p[dst]) ** 2).sum(axis=1)
                keep = d2 <= eps2
                out_i.append(src[keep])
                out_j.append(dst[keep])
    return np.concatenate(out_i), np.concatenate(out_j)


def hierarchical_filter(cloud: FeatureCloud, cfg: FilterConfig) -> FilterResult:
    """Run the full three-stage filter over one object's cloud."""
    n = len(cloud)
    if n == 0:
        raise EmptyCloud("cannot filter an empty cloud")

    labels = np.full(n, -1, dtype=np.int32)
    gid = 0

    standardized = standardize_features(cloud.features) if n >= 2 else None
    k_eff = min(cfg.k_layers, n)
    if standardized is None or n < k_eff:
        km = np.zeros(n, dtype=np.int32)
        k_eff = 1
    else:
        km = kmeans(standardized, k_eff, cfg.seed)

    for k in range(k_eff):
        members = np.nonzero(km == k)[0]
        if members.size < cfg.min_pts:
            continue
        y = dbscan(cloud.points[members], cfg.eps, cfg.min_pts)
        valid = y >= 0
        if not valid.any():
            continue
        sizes = np.bincount(y[valid])
        c_star = int(np.argmax(sizes))  # ties -> lowest cluster id
        if sizes[c_star] >= cfg.s_min:
            labels[members[y == c_star]] = gid
            gid += 1

    intra = np.nonzero(labels >= 0)[0]
    stage2_kept = intra.size
    if stage2_kept == 0:
        raise AllPointsRejected("no layer produced a dominant cluster >= s_min")

    y_inter = dbscan(cloud.points[intra], cfg.eps, cfg.min_pts)
    valid = y_inter >= 0
    if not valid.any():
        raise AllPointsRejected("global density pass rejected every survivor")
    sizes = np.bincount(y_inter[valid])
    c_star = int(np.argmax(sizes))
    final_idx = intra[y_inter == c_star]

    final_labels = np.full(n, -1, dtype=np.int32)
    final_labels[final_idx] = labels[final_idx]
    kept = cloud.subset(final_idx)

    bits = np.zeros((cloud.image_height, cloud.image_width), dtype=bool)
    bits[kept.pixel_index[:, 0], kept.pixel_index[:, 1]] = True

    return FilterResult(
        kept=kept,
        kept_mask=Mask.from_bits(bits),
        cluster_labels=final_labels,
        stage_stats=StageStats(
            input_points=n,
            kmeans_layers=k_eff,
            stage2_kept=stage2_kept,
            stage3_kept=final_idx.size,
        ),
    )
