"""End-to-end orchestration: lift, filter, correspond, register, grasp-filter.

run_pipeline keeps each stage's failure attributable (errors are re-raised
wrapped with the stage name) and produces a PipelineReport whose
``deterministic`` section is byte-stable for fixed inputs and seed;
timings live outside it.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

from . import archive
from .core import FeatureCloud, Label, concatenate_clouds
from .correspond import MatchConfig, active_pairs, passive_pairs
from .errors import EditliftError, PipelineStageError
from .filtering import FilterConfig, hierarchical_filter
from .grasp import DEFAULT_MARGIN, filter_grasps, passive_collision_hull
from .lift import MockDepthSource, backproject, lift_edited
from .registration import RegistrationResult, register_pair
from .synth import SceneBundle


@dataclass(frozen=True)
class PipelineConfig:
    """Every knob the pipeline honors, with its built-in defaults.

    ``provenance`` records where each value came from (default, config
    file, or command line); it is embedded in reports so a run is fully
    reproducible from its own output.
    """

    k_layers: int = 5
    eps: float = 0.02
    min_pts: int = 10
    s_min: int = 30
    d_thr: float = 0.3
    min_pairs: int = 10
    margin: float = DEFAULT_MARGIN
    seed: int = 0
    use_filter: bool = True
    scale_align: bool = True
    edited_depth: str = "stored"  # stored | mock | file:<path>
    provenance: dict = field(default_factory=dict)

    def filter_config(self) -> FilterConfig:
        return FilterConfig(
            k_layers=self.k_layers,
            eps=self.eps,
            min_pts=self.min_pts,
            s_min=self.s_min,
            seed=self.seed,
        )

    def match_config(self) -> MatchConfig:
        return MatchConfig(d_thr=self.d_thr, min_pairs=self.min_pairs)


_CONFIG_KEYS = (
    "k_layers", "eps", "min_pts", "s_min", "d_thr", "min_pairs",
    "margin", "seed", "use_filter", "scale_align", "edited_depth",
)


def build_config(file_values: dict | None = None, cli_values: dict | None = None) -> PipelineConfig:
    """Merge sources with precedence: command line > config file > default."""
    cfg = PipelineConfig()
    values = {}
    provenance = {}
    for key in _CONFIG_KEYS:
        values[key] = getattr(cfg, key)
        provenance[key] = "default"
    for source, mapping in (("config_file", file_values), ("command_line", cli_values)):
        if not mapping:
            continue
        for key, val in mapping.items():
            if key not in _CONFIG_KEYS:
                raise EditliftError(f"unknown config key {key!r}")
            if val is None:
                continue
            values[key] = val
            provenance[key] = source
    return PipelineConfig(**values, provenance=provenance)


@dataclass
class PipelineReport:
    deterministic: dict
    timings: dict
    registration: RegistrationResult | None = None

    def to_json_dict(self) -> dict:
        return {"deterministic": self.deterministic, "timings": self.timings}


def lift_bundle(bundle: SceneBundle) -> FeatureCloud:
    """Backproject a scene bundle's stored depth into a labeled cloud."""
    return backproject(
        bundle.depth,
        bundle.intr,
        bundle.image,
        bundle.features,
        {"active": bundle.mask_active, "passive": bundle.mask_passive},
    )


def _lift_edit_bundle(bundle: SceneBundle, cfg: PipelineConfig) -> FeatureCloud:
    if cfg.edited_depth == "stored":
        return lift_bundle(bundle)
    if cfg.edited_depth == "mock":
        src = MockDepthSource(seed=cfg.seed)
    elif cfg.edited_depth.startswith("file:"):
        src = archive.FileDepthSource(cfg.edited_depth[5:])
    else:
        raise EditliftError(f"unknown edited_depth mode {cfg.edited_depth!r}")
    return lift_edited(
        bundle.image,
        {"active": bundle.mask_active, "passive": bundle.mask_passive},
        src,
        bundle.intr,
        bundle.features,
    )


def _stage(name: str, timings: dict, fn, *args, **kwargs):
    start = time.perf_counter()
    try:
        result = fn(*args, **kwargs)
    except EditliftError as e:
        raise PipelineStageError(name, str(e)) from e
    timings[name] = timings.get(name, 0.0) + time.perf_counter() - start
    return result


def _filter_state(cloud: FeatureCloud, cfg: PipelineConfig, counts: dict, state: str):
    """Filter active and passive sub-clouds independently, then re-merge."""
    parts = []
    for label in (Label.ACTIVE, Label.PASSIVE):
        sub = cloud.subset(cloud.label_indices(label))
        if not cfg.use_filter:
            parts.append(sub)
            counts[f"{state}_{label.name.lower()}_kept"] = len(sub)
            continue
        result = hierarchical_filter(sub, cfg.filter_config())
        counts[f"{state}_{label.name.lower()}_kept"] = len(result.kept)
        parts.append(result.kept)
    counts[f"{state}_input"] = len(cloud)
    return concatenate_clouds(parts)


def run_pipeline(
    obs_path,
    edit_path,
    config: PipelineConfig | None = None,
    grasps_path=None,
) -> PipelineReport:
    """Full reasoning pass over two scene archives.

    Stages: lift both states, filter each object's cloud, build passive and
    active correspondences, solve the registration chain, and (when grasp
    candidates are supplied) filter them against the passive hull at the
    goal state. Any stage error is re-raised as PipelineStageError naming
    the stage.
    """
    cfg = config or PipelineConfig()
    timings: dict = {}
    obs_bundle = _stage("load", timings, archive.load_scene, obs_path)
    edit_bundle = _stage("load", timings, archive.load_scene, edit_path)
    grasp_cands = None
    if grasps_path is not None:
        grasp_cands = _stage("grasp", timings, archive.load_grasps, grasps_path)
    return run_pipeline_bundles(obs_bundle, edit_bundle, cfg, grasp_cands, timings)


def run_pipeline_bundles(
    obs_bundle: SceneBundle,
    edit_bundle: SceneBundle,
    config: PipelineConfig | None = None,
    grasp_candidates=None,
    timings: dict | None = None,
) -> PipelineReport:
    """The stage chain of run_pipeline over in-memory bundles."""
    cfg = config or PipelineConfig()
    timings = {} if timings is None else timings
    counts: dict = {}

    obs_cloud = _stage("lift", timings, lift_bundle, obs_bundle)
    edit_cloud = _stage("lift", timings, _lift_edit_bundle, edit_bundle, cfg)

    obs_f = _stage("filter", timings, _filter_state, obs_cloud, cfg, counts, "obs")
    edit_f = _stage("filter", timings, _filter_state, edit_cloud, cfg, counts, "edit")

    c_p = _stage("correspond", timings, passive_pairs, obs_f, edit_f)
    c_a = _stage("correspond", timings, active_pairs, obs_f, edit_f, cfg.match_config())
    counts["passive_pairs"] = len(c_p)
    counts["active_pairs"] = len(c_a)

    reg = _stage(
        "register", timings, register_pair,
        obs_f, edit_f, c_p, c_a, obs_bundle.o2w, scale_align=cfg.scale_align,
    )

    grasp_section = None
    if grasp_candidates is not None:
        cands = grasp_candidates

        def _filter_grasps():
            passive_world = obs_bundle.o2w.apply(
                obs_f.points[obs_f.label_indices(Label.PASSIVE)]
            )
            hull = passive_collision_hull(passive_world)
            kept = filter_grasps(cands, reg.t_a_world, hull, cfg.margin)
            kept_set = {id(c) for c in kept}
            kept_ids = [i for i, c in enumerate(cands) if id(c) in kept_set]
            return kept, kept_ids

        kept, kept_ids = _stage("grasp", timings, _filter_grasps)
        grasp_section = {
            "candidates": len(cands),
            "kept": len(kept),
            "kept_indices": kept_ids,
        }

    deterministic = {
        "schema": "editlift-report/1",
        "config": {key: getattr(cfg, key) for key in _CONFIG_KEYS},
        "config_provenance": cfg.provenance,
        "counts": counts,
        "registration": {
            "t_a_world": archive._transform_to_json(reg.t_a_world),
            "rel_obs": archive._transform_to_json(reg.rel_obs),
            "scales": {
                "passive": reg.passive.scale,
                "active_raw": reg.active_raw.scale,
                "active_unified": reg.active_unified.scale,
            },
            "scale_gap": reg.scale_gap,
            "residuals": {
                "passive_rms": reg.residual_passive,
                "active_rms": reg.residual_active,
            },
        },
    }
    if grasp_section is not None:
        deterministic["grasps"] = grasp_section

    return PipelineReport(deterministic=deterministic, timings=timings, registration=reg)
