"""Command-line interface.

Subcommands mirror the pipeline stages so each can be run and inspected in
isolation: synth, lift, filter, correspond, register, grasp-filter,
pipeline, plot. Every subcommand writes a JSON report whose
``deterministic`` section is byte-identical across runs for the same
inputs and --seed; wall-clock timings live in a separate section.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import archive
from .core import Label
from .correspond import MatchConfig, active_pairs, passive_pairs
from .errors import EditliftError, PipelineStageError
from .filtering import FilterConfig, hierarchical_filter
from .grasp import default_gripper_points
from .pipeline import build_config, lift_bundle, run_pipeline
from .registration import register_pair
from .synth import TASKS, SceneNoise, generate


def _write_report(path: Path | None, deterministic: dict, timings: dict | None = None):
    payload = {"deterministic": deterministic, "timings": timings or {}}
    text = json.dumps(payload, sort_keys=True, indent=2) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _add_filter_flags(p: argparse.ArgumentParser):
    p.add_argument("--k-layers", type=int, default=None)
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--min-pts", type=int, default=None)
    p.add_argument("--s-min", type=int, default=None)


def _filter_config(args, seed: int) -> FilterConfig:
    kw = {}
    if args.k_layers is not None:
        kw["k_layers"] = args.k_layers
    if args.eps is not None:
        kw["eps"] = args.eps
    if args.min_pts is not None:
        kw["min_pts"] = args.min_pts
    if args.s_min is not None:
        kw["s_min"] = args.s_min
    return FilterConfig(seed=seed, **kw)


def _cmd_synth(args) -> int:
    noise = SceneNoise(
        depth_sigma=args.depth_sigma,
        flying_edge_fraction=args.flying_edge_fraction,
        feature_noise=args.feature_noise,
    )
    scene = generate(
        args.task,
        noise,
        seed=args.seed,
        mask_mode=args.mask_mode,
        edit_depth_scale=args.edit_depth_scale,
        active_rescale=args.active_rescale,
        edge_profile=args.edge_profile,
    )
    out = Path(args.out)
    archive.save_synthetic(scene, out)
    if args.with_grasps:
        rng = np.random.default_rng(args.seed)
        obs_cloud = lift_bundle(scene.obs)
        active_world = scene.obs.o2w.apply(
            obs_cloud.points[obs_cloud.labels == int(Label.ACTIVE)]
        )
        center = active_world.mean(axis=0)
        cands = []
        pts = default_gripper_points()
        for _ in range(args.n_grasps):
            offset = rng.uniform(-0.02, 0.02, size=3)
            offset[2] = abs(offset[2]) + 0.03
            cands.append(
                archive.GraspCandidate(
                    pose=archive.RigidTransform(np.eye(3), center + offset),
                    score=float(rng.uniform(0, 1)),
                    gripper_points=pts,
                )
            )
        archive.save_grasps(cands, out / "grasps.json")
    _write_report(
        args.report,
        {
            "task": args.task,
            "seed": args.seed,
            "out": str(out),
            "obs_active_px": scene.obs.mask_active.count(),
            "obs_passive_px": scene.obs.mask_passive.count(),
            "edit_active_px": scene.edit.mask_active.count(),
            "edit_passive_px": scene.edit.mask_passive.count(),
        },
    )
    return 0


def _cmd_lift(args) -> int:
    bundle = archive.load_scene(args.scene)
    cloud = lift_bundle(bundle)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    archive.write_blob(out / "points.bin", cloud.points)
    archive.write_blob(out / "features.bin", cloud.features)
    archive.write_blob(out / "pixel_index.bin", cloud.pixel_index)
    archive.write_blob(out / "labels.bin", cloud.labels.astype(np.int32))
    _write_report(
        args.report,
        {
            "scene": str(args.scene),
            "points": len(cloud),
            "active": int((cloud.labels == int(Label.ACTIVE)).sum()),
            "passive": int((cloud.labels == int(Label.PASSIVE)).sum()),
        },
    )
    return 0


def _cmd_filter(args) -> int:
    bundle = archive.load_scene(args.scene)
    cloud = lift_bundle(bundle)
    label = Label.ACTIVE if args.object == "active" else Label.PASSIVE
    sub = cloud.subset(cloud.label_indices(label))
    result = hierarchical_filter(sub, _filter_config(args, args.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    archive.write_blob(out / "kept_points.bin", result.kept.points)
    archive.write_pgm(out / "kept_mask.pgm", result.kept_mask.bits)
    archive.write_blob(out / "cluster_labels.bin", result.cluster_labels)
    _write_report(
        args.report,
        {
            "scene": str(args.scene),
            "object": args.object,
            "input_points": result.stage_stats.input_points,
            "stage2_kept": result.stage_stats.stage2_kept,
            "stage3_kept": result.stage_stats.stage3_kept,
        },
    )
    return 0


def _prepare_clouds(args):
    cfg = build_config(cli_values=_cli_values(args))
    obs = lift_bundle(archive.load_scene(args.obs))
    edit = lift_bundle(archive.load_scene(args.edit))
    if cfg.use_filter:
        from .pipeline import _filter_state

        counts: dict = {}
        obs = _filter_state(obs, cfg, counts, "obs")
        edit = _filter_state(edit, cfg, counts, "edit")
    return cfg, obs, edit


def _cmd_correspond(args) -> int:
    cfg, obs, edit = _prepare_clouds(args)
    c_p = passive_pairs(obs, edit)
    c_a = active_pairs(obs, edit, cfg.match_config())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    archive.write_blob(out / "passive_pairs.bin", c_p.pairs)
    archive.write_blob(out / "active_pairs.bin", c_a.pairs)
    _write_report(
        args.report,
        {"passive_pairs": len(c_p), "active_pairs": len(c_a)},
    )
    return 0


def _cmd_register(args) -> int:
    cfg, obs, edit = _prepare_clouds(args)
    c_p = passive_pairs(obs, edit)
    c_a = active_pairs(obs, edit, cfg.match_config())
    o2w = archive.load_scene(args.obs).o2w
    reg = register_pair(obs, edit, c_p, c_a, o2w, scale_align=cfg.scale_align)
    _write_report(
        args.report,
        {
            "t_a_world": archive._transform_to_json(reg.t_a_world),
            "scale_gap": reg.scale_gap,
            "residuals": {
                "passive_rms": reg.residual_passive,
                "active_rms": reg.residual_active,
            },
        },
    )
    return 0


def _cmd_grasp_filter(args) -> int:
    cfg = build_config(cli_values=_cli_values(args))
    report = run_pipeline(args.obs, args.edit, cfg, grasps_path=args.grasps)
    _write_report(args.report, report.deterministic, report.timings)
    return 0


def _cmd_pipeline(args) -> int:
    file_values = None
    if args.config:
        file_values = json.loads(Path(args.config).read_text())
    cfg = build_config(file_values=file_values, cli_values=_cli_values(args))
    report = run_pipeline(args.obs, args.edit, cfg, grasps_path=args.grasps)
    _write_report(args.report, report.deterministic, report.timings)
    return 0


def _cmd_plot(args) -> int:
    from . import plots

    bundle = archive.load_scene(args.scene)
    cloud = lift_bundle(bundle)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = plots.scene_overview(cloud, bundle, out, prefix=args.prefix)
    _write_report(args.report, {"written": [p.name for p in written]})
    return 0


def _cli_values(args) -> dict:
    mapping = {}
    for key in ("k_layers", "eps", "min_pts", "s_min", "d_thr", "min_pairs", "margin", "seed"):
        if hasattr(args, key):
            mapping[key] = getattr(args, key)
    if getattr(args, "no_filter", False):
        mapping["use_filter"] = False
    if getattr(args, "no_scale_align", False):
        mapping["scale_align"] = False
    if getattr(args, "edited_depth", None):
        mapping["edited_depth"] = args.edited_depth
    return mapping


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="editlift",
        description="Observed/edited scene pairs to inter-object rigid transforms.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene archive")
    p.add_argument("--task", choices=TASKS, default="covering")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--depth-sigma", type=float, default=0.0)
    p.add_argument("--flying-edge-fraction", type=float, default=0.0)
    p.add_argument("--feature-noise", type=float, default=0.0)
    p.add_argument("--mask-mode", choices=("top", "full"), default="top")
    p.add_argument("--edit-depth-scale", type=float, default=1.0)
    p.add_argument("--active-rescale", type=float, default=1.0)
    p.add_argument("--edge-profile", choices=("scattered", "bridge"), default="scattered")
    p.add_argument("--with-grasps", action="store_true")
    p.add_argument("--n-grasps", type=int, default=20)
    p.add_argument("--report", default=None)
    p.set_defaults(fn=_cmd_synth)

    p = sub.add_parser("lift", help="backproject one scene archive to a cloud")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report", default=None)
    p.set_defaults(fn=_cmd_lift)

    p = sub.add_parser("filter", help="hierarchically filter one object's cloud")
    p.add_argument("--scene", required=True)
    p.add_argument("--object", choices=("active", "passive"), default="active")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_filter_flags(p)
    p.add_argument("--report", default=None)
    p.set_defaults(fn=_cmd_filter)

    for name, fn in (("correspond", _cmd_correspond), ("register", _cmd_register)):
        p = sub.add_parser(name, help=f"run the {name} stage on two archives")
        p.add_argument("--obs", required=True)
        p.add_argument("--edit", required=True)
        if name == "correspond":
            p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int, default=None)
        _add_filter_flags(p)
        p.add_argument("--d-thr", type=float, default=None)
        p.add_argument("--min-pairs", type=int, default=None)
        p.add_argument("--no-filter", action="store_true")
        p.add_argument("--no-scale-align", action="store_true")
        p.add_argument("--report", default=None)
        p.set_defaults(fn=fn)

    p = sub.add_parser("grasp-filter", help="pipeline plus grasp filtering")
    p.add_argument("--obs", required=True)
    p.add_argument("--edit", required=True)
    p.add_argument("--grasps", required=True)
    p.add_argument("--seed", type=int, default=None)
    _add_filter_flags(p)
    p.add_argument("--d-thr", type=float, default=None)
    p.add_argument("--min-pairs", type=int, default=None)
    p.add_argument("--margin", type=float, default=None)
    p.add_argument("--no-filter", action="store_true")
    p.add_argument("--no-scale-align", action="store_true")
    p.add_argument("--report", default=None)
    p.set_defaults(fn=_cmd_grasp_filter)

    p = sub.add_parser("pipeline", help="full reasoning pass over two archives")
    p.add_argument("--obs", required=True)
    p.add_argument("--edit", required=True)
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--grasps", default=None)
    p.add_argument("--seed", type=int, default=None)
    _add_filter_flags(p)
    p.add_argument("--d-thr", type=float, default=None)
    p.add_argument("--min-pairs", type=int, default=None)
    p.add_argument("--margin", type=float, default=None)
    p.add_argument("--edited-depth", default=None, help="stored | mock | file:<path>")
    p.add_argument("--no-filter", action="store_true")
    p.add_argument("--no-scale-align", action="store_true")
    p.add_argument("--report", default=None)
    p.set_defaults(fn=_cmd_pipeline)

    p = sub.add_parser("plot", help="static per-stage scatter/overlay images")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--prefix", default="scene")
    p.add_argument("--report", default=None)
    p.set_defaults(fn=_cmd_plot)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except PipelineStageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except EditliftError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
