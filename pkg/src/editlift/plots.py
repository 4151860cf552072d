"""Static per-stage scatter/overlay images (display only, no interactivity)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .core import FeatureCloud, Label  # noqa: E402
from .synth import SceneBundle  # noqa: E402

_COLORS = {Label.BACKGROUND: "#9a9aa0", Label.ACTIVE: "#d26046", Label.PASSIVE: "#4678c8"}


def scene_overview(cloud: FeatureCloud, bundle: SceneBundle, out_dir, prefix="scene"):
    """Write an image view and a labeled top-down scatter; returns the paths."""
    out_dir = Path(out_dir)
    written = []

    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(bundle.image.rgb)
    ax.contour(bundle.mask_active.bits, levels=[0.5], colors="#d26046")
    ax.contour(bundle.mask_passive.bits, levels=[0.5], colors="#4678c8")
    ax.set_axis_off()
    path = out_dir / f"{prefix}_image.png"
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(4, 4))
    world = bundle.o2w.apply(cloud.points)
    for label in (Label.BACKGROUND, Label.PASSIVE, Label.ACTIVE):
        idx = cloud.label_indices(label)
        if idx.size == 0:
            continue
        ax.scatter(world[idx, 0], world[idx, 1], s=1, c=_COLORS[label],
                   label=label.name.lower())
    ax.set_aspect("equal")
    ax.legend(markerscale=6, fontsize=7)
    ax.set_xlabel("world x [m]")
    ax.set_ylabel("world y [m]")
    path = out_dir / f"{prefix}_cloud.png"
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    written.append(path)
    return written


def overlay_registration(obs_world, edit_world_predicted, out_path):
    """Observed active points against their predicted goal placement."""
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.scatter(obs_world[:, 0], obs_world[:, 1], s=1, c="#9a9aa0", label="observed")
    ax.scatter(edit_world_predicted[:, 0], edit_world_predicted[:, 1], s=1,
               c="#d26046", label="goal")
    ax.set_aspect("equal")
    ax.legend(markerscale=6, fontsize=7)
    fig.savefig(out_path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return Path(out_path)
