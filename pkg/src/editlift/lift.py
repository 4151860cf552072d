"""Lift RGB-D observations and edited RGB images into pixel-aligned clouds.

The edited image goes through a monocular depth source with a fixed native
resolution. To avoid losing spatial detail on small objects, the tight
bounding box of the union object mask is cropped first; if it fits the
native resolution it is padded in place (lossless), otherwise it is
resized aspect-preserving with letterbox padding and the predicted depth
is mapped back onto the original pixel grid afterwards.

Depth-source output is treated as metric-up-to-scale; no rescaling happens
here. The registration stage's unified-scale mechanism absorbs any global
scale the estimator introduces.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Literal, Protocol

import numpy as np

from .core import CameraIntrinsics, FeatureCloud, Label, Mask
from .errors import (
    AllDepthInvalid,
    DepthSourceFailure,
    DimensionMismatch,
    EmptyMask,
)

DEFAULT_NATIVE_RESOLUTION = (518, 518)  # mirrors typical transformer depth estimators
DEFAULT_CROP_MARGIN = 8  # px; tight boxes clip silhouettes under mask jitter

# Interpolated depth spanning a discontinuity larger than this is rejected
# rather than averaged: averaging across jumps manufactures exactly the
# flying-edge artifacts the filter stage exists to remove.
DEPTH_DISCONTINUITY_LIMIT = 0.05  # meters


@dataclass(frozen=True)
class DepthMap:
    """Depth raster in meters; NaN or non-positive entries are invalid."""

    width: int
    height: int
    depth: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.depth, dtype=np.float64)
        if d.shape != (self.height, self.width):
            raise DimensionMismatch(
                f"depth raster shape {d.shape} != (height={self.height}, width={self.width})"
            )
        if np.any(np.isinf(d)):
            raise DimensionMismatch("depth raster contains infinities")
        object.__setattr__(self, "depth", d)

    @staticmethod
    def from_raster(depth: np.ndarray) -> "DepthMap":
        depth = np.asarray(depth, dtype=np.float64)
        return DepthMap(width=depth.shape[1], height=depth.shape[0], depth=depth)

    def valid_mask(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return np.isfinite(self.depth) & (self.depth > 0)


@dataclass(frozen=True)
class ImageFrame:
    """8-bit RGB raster of shape (height, width, 3)."""

    width: int
    height: int
    rgb: np.ndarray

    def __post_init__(self):
        rgb = np.asarray(self.rgb, dtype=np.uint8)
        if rgb.shape != (self.height, self.width, 3):
            raise DimensionMismatch(
                f"rgb raster shape {rgb.shape} != (height={self.height}, width={self.width}, 3)"
            )
        object.__setattr__(self, "rgb", rgb)

    @staticmethod
    def from_raster(rgb: np.ndarray) -> "ImageFrame":
        rgb = np.asarray(rgb, dtype=np.uint8)
        return ImageFrame(width=rgb.shape[1], height=rgb.shape[0], rgb=rgb)


@dataclass(frozen=True)
class CropPlan:
    """How the union-mask crop maps onto the depth source's native canvas.

    source_box is (x0, y0, x1, y1), end-exclusive, in original image pixels.
    scale applies to both axes (aspect-preserving); it is 1.0 in pad mode.
    offset (ox, oy) places the (scaled) box inside the native canvas,
    centered, with letterbox bands where the aspect ratios differ.
    """

    source_box: tuple[int, int, int, int]
    mode: Literal["resize", "pad"]
    target_width: int
    target_height: int
    scale_x: float
    scale_y: float
    offset_x: int
    offset_y: int
    scaled_width: int
    scaled_height: int

    @property
    def box_width(self) -> int:
        return self.source_box[2] - self.source_box[0]

    @property
    def box_height(self) -> int:
        return self.source_box[3] - self.source_box[1]


class DepthSource(Protocol):
    """Callable contract: an edited image in, depth at native resolution out."""

    native_resolution: tuple[int, int]  # (width, height)

    def __call__(self, image: ImageFrame) -> DepthMap: ...


class ConstantDepthSource:
    """Returns a constant-depth plane; the simplest deterministic mock."""

    def __init__(self, value: float, native_resolution=DEFAULT_NATIVE_RESOLUTION):
        self.value = float(value)
        self.native_resolution = tuple(native_resolution)

    def __call__(self, image: ImageFrame) -> DepthMap:
        w, h = self.native_resolution
        return DepthMap(width=w, height=h, depth=np.full((h, w), self.value))


class FixedDepthSource:
    """Returns a preassembled native-resolution depth map, ignoring the image.

    This is how tests hand a ground-truth canvas to the lifting path.
    """

    def __init__(self, depth: DepthMap):
        self.depth = depth
        self.native_resolution = (depth.width, depth.height)

    def __call__(self, image: ImageFrame) -> DepthMap:
        return self.depth


class MockDepthSource:
    """Seeded, deterministic stand-in for a monocular depth network.

    Produces a smooth pseudo-random depth field in [near, far] that depends
    only on the seed, not on the image content.
    """

    def __init__(
        self,
        seed: int = 0,
        native_resolution=DEFAULT_NATIVE_RESOLUTION,
        near: float = 0.5,
        far: float = 1.5,
    ):
        self.native_resolution = tuple(native_resolution)
        rng = np.random.default_rng(seed)
        w, h = self.native_resolution
        coarse = rng.uniform(near, far, size=(8, 8))
        ys = np.linspace(0, 7, h)
        xs = np.linspace(0, 7, w)
        y0 = np.clip(ys.astype(int), 0, 6)
        x0 = np.clip(xs.astype(int), 0, 6)
        fy = (ys - y0)[:, None]
        fx = (xs - x0)[None, :]
        d = (
            coarse[y0][:, x0] * (1 - fy) * (1 - fx)
            + coarse[y0 + 1][:, x0] * fy * (1 - fx)
            + coarse[y0][:, x0 + 1] * (1 - fy) * fx
            + coarse[y0 + 1][:, x0 + 1] * fy * fx
        )
        self._depth = DepthMap(width=w, height=h, depth=d)

    def __call__(self, image: ImageFrame) -> DepthMap:
        return self._depth


def backproject(
    depth: DepthMap,
    intr: CameraIntrinsics,
    rgb: ImageFrame,
    features: np.ndarray,
    masks: dict[str, Mask],
) -> FeatureCloud:
    """Backproject every valid-depth pixel through the pinhole model.

    Each pixel (u, v) with depth d maps to ``d * ((u-cx)/fx, (v-cy)/fy, 1)``.
    Labels come from the active/passive masks; where both claim a pixel the
    active object wins (it is the manipulated entity whose geometry drives
    the output transform) and a RuntimeWarning is emitted. pixel_index is
    stored as (row, col) = (v, u).
    """
    h, w = depth.height, depth.width
    feats = np.asarray(features)
    if (rgb.width, rgb.height) != (w, h):
        raise DimensionMismatch("rgb and depth dimensions differ")
    if feats.ndim != 3 or feats.shape[0] != h or feats.shape[1] != w:
        raise DimensionMismatch(f"feature raster shape {feats.shape} != ({h}, {w}, D)")
    if (intr.width, intr.height) != (w, h):
        raise DimensionMismatch("intrinsics do not match raster dimensions")
    active, passive = masks["active"], masks["passive"]
    for m in (active, passive):
        if (m.width, m.height) != (w, h):
            raise DimensionMismatch("mask dimensions differ from rasters")

    valid = depth.valid_mask()
    if not valid.any():
        raise AllDepthInvalid("no valid depth pixel to backproject")

    overlap = active.bits & passive.bits & valid
    if overlap.any():
        warnings.warn(
            f"{int(overlap.sum())} pixels claimed by both masks; labeling them active",
            RuntimeWarning,
            stacklevel=2,
        )

    vv, uu = np.nonzero(valid)
    d = depth.depth[vv, uu]
    x = d * (uu - intr.cx) / intr.fx
    y = d * (vv - intr.cy) / intr.fy
    points = np.stack([x, y, d], axis=1)

    labels = np.zeros(vv.shape[0], dtype=np.int8)
    labels[passive.bits[vv, uu]] = int(Label.PASSIVE)
    labels[active.bits[vv, uu]] = int(Label.ACTIVE)  # active wins overlaps

    return FeatureCloud(
        points=points,
        features=feats[vv, uu],
        pixel_index=np.stack([vv, uu], axis=1),
        labels=labels,
        image_height=h,
        image_width=w,
    )


def plan_crop(
    union_mask: Mask, native_w: int, native_h: int, margin: int = DEFAULT_CROP_MARGIN
) -> CropPlan:
    """Plan the crop of the union mask's tight bounding box onto the native canvas.

    Pad mode (scale 1) whenever the margined box already fits the native
    resolution; otherwise aspect-preserving resize with letterbox padding.
    """
    if union_mask.is_empty():
        raise EmptyMask("union mask has no pixels; nothing to crop")
    rows, cols = np.nonzero(union_mask.bits)
    x0 = max(int(cols.min()) - margin, 0)
    y0 = max(int(rows.min()) - margin, 0)
    x1 = min(int(cols.max()) + 1 + margin, union_mask.width)
    y1 = min(int(rows.max()) + 1 + margin, union_mask.height)
    bw, bh = x1 - x0, y1 - y0

    if bw <= native_w and bh <= native_h:
        return CropPlan(
            source_box=(x0, y0, x1, y1),
            mode="pad",
            target_width=native_w,
            target_height=native_h,
            scale_x=1.0,
            scale_y=1.0,
            offset_x=(native_w - bw) // 2,
            offset_y=(native_h - bh) // 2,
            scaled_width=bw,
            scaled_height=bh,
        )

    s = min(native_w / bw, native_h / bh)
    sw = max(1, round(bw * s))
    sh = max(1, round(bh * s))
    return CropPlan(
        source_box=(x0, y0, x1, y1),
        mode="resize",
        target_width=native_w,
        target_height=native_h,
        scale_x=s,
        scale_y=s,
        offset_x=(native_w - sw) // 2,
        offset_y=(native_h - sh) // 2,
        scaled_width=sw,
        scaled_height=sh,
    )


def build_source_canvas(edit: ImageFrame, plan: CropPlan) -> ImageFrame:
    """Render the cropped (and possibly resized) image onto the native canvas."""
    x0, y0, x1, y1 = plan.source_box
    crop = edit.rgb[y0:y1, x0:x1].astype(np.float64)
    canvas = np.zeros((plan.target_height, plan.target_width, 3), dtype=np.uint8)
    ox, oy = plan.offset_x, plan.offset_y
    if plan.mode == "pad":
        canvas[oy : oy + plan.box_height, ox : ox + plan.box_width] = crop.astype(np.uint8)
        return ImageFrame.from_raster(canvas)

    sw, sh = plan.scaled_width, plan.scaled_height
    xs = (np.arange(sw) + 0.5) / plan.scale_x - 0.5
    ys = (np.arange(sh) + 0.5) / plan.scale_y - 0.5
    region = _bilinear_sample(crop, xs, ys)
    canvas[oy : oy + sh, ox : ox + sw] = np.clip(np.rint(region), 0, 255).astype(np.uint8)
    return ImageFrame.from_raster(canvas)


def _bilinear_sample(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    fy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    if img.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    return (
        img[np.ix_(y0, x0)] * (1 - fy) * (1 - fx)
        + img[np.ix_(y1, x0)] * fy * (1 - fx)
        + img[np.ix_(y0, x1)] * (1 - fy) * fx
        + img[np.ix_(y1, x1)] * fy * fx
    )


def invert_crop_depth(native: DepthMap, plan: CropPlan) -> np.ndarray:
    """Re-express native-canvas depth on the source-box pixel grid.

    Pad mode reads values back directly (bit-identical). Resize mode
    bilinearly upsamples, except where the four contributing samples span
    a depth discontinuity beyond DEPTH_DISCONTINUITY_LIMIT; those outputs
    are marked invalid (NaN) instead of averaged.
    """
    ox, oy = plan.offset_x, plan.offset_y
    bw, bh = plan.box_width, plan.box_height
    if plan.mode == "pad":
        return native.depth[oy : oy + bh, ox : ox + bw].copy()

    region = native.depth[oy : oy + plan.scaled_height, ox : ox + plan.scaled_width]
    rh, rw = region.shape
    xs = np.clip((np.arange(bw) + 0.5) * plan.scale_x - 0.5, 0.0, rw - 1.0)
    ys = np.clip((np.arange(bh) + 0.5) * plan.scale_y - 0.5, 0.0, rh - 1.0)
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    x1 = np.minimum(x0 + 1, rw - 1)
    y1 = np.minimum(y0 + 1, rh - 1)
    fx = (xs - x0)[None, :]
    fy = (ys - y0)[:, None]
    c00 = region[np.ix_(y0, x0)]
    c10 = region[np.ix_(y1, x0)]
    c01 = region[np.ix_(y0, x1)]
    c11 = region[np.ix_(y1, x1)]
    out = c00 * (1 - fy) * (1 - fx) + c10 * fy * (1 - fx) + c01 * (1 - fy) * fx + c11 * fy * fx
    stack = np.stack([c00, c10, c01, c11])
    jump = np.nanmax(stack, axis=0) - np.nanmin(stack, axis=0)
    bad = ~np.isfinite(jump) | (jump > DEPTH_DISCONTINUITY_LIMIT)
    out[bad] = np.nan
    return out


def lift_edited(
    edit: ImageFrame,
    masks: dict[str, Mask],
    src: DepthSource,
    intr: CameraIntrinsics,
    features: np.ndarray,
) -> FeatureCloud:
    """Lift an edited RGB image to a cloud via a pluggable depth source.

    Crops per plan_crop, runs the source on the prepared canvas, inverts
    the crop/resize mapping so depth lives on the original pixel grid, and
    backprojects only the pixels inside the union object mask. pixel_index
    values are in original edited-image coordinates throughout.
    """
    active, passive = masks["active"], masks["passive"]
    union = active.union(passive)
    native_w, native_h = src.native_resolution
    plan = plan_crop(union, native_w, native_h)

    canvas = build_source_canvas(edit, plan)
    try:
        native = src(canvas)
    except Exception as e:  # noqa: BLE001 - source internals are opaque
        raise DepthSourceFailure(f"depth source raised: {e}") from e
    if (native.width, native.height) != (native_w, native_h):
        raise DepthSourceFailure(
            f"depth source returned {(native.width, native.height)}, "
            f"declared native {(native_w, native_h)}"
        )

    box_depth = invert_crop_depth(native, plan)
    x0, y0, x1, y1 = plan.source_box
    full = np.full((edit.height, edit.width), np.nan)
    full[y0:y1, x0:x1] = box_depth
    full[~union.bits] = np.nan  # restrict cloud to the manipulated regions

    return backproject(DepthMap.from_raster(full), intr, edit, features, masks)
