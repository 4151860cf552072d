"""On-disk scene archives and the binary blob format.

A scene archive is one directory per captured or synthetic state:

    meta.json          structured metadata (schema below)
    image.ppm          binary P6 RGB
    depth.bin          float32 blob, meters, NaN = invalid
    features.bin       float32 blob, (H, W, D); D is declared by the header
    mask_active.pgm    binary P5, 0/255
    mask_passive.pgm   binary P5, 0/255
    grasps.json        optional grasp candidates

Blobs are little-endian: a 16-byte magic, a u32 format version, a u32
dtype code, a u32 ndim and u32 dims, then raw C-order data. Dimensions
always come from the header and are never inferred from file size, so any
adapter in any language can produce them without ambiguity. Masks/images
are plain PGM/PPM so exporters need no codec.

Loading validates every constituent invariant and reports violations with
field-level messages; loading then saving a canonical archive is
byte-identical.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .core import CameraIntrinsics, Mask, RigidTransform
from .errors import FormatVersionMismatch, InvariantViolation, MissingFile
from .grasp import GraspCandidate, default_gripper_points
from .lift import DepthMap, ImageFrame
from .synth import SceneBundle, SyntheticScene

BLOB_MAGIC = b"EDITLIFT-BLOB\x00\x00\x00"
BLOB_VERSION = 1
META_VERSION = 1

_DTYPE_CODES = {1: "<f4", 2: "<f8", 3: "<i4", 4: "u1", 5: "<i8"}
_DTYPE_TO_CODE = {np.dtype(v): k for k, v in _DTYPE_CODES.items()}

SCENE_FILES = {
    "image": "image.ppm",
    "depth": "depth.bin",
    "features": "features.bin",
    "mask_active": "mask_active.pgm",
    "mask_passive": "mask_passive.pgm",
}


def write_blob(path: Path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    code = _DTYPE_TO_CODE.get(np.dtype(arr.dtype.str.replace(">", "<")))
    if code is None:
        raise ValueError(f"unsupported blob dtype {arr.dtype}")
    with open(path, "wb") as f:
        f.write(BLOB_MAGIC)
        f.write(struct.pack("<II", BLOB_VERSION, code))
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.astype(_DTYPE_CODES[code]).tobytes())


def read_blob(path: Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    data = path.read_bytes()
    if data[:16] != BLOB_MAGIC:
        raise InvariantViolation(f"{path.name}: bad blob magic")
    version, code = struct.unpack_from("<II", data, 16)
    if version != BLOB_VERSION:
        raise FormatVersionMismatch(f"{path.name}: blob version {version} != {BLOB_VERSION}")
    if code not in _DTYPE_CODES:
        raise InvariantViolation(f"{path.name}: unknown dtype code {code}")
    (ndim,) = struct.unpack_from("<I", data, 24)
    dims = struct.unpack_from(f"<{ndim}I", data, 28)
    offset = 28 + 4 * ndim
    dtype = np.dtype(_DTYPE_CODES[code])
    expected = int(np.prod(dims)) * dtype.itemsize
    payload = data[offset:]
    if len(payload) != expected:
        raise InvariantViolation(
            f"{path.name}: payload is {len(payload)} bytes, header declares {expected} "
            f"(dims {tuple(dims)})"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()


def write_pgm(path: Path, bits: np.ndarray) -> None:
    arr = np.where(np.asarray(bits, dtype=bool), 255, 0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode())
        f.write(arr.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    data = path.read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P5":
        raise InvariantViolation(f"{path.name}: not a binary PGM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise InvariantViolation(f"{path.name}: expected maxval 255, got {maxval}")
    raster = np.frombuffer(data[pos + 1 :], dtype=np.uint8)
    if raster.size != w * h:
        raise InvariantViolation(f"{path.name}: raster length {raster.size} != {w}x{h}")
    return raster.reshape(h, w) > 0


def write_ppm(path: Path, rgb: np.ndarray) -> None:
    arr = np.asarray(rgb, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode())
        f.write(arr.tobytes())


def read_ppm(path: Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    data = path.read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P6":
        raise InvariantViolation(f"{path.name}: not a binary PPM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise InvariantViolation(f"{path.name}: expected maxval 255, got {maxval}")
    raster = np.frombuffer(data[pos + 1 :], dtype=np.uint8)
    if raster.size != w * h * 3:
        raise InvariantViolation(f"{path.name}: raster length {raster.size} != {w}x{h}x3")
    return raster.reshape(h, w, 3).copy()


def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _transform_to_json(t: RigidTransform) -> dict:
    return {
        "rotation": [[float(x) for x in row] for row in t.rotation],
        "translation": [float(x) for x in t.translation],
    }


def _transform_from_json(d: dict, where: str) -> RigidTransform:
    try:
        return RigidTransform(np.array(d["rotation"]), np.array(d["translation"]))
    except (KeyError, InvariantViolation) as e:
        raise InvariantViolation(f"{where}: {e}") from e


def save_scene(bundle: SceneBundle, path) -> None:
    """Write a SceneBundle as a scene archive directory."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    write_ppm(path / SCENE_FILES["image"], bundle.image.rgb)
    write_blob(path / SCENE_FILES["depth"], bundle.depth.depth.astype(np.float32))
    write_blob(path / SCENE_FILES["features"], bundle.features)
    write_pgm(path / SCENE_FILES["mask_active"], bundle.mask_active.bits)
    write_pgm(path / SCENE_FILES["mask_passive"], bundle.mask_passive.bits)
    meta = {
        "format": "editlift-scene",
        "version": META_VERSION,
        "width": bundle.depth.width,
        "height": bundle.depth.height,
        "feature_dim": int(bundle.features.shape[2]),
        "intrinsics": {
            "fx": bundle.intr.fx,
            "fy": bundle.intr.fy,
            "cx": bundle.intr.cx,
            "cy": bundle.intr.cy,
            "width": bundle.intr.width,
            "height": bundle.intr.height,
        },
        "o2w": _transform_to_json(bundle.o2w),
        "instruction": bundle.instruction,
        "files": SCENE_FILES,
    }
    (path / "meta.json").write_text(_canonical_json(meta))


def load_scene(path) -> SceneBundle:
    """Load and fully validate a scene archive; violations name the field."""
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.exists():
        raise MissingFile(str(meta_path))
    meta = json.loads(meta_path.read_text())
    if meta.get("format") != "editlift-scene":
        raise InvariantViolation("meta.json: not an editlift scene archive")
    if meta.get("version") != META_VERSION:
        raise FormatVersionMismatch(
            f"meta.json: version {meta.get('version')} != {META_VERSION}"
        )
    w, h = int(meta["width"]), int(meta["height"])
    files = meta.get("files", SCENE_FILES)

    rgb = read_ppm(path / files["image"])
    if rgb.shape[:2] != (h, w):
        raise InvariantViolation(f"image: shape {rgb.shape[:2]} != meta ({h}, {w})")
    depth = read_blob(path / files["depth"])
    if depth.ndim != 2 or depth.shape != (h, w):
        raise InvariantViolation(f"depth: shape {depth.shape} != meta ({h}, {w})")
    features = read_blob(path / files["features"])
    if features.ndim != 3 or features.shape[:2] != (h, w):
        raise InvariantViolation(
            f"features: shape {features.shape} inconsistent with meta ({h}, {w}, D)"
        )
    if features.shape[2] != int(meta["feature_dim"]):
        raise InvariantViolation(
            f"features: dim {features.shape[2]} != meta feature_dim {meta['feature_dim']}"
        )
    mask_a = read_pgm(path / files["mask_active"])
    mask_p = read_pgm(path / files["mask_passive"])
    for name, m in (("mask_active", mask_a), ("mask_passive", mask_p)):
        if m.shape != (h, w):
            raise InvariantViolation(f"{name}: shape {m.shape} != meta ({h}, {w})")

    ii = meta["intrinsics"]
    try:
        intr = CameraIntrinsics(
            fx=float(ii["fx"]), fy=float(ii["fy"]), cx=float(ii["cx"]), cy=float(ii["cy"]),
            width=int(ii["width"]), height=int(ii["height"]),
        )
    except (KeyError, InvariantViolation) as e:
        raise InvariantViolation(f"intrinsics: {e}") from e
    if (intr.width, intr.height) != (w, h):
        raise InvariantViolation("intrinsics: dimensions disagree with rasters")

    return SceneBundle(
        image=ImageFrame.from_raster(rgb),
        depth=DepthMap.from_raster(depth.astype(np.float64)),
        intr=intr,
        o2w=_transform_from_json(meta["o2w"], "o2w"),
        mask_active=Mask.from_bits(mask_a),
        mask_passive=Mask.from_bits(mask_p),
        features=features,
        instruction=str(meta.get("instruction", "")),
    )


class FileDepthSource:
    """Depth source backed by a raw depth blob (an estimator's native output)."""

    def __init__(self, path):
        raster = read_blob(Path(path)).astype(np.float64)
        if raster.ndim != 2:
            raise InvariantViolation(f"{path}: depth blob must be 2-D, got {raster.ndim}-D")
        self._depth = DepthMap.from_raster(raster)
        self.native_resolution = (self._depth.width, self._depth.height)

    def __call__(self, image: ImageFrame) -> DepthMap:
        return self._depth


def save_grasps(cands: list[GraspCandidate], path) -> None:
    payload = {
        "format": "editlift-grasps",
        "version": 1,
        "grasps": [
            {
                "pose": _transform_to_json(c.pose),
                "score": float(c.score),
                "gripper_points": [[float(x) for x in p] for p in c.gripper_points],
            }
            for c in cands
        ],
    }
    Path(path).write_text(_canonical_json(payload))


def load_grasps(path) -> list[GraspCandidate]:
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    payload = json.loads(path.read_text())
    if payload.get("format") != "editlift-grasps":
        raise InvariantViolation(f"{path.name}: not a grasp file")
    default_pts = default_gripper_points()
    out = []
    for i, g in enumerate(payload.get("grasps", [])):
        pts = g.get("gripper_points")
        out.append(
            GraspCandidate(
                pose=_transform_from_json(g["pose"], f"grasps[{i}].pose"),
                score=float(g.get("score", 0.0)),
                gripper_points=np.array(pts) if pts else default_pts,
            )
        )
    return out


def save_synthetic(scene: SyntheticScene, path) -> None:
    """Scene pair plus ground-truth sidecar: <path>/obs, <path>/edit, gt files."""
    path = Path(path)
    save_scene(scene.obs, path / "obs")
    save_scene(scene.edit, path / "edit")
    write_pgm(path / "artifact_obs.pgm", scene.artifact_obs.bits)
    write_pgm(path / "artifact_edit.pgm", scene.artifact_edit.bits)
    write_blob(path / "gt_pixel_map.bin", scene.gt_pixel_map.astype(np.int32))
    gt = {
        "format": "editlift-gt",
        "version": 1,
        "seed": scene.seed,
        "task": scene.params.task,
        "gt_motion": _transform_to_json(scene.gt_motion),
    }
    (path / "gt.json").write_text(_canonical_json(gt))


def load_gt_motion(path) -> RigidTransform:
    path = Path(path) / "gt.json"
    if not path.exists():
        raise MissingFile(str(path))
    return _transform_from_json(json.loads(path.read_text())["gt_motion"], "gt_motion")
