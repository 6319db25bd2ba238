"""Synthetic scene generation, dataset persistence and crop extraction.

A scene is a joint render of one or more posed objects; per-object visible
masks and object-coordinate maps come from the z-buffer owner map, so
occlusion is exact. Scenes round-trip losslessly through tensor-archive
files plus a JSON manifest.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensorio
from .geom import CameraIntrinsics, Pose, Rotation, SymmetrySet, TriangleMesh, project
from .render import merge_renders, rasterize

DEFAULT_CAMERA = CameraIntrinsics(fx=450.0, fy=450.0, cx=160.0, cy=160.0, width=320, height=320)
CROP_PAD = 0.1
CROP_SIZE = 224


class SceneError(Exception):
    pass


@dataclass
class SceneObject:
    object_id: str
    pose: Pose
    visib_fract: float
    crop_box: tuple[int, int, int]  # (col0, row0, side) in full-image pixels
    mask: np.ndarray  # (H,W) bool, visible pixels only
    coord_map: np.ndarray  # (H,W,3) float32, NaN off-mask


@dataclass
class SceneSample:
    rgb: np.ndarray  # (H,W,3) float32
    depth: np.ndarray  # (H,W) float32
    cam: CameraIntrinsics
    objects: list[SceneObject]
    seed: int
    clutter: int


def _random_pose(rng: np.random.Generator, z_range=(0.5, 0.75), lateral=0.05) -> Pose:
    r = Rotation.random(rng)
    t = np.array(
        [rng.uniform(-lateral, lateral), rng.uniform(-lateral, lateral), rng.uniform(*z_range)]
    )
    return Pose(r, t)


def _in_frustum(mesh: TriangleMesh, pose: Pose, cam: CameraIntrinsics, margin: int = 8) -> bool:
    uv, valid = project(cam, pose.apply(mesh.vertices))
    if not valid.all():
        return False
    return bool(
        (uv[:, 0] > margin).all()
        and (uv[:, 0] < cam.width - margin).all()
        and (uv[:, 1] > margin).all()
        and (uv[:, 1] < cam.height - margin).all()
    )


def _aabbs_disjoint(meshes_poses, margin: float = 0.005) -> bool:
    boxes = []
    for mesh, pose in meshes_poses:
        pts = pose.apply(mesh.vertices)
        boxes.append((pts.min(axis=0) - margin, pts.max(axis=0) + margin))
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            lo_i, hi_i = boxes[i]
            lo_j, hi_j = boxes[j]
            if np.all(hi_i > lo_j) and np.all(hi_j > lo_i):
                return False
    return True


def _crop_box(mask: np.ndarray, pad: float = CROP_PAD) -> tuple[int, int, int]:
    rows, cols = np.nonzero(mask)
    if len(rows) == 0:
        raise SceneError("cannot crop an empty mask")
    h = rows.max() - rows.min() + 1
    w = cols.max() - cols.min() + 1
    side = int(math.ceil(max(h, w) * (1 + 2 * pad)))
    cr = (rows.min() + rows.max() + 1) // 2
    cc = (cols.min() + cols.max() + 1) // 2
    return int(cc - side // 2), int(cr - side // 2), side


def gen_scene(
    assets: dict[str, tuple[TriangleMesh, SymmetrySet]],
    cam: CameraIntrinsics,
    clutter: int,
    seed: int,
    primary: str | None = None,
    max_tries: int = 1000,
) -> SceneSample:
    """Scene with rejection-sampled non-intersecting poses.

    clutter 0: one unoccluded object (``primary`` or seed-chosen).
    clutter 1: three objects placed so at least one is 20-60%% occluded.
    """
    rng = np.random.default_rng(seed)
    names = sorted(assets)
    if clutter == 0:
        chosen = [primary if primary is not None else names[int(rng.integers(len(names)))]]
    else:
        order = rng.permutation(len(names))
        chosen = [names[i] for i in order[:3]]
        if primary is not None and primary not in chosen:
            chosen[0] = primary
    for attempt in range(max_tries):
        poses = []
        ok = True
        for oi, name in enumerate(chosen):
            mesh = assets[name][0]
            placed = False
            for _ in range(50):
                lateral = 0.04 if clutter == 0 else 0.07
                pose = _random_pose(rng, lateral=lateral)
                if clutter == 1:
                    # stagger depth so nearer objects can occlude farther ones
                    z = 0.52 + 0.1 * oi + rng.uniform(0, 0.04)
                    pose = Pose(pose.r, np.array([pose.t[0], pose.t[1], z]))
                if _in_frustum(mesh, pose, cam) and _aabbs_disjoint(
                    [(assets[c][0], p) for c, p in zip(chosen, poses)] + [(mesh, pose)]
                ):
                    poses.append(pose)
                    placed = True
                    break
            if not placed:
                ok = False
                break
        if not ok:
            continue
        renders = [rasterize(assets[c][0], p, cam) for c, p in zip(chosen, poses)]
        merged, owner = merge_renders(renders)
        objects = []
        usable = True
        for oi, (name, pose) in enumerate(zip(chosen, poses)):
            solo_px = int(renders[oi].mask.sum())
            visible = owner == oi
            vis_px = int(visible.sum())
            if solo_px == 0 or vis_px < 32:
                usable = False
                break
            visib = vis_px / solo_px
            coord = np.where(visible[..., None], renders[oi].coord_map, np.nan).astype(np.float32)
            objects.append(
                SceneObject(
                    object_id=name,
                    pose=pose,
                    visib_fract=visib,
                    crop_box=_crop_box(visible),
                    mask=visible,
                    coord_map=coord,
                )
            )
        if not usable:
            continue
        if clutter == 1:
            occluded = [o for o in objects if 0.4 <= o.visib_fract <= 0.8]
            too_hidden = [o for o in objects if o.visib_fract < 0.3]
            if not occluded or too_hidden:
                continue
        return SceneSample(
            rgb=merged.color.astype(np.float32),
            depth=merged.depth.astype(np.float32),
            cam=cam,
            objects=objects,
            seed=seed,
            clutter=clutter,
        )
    raise SceneError(f"placement failed after {max_tries} attempts (seed {seed})")


# ---------------------------------------------------------------------------
# persistence


def save_scene(scene_dir: str | Path, sample: SceneSample) -> None:
    d = Path(scene_dir)
    d.mkdir(parents=True, exist_ok=True)
    arrays = {"rgb": sample.rgb, "depth": sample.depth}
    for i, obj in enumerate(sample.objects):
        arrays[f"mask_{i}"] = obj.mask.astype(np.uint8)
        arrays[f"coord_{i}"] = obj.coord_map
    manifest = {
        "seed": sample.seed,
        "clutter": sample.clutter,
        "camera": {
            "fx": sample.cam.fx, "fy": sample.cam.fy, "cx": sample.cam.cx, "cy": sample.cam.cy,
            "width": sample.cam.width, "height": sample.cam.height,
        },
        "objects": [
            {
                "object_id": o.object_id,
                "pose": o.pose.matrix().tolist(),
                "visib_fract": o.visib_fract,
                "crop_box": list(o.crop_box),
            }
            for o in sample.objects
        ],
    }
    tensorio.write_archive(d / "maps.ta", arrays, meta={"kind": "scene"})
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_scene(scene_dir: str | Path) -> SceneSample:
    d = Path(scene_dir)
    manifest = json.loads((d / "manifest.json").read_text())
    arrays, _ = tensorio.read_archive(d / "maps.ta")
    c = manifest["camera"]
    cam = CameraIntrinsics(fx=c["fx"], fy=c["fy"], cx=c["cx"], cy=c["cy"], width=c["width"], height=c["height"])
    objects = []
    for i, o in enumerate(manifest["objects"]):
        objects.append(
            SceneObject(
                object_id=o["object_id"],
                pose=Pose.from_matrix(np.array(o["pose"])),
                visib_fract=o["visib_fract"],
                crop_box=tuple(o["crop_box"]),
                mask=arrays[f"mask_{i}"].astype(bool),
                coord_map=arrays[f"coord_{i}"],
            )
        )
    return SceneSample(
        rgb=arrays["rgb"], depth=arrays["depth"], cam=cam, objects=objects,
        seed=manifest["seed"], clutter=manifest["clutter"],
    )


def scene_dirs(dataset_dir: str | Path) -> list[Path]:
    return sorted(p for p in Path(dataset_dir).iterdir() if p.is_dir() and (p / "manifest.json").exists())


# ---------------------------------------------------------------------------
# crops


@dataclass
class CropBundle:
    object_id: str
    rgb: np.ndarray  # (S,S,3) float32
    mask: np.ndarray  # (S,S) bool
    coord_map: np.ndarray  # (S,S,3) float32, NaN off-mask
    cam: CameraIntrinsics  # intrinsics of the crop view
    box: tuple[int, int, int]
    gt_pose: Pose
    image_id: str = ""


def crop_object(sample: SceneSample, obj_index: int, out_size: int = CROP_SIZE, image_id: str = "") -> CropBundle:
    """Square GT-box crop resized to out_size (bilinear RGB, nearest maps).

    Out-of-image regions are zero / empty. The returned intrinsics describe
    the crop view, so poses solved in it live in the same camera frame.
    """
    obj = sample.objects[obj_index]
    col0, row0, side = obj.crop_box
    s = out_size / side
    # target pixel centers mapped into source continuous coordinates
    grid = (np.arange(out_size) + 0.5) / s
    src_cols = grid + col0
    src_rows = grid + row0
    nn_c = np.clip(np.floor(src_cols).astype(np.int64), 0, sample.cam.width - 1)
    nn_r = np.clip(np.floor(src_rows).astype(np.int64), 0, sample.cam.height - 1)
    inside_c = (src_cols >= 0) & (src_cols < sample.cam.width)
    inside_r = (src_rows >= 0) & (src_rows < sample.cam.height)
    inside = inside_r[:, None] & inside_c[None, :]

    rgb = _bilinear_sample(sample.rgb, src_rows, src_cols)
    rgb[~inside] = 0.0
    mask = obj.mask[nn_r[:, None], nn_c[None, :]] & inside
    coord = obj.coord_map[nn_r[:, None], nn_c[None, :]].copy()
    coord[~mask] = np.nan
    cam = CameraIntrinsics.virtual(
        fx=sample.cam.fx * s,
        fy=sample.cam.fy * s,
        cx=(sample.cam.cx - col0) * s,
        cy=(sample.cam.cy - row0) * s,
        width=out_size,
        height=out_size,
    )
    return CropBundle(
        object_id=obj.object_id,
        rgb=rgb.astype(np.float32),
        mask=mask,
        coord_map=coord.astype(np.float32),
        cam=cam,
        box=obj.crop_box,
        gt_pose=obj.pose,
        image_id=image_id,
    )


def _bilinear_sample(img: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Sample img at the continuous (row, col) grid (pixel centers at +0.5)."""
    h, w = img.shape[:2]
    r = np.clip(rows - 0.5, 0, h - 1)
    c = np.clip(cols - 0.5, 0, w - 1)
    r0 = np.clip(np.floor(r).astype(np.int64), 0, h - 2) if h > 1 else np.zeros_like(r, dtype=np.int64)
    c0 = np.clip(np.floor(c).astype(np.int64), 0, w - 2) if w > 1 else np.zeros_like(c, dtype=np.int64)
    fr = (r - r0)[:, None, None]
    fc = (c - c0)[None, :, None]
    i00 = img[r0[:, None], c0[None, :]]
    i01 = img[r0[:, None], np.minimum(c0 + 1, w - 1)[None, :]]
    i10 = img[np.minimum(r0 + 1, h - 1)[:, None], c0[None, :]]
    i11 = img[np.minimum(r0 + 1, h - 1)[:, None], np.minimum(c0 + 1, w - 1)[None, :]]
    return (
        i00 * (1 - fr) * (1 - fc) + i01 * (1 - fr) * fc + i10 * fr * (1 - fc) + i11 * fr * fc
    )


def crop_depth(sample: SceneSample, obj_index: int, out_size: int = CROP_SIZE) -> np.ndarray:
    """Nearest-resampled observed depth for the crop view (for ICP)."""
    obj = sample.objects[obj_index]
    col0, row0, side = obj.crop_box
    s = out_size / side
    grid = (np.arange(out_size) + 0.5) / s
    src_cols = grid + col0
    src_rows = grid + row0
    nn_c = np.clip(np.floor(src_cols).astype(np.int64), 0, sample.cam.width - 1)
    nn_r = np.clip(np.floor(src_rows).astype(np.int64), 0, sample.cam.height - 1)
    inside = ((src_rows >= 0) & (src_rows < sample.cam.height))[:, None] & (
        (src_cols >= 0) & (src_cols < sample.cam.width)
    )[None, :]
    depth = sample.depth[nn_r[:, None], nn_c[None, :]].copy()
    depth[~inside] = 0.0
    return depth
