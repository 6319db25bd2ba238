"""End-to-end orchestration: KB building, training data, estimation and evaluation."""

from __future__ import annotations

import time
from pathlib import Path

import numpy as np

from .config import RunConfig
from .geom import SymmetrySet, TriangleMesh, surface_samples
from .knowledge import KnowledgeBase, build_kb
from .metrics import (
    EvalRecord,
    MetricGrids,
    ObjectModel,
    average_recall,
    records_from_csv,
    write_estimates_csv,
    write_gt_csv,
    write_report,
)
from .posenet import Model, TrainSample, forward_maps
from .render import viewpoints_for_count
from .scenes import CropBundle, SceneSample, crop_depth, crop_object, load_scene, scene_dirs
from .solver import (
    IcpResult,
    RansacConfig,
    RefineConfig,
    SolverError,
    build_similarity,
    icp_refine,
    pnp,
    ransac,
    refine,
    score_and_select,
)

KEY_SAMPLE_SEED = 1234  # fixed so deployment is deterministic given a checkpoint


def build_kbs(
    assets: dict[str, tuple[TriangleMesh, SymmetrySet]], cfg: RunConfig
) -> dict[str, KnowledgeBase]:
    kbs = {}
    for name in cfg.objects:
        mesh = assets[name][0]
        vps = viewpoints_for_count(cfg.kb.views, cfg.kb.radius_factor * mesh.diameter)
        kbs[name] = build_kb(
            mesh,
            name,
            vps,
            extractor=cfg.net.extractor,
            n_points=cfg.kb.points,
            seed=cfg.seed,
            tau_vis=cfg.kb.tau_vis,
            bands=cfg.kb.bands,
        )
    return kbs


def training_samples(dataset_dir: str | Path) -> list[TrainSample]:
    """One training sample per (scene, object) crop, in deterministic order."""
    samples = []
    for sd in scene_dirs(dataset_dir):
        scene = load_scene(sd)
        for oi in range(len(scene.objects)):
            cb = crop_object(scene, oi, image_id=sd.name)
            samples.append(
                TrainSample(object_id=cb.object_id, rgb=cb.rgb, mask=cb.mask, coord_map=cb.coord_map)
            )
    return samples


class KeyEmbedder:
    """Frozen-parameter key-feature evaluation for deployment (numpy in/out)."""

    def __init__(self, model: Model, object_id: str):
        self.model = model
        self.object_id = object_id

    def __call__(self, points: np.ndarray) -> np.ndarray:
        from .posenet import key_features

        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        out = key_features(pts, self.model.kbs[self.object_id], self.model.store, self.model.cfg)
        return out.data


def estimate_crop(
    model: Model,
    crop: CropBundle,
    cfg: RunConfig,
    observed_depth: np.ndarray | None = None,
) -> dict:
    """Network forward + similarity + RANSAC + scoring + refinement (+ICP)."""
    t0 = time.perf_counter()
    obj = crop.object_id
    mesh = model.meshes[obj]
    f_q, mask_prob = forward_maps(model, crop.rgb, obj, use_retrieval=True)
    key_fn = KeyEmbedder(model, obj)
    key_pts, _, _, _ = surface_samples(mesh, cfg.solver.n_keys, KEY_SAMPLE_SEED)
    key_emb = key_fn(key_pts)
    sim = build_similarity(
        f_q.data,
        mask_prob.data,
        key_pts,
        key_emb,
        crop.cam,
        mask_thresh=cfg.solver.mask_thresh,
        temperature=cfg.ransac.temperature,
        max_pixels=cfg.solver.max_pixels,
    )
    hyps = ransac(sim, crop.cam, cfg.ransac)
    best = score_and_select(hyps, sim, mesh, crop.cam, key_fn, cfg.refine)
    refined = refine(best.pose, sim, mesh, crop.cam, key_fn, cfg.refine)
    pose = refined.pose
    icp_info: IcpResult | None = None
    if cfg.solver.icp and observed_depth is not None:
        icp_info = icp_refine(pose, observed_depth, mesh, crop.cam, iters=cfg.solver.icp_iters)
        pose = icp_info.pose
    return {
        "pose": pose,
        "score": refined.score,
        "time_ms": (time.perf_counter() - t0) * 1e3,
        "inliers": best.inliers,
        "icp": icp_info,
    }


def oracle_estimate_crop(crop: CropBundle, cfg: RunConfig, n_points: int = 500) -> dict:
    """Upper-bound estimate from ground-truth 2D-3D correspondences (no network)."""
    t0 = time.perf_counter()
    rows, cols = np.nonzero(crop.mask & np.isfinite(crop.coord_map[..., 0]))
    if len(rows) < 8:
        raise SolverError("insufficient support: oracle mask too small")
    sel = np.linspace(0, len(rows) - 1, min(n_points, len(rows))).astype(np.int64)
    rows, cols = rows[sel], cols[sel]
    pts = crop.coord_map[rows, cols].astype(np.float64)
    uv = np.stack([cols + 0.5, rows + 0.5], axis=1).astype(np.float64)
    res = pnp(pts, uv, crop.cam)
    return {
        "pose": res.pose,
        "score": 0.0,
        "time_ms": (time.perf_counter() - t0) * 1e3,
        "inliers": len(rows),
        "icp": None,
    }


def estimate_dataset(
    model: Model | None,
    dataset_dir: str | Path,
    cfg: RunConfig,
    oracle: bool = False,
    use_depth: bool = False,
) -> tuple[list[dict], list[dict]]:
    """Run estimation over every (scene, object); returns (est_rows, gt_rows)."""
    est_rows, gt_rows = [], []
    for sd in scene_dirs(dataset_dir):
        scene = load_scene(sd)
        for oi, obj in enumerate(scene.objects):
            if model is not None and obj.object_id not in model.kbs:
                continue
            if not oracle and model is None:
                raise SolverError("estimation without a model requires oracle mode")
            crop = crop_object(scene, oi, image_id=sd.name)
            depth = crop_depth(scene, oi) if use_depth else None
            try:
                if oracle:
                    out = oracle_estimate_crop(crop, cfg)
                else:
                    out = estimate_crop(model, crop, cfg, observed_depth=depth)
            except SolverError:
                continue
            est_rows.append(
                {
                    "image_id": sd.name,
                    "object_id": obj.object_id,
                    "pose": out["pose"],
                    "score": out["score"],
                    "time_ms": out["time_ms"],
                }
            )
            gt_rows.append(
                {
                    "image_id": sd.name,
                    "object_id": obj.object_id,
                    "pose": obj.pose,
                    "visib_fract": obj.visib_fract,
                    "cam": crop.cam,
                }
            )
    return est_rows, gt_rows


def evaluate_run(
    model: Model | None,
    dataset_dir: str | Path,
    assets: dict[str, tuple[TriangleMesh, SymmetrySet]],
    out_dir: str | Path,
    cfg: RunConfig,
    oracle: bool = False,
    use_depth: bool = False,
    grids: MetricGrids = MetricGrids(),
) -> dict:
    """estimate -> CSV -> metrics -> report; returns the report dict."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    est_rows, gt_rows = estimate_dataset(model, dataset_dir, cfg, oracle=oracle, use_depth=use_depth)
    est_csv = out / "estimates.csv"
    gt_csv = out / "gt.csv"
    write_estimates_csv(est_csv, est_rows)
    write_gt_csv(gt_csv, gt_rows)
    if not est_rows:
        return {"empty": True, "n_records": 0}
    records = records_from_csv(est_csv, gt_csv)
    objects = {name: ObjectModel(mesh=assets[name][0], sym=assets[name][1]) for name in assets}
    report = average_recall(records, objects, grids)
    write_report(out, report)
    return report


def correspondence_accuracy(
    model: Model,
    crop: CropBundle,
    sym: SymmetrySet,
    n_keys: int = 512,
    radius_frac: float = 0.1,
    max_pixels: int = 4096,
) -> float:
    """Fraction of GT-mask pixels whose argmax key point lies within
    radius_frac * diameter of the pixel's true 3D point (symmetry-aware)."""
    obj = crop.object_id
    mesh = model.meshes[obj]
    f_q, _ = forward_maps(model, crop.rgb, obj, use_retrieval=True)
    key_fn = KeyEmbedder(model, obj)
    key_pts, _, _, _ = surface_samples(mesh, n_keys, KEY_SAMPLE_SEED)
    key_emb = key_fn(key_pts)
    rows, cols = np.nonzero(crop.mask)
    if len(rows) == 0:
        return 0.0
    if len(rows) > max_pixels:
        sel = np.linspace(0, len(rows) - 1, max_pixels).astype(np.int64)
        rows, cols = rows[sel], cols[sel]
    q = f_q.data[rows, cols]
    best = np.argmax(q @ key_emb.T, axis=1)
    picked = key_pts[best]
    true_pts = crop.coord_map[rows, cols].astype(np.float64)
    dmin = np.full(len(rows), np.inf)
    for s in sym.transforms:
        d = np.linalg.norm(picked - s.apply(true_pts), axis=1)
        dmin = np.minimum(dmin, d)
    return float(np.mean(dmin < radius_frac * mesh.diameter))
