"""Pose-error functions and recall aggregation.

Errors follow the benchmark conventions the evaluation protocol cites:
visible surface discrepancy over rendered depth maps, symmetry-aware maximum
3D surface distance, and symmetry-aware maximum projection distance, with
recall averaged over per-metric threshold grids.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geom import CameraIntrinsics, Pose, SymmetrySet, TriangleMesh, compose, project
from .render import rasterize


class MetricsError(Exception):
    pass


def mssd(est: Pose, gt: Pose, vertices: np.ndarray, sym: SymmetrySet) -> float:
    """min over symmetries of the max vertex displacement, in model units."""
    if len(vertices) == 0:
        raise MetricsError("empty vertex set")
    pts_est = est.apply(vertices)
    best = np.inf
    for s in sym.transforms:
        pts_gt = compose(gt, s).apply(vertices)
        best = min(best, float(np.linalg.norm(pts_est - pts_gt, axis=1).max()))
    return best


def mspd(est: Pose, gt: Pose, vertices: np.ndarray, sym: SymmetrySet, k: CameraIntrinsics) -> float:
    """min over symmetries of the max projected vertex displacement, in pixels.

    Any vertex behind the camera makes the record invalid: +inf.
    """
    proj_est, valid_est = project(k, est.apply(vertices))
    if not valid_est.all():
        return np.inf
    best = np.inf
    for s in sym.transforms:
        proj_gt, valid_gt = project(k, compose(gt, s).apply(vertices))
        if not valid_gt.all():
            continue
        best = min(best, float(np.linalg.norm(proj_est - proj_gt, axis=1).max()))
    return best


def vsd(
    est: Pose,
    gt: Pose,
    mesh: TriangleMesh,
    k: CameraIntrinsics,
    tau: float,
    observed_depth: np.ndarray | None = None,
    occlusion_delta: float = 0.01,
) -> float:
    """Visible surface discrepancy in [0,1] for one misalignment tolerance."""
    return vsd_grid(est, gt, mesh, k, [tau], observed_depth, occlusion_delta)[0]


def vsd_grid(
    est: Pose,
    gt: Pose,
    mesh: TriangleMesh,
    k: CameraIntrinsics,
    taus,
    observed_depth: np.ndarray | None = None,
    occlusion_delta: float = 0.01,
) -> list[float]:
    """VSD for several tolerances sharing one pair of renders.

    Visibility is the rendered mask, optionally pruned by observed scene depth
    (a rendered pixel occluded by nearer observed surface is not visible).
    Pixels visible in only one pose, or with depth differing by >= tau, count
    as mismatched; the error is the mismatch fraction over the union.
    """
    d_est = rasterize(mesh, est, k).depth
    d_gt = rasterize(mesh, gt, k).depth
    v_est = d_est > 0
    v_gt = d_gt > 0
    if observed_depth is not None:
        seen = observed_depth > 0
        v_est &= ~seen | (d_est <= observed_depth + occlusion_delta)
        v_gt &= ~seen | (d_gt <= observed_depth + occlusion_delta)
    union = v_est | v_gt
    inter = v_est & v_gt
    n_union = int(union.sum())
    if n_union == 0:
        return [1.0 for _ in taus]
    diff = np.abs(d_est - d_gt)[inter]
    n_outer = n_union - int(inter.sum())
    return [float((n_outer + int((diff >= tau).sum())) / n_union) for tau in taus]


# ---------------------------------------------------------------------------
# recall aggregation


@dataclass(frozen=True)
class MetricGrids:
    """Threshold grids; fractions are of the object diameter, MSPD thresholds
    are multiples of r = image_width / 640."""

    mssd_fracs: tuple = tuple(np.arange(0.05, 0.501, 0.05))
    mspd_factors: tuple = tuple(np.arange(5.0, 50.01, 5.0))
    vsd_tau_fracs: tuple = tuple(np.arange(0.05, 0.501, 0.05))
    vsd_thresholds: tuple = tuple(np.arange(0.05, 0.501, 0.05))
    theta_fine: tuple = (5.0, 10.0)


@dataclass
class EvalRecord:
    image_id: str
    object_id: str
    est: Pose
    gt: Pose
    cam: CameraIntrinsics
    visib_fract: float = 1.0
    observed_depth: np.ndarray | None = None
    score: float = 0.0
    time_ms: float = 0.0


@dataclass
class ObjectModel:
    mesh: TriangleMesh
    sym: SymmetrySet


def average_recall(
    records: list[EvalRecord],
    objects: dict[str, ObjectModel],
    grids: MetricGrids = MetricGrids(),
) -> dict:
    """Per-record errors -> recall per metric grid -> averaged recall.

    Returns a report dict with AR, AR_VSD, AR_MSSD, AR_MSPD, per-object
    fine-threshold MSPD recall, and the per-record error table.
    """
    if not records:
        raise MetricsError("no records to evaluate")
    rows = []
    vsd_hits = 0
    vsd_total = 0
    mssd_hits = 0
    mssd_total = 0
    mspd_hits = 0
    mspd_total = 0
    per_obj: dict[str, dict] = {}
    for rec in records:
        om = objects[rec.object_id]
        diam = om.mesh.diameter
        r_px = rec.cam.width / 640.0
        e_mssd = mssd(rec.est, rec.gt, om.mesh.vertices, om.sym)
        e_mspd = mspd(rec.est, rec.gt, om.mesh.vertices, om.sym, rec.cam)
        taus = [f * diam for f in grids.vsd_tau_fracs]
        e_vsds = vsd_grid(rec.est, rec.gt, om.mesh, rec.cam, taus, rec.observed_depth)
        mssd_hits += sum(e_mssd < f * diam for f in grids.mssd_fracs)
        mssd_total += len(grids.mssd_fracs)
        mspd_hits += sum(e_mspd < f * r_px for f in grids.mspd_factors)
        mspd_total += len(grids.mspd_factors)
        vsd_hits += sum(e < th for e in e_vsds for th in grids.vsd_thresholds)
        vsd_total += len(e_vsds) * len(grids.vsd_thresholds)
        entry = per_obj.setdefault(
            rec.object_id, {"n": 0, **{f"theta_{int(t)}": 0 for t in grids.theta_fine}}
        )
        entry["n"] += 1
        for t in grids.theta_fine:
            entry[f"theta_{int(t)}"] += int(e_mspd < t * r_px)
        rows.append(
            {
                "image_id": rec.image_id,
                "object_id": rec.object_id,
                "mssd": e_mssd,
                "mspd": e_mspd,
                "vsd_mean": float(np.mean(e_vsds)),
            }
        )
    ar_vsd = vsd_hits / vsd_total
    ar_mssd = mssd_hits / mssd_total
    ar_mspd = mspd_hits / mspd_total
    per_object = {
        obj: {f"recall_theta_{int(t)}": entry[f"theta_{int(t)}"] / entry["n"] for t in grids.theta_fine}
        | {"n": entry["n"]}
        for obj, entry in sorted(per_obj.items())
    }
    return {
        "AR": (ar_vsd + ar_mssd + ar_mspd) / 3.0,
        "AR_VSD": ar_vsd,
        "AR_MSSD": ar_mssd,
        "AR_MSPD": ar_mspd,
        "per_object": per_object,
        "records": rows,
        "n_records": len(records),
    }


# ---------------------------------------------------------------------------
# CSV interfaces (solver estimates + ground truth) and report writing

EST_FIELDS = ["image_id", "object_id"] + [f"r{i}{j}" for i in range(3) for j in range(3)] + [
    "tx", "ty", "tz", "score", "time_ms",
]
GT_FIELDS = ["image_id", "object_id"] + [f"r{i}{j}" for i in range(3) for j in range(3)] + [
    "tx", "ty", "tz", "visib_fract", "fx", "fy", "cx", "cy", "width", "height",
]


def _pose_to_row(pose: Pose) -> list[float]:
    return [*pose.r.m.reshape(-1).tolist(), *pose.t.tolist()]


def _pose_from_row(row: dict) -> Pose:
    m = np.array([[float(row[f"r{i}{j}"]) for j in range(3)] for i in range(3)])
    t = np.array([float(row["tx"]), float(row["ty"]), float(row["tz"])])
    return Pose.from_matrix(np.block([[m, t[:, None]], [np.zeros(3), 1.0]]))


def write_estimates_csv(path: str | Path, rows: list[dict]) -> None:
    """rows: {image_id, object_id, pose, score, time_ms}."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(EST_FIELDS)
        for r in rows:
            w.writerow([r["image_id"], r["object_id"], *_pose_to_row(r["pose"]), f"{r['score']:.9g}", f"{r['time_ms']:.3f}"])


def read_estimates_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        return [
            {
                "image_id": row["image_id"],
                "object_id": row["object_id"],
                "pose": _pose_from_row(row),
                "score": float(row["score"]),
                "time_ms": float(row["time_ms"]),
            }
            for row in csv.DictReader(f)
        ]


def write_gt_csv(path: str | Path, rows: list[dict]) -> None:
    """rows: {image_id, object_id, pose, visib_fract, cam}."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(GT_FIELDS)
        for r in rows:
            c: CameraIntrinsics = r["cam"]
            w.writerow(
                [r["image_id"], r["object_id"], *_pose_to_row(r["pose"]), f"{r['visib_fract']:.6f}",
                 c.fx, c.fy, c.cx, c.cy, c.width, c.height]
            )


def read_gt_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        out = []
        for row in csv.DictReader(f):
            out.append(
                {
                    "image_id": row["image_id"],
                    "object_id": row["object_id"],
                    "pose": _pose_from_row(row),
                    "visib_fract": float(row["visib_fract"]),
                    "cam": CameraIntrinsics.virtual(
                        fx=float(row["fx"]), fy=float(row["fy"]), cx=float(row["cx"]), cy=float(row["cy"]),
                        width=int(row["width"]), height=int(row["height"]),
                    ),
                }
            )
        return out


def records_from_csv(est_path, gt_path, observed_depth_lookup=None) -> list[EvalRecord]:
    """Join estimates with ground truth on (image_id, object_id)."""
    gt_rows = {(r["image_id"], r["object_id"]): r for r in read_gt_csv(gt_path)}
    records = []
    for er in read_estimates_csv(est_path):
        key = (er["image_id"], er["object_id"])
        if key not in gt_rows:
            continue
        g = gt_rows[key]
        depth = observed_depth_lookup(er["image_id"]) if observed_depth_lookup else None
        records.append(
            EvalRecord(
                image_id=er["image_id"],
                object_id=er["object_id"],
                est=er["pose"],
                gt=g["pose"],
                cam=g["cam"],
                visib_fract=g["visib_fract"],
                observed_depth=depth,
                score=er["score"],
                time_ms=er["time_ms"],
            )
        )
    return records


def write_report(out_dir: str | Path, report: dict) -> None:
    """CSV (metric,value rows + per-record errors) and a readable summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "value"])
        for key in ("AR", "AR_VSD", "AR_MSSD", "AR_MSPD", "n_records"):
            w.writerow([key, f"{report[key]:.6f}" if isinstance(report[key], float) else report[key]])
        for obj, vals in report["per_object"].items():
            for name, v in vals.items():
                w.writerow([f"{obj}/{name}", f"{v:.6f}" if isinstance(v, float) else v])
    with open(out / "errors.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["image_id", "object_id", "mssd", "mspd", "vsd_mean"])
        w.writeheader()
        for row in report["records"]:
            w.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in row.items()})
    lines = [
        f"records evaluated : {report['n_records']}",
        f"AR                : {report['AR']:.4f}",
        f"  AR_VSD          : {report['AR_VSD']:.4f}",
        f"  AR_MSSD         : {report['AR_MSSD']:.4f}",
        f"  AR_MSPD         : {report['AR_MSPD']:.4f}",
        "per-object fine-threshold MSPD recall:",
    ]
    for obj, vals in report["per_object"].items():
        detail = ", ".join(f"theta={k.split('_')[-1]}: {v:.3f}" for k, v in vals.items() if k.startswith("recall"))
        lines.append(f"  {obj:10s} n={vals['n']:3d}  {detail}")
    (out / "report.txt").write_text("\n".join(lines) + "\n")
