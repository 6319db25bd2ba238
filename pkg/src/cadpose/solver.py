"""Deployment-time pose estimation.

Masked query embeddings are compared against key embeddings of surface
samples to form a per-pixel similarity; 2D-3D correspondences sampled from
the similarity feed minimal PnP solves inside RANSAC; hypotheses are ranked
by inliers, re-scored with the training-style correspondence score on
rendered visible coordinates, and the winner is polished by gradient-free
score maximization. An optional point-to-plane ICP refines against observed
depth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .geom import (
    CameraIntrinsics,
    Pose,
    Rotation,
    TriangleMesh,
    backproject,
    invert,
    project,
    rotvec_to_matrix,
    surface_samples,
)
from .render import rasterize


class SolverError(Exception):
    pass


class PnpDegenerateError(SolverError):
    pass


# ---------------------------------------------------------------------------
# similarity model


@dataclass
class SimilarityModel:
    pixels: np.ndarray  # (M,2) int64 (row, col) masked pixels entering the solver
    q: np.ndarray  # (M,De) query embeddings at those pixels
    key_points: np.ndarray  # (Ns,3) surface sample positions
    key_emb: np.ndarray  # (Ns,De) their key embeddings
    probs: np.ndarray  # (M,Ns) per-pixel softmax over points
    cam: CameraIntrinsics
    q_map: np.ndarray  # (H,W,De) full query map (for hypothesis scoring)
    mask: np.ndarray  # (H,W) bool solver mask

    @property
    def uv(self) -> np.ndarray:
        """Pixel centers (u,v) of the masked pixels."""
        return np.stack([self.pixels[:, 1] + 0.5, self.pixels[:, 0] + 0.5], axis=1)


def build_similarity(
    f_q: np.ndarray,
    mask_prob: np.ndarray,
    key_points: np.ndarray,
    key_emb: np.ndarray,
    cam: CameraIntrinsics,
    mask_thresh: float = 0.5,
    temperature: float = 1.0,
    max_pixels: int = 4096,
) -> SimilarityModel:
    """Dot-product scores between masked pixel queries and point keys.

    Pixels above the mask threshold enter; more than max_pixels are thinned
    deterministically (even stride over raster order). Fewer than 8 masked
    pixels is an error.
    """
    if len(key_points) < 4:
        raise SolverError("need at least 4 key samples")
    rows, cols = np.nonzero(mask_prob > mask_thresh)
    if len(rows) < 8:
        raise SolverError(f"insufficient support: {len(rows)} masked pixels")
    if len(rows) > max_pixels:
        sel = np.linspace(0, len(rows) - 1, max_pixels).astype(np.int64)
        rows, cols = rows[sel], cols[sel]
    q = f_q[rows, cols].astype(np.float32)
    scores = (q @ key_emb.T.astype(np.float32)) / temperature
    scores -= scores.max(axis=1, keepdims=True)
    e = np.exp(scores)
    probs = e / e.sum(axis=1, keepdims=True)
    return SimilarityModel(
        pixels=np.stack([rows, cols], axis=1).astype(np.int64),
        q=q,
        key_points=np.asarray(key_points, dtype=np.float64),
        key_emb=np.asarray(key_emb, dtype=np.float32),
        probs=probs,
        cam=cam,
        q_map=f_q.astype(np.float32),
        mask=mask_prob > mask_thresh,
    )


def sample_correspondences(sim: SimilarityModel, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Sample (2D pixel center, 3D point) pairs: pixels uniform over the masked
    set, the 3D point drawn from that pixel's similarity row."""
    if n < 1:
        raise SolverError("need n >= 1 correspondences")
    pick = rng.integers(0, len(sim.pixels), size=n)
    u = rng.random(n)
    cdf = np.cumsum(sim.probs[pick], axis=1)
    cdf[:, -1] = 1.0  # guard rounding
    pt_idx = np.array([np.searchsorted(cdf[i], u[i], side="right") for i in range(n)])
    pt_idx = np.minimum(pt_idx, sim.probs.shape[1] - 1)
    return sim.uv[pick], sim.key_points[pt_idx]


# ---------------------------------------------------------------------------
# PnP: EPnP (non-planar), homography decomposition (planar), LM polish


@dataclass
class PnpResult:
    pose: Pose
    reproj_rms: float
    refined: bool  # False when LM diverged and the closed-form pose was kept


def _rigid_fit(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares rigid transform R,t with R src + t ~= dst."""
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    h = (src - cs).T @ (dst - cd)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return r, cd - r @ cs


def _reproj_rms(pts: np.ndarray, uv: np.ndarray, k: CameraIntrinsics, r: np.ndarray, t: np.ndarray) -> float:
    cam = pts @ r.T + t
    if np.any(cam[:, 2] <= 0):
        return np.inf
    proj, _ = project(k, cam)
    return float(np.sqrt(np.mean(np.sum((proj - uv) ** 2, axis=1))))


def _epnp_solve(pts: np.ndarray, uv: np.ndarray, k: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    n = len(pts)
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    u_pca, s_pca, _ = np.linalg.svd(centered.T @ centered)
    ctrl = np.vstack([centroid, centroid + u_pca.T * np.sqrt(s_pca / n)[:, None]])  # (4,3)
    # barycentric coordinates: [ctrl^T; 1] alpha = [p; 1]
    a_mat = np.vstack([ctrl.T, np.ones(4)])
    rhs = np.vstack([pts.T, np.ones(n)])
    alphas = np.linalg.solve(a_mat, rhs)  # (4,n)
    m = np.zeros((2 * n, 12))
    for i in range(n):
        for j in range(4):
            m[2 * i, 3 * j] = alphas[j, i] * k.fx
            m[2 * i, 3 * j + 2] = alphas[j, i] * (k.cx - uv[i, 0])
            m[2 * i + 1, 3 * j + 1] = alphas[j, i] * k.fy
            m[2 * i + 1, 3 * j + 2] = alphas[j, i] * (k.cy - uv[i, 1])
    _, _, vt = np.linalg.svd(m.T @ m)
    kernel = vt[::-1][:4].T  # (12,4), columns ordered smallest singular value first

    dist_w = _pairwise6(ctrl)
    best = None
    for case in (1, 2, 3):
        betas = _solve_betas(kernel, dist_w, case)
        betas = _gauss_newton_betas(kernel, betas, dist_w)
        cc = (kernel @ betas).reshape(4, 3)
        pc = alphas.T @ cc  # (n,3)
        if pc[:, 2].mean() < 0:
            pc = -pc
        r, t = _rigid_fit(pts, pc)
        err = _reproj_rms(pts, uv, k, r, t)
        if best is None or err < best[0]:
            best = (err, r, t)
    return best[1], best[2]


def _pairwise6(c: np.ndarray) -> np.ndarray:
    out = []
    for i in range(3):
        for j in range(i + 1, 4):
            out.append(np.sum((c[i] - c[j]) ** 2))
    return np.array(out)


def _dist_rows(kernel: np.ndarray, betas: np.ndarray) -> np.ndarray:
    cc = (kernel @ betas).reshape(4, 3)
    return _pairwise6(cc)


def _solve_betas(kernel: np.ndarray, rho: np.ndarray, case: int) -> np.ndarray:
    """Closed-form betas after linearization, cases N=1,2,3 (as in the classic solver)."""
    v = [kernel[:, i].reshape(4, 3) for i in range(4)]
    # rows of L: pairwise differences of control points per kernel vector
    pairs = [(i, j) for i in range(3) for j in range(i + 1, 4)]
    dv = [[v[c][i] - v[c][j] for (i, j) in pairs] for c in range(4)]
    betas = np.zeros(4)
    if case == 1:
        l1 = np.array([[d @ d for d in dv[0]]]).T
        b = float(np.linalg.lstsq(l1, rho, rcond=None)[0][0])
        betas[0] = math.sqrt(abs(b))
    elif case == 2:
        cols = []
        for r in range(6):
            d0, d1 = dv[0][r], dv[1][r]
            cols.append([d0 @ d0, 2 * (d0 @ d1), d1 @ d1])
        sol = np.linalg.lstsq(np.array(cols), rho, rcond=None)[0]
        betas[0] = math.sqrt(abs(sol[0]))
        betas[1] = math.copysign(math.sqrt(abs(sol[2])), sol[1] * np.sign(sol[0]) if sol[0] != 0 else sol[1])
    else:
        cols = []
        for r in range(6):
            d0, d1, d2 = dv[0][r], dv[1][r], dv[2][r]
            cols.append([d0 @ d0, 2 * (d0 @ d1), d1 @ d1, 2 * (d0 @ d2), 2 * (d1 @ d2), d2 @ d2])
        sol = np.linalg.lstsq(np.array(cols), rho, rcond=None)[0]
        betas[0] = math.sqrt(abs(sol[0]))
        betas[1] = math.copysign(math.sqrt(abs(sol[2])), sol[1])
        betas[2] = math.copysign(math.sqrt(abs(sol[5])), sol[3])
        if sol[0] < 0:
            betas[1], betas[2] = -betas[1], -betas[2]
    return betas


def _gauss_newton_betas(kernel: np.ndarray, betas: np.ndarray, rho: np.ndarray, iters: int = 10) -> np.ndarray:
    pairs = [(i, j) for i in range(3) for j in range(i + 1, 4)]
    v = [kernel[:, c].reshape(4, 3) for c in range(4)]
    dctdc = np.empty((6, 4, 4))
    for r, (i, j) in enumerate(pairs):
        d = np.stack([v[c][i] - v[c][j] for c in range(4)])  # (4,3)
        dctdc[r] = d @ d.T
    b = betas.copy()
    for _ in range(iters):
        jac2 = np.einsum("rab,b->ra", dctdc, b)  # (6,4), J/2
        res = rho - np.einsum("ra,a->r", jac2, b)
        try:
            delta = np.linalg.lstsq(2.0 * jac2, res, rcond=None)[0]
        except np.linalg.LinAlgError:
            break
        b = b + delta
    return b


def _planar_pnp(pts: np.ndarray, uv: np.ndarray, k: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Homography decomposition for coplanar points."""
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    u_pca, _, _ = np.linalg.svd(centered.T @ centered)
    e1, e2 = u_pca[:, 0], u_pca[:, 1]
    q2d = np.stack([centered @ e1, centered @ e2], axis=1)
    h = _dlt_homography(q2d, uv)
    a = np.linalg.inv(k.matrix()) @ h
    lam = 1.0 / np.linalg.norm(a[:, 0])
    best = None
    for sign in (lam, -lam):
        r1, r2, tt = sign * a[:, 0], sign * a[:, 1], sign * a[:, 2]
        # orthonormalize [r1 r2 r1xr2]
        c = np.stack([r1, r2, np.cross(r1, r2)], axis=1)
        uu, _, vvt = np.linalg.svd(c)
        r_plane = uu @ np.diag([1, 1, np.sign(np.linalg.det(uu @ vvt))]) @ vvt
        e_mat = np.stack([e1, e2, np.cross(e1, e2)], axis=1)
        r_full = r_plane @ e_mat.T
        t_full = tt - r_full @ centroid
        cam_z = (pts @ r_full.T + t_full)[:, 2]
        if np.all(cam_z > 0):
            err = _reproj_rms(pts, uv, k, r_full, t_full)
            if best is None or err < best[0]:
                best = (err, r_full, t_full)
    if best is None:
        raise PnpDegenerateError("planar decomposition found no pose with positive depth")
    return best[1], best[2]


def _dlt_homography(q: np.ndarray, uv: np.ndarray) -> np.ndarray:
    def normalizer(x):
        c = x.mean(axis=0)
        s = math.sqrt(2.0) / max(np.mean(np.linalg.norm(x - c, axis=1)), 1e-12)
        t = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1]])
        return t

    tq, tu = normalizer(q), normalizer(uv)
    qh = np.column_stack([q, np.ones(len(q))]) @ tq.T
    uh = np.column_stack([uv, np.ones(len(uv))]) @ tu.T
    rows = []
    for (x, y, w), (u, v, ww) in zip(qh, uh):
        rows.append([0, 0, 0, -ww * x, -ww * y, -ww * w, v * x, v * y, v * w])
        rows.append([ww * x, ww * y, ww * w, 0, 0, 0, -u * x, -u * y, -u * w])
    _, _, vt = np.linalg.svd(np.array(rows))
    h = vt[-1].reshape(3, 3)
    return np.linalg.inv(tu) @ h @ tq


def refine_pnp_lm(
    pts: np.ndarray,
    uv: np.ndarray,
    k: CameraIntrinsics,
    r: np.ndarray,
    t: np.ndarray,
    iters: int = 20,
    tol: float = 1e-10,
) -> tuple[np.ndarray, np.ndarray, bool]:
    """Levenberg-Marquardt on reprojection error; returns (R, t, converged)."""
    lam = 1e-3
    r_cur, t_cur = r.copy(), t.copy()

    def residuals(rr, tt):
        cam = pts @ rr.T + tt
        z = np.maximum(cam[:, 2], 1e-12)
        pu = k.fx * cam[:, 0] / z + k.cx
        pv = k.fy * cam[:, 1] / z + k.cy
        return np.concatenate([uv[:, 0] - pu, uv[:, 1] - pv]), cam

    res, cam = residuals(r_cur, t_cur)
    cost = res @ res
    improved_any = True
    for _ in range(iters):
        z = np.maximum(cam[:, 2], 1e-12)
        inv_z = 1.0 / z
        du = np.stack([k.fx * inv_z, np.zeros_like(z), -k.fx * cam[:, 0] * inv_z**2], axis=1)
        dv = np.stack([np.zeros_like(z), k.fy * inv_z, -k.fy * cam[:, 1] * inv_z**2], axis=1)
        # d p_cam / d(rotvec) = -[p]x ; d p_cam / dt = I
        px = np.zeros((len(pts), 3, 6))
        for i, p in enumerate(cam):
            px[i, :, :3] = -np.array([[0, -p[2], p[1]], [p[2], 0, -p[0]], [-p[1], p[0], 0]])
            px[i, :, 3:] = np.eye(3)
        j = np.concatenate([np.einsum("ij,ijk->ik", du, px), np.einsum("ij,ijk->ik", dv, px)], axis=0)
        g = j.T @ res
        h = j.T @ j
        stepped = False
        for _try in range(8):
            try:
                delta = np.linalg.solve(h + lam * np.diag(np.diag(h)) + 1e-15 * np.eye(6), g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            r_new = rotvec_to_matrix(delta[:3]) @ r_cur
            t_new = rotvec_to_matrix(delta[:3]) @ t_cur + delta[3:]
            res_new, cam_new = residuals(r_new, t_new)
            cost_new = res_new @ res_new
            if cost_new < cost:
                r_cur, t_cur, res, cam, cost = r_new, t_new, res_new, cam_new, cost_new
                lam = max(lam / 10, 1e-12)
                stepped = True
                break
            lam *= 10
        if not stepped:
            improved_any = False
            break
        if np.linalg.norm(delta) < tol:
            break
    return r_cur, t_cur, improved_any or cost < 1e-18


def pnp(pts: np.ndarray, uv: np.ndarray, k: CameraIntrinsics, lm_iters: int = 20) -> PnpResult:
    """Pose from >=4 2D-3D correspondences: closed-form init + LM polish.

    Coplanar configurations take the homography route; collinear points (or
    an unusable planar decomposition) raise PnpDegenerateError.
    """
    pts = np.asarray(pts, dtype=np.float64)
    uv = np.asarray(uv, dtype=np.float64)
    if len(pts) < 4:
        raise PnpDegenerateError(f"need >= 4 correspondences, got {len(pts)}")
    centered = pts - pts.mean(axis=0)
    svals = np.linalg.svd(centered, compute_uv=False)
    if svals[1] < 1e-9 * max(svals[0], 1e-12):
        raise PnpDegenerateError("points are collinear")
    planar = svals[2] < 1e-6 * svals[0]
    try:
        if planar:
            r0, t0 = _planar_pnp(pts, uv, k)
        else:
            r0, t0 = _epnp_solve(pts, uv, k)
    except np.linalg.LinAlgError as exc:
        raise PnpDegenerateError(f"closed-form PnP failed: {exc}") from exc
    r1, t1, converged = refine_pnp_lm(pts, uv, k, r0, t0, iters=lm_iters)
    if not converged and _reproj_rms(pts, uv, k, r0, t0) < _reproj_rms(pts, uv, k, r1, t1):
        r1, t1 = r0, t0
    rms = _reproj_rms(pts, uv, k, r1, t1)
    if not np.isfinite(rms):
        raise PnpDegenerateError("solution places points behind the camera")
    return PnpResult(Pose(Rotation(_orthonormalize(r1)), t1), rms, converged)


def _orthonormalize(r: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(r)
    return u @ np.diag([1.0, 1.0, np.sign(np.linalg.det(u @ vt))]) @ vt


# ---------------------------------------------------------------------------
# RANSAC


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 2000
    inlier_px: float = 2.0
    min_sample: int = 4
    temperature: float = 1.0
    seed: int = 0
    top_k: int = 8
    refit: bool = True
    early_exit_conf: float | None = 0.9999  # None disables adaptive termination


@dataclass
class PoseHypothesis:
    pose: Pose
    inliers: int
    score: float = float("nan")


def _iter_rng(seed: int, it: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.array([seed & 0xFFFFFFFFFFFFFFFF, it], dtype=np.uint64)))


def ransac(sim: SimilarityModel, k: CameraIntrinsics, cfg: RansacConfig) -> list[PoseHypothesis]:
    """Minimal-sample PnP hypotheses ranked by argmax-correspondence inliers.

    Each iteration draws its own counter-based RNG stream, so results are
    independent of scheduling. Adaptive early termination stops once the
    best hypothesis explains enough of the data (config-disablable).
    """
    argmax_pts = sim.key_points[np.argmax(sim.probs, axis=1)]
    uv_all = sim.uv
    n_px = len(uv_all)
    hyps: list[PoseHypothesis] = []
    best_inliers = 0
    for it in range(cfg.iterations):
        rng = _iter_rng(cfg.seed, it)
        try:
            uv_s, pts_s = sample_correspondences(sim, cfg.min_sample, rng)
            res = pnp(pts_s, uv_s, k, lm_iters=8)
        except (PnpDegenerateError, np.linalg.LinAlgError):
            continue
        cam = pts_to_cam(argmax_pts, res.pose)
        proj, valid = project(k, cam)
        err = np.linalg.norm(proj - uv_all, axis=1)
        inliers = int(np.sum(valid & (err < cfg.inlier_px)))
        hyps.append(PoseHypothesis(res.pose, inliers))
        if inliers > best_inliers:
            best_inliers = inliers
        if cfg.early_exit_conf is not None and best_inliers >= cfg.min_sample:
            w = best_inliers / n_px
            if w >= 1.0:
                break
            needed = math.log(1.0 - cfg.early_exit_conf) / math.log(1.0 - w**4) if w > 0 else cfg.iterations
            if it + 1 >= needed:
                break
    if not hyps:
        raise SolverError("no consensus: every minimal sample was degenerate")
    hyps.sort(key=lambda h: -h.inliers)
    top = hyps[: cfg.top_k]
    if cfg.refit:
        top = [_refit_on_inliers(h, sim, argmax_pts, k, cfg) for h in top]
        top.sort(key=lambda h: -h.inliers)
    return top


def pts_to_cam(pts: np.ndarray, pose: Pose) -> np.ndarray:
    return pts @ pose.r.m.T + pose.t


def _refit_on_inliers(
    hyp: PoseHypothesis, sim: SimilarityModel, argmax_pts: np.ndarray, k: CameraIntrinsics, cfg: RansacConfig
) -> PoseHypothesis:
    cam = pts_to_cam(argmax_pts, hyp.pose)
    proj, valid = project(k, cam)
    err = np.linalg.norm(proj - sim.uv, axis=1)
    sel = valid & (err < cfg.inlier_px)
    if sel.sum() < 4:
        return hyp
    try:
        res = pnp(argmax_pts[sel], sim.uv[sel], k)
    except PnpDegenerateError:
        return hyp
    cam = pts_to_cam(argmax_pts, res.pose)
    proj, valid = project(k, cam)
    inliers = int(np.sum(valid & (np.linalg.norm(proj - sim.uv, axis=1) < cfg.inlier_px)))
    return PoseHypothesis(res.pose, inliers) if inliers >= hyp.inliers else hyp


# ---------------------------------------------------------------------------
# hypothesis scoring and refinement


@dataclass(frozen=True)
class RefineConfig:
    rounds: int = 2
    rot_bracket: float = math.radians(5.0)
    trans_frac: float = 0.02  # translation bracket as a fraction of diameter
    golden_iters: int = 8
    method: str = "golden"  # "golden" | "simplex"
    score_pixels: int = 1024


def score_pose(
    pose: Pose,
    sim: SimilarityModel,
    mesh: TriangleMesh,
    k: CameraIntrinsics,
    key_fn,
    max_pixels: int = 1024,
) -> float:
    """Mean correspondence score (positive-pair logit minus log-sum-exp over the
    key sample) of rendered-visible points against the pixel queries."""
    rd = rasterize(mesh, pose, k)
    both = rd.mask & sim.mask
    rows, cols = np.nonzero(both)
    if len(rows) < 16:
        return -np.inf
    if len(rows) > max_pixels:
        sel = np.linspace(0, len(rows) - 1, max_pixels).astype(np.int64)
        rows, cols = rows[sel], cols[sel]
    q = sim.q_map[rows, cols]
    keys = key_fn(rd.coord_map[rows, cols])
    s_pos = np.sum(q * keys, axis=1)
    s_all = q @ sim.key_emb.T
    stacked = np.concatenate([s_pos[:, None], s_all], axis=1)
    m = stacked.max(axis=1)
    lse = m + np.log(np.exp(stacked - m[:, None]).sum(axis=1))
    return float(np.mean(s_pos - lse))


def score_and_select(
    hyps: list[PoseHypothesis],
    sim: SimilarityModel,
    mesh: TriangleMesh,
    k: CameraIntrinsics,
    key_fn,
    cfg: RefineConfig = RefineConfig(),
) -> PoseHypothesis:
    if not hyps:
        raise SolverError("no hypotheses to score")
    scored = []
    for h in hyps:
        s = score_pose(h.pose, sim, mesh, k, key_fn, cfg.score_pixels)
        scored.append(PoseHypothesis(h.pose, h.inliers, s))
    return max(scored, key=lambda h: h.score)


def _pose_from_params(base: Pose, x: np.ndarray) -> Pose:
    r = rotvec_to_matrix(x[:3]) @ base.r.m
    t = rotvec_to_matrix(x[:3]) @ base.t + x[3:]
    return Pose(Rotation(_orthonormalize(r)), t)


def refine(
    pose: Pose,
    sim: SimilarityModel,
    mesh: TriangleMesh,
    k: CameraIntrinsics,
    key_fn,
    cfg: RefineConfig = RefineConfig(),
) -> PoseHypothesis:
    """Gradient-free local maximization of the correspondence score over SE(3).

    Coordinate-wise golden-section search (default) or a Nelder-Mead simplex;
    the returned pose never scores below the input (falls back to it).
    """
    base_score = score_pose(pose, sim, mesh, k, key_fn, cfg.score_pixels)
    brackets = np.array([cfg.rot_bracket] * 3 + [cfg.trans_frac * mesh.diameter] * 3)

    def f(x: np.ndarray) -> float:
        return score_pose(_pose_from_params(pose, x), sim, mesh, k, key_fn, cfg.score_pixels)

    best_x = np.zeros(6)
    best_score = base_score
    if cfg.method == "simplex":
        from scipy.optimize import minimize

        res = minimize(
            lambda x: -f(x),
            np.zeros(6),
            method="Nelder-Mead",
            options={"maxfev": 40 * cfg.rounds, "xatol": 1e-5, "fatol": 1e-6},
        )
        if -res.fun > best_score:
            best_x, best_score = res.x, -res.fun
    else:
        x = np.zeros(6)
        cur = base_score
        for _ in range(cfg.rounds):
            for axis in range(6):
                xi, si = _golden_axis(f, x, axis, brackets[axis], cfg.golden_iters, cur)
                if si > cur:
                    x, cur = xi, si
        if cur > best_score:
            best_x, best_score = x, cur
    if best_score <= base_score:
        return PoseHypothesis(pose, 0, base_score)
    return PoseHypothesis(_pose_from_params(pose, best_x), 0, best_score)


def _golden_axis(f, x: np.ndarray, axis: int, bracket: float, iters: int, cur: float):
    phi = (math.sqrt(5.0) - 1) / 2
    lo, hi = -bracket, bracket

    def g(v):
        xt = x.copy()
        xt[axis] += v
        return f(xt)

    c = hi - phi * (hi - lo)
    d = lo + phi * (hi - lo)
    fc, fd = g(c), g(d)
    for _ in range(iters):
        if fc > fd:
            hi, d, fd = d, c, fc
            c = hi - phi * (hi - lo)
            fc = g(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + phi * (hi - lo)
            fd = g(d)
    v, s = (c, fc) if fc > fd else (d, fd)
    if s > cur:
        out = x.copy()
        out[axis] += v
        return out, s
    return x, cur


# ---------------------------------------------------------------------------
# depth-based ICP refinement


@dataclass
class IcpResult:
    pose: Pose
    rmse: float
    iterations: int
    rmse_history: list[float] = field(default_factory=list)
    flagged: bool = False  # True when too little depth support; pose is the input


def icp_refine(
    pose: Pose,
    observed_depth: np.ndarray,
    mesh: TriangleMesh,
    k: CameraIntrinsics,
    iters: int = 30,
    n_model: int = 4096,
    dilate_px: int = 5,
    gate_frac: float = 0.1,
    min_pixels: int = 100,
    tol: float = 1e-6,
    seed: int = 0,
) -> IcpResult:
    """Point-to-plane ICP between observed depth (within the dilated rendered
    mask) and surface samples of the mesh. RMSE is non-increasing: a step that
    would raise it is reverted and iteration stops."""
    rd = rasterize(mesh, pose, k)
    region = ndimage.binary_dilation(rd.mask, iterations=dilate_px)
    depth_sel = np.where(region, observed_depth, 0.0)
    cloud, _ = backproject(k, depth_sel)
    if len(cloud) < min_pixels:
        return IcpResult(pose, np.inf, 0, [], flagged=True)
    scene = cloud.points
    mpts, _, mnrm, _ = surface_samples(mesh, n_model, seed)
    gate = gate_frac * mesh.diameter
    cur = pose
    history: list[float] = []

    def correspondences(p: Pose):
        cam_pts = mpts @ p.r.m.T + p.t
        cam_nrm = mnrm @ p.r.m.T
        dist, idx = cKDTree(cam_pts).query(scene, k=1)
        keep = dist < gate
        if keep.sum() < 10:
            keep = np.ones(len(scene), bool)
        res = np.einsum("ij,ij->i", cam_nrm[idx[keep]], scene[keep] - cam_pts[idx[keep]])
        return cam_pts[idx[keep]], cam_nrm[idx[keep]], scene[keep], res

    mp, mn, sc, res = correspondences(cur)
    rmse = float(np.sqrt(np.mean(res**2)))
    history.append(rmse)
    it = 0
    for it in range(1, iters + 1):
        a = np.concatenate([np.cross(mp, mn), mn], axis=1)  # (N,6)
        try:
            x = np.linalg.lstsq(a, res, rcond=None)[0]
        except np.linalg.LinAlgError:
            break
        rot = rotvec_to_matrix(x[:3])
        cand = Pose(Rotation(_orthonormalize(rot @ cur.r.m)), rot @ cur.t + x[3:])
        mp2, mn2, sc2, res2 = correspondences(cand)
        rmse2 = float(np.sqrt(np.mean(res2**2)))
        if rmse2 > rmse:
            break  # revert: keep cur
        cur, mp, mn, sc, res = cand, mp2, mn2, sc2, res2
        delta = rmse - rmse2
        rmse = rmse2
        history.append(rmse)
        if delta < tol:
            break
    return IcpResult(cur, rmse, it, history, flagged=False)
