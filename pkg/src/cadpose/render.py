"""CPU rasterization of CAD meshes: RGB, depth, object-coordinate map and mask.

Flat vertex-color shading only (no lighting), so rendered appearance is a
pose-invariant property of the surface — a requirement for averaging visual
features across views when building the knowledge base.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geom import CameraIntrinsics, GeometryError, Pose, Rotation, project
from .kernels import raster_fill

KB_RENDER_SIZE = 224
DEFAULT_RADIUS_FACTOR = 2.5


@dataclass
class RenderOutput:
    color: np.ndarray  # (H,W,3) float32 in [0,1]
    depth: np.ndarray  # (H,W) float64, 0 = background
    coord_map: np.ndarray  # (H,W,3) float64 model-frame coords, NaN off-mask
    mask: np.ndarray  # (H,W) bool


@dataclass(frozen=True)
class Viewpoint:
    pose: Pose  # model frame -> camera frame, object centered at origin
    radius: float


def rasterize(mesh, pose: Pose, k: CameraIntrinsics, znear: float = 1e-6, backend: str | None = None) -> RenderOutput:
    """Z-buffered rasterization with perspective-correct interpolation.

    Depth, vertex color and model-frame coordinates are interpolated per
    pixel; an object fully outside the frustum yields an all-background
    output rather than an error.
    """
    verts_cam = pose.apply(mesh.vertices)
    uv, _ = project(k, verts_cam, z_min=-np.inf)
    depth = np.full((k.height, k.width), np.inf)
    # interleaved per-vertex attributes: color (3) + model coords (3)
    vattr = np.concatenate([mesh.vertex_colors, mesh.vertices], axis=1)
    attr = np.full((k.height, k.width, 6), np.nan)
    raster_fill(uv, verts_cam[:, 2], mesh.faces, vattr, znear, depth, attr, force_backend=backend)
    mask = np.isfinite(depth)
    depth[~mask] = 0.0
    color = np.clip(np.where(mask[..., None], attr[..., :3], 0.0), 0.0, 1.0).astype(np.float32)
    coord = attr[..., 3:]
    return RenderOutput(color=color, depth=depth, coord_map=coord, mask=mask)


def merge_renders(renders: list[RenderOutput]) -> tuple[RenderOutput, np.ndarray]:
    """Per-pixel min-depth merge of renders of disjoint objects.

    Returns the merged output and an (H,W) int owner map (-1 = background).
    """
    if not renders:
        raise GeometryError("nothing to merge")
    h, w = renders[0].depth.shape
    stack = np.stack([np.where(r.mask, r.depth, np.inf) for r in renders])
    owner = np.argmin(stack, axis=0)
    best = np.take_along_axis(stack, owner[None], axis=0)[0]
    mask = np.isfinite(best)
    owner = np.where(mask, owner, -1)
    depth = np.where(mask, best, 0.0)
    color = np.zeros((h, w, 3), dtype=np.float32)
    coord = np.full((h, w, 3), np.nan)
    for i, r in enumerate(renders):
        sel = owner == i
        color[sel] = r.color[sel]
        coord[sel] = r.coord_map[sel]
    return RenderOutput(color=color, depth=depth, coord_map=coord, mask=mask), owner


# ---------------------------------------------------------------------------
# viewpoint selection: subdivided icosahedron, cameras looking at the origin


def icosphere_vertices(subdiv_level: int) -> np.ndarray:
    """Unit-sphere vertices of a subdivided icosahedron (12, 42, 162, ...)."""
    if subdiv_level < 0:
        raise GeometryError("subdivision level must be >= 0")
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = [
        (-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
        (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
        (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.asarray(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdiv_level):
        midpoint: dict[tuple[int, int], int] = {}

        def mid(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            if key not in midpoint:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                midpoint[key] = len(verts) - 1
            return midpoint[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)]
        faces = new_faces
    return np.stack(verts)


def look_at_origin(center: np.ndarray) -> Pose:
    """Camera pose (world -> camera) for a camera at ``center`` facing the origin.

    Up vector is global +z unless the view direction is within ~2.5 degrees of
    it, in which case +x is used.
    """
    center = np.asarray(center, dtype=np.float64)
    fwd = -center / np.linalg.norm(center)
    up = np.array([0.0, 0.0, 1.0])
    if abs(fwd @ up) > 0.999:
        up = np.array([1.0, 0.0, 0.0])
    x = np.cross(up, fwd)
    x /= np.linalg.norm(x)
    y = np.cross(fwd, x)
    r = np.stack([x, y, fwd])
    return Pose(Rotation(r), -r @ center)


def sample_viewpoints(subdiv_level: int, radius: float) -> list[Viewpoint]:
    """Camera centers on a subdivided icosahedron scaled to ``radius``."""
    if radius <= 0:
        raise GeometryError("radius must be positive")
    return [Viewpoint(look_at_origin(v * radius), radius) for v in icosphere_vertices(subdiv_level)]


def viewpoints_for_count(n_views: int, radius: float) -> list[Viewpoint]:
    """Smallest subdivision level with >= n_views vertices, truncated to n_views."""
    level = 0
    while True:
        views = sample_viewpoints(level, radius)
        if len(views) >= n_views:
            return views[:n_views]
        level += 1
