"""Rigid-body geometry, pinhole projection and mesh/point-cloud primitives.

Conventions used throughout the package:

  * a pose maps model-frame points into the camera frame, x_cam = R x + t;
  * depth value 0 means "no surface" in every depth map;
  * model units are meters (loaders expose ``unit_scale`` for mm assets).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ORTHO_TOL = 1e-9


class GeometryError(Exception):
    pass


# ---------------------------------------------------------------------------
# rigid transforms


@dataclass(frozen=True)
class Rotation:
    """Proper rotation stored as a 3x3 matrix (orthonormal, det +1)."""

    m: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64)
        if m.shape != (3, 3):
            raise GeometryError(f"rotation matrix must be 3x3, got {m.shape}")
        err = np.linalg.norm(m.T @ m - np.eye(3))
        if err > 1e-6:
            raise GeometryError(f"matrix is not orthonormal (|R^T R - I|_F = {err:.3g})")
        if np.linalg.det(m) < 0:
            raise GeometryError("matrix has negative determinant (reflection)")
        object.__setattr__(self, "m", m)

    @staticmethod
    def identity() -> "Rotation":
        return Rotation(np.eye(3))

    @staticmethod
    def from_axis_angle(axis, angle: float) -> "Rotation":
        return Rotation(rotvec_to_matrix(np.asarray(axis, dtype=np.float64) * float(angle)))

    @staticmethod
    def random(rng: np.random.Generator) -> "Rotation":
        # QR of a Gaussian matrix, sign-fixed for a uniform proper rotation
        q, r = np.linalg.qr(rng.standard_normal((3, 3)))
        q *= np.sign(np.diag(r))
        if np.linalg.det(q) < 0:
            q[:, 2] *= -1
        return Rotation(q)

    def inv(self) -> "Rotation":
        return Rotation(self.m.T)


@dataclass(frozen=True)
class Pose:
    r: Rotation
    t: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(t)):
            raise GeometryError("translation must be finite")
        object.__setattr__(self, "t", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(Rotation.identity(), np.zeros(3))

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return Pose(Rotation(m[:3, :3]), m[:3, 3])

    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.r.m
        out[:3, 3] = self.t
        return out

    def apply(self, pts: np.ndarray) -> np.ndarray:
        """Transform an (N,3) or (3,) array of points."""
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.r.m.T + self.t


def compose(a: Pose, b: Pose) -> Pose:
    """Pose applying b first, then a: x -> R_a (R_b x + t_b) + t_a."""
    return Pose(Rotation(a.r.m @ b.r.m), a.r.m @ b.t + a.t)


def invert(p: Pose) -> Pose:
    rt = p.r.m.T
    return Pose(Rotation(rt), -rt @ p.t)


def rot_geodesic(a: Rotation, b: Rotation) -> float:
    """Geodesic angle between two rotations, in [0, pi]."""
    c = (np.trace(a.m.T @ b.m) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def rotvec_to_matrix(w: np.ndarray) -> np.ndarray:
    """Rodrigues formula; w is axis * angle."""
    w = np.asarray(w, dtype=np.float64).reshape(3)
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        k = _skew(w)
        return np.eye(3) + k  # first-order term, exact enough below 1e-12
    k = _skew(w / theta)
    return np.eye(3) + math.sin(theta) * k + (1.0 - math.cos(theta)) * (k @ k)


def matrix_to_rotvec(m: np.ndarray) -> np.ndarray:
    """Inverse of rotvec_to_matrix via the quaternion route (stable near pi)."""
    q = matrix_to_quat(m)
    w, xyz = q[0], q[1:]
    n = np.linalg.norm(xyz)
    if n < 1e-12:
        return np.zeros(3)
    angle = 2.0 * math.atan2(n, w)
    if angle > math.pi:
        angle -= 2.0 * math.pi
    return xyz / n * angle


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) with w >= 0."""
    m = np.asarray(m, dtype=np.float64)
    tr = np.trace(m)
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2.0
        q = np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(m)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = math.sqrt(max(1.0 + m[i, i] - m[j, j] - m[k, k], 0.0)) * 2.0
        q = np.empty(4)
        q[0] = (m[k, j] - m[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (m[j, i] + m[i, j]) / s
        q[1 + k] = (m[k, i] + m[i, k]) / s
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def _skew(w: np.ndarray) -> np.ndarray:
    return np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]], dtype=np.float64)


# ---------------------------------------------------------------------------
# camera


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    # crop views derived from a physical camera may have their principal
    # point outside the crop; construct those via .virtual()
    strict: bool = True

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")
        if not np.all(np.isfinite([self.fx, self.fy, self.cx, self.cy])):
            raise GeometryError("intrinsics must be finite")
        if self.strict and not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError("principal point must lie inside the image")

    @staticmethod
    def virtual(fx, fy, cx, cy, width, height) -> "CameraIntrinsics":
        return CameraIntrinsics(fx, fy, cx, cy, width, height, strict=False)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])


Z_MIN = 1e-6


def project(k: CameraIntrinsics, pts_cam: np.ndarray, z_min: float = Z_MIN) -> tuple[np.ndarray, np.ndarray]:
    """Pinhole projection of camera-frame points.

    Returns (uv, valid): uv is (N,2) continuous pixel coordinates, valid flags
    points with z > z_min. Invalid rows still carry (clamped) values, never NaN.
    """
    pts = np.atleast_2d(np.asarray(pts_cam, dtype=np.float64))
    z = pts[:, 2]
    valid = z > z_min
    zsafe = np.where(valid, z, 1.0)
    uv = np.empty((len(pts), 2))
    uv[:, 0] = k.fx * pts[:, 0] / zsafe + k.cx
    uv[:, 1] = k.fy * pts[:, 1] / zsafe + k.cy
    return uv, valid


def backproject(k: CameraIntrinsics, depth: np.ndarray) -> tuple["PointCloud", np.ndarray]:
    """Lift a depth map to a camera-frame cloud, one point per depth>0 pixel.

    Returns (cloud, pixels) where pixels is (M,2) int64 (row, col) in raster
    order, preserving the pixel association of each point.
    """
    depth = np.asarray(depth, dtype=np.float64)
    rows, cols = np.nonzero(depth > 0)
    z = depth[rows, cols]
    pts = np.empty((len(z), 3))
    pts[:, 0] = (cols - k.cx) * z / k.fx
    pts[:, 1] = (rows - k.cy) * z / k.fy
    pts[:, 2] = z
    return PointCloud(pts), np.stack([rows, cols], axis=1).astype(np.int64)


# ---------------------------------------------------------------------------
# meshes and clouds


@dataclass
class PointCloud:
    points: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise GeometryError("point cloud contains non-finite coordinates")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(self.colors) != len(self.points):
                raise GeometryError("colors/points length mismatch")

    def __len__(self) -> int:
        return len(self.points)


def transform_points(p: Pose, cloud: PointCloud) -> PointCloud:
    return PointCloud(p.apply(cloud.points), cloud.colors)


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    vertex_colors: np.ndarray | None = None
    diameter: float = field(init=False)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.vertices) == 0 or len(self.faces) == 0:
            raise GeometryError("degenerate mesh")
        if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
            raise GeometryError("face index out of range")
        if self.vertex_colors is None:
            self.vertex_colors = np.full((len(self.vertices), 3), 0.7)
        else:
            self.vertex_colors = np.asarray(self.vertex_colors, dtype=np.float64).reshape(-1, 3)
            if len(self.vertex_colors) != len(self.vertices):
                raise GeometryError("vertex_colors/vertices length mismatch")
        # drop zero-area faces at load time
        areas = self.face_areas()
        keep = areas > 0
        if not np.all(keep):
            self.faces = self.faces[keep]
            if len(self.faces) == 0:
                raise GeometryError("degenerate mesh (all faces zero-area)")
        self.diameter = _max_pairwise_distance(self.vertices)
        if self.diameter <= 0:
            raise GeometryError("degenerate mesh (zero diameter)")

    def face_areas(self) -> np.ndarray:
        v = self.vertices
        a, b, c = v[self.faces[:, 0]], v[self.faces[:, 1]], v[self.faces[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def face_normals(self) -> np.ndarray:
        v = self.vertices
        a, b, c = v[self.faces[:, 0]], v[self.faces[:, 1]], v[self.faces[:, 2]]
        n = np.cross(b - a, c - a)
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.maximum(norm, 1e-30)

    def aabb(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


def _max_pairwise_distance(pts: np.ndarray, chunk: int = 512) -> float:
    best = 0.0
    for i in range(0, len(pts), chunk):
        d = np.linalg.norm(pts[i : i + chunk, None, :] - pts[None, :, :], axis=2)
        best = max(best, float(d.max()))
    return best


def surface_samples(mesh: TriangleMesh, n: int, seed: int):
    """Area-uniform surface samples.

    Returns (points, colors, normals, face_idx), deterministic for a seed.
    """
    if n < 1:
        raise GeometryError("need at least one sample")
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas()
    probs = areas / areas.sum()
    face_idx = rng.choice(len(mesh.faces), size=n, p=probs)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    # barycentric-uniform inside each chosen triangle
    w0, w1, w2 = 1.0 - r1, r1 * (1.0 - r2), r1 * r2
    f = mesh.faces[face_idx]
    v = mesh.vertices
    pts = w0[:, None] * v[f[:, 0]] + w1[:, None] * v[f[:, 1]] + w2[:, None] * v[f[:, 2]]
    c = mesh.vertex_colors
    cols = w0[:, None] * c[f[:, 0]] + w1[:, None] * c[f[:, 1]] + w2[:, None] * c[f[:, 2]]
    normals = mesh.face_normals()[face_idx]
    return pts, cols, normals, face_idx


def sample_surface(mesh: TriangleMesh, n: int, seed: int) -> PointCloud:
    pts, cols, _, _ = surface_samples(mesh, n, seed)
    return PointCloud(pts, cols)


# ---------------------------------------------------------------------------
# symmetries


@dataclass
class SymmetrySet:
    """Discrete symmetry transforms of an object; always includes identity."""

    transforms: list[Pose]

    def __post_init__(self):
        if not any(_is_identity(p) for p in self.transforms):
            self.transforms = [Pose.identity()] + list(self.transforms)

    @staticmethod
    def identity_only() -> "SymmetrySet":
        return SymmetrySet([Pose.identity()])

    def __len__(self) -> int:
        return len(self.transforms)


def _is_identity(p: Pose, tol: float = 1e-12) -> bool:
    return np.allclose(p.r.m, np.eye(3), atol=tol) and np.allclose(p.t, 0, atol=tol)


def load_symmetries(path: str | Path) -> SymmetrySet:
    """Load a sidecar file listing 4x4 transform matrices (JSON)."""
    data = json.loads(Path(path).read_text())
    mats = data["transforms"] if isinstance(data, dict) else data
    poses = [Pose.from_matrix(np.asarray(m, dtype=np.float64)) for m in mats]
    return SymmetrySet(poses)


def save_symmetries(path: str | Path, sym: SymmetrySet) -> None:
    Path(path).write_text(json.dumps({"transforms": [p.matrix().tolist() for p in sym.transforms]}, indent=1))


# ---------------------------------------------------------------------------
# mesh IO: ASCII PLY with optional vertex colors, minimal OBJ


def load_mesh(path: str | Path, unit_scale: float = 1.0) -> TriangleMesh:
    path = Path(path)
    if path.suffix.lower() == ".ply":
        return load_ply(path, unit_scale)
    if path.suffix.lower() == ".obj":
        return load_obj(path, unit_scale)
    raise GeometryError(f"unsupported mesh format: {path.suffix}")


def load_ply(path: str | Path, unit_scale: float = 1.0) -> TriangleMesh:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise GeometryError(f"{path}: not a PLY file")
    n_vert = n_face = 0
    vert_props: list[str] = []
    cur_element = None
    i = 1
    while i < len(lines):
        tok = lines[i].split()
        i += 1
        if not tok:
            continue
        if tok[0] == "format":
            if tok[1] != "ascii":
                raise GeometryError(f"{path}: only ASCII PLY is supported")
        elif tok[0] == "element":
            cur_element = tok[1]
            if tok[1] == "vertex":
                n_vert = int(tok[2])
            elif tok[1] == "face":
                n_face = int(tok[2])
        elif tok[0] == "property" and cur_element == "vertex" and tok[1] != "list":
            vert_props.append(tok[-1])
        elif tok[0] == "end_header":
            break
    body = [ln.split() for ln in lines[i:] if ln.strip()]
    if len(body) < n_vert + n_face:
        raise GeometryError(f"{path}: truncated PLY body")
    idx = {p: j for j, p in enumerate(vert_props)}
    verts = np.array([[float(row[idx["x"]]), float(row[idx["y"]]), float(row[idx["z"]])] for row in body[:n_vert]])
    colors = None
    if all(c in idx for c in ("red", "green", "blue")):
        colors = (
            np.array(
                [[float(row[idx["red"]]), float(row[idx["green"]]), float(row[idx["blue"]])] for row in body[:n_vert]]
            )
            / 255.0
        )
    faces = []
    for row in body[n_vert : n_vert + n_face]:
        cnt = int(row[0])
        ids = [int(x) for x in row[1 : 1 + cnt]]
        for j in range(1, cnt - 1):  # fan-triangulate polygons
            faces.append([ids[0], ids[j], ids[j + 1]])
    return TriangleMesh(verts * unit_scale, np.array(faces), colors)


def save_ply(path: str | Path, mesh: TriangleMesh) -> None:
    v = mesh.vertices
    c = np.clip(np.rint(mesh.vertex_colors * 255), 0, 255).astype(int)
    out = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(v)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        f"element face {len(mesh.faces)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    for p, col in zip(v, c):
        out.append(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {col[0]} {col[1]} {col[2]}")
    for f in mesh.faces:
        out.append(f"3 {f[0]} {f[1]} {f[2]}")
    Path(path).write_text("\n".join(out) + "\n")


def load_obj(path: str | Path, unit_scale: float = 1.0) -> TriangleMesh:
    verts, faces = [], []
    for ln in Path(path).read_text().splitlines():
        tok = ln.split()
        if not tok:
            continue
        if tok[0] == "v":
            verts.append([float(tok[1]), float(tok[2]), float(tok[3])])
        elif tok[0] == "f":
            ids = [int(t.split("/")[0]) - 1 for t in tok[1:]]
            for j in range(1, len(ids) - 1):
                faces.append([ids[0], ids[j], ids[j + 1]])
    if not verts:
        raise GeometryError(f"{path}: no vertices found")
    return TriangleMesh(np.array(verts) * unit_scale, np.array(faces))


def weld_vertices(mesh: TriangleMesh) -> tuple[np.ndarray, np.ndarray]:
    """Merge position-identical vertices; returns (welded_vertices, faces)."""
    uniq, inverse = np.unique(mesh.vertices, axis=0, return_inverse=True)
    return uniq, inverse[mesh.faces]


def euler_characteristic(mesh: TriangleMesh) -> list[int]:
    """V - E + F per connected component, computed on welded geometry."""
    verts, faces = weld_vertices(mesh)
    edges = set()
    parent = list(range(len(verts)))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for f in faces:
        for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
            edges.add((min(a, b), max(a, b)))
            ra, rb = find(int(a)), find(int(b))
            if ra != rb:
                parent[ra] = rb
    comp_of = np.array([find(i) for i in range(len(verts))])
    chis = []
    for comp in np.unique(comp_of[np.unique(faces)]):
        vs = np.nonzero(comp_of == comp)[0]
        vset = set(vs.tolist())
        ne = sum(1 for a, b in edges if a in vset)
        nf = sum(1 for f in faces if int(f[0]) in vset)
        chis.append(len(vs) - ne + nf)
    return chis
