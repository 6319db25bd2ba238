"""Procedural desk-scale objects: color-faceted cube, two-tone sphere,
L-bracket and a mug-like solid of revolution with a handle.

Every generator is a closed-form deterministic construction (the seed
argument is accepted for interface uniformity). Colors vary with surface
position so appearance pins down geometry; symmetry sidecars follow the
stated conventions (cube: 4-fold about z, sphere: 12-step discretization of
its continuous axis, others: identity).
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .geom import Pose, Rotation, SymmetrySet, TriangleMesh, save_ply, save_symmetries
from .render import icosphere_vertices

OBJECT_NAMES = ("cube", "sphere", "bracket", "mug")


def _z_rotations(n: int) -> SymmetrySet:
    poses = [Pose(Rotation.from_axis_angle([0, 0, 1], 2 * math.pi * i / n), np.zeros(3)) for i in range(n)]
    return SymmetrySet(poses)


def cube_mesh(edge: float = 0.08) -> TriangleMesh:
    """Axis-aligned cube with per-face colors (vertices duplicated per face).

    Each face gets a distinct hue with a bilinear brightness ramp across its
    corners, so every surface point has an almost unique color.
    """
    h = edge / 2
    face_hues = {
        "+x": (0.95, 0.25, 0.20),
        "-x": (0.20, 0.85, 0.90),
        "+y": (0.25, 0.90, 0.25),
        "-y": (0.90, 0.25, 0.90),
        "+z": (0.25, 0.35, 0.95),
        "-z": (0.95, 0.85, 0.20),
    }
    # (normal axis, sign, in-plane axes)
    layouts = [("+x", 0, 1, (1, 2)), ("-x", 0, -1, (1, 2)), ("+y", 1, 1, (0, 2)),
               ("-y", 1, -1, (0, 2)), ("+z", 2, 1, (0, 1)), ("-z", 2, -1, (0, 1))]
    verts, colors, faces = [], [], []
    for name, axis, sign, (a, b) in layouts:
        base = len(verts)
        hue = np.array(face_hues[name])
        for ub in (0, 1):
            for vb in (0, 1):
                p = np.zeros(3)
                p[axis] = sign * h
                p[a] = (ub * 2 - 1) * h
                p[b] = (vb * 2 - 1) * h
                verts.append(p)
                colors.append(hue * (0.55 + 0.25 * ub + 0.20 * vb))
        # two triangles, wound so the normal points along sign*axis
        quad = [base, base + 1, base + 3, base + 2]
        t1, t2 = [quad[0], quad[1], quad[2]], [quad[0], quad[2], quad[3]]
        for tri in (t1, t2):
            p0, p1, p2 = (verts[i] for i in tri)
            n = np.cross(p1 - p0, p2 - p0)
            if n[axis] * sign < 0:
                tri = [tri[0], tri[2], tri[1]]
            faces.append(tri)
    return TriangleMesh(np.array(verts), np.array(faces), np.clip(np.array(colors), 0, 1))


def sphere_mesh(radius: float = 0.05, subdiv: int = 3) -> TriangleMesh:
    """Icosphere with two hemisphere tones plus an azimuthal brightness ramp."""
    verts = icosphere_vertices(subdiv) * radius
    north = np.array([0.95, 0.55, 0.20])
    south = np.array([0.15, 0.55, 0.75])
    az = (np.arctan2(verts[:, 1], verts[:, 0]) + np.pi) / (2 * np.pi)  # [0,1)
    ramp = 0.65 + 0.35 * az
    tone = np.where(verts[:, 2:3] >= 0, north[None], south[None])
    colors = np.clip(tone * ramp[:, None], 0, 1)
    # faces from re-running the subdivision bookkeeping
    faces = _icosphere_faces(subdiv)
    return TriangleMesh(verts, faces, colors)


def _icosphere_faces(subdiv: int) -> np.ndarray:
    phi = (1.0 + math.sqrt(5.0)) / 2.0
    base = [
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
    n_verts = len(base)
    for _ in range(subdiv):
        midpoint: dict[tuple[int, int], int] = {}

        def mid(a: int, b: int) -> int:
            nonlocal n_verts
            key = (a, b) if a < b else (b, a)
            if key not in midpoint:
                midpoint[key] = n_verts
                n_verts += 1
            return midpoint[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)]
        faces = new_faces
    arr = np.array(faces)
    return arr


def bracket_mesh(leg_a: float = 0.09, leg_b: float = 0.07, thickness: float = 0.03, depth: float = 0.03) -> TriangleMesh:
    """L-shaped extruded solid, watertight, with a position-ramp coloring."""
    t = thickness
    poly = np.array([(0, 0), (leg_a, 0), (leg_a, t), (t, t), (t, leg_b), (0, leg_b)], dtype=np.float64)
    hz = depth / 2
    bottom = np.column_stack([poly, np.full(6, -hz)])
    top = np.column_stack([poly, np.full(6, hz)])
    verts = np.vstack([bottom, top])
    verts -= verts.mean(axis=0)
    # caps: two rectangles per cap (polygon is two axis-aligned boxes)
    cap = [(0, 1, 2), (0, 2, 3), (0, 3, 4), (0, 4, 5)]
    faces = []
    for a, b, c in cap:  # bottom cap, normal -z
        faces.append((a, c, b))
    for a, b, c in cap:  # top cap, normal +z
        faces.append((a + 6, b + 6, c + 6))
    for i in range(6):  # sides
        j = (i + 1) % 6
        faces.append((i, j, j + 6))
        faces.append((i, j + 6, i + 6))
    lo, hi = verts.min(axis=0), verts.max(axis=0)
    nrm = (verts - lo) / (hi - lo)
    colors = np.clip(np.column_stack([0.25 + 0.65 * nrm[:, 0], 0.25 + 0.65 * nrm[:, 1], 0.35 + 0.55 * nrm[:, 2]]), 0, 1)
    return TriangleMesh(verts, np.array(faces), colors)


def mug_mesh(radius: float = 0.035, height: float = 0.09, segments: int = 24) -> TriangleMesh:
    """Capped cylinder with angle/height-dependent color plus a handle tube.

    Two watertight components: the body (topological sphere) and a square
    cross-section arc handle whose capped ends sit inside the body.
    """
    hz = height / 2
    ang = 2 * np.pi * np.arange(segments) / segments
    ring = np.column_stack([radius * np.cos(ang), radius * np.sin(ang)])
    verts = [np.array([0.0, 0.0, -hz]), np.array([0.0, 0.0, hz])]
    for z in (-hz, hz):
        for xy in ring:
            verts.append(np.array([xy[0], xy[1], z]))
    faces = []
    bot0, top0 = 2, 2 + segments
    for i in range(segments):
        j = (i + 1) % segments
        faces.append((0, bot0 + j, bot0 + i))  # bottom cap, normal -z
        faces.append((1, top0 + i, top0 + j))  # top cap, normal +z
        faces.append((bot0 + i, bot0 + j, top0 + j))  # wall
        faces.append((bot0 + i, top0 + j, top0 + i))
    verts = np.array(verts)
    theta = np.arctan2(verts[:, 1], verts[:, 0])
    colors = np.column_stack(
        [
            0.45 + 0.40 * np.cos(theta),
            0.45 + 0.40 * np.sin(theta),
            0.30 + 0.60 * (verts[:, 2] + hz) / height,
        ]
    )
    body_v, body_f, body_c = verts, np.array(faces), np.clip(colors, 0, 1)

    # handle: square-section tube swept along an arc in the xz plane
    arc_r, half_w, n_arc = 0.78 * height / 2, 0.006, 8
    cx = radius + 0.004
    phis = np.linspace(-0.45 * np.pi, 0.45 * np.pi, n_arc + 1)
    hv, hf = [], []
    for phi in phis:
        c = np.array([cx + (arc_r - half_w) * 0.0, 0.0, 0.0])  # arc center
        center = np.array([cx + arc_r * math.cos(phi) * 0.35, 0.0, arc_r * math.sin(phi)])
        # local frame: tangent along the arc, normals in-plane and out-of-plane
        radial = np.array([math.cos(phi) * 0.35, 0.0, math.sin(phi)])
        radial /= np.linalg.norm(radial)
        side = np.array([0.0, 1.0, 0.0])
        for su in (-1, 1):
            for sv in (-1, 1):
                hv.append(center + su * half_w * radial + sv * half_w * side)
    hv = np.array(hv)
    for i in range(n_arc):
        a = 4 * i
        b = 4 * (i + 1)
        # ring corners ordered (-r,-s), (-r,+s), (+r,-s), (+r,+s)
        quads = [
            (a + 0, a + 1, b + 1, b + 0),  # inner face
            (a + 3, a + 2, b + 2, b + 3),  # outer face
            (a + 2, a + 0, b + 0, b + 2),  # -y side
            (a + 1, a + 3, b + 3, b + 1),  # +y side
        ]
        for q in quads:
            hf.append((q[0], q[1], q[2]))
            hf.append((q[0], q[2], q[3]))
    hf.append((0, 2, 3))  # start cap
    hf.append((0, 3, 1))
    e = 4 * n_arc
    hf.append((e + 0, e + 3, e + 2))  # end cap
    hf.append((e + 0, e + 1, e + 3))
    hcol = np.tile(np.array([0.55, 0.15, 0.15]), (len(hv), 1))
    hcol[:, 0] += 0.3 * (hv[:, 2] + hz) / height

    all_v = np.vstack([body_v, hv])
    all_f = np.vstack([body_f, np.array(hf) + len(body_v)])
    all_c = np.clip(np.vstack([body_c, hcol]), 0, 1)
    mesh = TriangleMesh(all_v, all_f, all_c)
    return mesh


def gen_assets(seed: int = 0) -> dict[str, tuple[TriangleMesh, SymmetrySet]]:
    """The four procedural objects with their symmetry sets."""
    del seed  # constructions are closed-form; kept for interface uniformity
    return {
        "cube": (cube_mesh(), _z_rotations(4)),
        "sphere": (sphere_mesh(), _z_rotations(12)),
        "bracket": (bracket_mesh(), SymmetrySet.identity_only()),
        "mug": (mug_mesh(), SymmetrySet.identity_only()),
    }


def write_assets(out_dir: str | Path, seed: int = 0) -> dict:
    """Write PLY meshes + symmetry sidecars + a manifest; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"objects": []}
    for name, (mesh, sym) in gen_assets(seed).items():
        save_ply(out / f"{name}.ply", mesh)
        save_symmetries(out / f"{name}.sym.json", sym)
        manifest["objects"].append({"object_id": name, "diameter": mesh.diameter})
    (out / "assets.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def load_assets(asset_dir: str | Path) -> dict[str, tuple[TriangleMesh, SymmetrySet]]:
    from .geom import load_mesh, load_symmetries

    asset_dir = Path(asset_dir)
    manifest = json.loads((asset_dir / "assets.json").read_text())
    out = {}
    for entry in manifest["objects"]:
        name = entry["object_id"]
        out[name] = (load_mesh(asset_dir / f"{name}.ply"), load_symmetries(asset_dir / f"{name}.sym.json"))
    return out
