"""Shared fixtures: procedural assets, small knowledge bases, a synthetic
"converged" embedding model for solver tests (no training required)."""

from __future__ import annotations

import numpy as np
import pytest

from cadpose.assets import gen_assets
from cadpose.geom import CameraIntrinsics, Pose, Rotation
from cadpose.knowledge import PosEncConfig, build_kb, posenc3d
from cadpose.render import rasterize, viewpoints_for_count


@pytest.fixture(scope="session")
def assets():
    return gen_assets(0)


@pytest.fixture(scope="session")
def cube(assets):
    return assets["cube"][0]


@pytest.fixture(scope="session")
def cube_sym(assets):
    return assets["cube"][1]


@pytest.fixture(scope="session")
def cube_kb(cube):
    vps = viewpoints_for_count(16, 2.5 * cube.diameter)
    return build_kb(cube, "cube", vps, n_points=512, seed=1)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


CAM = CameraIntrinsics(fx=400.0, fy=400.0, cx=112.0, cy=112.0, width=224, height=224)


@pytest.fixture(scope="session")
def cam():
    return CAM


class SyntheticEmbedder:
    """Deterministic injective-ish point embedding standing in for a trained
    key/query net: a fixed random projection of the positional encoding."""

    def __init__(self, mesh, d_e: int = 16, seed: int = 7, gain: float = 4.0):
        self.pe_cfg = PosEncConfig.for_mesh(mesh, bands=6)
        rng = np.random.default_rng(seed)
        self.proj = rng.standard_normal((self.pe_cfg.dim, d_e)) / np.sqrt(self.pe_cfg.dim)
        self.gain = gain

    def __call__(self, points: np.ndarray) -> np.ndarray:
        pe = posenc3d(np.atleast_2d(points), self.pe_cfg)
        e = pe @ self.proj
        return self.gain * e / np.linalg.norm(e, axis=1, keepdims=True)


@pytest.fixture(scope="session")
def synthetic_sim_factory(cube, cam):
    """Builds a SimilarityModel from a ground-truth render and the synthetic
    embedder, emulating a converged model on the cube."""
    from cadpose.geom import surface_samples
    from cadpose.solver import build_similarity

    embed = SyntheticEmbedder(cube)

    def make(pose: Pose, n_keys: int = 1024, max_pixels: int = 2048):
        rd = rasterize(cube, pose, cam)
        f_q = np.zeros((cam.height, cam.width, 16), dtype=np.float32)
        f_q[rd.mask] = embed(rd.coord_map[rd.mask])
        mask_prob = np.where(rd.mask, 0.95, 0.02).astype(np.float32)
        key_pts, _, _, _ = surface_samples(cube, n_keys, seed=5)
        key_emb = embed(key_pts)
        sim = build_similarity(f_q, mask_prob, key_pts, key_emb, cam, max_pixels=max_pixels)
        return sim, embed, rd

    return make


def make_pose(rng_or_seed=0, z: float = 0.55) -> Pose:
    rng = np.random.default_rng(rng_or_seed) if isinstance(rng_or_seed, int) else rng_or_seed
    return Pose(Rotation.random(rng), np.array([0.01, -0.01, z]))
