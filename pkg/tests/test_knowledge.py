import numpy as np
import pytest

from cadpose.features import ExtractorConfig, extract_dense, upsample_features
from cadpose.geom import invert, sample_surface, surface_samples
from cadpose.knowledge import (
    KnowledgeBaseError,
    PosEncConfig,
    assign_view_features,
    build_kb,
    load_kb,
    posenc3d,
    save_kb,
    _kb_camera,
)
from cadpose.render import rasterize, viewpoints_for_count


class TestPosenc:
    def test_center_is_cos_one(self):
        cfg = PosEncConfig(bands=6, box_min=np.array([-1, -2, 0.5]), box_max=np.array([1, 0, 1.5]))
        center = (cfg.box_min + cfg.box_max) / 2
        enc = posenc3d(center, cfg)
        sin_part = enc.reshape(3, 12)[:, :6]
        cos_part = enc.reshape(3, 12)[:, 6:]
        assert np.allclose(sin_part, 0, atol=1e-12)
        assert np.allclose(cos_part, 1, atol=1e-12)

    def test_band1_analytic(self):
        cfg = PosEncConfig(bands=1, box_min=np.array([-1.0, -1, -1]), box_max=np.array([1.0, 1, 1]))
        enc = posenc3d(np.array([1.0, 0.0, 0.0]), cfg)
        # axis x at the box edge: normalized 1 -> (sin pi, cos pi) = (0, -1)
        assert abs(enc[0]) < 1e-12 and abs(enc[1] + 1) < 1e-12
        # axes y,z at center: (0, 1)
        assert np.allclose(enc[2:], [0, 1, 0, 1], atol=1e-12)

    @pytest.mark.parametrize("bands", [1, 4, 6])
    def test_output_dim(self, bands):
        cfg = PosEncConfig(bands=bands)
        assert posenc3d(np.zeros(3), cfg).shape == (6 * bands,)
        assert posenc3d(np.zeros((5, 3)), cfg).shape == (5, 6 * bands)

    def test_degenerate_axis_maps_to_zero(self):
        cfg = PosEncConfig(bands=2, box_min=np.zeros(3), box_max=np.array([1.0, 0.0, 1.0]))
        enc = posenc3d(np.array([0.3, 0.0, 0.2]), cfg).reshape(3, 4)
        assert np.allclose(enc[1], [0, 0, 1, 1], atol=1e-12)  # sin=0, cos=1


class TestAssign:
    def test_surface_point_gets_pixel_feature(self, cube):
        vps = viewpoints_for_count(1, 2.5 * cube.diameter)
        k = _kb_camera(vps[0].radius, 224)
        view = rasterize(cube, vps[0].pose, k)
        feats = upsample_features(extract_dense(view.color.astype(np.float64)))
        rows, cols = np.nonzero(view.mask)
        pick = len(rows) // 2
        target = view.coord_map[rows[pick], cols[pick]]
        got, hit = assign_view_features(
            np.array([target]), view, feats, vps[0].pose, k, cube.diameter
        )
        assert hit[0]
        assert np.allclose(got[0], feats[rows[pick], cols[pick]], atol=1e-9)

    def test_back_faces_miss(self, cube):
        tau = 0.01
        vps = viewpoints_for_count(1, 2.5 * cube.diameter)
        k = _kb_camera(vps[0].radius, 224)
        view = rasterize(cube, vps[0].pose, k)
        feats = upsample_features(extract_dense(view.color.astype(np.float64)))
        pts, _, normals, _ = surface_samples(cube, 500, seed=3)
        _, hit = assign_view_features(pts, view, feats, vps[0].pose, k, cube.diameter, tau_vis=tau)
        # visibility oracle for the axis-aligned convex cube: the visible
        # surface is the union of camera-facing face squares; a sampled point
        # farther than tau*diameter from all of them must miss
        cam_center = invert(vps[0].pose).apply(np.zeros(3))
        h = 0.04
        d_visible = np.full(len(pts), np.inf)
        for axis in range(3):
            for sign in (-1.0, 1.0):
                if sign * cam_center[axis] <= h:  # face not facing the camera
                    continue
                others = [a for a in range(3) if a != axis]
                d_plane = np.abs(pts[:, axis] - sign * h)
                d_in = [np.maximum(np.abs(pts[:, a]) - h, 0.0) for a in others]
                d_face = np.sqrt(d_plane**2 + d_in[0] ** 2 + d_in[1] ** 2)
                d_visible = np.minimum(d_visible, d_face)
        # depth points deviate from the ideal surface by up to ~a pixel of
        # 3D spacing; pad the must-miss band accordingly
        pad = 1.5 * vps[0].radius / k.fx
        must_miss = d_visible > tau * cube.diameter + pad
        assert must_miss.any()
        assert not hit[must_miss].any()
        # points squarely on a facing face all hit
        facing = np.einsum("ij,ij->i", normals, cam_center - pts) > 1e-9
        assert hit[facing].mean() > 0.95

    def test_kdtree_equals_linear_scan(self, cube, rng):
        from scipy.spatial import cKDTree

        cloud = rng.uniform(-0.05, 0.05, size=(2000, 3))
        queries = rng.uniform(-0.05, 0.05, size=(1000, 3))
        _, kd_idx = cKDTree(cloud).query(queries, k=1)
        brute = np.argmin(((queries[:, None, :] - cloud[None]) ** 2).sum(axis=2), axis=1)
        assert np.array_equal(kd_idx, brute)

    def test_empty_view_all_miss(self, cube):
        vps = viewpoints_for_count(1, 2.5 * cube.diameter)
        k = _kb_camera(vps[0].radius, 224)
        view = rasterize(cube, vps[0].pose, k)
        view.mask[:] = False
        view.depth[:] = 0
        feats = np.zeros((224, 224, 32))
        _, hit = assign_view_features(np.zeros((10, 3)), view, feats, vps[0].pose, k, cube.diameter)
        assert not hit.any()


class TestBuildKb:
    def test_two_view_average(self, cube):
        vps = viewpoints_for_count(2, 2.5 * cube.diameter)
        kb = build_kb(cube, "cube", vps, n_points=256, seed=0)
        # recompute the per-view assignments independently and average
        k = _kb_camera(vps[0].radius, 224)
        pts = sample_surface(cube, 256, seed=0).points
        acc = np.zeros((256, 32))
        cnt = np.zeros(256, dtype=int)
        for vp in vps:
            view = rasterize(cube, vp.pose, k)
            feats = upsample_features(extract_dense(view.color.astype(np.float64)))
            got, hit = assign_view_features(pts, view, feats, vp.pose, k, cube.diameter)
            acc[hit] += got[hit]
            cnt += hit
        both = cnt == 2
        assert both.any()
        assert np.allclose(kb.visual[both], (acc[both] / 2).astype(np.float32), atol=1e-6)

    def test_sphere_coverage(self, assets):
        sphere = assets["sphere"][0]
        vps = viewpoints_for_count(42, 2.5 * sphere.diameter)
        kb = build_kb(sphere, "sphere", vps, n_points=2048, seed=0)
        assert (kb.view_count >= 1).mean() >= 0.99

    def test_single_view_cube_back_faces_zero(self, cube):
        vps = viewpoints_for_count(1, 2.5 * cube.diameter)
        kb = build_kb(cube, "cube", vps, n_points=512, seed=2)
        unseen = kb.view_count == 0
        assert unseen.any()
        assert np.all(kb.visual[unseen] == 0)
        # unseen points face away from the camera (convexity oracle)
        pts, _, normals, _ = surface_samples(cube, 512, seed=2)
        cam_center = invert(vps[0].pose).apply(np.zeros(3))
        facing = np.einsum("ij,ij->i", normals, cam_center - pts) > 1e-9
        assert not (unseen & facing).any()

    def test_view_order_independent_within_tolerance(self, cube):
        vps = viewpoints_for_count(4, 2.5 * cube.diameter)
        kb_fwd = build_kb(cube, "cube", vps, n_points=128, seed=1)
        kb_rev = build_kb(cube, "cube", vps[::-1], n_points=128, seed=1)
        assert np.abs(kb_fwd.visual - kb_rev.visual).max() < 1e-6
        assert np.array_equal(kb_fwd.view_count, kb_rev.view_count)

    def test_assignment_distance_bounded(self, cube):
        # every hit lies within tau_vis * diameter of a depth point by construction
        vps = viewpoints_for_count(1, 2.5 * cube.diameter)
        tau = 0.01
        k = _kb_camera(vps[0].radius, 224)
        view = rasterize(cube, vps[0].pose, k)
        feats = upsample_features(extract_dense(view.color.astype(np.float64)))
        pts = sample_surface(cube, 512, seed=5).points
        from scipy.spatial import cKDTree

        from cadpose.geom import backproject

        cloud_cam, _ = backproject(k, view.depth)
        cloud_model = invert(vps[0].pose).apply(cloud_cam.points)
        _, hit = assign_view_features(pts, view, feats, vps[0].pose, k, cube.diameter, tau_vis=tau)
        d, _ = cKDTree(cloud_model).query(pts[hit], k=1)
        assert (d < tau * cube.diameter).all()

    def test_no_viewpoints_error(self, cube):
        with pytest.raises(KnowledgeBaseError):
            build_kb(cube, "cube", [], n_points=16)


class TestKbIO:
    def test_roundtrip_bit_identical(self, cube_kb, tmp_path):
        path = tmp_path / "cube.kb"
        save_kb(cube_kb, path)
        back = load_kb(path)
        for attr in ("points", "colors", "visual", "posenc", "view_count"):
            assert np.array_equal(getattr(back, attr), getattr(cube_kb, attr))
        assert back.meta == cube_kb.meta

    def test_fingerprint_mismatch(self, cube_kb, tmp_path):
        path = tmp_path / "cube.kb"
        save_kb(cube_kb, path)
        with pytest.raises(KnowledgeBaseError, match="fingerprint"):
            load_kb(path, expect_fingerprint="deadbeef00000000")

    def test_loaded_kb_builds_same_tokens(self, cube_kb, tmp_path):
        from cadpose.retrieval import kb_tokens

        path = tmp_path / "cube.kb"
        save_kb(cube_kb, path)
        back = load_kb(path)
        assert np.array_equal(kb_tokens(back), kb_tokens(cube_kb))
