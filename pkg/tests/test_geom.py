import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cadpose.geom import (
    CameraIntrinsics,
    GeometryError,
    PointCloud,
    Pose,
    Rotation,
    backproject,
    compose,
    euler_characteristic,
    invert,
    load_obj,
    load_ply,
    load_symmetries,
    project,
    rot_geodesic,
    sample_surface,
    save_ply,
    save_symmetries,
    SymmetrySet,
    transform_points,
    TriangleMesh,
)


def rand_pose(seed):
    rng = np.random.default_rng(seed)
    return Pose(Rotation.random(rng), rng.normal(size=3))


class TestPoseAlgebra:
    def test_identity_compose(self):
        p = rand_pose(1)
        q = compose(Pose.identity(), p)
        assert np.allclose(q.r.m, p.r.m) and np.allclose(q.t, p.t)

    def test_inverse_compose(self):
        p = rand_pose(2)
        q = compose(p, invert(p))
        assert np.linalg.norm(q.r.m - np.eye(3)) < 1e-9
        assert np.linalg.norm(q.t) < 1e-9

    def test_pure_translations_add(self):
        a = Pose(Rotation.identity(), [0, 0, 1])
        b = Pose(Rotation.identity(), [0, 1, 0])
        assert np.allclose(compose(a, b).t, [0, 1, 1])

    @given(st.integers(0, 1000), st.integers(0, 1000), st.integers(0, 1000))
    @settings(max_examples=25, deadline=None)
    def test_associative(self, s1, s2, s3):
        a, b, c = rand_pose(s1), rand_pose(s2), rand_pose(s3)
        lhs = compose(compose(a, b), c)
        rhs = compose(a, compose(b, c))
        assert np.linalg.norm(lhs.r.m - rhs.r.m) < 1e-9
        assert np.linalg.norm(lhs.t - rhs.t) < 1e-9

    def test_rotation_constructor_rejects_reflection(self):
        m = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(GeometryError):
            Rotation(m)

    def test_rotation_constructor_rejects_non_orthonormal(self):
        with pytest.raises(GeometryError):
            Rotation(np.eye(3) * 1.01)


class TestTransformPoints:
    def test_identity(self):
        cloud = PointCloud(np.random.default_rng(0).normal(size=(10, 3)))
        out = transform_points(Pose.identity(), cloud)
        assert np.array_equal(out.points, cloud.points)

    def test_z_rotation_axis_permutation(self):
        p = Pose(Rotation.from_axis_angle([0, 0, 1], math.pi / 2), [0, 0, 0])
        out = transform_points(p, PointCloud([[1.0, 0.0, 0.0]]))
        assert np.allclose(out.points[0], [0, 1, 0], atol=1e-12)

    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(3)
        p = rand_pose(4)
        pts = rng.normal(size=(100, 3))
        out = transform_points(p, PointCloud(pts)).points
        for i in range(100):
            expect = p.r.m @ pts[i] + p.t
            assert np.allclose(out[i], expect, atol=1e-12)

    def test_inverse_roundtrip(self):
        p = rand_pose(5)
        pts = PointCloud(np.random.default_rng(6).normal(size=(50, 3)))
        back = transform_points(invert(p), transform_points(p, pts))
        assert np.allclose(back.points, pts.points, atol=1e-9)


class TestProjection:
    k = CameraIntrinsics(fx=100, fy=100, cx=112, cy=112, width=224, height=224)

    def test_principal_ray(self):
        uv, valid = project(self.k, np.array([[0.0, 0.0, 1.0]]))
        assert valid[0] and np.allclose(uv[0], [112, 112])

    def test_behind_camera_flagged(self):
        _, valid = project(self.k, np.array([[0.0, 0.0, -1.0]]))
        assert not valid[0]

    def test_similar_triangles(self):
        uv, _ = project(self.k, np.array([[0.5, 0.0, 1.0]]))
        assert np.isclose(uv[0, 0], 162.0)

    def test_backproject_single_pixel(self):
        depth = np.zeros((224, 224))
        depth[112, 112] = 1.0
        cloud, px = backproject(self.k, depth)
        assert len(cloud) == 1
        assert np.allclose(cloud.points[0], [0, 0, 1])
        assert np.array_equal(px[0], [112, 112])

    def test_backproject_empty(self):
        cloud, px = backproject(self.k, np.zeros((10, 10)))
        assert len(cloud) == 0 and len(px) == 0

    def test_project_backproject_roundtrip(self):
        rng = np.random.default_rng(7)
        depth = np.zeros((224, 224))
        rr = rng.integers(0, 224, 300)
        cc = rng.integers(0, 224, 300)
        depth[rr, cc] = rng.uniform(0.5, 2.0, 300)
        cloud, px = backproject(self.k, depth)
        uv, valid = project(self.k, cloud.points)
        assert valid.all()
        # pixel association: projection returns the (col, row) it came from
        assert np.allclose(uv[:, 0], px[:, 1], atol=1e-6)
        assert np.allclose(uv[:, 1], px[:, 0], atol=1e-6)

    def test_intrinsics_validation(self):
        with pytest.raises(GeometryError):
            CameraIntrinsics(fx=-1, fy=1, cx=0, cy=0, width=10, height=10)
        with pytest.raises(GeometryError):
            CameraIntrinsics(fx=1, fy=1, cx=20, cy=0, width=10, height=10)


def unit_square_mesh():
    verts = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=float)
    faces = np.array([[0, 1, 2], [0, 2, 3]])
    return TriangleMesh(verts, faces)


class TestSampleSurface:
    def test_mean_near_centroid(self):
        cloud = sample_surface(unit_square_mesh(), 10000, seed=0)
        assert np.linalg.norm(cloud.points.mean(axis=0) - [0.5, 0.5, 0.0]) < 0.02

    def test_single_triangle_containment(self):
        mesh = TriangleMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], float), np.array([[0, 1, 2]]))
        cloud = sample_surface(mesh, 3, seed=1)
        for p in cloud.points:
            # barycentric coordinates of points in the xy triangle
            assert p[0] >= -1e-12 and p[1] >= -1e-12 and p[0] + p[1] <= 1 + 1e-12

    def test_deterministic(self):
        a = sample_surface(unit_square_mesh(), 100, seed=3)
        b = sample_surface(unit_square_mesh(), 100, seed=3)
        assert np.array_equal(a.points, b.points)

    def test_face_frequency_matches_area(self):
        # two triangles with area ratio 4:1
        verts = np.array([[0, 0, 0], [2, 0, 0], [0, 2, 0], [5, 0, 0], [6, 0, 0], [5, 1, 0]], float)
        faces = np.array([[0, 1, 2], [3, 4, 5]])
        mesh = TriangleMesh(verts, faces)
        n = 100000
        cloud = sample_surface(mesh, n, seed=5)
        frac_big = np.mean(cloud.points[:, 0] < 4.0)
        p = 0.8
        sigma = math.sqrt(p * (1 - p) / n)
        assert abs(frac_big - p) < 3 * sigma

    def test_empty_mesh_error(self):
        with pytest.raises(GeometryError, match="degenerate"):
            TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=int))


class TestRotGeodesic:
    def test_zero_for_equal(self):
        r = Rotation.random(np.random.default_rng(1))
        assert rot_geodesic(r, r) < 1e-9

    def test_pi_for_opposite(self):
        a = Rotation.identity()
        b = Rotation.from_axis_angle([0, 0, 1], math.pi)
        assert abs(rot_geodesic(a, b) - math.pi) < 1e-9

    def test_matches_quaternion_oracle(self):
        from scipy.spatial.transform import Rotation as SciRot

        rng = np.random.default_rng(9)
        for _ in range(20):
            a, b = Rotation.random(rng), Rotation.random(rng)
            expect = SciRot.from_matrix(a.m.T @ b.m).magnitude()
            assert abs(rot_geodesic(a, b) - expect) < 1e-9


class TestMeshIO:
    def test_ply_roundtrip(self, tmp_path, cube):
        path = tmp_path / "cube.ply"
        save_ply(path, cube)
        back = load_ply(path)
        assert np.allclose(back.vertices, cube.vertices, atol=1e-6)
        assert np.array_equal(back.faces, cube.faces)
        assert np.abs(back.vertex_colors - cube.vertex_colors).max() <= 0.5 / 255 + 1e-9

    def test_ply_unit_scale(self, tmp_path, cube):
        path = tmp_path / "cube.ply"
        save_ply(path, cube)
        scaled = load_ply(path, unit_scale=0.001)
        assert np.isclose(scaled.diameter, cube.diameter * 0.001)

    def test_obj_minimal(self, tmp_path):
        path = tmp_path / "tri.obj"
        path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nv 1 1 0\nf 1 2 3\nf 2 4 3\n")
        mesh = load_obj(path)
        assert len(mesh.vertices) == 4 and len(mesh.faces) == 2

    def test_obj_quad_fan(self, tmp_path):
        path = tmp_path / "quad.obj"
        path.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
        assert len(load_obj(path).faces) == 2

    def test_symmetry_sidecar_roundtrip(self, tmp_path):
        sym = SymmetrySet([Pose(Rotation.from_axis_angle([0, 0, 1], math.pi), np.zeros(3))])
        path = tmp_path / "obj.sym.json"
        save_symmetries(path, sym)
        back = load_symmetries(path)
        assert len(back) == 2  # identity inserted
        assert any(np.allclose(p.r.m, np.eye(3)) for p in back.transforms)

    def test_euler_characteristic_cube(self, cube):
        assert euler_characteristic(cube) == [2]
