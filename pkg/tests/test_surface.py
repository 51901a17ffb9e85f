import numpy as np
import pytest

from satsplat.errors import NoSurface
from satsplat.splat import AffineCamera
from satsplat.surface import (
    Mesh,
    TsdfVolume,
    heightfield_mesh,
    load_mesh_ply,
    make_volume,
    marching_cubes,
    mesh_metrics,
    nearest_distances,
    sample_surface,
    save_mesh_ply,
    tsdf_integrate,
)


def nadir_cam(gsd=1.0, u0=16.0, v0=16.0):
    p = np.array([[1.0 / gsd, 0.0, 0.0], [0.0, -1.0 / gsd, 0.0]])
    return AffineCamera(p=p, b=np.array([u0, v0]), ray=np.array([0.0, 0.0, -1.0]))


def flat_volume(voxel=0.5, extent=16.0, z0=0.0, z1=40.0):
    n = int(extent / voxel)
    nz = int((z1 - z0) / voxel)
    origin = np.array([-extent / 2 + voxel / 2, -extent / 2 + voxel / 2, z0 + voxel / 2])
    return TsdfVolume(origin=origin, voxel=voxel,
                      tsdf=np.zeros((n, n, nz)), weight=np.zeros((n, n, nz)))


def sphere_volume(radius=10.0, voxel=0.25):
    n = int(2 * (radius + 2.0) / voxel)
    half = n * voxel / 2
    origin = np.array([-half + voxel / 2, -half + voxel / 2, -half + voxel / 2])
    ax = origin[0] + voxel * np.arange(n)
    gx, gy, gz = np.meshgrid(ax, ax, ax, indexing="ij")
    sdf = np.sqrt(gx ** 2 + gy ** 2 + gz ** 2) - radius
    return TsdfVolume(origin=origin, voxel=voxel, tsdf=sdf, weight=np.ones_like(sdf))


class TestTsdfIntegrate:
    def test_flat_surface_zero_crossing(self):
        vol = flat_volume()
        cam = nadir_cam()
        h = np.full((33, 33), 20.0)
        conf = np.full((33, 33), 0.8)
        tsdf_integrate(vol, h, conf, cam)
        zs = vol.origin[2] + vol.voxel * np.arange(vol.dims[2])
        col = vol.tsdf[8, 8]
        below = zs < 20.0
        above = zs > 20.0
        assert col[below].max() < 0 and col[above].min() > 0
        assert np.abs(col).max() <= vol.truncation + 1e-12

    def test_two_consistent_views_match_single(self):
        cam = nadir_cam()
        h = np.full((33, 33), 20.0)
        conf = np.full((33, 33), 0.7)
        single = tsdf_integrate(flat_volume(), h, conf, cam)
        double = tsdf_integrate(tsdf_integrate(flat_volume(), h, conf, cam), h, conf, cam)
        assert np.allclose(single.tsdf, double.tsdf, atol=1e-6)

    def test_confidence_weighted_crossing(self):
        # surfaces 2 m apart, confidences 0.9 / 0.1: the zero crossing solves
        # 0.9*clip(z - h1) + 0.1*clip(z - h2) = 0 (closed form oracle)
        cam = nadir_cam()
        vol = flat_volume(voxel=0.5)
        h1, h2 = 20.0, 22.0
        tsdf_integrate(vol, np.full((33, 33), h1), np.full((33, 33), 0.9), cam)
        tsdf_integrate(vol, np.full((33, 33), h2), np.full((33, 33), 0.1), cam)
        t = vol.truncation

        def fused(z):
            return 0.9 * np.clip(z - h1, -t, t) + 0.1 * np.clip(z - h2, -t, t)

        zs = np.linspace(h1 - 1, h2 + 1, 20001)
        oracle_z = zs[np.argmin(np.abs(fused(zs)))]
        col = vol.tsdf[8, 8]
        zv = vol.origin[2] + vol.voxel * np.arange(vol.dims[2])
        k = np.searchsorted(np.sign(col), 1) - 1  # last negative voxel
        frac = -col[k] / (col[k + 1] - col[k])
        crossing = zv[k] + frac * vol.voxel
        assert abs(crossing - oracle_z) < 0.05
        assert abs(crossing - h1) < 0.25

    def test_integration_order_invariance(self):
        cam = nadir_cam()
        rng = np.random.default_rng(0)
        maps = [(rng.uniform(15, 25, (33, 33)), rng.uniform(0.1, 1.0, (33, 33)))
                for _ in range(3)]
        a = flat_volume()
        for h, c in maps:
            tsdf_integrate(a, h, c, cam)
        b = flat_volume()
        for h, c in reversed(maps):
            tsdf_integrate(b, h, c, cam)
        assert np.allclose(a.tsdf, b.tsdf, atol=1e-6)


class TestMarchingCubes:
    def test_sphere_radius_and_topology(self):
        vol = sphere_volume(radius=10.0, voxel=0.25)
        mesh = marching_cubes(vol)
        radii = np.linalg.norm(mesh.vertices, axis=1)
        assert np.abs(radii - 10.0).max() < 0.05
        assert mesh.boundary_edge_count() == 0
        assert mesh.euler_characteristic() == 2

    def test_flat_plane_vertices(self):
        vol = flat_volume(voxel=0.5)
        cam = nadir_cam()
        tsdf_integrate(vol, np.full((33, 33), 20.0), np.full((33, 33), 0.9), cam)
        mesh = marching_cubes(vol)
        assert np.abs(mesh.vertices[:, 2] - 20.0).max() < 0.25

    def test_no_surface_raises(self):
        vol = sphere_volume(radius=10.0, voxel=0.5)
        vol.tsdf = np.abs(vol.tsdf) + 1.0
        with pytest.raises(NoSurface):
            marching_cubes(vol)


class TestMeshMetrics:
    def test_identical_meshes(self):
        mesh = marching_cubes(sphere_volume(radius=10.0, voxel=0.5))
        m = mesh_metrics(mesh, mesh, sample_n=200_000, threshold_m=0.5, seed=1)
        assert m["cd"] < 0.01
        assert m["f1"] == 1.0

    def test_normal_shifted_sheet(self):
        # rigid-shift oracle: a sheet moved 1 m along its normal has every
        # nearest-neighbor distance exactly 1
        mesh = heightfield_mesh(np.zeros((20, 20)), 0.0, 0.0, 1.0)
        moved = Mesh(vertices=mesh.vertices + np.array([0.0, 0.0, 1.0]),
                     faces=mesh.faces)
        m = mesh_metrics(mesh, moved, sample_n=50_000, threshold_m=0.5, seed=2)
        assert m["cd"] == pytest.approx(1.0, rel=0.05)
        assert m["f1"] < 0.05

    def test_chamfer_symmetry(self):
        mesh = marching_cubes(sphere_volume(radius=8.0, voxel=0.5))
        moved = Mesh(vertices=mesh.vertices * 1.05, faces=mesh.faces)
        a = mesh_metrics(mesh, moved, sample_n=20_000, seed=3)
        b = mesh_metrics(moved, mesh, sample_n=20_000, seed=3)
        assert a["cd"] == pytest.approx(b["cd"], rel=0.05)
        assert 0.0 <= a["f1"] <= 1.0

    def test_accelerated_nn_matches_brute_force_exactly(self):
        rng = np.random.default_rng(4)
        a = rng.normal(size=(500, 3))
        b = rng.normal(size=(500, 3))
        fast = nearest_distances(a, b)
        brute = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)
        idx = brute.argmin(axis=1)
        slow = np.linalg.norm(a - b[idx], axis=1)
        assert np.array_equal(fast, slow)

    def test_sampling_is_area_weighted_and_seeded(self):
        mesh = heightfield_mesh(np.zeros((4, 4)), 0.0, 0.0, 1.0)
        rng1 = np.random.default_rng(5)
        rng2 = np.random.default_rng(5)
        s1 = sample_surface(mesh, 1000, rng1)
        s2 = sample_surface(mesh, 1000, rng2)
        assert np.array_equal(s1, s2)
        assert s1[:, 0].min() >= 0.0 and s1[:, 0].max() <= 3.0


class TestMeshIO:
    def test_ply_round_trip(self, tmp_path):
        mesh = marching_cubes(sphere_volume(radius=6.0, voxel=0.5))
        path = tmp_path / "mesh.ply"
        save_mesh_ply(mesh, path)
        back = load_mesh_ply(path)
        assert np.allclose(back.vertices, mesh.vertices, atol=1e-5)
        assert np.array_equal(back.faces, mesh.faces)

    def test_heightfield_mesh_covers_grid(self):
        hm = np.arange(12.0).reshape(3, 4)
        mesh = heightfield_mesh(hm, -1.0, 2.0, 0.5)
        assert len(mesh.vertices) == 12
        assert len(mesh.faces) == 2 * 2 * 3
        assert mesh.boundary_edge_count() > 0  # open sheet
