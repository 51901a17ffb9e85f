import numpy as np
import pytest

from satsplat import quat
from satsplat.rpc import geodetic_from_enu, identity_model, meters_per_degree
from satsplat.splat import (
    AffineCamera,
    Gaussian2DSet,
    GaussianHead,
    fit_affine_camera,
    lift_centers,
    load_splats_ply,
    make_splats,
    predict_attributes,
    rasterize,
    rasterize_backward,
    save_splats_ply,
)
from satsplat import synth
from conftest import make_sidecar

from gradcheck import assert_grad_close, finite_diff


def nadir_camera(gsd=0.5, offset=(8.0, 8.0)):
    """Hand-built affine camera: u = x/gsd + off, v = -y/gsd + off, nadir ray."""
    p = np.array([[1.0 / gsd, 0.0, 0.0], [0.0, -1.0 / gsd, 0.0]])
    b = np.array(offset, dtype=np.float64)
    return AffineCamera(p=p, b=b, ray=np.array([0.0, 0.0, -1.0]))


def single_splat(center=(0.0, 0.0, 40.0), scales=(10.0, 10.0), color=(1.0, 0.0, 0.0),
                 alpha=1.0, q=(1.0, 0.0, 0.0, 0.0)):
    return Gaussian2DSet(
        centers=np.array([center]), scales=np.array([scales]),
        quats=np.array([q]), colors=np.array([color]), alphas=np.array([alpha]),
    )


def random_splats(n, rng, spread=4.0, z_lo=10.0, z_hi=50.0, alpha_hi=0.9):
    centers = np.column_stack([
        rng.uniform(-spread, spread, n), rng.uniform(-spread, spread, n),
        np.linspace(z_lo, z_hi, n),  # distinct depths
    ])
    axis = rng.normal(size=(n, 3))
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    ang = rng.uniform(0.1, 0.5, n)
    quats = np.column_stack([
        np.cos(ang / 2), axis * np.sin(ang / 2)[:, None]
    ])
    return Gaussian2DSet(
        centers=centers,
        scales=rng.uniform(0.8, 2.5, (n, 2)),
        quats=quats,
        colors=rng.uniform(0.1, 0.9, (n, 3)),
        alphas=rng.uniform(0.3, alpha_hi, n),
    )


def reference_render(splats, camera, hw):
    """Independent per-pixel compositor used as the rasterizer oracle."""
    h, w = hw
    n = len(splats)
    qn = splats.quats / np.linalg.norm(splats.quats, axis=1, keepdims=True)
    rot = quat.to_rotmat(qn)
    depth = splats.centers @ camera.ray
    order = sorted(range(n), key=lambda i: (depth[i], i))
    rgb = np.zeros((h, w, 3))
    hraw = np.zeros((h, w))
    acc = np.zeros((h, w))
    tfin = np.ones((h, w))
    for py in range(h):
        for px in range(w):
            t = 1.0
            for i in order:
                l1, l2 = splats.scales[i]
                m = np.column_stack([
                    l1 * (camera.p @ rot[i, :, 0]), l2 * (camera.p @ rot[i, :, 1])
                ])
                if abs(np.linalg.det(m)) < 1e-12:
                    continue
                uv0 = camera.p @ splats.centers[i] + camera.b
                s = np.linalg.solve(m, np.array([px, py]) - uv0)
                d2 = float(s @ s)
                if d2 > 18.0:  # weight below 1.2e-4 is truncated
                    continue
                g = np.exp(-0.5 * d2)
                a = splats.alphas[i] * g
                z = (splats.centers[i, 2] + l1 * rot[i, 2, 0] * s[0]
                     + l2 * rot[i, 2, 1] * s[1])
                rgb[py, px] += t * a * splats.colors[i]
                hraw[py, px] += t * a * z
                acc[py, px] += t * a
                t *= 1.0 - a
            tfin[py, px] = t
    return rgb, hraw, acc, tfin


class TestLiftCenters:
    def test_flat_plane_constant_height_and_gsd(self):
        # identity-calibrated model covering 64 px at 0.5 m GSD
        mlat, mlon = meters_per_degree(0.0)
        gsd = 0.5
        w = 64
        model = identity_model(
            samp_scale=w / 2, line_scale=w / 2,
            lon_scale=(w / 2) * gsd / mlon, lat_scale=(w / 2) * gsd / mlat,
            hei_scale=50.0, samp_off=w / 2, line_off=w / 2,
        )
        hmap = np.full((8, 8), 12.5)
        centers, ok = lift_centers(hmap, model, (0.0, 0.0))
        assert ok.all()
        assert np.allclose(centers[:, 2], 12.5, atol=1e-9)
        grid = centers.reshape(8, 8, 3)
        dx = np.diff(grid[:, :, 0], axis=1)
        assert np.allclose(np.abs(dx), gsd, atol=1e-6)

    def test_round_trip_projection(self, pinhole_pair, sidecar_1km):
        _, (cam, model) = pinhole_pair
        scaled = model.scaled(0.1)
        rng = np.random.default_rng(0)
        hmap = rng.uniform(5.0, 55.0, (12, 12))
        centers, ok = lift_centers(hmap, scaled, sidecar_1km.anchor)
        assert ok.all()
        lat, lon, hei = geodetic_from_enu(
            centers[:, 0], centers[:, 1], centers[:, 2], sidecar_1km.anchor
        )
        u, v = scaled.project(lat, lon, hei)
        uu, vv = np.meshgrid(np.arange(12.0), np.arange(12.0), indexing="xy")
        assert np.hypot(u - uu.ravel(), v - vv.ravel()).max() < 1e-5

    def test_stage3_spacing_matches_gsd(self):
        sc = make_sidecar(extent_m=0.3 * 63, h_min=0.0, h_max=30.0)
        cam = synth.make_view_camera(sc, tilt_deg=2.0, azimuth_deg=10.0,
                                     altitude_m=12000.0, image_size=64, gsd_m=0.3)
        model = synth.fit_rpc_to_pinhole(cam, sc)
        centers, ok = lift_centers(np.full((64, 64), 10.0), model, sc.anchor)
        grid = centers.reshape(64, 64, 3)
        step = np.hypot(np.diff(grid[..., 0], axis=1), np.diff(grid[..., 1], axis=1))
        assert abs(np.median(step) - 0.3) < 0.01


class TestGaussianHead:
    def test_zero_head_init_values(self):
        head = GaussianHead.reference(channels=7)
        x = np.random.default_rng(1).normal(size=(7, 4, 4))
        prior = np.array([1.0, 0.0, 0.0, 0.0])
        attrs = predict_attributes(x, head, prior)
        assert np.allclose(attrs["scales"], np.log(2.0) + 0.01)
        assert np.allclose(attrs["quats"], prior)
        assert np.allclose(attrs["colors"], 0.5)
        assert np.allclose(attrs["alphas"], 0.5)

    def test_invariants_hold_for_random_inputs(self):
        # one million random head inputs: activations must enforce the type
        rng = np.random.default_rng(2)
        head = GaussianHead(weight=rng.normal(size=(10, 3)), bias=rng.normal(size=10))
        x = rng.normal(scale=20.0, size=(3, 1000, 1000))
        attrs = predict_attributes(x, head, np.array([1.0, 0.0, 0.0, 0.0]))
        centers = np.zeros((1000 * 1000, 3))
        splats = make_splats(centers, np.ones(1000 * 1000, bool), attrs)
        splats.validate()

    def test_head_round_trip(self, tmp_path):
        head = GaussianHead(weight=np.random.default_rng(3).normal(size=(10, 5)),
                            bias=np.zeros(10))
        head.save(tmp_path / "head")
        back = GaussianHead.load(tmp_path / "head")
        assert np.array_equal(back.weight, head.weight)


class TestRasterizeForward:
    def test_single_opaque_splat(self):
        cam = nadir_camera()
        splats = single_splat()
        out = rasterize(splats, cam, (17, 17))
        assert np.allclose(out.rgb[8, 8], [1.0, 0.0, 0.0], atol=1e-6)
        assert out.height[8, 8] == pytest.approx(40.0, abs=1e-6)
        assert out.accum[8, 8] == pytest.approx(1.0, abs=1e-9)

    def test_two_stacked_half_opacity(self):
        cam = nadir_camera()
        splats = Gaussian2DSet(
            centers=np.array([[0.0, 0.0, 50.0], [0.0, 0.0, 40.0]]),
            scales=np.full((2, 2), 20.0),
            quats=np.array([[1.0, 0, 0, 0], [1.0, 0, 0, 0]]),
            colors=np.array([[1.0, 1.0, 1.0], [0.0, 0.0, 0.0]]),
            alphas=np.array([0.5, 0.5]),
        )
        out = rasterize(splats, cam, (17, 17))
        assert np.allclose(out.rgb[8, 8], 0.5, atol=1e-9)
        assert out.accum[8, 8] == pytest.approx(0.75, abs=1e-9)

    def test_matches_reference_compositor(self):
        rng = np.random.default_rng(4)
        cam = nadir_camera(offset=(6.0, 6.0))
        splats = random_splats(12, rng)
        out = rasterize(splats, cam, (13, 13))
        rgb, hraw, acc, tfin = reference_render(splats, cam, (13, 13))
        assert np.allclose(out.rgb, rgb, atol=1e-10)
        assert np.allclose(out.accum, acc, atol=1e-10)
        assert np.allclose(out.height, hraw / np.maximum(acc, 1e-8), atol=1e-8)
        # transmittance telescoping: accumulated weight + final T = 1
        assert np.abs(acc + tfin - 1.0).max() < 1e-6

    def test_accumulation_bounded(self):
        rng = np.random.default_rng(5)
        cam = nadir_camera(offset=(6.0, 6.0))
        out = rasterize(random_splats(30, rng), cam, (13, 13))
        assert out.accum.max() <= 1.0 + 1e-12
        assert out.rgb.max() <= 1.0 + 1e-6

    def test_storage_permutation_invariance(self):
        rng = np.random.default_rng(6)
        cam = nadir_camera(offset=(6.0, 6.0))
        splats = random_splats(15, rng)
        out = rasterize(splats, cam, (13, 13))
        perm = rng.permutation(15)
        shuffled = Gaussian2DSet(
            centers=splats.centers[perm], scales=splats.scales[perm],
            quats=splats.quats[perm], colors=splats.colors[perm],
            alphas=splats.alphas[perm],
        )
        out2 = rasterize(shuffled, cam, (13, 13))
        assert np.array_equal(out.rgb, out2.rgb)
        assert np.array_equal(out.height, out2.height)

    def test_opaque_surface_height_consistency(self):
        cam = nadir_camera(gsd=1.0, offset=(0.0, 16.0))
        ys, xs = np.meshgrid(np.arange(17.0), np.arange(17.0), indexing="ij")
        n = 17 * 17
        splats = Gaussian2DSet(
            centers=np.column_stack([xs.ravel(), 16.0 - ys.ravel(), np.full(n, 30.0)]),
            scales=np.full((n, 2), 1.2),
            quats=np.tile([1.0, 0, 0, 0], (n, 1)),
            colors=np.full((n, 3), 0.5),
            alphas=np.ones(n),
        )
        out = rasterize(splats, cam, (17, 17))
        covered = out.accum > 0.99
        assert covered.sum() > 200
        assert np.abs(out.height[covered] - 30.0).max() < 1e-9

    def test_edge_on_splat_skipped(self):
        cam = nadir_camera()
        # disk rotated 90 degrees about east: plane contains the nadir ray
        q = np.array([np.cos(np.pi / 4), np.sin(np.pi / 4), 0.0, 0.0])
        splats = single_splat(q=tuple(q))
        out = rasterize(splats, cam, (17, 17))
        assert out.degenerate_count == 1
        assert np.all(out.accum == 0.0)


class TestRasterizeBackward:
    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(7)
        cam = nadir_camera(gsd=1.0, offset=(4.0, 4.0))
        splats = random_splats(5, rng, spread=2.5, z_lo=10.0, z_hi=30.0)
        hw = (8, 8)
        g_rgb = rng.normal(size=(8, 8, 3))
        g_height = rng.normal(size=(8, 8))
        g_acc = rng.normal(size=(8, 8))

        def loss_for(**attrs):
            s = Gaussian2DSet(
                centers=attrs.get("centers", splats.centers),
                scales=attrs.get("scales", splats.scales),
                quats=attrs.get("quats", splats.quats),
                colors=attrs.get("colors", splats.colors),
                alphas=attrs.get("alphas", splats.alphas),
            )
            o = rasterize(s, cam, hw)
            return float((o.rgb * g_rgb).sum() + (o.height * g_height).sum()
                         + (o.accum * g_acc).sum())

        out = rasterize(splats, cam, hw, retain=True)
        grads = rasterize_backward(out, g_rgb, g_height, g_acc)
        for name in ("centers", "scales", "quats", "colors", "alphas"):
            fd = finite_diff(lambda v, n=name: loss_for(**{n: v}),
                             getattr(splats, name))
            assert_grad_close(grads[name], fd, what=name)

    def test_zero_opacity_grads_vanish_except_alpha(self):
        rng = np.random.default_rng(8)
        cam = nadir_camera(gsd=1.0, offset=(4.0, 4.0))
        splats = random_splats(3, rng, spread=2.0, z_lo=10.0, z_hi=30.0)
        splats.alphas[1] = 0.0
        out = rasterize(splats, cam, (8, 8), retain=True)
        grads = rasterize_backward(out, grad_rgb=rng.normal(size=(8, 8, 3)),
                                   grad_height=rng.normal(size=(8, 8)))
        for name in ("centers", "scales", "quats", "colors"):
            assert np.all(grads[name][1] == 0.0), name
        assert grads["alphas"][1] != 0.0

    def test_color_grad_of_opaque_center(self):
        cam = nadir_camera()
        splats = single_splat()
        out = rasterize(splats, cam, (17, 17), retain=True)
        g_rgb = np.zeros((17, 17, 3))
        g_rgb[8, 8] = [2.0, -1.0, 0.5]
        grads = rasterize_backward(out, grad_rgb=g_rgb)
        # weight T*a = 1 at the footprint center
        assert np.allclose(grads["colors"][0], [2.0, -1.0, 0.5], atol=1e-6)


class TestPlaneRender:
    def test_plane_of_lifted_splats_reproduces_heights(self, sidecar_1km):
        sc = make_sidecar(extent_m=0.5 * 63, h_min=0.0, h_max=40.0)
        cam = synth.make_view_camera(sc, tilt_deg=5.0, azimuth_deg=30.0,
                                     altitude_m=12000.0, image_size=64, gsd_m=0.5)
        model = synth.fit_rpc_to_pinhole(cam, sc)
        gt = np.full((64, 64), 17.0)
        centers, ok = lift_centers(gt, model, sc.anchor)
        n = centers.shape[0]
        splats = Gaussian2DSet(
            centers=centers, scales=np.full((n, 2), 0.6),
            quats=np.tile([1.0, 0, 0, 0], (n, 1)),
            colors=np.full((n, 3), 0.5), alphas=np.ones(n),
        )
        camera = fit_affine_camera(model, sc)
        assert camera.residual_px < 0.3
        out = rasterize(splats, camera, (64, 64))
        interior = np.zeros((64, 64), bool)
        interior[2:-2, 2:-2] = True
        good = np.abs(out.height - gt) < 0.2  # 0.1 x a 2 m hypothesis spacing
        assert good[interior].mean() >= 0.99


class TestPly:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(9)
        splats = random_splats(20, rng)
        path = tmp_path / "splats.ply"
        save_splats_ply(splats, path)
        back = load_splats_ply(path)
        back.validate()
        assert np.allclose(back.centers, splats.centers, rtol=1e-6, atol=1e-4)
        assert np.allclose(back.colors, splats.colors, atol=1e-6)
        assert np.allclose(np.abs((back.quats * splats.quats).sum(axis=1)), 1.0,
                           atol=1e-6)
