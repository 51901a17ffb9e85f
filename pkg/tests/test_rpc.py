import numpy as np
import pytest

from satsplat import quat
from satsplat.errors import (
    DegenerateNormalWarning,
    DenominatorNearZero,
    ExtrapolationWarning,
    NoConvergence,
    NonFiniteInput,
    RpcParseError,
)
from satsplat.rpc import (
    RpcModel,
    Sidecar,
    enu_from_geodetic,
    fit_local_affine,
    identity_model,
    load_rpc,
    local_rotation,
    parse_rpc_text,
    reproject,
    save_rpc,
    write_rpc_text,
)

from conftest import random_ground_points


class TestProject:
    def test_identity_zero(self):
        m = identity_model()
        assert m.project(0.0, 0.0, 0.0) == (0.0, 0.0)

    def test_linear_scaling(self):
        m = identity_model(samp_scale=100.0)
        u, v = m.project(0.0, 0.5, 0.0)
        assert u == pytest.approx(50.0, abs=1e-12)
        assert v == 0.0

    def test_pinhole_fit_agreement(self, pinhole_pair, sidecar_1km):
        (cam, m), _ = pinhole_pair
        rng = np.random.default_rng(1)
        lat, lon, hei = random_ground_points(sidecar_1km, 1000, rng)
        x, y, z = enu_from_geodetic(lat, lon, hei, sidecar_1km.anchor)
        u_ref, v_ref = cam.project_enu(x, y, z)
        u, v = m.project(lat, lon, hei)
        assert np.hypot(u - u_ref, v - v_ref).max() < 0.05

    def test_non_finite_rejected(self):
        m = identity_model()
        with pytest.raises(NonFiniteInput):
            m.project(np.nan, 0.0, 0.0)

    def test_extrapolation_warns(self):
        m = identity_model()
        with pytest.warns(ExtrapolationWarning):
            m.project(1.4, 0.0, 0.0)


class TestLocalize:
    def test_identity(self):
        m = identity_model()
        assert m.localize(0.0, 0.0, 0.0) == (0.0, 0.0, 0.0)

    def test_round_trip_random(self, pinhole_pair, sidecar_1km):
        _, (cam, m) = pinhole_pair
        rng = np.random.default_rng(2)
        lat, lon, hei = random_ground_points(sidecar_1km, 1000, rng)
        u, v = m.project(lat, lon, hei)
        lat2, lon2, _ = m.localize(u, v, hei)
        assert np.abs(lat2 - lat).max() / m.lat_scale < 1e-6
        assert np.abs(lon2 - lon).max() / m.lon_scale < 1e-6

    def test_ray_plane_oracle(self, pinhole_pair, sidecar_1km):
        (cam, m), _ = pinhole_pair
        rng = np.random.default_rng(3)
        lat, lon, _ = random_ground_points(sidecar_1km, 200, rng)
        h = np.full(lat.shape, 50.0)
        u, v = m.project(lat, lon, h)
        lat2, lon2, h2 = m.localize(u, v, h)
        x, y, _ = enu_from_geodetic(lat2, lon2, h2, sidecar_1km.anchor)
        xg, yg, _ = cam.intersect_height(u, v, 50.0)
        assert np.hypot(x - xg, y - yg).max() < 0.02

    def test_no_convergence_raises(self):
        m = identity_model()
        # target far outside any reachable pixel for the damped step budget
        with pytest.raises(NoConvergence):
            m.localize(1e6, 1e6, 0.0)


class TestReproject:
    def test_self_identity(self, pinhole_pair, sidecar_1km):
        _, (cam, m) = pinhole_pair
        rng = np.random.default_rng(4)
        lat, lon, hei = random_ground_points(sidecar_1km, 200, rng)
        u, v = m.project(lat, lon, hei)
        u2, v2 = reproject(m, m, u, v, hei)
        assert np.hypot(u2 - u, v2 - v).max() < 1e-6

    def test_two_view_oracle(self, pinhole_pair, sidecar_1km):
        (cam_a, rpc_a), (cam_b, rpc_b) = pinhole_pair
        rng = np.random.default_rng(5)
        lat, lon, hei = random_ground_points(sidecar_1km, 300, rng)
        u, v = rpc_a.project(lat, lon, hei)
        us, vs = reproject(rpc_a, rpc_b, u, v, hei)
        # oracle: pinhole ray-plane intersection then pinhole projection
        xg, yg, zg = cam_a.intersect_height(u, v, hei)
        ur, vr = cam_b.project_enu(xg, yg, zg)
        assert np.hypot(us - ur, vs - vr).max() < 0.1

    def test_wrong_height_displacement(self, pinhole_pair, sidecar_1km):
        (cam_a, rpc_a), (cam_b, rpc_b) = pinhole_pair
        rng = np.random.default_rng(6)
        lat, lon, _ = random_ground_points(sidecar_1km, 200, rng)
        h = np.full(lat.shape, 20.0)
        u, v = rpc_a.project(lat, lon, h)
        u0, v0 = reproject(rpc_a, rpc_b, u, v, h)
        u1, v1 = reproject(rpc_a, rpc_b, u, v, h + 10.0)
        xg, yg, zg = cam_a.intersect_height(u, v, 20.0)
        ur0, vr0 = cam_b.project_enu(xg, yg, zg)
        xg, yg, zg = cam_a.intersect_height(u, v, 30.0)
        ur1, vr1 = cam_b.project_enu(xg, yg, zg)
        d_rpc = np.stack([u1 - u0, v1 - v0])
        d_ref = np.stack([ur1 - ur0, vr1 - vr0])
        assert np.hypot(*(d_rpc - d_ref)).max() < 0.2

    def test_monotone_height_parallax(self, pinhole_pair):
        (cam_a, rpc_a), (cam_b, rpc_b) = pinhole_pair
        u0, v0 = rpc_a.samp_off, rpc_a.line_off
        base_u, base_v = reproject(rpc_a, rpc_b, u0, v0, 30.0)
        disp = []
        for dh in np.linspace(1.0, 25.0, 8):
            uu, vv = reproject(rpc_a, rpc_b, u0, v0, 30.0 + dh)
            disp.append(np.hypot(uu - base_u, vv - base_v))
        assert np.all(np.diff(disp) > 0)


class TestJacobian:
    def test_matches_finite_differences(self, pinhole_pair):
        _, (cam, m) = pinhole_pair
        rng = np.random.default_rng(7)
        pts = rng.uniform(-0.9, 0.9, size=(50, 3))
        L, P, H = pts[:, 0], pts[:, 1], pts[:, 2]
        jac = m.jacobian_normalized(L, P, H)
        step = 1e-4
        for axis in range(3):
            d = np.zeros(3)
            d[axis] = step
            up = m._project_normalized(L + d[0], P + d[1], H + d[2])
            dn = m._project_normalized(L - d[0], P - d[1], H - d[2])
            fd_u = (up[0] - dn[0]) / (2 * step)
            fd_v = (up[1] - dn[1]) / (2 * step)
            scale = np.maximum(np.abs(fd_u), 1e-8)
            assert np.max(np.abs(jac[:, 0, axis] - fd_u) / scale) < 1e-4
            scale = np.maximum(np.abs(fd_v), 1e-8)
            assert np.max(np.abs(jac[:, 1, axis] - fd_v) / scale) < 1e-4


class TestLocalRotation:
    def test_up_normal_identity(self):
        m = identity_model(lat_scale=0.01, lon_scale=0.01, hei_scale=100.0,
                           samp_scale=1000.0, line_scale=1000.0)
        q = local_rotation(m, 0.0, 0.0, 0.0, [0.0, 0.0, 1.0])
        assert np.allclose(q, [1.0, 0.0, 0.0, 0.0], atol=1e-9)

    def test_east_normal_90deg(self):
        m = identity_model(lat_scale=0.01, lon_scale=0.01, hei_scale=100.0,
                           samp_scale=1000.0, line_scale=1000.0)
        with pytest.warns(DegenerateNormalWarning):
            q = local_rotation(m, 0.0, 0.0, 0.0, [1.0, 0.0, 0.0])
        rotated = quat.rotate(q, [0.0, 0.0, 1.0])
        assert np.allclose(rotated, [1.0, 0.0, 0.0], atol=1e-6)
        # 90 degrees: |w| = cos(45 deg)
        assert q[0] == pytest.approx(np.cos(np.pi / 4), abs=1e-9)

    def test_random_normals_align(self, pinhole_pair):
        _, (cam, m) = pinhole_pair
        rng = np.random.default_rng(8)
        for _ in range(100):
            n = rng.normal(size=3)
            n[2] = abs(n[2]) + 0.2
            n /= np.linalg.norm(n)
            q = local_rotation(m, m.lat_off, m.lon_off, m.hei_off, n)
            assert abs(np.linalg.norm(q) - 1.0) < 1e-9
            assert q[0] >= 0.0
            assert np.allclose(quat.rotate(q, [0.0, 0.0, 1.0]), n, atol=1e-6)

    def test_non_unit_normal_rejected(self, pinhole_pair):
        _, (cam, m) = pinhole_pair
        with pytest.raises(NonFiniteInput):
            local_rotation(m, m.lat_off, m.lon_off, 0.0, [0.0, 0.0, 2.0])


class TestAffineFit:
    def test_nadir_ray_points_down(self, pinhole_pair, sidecar_1km):
        (cam, m), _ = pinhole_pair
        a, b, ray = fit_local_affine(m, m.lat_off, m.lon_off, m.hei_off)
        assert ray[2] < -0.99

    def test_tilted_ray_matches_pinhole(self, pinhole_pair, sidecar_1km):
        _, (cam, m) = pinhole_pair
        a, b, ray = fit_local_affine(m, m.lat_off, m.lon_off, m.hei_off)
        # viewing direction of the pinhole (camera z axis, pointing at scene)
        assert np.allclose(ray, cam.rot[2], atol=1e-3)


class TestIO:
    def test_text_round_trip(self, pinhole_pair, tmp_path):
        _, (cam, m) = pinhole_pair
        path = tmp_path / "view.rpc"
        save_rpc(m, path)
        m2 = load_rpc(path)
        rng = np.random.default_rng(9)
        L = rng.uniform(-1, 1, 50)
        P = rng.uniform(-1, 1, 50)
        H = rng.uniform(-1, 1, 50)
        lat = P * m.lat_scale + m.lat_off
        lon = L * m.lon_scale + m.lon_off
        hei = H * m.hei_scale + m.hei_off
        u1, v1 = m.project(lat, lon, hei)
        u2, v2 = m2.project(lat, lon, hei)
        assert np.hypot(u1 - u2, v1 - v2).max() < 1e-6

    def test_parser_tolerates_case_and_units(self):
        m = identity_model(samp_scale=2.0)
        text = write_rpc_text(m).lower().replace(":", "  ")
        m2 = parse_rpc_text(text)
        assert m2.samp_scale == 2.0

    def test_denominator_constant_enforced(self):
        m = identity_model()
        bad = m.samp_den.copy()
        bad[0] = 0.9
        with pytest.raises(RpcParseError):
            RpcModel(
                samp_num=m.samp_num, samp_den=bad, line_num=m.line_num,
                line_den=m.line_den, lat_off=0, lat_scale=1, lon_off=0, lon_scale=1,
                hei_off=0, hei_scale=1, line_off=0, line_scale=1, samp_off=0, samp_scale=1,
            )

    def test_vanishing_denominator_rejected(self):
        m = identity_model()
        bad = m.samp_den.copy()
        bad[3] = -1.0  # den = 1 - H, vanishes at H=1 inside the validity cube
        with pytest.raises(RpcParseError):
            RpcModel(
                samp_num=m.samp_num, samp_den=bad, line_num=m.line_num,
                line_den=m.line_den, lat_off=0, lat_scale=1, lon_off=0, lon_scale=1,
                hei_off=0, hei_scale=1, line_off=0, line_scale=1, samp_off=0, samp_scale=1,
            )

    def test_missing_field_raises(self):
        with pytest.raises(RpcParseError):
            parse_rpc_text("LINE_OFF: 0.0\nSAMP_OFF: 1.0\n")

    def test_sidecar_round_trip(self, sidecar_1km, tmp_path):
        p = tmp_path / "scene.geo.json"
        sidecar_1km.save(p)
        rt = Sidecar.load(p)
        assert rt == sidecar_1km


class TestScaled:
    def test_half_resolution_model(self, pinhole_pair, sidecar_1km):
        _, (cam, m) = pinhole_pair
        half = m.scaled(0.5)
        rng = np.random.default_rng(10)
        lat, lon, hei = random_ground_points(sidecar_1km, 100, rng)
        u, v = m.project(lat, lon, hei)
        uh, vh = half.project(lat, lon, hei)
        # block-center convention: u' = (u + 0.5) * f - 0.5
        assert np.allclose(uh, (u + 0.5) * 0.5 - 0.5, atol=1e-9)
        assert np.allclose(vh, (v + 0.5) * 0.5 - 0.5, atol=1e-9)
