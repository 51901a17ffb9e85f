import numpy as np
import pytest

from satsplat.rpc import Sidecar, meters_per_degree
from satsplat import synth


def make_sidecar(extent_m=1000.0, lat0=32.0, lon0=-110.0, h_min=0.0, h_max=60.0):
    mlat, mlon = meters_per_degree(lat0)
    dlat = extent_m / 2 / mlat
    dlon = extent_m / 2 / mlon
    return Sidecar("WGS84", lat0 - dlat, lat0 + dlat, lon0 - dlon, lon0 + dlon, h_min, h_max)


@pytest.fixture(scope="session")
def sidecar_1km():
    return make_sidecar(1000.0)


@pytest.fixture(scope="session")
def pinhole_pair(sidecar_1km):
    """Two tilted pinhole views with RPC models fitted over the 1 km scene."""
    cam_a = synth.make_view_camera(sidecar_1km, tilt_deg=0.0, azimuth_deg=0.0,
                                   altitude_m=12000.0, image_size=2048, gsd_m=0.5)
    cam_b = synth.make_view_camera(sidecar_1km, tilt_deg=15.0, azimuth_deg=60.0,
                                   altitude_m=12000.0, image_size=2048, gsd_m=0.5)
    rpc_a = synth.fit_rpc_to_pinhole(cam_a, sidecar_1km)
    rpc_b = synth.fit_rpc_to_pinhole(cam_b, sidecar_1km)
    return (cam_a, rpc_a), (cam_b, rpc_b)


def random_ground_points(sidecar, n, rng):
    lat = rng.uniform(sidecar.lat_min, sidecar.lat_max, n)
    lon = rng.uniform(sidecar.lon_min, sidecar.lon_max, n)
    hei = rng.uniform(sidecar.h_min, sidecar.h_max, n)
    return lat, lon, hei


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.max(np.abs(a - b) / scale)
