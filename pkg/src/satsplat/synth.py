"""Synthetic verification scenes.

Builds desk-scale multi-view scenes with known geometry: a pinhole camera per
view, an RPC model fitted to each pinhole over the scene volume, procedural
ground texture, analytic terrains, and an oracle feature encoder (local image
patches) that makes plane-sweep matching well-posed. All randomness is seeded.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .rpc import RpcModel, Sidecar, enu_from_geodetic
from .sweep import FeatureVolume

TERRAIN_TYPES = ("plane", "ramp", "boxes", "fractal")


# ---------------------------------------------------------------------------
# pinhole camera and RPC fitting
# ---------------------------------------------------------------------------


@dataclass
class PinholeCamera:
    """Ideal pinhole in the scene ENU frame; rows of ``rot`` are the camera
    axes (x right, y down, z forward = viewing direction)."""

    center: np.ndarray  # (3,) ENU meters
    rot: np.ndarray  # (3, 3) world -> camera
    focal: float  # px
    cx: float
    cy: float

    def project_enu(self, x, y, z):
        p = np.stack(np.broadcast_arrays(
            np.asarray(x, np.float64), np.asarray(y, np.float64), np.asarray(z, np.float64)
        ), axis=-1) - self.center
        pc = p @ self.rot.T
        u = self.focal * pc[..., 0] / pc[..., 2] + self.cx
        v = self.focal * pc[..., 1] / pc[..., 2] + self.cy
        return u, v

    def ray_enu(self, u, v):
        """Unit ray directions (ENU) through pixel(s)."""
        d = np.stack(np.broadcast_arrays(
            (np.asarray(u, np.float64) - self.cx) / self.focal,
            (np.asarray(v, np.float64) - self.cy) / self.focal,
            np.ones_like(np.asarray(u, np.float64)),
        ), axis=-1)
        w = d @ self.rot
        return w / np.linalg.norm(w, axis=-1, keepdims=True)

    def intersect_height(self, u, v, h):
        """Ray-plane intersection with the horizontal plane z = h (ENU)."""
        d = self.ray_enu(u, v)
        t = (h - self.center[2]) / d[..., 2]
        p = self.center + t[..., None] * d
        return p[..., 0], p[..., 1], np.full_like(p[..., 0], h)


def look_at_camera(eye: np.ndarray, target: np.ndarray, focal: float,
                   cx: float, cy: float) -> PinholeCamera:
    fwd = target - eye
    fwd = fwd / np.linalg.norm(fwd)
    north = np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, north)
    if np.linalg.norm(right) < 1e-9:
        right = np.array([1.0, 0.0, 0.0])
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd], axis=0)
    return PinholeCamera(center=np.asarray(eye, np.float64), rot=rot,
                         focal=focal, cx=cx, cy=cy)


def make_view_camera(sidecar: Sidecar, tilt_deg: float, azimuth_deg: float,
                     altitude_m: float, image_size: int, gsd_m: float) -> PinholeCamera:
    """Camera looking at the scene center from the given tilt/azimuth."""
    h_mid = 0.5 * (sidecar.h_min + sidecar.h_max)
    target = np.array([0.0, 0.0, h_mid])
    tilt = np.deg2rad(tilt_deg)
    az = np.deg2rad(azimuth_deg)
    off = altitude_m * np.tan(tilt)
    eye = np.array([off * np.sin(az), off * np.cos(az), altitude_m + h_mid])
    dist = np.linalg.norm(eye - target)
    focal = dist / gsd_m
    c = (image_size - 1) / 2.0
    return look_at_camera(eye, target, focal, c, c)


def fit_rpc_to_pinhole(cam: PinholeCamera, sidecar: Sidecar, n_grid: int = 9,
                       margin: float = 1.0) -> RpcModel:
    """Least-squares fit of forward RPC coefficients to a pinhole camera over
    the scene volume (denominator constant pinned to 1, RPC00B order).
    ``margin`` scales the horizontal fit extent so oblique footprints stay
    inside the validity cube."""
    anchor = sidecar.anchor
    lat_off = anchor[0]
    lon_off = anchor[1]
    lat_scale = max(0.5 * margin * (sidecar.lat_max - sidecar.lat_min), 1e-7)
    lon_scale = max(0.5 * margin * (sidecar.lon_max - sidecar.lon_min), 1e-7)
    hei_off = 0.5 * (sidecar.h_min + sidecar.h_max)
    hei_scale = max(0.5 * (sidecar.h_max - sidecar.h_min), 1.0)

    g = np.linspace(-1.1, 1.1, n_grid)
    L, P, H = (a.ravel() for a in np.meshgrid(g, g, g, indexing="ij"))
    lat = P * lat_scale + lat_off
    lon = L * lon_scale + lon_off
    hei = H * hei_scale + hei_off
    x, y, z = enu_from_geodetic(lat, lon, hei, anchor)
    u, v = cam.project_enu(x, y, z)

    samp_off = float(u.mean())
    samp_scale = max(float(np.abs(u - samp_off).max()), 1.0)
    line_off = float(v.mean())
    line_scale = max(float(np.abs(v - line_off).max()), 1.0)
    un = (u - samp_off) / samp_scale
    vn = (v - line_off) / line_scale

    mono = _monomials(L, P, H)  # (n, 20)

    def fit_rational(target):
        # near-affine geometry leaves the denominator barely determined;
        # truncating small singular values keeps its coefficients near zero
        a = np.hstack([mono, -target[:, None] * mono[:, 1:]])
        sol, *_ = np.linalg.lstsq(a, target, rcond=1e-10)
        num = sol[:20]
        den = np.concatenate([[1.0], sol[20:]])
        return num, den

    samp_num, samp_den = fit_rational(un)
    line_num, line_den = fit_rational(vn)
    return RpcModel(
        samp_num=samp_num, samp_den=samp_den, line_num=line_num, line_den=line_den,
        lat_off=lat_off, lat_scale=lat_scale, lon_off=lon_off, lon_scale=lon_scale,
        hei_off=hei_off, hei_scale=hei_scale,
        line_off=line_off, line_scale=line_scale,
        samp_off=samp_off, samp_scale=samp_scale,
    )


def _monomials(L, P, H):
    cols = [
        np.ones_like(L), L, P, H, L * P, L * H, P * H, L * L, P * P, H * H,
        L * P * H, L ** 3, L * P * P, L * H * H, L * L * P, P ** 3,
        P * H * H, L * L * H, P * P * H, H ** 3,
    ]
    return np.stack(cols, axis=1)


# ---------------------------------------------------------------------------
# terrain and texture
# ---------------------------------------------------------------------------


def value_noise(shape, cell: float, rng: np.random.Generator, octaves: int = 3):
    """Smooth multi-octave value noise in [0,1] over a pixel grid."""
    h, w = shape
    out = np.zeros((h, w))
    amp = 1.0
    total = 0.0
    for o in range(octaves):
        step = max(cell / (2 ** o), 2.0)
        gh = int(np.ceil(h / step)) + 2
        gw = int(np.ceil(w / step)) + 2
        coarse = rng.random((gh, gw))
        out += amp * ndimage.zoom(coarse, (h / gh * 1.0, w / gw * 1.0), order=3,
                                  grid_mode=True, mode="nearest")[:h, :w]
        total += amp
        amp *= 0.5
    out /= total
    lo, hi = out.min(), out.max()
    return (out - lo) / max(hi - lo, 1e-12)


@dataclass
class Terrain:
    """Analytic terrain over ground ENU (x east, y north) in meters."""

    kind: str
    base: float
    params: dict = field(default_factory=dict)

    def height(self, x, y):
        x = np.asarray(x, np.float64)
        y = np.asarray(y, np.float64)
        if self.kind == "plane":
            return np.full_like(x, self.base)
        if self.kind == "ramp":
            gx, gy = self.params["grad"]
            return self.base + gx * x + gy * y
        if self.kind == "boxes":
            h = np.full_like(x, self.base)
            for (bx, by, half, top) in self.params["boxes"]:
                inside = (np.abs(x - bx) <= half) & (np.abs(y - by) <= half)
                h = np.where(inside, top, h)
            return h
        if self.kind == "fractal":
            amp = self.params["amp"]
            waves = self.params["waves"]  # list of (kx, ky, phase)
            h = np.full_like(x, self.base)
            for i, (kx, ky, ph) in enumerate(waves):
                h = h + amp / (i + 1) * np.sin(kx * x + ky * y + ph)
            return h
        raise ValueError(f"unknown terrain kind {self.kind!r}")


def make_terrain(kind: str, h_min: float, h_max: float, extent_m: float,
                 rng: np.random.Generator) -> Terrain:
    span = h_max - h_min
    if kind == "plane":
        return Terrain("plane", base=h_min + 0.5 * span)
    if kind == "ramp":
        slope = min(0.35 * span / extent_m, 0.3)
        return Terrain("ramp", base=h_min + 0.5 * span, params={"grad": (slope, 0.35 * slope)})
    if kind == "boxes":
        # building-like blocks: absolute heights keep the tilted views'
        # occlusion shadows to a few pixels at any declared height range
        base = h_min + 0.3 * span
        tops = [base + 3.0, base + 4.5, base + 6.0]
        half = extent_m / 12.0
        centers = [(-extent_m / 4, -extent_m / 4), (extent_m / 4, -extent_m / 5),
                   (0.0, extent_m / 4)]
        boxes = [(cx, cy, half, top) for (cx, cy), top in zip(centers, tops)]
        return Terrain("boxes", base=base, params={"boxes": boxes})
    if kind == "fractal":
        # rolling hills: long wavelengths, slopes well under one
        waves = []
        for _ in range(4):
            k = rng.uniform(0.5, 1.5) * 2 * np.pi / extent_m
            ang = rng.uniform(0, 2 * np.pi)
            waves.append((k * np.cos(ang), k * np.sin(ang), rng.uniform(0, 2 * np.pi)))
        amp = min(0.08 * span, 3.0)
        return Terrain("fractal", base=h_min + 0.5 * span, params={"amp": amp, "waves": waves})
    raise ValueError(f"terrain must be one of {TERRAIN_TYPES}")


@dataclass
class GroundTexture:
    """RGB albedo defined on a ground-plane grid, bilinearly interpolated."""

    rgb: np.ndarray  # (3, N, N) in [0,1]
    origin: np.ndarray  # (2,) ENU of texel (0,0)
    spacing: float

    def sample(self, x, y):
        from . import kernels

        u = (np.asarray(x, np.float64).ravel() - self.origin[0]) / self.spacing
        v = (np.asarray(y, np.float64).ravel() - self.origin[1]) / self.spacing
        n = self.rgb.shape[1]
        out, _ = kernels.bilinear_gather(self.rgb, np.clip(u, 0, n - 1), np.clip(v, 0, n - 1))
        return out.reshape((3,) + np.asarray(x).shape)


def make_texture(extent_m: float, rng: np.random.Generator, n: int = 512,
                 min_cell_m: float = 0.7, max_cell_m: float = 4.0) -> GroundTexture:
    """Band-limited multi-octave texture with a spectrum fixed in ground
    meters: octaves halve from ``max_cell_m`` down to ``min_cell_m``, keeping
    imaging at the scene GSD alias-free while decorrelating quickly."""
    spacing = extent_m / (n - 1)
    out = np.zeros((3, n, n))
    for c in range(3):
        acc = np.zeros((n, n))
        total = 0.0
        amp = 1.0
        cell_m = max_cell_m
        while cell_m >= min_cell_m:
            cell = cell_m / spacing
            gh = int(np.ceil(n / cell)) + 2
            coarse = rng.random((gh, gh))
            acc += amp * ndimage.zoom(coarse, (n / gh, n / gh), order=3,
                                      grid_mode=True, mode="nearest")[:n, :n]
            total += amp
            amp *= 0.75
            cell_m /= 2.0
        acc /= total
        lo, hi = acc.min(), acc.max()
        out[c] = (acc - lo) / max(hi - lo, 1e-12)
    rgb = 0.15 + 0.7 * out
    return GroundTexture(rgb=rgb, origin=np.array([-extent_m / 2, -extent_m / 2]),
                         spacing=spacing)


# ---------------------------------------------------------------------------
# view rendering through the fitted RPC
# ---------------------------------------------------------------------------


def render_view(model: RpcModel, terrain: Terrain, texture: GroundTexture,
                sidecar: Sidecar, hw: tuple[int, int], iters: int = 12):
    """Ray-cast the heightfield through the RPC: fixed-point iteration on the
    ground height along each pixel's localization curve. Returns (rgb
    (H,W,3) in [0,1], height (H,W) m)."""
    h, w = hw
    anchor = sidecar.anchor
    uu, vv = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64), indexing="xy")
    hgt = np.full((h, w), 0.5 * (sidecar.h_min + sidecar.h_max))
    for _ in range(iters):
        lat, lon, _, _ = model.localize(uu, vv, hgt, mask_failures=True)
        x, y, _ = enu_from_geodetic(lat, lon, hgt, anchor)
        hgt = terrain.height(x, y)
    lat, lon, _, _ = model.localize(uu, vv, hgt, mask_failures=True)
    x, y, _ = enu_from_geodetic(lat, lon, hgt, anchor)
    rgb = texture.sample(x, y).transpose(1, 2, 0)
    return rgb, hgt


# ---------------------------------------------------------------------------
# oracle feature encoder: local gray patches (mvs) / blurred patches (mono)
# ---------------------------------------------------------------------------


def oracle_features(image: np.ndarray, view_id: str, stage: int, branch: str,
                    gain: float = 60.0, patch: int = 5) -> FeatureVolume:
    """Zero-mean local gray patches plus one brightness channel, so across-view
    variance behaves like a normalized correlation cost; the mono branch sees a
    Gaussian-blurred image, standing in for a smooth single-view prior."""
    gray = image.mean(axis=2)
    if branch == "mono":
        gray = ndimage.gaussian_filter(gray, sigma=1.0, mode="nearest")
    r = patch // 2
    padded = np.pad(gray, r, mode="edge")
    h, w = gray.shape
    chans = [padded[dy:dy + h, dx:dx + w] for dy in range(patch) for dx in range(patch)]
    data = np.stack(chans)
    data = data - data.mean(axis=0, keepdims=True)
    data = np.concatenate([data, gray[None]])
    return FeatureVolume(view_id=view_id, stage=stage, branch=branch, data=gain * data)
