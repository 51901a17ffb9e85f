"""Rational polynomial coefficient camera model.

Forward projection maps geodetic (lat, lon, hei) to image (samp, line) pixels
through ratios of cubic polynomials in normalized coordinates; inverse
localization at a fixed height is a damped Newton solve on the 2x2 system in
(lat, lon). Coefficients follow the 20-term RPC00B monomial order documented in
:mod:`satsplat.kernels` (evaluation order is fixed, results are bit-stable).
"""

from __future__ import annotations

import json
import re
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import kernels, quat
from .errors import (
    DegenerateNormalWarning,
    DenominatorNearZero,
    ExtrapolationWarning,
    NoConvergence,
    NonFiniteInput,
    RpcParseError,
)

EARTH_RADIUS_M = 6378137.0
DEN_FLOOR = 1e-10
VALIDITY_HALF_WIDTH = 1.2


class GeoPoint(NamedTuple):
    lat: float
    lon: float
    hei: float


class PixelCoord(NamedTuple):
    u: float  # sample / column
    v: float  # line / row


def poly_derivative_coeffs(c: np.ndarray, axis: int) -> np.ndarray:
    """Coefficients of d(poly)/d{L,P,H} expressed in the same 20-term basis."""
    d = np.zeros(20)
    if axis == 0:  # d/dL
        d[0] = c[1]
        d[2] = c[4]
        d[3] = c[5]
        d[1] = 2 * c[7]
        d[6] = c[10]
        d[7] = 3 * c[11]
        d[8] = c[12]
        d[9] = c[13]
        d[4] = 2 * c[14]
        d[5] = 2 * c[17]
    elif axis == 1:  # d/dP
        d[0] = c[2]
        d[1] = c[4]
        d[3] = c[6]
        d[2] = 2 * c[8]
        d[5] = c[10]
        d[4] = 2 * c[12]
        d[7] = c[14]
        d[8] = 3 * c[15]
        d[9] = c[16]
        d[6] = 2 * c[18]
    elif axis == 2:  # d/dH
        d[0] = c[3]
        d[1] = c[5]
        d[2] = c[6]
        d[3] = 2 * c[9]
        d[4] = c[10]
        d[5] = 2 * c[13]
        d[6] = 2 * c[16]
        d[7] = c[17]
        d[8] = c[18]
        d[9] = 3 * c[19]
    else:
        raise ValueError("axis must be 0 (L), 1 (P) or 2 (H)")
    return d


@dataclass(frozen=True)
class RpcModel:
    """Immutable RPC camera. All operations are pure and thread-safe."""

    samp_num: np.ndarray
    samp_den: np.ndarray
    line_num: np.ndarray
    line_den: np.ndarray
    lat_off: float
    lat_scale: float
    lon_off: float
    lon_scale: float
    hei_off: float
    hei_scale: float
    line_off: float
    line_scale: float
    samp_off: float
    samp_scale: float
    _coef_stack: np.ndarray = field(init=False, repr=False, compare=False)
    _grad_stack: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        for name in ("samp_num", "samp_den", "line_num", "line_den"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (20,):
                raise RpcParseError(f"{name} must hold 20 coefficients, got {arr.shape}")
            object.__setattr__(self, name, arr)
        for name in ("lat_scale", "lon_scale", "hei_scale", "line_scale", "samp_scale"):
            if not getattr(self, name) > 0.0:
                raise RpcParseError(f"{name} must be strictly positive")
        for name in ("samp_den", "line_den"):
            if getattr(self, name)[0] != 1.0:
                raise RpcParseError(f"{name} constant term must equal 1 (RPC00B convention)")
        stack = np.stack([self.samp_num, self.samp_den, self.line_num, self.line_den])
        object.__setattr__(self, "_coef_stack", stack)
        grads = np.stack(
            [poly_derivative_coeffs(c, ax) for c in stack for ax in range(3)]
        )
        object.__setattr__(self, "_grad_stack", grads)
        self._check_denominators()

    def _check_denominators(self, n: int = 7):
        g = np.linspace(-VALIDITY_HALF_WIDTH, VALIDITY_HALF_WIDTH, n)
        L, P, H = (a.ravel() for a in np.meshgrid(g, g, g, indexing="ij"))
        vals = kernels.poly20_batch(np.stack([self.samp_den, self.line_den]), L, P, H)
        # den(0,0,0) = 1, so any sampled value at or below the floor implies a
        # vanishing denominator somewhere in the validity cube
        if np.min(vals) < DEN_FLOOR:
            raise RpcParseError(
                "denominator polynomial vanishes inside the validity cube"
            )

    # -- normalization -----------------------------------------------------

    def normalize_ground(self, lat, lon, hei):
        L = (np.asarray(lon, dtype=np.float64) - self.lon_off) / self.lon_scale
        P = (np.asarray(lat, dtype=np.float64) - self.lat_off) / self.lat_scale
        H = (np.asarray(hei, dtype=np.float64) - self.hei_off) / self.hei_scale
        return L, P, H

    def normalize_pixel(self, u, v):
        un = (np.asarray(u, dtype=np.float64) - self.samp_off) / self.samp_scale
        vn = (np.asarray(v, dtype=np.float64) - self.line_off) / self.line_scale
        return un, vn

    # -- forward projection -------------------------------------------------

    def _project_normalized(self, L, P, H):
        vals = kernels.poly20_batch(self._coef_stack, L.ravel(), P.ravel(), H.ravel())
        sden = vals[1]
        lden = vals[3]
        if np.min(np.abs(sden)) < DEN_FLOOR or np.min(np.abs(lden)) < DEN_FLOOR:
            raise DenominatorNearZero("RPC denominator magnitude below 1e-10")
        un = (vals[0] / sden).reshape(L.shape)
        vn = (vals[2] / lden).reshape(L.shape)
        return un, vn

    def project(self, lat, lon, hei):
        """Geodetic point(s) -> pixel (u=samp, v=line). Scalars in, floats out."""
        scalar = np.isscalar(lat) and np.isscalar(lon) and np.isscalar(hei)
        lat, lon, hei = np.broadcast_arrays(
            np.asarray(lat, np.float64), np.asarray(lon, np.float64), np.asarray(hei, np.float64)
        )
        if not (np.all(np.isfinite(lat)) and np.all(np.isfinite(lon)) and np.all(np.isfinite(hei))):
            raise NonFiniteInput("non-finite geodetic coordinates")
        L, P, H = self.normalize_ground(lat, lon, hei)
        reach = max(np.max(np.abs(L), initial=0), np.max(np.abs(P), initial=0),
                    np.max(np.abs(H), initial=0))
        if reach > VALIDITY_HALF_WIDTH:
            warnings.warn(
                f"point {reach:.3f}x outside the RPC validity cube; extrapolating",
                ExtrapolationWarning,
                stacklevel=2,
            )
        un, vn = self._project_normalized(L, P, H)
        u = un * self.samp_scale + self.samp_off
        v = vn * self.line_scale + self.line_off
        if scalar:
            return PixelCoord(float(u), float(v))
        return u, v

    def jacobian_normalized(self, L, P, H):
        """d(un, vn)/d(L, P, H) by analytic quotient rule; shape (..., 2, 3)."""
        L = np.asarray(L, np.float64)
        shape = L.shape
        flat = (L.ravel(), np.asarray(P, np.float64).ravel(), np.asarray(H, np.float64).ravel())
        vals = kernels.poly20_batch(self._coef_stack, *flat)
        grads = kernels.poly20_batch(self._grad_stack, *flat)
        jac = np.empty((flat[0].size, 2, 3))
        for row, (num_i, den_i) in enumerate(((0, 1), (2, 3))):
            num = vals[num_i]
            den = vals[den_i]
            for ax in range(3):
                dn = grads[num_i * 3 + ax]
                dd = grads[den_i * 3 + ax]
                jac[:, row, ax] = (dn * den - num * dd) / (den * den)
        return jac.reshape(shape + (2, 3))

    # -- inverse localization -----------------------------------------------

    def localize(self, u, v, hei, max_iter=20, tol_px=1e-7, fail_px=1e-3,
                 mask_failures=False):
        """Pixel(s) + height -> geodetic point(s) by damped Newton iteration.

        Raises NoConvergence when any point's pixel residual exceeds
        ``fail_px`` after ``max_iter`` iterations, unless ``mask_failures``
        is set, in which case an ok-mask is returned as the fourth element.
        """
        scalar = np.isscalar(u) and np.isscalar(v)
        u, v, hei = np.broadcast_arrays(
            np.asarray(u, np.float64), np.asarray(v, np.float64), np.asarray(hei, np.float64)
        )
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v)) and np.all(np.isfinite(hei))):
            raise NonFiniteInput("non-finite pixel coordinates or height")
        shape = u.shape
        un = ((u - self.samp_off) / self.samp_scale).ravel()
        vn = ((v - self.line_off) / self.line_scale).ravel()
        H = ((hei - self.hei_off) / self.hei_scale).ravel()
        L = np.zeros_like(un)
        P = np.zeros_like(un)
        px_scale = np.array([self.samp_scale, self.line_scale])
        resid_px = np.full(un.shape, np.inf)
        for _ in range(max_iter):
            pu, pv = self._project_normalized(L, P, H)
            ru = pu - un
            rv = pv - vn
            resid_px = np.hypot(ru * px_scale[0], rv * px_scale[1])
            live = resid_px >= tol_px
            if not live.any():
                break
            jac = self.jacobian_normalized(L, P, H)[..., :2]  # d(un,vn)/d(L,P)
            a, b = jac[:, 0, 0], jac[:, 0, 1]
            c, d = jac[:, 1, 0], jac[:, 1, 1]
            det = a * d - b * c
            det = np.where(np.abs(det) < 1e-14, np.where(det < 0, -1e-14, 1e-14), det)
            dl = (d * ru - b * rv) / det
            dp = (-c * ru + a * rv) / det
            # damping: cap the normalized step length at 0.5
            step = np.hypot(dl, dp)
            damp = np.where(step > 0.5, 0.5 / np.maximum(step, 1e-300), 1.0)
            L = L - np.where(live, dl * damp, 0.0)
            P = P - np.where(live, dp * damp, 0.0)
        ok = resid_px <= fail_px
        if not ok.all() and not mask_failures:
            raise NoConvergence(
                f"{int((~ok).sum())} point(s) above {fail_px} px after {max_iter} iterations"
            )
        lat = (P * self.lat_scale + self.lat_off).reshape(shape)
        lon = (L * self.lon_scale + self.lon_off).reshape(shape)
        hei = np.asarray(hei, np.float64).reshape(shape)
        if scalar and not mask_failures:
            return GeoPoint(float(lat), float(lon), float(hei))
        if mask_failures:
            return lat, lon, hei, ok.reshape(shape)
        return lat, lon, hei

    def scaled(self, factor: float) -> "RpcModel":
        """Model for the same scene resampled by ``factor``; pixel centers
        follow the block-center convention u_new = (u + 0.5) * factor - 0.5,
        matching area-averaged image pyramids."""
        return replace(
            self,
            line_off=(self.line_off + 0.5) * factor - 0.5,
            line_scale=self.line_scale * factor,
            samp_off=(self.samp_off + 0.5) * factor - 0.5,
            samp_scale=self.samp_scale * factor,
        )


def reproject(target: RpcModel, source: RpcModel, u, v, hei):
    """Map target-view pixel(s) at a hypothesized height into the source view.

    Exactly localize on the target followed by project on the source; provided
    as one call for the plane-sweep inner loop.
    """
    res = target.localize(u, v, hei)
    if isinstance(res, GeoPoint):
        return source.project(res.lat, res.lon, res.hei)
    lat, lon, h = res
    return source.project(lat, lon, h)


def identity_model(samp_scale=1.0, line_scale=1.0, lat_scale=1.0, lon_scale=1.0,
                   hei_scale=1.0, **offsets) -> RpcModel:
    """Synthetic model whose normalized projection is (un, vn) = (L, P)."""
    samp_num = np.zeros(20)
    samp_num[1] = 1.0  # L
    line_num = np.zeros(20)
    line_num[2] = 1.0  # P
    den = np.zeros(20)
    den[0] = 1.0
    kwargs = dict(
        lat_off=0.0, lon_off=0.0, hei_off=0.0, line_off=0.0, samp_off=0.0
    )
    kwargs.update(offsets)
    return RpcModel(
        samp_num=samp_num, samp_den=den.copy(), line_num=line_num, line_den=den.copy(),
        lat_scale=lat_scale, lon_scale=lon_scale, hei_scale=hei_scale,
        line_scale=line_scale, samp_scale=samp_scale, **kwargs,
    )


# ---------------------------------------------------------------------------
# local ENU frame
# ---------------------------------------------------------------------------


def meters_per_degree(lat0: float):
    m_lat = np.pi / 180.0 * EARTH_RADIUS_M
    m_lon = m_lat * np.cos(np.deg2rad(lat0))
    return m_lat, m_lon


def enu_from_geodetic(lat, lon, hei, anchor):
    """Equirectangular local frame: x east, y north, z = absolute height (m)."""
    lat0, lon0 = anchor
    m_lat, m_lon = meters_per_degree(lat0)
    x = (np.asarray(lon, np.float64) - lon0) * m_lon
    y = (np.asarray(lat, np.float64) - lat0) * m_lat
    z = np.asarray(hei, np.float64)
    return x, y, z


def geodetic_from_enu(x, y, z, anchor):
    lat0, lon0 = anchor
    m_lat, m_lon = meters_per_degree(lat0)
    lon = np.asarray(x, np.float64) / m_lon + lon0
    lat = np.asarray(y, np.float64) / m_lat + lat0
    return lat, lon, np.asarray(z, np.float64)


def fit_local_affine(model: RpcModel, lat, lon, hei, step_m: float = 1.0):
    """Local affine camera (u,v) ~= A @ enu + b from central differences of
    project() with a 1 m step along each ground axis; also returns the unit
    viewing ray (pointing down toward the ground)."""
    m_lat, m_lon = meters_per_degree(lat)
    dlat = step_m / m_lat
    dlon = step_m / m_lon
    a = np.empty((2, 3))
    for col, (dla, dlo, dh) in enumerate(
        ((0.0, dlon, 0.0), (dlat, 0.0, 0.0), (0.0, 0.0, step_m))
    ):
        up = model.project(lat + dla, lon + dlo, hei + dh)
        dn = model.project(lat - dla, lon - dlo, hei - dh)
        a[0, col] = (up[0] - dn[0]) / (2 * step_m)
        a[1, col] = (up[1] - dn[1]) / (2 * step_m)
    u0, v0 = model.project(lat, lon, hei)
    x, y, z = enu_from_geodetic(lat, lon, hei, (lat, lon))
    b = np.array([u0, v0]) - a @ np.array([x, y, z])
    ray = np.cross(a[0], a[1])
    n = np.linalg.norm(ray)
    if n < 1e-30:
        raise DenominatorNearZero("degenerate affine fit: projection rows are parallel")
    ray = ray / n
    if ray[2] > 0:
        ray = -ray
    return a, b, ray


def local_rotation(model: RpcModel, lat, lon, hei, surface_normal) -> np.ndarray:
    """Quaternion rotating the canonical splat frame so its z-axis equals
    ``surface_normal``; in-plane x-axis from the local east direction projected
    onto the disk plane (north fallback when the normal is nearly east)."""
    n = np.asarray(surface_normal, dtype=np.float64)
    if abs(np.linalg.norm(n) - 1.0) > 1e-6:
        raise NonFiniteInput("surface_normal must have unit norm")
    # local affine fit validates the model geometry at p and yields the ray
    fit_local_affine(model, lat, lon, hei)
    east = np.array([1.0, 0.0, 0.0])
    x_axis = east - np.dot(east, n) * n
    if np.linalg.norm(x_axis) >= 1e-6:
        x_axis = x_axis / np.linalg.norm(x_axis)
        y_axis = np.cross(n, x_axis)
    else:
        # normal (anti)parallel to east: use north for the in-plane frame,
        # continuous with the east-projection limit (a rotation about north)
        warnings.warn(
            "surface normal nearly parallel to east; using north fallback axis",
            DegenerateNormalWarning,
            stacklevel=2,
        )
        north = np.array([0.0, 1.0, 0.0])
        y_axis = north - np.dot(north, n) * n
        y_axis = y_axis / np.linalg.norm(y_axis)
        x_axis = np.cross(y_axis, n)
    rot = np.stack([x_axis, y_axis, n], axis=1)
    return quat.from_rotmat(rot)


# ---------------------------------------------------------------------------
# text I/O (IKONOS-style RPB lines and space-separated RPC00B)
# ---------------------------------------------------------------------------

_COEF_RE = re.compile(r"^(LINE|SAMP)_(NUM|DEN)_COEFF_(\d+)$")

_SCALAR_KEYS = {
    "LINE_OFF": "line_off",
    "SAMP_OFF": "samp_off",
    "LAT_OFF": "lat_off",
    "LONG_OFF": "lon_off",
    "LON_OFF": "lon_off",
    "HEIGHT_OFF": "hei_off",
    "HEI_OFF": "hei_off",
    "LINE_SCALE": "line_scale",
    "SAMP_SCALE": "samp_scale",
    "LAT_SCALE": "lat_scale",
    "LONG_SCALE": "lon_scale",
    "LON_SCALE": "lon_scale",
    "HEIGHT_SCALE": "hei_scale",
    "HEI_SCALE": "hei_scale",
}


def parse_rpc_text(text: str) -> RpcModel:
    scalars = {}
    coefs = {
        "samp_num": np.full(20, np.nan),
        "samp_den": np.full(20, np.nan),
        "line_num": np.full(20, np.nan),
        "line_den": np.full(20, np.nan),
    }
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(":", " ").split()
        if len(parts) < 2:
            continue
        key = parts[0].upper()
        try:
            value = float(parts[1])
        except ValueError:
            continue
        if key in _SCALAR_KEYS:
            scalars[_SCALAR_KEYS[key]] = value
            continue
        m = _COEF_RE.match(key)
        if m:
            field_name = f"{m.group(1).lower()}_{m.group(2).lower()}"
            idx = int(m.group(3)) - 1
            if not 0 <= idx < 20:
                raise RpcParseError(f"coefficient index out of range in {key!r}")
            coefs[field_name][idx] = value
    missing = [k for k in _SCALAR_KEYS.values() if k not in scalars]
    if missing:
        raise RpcParseError(f"missing RPC fields: {sorted(set(missing))}")
    for name, arr in coefs.items():
        if np.isnan(arr).any():
            raise RpcParseError(f"incomplete coefficient set for {name}")
    return RpcModel(**coefs, **scalars)


def load_rpc(path) -> RpcModel:
    return parse_rpc_text(Path(path).read_text())


def write_rpc_text(model: RpcModel) -> str:
    lines = [
        f"LINE_OFF: {model.line_off:.12f} pixels",
        f"SAMP_OFF: {model.samp_off:.12f} pixels",
        f"LAT_OFF: {model.lat_off:.12f} degrees",
        f"LONG_OFF: {model.lon_off:.12f} degrees",
        f"HEIGHT_OFF: {model.hei_off:.12f} meters",
        f"LINE_SCALE: {model.line_scale:.12f} pixels",
        f"SAMP_SCALE: {model.samp_scale:.12f} pixels",
        f"LAT_SCALE: {model.lat_scale:.12f} degrees",
        f"LONG_SCALE: {model.lon_scale:.12f} degrees",
        f"HEIGHT_SCALE: {model.hei_scale:.12f} meters",
    ]
    for name, arr in (
        ("LINE_NUM_COEFF", model.line_num),
        ("LINE_DEN_COEFF", model.line_den),
        ("SAMP_NUM_COEFF", model.samp_num),
        ("SAMP_DEN_COEFF", model.samp_den),
    ):
        for i, c in enumerate(arr):
            lines.append(f"{name}_{i + 1}: {c:.16e}")
    return "\n".join(lines) + "\n"


def save_rpc(model: RpcModel, path) -> None:
    Path(path).write_text(write_rpc_text(model))


# ---------------------------------------------------------------------------
# georeference sidecar
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Sidecar:
    """Scene georeference: datum recorded verbatim from input metadata."""

    datum: str
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float
    h_min: float
    h_max: float

    @property
    def anchor(self):
        return (0.5 * (self.lat_min + self.lat_max), 0.5 * (self.lon_min + self.lon_max))

    def to_dict(self) -> dict:
        return {
            "datum": self.datum,
            "lat_bounds": [self.lat_min, self.lat_max],
            "lon_bounds": [self.lon_min, self.lon_max],
            "height_range": [self.h_min, self.h_max],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Sidecar":
        return cls(
            datum=d["datum"],
            lat_min=d["lat_bounds"][0],
            lat_max=d["lat_bounds"][1],
            lon_min=d["lon_bounds"][0],
            lon_max=d["lon_bounds"][1],
            h_min=d["height_range"][0],
            h_max=d["height_range"][1],
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "Sidecar":
        return cls.from_dict(json.loads(Path(path).read_text()))
