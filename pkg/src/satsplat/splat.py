"""Pixel-aligned oriented 2D Gaussian splats and a differentiable rasterizer.

Each splat is an elliptical disk in the local ENU frame: center, two tangent
scales, a unit quaternion orienting the disk, diffuse RGB, and opacity. A
local affine camera fitted to the RPC maps disk coordinates affinely to pixel
offsets, so the per-pixel Gaussian weight and the disk-plane intersection
height have closed forms. Rendering composites front-to-back with 3-sigma
truncation; the analytic reverse pass returns gradients for every attribute
(quaternion gradients projected to the unit-sphere tangent).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels, quat
from .errors import AffineFitError, NonFiniteWeights, ShapeMismatch
from .ops import sigmoid, softplus
from .rpc import RpcModel, Sidecar, enu_from_geodetic

SCALE_FLOOR_M = 0.01
ACC_FLOOR = 1e-8
DET_FLOOR = 1e-12
# footprint truncation: Gaussian weight below exp(-D2_MAX/2) ~ 1.2e-4 is cut
D2_MAX = 18.0


@dataclass
class Gaussian2DSet:
    """Splat attributes in the scene ENU frame (one row per splat)."""

    centers: np.ndarray  # (N, 3) meters
    scales: np.ndarray  # (N, 2) meters, > 0
    quats: np.ndarray  # (N, 4) unit, (w, x, y, z)
    colors: np.ndarray  # (N, 3) in [0, 1]
    alphas: np.ndarray  # (N,) in [0, 1]

    def __post_init__(self):
        self.centers = np.asarray(self.centers, np.float64).reshape(-1, 3)
        n = self.centers.shape[0]
        self.scales = np.asarray(self.scales, np.float64).reshape(n, 2)
        self.quats = np.asarray(self.quats, np.float64).reshape(n, 4)
        self.colors = np.asarray(self.colors, np.float64).reshape(n, 3)
        self.alphas = np.asarray(self.alphas, np.float64).reshape(n)

    def __len__(self):
        return self.centers.shape[0]

    def validate(self):
        for name in ("centers", "scales", "quats", "colors", "alphas"):
            if not np.isfinite(getattr(self, name)).all():
                raise NonFiniteWeights(f"non-finite splat {name}")
        if not (self.scales > 0).all():
            raise ValueError("splat scales must be positive")
        if np.abs(np.linalg.norm(self.quats, axis=1) - 1.0).max() > 1e-6:
            raise ValueError("splat quaternions must be unit norm")
        if self.colors.min() < 0 or self.colors.max() > 1:
            raise ValueError("splat colors must lie in [0,1]")
        if self.alphas.min() < 0 or self.alphas.max() > 1:
            raise ValueError("splat opacities must lie in [0,1]")
        return self


@dataclass
class RenderOutput:
    rgb: np.ndarray  # (H, W, 3)
    height: np.ndarray  # (H, W) meters (accumulation-normalized)
    accum: np.ndarray  # (H, W) in [0, 1]
    degenerate_count: int = 0
    cache: dict | None = field(default=None, repr=False)


@dataclass
class AffineCamera:
    """(u, v) ~= p @ enu + b with parallel viewing rays along ``ray``."""

    p: np.ndarray  # (2, 3)
    b: np.ndarray  # (2,)
    ray: np.ndarray  # (3,) unit, pointing from the sensor toward the ground
    residual_px: float = 0.0

    def project(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.p.T + self.b

    def depth(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.ray

    def shifted(self, du: float, dv: float) -> "AffineCamera":
        return AffineCamera(p=self.p, b=self.b - np.array([du, dv]), ray=self.ray,
                            residual_px=self.residual_px)


def fit_affine_camera(model: RpcModel, sidecar: Sidecar,
                      lat_bounds=None, lon_bounds=None, h_bounds=None,
                      n: int = 5) -> AffineCamera:
    """Least-squares affine fit of the RPC over a ground volume (defaults to
    the full sidecar bounds). Residual is reported in pixels."""
    anchor = sidecar.anchor
    lat_b = lat_bounds or (sidecar.lat_min, sidecar.lat_max)
    lon_b = lon_bounds or (sidecar.lon_min, sidecar.lon_max)
    h_b = h_bounds or (sidecar.h_min, sidecar.h_max)
    la, lo, he = np.meshgrid(
        np.linspace(*lat_b, n), np.linspace(*lon_b, n), np.linspace(*h_b, n),
        indexing="ij",
    )
    u, v = model.project(la.ravel(), lo.ravel(), he.ravel())
    x, y, z = enu_from_geodetic(la.ravel(), lo.ravel(), he.ravel(), anchor)
    g = np.stack([x, y, z, np.ones_like(x)], axis=1)
    sol, *_ = np.linalg.lstsq(g, np.stack([u, v], axis=1), rcond=None)
    p = sol[:3].T
    b = sol[3]
    fit = g @ sol
    residual = float(np.hypot(fit[:, 0] - u, fit[:, 1] - v).max())
    ray = np.cross(p[0], p[1])
    nrm = np.linalg.norm(ray)
    if nrm < 1e-30:
        raise AffineFitError("projection rows are parallel; cannot form a viewing ray")
    ray /= nrm
    if ray[2] > 0:
        ray = -ray
    return AffineCamera(p=p, b=b, ray=ray, residual_px=residual)


# ---------------------------------------------------------------------------
# center lifting and the attribute head
# ---------------------------------------------------------------------------


def lift_centers(height: np.ndarray, model: RpcModel, anchor):
    """Back-project each pixel of a height map to an ENU splat center.

    Returns (centers (H*W, 3), valid (H*W,)); pixels whose localization fails
    to converge are masked out.
    """
    height = np.asarray(height, np.float64)
    h, w = height.shape
    uu, vv = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64), indexing="xy")
    lat, lon, hei, ok = model.localize(uu.ravel(), vv.ravel(), height.ravel(),
                                       mask_failures=True)
    x, y, z = enu_from_geodetic(lat, lon, hei, anchor)
    return np.stack([x, y, z], axis=1), ok


@dataclass
class GaussianHead:
    """Per-pixel affine map from head input features to raw splat attributes:
    2 scale channels, 4 quaternion-delta channels, 3 color, 1 opacity."""

    weight: np.ndarray  # (10, C)
    bias: np.ndarray  # (10,)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, np.float64)
        self.bias = np.asarray(self.bias, np.float64)
        if not (np.isfinite(self.weight).all() and np.isfinite(self.bias).all()):
            raise NonFiniteWeights("gaussian head weights must be finite")
        if self.weight.shape[0] != 10 or self.bias.shape != (10,):
            raise ShapeMismatch("head must map C -> 10 attribute channels")

    @classmethod
    def reference(cls, channels: int) -> "GaussianHead":
        return cls(weight=np.zeros((10, channels)), bias=np.zeros(10))

    def save(self, path) -> None:
        np.savez(Path(path).with_suffix(".npz"), weight=self.weight, bias=self.bias)

    @classmethod
    def load(cls, path) -> "GaussianHead":
        data = np.load(Path(path).with_suffix(".npz"))
        return cls(weight=data["weight"], bias=data["bias"])


def predict_attributes(x: np.ndarray, head: GaussianHead, rot_prior: np.ndarray):
    """Activated splat attributes from head input features.

    softplus + floor keeps scales positive, the quaternion delta is normalized
    and composed onto the orientation prior, sigmoid bounds colors/opacity.
    Returns dict with scales (H,W,2), quats (H,W,4), colors (H,W,3),
    alphas (H,W).
    """
    x = np.asarray(x, np.float64)
    c, h, w = x.shape
    if head.weight.shape[1] != c:
        raise ShapeMismatch(f"head expects {head.weight.shape[1]} channels, got {c}")
    raw = np.einsum("oc,chw->ohw", head.weight, x, optimize=True) + head.bias[:, None, None]
    scales = softplus(raw[0:2]).transpose(1, 2, 0) + SCALE_FLOOR_M
    delta = raw[2:6].transpose(1, 2, 0)
    delta = delta + np.array([1.0, 0.0, 0.0, 0.0])
    delta = delta / np.linalg.norm(delta, axis=-1, keepdims=True)
    prior = np.broadcast_to(np.asarray(rot_prior, np.float64), (h, w, 4))
    quats = quat.canonical(quat.multiply(prior, delta))
    colors = sigmoid(raw[6:9]).transpose(1, 2, 0)
    alphas = sigmoid(raw[9])
    return {"scales": scales, "quats": quats, "colors": colors, "alphas": alphas}


def make_splats(centers, valid, attrs) -> Gaussian2DSet:
    """Assemble a Gaussian2DSet from lifted centers and head attributes."""
    v = valid.ravel()
    return Gaussian2DSet(
        centers=centers[v],
        scales=attrs["scales"].reshape(-1, 2)[v],
        quats=attrs["quats"].reshape(-1, 4)[v],
        colors=attrs["colors"].reshape(-1, 3)[v],
        alphas=attrs["alphas"].reshape(-1)[v],
    )


# ---------------------------------------------------------------------------
# rasterization
# ---------------------------------------------------------------------------


def _prepare_geometry(splats: Gaussian2DSet, camera: AffineCamera):
    qn = splats.quats / np.linalg.norm(splats.quats, axis=1, keepdims=True)
    rot = quat.to_rotmat(qn)  # (N,3,3)
    tu = rot[:, :, 0]
    tv = rot[:, :, 1]
    ptu = tu @ camera.p.T  # (N,2)
    ptv = tv @ camera.p.T
    l1 = splats.scales[:, 0]
    l2 = splats.scales[:, 1]
    m = np.empty((len(splats), 2, 2))
    m[:, :, 0] = l1[:, None] * ptu
    m[:, :, 1] = l2[:, None] * ptv
    det = m[:, 0, 0] * m[:, 1, 1] - m[:, 0, 1] * m[:, 1, 0]
    valid = np.abs(det) > DET_FLOOR
    det_safe = np.where(valid, det, 1.0)
    minv = np.empty_like(m)
    minv[:, 0, 0] = m[:, 1, 1] / det_safe
    minv[:, 0, 1] = -m[:, 0, 1] / det_safe
    minv[:, 1, 0] = -m[:, 1, 0] / det_safe
    minv[:, 1, 1] = m[:, 0, 0] / det_safe
    uv0 = camera.project(splats.centers)
    zc = np.stack([splats.centers[:, 2], l1 * tu[:, 2], l2 * tv[:, 2]], axis=1)
    ssq = (m ** 2).sum(axis=(1, 2))
    half = 0.5 * ssq
    sep = np.sqrt(np.maximum(half * half - det * det, 0.0))
    sigma_max = np.sqrt(np.maximum(half + sep, 0.0))
    radius = np.sqrt(D2_MAX) * sigma_max + 1e-9
    depth = camera.depth(splats.centers)
    return dict(qn=qn, rot=rot, tu=tu, tv=tv, ptu=ptu, ptv=ptv, m=m, minv=minv,
                det=det, valid=valid, uv0=uv0, zc=zc, radius=radius, depth=depth)


def rasterize(splats: Gaussian2DSet, camera: AffineCamera, hw: tuple[int, int],
              tile: int = 16, retain: bool = False) -> RenderOutput:
    """Front-to-back alpha compositing of the splat set onto an (H, W) grid.

    The height channel is the accumulation-normalized expected disk-intersection
    height; the raw composite and transmittance live in the cache for the
    reverse pass. Splats whose footprint is edge-on (singular pixel mapping)
    are skipped and counted.
    """
    h, w = hw
    geo = _prepare_geometry(splats, camera)
    valid_idx = np.nonzero(geo["valid"])[0]
    order = valid_idx[np.lexsort((valid_idx, geo["depth"][valid_idx]))]
    rgb, hraw, acc = kernels.composite_forward(
        order, geo["uv0"], geo["minv"], geo["zc"], splats.colors, splats.alphas,
        geo["radius"], h, w, tile, D2_MAX,
    )
    denom = np.maximum(acc, ACC_FLOOR)
    height = hraw / denom
    cache = None
    if retain:
        cache = dict(geo=geo, order=order, splats=splats, camera=camera, hw=hw,
                     tile=tile, hraw=hraw, acc=acc, denom=denom)
    return RenderOutput(rgb=rgb, height=height, accum=acc,
                        degenerate_count=int((~geo["valid"]).sum()), cache=cache)


def rasterize_backward(out: RenderOutput, grad_rgb=None, grad_height=None,
                       grad_accum=None) -> dict:
    """Analytic gradients of the render w.r.t. splat attributes.

    Returns dict with centers (N,3), scales (N,2), quats (N,4, tangent-projected),
    colors (N,3), alphas (N,).
    """
    cache = out.cache
    if cache is None:
        raise ValueError("rasterize(..., retain=True) is required before backward")
    geo = cache["geo"]
    splats: Gaussian2DSet = cache["splats"]
    camera: AffineCamera = cache["camera"]
    h, w = cache["hw"]
    n = len(splats)
    gr = np.zeros((h, w, 3)) if grad_rgb is None else np.asarray(grad_rgb, np.float64)
    gh = np.zeros((h, w)) if grad_height is None else np.asarray(grad_height, np.float64)
    ga = np.zeros((h, w)) if grad_accum is None else np.asarray(grad_accum, np.float64)

    denom = cache["denom"]
    grad_hraw = gh / denom
    grad_acc = ga + np.where(cache["acc"] > ACC_FLOOR,
                             -gh * cache["hraw"] / (denom * denom), 0.0)

    g_uv0, g_minv, g_zc, g_color, g_alpha = kernels.composite_backward(
        cache["order"], geo["uv0"], geo["minv"], geo["zc"], splats.colors,
        splats.alphas, geo["radius"], h, w, gr, grad_hraw, grad_acc, cache["tile"],
        D2_MAX,
    )

    # chain through minv = inv(m): dL/dm = -minv^T dL/dminv minv^T
    minv_t = geo["minv"].transpose(0, 2, 1)
    g_m = -np.einsum("nij,njk,nkl->nil", minv_t, g_minv, minv_t, optimize=True)
    live = geo["valid"]
    g_m[~live] = 0.0
    g_uv0[~live] = 0.0
    g_zc[~live] = 0.0

    l1 = splats.scales[:, 0]
    l2 = splats.scales[:, 1]
    g_col0 = g_m[:, :, 0]  # (N,2)
    g_col1 = g_m[:, :, 1]
    g_l1 = (g_col0 * geo["ptu"]).sum(axis=1) + g_zc[:, 1] * geo["tu"][:, 2]
    g_l2 = (g_col1 * geo["ptv"]).sum(axis=1) + g_zc[:, 2] * geo["tv"][:, 2]
    g_ptu = l1[:, None] * g_col0
    g_ptv = l2[:, None] * g_col1
    g_tu = g_ptu @ camera.p  # (N,3)
    g_tv = g_ptv @ camera.p
    g_tu[:, 2] += l1 * g_zc[:, 1]
    g_tv[:, 2] += l2 * g_zc[:, 2]

    g_centers = g_uv0 @ camera.p
    g_centers[:, 2] += g_zc[:, 0]

    g_rot = np.zeros((n, 3, 3))
    g_rot[:, :, 0] = g_tu
    g_rot[:, :, 1] = g_tv
    jac = quat.rotmat_jacobian(geo["qn"])  # (N,4,3,3)
    g_q = np.einsum("nqkl,nkl->nq", jac, g_rot, optimize=True)
    g_q = quat.tangent_project(geo["qn"], g_q)

    return {
        "centers": g_centers,
        "scales": np.stack([g_l1, g_l2], axis=1),
        "quats": g_q,
        "colors": g_color,
        "alphas": g_alpha,
    }


def _rect_camera(model: RpcModel, sidecar: Sidecar, rect) -> AffineCamera:
    """Affine fit restricted to the ground footprint of a pixel rect."""
    r0, r1, c0, c1 = rect
    corners_u = np.array([c0, c1 - 1, c0, c1 - 1], dtype=np.float64)
    corners_v = np.array([r0, r0, r1 - 1, r1 - 1], dtype=np.float64)
    lat, lon, _, ok = model.localize(
        np.tile(corners_u, 2), np.tile(corners_v, 2),
        np.repeat([sidecar.h_min, sidecar.h_max], 4), mask_failures=True,
    )
    lat, lon = lat[ok], lon[ok]
    if lat.size < 4:
        raise AffineFitError("could not localize tile corners for the affine fit")
    return fit_affine_camera(
        model, sidecar,
        lat_bounds=(float(lat.min()), float(lat.max())),
        lon_bounds=(float(lon.min()), float(lon.max())),
    )


def render_view(splats: Gaussian2DSet, model: RpcModel, sidecar: Sidecar,
                hw: tuple[int, int], tile: int = 16, retain: bool = False,
                max_residual_px: float = 0.3) -> RenderOutput:
    """Fit a local affine camera over the view footprint and rasterize. Tiles
    whose fit residual exceeds the threshold are subdivided into quadrants,
    each refit over its own ground footprint. ``retain`` (for the reverse
    pass) requires the unsubdivided path."""
    h, w = hw
    camera = _rect_camera(model, sidecar, (0, h, 0, w))
    if camera.residual_px <= max_residual_px:
        return rasterize(splats, camera, hw, tile=tile, retain=retain)
    if retain:
        raise AffineFitError(
            "affine fit residual requires subdivision; gradients are only "
            "available for single-camera renders"
        )
    out = RenderOutput(rgb=np.zeros((h, w, 3)), height=np.zeros((h, w)),
                       accum=np.zeros((h, w)))

    def emit(rect, depth):
        r0, r1, c0, c1 = rect
        cam = _rect_camera(model, sidecar, rect)
        if cam.residual_px <= max_residual_px:
            piece = rasterize(splats, cam.shifted(c0, r0), (r1 - r0, c1 - c0), tile=tile)
            out.rgb[r0:r1, c0:c1] = piece.rgb
            out.height[r0:r1, c0:c1] = piece.height
            out.accum[r0:r1, c0:c1] = piece.accum
            out.degenerate_count += piece.degenerate_count
            return
        if min(r1 - r0, c1 - c0) <= 16 or depth >= 6:
            raise AffineFitError(
                f"affine fit residual {cam.residual_px:.3f} px above "
                f"{max_residual_px} px at minimum tile size"
            )
        mr, mc = (r0 + r1) // 2, (c0 + c1) // 2
        for sub in ((r0, mr, c0, mc), (r0, mr, mc, c1), (mr, r1, c0, mc), (mr, r1, mc, c1)):
            emit(sub, depth + 1)

    emit((0, h, 0, w), 0)
    return out


# ---------------------------------------------------------------------------
# PLY import/export
# ---------------------------------------------------------------------------

_PLY_PROPS = ("x", "y", "z", "scale_0", "scale_1", "rot_0", "rot_1", "rot_2",
              "rot_3", "r", "g", "b", "opacity")


def save_splats_ply(splats: Gaussian2DSet, path) -> None:
    n = len(splats)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {p}" for p in _PLY_PROPS]
    header.append("end_header")
    rows = np.hstack([
        splats.centers, splats.scales, splats.quats, splats.colors,
        splats.alphas[:, None],
    ]).astype("<f4")
    with open(Path(path), "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(rows.tobytes())


def load_splats_ply(path) -> Gaussian2DSet:
    raw = Path(path).read_bytes()
    end = raw.index(b"end_header\n") + len(b"end_header\n")
    header = raw[:end].decode("ascii").splitlines()
    n = None
    props = []
    for line in header:
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
        elif line.startswith("property float"):
            props.append(line.split()[-1])
    if n is None or props != list(_PLY_PROPS):
        raise ShapeMismatch("unsupported splat PLY layout")
    rows = np.frombuffer(raw[end:], dtype="<f4", count=n * len(props))
    rows = rows.reshape(n, len(props)).astype(np.float64)
    quats = rows[:, 5:9]
    quats = quats / np.linalg.norm(quats, axis=1, keepdims=True)
    return Gaussian2DSet(centers=rows[:, 0:3], scales=rows[:, 3:5], quats=quats,
                         colors=np.clip(rows[:, 9:12], 0.0, 1.0),
                         alphas=np.clip(rows[:, 12], 0.0, 1.0))
