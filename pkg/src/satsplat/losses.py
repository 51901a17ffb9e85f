"""Confidence-routed losses and image/height metrics.

Supervision is routed by a hard confidence threshold: geometric supervision
(multi-scale patch Pearson correlation) applies where confidence is strictly
below the threshold, appearance supervision (color MSE + SSIM + optional
perceptual hook) strictly above it. Masks are constants; gradients flow only
through predictions, so the routing zeroes gradients exactly on the
complementary regions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AllPatchesDegenerate, ShapeMismatch
from .ops import gaussian_window, win_corr, win_corr_adjoint

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
MIN_VALID_PER_PATCH = 8
PSNR_CAP_DB = 99.0


@dataclass
class LossConfig:
    stage_weights: tuple = (0.5, 1.0, 2.0)
    lambda_geo: float = 0.01
    lambda_app: float = 1.0
    lambda_loc: float = 1.0
    lambda_glo: float = 1.0
    lambda_rgb: float = 1.0
    lambda_ssim: float = 0.05
    lambda_lpips: float = 0.1
    conf_threshold: float = 0.5
    patch_sizes: tuple = (32, 16, 8)

    def __post_init__(self):
        for name in ("lambda_geo", "lambda_app", "lambda_loc", "lambda_glo",
                     "lambda_rgb", "lambda_ssim", "lambda_lpips"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 < self.conf_threshold < 1.0:
            raise ValueError("conf_threshold must lie in (0, 1)")
        if any(w < 0 for w in self.stage_weights):
            raise ValueError("stage weights must be >= 0")


@dataclass
class SupervisionMasks:
    mask_geo: np.ndarray  # geometric supervision region
    mask_app: np.ndarray  # appearance supervision region
    mask_gt: np.ndarray  # validity of the height ground truth


def routing_masks(conf: np.ndarray, mask_gt: np.ndarray, tau: float) -> SupervisionMasks:
    """Strict inequalities on both sides of tau keep the masks disjoint;
    pixels at exactly tau belong to neither branch."""
    conf = np.asarray(conf, dtype=np.float64)
    mask_gt = np.asarray(mask_gt, dtype=bool)
    if conf.shape != mask_gt.shape:
        raise ShapeMismatch("confidence/gt-mask shapes differ")
    return SupervisionMasks(
        mask_geo=mask_gt & (conf < tau),
        mask_app=conf > tau,
        mask_gt=mask_gt,
    )


@dataclass
class LossResult:
    value: float
    grad: np.ndarray | None = None
    diag: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# multi-scale patch Pearson geometry loss
# ---------------------------------------------------------------------------


def _patch_slices(shape, size):
    """Non-overlapping tiles; partial edge tiles kept if >= 25% of full area."""
    h, w = shape
    out = []
    for r0 in range(0, h, size):
        for c0 in range(0, w, size):
            r1 = min(r0 + size, h)
            c1 = min(c0 + size, w)
            if (r1 - r0) * (c1 - c0) >= 0.25 * size * size:
                out.append((slice(r0, r1), slice(c0, c1)))
    return out


def _pearson(x: np.ndarray, y: np.ndarray):
    """(rho, d rho / d x) over flat samples; None when variance degenerates."""
    n = x.size
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(xc @ xc)
    syy = float(yc @ yc)
    if sxx <= 0.0 or syy <= 0.0:
        return None, None
    sxy = float(xc @ yc)
    denom = np.sqrt(sxx * syy)
    rho = sxy / denom
    grad = yc / denom - rho * xc / sxx
    return rho, grad


def pearson_geo_loss(pred_h: np.ndarray, gt_h: np.ndarray, masks: SupervisionMasks,
                     cfg: LossConfig) -> LossResult:
    """Per scale: local term = mean over patches of (1 - rho) on masked pixels,
    global term = (1 - rho) over the per-patch masked means; scales averaged.
    Patches with < 8 valid pixels or degenerate variance are skipped and
    counted."""
    pred_h = np.asarray(pred_h, dtype=np.float64)
    gt_h = np.asarray(gt_h, dtype=np.float64)
    if pred_h.shape != gt_h.shape:
        raise ShapeMismatch("pred/gt height shapes differ")
    mask = masks.mask_geo
    grad = np.zeros_like(pred_h)
    scale_values = []
    skipped = 0
    used = 0
    for size in cfg.patch_sizes:
        patches = _patch_slices(pred_h.shape, size)
        loc_sum = 0.0
        loc_grads = []
        included = []
        for sl in patches:
            m = mask[sl]
            n = int(m.sum())
            if n < MIN_VALID_PER_PATCH:
                skipped += 1
                continue
            x = pred_h[sl][m]
            y = gt_h[sl][m]
            rho, dr = _pearson(x, y)
            if rho is None:
                skipped += 1
                continue
            loc_sum += 1.0 - rho
            loc_grads.append((sl, m, -dr))
            included.append((sl, m, x.mean(), y.mean(), n))
            used += 1
        if not included:
            continue
        n_inc = len(included)
        value = cfg.lambda_loc * loc_sum / n_inc
        for sl, m, g in loc_grads:
            buf = np.zeros(np.count_nonzero(m))
            buf += g * (cfg.lambda_loc / n_inc)
            tmp = grad[sl]
            tmp[m] += buf
            grad[sl] = tmp
        # global statistics under the same partition: Pearson of patch means
        if n_inc >= 2:
            mx = np.array([e[2] for e in included])
            my = np.array([e[3] for e in included])
            rho_g, dr_g = _pearson(mx, my)
            if rho_g is not None:
                value += cfg.lambda_glo * (1.0 - rho_g)
                for (sl, m, _, _, n), dmean in zip(included, dr_g):
                    tmp = grad[sl]
                    tmp[m] += -dmean * cfg.lambda_glo / n
                    grad[sl] = tmp
            else:
                skipped += 1
        scale_values.append(value)
    if not scale_values:
        raise AllPatchesDegenerate(
            "no patch at any scale has enough valid, non-constant pixels"
        )
    n_scales = len(scale_values)
    total = float(np.mean(scale_values))
    grad /= n_scales
    return LossResult(value=total, grad=grad,
                      diag={"skipped_patches": skipped, "used_patches": used,
                            "scales": n_scales})


# ---------------------------------------------------------------------------
# SSIM with masked-window weighting and an exact adjoint
# ---------------------------------------------------------------------------


def ssim_map(x: np.ndarray, y: np.ndarray, data_range: float = 1.0):
    """Per-pixel SSIM under an 11x11 Gaussian window (sigma 1.5), symmetric
    border padding. Returns (map, cache for the backward pass)."""
    win = gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_x = win_corr(x, win)
    mu_y = win_corr(y, win)
    sxx = win_corr(x * x, win) - mu_x * mu_x
    syy = win_corr(y * y, win) - mu_y * mu_y
    sxy = win_corr(x * y, win) - mu_x * mu_y
    a1 = 2 * mu_x * mu_y + c1
    a2 = 2 * sxy + c2
    b1 = mu_x * mu_x + mu_y * mu_y + c1
    b2 = sxx + syy + c2
    s = (a1 * a2) / (b1 * b2)
    cache = dict(win=win, x=x, y=y, mu_x=mu_x, mu_y=mu_y, a1=a1, a2=a2, b1=b1,
                 b2=b2, s=s)
    return s, cache


def ssim_map_backward(cache: dict, grad_s: np.ndarray) -> np.ndarray:
    """d(sum(grad_s * S))/dx with the exact padded-window adjoint."""
    win = cache["win"]
    x, y = cache["x"], cache["y"]
    mu_x, mu_y = cache["mu_x"], cache["mu_y"]
    a1, a2, b1, b2, s = cache["a1"], cache["a2"], cache["b1"], cache["b2"], cache["s"]
    inv_bb = 1.0 / (b1 * b2)
    d_mu = grad_s * (2 * mu_y * a2 * inv_bb - 2 * mu_x * s / b1)
    d_sxx = grad_s * (-s / b2)
    d_sxy = grad_s * (2 * a1 * inv_bb)
    # sxx and sxy subtract mean products, feeding back into mu_x
    d_mu = d_mu - 2 * mu_x * d_sxx - mu_y * d_sxy
    grad_x = win_corr_adjoint(d_mu, win)
    grad_x += 2 * x * win_corr_adjoint(d_sxx, win)
    grad_x += y * win_corr_adjoint(d_sxy, win)
    return grad_x


def appearance_loss(pred_rgb: np.ndarray, gt_rgb: np.ndarray,
                    masks: SupervisionMasks, cfg: LossConfig,
                    perceptual=None) -> LossResult:
    """Color MSE + structural (1 - SSIM) + optional perceptual term, computed
    under the appearance mask. Masked-out pixels are substituted with ground
    truth before SSIM (zero gradient there, exactly) and window contributions
    are weighted by mask coverage."""
    pred_rgb = np.asarray(pred_rgb, dtype=np.float64)
    gt_rgb = np.asarray(gt_rgb, dtype=np.float64)
    if pred_rgb.shape != gt_rgb.shape or pred_rgb.ndim != 3:
        raise ShapeMismatch("rgb images must share an (H,W,3) shape")
    mask = masks.mask_app.astype(np.float64)
    n_mask = mask.sum()
    if n_mask == 0:
        return LossResult(value=0.0, grad=np.zeros_like(pred_rgb),
                          diag={"empty_mask": True})
    grad = np.zeros_like(pred_rgb)
    # color term
    diff = (pred_rgb - gt_rgb) * mask[:, :, None]
    mse = float((diff ** 2).sum() / (n_mask * 3))
    grad += cfg.lambda_rgb * 2.0 * diff / (n_mask * 3)
    # structural term with coverage-weighted windows
    win = gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    coverage = win_corr(mask, win)
    cov_sum = coverage.sum()
    ssim_vals = []
    for ch in range(3):
        x = mask * pred_rgb[:, :, ch] + (1.0 - mask) * gt_rgb[:, :, ch]
        s, cache = ssim_map(x, gt_rgb[:, :, ch])
        ssim_vals.append(float((s * coverage).sum() / cov_sum))
        gs = -cfg.lambda_ssim * coverage / (cov_sum * 3)
        grad[:, :, ch] += ssim_map_backward(cache, gs) * mask
    ssim_val = float(np.mean(ssim_vals))
    # perceptual term: external scorer hook, disabled by default
    perc = 0.0
    if perceptual is not None:
        out = perceptual(pred_rgb, gt_rgb, masks.mask_app)
        if isinstance(out, tuple):
            perc, perc_grad = out
            grad += cfg.lambda_lpips * np.asarray(perc_grad, dtype=np.float64)
        else:
            perc = float(out)
    value = cfg.lambda_rgb * mse + cfg.lambda_ssim * (1.0 - ssim_val) \
        + cfg.lambda_lpips * perc
    return LossResult(value=float(value), grad=grad,
                      diag={"mse": mse, "ssim": ssim_val, "perceptual": perc,
                            "empty_mask": False})


def total_loss(geo_losses, app_losses, cfg: LossConfig) -> LossResult:
    """Stage-weighted sum of geometric and appearance branch losses."""
    geo = [float(g) for g in geo_losses]
    app = [float(a) for a in app_losses]
    if len(geo) != len(cfg.stage_weights) or len(app) != len(cfg.stage_weights):
        raise ShapeMismatch("one geo and one app loss per stage is required")
    value = sum(
        w * (cfg.lambda_geo * g + cfg.lambda_app * a)
        for w, g, a in zip(cfg.stage_weights, geo, app)
    )
    d_geo = np.array([w * cfg.lambda_geo for w in cfg.stage_weights])
    d_app = np.array([w * cfg.lambda_app for w in cfg.stage_weights])
    return LossResult(value=float(value),
                      diag={"d_geo": d_geo, "d_app": d_app})


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def psnr(pred_rgb: np.ndarray, gt_rgb: np.ndarray, peak: float = 1.0) -> float:
    mse = float(np.mean((np.asarray(pred_rgb, np.float64)
                         - np.asarray(gt_rgb, np.float64)) ** 2))
    if mse <= 0.0:
        return PSNR_CAP_DB
    val = 10.0 * np.log10(peak * peak / mse)
    return float(min(val, PSNR_CAP_DB))


def ssim_metric(pred_rgb: np.ndarray, gt_rgb: np.ndarray) -> float:
    pred_rgb = np.asarray(pred_rgb, np.float64)
    gt_rgb = np.asarray(gt_rgb, np.float64)
    vals = []
    for ch in range(pred_rgb.shape[2]):
        s, _ = ssim_map(pred_rgb[:, :, ch], gt_rgb[:, :, ch])
        vals.append(float(s.mean()))
    return float(np.mean(vals))


def height_metrics(pred_h: np.ndarray, gt_h: np.ndarray,
                   mask: np.ndarray | None = None) -> dict:
    pred_h = np.asarray(pred_h, np.float64)
    gt_h = np.asarray(gt_h, np.float64)
    if mask is None:
        mask = np.ones(pred_h.shape, dtype=bool)
    err = np.abs(pred_h[mask] - gt_h[mask])
    if err.size == 0:
        raise ShapeMismatch("empty mask in height metrics")
    return {
        "mae": float(err.mean()),
        "rmse": float(np.sqrt((err ** 2).mean())),
        "pag_2_5": float((err < 2.5).mean()),
        "pag_7_5": float((err < 7.5).mean()),
    }


def image_height_metrics(pred_rgb=None, gt_rgb=None, pred_h=None, gt_h=None,
                         mask=None) -> dict:
    """PSNR/SSIM on rgb (full frame), MAE/RMSE/PAG on heights under the mask."""
    out = {}
    if pred_rgb is not None and gt_rgb is not None:
        out["psnr"] = psnr(pred_rgb, gt_rgb)
        out["ssim"] = ssim_metric(pred_rgb, gt_rgb)
    if pred_h is not None and gt_h is not None:
        out.update(height_metrics(pred_h, gt_h, mask))
    return out
