"""Plane-sweep cost volumes over height hypotheses.

Warps source-view features to the target view through the RPC pair at each
hypothesized height, scores cross-view consistency as feature variance,
smooths the volume with a pluggable regularizer, and converts cost to a
per-pixel height probability distribution (expected height + confidence).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import AllInvalid, NonFiniteFeature, ShapeMismatch
from .rpc import RpcModel

log = logging.getLogger(__name__)

STAGE_SCALES = {1: 0.25, 2: 0.5, 3: 1.0}  # of input resolution


@dataclass
class FeatureVolume:
    view_id: str
    stage: int
    branch: str  # 'mvs' or 'mono'
    data: np.ndarray  # (C, H, W)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ShapeMismatch(f"feature data must be (C,H,W), got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise NonFiniteFeature(f"non-finite features in view {self.view_id!r}")
        if self.branch not in ("mvs", "mono"):
            raise ValueError(f"unknown branch {self.branch!r}")

    @property
    def shape(self):
        return self.data.shape


@dataclass
class HeightHypotheses:
    stage: int
    values: np.ndarray  # (K,) meters, strictly increasing

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or self.values.size < 2:
            raise ValueError("need at least 2 hypotheses")
        if not np.all(np.diff(self.values) > 0):
            raise ValueError("hypotheses must be strictly increasing")

    @property
    def k(self) -> int:
        return self.values.size

    @property
    def spacing(self) -> float:
        return float((self.values[-1] - self.values[0]) / (self.values.size - 1))


def uniform_hypotheses(stage: int, h_min: float, h_max: float, k: int) -> HeightHypotheses:
    return HeightHypotheses(stage=stage, values=np.linspace(h_min, h_max, k))


def refined_hypothesis_maps(center: np.ndarray, half_range: float, k: int,
                            h_min: float, h_max: float) -> np.ndarray:
    """Per-pixel hypothesis maps (K,H,W): uniform K-grid of width 2*half_range
    re-centered on ``center``, shifted so the grid stays inside [h_min, h_max]."""
    c = np.clip(center, h_min + half_range, h_max - half_range)
    grid = np.linspace(-half_range, half_range, k)
    return c[None, :, :] + grid[:, None, None]


@dataclass
class CostVolume:
    stage: int
    data: np.ndarray  # (K, H, W), variance cost, lower = more consistent
    valid: np.ndarray  # (K, H, W) bool
    sentinel: float

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.data.shape != self.valid.shape:
            raise ShapeMismatch("cost/valid shape mismatch")


@dataclass
class HeightDistribution:
    stage: int
    probs: np.ndarray  # (K, H, W)
    height: np.ndarray  # (H, W) meters
    confidence: np.ndarray  # (H, W), max probability
    hyps: np.ndarray  # (K,) shared values or (K, H, W) per-pixel maps
    temperature: float = 1.0


def _hyp_array(hyps) -> np.ndarray:
    if isinstance(hyps, HeightHypotheses):
        return hyps.values
    return np.asarray(hyps, dtype=np.float64)


def warp_features(target_model: RpcModel, source_model: RpcModel,
                  features: FeatureVolume, hyps):
    """Sample source features at the target grid reprojected through each
    height hypothesis. Returns (warped (K,C,H,W), mask (K,H,W)); out-of-bounds
    samples are zero-filled and masked invalid."""
    h_vals = _hyp_array(hyps)
    c, h, w = features.data.shape
    uu, vv = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64), indexing="xy")
    if h_vals.ndim == 1:
        k = h_vals.size
        heights = np.broadcast_to(h_vals[:, None, None], (k, h, w))
    else:
        k = h_vals.shape[0]
        if h_vals.shape != (k, h, w):
            raise ShapeMismatch("per-pixel hypothesis maps must be (K,H,W)")
        heights = h_vals
    u_t = np.broadcast_to(uu, (k, h, w)).ravel()
    v_t = np.broadcast_to(vv, (k, h, w)).ravel()
    lat, lon, hei, ok = target_model.localize(u_t, v_t, heights.ravel(),
                                              mask_failures=True)
    us, vs = source_model.project(lat, lon, hei)
    sampled, in_bounds = kernels.bilinear_gather(features.data, us, vs)
    valid = (in_bounds & ok).reshape(k, h, w)
    warped = sampled.reshape(c, k, h, w).transpose(1, 0, 2, 3) * valid[:, None]
    dead = int((~valid.any(axis=0)).sum())
    if dead:
        log.warning("warp %s->%s: %d pixel column(s) invalid at every hypothesis",
                    features.view_id, "target", dead)
    return warped, valid


def build_cost_volume(warped: np.ndarray, masks: np.ndarray,
                      exclude_index: int | None = None) -> CostVolume:
    """Across-view feature variance per (k,u,v), averaged over channels.

    ``warped`` is (V,K,C,H,W) with per-view masks (V,K,H,W). When
    ``exclude_index`` is given that view contributes geometry only (the target
    view of the sweep). Entries with fewer than 2 contributing views get a
    sentinel cost of (max finite cost + 1).
    """
    warped = np.asarray(warped, dtype=np.float64)
    masks = np.asarray(masks, dtype=bool)
    v, k, c, h, w = warped.shape
    use = np.ones(v, dtype=bool)
    if exclude_index is not None:
        use[exclude_index] = False
    data = warped[use]
    m = masks[use][:, :, None]  # (V',K,1,H,W)
    n = m.sum(axis=0)  # (K,1,H,W)
    ok = n[:, 0] >= 2  # (K,H,W)
    n_safe = np.maximum(n, 1)
    mean = (data * m).sum(axis=0) / n_safe
    var = ((data - mean[None]) ** 2 * m).sum(axis=0) / n_safe
    cost = var.mean(axis=1)  # channel mean -> (K,H,W)
    if not ok.any():
        raise AllInvalid("no pixel-hypothesis has >= 2 contributing views")
    finite_max = float(cost[ok].max())
    sentinel = finite_max + 1.0
    cost = np.where(ok, cost, sentinel)
    return CostVolume(stage=0, data=cost, valid=ok, sentinel=sentinel)


def regularize(volume: CostVolume, regularizer=None) -> CostVolume:
    """Default regularizer: one pass of separable 3-tap (0.25, 0.5, 0.25)
    smoothing along (k, u, v) with edge-clamped borders. External regularizers
    must preserve shape and finiteness."""
    if regularizer is None:
        out = kernels.smooth3(volume.data)
    else:
        out = np.asarray(regularizer(volume.data), dtype=np.float64)
        if out.shape != volume.data.shape:
            raise ShapeMismatch(
                f"regularizer changed shape {volume.data.shape} -> {out.shape}"
            )
        if not np.isfinite(out).all():
            raise NonFiniteFeature("regularizer produced non-finite costs")
    return CostVolume(stage=volume.stage, data=out, valid=volume.valid,
                      sentinel=volume.sentinel)


def spatial_aggregate(volume: CostVolume, passes: int) -> CostVolume:
    """Spatial-only cost aggregation: repeated separable 3-tap smoothing over
    (u, v) with edge-clamped borders, leaving the hypothesis axis untouched.
    Pools matching evidence across neighboring pixels, standing in for the
    spatial support a learned cost regularizer would provide. Invalid
    (sentinel) entries carry no weight so they do not bleed into neighbors."""

    def smooth(x):
        taps = (0.25, 0.5, 0.25)
        for _ in range(passes):
            p = np.pad(x, ((0, 0), (1, 1), (0, 0)), mode="edge")
            x = taps[0] * p[:, :-2] + taps[1] * p[:, 1:-1] + taps[2] * p[:, 2:]
            p = np.pad(x, ((0, 0), (0, 0), (1, 1)), mode="edge")
            x = taps[0] * p[:, :, :-2] + taps[1] * p[:, :, 1:-1] + taps[2] * p[:, :, 2:]
        return x

    w = volume.valid.astype(np.float64)
    num = smooth(volume.data * w)
    den = smooth(w)
    out = np.where(den > 1e-9, num / np.maximum(den, 1e-9), volume.sentinel)
    return CostVolume(stage=volume.stage, data=out, valid=volume.valid,
                      sentinel=volume.sentinel)


def softmax_height(volume: CostVolume, hyps, temperature: float = 1.0) -> HeightDistribution:
    """P = softmax_k(-cost/T); height = expectation; confidence = max_k P."""
    h_vals = _hyp_array(hyps)
    logits = -volume.data / temperature
    logits = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(logits)
    probs = e / e.sum(axis=0, keepdims=True)
    if h_vals.ndim == 1:
        height = np.einsum("khw,k->hw", probs, h_vals)
    else:
        height = (probs * h_vals).sum(axis=0)
    conf = probs.max(axis=0)
    return HeightDistribution(stage=volume.stage, probs=probs, height=height,
                              confidence=conf, hyps=h_vals, temperature=temperature)


def softmax_height_backward(dist: HeightDistribution, grad_height: np.ndarray) -> np.ndarray:
    """d height / d cost contracted with an upstream (H,W) gradient.

    With P = softmax(-cost/T) and H = sum_k P_k h_k:
    dH/dcost_j = -(1/T) * P_j * (h_j - H).
    """
    h = dist.hyps
    if h.ndim == 1:
        h = h[:, None, None]
    return (-1.0 / dist.temperature) * dist.probs * (h - dist.height[None]) * grad_height[None]


# ---------------------------------------------------------------------------
# confidence-binned reliability report
# ---------------------------------------------------------------------------


@dataclass
class BinRow:
    lo: float
    hi: float
    count: int
    mae: float | None
    rmse: float | None
    pag_2_5: float | None
    pag_7_5: float | None


@dataclass
class BinnedReport:
    rows: list[BinRow] = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["bin_lo", "bin_hi", "count", "mae", "rmse", "pag_2_5", "pag_7_5"])
            for r in self.rows:
                wr.writerow([r.lo, r.hi, r.count, r.mae, r.rmse, r.pag_2_5, r.pag_7_5])

    def plot_data(self) -> dict:
        centers = [0.5 * (r.lo + r.hi) for r in self.rows]
        return {
            "bin_center": centers,
            "count": [r.count for r in self.rows],
            "mae": [r.mae for r in self.rows],
            "rmse": [r.rmse for r in self.rows],
            "pag_2_5": [r.pag_2_5 for r in self.rows],
            "pag_7_5": [r.pag_7_5 for r in self.rows],
        }


def confidence_binned_report(height: np.ndarray, gt: np.ndarray, conf: np.ndarray,
                             bins: int, mask: np.ndarray | None = None) -> BinnedReport:
    """Partition pixels into equal-width confidence bins and compute per-bin
    height metrics. Empty bins yield null rows rather than errors."""
    from .losses import height_metrics

    height = np.asarray(height, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    conf = np.asarray(conf, dtype=np.float64)
    if not (height.shape == gt.shape == conf.shape):
        raise ShapeMismatch("height/gt/conf shapes differ")
    if mask is None:
        mask = np.ones(height.shape, dtype=bool)
    lo, hi = float(conf[mask].min()), float(conf[mask].max())
    if hi <= lo:
        hi = lo + 1e-12
    edges = np.linspace(lo, hi, bins + 1)
    report = BinnedReport()
    for b in range(bins):
        sel = mask & (conf >= edges[b]) & (
            (conf < edges[b + 1]) if b < bins - 1 else (conf <= edges[b + 1])
        )
        n = int(sel.sum())
        if n == 0:
            report.rows.append(BinRow(edges[b], edges[b + 1], 0, None, None, None, None))
            continue
        m = height_metrics(height, gt, sel)
        report.rows.append(
            BinRow(edges[b], edges[b + 1], n, m["mae"], m["rmse"], m["pag_2_5"], m["pag_7_5"])
        )
    return report


# ---------------------------------------------------------------------------
# NPY + JSON sidecar serialization
# ---------------------------------------------------------------------------


def save_tensor(path, array: np.ndarray, meta: dict) -> None:
    """NPY v1.0 tensor (float32) with a JSON sidecar next to it."""
    import json

    path = Path(path)
    np.save(path, np.asarray(array, dtype=np.float32))
    side = path.with_suffix(path.suffix + ".json") if path.suffix != ".npy" else path.with_suffix(".json")
    side.write_text(json.dumps(meta, indent=2) + "\n")


def load_tensor(path):
    import json

    path = Path(path)
    arr = np.load(path).astype(np.float64)
    side = path.with_suffix(".json")
    meta = json.loads(side.read_text()) if side.exists() else {}
    return arr, meta
