"""Confidence-aware fusion of multi-view matching and monocular prior features.

Two-branch, per-pixel attention: a query from the matching features scores a
key from each branch; a bias derived from the previous stage's confidence
shifts the two logits in opposite directions, and the resulting branch weight
routes a residual correction (mono value minus mvs value) onto the mvs value.
A scalar gate on the residual, initialized to zero together with the mono
value projection, makes the module an exact identity at initialization.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NonFiniteFeature, NonFiniteWeights, ShapeMismatch
from .ops import sigmoid

_WEIGHT_NAMES = ("wq", "bq", "wkm", "bkm", "wko", "bko", "wvm", "bvm", "wvo", "bvo")


@dataclass
class FusionConfig:
    bias_scale: float = 1.0  # lambda
    bias_threshold: float = 0.2  # tau

    def __post_init__(self):
        if self.bias_scale < 0:
            raise ValueError("bias_scale must be >= 0")
        if not 0.0 <= self.bias_threshold <= 1.0:
            raise ValueError("bias_threshold must lie in [0, 1]")


@dataclass
class ProjectionSet:
    """Five per-pixel linear maps (C_in -> d) plus the residual gate."""

    wq: np.ndarray
    bq: np.ndarray
    wkm: np.ndarray
    bkm: np.ndarray
    wko: np.ndarray
    bko: np.ndarray
    wvm: np.ndarray
    bvm: np.ndarray
    wvo: np.ndarray
    bvo: np.ndarray
    gate: float = 0.0

    def __post_init__(self):
        for name in _WEIGHT_NAMES:
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            setattr(self, name, arr)
            if not np.isfinite(arr).all():
                raise NonFiniteWeights(f"projection {name} has non-finite entries")
        d, c = self.wq.shape
        for w_name in ("wkm", "wvm"):
            if getattr(self, w_name).shape != (d, c):
                raise ShapeMismatch(f"{w_name} must be shaped {(d, c)}")
        if self.wko.shape[0] != d or self.wvo.shape[0] != d:
            raise ShapeMismatch("mono projections must share the embedding dim")
        for b_name in ("bq", "bkm", "bko", "bvm", "bvo"):
            if getattr(self, b_name).shape != (d,):
                raise ShapeMismatch(f"{b_name} must be shaped {(d,)}")

    @property
    def dim(self) -> int:
        return self.wq.shape[0]

    @classmethod
    def reference(cls, c_in: int, d: int | None = None, seed: int = 0,
                  value_identity: bool = True) -> "ProjectionSet":
        """Untrained reference weights: zero-initialized mono value projection
        and gate (exact identity at init); identity value maps when d == c_in."""
        d = c_in if d is None else d
        rng = np.random.default_rng(seed)
        scale = 1.0 / np.sqrt(c_in)

        def rand():
            return rng.normal(0.0, scale, size=(d, c_in))

        if value_identity and d == c_in:
            wvm = np.eye(d)
        else:
            wvm = rand()
        return cls(
            wq=rand(), bq=np.zeros(d),
            wkm=rand(), bkm=np.zeros(d),
            wko=rand(), bko=np.zeros(d),
            wvm=wvm, bvm=np.zeros(d),
            wvo=np.zeros((d, c_in)), bvo=np.zeros(d),
            gate=0.0,
        )

    # -- NPY bundle + JSON manifest ------------------------------------------

    def save(self, path) -> None:
        path = Path(path)
        arrays = {name: getattr(self, name) for name in _WEIGHT_NAMES}
        np.savez(path.with_suffix(".npz"), **arrays)
        manifest = {
            "format": "satsplat.projection_set.v1",
            "gate": float(self.gate),
            "tensors": {name: list(arrays[name].shape) for name in _WEIGHT_NAMES},
        }
        path.with_suffix(".json").write_text(json.dumps(manifest, indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "ProjectionSet":
        path = Path(path)
        manifest = json.loads(path.with_suffix(".json").read_text())
        data = np.load(path.with_suffix(".npz"))
        kwargs = {name: data[name] for name in _WEIGHT_NAMES}
        return cls(gate=float(manifest["gate"]), **kwargs)


def confidence_bias(conf: np.ndarray, cfg: FusionConfig) -> np.ndarray:
    """beta = lambda * (conf - tau), elementwise."""
    return cfg.bias_scale * (np.asarray(conf, dtype=np.float64) - cfg.bias_threshold)


@dataclass
class FuseResult:
    fused: np.ndarray  # (d, H, W)
    w_mono: np.ndarray  # (H, W)
    cache: dict = field(repr=False, default_factory=dict)


def _linear(w, b, x):
    return np.einsum("dc,chw->dhw", w, x, optimize=True) + b[:, None, None]


def fuse(mvs: np.ndarray, mono: np.ndarray, conf: np.ndarray,
         proj: ProjectionSet, cfg: FusionConfig) -> FuseResult:
    """Residual-routed fusion. ``conf`` is the previous-stage confidence map
    already upsampled to the feature resolution."""
    mvs = np.asarray(mvs, dtype=np.float64)
    mono = np.asarray(mono, dtype=np.float64)
    conf = np.asarray(conf, dtype=np.float64)
    if mvs.ndim != 3 or mono.ndim != 3:
        raise ShapeMismatch("features must be (C, H, W)")
    if mvs.shape[1:] != mono.shape[1:] or mvs.shape[1:] != conf.shape:
        raise ShapeMismatch(
            f"spatial shapes differ: mvs {mvs.shape}, mono {mono.shape}, conf {conf.shape}"
        )
    if not (np.isfinite(mvs).all() and np.isfinite(mono).all()):
        raise NonFiniteFeature("non-finite input features")
    d = proj.dim
    q = _linear(proj.wq, proj.bq, mvs)
    km = _linear(proj.wkm, proj.bkm, mvs)
    ko = _linear(proj.wko, proj.bko, mono)
    vm = _linear(proj.wvm, proj.bvm, mvs)
    vo = _linear(proj.wvo, proj.bvo, mono)
    beta = confidence_bias(conf, cfg)
    scale = 1.0 / np.sqrt(d)
    logit_mvs = (q * km).sum(axis=0) * scale + beta
    logit_mono = (q * ko).sum(axis=0) * scale - beta
    w_mono = sigmoid(logit_mono - logit_mvs)
    residual = vo - vm
    fused = vm + proj.gate * w_mono[None] * residual
    cache = dict(q=q, km=km, ko=ko, vm=vm, vo=vo, w_mono=w_mono, residual=residual,
                 mvs=mvs, mono=mono, scale=scale, proj=proj, cfg=cfg)
    return FuseResult(fused=fused, w_mono=w_mono, cache=cache)


def fuse_backward(result: FuseResult, grad_fused: np.ndarray,
                  grad_w_mono: np.ndarray | None = None) -> dict:
    """Gradients of the fused output w.r.t. all projections, the gate, and the
    inputs (mvs, mono, conf)."""
    c = result.cache
    proj: ProjectionSet = c["proj"]
    cfg: FusionConfig = c["cfg"]
    go = np.asarray(grad_fused, dtype=np.float64)
    w_mono = c["w_mono"]
    g = proj.gate

    d_vm = go * (1.0 - g * w_mono[None])
    d_vo = go * (g * w_mono[None])
    d_wmono = (go * c["residual"]).sum(axis=0) * g
    if grad_w_mono is not None:
        d_wmono = d_wmono + grad_w_mono
    d_gate = float((go * w_mono[None] * c["residual"]).sum())
    d_logit_diff = d_wmono * w_mono * (1.0 - w_mono)
    d_beta = -2.0 * d_logit_diff
    d_conf = cfg.bias_scale * d_beta
    scale = c["scale"]
    d_q = d_logit_diff[None] * (c["ko"] - c["km"]) * scale
    d_ko = d_logit_diff[None] * c["q"] * scale
    d_km = -d_logit_diff[None] * c["q"] * scale

    def linear_back(w, x, dy):
        dw = np.einsum("dhw,chw->dc", dy, x, optimize=True)
        db = dy.sum(axis=(1, 2))
        dx = np.einsum("dc,dhw->chw", w, dy, optimize=True)
        return dw, db, dx

    d_wq, d_bq, d_mvs = linear_back(proj.wq, c["mvs"], d_q)
    d_wkm, d_bkm, dx = linear_back(proj.wkm, c["mvs"], d_km)
    d_mvs += dx
    d_wvm, d_bvm, dx = linear_back(proj.wvm, c["mvs"], d_vm)
    d_mvs += dx
    d_wko, d_bko, d_mono = linear_back(proj.wko, c["mono"], d_ko)
    d_wvo, d_bvo, dx = linear_back(proj.wvo, c["mono"], d_vo)
    d_mono += dx
    return {
        "wq": d_wq, "bq": d_bq, "wkm": d_wkm, "bkm": d_bkm,
        "wko": d_wko, "bko": d_bko, "wvm": d_wvm, "bvm": d_bvm,
        "wvo": d_wvo, "bvo": d_bvo, "gate": d_gate,
        "mvs": d_mvs, "mono": d_mono, "conf": d_conf,
    }


def naive_fuse(mvs: np.ndarray, mono: np.ndarray) -> np.ndarray:
    """Concatenation followed by a fixed balanced 1x1 mix; the ablation
    baseline that replaces confidence-aware routing."""
    mvs = np.asarray(mvs, dtype=np.float64)
    mono = np.asarray(mono, dtype=np.float64)
    if mvs.shape != mono.shape:
        raise ShapeMismatch("naive fusion requires matching feature shapes")
    return 0.5 * (mvs + mono)
