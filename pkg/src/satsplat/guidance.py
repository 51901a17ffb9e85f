"""Cross-stage residual guidance for the splat-attribute head.

The previous stage's rendered height map and the current stage's estimated
height map are robust-normalized (median / median-absolute-deviation), their
difference forms a signed residual channel; together with its magnitude and
the current confidence it is embedded and injected into the head input through
a sigmoid gate learned from the head input itself. The embedding is
zero-initialized so injection vanishes exactly at initialization.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NonFiniteWeights, ShapeMismatch
from .ops import conv2d, conv2d_backward, relu, sigmoid, upsample_bilinear

MAD_EPS = 1e-6


def robust_normalize(x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """(x - median) / (MAD + eps), statistics over valid pixels only.

    A constant map normalizes to zeros (numerator vanishes before the eps
    floor matters)."""
    x = np.asarray(x, dtype=np.float64)
    vals = x[mask] if mask is not None else x
    med = np.median(vals)
    mad = np.median(np.abs(vals - med))
    return (x - med) / (mad + MAD_EPS)


@dataclass
class ResidualGuidanceMap:
    """3-channel stack: signed residual, its magnitude, current confidence."""

    data: np.ndarray  # (3, H, W)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[0] != 3:
            raise ShapeMismatch(f"guidance map must be (3,H,W), got {self.data.shape}")

    @property
    def delta(self):
        return self.data[0]

    @property
    def magnitude(self):
        return self.data[1]

    @property
    def confidence(self):
        return self.data[2]


def cross_stage_residual(h_prev_rendered: np.ndarray, h_curr: np.ndarray,
                         conf_curr: np.ndarray,
                         mask_prev: np.ndarray | None = None,
                         mask_curr: np.ndarray | None = None) -> ResidualGuidanceMap:
    """Normalize both height maps, upsample the previous one to the current
    grid, and stack (delta, |delta|, confidence)."""
    h_curr = np.asarray(h_curr, dtype=np.float64)
    conf_curr = np.asarray(conf_curr, dtype=np.float64)
    if h_curr.shape != conf_curr.shape:
        raise ShapeMismatch("height / confidence shapes differ at the current stage")
    n_prev = robust_normalize(np.asarray(h_prev_rendered, np.float64), mask_prev)
    n_curr = robust_normalize(h_curr, mask_curr)
    up = upsample_bilinear(n_prev, h_curr.shape)
    if up.shape != h_curr.shape:
        raise ShapeMismatch("upsampled previous-stage map does not match current grid")
    delta = n_curr - up
    return ResidualGuidanceMap(np.stack([delta, np.abs(delta), conf_curr]))


@dataclass
class InjectionHead:
    """Gate branch (two 3x3 convs with a rectifier) and a zero-initialized
    1x1 embedding from the 3 guidance channels to the feature channels."""

    w1: np.ndarray  # (C, C, 3, 3)
    b1: np.ndarray  # (C,)
    w2: np.ndarray  # (C, C, 3, 3)
    b2: np.ndarray  # (C,)
    wr: np.ndarray  # (C, 3, 1, 1)
    br: np.ndarray  # (C,)

    def __post_init__(self):
        for name in ("w1", "b1", "w2", "b2", "wr", "br"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            setattr(self, name, arr)
            if not np.isfinite(arr).all():
                raise NonFiniteWeights(f"injection head {name} has non-finite entries")
        c = self.w1.shape[0]
        if self.w1.shape != (c, c, 3, 3) or self.w2.shape != (c, c, 3, 3):
            raise ShapeMismatch("gate convs must be (C,C,3,3)")
        if self.wr.shape != (c, 3, 1, 1):
            raise ShapeMismatch("embedding must be (C,3,1,1)")

    @property
    def channels(self) -> int:
        return self.w1.shape[0]

    @classmethod
    def reference(cls, channels: int, seed: int = 0) -> "InjectionHead":
        rng = np.random.default_rng(seed)
        scale = 1.0 / np.sqrt(9 * channels)
        return cls(
            w1=rng.normal(0.0, scale, (channels, channels, 3, 3)),
            b1=np.zeros(channels),
            w2=rng.normal(0.0, scale, (channels, channels, 3, 3)),
            b2=np.zeros(channels),
            wr=np.zeros((channels, 3, 1, 1)),
            br=np.zeros(channels),
        )

    def save(self, path) -> None:
        path = Path(path)
        arrays = {n: getattr(self, n) for n in ("w1", "b1", "w2", "b2", "wr", "br")}
        np.savez(path.with_suffix(".npz"), **arrays)
        manifest = {
            "format": "satsplat.injection_head.v1",
            "tensors": {n: list(a.shape) for n, a in arrays.items()},
        }
        path.with_suffix(".json").write_text(json.dumps(manifest, indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "InjectionHead":
        data = np.load(Path(path).with_suffix(".npz"))
        return cls(**{n: data[n] for n in ("w1", "b1", "w2", "b2", "wr", "br")})


@dataclass
class InjectResult:
    modulated: np.ndarray  # (C, H, W)
    cache: dict = field(repr=False, default_factory=dict)


def inject(base: np.ndarray, guidance: ResidualGuidanceMap,
           head: InjectionHead) -> InjectResult:
    """modulated = base + sigmoid(gate(base)) * embed(guidance)."""
    x = np.asarray(base, dtype=np.float64)
    r = guidance.data
    if x.ndim != 3:
        raise ShapeMismatch("base feature must be (C,H,W)")
    if x.shape[0] != head.channels:
        raise ShapeMismatch(
            f"base has {x.shape[0]} channels, head expects {head.channels}"
        )
    if x.shape[1:] != r.shape[1:]:
        raise ShapeMismatch("base and guidance spatial shapes differ")
    h1_pre = conv2d(x, head.w1, head.b1)
    h1 = relu(h1_pre)
    gate_logit = conv2d(h1, head.w2, head.b2)
    gate = sigmoid(gate_logit)
    emb = conv2d(r, head.wr, head.br)
    modulated = x + gate * emb
    cache = dict(x=x, r=r, h1_pre=h1_pre, h1=h1, gate=gate, emb=emb, head=head)
    return InjectResult(modulated=modulated, cache=cache)


def inject_backward(result: InjectResult, grad_out: np.ndarray) -> dict:
    """Gradients of the modulated feature w.r.t. base, guidance, and head."""
    c = result.cache
    head: InjectionHead = c["head"]
    go = np.asarray(grad_out, dtype=np.float64)
    d_x = go.copy()
    d_gate = go * c["emb"]
    d_emb = go * c["gate"]
    d_r, d_wr, d_br = conv2d_backward(c["r"], head.wr, d_emb)
    d_gate_logit = d_gate * c["gate"] * (1.0 - c["gate"])
    d_h1, d_w2, d_b2 = conv2d_backward(c["h1"], head.w2, d_gate_logit)
    d_h1_pre = d_h1 * (c["h1_pre"] > 0)
    dx2, d_w1, d_b1 = conv2d_backward(c["x"], head.w1, d_h1_pre)
    d_x += dx2
    return {
        "base": d_x, "guidance": d_r,
        "w1": d_w1, "b1": d_b1, "w2": d_w2, "b2": d_b2, "wr": d_wr, "br": d_br,
    }
