"""Analytic-vs-finite-difference gradient checks on seeded small instances.

Each check compares a hand-derived reverse pass against central differences
(step 1e-4) at relative tolerance 1e-3. Used by the `check-gradients` CLI
subcommand and the acceptance suite.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import fusion, guidance, losses, splat, sweep

STEP = 1e-4
TOL = 1e-3


@dataclass
class GradCheck:
    name: str
    rel_err: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.rel_err < TOL


def _fd(f, x, step=STEP):
    if np.isscalar(x) or np.ndim(x) == 0:
        return (f(float(x) + step) - f(float(x) - step)) / (2 * step)
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        xp = x.copy()
        xp[idx] += step
        xm = x.copy()
        xm[idx] -= step
        g[idx] = (f(xp) - f(xm)) / (2 * step)
    return g


def _rel(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-10)
    return float(np.abs(a - n).max(initial=0.0) / denom)


def check_softmax_height(seed=0) -> float:
    rng = np.random.default_rng(seed)
    data = rng.normal(size=(8, 4, 4))
    hyps = sweep.uniform_hypotheses(1, 0.0, 70.0, 8)
    upstream = rng.normal(size=(4, 4))

    def loss(d):
        cv = sweep.CostVolume(1, d, np.ones_like(d, bool), 99.0)
        return float((sweep.softmax_height(cv, hyps).height * upstream).sum())

    cv = sweep.CostVolume(1, data, np.ones_like(data, bool), 99.0)
    dist = sweep.softmax_height(cv, hyps)
    grad = sweep.softmax_height_backward(dist, upstream)
    return _rel(grad, _fd(loss, data))


def check_fuse(seed=0) -> float:
    rng = np.random.default_rng(seed)
    c, d, h, w = 4, 3, 2, 3
    mvs = rng.normal(size=(c, h, w))
    mono = rng.normal(size=(c, h, w))
    conf = rng.uniform(0.2, 0.8, (h, w))
    params = {n: rng.normal(size=(d, c)) for n in ("wq", "wkm", "wko", "wvm", "wvo")}
    params.update({n: rng.normal(size=d) for n in ("bq", "bkm", "bko", "bvm", "bvo")})
    gate = 0.6
    cfg = fusion.FusionConfig(bias_scale=1.5, bias_threshold=0.3)
    upstream = rng.normal(size=(d, h, w))

    def loss(**over):
        kw = {**params, "gate": gate}
        kw.update({k: v for k, v in over.items() if k in kw})
        proj = fusion.ProjectionSet(**kw)
        inputs = dict(mvs=mvs, mono=mono, conf=conf)
        inputs.update({k: v for k, v in over.items() if k in inputs})
        res = fusion.fuse(inputs["mvs"], inputs["mono"], inputs["conf"], proj, cfg)
        return float((res.fused * upstream).sum())

    res = fusion.fuse(mvs, mono, conf, fusion.ProjectionSet(**params, gate=gate), cfg)
    grads = fusion.fuse_backward(res, upstream)
    worst = 0.0
    for name, value in {**params, "gate": gate, "mvs": mvs, "mono": mono,
                        "conf": conf}.items():
        fd = _fd(lambda v, n=name: loss(**{n: v}), value)
        worst = max(worst, _rel(grads[name], fd))
    return worst


def check_inject(seed=0) -> float:
    rng = np.random.default_rng(seed)
    c, h, w = 3, 4, 4
    x = rng.normal(size=(c, h, w))
    rdata = rng.normal(size=(3, h, w))
    weights = dict(
        w1=rng.normal(size=(c, c, 3, 3)) * 0.5, b1=rng.normal(size=c) * 0.1,
        w2=rng.normal(size=(c, c, 3, 3)) * 0.5, b2=rng.normal(size=c) * 0.1,
        wr=rng.normal(size=(c, 3, 1, 1)), br=rng.normal(size=c) * 0.1,
    )
    upstream = rng.normal(size=(c, h, w))

    def loss(**over):
        kw = dict(weights)
        kw.update({k: v for k, v in over.items() if k in kw})
        head = guidance.InjectionHead(**kw)
        res = guidance.inject(over.get("base", x),
                              guidance.ResidualGuidanceMap(over.get("guidance", rdata)),
                              head)
        return float((res.modulated * upstream).sum())

    res = guidance.inject(x, guidance.ResidualGuidanceMap(rdata),
                          guidance.InjectionHead(**weights))
    grads = guidance.inject_backward(res, upstream)
    worst = 0.0
    for name, value in {**weights, "base": x, "guidance": rdata}.items():
        fd = _fd(lambda v, n=name: loss(**{n: v}), value)
        worst = max(worst, _rel(grads[name], fd))
    return worst


def _grad_splats(seed=0, n=5):
    rng = np.random.default_rng(seed)
    centers = np.column_stack([
        rng.uniform(-2.5, 2.5, n), rng.uniform(-2.5, 2.5, n), np.linspace(10, 30, n)
    ])
    axis = rng.normal(size=(n, 3))
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    ang = rng.uniform(0.1, 0.5, n)
    quats = np.column_stack([np.cos(ang / 2), axis * np.sin(ang / 2)[:, None]])
    return splat.Gaussian2DSet(
        centers=centers, scales=rng.uniform(0.8, 2.5, (n, 2)), quats=quats,
        colors=rng.uniform(0.1, 0.9, (n, 3)), alphas=rng.uniform(0.3, 0.9, n),
    )


def check_rasterizer(seed=0) -> float:
    rng = np.random.default_rng(seed)
    cam = splat.AffineCamera(
        p=np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0]]),
        b=np.array([4.0, 4.0]), ray=np.array([0.0, 0.0, -1.0]),
    )
    splats = _grad_splats(seed)
    hw = (8, 8)
    g_rgb = rng.normal(size=(8, 8, 3))
    g_height = rng.normal(size=(8, 8))
    g_acc = rng.normal(size=(8, 8))

    def loss(**attrs):
        s = splat.Gaussian2DSet(
            centers=attrs.get("centers", splats.centers),
            scales=attrs.get("scales", splats.scales),
            quats=attrs.get("quats", splats.quats),
            colors=attrs.get("colors", splats.colors),
            alphas=attrs.get("alphas", splats.alphas),
        )
        o = splat.rasterize(s, cam, hw)
        return float((o.rgb * g_rgb).sum() + (o.height * g_height).sum()
                     + (o.accum * g_acc).sum())

    out = splat.rasterize(splats, cam, hw, retain=True)
    grads = splat.rasterize_backward(out, g_rgb, g_height, g_acc)
    worst = 0.0
    for name in ("centers", "scales", "quats", "colors", "alphas"):
        fd = _fd(lambda v, n=name: loss(**{n: v}), getattr(splats, name))
        worst = max(worst, _rel(grads[name], fd))
    return worst


def check_pearson(seed=0) -> float:
    rng = np.random.default_rng(seed)
    pred = rng.normal(size=(16, 16))
    gt = rng.normal(size=(16, 16))
    conf = rng.uniform(0, 1, (16, 16))
    masks = losses.routing_masks(conf, np.ones((16, 16), bool), 0.7)
    cfg = losses.LossConfig(patch_sizes=(8, 16), lambda_loc=1.0, lambda_glo=0.5)
    res = losses.pearson_geo_loss(pred, gt, masks, cfg)
    fd = _fd(lambda p: losses.pearson_geo_loss(p, gt, masks, cfg).value, pred)
    return _rel(res.grad, fd)


def check_appearance(seed=0) -> float:
    rng = np.random.default_rng(seed)
    pred = rng.uniform(0.2, 0.8, (8, 8, 3))
    gt = rng.uniform(0.2, 0.8, (8, 8, 3))
    conf = rng.uniform(0, 1, (8, 8))
    masks = losses.routing_masks(conf, np.ones((8, 8), bool), 0.4)
    cfg = losses.LossConfig()
    res = losses.appearance_loss(pred, gt, masks, cfg)
    fd = _fd(lambda p: losses.appearance_loss(p, gt, masks, cfg).value, pred)
    return _rel(res.grad, fd)


def check_total(seed=0) -> float:
    rng = np.random.default_rng(seed)
    geo = rng.uniform(0.1, 1.0, 3)
    app = rng.uniform(0.1, 1.0, 3)
    cfg = losses.LossConfig()
    res = losses.total_loss(geo, app, cfg)
    worst = 0.0
    for i in range(3):
        fd_g = _fd(lambda v, j=i: losses.total_loss(
            [g if k != j else v for k, g in enumerate(geo)], app, cfg).value, geo[i])
        fd_a = _fd(lambda v, j=i: losses.total_loss(
            geo, [a if k != j else v for k, a in enumerate(app)], cfg).value, app[i])
        worst = max(worst, _rel(res.diag["d_geo"][i], fd_g), _rel(res.diag["d_app"][i], fd_a))
    return worst


ALL_CHECKS = (
    ("softmax_expectation_height", check_softmax_height),
    ("cmmf_fuse", check_fuse),
    ("csrg_inject", check_inject),
    ("rasterizer", check_rasterizer),
    ("pearson_geo_loss", check_pearson),
    ("appearance_loss", check_appearance),
    ("total_loss", check_total),
)


def run_all(verbose: bool = False) -> list[GradCheck]:
    results = []
    for name, fn in ALL_CHECKS:
        t0 = time.time()
        rel = fn()
        res = GradCheck(name=name, rel_err=rel, seconds=time.time() - t0)
        results.append(res)
        if verbose:
            status = "ok" if res.passed else "FAIL"
            print(f"  {name:28s} rel_err={rel:.2e} ({res.seconds:.1f}s) {status}")
    return results
