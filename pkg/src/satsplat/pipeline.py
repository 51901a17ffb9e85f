"""Three-stage cascade orchestration, synthetic scenes, and reporting.

Stage 1 sweeps raw matching features over a uniform hypothesis range; stages
2 and 3 fuse monocular priors under the previous stage's confidence, sweep a
per-pixel narrowed range re-centered on the upsampled previous height, and
inject the cross-stage residual into the splat head input. Each stage lifts
pixel-aligned splats and renders the stage image and height map.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__, fusion, guidance, kernels, losses, splat, sweep, synth
from .errors import NonFiniteLoss
from .ops import upsample_bilinear
from .rpc import RpcModel, Sidecar
from .splat import Gaussian2DSet, GaussianHead, RenderOutput
from .surface import Mesh, heightfield_mesh, make_volume, marching_cubes, mesh_metrics, tsdf_integrate
from .sweep import FeatureVolume, HeightDistribution

log = logging.getLogger(__name__)

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


@dataclass
class CascadeConfig:
    stage_scales: tuple = (0.25, 0.5, 1.0)
    k_per_stage: tuple = (32, 16, 8)
    # sharp posteriors at the coarse stages keep window re-centering robust;
    # a softer final stage interpolates sub-spacing within its narrow window
    temperature: tuple = (0.4, 0.1, 2.0)
    cost_agg_passes: tuple = (0, 0, 24)
    fusion_mode: str = "cmmf"  # cmmf | naive | off
    enable_csrg: bool = True
    range_shrink: float = 0.5
    center_median: int = 3  # median window on the previous height before re-centering
    bias_scale: float = 1.0
    bias_threshold: float = 0.2
    tile_size: int = 16
    feature_gain: float = 60.0
    seed: int = 0
    loss: losses.LossConfig = field(default_factory=losses.LossConfig)

    def __post_init__(self):
        if len(self.stage_scales) != 3 or len(self.k_per_stage) != 3:
            raise ValueError("the cascade has exactly three stages")
        if isinstance(self.temperature, (int, float)):
            self.temperature = (float(self.temperature),) * 3
        else:
            self.temperature = tuple(float(t) for t in self.temperature)
        if len(self.temperature) != 3:
            raise ValueError("one softmax temperature per stage")
        if isinstance(self.cost_agg_passes, (int, float)):
            self.cost_agg_passes = (int(self.cost_agg_passes),) * 3
        else:
            self.cost_agg_passes = tuple(int(a) for a in self.cost_agg_passes)
        if len(self.cost_agg_passes) != 3:
            raise ValueError("one aggregation pass count per stage")
        if self.fusion_mode not in ("cmmf", "naive", "off"):
            raise ValueError("fusion_mode must be cmmf, naive, or off")

    def fusion_config(self) -> fusion.FusionConfig:
        return fusion.FusionConfig(bias_scale=self.bias_scale,
                                   bias_threshold=self.bias_threshold)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_scales"] = list(self.stage_scales)
        d["k_per_stage"] = list(self.k_per_stage)
        d["loss"]["stage_weights"] = list(self.loss.stage_weights)
        d["loss"]["patch_sizes"] = list(self.loss.patch_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CascadeConfig":
        d = dict(d)
        loss_d = dict(d.pop("loss", {}))
        if "stage_weights" in loss_d:
            loss_d["stage_weights"] = tuple(loss_d["stage_weights"])
        if "patch_sizes" in loss_d:
            loss_d["patch_sizes"] = tuple(loss_d["patch_sizes"])
        for key in ("stage_scales", "k_per_stage"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(loss=losses.LossConfig(**loss_d), **d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ViewData:
    view_id: str
    image: np.ndarray  # (H, W, 3) full resolution, [0, 1]
    model: RpcModel


@dataclass
class StageResult:
    stage: int
    hyps: np.ndarray  # (K,) or (K, H, W)
    dist: HeightDistribution
    splats: Gaussian2DSet
    render: RenderOutput
    head_input: np.ndarray
    w_mono: np.ndarray | None = None


@dataclass
class SceneBundle:
    sidecar: Sidecar
    views: list
    target_index: int = 0
    features: dict = field(default_factory=dict)  # (stage, branch, vid) -> (C,H,W)
    stage_images: dict = field(default_factory=dict)  # (stage, vid) -> (H,W,3)
    gt_heights: dict = field(default_factory=dict)  # stage -> (H,W), target view
    gt_masks: dict = field(default_factory=dict)  # stage -> (H,W) bool validity
    terrain: synth.Terrain | None = None
    stages: list = field(default_factory=list)
    mesh: Mesh | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.views) < 2:
            raise ValueError("a scene needs at least two views")

    @property
    def target(self) -> ViewData:
        return self.views[self.target_index]

    def stage_image(self, stage: int, view_id: str, hw) -> np.ndarray:
        key = (stage, view_id)
        if key in self.stage_images:
            return self.stage_images[key]
        view = next(v for v in self.views if v.view_id == view_id)
        return upsample_bilinear(view.image.transpose(2, 0, 1), hw).transpose(1, 2, 0)


@dataclass
class CascadeModules:
    """Learnable pieces of the cascade; defaults are the untrained references."""

    projections: dict = field(default_factory=dict)  # stage -> ProjectionSet
    inject_heads: dict = field(default_factory=dict)  # stage -> InjectionHead
    gaussian_heads: dict = field(default_factory=dict)  # stage -> GaussianHead
    regularizer: object = None  # callable hook or None for the default smoother
    disable_default_regularizer: bool = False


def _feature(bundle: SceneBundle, stage: int, branch: str, vid: str) -> np.ndarray:
    key = (stage, branch, vid)
    if key not in bundle.features:
        raise KeyError(f"missing {branch} features for view {vid!r} at stage {stage}")
    return bundle.features[key]


def run_cascade(bundle: SceneBundle, cfg: CascadeConfig,
                modules: CascadeModules | None = None) -> SceneBundle:
    """Execute the three-stage cascade on a bundle with populated features."""
    modules = modules or CascadeModules()
    sc = bundle.sidecar
    target = bundle.target
    full_h, full_w = target.image.shape[:2]
    h_min, h_max = sc.h_min, sc.h_max
    full_range = h_max - h_min
    fusion_cfg = cfg.fusion_config()
    bundle.stages = []
    prev: StageResult | None = None

    for s in (1, 2, 3):
        scale = cfg.stage_scales[s - 1]
        k = cfg.k_per_stage[s - 1]
        hw = (int(round(full_h * scale)), int(round(full_w * scale)))
        models = {v.view_id: v.model.scaled(scale) for v in bundle.views}
        target_model = models[target.view_id]

        # hypotheses: uniform at stage 1, per-pixel re-centered afterwards
        if prev is None:
            hyps = sweep.uniform_hypotheses(s, h_min, h_max, k)
            hyp_arr = hyps.values
        else:
            prev_h = prev.dist.height
            if cfg.center_median > 1:
                from scipy import ndimage as _ndi

                prev_h = _ndi.median_filter(prev_h, size=cfg.center_median)
            center = upsample_bilinear(prev_h, hw)
            half = 0.5 * full_range * (cfg.range_shrink ** (s - 1))
            hyp_arr = sweep.refined_hypothesis_maps(center, half, k, h_min, h_max)

        # per-view features, optionally fused with the monocular branch
        conf_up = None
        if prev is not None:
            conf_up = np.clip(upsample_bilinear(prev.dist.confidence, hw), 0.0, 1.0)
        feats = {}
        w_mono_target = None
        for v in bundle.views:
            mvs_feat = _feature(bundle, s, "mvs", v.view_id)
            if s == 1 or cfg.fusion_mode == "off":
                feats[v.view_id] = mvs_feat
                continue
            mono_feat = _feature(bundle, s, "mono", v.view_id)
            if cfg.fusion_mode == "naive":
                feats[v.view_id] = fusion.naive_fuse(mvs_feat, mono_feat)
            else:
                proj = modules.projections.get(s)
                if proj is None:
                    proj = fusion.ProjectionSet.reference(mvs_feat.shape[0],
                                                          seed=cfg.seed + s)
                    modules.projections[s] = proj
                res = fusion.fuse(mvs_feat, mono_feat, conf_up, proj, fusion_cfg)
                feats[v.view_id] = res.fused
                if v.view_id == target.view_id:
                    w_mono_target = res.w_mono

        # plane sweep on the (fused) source features; the target contributes
        # geometry only, so its features stay out of the variance
        source_ids = [v.view_id for v in bundle.views if v.view_id != target.view_id]
        exclude = None
        if len(source_ids) < 2:
            source_ids = [v.view_id for v in bundle.views]
            exclude = source_ids.index(target.view_id)
            log.warning("fewer than two source views; target features included")
        warped = []
        masks = []
        for vid in source_ids:
            fv = FeatureVolume(vid, s, "mvs", feats[vid])
            wv, mv = sweep.warp_features(target_model, models[vid], fv, hyp_arr)
            warped.append(wv)
            masks.append(mv)
        cost = sweep.build_cost_volume(np.stack(warped), np.stack(masks),
                                       exclude_index=exclude)
        cost.stage = s
        if not modules.disable_default_regularizer or modules.regularizer is not None:
            cost = sweep.regularize(cost, modules.regularizer)
        if cfg.cost_agg_passes[s - 1]:
            cost = sweep.spatial_aggregate(cost, cfg.cost_agg_passes[s - 1])
        dist = sweep.softmax_height(cost, hyp_arr, temperature=cfg.temperature[s - 1])
        dist.stage = s

        # head input: stage image + fused target features + cost channels
        image_s = bundle.stage_image(s, target.view_id, hw)
        x = np.concatenate([
            image_s.transpose(2, 0, 1), feats[target.view_id], cost.data
        ])
        if prev is not None and cfg.enable_csrg:
            rmap = guidance.cross_stage_residual(prev.render.height, dist.height,
                                                 dist.confidence)
            head = modules.inject_heads.get(s)
            if head is None:
                head = guidance.InjectionHead.reference(x.shape[0], seed=cfg.seed + 10 + s)
                modules.inject_heads[s] = head
            x = guidance.inject(x, rmap, head).modulated

        g_head = modules.gaussian_heads.get(s)
        if g_head is None:
            g_head = GaussianHead.reference(x.shape[0])
            modules.gaussian_heads[s] = g_head
        attrs = splat.predict_attributes(x, g_head, IDENTITY_QUAT)
        centers, ok = splat.lift_centers(dist.height, target_model, sc.anchor)
        splats = splat.make_splats(centers, ok, attrs)
        render = splat.render_view(splats, target_model, sc, hw, tile=cfg.tile_size)

        prev = StageResult(stage=s, hyps=hyp_arr, dist=dist, splats=splats,
                           render=render, head_input=x, w_mono=w_mono_target)
        bundle.stages.append(prev)

    bundle.provenance = {
        "config_hash": cfg.hash(),
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "version": __version__,
        "kernel_backend": kernels.active_backend(),
        "numpy": np.__version__,
    }
    return bundle


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------


def synth_scene(terrain: str = "boxes", n_views: int = 4, size: int = 128,
                seed: int = 0, noise: float = 0.0, noise_gradient: bool = False,
                gsd: float = 0.3,
                height_range: tuple = (0.0, 30.0), feature_gain: float = 60.0,
                stage_scales: tuple = (0.25, 0.5, 1.0), supersample: int = 2,
                encoder_smoothing: float = 1.0,
                corrupt_quadrant: bool = False) -> SceneBundle:
    """Generate a seeded multi-view scene with ground truth and oracle
    features.

    Images are ray-cast at ``supersample`` times the grid and area-averaged,
    mimicking a camera's pixel integration; the oracle encoder mildly smooths
    the fine-stage inputs (``encoder_smoothing`` sigma in px) to tame
    resampling noise in the matching cost. ``corrupt_quadrant`` replaces the
    matching features of the upper-left quadrant with noise at every stage
    (ablation probe)."""
    from scipy import ndimage as _ndi

    rng = np.random.default_rng(seed)
    h_min, h_max = height_range
    extent = size * gsd
    from .ops import block_mean
    from .rpc import meters_per_degree

    lat0, lon0 = 32.0, -110.0
    mlat, mlon = meters_per_degree(lat0)
    sc = Sidecar("WGS84", lat0 - extent / 2 / mlat, lat0 + extent / 2 / mlat,
                 lon0 - extent / 2 / mlon, lon0 + extent / 2 / mlon, h_min, h_max)
    terr = synth.make_terrain(terrain, h_min, h_max, extent * 0.7, rng)
    texture = synth.make_texture(extent * 1.8, rng, min_cell_m=1.5 * gsd)

    tilts = [0.0, 25.0, 25.0, 25.0][:n_views]
    fit_margin = 1.0 + 2.0 * np.tan(np.deg2rad(25.0)) * (h_max - h_min) / extent
    azimuths = [0.0, 100.0, 220.0, 340.0][:n_views]
    views = []
    stage_images = {}
    gt_heights = {}
    features = {}
    for i, (tilt, az) in enumerate(zip(tilts, azimuths)):
        vid = f"view{i}"
        cam = synth.make_view_camera(sc, tilt, az, 12000.0, size, gsd)
        model = synth.fit_rpc_to_pinhole(cam, sc, margin=fit_margin)
        if supersample > 1:
            img_hi, hgt_hi = synth.render_view(
                model.scaled(float(supersample)), terr, texture, sc,
                (size * supersample, size * supersample))
            image = block_mean(img_hi.transpose(2, 0, 1), supersample).transpose(1, 2, 0)
            height = block_mean(hgt_hi, supersample)
        else:
            image, height = synth.render_view(model, terr, texture, sc, (size, size))
        if noise > 0:
            sigma = noise
            if noise_gradient:
                # reliability probe: noise level ramps across the image so
                # confidence varies for benign (sensor-like) reasons
                sigma = noise * np.linspace(0.0, 1.0, size)[None, :, None]
            image = np.clip(image + sigma * rng.normal(0.0, 1.0, image.shape),
                            0.0, 1.0)
        views.append(ViewData(view_id=vid, image=image, model=model))
        smoothed = (_ndi.gaussian_filter(image, (encoder_smoothing, encoder_smoothing, 0),
                                         mode="nearest")
                    if encoder_smoothing > 0 else image)
        corrupt_img = None
        if corrupt_quadrant:
            corrupt_img = image.copy()
            q = size // 2
            corrupt_img[:q, :q] = rng.uniform(0.3, 0.7)
        # anti-aliased stage pyramid by area averaging, aligned with scaled()
        for s, scale in enumerate(stage_scales, start=1):
            factor = int(round(1.0 / scale))
            if size % factor:
                raise ValueError("scene size must divide the stage scales")
            img_s = block_mean(image.transpose(2, 0, 1), factor).transpose(1, 2, 0)
            stage_images[(s, vid)] = img_s
            if i == 0:
                gt_heights[s] = block_mean(height, factor)
            # fine matching stages read the smoothed image; coarse stage and
            # the head inputs keep the raw pyramid
            feat_src = img_s if s == 1 else block_mean(
                smoothed.transpose(2, 0, 1), factor).transpose(1, 2, 0)
            for branch in ("mvs", "mono"):
                src = feat_src
                if corrupt_quadrant and branch == "mvs":
                    src = block_mean(corrupt_img.transpose(2, 0, 1),
                                     factor).transpose(1, 2, 0)
                feat = synth.oracle_features(src, vid, s, branch, gain=feature_gain)
                features[(s, branch, vid)] = feat.data

    # gt validity: pixels whose true-height reprojection keeps the full
    # matching support (patch radius + aggregation neighborhood) inside every
    # source frame; border bands leave the oblique views' coverage
    from .rpc import reproject

    guard = 8.0
    gt_full = gt_heights[len(stage_scales)] if stage_scales[-1] == 1.0 else None
    uu, vv = np.meshgrid(np.arange(size, dtype=np.float64),
                         np.arange(size, dtype=np.float64), indexing="xy")
    valid_full = np.ones((size, size), dtype=bool)
    if gt_full is not None:
        for view in views[1:]:
            us, vs = reproject(views[0].model, view.model, uu.ravel(), vv.ravel(),
                               gt_full.ravel())
            inside = ((us >= guard) & (us <= size - 1 - guard)
                      & (vs >= guard) & (vs <= size - 1 - guard))
            valid_full &= inside.reshape(size, size)
    gt_masks = {}
    for s_i, scale in enumerate(stage_scales, start=1):
        factor = int(round(1.0 / scale))
        gt_masks[s_i] = block_mean(valid_full.astype(np.float64), factor) > 0.999

    return SceneBundle(sidecar=sc, views=views, features=features,
                       stage_images=stage_images, gt_heights=gt_heights,
                       gt_masks=gt_masks, terrain=terr)


# ---------------------------------------------------------------------------
# toy gradient-descent optimization of splat attributes
# ---------------------------------------------------------------------------


def _stage_losses(bundle: SceneBundle, cfg: CascadeConfig, renders: list
                  ) -> tuple[list, list, list]:
    """Per-stage geometric / appearance losses (and grads) on rendered outputs."""
    geo, app, grads = [], [], []
    for stage_res, render in zip(bundle.stages, renders):
        s = stage_res.stage
        hw = render.height.shape
        gt_h = bundle.gt_heights[s]
        image_s = bundle.stage_image(s, bundle.target.view_id, hw)
        masks = losses.routing_masks(stage_res.dist.confidence,
                                     np.ones(hw, bool), cfg.loss.conf_threshold)
        try:
            g = losses.pearson_geo_loss(render.height, gt_h, masks, cfg.loss)
        except Exception:
            g = losses.LossResult(value=0.0, grad=np.zeros(hw))
        a = losses.appearance_loss(render.rgb, image_s, masks, cfg.loss)
        geo.append(g)
        app.append(a)
        grads.append((g.grad, a.grad))
    return geo, app, grads


def toy_optimize(bundle: SceneBundle, cfg: CascadeConfig, steps: int = 200,
                 lr: float = 1e-2) -> dict:
    """Plain gradient descent on the total loss over all stages' splat
    attributes. Each attribute class takes steps of size ``lr`` in units of
    its own RMS gradient (a fixed diagonal preconditioner; the pixel-mean
    losses otherwise produce steps ~1e-4 apart across classes). Returns the
    loss trace and the per-class gradient magnitudes observed at step 0."""
    if not bundle.stages:
        raise ValueError("run_cascade first")
    sc = bundle.sidecar
    target = bundle.target
    total_cfg = cfg.loss
    trace = []
    grad_audit = {}
    splat_sets = [st.splats for st in bundle.stages]
    models = [target.model.scaled(cfg.stage_scales[st.stage - 1])
              for st in bundle.stages]
    hws = [st.render.height.shape for st in bundle.stages]

    def norm_step(g):
        rms = float(np.sqrt((g ** 2).mean()))
        return g / rms if rms > 1e-20 else np.zeros_like(g)

    for step in range(steps):
        renders = [
            splat.render_view(sp, m, sc, hw, tile=cfg.tile_size, retain=True)
            for sp, m, hw in zip(splat_sets, models, hws)
        ]
        geo, app, grads = _stage_losses(bundle, cfg, renders)
        tot = losses.total_loss([g.value for g in geo], [a.value for a in app],
                                total_cfg)
        if not np.isfinite(tot.value):
            raise NonFiniteLoss(f"non-finite total loss at step {step}")
        trace.append(tot.value)
        for i, (render, (g_grad, a_grad)) in enumerate(zip(renders, grads)):
            w_geo = tot.diag["d_geo"][i]
            w_app = tot.diag["d_app"][i]
            sg = splat.rasterize_backward(
                render, grad_rgb=w_app * a_grad, grad_height=w_geo * g_grad,
            )
            if step == 0:
                for name, g in sg.items():
                    grad_audit[name] = max(grad_audit.get(name, 0.0),
                                           float(np.abs(g).max()))
            sp = splat_sets[i]
            sp.centers = sp.centers - lr * norm_step(sg["centers"])
            sp.scales = np.maximum(sp.scales - lr * norm_step(sg["scales"]), 0.01)
            q = sp.quats - lr * norm_step(sg["quats"])
            sp.quats = q / np.linalg.norm(q, axis=1, keepdims=True)
            sp.colors = np.clip(sp.colors - lr * norm_step(sg["colors"]), 0.0, 1.0)
            sp.alphas = np.clip(sp.alphas - lr * norm_step(sg["alphas"]), 1e-3, 1.0)
    renders = [
        splat.render_view(sp, m, sc, hw, tile=cfg.tile_size)
        for sp, m, hw in zip(splat_sets, models, hws)
    ]
    geo, app, _ = _stage_losses(bundle, cfg, renders)
    tot = losses.total_loss([g.value for g in geo], [a.value for a in app], total_cfg)
    trace.append(tot.value)
    for st, render, sp in zip(bundle.stages, renders, splat_sets):
        st.render = render
        st.splats = sp
    return {"trace": trace, "grad_audit": grad_audit}


# ---------------------------------------------------------------------------
# surface fusion and reporting
# ---------------------------------------------------------------------------


def fuse_surface(bundle: SceneBundle, voxel: float | None = None,
                 uniform_weight: bool = False) -> Mesh:
    """Render the final splats from every view, integrate the height maps into
    a TSDF volume, and extract the mesh."""
    if not bundle.stages:
        raise ValueError("run_cascade first")
    final = bundle.stages[-1]
    sc = bundle.sidecar
    hw = final.render.height.shape
    scale = hw[0] / bundle.target.image.shape[0]
    if voxel is None:
        gt = bundle.gt_heights.get(final.stage)
        # default voxel: twice the finest ground sampling distance
        centers, _ = splat.lift_centers(
            np.full((2, 2), 0.5 * (sc.h_min + sc.h_max)),
            bundle.target.model.scaled(scale), sc.anchor)
        gsd = float(np.linalg.norm(centers[1, :2] - centers[0, :2]))
        voxel = 2.0 * gsd
    vol = make_volume(sc, voxel)
    for i, view in enumerate(bundle.views):
        model_s = view.model.scaled(scale)
        render = splat.render_view(final.splats, model_s, sc, hw)
        conf = final.dist.confidence if i == bundle.target_index else \
            np.clip(render.accum, 0.0, 1.0)
        camera = splat._rect_camera(model_s, sc, (0, hw[0], 0, hw[1]))
        valid = render.accum > 0.05
        tsdf_integrate(vol, render.height, conf, camera, valid=valid,
                       uniform_weight=uniform_weight)
    bundle.mesh = marching_cubes(vol)
    return bundle.mesh


def gt_mesh(bundle: SceneBundle) -> Mesh:
    """Ground-truth surface: the final-stage height grid lifted to ENU and
    triangulated on the pixel lattice."""
    final_stage = bundle.stages[-1].stage if bundle.stages else 3
    gt = bundle.gt_heights[final_stage]
    scale = gt.shape[0] / bundle.target.image.shape[0]
    model_s = bundle.target.model.scaled(scale)
    centers, _ = splat.lift_centers(gt, model_s, bundle.sidecar.anchor)
    return Mesh(vertices=centers, faces=heightfield_mesh(gt, 0.0, 0.0, 1.0).faces)


def report(bundle: SceneBundle, bins: int = 8, mesh_samples: int = 50_000,
           mesh_threshold: float = 0.5) -> dict:
    """Full metric table: per-stage rendering and height metrics, the
    confidence-binned reliability rows, mesh CD/F1 when available, and
    provenance."""
    out = {"provenance": dict(bundle.provenance), "stages": {}}
    for st in bundle.stages:
        s = st.stage
        hw = st.render.height.shape
        entry = {}
        gt_h = bundle.gt_heights.get(s)
        image_s = bundle.stage_image(s, bundle.target.view_id, hw)
        entry.update(losses.image_height_metrics(
            pred_rgb=st.render.rgb, gt_rgb=image_s,
            pred_h=st.dist.height, gt_h=gt_h,
        ) if gt_h is not None else losses.image_height_metrics(
            pred_rgb=st.render.rgb, gt_rgb=image_s))
        if gt_h is not None:
            rep = sweep.confidence_binned_report(st.dist.height, gt_h,
                                                 st.dist.confidence, bins)
            entry["binned"] = rep.plot_data()
        out["stages"][str(s)] = entry
    if bundle.stages and bundle.gt_heights:
        final = bundle.stages[-1]
        gt_h = bundle.gt_heights[final.stage]
        out["final_height"] = losses.height_metrics(final.dist.height, gt_h)
    if bundle.mesh is not None and bundle.gt_heights:
        gmesh = gt_mesh(bundle)
        out["mesh"] = mesh_metrics(bundle.mesh, gmesh, sample_n=mesh_samples,
                                   threshold_m=mesh_threshold)
    return out
