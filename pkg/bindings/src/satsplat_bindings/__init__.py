"""In-process bindings for driving the satsplat core on shared numeric arrays.

External neural encoders hand float32 tensors (features, images) straight to
the cascade without file round-trips, and can register callables as the
pluggable cost-volume regularizer or the perceptual appearance scorer. The
binding path is numerically identical to the file-driven CLI path on the same
inputs.

Array interchange is float32; the core computes in float64, so entry and exit
always copy (recorded on every ArrayView as ``copied=True``).
"""

from __future__ import annotations

import traceback
from dataclasses import dataclass, field

import numpy as np

import satsplat
from satsplat import losses, pipeline
from satsplat.rpc import RpcModel, Sidecar

__version__ = satsplat.__version__

VALID_TAGS = ("feature", "cost", "height", "conf", "rgb")
HOOK_KINDS = ("regularizer", "perceptual")


class BindingError(Exception):
    pass


class DtypeError(BindingError):
    pass


class ShapeError(BindingError):
    pass


class HookFailure(BindingError):
    """Carries the hook's traceback text."""

    def __init__(self, message: str, traceback_text: str):
        super().__init__(message)
        self.traceback_text = traceback_text


@dataclass(frozen=True)
class ArrayView:
    """A float32 view of a tensor crossing the binding boundary."""

    data: np.ndarray
    tag: str
    copied: bool = True  # the float64 core always copies on entry/exit

    def __post_init__(self):
        if self.data.dtype != np.float32:
            raise DtypeError(f"ArrayView must be float32, got {self.data.dtype}")
        if self.tag not in VALID_TAGS:
            raise BindingError(f"unknown semantic tag {self.tag!r}")

    @property
    def shape(self):
        return self.data.shape

    @property
    def strides(self):
        return self.data.strides


def _require_f32(name: str, arr) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.dtype != np.float32:
        raise DtypeError(f"{name} must be float32, got {arr.dtype}")
    return np.ascontiguousarray(arr)


def _out_view(arr: np.ndarray, tag: str) -> ArrayView:
    return ArrayView(data=np.ascontiguousarray(arr, dtype=np.float32), tag=tag)


@dataclass
class CascadeHandle:
    """Results of a binding-path cascade run, exposed as float32 views."""

    bundle: pipeline.SceneBundle
    heights: dict = field(default_factory=dict)
    confidences: dict = field(default_factory=dict)
    rendered_rgb: dict = field(default_factory=dict)
    rendered_height: dict = field(default_factory=dict)

    def height(self, stage: int) -> ArrayView:
        return self.heights[stage]

    def confidence(self, stage: int) -> ArrayView:
        return self.confidences[stage]


class CascadeSession:
    """Reusable binding session: hook registry plus cascade invocation."""

    def __init__(self):
        self._hooks: dict[int, tuple[str, object]] = {}
        self._next_handle = 1

    # -- hook registry -------------------------------------------------------

    def register_hook(self, kind: str, fn) -> int:
        if kind not in HOOK_KINDS:
            raise BindingError(f"hook kind must be one of {HOOK_KINDS}")
        if not callable(fn):
            raise BindingError("hook must be callable")
        handle = self._next_handle
        self._next_handle += 1
        self._hooks[handle] = (kind, fn)
        return handle

    def unregister_hook(self, handle: int) -> None:
        self._hooks.pop(handle, None)

    def _hook(self, kind: str):
        for k, fn in reversed(self._hooks.values()):
            if k == kind:
                return fn
        return None

    def _wrap_regularizer(self, fn):
        # the hook runs at the in-core regularization point and sees the
        # core's float64 volume directly (zero-copy), unlike the float32
        # array interchange at the session boundary
        def wrapped(volume: np.ndarray) -> np.ndarray:
            try:
                out = fn(volume)
            except Exception as exc:  # surfaced as a typed error
                raise HookFailure(f"regularizer hook raised: {exc}",
                                  traceback.format_exc()) from exc
            out = np.asarray(out, dtype=np.float64)
            if out.shape != volume.shape:
                raise ShapeError(
                    f"regularizer changed shape {volume.shape} -> {out.shape}")
            return out

        return wrapped

    # -- cascade -------------------------------------------------------------

    def bind_cascade(self, config: dict, sidecar: dict, views: list[dict],
                     features: dict, stage_images: dict | None = None,
                     default_regularizer: bool = True) -> CascadeHandle:
        """Run the cascade on in-memory arrays.

        ``views`` rows carry {"view_id", "image" (H,W,3 float32),
        "rpc" (RpcModel or RPC text)}; ``features`` maps
        (stage, branch, view_id) to float32 (C,H,W) arrays. Numerics are
        identical to the CLI path fed the same tensors.
        """
        try:
            cfg = pipeline.CascadeConfig.from_dict(dict(config))
        except (TypeError, ValueError) as exc:
            raise BindingError(f"bad cascade config: {exc}") from exc
        sc = Sidecar.from_dict(dict(sidecar))
        view_rows = []
        for row in views:
            model = row["rpc"]
            if not isinstance(model, RpcModel):
                from satsplat.rpc import parse_rpc_text

                model = parse_rpc_text(str(model))
            image = _require_f32(f"image[{row['view_id']}]", row["image"])
            if image.ndim != 3 or image.shape[2] != 3:
                raise ShapeError(f"image[{row['view_id']}] must be (H,W,3)")
            view_rows.append(pipeline.ViewData(
                view_id=row["view_id"], image=image.astype(np.float64),
                model=model))
        feats = {}
        for key, arr in features.items():
            arr = _require_f32(f"features[{key}]", arr)
            if arr.ndim != 3:
                raise ShapeError(f"features[{key}] must be (C,H,W)")
            feats[tuple(key)] = arr.astype(np.float64)
        simgs = {}
        for key, arr in (stage_images or {}).items():
            arr = _require_f32(f"stage_images[{key}]", arr)
            simgs[tuple(key)] = arr.astype(np.float64)
        bundle = pipeline.SceneBundle(sidecar=sc, views=view_rows, features=feats,
                                      stage_images=simgs)
        modules = pipeline.CascadeModules(
            disable_default_regularizer=not default_regularizer)
        reg = self._hook("regularizer")
        if reg is not None:
            modules.regularizer = self._wrap_regularizer(reg)
        snapshot = list(bundle.stages)
        try:
            pipeline.run_cascade(bundle, cfg, modules)
        except Exception:
            bundle.stages = snapshot  # a throwing hook leaves no partial state
            raise
        handle = CascadeHandle(bundle=bundle)
        for st in bundle.stages:
            handle.heights[st.stage] = _out_view(st.dist.height, "height")
            handle.confidences[st.stage] = _out_view(st.dist.confidence, "conf")
            handle.rendered_rgb[st.stage] = _out_view(st.render.rgb, "rgb")
            handle.rendered_height[st.stage] = _out_view(st.render.height, "height")
        return handle

    def appearance_loss(self, pred_rgb, gt_rgb, conf, tau: float = 0.5,
                        loss_config: dict | None = None) -> dict:
        """Appearance loss with the registered perceptual hook attached."""
        pred = _require_f32("pred_rgb", pred_rgb).astype(np.float64)
        gt = _require_f32("gt_rgb", gt_rgb).astype(np.float64)
        conf = _require_f32("conf", conf).astype(np.float64)
        cfg = losses.LossConfig(**(loss_config or {}))
        masks = losses.routing_masks(conf, np.ones(conf.shape, bool), tau)
        perceptual = self._hook("perceptual")
        wrapped = None
        if perceptual is not None:
            def wrapped(p, g, m):
                try:
                    return perceptual(np.ascontiguousarray(p, dtype=np.float32),
                                      np.ascontiguousarray(g, dtype=np.float32), m)
                except Exception as exc:
                    raise HookFailure(f"perceptual hook raised: {exc}",
                                      traceback.format_exc()) from exc
        res = losses.appearance_loss(pred, gt, masks, cfg, perceptual=wrapped)
        return {"value": res.value, "diag": res.diag,
                "grad": _out_view(res.grad, "rgb")}


_DEFAULT_SESSION = CascadeSession()


def register_hook(kind: str, fn) -> int:
    """Register on the module-default session."""
    return _DEFAULT_SESSION.register_hook(kind, fn)


def unregister_hook(handle: int) -> None:
    _DEFAULT_SESSION.unregister_hook(handle)


def bind_cascade(config: dict, sidecar: dict, views: list[dict], features: dict,
                 stage_images: dict | None = None,
                 default_regularizer: bool = True) -> CascadeHandle:
    """Run on the module-default session (uses its registered hooks)."""
    return _DEFAULT_SESSION.bind_cascade(config, sidecar, views, features,
                                         stage_images, default_regularizer)
