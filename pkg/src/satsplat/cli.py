"""Command-line interface.

Subcommands: synth, cascade, render, fuse-tsdf, eval, report, toy-opt,
check-gradients. Configuration comes from an optional TOML file plus flag
overrides. Exit codes: 0 ok, 1 user error, 2 internal error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import traceback
from pathlib import Path

import numpy as np

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from . import __version__, losses, pipeline, splat, surface, sweep
from .errors import SatsplatError
from .rpc import Sidecar, load_rpc, save_rpc


class UserError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UserError(message)


def _load_image(path) -> np.ndarray:
    from PIL import Image

    # images cross interfaces as float32 tensors like everything else
    arr = np.asarray(Image.open(path), dtype=np.float32) / np.float32(255.0)
    return arr.astype(np.float64)


def _save_image(path, rgb: np.ndarray) -> None:
    from PIL import Image

    arr = np.clip(np.asarray(rgb) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def _apply_thread_env() -> None:
    threads = os.environ.get("SATSPLAT_THREADS")
    if threads:
        try:
            import numba

            numba.set_num_threads(max(1, int(threads)))
        except (ImportError, ValueError):
            pass


def load_config(path: str | None, overrides: list[str]) -> pipeline.CascadeConfig:
    data = {}
    if path:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
        data = data.get("cascade", data)
    for item in overrides or []:
        if "=" not in item:
            raise UserError(f"override {item!r} must look like key=value")
        key, value = item.split("=", 1)
        try:
            data[key.strip()] = json.loads(value)
        except json.JSONDecodeError:
            data[key.strip()] = value
    try:
        return pipeline.CascadeConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise UserError(f"bad cascade config: {exc}") from exc


# ---------------------------------------------------------------------------
# scene directory I/O
# ---------------------------------------------------------------------------


def save_scene(bundle: pipeline.SceneBundle, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    bundle.sidecar.save(out / "sidecar.json")
    meta = {"views": [], "stages": sorted({k[0] for k in bundle.stage_images})}
    for view in bundle.views:
        _save_image(out / f"{view.view_id}.png", view.image)
        save_rpc(view.model, out / f"{view.view_id}.rpc")
        meta["views"].append(view.view_id)
    feat_dir = out / "features"
    feat_dir.mkdir(exist_ok=True)
    for (s, branch, vid), data in bundle.features.items():
        sweep.save_tensor(feat_dir / f"s{s}_{branch}_{vid}.npy", data,
                          {"view_id": vid, "stage": s, "branch": branch})
    simg_dir = out / "stage_images"
    simg_dir.mkdir(exist_ok=True)
    for (s, vid), img in bundle.stage_images.items():
        np.save(simg_dir / f"s{s}_{vid}.npy", img.astype(np.float32))
    gt_dir = out / "gt"
    gt_dir.mkdir(exist_ok=True)
    for s, hgt in bundle.gt_heights.items():
        np.save(gt_dir / f"height_s{s}.npy", hgt.astype(np.float32))
    for s, mask in bundle.gt_masks.items():
        np.save(gt_dir / f"mask_s{s}.npy", mask.astype(np.uint8))
    (out / "scene.json").write_text(json.dumps(meta, indent=2) + "\n")


def load_scene(path: Path) -> pipeline.SceneBundle:
    if not (path / "scene.json").exists():
        raise UserError(f"{path} is not a scene directory (missing scene.json)")
    meta = json.loads((path / "scene.json").read_text())
    sidecar = Sidecar.load(path / "sidecar.json")
    views = []
    for vid in meta["views"]:
        views.append(pipeline.ViewData(
            view_id=vid,
            image=_load_image(path / f"{vid}.png"),
            model=load_rpc(path / f"{vid}.rpc"),
        ))
    features = {}
    for f in sorted((path / "features").glob("*.npy")):
        arr, info = sweep.load_tensor(f)
        features[(info["stage"], info["branch"], info["view_id"])] = arr
    stage_images = {}
    for f in sorted((path / "stage_images").glob("*.npy")):
        stem = f.stem  # s{n}_{vid}
        s, vid = stem.split("_", 1)
        stage_images[(int(s[1:]), vid)] = np.load(f).astype(np.float64)
    gt_heights = {}
    gt_masks = {}
    for f in sorted((path / "gt").glob("height_s*.npy")):
        gt_heights[int(f.stem.split("_s")[1])] = np.load(f).astype(np.float64)
    for f in sorted((path / "gt").glob("mask_s*.npy")):
        gt_masks[int(f.stem.split("_s")[1])] = np.load(f).astype(bool)
    return pipeline.SceneBundle(sidecar=sidecar, views=views, features=features,
                                stage_images=stage_images, gt_heights=gt_heights,
                                gt_masks=gt_masks)


def save_run(bundle: pipeline.SceneBundle, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for st in bundle.stages:
        np.save(out / f"s{st.stage}_height.npy", st.dist.height.astype(np.float32))
        np.save(out / f"s{st.stage}_conf.npy", st.dist.confidence.astype(np.float32))
        np.save(out / f"s{st.stage}_render_height.npy",
                st.render.height.astype(np.float32))
        _save_image(out / f"s{st.stage}_render_rgb.png", st.render.rgb)
        splat.save_splats_ply(st.splats, out / f"s{st.stage}_splats.ply")
    (out / "provenance.json").write_text(json.dumps(bundle.provenance, indent=2) + "\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    bundle = pipeline.synth_scene(
        terrain=args.terrain, n_views=args.views, size=args.size, seed=args.seed,
        noise=args.noise,
    )
    save_scene(bundle, Path(args.out))
    print(f"wrote scene ({args.terrain}, {args.views} views, {args.size}px) to {args.out}")
    return 0


def cmd_cascade(args) -> int:
    bundle = load_scene(Path(args.scene))
    cfg = load_config(args.config, args.set)
    pipeline.run_cascade(bundle, cfg)
    save_run(bundle, Path(args.out))
    final = bundle.stages[-1]
    print(f"cascade done; stage-3 grid {final.dist.height.shape}, "
          f"config {cfg.hash()}, wrote {args.out}")
    return 0


def cmd_render(args) -> int:
    splats = splat.load_splats_ply(args.splats)
    model = load_rpc(args.rpc)
    sidecar = Sidecar.load(args.sidecar)
    out = splat.render_view(splats, model.scaled(args.scale), sidecar,
                            (args.height, args.width))
    _save_image(args.out_rgb, out.rgb)
    np.save(args.out_height, out.height.astype(np.float32))
    print(f"rendered {len(splats)} splats; degenerate skipped: {out.degenerate_count}")
    return 0


def cmd_fuse_tsdf(args) -> int:
    bundle = load_scene(Path(args.scene))
    cfg = load_config(args.config, args.set)
    pipeline.run_cascade(bundle, cfg)
    mesh = pipeline.fuse_surface(bundle, voxel=args.voxel,
                                 uniform_weight=args.uniform_weight)
    surface.save_mesh_ply(mesh, args.out)
    print(f"mesh: {len(mesh.vertices)} vertices, {len(mesh.faces)} faces -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    pred_h = np.load(args.pred_height).astype(np.float64)
    gt_h = np.load(args.gt_height).astype(np.float64)
    mask = np.load(args.mask).astype(bool) if args.mask else None
    out = losses.height_metrics(pred_h, gt_h, mask)
    if args.pred_rgb and args.gt_rgb:
        out.update(losses.image_height_metrics(
            pred_rgb=_load_image(args.pred_rgb), gt_rgb=_load_image(args.gt_rgb)))
    print(json.dumps(out, indent=2))
    if args.out:
        Path(args.out).write_text(json.dumps(out, indent=2) + "\n")
    return 0


def cmd_report(args) -> int:
    bundle = load_scene(Path(args.scene))
    cfg = load_config(args.config, args.set)
    pipeline.run_cascade(bundle, cfg)
    if args.mesh:
        pipeline.fuse_surface(bundle)
    rep = pipeline.report(bundle, bins=args.bins)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(rep, indent=2, default=float) + "\n")
    final = bundle.stages[-1]
    gt = bundle.gt_heights.get(final.stage)
    if gt is not None:
        binned = sweep.confidence_binned_report(
            final.dist.height, gt, final.dist.confidence, args.bins,
            mask=bundle.gt_masks.get(final.stage))
        binned.to_csv(out / "binned.csv")
    save_run(bundle, out / "run")
    print(f"report written to {out}")
    return 0


def cmd_toy_opt(args) -> int:
    bundle = load_scene(Path(args.scene))
    cfg = load_config(args.config, args.set)
    pipeline.run_cascade(bundle, cfg)
    result = pipeline.toy_optimize(bundle, cfg, steps=args.steps, lr=args.lr)
    trace = result["trace"]
    out = Path(args.out)
    with open(out, "w") as fh:
        fh.write("step,total_loss\n")
        for i, v in enumerate(trace):
            fh.write(f"{i},{v}\n")
    print(f"loss {trace[0]:.5f} -> {trace[-1]:.5f} over {args.steps} steps; trace in {out}")
    return 0


def cmd_check_gradients(args) -> int:
    from . import gradsuite

    results = gradsuite.run_all(verbose=True)
    worst = max(r.rel_err for r in results)
    print(f"worst relative error: {worst:.2e}")
    return 0 if all(r.passed for r in results) else 1


def build_parser() -> _Parser:
    p = _Parser(prog="satsplat", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def add_config(sp):
        sp.add_argument("--config", help="TOML config file ([cascade] table)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key (JSON-parsed value)")

    sp = sub.add_parser("synth", help="generate a synthetic scene directory")
    sp.add_argument("--terrain", default="boxes",
                    choices=["plane", "ramp", "boxes", "fractal"])
    sp.add_argument("--views", type=int, default=4)
    sp.add_argument("--size", type=int, default=128)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--noise", type=float, default=0.0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("cascade", help="run the three-stage cascade on a scene")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--out", required=True)
    add_config(sp)
    sp.set_defaults(func=cmd_cascade)

    sp = sub.add_parser("render", help="render a splat PLY through an RPC view")
    sp.add_argument("--splats", required=True)
    sp.add_argument("--rpc", required=True)
    sp.add_argument("--sidecar", required=True)
    sp.add_argument("--width", type=int, required=True)
    sp.add_argument("--height", type=int, required=True)
    sp.add_argument("--scale", type=float, default=1.0)
    sp.add_argument("--out-rgb", required=True)
    sp.add_argument("--out-height", required=True)
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("fuse-tsdf", help="cascade + TSDF fusion + mesh extraction")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--voxel", type=float, default=None)
    sp.add_argument("--uniform-weight", action="store_true")
    add_config(sp)
    sp.set_defaults(func=cmd_fuse_tsdf)

    sp = sub.add_parser("eval", help="height/image metrics for prediction vs gt")
    sp.add_argument("--pred-height", required=True)
    sp.add_argument("--gt-height", required=True)
    sp.add_argument("--mask")
    sp.add_argument("--pred-rgb")
    sp.add_argument("--gt-rgb")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("report", help="full metric report for a scene")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--bins", type=int, default=8)
    sp.add_argument("--mesh", action="store_true")
    add_config(sp)
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("toy-opt", help="gradient-descent smoke optimization")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--steps", type=int, default=200)
    sp.add_argument("--lr", type=float, default=1e-2)
    add_config(sp)
    sp.set_defaults(func=cmd_toy_opt)

    sp = sub.add_parser("check-gradients", help="run the analytic-vs-FD gradient suite")
    sp.set_defaults(func=cmd_check_gradients)
    return p


def main(argv=None) -> int:
    _apply_thread_env()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (SatsplatError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:  # internal error
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
