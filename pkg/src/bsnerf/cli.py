"""``bsnerf`` command line: synth, train, render and eval.

Exit status is 0 on success, 1 when a command fails at run time and 2 for
usage errors.  ``BSNERF_LOG`` sets the log level (default ``INFO``).
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .field import FieldArch, FieldError, SpectralField
from .geometry import CameraParams, GeometryError
from .losses import LossError, LossWeights, color_loss, psnr
from .optim import OptimError, TrainConfig, TrainingDiverged, load_checkpoint, pose_errors_per_view, train
from .renderer import QuadratureSpec, RenderError, render_view
from .scenedata import (
    FULL_SIZE_GEOMETRY,
    DatasetError,
    SubviewStack,
    default_scene,
    export_png,
    grid_cameras,
    load_dataset,
    make_dataset,
    save_image,
)
from .spectral import SpectralError

log = logging.getLogger("bsnerf")

RUNTIME_ERRORS = (
    DatasetError, FieldError, GeometryError, LossError, OptimError, RenderError,
    SpectralError, TrainingDiverged, OSError, ValueError,
)


@dataclass
class RunConfig:
    command: str
    out: Path
    seed: int
    dataset: Path | None = None
    train_overrides: dict = field(default_factory=dict)

    @classmethod
    def from_args(cls, ns: argparse.Namespace) -> "RunConfig":
        overrides = {}
        if ns.command == "train":
            overrides = dict(
                epochs=ns.epochs,
                rays_per_batch=ns.rays,
                samples=ns.samples,
                weights=LossWeights(ns.alpha, ns.beta),
                seed=ns.seed,
                optimize_poses=not ns.freeze_poses,
                optimize_focal=False if ns.freeze_focal else None,
                color_loss=not ns.no_color_loss,
                color_mode=ns.color_mode,
                arch=FieldArch(width=ns.width, view_width=ns.view_width),
                checkpoint_every=ns.checkpoint_every,
                deterministic=ns.deterministic,
                threads=ns.threads,
            )
        dataset = getattr(ns, "dataset", None)
        return cls(ns.command, Path(ns.out), ns.seed, Path(dataset) if dataset else None, overrides)


# --- commands ------------------------------------------------------------------------------


def cmd_synth(ns) -> int:
    geom = dict(FULL_SIZE_GEOMETRY) if ns.preset == "full-size" else {}
    for key in ("width", "height", "focal"):
        if getattr(ns, key) is not None:
            geom[key] = getattr(ns, key)
    cam = grid_cameras(**geom)
    log.info("rendering %d subviews at %dx%d", cam.views, cam.width, cam.height)
    stack = make_dataset(default_scene(), cam, noise_std=ns.noise, out=ns.out, seed=ns.seed, step=ns.step)
    print(f"wrote {stack.views} subviews ({stack.width}x{stack.height}) to {ns.out}")
    return 0


def _initial_camera(stack: SubviewStack, cfg: TrainConfig, mode: str) -> CameraParams | None:
    if mode == "truth":
        if stack.camera is None:
            raise DatasetError("--init-poses truth needs a dataset with ground-truth poses")
        return stack.camera
    if not cfg.optimize_poses and stack.camera is not None:
        return stack.camera
    return stack.initial_camera()


def cmd_train(ns) -> int:
    run = RunConfig.from_args(ns)
    stack = load_dataset(run.dataset)
    cfg = TrainConfig(**run.train_overrides)
    init_field = None
    if ns.resume:
        init_field, _ = load_checkpoint(ns.resume)
    cam = _initial_camera(stack, cfg, ns.init_poses)
    res = train(stack, cfg, init_camera=cam, init_field=init_field, out_dir=run.out)
    if res.log:
        last = res.log[-1]
        print(f"epoch {last['epoch']}: loss {last['loss']:.5g}, train PSNR {last['psnr_train']:.2f} dB")
    print(f"wrote {run.out / 'metrics.csv'} and {run.out / 'checkpoint.bin'}")
    return 0


def _check_compatible(fld: SpectralField, cam: CameraParams, stack: SubviewStack, what: str) -> None:
    if fld.arch.bins != stack.grid.bins:
        raise DatasetError(f"{what} predicts {fld.arch.bins} bins, dataset has {stack.grid.bins}")
    if cam.views != stack.views or (cam.width, cam.height) != (stack.width, stack.height):
        raise DatasetError(
            f"{what} has {cam.views} views at {cam.width}x{cam.height}, "
            f"dataset has {stack.views} at {stack.width}x{stack.height}"
        )


def _pick(value, n: int, name: str) -> list[int]:
    if value is None:
        return list(range(n))
    if not 0 <= value < n:
        raise ValueError(f"--{name} {value} out of range 0..{n - 1}")
    return [value]


def cmd_render(ns) -> int:
    stack = load_dataset(ns.dataset)
    fld, cam = load_checkpoint(ns.checkpoint)
    _check_compatible(fld, cam, stack, str(ns.checkpoint))
    views = _pick(ns.view, stack.views, "view")
    filters = _pick(ns.filter, stack.views, "filter")
    quad = QuadratureSpec(ns.samples, stack.t_near, stack.t_far)
    out = Path(ns.out)
    (out / "grid").mkdir(parents=True, exist_ok=True)
    peak = stack.peak
    count = 0
    for v in views:
        spectra = render_view(fld, cam, v, quad, seed=ns.seed + v).spectra
        for f in filters:
            img = spectra @ stack.response.weights[f].T
            stem = out / "grid" / f"view{v:02d}_filter{f:02d}"
            save_image(stem.with_suffix(".imgf32"), img)
            export_png(stem.with_suffix(".png"), img, peak)
            count += 1
        if ns.filter is None:
            (out / "rgb").mkdir(exist_ok=True)
            rgb = spectra @ stack.sensor_weights.T
            stem = out / "rgb" / f"view{v:02d}"
            save_image(stem.with_suffix(".imgf32"), rgb)
            export_png(stem.with_suffix(".png"), rgb)
            count += 1
    print(f"wrote {count} images to {out}")
    return 0


def evaluate_checkpoint(
    stack: SubviewStack,
    fld: SpectralField,
    cam: CameraParams,
    samples: int = 256,
    seed: int = 0,
    color_mode: str = "per_filter",
):
    """Per-view PSNR, pose errors (``None`` without ground truth) and the
    colour-statistics distance over whole rendered views.

    The distance is the training colour loss averaged over views: with
    ``per_filter`` each view is seen through every filter and compared with
    that filter's measured subview; with ``unfiltered`` the bare-sensor
    render of each view is compared with every measured subview.
    Also returns the per-view unfiltered renders.
    """
    quad = QuadratureSpec(samples, stack.t_near, stack.t_far)
    D, K = stack.views, stack.channels
    all_filters = stack.response.weights.reshape(D * K, -1)
    psnrs, unfiltered, distances = [], [], []
    for d in range(D):
        spectra = render_view(fld, cam, d, quad, seed=seed + d).spectra.reshape(-1, stack.grid.bins)
        psnrs.append(psnr(spectra @ stack.response.weights[d].T, stack.images[d].reshape(-1, K), stack.peak))
        bare = spectra @ stack.sensor_weights.T
        unfiltered.append(bare.reshape(stack.height, stack.width, K))
        if color_mode == "per_filter":
            generated = (spectra @ all_filters.T).reshape(-1, D, K)
        elif color_mode == "unfiltered":
            generated = bare
        else:
            raise ValueError(f"unknown colour mode {color_mode!r}")
        distances.append(color_loss(generated, stack.stats)[0])
    if stack.camera is not None:
        rot, trans = pose_errors_per_view(cam, stack.camera)
    else:
        rot = trans = [None] * D
    result = dict(psnr=psnrs, rot_err_deg=list(rot), trans_err=list(trans), color_distance=float(np.mean(distances)))
    return result, unfiltered


def _cell(x) -> str:
    return "" if x is None else f"{x:.6g}"


def cmd_eval(ns) -> int:
    stack = load_dataset(ns.dataset)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    per_view, summary = [], []
    for ckpt in ns.checkpoints:
        fld, cam = load_checkpoint(ckpt)
        _check_compatible(fld, cam, stack, str(ckpt))
        res, _ = evaluate_checkpoint(stack, fld, cam, ns.samples, ns.seed, ns.color_mode)
        for d in range(stack.views):
            per_view.append([ckpt, d, _cell(res["psnr"][d]), _cell(res["rot_err_deg"][d]), _cell(res["trans_err"][d])])
        has_pose = stack.camera is not None
        summary.append([
            ckpt,
            _cell(float(np.mean(res["psnr"]))),
            _cell(float(np.mean(res["rot_err_deg"]))) if has_pose else "",
            _cell(float(np.mean(res["trans_err"]))) if has_pose else "",
            _cell(res["color_distance"]),
        ])
    with open(out / "eval_views.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["checkpoint", "view", "psnr", "rot_err_deg", "trans_err"])
        w.writerows(per_view)
    header = ["checkpoint", "mean_psnr", "rot_err_deg", "trans_err", "color_distance"]
    with open(out / "eval.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(summary)
    widths = [max(len(str(r[i])) for r in [header] + summary) for i in range(len(header))]
    for r in [header] + summary:
        print("  ".join(str(c).ljust(n) for c, n in zip(r, widths)))
    return 0


# --- parser ----------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int, default=7, help="random seed (default 7)")
    common.add_argument("--threads", type=int, default=None, help="cap on BLAS worker threads")
    common.add_argument("--deterministic", action="store_true", help="single-threaded, bit-reproducible run")

    p = argparse.ArgumentParser(prog="bsnerf", description="Spectral radiance fields from filtered light-field subviews.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="render a synthetic subview dataset")
    s.add_argument("--noise", type=float, default=0.0, help="Gaussian noise std relative to the peak intensity")
    s.add_argument("--preset", choices=["desk", "full-size"], default="desk",
                   help="desk: 64x48 subviews; full-size: 245x154")
    s.add_argument("--width", type=int, default=None, help="override the preset width")
    s.add_argument("--height", type=int, default=None, help="override the preset height")
    s.add_argument("--focal", type=float, default=None, help="override the preset focal length (pixels)")
    s.add_argument("--step", type=float, default=1e-3, help="oracle integration step")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", parents=[common], help="fit a field (and poses) to a dataset")
    t.add_argument("dataset", help="dataset directory")
    t.add_argument("--epochs", type=int, default=2000)
    t.add_argument("--rays", type=int, default=1024, help="rays per batch")
    t.add_argument("--samples", type=int, default=64, help="samples per ray")
    t.add_argument("--width", type=int, default=128, help="trunk width")
    t.add_argument("--view-width", type=int, default=64, help="view-branch width")
    t.add_argument("--alpha", type=float, default=0.5, help="fidelity weight")
    t.add_argument("--beta", type=float, default=0.5, help="colour-statistics weight")
    t.add_argument("--no-color-loss", action="store_true", help="train with beta = 0")
    t.add_argument("--color-mode", choices=["per_filter", "unfiltered"], default="per_filter")
    t.add_argument("--freeze-poses", action="store_true", help="keep the initial poses and focal")
    t.add_argument("--freeze-focal", action="store_true", help="optimise poses but not the focal length")
    t.add_argument("--init-poses", choices=["auto", "truth"], default="auto",
                   help="auto: ground truth when poses are frozen, identity rotations otherwise")
    t.add_argument("--resume", metavar="CHECKPOINT", help="start from a checkpoint's field")
    t.add_argument("--checkpoint-every", type=int, default=0, metavar="N")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", parents=[common], help="render the view x filter grid and RGB images")
    r.add_argument("checkpoint")
    r.add_argument("--data", dest="dataset", required=True, help="dataset the checkpoint was trained on")
    r.add_argument("--view", type=int, default=None)
    r.add_argument("--filter", type=int, default=None)
    r.add_argument("--samples", type=int, default=128)
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", parents=[common], help="PSNR, pose errors and colour distance")
    e.add_argument("dataset")
    e.add_argument("checkpoints", nargs="+", metavar="checkpoint")
    e.add_argument("--samples", type=int, default=256)
    e.add_argument("--color-mode", choices=["per_filter", "unfiltered"], default="per_filter",
                   help="which colour-statistics distance to report")
    e.set_defaults(func=cmd_eval)
    return p


def _configure_logging() -> None:
    level = os.environ.get("BSNERF_LOG", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    _configure_logging()
    if getattr(ns, "epochs", 0) < 0:
        parser.error("--epochs must be non-negative")
    try:
        if ns.deterministic or ns.threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=1 if ns.deterministic else ns.threads):
                return ns.func(ns)
        return ns.func(ns)
    except RUNTIME_ERRORS as exc:
        print(f"bsnerf {ns.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
