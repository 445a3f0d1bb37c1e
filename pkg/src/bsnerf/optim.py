"""Adam, staircase learning-rate schedules and the joint field/camera training loop."""

from __future__ import annotations

import contextlib
import csv
import logging
import math
import struct
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .field import FieldArch, SpectralField, read_field, write_field
from .geometry import CameraParams, generate_rays, generate_rays_backward, rotation_angle_deg, rotation_to_axis_angle
from .losses import LossWeights, color_loss, fidelity_loss
from .renderer import QuadratureSpec, RenderError, render_rays, render_rays_backward
from .scenedata import SubviewStack

log = logging.getLogger(__name__)

METRICS_HEADER = (
    "epoch", "loss", "loss_fid", "loss_color", "lr_field", "lr_pose",
    "psnr_train", "rot_err_deg", "trans_err",
)
CAMERA_MAGIC = b"BSNCAMRA"


class TrainingDiverged(RuntimeError):
    pass


class OptimError(ValueError):
    pass


# --- Adam ---------------------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def like(cls, params, lr: float = 1e-3, **kw) -> "AdamState":
        params = np.asarray(params)
        return cls(np.zeros_like(params), np.zeros_like(params), lr, **kw)


def adam_step(state: AdamState, params, grads, lr: float | None = None, name: str = "params"):
    """One bias-corrected Adam update; returns ``(new_params, state)``.

    ``state`` is updated in place.  ``lr`` overrides ``state.lr`` for this
    step (schedules set it every epoch).
    """
    params = np.asarray(params)
    grads = np.asarray(grads)
    if grads.shape != params.shape or state.m.shape != params.shape:
        raise OptimError(f"{name}: shape mismatch between params {params.shape} and grads {grads.shape}")
    if not np.all(np.isfinite(grads)):
        raise OptimError(f"{name}: non-finite gradient")
    if lr is not None:
        state.lr = lr
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m = b1 * state.m + (1 - b1) * grads
    state.v = b2 * state.v + (1 - b2) * grads * grads
    m_hat = state.m / (1 - b1**state.step)
    v_hat = state.v / (1 - b2**state.step)
    update = (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(params.dtype, copy=False)
    return params - update, state


# --- schedules ----------------------------------------------------------------------------


@dataclass(frozen=True)
class Schedule:
    initial_lr: float = 1e-3
    decay_factor: float = 1.0
    decay_every: int = 1

    def __post_init__(self):
        if self.initial_lr <= 0 or not 0 < self.decay_factor <= 1 or self.decay_every < 1:
            raise OptimError(f"invalid schedule {self}")


FIELD_SCHEDULE = Schedule(1e-3, 0.9954, 10)
POSE_SCHEDULE = Schedule(1e-3, 0.9, 100)


def lr_at(schedule: Schedule, epoch: int) -> float:
    if epoch < 0:
        raise OptimError("epoch must be non-negative")
    return schedule.initial_lr * schedule.decay_factor ** (epoch // schedule.decay_every)


# --- configuration ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 2000
    rays_per_batch: int = 1024
    samples: int = 64
    weights: LossWeights = LossWeights()
    field_schedule: Schedule = FIELD_SCHEDULE
    pose_schedule: Schedule = POSE_SCHEDULE
    focal_schedule: Schedule = POSE_SCHEDULE
    seed: int = 7
    optimize_poses: bool = True
    optimize_focal: bool | None = None  # None: follow optimize_poses
    color_loss: bool = True
    # "per_filter": the batch seen through filter d vs view d's statistics;
    # "unfiltered": bare-sensor render vs every view's statistics
    color_mode: str = "per_filter"
    arch: FieldArch = FieldArch()
    dtype: str = "float32"
    checkpoint_every: int = 0
    deterministic: bool = False
    threads: int | None = None

    def __post_init__(self):
        if self.epochs < 0 or self.rays_per_batch < 1 or self.samples < 2:
            raise OptimError("epochs, rays_per_batch and samples must be positive")
        if self.color_mode not in ("unfiltered", "per_filter"):
            raise OptimError(f"unknown color_mode {self.color_mode!r}")

    @property
    def effective_weights(self) -> LossWeights:
        return self.weights if self.color_loss else replace(self.weights, beta=0.0)

    @property
    def focal_enabled(self) -> bool:
        return self.optimize_poses if self.optimize_focal is None else self.optimize_focal

    def replace(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


class TrainResult(NamedTuple):
    field: SpectralField
    camera: CameraParams
    log: list


# --- pose metrics ----------------------------------------------------------------------------


def align_to_view(est: CameraParams, ref: CameraParams, view: int = 0) -> CameraParams:
    """Rigidly move ``est`` so that its ``view`` coincides with ``ref``'s."""
    Ra = ref.rotation_matrix(view) @ est.rotation_matrix(view).T
    rots, trans = [], []
    for d in range(est.views):
        rots.append(rotation_to_axis_angle(Ra @ est.rotation_matrix(d)))
        trans.append(Ra @ (est.translations[d] - est.translations[view]) + ref.translations[view])
    return est.replace(rotations=np.array(rots), translations=np.array(trans))


def pose_errors_per_view(est: CameraParams, truth: CameraParams, gauge_view: int = 0):
    """Per-view rotation error (degrees) and translation error after gauge alignment."""
    aligned = align_to_view(est, truth, gauge_view)
    rot = [rotation_angle_deg(aligned.rotation_matrix(d), truth.rotation_matrix(d)) for d in range(est.views)]
    trans = np.linalg.norm(aligned.translations - truth.translations, axis=1)
    return np.array(rot), trans


def pose_errors(est: CameraParams, truth: CameraParams, gauge_view: int = 0):
    """Mean rotation error (degrees) and mean translation error after gauge alignment."""
    rot, trans = pose_errors_per_view(est, truth, gauge_view)
    return float(np.mean(rot)), float(np.mean(trans))


# --- checkpoints ---------------------------------------------------------------------------


def save_checkpoint(path, fld: SpectralField, cam: CameraParams) -> None:
    """Field section followed by a camera section::

        BSNCAMRA, u32 D, u32 width, u32 height, f64 focal,
        D x (f64 rotation[3], f64 translation[3])    (all little-endian)
    """
    with open(path, "wb") as fh:
        write_field(fh, fld)
        fh.write(CAMERA_MAGIC)
        fh.write(struct.pack("<IIId", cam.views, cam.width, cam.height, cam.focal))
        poses = np.concatenate([cam.rotations, cam.translations], axis=1)
        fh.write(poses.astype("<f8").tobytes())


def load_checkpoint(path, dtype=np.float64) -> tuple[SpectralField, CameraParams]:
    path = Path(path)
    with open(path, "rb") as fh:
        fld = read_field(fh, str(path), dtype)
        if fh.read(len(CAMERA_MAGIC)) != CAMERA_MAGIC:
            raise OptimError(f"{path}: missing camera section")
        D, W, H, focal = struct.unpack("<IIId", fh.read(20))
        raw = fh.read(48 * D)
        if len(raw) != 48 * D:
            raise OptimError(f"{path}: truncated camera section")
        poses = np.frombuffer(raw, dtype="<f8").reshape(D, 6)
    return fld, CameraParams(poses[:, :3], poses[:, 3:], focal, W, H)


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return repr(float(x)) if not isinstance(x, int) else str(x)


def write_metrics(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow([_fmt(r.get(k)) for k in METRICS_HEADER])


def read_metrics(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (float(v) if v != "" else None) for k, v in r.items()} for r in rows]


# --- training --------------------------------------------------------------------------------


def _thread_limit(cfg: TrainConfig):
    limit = 1 if cfg.deterministic else cfg.threads
    if limit is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=limit)


class _Step(NamedTuple):
    loss: float
    fid: float
    col: float
    sq_err: float


def train(
    stack: SubviewStack,
    cfg: TrainConfig = TrainConfig(),
    init_camera: CameraParams | None = None,
    init_field: SpectralField | None = None,
    out_dir=None,
) -> TrainResult:
    """Jointly fit the field and (optionally) poses and focal to ``stack``.

    Each epoch visits every view once in order, drawing one ray batch per
    view.  View 0 is the gauge view: its pose never changes.  When
    ``out_dir`` is given, ``metrics.csv`` and ``checkpoint.bin`` are written
    there (plus ``checkpoint_eXXXXX.bin`` every ``cfg.checkpoint_every``
    epochs).
    """
    dtype = np.dtype(cfg.dtype)
    rng = np.random.default_rng(cfg.seed)
    fld = init_field or SpectralField.initialize(cfg.arch, seed=cfg.seed, dtype=dtype)
    fld = fld.with_theta(fld.theta.astype(dtype))
    if fld.arch.bins != stack.grid.bins:
        raise OptimError(f"field predicts {fld.arch.bins} bins, dataset has {stack.grid.bins}")
    if init_camera is None:
        if cfg.optimize_poses or stack.camera is None:
            init_camera = stack.initial_camera()
        else:
            init_camera = stack.camera
    cam = init_camera
    if cam.views != stack.views or (cam.width, cam.height) != (stack.width, stack.height):
        raise OptimError("initial camera does not match the dataset geometry")
    focal0 = cam.focal
    weights = cfg.effective_weights
    quad = QuadratureSpec(cfg.samples, stack.t_near, stack.t_far, stratified=True)
    D, H, W, K = stack.images.shape
    targets = stack.images.reshape(D, H * W, K)
    M = stack.response.weights.astype(dtype)
    sensor_w = stack.sensor_weights.astype(dtype)
    all_filters = M.reshape(D * K, -1)
    u_all = (np.arange(H * W) % W) + 0.5
    v_all = (np.arange(H * W) // W) + 0.5
    n_rays = min(cfg.rays_per_batch, H * W)
    use_color = weights.beta > 0
    focal_opt = cfg.focal_enabled

    pose_params = np.concatenate([cam.rotations, cam.translations], axis=1)  # (D, 6)
    focal_scale = np.array([1.0])
    field_state = AdamState.like(fld.theta)
    pose_state = AdamState.like(pose_params[1:])
    focal_state = AdamState.like(focal_scale)

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    peak = stack.peak
    t_start = time.perf_counter()

    def step(epoch: int, d: int, cam: CameraParams):
        nonlocal fld, pose_params, focal_scale
        idx = rng.choice(H * W, size=n_rays, replace=False)
        u, v = u_all[idx], v_all[idx]
        origins, dirs = generate_rays(cam, d, u, v)
        try:
            out, cache = render_rays(fld, origins, dirs, quad, rng, dtype=dtype)
        except RenderError as exc:
            raise TrainingDiverged(f"epoch {epoch}, view {d}: {exc}") from exc
        spectrum = out.spectrum
        pred = spectrum @ M[d].T
        fid, g_pred = fidelity_loss(pred, targets[d, idx])
        d_spectrum = weights.alpha * (g_pred @ M[d])
        col = 0.0
        if use_color:
            if cfg.color_mode == "unfiltered":
                col, g_gen = color_loss(spectrum @ sensor_w.T, stack.stats)
                d_spectrum += weights.beta * (g_gen @ sensor_w)
            else:
                gen = (spectrum @ all_filters.T).reshape(n_rays, D, K)
                col, g_gen = color_loss(gen, stack.stats)
                d_spectrum += weights.beta * (g_gen.reshape(n_rays, D * K) @ all_filters)
        loss = weights.alpha * fid + weights.beta * col
        if not math.isfinite(loss):
            raise TrainingDiverged(
                f"non-finite loss at epoch {epoch}, view {d}: fid={fid}, color={col}, "
                f"|theta|max={np.abs(fld.theta).max():.3g}"
            )
        need_rays = (cfg.optimize_poses and d > 0) or focal_opt
        g_theta, g_o, g_d = render_rays_backward(fld, cache, d_spectrum, input_grads=need_rays)
        new_theta, _ = adam_step(field_state, fld.theta, g_theta, lr_at(cfg.field_schedule, epoch), "field")
        fld = fld.with_theta(new_theta)
        if need_rays:
            g_phi, g_t, g_f = generate_rays_backward(cam, d, u, v, g_o, g_d)
            if cfg.optimize_poses:
                g_pose = np.zeros_like(pose_params[1:])
                if d > 0:
                    g_pose[d - 1] = np.concatenate([g_phi, g_t])
                pose_params[1:], _ = adam_step(
                    pose_state, pose_params[1:], g_pose, lr_at(cfg.pose_schedule, epoch), "poses"
                )
            if focal_opt:
                focal_scale, _ = adam_step(
                    focal_state, focal_scale, np.array([g_f * focal0]), lr_at(cfg.focal_schedule, epoch), "focal"
                )
        return _Step(loss, fid, col, float(np.mean((pred - targets[d, idx]) ** 2)))

    with _thread_limit(cfg):
        for epoch in range(cfg.epochs):
            steps = []
            for d in range(D):
                if cfg.optimize_poses or focal_opt:
                    cam = cam.replace(
                        rotations=pose_params[:, :3].copy(),
                        translations=pose_params[:, 3:].copy(),
                        focal=focal0 * float(focal_scale[0]),
                    )
                steps.append(step(epoch, d, cam))
            if cfg.optimize_poses or focal_opt:
                cam = cam.replace(
                    rotations=pose_params[:, :3].copy(),
                    translations=pose_params[:, 3:].copy(),
                    focal=focal0 * float(focal_scale[0]),
                )
            mse = float(np.mean([s.sq_err for s in steps]))
            row = dict(
                epoch=epoch,
                loss=float(np.mean([s.loss for s in steps])),
                loss_fid=float(np.mean([s.fid for s in steps])),
                loss_color=float(np.mean([s.col for s in steps])),
                lr_field=lr_at(cfg.field_schedule, epoch),
                lr_pose=lr_at(cfg.pose_schedule, epoch),
                psnr_train=10.0 * math.log10(peak * peak / mse) if mse > 0 else math.inf,
            )
            if stack.camera is not None:
                row["rot_err_deg"], row["trans_err"] = pose_errors(cam, stack.camera)
            rows.append(row)
            if epoch % 50 == 0 or epoch == cfg.epochs - 1:
                log.info(
                    "epoch %d loss %.5g fid %.5g color %.5g psnr %.2f rot %s (%.0fs)",
                    epoch, row["loss"], row["loss_fid"], row["loss_color"], row["psnr_train"],
                    f"{row['rot_err_deg']:.3f}" if "rot_err_deg" in row else "-",
                    time.perf_counter() - t_start,
                )
            if out_dir is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(out_dir / f"checkpoint_e{epoch + 1:05d}.bin", fld, cam)

    if out_dir is not None:
        write_metrics(out_dir / "metrics.csv", rows)
        save_checkpoint(out_dir / "checkpoint.bin", fld, cam)
    return TrainResult(fld, cam, rows)
