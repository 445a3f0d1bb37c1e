"""Synthetic multispectral light-field scenes, the brute-force image oracle and
dataset files.

A dataset directory holds::

    meta.json            sizes, wavelength grid, ray bounds, file names, per-view
                         channel statistics, optional ground-truth cameras/scene
    filters.csv          filter transmissions (see spectral.save_curves)
    sensor.csv           sensor sensitivities
    view_00.imgf32 ...   one float raster per subview
    preview/view_00.png  8-bit gamma-2.2 previews, never read back

Float raster layout: the 7 bytes ``IMGF32\\0``, then little-endian u32 height,
width, channels, then height*width*channels little-endian float32 values in
row-major, channel-interleaved order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import CameraParams, GeometryError, generate_rays, look_at_axis_angle, pixel_centers
from .losses import ChannelStats, channel_stats
from .spectral import (
    ResponseMatrix,
    SpectralCurve,
    WavelengthGrid,
    build_response,
    default_filters,
    default_sensor,
    gaussian,
    load_curves,
    save_curves,
    unfiltered_response,
)

IMG_MAGIC = b"IMGF32\x00"
META_FORMAT = "bsnerf-subviews"
META_VERSION = 1


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class Blob:
    center: np.ndarray
    radius: float
    density: float
    spectrum: np.ndarray  # (B,) in [0, 1]

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        object.__setattr__(self, "spectrum", np.asarray(self.spectrum, dtype=np.float64))
        if self.radius <= 0:
            raise ValueError("blob radius must be positive")
        if np.any(self.spectrum < 0) or np.any(self.spectrum > 1):
            raise ValueError("blob spectrum must lie in [0, 1]")


@dataclass(frozen=True)
class SyntheticScene:
    """Emissive-absorptive mixture of isotropic Gaussian blobs.

    Density is the sum of the blob densities; the emitted spectrum at a point
    is the density-weighted average of the blob spectra.
    """

    blobs: tuple
    grid: WavelengthGrid = field(default_factory=WavelengthGrid)
    t_near: float = 1.2
    t_far: float = 2.8

    dtype = np.float64

    def _parts(self, x):
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        dens = np.empty((len(self.blobs), len(x)))
        for j, b in enumerate(self.blobs):
            r2 = np.sum((x - b.center) ** 2, axis=1)
            dens[j] = b.density * np.exp(-0.5 * r2 / (b.radius * b.radius))
        return dens

    def density(self, x) -> np.ndarray:
        if not self.blobs:
            return np.zeros(np.asarray(x).reshape(-1, 3).shape[0])
        return self._parts(x).sum(axis=0)

    def query(self, x, dirs=None):
        """Closed-form ``(sigma, spectrum, None)``; the renderer's field protocol."""
        n = np.asarray(x).reshape(-1, 3).shape[0]
        if not self.blobs:
            return np.zeros(n), np.zeros((n, self.grid.bins)), None
        dens = self._parts(x)
        sigma = dens.sum(axis=0)
        S = np.stack([b.spectrum for b in self.blobs])
        spec = (dens.T @ S) / np.maximum(sigma, 1e-300)[:, None]
        return sigma, spec, None

    def to_dict(self) -> dict:
        return dict(
            t_near=self.t_near,
            t_far=self.t_far,
            blobs=[
                dict(center=b.center.tolist(), radius=b.radius, density=b.density, spectrum=b.spectrum.tolist())
                for b in self.blobs
            ],
        )

    @classmethod
    def from_dict(cls, d: dict, grid: WavelengthGrid) -> "SyntheticScene":
        blobs = tuple(Blob(**b) for b in d["blobs"])
        return cls(blobs, grid, d["t_near"], d["t_far"])


def blob_spectrum(grid: WavelengthGrid, peak: float, width: float = 30.0) -> np.ndarray:
    return 0.1 + 0.85 * gaussian(grid.centers, peak, width)


def default_scene(grid: WavelengthGrid | None = None) -> SyntheticScene:
    """Three blobs with spectra peaking near 460, 550 and 630 nm inside the unit cube."""
    grid = grid or WavelengthGrid()
    blobs = (
        Blob((-0.2, 0.08, 0.0), 0.16, 25.0, blob_spectrum(grid, 460.0)),
        Blob((0.17, -0.1, 0.15), 0.13, 25.0, blob_spectrum(grid, 550.0)),
        Blob((0.05, 0.18, -0.25), 0.18, 25.0, blob_spectrum(grid, 630.0)),
    )
    return SyntheticScene(blobs, grid)


def grid_cameras(
    width: int = 64,
    height: int = 48,
    focal: float = 72.0,
    distance: float = 2.0,
    baseline: float = 0.15,
    rows: int = 3,
    cols: int = 3,
) -> CameraParams:
    """Cameras on a ``rows x cols`` grid in the plane ``z = distance``, all
    aimed at the origin.  Views are numbered row-major from the top left."""
    rot, trans = [], []
    for i in range(rows):
        for j in range(cols):
            eye = np.array([(j - (cols - 1) / 2) * baseline, ((rows - 1) / 2 - i) * baseline, distance])
            trans.append(eye)
            rot.append(look_at_axis_angle(eye, np.zeros(3)))
    return CameraParams(np.array(rot), np.array(trans), focal, width, height)


FULL_SIZE_GEOMETRY = dict(width=245, height=154, focal=300.0)


# --- oracle ----------------------------------------------------------------------------


def oracle_spectra(scene: SyntheticScene, origins, dirs, step: float = 1e-3, chunk: int = 64):
    """Ray-integrated spectra by fine trapezoidal quadrature.

    Optical depth is the cumulative trapezoid of the analytic density on a
    uniform grid of spacing ``step``; the emission integral
    ``int T(t) sigma(t) s(t) dt`` is then integrated with the trapezoid rule.
    """
    n = int(np.ceil((scene.t_far - scene.t_near) / step))
    t = np.linspace(scene.t_near, scene.t_far, n + 1)
    h = np.diff(t)
    out = np.zeros((len(origins), scene.grid.bins))
    if not scene.blobs:
        return out
    for s in range(0, len(origins), chunk):
        o, d = origins[s : s + chunk], dirs[s : s + chunk]
        x = o[:, None, :] + t[None, :, None] * d[:, None, :]
        sigma, spec, _ = scene.query(x.reshape(-1, 3))
        sigma = sigma.reshape(len(o), -1)
        spec = spec.reshape(len(o), len(t), -1)
        depth = np.zeros_like(sigma)
        depth[:, 1:] = np.cumsum(0.5 * (sigma[:, 1:] + sigma[:, :-1]) * h, axis=1)
        emit = (np.exp(-depth) * sigma)[..., None] * spec
        out[s : s + chunk] = np.einsum("rnb,n->rb", 0.5 * (emit[:, 1:] + emit[:, :-1]), h)
    return out


def oracle_render(scene: SyntheticScene, cam: CameraParams, view: int, weights, step: float = 1e-3):
    """Ground-truth ``(H, W, K)`` image of ``view`` seen through ``weights``.

    ``weights`` is a ``(K, B)`` response (one filter row of a
    :class:`ResponseMatrix`, or the bare sensor).
    """
    extent = scene.t_far - scene.t_near
    if step > 1e-2 * extent:
        raise ValueError(f"oracle step {step} is coarser than 1% of the ray extent {extent}")
    spectra = oracle_view_spectra(scene, cam, view, step)
    return spectra @ np.asarray(weights).T


def oracle_view_spectra(scene: SyntheticScene, cam: CameraParams, view: int, step: float = 1e-3):
    try:
        u, v = pixel_centers(cam.width, cam.height)
        origins, dirs = generate_rays(cam, view, u, v)
    except GeometryError as exc:
        raise ValueError(f"degenerate camera: {exc}") from exc
    return oracle_spectra(scene, origins, dirs, step).reshape(cam.height, cam.width, -1)


# --- datasets ----------------------------------------------------------------------------


@dataclass
class SubviewStack:
    """``D`` measured subviews ``images[d]`` of shape ``(H, W, K)``, each seen
    through filter ``d``."""

    images: np.ndarray  # (D, H, W, K) float32
    filters: list
    sensor: list
    focal: float
    t_near: float
    t_far: float
    stats: list = None
    camera: CameraParams | None = None  # ground truth when known
    scene: SyntheticScene | None = None
    init_translations: np.ndarray | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        if self.images.ndim != 4:
            raise DatasetError("images must be (D, H, W, K)")
        if np.any(self.images < 0):
            raise DatasetError("intensities must be non-negative")
        if len(self.filters) != self.views:
            raise DatasetError(f"{len(self.filters)} filters for {self.views} views")
        if self.stats is None:
            self.stats = self.compute_stats()
        self.response = build_response(self.filters, self.sensor)
        self.sensor_weights = unfiltered_response(self.sensor)

    @property
    def views(self) -> int:
        return self.images.shape[0]

    @property
    def height(self) -> int:
        return self.images.shape[1]

    @property
    def width(self) -> int:
        return self.images.shape[2]

    @property
    def channels(self) -> int:
        return self.images.shape[3]

    @property
    def grid(self) -> WavelengthGrid:
        return self.filters[0].grid

    @property
    def peak(self) -> float:
        return float(self.images.max())

    def compute_stats(self) -> list:
        return [channel_stats(img.reshape(-1, img.shape[-1])) for img in self.images]

    def initial_camera(self) -> CameraParams:
        """Identity rotations with the best available translation guess."""
        if self.init_translations is not None:
            trans = self.init_translations
        elif self.camera is not None:
            trans = self.camera.translations
        else:
            trans = ring_prior(self.views, 0.5 * (self.t_near + self.t_far))
        return CameraParams(np.zeros((self.views, 3)), trans, self.focal, self.width, self.height)


def ring_prior(views: int, distance: float, radius: float = 0.1) -> np.ndarray:
    ang = 2 * np.pi * np.arange(views) / max(views, 1)
    out = np.zeros((views, 3))
    out[1:, 0] = radius * np.cos(ang[1:])
    out[1:, 1] = radius * np.sin(ang[1:])
    out[:, 2] = distance
    return out


def make_dataset(
    scene: SyntheticScene,
    cam: CameraParams,
    filters=None,
    sensor=None,
    noise_std: float = 0.0,
    out=None,
    seed: int = 0,
    step: float = 1e-3,
) -> SubviewStack:
    """Render every subview with the oracle and optionally write it to ``out``.

    ``noise_std`` is relative to the noiseless stack's peak intensity; noisy
    values are clipped at zero.
    """
    filters = filters or default_filters(scene.grid)
    sensor = sensor or default_sensor(scene.grid)
    if len(filters) != cam.views:
        raise ValueError(f"{len(filters)} filters for {cam.views} camera views")
    M = build_response(filters, sensor)
    if M.grid != scene.grid:
        raise ValueError("scene and curves use different wavelength grids")
    images = np.stack([oracle_render(scene, cam, d, M.weights[d], step) for d in range(cam.views)])
    if noise_std > 0:
        rng = np.random.default_rng(seed)
        images = np.maximum(images + rng.normal(0.0, noise_std * images.max(), images.shape), 0.0)
    stack = SubviewStack(
        images.astype(np.float32), filters, sensor, cam.focal, scene.t_near, scene.t_far,
        camera=cam, scene=scene,
    )
    if out is not None:
        save_dataset(out, stack, extra=dict(noise_std=noise_std, seed=seed))
    return stack


# --- raster I/O --------------------------------------------------------------------------


def save_image(path, image) -> None:
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[..., None]
    H, W, C = image.shape
    with open(path, "wb") as fh:
        fh.write(IMG_MAGIC)
        fh.write(struct.pack("<III", H, W, C))
        fh.write(np.ascontiguousarray(image, dtype="<f4").tobytes())


def load_image(path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DatasetError(f"{path}: {exc.strerror}") from exc
    if raw[: len(IMG_MAGIC)] != IMG_MAGIC:
        raise DatasetError(f"{path}: bad magic, not an IMGF32 raster")
    off = len(IMG_MAGIC)
    if len(raw) < off + 12:
        raise DatasetError(f"{path}: truncated header")
    H, W, C = struct.unpack("<III", raw[off : off + 12])
    body = raw[off + 12 :]
    if len(body) != 4 * H * W * C:
        raise DatasetError(f"{path}: expected {H}x{W}x{C} floats, found {len(body) // 4}")
    return np.frombuffer(body, dtype="<f4").reshape(H, W, C).astype(np.float32)


def tone_map(image, peak: float | None = None) -> np.ndarray:
    """8-bit gamma-2.2 rendition for viewing only."""
    image = np.asarray(image, dtype=np.float64)
    peak = peak or float(image.max()) or 1.0
    return np.round(255.0 * np.clip(image / peak, 0.0, 1.0) ** (1 / 2.2)).astype(np.uint8)


def export_png(path, image, peak: float | None = None) -> None:
    from PIL import Image

    img8 = tone_map(image, peak)
    if img8.ndim == 3 and img8.shape[2] == 1:
        img8 = img8[..., 0]
    elif img8.ndim == 3 and img8.shape[2] not in (3, 4):
        img8 = img8[..., 0]
    Image.fromarray(img8).save(path)


# --- dataset I/O -------------------------------------------------------------------------


def _camera_to_meta(cam: CameraParams) -> list:
    return [
        dict(rotation=r.tolist(), translation=t.tolist())
        for r, t in zip(cam.rotations, cam.translations)
    ]


def save_dataset(path, stack: SubviewStack, extra: dict | None = None, previews: bool = True) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        grid = stack.grid
        save_curves(path / "filters.csv", stack.filters)
        save_curves(path / "sensor.csv", stack.sensor)
        names = [f"view_{d:02d}.imgf32" for d in range(stack.views)]
        for name, img in zip(names, stack.images):
            save_image(path / name, img)
        meta = dict(
            format=META_FORMAT,
            version=META_VERSION,
            D=stack.views,
            K=stack.channels,
            B=grid.bins,
            lambda_min=grid.lambda_min,
            lambda_max=grid.lambda_max,
            width=stack.width,
            height=stack.height,
            t_near=stack.t_near,
            t_far=stack.t_far,
            focal=stack.focal,
            filters_file="filters.csv",
            sensor_file="sensor.csv",
            images=names,
            stats=[dict(mean=s.mean.tolist(), std=s.std.tolist()) for s in stack.stats],
        )
        if stack.camera is not None:
            meta["poses"] = _camera_to_meta(stack.camera)
        if stack.init_translations is not None:
            meta["init_translations"] = np.asarray(stack.init_translations).tolist()
        if stack.scene is not None:
            meta["scene"] = stack.scene.to_dict()
        meta.update(extra or {})
        (path / "meta.json").write_text(json.dumps(meta, indent=1), encoding="utf-8")
        if previews:
            (path / "preview").mkdir(exist_ok=True)
            peak = stack.peak
            for d, img in enumerate(stack.images):
                export_png(path / "preview" / f"view_{d:02d}.png", img, peak)
    except OSError as exc:
        raise DatasetError(f"cannot write dataset to {path}: {exc}") from exc
    return path


def load_dataset(path) -> SubviewStack:
    path = Path(path)
    meta_path = path / "meta.json"
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise DatasetError(f"{meta_path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{meta_path}: {exc}") from exc
    if meta.get("format") != META_FORMAT or meta.get("version") != META_VERSION:
        raise DatasetError(f"{meta_path}: unsupported dataset format/version")
    filters = load_curves(path / meta["filters_file"], transmission=True)
    sensor = load_curves(path / meta["sensor_file"], transmission=False)
    grid = WavelengthGrid(meta["lambda_min"], meta["lambda_max"], meta["B"])
    if filters[0].grid != grid or sensor[0].grid != grid:
        raise DatasetError(f"{path}: curve files disagree with the grid in meta.json")
    images = []
    for name in meta["images"]:
        img = load_image(path / name)
        if img.shape != (meta["height"], meta["width"], meta["K"]):
            raise DatasetError(
                f"{path / name}: shape {img.shape} does not match meta "
                f"({meta['height']}, {meta['width']}, {meta['K']})"
            )
        images.append(img)
    if len(images) != meta["D"]:
        raise DatasetError(f"{meta_path}: D={meta['D']} but {len(images)} images listed")
    camera = None
    if meta.get("poses"):
        camera = CameraParams(
            [p["rotation"] for p in meta["poses"]],
            [p["translation"] for p in meta["poses"]],
            meta["focal"],
            meta["width"],
            meta["height"],
        )
    scene = SyntheticScene.from_dict(meta["scene"], grid) if meta.get("scene") else None
    stack = SubviewStack(
        np.stack(images), filters, sensor, meta["focal"], meta["t_near"], meta["t_far"],
        camera=camera, scene=scene,
        init_translations=np.array(meta["init_translations"]) if meta.get("init_translations") else None,
    )
    stored = [ChannelStats(np.array(s["mean"]), np.array(s["std"])) for s in meta["stats"]]
    for d, (a, b) in enumerate(zip(stored, stack.stats)):
        if not (np.allclose(a.mean, b.mean, rtol=1e-12, atol=1e-12) and np.allclose(a.std, b.std, rtol=1e-12, atol=1e-12)):
            raise DatasetError(f"{meta_path}: stored statistics of view {d} do not match its image")
    stack.stored_stats = stored
    return stack
