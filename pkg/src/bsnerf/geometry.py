"""Camera poses, pinhole intrinsics and ray generation.

Rotations are stored as axis-angle 3-vectors ``phi = angle * axis`` and mapped
to SO(3) with the Rodrigues formula.  Cameras are right-handed and look down
their local -z axis; image rows grow downwards, so camera +y is image-up.
A pose maps camera coordinates to world coordinates: ``x_w = R x_c + t``, which
makes the translation the camera centre.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

SMALL_ANGLE = 1e-6
# below this angle the derivative coefficients switch to their series
_SERIES_GRAD = 1e-2


class GeometryError(ValueError):
    pass


def _as_phi(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    if phi.shape != (3,):
        raise GeometryError(f"axis-angle must be a 3-vector, got shape {phi.shape}")
    if not np.all(np.isfinite(phi)):
        raise GeometryError(f"axis-angle has non-finite components: {phi}")
    return phi


def skew(v) -> np.ndarray:
    """Cross-product matrix ``[v]x`` so that ``skew(v) @ w == cross(v, w)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _coefficients(angle: float) -> tuple[float, float]:
    """sin(a)/a and (1 - cos a)/a**2 with their small-angle limits."""
    if angle < SMALL_ANGLE:
        a2 = angle * angle
        return 1.0 - a2 / 6.0, 0.5 - a2 / 24.0
    half = np.sin(0.5 * angle) / angle
    return np.sin(angle) / angle, 2.0 * half * half


def rodrigues_series(phi) -> np.ndarray:
    """Second-order Taylor form of :func:`rodrigues`, valid for tiny angles."""
    phi = _as_phi(phi)
    a2 = float(phi @ phi)
    K = skew(phi)
    return np.eye(3) + (1.0 - a2 / 6.0) * K + (0.5 - a2 / 24.0) * (K @ K)


def rodrigues(phi) -> np.ndarray:
    """Rotation matrix of the axis-angle vector ``phi``.

    ``R = I + sin(a)/a [phi]x + (1 - cos a)/a^2 [phi]x^2`` with ``a = |phi|``.
    """
    phi = _as_phi(phi)
    A, B = _coefficients(float(np.linalg.norm(phi)))
    K = skew(phi)
    return np.eye(3) + A * K + B * (K @ K)


_E = [skew(e) for e in np.eye(3)]


def rodrigues_backward(phi, upstream) -> np.ndarray:
    """Pull a cotangent ``dL/dR`` (3x3) back to ``dL/dphi``."""
    phi = _as_phi(phi)
    G = np.asarray(upstream, dtype=np.float64)
    if G.shape != (3, 3):
        raise GeometryError(f"upstream must be 3x3, got {G.shape}")
    angle = float(np.linalg.norm(phi))
    A, B = _coefficients(angle)
    # dA/da / a and dB/da / a
    if angle < _SERIES_GRAD:
        a2 = angle * angle
        dA = -1.0 / 3.0 + a2 / 30.0 - a2 * a2 / 840.0
        dB = -1.0 / 12.0 + a2 / 180.0 - a2 * a2 / 6720.0
    else:
        s, c = np.sin(angle), np.cos(angle)
        dA = (angle * c - s) / angle**3
        dB = (angle * s - 2.0 * (1.0 - c)) / angle**4
    K = skew(phi)
    K2 = K @ K
    gK = float(np.sum(G * K))
    gK2 = float(np.sum(G * K2))
    out = np.empty(3)
    for i in range(3):
        Ei = _E[i]
        out[i] = (
            dA * phi[i] * gK
            + A * np.sum(G * Ei)
            + dB * phi[i] * gK2
            + B * np.sum(G * (Ei @ K + K @ Ei))
        )
    return out


def rotation_to_axis_angle(R) -> np.ndarray:
    """Inverse of :func:`rodrigues` for angles in [0, pi]."""
    R = np.asarray(R, dtype=np.float64)
    cos_a = np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0)
    angle = float(np.arccos(cos_a))
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if angle < 1e-7:
        return 0.5 * w
    if np.pi - angle < 1e-6:
        # near pi the antisymmetric part vanishes; use the symmetric part
        M = 0.5 * (R + np.eye(3))
        i = int(np.argmax(np.diag(M)))
        axis = M[:, i] / np.sqrt(M[i, i])
        return angle * axis / np.linalg.norm(axis)
    return angle / (2.0 * np.sin(angle)) * w


def rotation_angle_deg(Ra, Rb) -> float:
    """Angle in degrees of the relative rotation ``Ra^T Rb``."""
    c = 0.5 * (np.trace(np.asarray(Ra).T @ np.asarray(Rb)) - 1.0)
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def look_at_axis_angle(eye, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """Axis-angle of a camera at ``eye`` whose -z axis points at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    back = eye - np.asarray(target, dtype=np.float64)
    back /= np.linalg.norm(back)
    right = np.cross(np.asarray(up, dtype=np.float64), back)
    right /= np.linalg.norm(right)
    true_up = np.cross(back, right)
    return rotation_to_axis_angle(np.stack([right, true_up, back], axis=1))


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray  # axis-angle, radians * unit axis
    translation: np.ndarray

    def matrix(self) -> np.ndarray:
        return rodrigues(self.rotation)


@dataclass(frozen=True)
class CameraParams:
    """Per-view extrinsics plus one pinhole focal length shared by all views.

    ``rotations`` and ``translations`` are ``(D, 3)`` arrays; ``focal`` is in
    pixels with the principal point at the image centre.
    """

    rotations: np.ndarray
    translations: np.ndarray
    focal: float
    width: int
    height: int
    _mats: tuple = field(default=(), repr=False, compare=False)

    def __post_init__(self):
        rot = np.array(self.rotations, dtype=np.float64).reshape(-1, 3)
        trans = np.array(self.translations, dtype=np.float64).reshape(-1, 3)
        if len(rot) < 1 or rot.shape != trans.shape:
            raise GeometryError("need one rotation and one translation per view")
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(trans))):
            raise GeometryError("camera poses must be finite")
        if not (np.isfinite(self.focal) and self.focal > 0):
            raise GeometryError(f"focal must be positive, got {self.focal}")
        if self.width < 1 or self.height < 1:
            raise GeometryError("image size must be positive")
        rot.setflags(write=False)
        trans.setflags(write=False)
        object.__setattr__(self, "rotations", rot)
        object.__setattr__(self, "translations", trans)
        object.__setattr__(self, "focal", float(self.focal))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(self, "_mats", tuple(rodrigues(p) for p in rot))

    @property
    def views(self) -> int:
        return len(self.rotations)

    def pose(self, view: int) -> Pose:
        self._check_view(view)
        return Pose(self.rotations[view], self.translations[view])

    def rotation_matrix(self, view: int) -> np.ndarray:
        self._check_view(view)
        return self._mats[view]

    def replace(self, **changes) -> "CameraParams":
        kw = dict(
            rotations=self.rotations,
            translations=self.translations,
            focal=self.focal,
            width=self.width,
            height=self.height,
        )
        kw.update(changes)
        return CameraParams(**kw)

    def _check_view(self, view: int) -> None:
        if not 0 <= view < self.views:
            raise GeometryError(f"view index {view} out of range [0, {self.views})")


class Ray(NamedTuple):
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float


def pixel_centers(width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Continuous coordinates of every pixel centre in row-major order."""
    v, u = np.mgrid[0:height, 0:width]
    return u.ravel() + 0.5, v.ravel() + 0.5


def _camera_dirs(u, v, width, height, focal):
    return np.stack(
        [(u - 0.5 * width) / focal, -(v - 0.5 * height) / focal, -np.ones_like(u)],
        axis=-1,
    )


def generate_rays(cam: CameraParams, view: int, u, v) -> tuple[np.ndarray, np.ndarray]:
    """World-space origins and unit directions for pixel coordinates ``(u, v)``."""
    R = cam.rotation_matrix(view)
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    c = _camera_dirs(u, v, cam.width, cam.height, cam.focal)
    n = c / np.linalg.norm(c, axis=-1, keepdims=True)
    dirs = n @ R.T
    origins = np.broadcast_to(cam.translations[view], dirs.shape).copy()
    return origins, dirs


def generate_ray(cam: CameraParams, view: int, pixel, near: float, far: float) -> Ray:
    u, v = pixel
    if not (0 <= u < cam.width and 0 <= v < cam.height):
        raise GeometryError(f"pixel {pixel} outside a {cam.width}x{cam.height} image")
    if not 0 <= near < far:
        raise GeometryError(f"need 0 <= near < far, got {near}, {far}")
    o, d = generate_rays(cam, view, [u], [v])
    return Ray(o[0], d[0], float(near), float(far))


def generate_rays_backward(cam: CameraParams, view: int, u, v, grad_origins, grad_dirs):
    """Gradients of a loss w.r.t. ``(phi_view, t_view, focal)``.

    ``grad_origins`` and ``grad_dirs`` are the ``(P, 3)`` cotangents of the
    outputs of :func:`generate_rays` for the same pixels.
    """
    R = cam.rotation_matrix(view)
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    gd = np.asarray(grad_dirs, dtype=np.float64)
    c = _camera_dirs(u, v, cam.width, cam.height, cam.focal)
    norm = np.linalg.norm(c, axis=-1, keepdims=True)
    n = c / norm
    g_t = np.asarray(grad_origins, dtype=np.float64).sum(axis=0)
    # dirs = n R^T  ->  dL/dR = gd^T n
    g_phi = rodrigues_backward(cam.rotations[view], gd.T @ n)
    g_n = gd @ R
    g_c = (g_n - n * np.sum(g_n * n, axis=-1, keepdims=True)) / norm
    # c_x, c_y scale as 1/f
    g_f = -float(np.sum(g_c[:, :2] * c[:, :2])) / cam.focal
    return g_phi, g_t, g_f
