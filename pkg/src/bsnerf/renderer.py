"""Emission-absorption spectral volume rendering with exact gradients.

Along each ray the renderer draws ``N`` depths, queries the field for density
and per-bin spectra, and accumulates

    w_i = T_i (1 - exp(-sigma_i delta_i)),   T_i = exp(-sum_{j<i} sigma_j delta_j)
    spectrum_b = sum_i w_i s_ib

The spectrum is projected to sensor channels only after accumulation, since the
response weights do not depend on depth.  Space beyond ``t_far`` is black;
``T_{N+1}`` is reported as the residual transmittance.

Any object with ``query(x, dirs) -> (sigma, spectrum, cache)`` can be rendered;
gradients additionally need ``query_backward(cache, d_sigma, d_spec, input_grads)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .geometry import CameraParams, Ray, generate_rays, pixel_centers
from .spectral import ResponseMatrix


class RenderError(RuntimeError):
    pass


@dataclass(frozen=True)
class QuadratureSpec:
    samples: int = 64
    t_near: float = 1.0
    t_far: float = 3.0
    stratified: bool = True

    def __post_init__(self):
        if self.samples < 2:
            raise ValueError("need at least two samples per ray")
        if not 0 <= self.t_near < self.t_far:
            raise ValueError(f"need 0 <= t_near < t_far, got {self.t_near}, {self.t_far}")

    def replace(self, **kw) -> "QuadratureSpec":
        d = dict(samples=self.samples, t_near=self.t_near, t_far=self.t_far, stratified=self.stratified)
        d.update(kw)
        return QuadratureSpec(**d)


class RenderOutput(NamedTuple):
    spectrum: np.ndarray  # (R, B)
    weights: np.ndarray  # (R, N)
    residual_transmittance: np.ndarray  # (R,)
    transmittance: np.ndarray  # (R, N + 1)
    t: np.ndarray  # (R, N)


def sample_depths(quad: QuadratureSpec, n_rays: int, rng=None, dtype=np.float64):
    """Sorted sample depths ``(R, N)`` and interval widths ``(R, N)``.

    Stratified sampling draws one uniform depth per equal sub-interval;
    otherwise sub-interval midpoints are used.
    """
    n = quad.samples
    edges = np.linspace(quad.t_near, quad.t_far, n + 1)
    step = edges[1] - edges[0]
    if quad.stratified:
        if rng is None:
            raise ValueError("stratified sampling needs a random generator")
        t = edges[:-1] + rng.uniform(size=(n_rays, n)) * step
    else:
        t = np.broadcast_to(edges[:-1] + 0.5 * step, (n_rays, n)).copy()
    deltas = np.empty_like(t)
    deltas[:, :-1] = np.diff(t, axis=1)
    deltas[:, -1] = quad.t_far - t[:, -1]
    return t.astype(dtype), deltas.astype(dtype)


def composite(sigma, deltas):
    """Compositing weights ``(R, N)`` and transmittances ``(R, N + 1)``."""
    tau = sigma * deltas
    T = np.empty((tau.shape[0], tau.shape[1] + 1), dtype=tau.dtype)
    T[:, 0] = 1.0
    np.cumsum(tau, axis=1, out=T[:, 1:])
    np.exp(-T[:, 1:], out=T[:, 1:])
    w = T[:, :-1] * -np.expm1(-tau)
    return w, T


def composite_backward(deltas, w, T, sigma, d_w):
    """Pull ``dL/dw`` back to ``dL/dsigma`` (depths are not differentiated)."""
    tau = sigma * deltas
    cw = d_w * w
    # suffix sum over i > k of c_i w_i
    later = np.cumsum(cw[:, ::-1], axis=1)[:, ::-1] - cw
    d_tau = d_w * T[:, :-1] * np.exp(-tau) - later
    return d_tau * deltas


def _check_finite(sigma, spec, n_samples):
    bad = ~np.isfinite(sigma) | ~np.all(np.isfinite(spec), axis=-1)
    if np.any(bad):
        flat = int(np.flatnonzero(bad)[0])
        ray, sample = divmod(flat, n_samples)
        raise RenderError(f"field returned non-finite output at ray {ray}, sample {sample}")


def render_rays(field, origins, dirs, quad: QuadratureSpec, rng=None, dtype=None):
    """Render ``R`` rays to per-bin spectra.

    Returns ``(RenderOutput, cache)``; the cache feeds :func:`render_rays_backward`.
    """
    dtype = dtype or getattr(field, "dtype", np.float64)
    origins = np.asarray(origins, dtype=dtype).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=dtype).reshape(-1, 3)
    R, N = len(origins), quad.samples
    t, deltas = sample_depths(quad, R, rng, dtype)
    x = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    d_rep = np.broadcast_to(dirs[:, None, :], x.shape)
    sigma, spec, fcache = field.query(x.reshape(-1, 3), d_rep.reshape(-1, 3))
    _check_finite(sigma, spec, N)
    sigma = sigma.reshape(R, N)
    spec = spec.reshape(R, N, -1)
    w, T = composite(sigma, deltas)
    spectrum = np.einsum("rn,rnb->rb", w, spec)
    out = RenderOutput(spectrum, w, T[:, -1], T, t)
    cache = dict(fcache=fcache, sigma=sigma, spec=spec, deltas=deltas, w=w, T=T, t=t)
    return out, cache


def render_rays_backward(field, cache, d_spectrum, input_grads: bool = True):
    """Gradients for ``dL/dspectrum (R, B)``.

    Returns ``(dL/dtheta, dL/dorigins, dL/ddirs)``; the ray gradients are
    ``None`` when ``input_grads`` is false.
    """
    spec, w = cache["spec"], cache["w"]
    d_spectrum = np.asarray(d_spectrum, dtype=w.dtype)
    if d_spectrum.shape != (spec.shape[0], spec.shape[2]):
        raise RenderError(f"upstream shape {d_spectrum.shape} does not match render cache")
    d_spec = w[..., None] * d_spectrum[:, None, :]
    d_w = np.einsum("rnb,rb->rn", spec, d_spectrum)
    d_sigma = composite_backward(cache["deltas"], w, cache["T"], cache["sigma"], d_w)
    g_theta, g_x, g_dir = field.query_backward(
        cache["fcache"], d_sigma.ravel(), d_spec.reshape(-1, spec.shape[2]), input_grads
    )
    if not input_grads:
        return g_theta, None, None
    R, N = w.shape
    g_x = g_x.reshape(R, N, 3)
    g_origins = g_x.sum(axis=1)
    g_dirs = np.einsum("rn,rnc->rc", cache["t"], g_x) + g_dir.reshape(R, N, 3).sum(axis=1)
    return g_theta, g_origins, g_dirs


# --- single-ray interface --------------------------------------------------------


class RayRender(NamedTuple):
    spectrum: np.ndarray  # (B,)
    intensity: np.ndarray  # (K,)
    weights: np.ndarray  # (N,)
    residual_transmittance: float


def render_ray(field, ray: Ray, quad: QuadratureSpec, d: int, M: ResponseMatrix, rng=None):
    """Render one ray and project it through view ``d``'s channels of ``M``.

    ``ray.t_near``/``ray.t_far`` override the quadrature bounds.  Returns
    ``(RayRender, cache)``.
    """
    quad = quad.replace(t_near=ray.t_near, t_far=ray.t_far)
    out, cache = render_rays(field, ray.origin[None], ray.direction[None], quad, rng)
    weights = M.weights[d]
    cache["response"] = weights
    res = RayRender(
        out.spectrum[0],
        out.spectrum[0] @ weights.T,
        out.weights[0],
        float(out.residual_transmittance[0]),
    )
    return res, cache


def render_ray_backward(field, cache, upstream):
    """``dL/dintensity (K,)`` -> ``(dL/dtheta, dL/dorigin, dL/ddirection)``."""
    d_spectrum = (np.asarray(upstream, dtype=np.float64) @ cache["response"])[None]
    g_theta, g_o, g_d = render_rays_backward(field, cache, d_spectrum)
    return g_theta, g_o[0], g_d[0]


# --- whole images ------------------------------------------------------------------


class ViewRender(NamedTuple):
    spectra: np.ndarray  # (H, W, B)
    residual_transmittance: np.ndarray  # (H, W)
    weight_sum: np.ndarray  # (H, W)


def render_view(field, cam: CameraParams, view: int, quad: QuadratureSpec, seed: int = 0, chunk: int = 1024):
    """Per-pixel spectra of a whole view, rendered in fixed-order chunks."""
    rng = np.random.default_rng(seed)
    u, v = pixel_centers(cam.width, cam.height)
    origins, dirs = generate_rays(cam, view, u, v)
    spectra, resid, wsum = [], [], []
    for s in range(0, len(u), chunk):
        out, _ = render_rays(field, origins[s : s + chunk], dirs[s : s + chunk], quad, rng)
        spectra.append(out.spectrum)
        resid.append(out.residual_transmittance)
        wsum.append(out.weights.sum(axis=1))
    H, W = cam.height, cam.width
    return ViewRender(
        np.concatenate(spectra).reshape(H, W, -1),
        np.concatenate(resid).reshape(H, W),
        np.concatenate(wsum).reshape(H, W),
    )


def render_image(
    field,
    cam: CameraParams,
    view: int,
    quad: QuadratureSpec,
    M: ResponseMatrix,
    response_override=None,
    seed: int = 0,
    filter_index: int | None = None,
):
    """``(H, W, K)`` image of ``view``.

    By default the view is seen through its own filter (row ``view`` of
    ``M``); ``filter_index`` picks another filter and ``response_override``
    (a ``(K, B)`` array, e.g. the bare sensor) replaces the response entirely.
    """
    spectra = render_view(field, cam, view, quad, seed).spectra
    if response_override is not None:
        weights = np.asarray(response_override)
    else:
        weights = M.weights[view if filter_index is None else filter_index]
    return spectra @ weights.T
