"""Wavelength grids, filter/sensor curves and per-(view, channel) response weights.

A pixel value is the Riemann sum ``sum_b weights[d, k, b] * spectrum[b]`` where
``weights[d, k, b] = sensor_k(lambda_b) * filter_d(lambda_b) * delta``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# Bandwidth of the visible range the system integrates over, in nm.
LAMBDA_MIN = 430.0
LAMBDA_MAX = 670.0
DEFAULT_BINS = 24

FILTER_NAMES = (
    "Lavender",
    "Orange",
    "Blue Green",
    "Red",
    "Green",
    "Blue",
    "Yellow",
    "Magenta",
    "Cyan",
)
CHANNEL_NAMES = ("r", "g", "b")


class SpectralError(ValueError):
    pass


@dataclass(frozen=True)
class WavelengthGrid:
    lambda_min: float = LAMBDA_MIN
    lambda_max: float = LAMBDA_MAX
    bins: int = DEFAULT_BINS

    def __post_init__(self):
        if not self.lambda_min < self.lambda_max:
            raise SpectralError("lambda_min must be below lambda_max")
        if self.bins < 1:
            raise SpectralError("bin count must be positive")

    @property
    def delta(self) -> float:
        return (self.lambda_max - self.lambda_min) / self.bins

    @property
    def centers(self) -> np.ndarray:
        return self.lambda_min + (np.arange(self.bins) + 0.5) * self.delta


@dataclass(frozen=True)
class SpectralCurve:
    grid: WavelengthGrid
    values: np.ndarray
    name: str = ""

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.shape != (self.grid.bins,):
            raise SpectralError(
                f"curve {self.name!r} has {values.size} values for {self.grid.bins} bins"
            )
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise SpectralError(f"curve {self.name!r} has negative or non-finite values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def resample(self, grid: WavelengthGrid) -> "SpectralCurve":
        """Linear interpolation onto another grid (flat extrapolation)."""
        vals = np.interp(grid.centers, self.grid.centers, self.values)
        return SpectralCurve(grid, vals, self.name)


@dataclass(frozen=True)
class ResponseMatrix:
    """``weights`` has shape ``(D, K, B)`` in nm (already multiplied by the bin width)."""

    grid: WavelengthGrid
    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        if w.ndim != 3 or w.shape[2] != self.grid.bins:
            raise SpectralError(f"response weights must be (D, K, {self.grid.bins})")
        if np.any(w < 0):
            raise SpectralError("response weights must be non-negative")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def views(self) -> int:
        return self.weights.shape[0]

    @property
    def channels(self) -> int:
        return self.weights.shape[1]

    def __add__(self, other: "ResponseMatrix") -> "ResponseMatrix":
        return ResponseMatrix(self.grid, self.weights + other.weights)


def build_response(filters, sensor) -> ResponseMatrix:
    """Combine ``D`` filter curves and ``K`` sensor curves into a :class:`ResponseMatrix`."""
    filters, sensor = list(filters), list(sensor)
    if not filters or not sensor:
        raise SpectralError("need at least one filter and one sensor curve")
    grid = filters[0].grid
    for c in filters + sensor:
        if c.grid != grid:
            raise SpectralError(f"curve {c.name!r} is on a different wavelength grid")
    F = np.stack([c.values for c in filters])
    S = np.stack([c.values for c in sensor])
    return ResponseMatrix(grid, F[:, None, :] * S[None, :, :] * grid.delta)


def unfiltered_response(sensor) -> np.ndarray:
    """``(K, B)`` weights of the bare sensor, i.e. a filter of constant 1."""
    sensor = list(sensor)
    return np.stack([c.values for c in sensor]) * sensor[0].grid.delta


def integrate_spectrum(spectrum, d: int, k: int, M: ResponseMatrix) -> float:
    spectrum = np.asarray(spectrum, dtype=np.float64)
    if spectrum.shape != (M.grid.bins,):
        raise SpectralError(f"spectrum has {spectrum.size} bins, response has {M.grid.bins}")
    return float(M.weights[d, k] @ spectrum)


def project(spectra, weights) -> np.ndarray:
    """Project ``(..., B)`` spectra through ``(K, B)`` weights to ``(..., K)``."""
    return np.asarray(spectra) @ np.asarray(weights).T


# --- analytic curve shapes -------------------------------------------------


def gaussian(lam, center, std):
    return np.exp(-0.5 * ((lam - center) / std) ** 2)


def sigmoid_edge(lam, edge, width):
    return 1.0 / (1.0 + np.exp(-(lam - edge) / width))


def sensor_values(lam) -> np.ndarray:
    """Default trichromatic sensitivities (r, g, b) evaluated at ``lam``."""
    return np.stack([gaussian(lam, c, 35.0) for c in (610.0, 540.0, 460.0)])


def filter_values(lam) -> np.ndarray:
    """Synthetic broadband filter bank in :data:`FILTER_NAMES` order.

    These are smooth stand-ins loosely shaped after the named gel colours, not
    measured transmissions.
    """
    g, s = gaussian, sigmoid_edge
    bank = [
        0.15 + 0.8 * g(lam, 445, 40) + 0.6 * g(lam, 660, 40),  # lavender
        0.05 + 0.9 * s(lam, 580, 12),  # orange
        0.05 + 0.85 * g(lam, 500, 40),  # blue green
        0.03 + 0.92 * s(lam, 610, 10),  # red
        0.05 + 0.8 * g(lam, 535, 35),  # green
        0.05 + 0.85 * g(lam, 455, 35),  # blue
        0.05 + 0.9 * s(lam, 515, 12),  # yellow
        0.05 + 0.85 * g(lam, 440, 35) + 0.85 * s(lam, 600, 12),  # magenta
        0.05 + 0.9 * s(-lam, -560, 15),  # cyan
    ]
    return np.clip(np.stack(bank), 0.0, 1.0)


def default_sensor(grid: WavelengthGrid | None = None) -> list[SpectralCurve]:
    grid = grid or WavelengthGrid()
    vals = sensor_values(grid.centers)
    return [SpectralCurve(grid, v, n) for v, n in zip(vals, CHANNEL_NAMES)]


def default_filters(grid: WavelengthGrid | None = None) -> list[SpectralCurve]:
    grid = grid or WavelengthGrid()
    vals = filter_values(grid.centers)
    return [SpectralCurve(grid, v, n) for v, n in zip(vals, FILTER_NAMES)]


# --- curve files -------------------------------------------------------------


def save_curves(path, curves) -> None:
    """Write curves as ``lambda_nm,<name1>,...`` CSV, one row per bin centre."""
    curves = list(curves)
    grid = curves[0].grid
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda_nm"] + [c.name for c in curves])
        for b, lam in enumerate(grid.centers):
            w.writerow([repr(float(lam))] + [repr(float(c.values[b])) for c in curves])


def load_curves(path, transmission: bool = True, lambda_range=None) -> list[SpectralCurve]:
    """Read a curve CSV written by :func:`save_curves` (or by hand).

    The grid is inferred from the bin centres, which must be increasing and
    uniformly spaced.  With ``transmission=True`` every value must lie in
    [0, 1]; sensitivities only need to be non-negative.  ``lambda_range``
    rejects rows whose wavelength falls outside ``(lo, hi)``.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0].strip() != "lambda_nm" or len(rows[0]) < 2:
        raise SpectralError(f"{path}:1: header must be 'lambda_nm,<name>,...'")
    names = [n.strip() for n in rows[0][1:]]
    lams, table = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(names) + 1:
            raise SpectralError(f"{path}:{lineno}: expected {len(names) + 1} fields, got {len(row)}")
        try:
            vals = [float(c) for c in row]
        except ValueError as exc:
            raise SpectralError(f"{path}:{lineno}: {exc}") from None
        lam, vals = vals[0], vals[1:]
        if lams and lam <= lams[-1]:
            raise SpectralError(f"{path}:{lineno}: wavelengths must increase")
        if lambda_range is not None and not lambda_range[0] <= lam <= lambda_range[1]:
            raise SpectralError(f"{path}:{lineno}: wavelength {lam} outside {lambda_range}")
        for v in vals:
            if not np.isfinite(v) or v < 0 or (transmission and v > 1):
                bound = "[0, 1]" if transmission else ">= 0"
                raise SpectralError(f"{path}:{lineno}: value {v} not in {bound}")
        lams.append(lam)
        table.append(vals)
    if not lams:
        raise SpectralError(f"{path}: no data rows")
    lams = np.array(lams)
    if len(lams) > 1:
        steps = np.diff(lams)
        if not np.allclose(steps, steps[0], rtol=1e-9, atol=1e-9):
            raise SpectralError(f"{path}: wavelengths are not uniformly spaced")
        delta = float(steps[0])
    else:
        delta = 2.0 * (lams[0] - LAMBDA_MIN)
    grid = WavelengthGrid(
        round(lams[0] - 0.5 * delta, 9), round(lams[-1] + 0.5 * delta, 9), len(lams)
    )
    table = np.array(table)
    return [SpectralCurve(grid, table[:, i], n) for i, n in enumerate(names)]
