"""Colour-statistics loss, fidelity loss and their weighted sum.

Each loss returns ``(value, gradient w.r.t. the predicted pixels)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

STD_EPS = 1e-8


class LossError(ValueError):
    pass


class ChannelStats(NamedTuple):
    mean: np.ndarray  # (K,)
    std: np.ndarray  # (K,) population convention


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.5  # fidelity
    beta: float = 0.5  # colour statistics

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise LossError("loss weights must be non-negative")


def channel_stats(pixels) -> ChannelStats:
    """Per-channel population mean and standard deviation of ``(M, K)`` pixels."""
    pixels = np.asarray(pixels, dtype=np.float64)
    pixels = pixels.reshape(-1, pixels.shape[-1])
    if pixels.shape[0] < 1:
        raise LossError("channel statistics need at least one pixel")
    mean = pixels.mean(axis=0)
    std = np.sqrt(np.mean((pixels - mean) ** 2, axis=0))
    return ChannelStats(mean, std)


def color_distance(generated: ChannelStats, measured: Sequence[ChannelStats]) -> float:
    """``1/D sum_d [ |mu_hat - mu_d|^2 + |std_hat - std_d|^2 ]`` from statistics alone."""
    if not measured:
        raise LossError("need at least one measured view")
    total = 0.0
    for m in measured:
        if m.mean.shape != generated.mean.shape:
            raise LossError("channel count mismatch between generated and measured statistics")
        total += np.sum((generated.mean - m.mean) ** 2) + np.sum((generated.std - m.std) ** 2)
    return float(total / len(measured))


def color_loss(generated, measured: Sequence[ChannelStats]):
    """Colour-statistics loss and its gradient w.r.t. the generated pixels.

    ``generated`` is either ``(M, K)``, one image whose statistics are pulled
    towards every measured view, or ``(M, D, K)``, where ``generated[:, d]``
    is compared with ``measured[d]`` only.  Both scale by ``1/D``.
    """
    g = np.asarray(generated)
    D = len(measured)
    if D == 0:
        raise LossError("need at least one measured view")
    paired = g.ndim == 3
    if paired and g.shape[1] != D:
        raise LossError(f"generated has {g.shape[1]} views, measured has {D}")
    K = g.shape[-1]
    M = g.shape[0]
    if M < 1:
        raise LossError("generated image is empty")
    mu_t = np.stack([m.mean for m in measured])
    sd_t = np.stack([m.std for m in measured])
    if mu_t.shape[1] != K:
        raise LossError(f"generated has {K} channels, measured has {mu_t.shape[1]}")
    g64 = g.astype(np.float64, copy=False)
    mean = g64.mean(axis=0)  # (K,) or (D, K)
    centered = g64 - mean
    var = np.mean(centered**2, axis=0)
    std = np.sqrt(var)
    if paired:
        d_mean = 2.0 * (mean - mu_t) / D
        d_std = 2.0 * (std - sd_t) / D
        value = float(np.sum((mean - mu_t) ** 2) + np.sum((std - sd_t) ** 2)) / D
    else:
        d_mean = 2.0 * (mean - mu_t).sum(axis=0) / D
        d_std = 2.0 * (std - sd_t).sum(axis=0) / D
        value = float(np.sum((mean - mu_t) ** 2) + np.sum((std - sd_t) ** 2)) / D
    grad = d_mean / M + d_std * centered / (M * np.sqrt(var + STD_EPS))
    return value, grad.astype(g.dtype, copy=False)


def fidelity_loss(predicted, measured):
    """Mean over rays of the per-ray squared error summed over channels."""
    p = np.asarray(predicted)
    m = np.asarray(measured)
    if p.shape != m.shape:
        raise LossError(f"shape mismatch: predicted {p.shape}, measured {m.shape}")
    if p.ndim == 1:
        p, m = p[None], m[None]
    r = p.astype(np.float64) - m
    n = r.shape[0]
    value = float(np.sum(r * r) / n)
    return value, (2.0 * r / n).astype(p.dtype, copy=False).reshape(np.shape(predicted))


def total_loss(fid: float, col: float, w: LossWeights = LossWeights()) -> float:
    return w.alpha * fid + w.beta * col


def psnr(predicted, target, peak: float) -> float:
    mse = float(np.mean((np.asarray(predicted, np.float64) - target) ** 2))
    if mse == 0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)
