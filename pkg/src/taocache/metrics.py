"""Fidelity metrics for comparing accelerated outputs against
full-trajectory references: MSE, PSNR, single-scale SSIM, and per-step
relative prediction divergence between two traces.

Latents are not pixel data, so PSNR needs an explicit dynamic range; use
peak_range() on the reference and report the range alongside the value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import Latent
from .errors import ParameterError, ShapeMismatchError
from .traceio import Trace

PSNR_CAP_DB = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def mse(a: Latent, b: Latent) -> float:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"shape {a.shape} vs {b.shape}")
    return float(np.mean((a.data - b.data) ** 2))


def peak_range(ref: Latent) -> float:
    """Dynamic range of the reference (max - min), floored to stay positive."""
    return max(float(ref.data.max() - ref.data.min()), 1e-12)


def psnr(a: Latent, b: Latent, peak: float) -> float:
    """10 log10(peak^2 / MSE); identical inputs return the 99 dB cap so
    downstream CSV/JSON stay numeric."""
    if peak <= 0.0:
        raise ParameterError(f"peak must be > 0, got {peak}")
    err = mse(a, b)
    if err == 0.0:
        return PSNR_CAP_DB
    return 10.0 * math.log10(peak * peak / err)


def _gaussian_kernel() -> np.ndarray:
    half = SSIM_WINDOW // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(x**2) / (2.0 * SSIM_SIGMA**2))
    g /= g.sum()
    return np.outer(g, g)


_KERNEL = _gaussian_kernel()


def _windowed_mean(img: np.ndarray) -> np.ndarray:
    views = np.lib.stride_tricks.sliding_window_view(img, (SSIM_WINDOW, SSIM_WINDOW))
    return np.tensordot(views, _KERNEL, axes=((2, 3), (0, 1)))


def _ssim_plane(a: np.ndarray, b: np.ndarray, peak: float) -> float:
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    mu_a = _windowed_mean(a)
    mu_b = _windowed_mean(b)
    var_a = _windowed_mean(a * a) - mu_a * mu_a
    var_b = _windowed_mean(b * b) - mu_b * mu_b
    cov = _windowed_mean(a * b) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(a: Latent, b: Latent, peak: float) -> float:
    """Single-scale SSIM with an 11x11 Gaussian window (std 1.5), averaged
    over valid window positions; 3-D inputs are treated as channel stacks
    and averaged across channels."""
    if a.shape != b.shape:
        raise ShapeMismatchError(f"shape {a.shape} vs {b.shape}")
    if peak <= 0.0:
        raise ParameterError(f"peak must be > 0, got {peak}")
    if len(a.shape) == 2:
        planes = [(a.as_array(), b.as_array())]
    elif len(a.shape) == 3:
        planes = list(zip(a.as_array(), b.as_array()))
    else:
        raise ParameterError(f"ssim needs 2-D fields (or channel stacks), got shape {a.shape}")
    h, w = planes[0][0].shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ParameterError(f"ssim needs sides >= {SSIM_WINDOW}, got {h}x{w}")
    return float(np.mean([_ssim_plane(pa, pb, peak) for pa, pb in planes]))


def eps_divergence(full: Trace, cached: Trace, stream: int = 4) -> np.ndarray:
    """Per-step relative L2 error of the cached trace's predictions against
    the full trace's, indexed t-1 for t in [1, T]; NaN where a step is
    missing from either trace (or the reference norm is zero)."""
    if full.T != cached.T or full.shape != cached.shape:
        raise ShapeMismatchError(
            f"traces disagree: T {full.T} vs {cached.T}, shape {full.shape} vs {cached.shape}"
        )
    out = np.full(full.T, np.nan)
    for t in range(1, full.T + 1):
        a = full.records.get((t, stream))
        b = cached.records.get((t, stream))
        if a is None or b is None:
            continue
        ref = float(np.linalg.norm(a))
        if ref == 0.0:
            continue
        out[t - 1] = float(np.linalg.norm(a - b)) / ref
    return out


@dataclass(frozen=True)
class MetricReport:
    """Aggregate fidelity of one candidate output against its reference."""

    mse: float
    psnr_db: float
    ssim: float
    peak: float
    eps_err: np.ndarray | None = None

    def to_dict(self) -> dict:
        d = {
            "mse": self.mse,
            "psnr_db": self.psnr_db,
            "ssim": self.ssim,
            "peak": self.peak,
        }
        if self.eps_err is not None:
            err = self.eps_err[~np.isnan(self.eps_err)]
            d["eps_err_mean"] = float(err.mean()) if err.size else None
            d["eps_err_max"] = float(err.max()) if err.size else None
        return d


def compare(
    ref: Latent,
    cand: Latent,
    peak: float | None = None,
    ref_trace: Trace | None = None,
    cand_trace: Trace | None = None,
    stream: int = 4,
) -> MetricReport:
    """Convenience bundle: MSE/PSNR/SSIM (+ divergence when traces given)."""
    pk = peak_range(ref) if peak is None else peak
    err = None
    if ref_trace is not None and cand_trace is not None:
        err = eps_divergence(ref_trace, cand_trace, stream)
    return MetricReport(
        mse=mse(ref, cand),
        psnr_db=psnr(ref, cand, pk),
        ssim=ssim(ref, cand, pk),
        peak=pk,
        eps_err=err,
    )
