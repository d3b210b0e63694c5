"""Image-quality metrics (MSE, PSNR, SSIM) and normalized 2D autocorrelation."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .fieldstore import FrameStack, ScalarField

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_SIGMA = 1.5
SSIM_WIN = 11


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, ScalarField) else np.asarray(x, dtype=np.float64)


def _pair(a, b):
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def default_range(a, b=None) -> float:
    """Declared value-range span of ``a`` (then ``b``), else 1.0."""
    for x in (a, b):
        if isinstance(x, ScalarField) and x.value_range is not None:
            return x.span()
    return 1.0


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, data_range: float | None = None) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs."""
    if data_range is None:
        data_range = default_range(a, b)
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    err = mse(a, b)
    if err == 0.0:
        return float("inf")
    return float(10.0 * np.log10(data_range**2 / err))


def ssim_map(a, b, data_range: float | None = None) -> np.ndarray:
    """Local SSIM on an 11x11 Gaussian window (sigma 1.5), borders included."""
    if data_range is None:
        data_range = default_range(a, b)
    a, b = _pair(a, b)
    if min(a.shape) < SSIM_WIN:
        raise ValueError(f"image smaller than the {SSIM_WIN}x{SSIM_WIN} SSIM window")

    def filt(x):
        # truncate chosen so the kernel radius is exactly 5 px
        return ndimage.gaussian_filter(x, SSIM_SIGMA, truncate=3.5)

    ma, mb = filt(a), filt(b)
    vaa = filt(a * a) - ma * ma
    vbb = filt(b * b) - mb * mb
    vab = filt(a * b) - ma * mb
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    num = (2 * ma * mb + c1) * (2 * vab + c2)
    den = (ma * ma + mb * mb + c1) * (vaa + vbb + c2)
    return num / den


def ssim(a, b, data_range: float | None = None) -> float:
    """Mean local SSIM over positions where the window fits inside the image."""
    s = ssim_map(a, b, data_range)
    pad = (SSIM_WIN - 1) // 2
    return float(s[pad:-pad, pad:-pad].mean())


def autocorr2d(patch) -> np.ndarray:
    """Mean-subtracted autocorrelation, normalized per lag by overlap count, unit at zero lag.

    Output has shape ``(2H-1, 2W-1)`` with zero lag at the centre; entry
    ``[H-1+dy, W-1+dx]`` correlates ``x[i, j]`` with ``x[i+dy, j+dx]``.
    """
    x = _arr(patch)
    x = x - x.mean()
    if not np.any(x):
        raise ValueError("autocorrelation undefined for a zero-variance patch")
    H, W = x.shape
    shape = (2 * H - 1, 2 * W - 1)
    f = np.fft.rfft2(x, s=shape)
    raw = np.fft.irfft2(f * np.conj(f), s=shape)
    ones = np.fft.rfft2(np.ones_like(x), s=shape)
    count = np.rint(np.fft.irfft2(ones * np.conj(ones), s=shape))
    r = np.fft.fftshift(raw / count)
    r /= r[H - 1, W - 1]
    # exact even symmetry under lag negation
    r = 0.5 * (r + r[::-1, ::-1])
    r[H - 1, W - 1] = 1.0
    return r


def stack_metrics(ref: FrameStack, test: FrameStack, data_range: float | None = None) -> dict:
    """Per-frame PSNR/SSIM/MSE on every channel plus both stack-level PSNR conventions."""
    if ref.data.shape != test.data.shape:
        raise ValueError(f"stack shapes differ: {ref.data.shape} vs {test.data.shape}")
    if data_range is None:
        data_range = ref.value_range[1] - ref.value_range[0] if ref.value_range is not None else 1.0
    per_psnr, per_ssim, per_mse = [], [], []
    for t in range(ref.n_frames):
        p, s, m = [], [], []
        for ch in range(ref.channels):
            a, b = ref.data[t, ..., ch], test.data[t, ..., ch]
            p.append(psnr(a, b, data_range))
            s.append(ssim(a, b, data_range))
            m.append(mse(a, b))
        per_psnr.append(float(np.mean(p)))
        per_ssim.append(float(np.mean(s)))
        per_mse.append(float(np.mean(m)))
    total_mse = float(np.mean((ref.data - test.data) ** 2))
    return {
        "data_range": float(data_range),
        "psnr_per_frame": per_psnr,
        "ssim_per_frame": per_ssim,
        "mse_per_frame": per_mse,
        "psnr_mean_of_frames": float(np.mean(per_psnr)),
        "psnr_concatenated": float("inf") if total_mse == 0 else float(10 * np.log10(data_range**2 / total_mse)),
        "ssim_mean": float(np.mean(per_ssim)),
        "mse": total_mse,
    }
