"""Image quality metrics and spectral band analysis."""

from __future__ import annotations

import math

import numpy as np


def psnr(a, b):
    """10*log10(1/MSE) for images in [0,1]; identical images -> +inf."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return float(10.0 * np.log10(1.0 / mse))


def gaussian_kernel(size=11, sigma=1.5):
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(r ** 2) / (2 * sigma ** 2))
    k2 = np.outer(k, k)
    return k2 / k2.sum()


def _windowed(img, kernel):
    """Weighted local sums over all valid window positions."""
    size = kernel.shape[0]
    win = np.lib.stride_tricks.sliding_window_view(img, (size, size))
    return np.tensordot(win, kernel, axes=([2, 3], [0, 1]))


def ssim(a, b, size=11, sigma=1.5, k1=0.01, k2=0.03, data_range=1.0):
    """Single-scale SSIM with a Gaussian window, valid positions only,
    averaged over channels."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.shape[0] < size or a.shape[1] < size:
        raise ValueError(f"image smaller than the {size}x{size} window")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    kernel = gaussian_kernel(size, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx = _windowed(x, kernel)
        my = _windowed(y, kernel)
        vx = _windowed(x * x, kernel) - mx * mx
        vy = _windowed(y * y, kernel) - my * my
        cxy = _windowed(x * y, kernel) - mx * my
        num = (2 * mx * my + c1) * (2 * cxy + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def band_energy_fraction(signal, spacing, cutoff):
    """Fraction of non-DC spectral energy at frequencies >= cutoff.

    signal: 1-D samples at uniform `spacing` (units per sample); cutoff in
    cycles/unit. A Hann window suppresses leakage from the finite segment.
    """
    signal = np.asarray(signal, float)
    if signal.ndim != 1 or len(signal) < 8:
        raise ValueError("need a 1-D signal of at least 8 samples")
    win = np.hanning(len(signal))
    spec = np.abs(np.fft.rfft((signal - signal.mean()) * win)) ** 2
    freqs = np.fft.rfftfreq(len(signal), d=spacing)
    total = spec[1:].sum()
    if total == 0.0:
        return 0.0
    return float(spec[1:][freqs[1:] >= cutoff].sum() / total)


def masked_scanline_band_fraction(image, mask, spacing, cutoff,
                                  min_run=64):
    """Average band_energy_fraction over horizontal scan-line runs that lie
    inside the mask; runs shorter than min_run pixels are skipped."""
    image = np.asarray(image, float)
    if image.ndim == 3:
        image = image.mean(axis=2)
    fracs = []
    for v in range(image.shape[0]):
        row = mask[v]
        if not row.any():
            continue
        # split the row into contiguous masked runs
        idx = np.nonzero(row)[0]
        breaks = np.nonzero(np.diff(idx) > 1)[0]
        for seg in np.split(idx, breaks + 1):
            if len(seg) >= min_run:
                fracs.append(band_energy_fraction(image[v, seg], spacing,
                                                  cutoff))
    if not fracs:
        raise ValueError("no masked scan-line run long enough to analyze")
    return float(np.mean(fracs))
