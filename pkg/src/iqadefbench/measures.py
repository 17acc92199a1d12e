"""Full-reference and content measures: PSNR, SSIM, SROCC, SI, colourfulness."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from scipy.stats import rankdata

from .core import Image
from .errors import ModelInputError

PSNR_CEILING = 40.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
LUMA_WEIGHTS = (0.299, 0.587, 0.114)

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T


def _same_shape(a: Image, b: Image):
    if a.shape != b.shape:
        raise ModelInputError(f"shape mismatch: {a.shape} vs {b.shape}")


def psnr(a: Image, b: Image) -> float:
    """PSNR in dB for [0, 1] pixels, clamped to 40 dB (zero MSE included)."""
    _same_shape(a, b)
    mse = float(np.mean((a.pixels - b.pixels) ** 2))
    if mse == 0.0:
        return PSNR_CEILING
    return min(PSNR_CEILING, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> torch.Tensor:
    ax = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(ax**2) / (2.0 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim_map_torch(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Local SSIM over valid 11x11 Gaussian windows, per channel. NCHW in, NCH'W' out."""
    c = a.shape[1]
    w = gaussian_window().to(a.dtype).expand(c, 1, SSIM_WINDOW, SSIM_WINDOW)
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2

    def filt(t):
        return F.conv2d(t, w, groups=c)

    mu_a, mu_b = filt(a), filt(b)
    saa = filt(a * a) - mu_a**2
    sbb = filt(b * b) - mu_b**2
    sab = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2)
    return num / den


def ssim_torch(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Differentiable mean SSIM per batch element."""
    if a.shape[-1] < SSIM_WINDOW or a.shape[-2] < SSIM_WINDOW:
        # small images: shrink to a single window covering the whole frame
        return _ssim_small(a, b)
    return ssim_map_torch(a, b).mean(dim=(1, 2, 3))


def _ssim_small(a, b):
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    dims = (2, 3)
    mu_a, mu_b = a.mean(dims), b.mean(dims)
    saa = (a * a).mean(dims) - mu_a**2
    sbb = (b * b).mean(dims) - mu_b**2
    sab = (a * b).mean(dims) - mu_a * mu_b
    v = ((2 * mu_a * mu_b + c1) * (2 * sab + c2)) / ((mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2))
    return v.mean(dim=1)


def ssim(a: Image, b: Image) -> float:
    _same_shape(a, b)
    return float(ssim_torch(a.to_tensor(), b.to_tensor())[0])


def srocc(u, v) -> float:
    """Spearman correlation: Pearson correlation of average ranks."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ValueError(f"length mismatch: {u.size} vs {v.size}")
    if u.size < 2:
        raise ValueError("need at least two observations")
    ru = rankdata(u) - (u.size + 1) / 2.0
    rv = rankdata(v) - (v.size + 1) / 2.0
    den = np.sqrt(np.sum(ru * ru) * np.sum(rv * rv))
    if den == 0.0:
        raise ValueError("undefined correlation: zero rank variance")
    return float(np.clip(np.sum(ru * rv) / den, -1.0, 1.0))


def luma(x: Image) -> np.ndarray:
    return x.pixels @ np.array(LUMA_WEIGHTS)


def sobel_magnitude(plane: np.ndarray, mode: str = "valid") -> np.ndarray:
    """Sobel gradient magnitude of a 2-D plane.

    ``valid`` drops the one-pixel border; ``same`` reflects it (used for masks).
    """
    if mode == "same":
        plane = np.pad(plane, 1, mode="reflect")
    h, w = plane.shape
    gx = np.zeros((h - 2, w - 2))
    gy = np.zeros((h - 2, w - 2))
    for i in range(3):
        for j in range(3):
            patch = plane[i:i + h - 2, j:j + w - 2]
            gx += SOBEL_X[i, j] * patch
            gy += SOBEL_Y[i, j] * patch
    return np.hypot(gx, gy)


def spatial_information(x: Image) -> float:
    return float(np.std(sobel_magnitude(luma(x))))


def colorfulness(x: Image) -> float:
    r, g, b = x.pixels[..., 0], x.pixels[..., 1], x.pixels[..., 2]
    rg = r - g
    yb = 0.5 * (r + g) - b
    spread = np.sqrt(rg.var() + yb.var())
    centre = np.sqrt(rg.mean() ** 2 + yb.mean() ** 2)
    return float(spread + 0.3 * centre)

