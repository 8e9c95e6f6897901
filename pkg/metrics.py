"""
Reconstruction-quality metrics (MSE, PSNR, SSIM) and the attack success ratio.

Images are (C, H, W) tensors in [0, 1]. SSIM follows the Gaussian-window formulation
(11x11 window, sigma 1.5, K1 0.01, K2 0.03) evaluated on valid window positions only
and averaged over channels.
"""

import logging
import math
from typing import List, Sequence

import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field

from errors import InvalidInput

logger = logging.getLogger("metrics")
logger.setLevel(logging.DEBUG)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SUCCESS_THRESHOLD = 0.5


def _pair(a: torch.Tensor, b: torch.Tensor):
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    if a.shape != b.shape:
        raise InvalidInput(f"Image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return a, b


def mse(a: torch.Tensor, b: torch.Tensor) -> float:
    a, b = _pair(a, b)
    return float((a - b).pow(2).mean())


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """Peak signal-to-noise ratio in dB for unit data range; inf for identical images"""
    error = mse(a, b)
    if error == 0.0:
        return math.inf
    return -10.0 * math.log10(error)


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    kernel = torch.exp(-(coords**2) / (2 * sigma**2))
    kernel = kernel / kernel.sum()
    return torch.outer(kernel, kernel)


def ssim(a: torch.Tensor, b: torch.Tensor) -> float:
    a, b = _pair(a, b)
    if a.dim() == 2:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    if a.dim() != 3:
        raise InvalidInput(f"SSIM expects (C, H, W) images, got shape {tuple(a.shape)}")
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise InvalidInput(f"Image {tuple(a.shape[-2:])} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    channels = a.shape[0]
    window = _gaussian_window().expand(channels, 1, SSIM_WINDOW, SSIM_WINDOW)
    x, y = a.unsqueeze(0), b.unsqueeze(0)

    def blur(img: torch.Tensor) -> torch.Tensor:
        return F.conv2d(img, window, groups=channels)

    mu_x, mu_y = blur(x), blur(y)
    var_x = blur(x * x) - mu_x.pow(2)
    var_y = blur(y * y) - mu_y.pow(2)
    cov = blur(x * y) - mu_x * mu_y
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / ((mu_x.pow(2) + mu_y.pow(2) + c1) * (var_x + var_y + c2))
    return float(ssim_map.mean(dim=(0, 2, 3)).mean())


def asr(ssim_values: Sequence[float], threshold: float = SUCCESS_THRESHOLD) -> float:
    """Percentage of victims with SSIM >= threshold"""
    values = list(ssim_values)
    if not values:
        raise InvalidInput("asr needs at least one SSIM value")
    return 100.0 * sum(1 for value in values if value >= threshold) / len(values)


class ImageMetrics(BaseModel):
    model_config = ConfigDict(frozen=True, ser_json_inf_nan="constants")

    mse: float
    psnr: float
    ssim: float = Field(..., ge=-1.0, le=1.0)


def image_metrics(reconstruction: torch.Tensor, original: torch.Tensor) -> ImageMetrics:
    """Metrics of a reconstruction against its original, both clamped to [0, 1] first"""
    rec = torch.as_tensor(reconstruction, dtype=torch.float64).clamp(0.0, 1.0)
    ref = torch.as_tensor(original, dtype=torch.float64).clamp(0.0, 1.0)
    return ImageMetrics(mse=mse(rec, ref), psnr=psnr(rec, ref), ssim=ssim(rec, ref))


def _mean_std(values: List[float]):
    """Population mean and std over every value; an infinite value makes the mean inf and the std nan"""
    tensor = torch.tensor(values, dtype=torch.float64)
    mean = float(tensor.mean())
    if not math.isfinite(mean):
        return mean, math.nan
    std = float(tensor.std(unbiased=False)) if len(values) > 1 else 0.0
    return mean, std


class MetricReport(BaseModel):
    """Per-victim metrics with their aggregates over the victim set"""

    model_config = ConfigDict(frozen=True, ser_json_inf_nan="constants")

    mse: List[float]
    psnr: List[float]
    ssim: List[float]
    mse_mean: float
    mse_std: float
    psnr_mean: float
    psnr_std: float
    ssim_mean: float
    ssim_std: float
    asr: float = Field(..., ge=0.0, le=100.0)

    @property
    def victims(self) -> int:
        return len(self.ssim)

    @classmethod
    def from_metrics(cls, per_victim: Sequence[ImageMetrics]) -> "MetricReport":
        if not per_victim:
            raise InvalidInput("A metric report needs at least one victim")
        mses = [m.mse for m in per_victim]
        psnrs = [m.psnr for m in per_victim]
        ssims = [m.ssim for m in per_victim]
        mse_mean, mse_std = _mean_std(mses)
        psnr_mean, psnr_std = _mean_std(psnrs)
        ssim_mean, ssim_std = _mean_std(ssims)
        return cls(
            mse=mses,
            psnr=psnrs,
            ssim=ssims,
            mse_mean=mse_mean,
            mse_std=mse_std,
            psnr_mean=psnr_mean,
            psnr_std=psnr_std,
            ssim_mean=ssim_mean,
            ssim_std=ssim_std,
            asr=asr(ssims),
        )
