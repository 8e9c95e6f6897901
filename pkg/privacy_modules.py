"""
Stochastic privacy modules inserted between feature blocks of a victim model.

PRECODE is a dense variational bottleneck over the flattened feature vector. The
convolutional variational bottleneck (CVB) keeps the spatial layout and encodes the
mean and log-variance with two convolutions, then decodes with a 1x1 convolution.
"""

import logging
from dataclasses import dataclass
from typing import Literal, NamedTuple, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, field_validator

from diffcore import RandomStream, ensure_finite
from errors import InvalidInput, InvalidSpec

logger = logging.getLogger("privacy_modules")
logger.setLevel(logging.DEBUG)

DEFAULT_BETA = {"precode": 0.01, "cvb": 0.1}


class PrivacyModuleSpec(BaseModel):
    """Where and how a privacy module is inserted"""

    model_config = ConfigDict(frozen=True)

    kind: Literal["precode", "cvb"] = Field(..., description="Dense (precode) or convolutional (cvb) bottleneck")
    position: int = Field(1, ge=1, description="Insertion point P, after feature block P")
    bottleneck_size: Optional[int] = Field(None, ge=1, description="PRECODE latent size K; half the preceding channel count when unset")
    kernel_size: int = Field(5, ge=1, description="CVB encoder kernel k_E")
    bottleneck_scale: float = Field(0.5, gt=0, description="CVB channel scale s_E")
    beta: Optional[float] = Field(None, ge=0, description="KL weight; 0.01 for precode, 0.1 for cvb when unset")

    @field_validator("kernel_size")
    @classmethod
    def _odd_kernel(cls, value: int) -> int:
        if value % 2 == 0:
            raise ValueError("kernel_size must be odd")
        return value

    @property
    def loss_weight(self) -> float:
        return DEFAULT_BETA[self.kind] if self.beta is None else self.beta

    @property
    def layer_name(self) -> str:
        return f"{'vb' if self.kind == 'precode' else 'cvb'}{self.position}"

    def latent_channels(self, channels: int) -> int:
        """CVB bottleneck channels K_E = max(1, round(s_E * c))"""
        return max(1, int(round(self.bottleneck_scale * channels)))

    def latent_size(self, channels: int) -> int:
        return self.bottleneck_size if self.bottleneck_size is not None else max(1, channels // 2)

    def label(self) -> str:
        if self.kind == "precode":
            size = "auto" if self.bottleneck_size is None else self.bottleneck_size
            return f"PRECODE(P={self.position},K={size},b={self.loss_weight:g})"
        return f"CVB(P={self.position},k={self.kernel_size},s={self.bottleneck_scale:g},b={self.loss_weight:g})"


@dataclass(frozen=True)
class LatentStats:
    mu: torch.Tensor
    logvar: torch.Tensor

    def __post_init__(self):
        if self.mu.shape != self.logvar.shape:
            raise InvalidInput(f"mu {tuple(self.mu.shape)} and logvar {tuple(self.logvar.shape)} differ in shape")

    @property
    def sigma(self) -> torch.Tensor:
        return torch.exp(0.5 * self.logvar)


class VBParams(NamedTuple):
    encoder: torch.Tensor  # (2K, n)
    decoder: torch.Tensor  # (n, K)


class CVBParams(NamedTuple):
    enc_mu: torch.Tensor  # (K_E, c, k, k)
    enc_logvar: torch.Tensor  # (K_E, c, k, k)
    decoder: torch.Tensor  # (c, K_E, 1, 1)


def reparameterize(stats: LatentStats, eps: torch.Tensor) -> torch.Tensor:
    return stats.mu + stats.sigma * eps


def _noise(shape, dtype, rng: Optional[RandomStream], eps: Optional[torch.Tensor]) -> torch.Tensor:
    if eps is not None:
        if tuple(eps.shape) != tuple(shape):
            raise InvalidInput(f"eps shape {tuple(eps.shape)} does not match latent {tuple(shape)}")
        return eps.to(dtype)
    if rng is None:
        raise InvalidInput("Privacy modules need a random stream or an explicit eps")
    return rng.normal(shape, dtype=dtype)


def vb_forward(
    z: torch.Tensor,
    params: VBParams,
    rng: Optional[RandomStream] = None,
    eps: Optional[torch.Tensor] = None,
) -> Tuple[torch.Tensor, LatentStats]:
    """Dense variational bottleneck: z -> (mu, logvar) -> b -> z_hat.

    z is (n,) or (N, n). Returns z_hat with z's shape and batched stats (N, K).
    """
    unbatched = z.dim() == 1
    flat = z.unsqueeze(0) if unbatched else z
    n = params.encoder.shape[1]
    if flat.dim() != 2 or flat.shape[1] != n:
        raise InvalidInput(f"Latent of shape {tuple(z.shape)} does not fit an encoder over {n} features")
    mu, logvar = F.linear(flat, params.encoder).chunk(2, dim=1)
    stats = LatentStats(mu, logvar)
    b = reparameterize(stats, _noise(mu.shape, mu.dtype, rng, eps))
    z_hat = F.linear(b, params.decoder)
    ensure_finite(z_hat, "PRECODE output")
    return (z_hat[0] if unbatched else z_hat), stats


def cvb_forward(
    z: torch.Tensor,
    params: CVBParams,
    rng: Optional[RandomStream] = None,
    eps: Optional[torch.Tensor] = None,
) -> Tuple[torch.Tensor, LatentStats]:
    """Convolutional variational bottleneck over a (C, H, W) or (N, C, H, W) feature map"""
    unbatched = z.dim() == 3
    fmap = z.unsqueeze(0) if unbatched else z
    channels, kernel = params.enc_mu.shape[1], params.enc_mu.shape[-1]
    if fmap.dim() != 4 or fmap.shape[1] != channels:
        raise InvalidInput(f"Feature map {tuple(z.shape)} does not have {channels} channels")
    if kernel > min(fmap.shape[-2:]):
        raise InvalidSpec(f"Kernel {kernel} exceeds feature map {tuple(fmap.shape[-2:])}")
    mu = F.conv2d(fmap, params.enc_mu, padding=kernel // 2)
    logvar = F.conv2d(fmap, params.enc_logvar, padding=kernel // 2)
    stats = LatentStats(mu, logvar)
    b = reparameterize(stats, _noise(mu.shape, mu.dtype, rng, eps))
    z_hat = F.conv2d(b, params.decoder)
    ensure_finite(z_hat, "CVB output")
    return (z_hat[0] if unbatched else z_hat), stats


def kl_loss(stats: LatentStats) -> torch.Tensor:
    """KL(N(mu, sigma^2) || N(0, 1)) summed over latent entries, averaged over the batch"""
    per_entry = 0.5 * (stats.mu.pow(2) + torch.exp(stats.logvar) - stats.logvar - 1.0)
    return per_entry.reshape(per_entry.shape[0], -1).sum(dim=1).mean()


def extended_loss(task_loss: torch.Tensor, kl: torch.Tensor, beta: float) -> torch.Tensor:
    if beta < 0:
        raise InvalidInput(f"beta must be non-negative, got {beta}")
    return task_loss + beta * kl


class PrecodeBottleneck(nn.Module):
    def __init__(self, features: int, latent: int):
        super().__init__()
        self.features = features
        self.latent = latent
        self.encoder = nn.Linear(features, 2 * latent, bias=False)
        self.decoder = nn.Linear(latent, features, bias=False)

    def forward(self, z: torch.Tensor, rng: Optional[RandomStream]) -> Tuple[torch.Tensor, LatentStats]:
        z_hat, stats = vb_forward(z.flatten(1), VBParams(self.encoder.weight, self.decoder.weight), rng)
        return z_hat.view_as(z), stats


class ConvBottleneck(nn.Module):
    def __init__(self, channels: int, latent_channels: int, kernel_size: int):
        super().__init__()
        padding = kernel_size // 2
        self.enc_mu = nn.Conv2d(channels, latent_channels, kernel_size, padding=padding, bias=False)
        self.enc_logvar = nn.Conv2d(channels, latent_channels, kernel_size, padding=padding, bias=False)
        self.decoder = nn.Conv2d(latent_channels, channels, 1, bias=False)

    def forward(self, z: torch.Tensor, rng: Optional[RandomStream]) -> Tuple[torch.Tensor, LatentStats]:
        return cvb_forward(z, CVBParams(self.enc_mu.weight, self.enc_logvar.weight, self.decoder.weight), rng)


def privacy_layout(spec: PrivacyModuleSpec, feature_shape: Tuple[int, ...]):
    """(sub-module, parameter shape) pairs of a privacy module at a given feature shape.

    Raises InvalidSpec when the module does not fit the feature map.
    """
    if spec.kind == "precode":
        features = 1
        for size in feature_shape:
            features *= size
        latent = spec.latent_size(feature_shape[0])
        return [("encoder", (2 * latent, features)), ("decoder", (features, latent))]
    if len(feature_shape) != 3:
        raise InvalidSpec(f"CVB at P={spec.position} needs a spatial feature map, got shape {feature_shape}")
    channels, height, width = feature_shape
    if spec.kernel_size > min(height, width):
        raise InvalidSpec(
            f"CVB kernel {spec.kernel_size} at P={spec.position} exceeds the {height}x{width} feature map"
        )
    latent = spec.latent_channels(channels)
    kernel = spec.kernel_size
    return [
        ("enc_mu", (latent, channels, kernel, kernel)),
        ("enc_logvar", (latent, channels, kernel, kernel)),
        ("decoder", (channels, latent, 1, 1)),
    ]


def build_privacy_module(spec: PrivacyModuleSpec, feature_shape: Tuple[int, ...]) -> nn.Module:
    layout = dict(privacy_layout(spec, feature_shape))
    if spec.kind == "precode":
        latent, features = layout["encoder"]
        module = PrecodeBottleneck(features, latent // 2)
    else:
        latent, channels = layout["enc_mu"][:2]
        module = ConvBottleneck(channels, latent, spec.kernel_size)
    logger.debug(f"🔒 {spec.label()} over feature shape {feature_shape}")
    return module
