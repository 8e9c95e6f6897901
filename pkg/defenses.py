"""
Gradient-perturbation defenses applied to client gradients before they are exchanged.

- noisy gradients: per-sample clipping to a global L2 norm C plus Gaussian noise of
  standard deviation C*sigma on the batch sum
- gradient compression: magnitude pruning of each parameter gradient
- PRECODE / CVB live in the model itself, so their defense kind leaves gradients as is
"""

import logging
from typing import Literal, Sequence

import torch
from pydantic import BaseModel, ConfigDict, Field

from diffcore import GradientEntry, LayerGradients, RandomStream
from errors import InvalidInput

logger = logging.getLogger("defenses")
logger.setLevel(logging.DEBUG)


class DefenseSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["none", "dp", "gc", "precode", "cvb"] = Field("none", description="Defense applied by every client")
    clip_threshold: float = Field(20.0, gt=0, description="DP clipping threshold C")
    noise_multiplier: float = Field(0.1, ge=0, description="DP noise multiplier sigma")
    pruning_ratio: float = Field(0.99, ge=0, lt=1, description="GC pruning ratio p")

    @property
    def perturbs_gradients(self) -> bool:
        return self.kind in ("dp", "gc")

    def label(self) -> str:
        if self.kind == "dp":
            return f"DP(C={self.clip_threshold:g},sigma={self.noise_multiplier:g})"
        if self.kind == "gc":
            return f"GC(p={self.pruning_ratio:g})"
        return self.kind.upper()


def clip_gradients(grads: LayerGradients, clip_threshold: float) -> LayerGradients:
    """Scale grads by min(1, C / ||g||) with ||g|| the norm over all layers"""
    norm = float(grads.global_norm())
    if norm <= clip_threshold or norm == 0.0:
        return grads
    return grads.scaled(clip_threshold / norm)


def noisy_gradients(
    per_sample_grads: Sequence[LayerGradients],
    clip_threshold: float,
    noise_multiplier: float,
    rng: RandomStream,
) -> LayerGradients:
    if not per_sample_grads:
        raise InvalidInput("noisy_gradients needs at least one per-sample gradient")
    if clip_threshold <= 0 or noise_multiplier < 0:
        raise InvalidInput(f"Invalid DP parameters C={clip_threshold}, sigma={noise_multiplier}")
    batch = len(per_sample_grads)
    total = clip_gradients(per_sample_grads[0], clip_threshold)
    for grads in per_sample_grads[1:]:
        total = total + clip_gradients(grads, clip_threshold)
    std = clip_threshold * noise_multiplier
    noised = LayerGradients(
        GradientEntry(e.layer, e.kind, e.values + std * rng.normal(e.values.shape, dtype=e.values.dtype))
        for e in total
    )
    return noised.scaled(1.0 / batch)


def _prune(values: torch.Tensor, ratio: float) -> torch.Tensor:
    count = int(ratio * values.numel())
    if count == 0:
        return values.clone()
    flat = values.reshape(-1).clone()
    order = torch.argsort(flat.abs(), stable=True)
    flat[order[:count]] = 0
    return flat.view_as(values)


def compress_gradients(grads: LayerGradients, pruning_ratio: float) -> LayerGradients:
    """Zero the floor(p * n) smallest-magnitude entries of every parameter gradient"""
    if not 0 <= pruning_ratio < 1:
        raise InvalidInput(f"pruning ratio must lie in [0, 1), got {pruning_ratio}")
    return grads.map(lambda values: _prune(values, pruning_ratio))


def apply_defense(spec: DefenseSpec, per_sample_grads: Sequence[LayerGradients], rng: RandomStream) -> LayerGradients:
    """Exchanged gradient of a batch under `spec`.

    For none/precode/cvb and gc this is the batch mean (pruned for gc); dp clips and
    noises per sample.
    """
    if not per_sample_grads:
        raise InvalidInput("apply_defense needs at least one per-sample gradient")
    if spec.kind == "dp":
        return noisy_gradients(per_sample_grads, spec.clip_threshold, spec.noise_multiplier, rng)
    mean = per_sample_grads[0]
    for grads in per_sample_grads[1:]:
        mean = mean + grads
    mean = mean.scaled(1.0 / len(per_sample_grads))
    if spec.kind == "gc":
        return compress_gradients(mean, spec.pruning_ratio)
    return mean
