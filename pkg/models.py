"""
Victim architectures: the three-layer CNN and the four-layer MLP, with privacy-module
insertion points and exact parameter accounting.

Layer identifiers follow the forward order: conv1..convN or fc1/bn1..fcN/bnN, the
privacy modules as vbP.encoder / vbP.decoder (PRECODE) or cvbP.enc_mu /
cvbP.enc_logvar / cvbP.decoder (CVB), and the dense output layer `classifier`.
"""

import copy
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Literal, NamedTuple, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, field_validator

from diffcore import LayerGradients, RandomStream, resolve_dtype
from errors import InvalidInput, InvalidSpec
from privacy_modules import LatentStats, PrivacyModuleSpec, build_privacy_module, privacy_layout

logger = logging.getLogger("models")
logger.setLevel(logging.DEBUG)

LAYER_PREFIX = "layers."


class ModelSpec(BaseModel):
    """Architecture description of a victim model"""

    model_config = ConfigDict(frozen=True)

    family: Literal["cnn", "mlp"] = Field("cnn", description="Convolutional or fully connected victim")
    input_shape: Tuple[int, int, int] = Field((3, 32, 32), description="Input (C, H, W)")
    num_classes: int = Field(10, ge=2)
    conv_channels: Tuple[int, ...] = Field((16, 32, 64), description="Output channels of each conv block")
    kernel_size: int = Field(5, ge=1)
    stride: int = Field(2, ge=1)
    conv_bias: bool = True
    mlp_width: int = Field(1024, ge=1)
    mlp_hidden_layers: int = Field(3, ge=1, description="Hidden dense blocks before the classifier")
    batch_norm: bool = Field(True, description="Batch normalization in the MLP hidden blocks")
    dense_bias: Optional[bool] = Field(None, description="Dense-layer biases; on for the CNN, off for the MLP when unset")
    privacy: Tuple[PrivacyModuleSpec, ...] = ()

    @field_validator("input_shape")
    @classmethod
    def _positive_shape(cls, value):
        if any(size < 1 for size in value):
            raise ValueError(f"input_shape must be positive, got {value}")
        return value

    @field_validator("conv_channels")
    @classmethod
    def _channels(cls, value):
        if not value or any(channels < 1 for channels in value):
            raise ValueError(f"conv_channels must be a non-empty list of positive sizes, got {value}")
        return value

    @property
    def uses_dense_bias(self) -> bool:
        if self.dense_bias is not None:
            return self.dense_bias
        return self.family == "cnn"

    @property
    def block_count(self) -> int:
        return len(self.conv_channels) if self.family == "cnn" else self.mlp_hidden_layers

    def label(self) -> str:
        parts = [self.family.upper()]
        parts += [module.label() for module in self.privacy]
        if self.family == "mlp" and not self.uses_dense_bias:
            parts.append("no-bias")
        return "+".join(parts)


class ParameterSlot(NamedTuple):
    layer: str
    kind: str
    shape: Tuple[int, ...]


class NetOutput(NamedTuple):
    logits: torch.Tensor
    latents: Dict[int, torch.Tensor]
    stats: List[Tuple[PrivacyModuleSpec, LatentStats]]


def insertion_points(spec: ModelSpec) -> List[Tuple[int, Tuple[int, ...]]]:
    """Ordered (position, feature shape) pairs, one per feature block"""
    if spec.family == "mlp":
        return [(position, (spec.mlp_width,)) for position in range(1, spec.mlp_hidden_layers + 1)]
    _, height, width = spec.input_shape
    points = []
    for position, channels in enumerate(spec.conv_channels, start=1):
        if spec.kernel_size > min(height, width):
            raise InvalidSpec(
                f"Kernel {spec.kernel_size} does not fit the {height}x{width} input of conv{position}"
            )
        height = (height - spec.kernel_size) // spec.stride + 1
        width = (width - spec.kernel_size) // spec.stride + 1
        points.append((position, (channels, height, width)))
    return points


def check_geometry(spec: ModelSpec) -> Dict[int, Tuple[int, ...]]:
    """Validate block arithmetic and privacy placements; returns the insertion-point shapes"""
    points = dict(insertion_points(spec))
    seen = set()
    for module in spec.privacy:
        if module.position not in points:
            raise InvalidSpec(
                f"{module.label()} references insertion point {module.position}, model has {sorted(points)}"
            )
        if module.position in seen:
            raise InvalidSpec(f"Two privacy modules at insertion point {module.position}")
        seen.add(module.position)
        privacy_layout(module, points[module.position])
    return points


def parameter_layout(spec: ModelSpec) -> List[ParameterSlot]:
    """Every parameter array the built model will hold, in forward order"""
    points = check_geometry(spec)
    by_position = {module.position: module for module in spec.privacy}
    slots: List[ParameterSlot] = []

    def add_privacy(position: int) -> None:
        module = by_position.get(position)
        if module is None:
            return
        for part, shape in privacy_layout(module, points[position]):
            slots.append(ParameterSlot(f"{module.layer_name}.{part}", "weight", shape))

    if spec.family == "cnn":
        in_channels = spec.input_shape[0]
        for position, channels in enumerate(spec.conv_channels, start=1):
            kernel = spec.kernel_size
            slots.append(ParameterSlot(f"conv{position}", "weight", (channels, in_channels, kernel, kernel)))
            if spec.conv_bias:
                slots.append(ParameterSlot(f"conv{position}", "bias", (channels,)))
            add_privacy(position)
            in_channels = channels
        last = points[len(spec.conv_channels)]
        features = last[0] * last[1] * last[2]
    else:
        features = spec.input_shape[0] * spec.input_shape[1] * spec.input_shape[2]
        for position in range(1, spec.mlp_hidden_layers + 1):
            slots.append(ParameterSlot(f"fc{position}", "weight", (spec.mlp_width, features)))
            if spec.uses_dense_bias:
                slots.append(ParameterSlot(f"fc{position}", "bias", (spec.mlp_width,)))
            if spec.batch_norm:
                slots.append(ParameterSlot(f"bn{position}", "weight", (spec.mlp_width,)))
                slots.append(ParameterSlot(f"bn{position}", "bias", (spec.mlp_width,)))
            add_privacy(position)
            features = spec.mlp_width
    slots.append(ParameterSlot("classifier", "weight", (spec.num_classes, features)))
    if spec.uses_dense_bias:
        slots.append(ParameterSlot("classifier", "bias", (spec.num_classes,)))
    return slots


def count_parameters(spec: ModelSpec) -> int:
    return sum(math.prod(slot.shape) for slot in parameter_layout(spec))


def layer_ids(spec: ModelSpec) -> List[str]:
    return list(dict.fromkeys(slot.layer for slot in parameter_layout(spec)))


class LeakageNet(nn.Module):
    """CNN or MLP victim with optional privacy modules after feature blocks"""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        points = check_geometry(spec)
        self.privacy_specs = {module.position: module for module in spec.privacy}
        self.layers = nn.ModuleDict()
        if spec.family == "cnn":
            in_channels = spec.input_shape[0]
            for position, channels in enumerate(spec.conv_channels, start=1):
                self.layers[f"conv{position}"] = nn.Conv2d(
                    in_channels, channels, spec.kernel_size, stride=spec.stride, bias=spec.conv_bias
                )
                self._add_privacy(position, points[position])
                in_channels = channels
            last = points[len(spec.conv_channels)]
            features = last[0] * last[1] * last[2]
        else:
            features = spec.input_shape[0] * spec.input_shape[1] * spec.input_shape[2]
            for position in range(1, spec.mlp_hidden_layers + 1):
                self.layers[f"fc{position}"] = nn.Linear(features, spec.mlp_width, bias=spec.uses_dense_bias)
                if spec.batch_norm:
                    self.layers[f"bn{position}"] = nn.BatchNorm1d(spec.mlp_width)
                self._add_privacy(position, points[position])
                features = spec.mlp_width
        self.layers["classifier"] = nn.Linear(features, spec.num_classes, bias=spec.uses_dense_bias)

    def _add_privacy(self, position: int, feature_shape: Tuple[int, ...]) -> None:
        module = self.privacy_specs.get(position)
        if module is not None:
            self.layers[module.layer_name] = build_privacy_module(module, feature_shape)

    def forward(self, x: torch.Tensor, rng: Optional[RandomStream] = None) -> NetOutput:
        latents: Dict[int, torch.Tensor] = {}
        stats: List[Tuple[PrivacyModuleSpec, LatentStats]] = []
        h = x if self.spec.family == "cnn" else x.flatten(1)
        for position in range(1, self.spec.block_count + 1):
            if self.spec.family == "cnn":
                h = F.relu(self.layers[f"conv{position}"](h))
            else:
                h = self.layers[f"fc{position}"](h)
                if self.spec.batch_norm:
                    h = self.layers[f"bn{position}"](h)
                h = F.relu(h)
            latents[position] = h
            module = self.privacy_specs.get(position)
            if module is not None:
                h, module_stats = self.layers[module.layer_name](h, rng)
                stats.append((module, module_stats))
        logits = self.layers["classifier"](h.flatten(1))
        return NetOutput(logits, latents, stats)


def split_parameter_name(name: str) -> Tuple[str, str]:
    """'layers.vb1.encoder.weight' -> ('vb1.encoder', 'weight')"""
    if name.startswith(LAYER_PREFIX):
        name = name[len(LAYER_PREFIX):]
    layer, kind = name.rsplit(".", 1)
    return layer, kind


@dataclass(frozen=True, eq=False)
class ModelState:
    """A built model: its spec, concrete parameters (inside `net`) and init seed.

    Treated as immutable; operations that change parameters return a new state.
    """

    spec: ModelSpec
    net: LeakageNet
    seed: int

    @property
    def dtype(self) -> torch.dtype:
        return next(self.net.parameters()).dtype

    @property
    def has_privacy_modules(self) -> bool:
        return bool(self.spec.privacy)

    def parameter_entries(self) -> List[Tuple[str, str, nn.Parameter]]:
        return [(*split_parameter_name(name), param) for name, param in self.net.named_parameters()]

    def layer_ids(self) -> List[str]:
        return list(dict.fromkeys(layer for layer, _, _ in self.parameter_entries()))

    def parameter_count(self) -> int:
        return sum(param.numel() for param in self.net.parameters())

    def parameter_values(self) -> LayerGradients:
        """Current parameters in the per-layer container, detached copies"""
        entries = self.parameter_entries()
        return LayerGradients.from_tensors(
            [(layer, kind) for layer, kind, _ in entries], [param.detach().clone() for _, _, param in entries]
        )

    def buffers(self) -> Dict[str, torch.Tensor]:
        return {name: buffer.detach().clone() for name, buffer in self.net.named_buffers()}

    def replace(self, parameters: Optional[LayerGradients] = None, buffers: Optional[Dict[str, torch.Tensor]] = None) -> "ModelState":
        """New state with parameters and/or buffers swapped in"""
        net = copy.deepcopy(self.net)
        state = ModelState(self.spec, net, self.seed)
        with torch.no_grad():
            if parameters is not None:
                state.parameter_values().check_layout(parameters)
                for (_, _, param), entry in zip(state.parameter_entries(), parameters):
                    param.copy_(entry.values)
            if buffers is not None:
                own = dict(net.named_buffers())
                for name, value in buffers.items():
                    if name not in own:
                        raise InvalidInput(f"Unknown buffer {name}")
                    own[name].copy_(value)
        net.eval()
        return state

    def apply_delta(self, delta: LayerGradients) -> "ModelState":
        return self.replace(parameters=self.parameter_values() + delta)


def _initialize(net: LeakageNet, generator: torch.Generator) -> None:
    """Fan-in scaled uniform weights, zero biases, unit batch-norm scale"""
    with torch.no_grad():
        for name, param in net.named_parameters():
            layer, kind = split_parameter_name(name)
            if kind == "bias":
                param.zero_()
            elif layer.startswith("bn"):
                param.fill_(1.0)
            else:
                bound = 1.0 / math.sqrt(param[0].numel())
                values = torch.rand(param.shape, generator=generator, dtype=torch.float64)
                param.copy_(values * 2.0 * bound - bound)


def build_model(spec: ModelSpec, seed: int = 0, precision: int = 32) -> ModelState:
    dtype = resolve_dtype(precision)
    net = LeakageNet(spec)
    generator = torch.Generator()
    generator.manual_seed(int(seed))
    _initialize(net, generator)
    net.to(dtype)
    net.eval()
    state = ModelState(spec, net, int(seed))
    logger.debug(f"✅ Built {spec.label()} with {state.parameter_count()} parameters (seed {seed}, {dtype})")
    return state
