"""
Gradient inversion attacks against a single victim gradient.

Iterative attacks optimize a dummy image so that its parameter gradients match the
victim's (iDLG, CPL, Inverting Gradients and the layer-masking Ignore attack against
stochastic bottlenecks). The module also holds the iDLG label rule, the analytic
reconstruction of a dense layer's input and the per-layer trajectory recorder.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, model_validator
from torch.optim.lr_scheduler import ReduceLROnPlateau
from tqdm import tqdm

from diffcore import LayerGradients, LayerMask, RandomStream, dummy_gradients, ensure_finite, full_mask
from errors import AmbiguousLabel, DegenerateGradient, InvalidInput, InvalidMask, InvalidSpec, NoBias, NoUsableRow
from metrics import ImageMetrics, image_metrics
from models import ModelSpec, ModelState, layer_ids

logger = logging.getLogger("attacks")
logger.setLevel(logging.DEBUG)

ATTACK_PRESETS: Dict[str, Dict[str, Any]] = {
    "idlg": {"distance": "euclidean", "tv_weight": 0.0, "cpl_label_weight": 0.0, "ignore_stochastic": False},
    "cpl": {"distance": "euclidean", "tv_weight": 0.0, "cpl_label_weight": 1.0, "ignore_stochastic": False},
    "ig": {"distance": "cosine", "tv_weight": 0.01, "cpl_label_weight": 0.0, "ignore_stochastic": False},
    "ignore": {"distance": "cosine", "tv_weight": 0.01, "cpl_label_weight": 0.0, "ignore_stochastic": True},
}


class AttackSpec(BaseModel):
    """Complete configuration of one iterative attack.

    `kind` selects a preset for distance, TV weight, label term and masking; any field
    given explicitly overrides the preset.
    """

    model_config = ConfigDict(frozen=True)

    kind: Literal["idlg", "cpl", "ig", "ignore"] = "ig"
    distance: Literal["euclidean", "cosine"] = "cosine"
    tv_weight: float = Field(0.01, ge=0, description="lambda_TV")
    tv_reduction: Literal["sum", "mean"] = "mean"
    cpl_label_weight: float = Field(0.0, ge=0)
    label_mode: Literal["known", "recovered"] = "known"
    ignore_stochastic: bool = Field(False, description="Drop the first privacy decoder and every later layer")
    exclude_layers: Tuple[str, ...] = Field((), description="Further layers left out of the distance")
    lr: float = Field(1.0, gt=0)
    lr_decay_factor: float = Field(0.1, gt=0, lt=1)
    lr_patience: int = Field(400, ge=1, description="Iterations without a new best loss before each lr decay")
    loss_floor: float = Field(1e-5, ge=0)
    stagnation_limit: int = Field(4000, ge=1)
    max_iterations: int = Field(20000, ge=0, le=20000)
    record_trajectory: bool = False
    tracked_entries: int = Field(2, ge=0, description="Gradient entries followed per layer in trajectories")
    log_every: int = Field(500, ge=1)

    @model_validator(mode="before")
    @classmethod
    def _apply_preset(cls, data: Any) -> Any:
        if isinstance(data, dict):
            preset = ATTACK_PRESETS.get(data.get("kind", "ig"), {})
            return {**preset, **{key: value for key, value in data.items() if value is not None}}
        return data

    def label(self) -> str:
        name = self.kind.upper()
        if self.exclude_layers:
            name += "-" + "-".join(self.exclude_layers)
        return name


class TrackedEntry(BaseModel):
    layer: str
    kind: str
    index: int
    target: float
    values: List[float] = []


class TrajectoryRecord(BaseModel):
    """Per-iteration, per-layer cosine similarity of dummy and victim gradients"""

    layers: List[str]
    cosine: Dict[str, List[float]]
    tracked: List[TrackedEntry] = []

    @property
    def iterations(self) -> int:
        return len(self.cosine[self.layers[0]]) if self.layers else 0


@dataclass
class AttackResult:
    reconstruction: torch.Tensor
    label: int
    final_loss: float
    best_loss: float
    iterations: int
    stop_reason: str
    metrics: Optional[ImageMetrics] = None
    trajectory: Optional[TrajectoryRecord] = None
    error: Optional[str] = None
    best_history: List[float] = field(default_factory=list)  # running best loss after each evaluation

    @property
    def succeeded(self) -> bool:
        return self.metrics is not None and self.metrics.ssim >= 0.5

    def summary(self) -> Dict[str, Any]:
        """JSON-ready view without the reconstruction array"""
        return {
            "label": self.label,
            "final_loss": self.final_loss,
            "best_loss": self.best_loss,
            "iterations": self.iterations,
            "stop_reason": self.stop_reason,
            "metrics": None if self.metrics is None else self.metrics.model_dump(),
            "trajectory": None if self.trajectory is None else self.trajectory.model_dump(),
            "error": self.error,
            "best_history": list(self.best_history),
        }


def init_dummy(shape: Sequence[int], seed: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Standard-normal dummy image, deterministic per seed"""
    return RandomStream(seed).derive("dummy").normal(shape, dtype=dtype)


def _check_mask(target: LayerGradients, mask: LayerMask) -> None:
    layers = set(target.layers())
    unknown = [layer for layer in mask if layer not in layers]
    if unknown:
        raise InvalidMask(f"Mask names unknown layers {unknown}")
    if not any(mask.get(layer, False) for layer in layers):
        raise InvalidMask("Mask selects no layer")


def gradient_distance(dummy: LayerGradients, target: LayerGradients, mask: LayerMask, kind: str = "cosine") -> torch.Tensor:
    """Euclidean or cosine distance between gradients restricted to masked layers.

    Cosine distance is one cosine over the concatenation of all selected layers.
    """
    _check_mask(target, mask)
    target.check_layout(dummy)
    if kind == "euclidean":
        return sum(
            (d.values - t.values).pow(2).sum() for d, t in zip(dummy, target) if mask.get(d.layer, False)
        )
    if kind != "cosine":
        raise InvalidInput(f"Unknown distance {kind!r}")
    g_dummy = dummy.masked_vector(mask)
    g_target = target.masked_vector(mask).to(g_dummy.dtype)
    norm_dummy, norm_target = g_dummy.norm(), g_target.norm()
    if float(norm_dummy.detach()) == 0.0 or float(norm_target.detach()) == 0.0:
        raise DegenerateGradient("Cosine distance of a zero-norm gradient is undefined")
    return 1.0 - (g_dummy * g_target).sum() / (norm_dummy * norm_target)


def total_variation(img: torch.Tensor, reduction: str = "sum") -> torch.Tensor:
    """Anisotropic total variation of a (C, H, W) image"""
    dx = (img[..., :, 1:] - img[..., :, :-1]).abs()
    dy = (img[..., 1:, :] - img[..., :-1, :]).abs()
    if reduction == "mean":
        return dx.mean() + dy.mean()
    return dx.sum() + dy.sum()


def cpl_label_term(prediction: torch.Tensor, label: int) -> torch.Tensor:
    onehot = F.one_hot(torch.tensor(label), prediction.shape[-1]).to(prediction.dtype)
    return (prediction.reshape(-1) - onehot).pow(2).sum()


def recover_label(classifier_weight_grad: torch.Tensor) -> int:
    """Class whose classifier weight-gradient row sums negative.

    For a single sample through softmax cross-entropy with non-negative classifier
    inputs only the true class row has p_i - 1 < 0.
    """
    row_sums = classifier_weight_grad.reshape(classifier_weight_grad.shape[0], -1).sum(dim=1)
    negative = torch.nonzero(row_sums < 0).reshape(-1).tolist()
    if len(negative) != 1:
        raise AmbiguousLabel(f"Expected one negative-sum row, found {len(negative)}")
    return negative[0]


def ignore_mask(spec: ModelSpec) -> LayerMask:
    """Mask keeping every layer up to the first privacy encoder, dropping its decoder and all after"""
    if not spec.privacy:
        raise InvalidSpec("The Ignore mask needs a model with a PRECODE or CVB module")
    first = min(spec.privacy, key=lambda module: module.position)
    layers = layer_ids(spec)
    cut = layers.index(f"{first.layer_name}.decoder")
    return {layer: index < cut for index, layer in enumerate(layers)}


def layer_mask(spec: ModelSpec, attack: AttackSpec) -> LayerMask:
    mask = ignore_mask(spec) if attack.ignore_stochastic else full_mask(layer_ids(spec))
    for layer in attack.exclude_layers:
        if layer not in mask:
            raise InvalidMask(f"Cannot exclude unknown layer {layer!r}; model has {list(mask)}")
        mask[layer] = False
    if not any(mask.values()):
        raise InvalidMask("Attack mask selects no layer")
    return mask


def reconstruction_loss(
    model: ModelState,
    dummy: torch.Tensor,
    label: int,
    target: LayerGradients,
    mask: LayerMask,
    distance: str = "cosine",
    tv_weight: float = 0.0,
    label_weight: float = 0.0,
    rng: Optional[RandomStream] = None,
    tv_reduction: str = "mean",
):
    """Gradient-matching loss of a dummy image plus its priors.

    Returns (loss, dummy gradients, prediction); the gradients keep their graph.
    """
    grads, prediction = dummy_gradients(model, dummy, label, rng)
    loss = gradient_distance(grads, target, mask, distance)
    if tv_weight > 0:
        loss = loss + tv_weight * total_variation(dummy, tv_reduction)
    if label_weight > 0:
        loss = loss + label_weight * cpl_label_term(prediction, label)
    ensure_finite(loss, "reconstruction loss")
    return loss, grads, prediction


def _cosine(a: torch.Tensor, b: torch.Tensor) -> float:
    norm = float(a.norm() * b.norm())
    if norm == 0.0:
        return 0.0
    return max(-1.0, min(1.0, float((a * b).sum()) / norm))


class TrajectoryRecorder:
    """Attack hook collecting per-layer cosine similarities and tracked entries"""

    def __init__(self, target: LayerGradients, rng: RandomStream, tracked_entries: int = 2):
        self.target = target.detach()
        self.layers = self.target.layers()
        self.cosine: Dict[str, List[float]] = {layer: [] for layer in self.layers}
        self.tracked: List[TrackedEntry] = []
        for entry in self.target:
            if entry.kind != "weight":
                continue
            for _ in range(min(tracked_entries, entry.values.numel())):
                index = rng.integer(entry.values.numel())
                target_value = float(entry.values.reshape(-1)[index])
                self.tracked.append(TrackedEntry(layer=entry.layer, kind=entry.kind, index=index, target=target_value))

    def observe(self, dummy: LayerGradients) -> None:
        for layer in self.layers:
            self.cosine[layer].append(_cosine(dummy.layer_vector(layer).detach(), self.target.layer_vector(layer)))
        for tracked in self.tracked:
            tracked.values.append(float(dummy.get(tracked.layer, tracked.kind).detach().reshape(-1)[tracked.index]))

    def record(self) -> TrajectoryRecord:
        return TrajectoryRecord(
            layers=list(self.layers),
            cosine={layer: list(values) for layer, values in self.cosine.items()},
            tracked=[entry.model_copy(deep=True) for entry in self.tracked],
        )


def record_trajectory(target: LayerGradients, rng: RandomStream, tracked_entries: int = 2) -> TrajectoryRecorder:
    return TrajectoryRecorder(target, rng, tracked_entries)


def plateau_scheduler(optimizer: torch.optim.Optimizer, spec: AttackSpec) -> ReduceLROnPlateau:
    """Decay the lr by `lr_decay_factor` after every `lr_patience` steps without a strictly lower loss.

    ReduceLROnPlateau decays once its bad-step count exceeds `patience`, hence the -1.
    """
    return ReduceLROnPlateau(
        optimizer, mode="min", factor=spec.lr_decay_factor, patience=spec.lr_patience - 1, threshold=0.0
    )


def run_attack(
    model: ModelState,
    victim_grads: LayerGradients,
    victim_shape: Sequence[int],
    label: Optional[int],
    spec: AttackSpec,
    rng: RandomStream,
    init: Optional[torch.Tensor] = None,
    reference: Optional[torch.Tensor] = None,
    progress: bool = False,
) -> AttackResult:
    """Reconstruct a victim input from its gradient.

    Adam (betas 0.9/0.999) on the dummy with a plateau lr decay. Stops when the loss
    drops below the floor, when the best loss has not improved for the stagnation
    limit, or after max_iterations steps. Each step draws fresh privacy-module noise.
    The returned reconstruction is the dummy at the best loss; `reference` enables
    image metrics.
    """
    mask = layer_mask(model.spec, spec)
    model.parameter_values().check_layout(victim_grads)
    if spec.label_mode == "recovered":
        label = recover_label(victim_grads.get("classifier", "weight"))
    elif label is None:
        raise InvalidInput("Known-label attacks need the victim label")
    shape = tuple(victim_shape)
    if tuple(model.spec.input_shape) != shape:
        raise InvalidInput(f"Victim shape {shape} does not match model input {tuple(model.spec.input_shape)}")

    if init is not None:
        if tuple(init.shape) != shape:
            raise InvalidInput(f"Initial dummy shape {tuple(init.shape)} differs from victim {shape}")
        start = init.detach().clone().to(model.dtype)
    else:
        start = rng.derive("dummy").normal(shape, dtype=model.dtype)
    dummy = start.requires_grad_(True)
    optimizer = torch.optim.Adam([dummy], lr=spec.lr, betas=(0.9, 0.999), eps=1e-8)
    scheduler = plateau_scheduler(optimizer, spec)
    recorder = record_trajectory(victim_grads, rng.derive("trajectory"), spec.tracked_entries) if spec.record_trajectory else None
    noise = rng.derive("noise")

    best_loss = math.inf
    best = dummy.detach().clone()
    since_best = 0
    best_history: List[float] = []
    iterations = 0
    stop_reason = "max_iters"
    bar = tqdm(total=spec.max_iterations, desc=spec.label(), disable=not progress, leave=False)
    while True:
        loss, grads, _ = reconstruction_loss(
            model,
            dummy,
            label,
            victim_grads,
            mask,
            distance=spec.distance,
            tv_weight=spec.tv_weight,
            label_weight=spec.cpl_label_weight,
            rng=noise,
            tv_reduction=spec.tv_reduction,
        )
        value = float(loss.detach())
        if value < best_loss:
            best_loss = value
            best = dummy.detach().clone()
            since_best = 0
        else:
            since_best += 1
        best_history.append(best_loss)
        if value < spec.loss_floor:
            stop_reason = "loss_floor"
            break
        if since_best >= spec.stagnation_limit:
            stop_reason = "stagnation"
            break
        if iterations >= spec.max_iterations:
            stop_reason = "max_iters"
            break
        (step,) = torch.autograd.grad(loss, dummy)
        dummy.grad = ensure_finite(step, "attack input gradient")
        if recorder is not None:
            recorder.observe(grads)
        optimizer.step()
        scheduler.step(value)
        iterations += 1
        bar.update(1)
        if iterations % spec.log_every == 0:
            logger.debug(
                f"{spec.label()} iteration {iterations}: loss {value:.6g}, best {best_loss:.6g}, "
                f"lr {optimizer.param_groups[0]['lr']:.3g}"
            )
    bar.close()

    metrics = image_metrics(best, reference) if reference is not None else None
    logger.info(
        f"🎯 {spec.label()} stopped ({stop_reason}) after {iterations} iterations, best loss {best_loss:.6g}"
        + (f", SSIM {metrics.ssim:.3f}" if metrics is not None else "")
    )
    return AttackResult(
        reconstruction=best,
        label=int(label),
        final_loss=value,
        best_loss=best_loss,
        iterations=iterations,
        stop_reason=stop_reason,
        metrics=metrics,
        trajectory=recorder.record() if recorder is not None else None,
        best_history=best_history,
    )


def analytic_fc_input(weight_grad: torch.Tensor, bias_grad: Optional[torch.Tensor]) -> torch.Tensor:
    """Input of a dense layer from its gradients: dW_i / db_i for the largest |db_i|"""
    if bias_grad is None:
        raise NoBias("The analytic attack needs the bias gradient of the attacked layer")
    if weight_grad.shape[0] != bias_grad.numel():
        raise InvalidInput(f"Weight gradient {tuple(weight_grad.shape)} does not match bias {tuple(bias_grad.shape)}")
    magnitudes = bias_grad.reshape(-1).abs()
    if float(magnitudes.max()) == 0.0:
        raise NoUsableRow("Every bias gradient of the layer is zero")
    row = int(torch.argmax(magnitudes))
    return weight_grad[row] / bias_grad.reshape(-1)[row]


def analytic_layer_input(grads: LayerGradients, layer: str) -> torch.Tensor:
    weight = grads.get(layer, "weight")
    if weight is None or weight.dim() != 2:
        raise InvalidInput(f"Layer {layer!r} is not a dense layer of this model")
    return analytic_fc_input(weight, grads.get(layer, "bias"))
