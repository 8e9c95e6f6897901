"""
Differentiable evaluation core for the gradient-leakage lab.

Provides explicit random streams, the per-layer gradient container exchanged by
clients, forward evaluation, parameter gradients and the second-order input gradient
that inversion attacks optimize with.
"""

import hashlib
import logging
from typing import Callable, Dict, Iterable, Iterator, List, NamedTuple, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

from errors import InvalidInput, NumericalFailure

logger = logging.getLogger("diffcore")
logger.setLevel(logging.DEBUG)

PRECISIONS = {32: torch.float32, 64: torch.float64}
PARAMETER_KINDS = ("weight", "bias")

LayerMask = Dict[str, bool]


def resolve_dtype(precision: int) -> torch.dtype:
    """Map a precision flag (32 or 64) to a torch dtype"""
    if precision not in PRECISIONS:
        raise InvalidInput(f"Unsupported precision {precision}, expected one of {sorted(PRECISIONS)}")
    return PRECISIONS[precision]


def _derive_seed(seed: int, label: str) -> int:
    digest = hashlib.blake2b(f"{seed}:{label}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class RandomStream:
    """Seeded source of random draws.

    Identical seed, label and call sequence give identical draws. Sub-streams derived
    with `derive` are seeded from (seed, label path) and never share state with their
    parent.
    """

    def __init__(self, seed: int, label: str = ""):
        self.seed = int(seed) & 0xFFFF_FFFF_FFFF_FFFF
        self.label = label
        self._generator = torch.Generator()
        self._generator.manual_seed(_derive_seed(self.seed, label))
        self._draws = 0

    def __repr__(self) -> str:
        return f"RandomStream(seed={self.seed}, label={self.label!r}, position={self._draws})"

    @property
    def position(self) -> int:
        """Number of draw calls served so far"""
        return self._draws

    def derive(self, label: str) -> "RandomStream":
        path = f"{self.label}/{label}" if self.label else str(label)
        return RandomStream(self.seed, path)

    def snapshot(self) -> "RandomStream":
        """Copy of this stream at its current position; drawing from it leaves the original untouched"""
        twin = RandomStream.__new__(RandomStream)
        twin.seed = self.seed
        twin.label = self.label
        twin._generator = torch.Generator()
        twin._generator.set_state(self._generator.get_state())
        twin._draws = self._draws
        return twin

    def normal(self, shape: Sequence[int], dtype: torch.dtype = torch.float32) -> torch.Tensor:
        self._draws += 1
        return torch.randn(tuple(shape), generator=self._generator, dtype=dtype)

    def uniform(self, shape: Sequence[int], dtype: torch.dtype = torch.float32) -> torch.Tensor:
        self._draws += 1
        return torch.rand(tuple(shape), generator=self._generator, dtype=dtype)

    def permutation(self, n: int) -> torch.Tensor:
        self._draws += 1
        return torch.randperm(n, generator=self._generator)

    def integer(self, high: int) -> int:
        self._draws += 1
        return int(torch.randint(high, (1,), generator=self._generator).item())

    def torch_generator(self) -> torch.Generator:
        """Independent torch.Generator seeded from this stream, for DataLoader shuffling"""
        self._draws += 1
        generator = torch.Generator()
        generator.manual_seed(int(torch.randint(2**62, (1,), generator=self._generator).item()))
        return generator


class GradientEntry(NamedTuple):
    layer: str
    kind: str
    values: torch.Tensor


class LayerGradients:
    """Ordered per-layer, per-parameter gradient arrays mirroring a model's parameters"""

    def __init__(self, entries: Iterable[GradientEntry]):
        self._entries = tuple(GradientEntry(*entry) for entry in entries)
        seen = set()
        for entry in self._entries:
            if entry.kind not in PARAMETER_KINDS:
                raise InvalidInput(f"Unknown parameter kind {entry.kind!r} for layer {entry.layer}")
            key = (entry.layer, entry.kind)
            if key in seen:
                raise InvalidInput(f"Duplicate gradient entry {key}")
            seen.add(key)

    @classmethod
    def from_tensors(cls, keys: Sequence[Tuple[str, str]], tensors: Sequence[torch.Tensor]) -> "LayerGradients":
        if len(keys) != len(tensors):
            raise InvalidInput(f"{len(keys)} layout keys but {len(tensors)} tensors")
        return cls(GradientEntry(layer, kind, tensor) for (layer, kind), tensor in zip(keys, tensors))

    def __iter__(self) -> Iterator[GradientEntry]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self) -> str:
        layout = ", ".join(f"{e.layer}.{e.kind}{tuple(e.values.shape)}" for e in self._entries)
        return f"LayerGradients({layout})"

    @property
    def entries(self) -> Tuple[GradientEntry, ...]:
        return self._entries

    def keys(self) -> List[Tuple[str, str]]:
        return [(e.layer, e.kind) for e in self._entries]

    def layers(self) -> List[str]:
        """Layer identifiers in forward order, each once"""
        return list(dict.fromkeys(e.layer for e in self._entries))

    def get(self, layer: str, kind: str = "weight") -> Optional[torch.Tensor]:
        for entry in self._entries:
            if entry.layer == layer and entry.kind == kind:
                return entry.values
        return None

    def layer_vector(self, layer: str) -> torch.Tensor:
        parts = [e.values.reshape(-1) for e in self._entries if e.layer == layer]
        if not parts:
            raise InvalidInput(f"No gradient entries for layer {layer!r}")
        return torch.cat(parts)

    def masked_vector(self, mask: LayerMask) -> torch.Tensor:
        parts = [e.values.reshape(-1) for e in self._entries if mask.get(e.layer, False)]
        if not parts:
            raise InvalidInput("Layer mask selects no gradient entries")
        return torch.cat(parts)

    def flat(self) -> torch.Tensor:
        return torch.cat([e.values.reshape(-1) for e in self._entries])

    def numel(self) -> int:
        return sum(e.values.numel() for e in self._entries)

    def global_norm(self) -> torch.Tensor:
        return torch.sqrt(sum((e.values.pow(2).sum() for e in self._entries), torch.zeros(())))

    def map(self, fn: Callable[[torch.Tensor], torch.Tensor]) -> "LayerGradients":
        return LayerGradients(GradientEntry(e.layer, e.kind, fn(e.values)) for e in self._entries)

    def detach(self) -> "LayerGradients":
        return self.map(lambda values: values.detach().clone())

    def scaled(self, factor: float) -> "LayerGradients":
        return self.map(lambda values: values * factor)

    def check_layout(self, other: "LayerGradients") -> None:
        """Raise InvalidInput unless both containers share keys, order and shapes"""
        if len(self) != len(other):
            raise InvalidInput(f"Layout mismatch: {len(self)} vs {len(other)} entries")
        for mine, theirs in zip(self._entries, other.entries):
            if (mine.layer, mine.kind) != (theirs.layer, theirs.kind) or mine.values.shape != theirs.values.shape:
                raise InvalidInput(
                    f"Layout mismatch at {mine.layer}.{mine.kind}{tuple(mine.values.shape)} "
                    f"vs {theirs.layer}.{theirs.kind}{tuple(theirs.values.shape)}"
                )

    def zip_with(self, other: "LayerGradients", fn: Callable[[torch.Tensor, torch.Tensor], torch.Tensor]) -> "LayerGradients":
        self.check_layout(other)
        return LayerGradients(
            GradientEntry(a.layer, a.kind, fn(a.values, b.values)) for a, b in zip(self._entries, other.entries)
        )

    def __add__(self, other: "LayerGradients") -> "LayerGradients":
        return self.zip_with(other, lambda a, b: a + b)

    def __sub__(self, other: "LayerGradients") -> "LayerGradients":
        return self.zip_with(other, lambda a, b: a - b)


def full_mask(layers: Iterable[str]) -> LayerMask:
    return {layer: True for layer in layers}


def ensure_finite(tensor: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(tensor).all():
        raise NumericalFailure(f"Non-finite values in {what}")
    return tensor


def as_batch(model, x: torch.Tensor) -> Tuple[torch.Tensor, bool]:
    """Validate x against the model input shape and add a batch axis when missing"""
    expected = tuple(model.spec.input_shape)
    if tuple(x.shape) == expected:
        return x.unsqueeze(0).to(model.dtype), True
    if x.dim() == len(expected) + 1 and tuple(x.shape[1:]) == expected:
        return x.to(model.dtype), False
    raise InvalidInput(f"Input shape {tuple(x.shape)} does not match model input {expected}")


def _as_targets(model, y, batch: int) -> torch.Tensor:
    targets = torch.as_tensor(y, dtype=torch.long).reshape(-1)
    if targets.numel() == 1 and batch > 1:
        targets = targets.expand(batch)
    if targets.numel() != batch:
        raise InvalidInput(f"{targets.numel()} labels for a batch of {batch}")
    num_classes = model.spec.num_classes
    if bool(((targets < 0) | (targets >= num_classes)).any()):
        raise InvalidInput(f"Labels {targets.tolist()} outside [0, {num_classes})")
    return targets


def training_objective(net, x: torch.Tensor, targets: torch.Tensor, rng: Optional[RandomStream]):
    """Cross-entropy plus the β-weighted KL term of every privacy module.

    Returns (loss, net output). The KL term of each module is summed over latent
    entries and averaged over the batch.
    """
    from privacy_modules import extended_loss, kl_loss

    output = net(x, rng)
    loss = F.cross_entropy(output.logits, targets)
    for module_spec, stats in output.stats:
        loss = extended_loss(loss, kl_loss(stats), module_spec.loss_weight)
    return loss, output


def forward_eval(model, x: torch.Tensor, rng: Optional[RandomStream] = None):
    """Softmax prediction and insertion-point activations of `model` for input x.

    Returns (prediction, latents) where latents maps each insertion position P to the
    activation after block P.
    """
    batch, unbatched = as_batch(model, x)
    if model.has_privacy_modules and rng is None:
        raise InvalidInput("A random stream is required for models with privacy modules")
    with torch.no_grad():
        output = model.net(batch, rng)
        ensure_finite(output.logits, "logits")
        prediction = torch.softmax(output.logits, dim=-1)
    latents = {position: (value[0] if unbatched else value) for position, value in output.latents.items()}
    return (prediction[0] if unbatched else prediction), latents


def _parameter_gradients(model, x: torch.Tensor, y, rng: Optional[RandomStream], create_graph: bool):
    batch, _ = as_batch(model, x)
    targets = _as_targets(model, y, batch.shape[0])
    if model.has_privacy_modules and rng is None:
        raise InvalidInput("A random stream is required for models with privacy modules")
    entries = model.parameter_entries()
    loss, output = training_objective(model.net, batch, targets, rng)
    ensure_finite(loss, "loss")
    grads = torch.autograd.grad(loss, [param for _, _, param in entries], create_graph=create_graph)
    keys = [(layer, kind) for layer, kind, _ in entries]
    return loss, LayerGradients.from_tensors(keys, list(grads)), output


def param_gradients(model, x: torch.Tensor, y, rng: Optional[RandomStream] = None) -> Tuple[float, LayerGradients]:
    """Loss and parameter gradients for input x with label(s) y"""
    loss, grads, _ = _parameter_gradients(model, x, y, rng, create_graph=False)
    for entry in grads:
        ensure_finite(entry.values, f"gradient of {entry.layer}.{entry.kind}")
    return float(loss.detach()), grads.detach()


def dummy_gradients(model, x_dummy: torch.Tensor, y, rng: Optional[RandomStream]):
    """Parameter gradients that stay differentiable with respect to x_dummy.

    Returns (gradients, softmax prediction). One noise draw per privacy module is
    taken from rng and shared by the forward pass and its differentiation.
    """
    _, grads, output = _parameter_gradients(model, x_dummy, y, rng, create_graph=True)
    return grads, torch.softmax(output.logits, dim=-1)


def attack_input_gradient(
    model,
    x_dummy: torch.Tensor,
    y: int,
    target: LayerGradients,
    mask: LayerMask,
    distance: str = "cosine",
    tv_weight: float = 0.0,
    label_weight: float = 0.0,
    rng: Optional[RandomStream] = None,
    tv_reduction: str = "mean",
) -> torch.Tensor:
    """Gradient of the reconstruction loss with respect to the dummy input.

    Draws come from a snapshot of rng, so repeated calls with the same stream are
    bit-identical.
    """
    # attacks builds on this module, so its loss is imported at call time
    from attacks import reconstruction_loss

    dummy = x_dummy.detach().clone().to(model.dtype).requires_grad_(True)
    loss, _, _ = reconstruction_loss(
        model,
        dummy,
        y,
        target,
        mask,
        distance=distance,
        tv_weight=tv_weight,
        label_weight=label_weight,
        rng=rng.snapshot() if rng is not None else None,
        tv_reduction=tv_reduction,
    )
    (gradient,) = torch.autograd.grad(loss, dummy)
    return ensure_finite(gradient, "attack input gradient")


def gradient_variance(model, x: torch.Tensor, y: int, rng: RandomStream, draws: int = 100) -> Dict[str, float]:
    """Relative variance of each layer's gradient over repeated noisy evaluations.

    For every layer: total variance across draws divided by the squared norm of the
    mean gradient. Deterministic models give 0 everywhere.
    """
    if draws < 2:
        raise InvalidInput("At least two draws are needed to estimate a variance")
    samples: Dict[str, List[torch.Tensor]] = {}
    for _ in range(draws):
        _, grads = param_gradients(model, x, y, rng)
        for layer in grads.layers():
            samples.setdefault(layer, []).append(grads.layer_vector(layer))
    result = {}
    for layer, vectors in samples.items():
        stacked = torch.stack(vectors)
        mean = stacked.mean(dim=0)
        spread = stacked.var(dim=0, unbiased=True).sum()
        result[layer] = float(spread / mean.pow(2).sum().clamp_min(torch.finfo(stacked.dtype).tiny))
    return result
