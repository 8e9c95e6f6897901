"""
Federated Averaging simulation.

IID client partitioning with per-client validation splits, local Adam training for a
fixed number of epochs, parameter-delta exchange (optionally perturbed by a DP or GC
defense), fixed-order averaging, early stopping on the mean validation loss and test
evaluation after every round.
"""

import copy
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator
from torch.utils.data import DataLoader, TensorDataset
from tqdm import tqdm

from datasets import DatasetBundle, ImageDataset
from defenses import DefenseSpec, compress_gradients, noisy_gradients
from diffcore import LayerGradients, RandomStream, ensure_finite, training_objective
from errors import InvalidInput
from models import ModelSpec, ModelState, build_model

logger = logging.getLogger("fedsim")
logger.setLevel(logging.DEBUG)


class FedConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    num_clients: int = Field(10, ge=1)
    rounds: int = Field(300, ge=1, description="Communication rounds")
    local_epochs: int = Field(1, ge=1)
    batch_size: int = Field(64, ge=1)
    lr: float = Field(1e-3, ge=0, description="Client Adam learning rate")
    betas: Tuple[float, float] = (0.9, 0.999)
    val_fraction: float = Field(0.1, ge=0, lt=1)
    patience: int = Field(40, ge=0, description="Rounds without mean validation improvement before stopping, 0 disables")
    defense: DefenseSpec = DefenseSpec()
    seed: int = 0
    client_workers: int = Field(1, ge=1)
    eval_batch_size: int = Field(512, ge=1)

    @model_validator(mode="after")
    def _patience_within_rounds(self) -> "FedConfig":
        if self.patience > self.rounds:
            raise ValueError(f"patience {self.patience} exceeds rounds {self.rounds}")
        return self


@dataclass(frozen=True)
class ClientSplit:
    index: int
    train_indices: torch.Tensor
    val_indices: torch.Tensor
    train: ImageDataset
    val: ImageDataset


@dataclass(frozen=True)
class Partition:
    clients: List[ClientSplit]
    test: ImageDataset


@dataclass(frozen=True)
class ClientUpdate:
    client: int
    delta: LayerGradients
    buffers: Dict[str, torch.Tensor]
    train_loss: float
    steps: int


class RoundLog(BaseModel):
    model_config = ConfigDict(ser_json_inf_nan="constants")

    round: int
    client_train_loss: List[float]
    client_val_loss: List[float]
    mean_val_loss: float
    test_loss: float
    test_accuracy: float
    wall_time: float


def partition_dataset(dataset: DatasetBundle, num_clients: int, val_fraction: float, seed: int) -> Partition:
    """Equal IID shards of the training split; the remainder is dropped"""
    total = len(dataset.train)
    per_client = total // num_clients
    val_size = int(round(val_fraction * per_client))
    if num_clients < 1 or per_client - val_size < 1:
        raise InvalidInput(f"{total} samples cannot be split across {num_clients} clients")
    order = RandomStream(seed, "partition").permutation(total)
    clients = []
    for index in range(num_clients):
        shard = order[index * per_client:(index + 1) * per_client]
        train_indices, val_indices = shard[: per_client - val_size], shard[per_client - val_size:]
        clients.append(
            ClientSplit(
                index=index,
                train_indices=train_indices,
                val_indices=val_indices,
                train=dataset.train.subset(train_indices),
                val=dataset.train.subset(val_indices),
            )
        )
    return Partition(clients, dataset.test)


def _skips_singletons(spec: ModelSpec) -> bool:
    return spec.family == "mlp" and spec.batch_norm


def local_train(global_state: ModelState, client: ClientSplit, config: FedConfig, rng: RandomStream) -> ClientUpdate:
    """Train a copy of the global model on one client; returns the parameter delta"""
    net = copy.deepcopy(global_state.net)
    net.train()
    dtype = global_state.dtype
    loader = DataLoader(
        TensorDataset(client.train.images.to(dtype), client.train.labels),
        batch_size=config.batch_size,
        shuffle=True,
        generator=rng.torch_generator(),
    )
    optimizer = torch.optim.Adam(net.parameters(), lr=config.lr, betas=config.betas)
    noise = rng.derive("noise")
    losses = []
    for _ in range(config.local_epochs):
        for images, labels in loader:
            if images.shape[0] == 1 and _skips_singletons(global_state.spec):
                logger.debug(f"Client {client.index}: skipping a single-sample batch under batch norm")
                continue
            optimizer.zero_grad()
            loss, _ = training_objective(net, images, labels, noise)
            ensure_finite(loss, f"client {client.index} training loss")
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
    net.eval()
    local = ModelState(global_state.spec, net, global_state.seed)
    delta = local.parameter_values() - global_state.parameter_values()
    train_loss = sum(losses) / len(losses) if losses else math.nan
    return ClientUpdate(client.index, delta, local.buffers(), train_loss, len(losses))


def protect_update(defense: DefenseSpec, delta: LayerGradients, rng: RandomStream) -> LayerGradients:
    """Perturb an exchanged update the way the defense perturbs gradients"""
    if not defense.perturbs_gradients:
        return delta
    if defense.kind == "dp":
        return noisy_gradients([delta], defense.clip_threshold, defense.noise_multiplier, rng)
    if defense.kind == "gc":
        return compress_gradients(delta, defense.pruning_ratio)
    raise InvalidInput(f"Defense {defense.kind} has no update perturbation")


def _average_buffers(buffers: Sequence[Dict[str, torch.Tensor]]) -> Dict[str, torch.Tensor]:
    merged = {}
    for name in buffers[0]:
        values = [b[name] for b in buffers]
        if values[0].is_floating_point():
            total = values[0].clone()
            for value in values[1:]:
                total = total + value
            merged[name] = total / len(values)
        else:
            merged[name] = torch.stack(values).max(dim=0).values
    return merged


def aggregate(
    global_state: ModelState,
    deltas: Sequence[LayerGradients],
    buffers: Optional[Sequence[Dict[str, torch.Tensor]]] = None,
) -> ModelState:
    """Move the global parameters by the mean delta, summed in client order"""
    if not deltas:
        raise InvalidInput("aggregate needs at least one client delta")
    total = deltas[0]
    for delta in deltas[1:]:
        total = total + delta
    state = global_state.apply_delta(total.scaled(1.0 / len(deltas)))
    if buffers:
        state = state.replace(buffers=_average_buffers(buffers))
    return state


def evaluate(state: ModelState, dataset: ImageDataset, rng: RandomStream, batch_size: int = 512) -> Tuple[float, float]:
    """(mean loss, accuracy in %) of a model on a dataset"""
    if len(dataset) == 0:
        return math.nan, math.nan
    total_loss, correct = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            images = dataset.images[start:start + batch_size].to(state.dtype)
            labels = dataset.labels[start:start + batch_size]
            loss, output = training_objective(state.net, images, labels, rng)
            total_loss += float(loss) * labels.shape[0]
            correct += int((output.logits.argmax(dim=1) == labels).sum())
    return total_loss / len(dataset), 100.0 * correct / len(dataset)


def run_federation(
    config: FedConfig,
    spec: ModelSpec,
    dataset: DatasetBundle,
    precision: int = 32,
    initial: Optional[ModelState] = None,
    progress: bool = False,
) -> Tuple[ModelState, List[RoundLog]]:
    """Run FedAvg; returns the state with the best mean validation loss and the round history"""
    partition = partition_dataset(dataset, config.num_clients, config.val_fraction, config.seed)
    smallest = min(len(client.train) for client in partition.clients)
    if config.batch_size > smallest:
        raise InvalidInput(f"Batch size {config.batch_size} exceeds the smallest client split ({smallest})")
    state = initial if initial is not None else build_model(spec, seed=config.seed, precision=precision)
    master = RandomStream(config.seed, "federation")
    best_state, best_val, waited = state, math.inf, 0
    history: List[RoundLog] = []
    logger.info(
        f"🚀 FedAvg: {config.num_clients} clients, up to {config.rounds} rounds, defense {config.defense.label()}"
    )

    for round_index in tqdm(range(1, config.rounds + 1), desc="rounds", disable=not progress):
        started = time.perf_counter()
        round_rng = master.derive(f"round{round_index}")

        def train_client(client: ClientSplit) -> ClientUpdate:
            return local_train(state, client, config, round_rng.derive(f"client{client.index}"))

        if config.client_workers > 1:
            with ThreadPoolExecutor(max_workers=config.client_workers) as pool:
                updates = list(pool.map(train_client, partition.clients))
        else:
            updates = [train_client(client) for client in partition.clients]

        deltas = [
            protect_update(config.defense, update.delta, round_rng.derive(f"defense{update.client}"))
            for update in updates
        ]
        state = aggregate(state, deltas, [update.buffers for update in updates])

        eval_rng = round_rng.derive("eval")
        val_losses = [evaluate(state, client.val, eval_rng, config.eval_batch_size)[0] for client in partition.clients]
        mean_val = sum(val_losses) / len(val_losses)
        test_loss, accuracy = evaluate(state, partition.test, eval_rng, config.eval_batch_size)
        history.append(
            RoundLog(
                round=round_index,
                client_train_loss=[update.train_loss for update in updates],
                client_val_loss=val_losses,
                mean_val_loss=mean_val,
                test_loss=test_loss,
                test_accuracy=accuracy,
                wall_time=time.perf_counter() - started,
            )
        )
        logger.info(f"📋 Round {round_index}: val loss {mean_val:.4f}, test accuracy {accuracy:.2f}%")

        if math.isnan(mean_val) or mean_val < best_val:
            best_state, best_val, waited = state, mean_val, 0
        else:
            waited += 1
        if config.patience and waited >= config.patience:
            logger.info(f"⚠️ Early stop after round {round_index}: no validation improvement for {waited} rounds")
            break

    logger.info(f"✅ Federation finished after {len(history)} rounds, best mean val loss {best_val:.4f}")
    return best_state, history
