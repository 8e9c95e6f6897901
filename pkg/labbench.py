"""
Experiment orchestration and command line.

    python labbench.py train  --config experiment.yaml --out runs/cvb
    python labbench.py attack --config experiment.yaml --checkpoint runs/cvb/model.ckpt --victims 16
    python labbench.py sweep  --config experiment.yaml
    python labbench.py report --out runs/cvb

Configuration comes from a YAML file with ${NAME} environment references, then GILAB_*
environment overrides, then command-line flags.
"""

import argparse
import itertools
import logging
import os
import platform
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from tqdm import tqdm

from attacks import AttackResult, AttackSpec, run_attack
from datasets import ImageDataset, load_dataset
from defenses import DefenseSpec, apply_defense
from diffcore import LayerGradients, RandomStream, param_gradients
from errors import ConfigError, InvalidInput, InvalidSpec, LabError, NumericalFailure
from fedsim import FedConfig, RoundLog, evaluate, partition_dataset, run_federation
from metrics import ImageMetrics, MetricReport
from models import ModelSpec, ModelState, build_model, check_geometry, count_parameters
from persistence import AttackRun, ResultsBundle, load_bundle, load_checkpoint, save_bundle, save_checkpoint, save_victim_result
from privacy_modules import PrivacyModuleSpec
from reporting import emit_report, write_summary_csv

logger = logging.getLogger("labbench")
logger.setLevel(logging.DEBUG)

ENV_PREFIX = "GILAB_"
ENV_OVERRIDES = {
    "SEED": "seed",
    "OUT": "output_dir",
    "VICTIMS": "victims.count",
    "PRECISION": "precision",
    "DATA_DIR": "dataset.path",
    "CHECKPOINT": "checkpoint",
    "WORKERS": "workers",
    "PROGRESS": "progress",
}
INTEGER_OVERRIDES = ("SEED", "VICTIMS", "PRECISION", "WORKERS")
_REFERENCE = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)(?::-([^}]*))?\}")


class DatasetConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: str = "synthetic"
    path: Optional[str] = None
    limit: Optional[int] = Field(None, ge=1, description="Keep the first N training samples")
    test_limit: Optional[int] = Field(None, ge=1)
    options: Dict[str, Any] = {}


class VictimConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    count: int = Field(128, ge=1, description="Victim images sampled from one client's training split")
    client: int = Field(0, ge=0)


class SweepConfig(BaseModel):
    """Grid axes; an empty list keeps the base value"""

    model_config = ConfigDict(frozen=True)

    beta: List[float] = []
    kernel_size: List[int] = []
    bottleneck_scale: List[float] = []
    position: List[Union[int, Tuple[int, ...]]] = []

    @property
    def empty(self) -> bool:
        return not (self.beta or self.kernel_size or self.bottleneck_scale or self.position)


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str = "experiment"
    seed: int = 0
    precision: Literal[32, 64] = 32
    dataset: DatasetConfig = DatasetConfig()
    model: ModelSpec = ModelSpec()
    defense: DefenseSpec = DefenseSpec()
    attacks: Tuple[AttackSpec, ...] = (AttackSpec(kind="ig"),)
    federation: FedConfig = FedConfig()
    victims: VictimConfig = VictimConfig()
    sweep: SweepConfig = SweepConfig()
    train: bool = Field(False, description="Run the federation before attacking")
    checkpoint: Optional[str] = None
    output_dir: str = "runs/experiment"
    workers: int = Field(1, ge=1, description="Victims attacked concurrently")
    progress: bool = True

    @model_validator(mode="after")
    def _defense_matches_model(self) -> "ExperimentConfig":
        kinds = {module.kind for module in self.model.privacy}
        if self.defense.kind in ("precode", "cvb") and self.defense.kind not in kinds:
            raise ValueError(f"defense {self.defense.kind} needs a matching entry in model.privacy")
        if kinds and self.defense.kind not in kinds:
            raise ValueError(f"model carries {sorted(kinds)} modules but defense is {self.defense.kind}")
        if not self.attacks:
            raise ValueError("at least one attack is required")
        return self

    def defense_label(self) -> str:
        if self.model.privacy:
            return "+".join(module.label() for module in self.model.privacy)
        return self.defense.label()


def _interpolate(value: Any, env: Mapping[str, str]) -> Any:
    if isinstance(value, dict):
        return {key: _interpolate(item, env) for key, item in value.items()}
    if isinstance(value, list):
        return [_interpolate(item, env) for item in value]
    if not isinstance(value, str):
        return value

    def replace(match: re.Match) -> str:
        name, default = match.group(1), match.group(2)
        if name in env:
            return env[name]
        if default is not None:
            return default
        raise ConfigError(f"Environment variable {name} is referenced but not set")

    return _REFERENCE.sub(replace, value)


def _set_path(raw: Dict[str, Any], dotted: str, value: Any) -> None:
    *parents, leaf = dotted.split(".")
    node = raw
    for key in parents:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"Cannot override {dotted}: {key} is not a section")
    node[leaf] = value


def apply_env_overrides(raw: Dict[str, Any], env: Mapping[str, str]) -> Dict[str, Any]:
    for suffix, dotted in ENV_OVERRIDES.items():
        value = env.get(ENV_PREFIX + suffix)
        if value is None or value == "":
            continue
        if suffix == "DATA_DIR" and raw.get("dataset", {}).get("path"):
            continue
        if suffix == "PROGRESS":
            value = value.strip().lower() not in ("0", "false", "no", "off")
        elif suffix in INTEGER_OVERRIDES:
            try:
                value = int(value)
            except ValueError as exc:
                raise ConfigError(f"{ENV_PREFIX}{suffix} must be an integer, got {value!r}") from exc
        _set_path(raw, dotted, value)
    return raw


def load_config(
    path: Optional[Union[str, Path]],
    env: Optional[Mapping[str, str]] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> ExperimentConfig:
    """Resolve file, environment and explicit overrides into an ExperimentConfig"""
    env = os.environ if env is None else env
    raw: Dict[str, Any] = {}
    if path is not None:
        config_path = Path(path)
        if not config_path.exists():
            raise ConfigError(f"Config file {config_path} not found")
        try:
            raw = yaml.safe_load(config_path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"Cannot parse {config_path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{config_path} must contain a mapping at the top level")
    raw = apply_env_overrides(_interpolate(raw, env), env)
    for dotted, value in (overrides or {}).items():
        if value is not None:
            _set_path(raw, dotted, value)
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"Invalid experiment configuration:\n{exc}") from exc


@dataclass(frozen=True)
class Victim:
    sample: int
    image: torch.Tensor
    label: int
    gradients: LayerGradients


def sample_victims(
    split: ImageDataset,
    n: int,
    seed: int,
    model: ModelState,
    defense: DefenseSpec = DefenseSpec(),
) -> List[Victim]:
    """n distinct samples of a client split with their single-step (batch 1) gradients"""
    if n > len(split):
        raise InvalidInput(f"Cannot sample {n} victims from a split of {len(split)}")
    stream = RandomStream(seed, "victims")
    chosen = stream.permutation(len(split))[:n].tolist()
    victims = []
    for position, sample in enumerate(chosen):
        image = split.images[sample].to(model.dtype)
        label = int(split.labels[sample])
        victim_rng = stream.derive(f"victim{position}")
        _, grads = param_gradients(model, image, label, victim_rng.derive("gradient"))
        exchanged = apply_defense(defense, [grads], victim_rng.derive("defense"))
        victims.append(Victim(sample, image, label, exchanged))
    return victims


def failed_result(victim: Victim, error: Exception) -> AttackResult:
    """Worst-case outcome for the unit range: MSE 1, PSNR 0, SSIM 0"""
    return AttackResult(
        reconstruction=torch.zeros_like(victim.image),
        label=victim.label,
        final_loss=float("nan"),
        best_loss=float("nan"),
        iterations=0,
        stop_reason="failed",
        metrics=ImageMetrics(mse=1.0, psnr=0.0, ssim=0.0),
        error=f"{type(error).__name__}: {error}",
    )


def _attack_victim(
    state: ModelState, victim: Victim, index: int, attack: AttackSpec, run_index: int, seed: int, root: Path
) -> AttackResult:
    rng = RandomStream(seed, "attacks").derive(f"run{run_index}/victim{index}")
    try:
        result = run_attack(state, victim.gradients, victim.image.shape, victim.label, attack, rng, reference=victim.image)
    except LabError as exc:
        logger.error(f"❌ Victim {index} ({attack.label()}) failed: {exc}")
        result = failed_result(victim, exc)
    save_victim_result(root, run_index, index, result)
    return result


def _environment(config: ExperimentConfig, mode: str, failures: int) -> Dict[str, Any]:
    return {
        "mode": mode,
        "seed": config.seed,
        "precision": config.precision,
        "python": platform.python_version(),
        "torch": torch.__version__,
        "numpy": np.__version__,
        "numerical_failures": failures,
    }


def _initial_state(config: ExperimentConfig, dataset, train: bool, fed: FedConfig) -> Tuple[ModelState, List[RoundLog]]:
    if train:
        return run_federation(fed, config.model, dataset, config.precision, progress=config.progress)
    if config.checkpoint:
        state = load_checkpoint(config.checkpoint)
        if state.spec != config.model:
            raise ConfigError(f"Checkpoint {config.checkpoint} holds {state.spec.label()}, config asks for {config.model.label()}")
        return state, []
    return build_model(config.model, seed=config.seed, precision=config.precision), []


def run_experiment(config: ExperimentConfig, mode: str = "attack") -> ResultsBundle:
    """Train (or load) a model, attack the victim set, persist results and emit the report.

    mode "train" stops after the federation and writes the checkpoint; "attack" trains
    first only when config.train is set.
    """
    if mode not in ("train", "attack"):
        raise ConfigError(f"Unknown mode {mode!r}")
    root = Path(config.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    fed = config.federation.model_copy(update={"seed": config.seed, "defense": config.defense})
    dataset = load_dataset(
        config.dataset.id,
        config.dataset.path,
        limit=config.dataset.limit,
        test_limit=config.dataset.test_limit,
        **config.dataset.options,
    )
    if dataset.image_shape != tuple(config.model.input_shape):
        raise ConfigError(f"Dataset images are {dataset.image_shape}, model expects {tuple(config.model.input_shape)}")
    logger.info(f"🚀 {config.name}: {config.defense_label()} on {config.dataset.id}, mode {mode}")

    state, rounds = _initial_state(config, dataset, mode == "train" or config.train, fed)
    if rounds:
        save_checkpoint(state, root / "model.ckpt")
    partition = partition_dataset(dataset, fed.num_clients, fed.val_fraction, config.seed)
    _, accuracy = evaluate(state, partition.test, RandomStream(config.seed, "accuracy"), fed.eval_batch_size)
    bundle = ResultsBundle(
        config=config.model_dump(mode="json"),
        model_label=config.model.label(),
        defense_label=config.defense_label(),
        parameter_count=count_parameters(config.model),
        victim_indices=[],
        victim_labels=[],
        originals=torch.zeros((0, *config.model.input_shape)),
        rounds=rounds,
        accuracy=accuracy,
    )
    if mode == "train":
        bundle.environment = _environment(config, mode, 0)
        save_bundle(bundle, root)
        emit_report(bundle, root)
        return bundle

    if config.victims.client >= len(partition.clients):
        raise ConfigError(f"Victim client {config.victims.client} does not exist")
    victims = sample_victims(partition.clients[config.victims.client].train, config.victims.count, config.seed, state, config.defense)
    bundle.victim_indices = [victim.sample for victim in victims]
    bundle.victim_labels = [victim.label for victim in victims]
    bundle.originals = torch.stack([victim.image for victim in victims])

    failures = 0
    for run_index, attack in enumerate(config.attacks):
        def attack_one(index: int) -> AttackResult:
            return _attack_victim(state, victims[index], index, attack, run_index, config.seed, root)

        indices = range(len(victims))
        desc = f"{attack.label()} victims"
        if config.workers > 1:
            with ThreadPoolExecutor(max_workers=config.workers) as pool:
                results = list(tqdm(pool.map(attack_one, indices), total=len(victims), desc=desc, disable=not config.progress))
        else:
            results = [attack_one(index) for index in tqdm(indices, desc=desc, disable=not config.progress)]
        failures += sum(1 for result in results if result.error and result.error.startswith(NumericalFailure.__name__))
        report = MetricReport.from_metrics([result.metrics for result in results])
        bundle.runs.append(AttackRun(attack=attack, results=results, report=report))
        logger.info(
            f"📋 {config.defense_label()} / {attack.label()}: SSIM {report.ssim_mean:.3f} ± {report.ssim_std:.3f}, "
            f"ASR {report.asr:.2f}%"
        )

    bundle.environment = _environment(config, mode, failures)
    save_bundle(bundle, root)
    emit_report(bundle, root)
    return bundle


def _sweep_label(module: PrivacyModuleSpec, positions: Tuple[int, ...]) -> str:
    where = "-".join(str(p) for p in positions)
    if module.kind == "precode":
        return f"precode_P{where}_b{module.loss_weight:g}"
    return f"cvb_P{where}_k{module.kernel_size}_s{module.bottleneck_scale:g}_b{module.loss_weight:g}"


def expand_sweep(config: ExperimentConfig) -> List[Tuple[str, ExperimentConfig]]:
    """Cartesian grid over beta, kernel size, bottleneck scale and position.

    Grid points whose geometry does not fit the model are skipped with a warning.
    """
    if config.sweep.empty:
        return [(config.name, config)]
    base = config.model.privacy[0] if config.model.privacy else PrivacyModuleSpec(kind="cvb")
    axes = config.sweep
    grid = itertools.product(
        axes.beta or [base.beta],
        axes.kernel_size or [base.kernel_size],
        axes.bottleneck_scale or [base.bottleneck_scale],
        axes.position or [tuple(module.position for module in config.model.privacy) or (base.position,)],
    )
    expanded = []
    for beta, kernel, scale, position in grid:
        positions = (position,) if isinstance(position, int) else tuple(position)
        modules = tuple(
            PrivacyModuleSpec.model_validate(
                {**base.model_dump(), "beta": beta, "kernel_size": kernel, "bottleneck_scale": scale, "position": p}
            )
            for p in positions
        )
        model = config.model.model_copy(update={"privacy": modules})
        label = _sweep_label(modules[0], positions)
        try:
            check_geometry(model)
        except InvalidSpec as exc:
            logger.warning(f"⚠️ Skipping sweep point {label}: {exc}")
            continue
        point = config.model_copy(
            update={
                "name": f"{config.name}/{label}",
                "model": model,
                "defense": config.defense.model_copy(update={"kind": base.kind}),
                "output_dir": str(Path(config.output_dir) / label),
                "sweep": SweepConfig(),
            }
        )
        expanded.append((label, point))
    logger.info(f"📋 Sweep expanded to {len(expanded)} configurations")
    return expanded


def run_sweep(config: ExperimentConfig, mode: str = "attack") -> List[ResultsBundle]:
    bundles = [run_experiment(point, mode) for _, point in expand_sweep(config)]
    write_summary_csv(bundles, Path(config.output_dir) / "summary.csv")
    return bundles


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Gradient leakage lab: FedAvg, defenses and inversion attacks")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("train", "run the federation and write a checkpoint"),
        ("attack", "attack a victim set on the round-0 or checkpoint model"),
        ("sweep", "run attack experiments over the sweep grid"),
        ("report", "re-render CSVs and plots from a results directory"),
    ):
        command = sub.add_parser(name, help=help_text)
        command.add_argument("--out", help="output directory (GILAB_OUT)")
        if name == "report":
            continue
        command.add_argument("--config", default="experiment.yaml", help="experiment YAML file")
        command.add_argument("--seed", type=int, help="master seed (GILAB_SEED)")
        command.add_argument("--checkpoint", help="model checkpoint to attack (GILAB_CHECKPOINT)")
        command.add_argument("--victims", type=int, metavar="N", help="victim count (GILAB_VICTIMS)")
        command.add_argument("--precision", type=int, choices=(32, 64), help="floating point precision (GILAB_PRECISION)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=os.getenv("GILAB_LOG_LEVEL", "INFO").upper(),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        if args.command == "report":
            out = args.out or os.getenv("GILAB_OUT")
            if not out:
                raise ConfigError("report needs --out or GILAB_OUT")
            emit_report(load_bundle(out), Path(out))
            return 0
        config = load_config(
            args.config,
            overrides={
                "seed": args.seed,
                "output_dir": args.out,
                "checkpoint": args.checkpoint,
                "victims.count": args.victims,
                "precision": args.precision,
            },
        )
        if args.command == "sweep":
            bundles = run_sweep(config)
        else:
            bundles = [run_experiment(config, mode=args.command)]
    except ConfigError as exc:
        logger.error(f"❌ Configuration error: {exc}")
        return 2
    except NumericalFailure as exc:
        logger.error(f"❌ Numerical failure: {exc}")
        return 1
    except LabError as exc:
        logger.error(f"❌ {type(exc).__name__}: {exc}")
        return 1
    failures = sum(bundle.environment.get("numerical_failures", 0) for bundle in bundles)
    if failures:
        logger.error(f"❌ {failures} victim attacks ended in a numerical failure")
        return 1
    logger.info(f"✅ Done: {len(bundles)} result bundle(s) under {config.output_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
