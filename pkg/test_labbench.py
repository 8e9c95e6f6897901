import csv
from pathlib import Path

import pytest
import torch

from attacks import AttackSpec
from datasets import load_dataset
from defenses import DefenseSpec
from errors import ConfigError, InvalidInput
from fedsim import FedConfig
from labbench import (
    DatasetConfig,
    ExperimentConfig,
    SweepConfig,
    VictimConfig,
    _interpolate,
    expand_sweep,
    load_config,
    main,
    run_experiment,
    sample_victims,
)
from metrics import asr
from models import build_model
from persistence import load_bundle
from privacy_modules import PrivacyModuleSpec

TINY_YAML = """
name: tiny
seed: 1
output_dir: "${TINY_OUT:-runs/tiny}"
dataset:
  id: synthetic
  options: {size: 60, test_size: 12, num_classes: 3, shape: [1, 12, 12]}
model:
  input_shape: [1, 12, 12]
  num_classes: 3
  conv_channels: [2, 3]
  kernel_size: 3
attacks:
  - kind: ig
    max_iterations: 5
federation: {num_clients: 2, rounds: 1, batch_size: 8, patience: 0}
victims: {count: 2}
progress: false
"""


@pytest.fixture
def tiny_config(tiny_cnn_spec, tmp_path):
    return ExperimentConfig(
        name="tiny",
        seed=3,
        dataset=DatasetConfig(id="synthetic", options={"size": 60, "test_size": 12, "num_classes": 3, "shape": [1, 12, 12]}),
        model=tiny_cnn_spec,
        attacks=(AttackSpec(kind="ig", max_iterations=5),),
        federation=FedConfig(num_clients=2, rounds=1, batch_size=8, patience=0),
        victims=VictimConfig(count=2),
        output_dir=str(tmp_path / "run"),
        progress=False,
    )


def _at(config, directory, **changes):
    return config.model_copy(update={"output_dir": str(directory), **changes})


class TestConfig:
    def test_interpolation(self):
        raw = {"out": "${OUT_DIR:-runs}/a", "items": ["${NAME}"], "n": 3}
        assert _interpolate(raw, {"NAME": "x"}) == {"out": "runs/a", "items": ["x"], "n": 3}
        assert _interpolate(raw, {"NAME": "x", "OUT_DIR": "/tmp"})["out"] == "/tmp/a"

    def test_unresolved_reference(self):
        with pytest.raises(ConfigError):
            _interpolate({"path": "${MISSING_VARIABLE}"}, {})

    def test_precedence(self, tmp_path):
        path = tmp_path / "tiny.yaml"
        path.write_text(TINY_YAML)
        assert load_config(path, env={}).seed == 1
        assert load_config(path, env={"TINY_OUT": "elsewhere"}).output_dir == "elsewhere"
        assert load_config(path, env={"GILAB_SEED": "9", "GILAB_PRECISION": "64"}).precision == 64
        assert load_config(path, env={"GILAB_SEED": "9"}).seed == 9
        assert load_config(path, env={"GILAB_SEED": "9"}, overrides={"seed": 11}).seed == 11
        assert load_config(path, env={"GILAB_VICTIMS": "7"}).victims.count == 7

    def test_bad_override(self, tmp_path):
        path = tmp_path / "tiny.yaml"
        path.write_text(TINY_YAML)
        with pytest.raises(ConfigError):
            load_config(path, env={"GILAB_SEED": "abc"})

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.yaml", env={})

    def test_defense_must_match_the_model(self, cnn_spec):
        protected = cnn_spec.model_copy(update={"privacy": (PrivacyModuleSpec(kind="cvb", position=1),)})
        with pytest.raises(ValueError):
            ExperimentConfig(model=protected, defense=DefenseSpec(kind="none"))
        with pytest.raises(ValueError):
            ExperimentConfig(model=cnn_spec, defense=DefenseSpec(kind="precode"))
        assert ExperimentConfig(model=protected, defense=DefenseSpec(kind="cvb")).defense_label() == protected.privacy[0].label()

    def test_shipped_experiment_file(self):
        config = load_config(Path(__file__).parent / "experiment.yaml", env={})
        assert config.model.privacy[0].kind == "cvb"
        assert [attack.kind for attack in config.attacks] == ["ig", "ignore"]
        assert config.victims.count == 128


class TestSweep:
    def test_grid_skips_impossible_geometry(self, cnn_spec):
        model = cnn_spec.model_copy(update={"privacy": (PrivacyModuleSpec(kind="cvb", position=1),)})
        config = ExperimentConfig(
            model=model,
            defense=DefenseSpec(kind="cvb"),
            sweep=SweepConfig(beta=[0.1, 1.0], kernel_size=[3, 5], position=[1, 3]),
        )
        points = expand_sweep(config)
        assert len(points) == 4
        assert all(point.model.privacy[0].position == 1 for _, point in points)
        assert len({label for label, _ in points}) == 4
        assert all(point.sweep.empty for _, point in points)

    def test_multiple_positions(self, cnn_spec):
        model = cnn_spec.model_copy(update={"privacy": (PrivacyModuleSpec(kind="cvb", position=1, kernel_size=3),)})
        config = ExperimentConfig(model=model, defense=DefenseSpec(kind="cvb"), sweep=SweepConfig(kernel_size=[3], position=[[1, 2]]))
        (_, point), = expand_sweep(config)
        assert [module.position for module in point.model.privacy] == [1, 2]

    def test_empty_sweep(self):
        config = ExperimentConfig()
        assert expand_sweep(config) == [(config.name, config)]


class TestSampleVictims:
    def test_distinct_and_deterministic(self, tiny_cnn_spec):
        split = load_dataset("synthetic", size=30, test_size=3, num_classes=3, shape=(1, 12, 12)).train
        model = build_model(tiny_cnn_spec, seed=0)
        first = sample_victims(split, 8, 5, model)
        second = sample_victims(split, 8, 5, model)
        assert len({victim.sample for victim in first}) == 8
        assert [v.sample for v in first] == [v.sample for v in second]
        assert all(torch.equal(a.gradients.flat(), b.gradients.flat()) for a, b in zip(first, second))
        assert all(v.label == int(split.labels[v.sample]) for v in first)

    def test_too_many(self, tiny_cnn_spec):
        split = load_dataset("synthetic", size=10, test_size=3, num_classes=3, shape=(1, 12, 12)).train
        with pytest.raises(InvalidInput):
            sample_victims(split, 11, 0, build_model(tiny_cnn_spec))


class TestRunExperiment:
    def test_attack_run(self, tiny_config):
        bundle = run_experiment(tiny_config)
        (run,) = bundle.runs
        assert len(run.results) == 2
        assert all(result.iterations <= 5 for result in run.results)
        assert run.report.asr == asr(run.report.ssim)
        root = tiny_config.output_dir
        with open(f"{root}/summary.csv", newline="") as handle:
            rows = list(csv.reader(handle))
        assert rows[0] == ["defense", "params", "ssim_mean", "ssim_std", "asr", "psnr_mean", "accuracy"]
        assert float(rows[1][4]) == pytest.approx(run.report.asr, abs=1e-3)
        assert load_bundle(root).runs[0].report == run.report

    def test_reproducible(self, tiny_config, tmp_path):
        first = run_experiment(_at(tiny_config, tmp_path / "a"))
        second = run_experiment(_at(tiny_config, tmp_path / "b"))
        assert first.runs[0].report == second.runs[0].report
        assert first.victim_indices == second.victim_indices

    def test_workers_do_not_change_results(self, tiny_config, tmp_path):
        serial = run_experiment(_at(tiny_config, tmp_path / "serial"))
        threaded = run_experiment(_at(tiny_config, tmp_path / "threaded", workers=2))
        assert serial.runs[0].report == threaded.runs[0].report

    def test_train_then_attack_the_checkpoint(self, tiny_config, tmp_path):
        trained = run_experiment(_at(tiny_config, tmp_path / "train"), mode="train")
        assert len(trained.rounds) == 1
        checkpoint = tmp_path / "train" / "model.ckpt"
        assert checkpoint.exists()
        attacked = run_experiment(_at(tiny_config, tmp_path / "attack", checkpoint=str(checkpoint)))
        assert attacked.accuracy == trained.accuracy

    def test_dataset_shape_mismatch(self, tiny_config, cnn_spec):
        with pytest.raises(ConfigError):
            run_experiment(tiny_config.model_copy(update={"model": cnn_spec}))


class TestMain:
    def test_configuration_error_exit_code(self, tmp_path):
        assert main(["attack", "--config", str(tmp_path / "missing.yaml")]) == 2

    def test_attack_then_report(self, tmp_path, monkeypatch):
        path = tmp_path / "tiny.yaml"
        path.write_text(TINY_YAML)
        out = tmp_path / "out"
        monkeypatch.setenv("TINY_OUT", str(out))
        assert main(["attack", "--config", str(path), "--victims", "1"]) == 0
        assert (out / "results.json").exists()
        (out / "summary.csv").unlink()
        assert main(["report", "--out", str(out)]) == 0
        assert (out / "summary.csv").exists()
