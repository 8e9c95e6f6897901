"""
Desk-scale reproductions: 16 victims, 4000-iteration attacks on an untrained CNN and a
short MNIST federation. Enabled with GILAB_RUN_SLOW=1; GILAB_DATA_DIR must hold the
CIFAR-10 binary release and the MNIST IDX files.
"""

import os
import statistics

import pytest

from attacks import AttackSpec
from defenses import DefenseSpec
from fedsim import FedConfig
from labbench import DatasetConfig, ExperimentConfig, VictimConfig, run_experiment
from models import ModelSpec
from privacy_modules import PrivacyModuleSpec

pytestmark = pytest.mark.slow

DATA_DIR = os.getenv("GILAB_DATA_DIR")
VICTIMS = 16
BUDGET = 4000

needs_data = pytest.mark.skipif(not DATA_DIR, reason="GILAB_DATA_DIR is not set")


def _attack(kind, **fields):
    return AttackSpec(kind=kind, max_iterations=BUDGET, **fields)


def _cifar(tmp_path, model, defense, attacks, name):
    config = ExperimentConfig(
        name=name,
        dataset=DatasetConfig(id="cifar10", path=DATA_DIR),
        model=model,
        defense=defense,
        attacks=tuple(attacks),
        victims=VictimConfig(count=VICTIMS),
        output_dir=str(tmp_path / name),
        progress=False,
    )
    return run_experiment(config)


def _with(*modules):
    return ModelSpec(privacy=tuple(modules))


CVB = PrivacyModuleSpec(kind="cvb", position=1, kernel_size=5, bottleneck_scale=0.5, beta=0.1)
PRECODE_P3 = PrivacyModuleSpec(kind="precode", position=3, bottleneck_size=32)
PRECODE_P2 = PrivacyModuleSpec(kind="precode", position=2, bottleneck_size=16)


@needs_data
class TestLeakageTables:
    def test_unprotected_ig(self, tmp_path):
        bundle = _cifar(tmp_path, ModelSpec(), DefenseSpec(), [_attack("ig")], "baseline")
        assert bundle.runs[0].report.asr >= 75.0

    def test_cvb_against_ignore(self, tmp_path):
        bundle = _cifar(tmp_path, _with(CVB), DefenseSpec(kind="cvb"), [_attack("ignore")], "cvb")
        report = bundle.runs[0].report
        assert report.asr == 0.0
        assert report.ssim_mean <= 0.35

    @pytest.mark.parametrize(
        "defense",
        [DefenseSpec(kind="dp", clip_threshold=20.0, noise_multiplier=0.1), DefenseSpec(kind="gc", pruning_ratio=0.99)],
        ids=["dp", "gc"],
    )
    def test_gradient_perturbation(self, tmp_path, defense):
        bundle = _cifar(tmp_path, ModelSpec(), defense, [_attack("ig")], defense.kind)
        assert bundle.runs[0].report.asr == 0.0

    def test_precode_layer_masking(self, tmp_path):
        attacks = [
            _attack("ig"),
            _attack("ignore"),
            _attack("ig", exclude_layers=("vb3.decoder",)),
            _attack("ig", exclude_layers=("classifier",)),
        ]
        full, ignore, decoder_only, classifier_only = _cifar(
            tmp_path, _with(PRECODE_P3), DefenseSpec(kind="precode"), attacks, "precode-p3"
        ).runs
        assert full.report.asr == 0.0
        assert ignore.report.asr >= 50.0
        assert decoder_only.report.asr == 0.0
        assert classifier_only.report.asr == 0.0

    def test_precode_after_conv2(self, tmp_path):
        bundle = _cifar(tmp_path, _with(PRECODE_P2), DefenseSpec(kind="precode"), [_attack("ignore")], "precode-p2")
        assert bundle.runs[0].report.asr <= 15.0


@needs_data
class TestTrajectories:
    def test_classifier_cosine_of_successful_runs(self, tmp_path):
        bundle = _cifar(tmp_path, ModelSpec(), DefenseSpec(), [_attack("ig", record_trajectory=True)], "trajectory")
        successful = [result for result in bundle.runs[0].results if result.succeeded]
        assert successful
        for result in successful:
            assert result.trajectory.cosine["classifier"][-1] >= 0.9

    def test_decoder_cosine_under_precode(self, tmp_path):
        bundle = _cifar(
            tmp_path, _with(PRECODE_P3), DefenseSpec(kind="precode"), [_attack("ig", record_trajectory=True)], "trajectory-vb"
        )
        for result in bundle.runs[0].results:
            if result.trajectory is None:
                continue
            series = result.trajectory.cosine["vb3.decoder"]
            assert statistics.fmean(series) <= 0.4
            assert statistics.pstdev(series) >= 0.05


@needs_data
class TestFederatedUtility:
    def _train(self, tmp_path, model, defense, name):
        config = ExperimentConfig(
            name=name,
            dataset=DatasetConfig(id="mnist", path=DATA_DIR, limit=2000, test_limit=2000),
            model=model,
            defense=defense,
            federation=FedConfig(num_clients=2, rounds=10, patience=0),
            output_dir=str(tmp_path / name),
            progress=False,
        )
        return run_experiment(config, mode="train").accuracy

    def test_mnist_accuracy_with_and_without_cvb(self, tmp_path):
        baseline = self._train(tmp_path, ModelSpec(input_shape=(1, 32, 32)), DefenseSpec(), "mnist")
        protected = self._train(
            tmp_path, ModelSpec(input_shape=(1, 32, 32), privacy=(CVB,)), DefenseSpec(kind="cvb"), "mnist-cvb"
        )
        assert baseline >= 90.0
        assert abs(protected - baseline) <= 3.0
