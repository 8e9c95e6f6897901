import pytest
import torch
from pydantic import ValidationError

from attacks import (
    AttackSpec,
    TrajectoryRecorder,
    analytic_fc_input,
    analytic_layer_input,
    cpl_label_term,
    gradient_distance,
    ignore_mask,
    init_dummy,
    layer_mask,
    plateau_scheduler,
    reconstruction_loss,
    recover_label,
    run_attack,
    total_variation,
)
from diffcore import GradientEntry, LayerGradients, RandomStream, full_mask, param_gradients
from errors import AmbiguousLabel, DegenerateGradient, InvalidInput, InvalidMask, InvalidSpec, NoBias, NoUsableRow
from models import ModelSpec, build_model
from privacy_modules import PrivacyModuleSpec


def _two_layers(first, second):
    return LayerGradients(
        [
            GradientEntry("a", "weight", torch.as_tensor(first, dtype=torch.float64)),
            GradientEntry("b", "weight", torch.as_tensor(second, dtype=torch.float64)),
        ]
    )


@pytest.fixture
def victim(tiny_cnn_spec):
    model = build_model(tiny_cnn_spec, seed=3, precision=64)
    x = torch.rand((1, 12, 12), generator=torch.Generator().manual_seed(3), dtype=torch.float64)
    _, grads = param_gradients(model, x, 1)
    return model, x, grads


class TestAttackSpec:
    @pytest.mark.parametrize(
        "kind,distance,tv_weight,label_weight,ignore",
        [("idlg", "euclidean", 0.0, 0.0, False), ("cpl", "euclidean", 0.0, 1.0, False), ("ig", "cosine", 0.01, 0.0, False), ("ignore", "cosine", 0.01, 0.0, True)],
    )
    def test_presets(self, kind, distance, tv_weight, label_weight, ignore):
        spec = AttackSpec(kind=kind)
        assert (spec.distance, spec.tv_weight, spec.cpl_label_weight, spec.ignore_stochastic) == (distance, tv_weight, label_weight, ignore)

    def test_explicit_fields_override_the_preset(self):
        assert AttackSpec(kind="ig", tv_weight=0.1).tv_weight == 0.1
        assert AttackSpec(kind="idlg", distance="cosine").distance == "cosine"

    def test_optimizer_defaults(self):
        spec = AttackSpec()
        assert (spec.lr, spec.lr_decay_factor, spec.lr_patience) == (1.0, 0.1, 400)
        assert (spec.loss_floor, spec.stagnation_limit, spec.max_iterations) == (1e-5, 4000, 20000)

    def test_iteration_cap(self):
        with pytest.raises(ValidationError):
            AttackSpec(max_iterations=20001)


def test_init_dummy_is_deterministic():
    assert torch.equal(init_dummy((3, 4, 4), 9), init_dummy((3, 4, 4), 9))
    assert not torch.equal(init_dummy((3, 4, 4), 9), init_dummy((3, 4, 4), 10))


class TestGradientDistance:
    @pytest.mark.parametrize("kind", ["euclidean", "cosine"])
    def test_identical_gradients(self, kind):
        grads = _two_layers([1.0, -2.0], [[0.5, 3.0]])
        assert float(gradient_distance(grads, grads, full_mask(["a", "b"]), kind)) == pytest.approx(0.0, abs=1e-12)

    def test_cosine_is_scale_invariant(self):
        grads = _two_layers([1.0, -2.0], [[0.5, 3.0]])
        assert float(gradient_distance(grads.scaled(2.0), grads, full_mask(["a", "b"]), "cosine")) == pytest.approx(0.0, abs=1e-12)

    def test_euclidean_sums_squared_differences(self):
        dummy = _two_layers([1.0, 0.0], [[0.0, 0.0]])
        target = _two_layers([0.0, 0.0], [[2.0, 0.0]])
        assert float(gradient_distance(dummy, target, full_mask(["a", "b"]), "euclidean")) == pytest.approx(5.0)

    @pytest.mark.parametrize("kind", ["euclidean", "cosine"])
    def test_masked_out_mismatch_is_ignored(self, kind):
        dummy = _two_layers([1.0, -2.0], [[7.0, 7.0]])
        target = _two_layers([1.0, -2.0], [[0.5, 3.0]])
        assert float(gradient_distance(dummy, target, {"a": True, "b": False}, kind)) == pytest.approx(0.0, abs=1e-12)

    def test_cosine_of_zero_gradient(self):
        zero = _two_layers([0.0, 0.0], [[0.0, 0.0]])
        with pytest.raises(DegenerateGradient):
            gradient_distance(zero, _two_layers([1.0, 0.0], [[0.0, 1.0]]), full_mask(["a", "b"]), "cosine")

    def test_mask_errors(self):
        grads = _two_layers([1.0], [[1.0]])
        with pytest.raises(InvalidMask):
            gradient_distance(grads, grads, {"a": False, "b": False})
        with pytest.raises(InvalidMask):
            gradient_distance(grads, grads, {"a": True, "c": True})


class TestRegularizers:
    def test_constant_image_has_no_variation(self):
        assert float(total_variation(torch.full((3, 5, 5), 0.3))) == 0.0

    def test_horizontal_steps(self):
        img = torch.tensor([[[0.0, 1.0], [0.0, 1.0]]])
        assert float(total_variation(img)) == 2.0
        assert float(total_variation(img, "mean")) == 1.0

    def test_cpl_term(self):
        onehot = torch.zeros(10)
        onehot[4] = 1.0
        assert float(cpl_label_term(onehot, 4)) == 0.0
        assert float(cpl_label_term(torch.full((10,), 0.1), 4)) == pytest.approx(0.90)


class TestRecoverLabel:
    def test_single_negative_row(self):
        grads = torch.ones(10, 6)
        grads[3] = -0.5
        assert recover_label(grads) == 3

    def test_all_positive_rows(self):
        with pytest.raises(AmbiguousLabel):
            recover_label(torch.ones(10, 6))

    def test_end_to_end(self, cnn_model):
        generator = torch.Generator().manual_seed(0)
        for _ in range(100):
            x = torch.rand((3, 32, 32), generator=generator)
            y = int(torch.randint(10, (1,), generator=generator))
            _, grads = param_gradients(cnn_model, x, y)
            assert recover_label(grads.get("classifier", "weight")) == y


class TestMasks:
    def _spec(self, cnn_spec, position, size):
        return cnn_spec.model_copy(update={"privacy": (PrivacyModuleSpec(kind="precode", position=position, bottleneck_size=size),)})

    def test_precode_after_conv3(self, cnn_spec):
        mask = ignore_mask(self._spec(cnn_spec, 3, 32))
        assert [layer for layer, keep in mask.items() if keep] == ["conv1", "conv2", "conv3", "vb3.encoder"]
        assert [layer for layer, keep in mask.items() if not keep] == ["vb3.decoder", "classifier"]

    def test_precode_after_conv2(self, cnn_spec):
        mask = ignore_mask(self._spec(cnn_spec, 2, 16))
        assert [layer for layer, keep in mask.items() if keep] == ["conv1", "conv2", "vb2.encoder"]
        assert [layer for layer, keep in mask.items() if not keep] == ["vb2.decoder", "conv3", "classifier"]

    def test_cvb_encoders_stay(self, cnn_spec):
        spec = cnn_spec.model_copy(update={"privacy": (PrivacyModuleSpec(kind="cvb", position=1),)})
        mask = ignore_mask(spec)
        assert [layer for layer, keep in mask.items() if keep] == ["conv1", "cvb1.enc_mu", "cvb1.enc_logvar"]

    def test_baseline_has_nothing_to_ignore(self, cnn_spec):
        with pytest.raises(InvalidSpec):
            ignore_mask(cnn_spec)

    def test_excluded_layers(self, cnn_spec):
        mask = layer_mask(cnn_spec, AttackSpec(kind="ig", exclude_layers=("classifier",)))
        assert mask == {"conv1": True, "conv2": True, "conv3": True, "classifier": False}

    def test_excluding_unknown_or_every_layer(self, cnn_spec):
        with pytest.raises(InvalidMask):
            layer_mask(cnn_spec, AttackSpec(exclude_layers=("fc9",)))
        with pytest.raises(InvalidMask):
            layer_mask(cnn_spec, AttackSpec(exclude_layers=("conv1", "conv2", "conv3", "classifier")))


class TestRunAttack:
    def test_exact_victim_stops_immediately(self, victim):
        model, x, grads = victim
        result = run_attack(model, grads, x.shape, 1, AttackSpec(kind="idlg"), RandomStream(0), init=x, reference=x)
        assert result.stop_reason == "loss_floor"
        assert result.iterations == 0
        assert result.best_loss < 1e-5
        assert torch.equal(result.reconstruction, x)
        assert result.metrics.ssim == pytest.approx(1.0)

    def test_loss_never_ends_above_the_start(self, victim):
        model, x, grads = victim
        spec = AttackSpec(kind="ig", max_iterations=30)
        start = init_dummy(x.shape, 5, dtype=torch.float64)
        initial, _, _ = reconstruction_loss(model, start, 1, grads, full_mask(grads.layers()), tv_weight=0.01)
        result = run_attack(model, grads, x.shape, 1, spec, RandomStream(5), init=start)
        assert result.stop_reason in ("max_iters", "loss_floor")
        assert result.iterations <= 30
        assert result.best_loss <= float(initial)
        assert result.reconstruction.shape == x.shape

    def test_recovered_label(self, cnn_model, image):
        _, grads = param_gradients(cnn_model, image, 6)
        spec = AttackSpec(kind="idlg", label_mode="recovered", max_iterations=2)
        assert run_attack(cnn_model, grads, image.shape, None, spec, RandomStream(0)).label == 6

    def test_known_label_required(self, victim):
        model, x, grads = victim
        with pytest.raises(InvalidInput):
            run_attack(model, grads, x.shape, None, AttackSpec(kind="idlg"), RandomStream(0))

    def test_shape_mismatch(self, victim):
        model, _, grads = victim
        with pytest.raises(InvalidInput):
            run_attack(model, grads, (1, 10, 10), 1, AttackSpec(), RandomStream(0))

    def test_trajectory_has_one_point_per_step(self, victim):
        model, x, grads = victim
        result = run_attack(model, grads, x.shape, 1, AttackSpec(kind="ig", max_iterations=7, record_trajectory=True), RandomStream(2))
        record = result.trajectory
        assert record.layers == grads.layers()
        assert record.iterations == result.iterations
        assert all(-1.0 <= value <= 1.0 for series in record.cosine.values() for value in series)
        assert all(len(entry.values) == result.iterations for entry in record.tracked)

    def test_ignore_attack_on_a_stochastic_model(self, tiny_cnn_spec):
        spec = tiny_cnn_spec.model_copy(update={"privacy": (PrivacyModuleSpec(kind="cvb", position=1, kernel_size=3),)})
        model = build_model(spec, seed=0, precision=64)
        x = torch.rand((1, 12, 12), generator=torch.Generator().manual_seed(1), dtype=torch.float64)
        _, grads = param_gradients(model, x, 0, RandomStream(4))
        result = run_attack(model, grads, x.shape, 0, AttackSpec(kind="ignore", max_iterations=5), RandomStream(6), reference=x)
        assert result.iterations <= 5
        assert 0.0 <= result.metrics.mse <= 1.0

    @pytest.mark.parametrize(
        "privacy,attack",
        [
            ((PrivacyModuleSpec(kind="cvb", position=1, kernel_size=3),), AttackSpec(kind="ignore", max_iterations=10)),
            ((), AttackSpec(kind="ig", exclude_layers=("classifier",), max_iterations=10)),
        ],
    )
    def test_masked_out_layers_do_not_change_the_reconstruction(self, tiny_cnn_spec, privacy, attack):
        spec = tiny_cnn_spec.model_copy(update={"privacy": privacy})
        model = build_model(spec, seed=0, precision=64)
        x = torch.rand((1, 12, 12), generator=torch.Generator().manual_seed(1), dtype=torch.float64)
        _, grads = param_gradients(model, x, 0, RandomStream(4))
        mask = layer_mask(spec, attack)
        shift = RandomStream(8)
        perturbed = LayerGradients(
            GradientEntry(e.layer, e.kind, e.values if mask[e.layer] else e.values + shift.normal(e.values.shape, dtype=e.values.dtype))
            for e in grads
        )
        assert not torch.equal(perturbed.get("classifier"), grads.get("classifier"))
        first = run_attack(model, grads, x.shape, 0, attack, RandomStream(6))
        second = run_attack(model, perturbed, x.shape, 0, attack, RandomStream(6))
        assert torch.equal(first.reconstruction, second.reconstruction)
        assert first.best_loss == second.best_loss
        assert first.best_history == second.best_history

    def test_running_best_loss_never_increases(self, victim):
        model, x, grads = victim
        result = run_attack(model, grads, x.shape, 1, AttackSpec(kind="ig", max_iterations=40), RandomStream(3))
        history = result.best_history
        assert len(history) == result.iterations + 1
        assert all(later <= earlier for earlier, later in zip(history, history[1:]))
        assert history[-1] == result.best_loss

    def test_no_warning_from_the_distance(self, victim, recwarn):
        model, x, grads = victim
        run_attack(model, grads, x.shape, 1, AttackSpec(kind="ig", max_iterations=3), RandomStream(1))
        assert not [w for w in recwarn if issubclass(w.category, UserWarning) and "requires_grad" in str(w.message)]


class TestPlateauScheduler:
    def _optimizer(self):
        return torch.optim.Adam([torch.zeros(2, requires_grad=True)], lr=1.0)

    @pytest.mark.parametrize("patience", [1, 3, 400])
    def test_decays_after_exactly_patience_stagnant_steps(self, patience):
        optimizer = self._optimizer()
        scheduler = plateau_scheduler(optimizer, AttackSpec(lr_patience=patience))
        scheduler.step(1.0)
        stagnant = 0
        while optimizer.param_groups[0]["lr"] == 1.0:
            scheduler.step(1.0)
            stagnant += 1
            assert stagnant <= patience
        assert stagnant == patience
        assert optimizer.param_groups[0]["lr"] == pytest.approx(0.1)

    def test_strict_improvement_restarts_the_count(self):
        optimizer = self._optimizer()
        scheduler = plateau_scheduler(optimizer, AttackSpec(lr_patience=4))
        for loss in (1.0, 1.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.5):
            scheduler.step(loss)
        assert optimizer.param_groups[0]["lr"] == 1.0
        scheduler.step(0.5)
        assert optimizer.param_groups[0]["lr"] == pytest.approx(0.1)

    def test_patience_must_be_positive(self):
        with pytest.raises(ValidationError):
            AttackSpec(lr_patience=0)


class TestTrajectoryRecorder:
    def test_matching_gradients_have_unit_cosine(self):
        grads = _two_layers([1.0, -2.0, 0.5], [[0.5, 3.0]])
        recorder = TrajectoryRecorder(grads, RandomStream(0))
        for _ in range(3):
            recorder.observe(grads)
        record = recorder.record()
        assert all(series == pytest.approx([1.0] * 3) for series in record.cosine.values())
        assert all(entry.values == [entry.target] * 3 for entry in record.tracked)


class TestAnalyticAttack:
    def test_row_division(self):
        x = analytic_fc_input(torch.tensor([[2.0, 4.0, 6.0]]), torch.tensor([2.0]))
        assert x.tolist() == [1.0, 2.0, 3.0]

    def test_largest_bias_row_is_used(self):
        weight = torch.tensor([[1.0, 1.0], [-6.0, 3.0]])
        assert analytic_fc_input(weight, torch.tensor([0.5, -3.0])).tolist() == [2.0, -1.0]

    def test_recovers_the_input_of_the_first_dense_layer(self):
        spec = ModelSpec(family="mlp", input_shape=(1, 4, 4), num_classes=5, mlp_width=32, mlp_hidden_layers=2, batch_norm=False, dense_bias=True)
        generator = torch.Generator().manual_seed(0)
        for seed in range(100):
            model = build_model(spec, seed=seed, precision=64)
            x = torch.rand((1, 4, 4), generator=generator, dtype=torch.float64)
            _, grads = param_gradients(model, x, seed % 5)
            recovered = analytic_layer_input(grads, "fc1")
            assert float((recovered - x.reshape(-1)).norm() / x.norm()) <= 1e-5, seed

    def test_bias_free_layer(self, tiny_mlp_spec):
        spec = tiny_mlp_spec.model_copy(update={"dense_bias": False})
        _, grads = param_gradients(build_model(spec, seed=0, precision=64), torch.rand((1, 3, 3), dtype=torch.float64), 0)
        with pytest.raises(NoBias):
            analytic_layer_input(grads, "fc1")

    def test_zero_bias_gradient(self):
        with pytest.raises(NoUsableRow):
            analytic_fc_input(torch.ones(3, 4), torch.zeros(3))

    def test_not_a_dense_layer(self, victim):
        _, _, grads = victim
        with pytest.raises(InvalidInput):
            analytic_layer_input(grads, "conv1")
