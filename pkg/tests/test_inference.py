"""Early-exit policy behavior: extremes, monotonicity, cache equivalence."""

import numpy as np
import pytest

from eevit.autograd import Tensor, no_grad
from eevit.config import build_run_config, build_system
from eevit.data import build_dataset
from eevit.inference import (
    EmptyDatasetError,
    ExitPolicy,
    classifier_confidence,
    evaluate_dataset,
    infer_early_exit,
    threshold_sweep,
)
from eevit.losses import InvalidDistributionError
from eevit.train import stage1_train, stage2_train


@pytest.fixture(scope="module")
def trained():
    run = build_run_config(
        {
            "model.image_side": "16",
            "model.patch_side": "8",
            "model.layers": "6",
            "model.dim": "16",
            "model.heads": "2",
            "model.num_classes": "4",
            "model.mlp_ratio": "2",
            "exits.positions": "2,3,4,5",
            "data.per_class": "12",
            "train.epochs_stage1": "4",
            "train.epochs_stage2": "4",
            "train.batch_size": "16",
        }
    )
    system = build_system(run)
    dataset = build_dataset(run.data)
    stage1_train(system.model, dataset, run.train)
    stage2_train(system.model, system.branches, dataset, run.train, system.placement)
    return run, system, dataset


class TestConfidence:
    def test_uniform_hundred_classes(self):
        assert classifier_confidence(np.full(100, 0.01)) == pytest.approx(0.01)

    def test_simple_max(self):
        assert classifier_confidence(np.array([0.7, 0.2, 0.1])) == 0.7

    def test_one_hot(self):
        assert classifier_confidence(np.array([0.0, 1.0, 0.0])) == 1.0

    def test_invalid_distribution(self):
        with pytest.raises(InvalidDistributionError):
            classifier_confidence(np.array([0.9, 0.4]))


class TestPolicy:
    def test_negative_tau_rejected(self):
        with pytest.raises(ValueError):
            ExitPolicy(-0.5)

    def test_above_one_allowed(self):
        assert not ExitPolicy(1.0).fires(1.0)
        assert not ExitPolicy(1.5).fires(1.0)
        assert ExitPolicy(0.0).fires(1e-9)


class TestSingleSample:
    def test_tau_above_one_matches_plain_forward(self, trained):
        run, system, dataset = trained
        policy = ExitPolicy(1.0)
        for image in dataset.images[:10]:
            result = infer_early_exit(
                system.model, system.branches, image, policy, system.profile, system.placement
            )
            assert result.exit_layer == run.model.layers
            with no_grad():
                system.model.eval()
                plain = system.model.forward(Tensor(image[None])).data[0]
            assert result.predicted_label == int(plain.argmax())
            np.testing.assert_array_equal(result.exit_logits[run.model.layers], plain)

    def test_tau_zero_exits_at_first_position(self, trained):
        run, system, dataset = trained
        policy = ExitPolicy(0.0)
        first = system.placement.positions[0]
        for image in dataset.images[:10]:
            result = infer_early_exit(
                system.model, system.branches, image, policy, system.profile, system.placement
            )
            assert result.exit_layer == first

    def test_exit_layer_monotone_in_tau(self, trained):
        run, system, dataset = trained
        taus = np.linspace(0.0, 1.05, 21)
        for image in dataset.images[:20]:
            layers = [
                infer_early_exit(
                    system.model, system.branches, image, ExitPolicy(float(t)),
                    system.profile, system.placement,
                ).exit_layer
                for t in taus
            ]
            assert all(a <= b for a, b in zip(layers, layers[1:]))

    def test_confidence_meets_threshold_unless_final(self, trained):
        run, system, dataset = trained
        policy = ExitPolicy(0.6)
        for image in dataset.images[:20]:
            result = infer_early_exit(
                system.model, system.branches, image, policy, system.profile, system.placement
            )
            if result.exit_layer != run.model.layers:
                assert result.confidence > policy.tau

    def test_macs_follow_path_convention(self, trained):
        from eevit.costs import path_macs

        run, system, dataset = trained
        result = infer_early_exit(
            system.model, system.branches, dataset.images[0], ExitPolicy(0.0),
            system.profile, system.placement,
        )
        assert result.macs == path_macs(system.profile, system.placement, result.exit_layer)

    def test_determinism(self, trained):
        run, system, dataset = trained
        a = infer_early_exit(
            system.model, system.branches, dataset.images[0], ExitPolicy(0.7),
            system.profile, system.placement,
        )
        b = infer_early_exit(
            system.model, system.branches, dataset.images[0], ExitPolicy(0.7),
            system.profile, system.placement,
        )
        assert a.exit_layer == b.exit_layer
        assert a.predicted_label == b.predicted_label
        assert a.confidence == b.confidence
        for key in a.exit_logits:
            np.testing.assert_array_equal(a.exit_logits[key], b.exit_logits[key])


class TestDatasetEvaluation:
    def test_histogram_mass_conservation(self, trained):
        run, system, dataset = trained
        summary = evaluate_dataset(
            system.model, system.branches, dataset.images, dataset.labels,
            ExitPolicy(0.8), system.profile, system.placement,
        )
        assert summary.histogram.total() == len(dataset.images)

    def test_tau_above_one_matches_full_model_accuracy(self, trained):
        run, system, dataset = trained
        summary = evaluate_dataset(
            system.model, system.branches, dataset.images, dataset.labels,
            ExitPolicy(1.0), system.profile, system.placement,
        )
        system.model.eval()
        with no_grad():
            logits = system.model.forward(Tensor(dataset.images)).data
        full_acc = float((logits.argmax(-1) == dataset.labels).mean())
        assert summary.accuracy == pytest.approx(full_acc)
        assert summary.speedup == 1.0

    def test_empty_dataset_rejected(self, trained):
        run, system, dataset = trained
        with pytest.raises(EmptyDatasetError):
            evaluate_dataset(
                system.model, system.branches, dataset.images[:0], dataset.labels[:0],
                ExitPolicy(0.5), system.profile, system.placement,
            )


class TestSweep:
    def test_extremes_bracket_speedups(self, trained):
        run, system, dataset = trained
        summaries = threshold_sweep(
            system.model, system.branches, dataset.images, dataset.labels,
            [0.0, 1.01], system.profile, system.placement,
        )
        first_exit = system.placement.positions[0]
        assert summaries[0].speedup == pytest.approx(run.model.layers / first_exit)
        assert summaries[1].speedup == 1.0

    def test_speedup_non_increasing_in_tau(self, trained):
        run, system, dataset = trained
        taus = list(np.linspace(0.0, 1.05, 21))
        summaries = threshold_sweep(
            system.model, system.branches, dataset.images, dataset.labels,
            taus, system.profile, system.placement,
        )
        values = [s.speedup for s in summaries]
        assert all(a >= b - 1e-12 for a, b in zip(values, values[1:]))

    def test_cached_sweep_equals_naive_reinference(self, trained):
        run, system, dataset = trained
        taus = [0.0, 0.4, 0.7, 0.9, 1.01]
        cached = threshold_sweep(
            system.model, system.branches, dataset.images, dataset.labels,
            taus, system.profile, system.placement,
        )
        for tau, summary in zip(taus, cached):
            naive = evaluate_dataset(
                system.model, system.branches, dataset.images, dataset.labels,
                ExitPolicy(tau), system.profile, system.placement,
            )
            assert summary.accuracy == naive.accuracy
            assert summary.speedup == naive.speedup
            assert summary.expected_macs == naive.expected_macs
            assert summary.histogram.counts == naive.histogram.counts

    def test_empty_tau_list_rejected(self, trained):
        run, system, dataset = trained
        with pytest.raises(ValueError):
            threshold_sweep(
                system.model, system.branches, dataset.images, dataset.labels,
                [], system.profile, system.placement,
            )
