# pylint: disable="missing-class-docstring", "missing-function-docstring"
import pathlib
import tempfile
import unittest

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from TsfLab.errors import EmptyMaskError, WindowError
from TsfLab.forecaster import (
    Checkpoint,
    ModelParams,
    TrainConfig,
    init_params,
    masked_loss,
    predict,
    predict_batch,
    rcf_loss,
    rcf_losses,
    smooth_l1,
    train_backcaster,
    train_epochs,
    window_losses,
)
from TsfLab.series_core import Normalizer


def numeric_gradient(model: ModelParams, name: str, loss, step: float = 1e-6) -> np.ndarray:
    weights = model.weights[name]
    gradient = np.zeros_like(weights)
    for index in np.ndindex(weights.shape):
        original = weights[index]
        weights[index] = original + step
        upper = loss()
        weights[index] = original - step
        lower = loss()
        weights[index] = original
        gradient[index] = (upper - lower) / (2 * step)
    return gradient


class TestSmoothL1(unittest.TestCase):
    def test_branches(self) -> None:
        loss, grad = smooth_l1(np.array([0.0, 0.5, 3.0, -3.0]), np.zeros(4))
        np.testing.assert_allclose(loss, [0.0, 0.125, 2.5, 2.5])
        np.testing.assert_allclose(grad, [0.0, 0.5, 1.0, -1.0])

    def test_shape_mismatch(self) -> None:
        self.assertRaises(WindowError, smooth_l1, np.zeros(3), np.zeros(4))


class TestPredict(unittest.TestCase):
    def test_zero_linear_model(self) -> None:
        model = init_params("linear", 4, 3, 2, np.random.default_rng(0))
        model.weights = {name: np.zeros_like(value) for name, value in model.weights.items()}
        np.testing.assert_array_equal(predict(model, np.ones((4, 2))), np.zeros((3, 2)))

    def test_last_step_selector(self) -> None:
        model = init_params("linear", 4, 3, 2, np.random.default_rng(0))
        model.weights["W"] = np.zeros((2, 3, 4))
        model.weights["W"][:, :, -1] = 1.0
        model.weights["b"] = np.zeros((2, 3))
        np.testing.assert_allclose(predict(model, np.full((4, 2), 7.5)), np.full((3, 2), 7.5))

    def test_channels_are_independent(self) -> None:
        for architecture in ("linear", "mlp"):
            model = init_params(architecture, 5, 2, 3, np.random.default_rng(1), hidden=4)
            inputs = np.random.default_rng(2).normal(size=(6, 5, 3))
            changed = inputs.copy()
            changed[:, :, 0] += 1.0
            outputs = predict_batch(model, inputs)
            np.testing.assert_array_equal(predict_batch(model, changed)[:, :, 1:], outputs[:, :, 1:])

    def test_wrong_input_shape(self) -> None:
        model = init_params("mlp", 5, 2, 3, np.random.default_rng(1))
        self.assertRaises(WindowError, predict_batch, model, np.zeros((2, 4, 3)))


class TestMaskedLoss(unittest.TestCase):
    def setUp(self) -> None:
        rng = np.random.default_rng(11)
        self.inputs = rng.normal(size=(8, 5, 3))
        self.targets = rng.normal(size=(8, 2, 3)) * 2.0

    def test_gradients_match_finite_differences(self) -> None:
        mask = (np.random.default_rng(12).random((8, 3)) > 0.3).astype(float)
        for architecture in ("linear", "mlp"):
            model = init_params(architecture, 5, 2, 3, np.random.default_rng(13), hidden=4)
            result = masked_loss(model, self.inputs, self.targets, mask)
            for name in model.weights:
                expected = numeric_gradient(
                    model,
                    name,
                    lambda model=model: masked_loss(model, self.inputs, self.targets, mask).value,
                )
                np.testing.assert_allclose(
                    result.grads[name], expected, rtol=1e-5, atol=1e-8, err_msg=name
                )

    def test_full_mask_is_plain_mean(self) -> None:
        model = init_params("mlp", 5, 2, 3, np.random.default_rng(3))
        result = masked_loss(model, self.inputs, self.targets, np.ones((8, 3)))
        losses, _ = smooth_l1(predict_batch(model, self.inputs), self.targets)
        self.assertAlmostEqual(result.value, float(losses.mean()), places=12)

    def test_single_channel_mask(self) -> None:
        model = init_params("linear", 5, 2, 3, np.random.default_rng(3))
        mask = np.zeros((8, 3))
        mask[:, 0] = 1.0
        result = masked_loss(model, self.inputs, self.targets, mask)
        self.assertAlmostEqual(
            result.value,
            float(window_losses(model, self.inputs, self.targets)[:, 0].mean()),
            places=12,
        )

    def test_duplicated_windows_leave_the_loss_unchanged(self) -> None:
        mask = (np.random.default_rng(14).random((8, 3)) > 0.4).astype(float)
        mask[0, 0] = 1.0
        inputs = np.concatenate([self.inputs, self.inputs])
        targets = np.concatenate([self.targets, self.targets])
        for architecture in ("linear", "mlp"):
            model = init_params(architecture, 5, 2, 3, np.random.default_rng(15), hidden=4)
            single = masked_loss(model, self.inputs, self.targets, mask)
            doubled = masked_loss(model, inputs, targets, np.concatenate([mask, mask]))
            self.assertAlmostEqual(doubled.value, single.value, delta=1e-12)
            self.assertEqual(doubled.weight, 2 * single.weight)
            for name, gradient in single.grads.items():
                np.testing.assert_allclose(doubled.grads[name], gradient, rtol=1e-12, atol=1e-15)

    def test_empty_mask(self) -> None:
        model = init_params("linear", 5, 2, 3, np.random.default_rng(3))
        self.assertRaises(
            EmptyMaskError, masked_loss, model, self.inputs, self.targets, np.zeros((8, 3))
        )


class TestTrainEpochs(unittest.TestCase):
    def setUp(self) -> None:
        rng = np.random.default_rng(21)
        self.inputs = rng.normal(size=(256, 4, 2))
        true_weights = rng.normal(size=(2, 2, 4)) * 0.5
        self.targets = np.einsum("col,blc->boc", true_weights, self.inputs) + 0.3
        self.mask = np.ones((256, 2))

    def test_zero_learning_rate(self) -> None:
        model = init_params("mlp", 4, 2, 2, np.random.default_rng(0), hidden=8)
        before = model.copy()
        train_epochs(model, self.inputs, self.targets, self.mask, TrainConfig(learning_rate=0.0), 3)
        for name, value in before.weights.items():
            np.testing.assert_array_equal(model.weights[name], value)

    def test_linear_model_fits_linear_data(self) -> None:
        model = init_params("linear", 4, 2, 2, np.random.default_rng(0))
        config = TrainConfig(learning_rate=0.5, batch_size=32, optimizer="sgd")
        losses = train_epochs(model, self.inputs, self.targets, self.mask, config, 200)
        self.assertEqual(len(losses), 200)
        error = np.abs(predict_batch(model, self.inputs) - self.targets).mean()
        self.assertLess(error, 0.05 * float(np.abs(self.targets).mean()))

    def test_same_seed_is_bit_identical(self) -> None:
        results = []
        for _ in range(2):
            model = init_params("mlp", 4, 2, 2, np.random.default_rng(5), hidden=8)
            train_epochs(
                model, self.inputs, self.targets, self.mask, TrainConfig(learning_rate=1e-3, seed=7), 2
            )
            results.append(model)
        for name in results[0].weights:
            np.testing.assert_array_equal(results[0].weights[name], results[1].weights[name])

    def test_masked_windows_are_skipped(self) -> None:
        model = init_params("linear", 4, 2, 2, np.random.default_rng(0))
        calls = []
        losses = train_epochs(
            model,
            self.inputs,
            self.targets,
            np.zeros((256, 2)),
            TrainConfig(),
            2,
            callback=lambda epoch, _: calls.append(epoch),
        )
        self.assertEqual(losses, [0.0, 0.0])
        self.assertEqual(calls, [0, 1])

    def test_masked_windows_equal_removed_windows(self) -> None:
        removed = np.zeros(256, dtype=bool)
        removed[np.random.default_rng(6).choice(256, size=40, replace=False)] = True
        mask = self.mask.copy()
        mask[removed] = 0.0
        config = TrainConfig(learning_rate=1e-2, batch_size=32, seed=3)
        for architecture in ("linear", "mlp"):
            masked = init_params(architecture, 4, 2, 2, np.random.default_rng(1), hidden=8)
            pruned = masked.copy()
            train_epochs(masked, self.inputs, self.targets, mask, config, 3)
            kept = ~removed
            train_epochs(pruned, self.inputs[kept], self.targets[kept], self.mask[kept], config, 3)
            for name, value in pruned.weights.items():
                np.testing.assert_array_equal(masked.weights[name], value, err_msg=name)


class TestBackcaster(unittest.TestCase):
    def test_shapes_are_swapped(self) -> None:
        rng = np.random.default_rng(4)
        histories = rng.normal(size=(40, 6, 2))
        futures = rng.normal(size=(40, 3, 2))
        backcaster = train_backcaster("linear", histories, futures, 1, TrainConfig())
        self.assertEqual((backcaster.n_in, backcaster.n_out), (3, 6))

    def test_needs_an_epoch(self) -> None:
        self.assertRaises(
            ValueError, train_backcaster, "linear", np.zeros((4, 2, 1)), np.zeros((4, 2, 1)), 0, TrainConfig()
        )

    def test_zero_series(self) -> None:
        config = TrainConfig(learning_rate=1.0, batch_size=64, optimizer="sgd")
        histories = np.zeros((40, 6, 2))
        futures = np.zeros((40, 3, 2))
        backcaster = train_backcaster("linear", histories, futures, 200, config)
        self.assertLess(float(np.abs(predict_batch(backcaster, futures[:1])).max()), 1e-6)
        self.assertLess(float(rcf_losses(backcaster, histories, futures).max()), 1e-12)

    def test_palindromic_series_is_its_own_backcast(self) -> None:
        half = np.random.default_rng(10).normal(size=(30, 2))
        series = np.concatenate([half, half[::-1]])
        windows = sliding_window_view(series, 8, axis=0).transpose(0, 2, 1)
        histories, futures = windows[:, :4], windows[:, 4:]
        config = TrainConfig(learning_rate=0.1, batch_size=len(windows), optimizer="sgd", seed=2)
        backcaster = train_backcaster("linear", histories, futures, 5, config)

        rng = np.random.default_rng(config.seed)
        forward = init_params("linear", 4, 4, 2, rng)
        train_epochs(forward, histories, futures, np.ones((len(windows), 2)), config, 5, rng=rng)
        for name, value in forward.weights.items():
            np.testing.assert_allclose(backcaster.weights[name], value, rtol=1e-9, atol=1e-12)

    def test_constant_backcaster_on_constant_window(self) -> None:
        backcaster = init_params("linear", 3, 6, 2, np.random.default_rng(0))
        backcaster.weights["W"] = np.zeros((2, 6, 3))
        backcaster.weights["b"] = np.full((2, 6), 4.0)
        loss = rcf_loss(backcaster, np.full((6, 2), 4.0), np.full((3, 2), 4.0), 1)
        self.assertEqual(loss, 0.0)


class TestCheckpoint(unittest.TestCase):
    def test_file_round_trip(self) -> None:
        model = init_params("mlp", 4, 3, 2, np.random.default_rng(8), hidden=5)
        checkpoint = Checkpoint(
            model=model, normalizer=Normalizer(mean=np.array([1.0, 2.0]), std=np.array([3.0, 0.5]))
        )
        histories = np.random.default_rng(9).normal(size=(5, 4, 2))
        with tempfile.TemporaryDirectory() as folder:
            path = pathlib.Path(folder) / "model.json"
            checkpoint.save(path)
            restored = Checkpoint.load(path)
        np.testing.assert_array_equal(restored.forecast(histories), checkpoint.forecast(histories))


if __name__ == "__main__":
    unittest.main()
