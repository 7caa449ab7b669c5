"""
Test cases for the MLP learner (forward pass, SGD, EWC, Fisher)
"""
import math

import numpy as np
from django.test import SimpleTestCase

from data_plane.utils import LabeledDataset

from .exceptions import DimensionMismatchError, TrainingDivergenceError
from .utils import (
    FisherDiag,
    ModelParams,
    TrainConfig,
    compute_fisher_diag,
    ewc_penalty,
    ewc_sgd_epochs,
    forward_eval,
    init_model,
    loss_and_gradient,
    parameter_count,
    sgd_epochs,
    softmax,
)


def random_dataset(rng, n, feature_dim, num_classes):
    return LabeledDataset(
        rng.normal(size=(n, feature_dim)),
        rng.integers(0, num_classes, size=n),
        num_classes,
    )


def finite_difference(objective, vector, step=1e-6):
    """Central differences of a scalar function of a flat vector"""
    gradient = np.zeros_like(vector)
    for i in range(vector.size):
        plus = vector.copy()
        minus = vector.copy()
        plus[i] += step
        minus[i] -= step
        gradient[i] = (objective(plus) - objective(minus)) / (2 * step)
    return gradient


class InitModelTestCase(SimpleTestCase):
    """Test cases for init_model"""

    def test_parameter_count_and_zero_biases(self):
        """Test [4, 3] gives 12 weights and 3 zero biases"""
        model = init_model([4, 3], seed=11)
        self.assertEqual(model.num_parameters, 15)
        self.assertEqual(parameter_count([4, 3]), 15)
        weights, bias = model.layers()[0]
        self.assertEqual(weights.shape, (4, 3))
        self.assertTrue(np.all(bias == 0.0))

    def test_same_seed_is_bit_identical(self):
        """Test two inits with one seed are identical"""
        self.assertEqual(init_model([5, 4, 3], seed=3), init_model([5, 4, 3], seed=3))
        self.assertNotEqual(init_model([5, 4, 3], seed=3), init_model([5, 4, 3], seed=4))

    def test_he_scaling(self):
        """Test layer-1 weight std is close to sqrt(2/fan_in)"""
        model = init_model([784, 64, 10], seed=7)
        weights, _ = model.layers()[0]
        expected = math.sqrt(2.0 / 784)
        self.assertLess(abs(weights.std() - expected) / expected, 0.2)

    def test_rejects_bad_dims(self):
        """Test empty and zero-width layouts are rejected"""
        with self.assertRaises(DimensionMismatchError):
            init_model([], seed=0)
        with self.assertRaises(DimensionMismatchError):
            init_model([4], seed=0)
        with self.assertRaises(DimensionMismatchError):
            init_model([4, 0, 2], seed=0)

    def test_model_params_validation(self):
        """Test ModelParams rejects wrong lengths and non-finite values"""
        with self.assertRaises(DimensionMismatchError):
            ModelParams([2, 2], np.zeros(5))
        with self.assertRaises(ValueError):
            ModelParams([1, 1], [np.nan, 0.0])

    def test_values_are_read_only(self):
        """Test callers cannot mutate a model in place"""
        model = init_model([2, 2], seed=0)
        with self.assertRaises(ValueError):
            model.values[0] = 1.0


class ForwardEvalTestCase(SimpleTestCase):
    """Test cases for forward_eval and softmax"""

    def setUp(self):
        self.rng = np.random.default_rng(2024)

    def test_zero_model_loss_and_tie_break(self):
        """Test all-zero model gives ln(C) loss and class-0 accuracy"""
        labels = np.repeat(np.arange(10), 3)
        dataset = LabeledDataset(self.rng.normal(size=(30, 6)), labels, 10)
        model = ModelParams([6, 10], np.zeros(parameter_count([6, 10])))
        result = forward_eval(model, dataset)
        self.assertAlmostEqual(result.mean_loss, math.log(10), places=12)
        self.assertAlmostEqual(result.accuracy, 10.0)
        self.assertEqual(result.num_examples, 30)

    def test_matches_hand_rolled_forward(self):
        """Test one-hidden-layer forward pass against plain matrix arithmetic"""
        dataset = random_dataset(self.rng, 20, 3, 2)
        model = init_model([3, 4, 2], seed=5)
        v = model.values
        w1, b1 = v[:12].reshape(3, 4), v[12:16]
        w2, b2 = v[16:24].reshape(4, 2), v[24:26]
        hidden = np.maximum(dataset.features @ w1 + b1, 0.0)
        logits = hidden @ w2 + b2
        log_norm = np.log(np.exp(logits).sum(axis=1))
        expected_loss = float(np.mean(log_norm - logits[np.arange(20), dataset.labels]))
        expected_acc = 100.0 * float(np.mean(np.argmax(logits, axis=1) == dataset.labels))

        result = forward_eval(model, dataset)
        self.assertLess(abs(result.mean_loss - expected_loss) / expected_loss, 1e-10)
        self.assertAlmostEqual(result.accuracy, expected_acc)

    def test_softmax_rows_sum_to_one(self):
        """Test softmax output is normalised per example"""
        probabilities = softmax(self.rng.normal(scale=30.0, size=(50, 7)))
        np.testing.assert_allclose(probabilities.sum(axis=1), 1.0, atol=1e-9)
        self.assertTrue(np.all(probabilities >= 0.0))

    def test_dimension_mismatch(self):
        """Test wrong feature width and out-of-range labels are rejected"""
        model = init_model([3, 2], seed=0)
        with self.assertRaises(DimensionMismatchError):
            forward_eval(model, random_dataset(self.rng, 5, 4, 2))
        with self.assertRaises(DimensionMismatchError):
            forward_eval(model, LabeledDataset(np.zeros((2, 3)), [0, 2], 3))


class SgdEpochsTestCase(SimpleTestCase):
    """Test cases for sgd_epochs and loss_and_gradient"""

    def setUp(self):
        self.rng = np.random.default_rng(99)
        self.dataset = random_dataset(self.rng, 24, 3, 3)
        self.model = init_model([3, 5, 3], seed=1)

    def test_gradient_matches_finite_differences(self):
        """Test backprop gradients on 20 random small models of varied widths, half with EWC"""
        for seed in range(20):
            rng = np.random.default_rng(seed)
            hidden = [int(width) for width in rng.integers(2, 9, size=rng.integers(1, 3))]
            dims = [int(rng.integers(2, 6)), *hidden, int(rng.integers(2, 6))]
            model = init_model(dims, seed=seed)
            batch = random_dataset(rng, int(rng.integers(4, 13)), dims[0], dims[-1])
            if seed % 2:
                anchor = ModelParams(dims, model.values + rng.normal(scale=0.1, size=model.num_parameters))
                fisher = FisherDiag(rng.uniform(0.0, 2.0, size=model.num_parameters))
                ewc_lambda = float(rng.uniform(0.1, 3.0))
            else:
                anchor, fisher, ewc_lambda = None, None, 0.0

            def objective(values):
                candidate = ModelParams(dims, values)
                loss = forward_eval(candidate, batch).mean_loss
                if anchor is not None:
                    loss += ewc_penalty(candidate, anchor, fisher, ewc_lambda)
                return loss

            _, gradient = loss_and_gradient(model, batch, anchor=anchor, fisher=fisher, ewc_lambda=ewc_lambda)
            numeric = finite_difference(objective, model.values.copy())
            np.testing.assert_allclose(gradient, numeric, rtol=1e-4, atol=1e-7, err_msg=f"dims {dims}")

    def test_tiny_learning_rate_is_a_no_op(self):
        """Test lr -> 0 leaves parameters where they were"""
        cfg = TrainConfig(learning_rate=1e-30, local_epochs=2, batch_size=4)
        result = sgd_epochs(self.model, self.dataset, cfg, seed=0)
        np.testing.assert_allclose(result.values, self.model.values, rtol=0, atol=1e-9)

    def test_single_example_step(self):
        """Test one SGD step equals input - lr * finite-difference gradient"""
        single = self.dataset.subset([0])
        cfg = TrainConfig(learning_rate=0.1, local_epochs=1, batch_size=1)
        result = sgd_epochs(self.model, single, cfg, seed=0)
        numeric = finite_difference(
            lambda v: forward_eval(ModelParams(self.model.layer_dims, v), single).mean_loss,
            self.model.values.copy(),
        )
        applied = (self.model.values - result.values) / cfg.learning_rate
        np.testing.assert_allclose(applied, numeric, rtol=1e-5, atol=1e-8)

    def test_same_seed_is_bit_identical(self):
        """Test repeated training with one seed gives identical models"""
        cfg = TrainConfig(learning_rate=0.05, local_epochs=3, batch_size=5)
        first = sgd_epochs(self.model, self.dataset, cfg, seed=42)
        second = sgd_epochs(self.model, self.dataset, cfg, seed=42)
        self.assertEqual(first, second)
        self.assertNotEqual(first, self.model)

    def test_input_model_unmodified(self):
        """Test training returns a new model and leaves the input alone"""
        before = self.model.values.copy()
        sgd_epochs(self.model, self.dataset, TrainConfig(), seed=0)
        self.assertTrue(np.array_equal(self.model.values, before))

    def test_divergence_names_epoch(self):
        """Test a blow-up raises TrainingDivergenceError with the epoch"""
        features = np.full((4, 2), 1e200)
        dataset = LabeledDataset(features, [0, 1, 2, 0], 3)
        model = init_model([2, 3], seed=0)
        cfg = TrainConfig(learning_rate=1.0, local_epochs=1, batch_size=1)
        with self.assertRaises(TrainingDivergenceError) as ctx:
            sgd_epochs(model, dataset, cfg, seed=0)
        self.assertEqual(ctx.exception.epoch, 1)
        detailed = ctx.exception.with_context(round_index=7, device_id=3, phase='fork')
        self.assertIn('round 7', str(detailed))
        self.assertIn('device 3', str(detailed))

    def test_train_config_validation(self):
        """Test invalid hyper-parameters are rejected"""
        with self.assertRaises(ValueError):
            TrainConfig(learning_rate=0)
        with self.assertRaises(ValueError):
            TrainConfig(local_epochs=0)
        with self.assertRaises(ValueError):
            TrainConfig(batch_size=0)
        with self.assertRaises(ValueError):
            TrainConfig(ewc_lambda=-1.0)


class EwcTestCase(SimpleTestCase):
    """Test cases for ewc_penalty and ewc_sgd_epochs"""

    def setUp(self):
        self.rng = np.random.default_rng(5)
        self.dataset = random_dataset(self.rng, 20, 2, 3)
        self.model = init_model([2, 4, 3], seed=1)
        self.anchor = init_model([2, 4, 3], seed=2)
        self.fisher = FisherDiag(self.rng.uniform(0.1, 1.0, size=self.model.num_parameters))

    def test_penalty_hand_example(self):
        """Test λ=0.5, F=[1,2], θ-θ*=[3,-1] gives 5.5"""
        model = ModelParams([1, 1], [3.0, -1.0])
        anchor = ModelParams([1, 1], [0.0, 0.0])
        fisher = FisherDiag([1.0, 2.0])
        self.assertAlmostEqual(ewc_penalty(model, anchor, fisher, 0.5), 5.5)

    def test_penalty_zero_cases(self):
        """Test zero displacement and zero curvature give zero penalty"""
        self.assertEqual(ewc_penalty(self.model, self.model, self.fisher, 3.0), 0.0)
        zeros = FisherDiag(np.zeros(self.model.num_parameters))
        self.assertEqual(ewc_penalty(self.model, self.anchor, zeros, 3.0), 0.0)

    def test_penalty_symmetry(self):
        """Test swapping model and anchor leaves the penalty unchanged"""
        self.assertAlmostEqual(
            ewc_penalty(self.model, self.anchor, self.fisher, 0.7),
            ewc_penalty(self.anchor, self.model, self.fisher, 0.7),
            places=12,
        )

    def test_penalty_length_mismatch(self):
        """Test vectors of different lengths are rejected"""
        with self.assertRaises(DimensionMismatchError):
            ewc_penalty(self.model, self.anchor, FisherDiag([1.0, 1.0]), 1.0)

    def test_zero_lambda_matches_plain_sgd(self):
        """Test λ=0 reproduces sgd_epochs bit for bit"""
        cfg = TrainConfig(learning_rate=0.05, local_epochs=2, batch_size=4, ewc_lambda=0.0)
        plain = sgd_epochs(self.model, self.dataset, cfg, seed=8)
        ewc = ewc_sgd_epochs(self.model, self.dataset, self.anchor, self.fisher, cfg, seed=8)
        self.assertEqual(plain, ewc)

    def test_objective_gradient_matches_finite_differences(self):
        """Test gradient of cross-entropy + penalty on a toy model"""
        model = init_model([1, 2], seed=4)
        anchor = init_model([1, 2], seed=5)
        fisher = FisherDiag([0.5, 1.5, 2.0, 0.25])
        toy = random_dataset(self.rng, 6, 1, 2)
        ewc_lambda = 0.8

        def objective(vector):
            candidate = ModelParams(model.layer_dims, vector)
            return forward_eval(candidate, toy).mean_loss + ewc_penalty(candidate, anchor, fisher, ewc_lambda)

        _, gradient = loss_and_gradient(model, toy, anchor=anchor, fisher=fisher, ewc_lambda=ewc_lambda)
        numeric = finite_difference(objective, model.values.copy())
        np.testing.assert_allclose(gradient, numeric, rtol=1e-5, atol=1e-8)

    def test_large_lambda_pins_to_anchor(self):
        """Test a dominant penalty pulls parameters onto the anchor"""
        ones = FisherDiag(np.ones(self.model.num_parameters))
        cfg = TrainConfig(learning_rate=1e-7, local_epochs=5, batch_size=1, ewc_lambda=1e6)
        result = ewc_sgd_epochs(self.model, self.dataset, self.anchor, ones, cfg, seed=0)
        self.assertLess(np.max(np.abs(result.values - self.anchor.values)), 1e-3)


class FisherTestCase(SimpleTestCase):
    """Test cases for compute_fisher_diag"""

    def setUp(self):
        self.rng = np.random.default_rng(17)
        self.model = init_model([3, 4, 3], seed=6)
        self.dataset = random_dataset(self.rng, 12, 3, 3)

    def test_entries_non_negative(self):
        """Test every Fisher entry is >= 0 and the layout matches the model"""
        fisher = compute_fisher_diag(self.model, self.dataset)
        self.assertEqual(len(fisher), self.model.num_parameters)
        self.assertTrue(np.all(fisher.values >= 0.0))

    def test_duplicated_dataset(self):
        """Test duplicating every example leaves the mean unchanged"""
        doubled = LabeledDataset(
            np.vstack([self.dataset.features, self.dataset.features]),
            np.concatenate([self.dataset.labels, self.dataset.labels]),
            3,
        )
        np.testing.assert_allclose(
            compute_fisher_diag(self.model, doubled).values,
            compute_fisher_diag(self.model, self.dataset).values,
            rtol=1e-12, atol=1e-15,
        )

    def test_matches_per_example_gradient_oracle(self):
        """Test against the mean of squared finite-difference per-example gradients"""
        small = self.dataset.subset([0, 1, 2])
        squares = []
        for index in range(3):
            example = small.subset([index])
            gradient = finite_difference(
                lambda v: forward_eval(ModelParams(self.model.layer_dims, v), example).mean_loss,
                self.model.values.copy(),
            )
            squares.append(gradient ** 2)
        expected = np.mean(squares, axis=0)
        fisher = compute_fisher_diag(self.model, small)
        np.testing.assert_allclose(fisher.values, expected, rtol=1e-4, atol=1e-9)

    def test_rejects_negative_entries(self):
        """Test FisherDiag refuses negative curvature"""
        with self.assertRaises(ValueError):
            FisherDiag([1.0, -0.5])
