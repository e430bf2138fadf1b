import numpy as np
import numpy.testing as npt
import pytest

from conftest import numeric_gradient, relative_error, unit_rows
from compatlab.embedding_model import (ArcFaceParams, EmbeddingModel, ModelConfig, PrototypeMatrix,
                                       SGDOptimizer, arcface_loss, classification_accuracy,
                                       load_checkpoint, save_checkpoint)
from compatlab.errors import (ConfigurationError, CoverageError, LossUndefinedError,
                              NumericalFailureError, ShapeError)


class TestEmbeddingModel:
    def test_outputs_are_unit_norm(self, rng, small_model_config):
        model = EmbeddingModel(small_model_config)
        features = model.forward(rng.normal(size=(9, 12)))
        assert features.shape == (9, 6)
        npt.assert_allclose(np.linalg.norm(features, axis=1), 1.0, atol=1e-12)

    def test_same_seed_same_parameters(self, small_model_config):
        assert EmbeddingModel(small_model_config).fingerprint() == EmbeddingModel(small_model_config).fingerprint()
        other = ModelConfig(input_dim=12, hidden_dims=[8], embed_dim=6, init_seed=1)
        assert EmbeddingModel(other).fingerprint() != EmbeddingModel(small_model_config).fingerprint()

    def test_wrong_input_width(self, rng, small_model_config):
        with pytest.raises(ShapeError):
            EmbeddingModel(small_model_config).forward(rng.normal(size=(3, 11)))

    def test_zero_weights_give_normalised_last_bias(self, rng):
        config = ModelConfig(input_dim=3, hidden_dims=[4], embed_dim=2)
        weights = [np.zeros((4, 3)), np.zeros((2, 4))]
        biases = [np.zeros(4), np.array([3.0, 4.0])]
        model = EmbeddingModel(config, weights, biases)
        features = model.forward(rng.normal(size=(5, 3)))
        npt.assert_allclose(features, np.tile([0.6, 0.8], (5, 1)))

    def test_invalid_config(self):
        with pytest.raises(ConfigurationError):
            ModelConfig(activation="gelu").validate()
        with pytest.raises(ConfigurationError):
            ModelConfig(hidden_dims=[]).validate()

    @pytest.mark.parametrize("activation", ["tanh", "relu"])
    def test_backward_matches_finite_differences(self, rng, activation):
        config = ModelConfig(input_dim=5, hidden_dims=[7, 4], embed_dim=3, activation=activation, init_seed=2)
        model = EmbeddingModel(config)
        inputs = rng.normal(size=(6, 5))
        target = rng.normal(size=(6, 3))

        features, cache = model.forward_train(inputs)
        grads = model.backward(cache, target)

        def objective(_):
            return float(np.sum(model.forward(inputs) * target))

        for name, param in model.parameters().items():
            numeric = numeric_gradient(objective, param)
            assert relative_error(grads[name], numeric) < 1e-5, name

    def test_copy_is_independent(self, small_model_config):
        model = EmbeddingModel(small_model_config)
        clone = model.copy()
        clone.weights[0][0, 0] += 1.0
        assert clone.fingerprint() != model.fingerprint()


class TestPrototypeMatrix:
    def test_rows_sorted_by_class_and_normalised(self):
        matrix = PrototypeMatrix(np.array([[0.0, 2.0], [3.0, 0.0]]), class_ids=[7, 2])
        npt.assert_array_equal(matrix.class_ids, [2, 7])
        npt.assert_allclose(matrix.rows, [[1.0, 0.0], [0.0, 1.0]])
        npt.assert_array_equal(matrix.row_index([7, 2, 7]), [1, 0, 1])

    def test_duplicate_class_ids(self):
        with pytest.raises(ConfigurationError):
            PrototypeMatrix(np.eye(2), class_ids=[1, 1])

    def test_unknown_label(self):
        matrix = PrototypeMatrix(np.eye(3), class_ids=[0, 4, 9])
        assert matrix.covers([0, 9])
        assert not matrix.covers([0, 5])
        with pytest.raises(CoverageError):
            matrix.row_index([5])

    def test_frozen_copy(self):
        matrix = PrototypeMatrix.initialize(np.arange(4), dim=3, seed=0)
        frozen = matrix.frozen()
        assert matrix.trainable and not frozen.trainable
        assert frozen.fingerprint() == matrix.fingerprint()


class TestArcFace:
    def test_two_class_scalar_value_without_margin(self):
        features = np.array([[0.6, 0.8]])
        prototypes = PrototypeMatrix(np.eye(2))
        s = 4.0
        result = arcface_loss(features, [0], prototypes, ArcFaceParams(scale=s, margin=0.0))
        expected = np.log1p(np.exp(s * (0.8 - 0.6)))
        assert result.loss == pytest.approx(expected, rel=1e-9)

    def test_margin_penalises_target_angle(self):
        features = np.array([[1.0, 0.0]])
        prototypes = PrototypeMatrix(np.array([[np.cos(0.3), np.sin(0.3)], [0.0, 1.0]]))
        s, m = 8.0, 0.2
        result = arcface_loss(features, [0], prototypes, ArcFaceParams(scale=s, margin=m))
        target = s * np.cos(0.3 + m)
        other = 0.0
        expected = -target + np.log(np.exp(target) + np.exp(other))
        assert result.loss == pytest.approx(expected, rel=1e-9)

    def test_aligned_feature_with_orthogonal_rival(self):
        prototypes = PrototypeMatrix(np.eye(2))
        result = arcface_loss(np.array([[1.0, 0.0]]), [0], prototypes, ArcFaceParams(scale=64.0, margin=0.5))
        cos = 1.0 - 1e-7
        target = 64.0 * (cos * np.cos(0.5) - np.sqrt(1.0 - cos * cos) * np.sin(0.5))
        expected = -target + np.log(np.exp(target) + np.exp(0.0))
        assert result.loss == pytest.approx(expected, rel=1e-6)
        unclamped = -np.log(np.exp(64 * np.cos(0.5)) / (np.exp(64 * np.cos(0.5)) + 1.0))
        assert result.loss == pytest.approx(unclamped, abs=1e-2)

    def test_single_class_is_undefined(self):
        with pytest.raises(LossUndefinedError):
            arcface_loss(np.array([[1.0, 0.0]]), [0], PrototypeMatrix(np.array([[1.0, 0.0]])))

    def test_label_without_prototype(self, rng):
        with pytest.raises(CoverageError):
            arcface_loss(unit_rows(rng, 2, 3), [0, 5], PrototypeMatrix(np.eye(3)))

    def test_gradients_match_finite_differences(self, rng):
        features = unit_rows(rng, 8, 5)
        labels = rng.integers(0, 4, size=8)
        prototypes = PrototypeMatrix(unit_rows(rng, 4, 5))
        params = ArcFaceParams(scale=16.0, margin=0.3)
        result = arcface_loss(features, labels, prototypes, params)

        numeric_f = numeric_gradient(lambda f: arcface_loss(f, labels, prototypes, params).loss, features)
        assert relative_error(result.grad_features, numeric_f) < 1e-5

        def by_prototypes(rows):
            return arcface_loss(features, labels, prototypes, params).loss

        numeric_p = numeric_gradient(by_prototypes, prototypes.rows)
        assert relative_error(result.grad_prototypes, numeric_p) < 1e-5

    def test_frozen_prototypes_get_no_gradient(self, rng):
        prototypes = PrototypeMatrix(unit_rows(rng, 3, 4), trainable=False)
        result = arcface_loss(unit_rows(rng, 5, 4), [0, 1, 2, 0, 1], prototypes)
        assert result.grad_prototypes is None

    def test_aligned_feature_has_finite_gradient(self):
        prototypes = PrototypeMatrix(np.eye(3))
        result = arcface_loss(np.array([[1.0, 0.0, 0.0]]), [0], prototypes, ArcFaceParams(16.0, 0.5))
        assert np.all(np.isfinite(result.grad_features))
        assert np.isfinite(result.loss)


class TestSGDOptimizer:
    @staticmethod
    def _single_weight_model():
        config = ModelConfig(input_dim=1, hidden_dims=[1], embed_dim=2)
        return EmbeddingModel(config, [np.ones((1, 1)), np.ones((2, 1))], [np.zeros(1), np.zeros(2)])

    def test_two_momentum_steps(self):
        model = self._single_weight_model()
        optimizer = SGDOptimizer(lr=0.1, momentum=0.9, weight_decay=0.0)
        grad = {"W0": np.array([[1.0]])}
        optimizer.step(model, grad)
        assert model.weights[0][0, 0] == pytest.approx(0.9)
        optimizer.step(model, grad)
        assert model.weights[0][0, 0] == pytest.approx(0.9 - 0.1 * 1.9)

    def test_weight_decay_adds_to_gradient(self):
        model = self._single_weight_model()
        optimizer = SGDOptimizer(lr=0.1, momentum=0.0, weight_decay=0.5)
        optimizer.step(model, {"W0": np.zeros((1, 1))})
        assert model.weights[0][0, 0] == pytest.approx(1.0 - 0.1 * 0.5)

    def test_nan_gradient_leaves_parameters(self):
        model = self._single_weight_model()
        before = model.fingerprint()
        with pytest.raises(NumericalFailureError):
            SGDOptimizer().step(model, {"W0": np.array([[1.0]]), "W1": np.array([[np.nan], [0.0]])})
        assert model.fingerprint() == before

    def test_prototypes_stay_unit_norm(self, rng):
        model = self._single_weight_model()
        prototypes = PrototypeMatrix(unit_rows(rng, 3, 2))
        SGDOptimizer(lr=0.5).step(model, {}, prototypes, rng.normal(size=(3, 2)))
        npt.assert_allclose(np.linalg.norm(prototypes.rows, axis=1), 1.0, atol=1e-12)

    def test_frozen_prototypes_untouched(self, rng):
        model = self._single_weight_model()
        prototypes = PrototypeMatrix(unit_rows(rng, 3, 2), trainable=False)
        before = prototypes.fingerprint()
        SGDOptimizer(lr=0.5).step(model, {}, prototypes, rng.normal(size=(3, 2)))
        assert prototypes.fingerprint() == before


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng, small_model_config):
        model = EmbeddingModel(small_model_config)
        prototypes = PrototypeMatrix(unit_rows(rng, 4, 6), class_ids=[3, 5, 8, 9], trainable=False)
        path = save_checkpoint(tmp_path / "ckpt" / "model.bin", model, prototypes)
        assert path.read_bytes()[:8] == b"CLABCKPT"

        loaded, loaded_prototypes = load_checkpoint(path)
        assert loaded.fingerprint() == model.fingerprint()
        assert loaded.config.layer_dims == small_model_config.layer_dims
        npt.assert_array_equal(loaded_prototypes.class_ids, [3, 5, 8, 9])
        npt.assert_allclose(loaded_prototypes.rows, prototypes.rows, atol=1e-15)
        assert not loaded_prototypes.trainable

    def test_without_prototypes(self, tmp_path, small_model_config):
        path = save_checkpoint(tmp_path / "m.bin", EmbeddingModel(small_model_config))
        _, prototypes = load_checkpoint(path)
        assert prototypes is None

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOTACKPT" + bytes(32))
        with pytest.raises(ConfigurationError):
            load_checkpoint(path)


def test_classification_accuracy_with_perfect_prototypes(rng):
    config = ModelConfig(input_dim=2, hidden_dims=[2], embed_dim=2, activation="tanh")
    model = EmbeddingModel(config, [np.eye(2), np.eye(2)], [np.zeros(2), np.zeros(2)])

    class Points:
        inputs = np.array([[1.0, 0.05], [0.05, 1.0], [2.0, -0.1]])
        labels = np.array([0, 1, 0])

    assert classification_accuracy(model, PrototypeMatrix(np.eye(2)), Points) == 1.0
