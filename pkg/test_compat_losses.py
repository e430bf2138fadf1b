import numpy as np
import numpy.testing as npt
import pytest

from conftest import numeric_gradient, relative_error, unit_rows
from compatlab.compat_losses import (BCTLoss, CompatLossSpec, ContrastiveLoss, LossKind, RegressionLoss,
                                     UniBCTLoss, VanillaUniBCTLoss, bct_loss, build_compat_loss,
                                     check_bct_applicable, contrastive_loss, regress_loss, unibct_loss)
from compatlab.embedding_model import ArcFaceParams, PrototypeMatrix, arcface_loss
from compatlab.errors import (BatchCompositionError, ConfigurationError, FrozenStateError,
                              InapplicableLossError)
from compatlab.prototype_engine import PrototypeVariant
from compatlab.synthetic_data import Scenario, allocate_split

PARAMS = ArcFaceParams(scale=16.0, margin=0.3)


class TestUniBCT:
    def test_equals_arcface_on_frozen_prototypes(self, rng):
        features = unit_rows(rng, 6, 4)
        labels = np.array([0, 1, 2, 0, 1, 2])
        prototypes = PrototypeMatrix(unit_rows(rng, 3, 4), trainable=False)
        out = unibct_loss(features, labels, prototypes, PARAMS)
        reference = arcface_loss(features, labels, prototypes, PARAMS)
        assert out.loss == reference.loss
        npt.assert_array_equal(out.grad_features, reference.grad_features)

    def test_trainable_prototypes_rejected(self, rng):
        with pytest.raises(FrozenStateError):
            unibct_loss(unit_rows(rng, 2, 3), [0, 1], PrototypeMatrix(np.eye(3)))

    def test_bct_equals_unibct_on_old_classifier(self, rng):
        features = unit_rows(rng, 5, 3)
        labels = np.array([0, 1, 2, 1, 0])
        classifier = PrototypeMatrix(unit_rows(rng, 3, 3))
        a = bct_loss(features, labels, classifier, PARAMS)
        b = unibct_loss(features, labels, classifier.frozen(), PARAMS)
        assert a.loss == b.loss
        npt.assert_array_equal(a.grad_features, b.grad_features)
        assert classifier.trainable

    def test_bct_uncovered_label(self, rng):
        classifier = PrototypeMatrix(unit_rows(rng, 2, 3), class_ids=[0, 1], trainable=False)
        with pytest.raises(InapplicableLossError):
            bct_loss(unit_rows(rng, 2, 3), [0, 7], classifier, PARAMS)


class TestRegression:
    def test_value(self):
        new = np.array([[1.0, 0.0], [0.0, 1.0]])
        old = np.array([[0.0, 1.0], [0.0, 1.0]])
        assert regress_loss(new, old).loss == pytest.approx(1.0)

    def test_gradient(self, rng):
        new, old = unit_rows(rng, 4, 3), unit_rows(rng, 4, 3)
        numeric = numeric_gradient(lambda f: regress_loss(f, old).loss, new)
        assert relative_error(regress_loss(new, old).grad_features, numeric) < 1e-7

    def test_identical_features_are_zero(self, rng):
        features = unit_rows(rng, 3, 2)
        out = regress_loss(features, features.copy())
        assert out.loss == 0.0
        npt.assert_array_equal(out.grad_features, 0.0)

    def test_antipodal_features_cost_four_per_pair(self, rng):
        old = unit_rows(rng, 5, 3)
        assert regress_loss(-old, old).loss == pytest.approx(4.0, rel=1e-12)

    def test_non_negative_and_zero_only_when_equal(self, rng):
        for _ in range(20):
            new, old = unit_rows(rng, 4, 3), unit_rows(rng, 4, 3)
            assert regress_loss(new, old).loss > 0.0
        features = unit_rows(rng, 4, 3)
        nudged = features.copy()
        nudged[2, 0] += 1e-3
        assert regress_loss(features, features.copy()).loss == 0.0
        assert regress_loss(nudged, features).loss > 0.0


class TestContrastive:
    def test_closer_positive_lowers_loss(self):
        old = np.eye(4)[:3]
        labels = [0, 1, 2]
        losses = []
        for cos in (0.0, 0.3, 0.6, 0.9, 1.0):
            new = old.copy()
            # negatives stay orthogonal, only the positive similarity moves
            new[0] = [cos, 0.0, 0.0, np.sqrt(1.0 - cos * cos)]
            losses.append(contrastive_loss(new, old, labels, 0.5).loss)
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_two_orthogonal_pairs(self):
        features = np.eye(2)
        tau = 0.1
        out = contrastive_loss(features, features.copy(), [0, 1], tau)
        assert out.loss == pytest.approx(np.log1p(np.exp(-1.0 / tau)), rel=1e-9)

    def test_same_class_samples_are_not_negatives(self):
        new = np.eye(3)
        old = np.array([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        tau = 0.5
        out = contrastive_loss(new, old, [0, 0, 1], tau)
        scores = new @ old.T / tau
        anchor0 = np.log(np.exp(scores[0, 0]) + np.exp(scores[0, 2])) - scores[0, 0]
        anchor1 = np.log(np.exp(scores[1, 1]) + np.exp(scores[1, 2])) - scores[1, 1]
        anchor2 = np.log(np.sum(np.exp(scores[2]))) - scores[2, 2]
        assert out.loss == pytest.approx((anchor0 + anchor1 + anchor2) / 3, rel=1e-12)

    def test_gradient(self, rng):
        new, old = unit_rows(rng, 6, 4), unit_rows(rng, 6, 4)
        labels = np.array([0, 1, 1, 2, 0, 2])
        out = contrastive_loss(new, old, labels, 0.5)
        numeric = numeric_gradient(lambda f: contrastive_loss(f, old, labels, 0.5).loss, new)
        assert relative_error(out.grad_features, numeric) < 1e-6

    def test_single_class_batch(self, rng):
        with pytest.raises(BatchCompositionError):
            contrastive_loss(unit_rows(rng, 3, 2), unit_rows(rng, 3, 2), [4, 4, 4])


class TestBuildCompatLoss:
    @pytest.mark.parametrize("kind,cls,name", [
        ("unibct", UniBCTLoss, "UniBCT[refined]"),
        ("unibct-vanilla", VanillaUniBCTLoss, "UniBCT*"),
        ("bct", BCTLoss, "BCT"),
        ("regress", RegressionLoss, "L2-regression"),
        ("contrastive", ContrastiveLoss, "Contrastive"),
    ])
    def test_dispatch(self, kind, cls, name):
        loss = build_compat_loss(CompatLossSpec(kind=kind))
        assert type(loss) is cls
        assert loss.get_name() == name

    def test_variant_passthrough(self):
        loss = build_compat_loss(CompatLossSpec(kind=LossKind.UNIBCT), PrototypeVariant.DROP)
        assert loss.prototype_variant is PrototypeVariant.DROP
        assert loss.requires_prototypes and not loss.requires_old_features

    def test_vanilla_ignores_variant(self):
        loss = build_compat_loss(CompatLossSpec(kind=LossKind.UNIBCT_VANILLA), PrototypeVariant.REFINED)
        assert loss.prototype_variant is PrototypeVariant.VANILLA

    def test_invalid_spec(self):
        with pytest.raises(ConfigurationError):
            build_compat_loss(CompatLossSpec(kind="triplet"))
        with pytest.raises(ConfigurationError):
            build_compat_loss(CompatLossSpec(eta=-1.0))

    def test_unibct_without_prototypes(self, rng):
        with pytest.raises(ConfigurationError):
            build_compat_loss(CompatLossSpec()).compute(unit_rows(rng, 2, 3), [0, 1])


class TestBCTApplicability:
    @pytest.mark.parametrize("scenario", [Scenario.OPEN_DATA, Scenario.EXTENDED_CLASS, Scenario.OPEN_CLASS])
    def test_open_set_rejected(self, tiny_data, scenario):
        with pytest.raises(InapplicableLossError):
            check_bct_applicable(allocate_split(tiny_data, scenario, 0.5))

    @pytest.mark.parametrize("scenario", [Scenario.EXTENDED_DATA, Scenario.IDENTICAL_DATA])
    def test_close_set_accepted(self, tiny_data, scenario):
        split = allocate_split(tiny_data, scenario, 0.5)
        classifier = PrototypeMatrix(np.eye(6), class_ids=tiny_data.class_ids, trainable=False)
        check_bct_applicable(split, classifier)

    def test_classifier_missing_a_class(self, tiny_data):
        split = allocate_split(tiny_data, Scenario.EXTENDED_DATA, 0.5)
        classifier = PrototypeMatrix(np.eye(6)[:5], class_ids=tiny_data.class_ids[:5], trainable=False)
        with pytest.raises(InapplicableLossError):
            check_bct_applicable(split, classifier)
