"""
Property sweeps over many random instances, plus the end-to-end benchmark
runs (marked slow; run with ``pytest -m slow``).
"""

import numpy as np
import numpy.testing as npt
import pytest

from conftest import numeric_gradient, relative_error, unit_rows
from compatlab.cli import run_experiment
from compatlab.compat_losses import contrastive_loss, regress_loss, unibct_loss
from compatlab.config import ExperimentConfig
from compatlab.embedding_model import ArcFaceParams, PrototypeMatrix, arcface_loss
from compatlab.evaluation import tar_at_far, topk_identification
from compatlab.prototype_engine import ClassGraph, build_edges, propagate_closed_form, propagate_iterative
from compatlab.synthetic_data import Scenario


def test_closed_form_equals_long_iteration_on_random_graphs():
    rng = np.random.default_rng(11)
    for _ in range(100):
        m, d = int(rng.integers(2, 65)), int(rng.integers(4, 65))
        lam = float(rng.choice([0.5, 0.9, 0.95]))
        graph = ClassGraph.build(rng.normal(size=(m, d)), unit_rows(rng, m, d), 0.05, lam)
        diff = np.max(np.abs(propagate_closed_form(graph) - propagate_iterative(graph, 2000)))
        assert diff <= 1e-8


def test_edge_matrix_properties():
    rng = np.random.default_rng(12)
    for _ in range(1000):
        m = int(rng.integers(2, 12))
        edges = build_edges(unit_rows(rng, m, 5), float(rng.uniform(0.01, 1.0)))
        npt.assert_allclose(edges.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(np.diag(edges) == 0.0)
        assert np.all(edges >= 0.0)
        if m == 2:
            npt.assert_array_equal(edges, [[0.0, 1.0], [1.0, 0.0]])


class TestGradientSweep:
    TRIALS = 20

    def test_arcface(self):
        rng = np.random.default_rng(13)
        for _ in range(self.TRIALS):
            features, labels = unit_rows(rng, 4, 6), rng.integers(0, 3, size=4)
            prototypes = PrototypeMatrix(unit_rows(rng, 3, 6))
            params = ArcFaceParams(scale=float(rng.uniform(1.0, 16.0)), margin=float(rng.uniform(0.0, 0.5)))
            result = arcface_loss(features, labels, prototypes, params)
            numeric = numeric_gradient(lambda f: arcface_loss(f, labels, prototypes, params).loss, features)
            assert relative_error(result.grad_features, numeric) <= 1e-4

    def test_unibct(self):
        rng = np.random.default_rng(14)
        for _ in range(self.TRIALS):
            features, labels = unit_rows(rng, 5, 4), rng.integers(0, 4, size=5)
            prototypes = PrototypeMatrix(unit_rows(rng, 4, 4), trainable=False)
            params = ArcFaceParams(scale=8.0, margin=0.3)
            out = unibct_loss(features, labels, prototypes, params)
            numeric = numeric_gradient(lambda f: unibct_loss(f, labels, prototypes, params).loss, features)
            assert relative_error(out.grad_features, numeric) <= 1e-4

    def test_regression(self):
        rng = np.random.default_rng(15)
        for _ in range(self.TRIALS):
            new, old = unit_rows(rng, 5, 4), unit_rows(rng, 5, 4)
            numeric = numeric_gradient(lambda f: regress_loss(f, old).loss, new)
            assert relative_error(regress_loss(new, old).grad_features, numeric) <= 1e-4

    def test_contrastive(self):
        rng = np.random.default_rng(16)
        for _ in range(self.TRIALS):
            new, old = unit_rows(rng, 6, 4), unit_rows(rng, 6, 4)
            labels = np.array([0, 1, 2, 0, 1, 2])
            tau = float(rng.uniform(0.2, 1.0))
            out = contrastive_loss(new, old, labels, tau)
            numeric = numeric_gradient(lambda f: contrastive_loss(f, old, labels, tau).loss, new)
            assert relative_error(out.grad_features, numeric) <= 1e-4


def test_arcface_without_margin_is_cosine_softmax():
    rng = np.random.default_rng(17)
    features, labels = unit_rows(rng, 7, 5), rng.integers(0, 4, size=7)
    prototypes = PrototypeMatrix(unit_rows(rng, 4, 5))
    logits = features @ prototypes.rows.T
    log_probs = logits - np.log(np.sum(np.exp(logits), axis=1, keepdims=True))
    expected = -np.mean(log_probs[np.arange(7), labels])
    result = arcface_loss(features, labels, prototypes, ArcFaceParams(scale=1.0, margin=0.0))
    assert abs(result.loss - expected) <= 1e-9


def test_metrics_match_brute_force_on_random_fixtures():
    rng = np.random.default_rng(18)
    for _ in range(50):
        genuine = np.round(rng.normal(0.5, 0.25, size=int(rng.integers(1, 30))), 2)
        impostor = np.round(rng.normal(0.0, 0.3, size=int(rng.integers(20, 200))), 2)
        far = float(rng.choice([0.05, 0.1, 0.5]))
        result = tar_at_far(genuine, impostor, far)
        threshold = None
        for t in sorted(set(genuine) | set(impostor) | {np.nextafter(impostor.max(), np.inf)}):
            if np.mean(impostor >= t) <= far:
                threshold = t
                break
        assert result.threshold == threshold
        assert result.tar == np.mean(genuine >= threshold)

        q, g = int(rng.integers(1, 8)), int(rng.integers(1, 12))
        scores = np.round(rng.uniform(-1, 1, size=(q, g)), 1)
        query_labels, gallery_labels = rng.integers(0, 3, q), rng.integers(0, 3, g)
        acc = topk_identification(scores, query_labels, gallery_labels, k_list=(1, 5))
        for k in (1, 5):
            hits = 0
            for i in range(q):
                ranked = sorted(range(g), key=lambda j: (-scores[i, j], j))
                hits += any(gallery_labels[j] == query_labels[i] for j in ranked[:k])
            assert acc[k] == hits / q


def _benchmark(tmp_path, scenario, loss, seed, variant="refined"):
    config = ExperimentConfig.from_dict({
        "split": {"scenario": scenario.value, "old_fraction": 0.3},
        "loss": {"kind": loss},
        "refinement": {"variant": variant},
        "output_dir": str(tmp_path / scenario.value / f"{loss}-{variant}" / f"seed-{seed}"),
    }).with_seed(seed)
    return run_experiment(config, progress=False)


@pytest.mark.slow
def test_unibct_passes_and_regression_fails_the_verdict(tmp_path):
    passes = fails = 0
    for scenario in Scenario:
        for seed in range(3):
            passes += _benchmark(tmp_path, scenario, "unibct", seed).verification_compatible
            fails += not _benchmark(tmp_path, scenario, "regress", seed).verification_compatible
    assert passes >= 13
    assert fails >= 13


@pytest.mark.slow
def test_refined_prototypes_help_on_open_class(tmp_path):
    refined = [_benchmark(tmp_path, Scenario.OPEN_CLASS, "unibct", s, "refined").cross.top1 for s in range(5)]
    vanilla = [_benchmark(tmp_path, Scenario.OPEN_CLASS, "unibct", s, "vanilla").cross.top1 for s in range(5)]
    assert np.mean(refined) >= np.mean(vanilla)
