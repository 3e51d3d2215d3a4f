import numpy as np
import pytest

from ttac.anchors import (
    SourceAnchors,
    anchors_from_features,
    classifier_prototype_anchors,
    compute_source_anchors,
    mixture_moments,
)
from ttac.errors import AnchorError, FormatError
from ttac.nn import ClassifierHead, Model
from ttac.stats import ClusterBank, RunningGaussian
from ttac.tensorio import write_tensors


def bank_with_means(means):
    d = means.shape[1]
    clusters = [RunningGaussian(m, np.eye(d), 5.0) for m in means]
    return ClusterBank(clusters, RunningGaussian(np.zeros(d), np.eye(d), 10.0), np.full(len(means), 1 / len(means)))


class TestSourceAnchors:
    def test_singletons(self):
        a = anchors_from_features(np.array([[0.0, 0.0], [1.0, 1.0]]), np.array([0, 1]), 2)
        assert a.class_means.tolist() == [[0.0, 0.0], [1.0, 1.0]]
        assert not a.class_covs.any()

    def test_global_mean_is_prior_weighted(self):
        rng = np.random.default_rng(0)
        labels = np.repeat(np.arange(4), 25)
        feats = rng.normal(size=(100, 3)) + labels[:, None]
        a = anchors_from_features(feats, labels, 4)
        np.testing.assert_allclose(a.global_mean, a.priors @ a.class_means, atol=1e-12)
        mean, cov = mixture_moments(a.class_means, a.class_covs, a.priors)
        np.testing.assert_allclose(cov, a.global_cov, atol=1e-12)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(1)
        feats, labels = rng.normal(size=(60, 3)), rng.integers(0, 3, 60)
        perm = rng.permutation(60)
        a = anchors_from_features(feats, labels, 3)
        b = anchors_from_features(feats[perm], labels[perm], 3)
        np.testing.assert_allclose(a.class_means, b.class_means, atol=1e-12)
        np.testing.assert_allclose(a.class_covs, b.class_covs, atol=1e-12)

    def test_empty_class_named(self):
        with pytest.raises(AnchorError, match="class 2"):
            anchors_from_features(np.zeros((3, 2)), np.array([0, 1, 0]), 3)

    def test_from_model(self):
        rng = np.random.default_rng(2)
        model = Model.init(4, [5], 3, 2, rng)
        x, y = rng.normal(size=(30, 4)), np.arange(30) % 2
        a = compute_source_anchors(model, x, y)
        assert a.class_means.shape == (2, 3) and a.priors.sum() == pytest.approx(1.0)

    def test_save_load(self, tmp_path):
        rng = np.random.default_rng(3)
        a = anchors_from_features(rng.normal(size=(20, 2)), np.arange(20) % 2, 2)
        a.save(tmp_path / "a.bin")
        b = SourceAnchors.load(tmp_path / "a.bin")
        for name in ("class_means", "class_covs", "priors", "global_mean", "global_cov"):
            assert getattr(a, name).tobytes() == getattr(b, name).tobytes()

    def test_load_wrong_kind(self, tmp_path):
        write_tensors(tmp_path / "a.bin", {"x": np.zeros(1)}, {"kind": "checkpoint"})
        with pytest.raises(FormatError):
            SourceAnchors.load(tmp_path / "a.bin")


class TestClassifierPrototypes:
    def test_matching_norm_keeps_weights(self):
        w = np.array([[3.0, 4.0], [0.0, 2.0]])
        bank = bank_with_means(np.array([[5.0, 0.0], [2.0, 0.0]]))
        a = classifier_prototype_anchors(ClassifierHead(w, np.zeros(2)), bank, 1.0)
        np.testing.assert_allclose(a.class_means, w, atol=1e-15)
        np.testing.assert_array_equal(a.class_covs, np.broadcast_to(np.eye(2), (2, 2, 2)))

    def test_homogeneous_in_target_means(self):
        rng = np.random.default_rng(4)
        head = ClassifierHead(rng.normal(size=(3, 4)), np.zeros(3))
        means = rng.normal(size=(3, 4))
        a = classifier_prototype_anchors(head, bank_with_means(means), 0.5)
        b = classifier_prototype_anchors(head, bank_with_means(2.5 * means), 0.5)
        np.testing.assert_allclose(b.class_means, 2.5 * a.class_means, rtol=1e-12)

    def test_zero_target_mean_uses_unit_scale(self):
        w = np.array([[0.0, 2.0], [1.0, 1.0]])
        a = classifier_prototype_anchors(ClassifierHead(w, np.zeros(2)), bank_with_means(np.zeros((2, 2))), 1.0)
        np.testing.assert_allclose(np.linalg.norm(a.class_means, axis=1), 1.0)

    def test_zero_weight_vector(self):
        w = np.array([[1.0, 0.0], [0.0, 0.0]])
        with pytest.raises(AnchorError, match="class 1"):
            classifier_prototype_anchors(ClassifierHead(w, np.zeros(2)), bank_with_means(np.ones((2, 2))), 1.0)

    def test_global_is_mixture(self):
        rng = np.random.default_rng(5)
        head = ClassifierHead(rng.normal(size=(3, 2)), np.zeros(3))
        a = classifier_prototype_anchors(head, bank_with_means(rng.normal(size=(3, 2))), 2.0)
        np.testing.assert_allclose(a.global_mean, a.class_means.mean(axis=0))
        spread = np.cov(a.class_means.T, bias=True)
        np.testing.assert_allclose(a.global_cov, 2.0 * np.eye(2) + spread, atol=1e-12)
