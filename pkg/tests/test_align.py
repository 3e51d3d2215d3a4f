import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from helpers import central_difference, max_rel_err, random_anchors, random_gaussian, random_spd

from ttac.align import (
    GaussianParams,
    align_step,
    anchored_clustering_loss,
    cholesky,
    global_alignment_loss,
    kl_gaussian,
    loss_gradient_wrt_features,
)
from ttac.errors import ConfigurationError, NumericalDomainError
from ttac.stats import ClusterBank, FilteredBatch, RunningGaussian


def scalar_kl(m0, v0, m1, v1):
    """Textbook KL(N(m0, v0) || N(m1, v1)) in one dimension."""
    return 0.5 * (v0 / v1 + (m1 - m0) ** 2 / v1 - 1.0 + np.log(v1 / v0))


def eigenbasis_kl(p, q):
    """KL after whitening q with its eigendecomposition."""
    lam_q, u = np.linalg.eigh(q.covariance)
    w = u / np.sqrt(lam_q)
    sp = w.T @ p.covariance @ w
    lam = np.linalg.eigvalsh(sp)
    z = w.T @ (q.mean - p.mean)
    return 0.5 * float(np.sum(lam - np.log(lam) - 1.0) + z @ z)


def g1(mean, var):
    return GaussianParams(np.array([mean]), np.array([[var]]))


def random_bank(rng, k, d, count=20.0, clip=None, clip_k=None):
    clusters = [RunningGaussian.from_moments(rng.normal(size=d), random_spd(rng, d), clip_k) for _ in range(k)]
    clusters = [RunningGaussian(c.mean, c.covariance, count, clip_k) for c in clusters]
    glob = RunningGaussian(rng.normal(size=d), random_spd(rng, d), count * k, clip)
    return ClusterBank(clusters, glob, np.full(k, 1.0 / k))


def random_batch(rng, n, d, k, soft=False):
    x = rng.normal(size=(n, d))
    labels = rng.integers(0, k, n)
    mask = rng.random(n) < 0.7
    weights = rng.dirichlet(np.ones(k), size=n) if soft else None
    return FilteredBatch(x, labels, mask, weights)


def total_loss(x, batch, bank, anchors, lam, **kw):
    b = FilteredBatch(x, batch.pseudo_labels, batch.pass_mask, batch.weights)
    return align_step(b, bank, anchors, lam, **kw).losses.total


class TestKlGaussian:
    def test_scalar_example(self):
        assert kl_gaussian(g1(0, 1), g1(1, 2), ridge=0.0) == pytest.approx(0.5 * np.log(2), abs=1e-12)
        assert kl_gaussian(g1(0, 1), g1(1, 2), ridge=0.0) == pytest.approx(0.34657, abs=1e-5)

    @pytest.mark.parametrize("seed", range(20))
    def test_scalar_closed_form(self, seed):
        rng = np.random.default_rng(seed)
        m0, m1 = rng.normal(size=2)
        v0, v1 = rng.uniform(0.1, 5.0, 2)
        got = kl_gaussian(g1(m0, v0), g1(m1, v1), ridge=0.0)
        assert got == pytest.approx(scalar_kl(m0, v0, m1, v1), abs=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_identical_is_zero(self, seed):
        rng = np.random.default_rng(seed)
        p = random_gaussian(rng, int(rng.integers(1, 9)))
        assert abs(kl_gaussian(p, p)) < 1e-10

    @pytest.mark.parametrize("seed", range(10))
    def test_eigenbasis_oracle(self, seed):
        rng = np.random.default_rng(100 + seed)
        d = 2 if seed < 5 else 6
        p, q = random_gaussian(rng, d), random_gaussian(rng, d)
        assert kl_gaussian(p, q, ridge=0.0) == pytest.approx(eigenbasis_kl(p, q), abs=1e-8)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**31), d=st.integers(1, 8))
    def test_non_negative(self, seed, d):
        rng = np.random.default_rng(seed)
        assert kl_gaussian(random_gaussian(rng, d), random_gaussian(rng, d)) >= -1e-10

    def test_dimension_mismatch(self):
        with pytest.raises(ConfigurationError):
            kl_gaussian(g1(0, 1), GaussianParams(np.zeros(2), np.eye(2)))

    def test_not_spd_reports_pivot(self):
        cov = np.diag([1.0, 1.0, -3.0])
        with pytest.raises(NumericalDomainError) as info:
            kl_gaussian(GaussianParams(np.zeros(3), cov), GaussianParams(np.zeros(3), np.eye(3)))
        assert info.value.pivot == 2


class TestCholesky:
    def test_ridge_rescues_slightly_negative(self):
        eps = 1e-5
        cov = np.diag([1.0, -eps / 2])
        factor = cholesky(cov, eps)
        np.testing.assert_allclose(factor @ factor.T, cov + eps * np.eye(2), atol=1e-15)

    def test_non_finite(self):
        with pytest.raises(NumericalDomainError):
            cholesky(np.array([[np.nan]]))


class TestAnchoredClusteringLoss:
    def test_targets_equal_anchors(self):
        rng = np.random.default_rng(0)
        a = [random_gaussian(rng, 3) for _ in range(4)]
        l_ac, per = anchored_clustering_loss(a, a, range(4))
        assert abs(l_ac) < 1e-10
        assert np.all(np.abs(per) < 1e-10)

    def test_skip_semantics(self):
        rng = np.random.default_rng(1)
        a = [random_gaussian(rng, 2) for _ in range(2)]
        t = [a[0], random_gaussian(rng, 2)]
        l_ac, per = anchored_clustering_loss(a, t, {0})
        assert abs(l_ac) < 1e-10
        assert per[1] == 0.0

    def test_sum_of_scalar_kls(self):
        src = [g1(0, 1), g1(2, 0.5), g1(-1, 3)]
        tgt = [g1(1, 2), g1(2, 1), g1(0, 1)]
        l_ac, per = anchored_clustering_loss(src, tgt, range(3), ridge=0.0)
        expect = [scalar_kl(s.mean[0], s.covariance[0, 0], t.mean[0], t.covariance[0, 0]) for s, t in zip(src, tgt)]
        np.testing.assert_allclose(per, expect, atol=1e-12)
        assert l_ac == pytest.approx(sum(expect), abs=1e-12)

    def test_error_carries_class_index(self):
        a = [g1(0, 1), g1(0, 1)]
        t = [g1(0, 1), g1(0, -1)]
        with pytest.raises(NumericalDomainError) as info:
            anchored_clustering_loss(a, t, {0, 1})
        assert info.value.class_index == 1

    def test_paper_printed_form_differs(self):
        std = anchored_clustering_loss([g1(0, 1)], [g1(1, 2)], {0}, "standard", 0.0)[0]
        printed = anchored_clustering_loss([g1(0, 1)], [g1(1, 2)], {0}, "paper_printed", 0.0)[0]
        assert std != printed
        assert anchored_clustering_loss([g1(0, 1)], [g1(0, 1)], {0}, "paper_printed", 0.0)[0] == pytest.approx(0.0)


class TestGlobalAlignmentLoss:
    def test_equal(self):
        p = random_gaussian(np.random.default_rng(2), 4)
        assert abs(global_alignment_loss(p, p)) < 1e-10

    def test_scalar(self):
        assert global_alignment_loss(g1(0, 1), g1(1, 2), ridge=0.0) == pytest.approx(0.34657, abs=1e-5)

    def test_strictly_changes_with_target_variance(self):
        values = [global_alignment_loss(g1(0, 1), g1(0, v), ridge=0.0) for v in np.linspace(1.0, 4.0, 13)]
        assert np.all(np.diff(values) > 0)


class TestFeatureGradient:
    def test_zero_when_no_loss_path(self):
        rng = np.random.default_rng(3)
        bank = random_bank(rng, 3, 4)
        anchors = random_anchors(rng, 3, 4)
        x = rng.normal(size=(10, 4))
        batch = FilteredBatch(x, rng.integers(0, 3, 10), np.zeros(10, dtype=bool))
        g = loss_gradient_wrt_features(batch, bank, anchors, 0.0)
        assert np.array_equal(g, np.zeros_like(x))

    @pytest.mark.parametrize("seed", range(8))
    @pytest.mark.parametrize("kl_form", ["standard", "paper_printed"])
    def test_matches_finite_differences(self, seed, kl_form):
        rng = np.random.default_rng(seed)
        d, k, n = int(rng.integers(2, 6)), int(rng.integers(2, 5)), 12
        bank = random_bank(rng, k, d, count=float(rng.integers(5, 40)))
        anchors = random_anchors(rng, k, d)
        batch = random_batch(rng, n, d, k)
        lam = float(rng.uniform(0.2, 2.0))
        kw = dict(kl_form=kl_form)
        g = loss_gradient_wrt_features(batch, bank, anchors, lam, **kw)
        fd = central_difference(lambda x: total_loss(x, batch, bank, anchors, lam, **kw), batch.features)
        assert max_rel_err(g, fd) < 1e-4

    @pytest.mark.parametrize("seed", range(4))
    def test_soft_assignment_matches_finite_differences(self, seed):
        rng = np.random.default_rng(50 + seed)
        d, k = 3, 3
        bank = random_bank(rng, k, d)
        anchors = random_anchors(rng, k, d)
        batch = random_batch(rng, 10, d, k, soft=True)
        g = loss_gradient_wrt_features(batch, bank, anchors, 1.0)
        fd = central_difference(lambda x: total_loss(x, batch, bank, anchors, 1.0), batch.features)
        assert max_rel_err(g, fd) < 1e-4

    @pytest.mark.parametrize("seed", range(4))
    def test_l2_global_form_matches_finite_differences(self, seed):
        rng = np.random.default_rng(70 + seed)
        bank = random_bank(rng, 2, 3)
        anchors = random_anchors(rng, 2, 3)
        batch = random_batch(rng, 8, 3, 2)
        g = loss_gradient_wrt_features(batch, bank, anchors, 0.7, ga_form="l2")
        fd = central_difference(lambda x: total_loss(x, batch, bank, anchors, 0.7, ga_form="l2"), batch.features)
        assert max_rel_err(g, fd) < 1e-4

    def test_clipped_coefficient_matches_finite_differences(self):
        rng = np.random.default_rng(90)
        bank = random_bank(rng, 2, 3, count=500.0, clip=64, clip_k=32)
        anchors = random_anchors(rng, 2, 3)
        batch = random_batch(rng, 16, 3, 2)
        g = loss_gradient_wrt_features(batch, bank, anchors, 1.0)
        fd = central_difference(lambda x: total_loss(x, batch, bank, anchors, 1.0), batch.features)
        assert max_rel_err(g, fd) < 1e-4

    def test_duplicate_rows_have_equal_gradients(self):
        rng = np.random.default_rng(4)
        bank = random_bank(rng, 2, 3)
        anchors = random_anchors(rng, 2, 3)
        x = rng.normal(size=(6, 3))
        x[5] = x[2]
        labels = np.array([0, 1, 0, 1, 0, 0])
        batch = FilteredBatch(x, labels, np.ones(6, dtype=bool))
        g = loss_gradient_wrt_features(batch, bank, anchors, 1.0)
        np.testing.assert_allclose(g[5], g[2], atol=1e-8)


class TestAlignStep:
    def test_breakdown_invariants(self):
        rng = np.random.default_rng(5)
        bank = random_bank(rng, 3, 3)
        anchors = random_anchors(rng, 3, 3)
        batch = random_batch(rng, 20, 3, 3)
        step = align_step(batch, bank, anchors, 0.5, min_cluster_count=1.0)
        losses = step.losses
        assert losses.total == pytest.approx(losses.l_ac + 0.5 * losses.l_ga)
        active = [k for k in range(3) if k not in losses.skipped_classes]
        assert losses.l_ac == pytest.approx(losses.per_class_kl[active].sum())
        assert losses.l_ga >= 0 and np.all(losses.per_class_kl >= -1e-10)

    def test_skips_classes_below_min_count(self):
        rng = np.random.default_rng(6)
        bank = random_bank(rng, 3, 2, count=0.0)
        anchors = random_anchors(rng, 3, 2)
        x = rng.normal(size=(4, 2))
        batch = FilteredBatch(x, np.array([0, 0, 0, 1]), np.ones(4, dtype=bool))
        step = align_step(batch, bank, anchors, 1.0, min_cluster_count=2)
        assert step.losses.skipped_classes == {1, 2}
        assert step.losses.per_class_kl[1] == 0.0

    def test_bank_not_mutated(self):
        rng = np.random.default_rng(7)
        bank = random_bank(rng, 2, 2)
        before = bank.copy()
        align_step(random_batch(rng, 8, 2, 2), bank, random_anchors(rng, 2, 2), 1.0)
        np.testing.assert_array_equal(before.global_stats.covariance, bank.global_stats.covariance)
        np.testing.assert_array_equal(before.counts(), bank.counts())

    def test_unknown_forms(self):
        rng = np.random.default_rng(8)
        bank, anchors, batch = random_bank(rng, 2, 2), random_anchors(rng, 2, 2), random_batch(rng, 4, 2, 2)
        with pytest.raises(ConfigurationError):
            align_step(batch, bank, anchors, 1.0, ga_form="cmd")
        with pytest.raises(ConfigurationError):
            align_step(batch, bank, anchors, 1.0, kl_form="reverse")
