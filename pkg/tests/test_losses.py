import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xfersv.errors import (
    DegenerateBatchError,
    DegenerateInputError,
    LabelError,
    ParameterError,
    ShapeError,
)
from xfersv.losses import (
    LossWeights,
    ce_loss,
    combined_loss,
    contrastive_ts_loss,
    feat_cosine_loss,
    feat_mmd_loss,
    feat_mse_loss,
    grad_check,
    instance_pairwise_loss,
    kl_ts_loss,
)

from helpers import random_batch, random_labels, random_orthogonal, rng
from oracles import (
    naive_ce,
    naive_contrastive,
    naive_cosine,
    naive_instance,
    naive_kl,
    naive_mmd_linear,
    naive_mmd_rbf,
    naive_mse,
)

# Frozen worked examples (independent closed forms).
KL_HALF_HALF_VS_QUARTER = 0.5 * math.log(2.0) + 0.5 * math.log(2.0 / 3.0)  # 0.1438410362258904
CONTRASTIVE_ORTHONORMAL_B2 = math.log1p(math.exp(-1.0))  # 0.31326168751822286


class TestCrossEntropy:
    def test_hand_posterior(self):
        # softmax([log .2, log .7, log .1]) == [.2, .7, .1]
        logits = np.log(np.array([[0.2, 0.7, 0.1]]))
        out = ce_loss(logits, [1])
        assert out.value == pytest.approx(-math.log(0.7), abs=1e-12)
        assert out.value == pytest.approx(0.356675, abs=1e-6)

    def test_perfect_prediction(self):
        logits = np.array([[500.0, 0.0, 0.0]])
        assert ce_loss(logits, [0]).value == pytest.approx(0.0, abs=1e-12)

    def test_label_out_of_range(self):
        with pytest.raises(LabelError):
            ce_loss(np.zeros((2, 3)), [0, 3])

    def test_gradient(self):
        gen = rng(1)
        logits = gen.normal(size=(4, 5))
        labels = gen.integers(0, 5, size=4)
        out = ce_loss(logits, labels)
        err = grad_check(lambda z: ce_loss(z, labels).value, logits, out.grad_logits)
        assert err < 1e-6


class TestKLTeacherStudent:
    def test_identical_distributions(self):
        gen = rng(2)
        logits = gen.normal(size=(3, 4))
        post = np.exp(logits - np.log(np.exp(logits).sum(axis=1, keepdims=True)))
        assert kl_ts_loss(post, logits).value == pytest.approx(0.0, abs=1e-12)

    def test_hand_case(self):
        post = np.array([[0.5, 0.5]])
        logits = np.array([[0.0, math.log(3.0)]])  # softmax -> [0.25, 0.75]
        assert kl_ts_loss(post, logits).value == pytest.approx(KL_HALF_HALF_VS_QUARTER, abs=1e-12)
        assert kl_ts_loss(post, logits).value == pytest.approx(0.143841, abs=1e-6)

    def test_nonnegative_on_random_pairs(self):
        gen = rng(3)
        for _ in range(1000):
            b, c = int(gen.integers(1, 5)), int(gen.integers(2, 6))
            post = gen.dirichlet(np.ones(c), size=b)
            logits = gen.normal(size=(b, c)) * 3
            assert kl_ts_loss(post, logits).value >= -1e-12

    def test_zero_teacher_mass_contributes_zero(self):
        post = np.array([[1.0, 0.0]])
        logits = np.array([[0.0, 0.0]])
        assert kl_ts_loss(post, logits).value == pytest.approx(math.log(2.0), abs=1e-12)

    def test_bad_temperature(self):
        with pytest.raises(ParameterError):
            kl_ts_loss(np.array([[1.0, 0.0]]), np.zeros((1, 2)), temperature=0.0)

    @pytest.mark.parametrize("temperature", [1.0, 2.5])
    def test_gradient(self, temperature):
        gen = rng(4)
        post = gen.dirichlet(np.ones(5), size=4)
        logits = gen.normal(size=(4, 5))
        out = kl_ts_loss(post, logits, temperature)
        err = grad_check(lambda z: kl_ts_loss(post, z, temperature).value,
                         logits, out.grad_logits)
        assert err < 1e-6


class TestFeatureMse:
    def test_identical(self):
        x = rng(5).normal(size=(3, 4))
        assert feat_mse_loss(x, x).value == 0.0

    def test_hand_case(self):
        assert feat_mse_loss([[1.0, 0.0]], [[0.0, 0.0]]).value == pytest.approx(0.5, abs=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            feat_mse_loss(np.ones((2, 3)), np.ones((3, 2)))

    def test_gradient(self):
        gen = rng(6)
        t, s = gen.normal(size=(4, 3)), gen.normal(size=(4, 3))
        out = feat_mse_loss(t, s)
        err = grad_check(lambda x: feat_mse_loss(t, x).value, s, out.grad_embeddings)
        assert err < 1e-6


class TestFeatureCosine:
    def test_colinear(self):
        t = rng(7).normal(size=(3, 4))
        assert feat_cosine_loss(t, 2.5 * t).value == pytest.approx(0.0, abs=1e-12)

    def test_hand_case(self):
        assert feat_cosine_loss([[1.0, 0.0]], [[0.6, 0.8]]).value == pytest.approx(0.4, abs=1e-12)

    def test_positive_scale_invariance(self):
        gen = rng(8)
        t, s = gen.normal(size=(4, 3)), gen.normal(size=(4, 3))
        scales = gen.uniform(0.1, 10.0, size=(4, 1))
        assert feat_cosine_loss(t, s).value == pytest.approx(
            feat_cosine_loss(t, s * scales).value, abs=1e-12)

    def test_zero_norm_row(self):
        with pytest.raises(DegenerateInputError):
            feat_cosine_loss([[1.0, 0.0]], [[0.0, 0.0]])

    def test_gradient(self):
        gen = rng(9)
        t, s = gen.normal(size=(4, 3)), gen.normal(size=(4, 3))
        out = feat_cosine_loss(t, s)
        err = grad_check(lambda x: feat_cosine_loss(t, x).value, s, out.grad_embeddings)
        assert err < 1e-6


class TestFeatureMmd:
    def test_identical_batches(self):
        x = rng(10).normal(size=(4, 3))
        assert feat_mmd_loss(x, x, kernel="linear").value == 0.0
        assert feat_mmd_loss(x, x, kernel="rbf").value == pytest.approx(0.0, abs=1e-12)

    def test_linear_hand_case(self):
        t = np.array([[2.0, 0.0], [0.0, 0.0]])  # mean [1, 0]
        s = np.zeros((2, 2))
        assert feat_mmd_loss(t, s, kernel="linear").value == pytest.approx(1.0, abs=1e-15)

    def test_invalid_bandwidth(self):
        x = np.ones((2, 2))
        with pytest.raises(ParameterError):
            feat_mmd_loss(x, x, kernel="rbf", bandwidth=-1.0)
        with pytest.raises(ParameterError):
            feat_mmd_loss(x, x, kernel="rbf", bandwidth="widest")
        with pytest.raises(ParameterError):
            feat_mmd_loss(x, x, kernel="gaussian")

    @pytest.mark.parametrize("kernel,bw", [("linear", None), ("rbf", 1.3)])
    def test_gradient(self, kernel, bw):
        gen = rng(11)
        t, s = gen.normal(size=(4, 3)), gen.normal(size=(4, 3))
        kwargs = {"kernel": kernel} if bw is None else {"kernel": kernel, "bandwidth": bw}
        out = feat_mmd_loss(t, s, **kwargs)
        err = grad_check(lambda x: feat_mmd_loss(t, x, **kwargs).value, s, out.grad_embeddings)
        assert err < 1e-6


class TestContrastive:
    def test_orthonormal_worked_example(self):
        t = np.eye(2)
        out = contrastive_ts_loss(t, t, [0, 1])
        assert out.value == pytest.approx(CONTRASTIVE_ORTHONORMAL_B2, abs=1e-12)

    def test_saturates_to_zero(self):
        # Positive inner products far above the negatives -> softmax saturation.
        t = np.eye(2) * 50.0
        s = np.eye(2)
        assert contrastive_ts_loss(t, s, [0, 1]).value == pytest.approx(0.0, abs=1e-12)

    def test_single_label_batch(self):
        with pytest.raises(DegenerateBatchError):
            contrastive_ts_loss(np.eye(2), np.eye(2), [3, 3])

    def test_rotation_invariance(self):
        gen = rng(12)
        t, s = gen.normal(size=(5, 4)), gen.normal(size=(5, 4))
        labels = random_labels(gen, 5, 3)
        q = random_orthogonal(4, seed=13)
        base = contrastive_ts_loss(t, s, labels).value
        rotated = contrastive_ts_loss(t @ q, s @ q, labels).value
        assert rotated == pytest.approx(base, abs=1e-9)

    def test_strictly_decreases_with_positive_similarity(self):
        # Orthogonal anchors so that boosting s_i along t_i changes only
        # anchor i's positive similarity.
        t = np.eye(3)
        gen = rng(14)
        s = gen.normal(size=(3, 3))
        labels = np.array([0, 1, 2])
        prev = contrastive_ts_loss(t, s, labels).value
        for step in range(1, 4):
            boosted = s + 0.5 * step * t
            cur = contrastive_ts_loss(t, boosted, labels).value
            assert cur < prev
            prev = cur

    def test_exclude_positive_variant(self):
        gen = rng(15)
        t, s = gen.normal(size=(4, 3)), gen.normal(size=(4, 3))
        labels = np.array([0, 0, 1, 1])
        inc = contrastive_ts_loss(t, s, labels, include_positive=True).value
        exc = contrastive_ts_loss(t, s, labels, include_positive=False).value
        assert inc == pytest.approx(
            naive_contrastive(t, s, labels, include_positive=True), abs=1e-10)
        assert exc == pytest.approx(
            naive_contrastive(t, s, labels, include_positive=False), abs=1e-10)
        assert inc != exc

    @pytest.mark.parametrize("normalize,include_positive",
                             [(False, True), (True, True), (False, False)])
    def test_gradient(self, normalize, include_positive):
        gen = rng(16)
        t, s = gen.normal(size=(6, 4)), gen.normal(size=(6, 4))
        labels = random_labels(gen, 6, 3)
        out = contrastive_ts_loss(t, s, labels, normalize=normalize,
                                  include_positive=include_positive)
        err = grad_check(
            lambda x: contrastive_ts_loss(t, x, labels, normalize=normalize,
                                          include_positive=include_positive).value,
            s, out.grad_embeddings)
        assert err < 1e-5


class TestInstancePairwise:
    def test_identical_batches(self):
        x = rng(17).normal(size=(4, 3))
        assert instance_pairwise_loss(x, x).value == 0.0

    def test_hand_case(self):
        t = np.eye(2)
        s = np.array([[1.0, 0.0], [1.0, 0.0]])
        assert instance_pairwise_loss(t, s).value == pytest.approx(0.5, abs=1e-15)

    def test_value_symmetric_in_arguments(self):
        gen = rng(18)
        t, s = gen.normal(size=(5, 3)), gen.normal(size=(5, 3))
        assert instance_pairwise_loss(t, s).value == instance_pairwise_loss(s, t).value

    def test_independent_rotation_invariance(self):
        gen = rng(19)
        t, s = gen.normal(size=(5, 4)), gen.normal(size=(5, 4))
        q1 = random_orthogonal(4, seed=20)
        q2 = random_orthogonal(4, seed=21)
        base = instance_pairwise_loss(t, s).value
        assert instance_pairwise_loss(t @ q1, s @ q2).value == pytest.approx(base, abs=1e-9)

    def test_gradient(self):
        gen = rng(22)
        t, s = gen.normal(size=(5, 4)), gen.normal(size=(5, 4))
        out = instance_pairwise_loss(t, s)
        err = grad_check(lambda x: instance_pairwise_loss(t, x).value, s, out.grad_embeddings)
        assert err < 1e-5


class TestCombined:
    def test_zero_weights_reduce_to_ce(self):
        batch = random_batch(23)
        combined = combined_loss(batch, LossWeights(0.0, 0.0), "ce_fprime_instance")
        ce = ce_loss(batch.student_logits, batch.labels)
        assert combined.value == ce.value
        assert np.array_equal(combined.grad_logits, ce.grad_logits)

    def test_paper_weights_match_component_sum(self):
        batch = random_batch(24, b=6, f=4, c=5)
        weights = LossWeights()  # 0.1 / 10
        out = combined_loss(batch, weights, "ce_fprime_instance")
        expected = (ce_loss(batch.student_logits, batch.labels).value
                    + 0.1 * contrastive_ts_loss(batch.teacher_embeddings,
                                                batch.student_embeddings, batch.labels).value
                    + 10.0 * instance_pairwise_loss(batch.teacher_embeddings,
                                                    batch.student_embeddings).value)
        assert out.value == pytest.approx(expected, rel=1e-12)

    def test_gradient_is_weighted_sum(self):
        batch = random_batch(25, b=5, f=3, c=4)
        weights = LossWeights(0.3, 2.0)
        out = combined_loss(batch, weights, "ce_fprime_instance")
        g_f = contrastive_ts_loss(batch.teacher_embeddings, batch.student_embeddings,
                                  batch.labels).grad_embeddings
        g_i = instance_pairwise_loss(batch.teacher_embeddings,
                                     batch.student_embeddings).grad_embeddings
        expected = 0.3 * g_f + 2.0 * g_i
        assert np.max(np.abs(out.grad_embeddings - expected)) < 1e-12

    def test_unknown_recipe(self):
        with pytest.raises(ParameterError):
            combined_loss(random_batch(26), LossWeights(), "ce_arcface")

    @pytest.mark.parametrize("recipe", ["ce", "ce_kl", "ce_cos", "ce_mse", "ce_mmd",
                                        "ce_fprime", "ce_instance", "ce_fprime_instance"])
    def test_all_recipes_finite(self, recipe):
        out = combined_loss(random_batch(27, b=6, f=4, c=5), LossWeights(), recipe)
        assert np.isfinite(out.value)
        assert "ce" in out.components


class TestOracleEquivalence:
    """Each vectorized loss vs the naive double-loop reference."""

    @settings(deadline=None, max_examples=60)
    @given(st.integers(min_value=0, max_value=10_000))
    def test_all_losses_match_naive(self, seed):
        gen = rng(seed)
        b = int(gen.integers(2, 9))
        f = int(gen.integers(1, 6))
        c = int(gen.integers(2, 7))
        t = gen.normal(size=(b, f))
        s = gen.normal(size=(b, f))
        logits = gen.normal(size=(b, c)) * 2
        post = gen.dirichlet(np.ones(c), size=b)
        labels = random_labels(gen, b, c)

        assert ce_loss(logits, labels).value == pytest.approx(
            naive_ce(logits, labels), rel=1e-10)
        assert kl_ts_loss(post, logits).value == pytest.approx(
            naive_kl(post, logits), rel=1e-10, abs=1e-12)
        assert feat_mse_loss(t, s).value == pytest.approx(naive_mse(t, s), rel=1e-10)
        assert feat_cosine_loss(t, s).value == pytest.approx(
            naive_cosine(t, s), rel=1e-10, abs=1e-12)
        assert feat_mmd_loss(t, s, "linear").value == pytest.approx(
            naive_mmd_linear(t, s), rel=1e-10, abs=1e-12)
        assert feat_mmd_loss(t, s, "rbf", 1.7).value == pytest.approx(
            naive_mmd_rbf(t, s, 1.7), rel=1e-10, abs=1e-12)
        assert contrastive_ts_loss(t, s, labels).value == pytest.approx(
            naive_contrastive(t, s, labels), rel=1e-10)
        assert instance_pairwise_loss(t, s).value == pytest.approx(
            naive_instance(t, s), rel=1e-10, abs=1e-12)


class TestSharedProperties:
    @settings(deadline=None, max_examples=25)
    @given(st.integers(min_value=0, max_value=10_000))
    def test_simultaneous_row_permutation_leaves_values_unchanged(self, seed):
        gen = rng(seed)
        b, f, c = 6, 4, 4
        t = gen.normal(size=(b, f))
        s = gen.normal(size=(b, f))
        logits = gen.normal(size=(b, c))
        post = gen.dirichlet(np.ones(c), size=b)
        labels = random_labels(gen, b, c)
        perm = gen.permutation(b)

        pairs = [
            (ce_loss(logits, labels).value, ce_loss(logits[perm], labels[perm]).value),
            (kl_ts_loss(post, logits).value, kl_ts_loss(post[perm], logits[perm]).value),
            (feat_mse_loss(t, s).value, feat_mse_loss(t[perm], s[perm]).value),
            (feat_cosine_loss(t, s).value, feat_cosine_loss(t[perm], s[perm]).value),
            (feat_mmd_loss(t, s).value, feat_mmd_loss(t[perm], s[perm]).value),
            (contrastive_ts_loss(t, s, labels).value,
             contrastive_ts_loss(t[perm], s[perm], labels[perm]).value),
            (instance_pairwise_loss(t, s).value,
             instance_pairwise_loss(t[perm], s[perm]).value),
        ]
        for base, permuted in pairs:
            assert permuted == pytest.approx(base, rel=1e-12, abs=1e-12)

    def test_nonnegative_losses(self):
        gen = rng(29)
        for _ in range(50):
            b, f, c = 5, 3, 4
            t, s = gen.normal(size=(b, f)), gen.normal(size=(b, f))
            logits = gen.normal(size=(b, c))
            post = gen.dirichlet(np.ones(c), size=b)
            labels = random_labels(gen, b, c)
            assert ce_loss(logits, labels).value >= 0
            assert kl_ts_loss(post, logits).value >= -1e-12
            assert feat_mse_loss(t, s).value >= 0
            assert feat_mmd_loss(t, s).value >= 0
            assert instance_pairwise_loss(t, s).value >= 0
            assert contrastive_ts_loss(t, s, labels).value >= -1e-12
