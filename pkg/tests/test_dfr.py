"""
DFR 分类头重训练测试
"""
import os
import sys
import tempfile
import unittest
from dataclasses import replace
from pathlib import Path

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

# 添加src目录到Python路径
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from dfr_workbench.datagen import DatasetSpec, generate_dataset  # noqa: E402
from dfr_workbench.dfr import (  # noqa: E402
    DfrConfig,
    DfrResult,
    FeatureMatrix,
    apply_dfr,
    balanced_subset,
    extract_features,
    load_dfr_result,
    logistic_objective,
    retrain_head,
    save_dfr_result,
    soft_threshold,
    sparsity,
    sparsity_path,
)
from dfr_workbench.errors import ArgumentError, BalanceError, LabelError, ShapeError  # noqa: E402
from dfr_workbench.nn import Encoder, Head, TrainedModel, forward, predict_samples  # noqa: E402

SMALL = DatasetSpec(image_size=16, n_train_per_class=10, n_val_per_class=10, n_test_per_class=8,
                    patch_size=3, seed=4)

PRECISE = DfrConfig(l1_lambda=0.0, max_iters=200000, step_size=1.0, tol=1e-15)


def random_model(seed: int = 0, widths=(4, 4, 6)) -> TrainedModel:
    rng = np.random.default_rng(seed)
    encoder = Encoder.initialize(3, widths, rng)
    for stage in encoder.stages:
        stage.bias[:] = 0.05
    return TrainedModel(encoder, Head(rng.standard_normal(widths[-1]), -0.2))


def nonseparable_instance(n_features: int = 2, seed: int = 0) -> FeatureMatrix:
    """40 行、每组 10 行；后 10 行复制前 10 行并翻转标签，保证不可分"""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((30, n_features))
    y = (z[:, 0] + 0.8 * rng.standard_normal(30) > 0).astype(int)
    z = np.vstack([z, z[:10]])
    y = np.concatenate([y, 1 - y[:10]])
    groups = np.repeat(np.arange(4), 10)
    return FeatureMatrix(z, y, groups)


def gd_oracle(features: FeatureMatrix, steps: int, lr: float):
    """无正则的普通梯度下降"""
    z, y = features.values, features.labels.astype(float)
    w = np.zeros(features.cols)
    b = 0.0
    n = features.rows
    for _ in range(steps):
        r = (1.0 / (1.0 + np.exp(-(z @ w + b))) - y) / n
        w = w - lr * (z.T @ r)
        b = b - lr * r.sum()
    return w, b


class TestBalancedSubset(unittest.TestCase):
    """组平衡子集"""

    def test_equal_groups(self):
        groups = np.repeat(np.arange(4), 10)
        idx = balanced_subset(groups, seed=0)
        self.assertEqual(len(idx), 40)
        self.assertEqual(np.bincount(groups[idx]).tolist(), [10, 10, 10, 10])

    def test_min_group_size_rule(self):
        groups = np.repeat(np.arange(4), [5, 9, 7, 6])
        idx = balanced_subset(groups, seed=3)
        self.assertEqual(len(idx), 20)
        self.assertEqual(np.bincount(groups[idx]).tolist(), [5, 5, 5, 5])
        self.assertEqual(len(set(idx.tolist())), 20)

    def test_isic_like_validation(self):
        groups = np.repeat(np.arange(4), 60)
        self.assertEqual(len(balanced_subset(groups, seed=1)), 240)

    def test_deterministic_and_seeded(self):
        groups = np.repeat(np.arange(4), [20, 30, 25, 40])
        np.testing.assert_array_equal(balanced_subset(groups, 5), balanced_subset(groups, 5))
        self.assertFalse(np.array_equal(balanced_subset(groups, 5), balanced_subset(groups, 6)))
        self.assertFalse(np.array_equal(balanced_subset(groups, 5, repeat=0), balanced_subset(groups, 5, repeat=1)))

    def test_empty_group(self):
        groups = np.array([0, 0, 1, 3, 3])
        with self.assertRaises(BalanceError) as ctx:
            balanced_subset(groups, seed=0)
        self.assertEqual(ctx.exception.group, 2)

    def test_accepts_samples(self):
        dataset = generate_dataset(SMALL)
        idx = balanced_subset(dataset.valid, seed=0)
        self.assertEqual(len(idx), 20)


class TestSoftThreshold(unittest.TestCase):
    """软阈值"""

    def test_values(self):
        self.assertAlmostEqual(soft_threshold(0.7, 0.2), 0.5, places=15)
        self.assertEqual(soft_threshold(-0.1, 0.2), 0.0)
        self.assertFalse(np.signbit(soft_threshold(-0.1, 0.2)))
        self.assertEqual(soft_threshold(-1.25, 0.0), -1.25)

    def test_negative_threshold(self):
        with self.assertRaises(ArgumentError):
            soft_threshold(1.0, -0.1)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-1e6, 1e6), st.floats(0, 1e6))
    def test_shrinks_toward_zero(self, v, t):
        out = soft_threshold(v, t)
        self.assertLessEqual(abs(out), abs(v))
        self.assertTrue(out == 0.0 or np.sign(out) == np.sign(v))
        if abs(v) <= t:
            self.assertEqual(out, 0.0)


class TestFeatures(unittest.TestCase):
    """特征提取"""

    @classmethod
    def setUpClass(cls):
        cls.dataset = generate_dataset(SMALL)

    def test_rows_match_forward(self):
        model = random_model(1)
        samples = self.dataset.test[:16]
        features = extract_features(model, samples)
        self.assertEqual((features.rows, features.cols), (16, 6))
        for i, sample in enumerate(samples):
            _, single = forward(model.encoder, sample.image)
            np.testing.assert_allclose(features.values[i], single, rtol=0, atol=1e-14)
        self.assertEqual(features.groups.tolist(), [s.group.index for s in samples])

    def test_zero_encoder(self):
        model = TrainedModel(Encoder.zeros(3, (4, 4, 6)), Head(np.zeros(6)))
        features = extract_features(model, self.dataset.valid)
        self.assertTrue(np.all(features.values == 0.0))

    def test_non_finite_rejected(self):
        with self.assertRaises(ArgumentError):
            FeatureMatrix(np.array([[np.nan]]), np.array([0]), np.array([0]))


class TestRetrainHead(unittest.TestCase):
    """L1 逻辑回归"""

    def test_large_lambda_zeroes_all_weights(self):
        features = nonseparable_instance(5, seed=2)
        z, y = features.values, features.labels
        b_star = np.log(y.mean() / (1 - y.mean()))
        p = 1.0 / (1.0 + np.exp(-b_star))
        threshold = np.max(np.abs(((p - y)[:, None] * z).mean(axis=0)))
        result = retrain_head(features, DfrConfig(l1_lambda=1.01 * threshold, max_iters=20000, tol=1e-14))
        self.assertTrue(np.all(result.head.weights == 0.0))
        self.assertEqual(result.zero_fraction, 1.0)

    def test_unregularized_matches_gradient_descent(self):
        features = nonseparable_instance(2, seed=0)
        result = retrain_head(features, PRECISE)
        w_oracle, b_oracle = gd_oracle(features, steps=200000, lr=1.0)
        np.testing.assert_allclose(result.head.weights, w_oracle, rtol=0, atol=1e-4)
        self.assertAlmostEqual(result.head.bias, b_oracle, delta=1e-4)

    def test_one_feature_lasso_matches_grid_search(self):
        features = nonseparable_instance(1, seed=5)
        lam = 0.05
        result = retrain_head(features, DfrConfig(l1_lambda=lam, max_iters=200000, step_size=1.0, tol=1e-15))
        z, y = features.values[:, 0], features.labels.astype(float)
        grid = np.linspace(-5.0, 5.0, 100001)
        s_w = grid[:, None] * z[None, :]
        b = np.zeros(grid.size)
        for _ in range(60):
            p = 1.0 / (1.0 + np.exp(-(s_w + b[:, None])))
            grad = (p - y).mean(axis=1)
            hess = (p * (1 - p)).mean(axis=1)
            b -= np.clip(grad / np.maximum(hess, 1e-12), -1.0, 1.0)
        s = s_w + b[:, None]
        objective = (np.logaddexp(0.0, s) - y * s).mean(axis=1) + lam * np.abs(grid)
        found = logistic_objective(features.values, y, result.head.weights, result.head.bias, lam)
        self.assertLess(abs(found - objective.min()), 1e-6)

    def test_objective_trace_non_increasing(self):
        features = nonseparable_instance(4, seed=3)
        result = retrain_head(features, DfrConfig(l1_lambda=0.02, max_iters=500))
        trace = np.array(result.objective_trace[0])
        self.assertTrue(np.all(np.diff(trace) <= 0))

    def test_unconverged_result_reports_last_decrease(self):
        features = nonseparable_instance(4, seed=3)
        with self.assertLogs("dfr_workbench.dfr", level="WARNING") as logs:
            result = retrain_head(features, DfrConfig(l1_lambda=0.02, max_iters=3, tol=1e-12))
        self.assertFalse(result.converged)
        trace = result.objective_trace[0]
        self.assertEqual(result.final_decrease, [trace[-2] - trace[-1]])
        self.assertGreater(result.final_decrease[0], 1e-12)
        self.assertIn("last objective decrease", logs.output[0])

    def test_single_label_rejected(self):
        features = FeatureMatrix(np.ones((4, 2)), np.zeros(4), np.arange(4))
        with self.assertRaises(LabelError):
            retrain_head(features, DfrConfig())

    def test_sparsity_monotone_in_lambda(self):
        rng = np.random.default_rng(8)
        z = rng.standard_normal((80, 16))
        y = (z[:, :3].sum(axis=1) + rng.standard_normal(80) > 0).astype(int)
        features = FeatureMatrix(z, y, np.repeat(np.arange(4), 20))
        cfg = DfrConfig(max_iters=50000, step_size=1.0, tol=1e-13)
        fractions = sparsity_path(features, cfg, [0.0, 0.01, 0.1, 1.0])
        self.assertEqual(fractions, sorted(fractions))
        self.assertEqual(fractions[-1], 1.0)

    def test_row_order_invariance(self):
        features = nonseparable_instance(3, seed=4)
        perm = np.random.default_rng(0).permutation(features.rows)
        cfg = DfrConfig(l1_lambda=0.01, max_iters=100000, step_size=1.0, tol=1e-15)
        a = retrain_head(features, cfg)
        b = retrain_head(features.take(perm), cfg)
        np.testing.assert_allclose(a.head.weights, b.head.weights, rtol=0, atol=1e-6)

    def test_standardized_fit_is_mapped_back(self):
        features = nonseparable_instance(2, seed=6)
        features = FeatureMatrix(features.values * [3.0, 0.2] + [1.0, -2.0], features.labels, features.groups)
        plain = retrain_head(features, PRECISE)
        scaled = retrain_head(features, replace(PRECISE, standardize=True))
        self.assertTrue(scaled.standardized)
        self.assertEqual(len(scaled.feature_mean), 1)
        np.testing.assert_allclose(scaled.head.weights, plain.head.weights, rtol=0, atol=1e-4)
        self.assertAlmostEqual(scaled.head.bias, plain.head.bias, delta=1e-4)

    def test_threaded_repeats_match_sequential(self):
        groups = np.repeat(np.arange(4), [12, 15, 10, 20])
        rng = np.random.default_rng(1)
        z = rng.standard_normal((groups.size, 5))
        y = (groups >= 2).astype(int)
        features = FeatureMatrix(z, y, groups)
        cfg = DfrConfig(l1_lambda=0.01, max_iters=300, n_subset_repeats=4)
        sequential = retrain_head(features, cfg)
        threaded = retrain_head(features, replace(cfg, workers=3))
        self.assertEqual(sequential.head.weights.tobytes(), threaded.head.weights.tobytes())
        self.assertEqual(sequential.subset_indices, threaded.subset_indices)
        self.assertEqual(len(sequential.subset_indices), 4)
        self.assertEqual(len(sequential.subset_indices[0]), 40)


class TestApplyAndSparsity(unittest.TestCase):
    """替换分类头与稀疏度"""

    @classmethod
    def setUpClass(cls):
        cls.dataset = generate_dataset(SMALL)
        cls.model = random_model(2)

    def result_with(self, head: Head) -> DfrResult:
        return DfrResult(head, sparsity(head), [[]], [[]], True, [0], DfrConfig())

    def test_own_head_is_identity(self):
        updated = apply_dfr(self.model, self.result_with(self.model.head.copy()))
        np.testing.assert_array_equal(predict_samples(updated, self.dataset.test),
                                      predict_samples(self.model, self.dataset.test))

    def test_encoder_bitwise_unchanged(self):
        updated = apply_dfr(self.model, self.result_with(Head(np.ones(6), 0.0)))
        for a, b in zip(self.model.encoder.parameters(), updated.encoder.parameters()):
            self.assertEqual(a.tobytes(), b.tobytes())

    def test_zero_head_predicts_sigmoid_bias(self):
        updated = apply_dfr(self.model, self.result_with(Head(np.zeros(6), 0.4)))
        expected = 1.0 / (1.0 + np.exp(-0.4))
        np.testing.assert_allclose(predict_samples(updated, self.dataset.test), expected, rtol=0, atol=1e-15)

    def test_dimension_mismatch(self):
        with self.assertRaises(ShapeError):
            apply_dfr(self.model, self.result_with(Head(np.zeros(5))))

    def test_sparsity_value(self):
        self.assertEqual(sparsity(Head(np.array([0.0, 0.0, 0.5, -0.2]))), 0.5)

    def test_result_round_trip(self):
        features = extract_features(self.model, self.dataset.valid)
        result = retrain_head(features, DfrConfig(l1_lambda=0.01, max_iters=200))
        with tempfile.TemporaryDirectory() as tmp:
            loaded = load_dfr_result(save_dfr_result(result, Path(tmp) / "r.json"))
        self.assertEqual(loaded.head.weights.tolist(), result.head.weights.tolist())
        self.assertEqual(loaded.head.bias, result.head.bias)
        self.assertEqual(loaded.config, result.config)
        self.assertEqual(loaded.subset_indices, result.subset_indices)
        self.assertEqual(loaded.final_decrease, result.final_decrease)


if __name__ == '__main__':
    unittest.main()
