"""
编码器、分类头与 ERM 训练测试
"""
import math
import os
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

# 添加src目录到Python路径
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from dfr_workbench.datagen import DatasetSpec, generate_dataset  # noqa: E402
from dfr_workbench.errors import ArgumentError, ShapeError, SpecificationError  # noqa: E402
from dfr_workbench.nn import (  # noqa: E402
    BCE_EPS,
    Encoder,
    Head,
    TrainConfig,
    bce_loss,
    encode,
    forward,
    global_average_pool,
    grad_check,
    load_model,
    make_passthrough,
    predict,
    predict_samples,
    save_model,
    train_erm,
)
from dfr_workbench.nn import TrainedModel  # noqa: E402

TINY = DatasetSpec(image_size=16, n_train_per_class=4, n_val_per_class=4, n_test_per_class=4,
                   patch_size=3, seed=2)


def tiny_model(seed: int = 0, widths=(4, 6, 8)) -> TrainedModel:
    rng = np.random.default_rng(seed)
    encoder = Encoder.initialize(3, widths, rng)
    for stage in encoder.stages:
        stage.bias[:] = rng.uniform(0.01, 0.1, size=stage.bias.shape)
    return TrainedModel(encoder, Head(rng.standard_normal(widths[-1]), 0.1))


class TestGlobalAveragePool(unittest.TestCase):
    """全局平均池化"""

    def test_constant_map(self):
        maps = np.full((1, 2, 4, 4), 0.25)
        maps[0, 1] = 7.25
        np.testing.assert_array_equal(global_average_pool(maps), [[0.25, 7.25]])

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2 ** 32 - 1))
    def test_equals_sequential_loop(self, h, w, seed):
        maps = np.random.default_rng(seed).standard_normal((2, 3, h, w))
        pooled = global_average_pool(maps)
        for n in range(2):
            for k in range(3):
                total = 0.0
                for value in maps[n, k].ravel():
                    total += float(value)
                self.assertEqual(pooled[n, k], total / (h * w))

    def test_forward_features_are_pooled_maps(self):
        model = tiny_model(1)
        image = np.random.default_rng(4).random((8, 8, 3))
        maps, features = forward(model.encoder, image)
        self.assertEqual(maps.shape, (8, 1, 1))
        np.testing.assert_array_equal(features, global_average_pool(maps[None])[0])


class TestForward(unittest.TestCase):
    """前向传播"""

    def test_zero_encoder_gives_zero_features(self):
        _, features = forward(Encoder.zeros(3), np.random.default_rng(0).random((16, 16, 3)))
        np.testing.assert_array_equal(features, np.zeros(64))

    def test_output_side(self):
        maps, features = forward(Encoder.zeros(3), np.zeros((32, 32, 3)))
        self.assertEqual(maps.shape, (64, 4, 4))
        self.assertEqual(Encoder.zeros(3).output_side(32), 4)

    def test_passthrough_features_are_channel_means(self):
        image = np.random.default_rng(1).random((5, 7, 3))
        _, features = forward(make_passthrough(3).encoder, image)
        np.testing.assert_allclose(features, image.mean(axis=(0, 1)), rtol=0, atol=1e-15)

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            forward(Encoder.zeros(3), np.zeros((16, 16, 1)))
        with self.assertRaises(ShapeError):
            forward(Encoder.zeros(3), np.zeros((12, 12, 3)))

    def test_batched_encode_matches_single_forward(self):
        model = tiny_model(2)
        images = np.random.default_rng(5).random((5, 3, 8, 8))
        _, batched = encode(model.encoder, images, batch_size=2)
        for i in range(5):
            _, single = forward(model.encoder, images[i].transpose(1, 2, 0))
            np.testing.assert_allclose(batched[i], single, rtol=0, atol=1e-14)


class TestHeadAndLoss(unittest.TestCase):
    """分类头与损失"""

    def test_predict_values(self):
        self.assertEqual(predict(Head(np.zeros(4), 0.0), np.ones(4)), 0.5)
        self.assertEqual(predict(Head(np.array([1.0, 0.0, 0.0]), 0.0), np.zeros(3)), 0.5)
        self.assertAlmostEqual(predict(Head(np.array([1.0]), 0.0), np.array([math.log(3.0)])), 0.75, places=15)

    def test_predict_is_monotone(self):
        head = Head(np.array([1.0]), 0.0)
        logits = np.linspace(-20, 20, 81)
        p = predict(head, logits[:, None])
        self.assertTrue(np.all(np.diff(p) > 0))

    def test_predict_length_mismatch(self):
        with self.assertRaises(ShapeError):
            predict(Head(np.zeros(3)), np.zeros(4))

    def test_bce_values(self):
        self.assertAlmostEqual(bce_loss(0.5, 1), math.log(2.0), places=15)
        self.assertLessEqual(bce_loss(1.0, 1), -math.log(1.0 - BCE_EPS) + 1e-15)
        self.assertTrue(math.isfinite(bce_loss(0.0, 1)))


class TestGradCheck(unittest.TestCase):
    """数值梯度校验"""

    @classmethod
    def setUpClass(cls):
        cls.batch = generate_dataset(TINY).train

    def test_linear_only_model(self):
        model = make_passthrough(3, np.array([0.4, -1.2, 0.7]), 0.3)
        self.assertLess(grad_check(model, self.batch, 1e-4), 1e-7)

    def test_tiny_model(self):
        self.assertLess(grad_check(tiny_model(7), self.batch, 1e-3, n_params=150), 1e-4)

    def test_zero_eps_rejected(self):
        with self.assertRaises(ArgumentError):
            grad_check(tiny_model(), self.batch, 0.0)

    def test_model_unchanged(self):
        model = tiny_model(3)
        before = [p.copy() for p in model.encoder.parameters()]
        grad_check(model, self.batch, 1e-3, n_params=20)
        for a, b in zip(before, model.encoder.parameters()):
            np.testing.assert_array_equal(a, b)


class TestTraining(unittest.TestCase):
    """ERM 训练"""

    CFG = TrainConfig(learning_rate=0.1, momentum=0.9, epochs=200, batch_size=8, weight_decay=0.0,
                      seed=1, widths=(8, 8, 8))

    @classmethod
    def setUpClass(cls):
        cls.dataset = generate_dataset(TINY)
        cls.model = train_erm(cls.dataset, cls.CFG)

    def test_overfits_eight_samples(self):
        self.assertEqual(len(self.dataset.train), 8)
        p = predict_samples(self.model, self.dataset.train)
        labels = np.array([s.label for s in self.dataset.train])
        np.testing.assert_array_equal((p >= 0.5).astype(int), labels)

    def test_log_has_one_entry_per_epoch(self):
        self.assertEqual(len(self.model.log.loss), self.CFG.epochs)
        self.assertEqual(len(self.model.log.accuracy), self.CFG.epochs)

    def test_deterministic(self):
        cfg = TrainConfig(epochs=3, batch_size=4, seed=9, widths=(4, 4, 4))
        a = train_erm(self.dataset, cfg)
        b = train_erm(self.dataset, cfg)
        for p, q in zip(a.encoder.parameters() + [a.head.weights], b.encoder.parameters() + [b.head.weights]):
            self.assertEqual(p.tobytes(), q.tobytes())
        self.assertEqual(a.head.bias, b.head.bias)

    def test_sgd_head_has_no_exact_zeros(self):
        self.assertEqual(int(np.count_nonzero(self.model.head.weights == 0.0)), 0)

    def test_invalid_config(self):
        with self.assertRaises(SpecificationError):
            train_erm(self.dataset, TrainConfig(epochs=0))

    def test_checkpoint_round_trip(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = save_model(self.model, Path(tmp) / "m.dfrt")
            loaded = load_model(path)
        self.assertEqual(loaded.encoder.widths, (8, 8, 8))
        for p, q in zip(self.model.encoder.parameters(), loaded.encoder.parameters()):
            self.assertEqual(p.tobytes(), q.tobytes())
        self.assertEqual(loaded.head.weights.tobytes(), self.model.head.weights.tobytes())
        self.assertEqual(loaded.head.bias, self.model.head.bias)
        self.assertEqual(loaded.log.loss, self.model.log.loss)


@pytest.mark.slow
class TestTrainingOnDefaultBenchmark(unittest.TestCase):
    """默认基准上的训练曲线（慢速）"""

    def test_loss_mostly_decreases_over_first_epochs(self):
        dataset = generate_dataset(DatasetSpec(seed=0))
        model = train_erm(dataset, TrainConfig(epochs=5, seed=0))
        increases = sum(1 for a, b in zip(model.log.loss, model.log.loss[1:]) if b > a)
        self.assertLessEqual(increases, 1)


if __name__ == '__main__':
    unittest.main()
