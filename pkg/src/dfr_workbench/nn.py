"""
Small convolutional encoder with global average pooling and a single-sigmoid head.

Everything is float64 numpy. Convolutions use im2col, each stage is
conv3x3(pad 1) -> ReLU -> maxpool 2x2. The encoder's last spatial maps A_k feed both
the pooled features z_k = mean(A_k) and the class activation maps.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from tqdm import tqdm

from .container import load_container, save_container
from .datagen import GroupedDataset, Sample, labels_of, stack_images
from .errors import ArgumentError, DivergenceError, FormatError, ShapeError, SpecificationError
from .utils.seeding import STREAM_GRADCHECK, STREAM_INIT, STREAM_SHUFFLE, derive_rng

logger = logging.getLogger(__name__)

BCE_EPS = 1e-7
DEFAULT_WIDTHS = (16, 32, 64)


@dataclass
class ConvStage:
    weight: np.ndarray  # (c_out, c_in, 3, 3)
    bias: np.ndarray  # (c_out,)


class Encoder:
    """Stack of conv stages; zero stages is a passthrough (maps = input channels)."""

    def __init__(self, in_channels: int, stages: Sequence[ConvStage]):
        self.in_channels = int(in_channels)
        self.stages: List[ConvStage] = list(stages)
        c_in = self.in_channels
        for i, stage in enumerate(self.stages):
            c_out = stage.weight.shape[0]
            if stage.weight.shape != (c_out, c_in, 3, 3) or stage.bias.shape != (c_out,):
                raise ShapeError(f"stage {i} parameters", (c_out, c_in, 3, 3), stage.weight.shape)
            c_in = c_out

    @classmethod
    def initialize(cls, in_channels: int, widths: Sequence[int], rng: np.random.Generator) -> "Encoder":
        """Uniform +-sqrt(6 / (fan_in + fan_out)) weights, zero biases."""
        stages = []
        c_in = in_channels
        for c_out in widths:
            limit = math.sqrt(6.0 / (c_in * 9 + c_out * 9))
            weight = rng.uniform(-limit, limit, size=(c_out, c_in, 3, 3))
            stages.append(ConvStage(weight=weight, bias=np.zeros(c_out)))
            c_in = c_out
        return cls(in_channels, stages)

    @classmethod
    def zeros(cls, in_channels: int, widths: Sequence[int] = DEFAULT_WIDTHS) -> "Encoder":
        stages = []
        c_in = in_channels
        for c_out in widths:
            stages.append(ConvStage(weight=np.zeros((c_out, c_in, 3, 3)), bias=np.zeros(c_out)))
            c_in = c_out
        return cls(in_channels, stages)

    @property
    def widths(self) -> Tuple[int, ...]:
        return tuple(stage.weight.shape[0] for stage in self.stages)

    @property
    def out_channels(self) -> int:
        return self.stages[-1].weight.shape[0] if self.stages else self.in_channels

    def output_side(self, image_size: int) -> int:
        return image_size // (2 ** len(self.stages))

    def parameters(self) -> List[np.ndarray]:
        params = []
        for stage in self.stages:
            params.extend([stage.weight, stage.bias])
        return params

    def copy(self) -> "Encoder":
        return Encoder(self.in_channels, [ConvStage(s.weight.copy(), s.bias.copy()) for s in self.stages])

    def check_input(self, x: np.ndarray) -> None:
        """Validate an (N, C, H, W) batch."""
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError("image batch", f"(N, {self.in_channels}, H, W)", x.shape)
        side = 2 ** len(self.stages)
        if x.shape[2] % side or x.shape[3] % side or x.shape[2] < side:
            raise ShapeError("image side", f"a positive multiple of {side}", x.shape[2:])

    def forward_batch(self, x: np.ndarray, keep_cache: bool = False):
        """Return (maps (N, d, h, w), features (N, d), cache or None)."""
        self.check_input(x)
        cache = []
        a = x
        for stage in self.stages:
            cols = _im2col(a)
            n, _, height, width = a.shape
            c_out = stage.weight.shape[0]
            pre = cols @ stage.weight.reshape(c_out, -1).T + stage.bias
            pre = pre.reshape(n, height, width, c_out).transpose(0, 3, 1, 2)
            active = pre > 0
            relu = np.where(active, pre, 0.0)
            pooled, argmax = _maxpool_forward(relu)
            if keep_cache:
                cache.append((a.shape, cols, active, argmax))
            a = pooled
        maps = np.ascontiguousarray(a)
        features = global_average_pool(maps)
        return maps, features, (cache if keep_cache else None)

    def backward(self, cache, d_maps: np.ndarray) -> List[np.ndarray]:
        """Gradients for parameters() given dLoss/dmaps."""
        grads: List[np.ndarray] = []
        d_a = d_maps
        for i in range(len(self.stages) - 1, -1, -1):
            stage = self.stages[i]
            in_shape, cols, active, argmax = cache[i]
            n, c_in, height, width = in_shape
            c_out = stage.weight.shape[0]
            d_relu = _maxpool_backward(d_a, argmax)
            d_pre = np.where(active, d_relu, 0.0)
            d_flat = d_pre.transpose(0, 2, 3, 1).reshape(n * height * width, c_out)
            d_weight = (d_flat.T @ cols).reshape(c_out, c_in, 3, 3)
            d_bias = d_flat.sum(axis=0)
            grads = [d_weight, d_bias] + grads
            if i > 0:
                d_cols = d_flat @ stage.weight.reshape(c_out, -1)
                d_a = _col2im(d_cols, in_shape)
        return grads


def activation_signature(cache) -> List[np.ndarray]:
    """ReLU masks and pool switches of a cached forward pass."""
    signature = []
    for _, _, active, argmax in cache or []:
        signature.extend([active, argmax])
    return signature


def _im2col(x: np.ndarray) -> np.ndarray:
    n, c, height, width = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    windows = sliding_window_view(padded, (3, 3), axis=(2, 3))  # (N, C, H, W, 3, 3)
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * height * width, c * 9)


def _col2im(d_cols: np.ndarray, in_shape) -> np.ndarray:
    n, c, height, width = in_shape
    d_cols = d_cols.reshape(n, height, width, c, 3, 3)
    d_padded = np.zeros((n, c, height + 2, width + 2))
    for i in range(3):
        for j in range(3):
            d_padded[:, :, i:i + height, j:j + width] += d_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return d_padded[:, :, 1:-1, 1:-1]


def _maxpool_forward(x: np.ndarray):
    n, c, height, width = x.shape
    windows = x.reshape(n, c, height // 2, 2, width // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    windows = windows.reshape(n, c, height // 2, width // 2, 4)
    argmax = windows.argmax(axis=-1)
    pooled = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]
    return pooled, argmax


def _maxpool_backward(d_pooled: np.ndarray, argmax: np.ndarray) -> np.ndarray:
    n, c, h2, w2 = d_pooled.shape
    d_windows = np.zeros((n, c, h2, w2, 4))
    np.put_along_axis(d_windows, argmax[..., None], d_pooled[..., None], axis=-1)
    d_windows = d_windows.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return d_windows.reshape(n, c, h2 * 2, w2 * 2)


def global_average_pool(maps: np.ndarray) -> np.ndarray:
    """Spatial mean over the last two axes with row-major sequential accumulation.

    The running sum is taken with cumsum, so the result equals a plain left-to-right
    loop over the row-major pixels divided by h*w, bit for bit.
    """
    height, width = maps.shape[-2:]
    flat = maps.reshape(maps.shape[:-2] + (height * width,))
    if height * width == 0:
        raise ShapeError("spatial maps", "non-empty spatial extent", maps.shape)
    return np.cumsum(flat, axis=-1)[..., -1] / (height * width)


@dataclass
class Head:
    weights: np.ndarray  # (d,)
    bias: float = 0.0

    @classmethod
    def initialize(cls, d: int, rng: np.random.Generator) -> "Head":
        limit = math.sqrt(6.0 / (d + 1))
        return cls(weights=rng.uniform(-limit, limit, size=d), bias=0.0)

    @property
    def dim(self) -> int:
        return int(self.weights.shape[0])

    def copy(self) -> "Head":
        return Head(weights=self.weights.copy(), bias=float(self.bias))


@dataclass
class TrainingLog:
    loss: List[float] = field(default_factory=list)
    accuracy: List[float] = field(default_factory=list)


@dataclass
class TrainedModel:
    encoder: Encoder
    head: Head
    log: TrainingLog = field(default_factory=TrainingLog)

    def copy(self) -> "TrainedModel":
        return TrainedModel(self.encoder.copy(), self.head.copy(),
                            TrainingLog(list(self.log.loss), list(self.log.accuracy)))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 32
    weight_decay: float = 1e-4
    seed: int = 0
    widths: Tuple[int, ...] = DEFAULT_WIDTHS
    progress: bool = False

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise SpecificationError("learning_rate", f"must be > 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise SpecificationError("momentum", f"must lie in [0, 1), got {self.momentum}")
        if self.epochs < 1:
            raise SpecificationError("epochs", f"must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise SpecificationError("batch_size", f"must be >= 1, got {self.batch_size}")
        if self.weight_decay < 0:
            raise SpecificationError("weight_decay", f"must be >= 0, got {self.weight_decay}")
        if any(w < 1 for w in self.widths):
            raise SpecificationError("widths", f"all widths must be >= 1, got {self.widths}")


def _image_batch(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ShapeError("image", "(H, W, C)", image.shape)
    return image.transpose(2, 0, 1)[None]


def forward(encoder: Encoder, image: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Spatial maps (d, h, w) and pooled features (d,) of one (H, W, C) image."""
    maps, features, _ = encoder.forward_batch(_image_batch(image))
    return maps[0], features[0]


def encode(encoder: Encoder, images: np.ndarray, batch_size: int = 128) -> Tuple[np.ndarray, np.ndarray]:
    """Chunked forward pass over an (N, C, H, W) array."""
    maps, features = [], []
    for start in range(0, images.shape[0], batch_size):
        m, f, _ = encoder.forward_batch(images[start:start + batch_size])
        maps.append(m)
        features.append(f)
    if not maps:
        return np.zeros((0, encoder.out_channels, 0, 0)), np.zeros((0, encoder.out_channels))
    return np.concatenate(maps), np.concatenate(features)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def predict(head: Head, features: np.ndarray):
    """sigmoid(w . z + b) for one feature vector (d,) or a matrix (N, d)."""
    features = np.asarray(features, dtype=np.float64)
    if features.shape[-1:] != head.weights.shape:
        raise ShapeError("features", f"(..., {head.dim})", features.shape)
    p = sigmoid(features @ head.weights + head.bias)
    return float(p) if p.ndim == 0 else p


def bce_loss(p, y):
    """Binary cross-entropy with p clamped to [1e-7, 1 - 1e-7]."""
    p = np.clip(np.asarray(p, dtype=np.float64), BCE_EPS, 1.0 - BCE_EPS)
    y = np.asarray(y, dtype=np.float64)
    loss = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    return float(loss) if loss.ndim == 0 else loss


def loss_and_grads(encoder: Encoder, head: Head, x: np.ndarray, y: np.ndarray):
    """Mean BCE over the batch and gradients in [encoder params..., head w, head b] order."""
    maps, features, cache = encoder.forward_batch(x, keep_cache=True)
    p = sigmoid(features @ head.weights + head.bias)
    loss = float(np.mean(bce_loss(p, y)))
    n = x.shape[0]
    d_logit = (p - y) / n
    d_weights = features.T @ d_logit
    d_bias = np.array(d_logit.sum())
    height, width = maps.shape[-2:]
    d_maps = np.broadcast_to((d_logit[:, None] * head.weights[None, :])[:, :, None, None] / (height * width),
                             maps.shape)
    grads = encoder.backward(cache, d_maps) + [d_weights, d_bias]
    return loss, grads, p, cache


def train_erm(dataset: GroupedDataset, cfg: TrainConfig) -> TrainedModel:
    """Minibatch SGD with momentum on mean BCE over the train split."""
    cfg.validate()
    samples = dataset.train
    if not samples:
        raise ArgumentError("train split is empty")
    x = stack_images(samples)
    y = labels_of(samples).astype(np.float64)
    n = x.shape[0]

    init_rng = derive_rng(cfg.seed, STREAM_INIT)
    encoder = Encoder.initialize(x.shape[1], cfg.widths, init_rng)
    head = Head.initialize(encoder.out_channels, init_rng)
    bias = np.array(float(head.bias))
    params = encoder.parameters() + [head.weights, bias]
    decayed = [p.ndim > 1 for p in encoder.parameters()] + [True, False]
    velocity = [np.zeros_like(p) for p in params]
    shuffle_rng = derive_rng(cfg.seed, STREAM_SHUFFLE)
    log = TrainingLog()

    logger.info(f"Training ERM model: {n} samples, widths={cfg.widths}, epochs={cfg.epochs}, seed={cfg.seed}")
    for epoch in tqdm(range(cfg.epochs), desc="ERM", disable=not cfg.progress):
        order = shuffle_rng.permutation(n)
        total_loss = 0.0
        correct = 0
        for batch, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            head.bias = float(bias)
            loss, grads, p, _ = loss_and_grads(encoder, head, x[idx], y[idx])
            if not math.isfinite(loss):
                raise DivergenceError(epoch, batch, loss)
            for param, grad, vel, decay in zip(params, grads, velocity, decayed):
                if decay and cfg.weight_decay:
                    grad = grad + cfg.weight_decay * param
                vel *= cfg.momentum
                vel -= cfg.learning_rate * grad
                param += vel
            total_loss += loss * idx.size
            correct += int(np.sum((p >= 0.5) == (y[idx] == 1)))
        log.loss.append(total_loss / n)
        log.accuracy.append(correct / n)
        logger.info(f"epoch {epoch + 1}/{cfg.epochs}: loss={log.loss[-1]:.4f} acc={log.accuracy[-1]:.4f}")

    head.bias = float(bias)
    return TrainedModel(encoder=encoder, head=head, log=log)


def grad_check(model: TrainedModel, batch: List[Sample], eps: float,
               n_params: int = 128, seed: int = 0) -> float:
    """Max relative error between backprop and central differences.

    Parameters are drawn in a seeded random order. A parameter whose +-eps
    perturbation flips a ReLU mask or a pool switch sits on a kink where central
    differences are meaningless; it is skipped and the next one is drawn.
    """
    if not eps > 0:
        raise ArgumentError(f"eps must be > 0, got {eps}")
    if not batch:
        raise ArgumentError("grad_check needs a non-empty batch")
    work = model.copy()
    encoder, head = work.encoder, work.head
    x = stack_images(batch)
    y = labels_of(batch).astype(np.float64)
    bias = np.array(float(head.bias))

    def evaluate():
        head.bias = float(bias)
        return loss_and_grads(encoder, head, x, y)

    _, analytic, _, cache = evaluate()
    base_signature = activation_signature(cache)
    params = encoder.parameters() + [head.weights, bias]
    sizes = [p.size for p in params]
    offsets = np.cumsum([0] + sizes)
    order = derive_rng(seed, STREAM_GRADCHECK).permutation(int(offsets[-1]))

    worst = 0.0
    checked = skipped = 0
    for flat_index in order:
        if checked >= n_params:
            break
        which = int(np.searchsorted(offsets, flat_index, side="right") - 1)
        param = params[which]
        local = np.unravel_index(int(flat_index - offsets[which]), param.shape)
        original = param[local]
        param[local] = original + eps
        loss_plus, _, _, cache_plus = evaluate()
        param[local] = original - eps
        loss_minus, _, _, cache_minus = evaluate()
        param[local] = original
        if not (_same_signature(base_signature, activation_signature(cache_plus))
                and _same_signature(base_signature, activation_signature(cache_minus))):
            skipped += 1
            continue
        numeric = (loss_plus - loss_minus) / (2.0 * eps)
        a = float(analytic[which][local])
        rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
        worst = max(worst, rel)
        checked += 1
    logger.info(f"grad_check: {checked} parameters checked, {skipped} skipped at kinks, max rel err {worst:.3e}")
    return worst


def _same_signature(a: List[np.ndarray], b: List[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(u, v) for u, v in zip(a, b))


def save_model(model: TrainedModel, path: Path) -> Path:
    entries = {"encoder/in_channels": np.array(float(model.encoder.in_channels))}
    for i, stage in enumerate(model.encoder.stages):
        entries[f"encoder/stage{i}/weight"] = stage.weight
        entries[f"encoder/stage{i}/bias"] = stage.bias
    entries["head/weights"] = model.head.weights
    entries["head/bias"] = np.array(float(model.head.bias))
    entries["log/loss"] = np.array(model.log.loss, dtype=np.float64)
    entries["log/accuracy"] = np.array(model.log.accuracy, dtype=np.float64)
    return save_container(path, entries)


def load_model(path: Path) -> TrainedModel:
    entries = load_container(path)
    try:
        in_channels = int(entries["encoder/in_channels"])
        stages = []
        i = 0
        while f"encoder/stage{i}/weight" in entries:
            stages.append(ConvStage(entries[f"encoder/stage{i}/weight"], entries[f"encoder/stage{i}/bias"]))
            i += 1
        head = Head(weights=entries["head/weights"], bias=float(entries["head/bias"]))
        log = TrainingLog(entries["log/loss"].tolist(), entries["log/accuracy"].tolist())
    except KeyError as e:
        raise FormatError(0, f"checkpoint misses entry {e}") from e
    encoder = Encoder(in_channels, stages)
    if head.dim != encoder.out_channels:
        raise ShapeError("head weights", encoder.out_channels, head.dim)
    return TrainedModel(encoder=encoder, head=head, log=log)


def predict_samples(model: TrainedModel, samples: List[Sample], batch_size: int = 128) -> np.ndarray:
    """Probabilities for a list of samples."""
    if not samples:
        return np.zeros(0)
    _, features = encode(model.encoder, stack_images(samples), batch_size)
    return predict(model.head, features)


def make_passthrough(in_channels: int, weights: Optional[np.ndarray] = None, bias: float = 0.0) -> TrainedModel:
    """Linear-only model: no conv stages, the head sees per-channel image means."""
    if weights is None:
        weights = np.zeros(in_channels)
    return TrainedModel(Encoder(in_channels, []), Head(np.asarray(weights, dtype=np.float64), float(bias)))
