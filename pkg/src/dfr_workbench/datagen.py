"""
Synthetic grouped datasets with a class-defining shape and an optional spurious patch.

Class 0 draws a filled disk, class 1 a diagonal cross. A bright square patch in one of
the four corners plays the spurious attribute. Training splits correlate the patch with
class 0; validation and test splits carry it on exactly half of each class. Every
sample ships pixel-accurate core and spurious masks.

A share of samples (``faint_core_rate``) draws its core barely above the background,
where only the patch separates the classes during training.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .container import load_container, save_container
from .errors import ArgumentError, FormatError, SpecificationError
from .utils.seeding import STREAM_SAMPLE, derive_rng

logger = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")
N_GROUPS = 4
EVAL_PATCH_RATE = 0.5

BACKGROUND_LEVEL = 0.15
SHAPE_LEVEL = 0.6
# faint cores sit below the default pixel noise
FAINT_SHAPE_LEVEL = 0.18

DATASET_FILE = "dataset.dfrt"
MANIFEST_FILE = "manifest.json"


@dataclass(frozen=True)
class DatasetSpec:
    """Parameters of a synthetic grouped dataset."""

    image_size: int = 32
    channels: int = 3
    n_train_per_class: int = 500
    n_val_per_class: int = 120
    n_test_per_class: int = 250
    train_correlation: float = 0.95
    patch_size: int = 6
    noise_sigma: float = 0.05
    # fraction of samples whose core is drawn at FAINT_SHAPE_LEVEL
    faint_core_rate: float = 0.5
    seed: int = 0
    # (class 0, class 1) patch rates in train; overrides train_correlation when set
    train_patch_rates: Optional[Tuple[float, float]] = None

    def validate(self) -> None:
        """Raise SpecificationError naming the first violated field."""
        if self.image_size < 4:
            raise SpecificationError("image_size", f"must be >= 4, got {self.image_size}")
        if self.channels < 1:
            raise SpecificationError("channels", f"must be >= 1, got {self.channels}")
        for name in ("n_train_per_class", "n_val_per_class", "n_test_per_class"):
            if getattr(self, name) < 0:
                raise SpecificationError(name, f"must be >= 0, got {getattr(self, name)}")
        if not 0.0 <= self.train_correlation <= 1.0:
            raise SpecificationError("train_correlation", f"must lie in [0, 1], got {self.train_correlation}")
        if self.train_patch_rates is not None:
            if len(self.train_patch_rates) != 2:
                raise SpecificationError("train_patch_rates", "needs exactly two rates")
            for rate in self.train_patch_rates:
                if not 0.0 <= rate <= 1.0:
                    raise SpecificationError("train_patch_rates", f"rate {rate} outside [0, 1]")
        if self.patch_size < 1:
            raise SpecificationError("patch_size", f"must be >= 1, got {self.patch_size}")
        if not self.patch_size < self.image_size / 2:
            raise SpecificationError(
                "patch_size", f"must be < image_size / 2 = {self.image_size / 2}, got {self.patch_size}"
            )
        if _shape_extent_bounds(self) is None:
            raise SpecificationError("patch_size", "leaves no room for the core shape between the corners")
        if not 0.0 <= self.faint_core_rate <= 1.0:
            raise SpecificationError("faint_core_rate", f"must lie in [0, 1], got {self.faint_core_rate}")
        if not (self.noise_sigma >= 0.0 and math.isfinite(self.noise_sigma)):
            raise SpecificationError("noise_sigma", f"must be finite and >= 0, got {self.noise_sigma}")
        if not 0 <= self.seed < (1 << 64):
            raise SpecificationError("seed", "must be an unsigned 64-bit integer")

    def patch_rates(self) -> Tuple[float, float]:
        """Train patch rate for class 0 and class 1."""
        if self.train_patch_rates is not None:
            return float(self.train_patch_rates[0]), float(self.train_patch_rates[1])
        return self.train_correlation, 1.0 - self.train_correlation

    @classmethod
    def waterbirds_like(cls, **overrides) -> "DatasetSpec":
        """Symmetric 95% / 5% training correlation."""
        return cls(**{"train_correlation": 0.95, **overrides})

    @classmethod
    def isic_like(cls, **overrides) -> "DatasetSpec":
        """Patch in 46% of class 0 and never in class 1 during training."""
        return cls(**{"train_patch_rates": (0.46, 0.0), **overrides})

    def to_dict(self) -> Dict:
        data = asdict(self)
        if self.train_patch_rates is not None:
            data["train_patch_rates"] = list(self.train_patch_rates)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "DatasetSpec":
        data = dict(data)
        rates = data.get("train_patch_rates")
        if rates is not None:
            data["train_patch_rates"] = tuple(float(r) for r in rates)
        return cls(**data)


@dataclass(frozen=True, order=True)
class GroupId:
    """A (class label, spurious flag) pair; ``index`` = label * 2 + flag."""

    index: int
    class_label: int = field(compare=False)
    spurious_flag: int = field(compare=False)

    def describe(self, class_names: Tuple[str, str] = ("class 0", "class 1"),
                 flag_names: Tuple[str, str] = ("w/o patch", "with patch")) -> str:
        return f"{class_names[self.class_label]} {flag_names[self.spurious_flag]}"

    @property
    def name(self) -> str:
        return f"y{self.class_label}_s{self.spurious_flag}"


def group_of(label: int, spurious_flag: int) -> GroupId:
    """Map (label, spurious flag) to its GroupId."""
    if label not in (0, 1) or isinstance(label, bool):
        raise ArgumentError(f"label must be 0 or 1, got {label!r}")
    if spurious_flag not in (0, 1) or isinstance(spurious_flag, bool):
        raise ArgumentError(f"spurious_flag must be 0 or 1, got {spurious_flag!r}")
    return GroupId(index=int(label) * 2 + int(spurious_flag), class_label=int(label), spurious_flag=int(spurious_flag))


def group_from_index(index: int) -> GroupId:
    if not 0 <= int(index) < N_GROUPS:
        raise ArgumentError(f"group index must be in [0, {N_GROUPS}), got {index}")
    return group_of(int(index) // 2, int(index) % 2)


ALL_GROUPS: Tuple[GroupId, ...] = tuple(group_from_index(i) for i in range(N_GROUPS))


@dataclass
class Sample:
    image: np.ndarray  # (H, W, C) float64 in [0, 1]
    label: int
    group: GroupId
    core_mask: np.ndarray  # (H, W) bool
    spurious_mask: np.ndarray  # (H, W) bool

    @property
    def has_patch(self) -> bool:
        return self.group.spurious_flag == 1


@dataclass
class GroupedDataset:
    train: List[Sample]
    valid: List[Sample]
    test: List[Sample]
    spec: DatasetSpec

    def split(self, name: str) -> List[Sample]:
        if name not in SPLITS:
            raise ArgumentError(f"unknown split {name!r}")
        return getattr(self, name)

    def group_counts(self) -> Dict[str, List[int]]:
        counts = {}
        for name in SPLITS:
            per_group = [0] * N_GROUPS
            for sample in self.split(name):
                per_group[sample.group.index] += 1
            counts[name] = per_group
        return counts


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_counts(spec: DatasetSpec) -> Dict[str, List[int]]:
    """Exact per-split, per-group sample counts (index order: group index 0..3)."""
    spec.validate()
    counts: Dict[str, List[int]] = {}
    rates = spec.patch_rates()
    n = spec.n_train_per_class
    train = [0] * N_GROUPS
    for label in (0, 1):
        with_patch = min(n, _round_half_up(n * rates[label]))
        train[group_of(label, 1).index] = with_patch
        train[group_of(label, 0).index] = n - with_patch
    counts["train"] = train

    for name, n in (("valid", spec.n_val_per_class), ("test", spec.n_test_per_class)):
        per_group = [0] * N_GROUPS
        for label in (0, 1):
            # 奇数个样本时，余数归入无补丁组
            with_patch = int(math.floor(n * EVAL_PATCH_RATE))
            per_group[group_of(label, 1).index] = with_patch
            per_group[group_of(label, 0).index] = n - with_patch
        counts[name] = per_group
    return counts


def _shape_extent_bounds(spec: DatasetSpec) -> Optional[Tuple[int, int]]:
    """Allowed (min, max) half-extent of the core shape, or None if it cannot fit."""
    inner = spec.image_size - 2 * spec.patch_size
    ext_max = min(max(1, spec.image_size // 5), (inner - 1) // 2)
    if ext_max < 1:
        return None
    ext_min = max(1, min(ext_max, spec.image_size // 8))
    return ext_min, ext_max


def _core_shape_mask(spec: DatasetSpec, label: int, rng: np.random.Generator) -> np.ndarray:
    size = spec.image_size
    ext_min, ext_max = _shape_extent_bounds(spec)
    extent = int(rng.integers(ext_min, ext_max + 1))
    # 形状的包围盒必须完全落在四个角补丁之间的内部区域
    low = spec.patch_size + extent
    high = size - spec.patch_size - extent - 1
    cy = int(rng.integers(low, high + 1))
    cx = int(rng.integers(low, high + 1))
    yy, xx = np.ogrid[:size, :size]
    dy = yy - cy
    dx = xx - cx
    if label == 0:
        return dy * dy + dx * dx <= extent * extent
    thickness = extent // 4
    inside_box = (np.abs(dy) <= extent) & (np.abs(dx) <= extent)
    on_diagonal = (np.abs(dy - dx) <= thickness) | (np.abs(dy + dx) <= thickness)
    return inside_box & on_diagonal


def _patch_mask(spec: DatasetSpec, rng: np.random.Generator) -> np.ndarray:
    size, p = spec.image_size, spec.patch_size
    corner = int(rng.integers(0, 4))
    mask = np.zeros((size, size), dtype=bool)
    rows = slice(0, p) if corner in (0, 1) else slice(size - p, size)
    cols = slice(0, p) if corner in (0, 2) else slice(size - p, size)
    mask[rows, cols] = True
    return mask


def patch_color(channels: int) -> np.ndarray:
    """Saturated primary: full first channel, others off (full intensity for grayscale)."""
    color = np.zeros(channels)
    color[0] = 1.0
    return color


def render_sample(spec: DatasetSpec, split: str, index: int, label: int, has_patch: bool) -> Sample:
    """Render one sample from its own (seed, split, index) substream."""
    rng = derive_rng(spec.seed, STREAM_SAMPLE, split, index)
    core = _core_shape_mask(spec, label, rng)
    spurious = _patch_mask(spec, rng) if has_patch else np.zeros_like(core)
    faint = bool(rng.random() < spec.faint_core_rate)
    # 角补丁与形状区域不相交由位置约束保证
    image = np.full((spec.image_size, spec.image_size, spec.channels), BACKGROUND_LEVEL)
    image[core] = FAINT_SHAPE_LEVEL if faint else SHAPE_LEVEL
    if has_patch:
        image[spurious] = patch_color(spec.channels)
    image = image + rng.normal(0.0, spec.noise_sigma, size=image.shape)
    np.clip(image, 0.0, 1.0, out=image)
    return Sample(
        image=image,
        label=label,
        group=group_of(label, int(has_patch)),
        core_mask=core,
        spurious_mask=spurious,
    )


def _generate_split(spec: DatasetSpec, split: str, per_group: List[int]) -> List[Sample]:
    samples = []
    index = 0
    for label in (0, 1):
        for flag in (1, 0):
            for _ in range(per_group[group_of(label, flag).index]):
                samples.append(render_sample(spec, split, index, label, bool(flag)))
                index += 1
    return samples


def generate_dataset(spec: DatasetSpec) -> GroupedDataset:
    """Generate train/valid/test splits; a pure function of ``spec``."""
    counts = split_counts(spec)
    splits = {name: _generate_split(spec, name, counts[name]) for name in SPLITS}
    logger.info(
        f"Generated dataset (seed={spec.seed}): "
        + ", ".join(f"{name}={counts[name]}" for name in SPLITS)
    )
    return GroupedDataset(spec=spec, **splits)


def stack_images(samples: List[Sample]) -> np.ndarray:
    """Images as an (N, C, H, W) float64 array."""
    if not samples:
        return np.zeros((0, 0, 0, 0))
    return np.ascontiguousarray(np.stack([s.image for s in samples]).transpose(0, 3, 1, 2), dtype=np.float64)


def labels_of(samples: List[Sample]) -> np.ndarray:
    return np.array([s.label for s in samples], dtype=np.int64)


def groups_of(samples: List[Sample]) -> np.ndarray:
    return np.array([s.group.index for s in samples], dtype=np.int64)


def save_dataset(dataset: GroupedDataset, directory: Path) -> Path:
    """Write ``dataset.dfrt`` plus a JSON manifest into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries: Dict[str, np.ndarray] = {}
    size, channels = dataset.spec.image_size, dataset.spec.channels
    for name in SPLITS:
        samples = dataset.split(name)
        n = len(samples)
        entries[f"{name}/images"] = (
            np.stack([s.image for s in samples]) if n else np.zeros((0, size, size, channels))
        )
        entries[f"{name}/labels"] = labels_of(samples).astype(np.float64)
        entries[f"{name}/spurious"] = np.array([s.group.spurious_flag for s in samples], dtype=np.float64)
        entries[f"{name}/core_masks"] = (
            np.stack([s.core_mask for s in samples]).astype(np.float64) if n else np.zeros((0, size, size))
        )
        entries[f"{name}/spurious_masks"] = (
            np.stack([s.spurious_mask for s in samples]).astype(np.float64) if n else np.zeros((0, size, size))
        )
    path = directory / DATASET_FILE
    save_container(path, entries)
    manifest = {"spec": dataset.spec.to_dict(), "group_counts": dataset.group_counts()}
    with open(directory / MANIFEST_FILE, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, ensure_ascii=False)
    logger.info(f"Dataset saved to {directory}")
    return path


def load_dataset(directory: Path) -> GroupedDataset:
    """Inverse of :func:`save_dataset`."""
    directory = Path(directory)
    with open(directory / MANIFEST_FILE, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    spec = DatasetSpec.from_dict(manifest["spec"])
    entries = load_container(directory / DATASET_FILE)
    splits = {}
    for name in SPLITS:
        try:
            images = entries[f"{name}/images"]
            labels = entries[f"{name}/labels"]
            flags = entries[f"{name}/spurious"]
            core = entries[f"{name}/core_masks"]
            spurious = entries[f"{name}/spurious_masks"]
        except KeyError as e:
            raise FormatError(0, f"dataset container misses entry {e}") from e
        splits[name] = [
            Sample(
                image=images[i].copy(),
                label=int(labels[i]),
                group=group_of(int(labels[i]), int(flags[i])),
                core_mask=core[i] != 0,
                spurious_mask=spurious[i] != 0,
            )
            for i in range(images.shape[0])
        ]
    return GroupedDataset(spec=spec, **splits)
