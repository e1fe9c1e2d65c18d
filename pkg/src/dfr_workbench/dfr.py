"""
Deep feature reweighting: retrain only the sigmoid head on frozen features.

A group-balanced subset is drawn from the validation split, its features are
extracted with the frozen ERM encoder, and the head is refit by L1-regularised
logistic regression with proximal gradient descent started at zero. Exact zeros in
the new weight vector come only from soft-thresholding.
"""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Union

import numpy as np

from .datagen import N_GROUPS, Sample, groups_of, labels_of, stack_images
from .errors import ArgumentError, BalanceError, LabelError, ShapeError, SpecificationError
from .nn import Head, TrainedModel, encode, sigmoid
from .utils.seeding import STREAM_SUBSET, derive_rng

logger = logging.getLogger(__name__)


@dataclass
class FeatureMatrix:
    values: np.ndarray  # (N, d)
    labels: np.ndarray  # (N,)
    groups: np.ndarray  # (N,) group indices

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.groups = np.asarray(self.groups, dtype=np.int64)
        if self.values.ndim != 2:
            raise ShapeError("feature matrix", "(N, d)", self.values.shape)
        n = self.values.shape[0]
        if self.labels.shape != (n,) or self.groups.shape != (n,):
            raise ShapeError("labels/groups", (n,), (self.labels.shape, self.groups.shape))
        if not np.all(np.isfinite(self.values)):
            raise ArgumentError("feature matrix contains non-finite values")

    @property
    def rows(self) -> int:
        return int(self.values.shape[0])

    @property
    def cols(self) -> int:
        return int(self.values.shape[1])

    def take(self, indices: np.ndarray) -> "FeatureMatrix":
        return FeatureMatrix(self.values[indices], self.labels[indices], self.groups[indices])


@dataclass(frozen=True)
class DfrConfig:
    l1_lambda: float = 0.05
    max_iters: int = 5000
    step_size: float = 0.1
    tol: float = 1e-8
    n_subset_repeats: int = 1
    seed: int = 0
    standardize: bool = False
    workers: int = 1

    def validate(self) -> None:
        if not (self.l1_lambda >= 0 and math.isfinite(self.l1_lambda)):
            raise SpecificationError("l1_lambda", f"must be finite and >= 0, got {self.l1_lambda}")
        if self.max_iters < 1:
            raise SpecificationError("max_iters", f"must be >= 1, got {self.max_iters}")
        if not self.step_size > 0:
            raise SpecificationError("step_size", f"must be > 0, got {self.step_size}")
        if self.tol < 0:
            raise SpecificationError("tol", f"must be >= 0, got {self.tol}")
        if self.n_subset_repeats < 1:
            raise SpecificationError("n_subset_repeats", f"must be >= 1, got {self.n_subset_repeats}")
        if self.workers < 1:
            raise SpecificationError("workers", f"must be >= 1, got {self.workers}")


@dataclass
class DfrResult:
    head: Head
    zero_fraction: float
    objective_trace: List[List[float]]  # one trace per subset repeat
    subset_indices: List[List[int]]
    converged: bool
    iterations: List[int]
    config: DfrConfig
    standardized: bool = False
    feature_mean: List[List[float]] = field(default_factory=list)
    feature_scale: List[List[float]] = field(default_factory=list)
    # objective decrease of the last accepted step, per repeat
    final_decrease: List[float] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            "weights": self.head.weights.tolist(),
            "bias": float(self.head.bias),
            "zero_fraction": self.zero_fraction,
            "converged": self.converged,
            "iterations": self.iterations,
            "config": asdict(self.config),
            "subset_indices": self.subset_indices,
            "objective_trace": self.objective_trace,
            "standardized": self.standardized,
            "feature_mean": self.feature_mean,
            "feature_scale": self.feature_scale,
            "final_decrease": self.final_decrease,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "DfrResult":
        return cls(
            head=Head(np.array(data["weights"], dtype=np.float64), float(data["bias"])),
            zero_fraction=float(data["zero_fraction"]),
            objective_trace=data["objective_trace"],
            subset_indices=data["subset_indices"],
            converged=bool(data["converged"]),
            iterations=list(data["iterations"]),
            config=DfrConfig(**data["config"]),
            standardized=bool(data.get("standardized", False)),
            feature_mean=data.get("feature_mean", []),
            feature_scale=data.get("feature_scale", []),
            final_decrease=[float(v) for v in data.get("final_decrease", [])],
        )


def _group_array(valid: Union[Sequence[Sample], np.ndarray]) -> np.ndarray:
    if isinstance(valid, np.ndarray):
        return valid.astype(np.int64)
    return groups_of(list(valid))


def balanced_subset(valid: Union[Sequence[Sample], np.ndarray], seed: int, repeat: int = 0) -> np.ndarray:
    """Draw min-group-size samples per group without replacement (group-major order)."""
    groups = _group_array(valid)
    members = [np.flatnonzero(groups == g) for g in range(N_GROUPS)]
    for g, m in enumerate(members):
        if m.size == 0:
            raise BalanceError(g)
    m = min(idx.size for idx in members)
    rng = derive_rng(seed, STREAM_SUBSET, repeat)
    picks = [np.sort(rng.choice(idx, size=m, replace=False)) for idx in members]
    return np.concatenate(picks)


def extract_features(model: TrainedModel, samples: Sequence[Sample]) -> FeatureMatrix:
    """Pooled encoder features of ``samples`` with labels and groups carried through."""
    samples = list(samples)
    if not samples:
        return FeatureMatrix(np.zeros((0, model.encoder.out_channels)), np.zeros(0), np.zeros(0))
    _, features = encode(model.encoder, stack_images(samples))
    return FeatureMatrix(features, labels_of(samples), groups_of(samples))


def soft_threshold(v, t):
    """sign(v) * max(|v| - t, 0); zeros are positive zeros."""
    if np.any(np.asarray(t) < 0):
        raise ArgumentError(f"threshold must be >= 0, got {t}")
    out = np.sign(v) * np.maximum(np.abs(v) - t, 0.0) + 0.0
    return float(out) if np.ndim(out) == 0 else out


def logistic_objective(z: np.ndarray, y: np.ndarray, w: np.ndarray, b: float, l1_lambda: float) -> float:
    """Mean BCE of sigmoid(z w + b) plus l1_lambda * ||w||_1 (bias unpenalised)."""
    s = z @ w + b
    return float(np.mean(np.logaddexp(0.0, s) - y * s) + l1_lambda * np.sum(np.abs(w)))


def _solve(z: np.ndarray, y: np.ndarray, cfg: DfrConfig):
    n, d = z.shape
    w = np.zeros(d)
    b = 0.0
    step = cfg.step_size
    lam = cfg.l1_lambda
    objective = logistic_objective(z, y, w, b, lam)
    trace = [objective]
    converged = False
    iters = 0
    for iters in range(1, cfg.max_iters + 1):
        residual = (sigmoid(z @ w + b) - y) / n
        grad_w = z.T @ residual
        grad_b = float(residual.sum())
        while True:
            w_new = soft_threshold(w - step * grad_w, step * lam)
            b_new = b - step * grad_b
            candidate = logistic_objective(z, y, w_new, b_new, lam)
            if candidate <= objective:
                break
            step *= 0.5
            if step < 1e-30:
                break
        if candidate > objective:
            # 步长耗尽仍无下降：数值上已在最优点
            converged = True
            break
        decrease = objective - candidate
        w, b, objective = w_new, b_new, candidate
        trace.append(objective)
        if decrease < cfg.tol:
            converged = True
            break
    logger.debug(f"proximal gradient: {iters} iterations, objective={objective:.10f}, converged={converged}")
    return w, b, trace, converged, iters


def _last_decrease(trace: List[float]) -> float:
    return float(trace[-2] - trace[-1]) if len(trace) > 1 else 0.0


def retrain_head(features: FeatureMatrix, cfg: DfrConfig) -> DfrResult:
    """Fit the L1 logistic head on one or more balanced subsets of ``features``."""
    cfg.validate()
    if features.rows == 0:
        raise ArgumentError("retrain_head needs a non-empty feature matrix")
    if set(np.unique(features.labels).tolist()) != {0, 1}:
        raise LabelError(f"retraining needs both labels, got {sorted(set(features.labels.tolist()))}")

    def solve_repeat(repeat: int):
        indices = balanced_subset(features.groups, cfg.seed, repeat)
        z = features.values[indices]
        y = features.labels[indices].astype(np.float64)
        if cfg.standardize:
            mean = z.mean(axis=0)
            scale = z.std(axis=0)
            scale = np.where(scale > 0, scale, 1.0)
            w, b, trace, converged, iters = _solve((z - mean) / scale, y, cfg)
            # 映射回原始特征空间，零权重保持为零
            w = w / scale + 0.0
            b = b - float(w @ mean)
        else:
            mean = scale = None
            w, b, trace, converged, iters = _solve(z, y, cfg)
        return indices, w, b, trace, converged, iters, mean, scale

    repeats = range(cfg.n_subset_repeats)
    if cfg.workers > 1 and cfg.n_subset_repeats > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as executor:
            outcomes = list(executor.map(solve_repeat, repeats))
    else:
        outcomes = [solve_repeat(r) for r in repeats]

    weights = np.mean(np.stack([o[1] for o in outcomes]), axis=0) + 0.0
    bias = float(np.mean([o[2] for o in outcomes]))
    head = Head(weights=weights, bias=bias)
    result = DfrResult(
        head=head,
        zero_fraction=sparsity(head),
        objective_trace=[o[3] for o in outcomes],
        subset_indices=[o[0].tolist() for o in outcomes],
        converged=all(o[4] for o in outcomes),
        iterations=[o[5] for o in outcomes],
        config=cfg,
        standardized=cfg.standardize,
        feature_mean=[o[6].tolist() for o in outcomes] if cfg.standardize else [],
        feature_scale=[o[7].tolist() for o in outcomes] if cfg.standardize else [],
        final_decrease=[_last_decrease(o[3]) for o in outcomes],
    )
    if not result.converged:
        logger.warning(f"⚠️ DFR solver hit max_iters={cfg.max_iters} before reaching tol={cfg.tol}; "
                       f"last objective decrease {max(result.final_decrease):.3e}")
    logger.info(f"DFR head retrained: lambda={cfg.l1_lambda}, zero_fraction={result.zero_fraction:.3f}, "
                f"subset size={len(outcomes[0][0])}")
    return result


def apply_dfr(model: TrainedModel, result: DfrResult) -> TrainedModel:
    """Model with the same encoder and the retrained head."""
    if result.head.dim != model.encoder.out_channels:
        raise ShapeError("retrained head", model.encoder.out_channels, result.head.dim)
    updated = model.copy()
    updated.head = result.head.copy()
    return updated


def sparsity(head: Head) -> float:
    """Fraction of head weights exactly equal to zero."""
    if head.dim == 0:
        raise ArgumentError("head has no weights")
    return float(np.count_nonzero(head.weights == 0.0)) / head.dim


def sparsity_path(features: FeatureMatrix, cfg: DfrConfig, lambdas: Sequence[float]) -> List[float]:
    """Zero fractions for each lambda on the same features and subset seed."""
    fractions = []
    for lam in lambdas:
        swept = DfrConfig(**{**asdict(cfg), "l1_lambda": float(lam)})
        fractions.append(retrain_head(features, swept).zero_fraction)
    return fractions


def save_dfr_result(result: DfrResult, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(result.to_dict(), f, indent=2, ensure_ascii=False)
    return path


def load_dfr_result(path: Path) -> DfrResult:
    with open(path, "r", encoding="utf-8") as f:
        return DfrResult.from_dict(json.load(f))
