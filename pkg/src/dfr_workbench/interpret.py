"""
Class activation maps, single-neuron maps and a mask-based neuron taxonomy.

CAM(x, y) = sum_k w_k A_k(x, y) over the encoder's last spatial maps, upsampled with
align-corners bilinear interpolation. Because the synthetic data carries exact core and
patch masks, "where a map looks" becomes a number: the share of its positive mass that
falls inside a mask.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, NamedTuple, Optional, Sequence, Union

import numpy as np

from .datagen import Sample, stack_images
from .errors import ArgumentError, NeuronIndexError, ProbeError, ShapeError, SpecificationError
from .nn import Head, TrainedModel, encode, forward

logger = logging.getLogger(__name__)

FEATURE_SPACE = "feature-space"
INPUT_SPACE = "input-space"


@dataclass
class Heatmap:
    values: np.ndarray  # (h, w)
    space: str = FEATURE_SPACE

    @property
    def shape(self):
        return self.values.shape


class RegionScore(NamedTuple):
    score: float
    empty: bool


class Taxonomy(str, Enum):
    SPURIOUS_ONLY = "SpuriousOnly"
    CORE_ONLY = "CoreOnly"
    MIXED = "Mixed"
    INACTIVE = "Inactive"


@dataclass(frozen=True)
class TaxonomyThresholds:
    tau_hi: float = 0.5
    tau_lo: float = 0.2
    eps_act: float = 1e-6

    def validate(self) -> None:
        if not 0.0 <= self.tau_lo <= self.tau_hi <= 1.0:
            raise SpecificationError("taxonomy", f"need 0 <= tau_lo <= tau_hi <= 1, got {self.tau_lo}, {self.tau_hi}")
        if self.eps_act < 0:
            raise SpecificationError("taxonomy.eps_act", f"must be >= 0, got {self.eps_act}")


@dataclass
class NeuronReport:
    k: int
    w_erm: float
    w_dfr: float
    core_score: float
    spurious_score: float
    mean_mass: float
    taxonomy: Taxonomy

    @property
    def zeroed(self) -> bool:
        return self.w_dfr == 0.0

    def to_row(self) -> Dict:
        return {
            "k": self.k,
            "w_erm": self.w_erm,
            "w_dfr": self.w_dfr,
            "core_score": self.core_score,
            "spurious_score": self.spurious_score,
            "taxonomy": self.taxonomy.value,
        }


def _interpolation_matrix(n_in: int, n_out: int) -> np.ndarray:
    matrix = np.zeros((n_out, n_in))
    if n_in == 1:
        matrix[:, 0] = 1.0
        return matrix
    for i in range(n_out):
        src = i * (n_in - 1) / (n_out - 1)
        lo = min(int(math.floor(src)), n_in - 2)
        frac = src - lo
        matrix[i, lo] += 1.0 - frac
        matrix[i, lo + 1] += frac
    return matrix


def _upsample_values(values: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    rows = _interpolation_matrix(values.shape[-2], out_h)
    cols = _interpolation_matrix(values.shape[-1], out_w)
    return rows @ values @ cols.T


def upsample_bilinear(heatmap: Union[Heatmap, np.ndarray], out_h: int, out_w: int) -> Heatmap:
    """Align-corners bilinear upsampling; corners are reproduced exactly."""
    values = heatmap.values if isinstance(heatmap, Heatmap) else np.asarray(heatmap, dtype=np.float64)
    if values.ndim != 2 or values.size == 0:
        raise ArgumentError(f"expected a non-empty 2-D map, got shape {values.shape}")
    in_h, in_w = values.shape
    if out_h < in_h or out_w < in_w:
        raise ArgumentError(f"output size ({out_h}, {out_w}) smaller than input size ({in_h}, {in_w})")
    return Heatmap(_upsample_values(values, int(out_h), int(out_w)), INPUT_SPACE)


def _image_side(image: np.ndarray):
    return image.shape[0], image.shape[1]


def cam(model: TrainedModel, image: np.ndarray) -> Heatmap:
    """Head-weighted sum of the final spatial maps, upsampled to the image size."""
    maps, _ = forward(model.encoder, image)
    if model.head.dim != maps.shape[0]:
        raise ShapeError("head weights", maps.shape[0], model.head.dim)
    weighted = np.tensordot(model.head.weights, maps, axes=1)
    return upsample_bilinear(weighted, *_image_side(image))


def neuron_map(model: TrainedModel, image: np.ndarray, k: int) -> Heatmap:
    """Upsampled activation map of channel ``k``."""
    d = model.encoder.out_channels
    if not 0 <= k < d:
        raise NeuronIndexError(f"neuron index {k} outside [0, {d})")
    maps, _ = forward(model.encoder, image)
    return upsample_bilinear(maps[k], *_image_side(image))


def region_score(heatmap: Union[Heatmap, np.ndarray], mask: np.ndarray) -> RegionScore:
    """Share of the map's positive mass inside ``mask``; (0, empty=True) for a zero map."""
    values = heatmap.values if isinstance(heatmap, Heatmap) else np.asarray(heatmap, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if values.shape != mask.shape:
        raise ShapeError("mask", values.shape, mask.shape)
    positive = np.maximum(values, 0.0)
    inside = float(positive[mask].sum())
    outside = float(positive[~mask].sum())
    total = inside + outside
    if total == 0.0:
        return RegionScore(0.0, True)
    return RegionScore(inside / total, False)


def _report_from_maps(k: int, maps: np.ndarray, probe: Sequence[Sample], w_erm: float, w_dfr: float,
                      thresholds: TaxonomyThresholds) -> NeuronReport:
    """maps: (N, H, W) input-space maps of neuron k, one per probe sample."""
    masses = np.maximum(maps, 0.0).sum(axis=(1, 2))
    mean_mass = float(masses.mean())
    core_scores = [region_score(m, s.core_mask).score for m, s in zip(maps, probe)]
    spurious_scores = [region_score(m, s.spurious_mask).score for m, s in zip(maps, probe) if s.has_patch]
    core = float(np.mean(core_scores))
    spurious = float(np.mean(spurious_scores))
    if mean_mass < thresholds.eps_act:
        taxonomy = Taxonomy.INACTIVE
    elif core >= thresholds.tau_hi and spurious <= thresholds.tau_lo:
        taxonomy = Taxonomy.CORE_ONLY
    elif spurious >= thresholds.tau_hi and core <= thresholds.tau_lo:
        taxonomy = Taxonomy.SPURIOUS_ONLY
    else:
        taxonomy = Taxonomy.MIXED
    return NeuronReport(k, w_erm, w_dfr, core, spurious, mean_mass, taxonomy)


def _check_probe(probe: Sequence[Sample]) -> List[Sample]:
    probe = list(probe)
    if not any(s.has_patch for s in probe):
        raise ProbeError("probe set has no patch-present samples to score spurious focus on")
    return probe


def _probe_maps(model: TrainedModel, probe: List[Sample]) -> np.ndarray:
    maps, _ = encode(model.encoder, stack_images(probe))
    return maps


def classify_neuron(model: TrainedModel, probe: Sequence[Sample], k: int,
                    dfr_head: Optional[Head] = None,
                    thresholds: TaxonomyThresholds = TaxonomyThresholds()) -> NeuronReport:
    """Score neuron ``k`` against core/spurious masks and assign its taxonomy."""
    probe = _check_probe(probe)
    d = model.encoder.out_channels
    if not 0 <= k < d:
        raise NeuronIndexError(f"neuron index {k} outside [0, {d})")
    height, width = probe[0].image.shape[:2]
    maps = _upsample_values(_probe_maps(model, probe)[:, k], height, width)
    w_dfr = float(dfr_head.weights[k]) if dfr_head is not None else float("nan")
    return _report_from_maps(k, maps, probe, float(model.head.weights[k]), w_dfr, thresholds)


def classify_neurons(model: TrainedModel, probe: Sequence[Sample], dfr_head: Optional[Head] = None,
                     thresholds: TaxonomyThresholds = TaxonomyThresholds()) -> List[NeuronReport]:
    """classify_neuron for every channel, sharing one encoder pass; ordered by k."""
    probe = _check_probe(probe)
    height, width = probe[0].image.shape[:2]
    feature_maps = _probe_maps(model, probe)
    reports = []
    for k in range(model.encoder.out_channels):
        maps = _upsample_values(feature_maps[:, k], height, width)
        w_dfr = float(dfr_head.weights[k]) if dfr_head is not None else float("nan")
        reports.append(_report_from_maps(k, maps, probe, float(model.head.weights[k]), w_dfr, thresholds))
    return reports


def weight_heatmap(head: Head, grid_w: int) -> np.ndarray:
    """Row-major reshape of the head weights into a (d / grid_w, grid_w) grid."""
    d = head.dim
    if grid_w < 1 or d % grid_w:
        raise ArgumentError(f"grid width {grid_w} does not divide d = {d}")
    return head.weights.reshape(d // grid_w, grid_w).copy()


def default_grid_width(d: int) -> int:
    """Width of the squarest grid: d // r for the largest divisor r of d with r <= sqrt(d)."""
    if d < 1:
        raise ArgumentError(f"d must be >= 1, got {d}")
    rows = 1
    for candidate in range(1, math.isqrt(d) + 1):
        if d % candidate == 0:
            rows = candidate
    return d // rows


@dataclass
class TaxonomyContrast:
    zeroed_mean: Optional[float]
    retained_mean: Optional[float]
    n_zeroed: int
    n_retained: int

    @property
    def holds(self) -> Optional[bool]:
        if self.zeroed_mean is None or self.retained_mean is None:
            return None
        return self.zeroed_mean >= self.retained_mean

    def to_dict(self) -> Dict:
        return {"zeroed_mean_spurious": self.zeroed_mean, "retained_mean_spurious": self.retained_mean,
                "n_zeroed": self.n_zeroed, "n_retained": self.n_retained, "holds": self.holds}


def taxonomy_contrast(reports: Sequence[NeuronReport]) -> TaxonomyContrast:
    """Mean spurious score of DFR-zeroed vs retained neurons, inactive neurons excluded."""
    active = [r for r in reports if r.taxonomy != Taxonomy.INACTIVE]
    zeroed = [r.spurious_score for r in active if r.zeroed]
    retained = [r.spurious_score for r in active if not r.zeroed]
    return TaxonomyContrast(
        float(np.mean(zeroed)) if zeroed else None,
        float(np.mean(retained)) if retained else None,
        len(zeroed),
        len(retained),
    )


def taxonomy_counts(reports: Sequence[NeuronReport]) -> Dict[str, int]:
    counts = {t.value: 0 for t in Taxonomy}
    for report in reports:
        counts[report.taxonomy.value] += 1
    return counts


def select_exemplar_neurons(reports: Sequence[NeuronReport]) -> Dict[str, Optional[int]]:
    """One neuron per type: zeroed spurious-only, retained core-only, retained mixed."""
    def pick(candidates, key):
        return max(candidates, key=key).k if candidates else None

    zeroed = [r for r in reports if r.zeroed and r.taxonomy != Taxonomy.INACTIVE]
    retained = [r for r in reports if not r.zeroed and r.taxonomy != Taxonomy.INACTIVE]
    spurious = [r for r in zeroed if r.taxonomy == Taxonomy.SPURIOUS_ONLY] or zeroed
    return {
        "spurious_only": pick(spurious, lambda r: (r.spurious_score, -r.k)),
        "core_only": pick([r for r in retained if r.taxonomy == Taxonomy.CORE_ONLY], lambda r: (abs(r.w_dfr), -r.k)),
        "mixed": pick([r for r in retained if r.taxonomy == Taxonomy.MIXED], lambda r: (abs(r.w_dfr), -r.k)),
    }


def cam_focus(model: TrainedModel, samples: Sequence[Sample]) -> Dict[str, Optional[float]]:
    """Mean CAM region scores on patch-present samples against spurious and core masks."""
    patched = [s for s in samples if s.has_patch]
    if not patched:
        return {"spurious": None, "core": None, "n": 0}
    maps, _ = encode(model.encoder, stack_images(patched))
    weighted = np.tensordot(maps, model.head.weights, axes=([1], [0]))  # (N, h, w)
    height, width = patched[0].image.shape[:2]
    cams = _upsample_values(weighted, height, width)
    spurious = [region_score(c, s.spurious_mask).score for c, s in zip(cams, patched)]
    core = [region_score(c, s.core_mask).score for c, s in zip(cams, patched)]
    return {"spurious": float(np.mean(spurious)), "core": float(np.mean(core)), "n": len(patched)}
