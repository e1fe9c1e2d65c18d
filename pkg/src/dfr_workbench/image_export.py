"""
Binary PGM (P5) / PPM (P6) writers for heatmaps, weight grids and sample images.

gray      per-image min-max scaling to 0..255
diverging symmetric range [-max|v|, max|v|] through blue - white - red
A map with no range (constant for gray, all-zero for diverging) is written as all
zero bytes and reported as degenerate.
"""

import logging
from pathlib import Path
from typing import NamedTuple, Tuple, Union

import numpy as np

from .errors import ArgumentError, ExportError, FormatError
from .interpret import INPUT_SPACE, Heatmap

logger = logging.getLogger(__name__)

MODES = ("gray", "diverging")


class ExportResult(NamedTuple):
    path: Path
    degenerate: bool


def render_gray(values: np.ndarray) -> Tuple[np.ndarray, bool]:
    values = np.asarray(values, dtype=np.float64)
    low, high = float(values.min()), float(values.max())
    if not high > low:
        return np.zeros(values.shape, dtype=np.uint8), True
    scaled = np.rint((values - low) / (high - low) * 255.0)
    return np.clip(scaled, 0, 255).astype(np.uint8), False


def render_diverging(values: np.ndarray) -> Tuple[np.ndarray, bool]:
    values = np.asarray(values, dtype=np.float64)
    extent = float(np.abs(values).max())
    if not extent > 0:
        return np.zeros(values.shape + (3,), dtype=np.uint8), True
    t = values / extent
    fade = np.rint(255.0 * (1.0 - np.abs(t)))
    full = np.full(values.shape, 255.0)
    positive = t >= 0
    red = np.where(positive, full, fade)
    blue = np.where(positive, fade, full)
    rgb = np.stack([red, fade, blue], axis=-1)
    return np.clip(rgb, 0, 255).astype(np.uint8), False


def write_pnm(pixels: np.ndarray, path: Union[str, Path]) -> Path:
    """P5 for (H, W) uint8, P6 for (H, W, 3) uint8."""
    path = Path(path)
    if pixels.dtype != np.uint8:
        raise ArgumentError(f"pixels must be uint8, got {pixels.dtype}")
    if pixels.ndim == 2:
        tag = b"P5"
    elif pixels.ndim == 3 and pixels.shape[2] == 3:
        tag = b"P6"
    else:
        raise ArgumentError(f"cannot write pixels of shape {pixels.shape} as PGM/PPM")
    height, width = pixels.shape[:2]
    header = tag + f"\n{width} {height}\n255\n".encode("ascii")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(header)
            f.write(np.ascontiguousarray(pixels).tobytes())
    except OSError as e:
        raise ExportError(f"cannot write {path}: {e}") from e
    return path


def read_pnm(path: Union[str, Path]) -> np.ndarray:
    """Read back a file written by :func:`write_pnm`."""
    with open(path, "rb") as f:
        data = f.read()
    fields = []
    offset = 0
    while len(fields) < 4:
        while offset < len(data) and data[offset:offset + 1].isspace():
            offset += 1
        start = offset
        while offset < len(data) and not data[offset:offset + 1].isspace():
            offset += 1
        if start == offset:
            raise FormatError(offset, "truncated header")
        fields.append(data[start:offset])
    offset += 1  # single whitespace byte before the raster
    tag = fields[0]
    if tag not in (b"P5", b"P6"):
        raise FormatError(0, f"unsupported magic {tag!r}")
    try:
        width, height, maxval = (int(v) for v in fields[1:])
    except ValueError as e:
        raise FormatError(0, f"bad header field: {e}") from e
    if maxval != 255:
        raise FormatError(0, f"unsupported maxval {maxval}")
    channels = 3 if tag == b"P6" else 1
    expected = width * height * channels
    raster = data[offset:]
    if len(raster) != expected:
        raise FormatError(offset, f"raster has {len(raster)} bytes, expected {expected}")
    pixels = np.frombuffer(raster, dtype=np.uint8)
    return pixels.reshape((height, width, 3) if channels == 3 else (height, width)).copy()


def export_heatmap(heatmap: Heatmap, path: Union[str, Path], mode: str = "gray") -> ExportResult:
    """Write an input-space heatmap as PGM (gray) or PPM (diverging)."""
    if mode not in MODES:
        raise ArgumentError(f"mode must be one of {MODES}, got {mode!r}")
    if heatmap.space != INPUT_SPACE:
        raise ArgumentError(f"export expects an {INPUT_SPACE} map, got {heatmap.space}")
    pixels, degenerate = render_gray(heatmap.values) if mode == "gray" else render_diverging(heatmap.values)
    if degenerate:
        logger.warning(f"⚠️ degenerate heatmap range, writing all-zero image: {path}")
    return ExportResult(write_pnm(pixels, path), degenerate)


def export_weight_grid(grid: np.ndarray, path: Union[str, Path], scale: int = 8) -> ExportResult:
    """Diverging rendering of a weight grid, each cell enlarged to scale x scale pixels."""
    pixels, degenerate = render_diverging(grid)
    if scale > 1:
        pixels = pixels.repeat(scale, axis=0).repeat(scale, axis=1)
    return ExportResult(write_pnm(pixels, path), degenerate)


def export_image(image: np.ndarray, path: Union[str, Path]) -> ExportResult:
    """An (H, W, C) image in [0, 1]: PPM for three channels, PGM of channel 0 otherwise."""
    scaled = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    pixels = scaled if image.shape[2] == 3 else scaled[:, :, 0]
    return ExportResult(write_pnm(pixels, path), False)
