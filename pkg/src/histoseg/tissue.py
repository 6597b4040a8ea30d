"""Tissue detection and patch acceptance.

Patches are accepted when more than 25% of their pixels are tissue;
accepted patches with more than 25% tumour are labelled tumour, patches
with exactly zero tumour are non-tumour, and everything in between is
discarded. Tissue is detected by Otsu-thresholding the saturation channel.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidInput
from .pyramid import PyramidImage

TISSUE_FRACTION_MIN = 0.25
TUMOUR_FRACTION_MIN = 0.25
TUMOUR_PIXEL_THRESHOLD = 128  # truth-mask values >= this count as tumour


class PatchLabel(enum.IntEnum):
    NON_TUMOUR = 0
    TUMOUR = 1
    DISCARD = 2


def rgb_to_hsv(r: float, g: float, b: float) -> tuple[float, float, float]:
    """Standard hexcone conversion of one 0-255 pixel.

    Returns hue in degrees [0, 360), saturation and value in [0, 1];
    saturation is 0 when the max channel is 0.
    """
    for name, v in (("r", r), ("g", g), ("b", b)):
        if not 0 <= v <= 255:
            raise InvalidInput(f"{name} channel out of range: {v}")
    r, g, b = r / 255.0, g / 255.0, b / 255.0
    cmax = max(r, g, b)
    cmin = min(r, g, b)
    delta = cmax - cmin
    if delta == 0:
        hue = 0.0
    elif cmax == r:
        hue = 60.0 * (((g - b) / delta) % 6.0)
    elif cmax == g:
        hue = 60.0 * ((b - r) / delta + 2.0)
    else:
        hue = 60.0 * ((r - g) / delta + 4.0)
    saturation = 0.0 if cmax == 0 else delta / cmax
    return hue % 360.0, saturation, cmax


def rgb_to_hsv_image(rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized hexcone conversion; hue in degrees, s and v in [0, 1]."""
    arr = np.asarray(rgb, dtype=np.float64) / 255.0
    r, g, b = arr[..., 0], arr[..., 1], arr[..., 2]
    cmax = arr.max(axis=-1)
    cmin = arr.min(axis=-1)
    delta = cmax - cmin
    safe = np.where(delta == 0, 1.0, delta)
    hue = np.where(
        cmax == r, ((g - b) / safe) % 6.0,
        np.where(cmax == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0))
    hue = np.where(delta == 0, 0.0, hue * 60.0) % 360.0
    saturation = np.where(cmax == 0, 0.0, delta / np.where(cmax == 0, 1.0, cmax))
    return hue, saturation, cmax


def hsv_to_rgb_image(hue: np.ndarray, saturation: np.ndarray,
                     value: np.ndarray) -> np.ndarray:
    """Inverse hexcone conversion back to a uint8 RGB raster."""
    h6 = (np.asarray(hue, dtype=np.float64) % 360.0) / 60.0
    s = np.clip(saturation, 0.0, 1.0)
    v = np.clip(value, 0.0, 1.0)

    def channel(n: int) -> np.ndarray:
        k = (n + h6) % 6.0
        return v - v * s * np.clip(np.minimum(k, 4.0 - k), 0.0, 1.0)

    rgb = np.stack([channel(5), channel(3), channel(1)], axis=-1)
    return np.clip(np.floor(rgb * 255.0 + 0.5), 0, 255).astype(np.uint8)


def otsu_threshold(hist: np.ndarray) -> int:
    """Threshold maximizing between-class variance; smallest t on ties.

    Foreground is the set of bins strictly greater than t.
    """
    hist = np.asarray(hist, dtype=np.float64)
    if hist.shape != (256,):
        raise InvalidInput(f"expected a 256-bin histogram, got shape {hist.shape}")
    total = hist.sum()
    if total == 0:
        raise InvalidInput("histogram is all zeros")
    bins = np.arange(256, dtype=np.float64)
    weighted = hist * bins
    cum_count = np.cumsum(hist)          # pixels in bins <= t
    cum_sum = np.cumsum(weighted)
    w0 = cum_count
    w1 = total - cum_count
    valid = (w0 > 0) & (w1 > 0)
    mu0 = np.divide(cum_sum, w0, out=np.zeros(256), where=valid)
    mu1 = np.divide(cum_sum[-1] - cum_sum, w1, out=np.zeros(256), where=valid)
    variance = np.where(valid, w0 * w1 * (mu0 - mu1) ** 2, 0.0)
    return int(np.argmax(variance))


@dataclass
class TissueMask:
    width: int
    height: int
    bits: np.ndarray
    otsu_threshold: int


def saturation_u8(rgb: np.ndarray) -> np.ndarray:
    """Saturation channel quantized to 0-255 (round-half-up).

    Skips the hue computation: saturation only needs the channel extrema.
    """
    arr = np.asarray(rgb)
    cmax = arr.max(axis=-1).astype(np.float64)
    delta = cmax - arr.min(axis=-1)
    saturation = np.divide(delta, cmax, out=np.zeros_like(cmax), where=cmax > 0)
    return np.floor(saturation * 255.0 + 0.5).astype(np.uint8)


def tissue_mask(lowres: np.ndarray) -> TissueMask:
    """Otsu-threshold the quantized saturation channel of an RGB raster.

    A degenerate single-bin histogram (e.g. an all-white image) yields an
    all-false mask because Otsu is undefined there.
    """
    arr = np.asarray(lowres)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InvalidInput(f"expected an (h, w, 3) raster, got shape {arr.shape}")
    if arr.size == 0:
        raise InvalidInput("empty raster")
    sat = saturation_u8(arr)
    hist = np.bincount(sat.ravel(), minlength=256)
    height, width = sat.shape
    if np.count_nonzero(hist) <= 1:
        bits = np.zeros((height, width), dtype=bool)
        return TissueMask(width, height, bits, 0)
    t = otsu_threshold(hist)
    return TissueMask(width, height, sat > t, t)


def label_patch(tissue_frac: float, tumour_frac: float) -> PatchLabel:
    """Apply the acceptance rules to one patch's tissue/tumour fractions."""
    if not 0.0 <= tumour_frac <= tissue_frac <= 1.0:
        raise InvalidInput(
            f"fractions must satisfy 0 <= tumour ({tumour_frac}) <= "
            f"tissue ({tissue_frac}) <= 1")
    if tissue_frac <= TISSUE_FRACTION_MIN:
        return PatchLabel.DISCARD
    if tumour_frac > TUMOUR_FRACTION_MIN:
        return PatchLabel.TUMOUR
    if tumour_frac == 0.0:
        return PatchLabel.NON_TUMOUR
    return PatchLabel.DISCARD


@dataclass(frozen=True)
class PatchRecord:
    slide_id: str
    level: int
    x: int
    y: int
    label: PatchLabel
    cluster: int = -1


@dataclass
class PatchIndex:
    """Accepted patches of one slide at one level, in grid order."""

    slide_id: str
    patch_size: int
    level: int
    records: list[PatchRecord] = field(default_factory=list)

    def count(self, label: PatchLabel) -> int:
        return sum(1 for r in self.records if r.label == label)

    def __len__(self) -> int:
        return len(self.records)


def build_patch_index(image: PyramidImage, truth_mask: PyramidImage,
                      slide_id: str, level: int, patch_size: int) -> PatchIndex:
    """Label every grid cell of one level and keep the accepted ones.

    The grid covers the level with ceil division; border cells are padded
    with white and padding counts as neither tissue nor tumour. Fractions
    are relative to the full ``patch_size**2`` cell area.
    """
    width, height = image.level_dimensions(level)
    mw, mh = truth_mask.level_dimensions(level)
    if (mw, mh) != (width, height):
        raise InvalidInput(
            f"mask level {level} is {mw}x{mh}, image level is {width}x{height}")

    grid_x = math.ceil(width / patch_size)
    grid_y = math.ceil(height / patch_size)
    pad_x = grid_x * patch_size - width
    pad_y = grid_y * patch_size - height

    tissue = tissue_mask(image.level_array(level)).bits
    tissue = np.pad(tissue, ((0, pad_y), (0, pad_x)))
    tumour = truth_mask.level_array(level)[:, :, 0] >= TUMOUR_PIXEL_THRESHOLD
    tumour = np.pad(tumour, ((0, pad_y), (0, pad_x)))

    cell_area = patch_size * patch_size
    tissue_counts = tissue.reshape(grid_y, patch_size, grid_x, patch_size).sum(axis=(1, 3))
    tumour_counts = tumour.reshape(grid_y, patch_size, grid_x, patch_size).sum(axis=(1, 3))

    index = PatchIndex(slide_id, patch_size, level)
    for gy in range(grid_y):
        for gx in range(grid_x):
            label = label_patch(tissue_counts[gy, gx] / cell_area,
                                tumour_counts[gy, gx] / cell_area)
            if label != PatchLabel.DISCARD:
                index.records.append(PatchRecord(
                    slide_id, level, gx * patch_size, gy * patch_size, label))
    return index


INDEX_HEADER = ["slide_id", "level", "x", "y", "label", "cluster"]


def save_index(index: PatchIndex, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(INDEX_HEADER)
        for r in index.records:
            writer.writerow([r.slide_id, r.level, r.x, r.y, int(r.label), r.cluster])


def load_index(path: str | Path, patch_size: int, slide_id: str | None = None,
               level: int | None = None) -> PatchIndex:
    """Load a patch-index CSV.

    ``slide_id`` and ``level`` provide the identity for legitimately empty
    indices (an all-white slide produces one).
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != INDEX_HEADER:
            raise FormatError(f"bad patch-index header {header!r} in {path}")
        records = []
        for row in reader:
            slide_id = row[0]
            level = int(row[1])
            label = PatchLabel(int(row[4]))
            if label == PatchLabel.DISCARD:
                raise FormatError(f"discarded patch stored in {path}")
            records.append(PatchRecord(
                row[0], level, int(row[2]), int(row[3]), label, int(row[5])))
    if slide_id is None:
        raise FormatError(f"patch index {path} is empty and no slide_id was given")
    return PatchIndex(slide_id, patch_size, level or 0, records)
