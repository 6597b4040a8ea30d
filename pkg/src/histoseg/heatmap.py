"""Patch-wise inference with heatmap stitching, fusion, and refinement.

Stage 1 runs the patch classifier over the non-overlapping grid cells of a
slide and stitches the tumour-class probabilities into a heatmap; cells
without an accepted patch stay at 0. Stage 2 concatenates the low-
resolution slide with the upsampled heatmap and refines the result, either
with the built-in neighborhood logistic model or through an external
executor process.
"""

from __future__ import annotations

import base64
import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import (DegenerateTrainingWarning, InferenceError, InvalidInput)
from .learn import Adam
from .pyramid import PyramidImage
from .tissue import PatchIndex

REFINED_SIZE = 1024
FUSED_CHANNELS = 4


@dataclass
class Heatmap:
    """Per-cell tumour probabilities over the patch grid of one level."""

    values: np.ndarray  # (grid_h, grid_w) float64 in [0, 1]
    level: int
    patch_size: int

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]


def infer_slide(pyr: PyramidImage, index: PatchIndex,
                predict: Callable[[np.ndarray], float],
                workers: int = 1) -> Heatmap:
    """Stitch per-patch tumour probabilities into a heatmap.

    ``predict`` maps one (patch_size, patch_size, 3) patch to the tumour
    probability. Cells without an index record keep probability 0. Cell
    evaluation is pure, so fan-out over a thread pool cannot change the
    result.
    """
    width, height = pyr.level_dimensions(index.level)
    ps = index.patch_size
    grid = np.zeros((math.ceil(height / ps), math.ceil(width / ps)))

    def cell(record) -> tuple[int, int, float]:
        gx, gy = record.x // ps, record.y // ps
        try:
            patch = pyr.read_region(record.level, record.x, record.y, ps, ps)
            return gx, gy, float(predict(patch))
        except Exception as exc:
            raise InferenceError(f"classifier failed: {exc}", cell=(gx, gy)) from exc

    if workers > 1 and len(index.records) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(cell, index.records))
    else:
        results = [cell(r) for r in index.records]
    for gx, gy, prob in results:
        grid[gy, gx] = prob
    return Heatmap(grid, index.level, ps)


def bilinear_resize(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Bilinear resampling with half-pixel centers and edge clamping."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.size == 0:
        raise InvalidInput("empty input raster")
    if out_w < 1 or out_h < 1:
        raise InvalidInput(f"output dims must be >= 1, got {out_w}x{out_h}")
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[:, :, np.newaxis]
    in_h, in_w = arr.shape[:2]

    def axis_coords(out_n: int, in_n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        src = (np.arange(out_n) + 0.5) * (in_n / out_n) - 0.5
        src = np.clip(src, 0.0, in_n - 1.0)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, in_n - 1)
        return lo, hi, src - lo

    x0, x1, fx = axis_coords(out_w, in_w)
    y0, y1, fy = axis_coords(out_h, in_h)
    fx = fx[np.newaxis, :, np.newaxis]
    fy = fy[:, np.newaxis, np.newaxis]
    top = arr[y0][:, x0] * (1 - fx) + arr[y0][:, x1] * fx
    bottom = arr[y1][:, x0] * (1 - fx) + arr[y1][:, x1] * fx
    out = top * (1 - fy) + bottom * fy
    return out[:, :, 0] if squeeze else out


def area_resize(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Box-average resampling: each output pixel is the exact mean of the
    source rectangle it covers. Used to derive low-resolution ground truth."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.size == 0:
        raise InvalidInput("empty input raster")
    if out_w < 1 or out_h < 1:
        raise InvalidInput(f"output dims must be >= 1, got {out_w}x{out_h}")
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[:, :, np.newaxis]

    def reduce_axis(a: np.ndarray, out_n: int) -> np.ndarray:
        in_n = a.shape[0]
        prefix = np.concatenate([np.zeros((1,) + a.shape[1:]), np.cumsum(a, axis=0)])
        edges = np.arange(out_n + 1) * (in_n / out_n)
        lo, hi = edges[:-1], edges[1:]
        lo_i = np.floor(lo).astype(int)
        hi_i = np.minimum(np.ceil(hi).astype(int), in_n)
        total = prefix[hi_i] - prefix[lo_i]
        # Trim the fractional slivers at both ends of each interval.
        total -= a[lo_i] * (lo - lo_i).reshape((-1,) + (1,) * (a.ndim - 1))
        tail = np.clip(hi_i - 1, 0, in_n - 1)
        total -= a[tail] * (hi_i - hi).reshape((-1,) + (1,) * (a.ndim - 1))
        return total / (hi - lo).reshape((-1,) + (1,) * (a.ndim - 1))

    out = reduce_axis(arr, out_h)
    out = np.moveaxis(reduce_axis(np.moveaxis(out, 1, 0), out_w), 0, 1)
    return out[:, :, 0] if squeeze else out


def lowres_level(pyr: PyramidImage, minimum: int = REFINED_SIZE) -> int:
    """Smallest pyramid level whose larger dimension is still >= minimum."""
    candidates = [lv for lv in range(pyr.level_count)
                  if max(pyr.level_dimensions(lv)) >= minimum]
    if not candidates:
        raise InvalidInput(f"no pyramid level with max dimension >= {minimum}")
    return candidates[-1]


def fuse(pyr: PyramidImage, hm: Heatmap) -> np.ndarray:
    """Stack the normalized low-resolution RGB with the upsampled heatmap.

    Returns a (1024, 1024, 4) float tensor with all entries in [0, 1].
    """
    level = lowres_level(pyr)
    rgb = pyr.level_array(level).astype(np.float64) / 255.0
    rgb = bilinear_resize(rgb, REFINED_SIZE, REFINED_SIZE)
    heat = bilinear_resize(hm.values, REFINED_SIZE, REFINED_SIZE)
    return np.concatenate([rgb, heat[:, :, np.newaxis]], axis=2)


def upsampled_heatmap_mask(hm: Heatmap, threshold: float = 0.5) -> np.ndarray:
    """The patch-wise design's final mask: upsample then threshold."""
    return threshold_mask(bilinear_resize(hm.values, REFINED_SIZE, REFINED_SIZE),
                          threshold)


@dataclass
class RefinerModel:
    """Neighborhood logistic refiner or a handle to an external executor."""

    radius: int = 1
    weights: np.ndarray | None = None  # ((2r+1)^2 * 4,)
    bias: float = 0.0
    executor_command: list[str] | None = None
    validation_loss: float | None = None

    def feature_count(self) -> int:
        return (2 * self.radius + 1) ** 2 * FUSED_CHANNELS

    def __post_init__(self):
        if self.radius < 0:
            raise InvalidInput(f"radius must be >= 0, got {self.radius}")
        if self.weights is None and self.executor_command is None:
            self.weights = np.zeros(self.feature_count())


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def refine(fused: np.ndarray, model: RefinerModel) -> np.ndarray:
    """Per-pixel refined tumour probability map (1024 x 1024, in [0, 1])."""
    arr = np.asarray(fused, dtype=np.float64)
    if arr.shape != (REFINED_SIZE, REFINED_SIZE, FUSED_CHANNELS):
        raise InvalidInput(
            f"fused input must be {REFINED_SIZE}x{REFINED_SIZE}x{FUSED_CHANNELS},"
            f" got {arr.shape}")
    if model.executor_command is not None:
        from .executor import ExternalExecutor
        with ExternalExecutor(model.executor_command) as ex:
            out = ex.infer([arr.astype(np.float32)])
        if out.shape not in ((REFINED_SIZE, REFINED_SIZE),
                             (REFINED_SIZE, REFINED_SIZE, 1)):
            raise InvalidInput(f"executor returned shape {out.shape}")
        return np.clip(out.reshape(REFINED_SIZE, REFINED_SIZE).astype(np.float64),
                       0.0, 1.0)

    r = model.radius
    weights = model.weights.reshape(2 * r + 1, 2 * r + 1, FUSED_CHANNELS)
    padded = np.pad(arr, ((r, r), (r, r), (0, 0)), mode="edge")
    logit = np.full((REFINED_SIZE, REFINED_SIZE), model.bias)
    for dy in range(2 * r + 1):
        for dx in range(2 * r + 1):
            window = padded[dy:dy + REFINED_SIZE, dx:dx + REFINED_SIZE]
            logit += window @ weights[dy, dx]
    return _sigmoid(logit)


def _gather_neighborhoods(fused: np.ndarray, ys: np.ndarray, xs: np.ndarray,
                          radius: int) -> np.ndarray:
    r = radius
    padded = np.pad(fused, ((r, r), (r, r), (0, 0)), mode="edge")
    rows = []
    for dy in range(2 * r + 1):
        for dx in range(2 * r + 1):
            rows.append(padded[ys + dy, xs + dx])
    return np.concatenate(rows, axis=1) if r > 0 else rows[0]


def train_refiner(pairs: Sequence[tuple[np.ndarray, np.ndarray]],
                  *, radius: int = 1, lr: float = 1e-3, steps: int = 800,
                  samples_per_image: int = 4000, seed: int = 0,
                  val_pairs: Sequence[tuple[np.ndarray, np.ndarray]] = ()) -> RefinerModel:
    """Fit the neighborhood logistic refiner on fused/truth pairs.

    Pixel positions are drawn balanced between classes per image; samples
    feed full-batch Adam for ``steps`` iterations.
    """
    if not pairs:
        raise InvalidInput("need at least one training pair")
    rng = np.random.default_rng(seed)
    features, targets = [], []
    for fused, truth in pairs:
        truth = np.asarray(truth).astype(bool)
        if truth.shape != (REFINED_SIZE, REFINED_SIZE):
            raise InvalidInput(f"truth mask must be {REFINED_SIZE}^2, got {truth.shape}")
        pos = np.flatnonzero(truth.ravel())
        neg = np.flatnonzero(~truth.ravel())
        if pos.size == 0 or neg.size == 0:
            warnings.warn("training pair has a single class",
                          DegenerateTrainingWarning, stacklevel=2)
        half = samples_per_image // 2
        chosen = []
        for pool in (pos, neg):
            if pool.size:
                chosen.append(rng.choice(pool, size=min(half, pool.size),
                                         replace=False))
        flat = np.concatenate(chosen)
        ys, xs = np.divmod(flat, REFINED_SIZE)
        features.append(_gather_neighborhoods(np.asarray(fused, dtype=np.float64),
                                              ys, xs, radius))
        targets.append(truth.ravel()[flat].astype(np.float64))
    x = np.vstack(features)
    t = np.concatenate(targets)

    weights = np.zeros(x.shape[1])
    bias = 0.0
    optimizer = Adam(lr=lr)
    n = x.shape[0]
    for _ in range(steps):
        prob = _sigmoid(x @ weights + bias)
        residual = prob - t
        grad_w = x.T @ residual / n
        grad_b = residual.mean()
        weights, bias_arr = optimizer.step([weights, np.array([bias])],
                                           [grad_w, np.array([grad_b])])
        bias = float(bias_arr[0])

    model = RefinerModel(radius=radius, weights=weights, bias=bias)
    if val_pairs:
        losses = []
        for fused, truth in val_pairs:
            prob = np.clip(refine(np.asarray(fused, dtype=np.float64), model),
                           1e-12, 1 - 1e-12)
            truth = np.asarray(truth).astype(np.float64)
            losses.append(float(-(truth * np.log(prob)
                                  + (1 - truth) * np.log(1 - prob)).mean()))
        model.validation_loss = float(np.mean(losses))
    return model


def threshold_mask(prob: np.ndarray, t: float = 0.5) -> np.ndarray:
    """Binary mask by strict thresholding: true where prob > t."""
    arr = np.asarray(prob, dtype=np.float64)
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise InvalidInput("probabilities must lie in [0, 1]")
    return arr > t


def save_refiner(model: RefinerModel, path: str | Path) -> None:
    doc = {
        "radius": model.radius,
        "bias": model.bias,
        "weights": base64.b64encode(
            np.ascontiguousarray(model.weights, dtype="<f8").tobytes()).decode("ascii"),
        "validation_loss": model.validation_loss,
        "executor_command": model.executor_command,
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_refiner(path: str | Path) -> RefinerModel:
    from .errors import FormatError
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"refiner checkpoint is not valid JSON: {exc}") from exc
    radius = int(doc["radius"])
    count = (2 * radius + 1) ** 2 * FUSED_CHANNELS
    raw = base64.b64decode(doc["weights"])
    if len(raw) != count * 8:
        raise FormatError(f"refiner weights are {len(raw)} bytes, expected {count * 8}")
    return RefinerModel(
        radius=radius,
        weights=np.frombuffer(raw, dtype="<f8").copy(),
        bias=float(doc["bias"]),
        executor_command=doc.get("executor_command"),
        validation_loss=doc.get("validation_loss"))
