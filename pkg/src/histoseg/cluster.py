"""Frozen tissue-type clustering: descriptor, Z-score, PCA, k-means.

The feature backbone is a deterministic hand-crafted descriptor (colour
histograms, channel moments, gradient orientations); external feature files
can replace it per slide without retraining anything downstream. Once fit,
the standardize -> project -> nearest-centroid transform is pure.
"""

from __future__ import annotations

import base64
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidInput

FEATURE_DIM = 62
_COLOR_BINS = 16
_GRADIENT_BINS = 8
SCALE_FLOOR = 1e-8
KMEANS_TOL = 1e-6
KMEANS_MAX_ITER = 300


def extract_features(patch: np.ndarray) -> np.ndarray:
    """62-dim descriptor of a 3-channel uint8 patch, every entry in [0, 1].

    Layout: 16-bin normalized histogram per channel (48), per-channel mean
    and population std on the unit scale (6), 8-bin magnitude-weighted
    gradient orientation histogram of the luminance (8).
    """
    arr = np.asarray(patch)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InvalidInput(f"expected an (h, w, 3) patch, got shape {arr.shape}")
    pixels = arr.reshape(-1, 3).astype(np.float32)
    n = pixels.shape[0]

    out = np.empty(FEATURE_DIM)
    quantized = arr.astype(np.uint8) >> 4
    for c in range(3):
        hist = np.bincount(quantized[:, :, c].ravel(), minlength=_COLOR_BINS)
        out[c * _COLOR_BINS:(c + 1) * _COLOR_BINS] = hist / n
    out[48:51] = pixels.mean(axis=0) / 255.0
    out[51:54] = pixels.std(axis=0) / 255.0

    luminance = pixels.reshape(arr.shape) @ np.array(
        [0.299, 0.587, 0.114], dtype=np.float32)
    gy, gx = np.gradient(luminance)
    magnitude = np.hypot(gx, gy)
    total = float(magnitude.sum())
    if total == 0:
        out[54:62] = 0.0
    else:
        orientation = np.arctan2(gy, gx)  # [-pi, pi]
        bins = np.clip(((orientation + np.pi) * (_GRADIENT_BINS / (2 * np.pi)))
                       .astype(int), 0, _GRADIENT_BINS - 1)
        hist = np.bincount(bins.ravel(), weights=magnitude.ravel(),
                           minlength=_GRADIENT_BINS)
        out[54:62] = hist / total
    return out


@dataclass
class ClusterModel:
    """Frozen standardize -> PCA -> k-means transform."""

    mean: np.ndarray            # (D,)
    scale: np.ndarray           # (D,) population std floored at SCALE_FLOOR
    components: np.ndarray      # (m, D) orthonormal rows
    explained_ratio: float
    centroids: np.ndarray       # (k, m)
    k: int
    inertia_history: list[float] = field(default_factory=list, repr=False)

    @property
    def feature_dim(self) -> int:
        return self.mean.shape[0]

    @property
    def projected_dim(self) -> int:
        return self.components.shape[0]


def _standardize(samples: np.ndarray, mean: np.ndarray, scale: np.ndarray) -> np.ndarray:
    return (samples - mean) / scale


def _kmeans_plus_plus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(0, n)]
    closest = ((points - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = closest.sum()
        if total == 0:
            centroids[i] = points[rng.integers(0, n)]
        else:
            draw = rng.random() * total
            centroids[i] = points[np.searchsorted(np.cumsum(closest), draw)]
        closest = np.minimum(closest, ((points - centroids[i]) ** 2).sum(axis=1))
    return centroids


def _assign_step(points: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    distances = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    labels = distances.argmin(axis=1)
    return labels, distances[np.arange(points.shape[0]), labels]


def _lloyd(points: np.ndarray, centroids: np.ndarray,
           rng: np.random.Generator) -> tuple[np.ndarray, list[float]]:
    history = []
    for _ in range(KMEANS_MAX_ITER):
        labels, sq_dist = _assign_step(points, centroids)
        # Re-seed empty clusters to the point farthest from its centroid;
        # its contribution drops to zero, so inertia cannot increase.
        for empty in np.setdiff1d(np.arange(centroids.shape[0]), labels):
            farthest = int(sq_dist.argmax())
            centroids = centroids.copy()
            centroids[empty] = points[farthest]
            labels[farthest] = empty
            sq_dist[farthest] = 0.0
        history.append(float(sq_dist.sum()))
        updated = centroids.copy()
        for i in range(centroids.shape[0]):
            members = points[labels == i]
            if members.shape[0]:
                updated[i] = members.mean(axis=0)
        movement = np.sqrt(((updated - centroids) ** 2).sum(axis=1)).max()
        centroids = updated
        if movement < KMEANS_TOL:
            break
    return centroids, history


def fit(samples: np.ndarray, variance_target: float = 0.95, k: int = 10,
        seed: int = 0) -> ClusterModel:
    """Fit the frozen pipeline on a sample of feature vectors.

    PCA keeps the smallest component count whose cumulative explained
    variance reaches ``variance_target``; k-means uses k-means++ seeding
    and Lloyd iterations until centroid movement falls below 1e-6.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2:
        raise InvalidInput(f"expected an (n, d) sample matrix, got shape {samples.shape}")
    n = samples.shape[0]
    if n <= k or n <= 1:
        raise InvalidInput(f"need more than max(k={k}, 1) samples, got {n}")

    mean = samples.mean(axis=0)
    scale = np.maximum(samples.std(axis=0), SCALE_FLOOR)
    standardized = _standardize(samples, mean, scale)

    covariance = standardized.T @ standardized / n
    eigenvalues, eigenvectors = np.linalg.eigh(covariance)
    order = np.argsort(eigenvalues)[::-1]
    eigenvalues = np.clip(eigenvalues[order], 0.0, None)
    eigenvectors = eigenvectors[:, order]
    total = eigenvalues.sum()
    if total == 0:
        raise InvalidInput("sample has zero variance in every dimension")
    cumulative = np.cumsum(eigenvalues) / total
    m = int(np.searchsorted(cumulative, variance_target) + 1)
    components = eigenvectors[:, :m].T.copy()
    # Deterministic sign: largest-magnitude entry of each component is positive.
    for row in components:
        pivot = np.abs(row).argmax()
        if row[pivot] < 0:
            row *= -1

    projected = standardized @ components.T
    rng = np.random.default_rng(seed)
    centroids = _kmeans_plus_plus(projected, k, rng)
    centroids, history = _lloyd(projected, centroids, rng)

    return ClusterModel(
        mean=mean, scale=scale, components=components,
        explained_ratio=float(cumulative[m - 1]), centroids=centroids, k=k,
        inertia_history=history)


def assign(model: ClusterModel, features: np.ndarray) -> int:
    """Nearest-centroid cluster id for one feature vector (pure)."""
    f = np.asarray(features, dtype=np.float64)
    if f.shape != (model.feature_dim,):
        raise InvalidInput(
            f"feature dimension {f.shape} does not match model ({model.feature_dim},)")
    projected = model.components @ ((f - model.mean) / model.scale)
    distances = ((model.centroids - projected) ** 2).sum(axis=1)
    return int(distances.argmin())


def assign_many(model: ClusterModel, features: np.ndarray) -> np.ndarray:
    """Vectorized :func:`assign` over an (n, D) matrix."""
    f = np.asarray(features, dtype=np.float64)
    projected = _standardize(f, model.mean, model.scale) @ model.components.T
    distances = ((projected[:, None, :] - model.centroids[None, :, :]) ** 2).sum(axis=2)
    return distances.argmin(axis=1)


def _encode(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii")


def _decode(text: str, shape: tuple[int, ...]) -> np.ndarray:
    raw = base64.b64decode(text)
    expected = int(np.prod(shape)) * 8
    if len(raw) != expected:
        raise FormatError(f"array payload is {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).copy()


def save_cluster_model(model: ClusterModel, path: str | Path) -> None:
    """JSON model file; arrays are base64 little-endian f64.

    The recorded scale entries are population (not sample) standard
    deviations, floored at 1e-8.
    """
    doc = {
        "feature_dim": model.feature_dim,
        "projected_dim": model.projected_dim,
        "k": model.k,
        "explained_ratio": model.explained_ratio,
        "scale_kind": "population_std",
        "mean": _encode(model.mean),
        "scale": _encode(model.scale),
        "components": _encode(model.components),
        "centroids": _encode(model.centroids),
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_cluster_model(path: str | Path) -> ClusterModel:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"cluster model is not valid JSON: {exc}") from exc
    try:
        d = int(doc["feature_dim"])
        m = int(doc["projected_dim"])
        k = int(doc["k"])
        model = ClusterModel(
            mean=_decode(doc["mean"], (d,)),
            scale=_decode(doc["scale"], (d,)),
            components=_decode(doc["components"], (m, d)),
            explained_ratio=float(doc["explained_ratio"]),
            centroids=_decode(doc["centroids"], (k, m)),
            k=k)
    except KeyError as exc:
        raise FormatError(f"cluster model missing field {exc}") from exc
    return model


FEATURE_FILE_MAGIC = b"HFV1"


def save_feature_file(features: np.ndarray, path: str | Path) -> None:
    """External feature file: HFV1 header, u32 count, u32 dim, f32 rows.

    Rows follow the slide's patch-index record order.
    """
    arr = np.ascontiguousarray(features, dtype="<f4")
    if arr.ndim != 2:
        raise FormatError(f"feature table must be 2-d, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(FEATURE_FILE_MAGIC)
        fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def load_feature_file(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != FEATURE_FILE_MAGIC:
        raise FormatError(f"bad feature-file magic in {path}", offset=0)
    if len(blob) < 12:
        raise FormatError(f"truncated feature-file header in {path}", offset=len(blob))
    count, dim = struct.unpack_from("<II", blob, 4)
    expected = count * dim * 4
    if len(blob) - 12 != expected:
        raise FormatError(
            f"feature payload is {len(blob) - 12} bytes, expected {expected} in {path}",
            offset=12)
    return np.frombuffer(blob, dtype="<f4", offset=12).reshape(count, dim).copy()


class ExternalFeatureSource:
    """Per-slide feature lookup backed by HFV1 files.

    ``vector(slide_id, record_index)`` returns the stored row; files are
    named ``<slide_id>.features.hfv`` inside ``directory``.
    """

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self._tables: dict[str, np.ndarray] = {}

    def vector(self, slide_id: str, record_index: int) -> np.ndarray:
        table = self._tables.get(slide_id)
        if table is None:
            path = self.directory / f"{slide_id}.features.hfv"
            if not path.exists():
                raise InvalidInput(f"no feature file for slide {slide_id!r} at {path}")
            table = load_feature_file(path)
            self._tables[slide_id] = table
        if not 0 <= record_index < table.shape[0]:
            raise InvalidInput(
                f"record index {record_index} out of range for slide {slide_id!r}")
        return table[record_index].astype(np.float64)
