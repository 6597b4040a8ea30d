"""Hierarchical balanced sampling and the concurrent batch generator.

Records are drawn through four uniform stages (grade, slide, class label,
patch), which equalizes outcome probability across imbalanced slides.
Producer threads sample, read, augment, and featurize patches into bounded
batches; the consumer side sees exactly ``batches_per_epoch`` batches per
epoch.
"""

from __future__ import annotations

import queue
import sys
import threading
from dataclasses import dataclass, field

import numpy as np

from . import cluster as cluster_mod
from .errors import EmptyPopulation, InvalidInput, StreamIOError
from .learn import LabeledBatch
from .pyramid import PyramidImage, SlideManifest
from .tissue import PatchIndex, PatchLabel, PatchRecord, hsv_to_rgb_image, rgb_to_hsv_image

CLASS_COUNT = 2  # non-tumour, tumour


@dataclass
class BatchSpec:
    """Batch generation settings (the config file's ``sampler`` section)."""

    batch_size: int = 64
    train_batches: int = 500
    val_batches: int = 200
    workers: int = 8
    queue_capacity: int = 20
    seed: int = 0
    flip_horizontal: bool = True
    flip_vertical: bool = True
    rotate90: bool = True
    hsv_shift: bool = True
    hsv_range: int = 20
    brightness: bool = True
    brightness_range: tuple[float, float] = (0.8, 1.2)

    def __post_init__(self):
        if self.batch_size < 1:
            raise InvalidInput(f"batch_size must be >= 1, got {self.batch_size}")
        if self.queue_capacity < 1:
            raise InvalidInput(f"queue_capacity must be >= 1, got {self.queue_capacity}")
        if self.workers < 1:
            raise InvalidInput(f"workers must be >= 1, got {self.workers}")

    def augmentation_disabled(self) -> "BatchSpec":
        import dataclasses
        return dataclasses.replace(
            self, flip_horizontal=False, flip_vertical=False, rotate90=False,
            hsv_shift=False, brightness=False)


@dataclass
class SampleTree:
    """grade -> slide -> class label -> patch records, empty branches pruned."""

    grades: list[int] = field(default_factory=list)
    slides_by_grade: dict[int, list[str]] = field(default_factory=dict)
    records: dict[str, dict[PatchLabel, list[PatchRecord]]] = field(default_factory=dict)

    def record_count(self) -> int:
        return sum(len(patches) for by_label in self.records.values()
                   for patches in by_label.values())

    def labels_for(self, slide_id: str) -> list[PatchLabel]:
        return sorted(self.records[slide_id].keys())


def build_tree(manifest: SlideManifest, indices: dict[str, PatchIndex],
               split: str) -> SampleTree:
    """Assemble the sampling tree for one split; prunes empty branches."""
    tree = SampleTree()
    for entry in manifest.for_split(split):
        if entry.slide_id not in indices:
            raise InvalidInput(f"no patch index for slide {entry.slide_id!r}")
        index = indices[entry.slide_id]
        by_label: dict[PatchLabel, list[PatchRecord]] = {}
        for record in index.records:
            by_label.setdefault(record.label, []).append(record)
        if not by_label:
            continue
        tree.records[entry.slide_id] = by_label
        tree.slides_by_grade.setdefault(entry.grade, []).append(entry.slide_id)
    tree.grades = sorted(tree.slides_by_grade.keys())
    if not tree.grades:
        raise EmptyPopulation(f"split {split!r} has no surviving patch records")
    return tree


def sample_record(tree: SampleTree, rng: np.random.Generator) -> PatchRecord:
    """One uniform draw at each stage: grade, slide, class, patch."""
    grade = tree.grades[rng.integers(0, len(tree.grades))]
    slides = tree.slides_by_grade[grade]
    slide_id = slides[rng.integers(0, len(slides))]
    labels = tree.labels_for(slide_id)
    label = labels[rng.integers(0, len(labels))]
    patches = tree.records[slide_id][label]
    return patches[rng.integers(0, len(patches))]


def shift_hsv(patch: np.ndarray, shifts: tuple[int, int, int]) -> np.ndarray:
    """Add integer shifts to the H/S/V channels on the 0-255 scale, clamped."""
    hue, saturation, value = rgb_to_hsv_image(patch)
    h8 = np.clip(hue / 360.0 * 255.0 + shifts[0], 0, 255)
    s8 = np.clip(saturation * 255.0 + shifts[1], 0, 255)
    v8 = np.clip(value * 255.0 + shifts[2], 0, 255)
    return hsv_to_rgb_image(h8 / 255.0 * 360.0, s8 / 255.0, v8 / 255.0)


def scale_brightness(patch: np.ndarray, factor: float) -> np.ndarray:
    """Multiplicative brightness, rounded and clamped to uint8."""
    return np.clip(np.floor(patch.astype(np.float64) * factor + 0.5),
                   0, 255).astype(np.uint8)


def augment(patch: np.ndarray, rng: np.random.Generator,
            spec: BatchSpec) -> np.ndarray:
    """Apply each enabled transform independently with probability 0.5."""
    arr = np.asarray(patch)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InvalidInput(f"expected an (h, w, 3) patch, got shape {arr.shape}")
    if spec.flip_horizontal and rng.random() < 0.5:
        arr = arr[:, ::-1]
    if spec.flip_vertical and rng.random() < 0.5:
        arr = arr[::-1]
    if spec.rotate90 and rng.random() < 0.5:
        arr = np.rot90(arr, k=int(rng.integers(1, 4)))
    if spec.hsv_shift and rng.random() < 0.5:
        shifts = tuple(int(v) for v in
                       rng.integers(-spec.hsv_range, spec.hsv_range + 1, size=3))
        arr = shift_hsv(arr, shifts)
    if spec.brightness and rng.random() < 0.5:
        factor = rng.uniform(*spec.brightness_range)
        arr = scale_brightness(arr, factor)
    return np.ascontiguousarray(arr)


def one_hot(label: PatchLabel) -> np.ndarray:
    row = np.zeros(CLASS_COUNT)
    row[int(label)] = 1.0
    return row


class BatchStream:
    """Producer/consumer batch generator over a sampling tree.

    Each worker owns an RNG spawned from the base seed, assembles whole
    batches, and pushes them into a bounded queue. With one worker and a
    fixed seed the stream is deterministic; with several, batch ordering
    depends on scheduling. Iteration yields exactly ``batches_per_epoch``
    batches per epoch and reports epoch boundaries on stderr.
    """

    def __init__(self, tree: SampleTree, pyramids: dict[str, PyramidImage],
                 spec: BatchSpec, *, batches_per_epoch: int,
                 patch_size: int, epochs: int | None = None,
                 cluster_model: cluster_mod.ClusterModel | None = None,
                 feature_source=None, stream_id: int = 0, quiet: bool = False):
        for slide_id in tree.records:
            if slide_id not in pyramids:
                raise InvalidInput(f"no pyramid loaded for slide {slide_id!r}")
        self.tree = tree
        self.pyramids = pyramids
        self.spec = spec
        self.batches_per_epoch = batches_per_epoch
        self.patch_size = patch_size
        self.epochs = epochs
        self.cluster_model = cluster_model
        self.feature_source = feature_source
        self.quiet = quiet
        self._queue: queue.Queue = queue.Queue(maxsize=spec.queue_capacity)
        self._stop = threading.Event()
        self._record_positions: dict[str, dict[tuple[int, int], int]] | None = None
        if feature_source is not None:
            self._record_positions = {}
            for slide_id, by_label in tree.records.items():
                merged = sorted((r for patches in by_label.values() for r in patches),
                                key=lambda r: (r.y, r.x))
                self._record_positions[slide_id] = {
                    (r.x, r.y): i for i, r in enumerate(merged)}
        seeds = np.random.SeedSequence([spec.seed, stream_id]).spawn(spec.workers)
        self._workers = [
            threading.Thread(target=self._produce, args=(np.random.default_rng(s),),
                             daemon=True)
            for s in seeds
        ]
        self.max_pending_seen = 0
        self._started = False

    def _sample_features(self, rng: np.random.Generator) -> tuple[np.ndarray, PatchRecord]:
        record = sample_record(self.tree, rng)
        pyramid = self.pyramids[record.slide_id]
        patch = pyramid.read_region(record.level, record.x, record.y,
                                    self.patch_size, self.patch_size)
        patch = augment(patch, rng, self.spec)
        if self.feature_source is not None:
            position = self._record_positions[record.slide_id][(record.x, record.y)]
            features = self.feature_source.vector(record.slide_id, position)
        else:
            features = cluster_mod.extract_features(patch)
        return features, record

    def _produce(self, rng: np.random.Generator) -> None:
        spec = self.spec
        try:
            while not self._stop.is_set():
                labels = np.zeros((spec.batch_size, CLASS_COUNT))
                clusters = np.full(spec.batch_size, -1, dtype=np.int64)
                rows = []
                for i in range(spec.batch_size):
                    features, record = self._sample_features(rng)
                    rows.append(features)
                    labels[i] = one_hot(record.label)
                    if self.cluster_model is not None:
                        clusters[i] = cluster_mod.assign(self.cluster_model, features)
                batch = LabeledBatch(np.vstack(rows), labels, clusters)
                self._put(("batch", batch))
        except Exception as exc:  # propagate to the consumer
            self._put(("error", exc), force=True)

    def _put(self, item, force: bool = False) -> None:
        while not self._stop.is_set():
            try:
                self._queue.put(item, timeout=0.05)
                self.max_pending_seen = max(self.max_pending_seen, self._queue.qsize())
                return
            except queue.Full:
                if force:
                    try:
                        self._queue.get_nowait()
                    except queue.Empty:
                        pass

    def __iter__(self):
        if not self._started:
            self._started = True
            for w in self._workers:
                w.start()
        epoch = 0
        produced = 0
        try:
            while self.epochs is None or epoch < self.epochs:
                kind, payload = self._queue.get()
                if kind == "error":
                    raise StreamIOError(f"batch worker failed: {payload}") from payload
                yield payload
                produced += 1
                if produced % self.batches_per_epoch == 0:
                    epoch += 1
                    if not self.quiet:
                        print(f"epoch {epoch} done", file=sys.stderr)
        finally:
            self.close()

    def close(self) -> None:
        """Stop the workers and drain the queue."""
        self._stop.set()
        while True:
            try:
                self._queue.get_nowait()
            except queue.Empty:
                break
        for w in self._workers:
            if w.is_alive():
                w.join(timeout=5.0)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False
