"""Patch classifier, cluster-guided loss, and the training loop.

The classifier is a small fully-connected network (input -> 100 ReLU ->
softmax) trained with Adam and gradient accumulation. The cluster-guided
loss averages the cross-entropy within each cluster present in the batch
and then macro-averages across clusters, so rare tissue types weigh as
much as common ones.
"""

from __future__ import annotations

import base64
import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import FormatError, InvalidInput, TrainingDiverged

PROB_CLIP = 1e-12
DEFAULT_HIDDEN = 100


@dataclass
class LabeledBatch:
    """One training batch: inputs, one-hot labels, and cluster ids.

    ``clusters`` entries are -1 when cluster guiding is off.
    """

    inputs: np.ndarray    # (B, D)
    labels: np.ndarray    # (B, C) one-hot
    clusters: np.ndarray  # (B,) int

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        self.clusters = np.asarray(self.clusters, dtype=np.int64)
        if self.inputs.shape[0] != self.labels.shape[0] or \
                self.inputs.shape[0] != self.clusters.shape[0]:
            raise InvalidInput("batch fields disagree on batch size")
        if not np.allclose(self.labels.sum(axis=1), 1.0):
            raise InvalidInput("labels must be one-hot")
        if (self.clusters < -1).any():
            raise InvalidInput("cluster ids must be >= -1")

    @property
    def batch_size(self) -> int:
        return self.inputs.shape[0]

    @property
    def class_count(self) -> int:
        return self.labels.shape[1]

    @property
    def cluster_count(self) -> int:
        """Distinct clusters present (only meaningful when all ids >= 0)."""
        return int(np.unique(self.clusters[self.clusters >= 0]).shape[0])


class PatchClassifier:
    """Two-layer network: D -> hidden (ReLU) -> C with softmax."""

    def __init__(self, input_dim: int, class_count: int = 2,
                 hidden: int = DEFAULT_HIDDEN, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.w1 = rng.normal(0.0, np.sqrt(2.0 / input_dim), (input_dim, hidden))
        self.b1 = np.zeros(hidden)
        self.w2 = rng.normal(0.0, np.sqrt(2.0 / hidden), (hidden, class_count))
        self.b2 = np.zeros(class_count)

    @property
    def input_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def class_count(self) -> int:
        return self.w2.shape[1]

    def parameters(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2]

    def set_parameters(self, params: list[np.ndarray]) -> None:
        self.w1, self.b1, self.w2, self.b2 = [np.array(p, dtype=np.float64)
                                              for p in params]


def forward(model: PatchClassifier, inputs: np.ndarray) -> np.ndarray:
    """Class probabilities, rows clipped into (0, 1) before any log."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 1:
        x = x[np.newaxis, :]
    if x.shape[1] != model.input_dim:
        raise InvalidInput(
            f"input dim {x.shape[1]} does not match model ({model.input_dim})")
    hidden = np.maximum(x @ model.w1 + model.b1, 0.0)
    logits = hidden @ model.w2 + model.b2
    logits -= logits.max(axis=1, keepdims=True)
    exp = np.exp(logits)
    probs = exp / exp.sum(axis=1, keepdims=True)
    return np.clip(probs, PROB_CLIP, 1.0 - PROB_CLIP)


def ce_loss(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean categorical cross-entropy over the batch."""
    p = np.clip(np.asarray(probs, dtype=np.float64), PROB_CLIP, 1.0 - PROB_CLIP)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise InvalidInput(f"shape mismatch: probs {p.shape} vs labels {y.shape}")
    return float(-(y * np.log(p)).sum(axis=1).mean())


def cwce_loss(probs: np.ndarray, labels: np.ndarray, clusters: np.ndarray,
              cluster_count: int | None = None, *, equation_form: bool = False) -> float:
    """Cluster-weighted cross-entropy.

    Default: mean cross-entropy within each present cluster, macro-averaged
    across clusters. ``equation_form=True`` skips the per-cluster mean and
    divides the plain per-cluster sums by the cluster count instead.
    """
    p = np.clip(np.asarray(probs, dtype=np.float64), PROB_CLIP, 1.0 - PROB_CLIP)
    y = np.asarray(labels, dtype=np.float64)
    q = np.asarray(clusters, dtype=np.int64)
    if (q < 0).any():
        raise InvalidInput("every sample needs a cluster id >= 0")
    present = np.unique(q)
    if present.shape[0] == 0:
        raise InvalidInput("batch contains no clusters")
    if cluster_count is not None and cluster_count != present.shape[0]:
        raise InvalidInput(
            f"cluster_count {cluster_count} does not match {present.shape[0]} present")
    per_sample = -(y * np.log(p)).sum(axis=1)
    if equation_form:
        return float(per_sample.sum() / present.shape[0])
    per_cluster = [per_sample[q == k].mean() for k in present]
    return float(np.mean(per_cluster))


@dataclass
class Gradients:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def as_list(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2]


def _sample_weights(batch: LabeledBatch, loss: str, equation_form: bool) -> np.ndarray:
    if loss == "ce":
        return np.full(batch.batch_size, 1.0 / batch.batch_size)
    if loss != "cwce":
        raise InvalidInput(f"unknown loss {loss!r}")
    q = batch.clusters
    if (q < 0).any():
        raise InvalidInput("cwce requires cluster ids on every sample")
    present = np.unique(q)
    weights = np.empty(batch.batch_size)
    for k in present:
        members = q == k
        if equation_form:
            weights[members] = 1.0 / present.shape[0]
        else:
            weights[members] = 1.0 / (present.shape[0] * members.sum())
    return weights


def batch_loss(model: PatchClassifier, batch: LabeledBatch, loss: str = "ce",
               *, equation_form: bool = False) -> float:
    probs = forward(model, batch.inputs)
    if loss == "ce":
        return ce_loss(probs, batch.labels)
    return cwce_loss(probs, batch.labels, batch.clusters, equation_form=equation_form)


def gradients(model: PatchClassifier, batch: LabeledBatch, loss: str = "ce",
              *, equation_form: bool = False) -> Gradients:
    """Analytic gradients of the selected loss for the whole batch."""
    x = batch.inputs
    pre_hidden = x @ model.w1 + model.b1
    hidden = np.maximum(pre_hidden, 0.0)
    logits = hidden @ model.w2 + model.b2
    logits -= logits.max(axis=1, keepdims=True)
    exp = np.exp(logits)
    probs = exp / exp.sum(axis=1, keepdims=True)

    weights = _sample_weights(batch, loss, equation_form)
    dlogits = (probs - batch.labels) * weights[:, np.newaxis]
    dw2 = hidden.T @ dlogits
    db2 = dlogits.sum(axis=0)
    dhidden = (dlogits @ model.w2.T) * (pre_hidden > 0)
    dw1 = x.T @ dhidden
    db1 = dhidden.sum(axis=0)
    return Gradients(dw1, db1, dw2, db2)


class Adam:
    """Adam optimizer over a list of parameter arrays."""

    def __init__(self, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m: list[np.ndarray] | None = None
        self._v: list[np.ndarray] | None = None

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
        if self._m is None:
            self._m = [np.zeros_like(p) for p in params]
            self._v = [np.zeros_like(p) for p in params]
        self.step_count += 1
        t = self.step_count
        updated = []
        for p, g, m, v in zip(params, grads, self._m, self._v):
            m[:] = self.beta1 * m + (1 - self.beta1) * g
            v[:] = self.beta2 * v + (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            updated.append(p - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))
        return updated


@dataclass
class TrainingHistory:
    epochs: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    stopped_early: bool = False

    def append(self, epoch: int, train: float, val: float) -> None:
        self.epochs.append(epoch)
        self.train_loss.append(train)
        self.val_loss.append(val)


def train(model: PatchClassifier,
          train_batches: Iterator[LabeledBatch],
          val_batches: Iterator[LabeledBatch],
          *,
          batches_per_epoch: int,
          val_batches_per_epoch: int,
          epochs: int,
          lr: float = 1e-4,
          accumulation_steps: int = 6,
          patience: int = 10,
          loss: str = "cwce") -> TrainingHistory:
    """Train with gradient accumulation and early stopping.

    Parameters update once per ``accumulation_steps`` batches using the
    mean of the accumulated gradients (a trailing partial group at the end
    of an epoch still updates, with its own mean). Training stops when the
    validation loss has not improved for ``patience`` consecutive epochs;
    the best-validation parameters are restored.
    """
    if accumulation_steps < 1:
        raise InvalidInput(f"accumulation_steps must be >= 1, got {accumulation_steps}")
    optimizer = Adam(lr=lr)
    history = TrainingHistory()
    best_val = np.inf
    best_params = [p.copy() for p in model.parameters()]
    stale_epochs = 0

    for epoch in range(1, epochs + 1):
        epoch_losses = []
        accumulated: list[np.ndarray] | None = None
        group = 0

        def flush():
            nonlocal accumulated, group
            if accumulated is None:
                return
            mean_grads = [g / group for g in accumulated]
            model.set_parameters(optimizer.step(model.parameters(), mean_grads))
            accumulated = None
            group = 0

        for _ in range(batches_per_epoch):
            batch = next(train_batches, None)
            if batch is None:
                break
            epoch_losses.append(batch_loss(model, batch, loss))
            grads = gradients(model, batch, loss).as_list()
            if accumulated is None:
                accumulated = grads
            else:
                accumulated = [a + g for a, g in zip(accumulated, grads)]
            group += 1
            if group == accumulation_steps:
                flush()
        flush()
        if not epoch_losses:
            break

        val_losses = []
        for _ in range(val_batches_per_epoch):
            batch = next(val_batches, None)
            if batch is None:
                break
            val_losses.append(batch_loss(model, batch, loss))
        train_loss = float(np.mean(epoch_losses))
        val_loss = float(np.mean(val_losses)) if val_losses else train_loss
        if not np.isfinite(train_loss) or not np.isfinite(val_loss):
            raise TrainingDiverged("non-finite loss", epoch=epoch)
        history.append(epoch, train_loss, val_loss)

        if val_loss < best_val:
            best_val = val_loss
            best_params = [p.copy() for p in model.parameters()]
            stale_epochs = 0
        else:
            stale_epochs += 1
            if stale_epochs >= patience:
                history.stopped_early = True
                break

    model.set_parameters(best_params)
    return history


def _encode(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii")


def _decode(text: str, shape: tuple[int, ...]) -> np.ndarray:
    raw = base64.b64decode(text)
    expected = int(np.prod(shape)) * 8
    if len(raw) != expected:
        raise FormatError(f"parameter payload is {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).copy()


def save_classifier(model: PatchClassifier, path: str | Path, *,
                    loss: str = "cwce", seed: int = 0) -> None:
    doc = {
        "input_dim": model.input_dim,
        "hidden_dim": model.hidden_dim,
        "class_count": model.class_count,
        "loss": loss,
        "seed": seed,
        "params": {
            "w1": _encode(model.w1),
            "b1": _encode(model.b1),
            "w2": _encode(model.w2),
            "b2": _encode(model.b2),
        },
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_classifier(path: str | Path) -> tuple[PatchClassifier, dict]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"checkpoint is not valid JSON: {exc}") from exc
    try:
        d, h, c = int(doc["input_dim"]), int(doc["hidden_dim"]), int(doc["class_count"])
        model = PatchClassifier(d, c, hidden=h)
        model.set_parameters([
            _decode(doc["params"]["w1"], (d, h)),
            _decode(doc["params"]["b1"], (h,)),
            _decode(doc["params"]["w2"], (h, c)),
            _decode(doc["params"]["b2"], (c,)),
        ])
    except KeyError as exc:
        raise FormatError(f"checkpoint missing field {exc}") from exc
    return model, {"loss": doc.get("loss", "ce"), "seed": doc.get("seed", 0)}


def save_history(history: TrainingHistory, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss"])
        for e, t, v in zip(history.epochs, history.train_loss, history.val_loss):
            writer.writerow([e, repr(t), repr(v)])
