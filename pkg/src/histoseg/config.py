"""Run configuration: one JSON file drives every pipeline stage.

Defaults encode the reference training settings (learning rate 1e-4 for
the patch model and 1e-3 for the refiner, 500/200 batches of 64, eight
workers, queue capacity 20, six accumulation steps); the ``scale`` knob
shrinks batch counts proportionally for desk-scale runs.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import PipelineError
from .sampler import BatchSpec


class ConfigError(PipelineError):
    """A config value is missing, mistyped, or out of range."""

    def __init__(self, path: str, message: str):
        super().__init__(f"config field '{path}': {message}")
        self.path = path


DEFAULTS: dict = {
    "seed": 42,
    "workdir": ".",
    "manifest": "manifest.json",
    "patch_size": 256,
    "level": 0,
    "scale": 1.0,
    "generate": {
        "width": 2048,
        "height": 2048,
        "tile_size": 256,
        "tissue_blobs": [2, 4],
        "tumour_blobs": [1, 3],
        "noise_amplitude": 14,
    },
    "sampler": {
        "batch_size": 64,
        "train_batches": 500,
        "val_batches": 200,
        "workers": 8,
        "queue_capacity": 20,
        "flip_horizontal": True,
        "flip_vertical": True,
        "rotate90": True,
        "hsv_shift": True,
        "hsv_range": 20,
        "brightness": True,
        "brightness_range": [0.8, 1.2],
    },
    "cluster": {
        "variance_target": 0.95,
        "k": 10,
        "fit_batches": 100,
        "fit_batch_size": 32,
    },
    "train": {
        "lr": 1e-4,
        "epochs": 100,
        "accumulation": 6,
        "patience": 10,
        "loss": "cwce",
        "hidden": 100,
    },
    "refine": {
        "radius": 1,
        "lr": 1e-3,
        "steps": 800,
        "samples_per_image": 4000,
        "executor": None,
    },
    "eval": {
        "split": "test",
        "threshold": 0.5,
    },
}


def _merge(defaults: dict, override: dict, path: str = "") -> dict:
    merged = copy.deepcopy(defaults)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(here, "unknown field")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(here, f"expected an object, got {type(value).__name__}")
            merged[key] = _merge(defaults[key], value, here)
        else:
            merged[key] = value
    return merged


def _require(doc: dict, path: str, kind, *, low=None, high=None):
    node = doc
    for part in path.split("."):
        node = node[part]
    if kind is float and isinstance(node, int) and not isinstance(node, bool):
        node = float(node)
    if not isinstance(node, kind) or isinstance(node, bool) and kind is not bool:
        raise ConfigError(path, f"expected {kind.__name__}, got {type(node).__name__}")
    if low is not None and node < low:
        raise ConfigError(path, f"must be >= {low}, got {node}")
    if high is not None and node > high:
        raise ConfigError(path, f"must be <= {high}, got {node}")
    return node


@dataclass
class RunConfig:
    raw: dict

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    @property
    def workdir(self) -> Path:
        return Path(self.raw["workdir"])

    @property
    def manifest_path(self) -> Path:
        return self.workdir / self.raw["manifest"]

    @property
    def patch_size(self) -> int:
        return self.raw["patch_size"]

    @property
    def level(self) -> int:
        return self.raw["level"]

    @property
    def scale(self) -> float:
        return self.raw["scale"]

    def scaled(self, count: int) -> int:
        return max(1, round(count * self.scale))

    @property
    def generate(self) -> dict:
        return self.raw["generate"]

    @property
    def cluster(self) -> dict:
        return self.raw["cluster"]

    @property
    def train(self) -> dict:
        return self.raw["train"]

    @property
    def refine(self) -> dict:
        return self.raw["refine"]

    @property
    def eval(self) -> dict:
        return self.raw["eval"]

    def batch_spec(self, *, batch_size: int | None = None) -> BatchSpec:
        s = self.raw["sampler"]
        return BatchSpec(
            batch_size=batch_size if batch_size is not None else s["batch_size"],
            train_batches=self.scaled(s["train_batches"]),
            val_batches=self.scaled(s["val_batches"]),
            workers=s["workers"],
            queue_capacity=s["queue_capacity"],
            seed=self.seed,
            flip_horizontal=s["flip_horizontal"],
            flip_vertical=s["flip_vertical"],
            rotate90=s["rotate90"],
            hsv_shift=s["hsv_shift"],
            hsv_range=s["hsv_range"],
            brightness=s["brightness"],
            brightness_range=tuple(s["brightness_range"]),
        )

    def content_hash(self) -> str:
        canonical = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:12]


def _validate(doc: dict) -> None:
    _require(doc, "seed", int, low=0)
    _require(doc, "workdir", str)
    _require(doc, "manifest", str)
    _require(doc, "patch_size", int, low=16)
    _require(doc, "level", int, low=0)
    _require(doc, "scale", float, low=1e-9)
    _require(doc, "generate.width", int, low=1024)
    _require(doc, "generate.height", int, low=1024)
    _require(doc, "generate.tile_size", int, low=16)
    _require(doc, "generate.noise_amplitude", int, low=0)
    for key in ("generate.tissue_blobs", "generate.tumour_blobs"):
        pair = _require(doc, key, list)
        if len(pair) != 2 or not all(isinstance(v, int) for v in pair) \
                or pair[0] > pair[1] or pair[0] < 0:
            raise ConfigError(key, f"expected a non-decreasing [lo, hi] int pair, got {pair}")
    _require(doc, "sampler.batch_size", int, low=1)
    _require(doc, "sampler.train_batches", int, low=1)
    _require(doc, "sampler.val_batches", int, low=1)
    _require(doc, "sampler.workers", int, low=1)
    _require(doc, "sampler.queue_capacity", int, low=1)
    _require(doc, "sampler.hsv_range", int, low=0)
    rng = _require(doc, "sampler.brightness_range", list)
    if len(rng) != 2 or rng[0] > rng[1]:
        raise ConfigError("sampler.brightness_range", f"expected [lo, hi], got {rng}")
    _require(doc, "cluster.variance_target", float, low=0.0, high=1.0)
    _require(doc, "cluster.k", int, low=2)
    _require(doc, "cluster.fit_batches", int, low=1)
    _require(doc, "cluster.fit_batch_size", int, low=1)
    _require(doc, "train.lr", float, low=0.0)
    _require(doc, "train.epochs", int, low=1)
    _require(doc, "train.accumulation", int, low=1)
    _require(doc, "train.patience", int, low=1)
    loss = _require(doc, "train.loss", str)
    if loss not in ("ce", "cwce"):
        raise ConfigError("train.loss", f"expected 'ce' or 'cwce', got {loss!r}")
    _require(doc, "train.hidden", int, low=1)
    _require(doc, "refine.radius", int, low=0)
    _require(doc, "refine.lr", float, low=0.0)
    _require(doc, "refine.steps", int, low=1)
    _require(doc, "refine.samples_per_image", int, low=2)
    executor = doc["refine"]["executor"]
    if executor is not None and (not isinstance(executor, list)
                                 or not all(isinstance(v, str) for v in executor)):
        raise ConfigError("refine.executor", "expected null or a list of strings")
    split = _require(doc, "eval.split", str)
    if split not in ("train", "validation", "test"):
        raise ConfigError("eval.split", f"unknown split {split!r}")
    _require(doc, "eval.threshold", float, low=0.0, high=1.0)


def load_config(path: str | Path | None = None, *,
                overrides: dict | None = None) -> RunConfig:
    """Merge the user file over defaults, apply overrides, validate."""
    doc = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError("(file)", f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError("(file)", f"not valid JSON: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError("(file)", "top level must be a JSON object")
        doc = _merge(doc, user)
    for key, value in (overrides or {}).items():
        node = doc
        parts = key.split(".")
        for part in parts[:-1]:
            node = node[part]
        node[parts[-1]] = value
    _validate(doc)
    return RunConfig(doc)
