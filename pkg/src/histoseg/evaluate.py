"""Pixel metrics, per-grade aggregation, and the runtime benchmark."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .errors import InvalidInput


@dataclass(frozen=True)
class SlideScore:
    slide_id: str
    grade: int
    recall: float
    precision: float
    dsc: float


def score_masks(pred: np.ndarray, truth: np.ndarray) -> tuple[float, float, float]:
    """Pixel-wise (recall, precision, dice) between binary masks.

    Tumour-free conventions: empty truth with empty prediction scores 1.0
    on every metric; empty truth with a non-empty prediction keeps recall
    at 1.0 but zeroes precision and dice.
    """
    p = np.asarray(pred).astype(bool)
    t = np.asarray(truth).astype(bool)
    if p.shape != t.shape:
        raise InvalidInput(f"mask shapes differ: {p.shape} vs {t.shape}")
    tp = int((p & t).sum())
    fp = int((p & ~t).sum())
    fn = int((~p & t).sum())
    if fn == 0 and tp == 0:  # empty truth
        if fp == 0:
            return 1.0, 1.0, 1.0
        return 1.0, 0.0, 0.0
    recall = tp / (tp + fn)
    precision = tp / (tp + fp) if tp + fp else 0.0
    dsc = 2 * tp / (2 * tp + fp + fn)
    return recall, precision, dsc


def score_slide(slide_id: str, grade: int, pred: np.ndarray,
                truth: np.ndarray) -> SlideScore:
    recall, precision, dsc = score_masks(pred, truth)
    return SlideScore(slide_id, grade, recall, precision, dsc)


@dataclass
class MetricSummary:
    mean: float
    std: float  # population
    count: int


@dataclass
class Report:
    """Macro metrics overall and per histological grade for one design."""

    design: str
    scores: list[SlideScore]
    overall: dict[str, MetricSummary] = field(default_factory=dict)
    per_grade: dict[int, dict[str, MetricSummary]] = field(default_factory=dict)


_METRICS = ("recall", "precision", "dsc")


def _summaries(scores: list[SlideScore]) -> dict[str, MetricSummary]:
    out = {}
    for metric in _METRICS:
        values = np.array([getattr(s, metric) for s in scores])
        out[metric] = MetricSummary(float(values.mean()), float(values.std()),
                                    len(scores))
    return out


def aggregate(scores: list[SlideScore], design: str = "") -> Report:
    """Mean and population std per metric, overall and grouped by grade."""
    if not scores:
        raise InvalidInput("cannot aggregate zero slide scores")
    ordered = sorted(scores, key=lambda s: s.slide_id)
    report = Report(design, ordered, _summaries(ordered))
    for grade in sorted({s.grade for s in ordered}):
        report.per_grade[grade] = _summaries([s for s in ordered if s.grade == grade])
    return report


def save_report_csv(report: Report, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slide_id", "grade", "recall", "precision", "dsc"])
        for s in report.scores:
            writer.writerow([s.slide_id, s.grade, repr(s.recall),
                             repr(s.precision), repr(s.dsc)])


def report_summary(reports: list[Report]) -> dict:
    """JSON-ready summary mirroring the per-design / per-grade tables."""
    doc: dict = {"designs": {}}
    for report in reports:
        entry: dict = {"slides": len(report.scores), "overall": {}, "per_grade": {}}
        for metric, s in report.overall.items():
            entry["overall"][metric] = {"mean": s.mean, "std": s.std}
        for grade, metrics in report.per_grade.items():
            entry["per_grade"][str(grade)] = {
                "count": metrics["dsc"].count,
                **{m: {"mean": s.mean, "std": s.std} for m, s in metrics.items()},
            }
        doc["designs"][report.design] = entry
    return doc


def save_report_json(reports: list[Report], path: str | Path) -> None:
    Path(path).write_text(json.dumps(report_summary(reports), indent=2,
                                     sort_keys=True) + "\n")


@dataclass
class StageTiming:
    mean: float
    std: float
    samples: list[float]


@dataclass
class BenchmarkResult:
    stages: dict[str, StageTiming]
    total: StageTiming
    repetitions: int

    def fraction(self, stage: str) -> float:
        return self.stages[stage].mean / self.total.mean


def benchmark(stages: Mapping[str, Callable[[], object]],
              repetitions: int = 10) -> BenchmarkResult:
    """Wall-clock each pipeline stage, excluding one warm-up run.

    Stages run in mapping order every repetition, so later stages may
    consume what earlier ones produce.
    """
    if repetitions < 1:
        raise InvalidInput(f"repetitions must be >= 1, got {repetitions}")
    names = list(stages.keys())
    samples: dict[str, list[float]] = {name: [] for name in names}
    for rep in range(repetitions + 1):
        for name in names:
            start = time.perf_counter()
            stages[name]()
            elapsed = time.perf_counter() - start
            if rep > 0:  # warm-up excluded
                samples[name].append(elapsed)

    timings = {}
    for name in names:
        values = np.array(samples[name])
        timings[name] = StageTiming(float(values.mean()), float(values.std()),
                                    samples[name])
    totals = np.sum([samples[name] for name in names], axis=0)
    total = StageTiming(float(totals.mean()), float(totals.std()), totals.tolist())
    return BenchmarkResult(timings, total, repetitions)
