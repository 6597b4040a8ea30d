"""Seeded synthetic slide generator.

Produces slides that look like H&E scans at arm's length: a white
background, pink tissue blobs with texture noise, and purple tumour blobs
nested inside the tissue. Tumour is colour-separable from tissue by design
so a small classifier can learn it. The paired truth mask is 255 exactly on
tumour pixels at level 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput
from .pyramid import PyramidImage, build_pyramid

TISSUE_BASE = np.array([231, 178, 197], dtype=np.int16)  # pale eosin pink
TUMOUR_BASE = np.array([148, 96, 164], dtype=np.int16)   # hematoxylin purple


@dataclass(frozen=True)
class SlideSpec:
    """Size and blob parameters for one synthetic slide."""

    width: int = 2048
    height: int = 2048
    tile_size: int = 256
    tissue_blobs: tuple[int, int] = (2, 4)
    tumour_blobs: tuple[int, int] = (1, 3)
    noise_amplitude: int = 14

    def validate(self) -> None:
        if self.width < 1024 or self.height < 1024:
            raise InvalidInput(
                f"slide must be at least 1024x1024, got {self.width}x{self.height}")


def _ellipse_mask(width: int, height: int, cx: float, cy: float,
                  rx: float, ry: float, angle: float) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width]
    dx = xs - cx
    dy = ys - cy
    cos_a, sin_a = np.cos(angle), np.sin(angle)
    u = dx * cos_a + dy * sin_a
    v = -dx * sin_a + dy * cos_a
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def generate_synthetic_slide(
    seed: int, spec: SlideSpec = SlideSpec()
) -> tuple[PyramidImage, PyramidImage, int]:
    """Deterministically render one slide.

    Returns ``(image, truth_mask, grade)`` where both pyramids share level
    dimensions and the grade is drawn uniformly from {1, 2, 3}.
    """
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x51_1DE]))
    grade = int(rng.integers(1, 4))
    w, h = spec.width, spec.height

    tissue = np.zeros((h, w), dtype=bool)
    blob_count = int(rng.integers(spec.tissue_blobs[0], spec.tissue_blobs[1] + 1))
    centers = []
    for _ in range(blob_count):
        cx = rng.uniform(0.22 * w, 0.78 * w)
        cy = rng.uniform(0.22 * h, 0.78 * h)
        rx = rng.uniform(0.16 * w, 0.30 * w)
        ry = rng.uniform(0.16 * h, 0.30 * h)
        angle = rng.uniform(0, np.pi)
        tissue |= _ellipse_mask(w, h, cx, cy, rx, ry, angle)
        centers.append((cx, cy, rx, ry))

    tumour = np.zeros((h, w), dtype=bool)
    tumour_count = int(rng.integers(spec.tumour_blobs[0], spec.tumour_blobs[1] + 1))
    for _ in range(tumour_count):
        cx, cy, rx, ry = centers[int(rng.integers(0, len(centers)))]
        # Offset stays well inside the parent so the blob lands on tissue.
        tx = cx + rng.uniform(-0.3, 0.3) * rx
        ty = cy + rng.uniform(-0.3, 0.3) * ry
        trx = rng.uniform(0.35, 0.60) * rx
        try_ = rng.uniform(0.35, 0.60) * ry
        angle = rng.uniform(0, np.pi)
        tumour |= _ellipse_mask(w, h, tx, ty, trx, try_, angle)
    tumour &= tissue

    image = np.full((h, w, 3), 255, dtype=np.int16)
    image[tissue] = TISSUE_BASE
    image[tumour] = TUMOUR_BASE
    stained = tissue | tumour
    amp = spec.noise_amplitude
    if amp > 0 and stained.any():
        noise = rng.integers(-amp, amp + 1, size=(h, w, 3), dtype=np.int16)
        image[stained] += noise[stained]
    image = np.clip(image, 0, 255).astype(np.uint8)

    truth = np.where(tumour, 255, 0).astype(np.uint8)
    return (
        build_pyramid(image, spec.tile_size),
        build_pyramid(truth, spec.tile_size),
        grade,
    )
