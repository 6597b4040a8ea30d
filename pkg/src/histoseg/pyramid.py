"""Tiled multi-resolution raster storage and the HPYR single-file format.

A :class:`PyramidImage` holds one slide, mask, or heatmap as a stack of
levels where level ``L+1`` is the 2x2 box-average (round-half-up) of level
``L``. Pixels are stored as uint8 tiles so region reads never touch more
data than they need, and files round-trip bit-exactly.

HPYR layout (little-endian):

    magic "HPYR" (4B) | version u16 = 1 | channels u8 in {1,3} |
    reserved u8 = 0 | tile_size u32 | level_count u16 |
    per level: width u64, height u64 |
    per level, per tile (row-major): offset u64, byte_length u32 |
    data section: raw row-major channel-interleaved uint8 tile payloads

Tile offsets are relative to the start of the data section.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidInput

HPYR_MAGIC = b"HPYR"
HPYR_VERSION = 1
BACKGROUND_VALUE = 255  # slide background is white

_HEADER = struct.Struct("<4sHBBIH")
_LEVEL_DIMS = struct.Struct("<QQ")
_TILE_ENTRY = struct.Struct("<QI")


def _tile_counts(width: int, height: int, tile_size: int) -> tuple[int, int]:
    return math.ceil(width / tile_size), math.ceil(height / tile_size)


class PyramidImage:
    """Immutable tiled image pyramid.

    ``tiles[level][ty][tx]`` is a ``(th, tw, channels)`` uint8 array; every
    tile except those on the right/bottom border is exactly
    ``tile_size x tile_size``.
    """

    def __init__(self, levels: list[tuple[int, int]], channels: int,
                 tile_size: int, tiles: list[list[list[np.ndarray]]]):
        self.levels = [(int(w), int(h)) for w, h in levels]
        self.channels = int(channels)
        self.tile_size = int(tile_size)
        self._tiles = tiles
        for level_tiles in tiles:
            for row in level_tiles:
                for tile in row:
                    tile.setflags(write=False)

    @property
    def level_count(self) -> int:
        return len(self.levels)

    def level_dimensions(self, level: int) -> tuple[int, int]:
        self._check_level(level)
        return self.levels[level]

    def _check_level(self, level: int) -> None:
        if not 0 <= level < len(self.levels):
            raise InvalidInput(
                f"level {level} out of range [0, {len(self.levels) - 1}]")

    def read_region(self, level: int, x: int, y: int, w: int, h: int) -> np.ndarray:
        """Read a ``(h, w, channels)`` region; out-of-bounds pixels are white."""
        self._check_level(level)
        if w < 1 or h < 1:
            raise InvalidInput(f"region size must be >= 1, got {w}x{h}")
        width, height = self.levels[level]
        out = np.full((h, w, self.channels), BACKGROUND_VALUE, dtype=np.uint8)
        x0, y0 = max(x, 0), max(y, 0)
        x1, y1 = min(x + w, width), min(y + h, height)
        if x1 <= x0 or y1 <= y0:
            return out
        ts = self.tile_size
        rows = self._tiles[level]
        for ty in range(y0 // ts, (y1 + ts - 1) // ts):
            for tx in range(x0 // ts, (x1 + ts - 1) // ts):
                tile = rows[ty][tx]
                # Intersection of the tile with the requested window.
                ix0, iy0 = max(x0, tx * ts), max(y0, ty * ts)
                ix1 = min(x1, tx * ts + tile.shape[1])
                iy1 = min(y1, ty * ts + tile.shape[0])
                if ix1 <= ix0 or iy1 <= iy0:
                    continue
                out[iy0 - y:iy1 - y, ix0 - x:ix1 - x] = \
                    tile[iy0 - ty * ts:iy1 - ty * ts, ix0 - tx * ts:ix1 - tx * ts]
        return out

    def level_array(self, level: int) -> np.ndarray:
        """The full pixel array of one level, assembled from its tiles."""
        width, height = self.level_dimensions(level)
        return self.read_region(level, 0, 0, width, height)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PyramidImage):
            return NotImplemented
        if (self.levels != other.levels or self.channels != other.channels
                or self.tile_size != other.tile_size):
            return False
        for mine, theirs in zip(self._tiles, other._tiles):
            for row_a, row_b in zip(mine, theirs):
                for a, b in zip(row_a, row_b):
                    if a.shape != b.shape or not np.array_equal(a, b):
                        return False
        return True


def _as_pixels(raster: np.ndarray) -> np.ndarray:
    arr = np.asarray(raster)
    if arr.ndim == 2:
        arr = arr[:, :, np.newaxis]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise InvalidInput(f"expected (h, w) or (h, w, 1|3) raster, got shape {arr.shape}")
    if arr.size == 0:
        raise InvalidInput("empty raster")
    return np.ascontiguousarray(arr, dtype=np.uint8)


def _split_tiles(level: np.ndarray, tile_size: int) -> list[list[np.ndarray]]:
    height, width = level.shape[:2]
    tiles_x, tiles_y = _tile_counts(width, height, tile_size)
    return [
        [np.ascontiguousarray(
            level[ty * tile_size:min((ty + 1) * tile_size, height),
                  tx * tile_size:min((tx + 1) * tile_size, width)])
         for tx in range(tiles_x)]
        for ty in range(tiles_y)
    ]


def box_halve(level: np.ndarray) -> np.ndarray:
    """2x2 box-average with round-half-up; odd borders replicate the edge."""
    height, width = level.shape[:2]
    padded = np.pad(level, ((0, height % 2), (0, width % 2), (0, 0)), mode="edge")
    ph, pw = padded.shape[:2]
    blocks = padded.astype(np.uint32).reshape(ph // 2, 2, pw // 2, 2, level.shape[2])
    sums = blocks.sum(axis=(1, 3))
    return ((sums + 2) // 4).astype(np.uint8)


def build_pyramid(base: np.ndarray, tile_size: int = 256) -> PyramidImage:
    """Build a pyramid from a base raster.

    Coarser levels are appended until the largest dimension fits in a
    single tile.
    """
    if tile_size < 16:
        raise InvalidInput(f"tile_size must be >= 16, got {tile_size}")
    level = _as_pixels(base)
    levels = [level]
    while max(level.shape[0], level.shape[1]) > tile_size:
        level = box_halve(level)
        levels.append(level)
    dims = [(lv.shape[1], lv.shape[0]) for lv in levels]
    tiles = [_split_tiles(lv, tile_size) for lv in levels]
    return PyramidImage(dims, levels[0].shape[2], tile_size, tiles)


def from_level_arrays(arrays: list[np.ndarray], tile_size: int = 256) -> PyramidImage:
    """Assemble a pyramid from explicit per-level arrays (chain-validated)."""
    pixels = [_as_pixels(a) for a in arrays]
    dims = [(a.shape[1], a.shape[0]) for a in pixels]
    for i in range(1, len(dims)):
        expect = (math.ceil(dims[i - 1][0] / 2), math.ceil(dims[i - 1][1] / 2))
        if dims[i] != expect:
            raise InvalidInput(
                f"level {i} dims {dims[i]} violate the halving chain, expected {expect}")
    channels = pixels[0].shape[2]
    if any(a.shape[2] != channels for a in pixels):
        raise InvalidInput("all levels must share one channel count")
    return PyramidImage(dims, channels, tile_size, [_split_tiles(a, tile_size) for a in pixels])


def write_file(pyr: PyramidImage, path: str | Path) -> None:
    """Serialize a pyramid to an HPYR file."""
    entries = []
    payload = bytearray()
    for level_tiles in pyr._tiles:
        for row in level_tiles:
            for tile in row:
                data = tile.tobytes()
                entries.append((len(payload), len(data)))
                payload.extend(data)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(HPYR_MAGIC, HPYR_VERSION, pyr.channels, 0,
                              pyr.tile_size, pyr.level_count))
        for width, height in pyr.levels:
            fh.write(_LEVEL_DIMS.pack(width, height))
        for offset, length in entries:
            fh.write(_TILE_ENTRY.pack(offset, length))
        fh.write(payload)


def read_file(path: str | Path) -> PyramidImage:
    """Read an HPYR file, validating structure as it goes."""
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise FormatError("file shorter than the fixed header", offset=len(blob))
    magic, version, channels, reserved, tile_size, level_count = \
        _HEADER.unpack_from(blob, 0)
    if magic != HPYR_MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != HPYR_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if channels not in (1, 3):
        raise FormatError(f"channels must be 1 or 3, got {channels}", offset=6)
    if reserved != 0:
        raise FormatError(f"reserved byte must be 0, got {reserved}", offset=7)
    if tile_size < 16:
        raise FormatError(f"tile_size must be >= 16, got {tile_size}", offset=8)
    if level_count < 1:
        raise FormatError("level_count must be >= 1", offset=12)

    pos = _HEADER.size
    dims: list[tuple[int, int]] = []
    for i in range(level_count):
        if pos + _LEVEL_DIMS.size > len(blob):
            raise FormatError("truncated level dimension table", offset=pos)
        width, height = _LEVEL_DIMS.unpack_from(blob, pos)
        if width < 1 or height < 1:
            raise FormatError(f"level {i} has empty dimensions", offset=pos)
        dims.append((width, height))
        pos += _LEVEL_DIMS.size
    for i in range(1, level_count):
        expect = (math.ceil(dims[i - 1][0] / 2), math.ceil(dims[i - 1][1] / 2))
        if dims[i] != expect:
            raise FormatError(
                f"level {i} dims {dims[i]} violate the halving chain, expected {expect}",
                offset=_HEADER.size + i * _LEVEL_DIMS.size)

    counts = [_tile_counts(w, h, tile_size) for w, h in dims]
    total_tiles = sum(tx * ty for tx, ty in counts)
    table_end = pos + total_tiles * _TILE_ENTRY.size
    if table_end > len(blob):
        raise FormatError("truncated offset table", offset=len(blob))
    data_start = table_end
    data_size = len(blob) - data_start

    tiles: list[list[list[np.ndarray]]] = []
    for level, ((width, height), (tiles_x, tiles_y)) in enumerate(zip(dims, counts)):
        rows: list[list[np.ndarray]] = []
        for ty in range(tiles_y):
            row: list[np.ndarray] = []
            for tx in range(tiles_x):
                offset, length = _TILE_ENTRY.unpack_from(blob, pos)
                tw = min(tile_size, width - tx * tile_size)
                th = min(tile_size, height - ty * tile_size)
                expected = tw * th * channels
                if length != expected:
                    raise FormatError(
                        f"level {level} tile ({tx},{ty}) payload is {length} bytes,"
                        f" expected {expected}", offset=pos)
                if offset + length > data_size:
                    raise FormatError(
                        f"level {level} tile ({tx},{ty}) extends past end of file",
                        offset=pos)
                tile = np.frombuffer(
                    blob, dtype=np.uint8, count=length,
                    offset=data_start + offset).reshape(th, tw, channels)
                row.append(tile)
                pos += _TILE_ENTRY.size
            rows.append(row)
        tiles.append(rows)
    return PyramidImage(dims, channels, tile_size, tiles)


VALID_GRADES = (1, 2, 3)
VALID_SPLITS = ("train", "validation", "test")


@dataclass(frozen=True)
class ManifestEntry:
    slide_id: str
    image_path: Path
    mask_path: Path
    grade: int
    split: str


@dataclass
class SlideManifest:
    """Dataset index: one entry per slide with grade and split labels."""

    entries: list[ManifestEntry]

    def for_split(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]

    def by_id(self) -> dict[str, ManifestEntry]:
        return {e.slide_id: e for e in self.entries}


def save_manifest(manifest: SlideManifest, path: str | Path) -> None:
    """Write the manifest as JSON; stored paths are relative to the file."""
    base = Path(path).resolve().parent
    slides = []
    for e in manifest.entries:
        slides.append({
            "slide_id": e.slide_id,
            "image_path": _relativize(e.image_path, base),
            "mask_path": _relativize(e.mask_path, base),
            "grade": e.grade,
            "split": e.split,
        })
    Path(path).write_text(json.dumps({"slides": slides}, indent=2) + "\n")


def _relativize(p: Path, base: Path) -> str:
    try:
        return Path(p).resolve().relative_to(base).as_posix()
    except ValueError:
        return Path(p).resolve().as_posix()


def load_manifest(path: str | Path) -> SlideManifest:
    """Load and validate a manifest; every referenced path must exist."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or "slides" not in doc:
        raise FormatError("manifest must be an object with a 'slides' list")
    base = path.resolve().parent
    entries = []
    seen = set()
    for raw in doc["slides"]:
        slide_id = str(raw["slide_id"])
        if slide_id in seen:
            raise FormatError(f"duplicate slide_id {slide_id!r}")
        seen.add(slide_id)
        grade = int(raw["grade"])
        if grade not in VALID_GRADES:
            raise FormatError(f"slide {slide_id!r} has grade {grade}, expected 1-3")
        split = str(raw["split"])
        if split not in VALID_SPLITS:
            raise FormatError(f"slide {slide_id!r} has unknown split {split!r}")
        image_path = (base / raw["image_path"]).resolve()
        mask_path = (base / raw["mask_path"]).resolve()
        for p in (image_path, mask_path):
            if not p.exists():
                raise FormatError(f"slide {slide_id!r} references missing file {p}")
        entries.append(ManifestEntry(slide_id, image_path, mask_path, grade, split))
    return SlideManifest(entries)
