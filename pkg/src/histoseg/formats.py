"""Portable float map (PFM) and PGM persistence for heatmaps and masks.

Heatmaps and probability maps are stored as grayscale little-endian PFM
(scale -1.0, scanlines bottom-to-top per the PFM convention); binary masks
as binary PGM (P5, maxval 255) with values 0 and 255.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FormatError


def save_pfm(values: np.ndarray, path: str | Path) -> None:
    arr = np.asarray(values, dtype=np.float32)
    if arr.ndim != 2 or arr.size == 0:
        raise FormatError(f"PFM payload must be a non-empty 2-d array, got {arr.shape}")
    height, width = arr.shape
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{width} {height}\n".encode("ascii"))
        fh.write(b"-1.0\n")
        fh.write(np.ascontiguousarray(arr[::-1]).tobytes())


def load_pfm(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    try:
        magic_end = blob.index(b"\n")
        dims_end = blob.index(b"\n", magic_end + 1)
        scale_end = blob.index(b"\n", dims_end + 1)
    except ValueError:
        raise FormatError(f"truncated PFM header in {path}", offset=len(blob)) from None
    if blob[:magic_end] != b"Pf":
        raise FormatError(f"bad PFM magic in {path}", offset=0)
    try:
        width, height = (int(v) for v in blob[magic_end + 1:dims_end].split())
    except ValueError:
        raise FormatError(f"bad PFM dimensions in {path}", offset=magic_end + 1) from None
    scale = float(blob[dims_end + 1:scale_end])
    if scale >= 0:
        raise FormatError(
            f"big-endian PFM not supported (scale {scale}) in {path}", offset=dims_end + 1)
    expected = width * height * 4
    payload = blob[scale_end + 1:]
    if len(payload) != expected:
        raise FormatError(
            f"PFM payload is {len(payload)} bytes, expected {expected} in {path}",
            offset=scale_end + 1)
    arr = np.frombuffer(payload, dtype="<f4").reshape(height, width)
    return arr[::-1].copy()


def save_pgm(mask: np.ndarray, path: str | Path) -> None:
    arr = np.asarray(mask)
    if arr.ndim != 2 or arr.size == 0:
        raise FormatError(f"PGM payload must be a non-empty 2-d array, got {arr.shape}")
    if arr.dtype == bool:
        arr = np.where(arr, 255, 0).astype(np.uint8)
    else:
        arr = arr.astype(np.uint8)
        if not np.isin(arr, (0, 255)).all():
            raise FormatError("binary PGM values must be 0 or 255")
    height, width = arr.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n")
        fh.write(f"{width} {height}\n".encode("ascii"))
        fh.write(b"255\n")
        fh.write(np.ascontiguousarray(arr).tobytes())


def load_pgm(path: str | Path) -> np.ndarray:
    """Load a binary mask; returns a boolean array (255 -> True)."""
    blob = Path(path).read_bytes()
    try:
        magic_end = blob.index(b"\n")
        dims_end = blob.index(b"\n", magic_end + 1)
        maxval_end = blob.index(b"\n", dims_end + 1)
    except ValueError:
        raise FormatError(f"truncated PGM header in {path}", offset=len(blob)) from None
    if blob[:magic_end] != b"P5":
        raise FormatError(f"bad PGM magic in {path}", offset=0)
    try:
        width, height = (int(v) for v in blob[magic_end + 1:dims_end].split())
    except ValueError:
        raise FormatError(f"bad PGM dimensions in {path}", offset=magic_end + 1) from None
    if blob[dims_end + 1:maxval_end] != b"255":
        raise FormatError(f"PGM maxval must be 255 in {path}", offset=dims_end + 1)
    payload = blob[maxval_end + 1:]
    if len(payload) != width * height:
        raise FormatError(
            f"PGM payload is {len(payload)} bytes, expected {width * height} in {path}",
            offset=maxval_end + 1)
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    if not np.isin(arr, (0, 255)).all():
        raise FormatError(f"non-binary PGM values in {path}")
    return arr == 255
