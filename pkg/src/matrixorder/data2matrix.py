"""Casting images, series and token sequences into matrix/vector form, plus file loaders."""
from __future__ import annotations

import csv
import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class FormatError(ValueError):
    """Malformed input file."""


@dataclass(frozen=True, eq=False)
class ImageGrid:
    """``pixels`` has shape (channels, height, width)."""

    height: int
    width: int
    channels: int
    pixels: np.ndarray

    def __post_init__(self):
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")
        px = np.asarray(self.pixels, dtype=np.float64).reshape(self.channels, self.height, self.width)
        if not np.all(np.isfinite(px)):
            raise ValueError("pixel values must be finite")
        object.__setattr__(self, "pixels", px)

    @classmethod
    def gray(cls, pixels) -> "ImageGrid":
        px = np.asarray(pixels, dtype=np.float64)
        return cls(px.shape[0], px.shape[1], 1, px[None])


@dataclass(frozen=True, eq=False)
class SeriesMatrix:
    """Row t is the observation at time t."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2:
            raise ValueError(f"series must be 2-D, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("series values must be finite")
        object.__setattr__(self, "values", v)

    @property
    def t_steps(self) -> int:
        return self.values.shape[0]

    @property
    def features(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True, eq=False)
class TokenEmbedMatrix:
    """Row k is the embedding of token k; shape (seq_len, dim)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or not np.all(np.isfinite(v)):
            raise ValueError("token embeddings must be a finite 2-D array")
        object.__setattr__(self, "values", v)

    @property
    def seq_len(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


def flatten_image(img: ImageGrid, channel: int = 0) -> np.ndarray:
    """Row-major flattening: pixel (u, v) lands at ``u * width + v``."""
    if not 0 <= channel < img.channels:
        raise IndexError(f"channel {channel} out of range for {img.channels} channel(s)")
    return img.pixels[channel].reshape(-1).copy()


def unflatten_image(vec, height: int, width: int) -> ImageGrid:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.size != height * width:
        raise ValueError(f"vector of length {vec.size} cannot form a {height}x{width} image")
    return ImageGrid.gray(vec.reshape(height, width))


def pad_image(img: ImageGrid, pad: int) -> ImageGrid:
    """Zero-pad every channel by ``pad`` on all four sides."""
    px = np.pad(img.pixels, ((0, 0), (pad, pad), (pad, pad)))
    return ImageGrid(img.height + 2 * pad, img.width + 2 * pad, img.channels, px)


# --- IDX ----------------------------------------------------------------------

def _read_header(buf: bytes, path, magic: int, ndims: int) -> tuple[int, ...]:
    need = 4 * (1 + ndims)
    if len(buf) < need:
        raise FormatError(f"{path}: truncated header at byte offset {len(buf)} (need {need} bytes)")
    got = struct.unpack(">I", buf[:4])[0]
    if got != magic:
        raise FormatError(f"{path}: bad magic 0x{got:08x} at byte offset 0, expected 0x{magic:08x}")
    return struct.unpack(f">{ndims}I", buf[4:need])


def load_idx_images(path: str | Path) -> list[ImageGrid]:
    """Read an IDX3 image file; pixel bytes are scaled to [0, 1]."""
    return [ImageGrid.gray(a) for a in load_idx_image_array(path)]


def load_idx_image_array(path: str | Path) -> np.ndarray:
    """Same as :func:`load_idx_images` but returns one (count, rows, cols) array."""
    buf = Path(path).read_bytes()
    count, rows, cols = _read_header(buf, path, IDX_IMAGES_MAGIC, 3)
    need = 16 + count * rows * cols
    if len(buf) < need:
        raise FormatError(f"{path}: truncated pixel data at byte offset {len(buf)} (need {need} bytes)")
    raw = np.frombuffer(buf, dtype=np.uint8, count=count * rows * cols, offset=16)
    return raw.reshape(count, rows, cols).astype(np.float64) / 255.0


def load_idx_labels(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (count,) = _read_header(buf, path, IDX_LABELS_MAGIC, 1)
    if len(buf) < 8 + count:
        raise FormatError(f"{path}: truncated label data at byte offset {len(buf)} (need {8 + count} bytes)")
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=8).astype(np.int64)


def write_idx_images(path: str | Path, images: np.ndarray) -> None:
    """Write uint8 images of shape (count, rows, cols)."""
    images = np.asarray(images, dtype=np.uint8)
    header = struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape)
    Path(path).write_bytes(header + images.tobytes())


def write_idx_labels(path: str | Path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, labels.size) + labels.tobytes())


# --- CSV ----------------------------------------------------------------------

def load_series_csv(path: str | Path, header: bool = False) -> SeriesMatrix:
    """Numeric CSV, one row per time step. LF and CRLF both accepted."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if header:
        rows = rows[1:]
    if not rows:
        raise FormatError(f"{path}: no data rows")
    width = len(rows[0])
    values = np.empty((len(rows), width))
    for i, row in enumerate(rows):
        if len(row) != width:
            raise FormatError(f"{path}: row {i} has {len(row)} columns, expected {width}")
        for j, cell in enumerate(row):
            try:
                values[i, j] = float(cell)
            except ValueError:
                raise FormatError(f"{path}: non-numeric cell {cell!r} at row {i}, column {j}") from None
    return SeriesMatrix(values)


# --- tokens and windows -------------------------------------------------------

def _token_row(token: int, dim: int, seed: int) -> np.ndarray:
    digest = hashlib.sha256(f"{seed}:{token}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    return rng.uniform(-0.1, 0.1, size=dim)


def embed_tokens(tokens: Sequence[int], dim: int, seed: int = 0) -> TokenEmbedMatrix:
    """Fixed random embedding; each row depends only on (seed, token id)."""
    if dim <= 0:
        raise ValueError("dim must be positive")
    cache: dict[int, np.ndarray] = {}
    rows = []
    for t in tokens:
        if t not in cache:
            cache[t] = _token_row(int(t), dim, seed)
        rows.append(cache[t])
    return TokenEmbedMatrix(np.array(rows).reshape(len(rows), dim))


def sliding_windows(s: SeriesMatrix, w: int, h: int) -> list[tuple[SeriesMatrix, np.ndarray]]:
    """Window i covers rows [i, i+w); its target is row i+w+h-1."""
    arr_x, arr_y = window_arrays(s, w, h)
    return [(SeriesMatrix(x), y) for x, y in zip(arr_x, arr_y)]


def window_arrays(s: SeriesMatrix, w: int, h: int) -> tuple[np.ndarray, np.ndarray]:
    """Stacked windows (count, w, features) and targets (count, features)."""
    if w < 1 or h < 1:
        raise ValueError("window and horizon must be positive")
    if s.t_steps < w + h:
        raise ValueError(f"series of length {s.t_steps} too short for window {w} and horizon {h}")
    count = s.t_steps - w - h + 1
    idx = np.arange(count)[:, None] + np.arange(w)[None, :]
    return s.values[idx], s.values[np.arange(count) + w + h - 1]
