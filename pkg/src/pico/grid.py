"""2-D numeric grids and the statistical kernels shared by the whole pipeline.

A ``Grid2D`` carries segmentation logits, probability masks, or per-token
attention maps, tagged with a role so range invariants can be enforced at
construction time. All kernels are pure functions on immutable grids; math
runs in float64, the on-disk PGRD format stores float32.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

ROLE_LOGIT = "logit"
ROLE_PROBABILITY = "probability"
ROLE_ATTENTION = "attention"

_ROLE_TAGS = {ROLE_LOGIT: 0, ROLE_PROBABILITY: 1, ROLE_ATTENTION: 2}
_TAG_ROLES = {tag: role for role, tag in _ROLE_TAGS.items()}

PGRD_MAGIC = b"PGRD"
PGRD_HEADER = struct.Struct("<4sIII")


class GridError(ValueError):
    """Raised for malformed grids or invalid kernel arguments."""


@dataclass(frozen=True)
class Grid2D:
    """Immutable H x W grid of finite reals with a role tag.

    Role "probability" constrains cells to [0, 1]; "attention" to >= 0;
    "logit" is unconstrained.
    """

    values: np.ndarray
    role: str = ROLE_LOGIT

    def __post_init__(self) -> None:
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 2 or arr.size == 0:
            raise GridError("empty input: grid must be a non-empty 2-D array")
        if not np.all(np.isfinite(arr)):
            raise GridError("grid cells must be finite")
        if self.role not in _ROLE_TAGS:
            raise GridError(f"unknown grid role {self.role!r}")
        if self.role == ROLE_PROBABILITY and (arr.min() < 0.0 or arr.max() > 1.0):
            raise GridError("probability grid cells must lie in [0, 1]")
        if self.role == ROLE_ATTENTION and arr.min() < 0.0:
            raise GridError("attention grid cells must be non-negative")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def percentile(g: Grid2D, q: float) -> float:
    """Nearest-rank percentile: the 1-based ceil(q/100 * n)-th smallest cell."""
    if not 0.0 < q <= 100.0:
        raise GridError("percentile rank must lie in (0, 100]")
    flat = np.sort(g.values, axis=None)
    k = max(1, math.ceil(q * flat.size / 100.0))
    return float(flat[k - 1])


def coord_dispersion(g: Grid2D, threshold: float) -> tuple[float, float, float]:
    """Spread of cells strictly above ``threshold``.

    Returns (sigma_x, sigma_y, sigma_x * sigma_y) where the sigmas are
    population standard deviations of the column (x) and row (y) indices
    of qualifying cells. Zero or one qualifying cell gives (0, 0, 0).
    """
    ys, xs = np.nonzero(g.values > threshold)
    if xs.size <= 1:
        return (0.0, 0.0, 0.0)
    sigma_x = float(np.std(xs.astype(np.float64)))
    sigma_y = float(np.std(ys.astype(np.float64)))
    return (sigma_x, sigma_y, sigma_x * sigma_y)


def bilinear_resample(values: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Bilinear resampling of a 2-D array using the pixel-center convention."""
    if target_h <= 0 or target_w <= 0:
        raise GridError("resample target dimensions must be positive")
    src = np.asarray(values, dtype=np.float64)
    h, w = src.shape
    if (target_h, target_w) == (h, w):
        return src.copy()
    ys = (np.arange(target_h, dtype=np.float64) + 0.5) * (h / target_h) - 0.5
    xs = (np.arange(target_w, dtype=np.float64) + 0.5) * (w / target_w) - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(np.int64)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    top = src[np.ix_(y0, x0)] * (1.0 - fx) + src[np.ix_(y0, x1)] * fx
    bottom = src[np.ix_(y1, x0)] * (1.0 - fx) + src[np.ix_(y1, x1)] * fx
    return top * (1.0 - fy) + bottom * fy


def resample(g: Grid2D, target_h: int, target_w: int) -> Grid2D:
    """Bilinear resize to exactly (target_h, target_w), preserving value bounds."""
    return Grid2D(bilinear_resample(g.values, target_h, target_w), g.role)


def sigmoid(g: Grid2D) -> Grid2D:
    """Logistic map of a logit grid into (0, 1)."""
    out = 1.0 / (1.0 + np.exp(-g.values))
    return Grid2D(out, ROLE_PROBABILITY)


def complement(g: Grid2D) -> Grid2D:
    """1 - g for probability grids."""
    if g.role != ROLE_PROBABILITY:
        raise GridError("complement is defined for probability grids")
    return Grid2D(1.0 - g.values, ROLE_PROBABILITY)


def multiply(a: Grid2D, b: Grid2D, role: str | None = None) -> Grid2D:
    """Cellwise product of two equal-shape grids."""
    if a.shape != b.shape:
        raise GridError(f"shape mismatch: {a.shape} vs {b.shape}")
    return Grid2D(a.values * b.values, role if role is not None else a.role)


def scale(g: Grid2D, factor: float, role: str = ROLE_LOGIT) -> Grid2D:
    """Scalar multiple of a grid. The result is role-tagged by the caller."""
    return Grid2D(g.values * float(factor), role)


def pgrd_bytes(g: Grid2D) -> bytes:
    """Serialize to the PGRD wire/file format (float32 little-endian, row-major)."""
    header = PGRD_HEADER.pack(PGRD_MAGIC, g.height, g.width, _ROLE_TAGS[g.role])
    return header + g.values.astype("<f4").tobytes()


def grid_from_pgrd(data: bytes) -> Grid2D:
    """Parse a PGRD byte string back into a grid."""
    if len(data) < PGRD_HEADER.size:
        raise GridError("truncated PGRD header")
    magic, height, width, tag = PGRD_HEADER.unpack_from(data)
    if magic != PGRD_MAGIC:
        raise GridError("bad PGRD magic")
    if tag not in _TAG_ROLES:
        raise GridError(f"unknown PGRD role tag {tag}")
    expected = PGRD_HEADER.size + 4 * height * width
    if len(data) != expected:
        raise GridError(f"PGRD payload size mismatch: {len(data)} != {expected}")
    values = np.frombuffer(data, dtype="<f4", offset=PGRD_HEADER.size)
    return Grid2D(values.reshape(height, width), _TAG_ROLES[tag])


def write_pgrd(g: Grid2D, path: str | Path) -> None:
    Path(path).write_bytes(pgrd_bytes(g))


def read_pgrd(path: str | Path) -> Grid2D:
    return grid_from_pgrd(Path(path).read_bytes())


def write_pgm(g: Grid2D, path: str | Path) -> None:
    """8-bit PGM preview: cells clamped to [0, 1] and scaled by 255."""
    clamped = np.clip(g.values, 0.0, 1.0)
    pixels = np.rint(clamped * 255.0).astype(np.uint8)
    header = f"P5\n{g.width} {g.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + pixels.tobytes())
