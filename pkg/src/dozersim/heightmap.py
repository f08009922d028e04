"""Height-map substrate: grids, Gaussian piles, difference maps and the
EGO field-of-view transform.

Grids are float64 numpy arrays treated as immutable; every operation returns
a new map (or reuses the input when untouched).  Serialization to the HMAP1
binary format casts to float32 -- the cast is the one lossy boundary in the
system, and readers get back exactly the bytes they wrote.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

HMAP_MAGIC = b"HMAP"
HMAP_VERSION = 1

# Gaussian piles are evaluated inside a +-6 sigma bounding box; outside it
# the contribution (< 2e-8 of peak) is dropped so far-apart piles commute
# bitwise.
PILE_BBOX_SIGMAS = 6.0


class GeometryMismatch(ValueError):
    pass


class InvalidDimension(ValueError):
    pass


@dataclass(frozen=True)
class HeightMap:
    rows: int
    cols: int
    cell_size: float
    heights: np.ndarray  # (rows, cols) float64, meters

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise InvalidDimension(f"grid must be at least 1x1, got {self.rows}x{self.cols}")
        if not self.cell_size > 0:
            raise InvalidDimension(f"cell_size must be positive, got {self.cell_size}")
        if self.heights.shape != (self.rows, self.cols):
            raise InvalidDimension("heights shape does not match rows/cols")
        if not np.all(np.isfinite(self.heights)):
            raise ValueError("heights must be finite")

    @property
    def cell_area(self) -> float:
        return self.cell_size * self.cell_size

    def total_volume(self) -> float:
        """Signed volume of the whole grid relative to zero, m^3."""
        return float(self.heights.sum()) * self.cell_area


@dataclass(frozen=True)
class DiffMap:
    rows: int
    cols: int
    cell_size: float
    values: np.ndarray  # (rows, cols) float64, meters, may be negative

    @property
    def cell_area(self) -> float:
        return self.cell_size * self.cell_size


@dataclass(frozen=True)
class GaussianPile:
    center: tuple[float, float]   # world meters (x, y)
    sigma: tuple[float, float]    # (sigma_x, sigma_y) meters
    peak_height: float            # meters
    rotation: float = 0.0         # radians

    def __post_init__(self):
        if self.sigma[0] <= 0 or self.sigma[1] <= 0:
            raise ValueError("sigma must be positive")
        if self.peak_height <= 0:
            raise ValueError("peak_height must be positive")

    def volume(self) -> float:
        """Closed-form volume of the unclipped pile, m^3."""
        return 2.0 * math.pi * self.sigma[0] * self.sigma[1] * self.peak_height


@dataclass(frozen=True)
class FovSpec:
    fov_rows: int
    fov_cols: int
    anchor: tuple[int, int]       # (row, col) pixel of the dozer in the FOV
    downsample_exponent: int

    def __post_init__(self):
        m, n = self.fov_rows, self.fov_cols
        ar, ac = self.anchor
        if m < 1 or n < 1:
            raise InvalidDimension("FOV must be at least 1x1")
        if not (0 <= ar < m and 0 <= ac < n):
            raise ValueError(f"anchor {self.anchor} outside FOV {m}x{n}")
        if self.downsample_exponent < 0:
            raise ValueError("downsample exponent must be >= 0")
        block = 1 << self.downsample_exponent
        if ar % block or ac % block:
            raise ValueError(
                f"anchor {self.anchor} must be a multiple of the pooling block {block}")

    @property
    def block(self) -> int:
        return 1 << self.downsample_exponent

    @property
    def ds_rows(self) -> int:
        return -(-self.fov_rows // self.block)

    @property
    def ds_cols(self) -> int:
        return -(-self.fov_cols // self.block)

    @property
    def ds_anchor(self) -> tuple[int, int]:
        return (self.anchor[0] // self.block, self.anchor[1] // self.block)


def new_flat(rows: int, cols: int, cell_size: float, level: float = 0.0) -> HeightMap:
    if rows < 1 or cols < 1 or cell_size <= 0:
        raise InvalidDimension(f"invalid dimensions ({rows}, {cols}, {cell_size})")
    if not math.isfinite(level):
        raise ValueError("level must be finite")
    return HeightMap(rows, cols, cell_size, np.full((rows, cols), float(level)))


def cell_centers(rows: int, cols: int, cell_size: float):
    """World coordinates of cell centers: row r -> x, col c -> y."""
    xs = (np.arange(rows) + 0.5) * cell_size
    ys = (np.arange(cols) + 0.5) * cell_size
    return xs, ys


def add_pile(m: HeightMap, pile: GaussianPile) -> HeightMap:
    """Additively superpose a rotated anisotropic Gaussian, clipped at the map."""
    cx, cy = pile.center
    sx, sy = pile.sigma
    reach = PILE_BBOX_SIGMAS * max(sx, sy)
    r0 = max(0, int(math.floor((cx - reach) / m.cell_size - 0.5)))
    r1 = min(m.rows, int(math.ceil((cx + reach) / m.cell_size + 0.5)))
    c0 = max(0, int(math.floor((cy - reach) / m.cell_size - 0.5)))
    c1 = min(m.cols, int(math.ceil((cy + reach) / m.cell_size + 0.5)))
    if r0 >= r1 or c0 >= c1:
        return m
    heights = m.heights.copy()
    xs = (np.arange(r0, r1) + 0.5) * m.cell_size - cx
    ys = (np.arange(c0, c1) + 0.5) * m.cell_size - cy
    dx, dy = np.meshgrid(xs, ys, indexing="ij")
    cos_t, sin_t = math.cos(pile.rotation), math.sin(pile.rotation)
    u = cos_t * dx + sin_t * dy
    v = -sin_t * dx + cos_t * dy
    bump = pile.peak_height * np.exp(-0.5 * ((u / sx) ** 2 + (v / sy) ** 2))
    heights[r0:r1, c0:c1] += bump
    return HeightMap(m.rows, m.cols, m.cell_size, heights)


def diff_map(h: HeightMap, h_des: HeightMap) -> DiffMap:
    if (h.rows, h.cols) != (h_des.rows, h_des.cols) or h.cell_size != h_des.cell_size:
        raise GeometryMismatch(
            f"{h.rows}x{h.cols}@{h.cell_size} vs {h_des.rows}x{h_des.cols}@{h_des.cell_size}")
    return DiffMap(h.rows, h.cols, h.cell_size, h.heights - h_des.heights)


def excess_volume(d: DiffMap) -> float:
    """Volume above target: sum of the positive part times cell area, m^3."""
    return float(np.maximum(d.values, 0.0).sum()) * d.cell_area


def max_excess_height(d: DiffMap) -> float:
    return max(0.0, float(d.values.max()))


def mean_excess_height(d: DiffMap) -> float:
    return float(np.maximum(d.values, 0.0).mean())


def downsample(d: DiffMap, exponent: int) -> DiffMap:
    """Mean-pool over 2^N blocks; edges replicate-padded, so output dims are
    ceil(rows / 2^N) x ceil(cols / 2^N)."""
    if exponent < 0:
        raise ValueError("exponent must be >= 0")
    if exponent == 0:
        return d
    b = 1 << exponent
    out_r = -(-d.rows // b)
    out_c = -(-d.cols // b)
    pad_r = out_r * b - d.rows
    pad_c = out_c * b - d.cols
    v = np.pad(d.values, ((0, pad_r), (0, pad_c)), mode="edge")
    pooled = v.reshape(out_r, b, out_c, b).mean(axis=(1, 3))
    return DiffMap(out_r, out_c, d.cell_size * b, pooled)


def sample_bilinear(values: np.ndarray, cell_size: float,
                    xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear samples of a grid at world points; points outside the map
    rectangle read as 0, points in the half-cell margin replicate the edge."""
    rows, cols = values.shape
    inside = ((xs >= 0.0) & (xs <= rows * cell_size)
              & (ys >= 0.0) & (ys <= cols * cell_size))
    u = np.clip(xs / cell_size - 0.5, 0.0, rows - 1.0)
    v = np.clip(ys / cell_size - 0.5, 0.0, cols - 1.0)
    u0 = np.minimum(np.floor(u).astype(np.int64), max(rows - 2, 0))
    v0 = np.minimum(np.floor(v).astype(np.int64), max(cols - 2, 0))
    fu = u - u0
    fv = v - v0
    u1 = np.minimum(u0 + 1, rows - 1)
    v1 = np.minimum(v0 + 1, cols - 1)
    top = values[u0, v0] * (1.0 - fv) + values[u0, v1] * fv
    bot = values[u1, v0] * (1.0 - fv) + values[u1, v1] * fv
    out = top * (1.0 - fu) + bot * fu
    return np.where(inside, out, 0.0)


def ego_fov(h: HeightMap, h_des: HeightMap, pose: tuple[float, float, float],
            spec: FovSpec) -> DiffMap:
    """Difference map resampled into the dozer frame.

    The dozer sits at `spec.anchor` facing the +row direction; FOV pixel
    (i, j) reads delta-height at the world point offset (i - anchor_row,
    j - anchor_col) cells rotated by the heading.  Off-map points read 0
    (at target).
    """
    x, y, heading = pose
    if not (0.0 <= x <= h.rows * h.cell_size and 0.0 <= y <= h.cols * h.cell_size):
        raise PoseOutOfBounds(f"pose ({x}, {y}) outside map")
    d = diff_map(h, h_des)
    ar, ac = spec.anchor
    fwd = (np.arange(spec.fov_rows) - ar) * h.cell_size
    lat = (np.arange(spec.fov_cols) - ac) * h.cell_size
    f, l = np.meshgrid(fwd, lat, indexing="ij")
    cos_h, sin_h = math.cos(heading), math.sin(heading)
    xs = x + f * cos_h - l * sin_h
    ys = y + f * sin_h + l * cos_h
    vals = sample_bilinear(d.values, h.cell_size, xs, ys)
    return DiffMap(spec.fov_rows, spec.fov_cols, h.cell_size, vals)


class PoseOutOfBounds(ValueError):
    pass


# ---------------------------------------------------------------------------
# HMAP1 binary format
# magic "HMAP", version u16 LE = 1, rows u32 LE, cols u32 LE,
# cell_size f32 LE, rows*cols f32 LE row-major values.
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sHIIf")


def hmap_bytes(rows: int, cols: int, cell_size: float, grid: np.ndarray) -> bytes:
    header = _HEADER.pack(HMAP_MAGIC, HMAP_VERSION, rows, cols, cell_size)
    return header + np.ascontiguousarray(grid, dtype="<f4").tobytes()


def write_hmap(path, m: HeightMap | DiffMap) -> None:
    grid = m.heights if isinstance(m, HeightMap) else m.values
    with open(path, "wb") as fh:
        fh.write(hmap_bytes(m.rows, m.cols, m.cell_size, grid))


def parse_hmap(data: bytes) -> tuple[int, int, float, np.ndarray]:
    if len(data) < _HEADER.size:
        raise ValueError("truncated HMAP1 header")
    magic, version, rows, cols, cell_size = _HEADER.unpack_from(data)
    if magic != HMAP_MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if version != HMAP_VERSION:
        raise ValueError(f"unsupported HMAP version {version}")
    expected = _HEADER.size + rows * cols * 4
    if len(data) != expected:
        raise ValueError(f"HMAP1 payload is {len(data)} bytes, expected {expected}")
    grid = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(rows, cols)
    return rows, cols, cell_size, grid.astype(np.float64)


def read_hmap(path) -> HeightMap:
    with open(path, "rb") as fh:
        rows, cols, cell_size, grid = parse_hmap(fh.read())
    return HeightMap(rows, cols, float(cell_size), grid)


def read_hmap_diff(path) -> DiffMap:
    with open(path, "rb") as fh:
        rows, cols, cell_size, grid = parse_hmap(fh.read())
    return DiffMap(rows, cols, float(cell_size), grid)
