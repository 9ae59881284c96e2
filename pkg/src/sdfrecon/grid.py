"""Discrete SDF storage and continuous reconstruction.

An :class:`SdfGrid` holds ``N**3`` signed-distance samples on the vertices of
a uniform cubic lattice.  The continuous field is the trilinear interpolation
of those samples; its zero level set is the surface.  Conventions used
throughout the package:

* ``values[ix, iy, iz]`` is the sample at world position
  ``origin + spacing * (ix, iy, iz)``; negative values are inside.
* cells are the ``N - 1`` intervals per axis; the cell containing a point is
  ``floor((p - origin) / spacing)`` clamped to ``[0, N - 2]``, which makes
  trilinear interpolation exact on the far boundary faces.
* the bounding box is ``[origin, origin + (N - 1) * spacing]``; the field is
  undefined outside it.

All arithmetic is double precision.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

__all__ = [
    "SdfGrid",
    "GradientBuffer",
    "OutsideGridError",
    "CORNER_OFFSETS",
    "init_sphere",
    "init_torus",
    "sample_function",
    "locate",
    "corner_weights",
    "corner_weight_derivatives",
    "cell_corner_values",
    "trilinear",
    "trilinear_many",
    "axis_taps",
    "vertex_gradient",
    "gradient_field",
    "vertex_laplacian",
    "laplacian_interior",
    "upsample",
    "upsampled_spacing",
    "save_grid",
    "load_grid",
    "save_grid_text",
    "load_grid_text",
]

# Cell corner order is x-fastest: corner m has offsets
# (m & 1, (m >> 1) & 1, (m >> 2) & 1).
CORNER_OFFSETS = np.array(
    [
        [0, 0, 0],
        [1, 0, 0],
        [0, 1, 0],
        [1, 1, 0],
        [0, 0, 1],
        [1, 0, 1],
        [0, 1, 1],
        [1, 1, 1],
    ],
    dtype=np.int64,
)

# Slack for "inside the bounding box" checks, in cell units.  Absorbs the
# floating-point dust of points constructed to lie exactly on the boundary.
_INSIDE_TOL = 1e-9


class OutsideGridError(ValueError):
    """Raised when a query point lies outside the grid's bounding box."""


@dataclass
class SdfGrid:
    """Cubic lattice of signed distance samples.

    ``resolution`` is the vertex count per axis (the grid has
    ``(resolution - 1)**3`` cells).
    """

    resolution: int
    origin: np.ndarray
    spacing: float
    values: np.ndarray

    def __post_init__(self):
        self.resolution = int(self.resolution)
        self.spacing = float(self.spacing)
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3).copy()
        if self.resolution < 2:
            raise ValueError(f"resolution must be >= 2, got {self.resolution}")
        if not self.spacing > 0.0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        self.values = np.asarray(self.values, dtype=np.float64)
        n = self.resolution
        if self.values.shape != (n, n, n):
            raise ValueError(
                f"values shape {self.values.shape} does not match resolution {n}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("grid values must be finite")

    @property
    def edge_length(self) -> float:
        return (self.resolution - 1) * self.spacing

    @property
    def bbox_min(self) -> np.ndarray:
        return self.origin.copy()

    @property
    def bbox_max(self) -> np.ndarray:
        return self.origin + self.edge_length

    def axis_coordinates(self, axis: int) -> np.ndarray:
        """World coordinates of the vertex planes along one axis."""
        return self.origin[axis] + self.spacing * np.arange(self.resolution)

    def vertex_position(self, i: int, j: int, k: int) -> np.ndarray:
        return self.origin + self.spacing * np.array([i, j, k], dtype=np.float64)

    def copy(self) -> "SdfGrid":
        return SdfGrid(self.resolution, self.origin.copy(), self.spacing, self.values.copy())


@dataclass
class GradientBuffer:
    """Grid-shaped accumulator for d(loss)/d(sample).

    Accumulation is plain summation, so merged per-view or per-chunk buffers
    agree with a single sequential pass up to float reassociation.
    """

    resolution: int
    values: np.ndarray

    @classmethod
    def zeros(cls, resolution: int) -> "GradientBuffer":
        n = int(resolution)
        return cls(n, np.zeros((n, n, n), dtype=np.float64))

    @classmethod
    def zeros_like(cls, grid: SdfGrid) -> "GradientBuffer":
        return cls.zeros(grid.resolution)

    def accumulate(self, indices: np.ndarray, contributions: np.ndarray) -> None:
        """Scatter-add ``contributions`` at integer vertex ``indices`` (..., 3).

        Duplicate indices sum (unbuffered add), so the result does not depend
        on how callers chunk their contributions.
        """
        idx = np.asarray(indices, dtype=np.int64).reshape(-1, 3)
        vals = np.asarray(contributions, dtype=np.float64).reshape(-1)
        np.add.at(self.values, (idx[:, 0], idx[:, 1], idx[:, 2]), vals)

    def add(self, other: "GradientBuffer", scale: float = 1.0) -> None:
        self.values += scale * other.values

    def copy(self) -> "GradientBuffer":
        return GradientBuffer(self.resolution, self.values.copy())


# ---------------------------------------------------------------------------
# Analytic initializers
# ---------------------------------------------------------------------------

def sample_function(resolution, origin, spacing, fn) -> SdfGrid:
    """Build a grid by evaluating ``fn(x, y, z)`` (numpy-broadcastable) at
    every vertex position."""
    n = int(resolution)
    if n < 2:
        raise ValueError(f"resolution must be >= 2, got {n}")
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    coords = [origin[a] + spacing * np.arange(n) for a in range(3)]
    x, y, z = np.meshgrid(*coords, indexing="ij")
    return SdfGrid(n, origin, spacing, fn(x, y, z))


def init_sphere(resolution, center, radius, origin, spacing) -> SdfGrid:
    """Exact sphere SDF sampled at every vertex: ``|x - center| - radius``."""
    if not radius > 0.0:
        raise ValueError(f"radius must be positive, got {radius}")
    c = np.asarray(center, dtype=np.float64).reshape(3)
    grid = sample_function(
        resolution,
        origin,
        spacing,
        lambda x, y, z: np.sqrt((x - c[0]) ** 2 + (y - c[1]) ** 2 + (z - c[2]) ** 2)
        - radius,
    )
    if np.all(grid.values > 0.0) or np.all(grid.values < 0.0):
        raise ValueError("sphere does not intersect the grid's bounding box")
    return grid


def init_torus(resolution, center, major_radius, minor_radius, origin, spacing) -> SdfGrid:
    """Exact torus SDF (axis = z): ``|(|p_xy| - R, p_z)| - r``."""
    if not (major_radius > minor_radius > 0.0):
        raise ValueError(
            f"need major_radius > minor_radius > 0, got R={major_radius}, r={minor_radius}"
        )
    c = np.asarray(center, dtype=np.float64).reshape(3)

    def torus(x, y, z):
        ring = np.sqrt((x - c[0]) ** 2 + (y - c[1]) ** 2) - major_radius
        return np.sqrt(ring**2 + (z - c[2]) ** 2) - minor_radius

    return sample_function(resolution, origin, spacing, torus)


# ---------------------------------------------------------------------------
# Trilinear reconstruction
# ---------------------------------------------------------------------------

def locate(grid: SdfGrid, pts: np.ndarray, clamp: bool = False):
    """Map world points to (cell index, fractional coordinate) pairs.

    Returns ``(cells, frac)`` with shapes ``(..., 3)``; cells are clamped to
    ``[0, N - 2]`` so a fractional coordinate of exactly 1.0 addresses far
    boundary faces.  With ``clamp=False`` points outside the bounding box
    (beyond a tiny tolerance) raise :class:`OutsideGridError`; with
    ``clamp=True`` they are clamped onto it.
    """
    pts = np.asarray(pts, dtype=np.float64)
    n = grid.resolution
    rel = (pts - grid.origin) / grid.spacing
    if not clamp:
        lo = rel.min() if rel.size else 0.0
        hi = rel.max() if rel.size else 0.0
        bound = _INSIDE_TOL * (n - 1)
        if lo < -bound or hi > (n - 1) + bound:
            raise OutsideGridError(
                "query point outside the grid bounding box "
                f"(relative coordinates span [{lo}, {hi}], valid [0, {n - 1}])"
            )
    rel = np.clip(rel, 0.0, float(n - 1))
    cells = np.minimum(rel.astype(np.int64), n - 2)
    frac = rel - cells
    return cells, frac


def corner_weights(frac: np.ndarray) -> np.ndarray:
    """Trilinear weights of the 8 cell corners for fractional coords (..., 3).

    Valid (as linear extrapolation) for fractions slightly outside [0, 1].
    """
    frac = np.asarray(frac, dtype=np.float64)
    f = frac[..., None, :]
    off = CORNER_OFFSETS
    return np.prod(off * f + (1 - off) * (1.0 - f), axis=-1)


def corner_weight_derivatives(frac: np.ndarray) -> np.ndarray:
    """d(weight_m)/d(frac_axis), shape (..., 8, 3)."""
    frac = np.asarray(frac, dtype=np.float64)
    f = frac[..., None, :]
    off = CORNER_OFFSETS
    factors = off * f + (1 - off) * (1.0 - f)  # (..., 8, 3)
    signs = 2.0 * off - 1.0
    out = np.empty(factors.shape, dtype=np.float64)
    for axis in range(3):
        others = [a for a in range(3) if a != axis]
        out[..., axis] = signs[:, axis] * factors[..., others[0]] * factors[..., others[1]]
    return out


def cell_corner_values(grid: SdfGrid, cells: np.ndarray) -> np.ndarray:
    """Gather the 8 corner samples of each cell, x-fastest order, shape (..., 8)."""
    cells = np.asarray(cells, dtype=np.int64)
    idx = cells[..., None, :] + CORNER_OFFSETS
    return grid.values[idx[..., 0], idx[..., 1], idx[..., 2]]


def trilinear_many(grid: SdfGrid, pts: np.ndarray, clamp: bool = False) -> np.ndarray:
    """Vectorized trilinear reconstruction at world points (..., 3)."""
    cells, frac = locate(grid, pts, clamp=clamp)
    w = corner_weights(frac)
    d = cell_corner_values(grid, cells)
    return np.sum(w * d, axis=-1)


def trilinear(grid: SdfGrid, p) -> float:
    """Trilinear reconstruction at a single world point.

    Exact at lattice vertices and continuous across cell faces; raises
    :class:`OutsideGridError` outside the bounding box.
    """
    return float(trilinear_many(grid, np.asarray(p, dtype=np.float64).reshape(3)))


# ---------------------------------------------------------------------------
# Finite-difference stencils
# ---------------------------------------------------------------------------

def axis_taps(resolution: int, spacing: float):
    """Per-vertex finite-difference taps along one axis.

    Returns ``(plus, minus, coef)`` arrays of length ``resolution`` such that
    the derivative estimate at index ``i`` is
    ``(values[plus[i]] - values[minus[i]]) * coef[i]``: central differences
    over ``2h`` in the interior, one-sided over ``h`` on the boundary.
    """
    n = int(resolution)
    idx = np.arange(n)
    plus = np.minimum(idx + 1, n - 1)
    minus = np.maximum(idx - 1, 0)
    coef = 1.0 / ((plus - minus) * spacing)
    return plus, minus, coef


def vertex_gradient(grid: SdfGrid, i: int, j: int, k: int) -> np.ndarray:
    """Finite-difference SDF gradient at one vertex (central in the interior,
    one-sided first order on the boundary)."""
    n = grid.resolution
    for name, v in (("i", i), ("j", j), ("k", k)):
        if not 0 <= v < n:
            raise IndexError(f"vertex index {name}={v} out of range [0, {n})")
    plus, minus, coef = axis_taps(n, grid.spacing)
    d = grid.values
    return np.array(
        [
            (d[plus[i], j, k] - d[minus[i], j, k]) * coef[i],
            (d[i, plus[j], k] - d[i, minus[j], k]) * coef[j],
            (d[i, j, plus[k]] - d[i, j, minus[k]]) * coef[k],
        ]
    )


def gradient_field(grid: SdfGrid) -> np.ndarray:
    """Vertex gradients at every lattice vertex, shape (N, N, N, 3)."""
    d = grid.values
    h = grid.spacing
    out = np.empty(d.shape + (3,), dtype=np.float64)
    for axis in range(3):
        m = np.moveaxis(d, axis, 0)
        g = np.empty_like(m)
        g[1:-1] = (m[2:] - m[:-2]) / (2.0 * h)
        g[0] = (m[1] - m[0]) / h
        g[-1] = (m[-1] - m[-2]) / h
        out[..., axis] = np.moveaxis(g, 0, axis)
    return out


def vertex_laplacian(grid: SdfGrid, i: int, j: int, k: int) -> float:
    """7-point Laplacian at an interior vertex: (sum of 6 neighbors - 6d) / h^2."""
    n = grid.resolution
    if not (1 <= i <= n - 2 and 1 <= j <= n - 2 and 1 <= k <= n - 2):
        raise ValueError(f"laplacian needs an interior vertex, got ({i}, {j}, {k})")
    d = grid.values
    s = (
        d[i - 1, j, k]
        + d[i + 1, j, k]
        + d[i, j - 1, k]
        + d[i, j + 1, k]
        + d[i, j, k - 1]
        + d[i, j, k + 1]
    )
    return float((s - 6.0 * d[i, j, k]) / grid.spacing**2)


def laplacian_interior(grid: SdfGrid) -> np.ndarray:
    """7-point Laplacian at all interior vertices, shape (N-2, N-2, N-2)."""
    d = grid.values
    c = d[1:-1, 1:-1, 1:-1]
    s = (
        d[:-2, 1:-1, 1:-1]
        + d[2:, 1:-1, 1:-1]
        + d[1:-1, :-2, 1:-1]
        + d[1:-1, 2:, 1:-1]
        + d[1:-1, 1:-1, :-2]
        + d[1:-1, 1:-1, 2:]
    )
    return (s - 6.0 * c) / grid.spacing**2


# ---------------------------------------------------------------------------
# Resolution changes
# ---------------------------------------------------------------------------

def upsampled_spacing(resolution: int, spacing: float, new_resolution: int) -> float:
    """Spacing that preserves the bounding box at a higher vertex count."""
    if new_resolution <= resolution:
        raise ValueError(
            f"new resolution {new_resolution} must exceed current {resolution}"
        )
    return spacing * (resolution - 1) / (new_resolution - 1)


def upsample(grid: SdfGrid, new_resolution: int) -> SdfGrid:
    """Resample to a finer lattice over the same bounding box.

    Every new vertex value is the trilinear reconstruction of the old grid at
    the new vertex position, so affine fields survive exactly.
    """
    m = int(new_resolution)
    new_h = upsampled_spacing(grid.resolution, grid.spacing, m)
    # linspace pins both endpoints, keeping the far boundary exact.
    coords = [
        np.linspace(grid.origin[a], grid.origin[a] + grid.edge_length, m)
        for a in range(3)
    ]
    y, z = np.meshgrid(coords[1], coords[2], indexing="ij")
    values = np.empty((m, m, m), dtype=np.float64)
    slab = np.empty((m, m, 3), dtype=np.float64)
    slab[..., 1] = y
    slab[..., 2] = z
    for i in range(m):
        slab[..., 0] = coords[0][i]
        values[i] = trilinear_many(grid, slab, clamp=True)
    return SdfGrid(m, grid.origin.copy(), new_h, values)


# ---------------------------------------------------------------------------
# File container
# ---------------------------------------------------------------------------

_MAGIC = b"SDFG"
_VERSION = 1
_HEADER = struct.Struct("<4sII3dd")  # magic, version, resolution, origin, spacing


def save_grid(grid: SdfGrid, path) -> None:
    """Write the binary container: 44-byte header then N^3 little-endian f64
    samples in x-fastest order."""
    header = _HEADER.pack(
        _MAGIC, _VERSION, grid.resolution, *grid.origin, grid.spacing
    )
    payload = np.ascontiguousarray(grid.values.ravel(order="F"), dtype="<f8")
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload.tobytes())


def load_grid(path) -> SdfGrid:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated grid container")
    magic, version, n, ox, oy, oz, h = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {_MAGIC!r}")
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    expected = _HEADER.size + n**3 * 8
    if len(raw) != expected:
        raise ValueError(f"{path}: size {len(raw)} does not match header ({expected})")
    values = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(
        (n, n, n), order="F"
    )
    return SdfGrid(n, np.array([ox, oy, oz]), h, values.astype(np.float64))


def save_grid_text(grid: SdfGrid, path) -> None:
    """Lossless text dump: 3 header lines then one value per line."""
    o = grid.origin
    with open(path, "w") as f:
        f.write(f"SDFG-TEXT {_VERSION}\n")
        f.write(f"{grid.resolution}\n")
        f.write(f"{o[0]:.17g} {o[1]:.17g} {o[2]:.17g} {grid.spacing:.17g}\n")
        for v in grid.values.ravel(order="F"):
            f.write(f"{v:.17g}\n")


def load_grid_text(path) -> SdfGrid:
    with open(path) as f:
        tag = f.readline().split()
        if len(tag) != 2 or tag[0] != "SDFG-TEXT":
            raise ValueError(f"{path}: not a grid text dump")
        n = int(f.readline())
        ox, oy, oz, h = (float(t) for t in f.readline().split())
        values = np.array([float(line) for line in f], dtype=np.float64)
    if values.size != n**3:
        raise ValueError(f"{path}: expected {n**3} values, found {values.size}")
    return SdfGrid(n, np.array([ox, oy, oz]), h, values.reshape((n, n, n), order="F"))
