"""Stage two of rendering: the differentiable local shading computation.

Given the cell located by the tracer, the pixel value is a closed-form
function of the SDF samples in the 4x4x4 block around that cell:

* conservative intersection ``p = s + f(s) * v`` with the interpolation
  weights of ``s`` held fixed (``s`` comes from the non-differentiable stage),
* surface normal = normalized trilinear interpolation of the finite-difference
  vertex gradients, evaluated at ``p`` in the hit cell's local coordinates,
* diffuse shading ``ambient + albedo * intensity * max(0, n . l)``.

Derivatives of the pixel with respect to every sample in the block are
hand-derived (chain rule through the intersection point and the normal
normalization) and accumulated per pixel.  ``shade_value_fixed_cell`` is the
same forward written over generic scalars; it drives the finite-difference
checks and the micro-tape cross-check.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import microtape
from .grid import (
    CORNER_OFFSETS,
    GradientBuffer,
    SdfGrid,
    cell_corner_values,
    corner_weight_derivatives,
    corner_weights,
    gradient_field,
    locate,
    trilinear,
)
from .scene import Camera, Light, Ray, camera_rays
from .tracer import HitRecord, sphere_trace_many

__all__ = [
    "DegenerateNormalError",
    "PixelTape",
    "TapeBundle",
    "RenderResult",
    "BACKGROUND",
    "intersection_point",
    "surface_normal",
    "shade_pixel",
    "shade_value_fixed_cell",
    "shade_grads_microtape",
    "render",
]

BACKGROUND = 0.0
_DEGENERATE_NORM = 1e-12

# The 4x4x4 sample block around a hit cell, base = cell - 1, x-fastest flat
# order: flat = lx + 4*ly + 16*lz.
_FLAT = np.arange(64)
BLOCK_OFFSETS = np.stack([_FLAT % 4, (_FLAT // 4) % 4, _FLAT // 16], axis=-1)


class DegenerateNormalError(ArithmeticError):
    """Interpolated SDF gradient too small to define a surface normal."""


@dataclass
class PixelTape:
    """Pixel value plus its derivatives w.r.t. the nearby SDF samples."""

    pixel_value: float
    sample_indices: np.ndarray  # (K, 3) vertex indices
    sample_grads: np.ndarray  # (K,)


@dataclass
class RenderResult:
    image: np.ndarray
    tapes: "TapeBundle | None" = None


def intersection_point(s, v, grid: SdfGrid) -> np.ndarray:
    """Conservative intersection ``p = s + trilinear(s) * v``.

    Exact when the local field is a plane perpendicular to the ray; otherwise
    it falls short of, and never crosses, the true intersection along the ray.
    """
    s = np.asarray(s, dtype=np.float64).reshape(3)
    v = np.asarray(v, dtype=np.float64).reshape(3)
    return s + trilinear(grid, s) * v


def surface_normal(grid: SdfGrid, p) -> np.ndarray:
    """Unit normal at ``p``: trilinear interpolation of the vertex gradients
    of the cell containing ``p``."""
    p = np.asarray(p, dtype=np.float64).reshape(3)
    cell, frac = locate(grid, p)
    g_corners = _corner_vertex_gradients(grid, cell[None, :])[0]
    w = corner_weights(frac)
    g = w @ g_corners
    rho = np.linalg.norm(g)
    if rho < _DEGENERATE_NORM:
        raise DegenerateNormalError(
            f"interpolated gradient norm {rho:g} at {p} is below {_DEGENERATE_NORM:g}"
        )
    return g / rho


# ---------------------------------------------------------------------------
# Vectorized shading with closed-form sample derivatives
# ---------------------------------------------------------------------------

def _corner_taps(grid: SdfGrid, cells: np.ndarray):
    """Finite-difference taps of all 8 corner vertices of each cell.

    Returns ``(cv, tap_plus, tap_minus, coef)``: corner vertex indices
    (P, 8, 3) and, per axis, the plus/minus tap index along that axis and the
    stencil coefficient (central ``1/2h`` in the interior, one-sided ``1/h``
    on the boundary), each (P, 8, 3).
    """
    n = grid.resolution
    cv = cells[:, None, :] + CORNER_OFFSETS[None, :, :]  # (P, 8, 3)
    tap_plus = np.minimum(cv + 1, n - 1)
    tap_minus = np.maximum(cv - 1, 0)
    coef = 1.0 / ((tap_plus - tap_minus) * grid.spacing)
    return cv, tap_plus, tap_minus, coef


def _corner_vertex_gradients(grid: SdfGrid, cells: np.ndarray) -> np.ndarray:
    """Vertex gradients at the 8 corners of each cell, (P, 8, 3)."""
    cv, tp, tm, coef = _corner_taps(grid, cells)
    d = grid.values
    g = np.empty(cv.shape, dtype=np.float64)
    for axis in range(3):
        ip = [cv[..., 0], cv[..., 1], cv[..., 2]]
        im = [cv[..., 0], cv[..., 1], cv[..., 2]]
        ip[axis] = tp[..., axis]
        im[axis] = tm[..., axis]
        g[..., axis] = (d[tuple(ip)] - d[tuple(im)]) * coef[..., axis]
    return g


def shade_hits(grid: SdfGrid, cells: np.ndarray, s: np.ndarray, v: np.ndarray, light: Light):
    """Shade a batch of hits and return closed-form sample derivatives.

    ``cells`` (P, 3), ``s`` (P, 3) final tracer positions, ``v`` (P, 3) unit
    ray directions.  Returns ``(values (P,), block_base (P, 3),
    block_grads (P, 64))`` where the grads address the 4x4x4 block with base
    ``cell - 1`` in x-fastest flat order.
    """
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 3)
    s = np.asarray(s, dtype=np.float64).reshape(-1, 3)
    v = np.asarray(v, dtype=np.float64).reshape(-1, 3)
    p_count = cells.shape[0]
    h = grid.spacing
    l_hat = -light.direction
    k_diffuse = light.albedo * light.intensity

    u_s = (s - grid.origin) / h - cells  # fixed weights of the tracer position
    w0 = corner_weights(u_s)  # (P, 8)
    d8 = cell_corner_values(grid, cells)
    f = np.sum(w0 * d8, axis=-1)
    u_p = u_s + (f / h)[:, None] * v  # may leave [0, 1]; weights extrapolate

    cv, tp, tm, coef = _corner_taps(grid, cells)
    g_corners = _corner_vertex_gradients(grid, cells)  # (P, 8, 3)

    wp = corner_weights(u_p)  # (P, 8)
    dwp = corner_weight_derivatives(u_p)  # (P, 8, 3)
    g = np.einsum("pm,pmi->pi", wp, g_corners)
    rho = np.linalg.norm(g, axis=-1)
    degenerate = rho < _DEGENERATE_NORM
    safe_rho = np.where(degenerate, 1.0, rho)
    n = g / safe_rho[:, None]
    d_dot = np.einsum("pi,i->p", n, l_hat)
    lit = (~degenerate) & (d_dot > 0.0)
    values = light.ambient + k_diffuse * np.where(lit, d_dot, 0.0)

    # a = d(pixel)/d(g): project l through the normalization Jacobian.
    a_vec = np.where(
        lit[:, None], k_diffuse * (l_hat - d_dot[:, None] * n) / safe_rho[:, None], 0.0
    )  # (P, 3)

    base = cells - 1
    blocks = np.zeros((p_count, 64), dtype=np.float64)
    rows = np.arange(p_count)

    # Stencil path: d(pixel)/d(sample) through each corner gradient.
    # Corner m, axis mu touches tap_plus with +w_m(u_p) a_mu coef and
    # tap_minus with the opposite sign.
    amp = wp[:, :, None] * a_vec[:, None, :] * coef  # (P, 8, 3)
    for axis in range(3):
        for sign, taps in ((1.0, tp), (-1.0, tm)):
            tgt = cv.copy()
            tgt[..., axis] = taps[..., axis]
            local = tgt - base[:, None, :]
            flat = local[..., 0] + 4 * local[..., 1] + 16 * local[..., 2]
            np.add.at(
                blocks,
                (np.broadcast_to(rows[:, None], flat.shape), flat),
                sign * amp[..., axis],
            )

    # Intersection path: the hit-cell corners also move p along the ray.
    # J = d(g)/d(u_p); beta = a . (J v) / h.
    jac = np.einsum("pmi,pmj->pij", g_corners, dwp)
    beta = np.einsum("pi,pij,pj->p", a_vec, jac, v) / h
    corner_local = cv - base[:, None, :]
    corner_flat = corner_local[..., 0] + 4 * corner_local[..., 1] + 16 * corner_local[..., 2]
    np.add.at(
        blocks,
        (np.broadcast_to(rows[:, None], corner_flat.shape), corner_flat),
        beta[:, None] * w0,
    )
    return values, base, blocks


@dataclass
class TapeBundle:
    """Per-pixel shading tapes for one rendered view, struct-of-arrays form.

    ``pixel_rows``/``pixel_cols`` locate each tape's pixel; ``block_base`` and
    ``block_grads`` hold the 4x4x4 derivative blocks from :func:`shade_hits`.
    """

    resolution: int  # grid resolution the blocks refer to
    pixel_rows: np.ndarray  # (P,)
    pixel_cols: np.ndarray  # (P,)
    values: np.ndarray  # (P,)
    block_base: np.ndarray  # (P, 3)
    block_grads: np.ndarray  # (P, 64)

    def __len__(self) -> int:
        return len(self.values)

    def global_indices(self):
        """(P, 64, 3) vertex indices and an in-range mask (entries outside the
        grid never receive contributions)."""
        gi = self.block_base[:, None, :] + BLOCK_OFFSETS[None, :, :]
        valid = np.all((gi >= 0) & (gi < self.resolution), axis=-1)
        return gi, valid

    def accumulate_scaled(self, buffer: GradientBuffer, scale: np.ndarray) -> None:
        """buffer += sum_p scale[p] * tape_p, via one deterministic scatter."""
        if len(self) == 0:
            return
        n = self.resolution
        gi, valid = self.global_indices()
        flat = gi[..., 0] * n * n + gi[..., 1] * n + gi[..., 2]
        contrib = self.block_grads * np.asarray(scale, dtype=np.float64)[:, None]
        sums = np.bincount(
            flat[valid].ravel(), weights=contrib[valid].ravel(), minlength=n**3
        )
        buffer.values += sums.reshape((n, n, n))

    def pixel_tape(self, index: int) -> PixelTape:
        """Materialize one pixel's tape, dropping out-of-grid and zero entries."""
        gi, valid = self.global_indices()
        keep = valid[index] & (self.block_grads[index] != 0.0)
        return PixelTape(
            pixel_value=float(self.values[index]),
            sample_indices=gi[index][keep],
            sample_grads=self.block_grads[index][keep].copy(),
        )

    def pixel_tapes(self):
        return [self.pixel_tape(i) for i in range(len(self))]


def shade_pixel(hit: HitRecord, grid: SdfGrid, light: Light, view: Ray) -> PixelTape:
    """Shade one traced hit; view is the pixel's ray."""
    if not hit.hit:
        raise ValueError("shade_pixel requires a hit record with hit=True")
    values, base, blocks = shade_hits(
        grid, np.array([hit.cell]), hit.s[None, :], view.direction[None, :], light
    )
    bundle = TapeBundle(
        grid.resolution,
        np.zeros(1, dtype=np.int64),
        np.zeros(1, dtype=np.int64),
        values,
        base,
        blocks,
    )
    return bundle.pixel_tape(0)


def render(
    grid: SdfGrid,
    camera: Camera,
    light: Light,
    with_gradients: bool = False,
    max_steps: int | None = None,
) -> RenderResult:
    """Render one view: sphere-trace every pixel ray, shade the hits.

    Misses produce the background value.  With ``with_gradients`` the result
    carries a :class:`TapeBundle` over the hit pixels.
    """
    origin, dirs = camera_rays(camera)
    hgt, wdt = dirs.shape[:2]
    flat_dirs = dirs.reshape(-1, 3)
    origins = np.broadcast_to(origin, flat_dirs.shape)
    kwargs = {} if max_steps is None else {"max_steps": max_steps}
    traced = sphere_trace_many(grid, origins, flat_dirs, **kwargs)

    image = np.full(hgt * wdt, BACKGROUND, dtype=np.float64)
    hit_idx = np.flatnonzero(traced["hit"])
    tapes = None
    if hit_idx.size:
        values, base, blocks = shade_hits(
            grid,
            traced["cell"][hit_idx],
            traced["s"][hit_idx],
            flat_dirs[hit_idx],
            light,
        )
        image[hit_idx] = values
        if with_gradients:
            tapes = TapeBundle(
                grid.resolution,
                hit_idx // wdt,
                hit_idx % wdt,
                values,
                base,
                blocks,
            )
    elif with_gradients:
        tapes = TapeBundle(
            grid.resolution,
            np.zeros(0, dtype=np.int64),
            np.zeros(0, dtype=np.int64),
            np.zeros(0),
            np.zeros((0, 3), dtype=np.int64),
            np.zeros((0, 64)),
        )
    return RenderResult(image.reshape(hgt, wdt), tapes)


# ---------------------------------------------------------------------------
# Generic scalar forward: finite-difference target and micro-tape cross-check
# ---------------------------------------------------------------------------

def shade_value_fixed_cell(grid: SdfGrid, cell, s, v, light: Light, value_at=None):
    """Pixel value as a scalar function of the samples, hit cell held fixed.

    ``value_at(i, j, k)`` supplies sample values (defaults to the grid's);
    returning :class:`microtape.Var` objects runs the same computation under
    the reverse-mode tape.  This is the reference forward for the
    finite-difference protocol: the tracer position ``s``, its interpolation
    weights, and the cell all stay fixed while samples vary.
    """
    n_res = grid.resolution
    h = grid.spacing
    if value_at is None:
        d = grid.values

        def value_at(i, j, k):
            return float(d[i, j, k])

    cell = tuple(int(c) for c in cell)
    s = np.asarray(s, dtype=np.float64).reshape(3)
    v = np.asarray(v, dtype=np.float64).reshape(3)
    u_s = (s - grid.origin) / h - np.array(cell)
    w0 = corner_weights(u_s)

    corners = [tuple(cell[a] + CORNER_OFFSETS[m][a] for a in range(3)) for m in range(8)]
    f = sum(w0[m] * value_at(*corners[m]) for m in range(8))
    u_p = [u_s[a] + f * (v[a] / h) for a in range(3)]

    g = [0.0, 0.0, 0.0]
    for m in range(8):
        wm = 1.0
        for a in range(3):
            wm = wm * (u_p[a] if CORNER_OFFSETS[m][a] else (1.0 - u_p[a]))
        ci, cj, ck = corners[m]
        for axis, (idx, nn) in enumerate(((ci, n_res), (cj, n_res), (ck, n_res))):
            plus = min(idx + 1, nn - 1)
            minus = max(idx - 1, 0)
            c = 1.0 / ((plus - minus) * h)
            vp = [ci, cj, ck]
            vm = [ci, cj, ck]
            vp[axis] = plus
            vm[axis] = minus
            g[axis] = g[axis] + wm * ((value_at(*vp) - value_at(*vm)) * c)

    rho_sq = g[0] * g[0] + g[1] * g[1] + g[2] * g[2]
    rho_val = rho_sq.value if isinstance(rho_sq, microtape.Var) else rho_sq
    if rho_val < _DEGENERATE_NORM**2:
        return light.ambient
    rho = microtape.sqrt(rho_sq)
    l_hat = -light.direction
    d_dot = (g[0] * l_hat[0] + g[1] * l_hat[1] + g[2] * l_hat[2]) / rho
    return light.ambient + light.albedo * light.intensity * microtape.relu(d_dot)


def shade_grads_microtape(grid: SdfGrid, cell, s, v, light: Light):
    """Sample derivatives of the fixed-cell pixel via the reverse-mode tape.

    Returns ``(value, dict[(i, j, k)] -> grad)`` over the 4x4x4 block.
    """
    n = grid.resolution
    base = np.asarray(cell, dtype=np.int64) - 1
    leaves = {}

    def value_at(i, j, k):
        key = (i, j, k)
        if key not in leaves:
            leaves[key] = microtape.Var(float(grid.values[i, j, k]))
        return leaves[key]

    out = shade_value_fixed_cell(grid, cell, s, v, light, value_at=value_at)
    if not isinstance(out, microtape.Var):  # degenerate normal: all grads zero
        return float(out), {}
    microtape.backward(out)
    grads = {key: var.grad for key, var in leaves.items()}
    # Every touched sample must live in the block around the hit cell.
    for (i, j, k) in grads:
        assert np.all((np.array([i, j, k]) - base >= 0) & (np.array([i, j, k]) - base < 4))
        assert 0 <= i < n and 0 <= j < n and 0 <= k < n
    return out.value, grads
