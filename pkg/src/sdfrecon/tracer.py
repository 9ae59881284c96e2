"""Stage one of rendering: non-differentiable sphere tracing.

The tracer walks each ray from its entry into the grid's bounding box,
advancing by the interpolated SDF value (floored at a minimum advance) until
the value drops below the hit threshold or the ray leaves the box.  Its only
job is to identify, per ray, the cell whose 8 samples define the intersection;
everything differentiable happens afterwards in the shading stage.

A brute-force marching oracle (dense sampling plus bisection) verifies the
tracer independently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import SdfGrid, cell_corner_values, locate, trilinear_many

__all__ = [
    "HitRecord",
    "DEFAULT_MAX_STEPS",
    "EPS_FACTOR",
    "MIN_ADVANCE_FACTOR",
    "hit_threshold",
    "ray_box_range",
    "sphere_trace",
    "sphere_trace_many",
    "march_oracle",
    "march_oracle_many",
]

# Hit threshold and minimum advance scale with the grid spacing so the
# termination band stays sub-voxel at every resolution level.
EPS_FACTOR = 1e-4
MIN_ADVANCE_FACTOR = 1e-6
DEFAULT_MAX_STEPS = 256


def hit_threshold(grid: SdfGrid) -> float:
    return EPS_FACTOR * grid.spacing


@dataclass
class HitRecord:
    """Result of tracing one ray.

    On a hit, ``s`` is the last ray position before the surface (interpolated
    SDF below the hit threshold there), ``cell`` the containing cell and
    ``local_values`` its 8 corner samples in x-fastest order.  ``steps``
    counts ray advances, so a hit at the box entry has ``steps == 0``.
    """

    hit: bool
    s: np.ndarray | None = None
    cell: tuple | None = None
    t: float = float("nan")
    steps: int = 0
    local_values: np.ndarray | None = None


def ray_box_range(box_min, box_max, origins, directions):
    """Slab intersection of rays with an axis-aligned box.

    Returns ``(t_enter, t_exit, valid)``; ``t_enter`` is clamped to 0 (ray
    origins inside the box enter immediately).  Rays parallel to a slab and
    outside it are invalid.
    """
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(directions, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (box_min - o) * inv
        t2 = (box_max - o) * inv
    near = np.fmin(t1, t2)  # fmin/fmax drop the NaNs from 0/0
    far = np.fmax(t1, t2)
    # Parallel rays (d == 0) hit the slab only if the origin is inside it.
    inside = (o >= box_min) & (o <= box_max)
    parallel = d == 0.0
    near = np.where(parallel, -np.inf, near)
    far = np.where(parallel, np.inf, far)
    t_enter = np.max(near, axis=-1)
    t_exit = np.min(far, axis=-1)
    valid = (t_exit >= t_enter) & (t_exit >= 0.0)
    valid &= ~np.any(parallel & ~inside, axis=-1)
    t_enter = np.maximum(t_enter, 0.0)
    return t_enter, t_exit, valid


def sphere_trace_many(
    grid: SdfGrid,
    origins: np.ndarray,
    directions: np.ndarray,
    eps: float | None = None,
    max_steps: int | None = None,
):
    """Sphere-trace a batch of rays simultaneously.

    ``origins``/``directions`` have shape (R, 3) with unit directions.
    Returns dict of arrays: ``hit`` (R,), ``t`` (R,), ``steps`` (R,),
    ``s`` (R, 3), ``cell`` (R, 3), ``local_values`` (R, 8); the per-ray
    entries of ``s``/``cell``/``local_values`` are meaningful only where
    ``hit`` is set.
    """
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    norms = np.linalg.norm(d, axis=-1)
    if np.any(np.abs(norms - 1.0) > 1e-12):
        raise ValueError("ray directions must be unit length")
    if eps is None:
        eps = hit_threshold(grid)
    if not eps > 0.0:
        raise ValueError(f"eps must be positive, got {eps}")
    if max_steps is None:
        max_steps = DEFAULT_MAX_STEPS
    delta_min = MIN_ADVANCE_FACTOR * grid.spacing

    n_rays = o.shape[0]
    t_enter, t_exit, valid = ray_box_range(grid.bbox_min, grid.bbox_max, o, d)

    t = np.where(valid, t_enter, np.nan)
    hit = np.zeros(n_rays, dtype=bool)
    steps = np.zeros(n_rays, dtype=np.int64)
    active = valid.copy()

    # Advance all active rays in lockstep; rays retire on hit or box exit.
    # Each iteration performs one interpolated-SDF evaluation per active ray.
    for _ in range(max_steps + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        p = o[idx] + t[idx, None] * d[idx]
        vals = trilinear_many(grid, p, clamp=True)
        newly_hit = vals < eps
        hit[idx[newly_hit]] = True
        active[idx[newly_hit]] = False

        adv_idx = idx[~newly_hit]
        if adv_idx.size == 0:
            continue
        if np.all(steps[adv_idx] >= max_steps):
            active[adv_idx] = False
            continue
        advance = np.maximum(vals[~newly_hit], delta_min)
        t[adv_idx] = t[adv_idx] + advance
        steps[adv_idx] += 1
        # Budget exhausted or box exited: miss.
        retire = (t[adv_idx] > t_exit[adv_idx]) | (steps[adv_idx] >= max_steps)
        active[adv_idx[retire]] = False

    s = o + t[:, None] * d
    cell = np.zeros((n_rays, 3), dtype=np.int64)
    local_values = np.zeros((n_rays, 8), dtype=np.float64)
    hidx = np.flatnonzero(hit)
    if hidx.size:
        cells, _ = locate(grid, s[hidx], clamp=True)
        cell[hidx] = cells
        local_values[hidx] = cell_corner_values(grid, cells)
    return {
        "hit": hit,
        "t": t,
        "steps": steps,
        "s": s,
        "cell": cell,
        "local_values": local_values,
    }


def sphere_trace(
    grid: SdfGrid,
    ray,
    eps: float | None = None,
    max_steps: int | None = None,
) -> HitRecord:
    """Trace a single ray; see :func:`sphere_trace_many` for the stepping rule."""
    res = sphere_trace_many(
        grid, ray.origin[None, :], ray.direction[None, :], eps=eps, max_steps=max_steps
    )
    steps = int(res["steps"][0])
    if not res["hit"][0]:
        return HitRecord(hit=False, steps=steps)
    return HitRecord(
        hit=True,
        s=res["s"][0],
        cell=tuple(int(c) for c in res["cell"][0]),
        t=float(res["t"][0]),
        steps=steps,
        local_values=res["local_values"][0],
    )


# ---------------------------------------------------------------------------
# Brute-force verification oracle
# ---------------------------------------------------------------------------

_BISECT_ITERS = 60


def march_oracle_many(
    grid: SdfGrid,
    origins: np.ndarray,
    directions: np.ndarray,
    step: float | None = None,
    chunk: int = 256,
):
    """Dense-marching oracle over a batch of rays.

    Walks each box-clipped ray in fixed ``step`` increments (default
    ``spacing / 100``), brackets the first sign change of the interpolated
    SDF, then bisects 60 iterations.  Rays whose entry value is already
    non-positive hit at the entry point.  Returns the same dict layout as
    :func:`sphere_trace_many`, with ``steps`` = number of dense samples taken.
    """
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    if step is None:
        step = grid.spacing / 100.0
    if not step > 0.0:
        raise ValueError(f"step must be positive, got {step}")

    n_rays = o.shape[0]
    t_enter, t_exit, valid = ray_box_range(grid.bbox_min, grid.bbox_max, o, d)

    hit = np.zeros(n_rays, dtype=bool)
    t_hit = np.full(n_rays, np.nan)
    steps = np.zeros(n_rays, dtype=np.int64)
    lo = np.zeros(n_rays)
    hi = np.zeros(n_rays)

    for start in range(0, n_rays, chunk):
        sel = np.arange(start, min(start + chunk, n_rays))
        sel = sel[valid[sel]]
        if sel.size == 0:
            continue
        span = t_exit[sel] - t_enter[sel]
        n_samples = int(np.ceil(span.max() / step)) + 1
        ts = t_enter[sel, None] + step * np.arange(n_samples + 1)[None, :]
        ts = np.minimum(ts, t_exit[sel, None])  # last sample sits on the exit
        pts = o[sel, None, :] + ts[..., None] * d[sel, None, :]
        vals = trilinear_many(grid, pts, clamp=True)
        steps[sel] = n_samples + 1
        crossing = vals <= 0.0
        any_cross = np.any(crossing, axis=1)
        first = np.argmax(crossing, axis=1)
        rows = np.flatnonzero(any_cross)
        ray_ids = sel[rows]
        hit[ray_ids] = True
        at_entry = first[rows] == 0
        t_hit[ray_ids[at_entry]] = t_enter[ray_ids[at_entry]]
        inner = rows[~at_entry]
        inner_ids = sel[inner]
        lo[inner_ids] = ts[inner, first[inner] - 1]
        hi[inner_ids] = ts[inner, first[inner]]
        t_hit[inner_ids] = np.nan  # refined below

    refine = hit & np.isnan(t_hit)
    ridx = np.flatnonzero(refine)
    if ridx.size:
        a = lo[ridx].copy()
        b = hi[ridx].copy()
        for _ in range(_BISECT_ITERS):
            mid = 0.5 * (a + b)
            v = trilinear_many(grid, o[ridx] + mid[:, None] * d[ridx], clamp=True)
            pos = v > 0.0
            a = np.where(pos, mid, a)
            b = np.where(pos, b, mid)
        t_hit[ridx] = 0.5 * (a + b)

    s = o + t_hit[:, None] * d
    cell = np.zeros((n_rays, 3), dtype=np.int64)
    local_values = np.zeros((n_rays, 8), dtype=np.float64)
    hidx = np.flatnonzero(hit)
    if hidx.size:
        cells, _ = locate(grid, s[hidx], clamp=True)
        cell[hidx] = cells
        local_values[hidx] = cell_corner_values(grid, cells)
    return {
        "hit": hit,
        "t": t_hit,
        "steps": steps,
        "s": s,
        "cell": cell,
        "local_values": local_values,
    }


def march_oracle(grid: SdfGrid, ray, step: float | None = None) -> HitRecord:
    """Single-ray wrapper around :func:`march_oracle_many`."""
    res = march_oracle_many(
        grid, ray.origin[None, :], ray.direction[None, :], step=step
    )
    steps = int(res["steps"][0])
    if not res["hit"][0]:
        return HitRecord(hit=False, steps=steps)
    return HitRecord(
        hit=True,
        s=res["s"][0],
        cell=tuple(int(c) for c in res["cell"][0]),
        t=float(res["t"][0]),
        steps=steps,
        local_values=res["local_values"][0],
    )
