"""Finite-difference verification of every analytic gradient family.

The shading derivatives are checked pixel by pixel under the fixed-cell
protocol: the tracer runs once, then the hit cell, the tracer position and
its interpolation weights stay frozen while individual samples are perturbed
by +/-step and the local pixel computation reruns.  Freezing the cell is what
makes the comparison well-posed: hit/miss flips under perturbation (silhouette
discontinuities) cannot occur, matching the renderer's two-stage split where
only the local shading stage is differentiable.

Grid-only losses (eikonal, Laplacian) are checked by direct perturbation of
random grids; the assembled image-loss gradient is checked through the same
fixed-cell pixel forward.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import SdfGrid, init_sphere, init_torus
from .loss import LossWeights, eikonal_loss, geometry_loss
from .scene import rig_views
from .shade import BLOCK_OFFSETS, render, shade_value_fixed_cell
from .tracer import sphere_trace_many

__all__ = [
    "FamilyResult",
    "GradCheckReport",
    "default_test_grids",
    "collect_hit_pixels",
    "check_shade_family",
    "check_image_family",
    "check_grid_loss_family",
    "run_gradcheck",
]


@dataclass
class FamilyResult:
    """Worst-case errors of one gradient family against finite differences.

    Gradients larger than ``atol / rtol`` are held to the relative tolerance;
    smaller ones to the absolute one.  ``atol`` defaults to 1e-9 because a
    double-precision central difference of an O(1) pixel value at step 1e-6
    carries an irreducible rounding noise of a few 1e-10; correctness of the
    tiny gradients below it is established separately by the reverse-mode
    tape (see ``max_tape_err``), which has no such floor.
    """

    name: str
    count: int = 0
    max_rel: float = 0.0
    max_abs_small: float = 0.0  # worst abs error among small gradients
    max_tape_err: float | None = None  # closed form vs micro-tape, when checked
    rtol: float = 1e-4
    atol: float = 1e-9
    tape_tol: float = 1e-10

    @property
    def small_threshold(self) -> float:
        return self.atol / self.rtol

    @property
    def passed(self) -> bool:
        ok = self.max_rel <= self.rtol and self.max_abs_small <= self.atol
        if self.max_tape_err is not None:
            ok = ok and self.max_tape_err <= self.tape_tol
        return ok

    def record(self, analytic: float, fd: float) -> None:
        self.count += 1
        err = abs(analytic - fd)
        scale = max(abs(analytic), abs(fd))
        if scale > self.small_threshold:
            self.max_rel = max(self.max_rel, err / scale)
        else:
            self.max_abs_small = max(self.max_abs_small, err)

    def record_tape(self, analytic: float, tape: float) -> None:
        err = abs(analytic - tape) / max(abs(analytic), abs(tape), 1.0)
        self.max_tape_err = max(self.max_tape_err or 0.0, err)

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        line = (
            f"{self.name}: {self.count} gradients, "
            f"max rel err {self.max_rel:.3e} (tol {self.rtol:.0e}), "
            f"max abs err below {self.small_threshold:.1e}: "
            f"{self.max_abs_small:.3e} (tol {self.atol:.0e})"
        )
        if self.max_tape_err is not None:
            line += f", tape err {self.max_tape_err:.3e} (tol {self.tape_tol:.0e})"
        return line + f" -> {status}"


@dataclass
class GradCheckReport:
    families: list = field(default_factory=list)
    vacuous: bool = False

    @property
    def passed(self) -> bool:
        return all(f.passed for f in self.families)

    def summary(self) -> str:
        lines = [f.summary() for f in self.families]
        if self.vacuous:
            lines.append("WARNING: no pixels requested; vacuous PASS")
        lines.append("gradcheck: " + ("PASS" if self.passed else "FAIL"))
        return "\n".join(lines)


def default_test_grids(resolution: int = 32, seed: int = 0, noise_scale: float = 0.05):
    """Sphere, torus and a noise-perturbed sphere over the unit cube."""
    n = int(resolution)
    origin = np.array([-0.5, -0.5, -0.5])
    h = 1.0 / (n - 1)
    sphere = init_sphere(n, np.zeros(3), 0.35, origin, h)
    torus = init_torus(n, np.zeros(3), 0.3, 0.12, origin, h)
    rng = np.random.default_rng(seed)
    perturbed = sphere.copy()
    perturbed.values += noise_scale * h * rng.standard_normal(perturbed.values.shape)
    return [("sphere", sphere), ("torus", torus), ("perturbed", perturbed)]


def collect_hit_pixels(grid: SdfGrid, n_pixels: int, rng: np.random.Generator, image_res: int = 48):
    """Sample random hit pixels across the 26-view rig.

    Returns a list of ``(cell, s, v, light)`` tuples ready for shading.
    """
    views = rig_views(np.zeros(3), 0.5, 2.0, np.radians(45.0), image_res)
    out = []
    order = rng.permutation(len(views))
    for vid in order:
        if len(out) >= n_pixels:
            break
        view = views[vid]
        from .scene import camera_rays

        origin, dirs = camera_rays(view.camera)
        flat = dirs.reshape(-1, 3)
        traced = sphere_trace_many(grid, np.broadcast_to(origin, flat.shape), flat)
        hits = np.flatnonzero(traced["hit"])
        if hits.size == 0:
            continue
        take = min(n_pixels - len(out), max(1, n_pixels // len(views) + 1), hits.size)
        chosen = rng.choice(hits, size=take, replace=False)
        for idx in chosen:
            out.append(
                (
                    tuple(int(c) for c in traced["cell"][idx]),
                    traced["s"][idx],
                    flat[idx],
                    view.light,
                )
            )
    return out[:n_pixels]


def _fd_pixel(grid, cell, s, v, light, index, step):
    """Central finite difference of the fixed-cell pixel w.r.t. one sample."""
    i, j, k = index
    saved = grid.values[i, j, k]
    grid.values[i, j, k] = saved + step
    f_plus = shade_value_fixed_cell(grid, cell, s, v, light)
    grid.values[i, j, k] = saved - step
    f_minus = shade_value_fixed_cell(grid, cell, s, v, light)
    grid.values[i, j, k] = saved
    return (f_plus - f_minus) / (2.0 * step)


def check_shade_family(
    grids,
    n_pixels: int,
    seed: int = 0,
    step: float = 1e-6,
    rtol: float = 1e-4,
    atol: float = 1e-9,
    corrupt_sign: bool = False,
    with_tape: bool = True,
) -> FamilyResult:
    """Closed-form pixel derivatives vs fixed-cell central differences, with
    an independent reverse-mode tape agreement check on every gradient.

    ``corrupt_sign`` flips the analytic gradients before comparison; it exists
    so the test suite can prove the checker detects wrong gradients.
    """
    from .shade import shade_grads_microtape, shade_hits

    result = FamilyResult("shade", rtol=rtol, atol=atol)
    rng = np.random.default_rng(seed)
    per_grid = max(1, n_pixels // max(len(grids), 1))
    for _, grid in grids:
        pixels = collect_hit_pixels(grid, per_grid, rng)
        for cell, s, v, light in pixels:
            _, base, blocks = shade_hits(grid, np.array([cell]), s[None, :], v[None, :], light)
            analytic = blocks[0] * (-1.0 if corrupt_sign else 1.0)
            gi = base[0] + BLOCK_OFFSETS
            valid = np.all((gi >= 0) & (gi < grid.resolution), axis=-1)
            tape_grads = None
            if with_tape:
                _, tape_grads = shade_grads_microtape(grid, cell, s, v, light)
            for flat in np.flatnonzero(valid):
                fd = _fd_pixel(grid, cell, s, v, light, gi[flat], step)
                result.record(analytic[flat], fd)
                if tape_grads is not None:
                    result.record_tape(
                        analytic[flat], tape_grads.get(tuple(gi[flat]), 0.0)
                    )
    return result


def check_image_family(
    grids,
    seed: int = 0,
    n_samples: int = 40,
    step: float = 1e-6,
    rtol: float = 1e-4,
    atol: float = 1e-10,
) -> FamilyResult:
    """Assembled image-loss gradient vs finite differences of the summed loss
    under the fixed-cell protocol (one rendered view per grid).

    Pixels whose block does not contain the perturbed sample are bit-identical
    in both central-difference evaluations and cancel exactly, so only the
    affected pixels are recomputed.
    """
    from .loss import total_loss
    from .scene import camera_rays

    result = FamilyResult("image", rtol=rtol, atol=atol)
    rng = np.random.default_rng(seed)
    for _, grid in grids:
        views = rig_views(np.zeros(3), 0.5, 2.0, np.radians(45.0), 32)
        view = views[rng.integers(len(views))]
        rr = render(grid, view.camera, view.light, with_gradients=True)
        tapes = rr.tapes
        if len(tapes) == 0:
            continue
        target = np.clip(rr.image + 0.1 * rng.standard_normal(rr.image.shape), 0.0, 1.2)
        _, buf = total_loss(grid, [rr], [target], LossWeights(lambda1=0.0, lambda2=0.0))

        gi, valid = tapes.global_indices()
        touched = np.unique(gi[valid & (tapes.block_grads != 0.0)].reshape(-1, 3), axis=0)
        if len(touched) == 0:
            continue
        pick = touched[rng.choice(len(touched), size=min(n_samples, len(touched)), replace=False)]

        # Frozen per-pixel trace data, aligned with the tape rows.
        origin, dirs = camera_rays(view.camera)
        flat = dirs.reshape(-1, 3)
        traced = sphere_trace_many(grid, np.broadcast_to(origin, flat.shape), flat)
        s_pos = traced["s"][np.flatnonzero(traced["hit"])]
        ray_dirs = flat[tapes.pixel_rows * view.camera.image_width + tapes.pixel_cols]
        cells = tapes.block_base + 1
        t_vals = target[tapes.pixel_rows, tapes.pixel_cols]

        def affected_loss(sample, delta):
            i, j, k = (int(x) for x in sample)
            local = sample - tapes.block_base
            affected = np.flatnonzero(np.all((local >= 0) & (local < 4), axis=-1))
            saved = grid.values[i, j, k]
            grid.values[i, j, k] = saved + delta
            total = 0.0
            for p in affected:
                val = shade_value_fixed_cell(
                    grid, cells[p], s_pos[p], ray_dirs[p], view.light
                )
                total += (val - t_vals[p]) ** 2
            grid.values[i, j, k] = saved
            return total

        for sample in pick:
            fd = (affected_loss(sample, step) - affected_loss(sample, -step)) / (2.0 * step)
            result.record(buf.values[tuple(sample)], fd)
    return result


def check_grid_loss_family(
    name: str,
    seed: int = 0,
    resolution: int = 16,
    n_samples: int = 250,
    step: float = 1e-6,
    rtol: float = 1e-6,
) -> FamilyResult:
    """Eikonal or Laplacian loss gradient vs finite differences on a random grid."""
    rng = np.random.default_rng(seed)
    n = resolution
    grid = SdfGrid(
        n,
        np.array([-0.5, -0.5, -0.5]),
        1.0 / (n - 1),
        rng.standard_normal((n, n, n)),
    )
    if name == "eikonal":
        fn = lambda g: eikonal_loss(g)
    elif name == "geometry":
        fn = lambda g: geometry_loss(g)
    else:
        raise ValueError(f"unknown grid loss family {name!r}")
    _, buf = fn(grid)
    result = FamilyResult(name, rtol=rtol, atol=1e-10)
    idx = rng.integers(0, n, size=(n_samples, 3))
    for i, j, k in idx:
        saved = grid.values[i, j, k]
        grid.values[i, j, k] = saved + step
        plus = fn(grid)[0]
        grid.values[i, j, k] = saved - step
        minus = fn(grid)[0]
        grid.values[i, j, k] = saved
        result.record(buf.values[i, j, k], (plus - minus) / (2.0 * step))
    return result


def run_gradcheck(
    n_pixels: int = 1200,
    seed: int = 0,
    resolution: int = 32,
    step: float = 1e-6,
    rtol: float = 1e-4,
    atol: float = 1e-10,
    noise_scale: float = 0.05,
    corrupt_sign: bool = False,
) -> GradCheckReport:
    """The full protocol over sphere, torus and noise-perturbed grids."""
    report = GradCheckReport()
    if n_pixels <= 0:
        report.vacuous = True
        return report
    grids = default_test_grids(resolution, seed, noise_scale)
    report.families.append(
        check_shade_family(grids, n_pixels, seed, step, rtol, atol, corrupt_sign)
    )
    report.families.append(check_image_family(grids, seed, step=step, rtol=rtol, atol=atol))
    report.families.append(check_grid_loss_family("eikonal", seed))
    report.families.append(check_grid_loss_family("geometry", seed))
    return report
