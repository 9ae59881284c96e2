"""Adam over grid values, greedy view scheduling, and the coarse-to-fine driver.

The reconstruction loop follows a simple policy: each outer iteration visits
every view in order; views whose previous image loss exceeded the average get
a large update budget (default 20, with early exit once they drop below the
average), the rest a small one (default 5), and any update that increases a
view's loss ends that view's turn immediately.  A stage stops when the total
loss falls below its tolerance, the Adam step norm collapses, or the
iteration cap is reached.  Stages run at increasing grid resolution, each
seeded by trilinear upsampling of the previous result.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .grid import GradientBuffer, SdfGrid, init_sphere, upsample
from .loss import LossReport, LossWeights, eikonal_loss, geometry_loss, image_loss, narrow_band_mask, total_loss
from .scene import View, image_res_for, rig_views
from .shade import render

__all__ = [
    "AdamState",
    "SchedulePlan",
    "StageConfig",
    "StageSettings",
    "StageResult",
    "ReconstructionScene",
    "NanGradientError",
    "StageDivergedError",
    "adam_step",
    "schedule_views",
    "render_views",
    "optimize_stage",
    "reconstruct_multires",
    "grid_targets_provider",
    "image_targets_provider",
]


class NanGradientError(ArithmeticError):
    """Gradient buffer contains NaN; the caller skips the offending view."""


class StageDivergedError(RuntimeError):
    """Stage total loss exceeded 10x its initial value."""

    def __init__(self, message, partial: SdfGrid):
        super().__init__(message)
        self.partial = partial


@dataclass
class AdamState:
    """Bias-corrected Adam moments over the grid values."""

    step_count: int
    m: np.ndarray
    v: np.ndarray
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def fresh(cls, grid: SdfGrid, lr: float, beta1=0.9, beta2=0.999, epsilon=1e-8):
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ValueError("Adam betas must lie in [0, 1)")
        zeros = np.zeros_like(grid.values)
        return cls(0, zeros.copy(), zeros.copy(), lr, beta1, beta2, epsilon)


def adam_step(state: AdamState, grid: SdfGrid, grads: GradientBuffer) -> float:
    """Apply one Adam update to the grid values in place.

    Returns the L2 norm of the applied step (the stopping-rule signal).
    """
    g = grads.values
    if g.shape != grid.values.shape:
        raise ValueError(f"gradient shape {g.shape} != grid shape {grid.values.shape}")
    if not np.all(np.isfinite(g)):
        raise NanGradientError("non-finite entries in the gradient buffer")
    state.step_count += 1
    t = state.step_count
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1**t)
    v_hat = state.v / (1.0 - state.beta2**t)
    delta = -state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    grid.values += delta
    return float(np.linalg.norm(delta))


@dataclass
class SchedulePlan:
    """Per-view update budgets for one outer iteration."""

    view_order: list
    per_view_budget: list
    avg_loss: float


def schedule_views(prev_losses, budget_low: int = 5, budget_high: int = 20) -> SchedulePlan:
    """Budget views by their previous-iteration image loss.

    Views above the average get ``budget_high`` updates (their inner loop also
    exits once the loss drops below the average); the rest get ``budget_low``.
    """
    losses = list(prev_losses)
    if not losses:
        raise ValueError("need at least one previous per-view loss")
    avg = float(np.mean(losses))
    budgets = [budget_high if l > avg else budget_low for l in losses]
    return SchedulePlan(list(range(len(losses))), budgets, avg)


# ---------------------------------------------------------------------------
# Stage configuration
# ---------------------------------------------------------------------------

@dataclass
class StageConfig:
    """Multi-resolution plan: one entry per stage where lists appear.

    ``loss_tolerance = loss_tolerance_factor * image_res**2`` and
    ``min_step_norm = min_step_norm_factor * N**1.5`` keep the stopping rules
    scale-free across stages; the learning rate decays per stage.
    """

    grid_resolutions: list
    image_resolutions: list
    max_outer_iterations: int = 10
    loss_tolerance_factor: float = 1e-4
    min_step_norm_factor: float = 1e-7
    lr: float = 0.01
    lr_decay: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    budget_low: int = 5
    budget_high: int = 20
    max_updates_per_stage: int = 0  # 0 = unlimited

    def __post_init__(self):
        res = list(self.grid_resolutions)
        if any(b <= a for a, b in zip(res, res[1:])):
            raise ValueError(f"grid resolutions must be strictly increasing, got {res}")
        if len(self.image_resolutions) != len(res):
            raise ValueError("need one image resolution per stage")

    def settings_for(self, stage: int) -> "StageSettings":
        n = self.grid_resolutions[stage]
        image_res = self.image_resolutions[stage]
        return StageSettings(
            image_res=image_res,
            lr=self.lr * self.lr_decay**stage,
            max_outer_iterations=self.max_outer_iterations,
            loss_tolerance=self.loss_tolerance_factor * image_res**2,
            min_step_norm=self.min_step_norm_factor * n**1.5,
            beta1=self.beta1,
            beta2=self.beta2,
            epsilon=self.epsilon,
            budget_low=self.budget_low,
            budget_high=self.budget_high,
            max_updates=self.max_updates_per_stage,
        )


@dataclass
class StageSettings:
    """Resolved scalars for one stage."""

    image_res: int
    lr: float
    max_outer_iterations: int
    loss_tolerance: float
    min_step_norm: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    budget_low: int = 5
    budget_high: int = 20
    max_updates: int = 0


@dataclass
class StageResult:
    grid: SdfGrid
    rows: list  # CSV rows, one per view per iteration
    updates: int
    stop_reason: str
    initial_report: LossReport
    final_report: LossReport
    min_total: float
    adam: AdamState


def render_views(grid: SdfGrid, views: list, with_gradients=False, threads: int = 1):
    """Render a list of views, optionally on a thread pool.

    Results are returned in view order regardless of scheduling, so threaded
    and sequential runs agree.
    """
    if threads <= 1 or len(views) <= 1:
        return [render(grid, v.camera, v.light, with_gradients) for v in views]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [
            pool.submit(render, grid, v.camera, v.light, with_gradients) for v in views
        ]
        return [f.result() for f in futures]


def _regularizer_terms(grid: SdfGrid, weights: LossWeights):
    mask = narrow_band_mask(grid, weights.mu) if weights.use_mask else None
    reg, _ = eikonal_loss(grid, mask=mask, form=weights.eikonal_form)
    geo, _ = geometry_loss(grid, mask=mask)
    return reg, geo


def optimize_stage(
    grid: SdfGrid,
    views: list,
    targets: list,
    weights: LossWeights,
    settings: StageSettings,
    stage_index: int = 0,
    threads: int = 1,
) -> StageResult:
    """Run the scheduled per-view Adam loop at one resolution.

    Mutates ``grid`` in place and returns it in the :class:`StageResult`.
    Per-view losses recorded for scheduling are the image L2 term only (the
    regularizers are view-independent); the stopping rules use the total.
    NaN gradients skip the view's remaining updates instead of failing the
    stage.
    """
    if len(views) != len(targets):
        raise ValueError(f"got {len(views)} views but {len(targets)} targets")
    n_views = len(views)
    state = AdamState.fresh(
        grid, settings.lr, settings.beta1, settings.beta2, settings.epsilon
    )
    rows = []

    # Stage-entry evaluation: stopping baseline, divergence reference, and the
    # immediate exit for already-converged inputs.
    entry = render_views(grid, views, with_gradients=False, threads=threads)
    per_view = [image_loss(rr.image, t)[0] for rr, t in zip(entry, targets)]
    reg, geo = _regularizer_terms(grid, weights)
    total = sum(per_view) + weights.lambda1 * reg + weights.lambda2 * geo
    report = LossReport(float(sum(per_view)), reg, geo, float(total), list(per_view))
    initial_report = report
    for vid in range(n_views):
        rows.append(
            LossReport(per_view[vid], reg, geo, total, []).csv_row(0, stage_index, vid)
        )
    initial_total = float(total)
    min_total = float(total)
    updates = 0
    stop_reason = "max_outer_iterations"
    if total < settings.loss_tolerance:
        return StageResult(
            grid, rows, 0, "loss_tolerance", initial_report, report, min_total, state
        )

    prev_losses = None  # first iteration runs uniform low budgets
    last_step_norm = math.inf
    for outer in range(1, settings.max_outer_iterations + 1):
        if prev_losses is None:
            plan = SchedulePlan(
                list(range(n_views)), [settings.budget_low] * n_views, math.inf
            )
        else:
            plan = schedule_views(prev_losses, settings.budget_low, settings.budget_high)

        recorded = list(per_view)
        budget_exhausted = False
        for vid in plan.view_order:
            view = views[vid]
            budget = plan.per_view_budget[vid]
            prev_view_loss = math.inf
            for _ in range(budget):
                rr = render(grid, view.camera, view.light, with_gradients=True)
                view_report, buf = total_loss(grid, [rr], [targets[vid]], weights)
                view_img = view_report.per_view_image_loss[0]
                if view_img > prev_view_loss:
                    break  # an update increased this view's loss: switch views
                recorded[vid] = view_img
                if budget == settings.budget_high and view_img < plan.avg_loss:
                    break
                try:
                    last_step_norm = adam_step(state, grid, buf)
                except NanGradientError:
                    break
                updates += 1
                prev_view_loss = view_img
                if settings.max_updates and updates >= settings.max_updates:
                    budget_exhausted = True
                    break
            if budget_exhausted:
                break

        per_view = recorded
        prev_losses = recorded
        reg, geo = _regularizer_terms(grid, weights)
        total = sum(per_view) + weights.lambda1 * reg + weights.lambda2 * geo
        report = LossReport(float(sum(per_view)), reg, geo, float(total), list(per_view))
        min_total = min(min_total, float(total))
        for vid in range(n_views):
            rows.append(
                LossReport(per_view[vid], reg, geo, total, []).csv_row(
                    outer, stage_index, vid
                )
            )
        if total > 10.0 * initial_total:
            raise StageDivergedError(
                f"stage {stage_index} diverged: total {total:.6g} > 10x initial "
                f"{initial_total:.6g}",
                partial=grid,
            )
        if total < settings.loss_tolerance:
            stop_reason = "loss_tolerance"
            break
        if last_step_norm < settings.min_step_norm:
            stop_reason = "min_step_norm"
            break
        if budget_exhausted:
            stop_reason = "update_budget"
            break
    return StageResult(
        grid, rows, updates, stop_reason, initial_report, report, min_total, state
    )


# ---------------------------------------------------------------------------
# Multi-resolution driver
# ---------------------------------------------------------------------------

@dataclass
class ReconstructionScene:
    """World-frame and lighting constants shared by every stage."""

    box_origin: np.ndarray = field(default_factory=lambda: np.array([-0.5, -0.5, -0.5]))
    box_extent: float = 1.0
    camera_distance: float = 2.0
    fov: float = math.radians(45.0)
    light_intensity: float = 1.0
    light_ambient: float = 0.1
    light_albedo: float = 1.0
    init_center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    init_radius: float = 0.45

    @property
    def box_center(self) -> np.ndarray:
        return np.asarray(self.box_origin) + 0.5 * self.box_extent

    def spacing_for(self, resolution: int) -> float:
        return self.box_extent / (resolution - 1)

    def stage_views(self, image_res: int) -> list:
        return rig_views(
            self.box_center,
            self.box_extent / 2.0,
            self.camera_distance,
            self.fov,
            image_res,
            self.light_intensity,
            self.light_ambient,
            self.light_albedo,
        )

    def initial_grid(self, resolution: int) -> SdfGrid:
        return init_sphere(
            resolution,
            self.init_center,
            self.init_radius,
            self.box_origin,
            self.spacing_for(resolution),
        )

    def image_resolutions(
        self, grid_resolutions, min_res: int = 16, max_res: int = 256
    ) -> list:
        out = []
        for n in grid_resolutions:
            probe = SdfGrid(
                n,
                np.asarray(self.box_origin),
                self.spacing_for(n),
                np.zeros((n, n, n)),
            )
            out.append(
                image_res_for(probe, self.camera_distance, self.fov, min_res, max_res)
            )
        return out


def grid_targets_provider(gt_grid: SdfGrid, threads: int = 1):
    """Target provider that re-renders a ground-truth grid at each stage's
    views and image resolution."""

    def provide(stage_index: int, views: list):
        results = render_views(gt_grid, views, with_gradients=False, threads=threads)
        return [rr.image for rr in results]

    return provide


def image_targets_provider(images: list):
    """Target provider that box-resamples fixed images to each stage's
    image resolution."""
    from .imageio import box_resample

    def provide(stage_index: int, views: list):
        if len(images) != len(views):
            raise ValueError(f"have {len(images)} target images for {len(views)} views")
        res = views[0].camera.image_height
        return [box_resample(img, res, res) for img in images]

    return provide


def reconstruct_multires(
    cfg: StageConfig,
    scene: ReconstructionScene,
    target_provider,
    weights: LossWeights | None = None,
    threads: int = 1,
    on_stage_complete=None,
):
    """Full coarse-to-fine reconstruction.

    Initializes a sphere SDF at the coarsest resolution, alternates
    ``optimize_stage`` and trilinear upsampling, and returns
    ``(final_grid, stage_results)``.  ``target_provider(stage_index, views)``
    supplies per-view target images at each stage's image resolution.
    ``on_stage_complete(stage_index, grid, result)`` runs after each stage
    (checkpointing hook).
    """
    if weights is None:
        weights = LossWeights()
    grid = scene.initial_grid(cfg.grid_resolutions[0])
    results = []
    for stage in range(len(cfg.grid_resolutions)):
        settings = cfg.settings_for(stage)
        views = scene.stage_views(settings.image_res)
        targets = target_provider(stage, views)
        result = optimize_stage(
            grid, views, targets, weights, settings, stage_index=stage, threads=threads
        )
        results.append(result)
        if on_stage_complete is not None:
            on_stage_complete(stage, grid, result)
        if stage + 1 < len(cfg.grid_resolutions):
            grid = upsample(grid, cfg.grid_resolutions[stage + 1])
    return grid, results
