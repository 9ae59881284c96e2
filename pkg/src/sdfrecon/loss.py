"""Scalar objectives and their grid-shaped gradients.

Three terms drive the reconstruction: the summed per-pixel L2 image loss, an
eikonal penalty pulling the field's gradient magnitude to 1 (the defining
property of a distance function), and a squared finite-difference Laplacian
smoothing the level sets.  The two grid regularizers are evaluated at interior
vertices and restricted to a narrow band of |SDF| <= mu * spacing around the
surface; the total is

    total = image + mask (x) (lambda1 * eikonal + lambda2 * laplacian)

with the image gradient routed through the shading tapes and the regularizer
gradients accumulated analytically through their stencils.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import GradientBuffer, SdfGrid
from .shade import RenderResult

__all__ = [
    "LossWeights",
    "LossReport",
    "CSV_HEADER",
    "image_loss",
    "eikonal_loss",
    "geometry_loss",
    "narrow_band_mask",
    "total_loss",
]

CSV_HEADER = "iteration,stage,view,image_loss,reg_loss,geo_loss,total"

_SAFE_NORM = 1e-12


@dataclass
class LossWeights:
    """Weights and switches of the total objective.

    ``eikonal_form`` selects the penalty shape: ``"distance"`` for
    ``(|grad| - 1)**2`` (default; better conditioned near zero gradients) or
    ``"squared"`` for ``(1 - |grad|**2)**2``.  ``use_mask=False`` disables the
    narrow band, making the regularizers act on every interior vertex.
    """

    lambda1: float = 0.1
    lambda2: float = 0.01
    mu: float = 1.6
    eikonal_form: str = "distance"
    use_mask: bool = True

    def __post_init__(self):
        if self.eikonal_form not in ("distance", "squared"):
            raise ValueError(f"unknown eikonal form {self.eikonal_form!r}")
        if self.mu <= 0.0:
            raise ValueError("mu must be positive")


@dataclass
class LossReport:
    """Loss terms of one evaluation; ``reg_loss``/``geo_loss`` are the masked
    sums that enter ``total``."""

    image_loss: float
    reg_loss: float
    geo_loss: float
    total: float
    per_view_image_loss: list = field(default_factory=list)

    def csv_row(self, iteration: int, stage: int, view) -> str:
        return (
            f"{iteration},{stage},{view},{self.image_loss:.12g},"
            f"{self.reg_loss:.12g},{self.geo_loss:.12g},{self.total:.12g}"
        )


def image_loss(rendered: np.ndarray, target: np.ndarray):
    """Summed squared pixel difference and its per-pixel gradient 2(r - t)."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ValueError(
            f"image dimensions differ: {rendered.shape} vs {target.shape}"
        )
    diff = rendered - target
    return float(np.sum(diff * diff)), 2.0 * diff


def _interior_gradients(grid: SdfGrid) -> np.ndarray:
    """Central-difference gradients at interior vertices, (N-2, N-2, N-2, 3)."""
    d = grid.values
    h2 = 2.0 * grid.spacing
    return np.stack(
        [
            (d[2:, 1:-1, 1:-1] - d[:-2, 1:-1, 1:-1]) / h2,
            (d[1:-1, 2:, 1:-1] - d[1:-1, :-2, 1:-1]) / h2,
            (d[1:-1, 1:-1, 2:] - d[1:-1, 1:-1, :-2]) / h2,
        ],
        axis=-1,
    )


def _interior_mask(grid: SdfGrid, mask) -> np.ndarray:
    if mask is None:
        n = grid.resolution
        return np.ones((n - 2, n - 2, n - 2), dtype=np.float64)
    return np.asarray(mask, dtype=np.float64)[1:-1, 1:-1, 1:-1]


def eikonal_loss(grid: SdfGrid, mask=None, form: str = "distance"):
    """Unit-gradient penalty summed over interior vertices, plus its gradient.

    Returns ``(value, GradientBuffer)``.  An optional boolean ``mask`` (full
    grid shape) gates each vertex's term and its gradient identically.
    """
    if grid.resolution < 3:
        raise ValueError("eikonal loss needs resolution >= 3")
    g = _interior_gradients(grid)
    m = _interior_mask(grid, mask)
    norm = np.linalg.norm(g, axis=-1)
    if form == "distance":
        value = float(np.sum(m * (norm - 1.0) ** 2))
        safe = np.where(norm < _SAFE_NORM, 1.0, norm)
        w = np.where(norm < _SAFE_NORM, 0.0, m * 2.0 * (norm - 1.0) / safe)
        coef = w[..., None] * g  # d(term)/d(G)
    elif form == "squared":
        one_minus = 1.0 - norm**2
        value = float(np.sum(m * one_minus**2))
        coef = (m * -4.0 * one_minus)[..., None] * g
    else:
        raise ValueError(f"unknown eikonal form {form!r}")

    buf = GradientBuffer.zeros_like(grid)
    b = buf.values
    h2 = 2.0 * grid.spacing
    # G_axis(v) = (d[v + e] - d[v - e]) / 2h over interior v: push the
    # per-vertex coefficient onto both stencil taps.
    b[2:, 1:-1, 1:-1] += coef[..., 0] / h2
    b[:-2, 1:-1, 1:-1] -= coef[..., 0] / h2
    b[1:-1, 2:, 1:-1] += coef[..., 1] / h2
    b[1:-1, :-2, 1:-1] -= coef[..., 1] / h2
    b[1:-1, 1:-1, 2:] += coef[..., 2] / h2
    b[1:-1, 1:-1, :-2] -= coef[..., 2] / h2
    return value, buf


def geometry_loss(grid: SdfGrid, mask=None):
    """Squared 7-point Laplacian summed over interior vertices, plus gradient."""
    if grid.resolution < 3:
        raise ValueError("geometry loss needs resolution >= 3")
    d = grid.values
    hh = grid.spacing**2
    lap = (
        d[:-2, 1:-1, 1:-1]
        + d[2:, 1:-1, 1:-1]
        + d[1:-1, :-2, 1:-1]
        + d[1:-1, 2:, 1:-1]
        + d[1:-1, 1:-1, :-2]
        + d[1:-1, 1:-1, 2:]
        - 6.0 * d[1:-1, 1:-1, 1:-1]
    ) / hh
    m = _interior_mask(grid, mask)
    value = float(np.sum(m * lap**2))

    w = 2.0 * m * lap / hh
    buf = GradientBuffer.zeros_like(grid)
    b = buf.values
    b[1:-1, 1:-1, 1:-1] -= 6.0 * w
    b[:-2, 1:-1, 1:-1] += w
    b[2:, 1:-1, 1:-1] += w
    b[1:-1, :-2, 1:-1] += w
    b[1:-1, 2:, 1:-1] += w
    b[1:-1, 1:-1, :-2] += w
    b[1:-1, 1:-1, 2:] += w
    return value, buf


def narrow_band_mask(grid: SdfGrid, mu: float) -> np.ndarray:
    """Vertices within ``mu * spacing`` of the surface (boolean grid)."""
    if not mu > 0.0:
        raise ValueError(f"mu must be positive, got {mu}")
    return np.abs(grid.values) <= mu * grid.spacing


def total_loss(
    grid: SdfGrid,
    rendered_views: list,
    target_views: list,
    weights: LossWeights | None = None,
):
    """Weighted total over any set of views, plus the combined gradient buffer.

    ``rendered_views`` are :class:`~sdfrecon.shade.RenderResult` objects;
    image gradients flow through their tapes (views rendered without tapes
    contribute value only).  Returns ``(LossReport, GradientBuffer)``.
    """
    if weights is None:
        weights = LossWeights()
    if len(rendered_views) != len(target_views):
        raise ValueError(
            f"got {len(rendered_views)} rendered views but {len(target_views)} targets"
        )
    buffer = GradientBuffer.zeros_like(grid)
    per_view = []
    for rr, target in zip(rendered_views, target_views):
        if not isinstance(rr, RenderResult):
            rr = RenderResult(np.asarray(rr))
        value, dldp = image_loss(rr.image, target)
        per_view.append(value)
        if rr.tapes is not None and len(rr.tapes):
            scale = dldp[rr.tapes.pixel_rows, rr.tapes.pixel_cols]
            rr.tapes.accumulate_scaled(buffer, scale)
    img_total = float(sum(per_view))

    mask = narrow_band_mask(grid, weights.mu) if weights.use_mask else None
    reg, reg_buf = eikonal_loss(grid, mask=mask, form=weights.eikonal_form)
    geo, geo_buf = geometry_loss(grid, mask=mask)
    buffer.add(reg_buf, weights.lambda1)
    buffer.add(geo_buf, weights.lambda2)

    total = img_total + weights.lambda1 * reg + weights.lambda2 * geo
    return LossReport(img_total, reg, geo, total, per_view), buffer
