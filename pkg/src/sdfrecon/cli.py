"""Command-line interface and run configuration.

Commands: ``render``, ``reconstruct``, ``gradcheck``, ``evaluate``,
``make-target``.  Every constant of the pipeline lives in the JSON config
(see ``DEFAULT_CONFIG``); ``--print-effective-config`` dumps the merged
result.  The ``SDFDIFF_LOG`` environment variable sets verbosity
(``debug``/``info``/``quiet``).

Exit codes: 0 success, 1 validation error, 2 numeric failure
(divergence or failed gradient check), 3 I/O error.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import math
import os
import struct
import sys
from pathlib import Path

import numpy as np

from . import tracer
from .grid import SdfGrid, init_sphere, init_torus, load_grid, save_grid
from .gradcheck import run_gradcheck
from .imageio import load_pfm, save_pfm, save_png
from .loss import CSV_HEADER, LossWeights
from .mesheval import load_obj, marching_cubes, save_obj, symmetric_hausdorff
from .optim import (
    AdamState,
    ReconstructionScene,
    StageConfig,
    StageDivergedError,
    grid_targets_provider,
    image_targets_provider,
    reconstruct_multires,
)
from .scene import Camera, View, headlight, image_res_for, rig_views
from .shade import render as render_view

log = logging.getLogger("sdfrecon")

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERIC = 2
EXIT_IO = 3

DEFAULT_CONFIG = {
    "seed": 0,
    "threads": 1,
    "deterministic": False,
    "grid": {
        "schedule": [8, 16, 32, 64],
        "origin": [-0.5, -0.5, -0.5],
        "extent": 1.0,
    },
    "camera": {
        "distance": 2.0,
        "fov_degrees": 45.0,
        "min_image_res": 16,
        "max_image_res": 256,
        "image_res": None,  # None: derive from the grid via the footprint rule
        "poses": None,  # optional explicit [{position, look_at, up}, ...]
    },
    "light": {"intensity": 1.0, "ambient": 0.1, "albedo": 1.0},
    "tracer": {"eps_factor": 1e-4, "min_advance_factor": 1e-6, "max_steps": 256},
    "loss": {
        "lambda1": 0.1,
        "lambda2": 0.01,
        "mu": 1.6,
        "eikonal_form": "distance",
        "mask": True,
    },
    "optim": {
        "lr": 0.01,
        "lr_decay": 0.5,
        "beta1": 0.9,
        "beta2": 0.999,
        "epsilon": 1e-8,
        "max_outer_iterations": 10,
        "budget_low": 5,
        "budget_high": 20,
        "loss_tolerance_factor": 1e-4,
        "min_step_norm_factor": 1e-7,
        "max_updates_per_stage": 0,
    },
    "init": {"center": [0.0, 0.0, 0.0], "radius": 0.45},
    "target": {
        "shape": "torus",
        "resolution": 64,
        "torus_major_radius": 0.28,
        "torus_minor_radius": 0.12,
        "sphere_radius": 0.3,
    },
    "eval": {"hausdorff_samples": 100000},
    "gradcheck": {
        "pixels": 1200,
        "resolution": 32,
        "fd_step": 1e-6,
        "rtol": 1e-4,
        "atol": 1e-10,
        "noise_scale": 0.05,
    },
}


class ConfigError(ValueError):
    pass


def _merge_config(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where} must be a mapping")
            out[key] = _merge_config(base[key], value, where)
        else:
            out[key] = value
    return out


def load_config(path: str | None, overrides: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            with open(path) as f:
                user = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: config root must be a JSON object")
        cfg = _merge_config(cfg, user)
    if overrides:
        cfg = _merge_config(cfg, overrides)
    _validate_config(cfg)
    return cfg


def _validate_config(cfg: dict) -> None:
    sched = cfg["grid"]["schedule"]
    if not sched or any(b <= a for a, b in zip(sched, sched[1:])) or min(sched) < 2:
        raise ConfigError(f"grid.schedule must be strictly increasing with entries >= 2, got {sched}")
    if cfg["grid"]["extent"] <= 0:
        raise ConfigError("grid.extent must be positive")
    if not 0 < cfg["camera"]["fov_degrees"] < 180:
        raise ConfigError("camera.fov_degrees must lie in (0, 180)")
    if cfg["camera"]["distance"] <= cfg["grid"]["extent"] * math.sqrt(3) / 2:
        raise ConfigError("camera.distance must exceed the box bounding-sphere radius")
    if cfg["loss"]["eikonal_form"] not in ("distance", "squared"):
        raise ConfigError("loss.eikonal_form must be 'distance' or 'squared'")
    if cfg["loss"]["mu"] <= 0:
        raise ConfigError("loss.mu must be positive")
    if cfg["init"]["radius"] <= 0:
        raise ConfigError("init.radius must be positive")
    t = cfg["target"]
    if t["shape"] not in ("torus", "sphere"):
        raise ConfigError("target.shape must be 'torus' or 'sphere'")
    if not t["torus_major_radius"] > t["torus_minor_radius"] > 0:
        raise ConfigError("target torus radii must satisfy R > r > 0")
    o = cfg["optim"]
    if not (0 <= o["beta1"] < 1 and 0 <= o["beta2"] < 1):
        raise ConfigError("optim betas must lie in [0, 1)")
    if o["budget_low"] < 1 or o["budget_high"] < o["budget_low"]:
        raise ConfigError("optim budgets must satisfy 1 <= budget_low <= budget_high")
    if cfg["threads"] < 1:
        raise ConfigError("threads must be >= 1")


def _apply_tracer_config(cfg: dict) -> None:
    tracer.EPS_FACTOR = float(cfg["tracer"]["eps_factor"])
    tracer.MIN_ADVANCE_FACTOR = float(cfg["tracer"]["min_advance_factor"])
    tracer.DEFAULT_MAX_STEPS = int(cfg["tracer"]["max_steps"])


def _scene_from_config(cfg: dict) -> ReconstructionScene:
    return ReconstructionScene(
        box_origin=np.asarray(cfg["grid"]["origin"], dtype=np.float64),
        box_extent=float(cfg["grid"]["extent"]),
        camera_distance=float(cfg["camera"]["distance"]),
        fov=math.radians(cfg["camera"]["fov_degrees"]),
        light_intensity=float(cfg["light"]["intensity"]),
        light_ambient=float(cfg["light"]["ambient"]),
        light_albedo=float(cfg["light"]["albedo"]),
        init_center=np.asarray(cfg["init"]["center"], dtype=np.float64),
        init_radius=float(cfg["init"]["radius"]),
    )


def _weights_from_config(cfg: dict) -> LossWeights:
    l = cfg["loss"]
    return LossWeights(
        lambda1=float(l["lambda1"]),
        lambda2=float(l["lambda2"]),
        mu=float(l["mu"]),
        eikonal_form=l["eikonal_form"],
        use_mask=bool(l["mask"]),
    )


def _threads_from_config(cfg: dict) -> int:
    return 1 if cfg["deterministic"] else int(cfg["threads"])


def _views_for_grid(cfg: dict, grid: SdfGrid):
    """The rig (or explicit poses) sized for rendering one grid."""
    cam = cfg["camera"]
    fov = math.radians(cam["fov_degrees"])
    if cam["image_res"] is not None:
        image_res = int(cam["image_res"])
    else:
        image_res = image_res_for(
            grid, cam["distance"], fov, cam["min_image_res"], cam["max_image_res"]
        )
    lt = cfg["light"]
    if cam["poses"]:
        views = []
        for pose in cam["poses"]:
            camera = Camera(
                position=np.asarray(pose["position"], dtype=np.float64),
                look_at=np.asarray(pose["look_at"], dtype=np.float64),
                up=np.asarray(pose.get("up", [0.0, 0.0, 1.0]), dtype=np.float64),
                vertical_fov=fov,
                image_width=image_res,
                image_height=image_res,
            )
            views.append(View(camera, headlight(camera, lt["intensity"], lt["ambient"], lt["albedo"])))
        return views
    center = np.asarray(cfg["grid"]["origin"]) + 0.5 * cfg["grid"]["extent"]
    return rig_views(
        center,
        cfg["grid"]["extent"] / 2.0,
        cam["distance"],
        fov,
        image_res,
        lt["intensity"],
        lt["ambient"],
        lt["albedo"],
    )


def _target_grid(cfg: dict) -> SdfGrid:
    t = cfg["target"]
    g = cfg["grid"]
    n = int(t["resolution"])
    origin = np.asarray(g["origin"], dtype=np.float64)
    spacing = g["extent"] / (n - 1)
    center = np.asarray(cfg["init"]["center"], dtype=np.float64)
    if t["shape"] == "torus":
        return init_torus(n, center, t["torus_major_radius"], t["torus_minor_radius"], origin, spacing)
    return init_sphere(n, center, t["sphere_radius"], origin, spacing)


# ---------------------------------------------------------------------------
# Adam-state sidecar (same framing as the grid container)
# ---------------------------------------------------------------------------

_ADAM_MAGIC = b"ADMS"
_ADAM_HEADER = struct.Struct("<4sIIQ4d")


def save_adam_state(state: AdamState, resolution: int, path) -> None:
    header = _ADAM_HEADER.pack(
        _ADAM_MAGIC, 1, resolution, state.step_count,
        state.lr, state.beta1, state.beta2, state.epsilon,
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(state.m.ravel(order="F"), dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(state.v.ravel(order="F"), dtype="<f8").tobytes())


def load_adam_state(path) -> AdamState:
    with open(path, "rb") as f:
        raw = f.read()
    magic, version, n, steps, lr, b1, b2, eps = _ADAM_HEADER.unpack_from(raw)
    if magic != _ADAM_MAGIC or version != 1:
        raise ValueError(f"{path}: not an Adam-state sidecar")
    count = n**3
    body = np.frombuffer(raw, dtype="<f8", offset=_ADAM_HEADER.size)
    if body.size != 2 * count:
        raise ValueError(f"{path}: payload size mismatch")
    m = body[:count].reshape((n, n, n), order="F").copy()
    v = body[count:].reshape((n, n, n), order="F").copy()
    return AdamState(int(steps), m, v, lr, b1, b2, eps)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _config_for(args) -> dict:
    """Merge the config file with the command-line overrides."""
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        overrides["threads"] = args.threads
    if getattr(args, "deterministic", False):
        overrides["deterministic"] = True
    return load_config(getattr(args, "config", None), overrides)


def cmd_render(args) -> int:
    cfg = _config_for(args)
    _apply_tracer_config(cfg)
    try:
        grid = load_grid(args.grid)
    except FileNotFoundError:
        log.error("grid file not found: %s", args.grid)
        return EXIT_IO
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    views = _views_for_grid(cfg, grid)
    for i, view in enumerate(views):
        rr = render_view(grid, view.camera, view.light)
        save_pfm(rr.image, out / f"view_{i:02d}.pfm")
        save_png(rr.image, out / f"view_{i:02d}.png")
    log.info("wrote %d views to %s", len(views), out)
    return EXIT_OK


def cmd_make_target(args) -> int:
    cfg = _config_for(args)
    _apply_tracer_config(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = _target_grid(cfg)
    save_grid(grid, out / "target.sdfg")
    mesh = marching_cubes(grid, 0.0)
    if not mesh.is_empty:
        save_obj(mesh, out / "target.obj")
    targets_dir = out / "targets"
    targets_dir.mkdir(exist_ok=True)
    views = _views_for_grid(cfg, grid)
    for i, view in enumerate(views):
        rr = render_view(grid, view.camera, view.light)
        save_pfm(rr.image, targets_dir / f"view_{i:02d}.pfm")
        save_png(rr.image, targets_dir / f"view_{i:02d}.png")
    log.info("wrote target grid, mesh and %d views to %s", len(views), out)
    return EXIT_OK


def _load_target_images(directory: str, n_views: int):
    images = []
    for i in range(n_views):
        path = Path(directory) / f"view_{i:02d}.pfm"
        if not path.exists():
            raise FileNotFoundError(f"missing target image: {path}")
        images.append(load_pfm(path))
    return images


def cmd_reconstruct(args) -> int:
    cfg = _config_for(args)
    _apply_tracer_config(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    threads = _threads_from_config(cfg)
    scene = _scene_from_config(cfg)
    weights = _weights_from_config(cfg)
    cam = cfg["camera"]
    schedule = list(cfg["grid"]["schedule"])
    image_res = scene.image_resolutions(schedule, cam["min_image_res"], cam["max_image_res"])
    o = cfg["optim"]
    stage_cfg = StageConfig(
        grid_resolutions=schedule,
        image_resolutions=image_res,
        max_outer_iterations=int(o["max_outer_iterations"]),
        loss_tolerance_factor=float(o["loss_tolerance_factor"]),
        min_step_norm_factor=float(o["min_step_norm_factor"]),
        lr=float(o["lr"]),
        lr_decay=float(o["lr_decay"]),
        beta1=float(o["beta1"]),
        beta2=float(o["beta2"]),
        epsilon=float(o["epsilon"]),
        budget_low=int(o["budget_low"]),
        budget_high=int(o["budget_high"]),
        max_updates_per_stage=int(o["max_updates_per_stage"]),
    )

    gt_grid = None
    if args.gt_grid:
        try:
            gt_grid = load_grid(args.gt_grid)
        except FileNotFoundError:
            log.error("ground-truth grid not found: %s", args.gt_grid)
            return EXIT_IO
        provider = grid_targets_provider(gt_grid, threads=threads)
    elif args.targets:
        images = _load_target_images(args.targets, 26 if not cam["poses"] else len(cam["poses"]))
        provider = image_targets_provider(images)
    else:
        log.error("reconstruct needs --gt-grid or --targets")
        return EXIT_VALIDATION

    rows = [CSV_HEADER]

    def checkpoint(stage, grid, result):
        save_grid(grid, out / f"stage_{stage}_grid.sdfg")
        save_adam_state(result.adam, grid.resolution, out / f"stage_{stage}_adam.adms")
        rows.extend(result.rows)
        log.info(
            "stage %d (N=%d): %d updates, stop=%s, total=%.6g",
            stage, grid.resolution, result.updates, result.stop_reason,
            result.final_report.total,
        )

    diverged = None
    try:
        final, results = reconstruct_multires(
            stage_cfg, scene, provider, weights, threads=threads, on_stage_complete=checkpoint
        )
    except StageDivergedError as exc:
        diverged = exc
        final = exc.partial
        results = []
        log.error("%s", exc)

    save_grid(final, out / "final_grid.sdfg")
    (out / "loss.csv").write_text("\n".join(rows) + "\n")
    mesh = marching_cubes(final, 0.0)
    if not mesh.is_empty:
        save_obj(mesh, out / "final_mesh.obj")

    summary = [f"final_resolution {final.resolution}"]
    if results:
        last = results[-1]
        summary.append(f"initial_image_loss_stage0 {results[0].initial_report.image_loss:.9g}")
        summary.append(f"final_image_loss {last.final_report.image_loss:.9g}")
        summary.append(f"final_total_loss {last.final_report.total:.9g}")
        summary.append(f"stages {len(results)}")
        summary.append(f"updates {sum(r.updates for r in results)}")
    if gt_grid is not None and not mesh.is_empty:
        gt_mesh = marching_cubes(gt_grid, 0.0)
        value = symmetric_hausdorff(
            mesh, gt_mesh, cfg["eval"]["hausdorff_samples"], seed=cfg["seed"],
            box_edge=cfg["grid"]["extent"],
        )
        summary.append(f"hausdorff_relative {value:.9g}")
    (out / "summary.txt").write_text("\n".join(summary) + "\n")
    if diverged is not None:
        return EXIT_NUMERIC
    log.info("reconstruction complete: %s", out / "final_grid.sdfg")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _config_for(args)
    _apply_tracer_config(cfg)
    gc = cfg["gradcheck"]
    n_pixels = gc["pixels"] if args.pixels is None else args.pixels
    seed = cfg["seed"] if args.seed is None else args.seed
    report = run_gradcheck(
        n_pixels=int(n_pixels),
        seed=int(seed),
        resolution=int(gc["resolution"]),
        step=float(gc["fd_step"]),
        rtol=float(gc["rtol"]),
        atol=float(gc["atol"]),
        noise_scale=float(gc["noise_scale"]),
    )
    print(report.summary())
    return EXIT_OK if report.passed else EXIT_NUMERIC


def cmd_evaluate(args) -> int:
    try:
        mesh_a = load_obj(args.mesh_a)
        mesh_b = load_obj(args.mesh_b)
    except FileNotFoundError as exc:
        log.error("%s", exc)
        return EXIT_IO
    value = symmetric_hausdorff(
        mesh_a, mesh_b, args.samples, seed=args.seed, box_edge=args.box_edge
    )
    print(f"{value:.9g}")
    row = f"{args.mesh_a},{args.mesh_b},{args.samples},{args.seed},{value:.9g}"
    print(row)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metric.csv").write_text("mesh_a,mesh_b,samples,seed,value\n" + row + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sdfrecon",
        description="Differentiable SDF renderer and multi-view shape reconstruction",
    )
    parser.add_argument("--print-effective-config", action="store_true",
                        help="print the merged config (defaults + file) and exit")
    sub = parser.add_subparsers(dest="command")

    def common(p):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--deterministic", action="store_true",
                       help="force single-threaded, bit-reproducible runs")

    p = sub.add_parser("render", help="render the rig views of a grid file")
    common(p)
    p.add_argument("--grid", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("make-target", help="generate an analytic target grid and its view images")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_target)

    p = sub.add_parser("reconstruct", help="multi-resolution shape reconstruction")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--gt-grid", default=None, help="ground-truth grid (targets re-rendered per stage)")
    p.add_argument("--targets", default=None, help="directory of view_XX.pfm target images")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    common(p)
    p.add_argument("--pixels", type=int, default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("evaluate", help="relative symmetric Hausdorff distance of two OBJ meshes")
    p.add_argument("mesh_a")
    p.add_argument("mesh_b")
    p.add_argument("--samples", type=int, default=100000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--box-edge", type=float, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_evaluate)
    return parser


def _setup_logging() -> None:
    level_name = os.environ.get("SDFDIFF_LOG", "info").lower()
    level = {"debug": logging.DEBUG, "info": logging.INFO, "quiet": logging.WARNING}.get(
        level_name, logging.INFO
    )
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    parser = _build_parser()
    args = parser.parse_args(argv)

    if args.print_effective_config:
        cfg = load_config(getattr(args, "config", None))
        print(json.dumps(cfg, indent=2))
        return EXIT_OK
    if args.command is None:
        parser.print_help()
        return EXIT_VALIDATION

    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_VALIDATION
    except ValueError as exc:
        log.error("%s", exc)
        return EXIT_VALIDATION
    except StageDivergedError as exc:
        log.error("%s", exc)
        return EXIT_NUMERIC
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
