"""exblurf command line: generate | train | render | eval | benchmark-memory."""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
import tracemalloc
from pathlib import Path

import numpy as np

from . import io
from .errors import CapacityError, NumericError
from .metrics import SSIM_WINDOW, pooled_ate, psnr, ssim
from .render import RenderConfig, render_image
from .se3 import Pose, blend_twists, exp_map_batch, init_trajectory, log_map, subframe_times
from .synth import (BlurSettings, CameraRig, SceneSpec, build_gt_grid, default_scene,
                    generate_dataset, look_at)
from .training import TrainConfig, TrainData, init_state, midpoint_poses, train, train_step

log = logging.getLogger("exblurf")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

LOCK_NAME = ".exblurf.lock"
CHECKPOINT_GLOB = "ckpt_*.bin"
FINAL_CHECKPOINT = "final.bin"
REPORT_SCHEMA = "exblurf-eval/1"


class UsageError(ValueError):
    """Bad flags or config contents; reported with exit code 2."""


# -- config parsing -----------------------------------------------------------

def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = io.load_json(path)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(cfg, dict):
        raise UsageError(f"{path}: top level must be an object")
    return cfg


def _check_keys(section: str, d: dict, allowed: set) -> None:
    extra = set(d) - allowed
    if extra:
        raise UsageError(f"{section}: unknown field(s) {sorted(extra)}")


def generation_settings(cfg: dict):
    """(SceneSpec, CameraRig, BlurSettings, n_oracle) from a generate config."""
    _check_keys("generate", cfg, {"scene", "grid_dims", "rig", "blur", "n_oracle", "seed"})
    dims = tuple(cfg.get("grid_dims", (32, 32, 32)))
    try:
        scene = cfg.get("scene", "default")
        spec = default_scene(dims) if scene == "default" else SceneSpec.from_dict(
            {**scene, "dims": scene.get("dims", dims)})
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"scene: {exc}") from exc
    rig_cfg = cfg.get("rig", {})
    _check_keys("rig", rig_cfg, set(CameraRig.__dataclass_fields__))
    rig = CameraRig(**rig_cfg)
    blur_cfg = cfg.get("blur", {})
    _check_keys("blur", blur_cfg, set(BlurSettings.__dataclass_fields__))
    blur = BlurSettings(**blur_cfg)
    for name in ("rot_max", "trans_max"):
        if getattr(blur, name) < 0:
            raise UsageError(f"blur.{name}: must be non-negative")
    n_oracle = int(cfg.get("n_oracle", 64))
    if n_oracle < 2:
        raise UsageError("n_oracle: must be >= 2")
    if rig.n_views < 2:
        raise UsageError("rig.n_views: must be >= 2")
    return spec, rig, blur, n_oracle


def train_settings(cfg: dict, seed: int | None) -> TrainConfig:
    if seed is not None:
        cfg = {**cfg, "seed": seed}
    try:
        return TrainConfig.from_dict(cfg)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"train config: {exc}") from exc


# -- helpers ------------------------------------------------------------------

@contextlib.contextmanager
def output_lock(out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as exc:
        raise OSError(f"{out_dir} is locked by another writer ({lock})") from exc
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


def apply_threads(n: int | None) -> int:
    if n is None:
        n = int(os.environ.get("EXBLURF_THREADS", "1"))
    if n < 1:
        raise UsageError("--threads: must be >= 1")
    import numba
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    return n


def latest_checkpoint(out_dir: Path) -> Path | None:
    found = sorted(out_dir.glob(CHECKPOINT_GLOB))
    return found[-1] if found else None


def checkpoint_path(out_dir: Path, iteration: int) -> Path:
    return out_dir / f"ckpt_{iteration:07d}.bin"


def _train_data(ds) -> TrainData:
    return TrainData.from_observations(ds.observations, ds.bounds_min, ds.bounds_max,
                                       ds.test_views)


# -- commands -----------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = _read_config(args.config)
    spec, rig, blur, n_oracle = generation_settings(cfg)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    ds = generate_dataset(spec, rig, blur, np.random.default_rng(seed), n_oracle=n_oracle)
    ds.meta["seed"] = seed
    out = Path(args.out)
    with output_lock(out):
        io.save_dataset(ds, out)
    print(f"wrote {len(ds.observations)} training and {len(ds.test_views)} test views to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = train_settings(_read_config(args.config), args.seed)
    ds = io.load_dataset(args.data)
    data = _train_data(ds)
    out = Path(args.out)
    with output_lock(out):
        trace_path = out / "trace.json"
        state, trace = None, []
        if args.resume:
            ckpt = latest_checkpoint(out)
            if ckpt is not None:
                state, saved_cfg = io.load_checkpoint(ckpt)
                if saved_cfg.to_dict() != cfg.to_dict():
                    raise UsageError("--resume: config differs from the checkpoint's")
                if trace_path.exists():
                    trace = [r for r in io.load_json(trace_path)["records"]
                             if r["iteration"] <= state.iteration]
                log.info("resuming from %s at iteration %d", ckpt, state.iteration)
        if state is None:
            state = init_state(cfg, data)
            io.save_checkpoint(checkpoint_path(out, 0), state, cfg)

        def save(st):
            io.save_checkpoint(checkpoint_path(out, st.iteration), st, cfg)
            io.dump_json(trace_path, {"records": trace})

        result = train(cfg, data, state=state, checkpoint=save, trace=trace)
        save(result.state)
        io.save_checkpoint(out / FINAL_CHECKPOINT, result.state, cfg)
        io.dump_json(trace_path, {"records": trace})
    print(f"trained {result.state.iteration} iterations; checkpoints in {out}")
    return EXIT_OK


def orbit_poses(ds, n: int) -> list[Pose]:
    centers = np.stack([o.initial_pose.translation for o in ds.observations])
    radius = float(np.mean(np.linalg.norm(centers[:, [0, 2]], axis=1)))
    height = float(np.mean(centers[:, 1]))
    az = np.array([np.arctan2(c[0], -c[2]) for c in centers])
    angles = np.linspace(az.min(), az.max(), n)
    return [look_at((radius * np.sin(a), height, -radius * np.cos(a))) for a in angles]


def render_poses(source: str, state, ds, n_orbit: int):
    if source == "test":
        return [(f"test_{i:03d}", tv.pose, tv.intrinsics) for i, tv in enumerate(ds.test_views)]
    if source == "midpoints":
        poses = midpoint_poses(state.trajectories())
        return [(f"view_{i:03d}_mid", p, o.intrinsics)
                for i, (p, o) in enumerate(zip(poses, ds.observations))]
    if source == "subframes":
        out = []
        for i, o in enumerate(ds.observations):
            if o.gt_trajectory is None:
                raise UsageError("--poses subframes: dataset has no ground-truth trajectories")
            rot, trans = exp_map_batch(blend_twists(o.gt_trajectory.controls, subframe_times(5)))
            out += [(f"view_{i:03d}_sub{j}", Pose(r, t), o.intrinsics)
                    for j, (r, t) in enumerate(zip(rot, trans))]
        return out
    if source == "orbit":
        k = ds.observations[0].intrinsics
        return [(f"orbit_{i:03d}", p, k) for i, p in enumerate(orbit_poses(ds, n_orbit))]
    raise UsageError(f"--poses: unknown pose source {source!r}")


def cmd_render(args) -> int:
    state, cfg = io.load_checkpoint(args.checkpoint)
    ds = io.load_dataset(args.data)
    poses = render_poses(args.poses, state, ds, args.n_orbit)
    rcfg = RenderConfig(step_ratio=cfg.step_ratio, background=tuple(cfg.background))
    grid = state.grid.astype(np.float64)
    out = Path(args.out)
    with output_lock(out):
        for name, pose, k in poses:
            img = np.clip(render_image(grid, pose, k, rcfg), 0.0, 1.0)
            io.write_image_pair(out / name, img)
    print(f"rendered {len(poses)} images to {out}")
    return EXIT_OK


def evaluate(state, cfg: TrainConfig, ds, n_ate_samples: int | None = None) -> dict:
    """Machine-readable metrics report for a trained state against a dataset."""
    has_gt = all(o.gt_trajectory is not None for o in ds.observations)
    if not ds.test_views and not has_gt:
        raise UsageError("dataset has neither test views nor ground-truth trajectories")
    report = {"schema": REPORT_SCHEMA, "iteration": state.iteration, "lpips": "n/a",
              "units": {"ate_pos": "scene units", "ate_rot": "radians"}}
    rcfg = RenderConfig(step_ratio=cfg.step_ratio, background=tuple(cfg.background))
    grid = state.grid.astype(np.float64)
    views = []
    for tv in ds.test_views:
        img = np.clip(render_image(grid, tv.pose, tv.intrinsics, rcfg), 0.0, 1.0)
        small = min(img.shape[:2]) < SSIM_WINDOW
        views.append({"psnr": psnr(img, tv.image),
                      "ssim": None if small else ssim(img, tv.image)})
    report["test_views"] = views
    report["mean_psnr"] = float(np.mean([v["psnr"] for v in views])) if views else None
    scored = [v["ssim"] for v in views if v["ssim"] is not None]
    report["mean_ssim"] = float(np.mean(scored)) if scored else None
    if len(scored) < len(views):
        report["notes"] = [f"ssim omitted for views smaller than {SSIM_WINDOW}x{SSIM_WINDOW}"]
    if has_gt:
        n = n_ate_samples or cfg.n_subframes
        res = pooled_ate(state.trajectories(), [o.gt_trajectory for o in ds.observations], n)
        report["ate"] = {
            "pooled_pos": res.pos, "pooled_rot": res.rot,
            "per_view": [{"pos": p, "rot": r} for p, r in zip(res.per_view_pos, res.per_view_rot)],
            "reversed_views": res.reversed_views, "degenerate_alignment": res.degenerate,
            "sampling": f"{n} uniform times per view, one rigid alignment over all views",
        }
    else:
        report["ate"] = None
    return report


def cmd_eval(args) -> int:
    state, cfg = io.load_checkpoint(args.checkpoint)
    ds = io.load_dataset(args.data)
    report = evaluate(state, cfg, ds)
    out = Path(args.out)
    with output_lock(out):
        io.dump_json(out / "report.json", report)
    print(json.dumps({k: report[k] for k in ("mean_psnr", "mean_ssim")}))
    return EXIT_OK


# -- memory benchmark ---------------------------------------------------------

def _benchmark_dataset(n_views: int, size: int, seed: int):
    rig = CameraRig(n_views=n_views, n_test=0, width=size, height=size, focal=1.3 * size)
    spec = default_scene((16, 16, 16))
    gt = build_gt_grid(spec)
    rng = np.random.default_rng(seed)
    targets = []
    for pose in rig.train_poses():
        targets.append(rng.random((size, size, 3)))
    from .synth import BlurObservation
    obs = [BlurObservation(img, None, rig.intrinsics(), pose)
           for img, pose in zip(targets, rig.train_poses())]
    return TrainData.from_observations(obs, spec.bounds_min, spec.bounds_max), gt


def measure_step_peak(cfg: TrainConfig, data: TrainData, warmup: int = 1) -> int:
    """Peak traced allocation (bytes) of one train_step, after warm-up steps."""
    state = init_state(cfg, data)
    for _ in range(warmup):
        train_step(state, cfg, data)
    tracemalloc.start()
    try:
        tracemalloc.reset_peak()
        base, _ = tracemalloc.get_traced_memory()
        train_step(state, cfg, data)
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    return peak - base


def linear_fit(x, y):
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    c1, c0 = np.polyfit(x, y, 1)
    pred = c0 + c1 * x
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(c0), float(c1), r2, float(np.max(np.abs(y - pred) / y))


def benchmark_memory(n_values, batch_rays: int, dims=(16, 16, 16), size: int = 24,
                     seed: int = 0, extra_batch: bool = True) -> dict:
    data, _ = _benchmark_dataset(4, size, seed)
    rows = []
    for n in n_values:
        cfg = TrainConfig(batch_rays=batch_rays, n_subframes=n, bezier_order=3,
                          init_dims=tuple(dims), total_iters=1, seed=seed)
        state = init_state(cfg, data)
        rows.append({"n_subframes": n, "batch_rays": batch_rays,
                     "model_bytes": state.grid.param_bytes,
                     "transient_bytes": measure_step_peak(cfg, data)})
    bn = [r["batch_rays"] * r["n_subframes"] for r in rows]
    c0, c1, r2, resid = linear_fit(bn, [r["transient_bytes"] for r in rows])
    report = {"rows": rows, "fit": {"c0": c0, "c1": c1, "r2": r2, "max_rel_residual": resid},
              "model_bytes_formula": "n_voxels * 28 * bytes_per_float"}
    if extra_batch:
        n_mid = sorted(n_values)[len(n_values) // 2]
        doubled = []
        for b in (batch_rays, 2 * batch_rays):
            cfg = TrainConfig(batch_rays=b, n_subframes=n_mid, bezier_order=3,
                              init_dims=tuple(dims), total_iters=1, seed=seed)
            doubled.append(measure_step_peak(cfg, data))
        report["batch_doubling"] = {"n_subframes": n_mid, "bytes": doubled,
                                    "ratio": doubled[1] / doubled[0]}
    return report


def cmd_benchmark_memory(args) -> int:
    cfg = _read_config(args.config)
    _check_keys("benchmark-memory", cfg, {"n_values", "batch_rays", "grid_dims", "image_size"})
    seed = args.seed if args.seed is not None else 0
    report = benchmark_memory(cfg.get("n_values", [5, 11, 15, 19, 21]),
                              int(cfg.get("batch_rays", 256)),
                              tuple(cfg.get("grid_dims", (16, 16, 16))),
                              int(cfg.get("image_size", 24)), seed)
    out = Path(args.out)
    with output_lock(out):
        io.dump_json(out / "memory_report.json", report)
    print(json.dumps(report["fit"]))
    return EXIT_OK


# -- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="exblurf")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=False):
        p.add_argument("--config", required=config_required)
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int)
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("generate", help="render a synthetic blurry dataset")
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="jointly optimize grid and trajectories")
    common(p, config_required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render images from a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--poses", default="test")
    p.add_argument("--n-orbit", type=int, default=8)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="PSNR/SSIM/ATE report for a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("benchmark-memory", help="per-step memory versus sub-frame count")
    common(p)
    p.set_defaults(func=cmd_benchmark_memory)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        apply_threads(args.threads)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CapacityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure at iteration {exc.iteration}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError) as exc:
        code = EXIT_IO if isinstance(exc, OSError) else EXIT_USAGE
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
