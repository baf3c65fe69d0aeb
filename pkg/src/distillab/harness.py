"""Experiment orchestration: JSON configs, CLI, runs, and sweeps.

One JSON document fully describes an experiment; every run directory gets
an echo of the resolved config, so a run is reproducible from its own
artifacts. Wall-clock timings go to timing.csv, never to metrics.csv,
which must be byte-stable across reruns.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, diffusion, distill, imaging, scene
from .field import RenderConfig, VoxelField
from .priors import OracleConfig, OracleDenoiser, ToyDenoiser, toy_train

THREADS_ENV = "DISTILLAB_THREADS"

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "scene": {"path": None, "seed": 0},
    "gt_resolution": 48,
    "grid": {"n_az": 8, "n_el": 8, "az_range": [-22.5, 22.5], "el_range": [-10.0, 10.0],
             "radius": 2.5, "fov_y": 40.0, "res": 64},
    "holdout_k": 4,
    "schedule": {"T_train": 1000, "beta_min": 1e-4, "beta_max": 2e-2},
    "prior": {"kind": "oracle", "inconsistency_amplitude": 0.05,
              "inconsistency_smoothness": 4.0, "max_blur_radius": 6.0,
              "guidance_calibration": 1.0 / 18.0, "weights_path": None},
    "render": {"samples_per_ray": 48, "near": 1.2, "far": 4.0,
               "background": [1.0, 1.0, 1.0]},
    "distill": {"strategy": "progressive", "K": 20, "stage1_fraction": 0.6, "N": 30,
                "cfg_scale": 19.0, "stage2_budget": None, "plateau_window": 200,
                "plateau_rel_improvement": 1e-4, "patch_count": 16, "patch_size": 64,
                "resolution_ladder": [32, 64], "sds_t_range": [0.02, 0.5],
                "sds_anneal_tmax": False, "sds_iterations": 600, "lr": 1e-2,
                "field_resolution": 48, "init_density": 0.01,
                "resample_noise_per_refresh": False, "seed": 0},
    "output_dir": "runs",
    "dump_images": False,
}


class ConfigError(ValueError):
    """Bad configuration or usage; maps to exit code 2."""


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        here = f"{path}.{k}" if path else k
        if k not in base:
            raise ConfigError(f"unknown config key: {here}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = _merge(base[k], v, here)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path: str | None = None, overrides: list[str] | None = None,
                seed: int | None = None) -> dict:
    """Resolve defaults + config file + dotted `key=value` overrides."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            with open(path) as f:
                cfg = _merge(cfg, json.load(f))
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file is not valid JSON: {e}") from e
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, _, raw = item.partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown config key: {key}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key: {key}")
        node[parts[-1]] = value
    if seed is not None:
        cfg["seed"] = int(seed)
        cfg["distill"]["seed"] = int(seed)
    return cfg


# ---------------------------------------------------------------------------
# Building the pieces from a config
# ---------------------------------------------------------------------------


def build_scene_spec(cfg: dict) -> scene.SceneSpec:
    sc = cfg["scene"]
    if sc["path"] is not None:
        if not os.path.exists(sc["path"]):
            raise ConfigError(f"scene file not found: {sc['path']}")
        return scene.SceneSpec.load(sc["path"])
    return scene.default_scene(int(sc["seed"]))


def build_cameras(cfg: dict) -> list[scene.Camera]:
    g = cfg["grid"]
    return scene.camera_grid(g["n_az"], g["n_el"], tuple(g["az_range"]), tuple(g["el_range"]),
                             g["radius"], g["fov_y"], g["res"])


def build_holdout(cfg: dict) -> list[scene.Camera]:
    g = cfg["grid"]
    return scene.holdout_cameras(g["n_az"], g["n_el"], tuple(g["az_range"]),
                                 tuple(g["el_range"]), g["radius"], g["fov_y"], g["res"],
                                 k=cfg["holdout_k"], seed=cfg["seed"])


def build_schedule(cfg: dict) -> diffusion.NoiseSchedule:
    s = cfg["schedule"]
    return diffusion.make_schedule(s["T_train"], s["beta_min"], s["beta_max"])


def build_render_cfg(cfg: dict) -> RenderConfig:
    r = cfg["render"]
    return RenderConfig(samples_per_ray=r["samples_per_ray"], near=r["near"], far=r["far"],
                        background=tuple(r["background"]))


def build_distill_cfg(cfg: dict) -> distill.DistillConfig:
    d = dict(cfg["distill"])
    d["resolution_ladder"] = tuple(d["resolution_ladder"])
    d["sds_t_range"] = tuple(d["sds_t_range"])
    try:
        return distill.DistillConfig(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad distill config: {e}") from e


def build_prior(cfg: dict, gt_field: VoxelField, cameras, render_cfg, sched):
    p = cfg["prior"]
    if p["kind"] == "oracle":
        gt_views = scene.render_gt(gt_field, cameras, render_cfg)
        ocfg = OracleConfig(inconsistency_amplitude=p["inconsistency_amplitude"],
                            inconsistency_smoothness=p["inconsistency_smoothness"],
                            max_blur_radius=p["max_blur_radius"],
                            guidance_calibration=p["guidance_calibration"])
        return OracleDenoiser(ocfg, gt_views, sched)
    if p["kind"] == "toy":
        if not p["weights_path"]:
            raise ConfigError("prior.kind=toy requires prior.weights_path")
        if not os.path.exists(p["weights_path"]):
            raise ConfigError(f"prior weights not found: {p['weights_path']}")
        return ToyDenoiser.load(p["weights_path"])
    raise ConfigError(f"unknown prior kind: {p['kind']}")


# ---------------------------------------------------------------------------
# CSV / artifact output
# ---------------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics_csv(path, reports: list[distill.RunReport]) -> None:
    cols = distill.RunReport.CSV_COLUMNS
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for r in reports:
            w.writerow([_fmt(getattr(r, c)) for c in cols])


def write_history_csv(path, history: list[dict]) -> None:
    cols = ("phase", "refresh", "t", "iteration", "loss", "holdout_mse")
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for row in history:
            w.writerow([_fmt(row[c]) if c in row else "" for c in cols])


def run_experiment(cfg: dict, out_dir: str | os.PathLike | None = None) -> distill.RunReport:
    """Bake GT, build the prior, run the strategy, evaluate, write artifacts."""
    out = Path(out_dir if out_dir is not None else cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    spec = build_scene_spec(cfg)
    gt_field = scene.bake_scene(spec, cfg["gt_resolution"])
    cameras = build_cameras(cfg)
    holdout = build_holdout(cfg)
    sched = build_schedule(cfg)
    render_cfg = build_render_cfg(cfg)
    dcfg = build_distill_cfg(cfg)
    prior = build_prior(cfg, gt_field, cameras, render_cfg, sched)
    run_id = f"{dcfg.strategy}_s{dcfg.seed}"

    fld, report, history = distill.distill_progressive(
        gt_field, cameras, holdout, prior, dcfg, sched=sched,
        render_cfg=render_cfg, run_id=run_id)

    with open(out / "config.json", "w") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)
    write_metrics_csv(out / "metrics.csv", [report])
    write_history_csv(out / "history.csv", history)
    with open(out / "timing.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["run_id", "seconds"])
        w.writerow([report.run_id, f"{report.seconds:.3f}"])
    fld.save(out / "field.bin")
    for i, cam in enumerate(holdout):
        from .field import render_view
        imaging.write_ppm(render_view(fld, cam, render_cfg), out / f"holdout_{i:02d}.ppm")
        if cfg["dump_images"]:
            imaging.write_ppm(render_view(gt_field, cam, render_cfg), out / f"holdout_{i:02d}_gt.ppm")
    if cfg["dump_images"]:
        for i, cam in enumerate(cameras):
            from .field import render_view
            imaging.write_ppm(render_view(fld, cam, render_cfg), out / f"train_{i:03d}.ppm")
    return report


SWEEP_AXES = ("cfg_scale", "stage1_fraction", "strategy")
SWEEP_DEFAULTS = {"cfg_scale": [5.0, 10.0, 19.0, 30.0],
                  "stage1_fraction": [1.0, 0.8, 0.6, 0.3, 0.0]}


def _sweep_one(args):
    cfg, out_dir = args
    try:
        report = run_experiment(cfg, out_dir)
        return report, None
    except Exception as e:  # keep partial sweep results, mark the failure
        return None, f"{type(e).__name__}: {e}"


def run_sweep(base_cfg: dict, axis: str, values: list, seeds: list[int],
              out_dir: str | os.PathLike, threads: int = 1) -> Path:
    """Cross product of values x seeds; aggregate mean/stddev per value."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}")
    if not values or not seeds:
        raise ConfigError("sweep needs non-empty values and seeds")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = []
    for value in values:
        for seed in seeds:
            cfg = copy.deepcopy(base_cfg)
            cfg["distill"][axis] = value
            cfg["seed"] = int(seed)
            cfg["distill"]["seed"] = int(seed)
            sub = out / f"{axis}_{value}_seed{seed}"
            jobs.append((cfg, sub))
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_sweep_one, jobs))
    else:
        results = [_sweep_one(j) for j in jobs]

    rows_path = out / "sweep_runs.csv"
    with open(rows_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("axis", "value", "seed", "status") + distill.RunReport.CSV_COLUMNS[5:])
        for (cfg, _), (report, err) in zip(jobs, results):
            value, seed = cfg["distill"][axis], cfg["seed"]
            if report is None:
                w.writerow([axis, value, seed, f"failed: {err}"] + [""] * 6)
            else:
                w.writerow([axis, value, seed, "ok"]
                           + [_fmt(getattr(report, c)) for c in distill.RunReport.CSV_COLUMNS[5:]])

    agg_path = out / "sweep.csv"
    metric_cols = ("psnr", "ssim", "mse", "perceptual", "leakage")
    with open(agg_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["axis", "value", "n_ok"]
                   + [f"{m}_{s}" for m in metric_cols for s in ("mean", "std")])
        for value in values:
            ok = [r for (cfg, _), (r, _) in zip(jobs, results)
                  if cfg["distill"][axis] == value and r is not None]
            row = [axis, value, len(ok)]
            for m in metric_cols:
                vals = np.array([getattr(r, m) for r in ok]) if ok else np.array([np.nan])
                row += [_fmt(float(np.mean(vals))), _fmt(float(np.std(vals)))]
            w.writerow(row)
    return agg_path


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------


def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="distillab",
                                description="3D distillation strategy lab on voxel radiance fields")
    p.add_argument("--version", action="version", version=f"distillab {__version__}")
    sub = p.add_subparsers(dest="command")

    def common(sp):
        sp.add_argument("--config", default=None, help="experiment config JSON")
        sp.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="dotted config override")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--threads", type=int, default=_default_threads())
        sp.add_argument("--dump-images", action="store_true")

    sp = sub.add_parser("gen-scene", help="write a synthetic scene spec JSON")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("render", help="render a saved field to PPM")
    sp.add_argument("--field", required=True)
    sp.add_argument("--camera", required=True, metavar="AZ,EL")
    sp.add_argument("--res", type=int, default=64)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("train-prior", help="train the toy denoiser on a scene")
    common(sp)
    sp.add_argument("--scene", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--steps", type=int, default=2000)

    sp = sub.add_parser("distill", help="run one distillation experiment")
    common(sp)
    sp.add_argument("--out", default=None, help="output directory (default: config output_dir)")

    sp = sub.add_parser("eval", help="evaluate a saved field against a scene")
    common(sp)
    sp.add_argument("--field", required=True)

    sp = sub.add_parser("sweep", help="run an ablation sweep")
    common(sp)
    sp.add_argument("--axis", required=True, choices=SWEEP_AXES)
    sp.add_argument("--values", default=None, help="comma-separated values")
    sp.add_argument("--seeds", default="0", help="comma-separated seeds")
    sp.add_argument("--out", default=None)
    return p


def cli(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    if argv is None:
        argv = sys.argv[1:]
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return _dispatch(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


def _dispatch(args) -> int:
    if args.command == "gen-scene":
        scene.default_scene(args.seed).save(args.out)
        print(args.out)
        return 0

    if args.command == "render":
        try:
            az, el = (float(x) for x in args.camera.split(","))
        except ValueError:
            raise ConfigError("--camera expects 'azimuth,elevation' in degrees")
        if not os.path.exists(args.field):
            raise ConfigError(f"field file not found: {args.field}")
        fld = VoxelField.load(args.field)
        cam = scene.Camera(azimuth=az, elevation=el, image_w=args.res, image_h=args.res)
        from .field import render_view
        imaging.write_ppm(render_view(fld, cam, RenderConfig()), args.out)
        print(args.out)
        return 0

    cfg = load_config(args.config, args.overrides, seed=args.seed)

    if args.command == "train-prior":
        if not os.path.exists(args.scene):
            raise ConfigError(f"scene file not found: {args.scene}")
        spec = scene.SceneSpec.load(args.scene)
        gt_field = scene.bake_scene(spec, cfg["gt_resolution"])
        g = cfg["grid"]
        cams = scene.camera_grid(4, 4, tuple(g["az_range"]), tuple(g["el_range"]),
                                 g["radius"], g["fov_y"], 32)
        views = scene.render_gt(gt_field, cams, build_render_cfg(cfg))
        sched = build_schedule(cfg)
        net = ToyDenoiser(n_views=len(cams), seed=cfg["seed"], T_train=sched.T_train)
        net, trace = toy_train(net, list(enumerate(views)), sched, steps=args.steps,
                               seed=cfg["seed"])
        net.save(args.out)
        print(f"{args.out} final_loss={trace[-50:].mean():.4f}")
        return 0

    if args.command == "distill":
        report = run_experiment(cfg, args.out)
        print(f"{report.run_id}: psnr={report.psnr:.2f} ssim={report.ssim:.4f} "
              f"mse={report.mse:.5f} perceptual={report.perceptual:.5f} "
              f"leakage={report.leakage:.4f}")
        return 0

    if args.command == "eval":
        if not os.path.exists(args.field):
            raise ConfigError(f"field file not found: {args.field}")
        fld = VoxelField.load(args.field)
        spec = build_scene_spec(cfg)
        gt_field = scene.bake_scene(spec, cfg["gt_resolution"])
        holdout = build_holdout(cfg)
        metrics = distill.evaluate(fld, gt_field, holdout, build_render_cfg(cfg))
        print(",".join(f"{k}={v:.6f}" for k, v in metrics.items()))
        return 0

    if args.command == "sweep":
        if args.values is None:
            if args.axis not in SWEEP_DEFAULTS:
                raise ConfigError("--values is required for axis 'strategy'")
            values = SWEEP_DEFAULTS[args.axis]
        elif args.axis == "strategy":
            values = args.values.split(",")
        else:
            values = [float(v) for v in args.values.split(",")]
        seeds = [int(s) for s in args.seeds.split(",")]
        out = args.out or cfg["output_dir"]
        path = run_sweep(cfg, args.axis, values, seeds, out, threads=args.threads)
        print(str(path))
        return 0

    raise ConfigError(f"unknown command {args.command!r}")


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()
