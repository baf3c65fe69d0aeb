"""Progressive two-stage distillation, SDS-style baselines, and run metrics.

Stage 1 walks a deterministic DDIM ladder from high noise to an
intermediate level, regenerating per-view targets in one denoising step
from the current renders and optimizing the field for N iterations per
refresh. Stage 2 finishes the remaining ladder once with multi-step DDIM
(starting from the noised renders, not white noise), freezes the targets,
and optimizes until a budget or loss plateau.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field as dc_field, replace

import numpy as np
from scipy.ndimage import binary_dilation

from . import diffusion, imaging
from .field import (AdamState, RenderConfig, VoxelField, adam_step, backward,
                    render_patches, render_view, sigmoid)
from .imaging import PatchSpec

STRATEGIES = ("progressive", "stage1_only", "stage2_only", "sds")

# rng stream ids (component id in the counter-based split)
_STREAM_VIEW_NOISE = 1
_STREAM_PATCHES = 2
_STREAM_SDS = 3


def rng_stream(seed: int, component: int, *ids: int) -> np.random.Generator:
    """Deterministic per-component generator split off the experiment seed."""
    return np.random.default_rng([int(seed), int(component), *map(int, ids)])


@dataclass(frozen=True)
class DistillConfig:
    strategy: str = "progressive"
    K: int = 100                      # DDIM ladder length
    stage1_fraction: float = 0.6
    N: int = 130                      # field iterations per target refresh
    cfg_scale: float = 19.0
    stage2_budget: int | None = None  # defaults to 20 * N
    plateau_window: int = 200
    plateau_rel_improvement: float = 1e-4
    patch_count: int = 64
    patch_size: int = 64
    resolution_ladder: tuple[int, int] = (64, 512)
    sds_t_range: tuple[float, float] = (0.02, 0.5)
    sds_anneal_tmax: bool = False
    sds_iterations: int = 600
    lr: float = 1e-2
    sigma_sparsity: float = 1e-5
    perceptual_weight: float = 1.0
    field_resolution: int = 48
    init_density: float = 0.01
    resample_noise_per_refresh: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if not (0.0 <= self.stage1_fraction <= 1.0):
            raise ValueError("stage1_fraction must be in [0, 1]")
        if self.N < 1 or self.K < 1:
            raise ValueError("N and K must be >= 1")
        if self.cfg_scale < 0:
            raise ValueError("cfg_scale must be >= 0")
        if not (self.sds_t_range[0] <= self.sds_t_range[1]):
            raise ValueError("sds t range must be ordered")

    @property
    def budget(self) -> int:
        """Stage-2 iteration budget: the share of the total N*K iteration
        budget not consumed by stage 1, unless overridden."""
        if self.stage2_budget is not None:
            return self.stage2_budget
        return int(round(self.N * (self.K - self.s1_steps)))

    @property
    def s1_steps(self) -> int:
        if self.strategy == "stage1_only":
            return self.K
        if self.strategy == "stage2_only":
            return 0
        return int(round(self.stage1_fraction * self.K))


def desk_config(**overrides) -> DistillConfig:
    """Desk-scale defaults (the paper-scale numbers stay reachable via fields)."""
    base = dict(K=20, N=30, patch_count=16, patch_size=32,
                resolution_ladder=(32, 64), field_resolution=48)
    base.update(overrides)
    return DistillConfig(**base)


@dataclass
class TargetSet:
    images: list[np.ndarray]          # one per training camera
    t_generated: int                  # ladder position the targets came from
    eps: list[np.ndarray]             # fixed per-view noise used to generate them
    resolution: int


@dataclass
class RunReport:
    run_id: str
    strategy: str
    seed: int
    cfg_scale: float
    stage1_fraction: float
    psnr: float
    ssim: float
    mse: float
    perceptual: float
    leakage: float
    iterations: int
    seconds: float

    CSV_COLUMNS = ("run_id", "strategy", "seed", "cfg_scale", "stage1_fraction",
                   "psnr", "ssim", "mse", "perceptual", "leakage", "iterations")


# ---------------------------------------------------------------------------
# Reconstruction loss
# ---------------------------------------------------------------------------


def loss_recon(renders: list[np.ndarray], targets: list[np.ndarray],
               perceptual_weight: float = 1.0) -> tuple[float, list[np.ndarray]]:
    """Mean over views of L1 + perceptual distance, with exact pixel gradients.

    L1 is the mean absolute difference (resolution-independent scale). The
    perceptual term applies where the crop is large enough for the pyramid.
    """
    if len(renders) != len(targets):
        raise ValueError("renders/targets length mismatch")
    n = len(renders)
    total = 0.0
    grads = []
    for x, tgt in zip(renders, targets):
        if x.shape != tgt.shape:
            raise ValueError("render/target shape mismatch")
        d = x - tgt
        total += float(np.mean(np.abs(d))) / n
        g = np.sign(d) / (d.size * n)
        if perceptual_weight > 0 and min(x.shape[0], x.shape[1]) >= 16:
            pd, pg = imaging.perceptual_dist_with_grad(x, tgt)
            total += perceptual_weight * pd / n
            g = g + (perceptual_weight / n) * pg
        grads.append(g)
    return total, grads


# ---------------------------------------------------------------------------
# Target generation
# ---------------------------------------------------------------------------


def _view_noise(seed: int, view: int, res: int, refresh: int = 0) -> np.ndarray:
    return rng_stream(seed, _STREAM_VIEW_NOISE, view, res, refresh).standard_normal((res, res, 3))


def _noise_set(config: DistillConfig, n_views: int, res: int, refresh: int = 0) -> list[np.ndarray]:
    r = refresh if config.resample_noise_per_refresh else 0
    return [_view_noise(config.seed, v, res, r) for v in range(n_views)]


def _guided_eps(prior, z, t, view, cfg_scale):
    return diffusion.guided_eps(prior, z, t, view, cfg_scale)


def refresh_targets_single_step(fld: VoxelField, cameras, prior, t: int,
                                sched: diffusion.NoiseSchedule, cfg_scale: float,
                                eps_set: list[np.ndarray],
                                render_cfg: RenderConfig) -> TargetSet:
    """One-denoising-step dynamic targets from the current renders."""
    if t < 1:
        raise ValueError("t must be >= 1")
    images = []
    for v, cam in enumerate(cameras):
        x = render_view(fld, cam, render_cfg)
        z = diffusion.q_sample(x, t, eps_set[v], sched)
        eps_hat = _guided_eps(prior, z, t, v, cfg_scale)
        images.append(diffusion.eps_to_x0(z, eps_hat, t, sched))
    return TargetSet(images=images, t_generated=t, eps=list(eps_set),
                     resolution=cameras[0].image_h)


def stage2_targets(fld: VoxelField, cameras, prior, plan: diffusion.DdimPlan,
                   sched: diffusion.NoiseSchedule, config: DistillConfig,
                   render_cfg: RenderConfig) -> TargetSet:
    """Fixed targets: finish the remaining ladder with multi-step DDIM.

    With stage1_fraction = 0 the run starts from white noise at the top of
    the ladder (the static-target regime); otherwise from noised renders of
    the current field at the boundary timestep.
    """
    s1 = config.s1_steps
    res = config.resolution_ladder[-1]
    cams = [c.with_resolution(res, res) for c in cameras]
    eps_set = _noise_set(config, len(cams), res)
    t_b = plan.steps[s1]
    if t_b == 0:
        # degenerate ladder: no remaining steps; single-step targets at the
        # last stage-1 timestep
        return refresh_targets_single_step(fld, cams, prior, plan.steps[s1 - 1], sched,
                                           config.cfg_scale, eps_set, render_cfg)
    images = []
    for v, cam in enumerate(cams):
        if s1 == 0:
            z = eps_set[v].copy()
        else:
            x = render_view(fld, cam, render_cfg)
            z = diffusion.q_sample(x, t_b, eps_set[v], sched)
        images.append(diffusion.ddim_run(z, t_b, plan, sched, prior, v, config.cfg_scale))
    return TargetSet(images=images, t_generated=t_b, eps=eps_set, resolution=res)


# ---------------------------------------------------------------------------
# Field optimization against a target set
# ---------------------------------------------------------------------------


def _sample_patches(rng, config: DistillConfig, res: int, n_views: int):
    """(view, PatchSpec) pairs for one iteration; full-frame when size covers."""
    size = min(config.patch_size, res)
    out = []
    for _ in range(config.patch_count):
        view = int(rng.integers(0, n_views))
        if size >= res:
            out.append((view, PatchSpec(0, 0, res)))
        else:
            row = int(rng.integers(0, res - size + 1))
            col = int(rng.integers(0, res - size + 1))
            out.append((view, PatchSpec(row, col, size)))
    return out


def optimize_step(fld: VoxelField, cameras, targets: TargetSet, config: DistillConfig,
                  state: AdamState, rng, render_cfg: RenderConfig) -> float:
    """One Adam iteration on loss_recon over randomly sampled patches."""
    res = targets.resolution
    picks = _sample_patches(rng, config, res, len(cameras))
    renders = []
    tgt_crops = []
    for view, patch in picks:
        cam = cameras[view].with_resolution(res, res)
        renders.append(render_patches(fld, cam, render_cfg, [patch])[0])
        tgt_crops.append(imaging.crop(targets.images[view], patch))
    loss, pixel_grads = loss_recon(renders, tgt_crops, config.perceptual_weight)
    grads = {"density_raw": np.zeros_like(fld.density_raw),
             "color_raw": np.zeros_like(fld.color_raw)}
    for (view, patch), g in zip(picks, pixel_grads):
        cam = cameras[view].with_resolution(res, res)
        backward(fld, cam, render_cfg, g, patch=patch, grads=grads)
    if config.sigma_sparsity > 0.0:
        # L1 prior on density: carves voxels the photometric loss leaves
        # unconstrained (e.g. near-background-colored fog)
        grads["density_raw"] += config.sigma_sparsity * sigmoid(fld.density_raw)
    adam_step(fld.params(), grads, state)
    return loss


def stage1_run(fld: VoxelField, cameras, prior, plan: diffusion.DdimPlan,
               sched: diffusion.NoiseSchedule, config: DistillConfig,
               render_cfg: RenderConfig, history: list | None = None):
    """Dynamic-target stage: walk the top s1 ladder steps, N iterations each."""
    s1 = config.s1_steps
    if s1 < 1:
        raise ValueError("stage 1 requires at least one ladder step")
    res = config.resolution_ladder[0]
    cams = [c.with_resolution(res, res) for c in cameras]
    state = AdamState(lr=config.lr)
    rng = rng_stream(config.seed, _STREAM_PATCHES, 1)
    history = history if history is not None else []
    last_targets = None
    for refresh in range(s1):
        t = plan.steps[refresh]
        eps_set = _noise_set(config, len(cams), res, refresh)
        last_targets = refresh_targets_single_step(fld, cams, prior, t, sched,
                                                   config.cfg_scale, eps_set, render_cfg)
        for it in range(config.N):
            loss = optimize_step(fld, cameras, last_targets, config, state, rng, render_cfg)
            history.append({"phase": "stage1", "refresh": refresh, "t": t,
                            "iteration": refresh * config.N + it, "loss": loss})
    return fld, history, last_targets


def stage2_run(fld: VoxelField, cameras, targets: TargetSet, config: DistillConfig,
               render_cfg: RenderConfig, history: list | None = None):
    """Fixed-target stage: optimize until budget or loss plateau."""
    state = AdamState(lr=config.lr)
    rng = rng_stream(config.seed, _STREAM_PATCHES, 2)
    history = history if history is not None else []
    losses: list[float] = []
    w = config.plateau_window
    for it in range(config.budget):
        loss = optimize_step(fld, cameras, targets, config, state, rng, render_cfg)
        losses.append(loss)
        history.append({"phase": "stage2", "refresh": -1, "t": targets.t_generated,
                        "iteration": it, "loss": loss})
        if it >= w:
            prev = float(np.mean(losses[it - w : it - w + 20]))
            cur = float(np.mean(losses[-20:]))
            if prev - cur < config.plateau_rel_improvement * max(abs(prev), 1e-12):
                break
    return fld, history


def init_field(config: DistillConfig) -> VoxelField:
    """Near-empty gray field: early high-noise targets dominate the shaping."""
    return VoxelField.empty(config.field_resolution, density=config.init_density, gray=0.5)


# ---------------------------------------------------------------------------
# Full strategies
# ---------------------------------------------------------------------------


def distill_progressive(gt_field: VoxelField, cameras, holdout_cameras, prior,
                        config: DistillConfig, sched: diffusion.NoiseSchedule | None = None,
                        render_cfg: RenderConfig | None = None, run_id: str = "run"):
    """Run the configured strategy end to end; returns (field, report, history)."""
    if config.strategy == "sds":
        return sds_baseline(gt_field, cameras, holdout_cameras, prior, config,
                            sched=sched, render_cfg=render_cfg, run_id=run_id)
    sched = sched or diffusion.make_schedule()
    render_cfg = render_cfg or RenderConfig()
    plan = diffusion.make_plan(sched, config.K)
    t0 = time.perf_counter()
    fld = init_field(config)
    history: list[dict] = []
    if config.s1_steps >= 1:
        fld, history, _ = stage1_run(fld, cameras, prior, plan, sched, config, render_cfg, history)
    if config.strategy != "stage1_only":
        targets = stage2_targets(fld, cameras, prior, plan, sched, config, render_cfg)
        fld, history = stage2_run(fld, cameras, targets, config, render_cfg, history)
    report = make_report(fld, gt_field, holdout_cameras, render_cfg, config,
                         run_id=run_id, iterations=len(history),
                         seconds=time.perf_counter() - t0)
    return fld, report, history


def sds_baseline(gt_field: VoxelField, cameras, holdout_cameras, prior,
                 config: DistillConfig, sched: diffusion.NoiseSchedule | None = None,
                 render_cfg: RenderConfig | None = None, run_id: str = "run",
                 eval_every: int = 20):
    """Random-noise-level score distillation: fresh targets at every update.

    Noise levels are sampled uniformly in sds_t_range (fractions of
    T_train). With annealing on, the upper bound decays linearly to the
    lower bound over the run, which the divergence experiment probes.
    """
    sched = sched or diffusion.make_schedule()
    render_cfg = render_cfg or RenderConfig()
    t0 = time.perf_counter()
    fld = init_field(config)
    res = config.resolution_ladder[0]
    cams = [c.with_resolution(res, res) for c in cameras]
    state = AdamState(lr=config.lr)
    rng = rng_stream(config.seed, _STREAM_SDS)
    gt_holdout = [render_view(gt_field, c, render_cfg) for c in holdout_cameras]
    lo, hi0 = config.sds_t_range
    history: list[dict] = []
    for it in range(config.sds_iterations):
        hi = hi0
        if config.sds_anneal_tmax and config.sds_iterations > 1:
            hi = hi0 + (lo - hi0) * it / (config.sds_iterations - 1)
        t = max(1, int(round(rng.uniform(lo, hi) * sched.T_train)))
        picks = [int(rng.integers(0, len(cams))) for _ in range(config.patch_count)]
        renders = []
        tgts = []
        for v in picks:
            x = render_view(fld, cams[v], render_cfg)
            z = diffusion.q_sample(x, t, rng.standard_normal(x.shape), sched)
            eps_hat = _guided_eps(prior, z, t, v, config.cfg_scale)
            renders.append(x)
            tgts.append(diffusion.eps_to_x0(z, eps_hat, t, sched))
        loss, pixel_grads = loss_recon(renders, tgts)
        grads = {"density_raw": np.zeros_like(fld.density_raw),
                 "color_raw": np.zeros_like(fld.color_raw)}
        for v, g in zip(picks, pixel_grads):
            backward(fld, cams[v], render_cfg, g, grads=grads)
        adam_step(fld.params(), grads, state)
        row = {"phase": "sds", "refresh": -1, "t": t, "iteration": it, "loss": loss}
        if it % eval_every == 0 or it == config.sds_iterations - 1:
            hm = float(np.mean([imaging.mse(render_view(fld, c, render_cfg), g)
                                for c, g in zip(holdout_cameras, gt_holdout)]))
            row["holdout_mse"] = hm
        history.append(row)
    report = make_report(fld, gt_field, holdout_cameras, render_cfg, config,
                         run_id=run_id, iterations=len(history),
                         seconds=time.perf_counter() - t0)
    return fld, report, history


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def leakage_metric(fld: VoxelField, gt_field: VoxelField) -> float:
    """Mean density placed where the ground truth is empty.

    Empty means GT sigma < 1e-3, excluding a 2-voxel dilation of the GT
    support; a proxy for semi-transparent synthesis artifacts.
    """
    gt_sigma = gt_field.density()
    if fld.resolution != gt_field.resolution:
        # nearest-neighbor resample of the GT density onto the field's grid
        r_to, r_from = fld.resolution, gt_field.resolution
        idx = np.minimum((np.arange(r_to) * (r_from - 1) / max(r_to - 1, 1) + 0.5).astype(int),
                         r_from - 1)
        gt_sigma = gt_sigma[np.ix_(idx, idx, idx)]
    support = gt_sigma >= 1e-3
    excluded = binary_dilation(support, iterations=2)
    region = ~excluded
    if not region.any():
        return 0.0
    return float(np.mean(fld.density()[region]))


def evaluate(fld: VoxelField, gt_field: VoxelField, holdout_cameras,
             render_cfg: RenderConfig) -> dict[str, float]:
    """Held-out full-reference metrics plus density leakage."""
    psnrs, ssims, mses, percs = [], [], [], []
    for cam in holdout_cameras:
        x = render_view(fld, cam, render_cfg)
        g = render_view(gt_field, cam, render_cfg)
        mses.append(imaging.mse(x, g))
        psnrs.append(min(imaging.psnr(x, g), 99.0))
        ssims.append(imaging.ssim(x, g))
        percs.append(imaging.perceptual_dist(x, g))
    return {"psnr": float(np.mean(psnrs)), "ssim": float(np.mean(ssims)),
            "mse": float(np.mean(mses)), "perceptual": float(np.mean(percs)),
            "leakage": leakage_metric(fld, gt_field)}


def make_report(fld, gt_field, holdout_cameras, render_cfg, config: DistillConfig,
                run_id: str, iterations: int, seconds: float) -> RunReport:
    m = evaluate(fld, gt_field, holdout_cameras, render_cfg)
    return RunReport(run_id=run_id, strategy=config.strategy, seed=config.seed,
                     cfg_scale=config.cfg_scale, stage1_fraction=config.stage1_fraction,
                     iterations=iterations, seconds=seconds, **m)


def target_hf_energy(targets: TargetSet, sigma: float = 2.0) -> float:
    """Mean squared high-band value of a target set (split_bands at sigma)."""
    vals = []
    for img in targets.images:
        _, high = imaging.split_bands(img, sigma)
        vals.append(float(np.mean(high * high)))
    return float(np.mean(vals))
