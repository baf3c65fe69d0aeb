"""Forward-process noise schedule, deterministic DDIM stepping, and guidance.

All operations are pure and deterministic; noise is always supplied by the
caller. Timesteps are integers in [0, T_train], with alpha_bar[0] == 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta forward process constants in double precision."""

    T_train: int
    betas: np.ndarray       # shape (T_train + 1,); betas[0] unused (= betas[1])
    alpha_bar: np.ndarray   # shape (T_train + 1,); alpha_bar[0] == 1

    def sqrt_ab(self, t: int) -> float:
        return float(np.sqrt(self.alpha_bar[t]))

    def sqrt_1mab(self, t: int) -> float:
        return float(np.sqrt(1.0 - self.alpha_bar[t]))

    def noise_to_signal(self, t: int) -> float:
        """rho(t) = sqrt(1 - alpha_bar) / sqrt(alpha_bar)."""
        return self.sqrt_1mab(t) / self.sqrt_ab(t)


def make_schedule(T_train: int = 1000, beta_min: float = 1e-4, beta_max: float = 2e-2) -> NoiseSchedule:
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError("require 0 < beta_min <= beta_max < 1")
    if T_train < 1:
        raise ValueError("T_train must be >= 1")
    betas = np.zeros(T_train + 1)
    betas[1:] = np.linspace(beta_min, beta_max, T_train)
    alpha_bar = np.cumprod(1.0 - betas)
    return NoiseSchedule(T_train=T_train, betas=betas, alpha_bar=alpha_bar)


@dataclass(frozen=True)
class DdimPlan:
    """Descending timestep ladder t_K > ... > t_1 > t_0 = 0."""

    steps: tuple[int, ...]

    def __post_init__(self):
        s = self.steps
        if len(s) < 2 or s[-1] != 0:
            raise ValueError("ladder must end at 0 and contain at least one step")
        if any(a <= b for a, b in zip(s, s[1:])):
            raise ValueError("ladder must be strictly descending")

    @property
    def K(self) -> int:
        return len(self.steps) - 1

    def index_of(self, t: int) -> int:
        try:
            return self.steps.index(t)
        except ValueError:
            raise ValueError(f"timestep {t} not on the DDIM ladder") from None


def make_plan(sched: NoiseSchedule, K: int = 100) -> DdimPlan:
    """Subsample K+1 timesteps uniformly from [0, T_train], descending."""
    if not (1 <= K <= sched.T_train):
        raise ValueError("require 1 <= K <= T_train")
    steps = [int(round(k * sched.T_train / K)) for k in range(K, -1, -1)]
    return DdimPlan(steps=tuple(steps))


def _check_t(sched: NoiseSchedule, t: int, min_t: int = 0) -> None:
    if not (min_t <= t <= sched.T_train):
        raise ValueError(f"timestep {t} outside [{min_t}, {sched.T_train}]")


def q_sample(x0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Forward noising: z_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
    _check_t(sched, t)
    if x0.shape != eps.shape:
        raise ValueError("x0/eps shape mismatch")
    return sched.sqrt_ab(t) * x0 + sched.sqrt_1mab(t) * eps


def eps_to_x0(z_t: np.ndarray, eps_hat: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    _check_t(sched, t, min_t=1)
    if z_t.shape != eps_hat.shape:
        raise ValueError("z/eps shape mismatch")
    return (z_t - sched.sqrt_1mab(t) * eps_hat) / sched.sqrt_ab(t)


def x0_to_eps(z_t: np.ndarray, x0_hat: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    _check_t(sched, t, min_t=1)
    if z_t.shape != x0_hat.shape:
        raise ValueError("z/x0 shape mismatch")
    return (z_t - sched.sqrt_ab(t) * x0_hat) / sched.sqrt_1mab(t)


def cfg_combine(eps_uncond: np.ndarray, eps_cond: np.ndarray, scale: float) -> np.ndarray:
    """Classifier-free guidance: eps_u + s (eps_c - eps_u)."""
    if eps_uncond.shape != eps_cond.shape:
        raise ValueError("eps shape mismatch")
    return eps_uncond + scale * (eps_cond - eps_uncond)


def guided_eps(denoiser, z: np.ndarray, t: int, view, cfg_scale: float) -> np.ndarray:
    """Guided noise prediction honoring the prior's gap calibration.

    A prior may expose `guidance_calibration`, the factor relating its raw
    conditional/unconditional gap to a unit-strength guidance push; the
    combine becomes eps_c + g (s - 1)(eps_c - eps_u). Priors without the
    attribute get the textbook combine (g = 1).
    """
    if cfg_scale == 1.0:
        return denoiser.predict_eps(z, t, view)
    gap = getattr(denoiser, "guidance_calibration", 1.0)
    eps_c = denoiser.predict_eps(z, t, view)
    eps_u = denoiser.predict_eps(z, t, None)
    return eps_c + gap * (cfg_scale - 1.0) * (eps_c - eps_u)


def ddim_step(z_t: np.ndarray, eps_hat: np.ndarray, t: int, t_next: int, sched: NoiseSchedule) -> np.ndarray:
    """Deterministic (eta = 0) DDIM update from t to t_next < t."""
    if not (t > t_next >= 0):
        raise ValueError("require t > t_next >= 0")
    x0_hat = eps_to_x0(z_t, eps_hat, t, sched)
    if t_next == 0:
        return x0_hat
    return sched.sqrt_ab(t_next) * x0_hat + sched.sqrt_1mab(t_next) * eps_hat


def ddim_run(z_start: np.ndarray, t_start: int, plan: DdimPlan, sched: NoiseSchedule,
             denoiser, view, cfg_scale: float) -> np.ndarray:
    """Iterate DDIM from t_start down the ladder; return the final clean estimate.

    `denoiser` has the prior contract: predict_eps(z, t, view_or_None).
    Guidance is applied at every step via guided_eps.
    """
    i = plan.index_of(t_start)
    z = z_start
    for t, t_next in zip(plan.steps[i:], plan.steps[i + 1 :]):
        z = ddim_step(z, guided_eps(denoiser, z, t, view, cfg_scale), t, t_next, sched)
    return z
