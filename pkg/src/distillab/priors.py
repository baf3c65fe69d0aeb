"""Pluggable 2D denoiser priors.

Two implementations of the predict_eps(z_t, t, view) contract:

* OracleDenoiser — analytically controllable stand-in for a trained
  diffusion prior. It models exactly two behaviors: per-view inconsistency
  (a smooth seeded additive field on top of the ground-truth view) and
  noise-level-dependent trust in its input (at low noise it mostly copies
  its input with a mild blur; at high noise it mostly predicts its target).
* ToyDenoiser — a tiny trainable convolutional noise predictor with a
  sinusoidal timestep embedding and a learned per-view embedding, trained
  on the standard noise-regression objective.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from . import diffusion, imaging
from .field import AdamState, adam_step

_ORACLE_STREAM = 0x0AC1E


class DenoiserPrior(Protocol):
    def predict_eps(self, z_t: np.ndarray, t: int, view: int | None) -> np.ndarray: ...


@dataclass(frozen=True)
class OracleConfig:
    inconsistency_amplitude: float = 0.05
    inconsistency_smoothness: float = 4.0   # pixels
    max_blur_radius: float = 6.0            # pixels
    guidance_calibration: float = 1.0 / 18.0

    def __post_init__(self):
        if self.inconsistency_amplitude < 0 or self.max_blur_radius < 0:
            raise ValueError("amplitude and blur radius must be >= 0")
        if self.guidance_calibration <= 0:
            raise ValueError("guidance_calibration must be > 0")


class OracleDenoiser:
    """Denoiser emulating a diffusion prior's documented failure modes.

    Conditional targets are the ground-truth views plus a smooth per-view
    inconsistency field; the unconditional target is the global mean image.
    The trust weight w(t) = rho / (rho + 1), with rho the noise-to-signal
    ratio, interpolates between the target (high noise) and a blurred copy
    of the input (low noise).
    """

    def __init__(self, cfg: OracleConfig, gt_views: list[np.ndarray], sched: diffusion.NoiseSchedule):
        self.cfg = cfg
        self.sched = sched
        self.guidance_calibration = cfg.guidance_calibration
        self._gt_full = [imaging.as_image(v) for v in gt_views]
        self._mean_full = np.mean(self._gt_full, axis=0)
        self._cache: dict[tuple[int | None, int, int], np.ndarray] = {}

    def _inconsistency(self, view: int, h: int, w: int) -> np.ndarray:
        base_h, base_w = self._gt_full[0].shape[:2]
        rng = np.random.default_rng([int(view), _ORACLE_STREAM])
        noise = rng.standard_normal((base_h, base_w, 3))
        sm = imaging.gaussian_blur(noise, self.cfg.inconsistency_smoothness)
        rms = float(np.sqrt(np.mean(sm * sm)))
        sm *= self.cfg.inconsistency_amplitude / max(rms, 1e-12)
        if (h, w) != (base_h, base_w):
            sm = imaging.resample(sm, w, h)
        return sm

    def target(self, view: int | None, h: int, w: int) -> np.ndarray:
        """The (possibly inconsistent) clean target the oracle steers toward."""
        key = (view, h, w)
        if key not in self._cache:
            if view is None:
                g = self._mean_full
                if g.shape[:2] != (h, w):
                    g = imaging.resample(g, w, h)
                self._cache[key] = np.clip(g, 0.0, 1.0)
            else:
                g = self._gt_full[view]
                if g.shape[:2] != (h, w):
                    g = imaging.resample(g, w, h)
                eta = self._inconsistency(view, h, w) if self.cfg.inconsistency_amplitude > 0 else 0.0
                self._cache[key] = np.clip(g + eta, 0.0, 1.0)
        return self._cache[key]

    def predict_x0(self, z_t: np.ndarray, t: int, view: int | None) -> np.ndarray:
        if t < 1:
            raise ValueError("t must be >= 1")
        rho = self.sched.noise_to_signal(t)
        blur_r = self.cfg.max_blur_radius * min(1.0, rho)
        x_in = imaging.gaussian_blur(z_t / self.sched.sqrt_ab(t), blur_r)
        h, w = z_t.shape[:2]
        tgt = self.target(view, h, w)
        trust = rho / (rho + 1.0)
        return trust * tgt + (1.0 - trust) * x_in

    def predict_eps(self, z_t: np.ndarray, t: int, view: int | None) -> np.ndarray:
        return diffusion.x0_to_eps(z_t, self.predict_x0(z_t, t, view), t, self.sched)


# ---------------------------------------------------------------------------
# Toy trainable denoiser
# ---------------------------------------------------------------------------

_TOY_CH = 8
_TOY_TEMB = 8
MAGIC_TOY = b"DLABTOY1"


def _conv3x3(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """3x3 convolution with clamp-to-edge padding; w is (Cout, Cin, 3, 3)."""
    h, wd = x.shape[:2]
    p = np.pad(x, ((1, 1), (1, 1), (0, 0)), mode="edge")
    out = np.broadcast_to(b, (h, wd, w.shape[0])).copy()
    for dy in range(3):
        for dx in range(3):
            out += p[dy : dy + h, dx : dx + wd] @ w[:, :, dy, dx].T
    return out


def _conv3x3_grad(x: np.ndarray, w: np.ndarray, gout: np.ndarray):
    """Gradients (gx, gw, gb) of _conv3x3 given upstream gout."""
    h, wd = x.shape[:2]
    p = np.pad(x, ((1, 1), (1, 1), (0, 0)), mode="edge")
    gw = np.zeros_like(w)
    gp = np.zeros_like(p)
    for dy in range(3):
        for dx in range(3):
            window = p[dy : dy + h, dx : dx + wd]
            gw[:, :, dy, dx] = np.einsum("hwo,hwc->oc", gout, window)
            gp[dy : dy + h, dx : dx + wd] += gout @ w[:, :, dy, dx]
    gx = imaging._fold_pad_grad(gp)
    gb = gout.sum(axis=(0, 1))
    return gx, gw, gb


def _t_features(t: int, T_train: int) -> np.ndarray:
    """Sinusoidal timestep features, dim _TOY_TEMB."""
    x = t / T_train
    freqs = 2.0 ** np.arange(_TOY_TEMB // 2)
    ang = np.pi * x * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


class ToyDenoiser:
    """3-layer, 8-channel convolutional noise predictor in pixel space."""

    def __init__(self, n_views: int, seed: int = 0, T_train: int = 1000):
        self.n_views = n_views
        self.T_train = T_train
        rng = np.random.default_rng([int(seed), 0x70F])
        def winit(co, ci):
            return rng.standard_normal((co, ci, 3, 3)) * np.sqrt(2.0 / (ci * 9))
        self.params: dict[str, np.ndarray] = {
            "w1": winit(_TOY_CH, 3), "b1": np.zeros(_TOY_CH),
            "w2": winit(_TOY_CH, _TOY_CH), "b2": np.zeros(_TOY_CH),
            "w3": winit(3, _TOY_CH), "b3": np.zeros(3),
            "wt": rng.standard_normal((_TOY_TEMB, _TOY_CH)) * 0.1,
            # last row is the unconditional (null view) embedding
            "wv": np.zeros((n_views + 1, _TOY_CH)),
        }

    def _embed(self, t: int, view: int | None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        tf = _t_features(t, self.T_train)
        vidx = self.n_views if view is None else int(view)
        emb = tf @ self.params["wt"] + self.params["wv"][vidx]
        return emb, tf, np.array(vidx)

    def _forward(self, z: np.ndarray, t: int, view: int | None):
        p = self.params
        emb, tf, vidx = self._embed(t, view)
        a1 = _conv3x3(z, p["w1"], p["b1"]) + emb
        h1 = np.maximum(a1, 0.0)
        a2 = _conv3x3(h1, p["w2"], p["b2"])
        h2 = np.maximum(a2, 0.0)
        out = _conv3x3(h2, p["w3"], p["b3"])
        return out, (z, tf, vidx, a1, h1, a2, h2)

    def predict_eps(self, z_t: np.ndarray, t: int, view: int | None) -> np.ndarray:
        if t < 1:
            raise ValueError("t must be >= 1")
        return self._forward(z_t, t, view)[0]

    def _backward(self, cache, gout: np.ndarray, grads: dict[str, np.ndarray]):
        p = self.params
        z, tf, vidx, a1, h1, a2, h2 = cache
        gh2, gw3, gb3 = _conv3x3_grad(h2, p["w3"], gout)
        grads["w3"] += gw3
        grads["b3"] += gb3
        ga2 = gh2 * (a2 > 0)
        gh1, gw2, gb2 = _conv3x3_grad(h1, p["w2"], ga2)
        grads["w2"] += gw2
        grads["b2"] += gb2
        ga1 = gh1 * (a1 > 0)
        _, gw1, gb1 = _conv3x3_grad(z, p["w1"], ga1)
        grads["w1"] += gw1
        grads["b1"] += gb1
        gemb = ga1.sum(axis=(0, 1))
        grads["wt"] += np.outer(tf, gemb)
        grads["wv"][int(vidx)] += gemb

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(MAGIC_TOY)
            f.write(struct.pack("<II", self.n_views, self.T_train))
            for name in sorted(self.params):
                arr = self.params[name]
                f.write(struct.pack("<I", arr.ndim))
                f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                f.write(arr.astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "ToyDenoiser":
        with open(path, "rb") as f:
            if f.read(8) != MAGIC_TOY:
                raise ValueError("not a toy denoiser blob")
            n_views, T_train = struct.unpack("<II", f.read(8))
            net = cls(n_views=n_views, T_train=T_train)
            for name in sorted(net.params):
                (ndim,) = struct.unpack("<I", f.read(4))
                shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
                n = int(np.prod(shape))
                arr = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(shape)
                net.params[name] = arr.astype(np.float64)
        return net


def smooth_trace(trace, window: int = 50) -> np.ndarray:
    """Trailing moving average of a loss trace."""
    trace = np.asarray(trace, dtype=np.float64)
    if len(trace) == 0:
        return trace
    csum = np.concatenate([[0.0], np.cumsum(trace)])
    idx = np.arange(1, len(trace) + 1)
    lo = np.maximum(idx - window, 0)
    return (csum[idx] - csum[lo]) / (idx - lo)


def toy_train(net: ToyDenoiser, dataset: list[tuple[int, np.ndarray]], sched: diffusion.NoiseSchedule,
              steps: int, lr: float = 1e-3, seed: int = 0, batch_size: int = 4,
              null_view_fraction: float = 0.1) -> tuple[ToyDenoiser, np.ndarray]:
    """Minibatch Adam on the noise-regression objective E||eps - eps_hat||^2.

    A fraction of batches trains the null-view embedding (classifier-free
    style). Returns the trained net and the raw per-step loss trace; use
    smooth_trace for a monotone-friendly view of it.
    """
    if not dataset:
        raise ValueError("dataset must be non-empty")
    rng = np.random.default_rng([int(seed), 0x7247])
    state = AdamState(lr=lr, beta1=0.9, beta2=0.999)
    trace = np.zeros(steps)
    for step in range(steps):
        grads = {k: np.zeros_like(v) for k, v in net.params.items()}
        use_null = rng.uniform() < null_view_fraction
        loss = 0.0
        for _ in range(batch_size):
            view, img = dataset[int(rng.integers(len(dataset)))]
            t = int(rng.integers(1, sched.T_train + 1))
            eps = rng.standard_normal(img.shape)
            z = diffusion.q_sample(img, t, eps, sched)
            pred, cache = net._forward(z, t, None if use_null else view)
            diff = pred - eps
            loss += float(np.mean(diff * diff))
            net._backward(cache, (2.0 / (diff.size * batch_size)) * diff, grads)
        adam_step(net.params, grads, state)
        trace[step] = loss / batch_size
    return net, trace
