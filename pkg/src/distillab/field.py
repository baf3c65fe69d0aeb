"""Optimizable dual voxel grid with volume rendering and analytic gradients.

Density is stored pre-activation (sigma = softplus(density_raw)) and color
likewise (c = sigmoid(color_raw)), so sigma >= 0 and c in (0, 1) hold by
construction. The grid spans the cube [-1, 1]^3 with nodes at the inclusive
lattice x_i = -1 + 2 i / (R - 1); queries outside the cube return sigma = 0.

Rendering walks each ray with stratified-midpoint samples (no jitter) and
composites front to back. The backward pass is an exact hand-derived adjoint
of the same computation; both are serial per-ray numba kernels, so results
are bit-identical regardless of how callers batch the rays.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field as dc_field

import numpy as np
from numba import njit

from .imaging import PatchSpec

MAGIC_FIELD = b"DLABVOX1"


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    # exact inverse of log(1 + e^x); y must be > 0
    return y + np.log(-np.expm1(-y))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(frozen=True)
class RenderConfig:
    samples_per_ray: int = 48
    near: float = 1.2
    far: float = 4.0
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.samples_per_ray < 2:
            raise ValueError("samples_per_ray must be >= 2")
        if not self.near < self.far:
            raise ValueError("require near < far")


@dataclass
class VoxelField:
    density_raw: np.ndarray  # (R, R, R)
    color_raw: np.ndarray    # (R, R, R, 3)

    def __post_init__(self):
        r = self.density_raw.shape[0]
        if self.density_raw.shape != (r, r, r) or self.color_raw.shape != (r, r, r, 3):
            raise ValueError("grid shape mismatch")
        self.density_raw = np.ascontiguousarray(self.density_raw, dtype=np.float64)
        self.color_raw = np.ascontiguousarray(self.color_raw, dtype=np.float64)

    @property
    def resolution(self) -> int:
        return self.density_raw.shape[0]

    @classmethod
    def empty(cls, resolution: int, density: float = 0.01, gray: float = 0.5) -> "VoxelField":
        """Uniform near-empty field: sigma = density everywhere, constant color."""
        if resolution < 2:
            raise ValueError("resolution must be >= 2")
        d = np.full((resolution,) * 3, softplus_inv(density))
        c = np.full((resolution,) * 3 + (3,), _logit(gray))
        return cls(density_raw=d, color_raw=c)

    def params(self) -> dict[str, np.ndarray]:
        return {"density_raw": self.density_raw, "color_raw": self.color_raw}

    def density(self) -> np.ndarray:
        """Activated density grid sigma, shape (R, R, R)."""
        return softplus(self.density_raw)

    def copy(self) -> "VoxelField":
        return VoxelField(self.density_raw.copy(), self.color_raw.copy())

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(MAGIC_FIELD)
            f.write(struct.pack("<I", self.resolution))
            f.write(self.density_raw.astype("<f4").tobytes())
            f.write(self.color_raw.astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "VoxelField":
        with open(path, "rb") as f:
            magic = f.read(8)
            if magic != MAGIC_FIELD:
                raise ValueError("not a voxel field blob")
            (r,) = struct.unpack("<I", f.read(4))
            d = np.frombuffer(f.read(r * r * r * 4), dtype="<f4").reshape(r, r, r)
            c = np.frombuffer(f.read(r * r * r * 12), dtype="<f4").reshape(r, r, r, 3)
        return cls(d.astype(np.float64), c.astype(np.float64))


def _logit(p: float) -> float:
    return float(np.log(p / (1.0 - p)))


def sample_trilinear(fld: VoxelField, p) -> tuple[float, np.ndarray]:
    """(sigma, color) at world point p; raw grids are interpolated, then activated."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < -1.0) or np.any(p > 1.0):
        return 0.0, np.zeros(3)
    r = fld.resolution
    g = (p + 1.0) * (r - 1) / 2.0
    i0 = np.minimum(g.astype(int), r - 2)
    f = g - i0
    u = 0.0
    v = np.zeros(3)
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = ((1 - f[0]) if dx == 0 else f[0]) * ((1 - f[1]) if dy == 0 else f[1]) * (
                    (1 - f[2]) if dz == 0 else f[2])
                u += w * fld.density_raw[i0[0] + dx, i0[1] + dy, i0[2] + dz]
                v += w * fld.color_raw[i0[0] + dx, i0[1] + dy, i0[2] + dz]
    return float(softplus(u)), sigmoid(v)


def composite_ray(samples, background=(1.0, 1.0, 1.0)) -> tuple[np.ndarray, float]:
    """Front-to-back compositing of (sigma, color, delta) samples.

    Returns (pixel color, opacity). The renderer inlines the same recurrence.
    """
    bg = np.asarray(background, dtype=np.float64)
    T = 1.0
    color = np.zeros(3)
    for sigma_i, c_i, delta_i in samples:
        if delta_i <= 0:
            raise ValueError("segment lengths must be positive")
        alpha = -np.expm1(-sigma_i * delta_i)
        color += T * alpha * np.asarray(c_i, dtype=np.float64)
        T *= 1.0 - alpha
    return color + T * bg, 1.0 - T


# ---------------------------------------------------------------------------
# Numba kernels (serial over rays; deterministic accumulation order)
# ---------------------------------------------------------------------------


@njit(cache=True, fastmath=False)
def _softplus_s(x):
    if x > 30.0:
        return x
    return np.log1p(np.exp(x))


@njit(cache=True, fastmath=False)
def _sigmoid_s(x):
    if x >= 0.0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return e / (1.0 + e)


@njit(cache=True, fastmath=False)
def _render_rays(dgrid, cgrid, origin, dirs, near, far, n_samples, bg, out):
    n = dirs.shape[0]
    r = dgrid.shape[0]
    dt = (far - near) / n_samples
    scale = (r - 1) / 2.0
    for ray in range(n):
        T = 1.0
        c0 = 0.0
        c1 = 0.0
        c2 = 0.0
        for s in range(n_samples):
            t = near + (s + 0.5) * dt
            x = origin[0] + t * dirs[ray, 0]
            y = origin[1] + t * dirs[ray, 1]
            z = origin[2] + t * dirs[ray, 2]
            if x < -1.0 or x > 1.0 or y < -1.0 or y > 1.0 or z < -1.0 or z > 1.0:
                continue
            gx = (x + 1.0) * scale
            gy = (y + 1.0) * scale
            gz = (z + 1.0) * scale
            i0 = min(int(gx), r - 2)
            j0 = min(int(gy), r - 2)
            k0 = min(int(gz), r - 2)
            fx = gx - i0
            fy = gy - j0
            fz = gz - k0
            u = 0.0
            v0 = 0.0
            v1 = 0.0
            v2 = 0.0
            for dx in range(2):
                wx = fx if dx == 1 else 1.0 - fx
                for dy in range(2):
                    wxy = wx * (fy if dy == 1 else 1.0 - fy)
                    for dz in range(2):
                        w = wxy * (fz if dz == 1 else 1.0 - fz)
                        u += w * dgrid[i0 + dx, j0 + dy, k0 + dz]
                        v0 += w * cgrid[i0 + dx, j0 + dy, k0 + dz, 0]
                        v1 += w * cgrid[i0 + dx, j0 + dy, k0 + dz, 1]
                        v2 += w * cgrid[i0 + dx, j0 + dy, k0 + dz, 2]
            sigma = _softplus_s(u)
            alpha = -np.expm1(-sigma * dt)
            w_s = T * alpha
            c0 += w_s * _sigmoid_s(v0)
            c1 += w_s * _sigmoid_s(v1)
            c2 += w_s * _sigmoid_s(v2)
            T *= 1.0 - alpha
        out[ray, 0] = c0 + T * bg[0]
        out[ray, 1] = c1 + T * bg[1]
        out[ray, 2] = c2 + T * bg[2]


@njit(cache=True, fastmath=False)
def _backward_rays(dgrid, cgrid, origin, dirs, near, far, n_samples, bg, gpix, gd, gc):
    n = dirs.shape[0]
    r = dgrid.shape[0]
    dt = (far - near) / n_samples
    scale = (r - 1) / 2.0
    ii = np.empty(n_samples, dtype=np.int64)
    jj = np.empty(n_samples, dtype=np.int64)
    kk = np.empty(n_samples, dtype=np.int64)
    ffx = np.empty(n_samples)
    ffy = np.empty(n_samples)
    ffz = np.empty(n_samples)
    uu = np.empty(n_samples)
    cc = np.empty((n_samples, 3))
    vv = np.empty((n_samples, 3))
    aa = np.empty(n_samples)
    TT = np.empty(n_samples)
    inside = np.empty(n_samples, dtype=np.bool_)
    for ray in range(n):
        g0 = gpix[ray, 0]
        g1 = gpix[ray, 1]
        g2 = gpix[ray, 2]
        T = 1.0
        for s in range(n_samples):
            t = near + (s + 0.5) * dt
            x = origin[0] + t * dirs[ray, 0]
            y = origin[1] + t * dirs[ray, 1]
            z = origin[2] + t * dirs[ray, 2]
            if x < -1.0 or x > 1.0 or y < -1.0 or y > 1.0 or z < -1.0 or z > 1.0:
                inside[s] = False
                continue
            inside[s] = True
            gx = (x + 1.0) * scale
            gy = (y + 1.0) * scale
            gz = (z + 1.0) * scale
            i0 = min(int(gx), r - 2)
            j0 = min(int(gy), r - 2)
            k0 = min(int(gz), r - 2)
            fx = gx - i0
            fy = gy - j0
            fz = gz - k0
            u = 0.0
            v0 = 0.0
            v1 = 0.0
            v2 = 0.0
            for dx in range(2):
                wx = fx if dx == 1 else 1.0 - fx
                for dy in range(2):
                    wxy = wx * (fy if dy == 1 else 1.0 - fy)
                    for dz in range(2):
                        w = wxy * (fz if dz == 1 else 1.0 - fz)
                        u += w * dgrid[i0 + dx, j0 + dy, k0 + dz]
                        v0 += w * cgrid[i0 + dx, j0 + dy, k0 + dz, 0]
                        v1 += w * cgrid[i0 + dx, j0 + dy, k0 + dz, 1]
                        v2 += w * cgrid[i0 + dx, j0 + dy, k0 + dz, 2]
            sigma = _softplus_s(u)
            alpha = -np.expm1(-sigma * dt)
            ii[s] = i0
            jj[s] = j0
            kk[s] = k0
            ffx[s] = fx
            ffy[s] = fy
            ffz[s] = fz
            uu[s] = u
            vv[s, 0] = v0
            vv[s, 1] = v1
            vv[s, 2] = v2
            cc[s, 0] = _sigmoid_s(v0)
            cc[s, 1] = _sigmoid_s(v1)
            cc[s, 2] = _sigmoid_s(v2)
            aa[s] = alpha
            TT[s] = T
            T *= 1.0 - alpha
        # suffix = sum_{j>s} w_j (c_j . g) + T_end (bg . g)
        suffix = T * (bg[0] * g0 + bg[1] * g1 + bg[2] * g2)
        for s in range(n_samples - 1, -1, -1):
            if not inside[s]:
                continue
            alpha = aa[s]
            Ts = TT[s]
            cdotg = cc[s, 0] * g0 + cc[s, 1] * g1 + cc[s, 2] * g2
            w_s = Ts * alpha
            gsigma = dt * ((1.0 - alpha) * Ts * cdotg - suffix)
            suffix += w_s * cdotg
            gu = gsigma * _sigmoid_s(uu[s])
            gv0 = w_s * g0 * cc[s, 0] * (1.0 - cc[s, 0])
            gv1 = w_s * g1 * cc[s, 1] * (1.0 - cc[s, 1])
            gv2 = w_s * g2 * cc[s, 2] * (1.0 - cc[s, 2])
            i0 = ii[s]
            j0 = jj[s]
            k0 = kk[s]
            fx = ffx[s]
            fy = ffy[s]
            fz = ffz[s]
            for dx in range(2):
                wx = fx if dx == 1 else 1.0 - fx
                for dy in range(2):
                    wxy = wx * (fy if dy == 1 else 1.0 - fy)
                    for dz in range(2):
                        w = wxy * (fz if dz == 1 else 1.0 - fz)
                        gd[i0 + dx, j0 + dy, k0 + dz] += w * gu
                        gc[i0 + dx, j0 + dy, k0 + dz, 0] += w * gv0
                        gc[i0 + dx, j0 + dy, k0 + dz, 1] += w * gv1
                        gc[i0 + dx, j0 + dy, k0 + dz, 2] += w * gv2


# ---------------------------------------------------------------------------
# Public rendering API
# ---------------------------------------------------------------------------


def render_view(fld: VoxelField, camera, cfg: RenderConfig) -> np.ndarray:
    """Render the full camera image, shape (H, W, 3)."""
    origin, dirs, h, w = camera.ray_bundle()
    out = np.empty((h * w, 3))
    _render_rays(fld.density_raw, fld.color_raw, origin, dirs,
                 cfg.near, cfg.far, cfg.samples_per_ray,
                 np.asarray(cfg.background, dtype=np.float64), out)
    return out.reshape(h, w, 3)


def render_patches(fld: VoxelField, camera, cfg: RenderConfig, patches) -> list[np.ndarray]:
    """Render exactly the requested pixels; bit-identical to crops of render_view."""
    out = []
    for patch in patches:
        patch.validate(camera.image_h, camera.image_w)
        origin, dirs, h, w = camera.ray_bundle(patch)
        buf = np.empty((h * w, 3))
        _render_rays(fld.density_raw, fld.color_raw, origin, dirs,
                     cfg.near, cfg.far, cfg.samples_per_ray,
                     np.asarray(cfg.background, dtype=np.float64), buf)
        out.append(buf.reshape(h, w, 3))
    return out


def backward(fld: VoxelField, camera, cfg: RenderConfig, pixel_loss_grads: np.ndarray,
             patch: PatchSpec | None = None,
             grads: dict[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    """Exact gradients of the rendering map w.r.t. both raw grids.

    `pixel_loss_grads` must match the rendered pixels (full view, or `patch`).
    Pass `grads` to accumulate into existing buffers (rays are processed in
    index order, so accumulation is deterministic).
    """
    origin, dirs, h, w = camera.ray_bundle(patch)
    g = np.ascontiguousarray(pixel_loss_grads, dtype=np.float64)
    if g.shape != (h, w, 3):
        raise ValueError(f"pixel grads shape {g.shape} != {(h, w, 3)}")
    if grads is None:
        grads = {"density_raw": np.zeros_like(fld.density_raw),
                 "color_raw": np.zeros_like(fld.color_raw)}
    _backward_rays(fld.density_raw, fld.color_raw, origin, dirs,
                   cfg.near, cfg.far, cfg.samples_per_ray,
                   np.asarray(cfg.background, dtype=np.float64),
                   g.reshape(-1, 3), grads["density_raw"], grads["color_raw"])
    return grads


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = dc_field(default_factory=dict)
    v: dict[str, np.ndarray] = dc_field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> AdamState:
    """One bias-corrected Adam update, in place on `params`."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"grad shape mismatch for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        m_hat = m / (1 - state.beta1**t)
        v_hat = v / (1 - state.beta2**t)
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state
