"""Synthetic ground-truth scenes, pinhole camera model, and view sampling.

Scenes are Gaussian-blob composites inside the unit-radius region, baked
onto a voxel grid. One deliberately thin protruding blob gives every
default scene a small articulated part that is hard to keep view-consistent.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .field import RenderConfig, VoxelField, render_view, softplus_inv, _logit

SIGMA_MAX = 50.0
BLOB_CUTOFF = 2.2  # blobs are truncated at this many radii (compact support)
_COLOR_EPS = 1e-4


@dataclass(frozen=True)
class Camera:
    """Pinhole camera orbiting the origin; up is +Y, look-at is the origin."""

    azimuth: float = 0.0     # degrees
    elevation: float = 0.0   # degrees
    radius: float = 2.5
    fov_y: float = 40.0      # degrees
    image_w: int = 64
    image_h: int = 64

    def __post_init__(self):
        if not (0.0 < self.fov_y < 120.0):
            raise ValueError("fov_y must be in (0, 120) degrees")
        if abs(self.elevation) >= 90.0:
            raise ValueError("|elevation| must be < 90 degrees")

    def position(self) -> np.ndarray:
        az = math.radians(self.azimuth)
        el = math.radians(self.elevation)
        return self.radius * np.array(
            [math.sin(az) * math.cos(el), math.sin(el), math.cos(az) * math.cos(el)])

    def with_resolution(self, w: int, h: int) -> "Camera":
        return replace(self, image_w=w, image_h=h)

    def ray_bundle(self, patch=None):
        """(origin (3,), unit directions (N, 3), height, width) for pixel centers."""
        pos = self.position()
        fwd = -pos / np.linalg.norm(pos)
        up = np.array([0.0, 1.0, 0.0])
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        cam_up = np.cross(right, fwd)
        tan_half = math.tan(math.radians(self.fov_y) / 2.0)
        aspect = self.image_w / self.image_h
        if patch is None:
            rows = np.arange(self.image_h)
            cols = np.arange(self.image_w)
            h, w = self.image_h, self.image_w
        else:
            rows = np.arange(patch.row, patch.row + patch.size)
            cols = np.arange(patch.col, patch.col + patch.size)
            h = w = patch.size
        ndc_x = ((cols + 0.5) / self.image_w * 2.0 - 1.0) * tan_half * aspect
        ndc_y = (1.0 - (rows + 0.5) / self.image_h * 2.0) * tan_half
        dirs = (fwd[None, None, :]
                + ndc_x[None, :, None] * right[None, None, :]
                + ndc_y[:, None, None] * cam_up[None, None, :])
        dirs = dirs.reshape(-1, 3)
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        return pos, np.ascontiguousarray(dirs), h, w


def camera_grid(n_az: int, n_el: int, az_range_deg=(-22.5, 22.5), el_range_deg=(-10.0, 10.0),
                radius: float = 2.5, fov_y: float = 40.0, res: int = 64) -> list[Camera]:
    """Regular azimuth x elevation grid; elevation outer, azimuth inner (row-major)."""
    if n_az < 1 or n_el < 1:
        raise ValueError("grid counts must be >= 1")

    def axis(n, lo, hi):
        if n == 1:
            return np.array([(lo + hi) / 2.0])
        return np.linspace(lo, hi, n)

    azs = axis(n_az, *az_range_deg)
    els = axis(n_el, *el_range_deg)
    return [Camera(azimuth=float(a), elevation=float(e), radius=radius, fov_y=fov_y,
                   image_w=res, image_h=res)
            for e in els for a in azs]


def holdout_cameras(n_az: int, n_el: int, az_range_deg=(-22.5, 22.5), el_range_deg=(-10.0, 10.0),
                    radius: float = 2.5, fov_y: float = 40.0, res: int = 64,
                    k: int = 4, seed: int = 0) -> list[Camera]:
    """k cameras sampled in the grid ranges, kept away from every grid node.

    Each sample must be at least a quarter grid cell (Euclidean, in cell
    units) from every training grid point; rejection-sampled, deterministic
    given the seed.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng([int(seed), 0x9E1D])
    az_lo, az_hi = az_range_deg
    el_lo, el_hi = el_range_deg
    cell_az = (az_hi - az_lo) / (n_az - 1) if n_az > 1 else max(az_hi - az_lo, 1e-9)
    cell_el = (el_hi - el_lo) / (n_el - 1) if n_el > 1 else max(el_hi - el_lo, 1e-9)
    cell_az = cell_az or 1e-9
    cell_el = cell_el or 1e-9
    grid = [(c.azimuth, c.elevation)
            for c in camera_grid(n_az, n_el, az_range_deg, el_range_deg, radius, fov_y, res)]
    out = []
    attempts = 0
    while len(out) < k:
        attempts += 1
        if attempts > 10_000:
            raise RuntimeError("holdout sampling failed after 10000 attempts; ranges too tight")
        az = rng.uniform(az_lo, az_hi)
        el = rng.uniform(el_lo, el_hi)
        d2 = min(((az - ga) / cell_az) ** 2 + ((el - ge) / cell_el) ** 2 for ga, ge in grid)
        if d2 >= 0.25**2:
            out.append(Camera(azimuth=float(az), elevation=float(el), radius=radius,
                              fov_y=fov_y, image_w=res, image_h=res))
    return out


@dataclass(frozen=True)
class Blob:
    center: tuple[float, float, float]
    radii: tuple[float, float, float]
    color: tuple[float, float, float]
    peak_density: float

    def __post_init__(self):
        if self.peak_density <= 0:
            raise ValueError("peak_density must be > 0")


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    blobs: tuple[Blob, ...]
    # per-voxel color jitter amplitude; gives renders genuine high-frequency
    # texture (the kind a low-frequency target bias visibly erodes)
    color_texture: float = 0.35

    def to_json(self) -> str:
        return json.dumps({
            "seed": self.seed,
            "color_texture": self.color_texture,
            "blobs": [{"center": list(b.center), "radii": list(b.radii),
                       "color": list(b.color), "peak_density": b.peak_density}
                      for b in self.blobs],
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SceneSpec":
        doc = json.loads(text)
        blobs = tuple(Blob(center=tuple(b["center"]), radii=tuple(b["radii"]),
                           color=tuple(b["color"]), peak_density=float(b["peak_density"]))
                      for b in doc["blobs"])
        return cls(seed=int(doc["seed"]), blobs=blobs,
                   color_texture=float(doc.get("color_texture", 0.35)))

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_json())

    @classmethod
    def load(cls, path) -> "SceneSpec":
        with open(path) as f:
            return cls.from_json(f.read())


def default_scene(seed: int = 0) -> SceneSpec:
    """A blobby main body, a few colored satellites, and one thin protrusion."""
    rng = np.random.default_rng([int(seed), 0x5CE2])
    blobs = [Blob(center=(0.0, 0.0, 0.0), radii=(0.38, 0.42, 0.36),
                  color=(0.82, 0.62, 0.45), peak_density=30.0)]
    for _ in range(3):
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        center = 0.38 * direction
        blobs.append(Blob(center=tuple(np.round(center, 4)),
                          radii=tuple(np.round(rng.uniform(0.08, 0.16, 3), 4)),
                          color=tuple(np.round(rng.uniform(0.15, 0.95, 3), 4)),
                          peak_density=float(np.round(rng.uniform(15.0, 35.0), 2))))
    # thin protruding part on the camera-facing side (+Z), tongue-like
    blobs.append(Blob(center=(0.0, -0.18, 0.52), radii=(0.10, 0.055, 0.2),
                      color=(0.85, 0.25, 0.3), peak_density=35.0))
    return SceneSpec(seed=seed, blobs=tuple(blobs))


def bake_scene(spec: SceneSpec, resolution: int = 48) -> VoxelField:
    """Evaluate the blob mixture at voxel nodes and store as a VoxelField."""
    if resolution < 8:
        raise ValueError("resolution must be >= 8")
    axis = np.linspace(-1.0, 1.0, resolution)
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    density = np.zeros((resolution,) * 3)
    weighted_color = np.zeros((resolution,) * 3 + (3,))
    for b in spec.blobs:
        d2 = (((gx - b.center[0]) / b.radii[0]) ** 2
              + ((gy - b.center[1]) / b.radii[1]) ** 2
              + ((gz - b.center[2]) / b.radii[2]) ** 2)
        # truncated Gaussian: zero beyond BLOB_CUTOFF radii so the scene has
        # a genuinely empty exterior (infinite tails would fog every ray)
        floor = math.exp(-0.5 * BLOB_CUTOFF**2)
        profile = np.maximum(np.exp(-0.5 * np.minimum(d2, BLOB_CUTOFF**2)) - floor, 0.0)
        contrib = b.peak_density * profile / (1.0 - floor)
        density += contrib
        weighted_color += contrib[..., None] * np.asarray(b.color)
    total = density.copy()
    density = np.minimum(density, SIGMA_MAX)
    color = np.where(total[..., None] > 0, weighted_color / np.maximum(total[..., None], 1e-300), 0.0)
    if spec.color_texture > 0:
        rng = np.random.default_rng([int(spec.seed), 0x7E87])
        color = color + spec.color_texture * rng.standard_normal(color.shape)
    # invert the activations so the stored raw grids reproduce sigma / color
    draw = np.where(density > 1e-12, softplus_inv(np.maximum(density, 1e-12)), -30.0)
    craw = np.log(np.clip(color, _COLOR_EPS, 1 - _COLOR_EPS)
                  / (1 - np.clip(color, _COLOR_EPS, 1 - _COLOR_EPS)))
    return VoxelField(density_raw=draw, color_raw=craw)


def render_gt(gt_field: VoxelField, cameras, cfg: RenderConfig | None = None) -> list[np.ndarray]:
    cfg = cfg or RenderConfig()
    return [render_view(gt_field, cam, cfg) for cam in cameras]
