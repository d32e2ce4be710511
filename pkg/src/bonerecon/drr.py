"""Cone-beam radiograph rendering from the analytic phantom.

Rays march the analytic density with the midpoint rule (no voxelization),
then Beer-Lambert maps line integrals to detector intensities. Quantum
(Poisson) and electronic (Gaussian) noise are applied in a separate,
seeded step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CameraGeometry
from .phantom import PhantomScene, bone_density, density

DOMAIN_RAW = "raw"            # line integrals
DOMAIN_INTENSITY = "intensity"  # exp(-integral), in [0, 1]
DOMAIN_MASK = "mask"          # binary foreground


@dataclass
class ProjectionImage:
    values: np.ndarray            # [H, W], row v, column u
    geometry: CameraGeometry
    domain: str = DOMAIN_INTENSITY

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.geometry.det_height, self.geometry.det_width):
            raise ValueError(
                f"image extents {self.values.shape} do not match geometry "
                f"({self.geometry.det_height}, {self.geometry.det_width})"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("image contains non-finite values")


def _pixel_rays(geom: CameraGeometry):
    """Source position plus unit ray directions [H*W, 3] through pixel centers."""
    src = geom.source
    u = (np.arange(geom.det_width) - geom.principal[0]) * geom.pixel_pitch
    v = (np.arange(geom.det_height) - geom.principal[1]) * geom.pixel_pitch
    uu, vv = np.meshgrid(u, v)  # [H, W]
    targets = (
        src
        + geom.source_to_detector * geom.view_dir
        + uu.reshape(-1, 1) * geom.u_axis
        + vv.reshape(-1, 1) * geom.v_axis
    )
    dirs = targets - src
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return src, dirs


def _cube_clip(src: np.ndarray, dirs: np.ndarray, lo: float = -1.0, hi: float = 1.0):
    """Slab-test entry/exit parameters of rays against the world cube."""
    with np.errstate(divide="ignore"):
        inv = 1.0 / dirs
    t0 = (lo - src) * inv
    t1 = (hi - src) * inv
    tmin = np.minimum(t0, t1).max(axis=1)
    tmax = np.maximum(t0, t1).min(axis=1)
    tmin = np.maximum(tmin, 0.0)
    return tmin, tmax


def render_line_integral(scene: PhantomScene, geom: CameraGeometry,
                         step: float = 0.002, bones_only: bool = False,
                         chunk: int = 4096) -> ProjectionImage:
    """Midpoint-rule line integrals of the analytic attenuation."""
    if step <= 0:
        raise ValueError("ray-march step must be positive")
    src, dirs = _pixel_rays(geom)
    tmin, tmax = _cube_clip(src, dirs)
    span = np.maximum(tmax - tmin, 0.0)
    if not np.any(span > 0):
        raise ValueError("no ray intersects the world volume for this geometry")
    n_steps = max(int(np.ceil(span.max() / step)), 1)
    mu_fn = bone_density if bones_only else density

    out = np.zeros(dirs.shape[0], dtype=np.float64)
    offsets = (np.arange(n_steps) + 0.5) / n_steps
    for lo in range(0, dirs.shape[0], chunk):
        hi = min(lo + chunk, dirs.shape[0])
        sp = span[lo:hi]
        hit = sp > 0
        if not hit.any():
            continue
        d = dirs[lo:hi][hit]
        t = tmin[lo:hi][hit, None] + sp[hit, None] * offsets[None, :]
        pts = src[None, None, :] + t[:, :, None] * d[:, None, :]
        mu = mu_fn(scene, pts.reshape(-1, 3)).reshape(t.shape)
        dt = sp[hit] / n_steps
        vals = np.zeros(hi - lo)
        vals[hit] = (mu.sum(axis=1)) * dt
        out[lo:hi] = vals
    img = out.reshape(geom.det_height, geom.det_width)
    return ProjectionImage(values=img, geometry=geom, domain=DOMAIN_RAW)


def render_drr(scene: PhantomScene, geom: CameraGeometry,
               step: float = 0.002) -> ProjectionImage:
    """Beer-Lambert detector intensity exp(-integral), flagged intensity-domain."""
    li = render_line_integral(scene, geom, step=step)
    return ProjectionImage(values=np.exp(-li.values), geometry=geom,
                           domain=DOMAIN_INTENSITY)


def render_bone_mask(scene: PhantomScene, geom: CameraGeometry,
                     step: float = 0.002) -> ProjectionImage:
    """Binary foreground mask: pixels whose ray meets bone material."""
    li = render_line_integral(scene, geom, step=step, bones_only=True)
    return ProjectionImage(values=(li.values > 0).astype(np.float64),
                           geometry=geom, domain=DOMAIN_MASK)


def apply_noise(img: ProjectionImage, photons_n0: float = 1e5,
                sigma_e: float = 1e-3, seed: int = 0) -> ProjectionImage:
    """Poisson counting noise plus Gaussian electronic noise.

    Counts are drawn as Poisson(n0 * intensity) and renormalized by n0;
    sigma_e is the electronic noise scale in normalized intensity units.
    Deterministic for a given seed.
    """
    if img.domain != DOMAIN_INTENSITY:
        raise ValueError(f"noise applies to intensity-domain images, got {img.domain!r}")
    if photons_n0 <= 0:
        raise ValueError("photons_n0 must be positive")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xD22)))
    counts = rng.poisson(photons_n0 * img.values).astype(np.float64)
    noisy = counts / photons_n0
    if sigma_e > 0:
        noisy = noisy + rng.normal(0.0, sigma_e, size=img.values.shape)
    return ProjectionImage(values=np.clip(noisy, 0.0, 1.0), geometry=img.geometry,
                           domain=DOMAIN_INTENSITY)


def to_network_input(img: ProjectionImage, log_norm_max: float = 0.4) -> np.ndarray:
    """Negative-log display normalization, rescaled to [0, 1]."""
    if img.domain != DOMAIN_INTENSITY:
        raise ValueError("network input expects an intensity-domain image")
    att = -np.log(np.maximum(img.values, 1e-9))
    return np.clip(att / log_norm_max, 0.0, 1.0)
