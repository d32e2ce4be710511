"""Procedural 4-bone knee phantoms with exact analytic occupancy and density.

Each scene is a union of closed-form primitives per bone class
(1 patella, 2 femur, 3 fibula, 4 tibia) inside a soft-tissue envelope
ellipsoid. All randomness is a pure function of (seed, config); pairwise
bone disjointness is enforced constructively with a conservative
clearance check at generation time.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

CLASS_NAMES = {0: "background", 1: "patella", 2: "femur", 3: "fibula", 4: "tibia"}
BONE_CLASSES = (1, 2, 3, 4)


class PlacementError(RuntimeError):
    """Raised when constructive placement cannot satisfy the clearance."""


# ---------------------------------------------------------------------------
# primitives


@dataclass
class Box:
    center: tuple[float, float, float]
    half: tuple[float, float, float]

    def contains(self, pts: np.ndarray) -> np.ndarray:
        d = np.abs(pts - np.asarray(self.center))
        return np.all(d < np.asarray(self.half), axis=1)

    def bound(self):
        c = np.asarray(self.center, dtype=np.float64)
        return c, c, float(np.linalg.norm(self.half))

    def to_dict(self) -> dict:
        return {"kind": "box", "center": list(self.center), "half": list(self.half)}


@dataclass
class Ellipsoid:
    center: tuple[float, float, float]
    axes: tuple[float, float, float]

    def contains(self, pts: np.ndarray) -> np.ndarray:
        q = (pts - np.asarray(self.center)) / np.asarray(self.axes)
        return np.einsum("ij,ij->i", q, q) < 1.0

    def bound(self):
        # Tight capsule along the major axis: radius = next-largest semi-axis.
        c = np.asarray(self.center, dtype=np.float64)
        axes = np.asarray(self.axes, dtype=np.float64)
        major = int(np.argmax(axes))
        rho = float(np.delete(axes, major).max())
        off = np.zeros(3)
        off[major] = axes[major] - rho
        return c - off, c + off, rho

    def to_dict(self) -> dict:
        return {"kind": "ellipsoid", "center": list(self.center),
                "axes": list(self.axes)}


@dataclass
class Capsule:
    a: tuple[float, float, float]
    b: tuple[float, float, float]
    radius: float

    def contains(self, pts: np.ndarray) -> np.ndarray:
        a = np.asarray(self.a, dtype=np.float64)
        ab = np.asarray(self.b, dtype=np.float64) - a
        denom = float(ab @ ab)
        if denom == 0.0:
            d2 = np.einsum("ij,ij->i", pts - a, pts - a)
        else:
            t = np.clip((pts - a) @ ab / denom, 0.0, 1.0)
            close = a + t[:, None] * ab
            d2 = np.einsum("ij,ij->i", pts - close, pts - close)
        return d2 < self.radius**2

    def bound(self):
        return (np.asarray(self.a, dtype=np.float64),
                np.asarray(self.b, dtype=np.float64), float(self.radius))

    def to_dict(self) -> dict:
        return {"kind": "capsule", "a": list(self.a), "b": list(self.b),
                "radius": self.radius}


@dataclass
class TaperedSuperellipsoid:
    """Vertical superellipse cross-section, linearly scaled bottom to top."""

    center: tuple[float, float, float]
    ax: float
    ay: float
    height: float
    exponent: float = 2.5
    taper: float = 1.0

    def contains(self, pts: np.ndarray) -> np.ndarray:
        local = pts - np.asarray(self.center)
        z = local[:, 2]
        inside_z = np.abs(z) < self.height / 2
        frac = np.clip(z / self.height + 0.5, 0.0, 1.0)
        s = 1.0 + (self.taper - 1.0) * frac
        m = self.exponent
        with np.errstate(divide="ignore", invalid="ignore"):
            r = (np.abs(local[:, 0]) / (self.ax * s)) ** m \
                + (np.abs(local[:, 1]) / (self.ay * s)) ** m
        return inside_z & (r < 1.0)

    def bound(self):
        c = np.asarray(self.center, dtype=np.float64)
        off = np.array([0.0, 0.0, self.height / 2])
        # superellipse radius <= max(ax,ay) * 2^(1/2 - 1/m) for exponent m >= 2
        bulge = 2.0 ** (0.5 - 1.0 / max(self.exponent, 2.0))
        r = float(max(self.ax, self.ay) * bulge * max(1.0, self.taper))
        return c - off, c + off, r

    def to_dict(self) -> dict:
        return {"kind": "superellipsoid", "center": list(self.center),
                "ax": self.ax, "ay": self.ay, "height": self.height,
                "exponent": self.exponent, "taper": self.taper}


_PRIMITIVE_KINDS = {"box": Box, "ellipsoid": Ellipsoid, "capsule": Capsule,
                    "superellipsoid": TaperedSuperellipsoid}


def primitive_from_dict(d: dict):
    d = dict(d)
    cls = _PRIMITIVE_KINDS[d.pop("kind")]
    for key in ("center", "half", "axes", "a", "b"):
        if key in d:
            d[key] = tuple(d[key])
    return cls(**d)


# ---------------------------------------------------------------------------
# scene


@dataclass
class PhantomConfig:
    jitter: float = 1.0            # 0 reproduces the template exactly
    min_clearance: float = 0.02
    mu_bone: float = 0.5
    mu_soft: float = 0.02
    mm_per_unit: float = 100.0
    log_norm_max: float = 0.4      # negative-log display normalization for DRRs
    max_retries: int = 25


@dataclass
class PhantomScene:
    seed: int = 0
    bones: dict[int, list] = field(default_factory=dict)
    envelope: Ellipsoid | None = None
    mu_bone: float = 0.5
    mu_soft: float = 0.02
    mm_per_unit: float = 100.0
    log_norm_max: float = 0.4

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "bones": {str(k): [p.to_dict() for p in v]
                      for k, v in sorted(self.bones.items())},
            "envelope": self.envelope.to_dict() if self.envelope else None,
            "mu_bone": self.mu_bone,
            "mu_soft": self.mu_soft,
            "mm_per_unit": self.mm_per_unit,
            "log_norm_max": self.log_norm_max,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomScene":
        env = d.get("envelope")
        return cls(
            seed=d["seed"],
            bones={int(k): [primitive_from_dict(p) for p in v]
                   for k, v in d["bones"].items()},
            envelope=primitive_from_dict(env) if env else None,
            mu_bone=d["mu_bone"],
            mu_soft=d["mu_soft"],
            mm_per_unit=d["mm_per_unit"],
            log_norm_max=d["log_norm_max"],
        )


@dataclass
class Volume3D:
    """Voxel density grid; axes index (x, y, z), affine to world coordinates."""

    values: np.ndarray
    spacing: float
    origin: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.origin = np.asarray(self.origin, dtype=np.float64)
        if self.spacing <= 0:
            raise ValueError("spacing must be positive")
        if np.any(self.values < 0):
            raise ValueError("density must be nonnegative")

    @property
    def extents(self) -> tuple[int, int, int]:
        return self.values.shape

    def world_to_index(self, pts: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(pts) - self.origin) / self.spacing


def _segment_distance(p1, q1, p2, q2) -> float:
    """Minimum distance between segments p1q1 and p2q2."""
    d1 = q1 - p1
    d2 = q2 - p2
    r = p1 - p2
    a = d1 @ d1
    e = d2 @ d2
    f = d2 @ r
    if a <= 1e-30 and e <= 1e-30:
        return float(np.linalg.norm(r))
    if a <= 1e-30:
        s, t = 0.0, np.clip(f / e, 0.0, 1.0)
    else:
        c = d1 @ r
        if e <= 1e-30:
            t, s = 0.0, np.clip(-c / a, 0.0, 1.0)
        else:
            b = d1 @ d2
            denom = a * e - b * b
            s = np.clip((b * f - c * e) / denom, 0.0, 1.0) if denom > 1e-30 else 0.0
            t = (b * s + f) / e
            if t < 0.0:
                t, s = 0.0, np.clip(-c / a, 0.0, 1.0)
            elif t > 1.0:
                t, s = 1.0, np.clip((b - c) / a, 0.0, 1.0)
    c1 = p1 + s * d1
    c2 = p2 + t * d2
    return float(np.linalg.norm(c1 - c2))


def _aabb(prim) -> tuple[np.ndarray, np.ndarray]:
    a, b, r = prim.bound()
    if isinstance(prim, Ellipsoid):
        c = np.asarray(prim.center)
        ax = np.asarray(prim.axes)
        return c - ax, c + ax
    if isinstance(prim, Box):
        c = np.asarray(prim.center)
        h = np.asarray(prim.half)
        return c - h, c + h
    if isinstance(prim, TaperedSuperellipsoid):
        c = np.asarray(prim.center)
        s = max(1.0, prim.taper)
        ext = np.array([prim.ax * s, prim.ay * s, prim.height / 2])
        return c - ext, c + ext
    lo = np.minimum(a, b) - r
    hi = np.maximum(a, b) + r
    return lo, hi


def _separated(prim_a, prim_b, clearance: float) -> bool:
    """Conservative disjointness: an axis-interval gap or capsule-bound gap."""
    lo_a, hi_a = _aabb(prim_a)
    lo_b, hi_b = _aabb(prim_b)
    if np.any(lo_b - hi_a >= clearance) or np.any(lo_a - hi_b >= clearance):
        return True
    a0, a1, ra = prim_a.bound()
    b0, b1, rb = prim_b.bound()
    return _segment_distance(a0, a1, b0, b1) - ra - rb >= clearance


def _inside_envelope(prim, envelope: Ellipsoid) -> bool:
    # Conservative: the bounding capsule's end spheres must sit inside the
    # ellipsoid shrunk by the sphere radius (convex, so endpoints suffice).
    a, b, r = prim.bound()
    axes = np.asarray(envelope.axes) - r
    if np.any(axes <= 0):
        return False
    center = np.asarray(envelope.center)
    for p in (a, b):
        if np.linalg.norm((p - center) / axes) > 1.0:
            return False
        if np.any(np.abs(p) + r > 1.0):
            return False
    return True


def _template(rng: np.random.Generator, jitter: float) -> dict[int, list]:
    def u(lo, hi):
        return float(rng.uniform(lo, hi)) * jitter

    def scale(frac):
        return 1.0 + u(-frac, frac)

    fx = u(-0.025, 0.025)
    fy = u(-0.025, 0.025)
    cw = 0.13 + u(-0.015, 0.015)
    femur = [
        Capsule(a=(fx, fy, 0.26 + u(-0.02, 0.02)),
                b=(fx + u(-0.03, 0.03), fy + u(-0.03, 0.03), 0.72 + u(-0.03, 0.03)),
                radius=0.17 * scale(0.06)),
        Ellipsoid(center=(fx - cw, fy + 0.02, 0.21 + u(-0.02, 0.02)),
                  axes=(0.17 * scale(0.06), 0.19 * scale(0.06), 0.16 * scale(0.06))),
        Ellipsoid(center=(fx + cw, fy + 0.02, 0.21 + u(-0.02, 0.02)),
                  axes=(0.17 * scale(0.06), 0.19 * scale(0.06), 0.16 * scale(0.06))),
    ]
    tx = -0.05 + u(-0.02, 0.02)
    ty = u(-0.02, 0.02)
    tibia = [
        TaperedSuperellipsoid(center=(tx, ty, -0.50 + u(-0.02, 0.02)),
                              ax=0.16 * scale(0.06), ay=0.15 * scale(0.06),
                              height=0.56 * scale(0.05),
                              exponent=2.5 + u(-0.5, 0.5),
                              taper=0.85 + u(-0.1, 0.1)),
        Ellipsoid(center=(tx, ty, -0.20 + u(-0.02, 0.02)),
                  axes=(0.20 * scale(0.06), 0.20 * scale(0.06), 0.12 * scale(0.06))),
    ]
    patella = [
        Ellipsoid(center=(u(-0.03, 0.03), -0.42 + u(-0.015, 0.015),
                          0.08 + u(-0.03, 0.03)),
                  axes=(0.19 * scale(0.06), 0.13 * scale(0.06),
                        0.20 * scale(0.06))),
    ]
    fibula = [
        Capsule(a=(0.33 + u(-0.015, 0.015), 0.09 + u(-0.015, 0.015),
                   -0.24 + u(-0.015, 0.015)),
                b=(0.355 + u(-0.015, 0.015), 0.115 + u(-0.015, 0.015),
                   -0.60 + u(-0.015, 0.015)),
                radius=0.095 * scale(0.06)),
    ]
    return {1: patella, 2: femur, 3: fibula, 4: tibia}


DEFAULT_ENVELOPE = Ellipsoid(center=(0.0, 0.0, 0.0), axes=(0.68, 0.66, 0.98))


def generate_scene(seed: int, config: PhantomConfig | None = None) -> PhantomScene:
    """Deterministic scene for a seed; retries jitter until clearance holds."""
    config = config or PhantomConfig()
    for attempt in range(config.max_retries):
        rng = np.random.default_rng(np.random.SeedSequence((seed, attempt)))
        bones = _template(rng, config.jitter)
        prims = [(cls, p) for cls, plist in bones.items() for p in plist]
        ok = all(_inside_envelope(p, DEFAULT_ENVELOPE) for _, p in prims)
        if ok:
            for i in range(len(prims)):
                for j in range(i + 1, len(prims)):
                    if prims[i][0] != prims[j][0] and not _separated(
                            prims[i][1], prims[j][1], config.min_clearance):
                        ok = False
                        break
                if not ok:
                    break
        if ok:
            return PhantomScene(
                seed=seed, bones=bones, envelope=replace(DEFAULT_ENVELOPE),
                mu_bone=config.mu_bone, mu_soft=config.mu_soft,
                mm_per_unit=config.mm_per_unit,
                log_norm_max=config.log_norm_max,
            )
    raise PlacementError(
        f"could not place disjoint bones for seed {seed} "
        f"after {config.max_retries} attempts"
    )


# ---------------------------------------------------------------------------
# oracles


def occupancy_labels(scene: PhantomScene, pts: np.ndarray) -> np.ndarray:
    """Exact class labels (0..4) for points [N,3]; bones are disjoint."""
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    labels = np.zeros(pts.shape[0], dtype=np.int64)
    for cls in BONE_CLASSES:
        inside = np.zeros(pts.shape[0], dtype=bool)
        for prim in scene.bones.get(cls, ()):
            inside |= prim.contains(pts)
        labels[inside & (labels == 0)] = cls
    return labels


def one_hot(labels: np.ndarray, n_classes: int = 5) -> np.ndarray:
    out = np.zeros((len(labels), n_classes), dtype=np.float64)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def occupancy_oracle(scene: PhantomScene, p) -> np.ndarray:
    """One-hot 5-vector for a single world point."""
    return one_hot(occupancy_labels(scene, np.asarray(p).reshape(1, 3)))[0]


def density(scene: PhantomScene, pts: np.ndarray) -> np.ndarray:
    """Attenuation per unit length at points [N,3]."""
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    mu = np.zeros(pts.shape[0], dtype=np.float64)
    if scene.envelope is not None:
        mu[scene.envelope.contains(pts)] = scene.mu_soft
    bone = np.zeros(pts.shape[0], dtype=bool)
    for cls in BONE_CLASSES:
        for prim in scene.bones.get(cls, ()):
            bone |= prim.contains(pts)
    mu[bone] = scene.mu_bone
    return mu


def bone_density(scene: PhantomScene, pts: np.ndarray) -> np.ndarray:
    """Attenuation from bone material only (soft tissue ignored)."""
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    bone = np.zeros(pts.shape[0], dtype=bool)
    for cls in BONE_CLASSES:
        for prim in scene.bones.get(cls, ()):
            bone |= prim.contains(pts)
    return np.where(bone, scene.mu_bone, 0.0)


def voxel_centers(resolution: int) -> np.ndarray:
    """Cell-centered 1D coordinates covering [-1, 1]."""
    spacing = 2.0 / resolution
    return -1.0 + spacing * (np.arange(resolution) + 0.5)


def density_volume(scene: PhantomScene, resolution: int) -> Volume3D:
    """Synthetic CT: voxel centers classified against the analytic scene."""
    if resolution < 16:
        raise ValueError(f"resolution must be >= 16, got {resolution}")
    c = voxel_centers(resolution)
    xs, ys, zs = np.meshgrid(c, c, c, indexing="ij")
    pts = np.stack([xs.ravel(), ys.ravel(), zs.ravel()], axis=1)
    values = density(scene, pts).reshape(resolution, resolution, resolution)
    spacing = 2.0 / resolution
    return Volume3D(values=values, spacing=spacing,
                    origin=np.full(3, -1.0 + spacing / 2))


def mesh_oracle(scene: PhantomScene, bone: int, resolution: int = 192):
    """Ground-truth surface: marching cubes over the analytic bone indicator."""
    from . import isosurface

    if bone not in BONE_CLASSES:
        raise ValueError(f"bone class must be in {BONE_CLASSES}, got {bone}")
    coords = np.linspace(-1.0, 1.0, resolution)
    xs, ys, zs = np.meshgrid(coords, coords, coords, indexing="ij")
    pts = np.stack([xs.ravel(), ys.ravel(), zs.ravel()], axis=1)
    inside = np.zeros(pts.shape[0], dtype=bool)
    for prim in scene.bones.get(bone, ()):
        inside |= prim.contains(pts)
    if not inside.any():
        raise ValueError(f"bone {bone} is empty in scene {scene.seed}")
    fieldv = inside.astype(np.float64).reshape(resolution, resolution, resolution)
    mesh = isosurface.marching_cubes(fieldv, iso=0.5)
    if isosurface.mesh_volume(mesh) < 0:
        mesh.triangles = mesh.triangles[:, ::-1]
    mesh.class_id = bone
    return mesh
