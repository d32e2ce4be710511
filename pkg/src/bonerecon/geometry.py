"""Cone-beam camera conventions, perspective projection, and grid interpolation.

World coordinates are normalized so the anatomy lives in [-1, +1]^3 with
the z axis vertical. A view at gantry angle theta (degrees, about z) puts
the source at distance `source_to_axis` from the isocenter and a flat
detector perpendicular to the central ray at `source_to_detector` from
the source. AP and RL are the 0 and 90 degree views.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

WORLD_HALF_DIAGONAL = math.sqrt(3.0)


class DegenerateRayError(ValueError):
    """Raised when a point lies on or behind the source plane."""


@dataclass
class CameraGeometry:
    view: str
    angle_deg: float
    source_to_axis: float = 10.0
    source_to_detector: float = 15.0
    det_width: int = 128
    det_height: int = 128
    pixel_pitch: float = 3.5 / 128
    principal: tuple[float, float] | None = None

    def __post_init__(self):
        if not self.source_to_detector > self.source_to_axis > WORLD_HALF_DIAGONAL:
            raise ValueError(
                "need source_to_detector > source_to_axis > world half-diagonal, got "
                f"{self.source_to_detector} / {self.source_to_axis}"
            )
        if self.principal is None:
            self.principal = ((self.det_width - 1) / 2.0, (self.det_height - 1) / 2.0)

    @property
    def source(self) -> np.ndarray:
        th = math.radians(self.angle_deg)
        return self.source_to_axis * np.array([math.sin(th), -math.cos(th), 0.0])

    @property
    def view_dir(self) -> np.ndarray:
        th = math.radians(self.angle_deg)
        return np.array([-math.sin(th), math.cos(th), 0.0])

    @property
    def u_axis(self) -> np.ndarray:
        th = math.radians(self.angle_deg)
        return np.array([math.cos(th), math.sin(th), 0.0])

    @property
    def v_axis(self) -> np.ndarray:
        return np.array([0.0, 0.0, 1.0])

    def to_dict(self) -> dict:
        return {
            "view": self.view,
            "angle_deg": self.angle_deg,
            "source_to_axis": self.source_to_axis,
            "source_to_detector": self.source_to_detector,
            "det_width": self.det_width,
            "det_height": self.det_height,
            "pixel_pitch": self.pixel_pitch,
            "principal": list(self.principal),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraGeometry":
        d = dict(d)
        d["principal"] = tuple(d["principal"]) if d.get("principal") else None
        return cls(**d)


def make_geometry(angle_deg: float, det_px: int = 128, source_to_axis: float = 10.0,
                  source_to_detector: float = 15.0,
                  det_extent: float = 3.5) -> CameraGeometry:
    """Geometry for an arbitrary gantry angle with a square detector."""
    name = {0.0: "AP", 90.0: "RL"}.get(angle_deg % 360.0, f"{angle_deg:g}deg")
    return CameraGeometry(
        view=name,
        angle_deg=angle_deg,
        source_to_axis=source_to_axis,
        source_to_detector=source_to_detector,
        det_width=det_px,
        det_height=det_px,
        pixel_pitch=det_extent / det_px,
    )


def default_biplanar(det_px: int = 128, **kw) -> tuple[CameraGeometry, CameraGeometry]:
    """The default AP (0 deg) and RL (90 deg) pair."""
    return make_geometry(0.0, det_px, **kw), make_geometry(90.0, det_px, **kw)


def project_points(geom: CameraGeometry, pts: np.ndarray) -> np.ndarray:
    """Perspective-project world points [N,3] to continuous pixel (u,v) [N,2].

    Coordinates may fall outside the detector; callers clamp as needed.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    rel = pts - geom.source
    t = rel @ geom.view_dir
    if np.any(t <= 1e-12):
        raise DegenerateRayError("point on or behind the source plane")
    scale = geom.source_to_detector / t
    u = (rel @ geom.u_axis) * scale / geom.pixel_pitch + geom.principal[0]
    v = (rel @ geom.v_axis) * scale / geom.pixel_pitch + geom.principal[1]
    return np.stack([u, v], axis=1)


def project_point(geom: CameraGeometry, p) -> tuple[float, float]:
    uv = project_points(geom, np.asarray(p, dtype=np.float64).reshape(1, 3))[0]
    return float(uv[0]), float(uv[1])


def view_depths(geom: CameraGeometry, pts: np.ndarray) -> np.ndarray:
    """Perpendicular distance to the detector plane over source-to-detector.

    0 on the detector plane, 1 at the source; roughly [0,1] over the volume.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    t = (pts - geom.source) @ geom.view_dir
    return (geom.source_to_detector - t) / geom.source_to_detector


def view_depth(geom: CameraGeometry, p) -> float:
    return float(view_depths(geom, np.asarray(p, dtype=np.float64).reshape(1, 3))[0])


def _axis_interp(extent: int, q: np.ndarray):
    q = np.clip(q, 0.0, extent - 1.0)
    lo = np.minimum(q.astype(np.int64), max(extent - 2, 0))
    frac = q - lo
    hi = np.minimum(lo + 1, extent - 1)
    return lo, hi, frac


def interp(grid: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Multilinear interpolation of grid[C, *spatial] at continuous indices.

    2D grids take coords[N,2] = (u,v) with u along the last (width) axis;
    3D grids take coords[N,3] in grid-axis order. Out-of-range coordinates
    clamp to the border. Returns [N,C].
    """
    grid = np.asarray(grid, dtype=np.float64)
    coords = np.atleast_2d(np.asarray(coords, dtype=np.float64))
    if grid.ndim == 3:
        c, h, w = grid.shape
        u0, u1, tu = _axis_interp(w, coords[:, 0])
        v0, v1, tv = _axis_interp(h, coords[:, 1])
        out = (
            grid[:, v0, u0] * (1 - tv) * (1 - tu)
            + grid[:, v0, u1] * (1 - tv) * tu
            + grid[:, v1, u0] * tv * (1 - tu)
            + grid[:, v1, u1] * tv * tu
        )
        return out.T
    if grid.ndim == 4:
        c, d, h, w = grid.shape
        i0, i1, ti = _axis_interp(d, coords[:, 0])
        j0, j1, tj = _axis_interp(h, coords[:, 1])
        k0, k1, tk = _axis_interp(w, coords[:, 2])
        flat = grid.reshape(c, -1)
        out = np.zeros((coords.shape[0], c), dtype=np.float64)
        for ii, wi in ((i0, 1 - ti), (i1, ti)):
            for jj, wj in ((j0, 1 - tj), (j1, tj)):
                for kk, wk in ((k0, 1 - tk), (k1, tk)):
                    out += flat[:, (ii * h + jj) * w + kk].T * (wi * wj * wk)[:, None]
        return out
    raise ValueError(f"interp expects grid rank 3 or 4, got {grid.ndim}")


def clamp_coords(grid_shape: tuple[int, ...], coords: np.ndarray) -> np.ndarray:
    """Clamp continuous indices to the valid border (idempotent with interp)."""
    coords = np.atleast_2d(np.asarray(coords, dtype=np.float64)).copy()
    spatial = grid_shape[1:]
    if coords.shape[1] == 2:
        spatial = spatial[::-1]  # (u,v) indexes (W,H)
    for ax, extent in enumerate(spatial):
        coords[:, ax] = np.clip(coords[:, ax], 0.0, extent - 1.0)
    return coords
