"""Seed localisation from an airway branch.

An airway and its pulmonary artery run side by side.  A natural cubic spline
is fitted through the airway centerline.  Planes cut orthogonal to the spline
at fixed arc-length stations then form a curved cylindrical ROI.  Soft tissue
in that ROI is opened with growing ball kernels until a compact component
remains near the airway.  The artery seed is that component's centroid in the
most proximal frame, and the initial direction points toward its distal
centroid.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage
from scipy.interpolate import CubicSpline

from .preprocess import SOFT_TISSUE_LEVEL, median_filter_3x3, suppress_airway
from .volgrid import Mask, PlaneFrame, Volume, ball_offsets, orthonormal_basis, resample_plane

ROI_HALF_WIDTH_MM = 50.0
ROI_INTERVAL_MM = 1.0
ROI_PITCH_MM = 0.5
MAX_EXTENT_MM = 40.0
MAX_OPENING_RADIUS = 10

# Gauss-Legendre nodes for the arc-length integral over each table sub-interval.
_GL_X, _GL_W = np.polynomial.legendre.leggauss(5)
_SUBDIV = 32


class SeedingError(RuntimeError):
    """No artery could be isolated next to an airway branch."""


# --------------------------------------------------------------------------
# Airway centerline spline


@dataclass(eq=False)
class AirwayPath:
    """Natural cubic spline through ordered airway centerline points, proximal first.

    The spline is built on chord length and exposed through arc length ``s``
    (mm from the first point).
    """

    points: np.ndarray
    spline: CubicSpline
    label: str = "airway"
    _u: np.ndarray = None  # chord parameter table
    _s: np.ndarray = None  # arc length at each table entry

    @property
    def length(self) -> float:
        return float(self._s[-1])

    @property
    def knot_arclength(self) -> np.ndarray:
        return self._s[::_SUBDIV].copy()

    def _param(self, s) -> np.ndarray:
        s = np.clip(np.asarray(s, dtype=float), 0.0, self.length)
        u = np.interp(s, self._s, self._u)
        # one Newton step on the local arc length removes the interpolation error
        j = np.clip(np.searchsorted(self._u, u, side="right") - 1, 0, len(self._u) - 2)
        partial = _arc(self.spline, self._u[j], u)
        speed = np.linalg.norm(self.spline(u, 1), axis=-1)
        return u - (self._s[j] + partial - s) / np.maximum(speed, 1e-12)

    def __call__(self, s) -> np.ndarray:
        return self.spline(self._param(s))

    def tangent(self, s) -> np.ndarray:
        d = self.spline(self._param(s), 1)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def stations(self, interval: float) -> np.ndarray:
        """Arc-length stations ``0, interval, 2*interval, ...`` up to the path length."""
        if interval <= 0:
            raise ValueError("interval must be positive")
        n = int(math.floor(self.length / interval + 1e-9)) + 1
        return np.arange(n) * interval


def _arc(spline, u0, u1) -> np.ndarray:
    u0 = np.asarray(u0, dtype=float)
    u1 = np.asarray(u1, dtype=float)
    half = 0.5 * (u1 - u0)
    mid = 0.5 * (u1 + u0)
    nodes = mid[..., None] + half[..., None] * _GL_X
    speed = np.linalg.norm(spline(nodes, 1), axis=-1)
    return half * (speed * _GL_W).sum(axis=-1)


def fit_centerline_spline(points, label: str = "airway") -> AirwayPath:
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError("centerline points must be an (n, 3) array")
    if len(pts) < 4:
        raise ValueError(f"a cubic centerline spline needs at least 4 points, got {len(pts)}")
    chords = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    if np.any(chords < 1e-9):
        raise ValueError("consecutive centerline points coincide")
    knots = np.concatenate([[0.0], np.cumsum(chords)])
    spline = CubicSpline(knots, pts, bc_type="natural")
    # dense table, knots included, for the arc-length inverse
    frac = np.arange(_SUBDIV) / _SUBDIV
    u = np.concatenate([(knots[:-1, None] + frac * chords[:, None]).ravel(), knots[-1:]])
    s = np.concatenate([[0.0], np.cumsum(_arc(spline, u[:-1], u[1:]))])
    return AirwayPath(pts, spline, label, u, s)


# --------------------------------------------------------------------------
# Curved ROI


@dataclass(eq=False)
class RoiStack:
    """Planes cut orthogonal to the airway spline, frame 0 most proximal."""

    frames: list[PlaneFrame]
    stations: np.ndarray
    interval: float
    pixel_pitch: float
    half_width: float
    path: Optional[AirwayPath] = None

    def __len__(self):
        return len(self.frames)

    @property
    def samples(self) -> np.ndarray:
        """Stacked intensities ``(frame, a, b)``."""
        return np.stack([f.samples for f in self.frames])

    @property
    def spacing(self) -> tuple[float, float, float]:
        return (self.interval, self.pixel_pitch, self.pixel_pitch)

    def inplane_radius(self) -> np.ndarray:
        """Distance (mm) of every pixel from the frame center, shape ``(a, b)``."""
        off = self.frames[0].offsets
        return np.hypot(off[:, None], off[None, :])

    def to_world(self, frame: int, ab) -> np.ndarray:
        return self.frames[frame].pixel_to_world(ab)


def build_airway_roi(volume: Volume, path: AirwayPath, half_width: float = ROI_HALF_WIDTH_MM,
                     interval: float = ROI_INTERVAL_MM, pitch: float = ROI_PITCH_MM) -> RoiStack:
    """Resample one plane per arc-length station.

    In-plane axes are parallel-transported along the spline so consecutive
    frames do not twist.
    """
    stations = path.stations(interval)
    centers = path(stations)
    tangents = path.tangent(stations)
    frames = []
    u = None
    for c, t in zip(centers, tangents):
        u, _ = orthonormal_basis(t, u)
        frames.append(resample_plane(volume, c, t, half_width, pitch, axis_u=u))
    return RoiStack(frames, stations, float(interval), float(pitch), float(half_width), path)


# --------------------------------------------------------------------------
# Artery isolation and seed


@dataclass(eq=False)
class IsolatedArtery:
    component: np.ndarray  # bool (frame, a, b)
    opening_radius: int  # kernel radius in pixels
    roi: RoiStack

    def frames_present(self) -> np.ndarray:
        return np.flatnonzero(self.component.any(axis=(1, 2)))


def _open(binary: np.ndarray, structure: np.ndarray) -> np.ndarray:
    # Pixels beyond the ROI edge are treated as foreground during erosion so
    # structures touching the border are not eaten away by the opening.
    eroded = ndimage.binary_erosion(binary, structure, border_value=1)
    return ndimage.binary_dilation(eroded, structure)


def isolate_artery(roi: RoiStack, level: float = SOFT_TISSUE_LEVEL,
                   max_extent_mm: float = MAX_EXTENT_MM,
                   max_radius: int = MAX_OPENING_RADIUS) -> IsolatedArtery:
    """Open the thresholded ROI with growing balls until a compact component survives.

    Components reaching farther than ``max_extent_mm`` from the frame center
    in any frame are rejected.  Among the rest, the one nearest the center in
    the most proximal frame any of them occupies is returned.
    """
    if len(roi) == 0:
        raise SeedingError("empty ROI")
    binary = roi.samples > level
    if not binary.any():
        raise SeedingError("no soft tissue in the airway ROI")
    radius = roi.inplane_radius()
    conn = ndimage.generate_binary_structure(3, 1)
    for k in range(1, max_radius + 1):
        opened = _open(binary, ball_offsets(roi.spacing, k * roi.pixel_pitch))
        labels, n = ndimage.label(opened, structure=conn)
        if n == 0:
            continue
        # farthest in-plane reach of each component
        reach = ndimage.maximum(np.broadcast_to(radius, labels.shape), labels, index=np.arange(1, n + 1))
        keep = np.flatnonzero(np.asarray(reach) <= max_extent_mm + 1e-9) + 1
        if keep.size == 0:
            continue
        alive = np.isin(labels, keep)
        first = int(np.flatnonzero(alive.any(axis=(1, 2)))[0])
        lab = labels[first]
        best, best_d = None, math.inf
        for c in keep:
            sel = lab == c
            if sel.any():
                d = float(radius[sel].min())
                if d < best_d:
                    best, best_d = int(c), d
        return IsolatedArtery(labels == best, k, roi)
    raise SeedingError(f"no artery candidate within {max_extent_mm} mm after opening radius {max_radius}")


@dataclass(frozen=True, eq=False)
class SeedPoint:
    position: np.ndarray
    direction: np.ndarray
    source_airway: str = "airway"

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float)
        n = float(np.linalg.norm(d))
        if not np.isfinite(n) or n < 1e-12:
            raise ValueError("seed direction must be non-zero")
        object.__setattr__(self, "direction", d / n)
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))

    def to_dict(self) -> dict:
        return {"position": self.position.tolist(), "direction": self.direction.tolist(),
                "source_airway": self.source_airway}


def _centroid(art: IsolatedArtery, frame: int) -> np.ndarray:
    ab = np.argwhere(art.component[frame]).mean(axis=0)
    return art.roi.to_world(frame, ab)


def compute_seed(art: IsolatedArtery, source_airway: Optional[str] = None) -> SeedPoint:
    present = art.frames_present()
    if len(present) < 2:
        raise SeedingError("artery component occupies fewer than 2 ROI frames")
    p0 = _centroid(art, int(present[0]))
    p1 = _centroid(art, int(present[-1]))
    label = source_airway or (art.roi.path.label if art.roi.path is not None else "airway")
    return SeedPoint(p0, p1 - p0, label)


def seed_from_airway(volume: Volume, path: AirwayPath, airway_lumen: Optional[Mask] = None,
                     filtered: bool = False, **roi_kw) -> SeedPoint:
    """Full seeding for one branch: median filter, airway suppression, ROI, isolation, seed.

    Pass ``filtered=True`` if ``volume`` already went through the median filter.
    """
    vol = volume if filtered else median_filter_3x3(volume)
    if airway_lumen is not None:
        vol = suppress_airway(vol, airway_lumen)
    roi = build_airway_roi(vol, path, **roi_kw)
    return compute_seed(isolate_artery(roi), path.label)


# --------------------------------------------------------------------------
# Centerline files


def read_centerlines(path) -> list[AirwayPath]:
    """Parse ``[{"label": ..., "points": [[x, y, z], ...]}, ...]`` (proximal to distal)."""
    with open(path) as fh:
        data = json.load(fh)
    if isinstance(data, dict):
        data = data.get("branches", [data])
    if not isinstance(data, list) or not data:
        raise ValueError(f"{path}: expected a non-empty list of airway branches")
    return [fit_centerline_spline(b["points"], str(b.get("label", f"airway_{i + 1}")))
            for i, b in enumerate(data)]


def write_centerlines(path, branches) -> None:
    """``branches`` is an iterable of ``(label, points)`` pairs."""
    out = [{"label": str(label), "points": np.asarray(pts, float).tolist()} for label, pts in branches]
    with open(path, "w") as fh:
        json.dump(out, fh, indent=2)
        fh.write("\n")


def centerline_from_mask(mask: Mask, axis: int = 2, reverse: bool = False) -> np.ndarray:
    """Per-slice centroids of a labelled airway branch, ordered along ``axis``.

    A crude stand-in for a real centerline extractor; adequate for straight
    phantom airways.
    """
    idx = np.argwhere(mask.values)
    if len(idx) == 0:
        raise ValueError("airway mask is empty")
    slices = np.unique(idx[:, axis])
    pts = np.array([idx[idx[:, axis] == k].mean(axis=0) for k in slices])
    pts = mask.voxel_to_world(pts)
    return pts[::-1] if reverse else pts
