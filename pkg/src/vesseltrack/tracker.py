"""Iterative cylinder tracking with bifurcation and leak handling.

A vessel is followed by repeatedly fitting a finite cylinder (base point,
unit axis, radius, fixed height) to the binary tissue mask.  A candidate is
scored by counting voxel centers inside it: +1 for each foreground voxel and
-5 for each background voxel.  The score is deliberately left unnormalised,
so bigger cylinders that stay inside tissue win.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Optional

import numpy as np

from .volgrid import Geometry, Mask, orthonormal_basis

log = logging.getLogger(__name__)

BACKGROUND_PENALTY = 5

WEAK_MATCH = "weak_match"
LEAK_REMOVED = "leak_removed"
BIFURCATION = "bifurcation"
FALSE_BIFURCATION = "false_bifurcation"
LENGTH_CAP = "length_cap"


@dataclass(frozen=True)
class Cylinder:
    base: tuple[float, float, float]
    axis: tuple[float, float, float]
    radius: float
    height: float

    def __post_init__(self):
        base = tuple(float(v) for v in self.base)
        axis = np.asarray(self.axis, dtype=float)
        norm = float(np.linalg.norm(axis))
        if not math.isfinite(norm) or norm < 1e-12:
            raise ValueError("cylinder axis must be a nonzero vector")
        if abs(norm - 1.0) > 1e-6:
            axis = axis / norm
        if not (self.radius > 0 and self.height > 0):
            raise ValueError("cylinder radius and height must be positive")
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "axis", tuple(float(v) for v in axis))
        object.__setattr__(self, "radius", float(self.radius))
        object.__setattr__(self, "height", float(self.height))

    @property
    def tip(self) -> np.ndarray:
        return np.asarray(self.base) + self.height * np.asarray(self.axis)

    def to_dict(self) -> dict:
        return {"base": list(self.base), "axis": list(self.axis),
                "radius": self.radius, "height": self.height}

    @classmethod
    def from_dict(cls, d) -> "Cylinder":
        return cls(d["base"], d["axis"], d["radius"], d["height"])


@dataclass(frozen=True)
class TrackerParams:
    """Tracking parameters.  Defaults are the trained values (h0 15 mm, step 0.20, delta 0.90)."""

    h0: float = 15.0
    step_frac: float = 0.20
    radius_change_threshold: float = 0.90
    r_init_range: tuple[float, float] = (2.0, 12.0)
    r_step_init: float = 0.5
    radius_window: tuple[float, float] = (0.7, 1.3)
    radius_window_steps: int = 7
    fill_min: float = 0.5
    leak_ratio: float = 1.5
    n_directions: int = 64
    n_child_directions: int = 256
    false_bif_max_iters: int = 3
    child_angle_range_deg: tuple[float, float] = (30.0, 90.0)
    child_radius_floor: float = 0.5
    self_collision_frac: float = 0.8
    max_segments: int = 256

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.h0 > 0:
            raise ValueError("h0 must be positive")
        if not 0 < self.step_frac:
            raise ValueError("step_frac must be positive")
        if not 0 < self.radius_change_threshold <= 1:
            raise ValueError("radius_change_threshold must be in (0, 1]")
        if not 0 < self.fill_min < 1:
            raise ValueError("fill_min must be in (0, 1)")
        lo, hi = self.r_init_range
        if not 0 < lo <= hi:
            raise ValueError("r_init_range must be positive and ordered")
        wlo, whi = self.radius_window
        if not 0 < wlo <= 1 <= whi:
            raise ValueError("radius_window must bracket 1")
        if (self.r_step_init <= 0 or self.radius_window_steps < 1 or self.n_directions < 1
                or self.n_child_directions < 1):
            raise ValueError("grid sizes must be positive")
        if self.leak_ratio <= 1:
            raise ValueError("leak_ratio must exceed 1")

    @property
    def step_length(self) -> float:
        return self.step_frac * self.h0

    def initial_radii(self) -> np.ndarray:
        lo, hi = self.r_init_range
        n = int(math.floor((hi - lo) / self.r_step_init + 1e-9)) + 1
        return lo + self.r_step_init * np.arange(n)

    def window_radii(self, r_prev: float) -> np.ndarray:
        lo, hi = self.radius_window
        return np.linspace(lo * r_prev, hi * r_prev, self.radius_window_steps)


@dataclass(frozen=True)
class FitResult:
    cylinder: Cylinder
    score: int
    fill: float


@dataclass
class TrackerState:
    """Running state of one tracker; ``history`` holds its accepted cylinders in order."""

    history: list[Cylinder]
    fill: float = 1.0
    parent_id: Optional[int] = None

    @property
    def current(self) -> Cylinder:
        return self.history[-1]


@dataclass
class Segment:
    id: int
    parent_id: Optional[int]
    cylinders: list[Cylinder]
    termination: Optional[str] = None
    children: list[int] = field(default_factory=list)
    voxels: Optional[np.ndarray] = None  # flat indices of captured foreground voxels

    @property
    def bifurcation_point(self):
        return self.cylinders[0].base if self.cylinders else None


@dataclass
class VesselTree:
    geometry: Geometry
    seed: object = None
    segments: dict[int, Segment] = field(default_factory=dict)
    failure: Optional[str] = None
    events: list = field(default_factory=list)
    _next_id: int = 0

    def new_segment(self, parent_id, cylinders) -> Segment:
        seg = Segment(self._next_id, parent_id, list(cylinders))
        self._next_id += 1
        self.segments[seg.id] = seg
        if parent_id is not None:
            self.segments[parent_id].children.append(seg.id)
        return seg

    def remove_segment(self, seg_id: int) -> None:
        seg = self.segments.pop(seg_id)
        if seg.parent_id is not None and seg.parent_id in self.segments:
            self.segments[seg.parent_id].children.remove(seg_id)

    @property
    def n_bifurcations(self) -> int:
        return sum(1 for s in self.segments.values() if s.termination == BIFURCATION)

    def cylinders(self):
        for seg in self.segments.values():
            yield from seg.cylinders

    def captured_mask(self) -> Mask:
        flat = np.zeros(self.geometry.size, dtype=bool)
        for seg in self.segments.values():
            if seg.voxels is not None:
                flat[seg.voxels] = True
        return Mask(flat.reshape(self.geometry.dims, order="F"), self.geometry.spacing, self.geometry.origin)

    def label_array(self, first_label: int = 1) -> np.ndarray:
        """uint16 labels, one per segment in id order; overlaps keep the lower id."""
        flat = np.zeros(self.geometry.size, dtype=np.uint16)
        for k, seg_id in enumerate(sorted(self.segments)):
            seg = self.segments[seg_id]
            if seg.voxels is None:
                continue
            idx = seg.voxels[flat[seg.voxels] == 0]
            flat[idx] = first_label + k
        return flat.reshape(self.geometry.dims, order="F")

    def path_to_root(self, seg_id: int) -> list[Cylinder]:
        chain = []
        sid = seg_id
        while sid is not None:
            seg = self.segments[sid]
            chain.append(seg.cylinders)
            sid = seg.parent_id
        return [c for cyls in reversed(chain) for c in cyls]

    def to_dict(self) -> dict:
        seed = None
        if self.seed is not None:
            seed = {"position": [float(v) for v in self.seed.position],
                    "direction": [float(v) for v in self.seed.direction],
                    "source_airway": getattr(self.seed, "source_airway", None)}
        return {
            "seed": seed,
            "failure": self.failure,
            "events": [{"outcome": o, "segment": int(sid), "point": [float(v) for v in p]}
                       for o, sid, p in self.events],
            "segments": [
                {"id": s.id, "parent_id": s.parent_id, "termination": s.termination,
                 "children": list(s.children),
                 "cylinders": [c.to_dict() for c in s.cylinders]}
                for s in (self.segments[k] for k in sorted(self.segments))
            ],
        }


# --------------------------------------------------------------------------
# Scoring


def _lattice(geometry: Geometry, lo, hi):
    """Unclipped integer lattice of voxel centers inside the world box [lo, hi]."""
    o = np.asarray(geometry.origin)
    s = np.asarray(geometry.spacing)
    i0 = np.ceil((np.asarray(lo) - o) / s - 1e-9).astype(np.int64)
    i1 = np.floor((np.asarray(hi) - o) / s + 1e-9).astype(np.int64)
    axes = [np.arange(a, b + 1) for a, b in zip(i0, i1)]
    if any(len(a) == 0 for a in axes):
        return np.empty((0, 3), dtype=np.int64)
    grid = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in grid], axis=1)


def _relative(geometry: Geometry, idx: np.ndarray, base):
    # Both scoring paths build offsets with this exact arithmetic so that
    # batched and single-cylinder membership agree bit for bit.
    o, s = geometry.origin, geometry.spacing
    rx = (o[0] + idx[:, 0] * s[0]) - base[0]
    ry = (o[1] + idx[:, 1] * s[1]) - base[1]
    rz = (o[2] + idx[:, 2] * s[2]) - base[2]
    return rx, ry, rz


def _foreground(mask: Mask, idx: np.ndarray) -> np.ndarray:
    inside = np.all((idx >= 0) & (idx < np.asarray(mask.dims)), axis=1)
    fg = np.zeros(len(idx), dtype=bool)
    sel = idx[inside]
    fg[inside] = mask.values[sel[:, 0], sel[:, 1], sel[:, 2]]
    return fg


def _cylinder_members(geometry: Geometry, cyl: Cylinder) -> np.ndarray:
    """Lattice indices (possibly out of bounds) whose centers lie in ``cyl``."""
    b = np.asarray(cyl.base)
    tip = cyl.tip
    lo = np.minimum(b, tip) - cyl.radius
    hi = np.maximum(b, tip) + cyl.radius
    idx = _lattice(geometry, lo, hi)
    if len(idx) == 0:
        return idx
    rx, ry, rz = _relative(geometry, idx, cyl.base)
    a = cyl.axis
    t = rx * a[0] + ry * a[1] + rz * a[2]
    rr = rx * rx + ry * ry + rz * rz
    rad2 = rr - t * t
    inside = (t >= 0) & (t <= cyl.height) & (rad2 <= cyl.radius * cyl.radius)
    return idx[inside]


def score_cylinder(mask: Mask, cyl: Cylinder) -> tuple[int, float]:
    """Similarity score and foreground fill of one cylinder.

    Voxel centers outside the volume count as background.  An empty cylinder
    scores 0 with fill 0.
    """
    members = _cylinder_members(mask.geometry, cyl)
    total = len(members)
    if total == 0:
        return 0, 0.0
    n_fg = int(_foreground(mask, members).sum())
    return n_fg - BACKGROUND_PENALTY * (total - n_fg), n_fg / total


def cylinder_voxels(mask: Mask, cyl: Cylinder) -> np.ndarray:
    """Flat (Fortran-order) indices of the foreground voxels inside ``cyl``."""
    members = _cylinder_members(mask.geometry, cyl)
    if len(members) == 0:
        return np.empty(0, dtype=np.int64)
    members = members[_foreground(mask, members)]
    return np.ravel_multi_index(members.T, mask.dims, order="F")


# --------------------------------------------------------------------------
# Candidate search


@lru_cache(maxsize=32)
def _canonical_hemisphere(n: int) -> np.ndarray:
    # Fibonacci spiral about +z, equal-area in z; the pole is the first point
    # and the equator (90 degree turns) the last.
    if n == 1:
        return np.array([[0.0, 0.0, 1.0]])
    i = np.arange(n)
    z = 1.0 - i / (n - 1)
    rho = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = i * math.pi * (3.0 - math.sqrt(5.0))
    pts = np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)
    pts[0] = (0.0, 0.0, 1.0)
    return pts


def hemisphere_directions(axis, n: int) -> np.ndarray:
    """Deterministic set of ``n`` unit vectors covering the hemisphere about ``axis``."""
    a = np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)
    u, v = orthonormal_basis(a)
    c = _canonical_hemisphere(n)
    d = c[:, 0:1] * u + c[:, 1:2] * v + c[:, 2:3] * a
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    d[0] = a
    return d


def evaluate_candidates(mask: Mask, base, directions, radii, height: float, axis=None):
    """Scores and fills for every (direction, radius) pair, shapes ``(n_dir, n_rad)``.

    ``axis``, if given, must satisfy ``d . axis >= 0`` for every direction; it
    lets voxels behind the base plane be skipped up front.
    """
    base = tuple(float(v) for v in base)
    dirs = np.asarray(directions, dtype=float)
    radii = np.asarray(radii, dtype=float)
    order = np.argsort(radii, kind="stable")
    r_sorted = radii[order]
    r2 = r_sorted * r_sorted
    nd, nr = len(dirs), len(radii)
    reach = math.sqrt(height * height + float(r2[-1])) + 1e-6
    b = np.asarray(base)
    idx = _lattice(mask.geometry, b - reach, b + reach)
    tot = np.zeros((nd, nr), dtype=np.int64)
    fgc = np.zeros((nd, nr), dtype=np.int64)
    if len(idx):
        rx, ry, rz = _relative(mask.geometry, idx, base)
        rr = rx * rx + ry * ry + rz * rz
        keep = rr <= reach * reach
        if axis is not None:
            # a point more than r_max behind the base plane is in no forward cylinder
            keep &= rx * axis[0] + ry * axis[1] + rz * axis[2] >= -(float(r_sorted[-1]) + 1e-6)
        rx, ry, rz, rr = rx[keep], ry[keep], rz[keep], rr[keep]
        fg = _foreground(mask, idx[keep])
        chunk = max(1, 4_000_000 // max(len(rr), 1))
        for c0 in range(0, nd, chunk):
            d = dirs[c0:c0 + chunk]
            t = rx[:, None] * d[None, :, 0] + ry[:, None] * d[None, :, 1] + rz[:, None] * d[None, :, 2]
            rad2 = rr[:, None] - t * t
            vi, dj = np.nonzero((t >= 0) & (t <= height) & (rad2 <= r2[-1]))
            bins = np.searchsorted(r2, rad2[vi, dj], side="left")
            code = dj * nr + bins
            size = len(d) * nr
            all_counts = np.bincount(code, minlength=size).reshape(len(d), nr)
            fg_counts = np.bincount(code[fg[vi]], minlength=size).reshape(len(d), nr)
            tot[c0:c0 + chunk] = np.cumsum(all_counts, axis=1)
            fgc[c0:c0 + chunk] = np.cumsum(fg_counts, axis=1)
    inv = np.empty(nr, dtype=int)
    inv[order] = np.arange(nr)
    tot, fgc = tot[:, inv], fgc[:, inv]
    score = fgc - BACKGROUND_PENALTY * (tot - fgc)
    with np.errstate(invalid="ignore", divide="ignore"):
        fill = np.where(tot > 0, fgc / np.maximum(tot, 1), 0.0)
    return score, fill


def _select(score, fill, directions, radii, ref_axis, base, height, valid=None) -> Optional[FitResult]:
    s = score.astype(float)
    if valid is not None:
        s = np.where(valid[:, None], s, -np.inf)
    best = s.max()
    if not np.isfinite(best):
        return None
    cand = np.argwhere(s == best)
    dots = directions[cand[:, 0]] @ np.asarray(ref_axis, dtype=float)
    rads = np.asarray(radii)[cand[:, 1]]
    # Highest score, then smallest turn, then largest radius.
    pick = np.lexsort((-rads, -dots))[0]
    di, ri = cand[pick]
    cyl = Cylinder(base, directions[di], float(radii[ri]), height)
    return FitResult(cyl, int(score[di, ri]), float(fill[di, ri]))


def fit_cylinder(mask: Mask, base, prev_axis, radii, params: TrackerParams,
                 avoid=None) -> Optional[FitResult]:
    """Exhaustive search over hemisphere directions about ``prev_axis`` and ``radii``.

    ``radii`` is either an explicit grid or an ``(lo, hi)`` range which is
    sampled at ``params.r_step_init``.  ``avoid`` optionally names a pair
    ``(own, sibling)`` of unit vectors; directions closer to ``sibling`` than
    to ``own`` are skipped.  Returns ``None`` only if ``avoid`` rules out
    every direction.
    """
    radii = np.asarray(radii, dtype=float)
    if radii.shape == (2,) and radii[1] - radii[0] > params.r_step_init:
        lo, hi = radii
        radii = lo + params.r_step_init * np.arange(int(math.floor((hi - lo) / params.r_step_init + 1e-9)) + 1)
    if np.any(radii <= 0):
        raise ValueError("radii must be positive")
    dirs = hemisphere_directions(prev_axis, params.n_directions)
    if avoid is not None:
        own, sib = (np.asarray(a, float) for a in avoid)
        keep = dirs @ (own - sib) >= 0.0
        if not keep.any():
            return None
        dirs = dirs[keep]
    axis = np.asarray(prev_axis, float) / np.linalg.norm(prev_axis)
    score, fill = evaluate_candidates(mask, base, dirs, radii, params.h0, axis)
    return _select(score, fill, dirs, radii, prev_axis, base, params.h0)


# --------------------------------------------------------------------------
# Tracking steps


def step_tracker(mask: Mask, state: TrackerState, params: TrackerParams, avoid=None):
    """Advance one cylinder.  Returns ``(state, None)`` or ``(state, WEAK_MATCH)``.

    On success the new cylinder is appended to ``state.history`` in place.
    """
    prev = state.current
    base = np.asarray(prev.base) + params.step_length * np.asarray(prev.axis)
    fit = fit_cylinder(mask, base, prev.axis, params.window_radii(prev.radius), params, avoid=avoid)
    if fit is None or fit.fill < params.fill_min:
        return state, WEAK_MATCH
    state.history.append(fit.cylinder)
    state.fill = fit.fill
    return state, None


def upstream_index(history: list[Cylinder], distance: float) -> Optional[int]:
    """Index of the cylinder whose base is nearest ``distance`` mm upstream along the path.

    ``None`` if the history does not reach back that far.  Ties go upstream.
    """
    if not history:
        return None
    bases = np.array([c.base for c in history])
    gaps = np.linalg.norm(np.diff(bases, axis=0), axis=1)
    back = np.concatenate([[0.0], np.cumsum(gaps[::-1])])[::-1]  # path distance to current
    if back[0] < distance - 1e-6:
        return None
    err = np.round(np.abs(back - distance), 6)
    best = np.flatnonzero(err == err.min())
    return int(best[0])


def radius_ratio(state: TrackerState, params: TrackerParams) -> Optional[float]:
    i = upstream_index(state.history, params.h0 / 2.0)
    if i is None:
        return None
    return state.current.radius / state.history[i].radius


def detect_bifurcation(state: TrackerState, params: TrackerParams) -> bool:
    ratio = radius_ratio(state, params)
    return ratio is not None and ratio < params.radius_change_threshold


def detect_leak(state: TrackerState, params: TrackerParams) -> Optional[int]:
    """Index of the leak reference cylinder (one h0 upstream) if a leak is detected."""
    i = upstream_index(state.history, params.h0)
    if i is None:
        return None
    if state.current.radius > params.leak_ratio * state.history[i].radius:
        return i
    return None


def child_direction_ok(d_child2, d_child1, d_parent, angle_range_deg=(30.0, 90.0)) -> bool:
    """Second-child admissibility: 30-90 degrees from child 1 and forward of the parent."""
    lo, hi = angle_range_deg
    c12 = float(np.dot(d_child1, d_child2))
    c2p = float(np.dot(d_child2, d_parent))
    return (math.cos(math.radians(hi)) - 1e-9 <= c12 <= math.cos(math.radians(lo)) + 1e-9
            and c2p > 1e-9)


def find_second_child(mask: Mask, bif_point, d_parent, d_child1, r_parent: float,
                      params: TrackerParams) -> Optional[FitResult]:
    """Best admissible cylinder for the second child at a bifurcation, or ``None``.

    The admissible band is a small part of the hemisphere, so it is sampled
    with the denser ``params.n_child_directions`` set.
    """
    dp = np.asarray(d_parent, float) / np.linalg.norm(d_parent)
    d1 = np.asarray(d_child1, float) / np.linalg.norm(d_child1)
    dirs = hemisphere_directions(dp, params.n_child_directions)
    lo, hi = params.child_angle_range_deg
    c12 = dirs @ d1
    c2p = dirs @ dp
    valid = ((c12 >= math.cos(math.radians(hi)) - 1e-9) & (c12 <= math.cos(math.radians(lo)) + 1e-9)
             & (c2p > 1e-9))
    if not valid.any():
        return None
    radii = np.linspace(params.child_radius_floor * r_parent, r_parent, params.radius_window_steps)
    score, fill = evaluate_candidates(mask, bif_point, dirs[valid], radii, params.h0, dp)
    fit = _select(score, fill, dirs[valid], radii, dp, bif_point, params.h0)
    if fit is None or fit.fill < params.fill_min:
        return None
    return fit


def prune_false_bifurcation(tree: VesselTree, child1_id: int, child2_id: Optional[int],
                            params: TrackerParams) -> str:
    """Resolve a bifurcation whose children may have died after a few cylinders.

    A child is dead when it has terminated with at most
    ``params.false_bif_max_iters`` accepted cylinders.  If child 1 is dead it
    is erased and a live child 2 is appended to the parent as its
    continuation (``"merged"``).  A dead child 2 beside a live child 1 is
    handled the same way, with the roles swapped.  If both are dead, the
    bifurcation is dropped entirely (``"rolled_back"``).  Two live children
    are ``"kept"``.  ``tree`` is modified in place.
    """
    def dead(seg_id):
        if seg_id is None or seg_id not in tree.segments:
            return True
        seg = tree.segments[seg_id]
        return seg.termination is not None and len(seg.cylinders) <= params.false_bif_max_iters

    d1, d2 = dead(child1_id), dead(child2_id)
    if not d1 and not d2:
        return "kept"
    parent = tree.segments[tree.segments[child1_id].parent_id]
    survivor = None if d1 and d2 else (child2_id if d1 else child1_id)
    for cid in (child1_id, child2_id):
        if cid is not None and cid in tree.segments and cid != survivor:
            tree.remove_segment(cid)
    if survivor is None:
        return "rolled_back"
    parent.cylinders.extend(tree.segments[survivor].cylinders)
    tree.remove_segment(survivor)
    return "merged"


def _probe_child(mask, parent_history, first: Cylinder, params,
                 sibling_axis=None) -> tuple[list[Cylinder], Optional[str]]:
    """Run a fresh child for up to ``false_bif_max_iters`` cylinders.

    Returns the child's cylinders and its termination reason (``None`` if it
    survived the probe).  Leak checks look through the parent's history.
    While probing, the child only considers directions closer to its own
    initial direction than to its sibling's, so the two cannot collapse onto
    one branch.
    """
    state = TrackerState(list(parent_history) + [first])
    n0 = len(parent_history)
    while len(state.history) - n0 <= params.false_bif_max_iters:
        state, reason = step_tracker(mask, state, params, avoid=sibling_axis)
        if reason:
            return state.history[n0:], reason
        if detect_leak(state, params) is not None:
            return state.history[n0:-1], LEAK_REMOVED
    return state.history[n0:], None


def _overlap_fraction(mask, cyl, captured_flat) -> float:
    vox = cylinder_voxels(mask, cyl)
    if len(vox) == 0 or not captured_flat.any():
        return 0.0
    return float(captured_flat[vox].mean())


def track_tree(mask: Mask, seed, params: TrackerParams | None = None) -> VesselTree:
    """Track a full tree from ``seed`` (anything with ``position`` and ``direction``)."""
    params = params or TrackerParams()
    tree = VesselTree(mask.geometry, seed)
    fit = fit_cylinder(mask, seed.position, seed.direction, params.initial_radii(), params)
    if fit.fill < params.fill_min:
        tree.failure = "seed_fill_below_minimum"
        return tree

    dims = np.asarray(mask.dims) * np.asarray(mask.spacing)
    max_steps = int(math.ceil(4 * float(np.linalg.norm(dims)) / params.step_length)) + 1
    captured = np.zeros(mask.geometry.size, dtype=bool)
    root = tree.new_segment(None, [fit.cylinder])
    queue = deque([(root.id, TrackerState(root.cylinders, fit.fill))])

    def finalize(seg: Segment, reason: str):
        seg.termination = reason
        if seg.cylinders:
            seg.voxels = np.unique(np.concatenate([cylinder_voxels(mask, c) for c in seg.cylinders]))
            captured[seg.voxels] = True
        else:
            seg.voxels = np.empty(0, dtype=np.int64)

    while queue:
        seg_id, state = queue.popleft()
        seg = tree.segments[seg_id]
        state.history = seg.cylinders
        while True:
            if len(seg.cylinders) >= max_steps:
                finalize(seg, LENGTH_CAP)
                break
            state, reason = step_tracker(mask, state, params)
            if reason:
                finalize(seg, reason)
                break
            ref = detect_leak(state, params)
            if ref is not None:
                del seg.cylinders[ref:]
                log.debug("segment %d: leak, truncated to %d cylinders", seg.id, len(seg.cylinders))
                finalize(seg, LEAK_REMOVED)
                break
            if not detect_bifurcation(state, params):
                continue

            # Bifurcation candidate: the new cylinder starts child 1.
            cand = seg.cylinders.pop()
            up = seg.cylinders[upstream_index(seg.cylinders + [cand], params.h0 / 2.0)]
            c2 = find_second_child(mask, cand.base, up.axis, cand.axis, up.radius, params)
            c1_cyls, c1_reason = _probe_child(mask, seg.cylinders, cand, params,
                                              (cand.axis, c2.cylinder.axis) if c2 is not None else None)
            if c1_reason is None and _overlap_fraction(mask, cand, captured) >= params.self_collision_frac:
                c1_cyls, c1_reason = [cand], "self_collision"
            c2_cyls, c2_reason = [], None
            if c2 is not None:
                c2_cyls, c2_reason = _probe_child(mask, seg.cylinders, c2.cylinder, params,
                                                  (c2.cylinder.axis, cand.axis))
                if c2_reason is None and _overlap_fraction(mask, c2.cylinder, captured) >= params.self_collision_frac:
                    c2_cyls, c2_reason = [c2.cylinder], "self_collision"
            if len(tree.segments) + 2 > params.max_segments and c2 is not None:
                c2_cyls, c2_reason = [c2.cylinder], "segment_cap"

            c1 = tree.new_segment(seg.id, c1_cyls)
            c1.termination = c1_reason
            c2_id = None
            if c2 is not None:
                c2_seg = tree.new_segment(seg.id, c2_cyls)
                c2_seg.termination = c2_reason
                c2_id = c2_seg.id
            outcome = prune_false_bifurcation(tree, c1.id, c2_id, params)
            tree.events.append((outcome, seg.id, cand.base))
            if outcome == "merged":
                continue
            if outcome == "rolled_back":
                finalize(seg, FALSE_BIFURCATION)
                break
            finalize(seg, BIFURCATION)
            for child_id in (c1.id, c2_id):
                queue.append((child_id, TrackerState(tree.segments[child_id].cylinders, parent_id=seg.id)))
            break
    return tree
