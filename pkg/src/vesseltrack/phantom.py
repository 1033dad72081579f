"""Synthetic vascular phantoms with known geometry.

Branches are capsules (a line segment swept by a sphere).  A voxel belongs
to a branch when its center lies within the branch radius of the segment.
This is the same center-in-solid rule the tracker uses.  Radii follow
Murray's law with an equal split at every bifurcation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .ssmetric import ARTERY, VEIN, GroundTruth, TruthObject
from .volgrid import Geometry, Mask, Volume, orthonormal_basis

SPARSE_SPACING_MM = 4.0


@dataclass
class Branch:
    origin: np.ndarray
    direction: np.ndarray
    length: float
    radius: float
    children: list["Branch"] = field(default_factory=list)
    id: int = 0
    kind: str = ARTERY

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        d = np.asarray(self.direction, dtype=float)
        self.direction = d / np.linalg.norm(d)
        if self.length <= 0 or self.radius <= 0:
            raise ValueError("branch length and radius must be positive")

    @property
    def end(self) -> np.ndarray:
        return self.origin + self.length * self.direction

    def to_dict(self) -> dict:
        return {"id": self.id, "kind": self.kind, "origin": self.origin.tolist(),
                "direction": self.direction.tolist(), "length": self.length,
                "radius": self.radius, "children": [c.to_dict() for c in self.children]}

    @classmethod
    def from_dict(cls, d) -> "Branch":
        return cls(d["origin"], d["direction"], d["length"], d["radius"],
                   [cls.from_dict(c) for c in d.get("children", [])], d.get("id", 0), d.get("kind", ARTERY))


@dataclass
class TreeSpec:
    root: Optional[Branch]
    generations: int = 1
    angle_deg: float = 60.0
    exponent: float = 3.0
    split_plane: float = 0.0  # azimuth of the root's bifurcation plane, radians

    def branches(self) -> list[Branch]:
        """Breadth-first list of branches (ids follow this order)."""
        out, queue = [], [self.root] if self.root is not None else []
        while queue:
            b = queue.pop(0)
            out.append(b)
            queue.extend(b.children)
        return out

    def parent_of(self) -> dict[int, Optional[int]]:
        parents = {}
        for b in self.branches():
            parents.setdefault(b.id, None)
            for c in b.children:
                parents[c.id] = b.id
        return parents

    def to_dict(self) -> dict:
        return {"generations": self.generations, "angle_deg": self.angle_deg, "exponent": self.exponent,
                "split_plane": self.split_plane, "root": self.root.to_dict() if self.root is not None else None}

    @classmethod
    def from_dict(cls, d) -> "TreeSpec":
        root = Branch.from_dict(d["root"]) if d.get("root") else None
        return cls(root, d.get("generations", 1), d.get("angle_deg", 60.0), d.get("exponent", 3.0),
                   d.get("split_plane", 0.0))


def murray_child_radius(r_parent: float, n_children: int = 2, exponent: float = 3.0) -> float:
    return r_parent / n_children ** (1.0 / exponent)


def _rotate_toward(d, perp, angle):
    return math.cos(angle) * d + math.sin(angle) * perp


def generate_tree(generations: int, root_radius: float, angle_deg: float = 60.0,
                  rng_seed: int = 0, length_factor: float = 4.0, origin=(0.0, 0.0, 0.0),
                  direction=(0.0, 0.0, 1.0), exponent: float = 3.0) -> TreeSpec:
    """Symmetric bifurcating tree.

    Each child leaves its parent's end at ``angle_deg / 2`` from the parent
    axis, so siblings are ``angle_deg`` apart.  Consecutive bifurcation planes
    are roughly perpendicular, with a seeded random twist.
    """
    if generations < 1:
        raise ValueError("generations must be >= 1")
    if root_radius <= 0 or length_factor <= 0:
        raise ValueError("root_radius and length_factor must be positive")
    if not 0 < angle_deg < 180:
        raise ValueError("angle_deg must be in (0, 180)")
    rng = np.random.default_rng(rng_seed)
    half = math.radians(angle_deg) / 2.0
    root = Branch(origin, direction, length_factor * root_radius, root_radius)
    root_plane = rng.uniform(0.0, 2.0 * math.pi)
    frontier = [(root, root_plane)]
    for _ in range(generations - 1):
        nxt = []
        for parent, plane in frontier:
            u, v = orthonormal_basis(parent.direction)
            spread = math.cos(plane) * u + math.sin(plane) * v
            r = murray_child_radius(parent.radius, 2, exponent)
            for sign in (1.0, -1.0):
                d = _rotate_toward(parent.direction, sign * spread, half)
                child = Branch(parent.end, d, length_factor * r, r)
                parent.children.append(child)
                nxt.append((child, plane + math.pi / 2 + rng.uniform(-math.pi / 6, math.pi / 6)))
        frontier = nxt
    spec = TreeSpec(root, generations, angle_deg, exponent, root_plane)
    for i, b in enumerate(spec.branches()):
        b.id = i
    return spec


@dataclass
class PhantomConfig:
    dims: tuple[int, int, int] = (128, 128, 128)
    spacing: tuple[float, float, float] = (0.7, 0.7, 1.25)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    vessel_hu: int = 0
    parenchyma_hu: int = -900
    lumen_hu: int = -1000
    wall_hu: int = 0
    noise_sigma: float = 0.0
    seed: int = 0
    airway_offset: Optional[float] = 10.0
    airway_lumen_radius: float = 3.0
    airway_wall_thickness: float = 1.0
    airway_length_frac: float = 0.75

    def __post_init__(self):
        if not self.vessel_hu > -400 > self.parenchyma_hu:
            raise ValueError("vessel HU must exceed -400 and parenchyma HU must be below it")
        self.dims = tuple(int(v) for v in self.dims)
        self.spacing = tuple(float(v) for v in self.spacing)
        self.origin = tuple(float(v) for v in self.origin)

    @property
    def geometry(self) -> Geometry:
        return Geometry(self.dims, self.spacing, self.origin)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class Airway:
    label: str
    start: np.ndarray
    direction: np.ndarray
    length: float
    lumen_radius: float
    wall_thickness: float

    def centerline(self, spacing_mm: float = 2.0) -> np.ndarray:
        n = max(4, int(round(self.length / spacing_mm)) + 1)
        t = np.linspace(0.0, self.length, n)
        return self.start[None, :] + t[:, None] * self.direction[None, :]

    def to_dict(self) -> dict:
        return {"label": self.label, "start": self.start.tolist(), "direction": self.direction.tolist(),
                "length": self.length, "lumen_radius": self.lumen_radius,
                "wall_thickness": self.wall_thickness}


@dataclass
class Phantom:
    tree: TreeSpec
    config: PhantomConfig
    veins: list[Branch] = field(default_factory=list)
    airway: Optional[Airway] = None

    def arteries(self) -> list[Branch]:
        return self.tree.branches()

    def objects(self) -> list[tuple[str, Branch]]:
        out = [(f"artery_{b.id + 1}", b) for b in self.arteries()]
        out += [(f"vein_{k + 1}", v) for k, v in enumerate(self.veins)]
        return out

    def to_dict(self) -> dict:
        return {"schema_version": 1, "config": self.config.to_dict(), "tree": self.tree.to_dict(),
                "veins": [v.to_dict() for v in self.veins],
                "airway": self.airway.to_dict() if self.airway else None}

    @classmethod
    def from_dict(cls, d) -> "Phantom":
        cfg = PhantomConfig(**d["config"])
        airway = None
        if d.get("airway"):
            a = d["airway"]
            airway = Airway(a["label"], np.asarray(a["start"], float), np.asarray(a["direction"], float),
                            a["length"], a["lumen_radius"], a["wall_thickness"])
        veins = [Branch.from_dict(v) for v in d.get("veins", [])]
        return cls(TreeSpec.from_dict(d["tree"]), cfg, veins, airway)


# --------------------------------------------------------------------------
# Geometry helpers


def segment_distance(points, a, b) -> np.ndarray:
    """Distance from ``points`` (n, 3) to the segment ``a``-``b``."""
    p = np.asarray(points, dtype=float)
    a = np.asarray(a, dtype=float)
    ab = np.asarray(b, dtype=float) - a
    denom = float(ab @ ab)
    t = np.clip(((p - a) @ ab) / denom, 0.0, 1.0) if denom > 0 else np.zeros(len(p))
    return np.linalg.norm(p - (a + t[:, None] * ab), axis=1)


def segment_segment_distance(a0, a1, b0, b1, samples: int = 200) -> float:
    t = np.linspace(0.0, 1.0, samples)[:, None]
    pts = np.asarray(a0) + t * (np.asarray(a1) - np.asarray(a0))
    return float(segment_distance(pts, b0, b1).min())


def _capsule_voxels(geometry: Geometry, a, b, radius):
    """Voxel indices (in bounds) whose centers lie in the capsule ``a``-``b`` of ``radius``."""
    lo = np.minimum(a, b) - radius
    hi = np.maximum(a, b) + radius
    i0 = np.maximum(np.ceil(geometry.world_to_voxel(lo) - 1e-9), 0).astype(int)
    i1 = np.minimum(np.floor(geometry.world_to_voxel(hi) + 1e-9), np.asarray(geometry.dims) - 1).astype(int)
    if np.any(i1 < i0):
        return np.empty((0, 3), dtype=int)
    axes = [np.arange(s, e + 1) for s, e in zip(i0, i1)]
    idx = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=1)
    d = segment_distance(geometry.voxel_to_world(idx), a, b)
    return idx[d <= radius]


def _check_bounds(geometry: Geometry, a, b, radius, what):
    lo = np.asarray(geometry.origin)
    hi = lo + (np.asarray(geometry.dims) - 1) * np.asarray(geometry.spacing)
    if np.any(np.minimum(a, b) - radius < lo - 1e-9) or np.any(np.maximum(a, b) + radius > hi + 1e-9):
        raise ValueError(f"{what} exceeds the volume bounds")


def capsule_membership(points, phantom: Phantom, include_veins: bool = True) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    inside = np.zeros(len(pts), dtype=bool)
    branches = phantom.arteries() + (phantom.veins if include_veins else [])
    for b in branches:
        inside |= segment_distance(pts, b.origin, b.end) <= b.radius
    return inside


# --------------------------------------------------------------------------
# Phantom assembly


def default_origin(cfg: PhantomConfig, margin_mm: float = 8.0) -> np.ndarray:
    g = cfg.geometry
    center = g.voxel_to_world((np.asarray(g.dims) - 1) / 2.0)
    center[2] = g.origin[2] + margin_mm
    return center


def place_airway(tree: TreeSpec, cfg: PhantomConfig, label: str = "airway_1") -> Optional[Airway]:
    if cfg.airway_offset is None or tree.root is None:
        return None
    root = tree.root
    u, v = orthonormal_basis(root.direction)
    plane = tree.split_plane
    spread = math.cos(plane) * u + math.sin(plane) * v
    side = np.cross(root.direction, spread)  # perpendicular to the first split plane
    side /= np.linalg.norm(side)
    start = root.origin + cfg.airway_offset * side
    return Airway(label, start, root.direction.copy(), cfg.airway_length_frac * root.length,
                  cfg.airway_lumen_radius, cfg.airway_wall_thickness)


def place_veins(phantom: Phantom, n: int, radius: float = 3.0, clearance: float = 5.0,
                rng_seed: int = 0, length_frac: float = 0.6) -> list[Branch]:
    """Straight decoy tubes parallel to the root, at least ``clearance`` mm (surface to surface) from everything else."""
    if n <= 0:
        return []
    g = phantom.config.geometry
    lo = np.asarray(g.origin)
    hi = lo + (np.asarray(g.dims) - 1) * np.asarray(g.spacing)
    root = phantom.tree.root
    axis = root.direction if root is not None else np.array([0.0, 0.0, 1.0])
    if np.argmax(np.abs(axis)) != 2:
        raise ValueError("decoy veins are only placed for roots running along z")
    length = length_frac * (hi[2] - lo[2] - 2 * radius - 2.0)
    z0 = lo[2] + radius + 1.0 + 0.5 * (hi[2] - lo[2] - 2 * radius - 2.0 - length)
    margin = radius + 1.0
    xs = np.linspace(lo[0] + margin, hi[0] - margin, 9)
    ys = np.linspace(lo[1] + margin, hi[1] - margin, 9)
    cands = np.array([(x, y) for x in xs for y in ys])
    rng = np.random.default_rng(rng_seed)
    cands = cands[rng.permutation(len(cands))]
    obstacles = [(b.origin, b.end, b.radius) for b in phantom.arteries()]
    if phantom.airway is not None:
        a = phantom.airway
        obstacles.append((a.start, a.start + a.length * a.direction, a.lumen_radius + a.wall_thickness))
    veins = []
    for x, y in cands:
        a0 = np.array([x, y, z0])
        a1 = a0 + np.array([0.0, 0.0, length])
        ok = all(segment_segment_distance(a0, a1, o0, o1) >= radius + r + clearance for o0, o1, r in obstacles)
        if ok:
            veins.append(Branch(a0, (0.0, 0.0, 1.0), length, radius, kind=VEIN, id=len(veins)))
            obstacles.append((a0, a1, radius))
            if len(veins) == n:
                return veins
    raise ValueError(f"could only place {len(veins)} of {n} decoy veins")


def build_phantom(cfg: PhantomConfig | None = None, generations: int = 3, root_radius: float = 4.0,
                  angle_deg: float = 60.0, length_factor: float = 4.0, n_veins: int = 0,
                  vein_radius: float = 3.0, tree_seed: Optional[int] = None, origin=None) -> Phantom:
    cfg = cfg or PhantomConfig()
    seed = cfg.seed if tree_seed is None else tree_seed
    origin = default_origin(cfg) if origin is None else np.asarray(origin, float)
    tree = generate_tree(generations, root_radius, angle_deg, seed, length_factor, origin)
    ph = Phantom(tree, cfg)
    ph.airway = place_airway(tree, cfg)
    ph.veins = place_veins(ph, n_veins, vein_radius, rng_seed=seed)
    return ph


def rasterize(phantom: Phantom) -> tuple[Volume, Volume, Optional[Mask]]:
    """HU volume, uint16 artery label map (branch id + 1) and airway lumen mask.

    Veins are drawn into the volume but not into the label map.
    """
    cfg = phantom.config
    g = cfg.geometry
    values = np.full(g.dims, cfg.parenchyma_hu, dtype=np.int16)
    labels = np.zeros(g.dims, dtype=np.uint16)
    lumen = None
    if phantom.airway is not None:
        a = phantom.airway
        end = a.start + a.length * a.direction
        outer = a.lumen_radius + a.wall_thickness
        _check_bounds(g, a.start, end, outer, "airway")
        idx = _capsule_voxels(g, a.start, end, outer)
        values[tuple(idx.T)] = cfg.wall_hu
        idx = _capsule_voxels(g, a.start, end, a.lumen_radius)
        values[tuple(idx.T)] = cfg.lumen_hu
        lumen_arr = np.zeros(g.dims, dtype=bool)
        lumen_arr[tuple(idx.T)] = True
        lumen = Mask(lumen_arr, g.spacing, g.origin)
    for b in phantom.arteries():
        _check_bounds(g, b.origin, b.end, b.radius, f"branch {b.id}")
        idx = _capsule_voxels(g, b.origin, b.end, b.radius)
        values[tuple(idx.T)] = cfg.vessel_hu
        sub = tuple(idx.T)
        labels[sub] = np.where(labels[sub] == 0, b.id + 1, labels[sub])
    for v in phantom.veins:
        _check_bounds(g, v.origin, v.end, v.radius, "vein")
        idx = _capsule_voxels(g, v.origin, v.end, v.radius)
        values[tuple(idx.T)] = cfg.vessel_hu
    vol = Volume(values, g.spacing, g.origin)
    if cfg.noise_sigma > 0:
        vol = add_noise(vol, cfg.noise_sigma, cfg.seed)
    return vol, Volume(labels, g.spacing, g.origin), lumen


def add_noise(volume: Volume, sigma_hu: float, rng_seed: int = 0) -> Volume:
    if sigma_hu < 0:
        raise ValueError("sigma_hu must be >= 0")
    if sigma_hu == 0:
        return volume.with_values(volume.values)
    rng = np.random.default_rng(rng_seed)
    noisy = volume.values.astype(np.float64) + rng.normal(0.0, sigma_hu, size=volume.values.shape)
    return volume.with_values(np.clip(np.rint(noisy), -32768, 32767).astype(np.int16))


def _ring_points(b: Branch, axial_step: float, arc_step: float) -> np.ndarray:
    n_rings = max(2, int(round(b.length / axial_step)) + 1)
    n_around = max(3, int(round(2 * math.pi * b.radius / arc_step)))
    u, v = orthonormal_basis(b.direction)
    pts = []
    for k, t in enumerate(np.linspace(0.0, b.length, n_rings)):
        phase = (k % 2) * math.pi / n_around  # stagger alternate rings
        ang = phase + 2 * math.pi * np.arange(n_around) / n_around
        ring = (b.origin + t * b.direction)[None, :] + b.radius * (
            np.cos(ang)[:, None] * u[None, :] + np.sin(ang)[:, None] * v[None, :])
        pts.append(ring)
    return np.concatenate(pts)


def emit_truth_markings(phantom: Phantom, mode: str = "sparse") -> GroundTruth:
    """Surface points on every branch; hidden points (inside other solids) are dropped.

    ``sparse`` marks roughly every 4 mm around and along each vessel; ``dense``
    marks at the finest voxel pitch.
    """
    if mode == "sparse":
        step = SPARSE_SPACING_MM
    elif mode == "dense":
        step = min(phantom.config.spacing)
    else:
        raise ValueError("mode must be 'sparse' or 'dense'")
    g = phantom.config.geometry
    lo = np.asarray(g.origin)
    hi = lo + (np.asarray(g.dims) - 1) * np.asarray(g.spacing)
    everything = [(b.origin, b.end, b.radius) for _, b in phantom.objects()]
    if phantom.airway is not None:
        a = phantom.airway
        everything.append((a.start, a.start + a.length * a.direction, a.lumen_radius + a.wall_thickness))
    objects = []
    for label, b in phantom.objects():
        pts = _ring_points(b, step, step)
        keep = np.all((pts >= lo) & (pts <= hi), axis=1)
        for o0, o1, r in everything:
            if o0 is b.origin:
                continue
            keep &= segment_distance(pts, o0, o1) > r + 1e-6
        pts = pts[keep]
        if len(pts):
            objects.append(TruthObject(label, b.kind, pts))
    return GroundTruth(objects)
