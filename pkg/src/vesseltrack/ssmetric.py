"""Sparse-surface evaluation of a segmentation against marked surface points.

Every ground-truth point is mapped to the Euclidean distance to the nearest
surface voxel of the segmentation.  The distance is negative when the point
lies inside the segmentation.  Per-object statistics of these signed
distances give bias (ASD) and error magnitude (RMSD).  Thresholding RMSD
classifies each marked artery or vein.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .volgrid import Mask

ARTERY = "artery"
VEIN = "vein"
RMS_THRESHOLD_MM = 2.0


@dataclass(frozen=True, eq=False)
class TruthObject:
    label: str
    kind: str
    points: np.ndarray  # (n, 3) world mm


@dataclass(eq=False)
class GroundTruth:
    objects: list[TruthObject] = field(default_factory=list)

    def __post_init__(self):
        labels = [o.label for o in self.objects]
        if len(set(labels)) != len(labels):
            raise ValueError("ground-truth labels must be unique")
        for o in self.objects:
            if o.kind not in (ARTERY, VEIN):
                raise ValueError(f"object {o.label!r}: kind must be artery or vein, got {o.kind!r}")
            if len(o.points) == 0:
                raise ValueError(f"object {o.label!r} has no points")

    def __len__(self):
        return len(self.objects)

    def __getitem__(self, label) -> TruthObject:
        for o in self.objects:
            if o.label == label:
                return o
        raise KeyError(label)

    @property
    def n_points(self) -> int:
        return sum(len(o.points) for o in self.objects)


def write_truth_csv(truth: GroundTruth, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["object_label", "kind", "x", "y", "z"])
        for o in truth.objects:
            for p in o.points:
                w.writerow([o.label, o.kind, *(repr(float(v)) for v in p)])


def read_truth_csv(path) -> GroundTruth:
    groups: dict[str, tuple[str, list]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            label = row["object_label"]
            kind = row["kind"].strip().lower()
            entry = groups.setdefault(label, (kind, []))
            if entry[0] != kind:
                raise ValueError(f"object {label!r} has mixed kinds")
            entry[1].append([float(row["x"]), float(row["y"]), float(row["z"])])
    if not groups:
        raise ValueError(f"{path}: no ground-truth points")
    return GroundTruth([TruthObject(k, v[0], np.asarray(v[1], dtype=float)) for k, v in groups.items()])


@dataclass(frozen=True, eq=False)
class SurfaceSet:
    points: np.ndarray  # (k, 3) world mm of boundary voxel centers
    indices: np.ndarray  # (k, 3) voxel indices
    mask: Mask

    def __len__(self):
        return len(self.points)


def extract_surface(mask: Mask) -> SurfaceSet:
    """Foreground voxels with at least one background face neighbour (outside counts as background)."""
    v = np.pad(mask.values, 1, constant_values=False)
    core = v[1:-1, 1:-1, 1:-1]
    interior = (core
                & v[:-2, 1:-1, 1:-1] & v[2:, 1:-1, 1:-1]
                & v[1:-1, :-2, 1:-1] & v[1:-1, 2:, 1:-1]
                & v[1:-1, 1:-1, :-2] & v[1:-1, 1:-1, 2:])
    idx = np.argwhere(core & ~interior)
    return SurfaceSet(mask.voxel_to_world(idx), idx, mask)


def _sq_dist(q: np.ndarray, pts: np.ndarray) -> np.ndarray:
    # Shared by the accelerated and brute-force paths: identical arithmetic
    # keeps their minima bit-identical.
    dx = pts[..., 0] - q[..., 0]
    dy = pts[..., 1] - q[..., 1]
    dz = pts[..., 2] - q[..., 2]
    return dx * dx + dy * dy + dz * dz


def interior_flags(points, mask: Mask) -> np.ndarray:
    """True where a point falls inside a foreground voxel of ``mask``."""
    idx = mask.geometry.nearest_index(np.asarray(points, dtype=float))
    ok = mask.geometry.contains_index(idx)
    out = np.zeros(len(idx), dtype=bool)
    sel = idx[ok]
    out[ok] = mask.values[sel[:, 0], sel[:, 1], sel[:, 2]]
    return out


def nearest_surface_distance(points, surf: SurfaceSet) -> np.ndarray:
    """Unsigned nearest-surface distance for each point (k-d tree candidates, exact recheck)."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(surf) == 0:
        return np.full(len(pts), np.inf)
    tree = cKDTree(surf.points)
    approx, _ = tree.query(pts)
    out = np.empty(len(pts))
    for i, (q, d) in enumerate(zip(pts, approx)):
        cand = tree.query_ball_point(q, d * (1 + 1e-9) + 1e-9)
        out[i] = _sq_dist(q, surf.points[cand]).min()
    return np.sqrt(out)


def brute_force_distance(points, surf: SurfaceSet, chunk: int = 256) -> np.ndarray:
    """All-pairs nearest-surface distance; the oracle for :func:`nearest_surface_distance`."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(surf) == 0:
        return np.full(len(pts), np.inf)
    out = np.empty(len(pts))
    for c0 in range(0, len(pts), chunk):
        q = pts[c0:c0 + chunk]
        out[c0:c0 + chunk] = _sq_dist(q[:, None, :], surf.points[None, :, :]).min(axis=1)
    return np.sqrt(out)


@dataclass(frozen=True, eq=False)
class DistanceSet:
    label: str
    kind: str
    distances: np.ndarray  # signed, mm


def signed_distances(obj: TruthObject, surf: SurfaceSet, brute_force: bool = False) -> DistanceSet:
    """Signed nearest-surface distance of each marked point; negative inside the segmentation.

    With an empty segmentation every point is exterior at ``+inf``.
    """
    pts = np.asarray(obj.points, dtype=float)
    if len(surf) == 0:
        return DistanceSet(obj.label, obj.kind, np.full(len(pts), np.inf))
    dist = brute_force_distance(pts, surf) if brute_force else nearest_surface_distance(pts, surf)
    sign = np.where(interior_flags(pts, surf.mask), -1.0, 1.0)
    return DistanceSet(obj.label, obj.kind, sign * dist)


@dataclass(frozen=True)
class ObjectStats:
    asd: float
    rmsd: float
    max_negative: float
    max_positive: float
    n_points: int
    has_negative: bool = True
    has_positive: bool = True

    def to_dict(self) -> dict:
        return {k: _json_float(getattr(self, k)) for k in
                ("asd", "rmsd", "max_negative", "max_positive", "n_points", "has_negative", "has_positive")}


def _json_float(v):
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    v = float(v)
    return v if math.isfinite(v) else ("inf" if v > 0 else "-inf" if v < 0 else "nan")


def object_stats(d: DistanceSet | np.ndarray) -> ObjectStats:
    """ASD, RMSD and signed extrema.  A missing extremum (one-sided set) is reported as 0."""
    m = np.asarray(d.distances if isinstance(d, DistanceSet) else d, dtype=float)
    if m.size == 0:
        raise ValueError("object_stats needs at least one distance")
    neg = m[m < 0]
    pos = m[m >= 0]
    return ObjectStats(
        asd=float(np.mean(m)),
        rmsd=float(np.sqrt(np.mean(m * m))),
        max_negative=float(neg.min()) if neg.size else 0.0,
        max_positive=float(pos.max()) if pos.size else 0.0,
        n_points=int(m.size),
        has_negative=bool(neg.size),
        has_positive=bool(pos.size),
    )


@dataclass
class ClassificationReport:
    categories: dict[str, str]
    rms_threshold: float = RMS_THRESHOLD_MM
    tp: int = 0
    fn: int = 0
    tn: int = 0
    fp: int = 0

    @property
    def sensitivity(self) -> float:
        n = self.tp + self.fn
        return self.tp / n if n else float("nan")

    @property
    def specificity(self) -> float:
        n = self.tn + self.fp
        return self.tn / n if n else float("nan")

    def to_dict(self) -> dict:
        return {"rms_threshold": self.rms_threshold, "TP": self.tp, "FN": self.fn, "TN": self.tn,
                "FP": self.fp, "sensitivity": _json_float(self.sensitivity),
                "specificity": _json_float(self.specificity), "categories": dict(self.categories)}


def classify_objects(stats: dict[str, ObjectStats], kinds: dict[str, str],
                     rms_threshold: float = RMS_THRESHOLD_MM) -> ClassificationReport:
    """An object counts as segmented when its RMSD is strictly below ``rms_threshold``."""
    report = ClassificationReport({}, rms_threshold)
    for label, st in stats.items():
        hit = st.rmsd < rms_threshold
        if kinds[label] == ARTERY:
            cat = "TP" if hit else "FN"
        else:
            cat = "FP" if hit else "TN"
        report.categories[label] = cat
        setattr(report, cat.lower(), getattr(report, cat.lower()) + 1)
    return report


def training_score(report: ClassificationReport) -> int:
    return report.tp + report.tn - report.fp - report.fn


@dataclass
class Evaluation:
    distances: dict[str, DistanceSet]
    stats: dict[str, ObjectStats]
    report: ClassificationReport

    @property
    def score(self) -> int:
        return training_score(self.report)

    def pooled_asd(self, kinds=(ARTERY,), categories=("TP",)) -> float:
        vals = [self.distances[k].distances for k, c in self.report.categories.items()
                if c in categories and self.distances[k].kind in kinds]
        if not vals:
            return float("nan")
        return float(np.mean(np.concatenate(vals)))

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "objects": [{"label": k, "kind": self.distances[k].kind,
                         "category": self.report.categories[k], **self.stats[k].to_dict()}
                        for k in self.stats],
            "classification": self.report.to_dict(),
            "training_score": self.score,
        }

    def write_distance_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["object_label", "kind", "signed_distance_mm"])
            for k, d in self.distances.items():
                for m in d.distances:
                    w.writerow([k, d.kind, _json_float(m)])


def evaluate(segmentation: Mask, truth: GroundTruth, rms_threshold: float = RMS_THRESHOLD_MM,
             brute_force: bool = False) -> Evaluation:
    surf = extract_surface(segmentation)
    distances, stats = {}, {}
    for obj in truth.objects:
        d = signed_distances(obj, surf, brute_force=brute_force)
        distances[obj.label] = d
        stats[obj.label] = object_stats(d)
    kinds = {o.label: o.kind for o in truth.objects}
    return Evaluation(distances, stats, classify_objects(stats, kinds, rms_threshold))
