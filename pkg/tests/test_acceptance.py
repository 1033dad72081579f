"""Acceptance criteria, one test each.

Every test records a single PASS/FAIL line, printed in the terminal summary.
Tolerances are the stated ones; nothing here is tuned to make a check pass.
"""

import json
import math
import time
from contextlib import contextmanager
from types import SimpleNamespace

import numpy as np
import pytest

from vesseltrack.cli import main
from vesseltrack.phantom import (
    Phantom,
    PhantomConfig,
    build_phantom,
    default_origin,
    emit_truth_markings,
    generate_tree,
    murray_child_radius,
    rasterize,
    segment_segment_distance,
)
from vesseltrack.preprocess import dilate_mask, threshold_soft_tissue
from vesseltrack.ssmetric import (
    ARTERY,
    VEIN,
    GroundTruth,
    TruthObject,
    evaluate,
    extract_surface,
    object_stats,
    signed_distances,
    training_score,
)
from vesseltrack.tracker import Cylinder, TrackerParams, score_cylinder, track_tree, upstream_index
from vesseltrack.volgrid import Mask, Volume, load_volume, save_volume

from conftest import ACCEPTANCE, tube_phantom


@contextmanager
def criterion(n, title):
    rec = SimpleNamespace(detail="")
    try:
        yield rec
    except BaseException:
        ACCEPTANCE[n] = f"criterion {n:2d} FAIL  {title}  {rec.detail}".rstrip()
        print(ACCEPTANCE[n])
        raise
    ACCEPTANCE[n] = f"criterion {n:2d} PASS  {title}  {rec.detail}".rstrip()
    print(ACCEPTANCE[n])


def axis_coverage(cylinders, origin, direction, length, step=0.25):
    """Fraction of axis sample points that lie inside at least one cylinder."""
    t = np.arange(0.0, length + 1e-9, step)
    pts = np.asarray(origin) + t[:, None] * np.asarray(direction)
    hit = np.zeros(len(pts), bool)
    for c in cylinders:
        rel = pts - np.asarray(c.base)
        a = np.asarray(c.axis)
        tt = rel @ a
        rad = np.linalg.norm(rel - tt[:, None] * a, axis=1)
        hit |= (tt >= 0) & (tt <= c.height) & (rad <= c.radius)
    return float(hit.mean())


# ---------------------------------------------------------------- 1

def oracle_score(mask, cyl):
    """Vectorised scan of every lattice point in the cylinder's world bounding box."""
    g = mask.geometry
    o, s = np.asarray(g.origin), np.asarray(g.spacing)
    b, a = np.asarray(cyl.base), np.asarray(cyl.axis)
    ends = np.stack([b, b + cyl.height * a])
    lo = ends.min(0) - cyl.radius
    hi = ends.max(0) + cyl.radius
    axes = [np.arange(math.ceil((lo[k] - o[k]) / s[k]) - 1, math.floor((hi[k] - o[k]) / s[k]) + 2)
            for k in range(3)]
    idx = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)
    p = o + idx * s - b
    t = p @ a
    cross = np.cross(p, a)
    inside = (t >= 0) & (t <= cyl.height) & ((cross * cross).sum(1) <= cyl.radius ** 2)
    idx = idx[inside]
    inb = np.all((idx >= 0) & (idx < np.asarray(g.dims)), axis=1)
    fg = np.zeros(len(idx), bool)
    fg[inb] = mask.values[tuple(idx[inb].T)]
    n_fg = int(fg.sum())
    total = len(idx)
    return n_fg - 5 * (total - n_fg), (n_fg / total if total else 0.0)


def test_criterion_01_score_oracle():
    with criterion(1, "cylinder score equals brute-force voxel scan") as rec:
        rng = np.random.default_rng(101)
        t0 = time.perf_counter()
        mismatches = 0
        for _ in range(100):
            sp = tuple(rng.uniform(0.5, 1.5, 3))
            m = Mask(rng.random((32, 32, 32)) < rng.uniform(0.1, 0.9), sp, tuple(rng.uniform(-5, 5, 3)))
            ext = np.asarray(sp) * 32
            cyl = Cylinder(rng.uniform(-0.1, 1.1, 3) * ext, rng.normal(size=3), rng.uniform(0.5, 8.0),
                           rng.uniform(1.0, 20.0))
            mismatches += score_cylinder(m, cyl) != oracle_score(m, cyl)
        elapsed = time.perf_counter() - t0
        rec.detail = f"(100 cylinders, {mismatches} mismatches, {elapsed:.2f} s)"
        assert mismatches == 0
        assert elapsed < 10.0


# ---------------------------------------------------------------- 2

def all_pairs_signed(points, mask):
    surf = extract_surface(mask).points
    q = points[:, None, :]
    dx = surf[None, :, 0] - q[..., 0]
    dy = surf[None, :, 1] - q[..., 1]
    dz = surf[None, :, 2] - q[..., 2]
    d = np.sqrt((dx * dx + dy * dy + dz * dz).min(axis=1))
    g = mask.geometry
    idx = np.floor((points - np.asarray(g.origin)) / np.asarray(g.spacing) + 0.5).astype(int)
    ok = np.all((idx >= 0) & (idx < np.asarray(g.dims)), axis=1)
    inside = np.zeros(len(points), bool)
    inside[ok] = mask.values[tuple(idx[ok].T)]
    return np.where(inside, -d, d)


def test_criterion_02_metric_oracle():
    with criterion(2, "signed distances equal all-pairs brute force bit for bit") as rec:
        counts, bad = [], 0
        for seed, radius in enumerate((3.0, 3.5, 4.0, 4.5, 5.0)):
            cfg = PhantomConfig(dims=(64, 64, 64), noise_sigma=150.0, seed=seed, airway_offset=None)
            ph = build_phantom(cfg, generations=2, root_radius=radius, length_factor=3.0, n_veins=1)
            mask = threshold_soft_tissue(rasterize(ph)[0])
            truth = emit_truth_markings(ph, "dense")
            pts = np.concatenate([o.points for o in truth.objects])
            counts.append(len(pts))
            fast = signed_distances(TruthObject("all", ARTERY, pts), extract_surface(mask)).distances
            slow = all_pairs_signed(pts, mask)
            bad += int(np.sum(fast.view(np.uint64) != slow.view(np.uint64)))
        rec.detail = f"(points per phantom {counts}, {bad} values differing in any bit)"
        assert min(counts) >= 200
        assert bad == 0


# ---------------------------------------------------------------- 3

def test_criterion_03_statistics():
    with criterion(3, "hand-checkable ASD / RMSD") as rec:
        a = object_stats(np.array([3.0, 4.0]))
        b = object_stats(np.array([1.0, -1.0]))
        rec.detail = f"({{3,4}}: {a.asd:.10f}/{a.rmsd:.10f}; {{+1,-1}}: {b.asd:.10f}/{b.rmsd:.10f})"
        assert abs(a.asd - 3.5) <= 1e-9
        assert abs(a.rmsd - 3.5355339059) <= 1e-9
        assert abs(b.asd) <= 1e-9
        assert abs(b.rmsd - 1.0) <= 1e-9


# ---------------------------------------------------------------- 4

def test_criterion_04_classification():
    with criterion(4, "classification contract on a staged fixture") as rec:
        a = np.zeros((40, 40, 40), bool)
        a[5:35, 5:35, 5:20] = True  # top face is the z = 19 surface voxel layer
        mask = Mask(a)
        # points straight above surface voxel centers, far from edges: distance is the height
        objs = []
        for k, (label, kind, d) in enumerate([("artery_1", ARTERY, 1.2), ("artery_2", ARTERY, 2.5),
                                              ("vein_1", VEIN, 0.8), ("vein_2", VEIN, 3.0)]):
            xy = np.array([[10 + 5 * k, y] for y in (12, 16, 20)], float)
            objs.append(TruthObject(label, kind, np.column_stack([xy, np.full(3, 19.0 + d)])))
        ev = evaluate(mask, GroundTruth(objs))
        rmsd = {k: round(s.rmsd, 6) for k, s in ev.stats.items()}
        r = ev.report
        rec.detail = f"(RMSD {rmsd}; TP={r.tp} FN={r.fn} FP={r.fp} TN={r.tn}; score {ev.score})"
        assert rmsd == {"artery_1": 1.2, "artery_2": 2.5, "vein_1": 0.8, "vein_2": 3.0}
        assert (r.tp, r.fn, r.fp, r.tn) == (1, 1, 1, 1)
        assert training_score(r) == 0


# ---------------------------------------------------------------- 5

def test_criterion_05_straight_tube():
    with criterion(5, "straight tube recovery") as rec:
        t0 = time.perf_counter()
        ph = tube_phantom(radius=5.0, length=60.0)
        mask = threshold_soft_tissue(rasterize(ph)[0])
        root = ph.tree.root
        tree = track_tree(mask, SimpleNamespace(position=root.origin, direction=root.direction))
        elapsed = time.perf_counter() - t0
        cyls = list(tree.cylinders())
        cov = axis_coverage(cyls, root.origin, root.direction, root.length)
        radii = np.array([c.radius for c in cyls])
        rec.detail = (f"(coverage {cov:.3f}, radii {radii.min():.2f}-{radii.max():.2f} mm, "
                      f"{tree.n_bifurcations} bifurcations, {elapsed:.1f} s)")
        assert len(tree.segments) == 1
        assert cov >= 0.90
        assert np.all(np.abs(radii - 5.0) <= 0.5)
        assert tree.n_bifurcations == 0
        assert elapsed < 60.0


# ---------------------------------------------------------------- 6

def test_criterion_06_bifurcation():
    with criterion(6, "Y-phantom bifurcation") as rec:
        cfg = PhantomConfig(dims=(96, 96, 96), airway_offset=None)
        tree_spec = generate_tree(2, 4.0, 60.0, origin=default_origin(cfg), length_factor=5.0)
        ph = Phantom(tree_spec, cfg)
        mask = threshold_soft_tissue(rasterize(ph)[0])
        root = tree_spec.root
        kids = root.children
        assert all(abs(k.radius - 3.1748) < 1e-4 for k in kids)
        tree = track_tree(mask, SimpleNamespace(position=root.origin, direction=root.direction))
        params = TrackerParams()
        # radius ratio that triggered the bifurcation, measured along the parent's path
        parent = next(s for s in tree.segments.values() if s.children)
        first = tree.segments[parent.children[0]].cylinders[0]
        path = parent.cylinders + [first]
        ratio = first.radius / path[upstream_index(path, params.h0 / 2)].radius
        cyls = list(tree.cylinders())
        cov = [axis_coverage(cyls, k.origin, k.direction, k.length) for k in kids]
        ev = evaluate(tree.captured_mask(), emit_truth_markings(ph, "sparse"))
        rmsd = [ev.stats[f"artery_{k.id + 1}"].rmsd for k in kids]
        model = murray_child_radius(root.radius) / root.radius
        rec.detail = (f"({tree.n_bifurcations} bifurcation, trigger ratio {ratio:.3f} "
                      f"(model {model:.3f}), "
                      f"child coverage {cov[0]:.2f}/{cov[1]:.2f}, child RMSD {rmsd[0]:.2f}/{rmsd[1]:.2f} mm)")
        assert tree.n_bifurcations >= 1
        assert ratio < params.radius_change_threshold
        assert min(cov) >= 0.80
        assert max(rmsd) < 2.0


# ---------------------------------------------------------------- 7

def test_criterion_07_leak():
    with criterion(7, "leak rule on a tube flaring into a sphere") as rec:
        dims = (64, 64, 100)
        c = np.array([31.5, 31.5])
        z0, z_join, big = 8.0, 50.0, 15.0
        cz = z_join + big - 2.0  # the sphere swallows the tube end
        idx = np.indices(dims).reshape(3, -1).T.astype(float)
        tube = (np.hypot(idx[:, 0] - c[0], idx[:, 1] - c[1]) <= 4.0) & (idx[:, 2] >= z0) & (idx[:, 2] <= z_join)
        ball = np.linalg.norm(idx - np.array([c[0], c[1], cz]), axis=1) <= big
        mask = Mask((tube | ball).reshape(dims))
        params = TrackerParams()
        tree = track_tree(mask, SimpleNamespace(position=np.array([c[0], c[1], z0]),
                                                direction=np.array([0.0, 0.0, 1.0])), params)
        worst = 0.0
        for sid in tree.segments:
            path = tree.path_to_root(sid)
            for k, cyl in enumerate(path):
                ref = upstream_index(path[:k + 1], params.h0)
                if ref is not None:
                    worst = max(worst, cyl.radius / path[ref].radius)
        entry = cz - big
        reach = max(float(cyl.tip[2]) for cyl in tree.cylinders())
        terms = sorted({s.termination for s in tree.segments.values()})
        rec.detail = (f"(max radius / radius h0 upstream {worst:.3f}, tracked to z={reach:.1f} "
                      f"with the sphere entered at z={entry:.1f}, terminations {terms})")
        assert worst <= params.leak_ratio
        assert max(c.radius for c in tree.cylinders()) < 1.5 * 4.0
        assert reach <= entry + params.h0


# ---------------------------------------------------------------- 8, 9

@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    """3-generation tree with 3 decoy veins, noise 50 HU, seeded from the airway through the CLI."""
    d = tmp_path_factory.mktemp("e2e")
    ph_dir, seg_dir = d / "phantom", d / "seg"
    assert main(["phantom", "--out", str(ph_dir), "--generations", "3", "--root-radius", "5",
                 "--length-factor", "5", "--veins", "3", "--noise", "50", "--airway", "--seed", "0"]) == 0
    code = main(["segment", str(ph_dir / "volume.mha"), "--airway", str(ph_dir / "airway.json"),
                 "--airway-lumen", str(ph_dir / "airway_lumen.mha"), "--out", str(seg_dir)])
    reports = {}
    for kind in ("sparse", "dense"):
        out = d / f"eval_{kind}"
        assert main(["evaluate", str(seg_dir / "segmentation.mha"), str(ph_dir / f"truth_{kind}.csv"),
                     "--out", str(out)]) == 0
        reports[kind] = (json.loads((out / "report.json").read_text()), out / "distances.csv")
    return SimpleNamespace(dir=ph_dir, code=code, reports=reports,
                           spec=json.loads((ph_dir / "phantom.json").read_text()))


def test_criterion_08_end_to_end(e2e):
    with criterion(8, "end-to-end phantom sensitivity / specificity") as rec:
        rep = e2e.reports["sparse"][0]
        ph = Phantom.from_dict(e2e.spec)
        radii = [b.radius for b in ph.arteries()]
        gaps = [segment_segment_distance(v.origin, v.end, b.origin, b.end) - v.radius - b.radius
                for v in ph.veins for b in ph.arteries()]
        cl = rep["classification"]
        rec.detail = (f"(arteries TP {cl['TP']}/7, veins TN {cl['TN']}/3, "
                      f"min artery radius {min(radii):.2f} mm, min vein gap {min(gaps):.2f} mm)")
        assert e2e.code == 0
        assert len(radii) == 7 and min(radii) >= 2.0
        assert len(ph.veins) == 3 and min(gaps) >= 5.0 - 1e-6
        assert ph.config.noise_sigma == 50.0
        assert cl["TP"] >= 6 and cl["TN"] >= 2


def read_distances(path):
    out = {}
    for line in path.read_text().splitlines()[1:]:
        label, _, d = line.split(",")
        out.setdefault(label, []).append(float(d))
    return {k: np.array(v) for k, v in out.items()}


def test_criterion_09_sparse_vs_dense(e2e):
    with criterion(9, "sparse and dense markings agree") as rec:
        (sparse, sp_csv), (dense, de_csv) = e2e.reports["sparse"], e2e.reports["dense"]
        tp = lambda rep: {o["label"] for o in rep["objects"] if o["kind"] == ARTERY and o["category"] == "TP"}
        both = sorted(tp(sparse) & tp(dense))
        d_s, d_d = read_distances(sp_csv), read_distances(de_csv)
        a_s = float(np.mean(np.concatenate([d_s[k] for k in both])))
        a_d = float(np.mean(np.concatenate([d_d[k] for k in both])))
        n_s = sum(len(d_s[k]) for k in both)
        n_d = sum(len(d_d[k]) for k in both)
        rec.detail = (f"(ASD dense {a_d:.3f} mm over {n_d} points, sparse {a_s:.3f} mm over {n_s} points, "
                      f"difference {abs(a_d - a_s):.3f} mm, {len(both)} arteries)")
        assert len(both) >= 6
        assert abs(a_d - a_s) < 0.1


# ---------------------------------------------------------------- 10

def test_criterion_10_sweep(tmp_path):
    with criterion(10, "full training grid sweep") as rec:
        case = tmp_path / "case64"
        assert main(["phantom", "--out", str(case), "--dims", "64", "64", "64", "--generations", "2",
                     "--root-radius", "4", "--veins", "2", "--noise", "30", "--airway", "--seed", "1"]) == 0
        t0 = time.perf_counter()
        assert main(["sweep", "--case", str(case), "--out", str(tmp_path / "a")]) == 0
        elapsed = time.perf_counter() - t0
        assert main(["sweep", "--case", str(case), "--out", str(tmp_path / "b")]) == 0
        a = (tmp_path / "a" / "sweep.csv").read_bytes()
        b = (tmp_path / "b" / "sweep.csv").read_bytes()
        rows = [line.split(",") for line in a.decode().splitlines()[1:]]
        score = {(r[0], r[1], r[2]): int(r[-1]) for r in rows}
        opt, corner = score[("15", "0.20", "0.90")], score[("5", "0.10", "1.00")]
        rec.detail = (f"({len(rows)} tuples, {elapsed:.0f} s per pass, identical re-run {a == b}, "
                      f"score (15,0.20,0.90)={opt} vs (5,0.10,1.00)={corner}, best {rows[0][-1]})")
        assert len(rows) == 180 and len(score) == 180
        assert a == b
        assert opt >= corner


# ---------------------------------------------------------------- 11

def test_criterion_11_invariants(tmp_path):
    with criterion(11, "invariant suites") as rec:
        rng = np.random.default_rng(11)
        # surface counts on n^3 blocks
        for n in range(2, 13):
            a = np.zeros((n + 4,) * 3, bool)
            a[2:2 + n, 2:2 + n, 2:2 + n] = True
            assert len(extract_surface(Mask(a))) == n ** 3 - (n - 2) ** 3
        # I/O round trips
        n_io = 0
        for suffix in (".mha", ".mhd", ".json"):
            for k in range(5):
                dims = tuple(rng.integers(1, 9, 3))
                v = Volume(rng.integers(-32768, 32767, size=dims, dtype=np.int16),
                           tuple(rng.uniform(0.3, 2.0, 3)), tuple(rng.uniform(-50, 50, 3)))
                save_volume(v, tmp_path / f"v{k}{suffix}")
                w = load_volume(tmp_path / f"v{k}{suffix}")
                assert np.array_equal(w.values, v.values) and w.geometry == v.geometry
                m = Mask(rng.random(dims) < 0.5, v.spacing, v.origin)
                save_volume(m, tmp_path / f"m{k}{suffix}")
                assert np.array_equal(load_volume(tmp_path / f"m{k}{suffix}").values, m.values)
                n_io += 2
        # dilation monotonicity
        for _ in range(50):
            sp = tuple(rng.uniform(0.6, 1.4, 3))
            a = rng.random((10, 9, 8)) < 0.05
            b = a | (rng.random((10, 9, 8)) < 0.05)
            r = float(rng.uniform(0.5, 3.0))
            da = dilate_mask(Mask(a, sp), r).values
            db = dilate_mask(Mask(b, sp), r).values
            assert not np.any(da & ~db) and not np.any(a & ~da)
        # |ASD| <= RMSD
        for _ in range(1000):
            d = rng.normal(rng.uniform(-5, 5), rng.uniform(0.01, 5), size=int(rng.integers(1, 200)))
            s = object_stats(d)
            assert abs(s.asd) <= s.rmsd + 1e-12
        rec.detail = f"(11 block sizes, {n_io} round trips, 50 dilation pairs, 1000 distance sets)"
