"""Command-line entry point.

Subcommands::

    vesseltrack phantom  --out DIR [--generations N --veins N --noise HU --airway ...]
    vesseltrack segment  VOLUME --airway CENTERLINES.json [--airway-lumen MASK] --out DIR
    vesseltrack evaluate SEGMENTATION TRUTH.csv --out DIR
    vesseltrack sweep    --case DIR [--case DIR ...] --out DIR

Exit codes: 0 success, 1 usage or I/O error, 2 algorithmic failure (no tree
could be seeded).
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .phantom import PhantomConfig, build_phantom, emit_truth_markings, rasterize
from .preprocess import working_mask
from .seeding import SeedingError, read_centerlines, seed_from_airway, write_centerlines
from .ssmetric import RMS_THRESHOLD_MM, GroundTruth, evaluate, read_truth_csv, write_truth_csv
from .tracker import TrackerParams, VesselTree, track_tree
from .volgrid import Mask, Volume, VolumeFormatError, load_volume, require_same_geometry, save_volume, write_json

log = logging.getLogger("vesseltrack")

EXIT_OK, EXIT_USAGE, EXIT_FAILURE = 0, 1, 2
SCHEMA_VERSION = 1

# Training grid: (start, stop, step), inclusive.
SWEEP_H0 = (5.0, 30.0, 5.0)
SWEEP_STEP = (0.10, 0.30, 0.05)
SWEEP_DELTA = (0.75, 1.00, 0.05)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def grid(start: float, stop: float, step: float) -> list[float]:
    """Inclusive arithmetic grid, rounded to kill float drift."""
    if step <= 0 or stop < start:
        raise ValueError(f"bad grid {start}:{stop}:{step}")
    n = int(np.floor((stop - start) / step + 1e-9)) + 1
    return [round(start + k * step, 10) for k in range(n)]


# --------------------------------------------------------------------------
# Pipeline pieces shared by segment and sweep


@dataclass
class PreparedCase:
    """Everything upstream of tracking: the binary mask and the seeds."""

    mask: Mask
    seeds: list
    failures: dict[str, str]


def prepare_case(volume: Volume, centerlines, airway_lumen: Optional[Mask] = None) -> PreparedCase:
    """Median filter, threshold, airway removal and one seed per airway branch."""
    if airway_lumen is not None:
        require_same_geometry(volume, airway_lumen)
    filtered, mask = working_mask(volume, airway_lumen)
    seeds, failures = [], {}
    for path in centerlines:
        try:
            seeds.append(seed_from_airway(filtered, path, airway_lumen, filtered=True))
        except SeedingError as exc:
            failures[path.label] = str(exc)
            log.warning("seeding failed for %s: %s", path.label, exc)
    return PreparedCase(mask, seeds, failures)


def track_case(case: PreparedCase, params: TrackerParams) -> list[VesselTree]:
    return [track_tree(case.mask, s, params) for s in case.seeds]


def segmentation_labels(mask: Mask, trees: Sequence[VesselTree]) -> Volume:
    """uint16 label volume, segments numbered consecutively across trees."""
    out = np.zeros(mask.dims, dtype=np.uint16)
    nxt = 1
    for tree in trees:
        lab = tree.label_array(first_label=nxt)
        free = (out == 0) & (lab > 0)
        out[free] = lab[free]
        nxt += len(tree.segments)
    return Volume(out, mask.spacing, mask.origin)


def seeded(trees: Sequence[VesselTree]) -> list[VesselTree]:
    return [t for t in trees if t.failure is None and t.segments]


def tree_document(trees, params: TrackerParams, failures: dict[str, str]) -> dict:
    return {"schema_version": SCHEMA_VERSION, "params": _params_dict(params),
            "seeding_failures": dict(failures), "trees": [t.to_dict() for t in trees]}


def _params_dict(params: TrackerParams) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in params.__dict__.items()}


# --------------------------------------------------------------------------
# Subcommands


def cmd_phantom(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = PhantomConfig(dims=tuple(args.dims), spacing=tuple(args.spacing), noise_sigma=args.noise,
                        seed=args.seed, airway_offset=args.airway_offset if args.airway else None)
    ph = build_phantom(cfg, generations=args.generations, root_radius=args.root_radius,
                       angle_deg=args.angle, length_factor=args.length_factor,
                       n_veins=args.veins, vein_radius=args.vein_radius)
    volume, labels, lumen = rasterize(ph)
    save_volume(volume, out / "volume.mha")
    save_volume(labels, out / "labels.mha")
    write_truth_csv(emit_truth_markings(ph, "dense"), out / "truth_dense.csv")
    write_truth_csv(emit_truth_markings(ph, "sparse"), out / "truth_sparse.csv")
    write_json(out / "phantom.json", ph.to_dict())
    if ph.airway is not None:
        write_centerlines(out / "airway.json", [(ph.airway.label, ph.airway.centerline())])
        save_volume(lumen, out / "airway_lumen.mha")
    return EXIT_OK


def _params_from(args) -> TrackerParams:
    return TrackerParams(h0=args.h0, step_frac=args.step_frac, radius_change_threshold=args.delta_radius,
                         n_directions=args.directions)


def _load_case_inputs(volume_path, airway_path, lumen_path):
    volume = load_volume(volume_path)
    if isinstance(volume, Mask):
        raise VolumeFormatError(f"{volume_path}: expected an intensity volume, got a binary mask")
    centerlines = read_centerlines(airway_path)
    lumen = None
    if lumen_path is not None:
        lm = load_volume(lumen_path)
        lumen = lm if isinstance(lm, Mask) else Mask.like(lm, lm.values > 0)
    return volume, centerlines, lumen


def cmd_segment(args) -> int:
    params = _params_from(args)
    volume, centerlines, lumen = _load_case_inputs(args.volume, args.airway, args.airway_lumen)
    case = prepare_case(volume, centerlines, lumen)
    trees = track_case(case, params)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "tree.json", tree_document(trees, params, case.failures))
    save_volume(segmentation_labels(case.mask, trees), out / "segmentation.mha")
    if not seeded(trees):
        log.error("no artery tree could be seeded")
        return EXIT_FAILURE
    return EXIT_OK


def _load_segmentation(path) -> Mask:
    seg = load_volume(path)
    return seg if isinstance(seg, Mask) else Mask.like(seg, seg.values > 0)


def cmd_evaluate(args) -> int:
    seg = _load_segmentation(args.segmentation)
    truth = read_truth_csv(args.truth)
    ev = evaluate(seg, truth, args.rms_threshold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "report.json", ev.to_dict())
    ev.write_distance_csv(out / "distances.csv")
    return EXIT_OK


@dataclass
class SweepCase:
    name: str
    prepared: PreparedCase
    truth: GroundTruth


def _case_from_dir(path: Path, truth_kind: str) -> SweepCase:
    lumen = path / "airway_lumen.mha"
    volume, centerlines, lumen_mask = _load_case_inputs(path / "volume.mha", path / "airway.json",
                                                        lumen if lumen.exists() else None)
    truth = read_truth_csv(path / f"truth_{truth_kind}.csv")
    return SweepCase(path.name, prepare_case(volume, centerlines, lumen_mask), truth)


def score_tuple(cases: Sequence[SweepCase], params: TrackerParams, rms_threshold: float) -> dict:
    """Sum the classification counts over all cases for one parameter tuple."""
    tot = dict(TP=0, FN=0, TN=0, FP=0)
    for case in cases:
        trees = track_case(case.prepared, params)
        seg = Mask.like(case.prepared.mask, segmentation_labels(case.prepared.mask, trees).values > 0)
        rep = evaluate(seg, case.truth, rms_threshold).report
        for k in tot:
            tot[k] += getattr(rep, k.lower())
    tot["score"] = tot["TP"] + tot["TN"] - tot["FP"] - tot["FN"]
    return tot


_WORKER_CASES: list = []


def _init_worker(cases):
    global _WORKER_CASES
    _WORKER_CASES = cases


def _worker(job):
    params, thr = job
    return score_tuple(_WORKER_CASES, params, thr)


def run_sweep(cases: Sequence[SweepCase], tuples, base: TrackerParams, rms_threshold: float,
              jobs: int = 1) -> list[dict]:
    """Score every ``(h0, step_frac, delta)`` tuple; rows sorted by score (desc) then parameters."""
    param_list = [replace(base, h0=h, step_frac=s, radius_change_threshold=d) for h, s, d in tuples]
    if jobs > 1:
        with ProcessPoolExecutor(jobs, initializer=_init_worker, initargs=(list(cases),)) as ex:
            results = list(ex.map(_worker, [(p, rms_threshold) for p in param_list]))
    else:
        results = [score_tuple(cases, p, rms_threshold) for p in param_list]
    rows = [{"h0": h, "step_frac": s, "delta_radius": d, **r} for (h, s, d), r in zip(tuples, results)]
    rows.sort(key=lambda r: (-r["score"], r["h0"], r["step_frac"], r["delta_radius"]))
    return rows


SWEEP_COLUMNS = ["h0", "step_frac", "delta_radius", "TP", "FN", "TN", "FP", "score"]


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        w.writerow([f"{r['h0']:g}", f"{r['step_frac']:.2f}", f"{r['delta_radius']:.2f}",
                    *(r[k] for k in SWEEP_COLUMNS[3:])])
    return buf.getvalue()


def cmd_sweep(args) -> int:
    cases = [_case_from_dir(Path(p), args.truth) for p in args.case]
    base = _params_from(args)
    tuples = list(itertools.product(grid(*args.h0_grid), grid(*args.step_grid), grid(*args.delta_grid)))
    for h, s, d in tuples:
        replace(base, h0=h, step_frac=s, radius_change_threshold=d)  # validates before any run
    rows = run_sweep(cases, tuples, base, args.rms_threshold, args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.csv").write_text(sweep_csv(rows))
    return EXIT_OK


# --------------------------------------------------------------------------
# Argument parsing


def _tracker_flags(p):
    d = TrackerParams()
    p.add_argument("--h0", type=float, default=d.h0, help="cylinder height in mm")
    p.add_argument("--step-frac", type=float, default=d.step_frac, help="step length as a fraction of h0")
    p.add_argument("--delta-radius", type=float, default=d.radius_change_threshold,
                   help="radius-ratio threshold for bifurcation candidates")
    p.add_argument("--directions", type=int, default=d.n_directions, help="hemisphere directions per fit")


def _common_flags(p):
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--rms-threshold", type=float, default=RMS_THRESHOLD_MM,
                   help="RMSD (mm) below which an object counts as segmented")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vesseltrack", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom", help="write a synthetic artery tree with truth markings")
    _common_flags(p)
    p.add_argument("--generations", type=int, default=3)
    p.add_argument("--root-radius", type=float, default=4.0)
    p.add_argument("--angle", type=float, default=60.0, help="child-to-child branching angle (deg)")
    p.add_argument("--length-factor", type=float, default=4.0, help="branch length / radius")
    p.add_argument("--veins", type=int, default=0, help="number of decoy vein tubes")
    p.add_argument("--vein-radius", type=float, default=3.0)
    p.add_argument("--noise", type=float, default=0.0, help="Gaussian noise sigma (HU)")
    p.add_argument("--dims", type=int, nargs=3, default=[128, 128, 128])
    p.add_argument("--spacing", type=float, nargs=3, default=[0.7, 0.7, 1.25])
    p.add_argument("--airway", action="store_true", help="add an airway beside the root artery")
    p.add_argument("--airway-offset", type=float, default=10.0, help="airway-to-artery axis distance (mm)")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("segment", help="seed from airways and track the artery tree")
    p.add_argument("volume")
    p.add_argument("--airway", required=True, help="airway centerline JSON")
    p.add_argument("--airway-lumen", help="binary airway lumen volume")
    _common_flags(p)
    _tracker_flags(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("evaluate", help="sparse-surface evaluation against truth markings")
    p.add_argument("segmentation")
    p.add_argument("truth")
    _common_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="grid search over h0, step fraction and radius threshold")
    p.add_argument("--case", action="append", required=True,
                   help="phantom-layout directory (volume.mha, airway.json, truth_*.csv); repeatable")
    p.add_argument("--truth", choices=["sparse", "dense"], default="sparse")
    p.add_argument("--h0-grid", type=float, nargs=3, default=list(SWEEP_H0), metavar=("START", "STOP", "STEP"))
    p.add_argument("--step-grid", type=float, nargs=3, default=list(SWEEP_STEP), metavar=("START", "STOP", "STEP"))
    p.add_argument("--delta-grid", type=float, nargs=3, default=list(SWEEP_DELTA),
                   metavar=("START", "STOP", "STEP"))
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    _common_flags(p)
    _tracker_flags(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError) as exc:
        # ValueError covers VolumeFormatError, bad parameters and malformed inputs
        print(f"vesseltrack: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
