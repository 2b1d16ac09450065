"""Command-line front end: ``roofplanes <subcommand> ...``.

Exit codes: 0 success, 1 validation or I/O error, 2 internal invariant violation.
Every subcommand loads and validates all inputs before writing anything.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import zlib
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .cloud_io import CloudIOError, load_cloud, load_labeling, save_labeling, save_xyz
from .config import ConfigError, RunConfig
from .degrade import OPERATORS, apply_operator
from .features import feature_table
from .geometry import build_index, estimate_normals
from .kan import gradient_check
from .metrics import aggregate, evaluate
from .postprocess import filter_by_score, load_scores, pipeline
from .superpoints import make_coarse, make_fine, superpoint_quality

logger = logging.getLogger("roofplanes")

EXIT_OK, EXIT_ERROR, EXIT_INTERNAL = 0, 1, 2
CLOUD_SUFFIXES = (".xyz", ".ply")
LABEL_SUFFIXES = (".labels", ".txt")
TRACE_STAGES = ("raw", "completed", "refined")
KAN_TOLERANCE = 1e-5


class UsageError(ValueError):
    pass


# ------------------------------------------------------------------ helpers


def _config(args) -> RunConfig:
    overrides: Dict[str, str] = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    for key in ("seed", "jobs"):
        if getattr(args, key, None) is not None:
            overrides[key] = str(getattr(args, key))
    return RunConfig.load(args.config, overrides)


def _sample_seed(seed: int, name: str) -> List[int]:
    # per-sample stream, independent of processing order and parallelism
    return [int(seed), zlib.crc32(name.encode("utf-8"))]


def _list_files(directory: Path, suffixes: Sequence[str]) -> Dict[str, Path]:
    if not directory.is_dir():
        raise CloudIOError(f"{directory}: not a directory")
    found: Dict[str, Path] = {}
    for p in sorted(directory.iterdir()):
        if p.is_file() and p.suffix.lower() in suffixes:
            if p.stem in found:
                raise CloudIOError(f"{directory}: two files for sample {p.stem!r}")
            found[p.stem] = p
    return found


def _sidecar_labels(cloud_path: Path) -> Optional[Path]:
    for suffix in LABEL_SUFFIXES:
        cand = cloud_path.with_suffix(suffix)
        if cand.is_file() and cand != cloud_path:
            return cand
    return None


def _load_with_labels(path: Path, labels_path: Optional[Path] = None):
    cloud, labels = load_cloud(path)
    if labels_path is not None:
        labels = load_labeling(labels_path, expected_len=len(cloud))
    return cloud, labels


def _write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _save_table(path: Path, table: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in table:
            fh.write(" ".join(f"{v:.10g}" for v in row) + "\n")


def _pool_map(fn, items: list, jobs: int) -> list:
    workers = jobs or os.cpu_count() or 1
    if workers == 1 or len(items) <= 1:
        return [fn(*it) for it in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as ex:
        return list(ex.map(fn, *zip(*items)))


# ------------------------------------------------------------------ features


def cmd_features(args) -> int:
    cfg = _config(args)
    cloud, _ = load_cloud(args.input)
    table = feature_table(cloud, k=cfg.k_features, k_contour=cfg.k_contour, tau=cfg.tau)
    _save_table(Path(args.output), table)
    logger.info("wrote %d feature rows to %s", len(table), args.output)
    return EXIT_OK


# ------------------------------------------------------------------ superpoints


def cmd_superpoints(args) -> int:
    cfg = _config(args)
    cloud, labels = _load_with_labels(Path(args.input), Path(args.gt) if args.gt else None)
    index = build_index(cloud)
    normals = cloud.normals if cloud.normals is not None else estimate_normals(cloud, index, cfg.k_normals)
    coarse = make_coarse(cloud, index, normals, params=cfg.growth_params(), lam=cfg.lam,
                         k_b=cfg.k_boundary, iters=cfg.local_iters, noise_gate=cfg.noise_gate,
                         k_normals=cfg.k_normals)
    fine = make_fine(cloud, coarse, cfg.n, cfg.seed)
    coarse.check(len(cloud))
    fine.check(len(cloud))
    report = None
    if labels is not None:
        qc = superpoint_quality(coarse, labels, cloud)
        qf = superpoint_quality(fine, labels, cloud)
        report = {"coarse": qc.as_dict(), "fine": qf.as_dict(),
                  "n_coarse": len(coarse), "n_fine": len(fine)}
    save_labeling(fine.point_ids(len(cloud)), args.output)
    if args.coarse:
        save_labeling(coarse.point_ids(len(cloud)), args.coarse)
    if report is not None:
        _write_json(Path(args.quality or f"{args.output}.quality.json"), report)
    logger.info("%d coarse groups, %d fine superpoints", len(coarse), len(fine))
    return EXIT_OK


# ------------------------------------------------------------------ segment


def _segment_one(cloud_path: Path, labels_path: Optional[Path], scores_path: Optional[Path],
                 cfg: RunConfig, min_score: float) -> Dict[str, np.ndarray]:
    cloud, _ = load_cloud(cloud_path)
    external = None
    if labels_path is not None:
        external = load_labeling(labels_path, expected_len=len(cloud))
        if scores_path is not None:
            external = filter_by_score(external, load_scores(scores_path), min_score)
    return pipeline(cloud, cfg, labels=external).stages


def _trace_path(output: Path, stage: str) -> Path:
    return output.with_name(f"{output.name}.{stage}")


def cmd_segment(args) -> int:
    cfg = _config(args)
    inp, out = Path(args.input), Path(args.output)
    if inp.is_dir():
        clouds = _list_files(inp, CLOUD_SUFFIXES)
        if not clouds:
            raise CloudIOError(f"{inp}: no point clouds ({', '.join(CLOUD_SUFFIXES)})")
        label_dir = Path(args.labels) if args.labels else None
        if args.scores:
            raise UsageError("--scores is only supported for a single input file")
        ext = _list_files(label_dir, LABEL_SUFFIXES) if label_dir else {}
        if label_dir and set(ext) != set(clouds):
            missing = sorted(set(clouds) - set(ext))
            raise CloudIOError(f"{label_dir}: labels missing for {missing or 'extra samples'}")
        names = sorted(clouds)
        jobs = [(clouds[n], ext.get(n), None, cfg, args.min_score) for n in names]
        results = _pool_map(_segment_one, jobs, cfg.jobs)
        out.mkdir(parents=True, exist_ok=True)
        targets = [(out / f"{n}.labels", r) for n, r in zip(names, results)]
    else:
        stages = _segment_one(inp, Path(args.labels) if args.labels else None,
                              Path(args.scores) if args.scores else None, cfg, args.min_score)
        targets = [(out, stages)]
    for path, stages in targets:
        save_labeling(stages["refined"], path)
        if args.trace:
            for stage in TRACE_STAGES:
                save_labeling(stages[stage], _trace_path(path, stage))
    return EXIT_OK


# ------------------------------------------------------------------ eval


def cmd_eval(args) -> int:
    cfg = _config(args)
    gt_files = _list_files(Path(args.gt_dir), LABEL_SUFFIXES)
    pred_files = _list_files(Path(args.pred_dir), LABEL_SUFFIXES)
    if not gt_files:
        raise CloudIOError(f"{args.gt_dir}: no label files ({', '.join(LABEL_SUFFIXES)})")
    reports, missing = [], []
    for name in sorted(gt_files):
        if name not in pred_files:
            missing.append(name)
            continue
        gt = load_labeling(gt_files[name])
        pred = load_labeling(pred_files[name], expected_len=len(gt))
        reports.append(evaluate(gt, pred, name, cfg.iou_threshold))
    result = {
        "iou_threshold": cfg.iou_threshold,
        "samples": [r.to_dict() for r in reports],
        "aggregate": aggregate(reports),
        "missing": missing,
    }
    _write_json(Path(args.report), result)
    if missing and not args.allow_missing:
        logger.error("%d sample(s) missing from %s: %s", len(missing), args.pred_dir, ", ".join(missing))
        return EXIT_ERROR
    return EXIT_OK


# ------------------------------------------------------------------ degrade


def _degrade_one(cloud_path: Path, labels_path: Optional[Path], op: str, cfg: RunConfig):
    cloud, labels = _load_with_labels(cloud_path, labels_path)
    params = cfg.as_dict()
    return apply_operator(op, cloud, labels, params, _sample_seed(cfg.seed, cloud_path.stem))


def cmd_degrade(args) -> int:
    cfg = _config(args)
    clouds = _list_files(Path(args.input_dir), CLOUD_SUFFIXES)
    if not clouds:
        raise CloudIOError(f"{args.input_dir}: no point clouds ({', '.join(CLOUD_SUFFIXES)})")
    names = sorted(clouds)
    jobs = [(clouds[n], _sidecar_labels(clouds[n]), args.op, cfg) for n in names]
    results = _pool_map(_degrade_one, jobs, cfg.jobs)
    out = Path(args.output_dir)
    if out.resolve() == Path(args.input_dir).resolve():
        raise UsageError("output directory must differ from the input directory")
    out.mkdir(parents=True, exist_ok=True)
    samples = []
    for name, (cloud, labels) in zip(names, results):
        save_xyz(out / f"{name}.xyz", cloud)
        entry = {"name": name, "n_points": len(cloud), "seed": _sample_seed(cfg.seed, name)}
        if labels is not None:
            save_labeling(labels, out / f"{name}.labels")
            entry["labels"] = f"{name}.labels"
        samples.append(entry)
    keys = {"downsample": ["keep_fraction"], "density": ["spacing", "max_shift"],
            "precision": ["max_offset"], "boundary": ["swap_radius"]}[args.op]
    _write_json(out / "manifest.json", {
        "operator": args.op,
        "params": {k: getattr(cfg, k) for k in keys},
        "seed": cfg.seed,
        "samples": samples,
    })
    return EXIT_OK


# ------------------------------------------------------------------ kan-check


def cmd_kan_check(args) -> int:
    seed = 0 if args.seed is None else args.seed
    errors = gradient_check(seed, draws=args.draws)
    worst = max(errors)
    status = "pass" if worst < KAN_TOLERANCE else "FAIL"
    print(f"kan-check seed={seed} draws={len(errors)} max_rel_error={worst:.3e} {status}")
    return EXIT_OK if worst < KAN_TOLERANCE else EXIT_ERROR


# ------------------------------------------------------------------ main


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file of 'key = value' lines")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config value (repeatable; wins over --config)")
    common.add_argument("--seed", type=int, help="random seed (overrides config)")
    common.add_argument("--jobs", type=int, help="parallel samples, 0 = all cores (overrides config)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="roofplanes", description="Roof plane segmentation toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("features", parents=[common], help="export the N x 6 per-point feature table")
    p.add_argument("input")
    p.add_argument("output")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("superpoints", parents=[common], help="two-stage superpoint partition")
    p.add_argument("input")
    p.add_argument("output", help="per-point fine superpoint ids")
    p.add_argument("--gt", help="ground-truth labels (default: label column of the input)")
    p.add_argument("--quality", help="quality report path (default: OUTPUT.quality.json)")
    p.add_argument("--coarse", help="also write per-point coarse group ids here")
    p.set_defaults(func=cmd_superpoints)

    p = sub.add_parser("segment", parents=[common], help="segment, complete planes, refine boundaries")
    p.add_argument("input", help="point cloud, or a directory of clouds")
    p.add_argument("output", help="label file, or a directory for batch input")
    p.add_argument("--labels", help="external instance labels to postprocess (file, or directory for batch)")
    p.add_argument("--scores", help="'id S mS' sidecar for --labels")
    p.add_argument("--min-score", type=float, default=0.0,
                   help="dissolve scored instances whose fused score is below this")
    p.add_argument("--trace", action="store_true",
                   help="also write OUTPUT.raw, OUTPUT.completed and OUTPUT.refined")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("eval", parents=[common], help="batch instance metrics")
    p.add_argument("gt_dir")
    p.add_argument("pred_dir")
    p.add_argument("report", help="JSON report path")
    p.add_argument("--allow-missing", action="store_true",
                   help="exit 0 even if predictions are missing for some samples")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("degrade", parents=[common], help="apply one degradation operator to a directory")
    p.add_argument("input_dir")
    p.add_argument("output_dir")
    p.add_argument("--op", required=True, choices=OPERATORS)
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("kan-check", help="finite-difference check of the Fourier KAN gradients")
    p.add_argument("--seed", type=int)
    p.add_argument("--draws", type=int, default=100)
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_kan_check)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CloudIOError, UsageError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except AssertionError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
