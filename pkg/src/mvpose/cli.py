"""Command-line front end: validate, estimate, bench and memory.

stdout carries only machine-readable payloads (JSON or CSV); everything
meant for humans goes to stderr. Exit codes: 0 success, 1 domain error,
2 IO or usage error.

Heavy imports happen inside the command handlers so that MVPOSE_THREADS
can cap the BLAS thread pools before numpy is first loaded.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import math
import os
import sys
from pathlib import Path

from .errors import ConfigInvalid, IoFailure, MissingFile, MvposeError

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


def _cap_threads() -> None:
    cap = os.environ.get("MVPOSE_THREADS")
    if not cap:
        return
    for var in _THREAD_VARS:
        os.environ.setdefault(var, cap)


def _print_json(payload) -> None:
    sys.stdout.write(json.dumps(payload, sort_keys=True) + "\n")
    sys.stdout.flush()


def _say(message: str) -> None:
    print(message, file=sys.stderr)


# ---------------------------------------------------------------- flags

def _add_pipeline_flags(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--dims", help="projection dimensionality k (bench: comma list sweeps)")
    sp.add_argument("--patches", type=int, help="matches kept per view pair")
    sp.add_argument("--consensus-theta", dest="consensus_theta", type=float,
                    help="rotation consensus cone half-angle, degrees")
    sp.add_argument("--ransac-trials", dest="ransac_trials", type=int)
    sp.add_argument("--inlier-threshold", dest="inlier_threshold", type=float)
    sp.add_argument("--model", choices=("similarity7", "affine9"))
    sp.add_argument("--cyclical", choices=("2d", "3d"))
    sp.add_argument("--seed", type=int)
    sp.add_argument("--config", metavar="FILE", help="JSON file with pipeline settings")


def _parse_dims(text: str | None, allow_list: bool) -> list[int] | None:
    if text is None:
        return None
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise ConfigInvalid("--dims needs at least one integer")
    try:
        dims = [int(p) for p in parts]
    except ValueError as exc:
        raise ConfigInvalid(f"--dims must be integers, got {text!r}") from exc
    if any(d < 1 for d in dims):
        raise ConfigInvalid(f"--dims entries must be positive, got {dims}")
    if not allow_list and len(dims) != 1:
        raise ConfigInvalid("this command takes a single --dims value")
    return dims


def _config_file_dict(args) -> dict:
    if not getattr(args, "config", None):
        return {}
    path = Path(args.config)
    if not path.is_file():
        raise MissingFile(f"config file {path} not found")
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise IoFailure(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigInvalid(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigInvalid(f"config file {path} must hold a JSON object")
    return data


def _flag_overrides(args) -> dict:
    mapping = {
        "patches": "patches",
        "consensus_theta": "consensus_theta_deg",
        "ransac_trials": "ransac_trials",
        "inlier_threshold": "inlier_threshold",
        "model": "model",
        "cyclical": "cyclical",
        "seed": "seed",
    }
    out = {}
    for attr, field_name in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            out[field_name] = value
    return out


def _pipeline_config(args, dims: list[int] | None):
    from .pipeline import PipelineConfig

    base = {}
    base.update(_config_file_dict(args))
    base.update(_flag_overrides(args))
    if dims:
        base["k_dims"] = dims[0]
    return PipelineConfig.from_dict(base)


# ------------------------------------------------------------- validate

def cmd_validate(args) -> int:
    from .capture import inspect_bundle

    report = inspect_bundle(args.bundle)
    print(str(report))
    return 0 if report.ok else 1


# ------------------------------------------------------------- estimate

def _write_debug(out_dir: Path, sink: dict) -> None:
    import numpy as np

    from .geometry import PointCloud, export_ply

    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        scores = np.asarray(sink["scores"], dtype=np.float64)
        csv_lines = [",".join(f"{v:.9g}" for v in row) for row in scores]
        (out_dir / "similarity_matrix.csv").write_text("\n".join(csv_lines) + "\n")

        result = sink["result"]
        inlier_set = {int(i) for i in result.inliers}
        rows = []
        for idx, corr in enumerate(sink["correspondences"]):
            entry = corr.to_dict()
            entry["inlier"] = idx in inlier_set
            rows.append(entry)
        (out_dir / "correspondences.json").write_text(json.dumps(rows, sort_keys=True, indent=1))

        pts = np.asarray(
            [sink["correspondences"][i].tgt_point for i in sorted(inlier_set)], dtype=np.float64
        ).reshape(-1, 3)
        export_ply(PointCloud(points=pts), out_dir / "inliers.ply")
    except OSError as exc:
        raise IoFailure(f"cannot write debug artifacts to {out_dir}: {exc}") from exc


def cmd_estimate(args) -> int:
    from .capture import load_bundle
    from .pipeline import PoseEstimator

    cfg = _pipeline_config(args, _parse_dims(args.dims, allow_list=False))
    ref = load_bundle(args.ref)
    tgt = load_bundle(args.target)
    estimator = PoseEstimator(ref, cfg)
    sink: dict | None = {} if args.dump_debug else None
    est = estimator.estimate(tgt, debug_sink=sink)
    if args.dump_debug:
        _write_debug(Path(args.dump_debug), sink)

    payload = est.to_dict()
    timings = payload.pop("timings_ms")  # wall times vary run to run; keep stdout reproducible
    _print_json(payload)
    _say(
        f"inliers {est.inlier_count}/{est.correspondence_count} "
        f"in {timings['total']:.1f} ms (match {timings['match']:.1f}, solve {timings['solve']:.1f})"
    )
    for note in est.warnings:
        _say(f"warning: {note}")
    return 0


# ----------------------------------------------------------------- bench

_SUITE_KEYS = {
    "num_categories",
    "pairings",
    "seed",
    "scale_range",
    "translation_range",
    "scene",
    "pipeline",
}


def _build_suite(args):
    from .bench import BenchmarkSuite
    from .pipeline import PipelineConfig
    from .synth import SyntheticSceneConfig

    data: dict = {}
    if args.suite:
        path = Path(args.suite)
        if not path.is_file():
            raise MissingFile(f"suite file {path} not found")
        try:
            text = path.read_text()
        except OSError as exc:
            raise IoFailure(f"cannot read suite file {path}: {exc}") from exc
        if not text.strip():
            raise ConfigInvalid(f"suite file {path} is empty")
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigInvalid(f"suite file {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigInvalid(f"suite file {path} must hold a JSON object")
        unknown = set(data) - _SUITE_KEYS
        if unknown:
            raise ConfigInvalid(f"unknown suite keys {sorted(unknown)}")

    scene_data = dict(data.get("scene") or {})
    if "transform" in scene_data:
        raise ConfigInvalid("scene transform cannot be set from a suite file")
    try:
        scene = SyntheticSceneConfig(**scene_data)
    except TypeError as exc:
        raise ConfigInvalid(f"bad scene settings: {exc}") from exc
    scene.check()

    pipe = dict(data.get("pipeline") or {})
    pipe.update(_config_file_dict(args))
    pipe.update(_flag_overrides(args))
    pipeline = PipelineConfig.from_dict(pipe)

    scale_range = tuple(float(x) for x in data.get("scale_range", (0.7, 1.4)))
    if len(scale_range) != 2:
        raise ConfigInvalid(f"scale_range needs two entries, got {scale_range}")
    suite = BenchmarkSuite(
        num_categories=int(data.get("num_categories", 10)),
        pairings=int(data.get("pairings", 10)),
        scene=scene,
        pipeline=pipeline,
        scale_range=scale_range,
        translation_range=float(data.get("translation_range", 1.0)),
        seed=int(args.seed) if args.seed is not None else int(data.get("seed", 0)),
    )
    suite.check()
    return suite


def cmd_bench(args) -> int:
    from dataclasses import replace

    from .bench import run_benchmark

    dims = _parse_dims(args.dims, allow_list=True)
    suite = _build_suite(args)
    failures: list[str] = []
    if dims:
        blocks = []
        for k in dims:
            per_k = replace(suite, pipeline=replace(suite.pipeline, k_dims=k))
            report = run_benchmark(per_k, keep_going=args.keep_going)
            blocks.append(f"# k={k}\n" + report.to_csv())
            _say(f"k={k}")
            _say(report.format_table())
            failures += [f"k={k}: {f}" for f in report.failures]
        sys.stdout.write("\n".join(blocks))
    else:
        report = run_benchmark(suite, keep_going=args.keep_going)
        sys.stdout.write(report.to_csv())
        _say(report.format_table())
        failures = report.failures
    sys.stdout.flush()
    for failure in failures:
        _say(f"failed: {failure}")
    return 0


# ---------------------------------------------------------------- memory

@contextlib.contextmanager
def _memory_lock(root: Path):
    """Exclusive advisory lock for the single-writer contract."""
    import fcntl

    try:
        root.mkdir(parents=True, exist_ok=True)
        handle = open(root / "memory.lock", "w")
    except OSError as exc:
        raise IoFailure(f"cannot create lock in {root}: {exc}") from exc
    try:
        try:
            fcntl.flock(handle, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except OSError as exc:
            raise IoFailure(f"memory at {root} is locked by another writer") from exc
        yield
    finally:
        handle.close()


def _load_store(root: Path, theta: float | None, scoring: str | None):
    from .memory import MEMORY_MANIFEST, MemoryStore, load_memory

    if (root / MEMORY_MANIFEST).is_file():
        return load_memory(root)
    kwargs = {"root": root}
    if theta is not None:
        kwargs["theta"] = theta
    if scoring is not None:
        kwargs["scoring"] = scoring
    return MemoryStore(**kwargs)


def cmd_memory_classify(args) -> int:
    from .capture import load_bundle
    from .memory import classify

    store = _load_store(Path(args.memory), args.theta, args.scoring)
    bundle = load_bundle(args.target)
    outcome = classify(bundle.cls_tokens(), store, theta=args.theta)
    theta = store.theta if args.theta is None else args.theta
    _print_json(
        {
            "category_id": outcome.category_id,
            "is_novel": outcome.is_novel,
            "best_score": outcome.best_score if math.isfinite(outcome.best_score) else None,
            "scores": outcome.scores,
            "theta": theta,
        }
    )
    return 0


def cmd_memory_enroll(args) -> int:
    from .capture import load_bundle
    from .memory import enroll, save_memory

    root = Path(args.memory)
    with _memory_lock(root):
        store = _load_store(root, args.theta, args.scoring)
        bundle = load_bundle(args.target)
        record = enroll(bundle.cls_tokens(), bundle, store, category_id=args.id)
        save_memory(store, root)
    _print_json(
        {"category_id": record.category_id, "token_count": int(record.tokens.shape[0])}
    )
    _say(f"enrolled {record.category_id} with {record.tokens.shape[0]} tokens")
    return 0


def cmd_memory_list(args) -> int:
    store = _load_store(Path(args.memory), None, None)
    for record in store.records:
        _print_json(
            {
                "category_id": record.category_id,
                "token_count": int(record.tokens.shape[0]),
                "has_bundle": record.bundle is not None or record.bundle_path is not None,
            }
        )
    return 0


# ------------------------------------------------------------------ main

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mvpose",
        description="Multi-view one-shot category-level pose estimation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="check a capture bundle directory")
    v.add_argument("bundle", help="bundle directory")
    v.set_defaults(func=cmd_validate, json_errors=False)

    e = sub.add_parser("estimate", help="pose of a target bundle against a reference bundle")
    e.add_argument("--ref", required=True, help="reference bundle directory")
    e.add_argument("--target", required=True, help="target bundle directory")
    _add_pipeline_flags(e)
    e.add_argument("--dump-debug", dest="dump_debug", metavar="DIR",
                   help="write similarity CSV, correspondence JSON and inlier PLY here")
    e.set_defaults(func=cmd_estimate, json_errors=True)

    b = sub.add_parser("bench", help="run the synthetic benchmark suite")
    b.add_argument("--suite", metavar="FILE", help="JSON suite description")
    _add_pipeline_flags(b)
    b.add_argument("--keep-going", dest="keep_going", action="store_true",
                   help="tolerate per-category failures")
    b.set_defaults(func=cmd_bench, json_errors=False)

    m = sub.add_parser("memory", help="continual category memory operations")
    msub = m.add_subparsers(dest="action", required=True)

    mc = msub.add_parser("classify", help="classify a bundle against the memory")
    mc.add_argument("--memory", required=True, help="memory directory")
    mc.add_argument("--target", required=True, help="bundle directory to classify")
    mc.add_argument("--theta", type=float, help="decision threshold override")
    mc.add_argument("--scoring", choices=("mean", "sum"))
    mc.set_defaults(func=cmd_memory_classify, json_errors=True)

    me = msub.add_parser("enroll", help="enroll a bundle as a new category")
    me.add_argument("--memory", required=True)
    me.add_argument("--target", required=True)
    me.add_argument("--id", help="category id (default: auto-assigned)")
    me.add_argument("--theta", type=float)
    me.add_argument("--scoring", choices=("mean", "sum"))
    me.set_defaults(func=cmd_memory_enroll, json_errors=True)

    ml = msub.add_parser("list", help="list enrolled categories, one line each")
    ml.add_argument("--memory", required=True)
    ml.set_defaults(func=cmd_memory_list, json_errors=False)

    return parser


def _exit_code(exc: Exception) -> int:
    if isinstance(exc, (MissingFile, IoFailure, ConfigInvalid)):
        return 2
    return 1


def main(argv: list[str] | None = None) -> int:
    _cap_threads()
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except MvposeError as exc:
        if getattr(args, "json_errors", False):
            _print_json({"error": {"type": type(exc).__name__, "message": str(exc)}})
        _say(f"error: {type(exc).__name__}: {exc}")
        return _exit_code(exc)
    except OSError as exc:
        _say(f"error: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
