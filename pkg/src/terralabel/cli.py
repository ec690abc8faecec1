"""Command-line entry point.

Subcommands:
    terralabel synth <spec.json>        generate a synthetic tile
    terralabel run <config.json>        process a tile (train/predict/aggregate)
    terralabel report <out_dir>         render accuracies + confusion matrix
    terralabel aggregate <out_dir>      re-aggregate existing scene predictions

Exit codes: 0 success, 1 runtime hard error, 2 config validation,
3 missing inputs.  Every command is a pure function of its inputs, flags,
and seed; repeated invocations produce byte-identical outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .errors import ConfigError, TerralabelError
from .forest import ForestParams
from .pipeline import (
    RunConfig,
    aggregate,
    load_scene_prediction,
    run_scene,
    write_annual,
)
from .raster import GridSpec, SceneManifest, read_rbin
from .synth import generate_tile, spec_from_json
from .taxonomy import CLASS_NAMES, N_CLASSES, TRAINABLE_CLASSES, DEFAULT_TABLES, load_tables

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3


def _fail(message: str, code: int) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def cmd_synth(spec_path: str) -> int:
    try:
        spec, out_dir = spec_from_json(spec_path)
    except ConfigError as exc:
        return _fail(str(exc), EXIT_CONFIG)
    manifests = generate_tile(spec, out_dir)
    for m in manifests:
        print(f"{m.scene_id}  {m.datetime}  -> {out_dir / m.scene_id}")
    print(f"tile written to {out_dir} ({len(manifests)} scenes)")
    return EXIT_OK


def _load_run_config(path: Path, args) -> tuple[Path, RunConfig]:
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {exc}") from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read run config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("run config must be a JSON object")
    for key in ("tile_dir", "out_dir"):
        if key not in doc:
            raise ConfigError(f"run config missing '{key}'")

    seed = args.seed if args.seed is not None else doc.get("seed")
    if seed is None:
        raise ConfigError("a seed is required (config 'seed' or --seed); no implicit RNG")

    forest_doc = dict(doc.get("forest", {}))
    if args.trees is not None:
        forest_doc["n_trees"] = args.trees
    try:
        forest = ForestParams(
            n_trees=int(forest_doc.get("n_trees", 10)),
            max_depth=(
                None
                if forest_doc.get("max_depth") is None
                else int(forest_doc["max_depth"])
            ),
            min_samples_split=int(forest_doc.get("min_samples_split", 2)),
            features_per_split=int(forest_doc.get("features_per_split", 3)),
            bootstrap=bool(forest_doc.get("bootstrap", True)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid forest params: {exc}") from exc

    if args.taxonomy is not None:
        taxonomy_path = Path(args.taxonomy)
    elif doc.get("taxonomy") is not None:
        taxonomy_path = Path(doc["taxonomy"])
        if not taxonomy_path.is_absolute():
            taxonomy_path = path.parent / taxonomy_path
    else:
        taxonomy_path = None
    tables = DEFAULT_TABLES if taxonomy_path is None else load_tables(taxonomy_path)

    cloud = (
        args.cloud_threshold
        if args.cloud_threshold is not None
        else float(doc.get("cloud_threshold", 0.90))
    )
    workers = args.workers if args.workers is not None else int(doc.get("workers", 1))
    if workers < 1:
        raise ConfigError("workers must be >= 1")

    tile_dir = Path(doc["tile_dir"])
    out_dir = Path(doc["out_dir"])
    if not tile_dir.is_absolute():
        tile_dir = path.parent / tile_dir
    if not out_dir.is_absolute():
        out_dir = path.parent / out_dir
    config = RunConfig(
        out_dir=out_dir,
        seed=int(seed),
        forest=forest,
        cloud_threshold=float(cloud),
        tables=tables,
        workers=workers,
    )
    return tile_dir, config


def _scene_task(manifest_path: str, gl30_path: str, config: RunConfig) -> dict:
    """Worker body: returns the scene summary dict, or an error entry.

    One bad scene must not waste the rest of the tile, so any per-scene
    failure is captured and reported collectively at the end of the run.
    """
    manifest = SceneManifest.from_json(manifest_path)
    try:
        result = run_scene(manifest, gl30_path, config)
        return result.summary_dict()
    except Exception as exc:  # noqa: BLE001 - partial-failure policy
        return {
            "scene_id": manifest.scene_id,
            "datetime": manifest.datetime,
            "skipped": False,
            "error": f"{type(exc).__name__}: {exc}",
        }


def _grid10_from_gl30(gl30_path: Path) -> GridSpec:
    spec30 = read_rbin(gl30_path).spec
    return GridSpec(
        spec30.width * 3,
        spec30.height * 3,
        spec30.origin_x,
        spec30.origin_y,
        spec30.pixel_size / 3.0,
    )


def cmd_run(config_path: str, args) -> int:
    try:
        tile_dir, config = _load_run_config(Path(config_path), args)
    except ConfigError as exc:
        return _fail(str(exc), EXIT_CONFIG)

    gl30_path = tile_dir / "gl30.rbin"
    if not tile_dir.is_dir():
        return _fail(f"tile directory not found: {tile_dir}", EXIT_MISSING)
    if not gl30_path.exists():
        return _fail(f"legacy label raster not found: {gl30_path}", EXIT_MISSING)
    manifest_paths = sorted(tile_dir.glob("*/manifest.json"))
    if not manifest_paths:
        return _fail(f"no scene manifests under {tile_dir}", EXIT_MISSING)

    config.out_dir.mkdir(parents=True, exist_ok=True)
    tasks = [(str(p), str(gl30_path), config) for p in manifest_paths]
    if config.workers == 1:
        entries = [_scene_task(*t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            entries = list(pool.map(_scene_task, *zip(*tasks)))

    for entry in entries:
        if entry.get("error"):
            print(f"{entry['scene_id']}  FAILED: {entry['error']}")
        elif entry["skipped"]:
            print(f"{entry['scene_id']}  skipped ({entry['skip_reason']})")
        elif entry.get("accuracy") is None:
            print(f"{entry['scene_id']}  evaluated (no held-out samples)")
        else:
            print(f"{entry['scene_id']}  accuracy={entry['accuracy']:.4f}")

    evaluated = [e for e in entries if not e.get("error") and not e["skipped"]]
    skipped = [e["scene_id"] for e in entries if not e.get("error") and e["skipped"]]
    failed = [e["scene_id"] for e in entries if e.get("error")]
    accuracies = [e["accuracy"] for e in evaluated if e.get("accuracy") is not None]
    average = float(np.mean(accuracies)) if accuracies else None

    predictions = [
        load_scene_prediction(config.out_dir / e["scene_id"]) for e in evaluated
    ]
    annual = aggregate(predictions, spec=_grid10_from_gl30(gl30_path))
    write_annual(annual, config.out_dir)

    summary = {
        "tile_dir": str(tile_dir),
        "seed": config.seed,
        "cloud_threshold": config.cloud_threshold,
        "n_scenes": len(entries),
        "n_evaluated": len(evaluated),
        "n_skipped": len(skipped),
        "n_failed": len(failed),
        "scenes": entries,
        "average_accuracy": average,
        "averaging": "unweighted mean of per-scene test-half accuracies",
        "skipped_scenes": skipped,
        "failed_scenes": failed,
        "n_aggregated": len(predictions),
    }
    (config.out_dir / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    if average is not None:
        print(f"tile average accuracy: {average:.4f}")
    print(f"summary written to {config.out_dir / 'summary.json'}")
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_report(out_dir: str) -> int:
    out_path = Path(out_dir)
    summary_path = out_path / "summary.json"
    if not summary_path.exists():
        return _fail(f"no summary.json under {out_path}", EXIT_MISSING)
    summary = json.loads(summary_path.read_text(encoding="utf-8"))

    print("Per-scene accuracy:")
    pooled = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    n_pooled = 0
    for entry in summary["scenes"]:
        sid = entry["scene_id"]
        if entry.get("error"):
            print(f"  {sid}  failed: {entry['error']}")
            continue
        if entry["skipped"]:
            print(f"  {sid}  skipped ({entry['skip_reason']})")
            continue
        if entry.get("accuracy") is None:
            print(f"  {sid}  (no held-out samples)")
        else:
            print(f"  {sid}  {entry['accuracy']:.4f}")
        metrics_path = out_path / sid / "metrics.json"
        if not metrics_path.exists():
            return _fail(f"metrics file missing: {metrics_path}", EXIT_MISSING)
        metrics = json.loads(metrics_path.read_text(encoding="utf-8"))
        if "confusion_counts" in metrics:
            pooled += np.asarray(metrics["confusion_counts"], dtype=np.int64)
            n_pooled += 1

    average = summary.get("average_accuracy")
    if average is not None:
        print(f"Tile average accuracy: {average:.4f}")
    if n_pooled == 0:
        print("No evaluated scenes; nothing to pool.")
        return EXIT_OK

    row_tot = pooled.sum(axis=1)
    print("\nPer-class recall (pooled over scenes):")
    for k in TRAINABLE_CLASSES:
        if row_tot[k] > 0:
            print(f"  {k} {CLASS_NAMES[k]:<22} {pooled[k, k] / row_tot[k]:.4f}")
        else:
            print(f"  {k} {CLASS_NAMES[k]:<22} (no samples)")

    print("\nNormalized confusion matrix (rows = true class):")
    header = "      " + " ".join(f"    c{k}" for k in TRAINABLE_CLASSES)
    print(header)
    for k in TRAINABLE_CLASSES:
        if row_tot[k] > 0:
            cells = " ".join(f"{pooled[k, j] / row_tot[k]:.4f}" for j in range(N_CLASSES))
        else:
            cells = " ".join("  --  " for _ in range(N_CLASSES))
        print(f"  c{k}  {cells}")
    return EXIT_OK


def cmd_aggregate(out_dir: str) -> int:
    out_path = Path(out_dir)
    if not out_path.is_dir():
        return _fail(f"output directory not found: {out_path}", EXIT_MISSING)
    scene_dirs = sorted(p.parent for p in out_path.glob("*/metrics.json"))
    if not scene_dirs:
        return _fail(f"no scene outputs under {out_path}", EXIT_MISSING)

    predictions = []
    for d in scene_dirs:
        meta = json.loads((d / "metrics.json").read_text(encoding="utf-8"))
        if meta.get("skipped") or meta.get("error"):
            continue
        predictions.append(load_scene_prediction(d))
    if not predictions:
        return _fail("no evaluated scenes to aggregate", EXIT_MISSING)

    annual = aggregate(predictions)
    report = write_annual(annual, out_path)
    print(
        f"aggregated {len(predictions)} scenes; "
        f"{report['n_observed_pixels']} observed pixels"
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="terralabel",
        description="Deterministic land-cover label synthesis pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic tile from a spec file")
    p_synth.add_argument("spec", help="SynthSpec JSON file")

    p_run = sub.add_parser("run", help="process a tile per a run config file")
    p_run.add_argument("config", help="run config JSON file")
    p_run.add_argument("--seed", type=int, default=None, help="override master seed")
    p_run.add_argument("--workers", type=int, default=None, help="parallel scene workers")
    p_run.add_argument("--trees", type=int, default=None, help="override forest size")
    p_run.add_argument(
        "--cloud-threshold", type=float, default=None, help="scene skip threshold"
    )
    p_run.add_argument("--taxonomy", default=None, help="taxonomy override JSON")

    p_report = sub.add_parser("report", help="print accuracies and confusion matrix")
    p_report.add_argument("out_dir", help="run output directory")

    p_agg = sub.add_parser("aggregate", help="re-aggregate scene predictions only")
    p_agg.add_argument("out_dir", help="run output directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "synth":
            return cmd_synth(args.spec)
        if args.command == "run":
            return cmd_run(args.config, args)
        if args.command == "report":
            return cmd_report(args.out_dir)
        if args.command == "aggregate":
            return cmd_aggregate(args.out_dir)
    except ConfigError as exc:
        return _fail(str(exc), EXIT_CONFIG)
    except FileNotFoundError as exc:
        return _fail(str(exc), EXIT_MISSING)
    except TerralabelError as exc:
        return _fail(str(exc), EXIT_RUNTIME)
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
