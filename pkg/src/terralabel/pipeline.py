"""Scene-level orchestration, evaluation metrics, and temporal aggregation.

``run_scene`` is the unit of work: load and harmonize one scene's rasters,
gate on cloud cover, filter the legacy labels by agreement, sample, train,
evaluate on the held-out half, predict the dense raster, and write every
artifact into the scene's output directory.  Scenes are independent, so a
tile run can execute them in any order or in parallel without changing a
single output byte.

``aggregate`` folds a year of scene predictions into annual labels by
summing probability vectors per pixel over the scenes where the pixel was
usable.  Predictions are ordered canonically (datetime, scene_id) before
summation, which makes the float arithmetic independent of input order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import labelgen
from .errors import AlignmentError, ManifestError, TrainingError
from .forest import (
    ForestParams,
    ScenePrediction,
    predict_proba,
    predict_raster,
    save_rfm,
    train_forest,
)
from .raster import (
    BANDS_10M,
    FEATURE_BANDS,
    GridSpec,
    RasterGrid,
    Scene,
    SceneManifest,
    read_rbin,
    resample_bilinear,
    resample_nearest,
    write_rbin,
)
from .rng import stream_seed
from .taxonomy import (
    CLASS_NAMES,
    N_CLASSES,
    TRAINABLE_CLASSES,
    UNCLASSIFIED,
    DEFAULT_TABLES,
    TaxonomyTables,
)

DEFAULT_CLOUD_THRESHOLD = 0.90


@dataclass
class Metrics:
    """Confusion counts plus the derived accuracy / per-class statistics.

    ``normalized`` divides each row by its true-class total (rows with zero
    samples stay zero).  Precision/recall for classes with a zero denominator
    are reported as 0.0 with the matching ``*_defined`` flag cleared, so the
    report shape never varies.
    """

    counts: np.ndarray
    accuracy: float
    normalized: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    precision_defined: np.ndarray
    recall_defined: np.ndarray
    n_samples: int

    def to_json_dict(self) -> dict:
        per_class = {}
        for k in TRAINABLE_CLASSES:
            per_class[str(k)] = {
                "name": CLASS_NAMES[k],
                "precision": float(self.precision[k]),
                "recall": float(self.recall[k]),
                "precision_defined": bool(self.precision_defined[k]),
                "recall_defined": bool(self.recall_defined[k]),
            }
        return {
            "accuracy": self.accuracy,
            "confusion_counts": self.counts.tolist(),
            "normalized_confusion": self.normalized.tolist(),
            "per_class": per_class,
            "n_samples": self.n_samples,
        }


def evaluate(y_true, y_pred) -> Metrics:
    """Confusion matrix, accuracy, and per-class precision/recall."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape or y_true.ndim != 1:
        raise ValueError(f"length mismatch: {y_true.shape} vs {y_pred.shape}")
    if len(y_true) < 1:
        raise ValueError("evaluate requires at least one sample")
    for arr, what in ((y_true, "true"), (y_pred, "predicted")):
        if not np.isin(arr, TRAINABLE_CLASSES).all():
            raise ValueError(f"{what} classes must be trainable codes 0..7")

    counts = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    np.add.at(counts, (y_true, y_pred), 1)

    total = counts.sum()
    accuracy = float(np.trace(counts) / total)
    row_tot = counts.sum(axis=1)
    col_tot = counts.sum(axis=0)
    normalized = np.zeros_like(counts, dtype=np.float64)
    nz = row_tot > 0
    normalized[nz] = counts[nz] / row_tot[nz, np.newaxis]

    diag = np.diag(counts).astype(np.float64)
    recall = np.divide(diag, row_tot, out=np.zeros(N_CLASSES), where=row_tot > 0)
    precision = np.divide(diag, col_tot, out=np.zeros(N_CLASSES), where=col_tot > 0)
    return Metrics(
        counts=counts,
        accuracy=accuracy,
        normalized=normalized,
        precision=precision,
        recall=recall,
        precision_defined=col_tot > 0,
        recall_defined=row_tot > 0,
        n_samples=int(total),
    )


@dataclass
class AnnualLabel:
    """Aggregated year: class plane (argmax of summed probabilities, 255
    where no scene observed the pixel), the eight summed probability planes,
    the per-pixel observation count, and max-sum/count confidence."""

    class_plane: RasterGrid
    prob_sums: list[RasterGrid]
    count: RasterGrid
    confidence: RasterGrid

    @property
    def spec(self) -> GridSpec:
        return self.class_plane.spec


def aggregate(
    predictions: list[ScenePrediction], spec: GridSpec | None = None
) -> AnnualLabel:
    """Sum per-pixel probability vectors over scenes where the pixel is usable.

    Inputs are sorted internally by (datetime, scene_id), so any permutation
    of the list produces bit-identical planes.  An empty list needs ``spec``
    to shape the all-unobserved result.
    """
    if not predictions:
        if spec is None:
            raise ValueError("empty prediction list requires an explicit grid spec")
        zero = np.zeros((spec.height, spec.width), dtype=np.float32)
        return AnnualLabel(
            class_plane=RasterGrid(
                spec,
                np.full((spec.height, spec.width), UNCLASSIFIED, dtype=np.uint8),
                nodata=UNCLASSIFIED,
            ),
            prob_sums=[RasterGrid(spec, zero.copy()) for _ in range(N_CLASSES)],
            count=RasterGrid(spec, np.zeros((spec.height, spec.width), dtype=np.uint16)),
            confidence=RasterGrid(spec, zero.copy()),
        )

    ordered = sorted(predictions, key=lambda p: (p.datetime, p.scene_id))
    ids = [p.scene_id for p in ordered]
    if len(set(ids)) != len(ids):
        raise ValueError("scene_ids must be unique for order-invariant aggregation")
    grid = ordered[0].spec
    if spec is not None and grid != spec:
        raise AlignmentError("predictions do not match the requested grid")
    for p in ordered[1:]:
        if p.spec != grid:
            raise AlignmentError(f"scene {p.scene_id} is on a different grid")

    h, w = grid.height, grid.width
    sums = np.zeros((N_CLASSES, h, w), dtype=np.float64)
    count = np.zeros((h, w), dtype=np.uint16)
    for p in ordered:
        usable = p.usable
        count[usable] += 1
        for k in range(N_CLASSES):
            plane = p.probabilities[k].values.astype(np.float64)
            sums[k][usable] += plane[usable]

    sums32 = sums.astype(np.float32)
    observed = count > 0
    classes = np.where(
        observed, np.argmax(sums32, axis=0).astype(np.uint8), UNCLASSIFIED
    ).astype(np.uint8)
    conf = np.zeros((h, w), dtype=np.float32)
    conf[observed] = (
        sums32.max(axis=0)[observed].astype(np.float64) / count[observed]
    ).astype(np.float32)

    return AnnualLabel(
        class_plane=RasterGrid(grid, classes, nodata=UNCLASSIFIED),
        prob_sums=[RasterGrid(grid, sums32[k]) for k in range(N_CLASSES)],
        count=RasterGrid(grid, count),
        confidence=RasterGrid(grid, conf),
    )


@dataclass
class RunConfig:
    """Everything a tile run needs besides the tile itself."""

    out_dir: Path
    seed: int
    forest: ForestParams = ForestParams()
    cloud_threshold: float = DEFAULT_CLOUD_THRESHOLD
    tables: TaxonomyTables = DEFAULT_TABLES
    workers: int = 1


@dataclass
class SceneResult:
    scene_id: str
    datetime: str
    skipped: bool = False
    skip_reason: str | None = None
    cloud_fraction: float | None = None
    accuracy: float | None = None
    n_train: int = 0
    n_test: int = 0
    output_dir: Path | None = None

    def summary_dict(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "datetime": self.datetime,
            "skipped": self.skipped,
            "skip_reason": self.skip_reason,
            "cloud_fraction": self.cloud_fraction,
            "accuracy": self.accuracy,
            "n_train": self.n_train,
            "n_test": self.n_test,
        }


def load_scene(manifest: SceneManifest) -> Scene:
    """Read all rasters of one scene and harmonize them onto the 10 m grid.

    The four native 10 m bands must share one grid; the six 20 m bands are
    bilinearly resampled onto it, the scene classification and cloud mask
    with nearest neighbor (class codes must not blend).
    """
    grids: dict[str, RasterGrid] = {}
    for name, ref in manifest.bands.items():
        path = manifest.resolve(ref.path)
        if not path.exists():
            raise ManifestError(f"band {name} missing: {path}")
        grids[name] = read_rbin(path)

    base = grids[BANDS_10M[0]].spec
    for name in BANDS_10M:
        if grids[name].spec != base:
            raise AlignmentError(f"10 m band {name} grid differs from {BANDS_10M[0]}")
    bands = []
    for name in FEATURE_BANDS:
        grid = grids[name]
        bands.append(grid if grid.spec == base else resample_bilinear(grid, base))

    scl = resample_nearest(read_rbin(manifest.resolve(manifest.scl_path)), base)
    cloud = resample_nearest(read_rbin(manifest.resolve(manifest.cloud_conf_path)), base)
    return Scene(
        scene_id=manifest.scene_id,
        datetime=manifest.datetime,
        bands=tuple(bands),
        scl=scl,
        cloud_conf=cloud,
    )


def _write_metrics_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def run_scene(
    manifest: SceneManifest,
    gl30_path,
    config: RunConfig,
    master_seed: int | None = None,
) -> SceneResult:
    """Process one scene end to end and write its artifacts.

    A cloud fraction at or above the threshold yields a skipped result (not
    an error).  Outputs land in ``config.out_dir / scene_id``: prediction
    rasters, the serialized model, filtered labels, validity mask, the
    sample table, and metrics.json.
    """
    seed = config.seed if master_seed is None else master_seed
    scene_seed = stream_seed(seed, f"SCENE:{manifest.scene_id}")
    out_dir = Path(config.out_dir) / manifest.scene_id
    out_dir.mkdir(parents=True, exist_ok=True)

    cloud_native = read_rbin(manifest.resolve(manifest.cloud_conf_path))
    cloud_fraction = labelgen.scene_cloud_fraction(cloud_native)
    result = SceneResult(
        scene_id=manifest.scene_id,
        datetime=manifest.datetime,
        cloud_fraction=cloud_fraction,
        output_dir=out_dir,
    )
    if cloud_fraction >= config.cloud_threshold:
        result.skipped = True
        result.skip_reason = "cloud"
        _write_metrics_json(
            out_dir / "metrics.json",
            {
                "scene_id": manifest.scene_id,
                "datetime": manifest.datetime,
                "skipped": True,
                "skip_reason": "cloud",
                "cloud_fraction": cloud_fraction,
            },
        )
        return result

    scene = load_scene(manifest)

    gl30 = read_rbin(Path(gl30_path))
    mapped = labelgen.map_gl30_raster(gl30, config.tables)
    labels10 = resample_nearest(mapped, scene.spec)
    filtered = labelgen.filter_labels(labels10, scene.scl, config.tables)
    valid = labelgen.build_validity_mask(scene)

    candidates = labelgen.pick_block_candidates(filtered, valid, scene_seed)
    if not candidates:
        raise TrainingError(f"scene {manifest.scene_id}: no eligible training pixels")
    samples = labelgen.stratified_split(candidates, scene.feature_stack(), scene_seed)

    train_x, train_y = samples.train()
    test_x, test_y = samples.test()
    model = train_forest(
        train_x,
        train_y,
        params=config.forest,
        seed=scene_seed,
        scene_id=manifest.scene_id,
    )

    metrics = None
    if len(test_y):
        probs = predict_proba(model, test_x)
        pred = np.argmax(probs, axis=1)
        metrics = evaluate(test_y, pred)
        result.accuracy = metrics.accuracy
    result.n_train = int(len(train_y))
    result.n_test = int(len(test_y))

    prediction = predict_raster(model, scene, config.tables)

    write_rbin(prediction.class_plane, out_dir / "classes.rbin")
    for k in range(N_CLASSES):
        write_rbin(prediction.probabilities[k], out_dir / f"prob_{k}.rbin")
    write_rbin(
        RasterGrid(scene.spec, prediction.usable.astype(np.uint8)),
        out_dir / "usable.rbin",
    )
    write_rbin(filtered, out_dir / "filtered_labels.rbin")
    write_rbin(RasterGrid(scene.spec, valid.astype(np.uint8)), out_dir / "validity.rbin")
    save_rfm(model, out_dir / "model.rfm")
    samples.write_csv(out_dir / "samples.csv")

    class_counts = samples.class_counts()
    doc = {
        "scene_id": manifest.scene_id,
        "datetime": manifest.datetime,
        "skipped": False,
        "skip_reason": None,
        "cloud_fraction": cloud_fraction,
        "seed": scene_seed,
        "n_train": result.n_train,
        "n_test": result.n_test,
        "class_sample_counts": {
            str(k): {"train": v[0], "test": v[1]} for k, v in class_counts.items()
        },
        "classes_absent": [k for k in TRAINABLE_CLASSES if k not in class_counts],
    }
    if metrics is not None:
        doc.update(metrics.to_json_dict())
    _write_metrics_json(out_dir / "metrics.json", doc)
    return result


def load_scene_prediction(scene_dir) -> ScenePrediction:
    """Rebuild a ScenePrediction from a scene output directory."""
    scene_dir = Path(scene_dir)
    meta = json.loads((scene_dir / "metrics.json").read_text(encoding="utf-8"))
    if meta.get("skipped"):
        raise ValueError(f"{scene_dir} holds a skipped scene")
    class_plane = read_rbin(scene_dir / "classes.rbin")
    probs = [read_rbin(scene_dir / f"prob_{k}.rbin") for k in range(N_CLASSES)]
    usable = read_rbin(scene_dir / "usable.rbin").values.astype(bool)
    return ScenePrediction(
        class_plane=class_plane,
        probabilities=probs,
        usable=usable,
        scene_id=meta["scene_id"],
        datetime=meta["datetime"],
    )


def write_annual(annual: AnnualLabel, out_dir) -> dict:
    """Write annual_classes / annual_conf / annual_count plus the report."""
    out_dir = Path(out_dir)
    write_rbin(annual.class_plane, out_dir / "annual_classes.rbin")
    write_rbin(annual.confidence, out_dir / "annual_conf.rbin")
    write_rbin(annual.count, out_dir / "annual_count.rbin")

    observed = annual.count.values > 0
    class_pixels = {
        str(k): int((annual.class_plane.values[observed] == k).sum())
        for k in TRAINABLE_CLASSES
    }
    report = {
        "n_observed_pixels": int(observed.sum()),
        "n_unobserved_pixels": int((~observed).sum()),
        "max_observations": int(annual.count.values.max()),
        "mean_confidence": (
            float(annual.confidence.values[observed].mean()) if observed.any() else None
        ),
        "class_pixel_counts": class_pixels,
    }
    (out_dir / "annual_report.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return report
