"""Ground-truth filtering and per-scene training-sample construction.

The flow for one scene: legacy 30 m labels are mapped to the leaf taxonomy,
regridded to 10 m, and kept only where the 20 m scene classification agrees.
From the filtered labels, at most one training sample is drawn per 30 m label
cell (a 3x3 block of 10 m pixels), restricted to pixels that pass the strict
training-validity test, then split half/half per class into train and test.

Training validity is deliberately stricter than the prediction-usable set:
it demands a clean-surface SCL code {4, 5, 6, 11}, cloud confidence below 50,
and strictly positive reflectance in all ten bands.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import AlignmentError, MappingError
from .raster import FEATURE_BANDS, RasterGrid, Scene
from .rng import Rng64, stream_first_draws, stream_seed
from .taxonomy import (
    SCL_NAMES,
    TRAINABLE_CLASSES,
    UNCLASSIFIED,
    DEFAULT_TABLES,
    TaxonomyTables,
)

# SCL codes a pixel may carry to serve as a training sample.
TRAINING_SCL = frozenset({4, 5, 6, 11})
# Cloud-confidence ceiling (exclusive) for training samples.
TRAINING_CLOUD_CONF_MAX = 50

BLOCK = 3  # 10 m pixels per 30 m label cell, per axis


def scene_cloud_fraction(cloud_conf: RasterGrid) -> float:
    """Mean cloud confidence over non-nodata pixels, rescaled to [0, 1]."""
    values = cloud_conf.values
    mask = cloud_conf.valid_mask()
    if not mask.any():
        raise ValueError("cloud-confidence raster holds no valid pixels")
    sel = values[mask]
    if sel.min() < 0 or sel.max() > 100:
        raise ValueError("cloud confidence must lie in 0..100")
    return float(sel.astype(np.float64).mean() / 100.0)


def map_gl30_raster(gl30: RasterGrid, tables: TaxonomyTables = DEFAULT_TABLES) -> RasterGrid:
    """Map a legacy-code raster onto leaf classes; nodata becomes 255."""
    values = gl30.values
    lut = tables.gl30_lut()
    valid = gl30.valid_mask()
    codes = np.unique(values[valid])
    bad = [int(c) for c in codes if lut[int(c)] == UNCLASSIFIED]
    if bad:
        raise MappingError(f"legacy raster holds unknown codes {bad}")
    out = np.where(valid, lut[values.astype(np.int64)], UNCLASSIFIED).astype(np.uint8)
    return RasterGrid(gl30.spec, out, nodata=UNCLASSIFIED)


def filter_labels(
    labels: RasterGrid,
    scl: RasterGrid,
    tables: TaxonomyTables = DEFAULT_TABLES,
) -> RasterGrid:
    """Keep a label only where the scene classification agrees with its class.

    Disagreeing pixels become Unclassified (255); unclassified inputs pass
    through.  Filtering never invents a class.
    """
    if labels.spec != scl.spec:
        raise AlignmentError("label and scene-classification grids differ")
    lab = labels.values
    scl_vals = scl.values
    known = np.isin(lab, list(TRAINABLE_CLASSES) + [UNCLASSIFIED])
    if not known.all():
        raise MappingError(f"label raster holds non-class codes {np.unique(lab[~known])}")
    if scl_vals.min() < 0 or scl_vals.max() >= len(SCL_NAMES):
        raise MappingError("scene-classification raster holds codes outside 0..11")
    keep = tables.compat_lut()[lab.astype(np.int64), scl_vals.astype(np.int64)]
    out = np.where(keep, lab, UNCLASSIFIED).astype(np.uint8)
    return RasterGrid(labels.spec, out, nodata=UNCLASSIFIED)


def build_validity_mask(scene: Scene) -> np.ndarray:
    """Boolean plane marking pixels eligible as training samples."""
    mask = scene.bands_valid()
    for band in scene.bands:
        mask &= band.values > 0
    mask &= np.isin(scene.scl.values, list(TRAINING_SCL))
    mask &= scene.cloud_conf.values < TRAINING_CLOUD_CONF_MAX
    return mask


def _block_view(plane: np.ndarray) -> np.ndarray:
    """Reshape (H, W) into (H/3, W/3, 9) with row-major cells inside a block."""
    h, w = plane.shape
    return (
        plane.reshape(h // BLOCK, BLOCK, w // BLOCK, BLOCK)
        .transpose(0, 2, 1, 3)
        .reshape(h // BLOCK, w // BLOCK, BLOCK * BLOCK)
    )


def block_modal_labels(labels: RasterGrid) -> np.ndarray:
    """Modal label per 3x3 block (ties to the lowest class code).

    After nearest-neighbor regridding every block is uniform, so the mode is
    that label; the computation stays robust if the raster arrives degraded.
    A block whose majority is Unclassified stays Unclassified.
    """
    blocks = _block_view(labels.values)
    counts = np.stack([(blocks == c).sum(axis=2) for c in TRAINABLE_CLASSES])
    best_count = counts.max(axis=0)
    best_class = counts.argmax(axis=0).astype(np.uint8)
    n_unclassified = (blocks == UNCLASSIFIED).sum(axis=2)
    modal = np.where(
        (best_count > 0) & (best_count >= n_unclassified), best_class, UNCLASSIFIED
    )
    return modal.astype(np.uint8)


def pick_block_candidates(
    labels: RasterGrid, valid: np.ndarray, seed: int
) -> list[tuple[int, int, int]]:
    """One candidate pixel per 30 m block: uniformly among the valid pixels
    carrying the block's modal label, drawn from stream (seed, BLOCK_PICK,
    block index) so the result is independent of traversal order.

    Returns (row, col, class) tuples ordered by block (R, C); blocks with no
    eligible pixel contribute nothing.
    """
    h, w = labels.values.shape
    if h % BLOCK or w % BLOCK:
        raise ValueError(f"label raster {h}x{w} is not aligned to {BLOCK}x{BLOCK} blocks")
    if valid.shape != (h, w):
        raise AlignmentError("validity mask shape differs from label raster")

    modal = block_modal_labels(labels)
    lab_blocks = _block_view(labels.values)
    val_blocks = _block_view(valid)
    eligible = (lab_blocks == modal[:, :, None]) & val_blocks
    eligible &= (modal != UNCLASSIFIED)[:, :, None]
    n_eligible = eligible.sum(axis=2)

    hb, wb = modal.shape
    flat_has = (n_eligible > 0).reshape(-1)
    block_indices = np.nonzero(flat_has)[0]
    if block_indices.size == 0:
        return []

    draws = stream_first_draws(seed, "BLOCK_PICK", block_indices)
    counts = n_eligible.reshape(-1)[block_indices].astype(np.uint64)
    picks = (draws % counts).astype(np.int64)

    elig_flat = eligible.reshape(-1, BLOCK * BLOCK)[block_indices]
    csum = np.cumsum(elig_flat, axis=1)
    local = np.argmax(csum == (picks + 1)[:, None], axis=1)

    block_r = block_indices // wb
    block_c = block_indices % wb
    rows = block_r * BLOCK + local // BLOCK
    cols = block_c * BLOCK + local % BLOCK
    classes = modal.reshape(-1)[block_indices]
    return [(int(r), int(c), int(k)) for r, c, k in zip(rows, cols, classes)]


@dataclass
class SampleSet:
    """Per-scene training/testing samples with provenance.

    Per class the train and test counts differ by at most one (train gets
    the extra sample); no two samples share a 30 m block by construction.
    """

    features: np.ndarray  # (n, 10) float32
    labels: np.ndarray  # (n,) uint8
    train_mask: np.ndarray  # (n,) bool
    rows: np.ndarray  # (n,) int32
    cols: np.ndarray  # (n,) int32

    def __len__(self) -> int:
        return len(self.labels)

    def train(self) -> tuple[np.ndarray, np.ndarray]:
        return self.features[self.train_mask], self.labels[self.train_mask]

    def test(self) -> tuple[np.ndarray, np.ndarray]:
        return self.features[~self.train_mask], self.labels[~self.train_mask]

    def class_counts(self) -> dict[int, tuple[int, int]]:
        """{class: (n_train, n_test)} over classes present."""
        out: dict[int, tuple[int, int]] = {}
        for cls in TRAINABLE_CLASSES:
            sel = self.labels == cls
            if sel.any():
                n_train = int((sel & self.train_mask).sum())
                out[cls] = (n_train, int(sel.sum()) - n_train)
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["row", "col", "class", "split", *FEATURE_BANDS])
            for i in range(len(self)):
                writer.writerow(
                    [
                        int(self.rows[i]),
                        int(self.cols[i]),
                        int(self.labels[i]),
                        "train" if self.train_mask[i] else "test",
                        *(format(float(v), ".8g") for v in self.features[i]),
                    ]
                )


def stratified_split(
    candidates: list[tuple[int, int, int]],
    feature_stack: np.ndarray,
    seed: int,
) -> SampleSet:
    """Split candidates half/half per class into train and test.

    Within each class the candidates are shuffled on stream (seed, SPLIT,
    class) and assigned alternately starting with train, so counts differ by
    at most one and an odd leftover goes to training.
    """
    if not candidates:
        raise ValueError("cannot split an empty candidate list")
    by_class: dict[int, list[tuple[int, int, int]]] = {}
    for cand in candidates:
        by_class.setdefault(cand[2], []).append(cand)

    rows: list[int] = []
    cols: list[int] = []
    labels: list[int] = []
    is_train: list[bool] = []
    for cls in sorted(by_class):
        group = list(by_class[cls])
        rng = Rng64(stream_seed(seed, "SPLIT", cls))
        rng.shuffle(group)
        for i, (r, c, _) in enumerate(group):
            rows.append(r)
            cols.append(c)
            labels.append(cls)
            is_train.append(i % 2 == 0)

    rows_arr = np.asarray(rows, dtype=np.int32)
    cols_arr = np.asarray(cols, dtype=np.int32)
    features = feature_stack[rows_arr, cols_arr].astype(np.float32, copy=True)
    return SampleSet(
        features=features,
        labels=np.asarray(labels, dtype=np.uint8),
        train_mask=np.asarray(is_train, dtype=bool),
        rows=rows_arr,
        cols=cols_arr,
    )
