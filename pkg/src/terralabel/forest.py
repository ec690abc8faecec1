"""From-scratch random forest over the 10-band feature space.

Fully deterministic: every stochastic step (bootstrap resamples, feature
subsets) draws from per-tree splitmix64 streams derived as (seed, TREE, i),
so trees can be grown in any order or in parallel with identical results.

Split search scans each candidate feature in ascending index order; candidate
thresholds are the midpoints between consecutive distinct sorted values, and
the split maximizing the weighted Gini decrease wins, ties going to the
lowest feature index and then the lowest threshold.  The impurity arithmetic
is written as plain sequential IEEE double operations (one class at a time)
so an exhaustive scalar re-implementation reproduces it bit for bit.

Thresholds are stored as float32 (the feature dtype).  The float64 midpoint
is rounded to float32 once at tree-growing time and, if rounding would move
it onto the first value of the right partition, it is snapped down to the
last value of the left partition, so training-time partitions, in-memory
prediction, and the serialized model all route samples identically.

Model container format (RFM, little-endian, magic "RFM1")::

    0   magic "RFM1"
    4   max_depth i32 (-1 = unbounded)
    8   min_samples_split u32
    12  features_per_split u32
    16  bootstrap u8
    17  n_classes u8, then class codes (u8 each)
    ..  n_bands u8, then per band: name length u8 + ascii name
    ..  scene_id length u16 + utf-8 bytes
    ..  training seed u64
    ..  per-class training sample counts u32 each
    ..  tree count u32
    ..  trees, each a pre-order node stream:
          tag u8 = 0 (leaf):     n_classes f64 class probabilities
          tag u8 = 1 (internal): feature u8, threshold f32,
                                 left-subtree byte length u64,
                                 left subtree bytes, right subtree bytes
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import AlignmentError, RasterFormatError, TrainingError
from .raster import FEATURE_BANDS, RasterGrid, Scene
from .rng import Rng64, stream_seed
from .taxonomy import (
    N_CLASSES,
    TRAINABLE_CLASSES,
    UNCLASSIFIED,
    DEFAULT_TABLES,
    TaxonomyTables,
)

RFM_MAGIC = b"RFM1"

N_FEATURES = len(FEATURE_BANDS)


@dataclass(frozen=True)
class ForestParams:
    """Hyperparameters; the defaults follow common classifier defaults
    (10 trees, Gini, sqrt-of-features per split, bootstrap of size n,
    grow to purity)."""

    n_trees: int = 10
    max_depth: int | None = None
    min_samples_split: int = 2
    features_per_split: int = 3
    bootstrap: bool = True

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if not 1 <= self.features_per_split <= N_FEATURES:
            raise ValueError(f"features_per_split must lie in 1..{N_FEATURES}")
        if self.min_samples_split < 2:
            raise ValueError("min_samples_split must be >= 2")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be None or >= 0")


class TreeNode:
    """Leaf (class distribution) or internal node (value <= threshold -> left)."""

    __slots__ = ("feature", "threshold", "left", "right", "dist")

    def __init__(self, *, feature=None, threshold=None, left=None, right=None, dist=None):
        self.feature = feature
        self.threshold = threshold
        self.left = left
        self.right = right
        self.dist = dist

    def is_leaf(self) -> bool:
        return self.dist is not None


@dataclass
class ForestModel:
    params: ForestParams
    trees: list[TreeNode]
    classes: tuple[int, ...] = TRAINABLE_CLASSES
    band_order: tuple[str, ...] = FEATURE_BANDS
    scene_id: str = ""
    seed: int = 0
    train_counts: np.ndarray = field(
        default_factory=lambda: np.zeros(N_CLASSES, dtype=np.int64)
    )

    def __post_init__(self):
        if len(self.trees) != self.params.n_trees:
            raise ValueError("tree count does not match params.n_trees")


def gini(counts) -> float:
    """Gini impurity 1 - sum((count_k / total)^2), accumulated in class order."""
    total = 0
    for c in counts:
        if c < 0:
            raise ValueError("counts must be nonnegative")
        total += int(c)
    if total <= 0:
        raise ValueError("gini requires a positive total count")
    acc = 0.0
    for c in counts:
        q = c / total
        acc += q * q
    return 1.0 - acc


@dataclass(frozen=True)
class SplitChoice:
    feature: int
    threshold: float
    decrease: float


def best_split(
    features: np.ndarray,
    labels: np.ndarray,
    feature_subset,
    parent_counts=None,
) -> SplitChoice | None:
    """Exact best (feature, threshold) by weighted Gini decrease.

    Candidates are the midpoints between consecutive distinct sorted values
    of each feature in ``feature_subset``.  Returns None for pure nodes and
    when no feature in the subset has two distinct values.  Impure nodes
    split even at zero decrease (the XOR case): both children are strictly
    smaller, and purity may become reachable one level down.
    """
    values = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n = len(y)
    if n < 2:
        return None
    subset = sorted(set(int(f) for f in feature_subset))
    if not subset:
        raise ValueError("feature subset must be nonempty")

    if parent_counts is None:
        parent_counts = np.bincount(y, minlength=N_CLASSES)
    parent_counts = np.asarray(parent_counts, dtype=np.int64)
    if int(parent_counts.max()) == n:
        return None
    g_parent = gini(parent_counts.tolist())

    onehot = np.zeros((n, N_CLASSES), dtype=np.int64)
    onehot[np.arange(n), y] = 1

    best: SplitChoice | None = None
    n_left = np.arange(1, n, dtype=np.float64)
    n_right = np.float64(n) - n_left
    for f in subset:
        col = values[:, f]
        order = np.argsort(col, kind="stable")
        vs = col[order]
        boundary = vs[:-1] < vs[1:]
        if not boundary.any():
            continue
        left_counts = np.cumsum(onehot[order], axis=0)[:-1]

        acc_l = np.zeros(n - 1, dtype=np.float64)
        acc_r = np.zeros(n - 1, dtype=np.float64)
        for k in range(N_CLASSES):
            ql = left_counts[:, k] / n_left
            acc_l = acc_l + ql * ql
            qr = (parent_counts[k] - left_counts[:, k]) / n_right
            acc_r = acc_r + qr * qr
        g_left = 1.0 - acc_l
        g_right = 1.0 - acc_r
        decrease = g_parent - (n_left * g_left + n_right * g_right) / n
        decrease = np.where(boundary, decrease, -np.inf)

        i = int(np.argmax(decrease))
        d = float(decrease[i])
        if best is None or d > best.decrease:
            threshold = (float(vs[i]) + float(vs[i + 1])) / 2.0
            best = SplitChoice(feature=f, threshold=threshold, decrease=d)
    return best


def _storage_threshold(node_values: np.ndarray, threshold: float) -> np.float32:
    """float32 threshold that realizes the same partition as the float64 one.

    Rounding the midpoint up to the smallest right-side value would shift the
    partition; snap down to the largest left-side value in that case.
    """
    t32 = np.float32(threshold)
    right_min = node_values[node_values > threshold].min()
    if float(t32) >= float(right_min):
        t32 = np.float32(node_values[node_values <= threshold].max())
    return t32


def _leaf(counts: np.ndarray) -> TreeNode:
    total = int(counts.sum())
    dist = counts.astype(np.float64) / float(total)
    return TreeNode(dist=dist)


def grow_tree(
    features: np.ndarray,
    labels: np.ndarray,
    params: ForestParams,
    rng: Rng64,
) -> TreeNode:
    """Grow one tree; feature subsets are drawn in pre-order (node, left
    subtree, right subtree), which fixes the RNG consumption order."""
    values = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if len(y) < 1:
        raise TrainingError("cannot grow a tree from zero samples")
    n_features = values.shape[1]

    root_holder = TreeNode()
    # Explicit pre-order stack instead of recursion: degenerate trees can be
    # deeper than the interpreter stack allows.
    stack: list[tuple[np.ndarray, int, TreeNode, str]] = [
        (np.arange(len(y)), 0, root_holder, "left")
    ]
    while stack:
        idx, depth, parent, side = stack.pop()
        counts = np.bincount(y[idx], minlength=N_CLASSES)
        pure = int(counts.max()) == len(idx)
        stop = (
            pure
            or len(idx) < params.min_samples_split
            or (params.max_depth is not None and depth >= params.max_depth)
        )
        choice = None
        if not stop:
            subset = rng.sample_indices(n_features, params.features_per_split)
            choice = best_split(values[idx], y[idx], subset, counts)
        if choice is None:
            node = _leaf(counts)
        else:
            col = values[idx, choice.feature]
            t32 = _storage_threshold(col, choice.threshold)
            go_left = col <= float(t32)
            node = TreeNode(feature=choice.feature, threshold=t32)
            # Push right first so the left subtree is grown first (pre-order).
            stack.append((idx[~go_left], depth + 1, node, "right"))
            stack.append((idx[go_left], depth + 1, node, "left"))
        setattr(parent, side, node)
    return root_holder.left


def train_forest(
    features: np.ndarray,
    labels: np.ndarray,
    params: ForestParams = ForestParams(),
    seed: int = 0,
    scene_id: str = "",
) -> ForestModel:
    """Train ``params.n_trees`` trees, tree i on a bootstrap resample drawn
    from stream (seed, TREE, i).  Deterministic in (data, params, seed)."""
    features = np.asarray(features, dtype=np.float32)
    labels = np.asarray(labels)
    n = len(labels)
    if n == 0:
        raise TrainingError("training sample set is empty")
    if features.ndim != 2 or features.shape[0] != n:
        raise TrainingError(f"feature matrix {features.shape} does not match {n} labels")
    if not np.isin(labels, TRAINABLE_CLASSES).all():
        raise TrainingError("labels must be trainable class codes")

    trees = []
    for i in range(params.n_trees):
        rng = Rng64(stream_seed(seed, "TREE", i))
        if params.bootstrap:
            idx = (rng.draw_u64(n) % np.uint64(n)).astype(np.int64)
        else:
            idx = np.arange(n)
        trees.append(grow_tree(features[idx], labels[idx], params, rng))

    return ForestModel(
        params=params,
        trees=trees,
        scene_id=scene_id,
        seed=seed & 0xFFFFFFFFFFFFFFFF,
        train_counts=np.bincount(labels.astype(np.int64), minlength=N_CLASSES),
    )


def _apply_tree(root: TreeNode, values: np.ndarray) -> np.ndarray:
    """Leaf distribution per row of ``values`` (n, features), float64 (n, 8)."""
    out = np.empty((len(values), N_CLASSES), dtype=np.float64)
    stack = [(root, np.arange(len(values)))]
    while stack:
        node, idx = stack.pop()
        if idx.size == 0:
            continue
        if node.is_leaf():
            out[idx] = node.dist
            continue
        go_left = values[idx, node.feature] <= float(node.threshold)
        stack.append((node.left, idx[go_left]))
        stack.append((node.right, idx[~go_left]))
    return out


def predict_proba(model: ForestModel, features: np.ndarray) -> np.ndarray:
    """Mean of the leaf distributions reached in each tree.

    Accepts a single 10-vector or an (n, 10) matrix; returns (8,) or (n, 8).
    """
    values = np.asarray(features, dtype=np.float64)
    single = values.ndim == 1
    if single:
        values = values[np.newaxis, :]
    if values.shape[1] != len(model.band_order):
        raise ValueError(f"expected {len(model.band_order)} features, got {values.shape[1]}")
    acc = np.zeros((len(values), N_CLASSES), dtype=np.float64)
    for tree in model.trees:
        acc += _apply_tree(tree, values)
    probs = acc / float(len(model.trees))
    return probs[0] if single else probs


@dataclass
class ScenePrediction:
    """Dense per-scene prediction: class plane (255 off the usable mask),
    eight float32 probability planes, and the usable mask itself."""

    class_plane: RasterGrid
    probabilities: list[RasterGrid]
    usable: np.ndarray
    scene_id: str
    datetime: str

    @property
    def spec(self):
        return self.class_plane.spec


def predict_raster(
    model: ForestModel,
    scene: Scene,
    tables: TaxonomyTables = DEFAULT_TABLES,
    block_rows: int = 256,
) -> ScenePrediction:
    """Predict class + probabilities on every usable pixel of a scene.

    Usable means the scene-classification code is in the prediction-usable
    set and all bands hold real values; everything else gets class 255 and
    zero probabilities.  Pixels are processed in row blocks; results do not
    depend on the block size.  The class is the argmax of the float32
    probability planes (ties to the lowest class code), so the emitted
    planes and class plane are always mutually consistent.
    """
    scl = scene.scl.values
    if scl.max() >= tables.usable_lut().shape[0]:
        raise AlignmentError("scene-classification raster holds codes outside 0..11")
    usable = tables.usable_lut()[scl.astype(np.int64)] & scene.bands_valid()

    h, w = scene.spec.height, scene.spec.width
    stack = scene.feature_stack().astype(np.float64)
    classes = np.full((h, w), UNCLASSIFIED, dtype=np.uint8)
    probs = np.zeros((N_CLASSES, h, w), dtype=np.float32)

    for r0 in range(0, h, block_rows):
        r1 = min(r0 + block_rows, h)
        block_mask = usable[r0:r1]
        if not block_mask.any():
            continue
        rows, cols = np.nonzero(block_mask)
        feats = stack[r0:r1][rows, cols]
        p64 = predict_proba(model, feats)
        p32 = p64.astype(np.float32)
        cls = np.argmax(p32, axis=1).astype(np.uint8)
        classes[r0 + rows, cols] = cls
        for k in range(N_CLASSES):
            probs[k, r0 + rows, cols] = p32[:, k]

    class_plane = RasterGrid(scene.spec, classes, nodata=UNCLASSIFIED)
    prob_grids = [RasterGrid(scene.spec, probs[k]) for k in range(N_CLASSES)]
    return ScenePrediction(
        class_plane=class_plane,
        probabilities=prob_grids,
        usable=usable,
        scene_id=scene.scene_id,
        datetime=scene.datetime,
    )


def _encode_tree(root: TreeNode) -> bytes:
    """Pre-order node stream; iterative post-order assembly."""
    done: dict[int, bytes] = {}
    stack: list[tuple[TreeNode, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if node.is_leaf():
            done[id(node)] = b"\x00" + struct.pack(f"<{N_CLASSES}d", *node.dist)
            continue
        if not expanded:
            stack.append((node, True))
            stack.append((node.right, False))
            stack.append((node.left, False))
            continue
        left = done.pop(id(node.left))
        right = done.pop(id(node.right))
        head = b"\x01" + struct.pack(
            "<BfQ", int(node.feature), float(node.threshold), len(left)
        )
        done[id(node)] = head + left + right
    return done[id(root)]


def _decode_tree(buf: bytes, pos: int) -> tuple[TreeNode, int]:
    """Parse one pre-order tree starting at ``pos``; returns (root, next_pos)."""
    root: TreeNode | None = None
    # Stack of internal nodes awaiting children, with the expected byte
    # offset of the right subtree for validation of the stored lengths.
    pending: list[tuple[TreeNode, int]] = []
    while True:
        if pos >= len(buf):
            raise RasterFormatError("truncated tree stream")
        tag = buf[pos]
        start = pos
        pos += 1
        expected_right = -1
        if tag == 0:
            if pos + 8 * N_CLASSES > len(buf):
                raise RasterFormatError("truncated leaf node")
            dist = np.array(struct.unpack_from(f"<{N_CLASSES}d", buf, pos))
            pos += 8 * N_CLASSES
            node = TreeNode(dist=dist)
        elif tag == 1:
            if pos + 13 > len(buf):
                raise RasterFormatError("truncated internal node")
            feature, threshold, left_len = struct.unpack_from("<BfQ", buf, pos)
            pos += 13
            node = TreeNode(feature=int(feature), threshold=np.float32(threshold))
            expected_right = pos + left_len
        else:
            raise RasterFormatError(f"unknown node tag {tag}")

        if root is None:
            root = node
        else:
            parent, right_at = pending[-1]
            if parent.left is None:
                parent.left = node
            else:
                if start != right_at:
                    raise RasterFormatError("stored left-subtree length is inconsistent")
                parent.right = node
                pending.pop()
        if tag == 1:
            pending.append((node, expected_right))
        if not pending:
            return root, pos


def encode_rfm(model: ForestModel) -> bytes:
    parts = [RFM_MAGIC]
    max_depth = -1 if model.params.max_depth is None else model.params.max_depth
    parts.append(
        struct.pack(
            "<iIIB",
            max_depth,
            model.params.min_samples_split,
            model.params.features_per_split,
            1 if model.params.bootstrap else 0,
        )
    )
    parts.append(struct.pack("<B", len(model.classes)))
    parts.append(bytes(model.classes))
    parts.append(struct.pack("<B", len(model.band_order)))
    for name in model.band_order:
        raw = name.encode("ascii")
        parts.append(struct.pack("<B", len(raw)) + raw)
    sid = model.scene_id.encode("utf-8")
    parts.append(struct.pack("<H", len(sid)) + sid)
    parts.append(struct.pack("<Q", model.seed))
    parts.append(
        struct.pack(f"<{len(model.classes)}I", *(int(c) for c in model.train_counts))
    )
    parts.append(struct.pack("<I", len(model.trees)))
    for tree in model.trees:
        parts.append(_encode_tree(tree))
    return b"".join(parts)


def decode_rfm(blob: bytes) -> ForestModel:
    if blob[:4] != RFM_MAGIC:
        raise RasterFormatError(f"bad model magic {blob[:4]!r}")
    try:
        max_depth, min_split, feats_per_split, bootstrap = struct.unpack_from("<iIIB", blob, 4)
        pos = 4 + 13
        (n_classes,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        classes = tuple(blob[pos : pos + n_classes])
        pos += n_classes
        (n_bands,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        bands = []
        for _ in range(n_bands):
            (ln,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            bands.append(blob[pos : pos + ln].decode("ascii"))
            pos += ln
        (sid_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        scene_id = blob[pos : pos + sid_len].decode("utf-8")
        pos += sid_len
        (seed,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        train_counts = np.array(
            struct.unpack_from(f"<{n_classes}I", blob, pos), dtype=np.int64
        )
        pos += 4 * n_classes
        (n_trees,) = struct.unpack_from("<I", blob, pos)
        pos += 4
    except struct.error as exc:
        raise RasterFormatError(f"truncated model header: {exc}") from exc

    trees = []
    for _ in range(n_trees):
        tree, pos = _decode_tree(blob, pos)
        trees.append(tree)
    if pos != len(blob):
        raise RasterFormatError(f"{len(blob) - pos} trailing bytes after trees")

    params = ForestParams(
        n_trees=n_trees,
        max_depth=None if max_depth < 0 else max_depth,
        min_samples_split=min_split,
        features_per_split=feats_per_split,
        bootstrap=bool(bootstrap),
    )
    return ForestModel(
        params=params,
        trees=trees,
        classes=classes,
        band_order=tuple(bands),
        scene_id=scene_id,
        seed=seed,
        train_counts=train_counts,
    )


def save_rfm(model: ForestModel, path) -> int:
    blob = encode_rfm(model)
    Path(path).write_bytes(blob)
    return len(blob)


def load_rfm(path) -> ForestModel:
    return decode_rfm(Path(path).read_bytes())
