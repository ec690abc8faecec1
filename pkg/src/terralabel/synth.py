"""Synthetic-tile generator: a desk-scale oracle for the whole pipeline.

Generates a Voronoi ground-truth class map, per-scene band stacks drawn from
per-class spectral means plus Gaussian noise, 20 m scene-classification and
cloud-confidence masks, and a degraded 30 m legacy label raster with a known
corruption count.  Everything is a pure function of (spec, master seed), so
end-to-end runs are reproducible and assertable.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .raster import (
    BANDS_10M,
    FEATURE_BANDS,
    BandRef,
    GridSpec,
    RasterGrid,
    SceneManifest,
    write_rbin,
)
from .rng import Rng64, stream_seed
from .taxonomy import N_CLASSES, DEFAULT_TABLES

PIXEL_SIZE_10M = 10.0

# Canonical SCL code emitted for each class: water-like classes read as
# water, snow as snow, vegetated classes as vegetation, bare as not-vegetated.
CLASS_TO_SCL = {0: 6, 1: 11, 2: 6, 3: 4, 4: 4, 5: 4, 6: 5, 7: 5}

# Per-class mean reflectances for the ten bands, in feature order
# (B02,B03,B04,B08,B05,B06,B07,B8A,B11,B12).  Shapes follow familiar
# spectral behavior: water dark in NIR/SWIR, snow bright in the visible,
# vegetation with a strong red edge, bare ground flat and SWIR-bright.
DEFAULT_SPECTRA = (
    (0.06, 0.05, 0.04, 0.02, 0.04, 0.03, 0.02, 0.02, 0.01, 0.01),  # Water
    (0.90, 0.88, 0.85, 0.80, 0.86, 0.83, 0.81, 0.78, 0.15, 0.10),  # SnowIce
    (0.07, 0.09, 0.08, 0.30, 0.12, 0.22, 0.26, 0.28, 0.18, 0.10),  # Wetland
    (0.06, 0.09, 0.10, 0.35, 0.15, 0.25, 0.30, 0.33, 0.25, 0.16),  # SemiNatural
    (0.04, 0.06, 0.05, 0.42, 0.10, 0.28, 0.36, 0.40, 0.16, 0.08),  # Woody
    (0.07, 0.11, 0.08, 0.50, 0.14, 0.34, 0.44, 0.48, 0.22, 0.12),  # Cultivated
    (0.18, 0.22, 0.27, 0.33, 0.30, 0.32, 0.33, 0.34, 0.45, 0.38),  # NaturalBare
    (0.22, 0.24, 0.26, 0.28, 0.27, 0.28, 0.28, 0.29, 0.32, 0.30),  # ArtificialBare
)

START_DATE = datetime(2017, 7, 1, tzinfo=timezone.utc)


def min_interclass_distance(spectra) -> float:
    """Smallest Euclidean distance between any two class mean vectors."""
    arr = np.asarray(spectra, dtype=np.float64)
    best = math.inf
    for i in range(len(arr)):
        for j in range(i + 1, len(arr)):
            best = min(best, float(np.linalg.norm(arr[i] - arr[j])))
    return best


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of one synthetic tile."""

    width: int
    height: int
    n_sites: int
    class_weights: tuple[float, ...]
    class_spectra: tuple[tuple[float, ...], ...] = DEFAULT_SPECTRA
    noise_sigma: float = 0.0
    cloud_fraction: float = 0.0
    gl30_corruption: float = 0.0
    n_scenes: int = 1
    master_seed: int = 0
    tile_id: str = "synth"

    def __post_init__(self):
        if self.width < 6 or self.height < 6 or self.width % 6 or self.height % 6:
            raise ConfigError("width and height must be multiples of 6, at least 6")
        if self.n_sites < 1:
            raise ConfigError("n_sites must be >= 1")
        if len(self.class_weights) != N_CLASSES:
            raise ConfigError(f"class_weights needs {N_CLASSES} entries")
        if any(w < 0 for w in self.class_weights):
            raise ConfigError("class weights must be nonnegative")
        if abs(sum(self.class_weights) - 1.0) > 1e-9:
            raise ConfigError("class weights must sum to 1")
        if len(self.class_spectra) != N_CLASSES or any(
            len(s) != len(FEATURE_BANDS) for s in self.class_spectra
        ):
            raise ConfigError(f"class_spectra must be {N_CLASSES} vectors of 10 means")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if not 0.0 <= self.cloud_fraction <= 1.0:
            raise ConfigError("cloud_fraction must lie in [0, 1]")
        if not 0.0 <= self.gl30_corruption <= 1.0:
            raise ConfigError("gl30_corruption must lie in [0, 1]")
        if self.n_scenes < 1:
            raise ConfigError("n_scenes must be >= 1")

    def grid10(self) -> GridSpec:
        return GridSpec(
            self.width,
            self.height,
            0.0,
            self.height * PIXEL_SIZE_10M,
            PIXEL_SIZE_10M,
        )

    def to_json_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "n_sites": self.n_sites,
            "class_weights": list(self.class_weights),
            "class_spectra": [list(s) for s in self.class_spectra],
            "noise_sigma": self.noise_sigma,
            "cloud_fraction": self.cloud_fraction,
            "gl30_corruption": self.gl30_corruption,
            "n_scenes": self.n_scenes,
            "seed": self.master_seed,
            "tile_id": self.tile_id,
        }


def reference_spec(seed: int = 42) -> SynthSpec:
    """The reference verification tile: 384x384, 12 scenes, noise at 0.2x the
    minimum inter-class spectral distance, 10% cloud, 20% label corruption."""
    return SynthSpec(
        width=384,
        height=384,
        n_sites=40,
        class_weights=(0.125,) * 8,
        noise_sigma=0.2 * min_interclass_distance(DEFAULT_SPECTRA),
        cloud_fraction=0.1,
        gl30_corruption=0.2,
        n_scenes=12,
        master_seed=seed,
    )


def spec_from_json(path) -> tuple[SynthSpec, Path]:
    """Load a SynthSpec (plus its output directory) from a JSON file."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read synth spec {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("synth spec must be a JSON object")
    if "out_dir" not in doc:
        raise ConfigError("synth spec missing 'out_dir'")
    if "seed" not in doc:
        raise ConfigError("synth spec missing 'seed' (runs must be seeded explicitly)")

    spectra = doc.get("class_spectra")
    spectra_t = (
        DEFAULT_SPECTRA
        if spectra is None
        else tuple(tuple(float(v) for v in row) for row in spectra)
    )
    sigma = doc.get("noise_sigma")
    factor = doc.get("noise_sigma_factor")
    if sigma is not None and factor is not None:
        raise ConfigError("give either noise_sigma or noise_sigma_factor, not both")
    if factor is not None:
        sigma = float(factor) * min_interclass_distance(spectra_t)
    if sigma is None:
        sigma = 0.0

    try:
        spec = SynthSpec(
            width=int(doc["width"]),
            height=int(doc["height"]),
            n_sites=int(doc["n_sites"]),
            class_weights=tuple(float(w) for w in doc["class_weights"]),
            class_spectra=spectra_t,
            noise_sigma=float(sigma),
            cloud_fraction=float(doc.get("cloud_fraction", 0.0)),
            gl30_corruption=float(doc.get("gl30_corruption", 0.0)),
            n_scenes=int(doc["n_scenes"]),
            master_seed=int(doc["seed"]),
            tile_id=str(doc.get("tile_id", "synth")),
        )
    except KeyError as exc:
        raise ConfigError(f"synth spec missing field {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"malformed synth spec: {exc}") from exc
    out_dir = Path(doc["out_dir"])
    if not out_dir.is_absolute():
        out_dir = path.parent / out_dir
    return spec, out_dir


def _weighted_class(rng: Rng64, weights) -> int:
    u = rng.uniform()
    acc = 0.0
    for k, w in enumerate(weights):
        acc += w
        if u <= acc:
            return k
    return len(weights) - 1


def gen_truth(spec: SynthSpec) -> RasterGrid:
    """Voronoi ground truth: each pixel takes the class of its nearest site
    (Euclidean distance between pixel center and site, ties to the lower
    site index).  Sites and their classes come from stream (seed, SITES)."""
    rng = Rng64(stream_seed(spec.master_seed, "SITES"))
    sites = []
    for _ in range(spec.n_sites):
        x = rng.uniform() * spec.width
        y = rng.uniform() * spec.height
        cls = _weighted_class(rng, spec.class_weights)
        sites.append((x, y, cls))

    cols = np.arange(spec.width, dtype=np.float64) + 0.5
    rows = np.arange(spec.height, dtype=np.float64) + 0.5
    cx = cols[np.newaxis, :]
    cy = rows[:, np.newaxis]
    best_d2 = np.full((spec.height, spec.width), np.inf)
    best_cls = np.zeros((spec.height, spec.width), dtype=np.uint8)
    for x, y, cls in sites:
        d2 = (cx - x) ** 2 + (cy - y) ** 2
        better = d2 < best_d2
        best_d2[better] = d2[better]
        best_cls[better] = cls
    return RasterGrid(spec.grid10(), best_cls)


def _block_modal(classes: np.ndarray, factor: int) -> np.ndarray:
    """Modal class per factor x factor block, ties to the lowest code."""
    h, w = classes.shape
    blocks = (
        classes.reshape(h // factor, factor, w // factor, factor)
        .transpose(0, 2, 1, 3)
        .reshape(h // factor, w // factor, factor * factor)
    )
    counts = np.stack([(blocks == c).sum(axis=2) for c in range(N_CLASSES)])
    return counts.argmax(axis=0).astype(np.uint8)


def gen_scene(
    truth: RasterGrid, spec: SynthSpec, index: int, scene_dir
) -> SceneManifest:
    """Materialize one scene (band, SCL, and cloud rasters plus manifest).

    All noise comes from stream (seed, SCENE, index): first the Box-Muller
    gaussians for the ten hidden 10 m fields (band-major, row-major), then
    the cloud-disk draws.  The six 20 m bands are 2x2 block means of their
    hidden fields; SCL is the modal class's canonical code per 20 m block,
    overwritten by value-9 disks until the cloud-cover target is reached.
    """
    scene_dir = Path(scene_dir)
    scene_dir.mkdir(parents=True, exist_ok=True)
    h, w = spec.height, spec.width
    rng = Rng64(stream_seed(spec.master_seed, "SCENE", index))

    means = np.asarray(spec.class_spectra, dtype=np.float64)
    noise = rng.draw_gauss(len(FEATURE_BANDS) * h * w).reshape(len(FEATURE_BANDS), h, w)
    fields = means[truth.values.astype(np.int64)].transpose(2, 0, 1)
    fields = fields + spec.noise_sigma * noise

    grid10 = spec.grid10()
    grid20 = grid10.scaled(2)
    band_grids: dict[str, RasterGrid] = {}
    for bi, name in enumerate(FEATURE_BANDS):
        if name in BANDS_10M:
            band_grids[name] = RasterGrid(grid10, fields[bi].astype(np.float32))
        else:
            avg = fields[bi].reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
            band_grids[name] = RasterGrid(grid20, avg.astype(np.float32))

    modal20 = _block_modal(truth.values, 2)
    scl = np.empty(modal20.shape, dtype=np.uint8)
    for cls, code in CLASS_TO_SCL.items():
        scl[modal20 == cls] = code
    conf = np.zeros(modal20.shape, dtype=np.uint8)

    if spec.cloud_fraction > 0.0:
        h20, w20 = modal20.shape
        total = h20 * w20
        r_min = max(2, round(0.03 * min(h20, w20)))
        r_max = max(r_min, round(0.08 * min(h20, w20)))
        gx = np.arange(w20)[np.newaxis, :]
        gy = np.arange(h20)[:, np.newaxis]
        covered = 0
        attempts = 0
        while covered / total < spec.cloud_fraction:
            attempts += 1
            if attempts > 1_000_000:
                raise RuntimeError("cloud placement failed to converge")
            cx = rng.randbelow(w20)
            cy = rng.randbelow(h20)
            r = r_min + rng.randbelow(r_max - r_min + 1)
            disk = (gx - cx) ** 2 + (gy - cy) ** 2 <= r * r
            scl[disk] = 9
            conf[disk] = 100
            covered = int((conf == 100).sum())

    scl_grid = RasterGrid(grid20, scl)
    conf_grid = RasterGrid(grid20, conf)

    for name, grid in band_grids.items():
        write_rbin(grid, scene_dir / f"{name}.rbin")
    write_rbin(scl_grid, scene_dir / "scl.rbin")
    write_rbin(conf_grid, scene_dir / "cloud.rbin")

    stamp = (START_DATE + timedelta(days=30 * index)).strftime("%Y-%m-%dT%H:%M:%SZ")
    manifest = SceneManifest(
        scene_id=f"scene_{index:03d}",
        tile_id=spec.tile_id,
        datetime=stamp,
        bands={
            name: BandRef(f"{name}.rbin", 10 if name in BANDS_10M else 20)
            for name in FEATURE_BANDS
        },
        scl_path="scl.rbin",
        cloud_conf_path="cloud.rbin",
        base_dir=scene_dir,
    )
    (scene_dir / "manifest.json").write_text(
        json.dumps(manifest.to_json_dict(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    return manifest


def _corruption_choices() -> dict[int, list[int]]:
    """Replacement classes per current class: uniformly among the classes the
    cell's canonical scene classification contradicts.  The current class is
    always compatible with its own canonical code, so replacements always
    differ, and agreement filtering can detect every corrupted cell."""
    out = {}
    for cls, code in CLASS_TO_SCL.items():
        out[cls] = [
            k for k in range(N_CLASSES) if not DEFAULT_TABLES.scl_compatible(k, code)
        ]
    return out


def gen_gl30(truth: RasterGrid, spec: SynthSpec) -> RasterGrid:
    """Degraded 30 m legacy labels: modal truth class per 3x3 block, then
    exactly floor(rate * n_blocks + 0.5) cells (stream CORRUPT, sampled
    without replacement) reassigned a uniformly-chosen different class that
    disagrees with the cell's canonical scene classification.
    Values are legacy codes via the canonical (lowest-code) inverse of M1."""
    h, w = truth.values.shape
    if h % 3 or w % 3:
        raise ValueError(f"truth dimensions {h}x{w} not divisible by 3")
    classes = _block_modal(truth.values, 3)
    hb, wb = classes.shape
    flat = classes.reshape(-1).astype(np.int64)

    n_blocks = flat.size
    n_corrupt = int(spec.gl30_corruption * n_blocks + 0.5)
    if n_corrupt:
        rng = Rng64(stream_seed(spec.master_seed, "CORRUPT"))
        chosen = rng.sample_indices(n_blocks, n_corrupt)
        choices = _corruption_choices()
        for cell in chosen:
            opts = choices[int(flat[cell])]
            flat[cell] = opts[rng.randbelow(len(opts))]

    preimage = DEFAULT_TABLES.gl30_preimage()
    lut = np.zeros(N_CLASSES, dtype=np.uint8)
    for cls, code in preimage.items():
        lut[cls] = code
    codes = lut[flat].reshape(hb, wb)
    return RasterGrid(truth.spec.scaled(3), codes)


def generate_tile(spec: SynthSpec, out_dir) -> list[SceneManifest]:
    """Write the full tile: truth, legacy labels, every scene, and the spec echo."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    truth = gen_truth(spec)
    write_rbin(truth, out_dir / "truth.rbin")
    write_rbin(gen_gl30(truth, spec), out_dir / "gl30.rbin")
    manifests = []
    for i in range(spec.n_scenes):
        manifests.append(gen_scene(truth, spec, i, out_dir / f"scene_{i:03d}"))
    (out_dir / "synthspec.json").write_text(
        json.dumps(spec.to_json_dict(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    return manifests
