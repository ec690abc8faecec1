"""Acceptance suite: one test per verification criterion.

Each criterion prints a single ``[ACCEPT] <name>: PASS/FAIL`` line (run with
``pytest tests/test_acceptance.py -v -s`` to see them) and asserts at the
tolerance stated by the criterion, never looser.
"""

import hashlib
import json
import struct
import time
from contextlib import contextmanager

import numpy as np

from terralabel.cli import main
from terralabel.forest import ForestParams, best_split, predict_proba, predict_raster, train_forest
from terralabel.labelgen import filter_labels
from terralabel.pipeline import RunConfig, aggregate, run_scene
from terralabel.raster import (
    GridSpec,
    RasterGrid,
    decode_rbin,
    encode_rbin,
    read_rbin,
    resample_bilinear,
    resample_nearest,
)
from terralabel.rng import Rng64
from terralabel.synth import generate_tile, reference_spec
from terralabel.taxonomy import TRAINABLE_CLASSES, UNCLASSIFIED, TaxonomyTables

from conftest import small_spec
from test_forest import oracle_best_split, random_instance
from test_pipeline import make_prediction
from test_raster import oracle_nearest


@contextmanager
def criterion(name):
    try:
        yield
    except BaseException:
        print(f"\n[ACCEPT] {name}: FAIL")
        raise
    print(f"\n[ACCEPT] {name}: PASS")


GOLDEN_RBIN_SHA = "dcb4771b51025ebd9ef7974d131e2357bdf140e966acf05f109a424576c16f9b"
GOLDEN_RFM_SHA = "c35c7c7a698e74645c8f70f749d84075b36586b46327ca1091d4d6be8ad878c3"


def test_reference_tile_accuracy_and_runtime(tmp_path):
    """Per-scene test-half accuracy >= 0.95, tile average >= 0.97, < 60 s."""
    with criterion("reference-tile accuracy + runtime"):
        spec = reference_spec(seed=42)
        tile_dir = tmp_path / "tile"
        generate_tile(spec, tile_dir)
        config_path = tmp_path / "run.json"
        config_path.write_text(
            json.dumps(
                {
                    "tile_dir": str(tile_dir),
                    "out_dir": str(tmp_path / "out"),
                    "seed": 42,
                    "workers": 1,
                }
            )
        )
        start = time.monotonic()
        assert main(["run", str(config_path)]) == 0
        elapsed = time.monotonic() - start

        summary = json.loads((tmp_path / "out" / "summary.json").read_text())
        assert summary["n_scenes"] == 12
        assert summary["n_failed"] == 0
        evaluated = [s for s in summary["scenes"] if not s["skipped"]]
        assert evaluated, "every scene was skipped"
        for entry in evaluated:
            assert entry["accuracy"] >= 0.95, entry
        assert summary["average_accuracy"] >= 0.97
        assert elapsed < 60.0, f"single-worker run took {elapsed:.1f} s"
        print(
            f"  scenes={len(evaluated)} min={min(e['accuracy'] for e in evaluated):.4f} "
            f"avg={summary['average_accuracy']:.4f} runtime={elapsed:.1f}s",
            end="",
        )


def test_split_search_matches_exhaustive_oracle():
    """best_split == brute-force enumeration on 1000 instances, exactly."""
    with criterion("split-search oracle (1000 instances)"):
        rng = np.random.RandomState(424242)
        for trial in range(1000):
            X, y, subset = random_instance(rng, quantized=trial % 10 < 7)
            got = best_split(X, y, subset)
            want = oracle_best_split(X, y, subset)
            if want is None:
                assert got is None
            else:
                assert got is not None
                assert (got.feature, got.threshold, got.decrease) == want, trial


def test_resampling_oracles():
    """Nearest == center-mapping brute force (200 grids); bilinear examples."""
    with criterion("resampling oracles"):
        rng = np.random.RandomState(31415)
        for _ in range(200):
            sw, sh = rng.randint(1, 17), rng.randint(1, 17)
            tw, th = rng.randint(1, 17), rng.randint(1, 17)
            spx = float(rng.choice([0.5, 1.0, 2.5, 10.0, 20.0, 30.0]))
            tpx = float(rng.choice([0.5, 1.0, 2.5, 10.0, 20.0, 30.0]))
            sox, soy = rng.uniform(-100, 100), rng.uniform(-100, 100)
            src = RasterGrid(
                GridSpec(sw, sh, sox, soy, spx),
                rng.randint(0, 256, size=(sh, sw)).astype(np.uint8),
            )
            target = GridSpec(
                tw,
                th,
                sox + rng.uniform(-0.5, 0.5) * sw * spx,
                soy - rng.uniform(-0.5, 0.5) * sh * spx,
                tpx,
            )
            out = resample_nearest(src, target)
            assert (out.values == oracle_nearest(src, target)).all()

        src = RasterGrid(
            GridSpec(2, 2, 0.0, 40.0, 20.0),
            np.array([[0.0, 2.0], [4.0, 6.0]], dtype=np.float32),
        )
        out = resample_bilinear(src, GridSpec(4, 4, 0.0, 40.0, 10.0))
        assert abs(float(out.values[1, 1]) - 1.5) <= 1e-6

        const = RasterGrid(
            GridSpec(3, 3, 0.0, 60.0, 20.0), np.full((3, 3), 5.0, dtype=np.float32)
        )
        out = resample_bilinear(const, GridSpec(9, 7, 1.0, 58.0, 6.5))
        assert (out.values == np.float32(5.0)).all()


def test_probability_normalization():
    """predict_proba and ScenePrediction pixels sum to 1 within 1e-6."""
    with criterion("probability normalization"):
        rng = np.random.RandomState(8675309)
        from test_forest import tiny_scene

        worst = 0.0
        for _ in range(30):
            n = int(rng.randint(10, 80))
            X = rng.rand(n, 10).astype(np.float32)
            y = rng.randint(0, 8, n)
            model = train_forest(
                X, y, ForestParams(n_trees=int(rng.randint(1, 8))), seed=int(rng.randint(1 << 30))
            )
            queries = rng.rand(32, 10).astype(np.float32) * 2 - 0.5
            probs = predict_proba(model, queries)
            assert np.all(probs >= 0)
            worst = max(worst, float(np.abs(probs.sum(axis=1) - 1.0).max()))
        assert worst <= 1e-6

        X = rng.rand(50, 10).astype(np.float32)
        y = rng.randint(0, 8, 50)
        model = train_forest(X, y, ForestParams(n_trees=5), seed=77)
        scene = tiny_scene(rng.choice([4, 5, 6, 9, 0], size=(16, 16)).astype(np.uint8))
        pred = predict_raster(model, scene)
        stack = np.stack([p.values for p in pred.probabilities])
        usable = pred.usable
        assert usable.any()
        assert float(np.abs(stack.sum(axis=0)[usable] - 1.0).max()) <= 1e-6


def test_determinism_workers_and_splitmix(tmp_path):
    """Workers 1 vs 4 byte-identical; splitmix64 matches reference vectors."""
    with criterion("determinism (workers, splitmix64)"):
        assert Rng64(0).next_u64() == 0xE220A8397B1DCDAF

        def independent_splitmix(seed, count):
            out, state = [], seed % 2**64
            for _ in range(count):
                state = (state + 0x9E3779B97F4A7C15) % 2**64
                z = state
                z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) % 2**64
                z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) % 2**64
                out.append((z ^ (z >> 31)) % 2**64)
            return out

        for seed in (0, 1, 42, 2**63):
            rng = Rng64(seed)
            assert [rng.next_u64() for _ in range(64)] == independent_splitmix(seed, 64)

        tile_dir = tmp_path / "tile"
        generate_tile(small_spec(n_scenes=2), tile_dir)
        for workers, out_name in ((1, "o1"), (4, "o4")):
            config_path = tmp_path / f"run{workers}.json"
            config_path.write_text(
                json.dumps(
                    {
                        "tile_dir": str(tile_dir),
                        "out_dir": str(tmp_path / out_name),
                        "seed": 7,
                        "workers": workers,
                    }
                )
            )
            assert main(["run", str(config_path)]) == 0
        for rel in (
            "summary.json",
            "scene_000/classes.rbin",
            "scene_000/model.rfm",
            "scene_001/classes.rbin",
            "scene_001/model.rfm",
        ):
            assert (tmp_path / "o1" / rel).read_bytes() == (
                tmp_path / "o4" / rel
            ).read_bytes(), rel


def test_filtering_contracts():
    """filter_labels never invents classes; row removal is monotone."""
    with criterion("filtering contracts"):
        rng = np.random.RandomState(1312)

        def random_label_grid(h, w):
            vals = rng.choice(
                list(TRAINABLE_CLASSES) + [UNCLASSIFIED], size=(h, w)
            ).astype(np.uint8)
            return RasterGrid(GridSpec(w, h, 0.0, h * 10.0, 10.0), vals, nodata=UNCLASSIFIED)

        def random_scl_grid(h, w):
            vals = rng.randint(0, 12, size=(h, w)).astype(np.uint8)
            return RasterGrid(GridSpec(w, h, 0.0, h * 10.0, 10.0), vals)

        for _ in range(200):
            h, w = int(rng.randint(1, 10)), int(rng.randint(1, 10))
            labels, scl = random_label_grid(h, w), random_scl_grid(h, w)
            out = filter_labels(labels, scl)
            kept = out.values != UNCLASSIFIED
            assert (out.values[kept] == labels.values[kept]).all()
            assert np.isin(out.values, list(TRAINABLE_CLASSES) + [UNCLASSIFIED]).all()

        labels, scl = random_label_grid(16, 16), random_scl_grid(16, 16)
        for _ in range(50):
            compat = {
                c: frozenset(
                    int(s) for s in rng.choice(12, size=rng.randint(0, 6), replace=False)
                )
                for c in TRAINABLE_CLASSES
            }
            base = TaxonomyTables(compat=compat)
            base_count = int((filter_labels(labels, scl, base).values != UNCLASSIFIED).sum())
            for cls in TRAINABLE_CLASSES:
                reduced_map = dict(compat)
                reduced_map[cls] = frozenset()
                reduced = TaxonomyTables(compat=reduced_map)
                count = int(
                    (filter_labels(labels, scl, reduced).values != UNCLASSIFIED).sum()
                )
                assert count <= base_count


def test_cloud_gate(tmp_path):
    """Cloud fraction 0.95 skips the scene; 0.85 processes it."""
    with criterion("cloud gate (strict < 0.90)"):
        for target, expect_skip in ((0.95, True), (0.85, False)):
            spec = small_spec(cloud_fraction=target, n_scenes=1, master_seed=99)
            tile_dir = tmp_path / f"tile{int(target * 100)}"
            manifests = generate_tile(spec, tile_dir)
            config = RunConfig(out_dir=tmp_path / f"out{int(target * 100)}", seed=99)
            result = run_scene(manifests[0], tile_dir / "gl30.rbin", config)
            assert result.skipped is expect_skip, (target, result.cloud_fraction)
            if expect_skip:
                assert result.skip_reason == "cloud"
            else:
                assert result.accuracy is not None


def test_aggregation_contracts():
    """Permutation-invariant byte-identical aggregation; single-scene identity."""
    with criterion("aggregation (permutation, single-scene)"):
        rng = np.random.RandomState(271828)
        preds = []
        for i in range(5):
            probs = (
                rng.dirichlet(np.ones(8), size=(6, 7)).transpose(2, 0, 1).astype(np.float32)
            )
            usable = rng.rand(6, 7) > 0.3
            preds.append(
                make_prediction(f"s{i}", f"2017-{7 + i:02d}-01T00:00:00Z", probs, usable)
            )

        def fingerprint(annual):
            parts = [
                encode_rbin(annual.class_plane),
                encode_rbin(annual.count),
                encode_rbin(annual.confidence),
            ]
            parts += [encode_rbin(p) for p in annual.prob_sums]
            return hashlib.sha256(b"".join(parts)).hexdigest()

        want = fingerprint(aggregate(list(preds)))
        for trial in range(20):
            order = list(preds)
            np.random.RandomState(trial).shuffle(order)
            assert fingerprint(aggregate(order)) == want, trial

        single = aggregate([preds[0]])
        usable = preds[0].usable
        assert (
            single.class_plane.values[usable] == preds[0].class_plane.values[usable]
        ).all()
        assert (single.class_plane.values[~usable] == UNCLASSIFIED).all()


def test_format_stability(tmp_path):
    """Golden RBIN/RFM files re-read bit-exactly; header layout byte-checked."""
    with criterion("format stability (golden files)"):
        import pathlib

        golden = pathlib.Path(__file__).parent / "golden"
        rbin_blob = (golden / "grid.rbin").read_bytes()
        assert hashlib.sha256(rbin_blob).hexdigest() == GOLDEN_RBIN_SHA

        assert rbin_blob[0:4] == b"RBN1"
        assert rbin_blob[4] == 2  # dtype code: i16
        assert rbin_blob[5] == 1  # nodata present
        assert rbin_blob[6:8] == b"\x00\x00"
        assert struct.unpack_from("<I", rbin_blob, 8)[0] == 3  # width
        assert struct.unpack_from("<I", rbin_blob, 12)[0] == 2  # height
        assert struct.unpack_from("<d", rbin_blob, 16)[0] == -30.0
        assert struct.unpack_from("<d", rbin_blob, 24)[0] == 40.0
        assert struct.unpack_from("<d", rbin_blob, 32)[0] == 20.0
        assert struct.unpack_from("<d", rbin_blob, 40)[0] == -99.0
        assert rbin_blob[48:64] == bytes(16)
        assert len(rbin_blob) == 64 + 3 * 2 * 2

        grid = decode_rbin(rbin_blob)
        assert grid.values.tolist() == [[-5, 0, 7], [32000, -99, 12]]
        assert grid.nodata == -99
        assert encode_rbin(grid) == rbin_blob
        roundtrip = tmp_path / "copy.rbin"
        roundtrip.write_bytes(encode_rbin(grid))
        assert read_rbin(roundtrip) == grid

        from terralabel.forest import decode_rfm, encode_rfm

        rfm_blob = (golden / "model.rfm").read_bytes()
        assert hashlib.sha256(rfm_blob).hexdigest() == GOLDEN_RFM_SHA
        assert rfm_blob[0:4] == b"RFM1"
        assert struct.unpack_from("<i", rfm_blob, 4)[0] == 3  # max_depth
        assert struct.unpack_from("<I", rfm_blob, 8)[0] == 2  # min_samples_split
        assert struct.unpack_from("<I", rfm_blob, 12)[0] == 3  # features_per_split
        assert rfm_blob[16] == 1  # bootstrap
        assert rfm_blob[17] == 8  # n_classes
        assert tuple(rfm_blob[18:26]) == TRAINABLE_CLASSES

        model = decode_rfm(rfm_blob)
        assert model.scene_id == "golden"
        assert model.params.n_trees == 2
        assert encode_rfm(model) == rfm_blob
