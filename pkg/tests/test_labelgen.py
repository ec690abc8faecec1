"""Label filtering, validity, block sampling, and the stratified split."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from terralabel.errors import AlignmentError, MappingError
from terralabel.labelgen import (
    block_modal_labels,
    build_validity_mask,
    filter_labels,
    map_gl30_raster,
    pick_block_candidates,
    scene_cloud_fraction,
    stratified_split,
)
from terralabel.raster import FEATURE_BANDS, GridSpec, RasterGrid, Scene
from terralabel.rng import Rng64, stream_seed
from terralabel.taxonomy import TRAINABLE_CLASSES, UNCLASSIFIED, TaxonomyTables

UNC = UNCLASSIFIED


def u8_grid(values, pixel_size=10.0, nodata=None):
    arr = np.asarray(values, dtype=np.uint8)
    h, w = arr.shape
    return RasterGrid(GridSpec(w, h, 0.0, h * pixel_size, pixel_size), arr, nodata=nodata)


def make_scene(h=6, w=6, band_value=0.3, scl=4, cloud=0, band_nodata=None):
    spec = GridSpec(w, h, 0.0, h * 10.0, 10.0)
    bands = tuple(
        RasterGrid(
            spec,
            np.full((h, w), band_value, dtype=np.float32),
            nodata=band_nodata,
        )
        for _ in FEATURE_BANDS
    )
    scl_grid = RasterGrid(spec, np.full((h, w), scl, dtype=np.uint8))
    cloud_grid = RasterGrid(spec, np.full((h, w), cloud, dtype=np.uint8))
    return Scene("s0", "2017-07-01T00:00:00Z", bands, scl_grid, cloud_grid)


class TestSceneCloudFraction:
    def test_clear(self):
        assert scene_cloud_fraction(u8_grid(np.zeros((4, 4)))) == 0.0

    def test_overcast(self):
        assert scene_cloud_fraction(u8_grid(np.full((4, 4), 100))) == 1.0

    def test_half(self):
        vals = np.zeros((2, 4), dtype=np.uint8)
        vals[1] = 100
        assert scene_cloud_fraction(u8_grid(vals)) == 0.5

    def test_nodata_ignored(self):
        vals = np.array([[100, 255], [100, 255]], dtype=np.uint8)
        assert scene_cloud_fraction(u8_grid(vals, nodata=255)) == 1.0

    def test_all_nodata_is_an_error(self):
        with pytest.raises(ValueError):
            scene_cloud_fraction(u8_grid(np.full((2, 2), 255), nodata=255))

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            scene_cloud_fraction(u8_grid(np.full((2, 2), 101)))


class TestMapGl30Raster:
    def test_maps_codes(self):
        out = map_gl30_raster(u8_grid([[60, 100], [10, 90]], pixel_size=30.0))
        assert out.values.tolist() == [[0, 1], [5, 6]]

    def test_nodata_becomes_unclassified(self):
        out = map_gl30_raster(u8_grid([[60, 0]], pixel_size=30.0, nodata=0))
        assert out.values.tolist() == [[0, UNC]]
        assert out.nodata == UNC

    def test_unknown_code_raises(self):
        with pytest.raises(MappingError):
            map_gl30_raster(u8_grid([[60, 42]], pixel_size=30.0))


class TestFilterLabels:
    def test_compatible_pairs_kept(self):
        labels = u8_grid([[0, 5]])
        scl = u8_grid([[6, 4]])
        out = filter_labels(labels, scl)
        assert out.values.tolist() == [[0, 5]]

    def test_disagreement_removed(self):
        out = filter_labels(u8_grid([[0]]), u8_grid([[4]]))
        assert out.values.tolist() == [[UNC]]

    def test_unclassified_stays(self):
        out = filter_labels(u8_grid([[UNC]]), u8_grid([[6]]))
        assert out.values.tolist() == [[UNC]]

    def test_alignment_checked(self):
        with pytest.raises(AlignmentError):
            filter_labels(u8_grid([[0]]), u8_grid([[6, 6]]))

    def test_rejects_non_class_codes(self):
        with pytest.raises(MappingError):
            filter_labels(u8_grid([[9]]), u8_grid([[6]]))
        with pytest.raises(MappingError):
            filter_labels(u8_grid([[0]]), u8_grid([[13]]))

    @settings(max_examples=60, deadline=None)
    @given(st.data())
    def test_never_invents_a_class(self, data):
        h = data.draw(st.integers(1, 6))
        w = data.draw(st.integers(1, 6))
        lab = data.draw(
            st.lists(
                st.sampled_from(list(TRAINABLE_CLASSES) + [UNC]),
                min_size=h * w,
                max_size=h * w,
            )
        )
        scl = data.draw(st.lists(st.integers(0, 11), min_size=h * w, max_size=h * w))
        labels = u8_grid(np.array(lab, dtype=np.uint8).reshape(h, w))
        scl_grid = u8_grid(np.array(scl, dtype=np.uint8).reshape(h, w))
        out = filter_labels(labels, scl_grid)
        changed = out.values != labels.values
        assert np.isin(out.values[changed], [UNC]).all()
        kept = out.values != UNC
        assert (out.values[kept] == labels.values[kept]).all()

    def test_shrinking_compat_is_monotone(self):
        rng = np.random.RandomState(5)
        labels = u8_grid(
            rng.choice(list(TRAINABLE_CLASSES) + [UNC], size=(12, 12)).astype(np.uint8)
        )
        scl = u8_grid(rng.randint(0, 12, size=(12, 12)).astype(np.uint8))
        for _ in range(50):
            compat = {
                c: frozenset(
                    int(s) for s in rng.choice(12, size=rng.randint(0, 5), replace=False)
                )
                for c in TRAINABLE_CLASSES
            }
            full = TaxonomyTables(compat=compat)
            base_count = int((filter_labels(labels, scl, full).values != UNC).sum())
            for cls in TRAINABLE_CLASSES:
                shrunk_map = dict(compat)
                shrunk_map[cls] = frozenset()
                shrunk = TaxonomyTables(compat=shrunk_map)
                count = int((filter_labels(labels, scl, shrunk).values != UNC).sum())
                assert count <= base_count


class TestValidityMask:
    def test_all_conditions_met(self):
        scene = make_scene(band_value=0.3, scl=4, cloud=0)
        assert build_validity_mask(scene).all()

    def test_nodata_band_invalid(self):
        scene = make_scene(band_value=0.0, band_nodata=0.0)
        assert not build_validity_mask(scene).any()

    def test_nonpositive_reflectance_invalid(self):
        scene = make_scene(band_value=0.0)
        assert not build_validity_mask(scene).any()

    def test_cloud_scl_invalid(self):
        scene = make_scene(scl=9)
        assert not build_validity_mask(scene).any()

    def test_dark_area_excluded_from_training(self):
        # SCL 2 is usable for prediction but not valid for training
        scene = make_scene(scl=2)
        assert not build_validity_mask(scene).any()

    def test_high_cloud_confidence_invalid(self):
        scene = make_scene(cloud=50)
        assert not build_validity_mask(scene).any()
        scene = make_scene(cloud=49)
        assert build_validity_mask(scene).all()


def oracle_block_pick(labels, valid, seed):
    """Scalar re-statement of the block-candidate contract."""
    h, w = labels.shape
    wb = w // 3
    out = []
    for bR in range(h // 3):
        for bC in range(wb):
            cells = [
                (labels[bR * 3 + i, bC * 3 + j], valid[bR * 3 + i, bC * 3 + j],
                 bR * 3 + i, bC * 3 + j)
                for i in range(3)
                for j in range(3)
            ]
            best_cls, best_cnt = None, 0
            for cls in TRAINABLE_CLASSES:
                cnt = sum(1 for lab, *_ in cells if lab == cls)
                if cnt > best_cnt:
                    best_cls, best_cnt = cls, cnt
            n_unc = sum(1 for lab, *_ in cells if lab == UNC)
            if best_cnt == 0 or n_unc > best_cnt:
                continue
            eligible = [(r, c) for lab, ok, r, c in cells if ok and lab == best_cls]
            if not eligible:
                continue
            rng = Rng64(stream_seed(seed, "BLOCK_PICK", bR * wb + bC))
            r, c = eligible[rng.randbelow(len(eligible))]
            out.append((r, c, best_cls))
    return out


class TestPickBlockCandidates:
    def test_no_valid_pixels_no_candidate(self):
        labels = u8_grid(np.full((3, 3), 0))
        valid = np.zeros((3, 3), dtype=bool)
        assert pick_block_candidates(labels, valid, 1) == []

    def test_unclassified_majority_block_skipped(self):
        vals = np.full((3, 3), UNC, dtype=np.uint8)
        vals[0, 0] = 4
        assert pick_block_candidates(u8_grid(vals), np.ones((3, 3), bool), 1) == []

    def test_single_eligible_pixel_forced(self):
        vals = np.full((3, 3), 3, dtype=np.uint8)
        valid = np.zeros((3, 3), dtype=bool)
        valid[2, 1] = True
        assert pick_block_candidates(u8_grid(vals), valid, 99) == [(2, 1, 3)]

    def test_deterministic_under_reruns(self):
        rng = np.random.RandomState(0)
        labels = u8_grid(rng.choice([0, 2, 4, UNC], size=(12, 12)).astype(np.uint8))
        valid = rng.rand(12, 12) > 0.3
        first = pick_block_candidates(labels, valid, 31337)
        for _ in range(3):
            assert pick_block_candidates(labels, valid, 31337) == first

    def test_matches_scalar_oracle(self):
        rng = np.random.RandomState(17)
        for trial in range(20):
            labels = u8_grid(
                rng.choice(
                    list(TRAINABLE_CLASSES) + [UNC], size=(15, 9)
                ).astype(np.uint8)
            )
            valid = rng.rand(15, 9) > 0.4
            got = pick_block_candidates(labels, valid, 1000 + trial)
            assert got == oracle_block_pick(labels.values, valid, 1000 + trial)

    def test_output_ordered_by_block(self):
        labels = u8_grid(np.full((9, 9), 5))
        valid = np.ones((9, 9), dtype=bool)
        cands = pick_block_candidates(labels, valid, 5)
        blocks = [(r // 3, c // 3) for r, c, _ in cands]
        assert blocks == sorted(blocks)
        assert len(cands) == 9

    def test_requires_block_alignment(self):
        with pytest.raises(ValueError):
            pick_block_candidates(u8_grid(np.zeros((4, 3))), np.ones((4, 3), bool), 0)


def feature_stack(h, w, seed=0):
    return np.random.RandomState(seed).rand(h, w, 10).astype(np.float32)


class TestStratifiedSplit:
    def test_two_candidates_split_evenly(self):
        cands = [(0, 0, 3), (0, 3, 3)]
        ss = stratified_split(cands, feature_stack(3, 6), seed=1)
        assert int(ss.train_mask.sum()) == 1
        assert int((~ss.train_mask).sum()) == 1

    def test_single_candidate_goes_to_train(self):
        ss = stratified_split([(1, 1, 5)], feature_stack(3, 3), seed=1)
        assert ss.train_mask.tolist() == [True]
        assert ss.labels.tolist() == [5]

    def test_hundred_candidates_split_50_50(self):
        cands = [(r * 3, c * 3, 2) for r in range(10) for c in range(10)]
        ss = stratified_split(cands, feature_stack(30, 30), seed=2)
        assert int(ss.train_mask.sum()) == 50
        assert int((~ss.train_mask).sum()) == 50

    def test_per_class_balance_within_one(self):
        rng = np.random.RandomState(3)
        cands = [
            (int(r), int(c), int(k))
            for r, c, k in zip(
                rng.choice(30, 60), rng.choice(30, 60), rng.choice(8, 60)
            )
        ]
        # dedupe blocks: keep unique (r, c)
        seen, unique = set(), []
        for r, c, k in cands:
            if (r, c) not in seen:
                seen.add((r, c))
                unique.append((r, c, k))
        ss = stratified_split(unique, feature_stack(30, 30), seed=4)
        for cls, (n_train, n_test) in ss.class_counts().items():
            assert abs(n_train - n_test) <= 1
            assert n_train >= n_test

    def test_features_gathered_from_stack(self):
        stack = feature_stack(6, 6, seed=9)
        cands = [(2, 4, 1), (5, 0, 1)]
        ss = stratified_split(cands, stack, seed=7)
        for i in range(len(ss)):
            assert (ss.features[i] == stack[ss.rows[i], ss.cols[i]]).all()

    def test_empty_candidates_rejected(self):
        with pytest.raises(ValueError):
            stratified_split([], feature_stack(3, 3), seed=0)

    def test_byte_identical_determinism(self, tmp_path):
        rng = np.random.RandomState(8)
        stack = feature_stack(30, 30, seed=8)
        cands = [(int(3 * (i // 10)), int(3 * (i % 10)), int(rng.choice(8))) for i in range(100)]
        a = stratified_split(cands, stack, seed=55)
        b = stratified_split(cands, stack, seed=55)
        for field in ("features", "labels", "train_mask", "rows", "cols"):
            assert np.array_equal(getattr(a, field), getattr(b, field))
        pa, pb = tmp_path / "a.csv", tmp_path / "b.csv"
        a.write_csv(pa)
        b.write_csv(pb)
        assert pa.read_bytes() == pb.read_bytes()

    def test_csv_shape(self, tmp_path):
        ss = stratified_split([(0, 0, 0), (0, 3, 0), (3, 0, 7)], feature_stack(6, 6), 1)
        path = tmp_path / "s.csv"
        ss.write_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0].split(",")[:4] == ["row", "col", "class", "split"]
        assert len(lines) == 4


class TestSampleSetInvariants:
    def test_full_pipeline_sample_invariants(self):
        rng = np.random.RandomState(21)
        labels = u8_grid(
            np.repeat(
                np.repeat(rng.choice(8, size=(8, 8)).astype(np.uint8), 3, axis=0),
                3,
                axis=1,
            )
        )
        valid = rng.rand(24, 24) > 0.2
        seed = 4242
        cands = pick_block_candidates(labels, valid, seed)
        ss = stratified_split(cands, feature_stack(24, 24, seed=2), seed)
        # each sample is valid and carries a trainable class
        for i in range(len(ss)):
            assert valid[ss.rows[i], ss.cols[i]]
            assert ss.labels[i] in TRAINABLE_CLASSES
        # no two samples share a 30 m block
        blocks = {(r // 3, c // 3) for r, c in zip(ss.rows, ss.cols)}
        assert len(blocks) == len(ss)


def test_block_modal_uniform_blocks():
    vals = np.repeat(np.repeat(np.array([[1, 2], [UNC, 7]], dtype=np.uint8), 3, 0), 3, 1)
    modal = block_modal_labels(u8_grid(vals))
    assert modal.tolist() == [[1, 2], [UNC, 7]]


def test_block_modal_majority_wins():
    vals = np.full((3, 3), 6, dtype=np.uint8)
    vals[0, :] = 2
    vals[1, :2] = 2  # 5 pixels of class 2, 4 of class 6
    assert block_modal_labels(u8_grid(vals)).tolist() == [[2]]


def test_block_modal_tie_goes_to_lowest_code():
    vals = np.full((3, 3), UNC, dtype=np.uint8)
    vals[0, :] = 5
    vals[1, 0] = 5  # 4 pixels of class 5
    vals[1, 1:] = 3
    vals[2, :2] = 3  # 4 pixels of class 3, 1 unclassified
    assert block_modal_labels(u8_grid(vals)).tolist() == [[3]]


def test_block_modal_class_beats_equal_unclassified():
    vals = np.full((3, 3), UNC, dtype=np.uint8)
    vals[0, :] = 7
    vals[1, 0] = 7  # 4 of class 7, 5 unclassified -> unclassified majority
    assert block_modal_labels(u8_grid(vals)).tolist() == [[UNC]]
    vals[1, 1] = 7  # 5 of class 7, 4 unclassified -> class wins
    assert block_modal_labels(u8_grid(vals)).tolist() == [[7]]
