"""Dataset manifest, splitting, fold, and synthetic-generation behavior."""

import hashlib
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from btunet.data import (
    DatasetManifest,
    SynthSpec,
    generate_synthetic,
    limit_labels,
    load_dataset,
    load_image,
    load_image_stack,
    load_mask,
    make_folds,
    split,
)
from btunet.errors import DataError


def write_png(path, arr):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr.astype(np.uint8), mode="L").save(path)


def tiny_dataset(root, n_images=10, n_masks=10, size=16):
    rng = np.random.default_rng(5)
    for i in range(n_images):
        write_png(root / "images" / f"img_{i:03d}.png", rng.integers(0, 255, (size, size)))
        if i < n_masks:
            mask = np.where(rng.random((size, size)) > 0.5, 255, 0)
            write_png(root / "masks" / f"img_{i:03d}.png", mask)
    return load_dataset(root)


class TestLoadDataset:
    def test_pairs_by_basename(self, tmp_path):
        m = tiny_dataset(tmp_path, 10, 10)
        assert len(m.records) == 10
        assert all(r.mask_path is not None for r in m.records)

    def test_missing_masks_are_absent(self, tmp_path):
        m = tiny_dataset(tmp_path, 10, 6)
        absent = [r for r in m.records if r.mask_path is None]
        assert len(absent) == 4

    def test_nonexistent_root_raises(self, tmp_path):
        with pytest.raises(DataError):
            load_dataset(tmp_path / "nope")

    def test_empty_image_dir_raises(self, tmp_path):
        (tmp_path / "images").mkdir(parents=True)
        with pytest.raises(DataError):
            load_dataset(tmp_path)

    def test_manifest_json_roundtrip(self, tmp_path):
        m = split(tiny_dataset(tmp_path), seed=3)
        out = tmp_path / "manifest.json"
        m.save(out)
        loaded = DatasetManifest.load(out)
        assert loaded.to_dict() == m.to_dict()


class TestSplit:
    def test_seventy_thirty(self, tmp_path):
        root = tmp_path / "d"
        for i in range(100):
            write_png(root / "images" / f"i{i:04d}.png", np.zeros((8, 8)))
        m = split(load_dataset(root), seed=1)
        assert len(m.train_records()) == 70
        assert len(m.test_records()) == 30

    def test_ten_records_split_seven_three(self, tmp_path):
        m = split(tiny_dataset(tmp_path), seed=2)
        assert len(m.train_records()) == 7
        assert len(m.test_records()) == 3

    def test_same_seed_same_split(self, tmp_path):
        base = tiny_dataset(tmp_path)
        a = split(base, seed=9)
        b = split(base, seed=9)
        assert [r.name for r in a.test_records()] == [r.name for r in b.test_records()]

    def test_different_seed_changes_split(self, tmp_path):
        base = tiny_dataset(tmp_path, 20, 20)
        a = {r.name for r in split(base, seed=1).test_records()}
        b = {r.name for r in split(base, seed=2).test_records()}
        assert a != b

    def test_test_records_disjoint_from_training_streams(self, tmp_path):
        m = make_folds(limit_labels(split(tiny_dataset(tmp_path), seed=4), 0.5, 4), 2, 4)
        test_names = {r.name for r in m.test_records()}
        assert not test_names & {r.name for r in m.pretrain_records()}
        assert not test_names & {r.name for r in m.labeled_records()}


class TestLimitLabels:
    def test_fraction_counts(self, tmp_path):
        root = tmp_path / "d"
        for i in range(100):
            write_png(root / "images" / f"i{i:04d}.png", np.zeros((8, 8)))
            write_png(root / "masks" / f"i{i:04d}.png", np.full((8, 8), 255))
        m = split(load_dataset(root), seed=0)
        assert len(limit_labels(m, 0.20, 1).labeled_records()) == 14
        assert len(limit_labels(m, 0.10, 1).labeled_records()) == 7
        assert len(limit_labels(m, 1.0, 1).labeled_records()) == 70

    def test_nested_subsets_across_fractions(self, tmp_path):
        m = split(tiny_dataset(tmp_path, 20, 20), seed=0)
        small = {r.name for r in limit_labels(m, 0.3, seed=7).labeled_records()}
        large = {r.name for r in limit_labels(m, 0.8, seed=7).labeled_records()}
        assert small < large

    def test_only_masked_records_become_labeled(self, tmp_path):
        m = split(tiny_dataset(tmp_path, 10, 6), seed=1)
        limited = limit_labels(m, 0.3, seed=1)
        assert all(r.mask_path for r in limited.labeled_records())

    def test_bad_fraction_rejected(self, tmp_path):
        m = split(tiny_dataset(tmp_path), seed=1)
        for frac in (0.0, -0.1, 1.5):
            with pytest.raises(DataError):
                limit_labels(m, frac, 1)


class TestMakeFolds:
    def test_fold_sizes_differ_by_at_most_one(self, tmp_path):
        root = tmp_path / "d"
        for i in range(20):
            write_png(root / "images" / f"i{i:04d}.png", np.zeros((8, 8)))
            write_png(root / "masks" / f"i{i:04d}.png", np.full((8, 8), 255))
        m = limit_labels(split(load_dataset(root), seed=0), 1.0, 0)  # 14 labeled
        folded = make_folds(m, 5, seed=0)
        sizes = sorted(
            len([r for r in folded.labeled_records() if r.fold == f]) for f in range(5)
        )
        assert sizes == [2, 3, 3, 3, 3]

    def test_folds_partition_labeled_set(self, tmp_path):
        m = limit_labels(split(tiny_dataset(tmp_path), seed=2), 1.0, 2)
        folded = make_folds(m, 3, seed=2)
        labeled = folded.labeled_records()
        assert {r.fold for r in labeled} == {0, 1, 2}
        assert all(r.fold is None for r in folded.records if not r.labeled)

    def test_k_below_two_rejected(self, tmp_path):
        m = limit_labels(split(tiny_dataset(tmp_path), seed=1), 1.0, 1)
        with pytest.raises(DataError):
            make_folds(m, 1, seed=1)

    def test_k_exceeding_labeled_count_rejected(self, tmp_path):
        m = limit_labels(split(tiny_dataset(tmp_path), seed=1), 0.3, 1)  # 3 labeled
        with pytest.raises(DataError):
            make_folds(m, 4, seed=1)


class TestPixelLoading:
    def test_images_scaled_to_unit_interval(self, tmp_path):
        m = tiny_dataset(tmp_path, 3, 3, size=16)
        img = load_image(m.records[0], 16)
        assert img.shape == (16, 16, 1)
        assert img.dtype == np.float32
        assert 0.0 <= img.min() and img.max() <= 1.0

    def test_resize_keeps_masks_binary(self, tmp_path):
        m = tiny_dataset(tmp_path, 3, 3, size=16)
        for target in (8, 24, 32):
            mask = load_mask(m.records[0], target)
            assert mask.shape == (target, target, 1)
            assert np.isin(mask, (0.0, 1.0)).all()

    def test_stack_shapes(self, tmp_path):
        m = tiny_dataset(tmp_path, 4, 4, size=16)
        assert load_image_stack(m.records, 16).shape == (4, 16, 16, 1)

    def test_missing_mask_raises(self, tmp_path):
        m = tiny_dataset(tmp_path, 4, 2)
        no_mask = [r for r in m.records if r.mask_path is None][0]
        with pytest.raises(DataError):
            load_mask(no_mask, 16)


class TestSyntheticGeneration:
    def test_writes_count_pairs(self, tmp_path):
        m = generate_synthetic(SynthSpec(count=12, size=32, seed=1), tmp_path / "synth")
        assert len(m.records) == 12
        assert all(r.mask_path for r in m.records)

    def test_bitwise_deterministic(self, tmp_path):
        spec = SynthSpec(count=4, size=32, seed=9)
        generate_synthetic(spec, tmp_path / "a")
        generate_synthetic(spec, tmp_path / "b")
        for sub in ("images", "masks"):
            for pa in sorted((tmp_path / "a" / sub).iterdir()):
                pb = tmp_path / "b" / sub / pa.name
                ha = hashlib.sha256(pa.read_bytes()).hexdigest()
                hb = hashlib.sha256(pb.read_bytes()).hexdigest()
                assert ha == hb, pa.name

    def test_masks_nonempty_and_binary(self, tmp_path):
        m = generate_synthetic(SynthSpec(count=6, size=32, seed=3), tmp_path / "s")
        for r in m.records:
            mask = load_mask(r, 32)
            assert mask.sum() > 0
            assert np.isin(mask, (0.0, 1.0)).all()

    @pytest.mark.parametrize("family", ["ellipses", "blobs"])
    def test_noise_free_foreground_matches_mask_within_border(self, tmp_path, family):
        from scipy.ndimage import binary_dilation

        m = generate_synthetic(
            SynthSpec(count=4, size=48, noise=0.0, shape_family=family, seed=2),
            tmp_path / family,
        )
        eight = np.ones((3, 3), dtype=bool)
        for r in m.records:
            img = load_image(r, 48)[..., 0]
            mask = load_mask(r, 48)[..., 0].astype(bool)
            fg = img > 0.45  # generator keeps fg >= 0.6 and bg <= 0.2
            outer_ring = binary_dilation(mask, structure=eight) & ~mask
            inner_ring = mask & binary_dilation(~mask, structure=eight)
            disagree = fg ^ mask
            assert np.all(disagree <= (outer_ring | inner_ring)), r.name

    def test_invalid_spec_rejected(self):
        with pytest.raises(DataError):
            SynthSpec(count=0)
        with pytest.raises(DataError):
            SynthSpec(count=1, shape_family="squares")
