import logging
from pathlib import Path

import cv2
import numpy as np
import pytest

from lesionseg.dataset import (
    DatasetIndex,
    ISIC2016,
    Layout,
    load_sample,
    load_split,
    save_split,
    scan_dataset,
    split_train_val,
)
from lesionseg.errors import (
    DecodeError,
    EmptyDataset,
    InvalidFraction,
    MissingMask,
)
from conftest import write_pair


def dummy_index(n):
    records = [(Path(f"ISIC_{i:07d}.jpg"), Path(f"ISIC_{i:07d}_Segmentation.png"))
               for i in range(n)]
    return DatasetIndex(records=records)


class TestScan:
    def test_pairs_every_image(self, isic_root):
        index = scan_dataset(isic_root)
        assert len(index) == 8
        for img, mask in index.records:
            assert img.exists() and mask.exists()
            assert mask.name == img.stem + "_Segmentation.png"

    def test_records_sorted_by_image_name(self, isic_root):
        index = scan_dataset(isic_root)
        names = [img.name for img, _ in index.records]
        assert names == sorted(names)

    def test_empty_directory(self, tmp_path):
        with pytest.raises(EmptyDataset):
            scan_dataset(tmp_path)

    def test_missing_mask_reported_by_name(self, tmp_path):
        rng = np.random.default_rng(1)
        write_pair(tmp_path, "ISIC_0000001", 64, 64, rng)
        write_pair(tmp_path, "ISIC_0000002", 64, 64, rng)
        (tmp_path / "masks" / "ISIC_0000002_Segmentation.png").unlink()
        with pytest.raises(MissingMask) as exc:
            scan_dataset(tmp_path)
        assert "ISIC_0000002.jpg" in str(exc.value)

    def test_custom_layout(self, tmp_path):
        (tmp_path / "a.png").write_bytes(b"")
        img = np.zeros((8, 8, 3), dtype=np.uint8)
        cv2.imwrite(str(tmp_path / "x.jpeg"), img)
        cv2.imwrite(str(tmp_path / "x_mask.png"), img[..., 0])
        layout = Layout(image_glob="*.jpeg", mask_suffix="_mask.png")
        assert len(scan_dataset(tmp_path, layout)) == 1


class TestSplit:
    def test_official_sizes(self):
        train, val = split_train_val(dummy_index(900), 0.2, seed=1)
        assert (len(train), len(val)) == (720, 180)
        assert train.split_tag == "train" and val.split_tag == "val"

    def test_partition_disjoint_and_exhaustive(self):
        index = dummy_index(37)
        train, val = split_train_val(index, 0.2, seed=3)
        train_ids, val_ids = set(train.ids()), set(val.ids())
        assert not train_ids & val_ids
        assert train_ids | val_ids == set(index.ids())

    def test_deterministic_given_seed(self):
        a = split_train_val(dummy_index(10), 0.2, seed=5)
        b = split_train_val(dummy_index(10), 0.2, seed=5)
        assert a[0].ids() == b[0].ids() and a[1].ids() == b[1].ids()

    def test_different_seeds_differ(self):
        # Enumerate both partitions; seeds 1 and 2 pick different val sets.
        _, val1 = split_train_val(dummy_index(10), 0.2, seed=1)
        _, val2 = split_train_val(dummy_index(10), 0.2, seed=2)
        assert set(val1.ids()) != set(val2.ids())

    @pytest.mark.parametrize("fraction", [0.0, 1.0, -0.1, 1.7])
    def test_invalid_fraction(self, fraction):
        with pytest.raises(InvalidFraction):
            split_train_val(dummy_index(10), fraction, seed=1)

    def test_empty_index(self):
        with pytest.raises(EmptyDataset):
            split_train_val(dummy_index(0), 0.2, seed=1)

    def test_tiny_index_keeps_both_sides_nonempty(self):
        train, val = split_train_val(dummy_index(3), 0.2, seed=1)
        assert len(train) >= 1 and len(val) >= 1
        assert len(train) + len(val) == 3


class TestLoadSample:
    def test_shapes_and_ranges(self, isic_root):
        index = scan_dataset(isic_root)
        sample = load_sample(index.records[0])
        assert sample.image.shape == (256, 256, 3)
        assert sample.mask.shape == (256, 256)
        assert sample.image.dtype == np.float32
        assert 0.0 <= sample.image.min() and sample.image.max() <= 1.0
        assert set(np.unique(sample.mask)) <= {0.0, 1.0}
        assert sample.id == index.records[0][0].stem

    def test_custom_target_size(self, isic_root):
        index = scan_dataset(isic_root)
        sample = load_sample(index.records[1], target_size=(64, 48))
        assert sample.image.shape == (64, 48, 3)
        assert sample.mask.shape == (64, 48)

    def test_deterministic(self, isic_root):
        record = scan_dataset(isic_root).records[2]
        a, b = load_sample(record), load_sample(record)
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.mask, b.mask)

    def test_all_white_mask_is_all_ones(self, tmp_path):
        img = np.zeros((32, 32, 3), dtype=np.uint8)
        cv2.imwrite(str(tmp_path / "ISIC_1.jpg"), img)
        cv2.imwrite(str(tmp_path / "ISIC_1_Segmentation.png"),
                    np.full((32, 32), 255, dtype=np.uint8))
        sample = load_sample((tmp_path / "ISIC_1.jpg",
                              tmp_path / "ISIC_1_Segmentation.png"))
        assert (sample.mask == 1.0).all()

    def test_threshold_matches_per_pixel_oracle(self, tmp_path):
        # Gray levels straddling the midpoint, written at target size so
        # nearest-neighbor resize is the identity.
        gray = np.zeros((256, 256), dtype=np.uint8)
        gray[:, :80] = 126
        gray[:, 80:160] = 127
        gray[:, 160:] = 128
        img = np.zeros((256, 256, 3), dtype=np.uint8)
        cv2.imwrite(str(tmp_path / "ISIC_2.jpg"), img)
        cv2.imwrite(str(tmp_path / "ISIC_2_Segmentation.png"), gray)
        sample = load_sample((tmp_path / "ISIC_2.jpg",
                              tmp_path / "ISIC_2_Segmentation.png"))
        oracle = np.zeros((256, 256), dtype=np.float32)
        for lo, hi, val in ((0, 80, 126), (80, 160, 127), (160, 256, 128)):
            oracle[:, lo:hi] = 1.0 if val > 127 else 0.0
        assert np.array_equal(sample.mask, oracle)

    def test_unreadable_image_raises(self, tmp_path):
        (tmp_path / "bad.jpg").write_bytes(b"not a jpeg")
        cv2.imwrite(str(tmp_path / "m.png"), np.zeros((8, 8), dtype=np.uint8))
        with pytest.raises(DecodeError):
            load_sample((tmp_path / "bad.jpg", tmp_path / "m.png"))

    def test_unreadable_mask_raises(self, tmp_path):
        cv2.imwrite(str(tmp_path / "ok.jpg"), np.zeros((8, 8, 3), dtype=np.uint8))
        (tmp_path / "bad.png").write_bytes(b"junk")
        with pytest.raises(DecodeError):
            load_sample((tmp_path / "ok.jpg", tmp_path / "bad.png"))

    def test_native_size_disagreement_logged_and_recovered(self, tmp_path, caplog):
        cv2.imwrite(str(tmp_path / "ISIC_3.jpg"),
                    np.zeros((64, 64, 3), dtype=np.uint8))
        cv2.imwrite(str(tmp_path / "ISIC_3_Segmentation.png"),
                    np.full((32, 48), 255, dtype=np.uint8))
        with caplog.at_level(logging.WARNING, logger="lesionseg.dataset"):
            sample = load_sample((tmp_path / "ISIC_3.jpg",
                                  tmp_path / "ISIC_3_Segmentation.png"))
        assert "disagree" in caplog.text
        assert sample.image.shape == (256, 256, 3)
        assert sample.mask.shape == (256, 256)


class TestSplitManifest:
    def test_round_trip(self, isic_root, tmp_path):
        index = scan_dataset(isic_root)
        train, val = split_train_val(index, 0.25, seed=9)
        path = save_split(tmp_path / "split.json", train, val,
                          seed=9, val_fraction=0.25)
        train2, val2 = load_split(path, index)
        assert train2.ids() == train.ids()
        assert val2.ids() == val.ids()
        assert train2.split_tag == "train" and val2.split_tag == "val"

    def test_manifest_records_parameters(self, isic_root, tmp_path):
        import json
        index = scan_dataset(isic_root)
        train, val = split_train_val(index, 0.25, seed=9)
        path = save_split(tmp_path / "split.json", train, val,
                          seed=9, val_fraction=0.25)
        manifest = json.loads(path.read_text())
        assert manifest["seed"] == 9
        assert manifest["val_fraction"] == 0.25

    def test_unknown_id_rejected(self, isic_root):
        index = scan_dataset(isic_root)
        with pytest.raises(KeyError):
            index.subset(["ISIC_9999999"], "train")
