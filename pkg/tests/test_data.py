"""Loader, validation and split behaviour."""

import numpy as np
import pytest

from tdro.data import (Dataset, IntegrityError, ParseError,
                       chronological_split, load_dataset, write_features,
                       write_interactions)


def write_dataset(tmp_path, users, items, stamps, features):
    inter = tmp_path / "interactions.tsv"
    feats = tmp_path / "features.tsv"
    write_interactions(inter, users, items, stamps)
    write_features(feats, np.asarray(features, dtype=np.float64))
    return str(inter), str(feats)


@pytest.fixture
def tiny(tmp_path):
    # interactions deliberately unsorted by timestamp
    users = [0, 1, 0, 2, 1]
    items = [2, 0, 1, 2, 1]
    stamps = [50, 10, 30, 20, 30]
    features = np.arange(9.0).reshape(3, 3)
    return write_dataset(tmp_path, users, items, stamps, features)


def test_load_sorts_by_timestamp_stably(tiny):
    ds = load_dataset(*tiny)
    assert ds.timestamps.tolist() == [10, 20, 30, 30, 50]
    # the two stamp-30 rows keep their input order: (0,1) before (1,1)
    assert ds.users.tolist() == [1, 2, 0, 1, 0]
    assert ds.items.tolist() == [0, 2, 1, 1, 2]
    assert ds.num_users == 3
    assert ds.num_items == 3
    assert ds.d_feat == 3


def test_loaded_arrays_are_read_only(tiny):
    ds = load_dataset(*tiny)
    with pytest.raises(ValueError):
        ds.users[0] = 9
    with pytest.raises(ValueError):
        ds.features[0, 0] = 9.0


def test_interaction_missing_feature_row(tmp_path):
    paths = write_dataset(tmp_path, [0, 1], [0, 5], [1, 2],
                          np.ones((2, 3)))
    with pytest.raises(IntegrityError, match="item 5"):
        load_dataset(*paths)


def test_feature_ids_must_be_contiguous(tmp_path):
    inter = tmp_path / "i.tsv"
    feats = tmp_path / "f.tsv"
    write_interactions(inter, [0], [0], [1])
    with open(feats, "w") as fh:
        fh.write("0\t1.0,2.0\n")
        fh.write("2\t3.0,4.0\n")  # id 1 missing
    with pytest.raises(IntegrityError, match="1"):
        load_dataset(str(inter), str(feats))


def test_non_finite_feature_rejected(tmp_path):
    inter = tmp_path / "i.tsv"
    feats = tmp_path / "f.tsv"
    write_interactions(inter, [0], [0], [1])
    with open(feats, "w") as fh:
        fh.write("0\t1.0,nan\n")
    with pytest.raises(IntegrityError, match="item 0"):
        load_dataset(str(inter), str(feats))


def test_malformed_line_reports_path_and_line(tmp_path):
    inter = tmp_path / "i.tsv"
    feats = tmp_path / "f.tsv"
    with open(inter, "w") as fh:
        fh.write("0\t0\t1\n")
        fh.write("0\tnot_an_int\t2\n")
    write_features(feats, np.ones((1, 2)))
    with pytest.raises(ParseError) as err:
        load_dataset(str(inter), str(feats))
    assert f"{inter}:2:" in str(err.value)


def test_empty_dataset_rejected(tmp_path):
    inter = tmp_path / "i.tsv"
    feats = tmp_path / "f.tsv"
    inter.write_text("")
    write_features(feats, np.ones((1, 2)))
    with pytest.raises(IntegrityError, match="empty"):
        load_dataset(str(inter), str(feats))


def test_ragged_feature_rows_rejected(tmp_path):
    inter = tmp_path / "i.tsv"
    feats = tmp_path / "f.tsv"
    write_interactions(inter, [0], [0], [1])
    with open(feats, "w") as fh:
        fh.write("0\t1.0,2.0\n")
        fh.write("1\t1.0\n")
    with pytest.raises(ParseError, match="dimension"):
        load_dataset(str(inter), str(feats))


def test_feature_roundtrip_is_exact(tmp_path):
    rng = np.random.default_rng(0)
    feats = rng.normal(size=(7, 4))
    paths = write_dataset(tmp_path, [0], [3], [1], feats)
    ds = load_dataset(*paths)
    assert np.array_equal(ds.features, feats)


def make_dataset(n=100, num_users=10, num_items=20, seed=0):
    rng = np.random.default_rng(seed)
    users = rng.integers(num_users, size=n)
    items = rng.integers(num_items, size=n)
    stamps = np.arange(n, dtype=np.int64)
    feats = rng.normal(size=(num_items, 4))
    return Dataset(users=users, items=items, timestamps=stamps,
                   features=feats, num_users=num_users, num_items=num_items)


class TestChronologicalSplit:
    def test_sizes_floor_train_and_valid_remainder_to_test(self):
        ds = make_dataset(n=103)
        split = chronological_split(ds)
        # floor(103*0.8) = 82 train, floor(103*0.1) = 10 valid, rest test
        assert len(split.train_idx) == 82
        assert len(split.valid_idx) == 10
        assert len(split.test_idx) == 11

    def test_partition_is_exact_and_ordered(self):
        ds = make_dataset(n=100)
        split = chronological_split(ds)
        allidx = np.concatenate([split.train_idx, split.valid_idx,
                                 split.test_idx])
        assert sorted(allidx.tolist()) == list(range(100))
        # chronological: train indices all precede valid, valid precede test
        assert split.train_idx.max() < split.valid_idx.min()
        assert split.valid_idx.max() < split.test_idx.min()

    def test_warm_cold_partition(self):
        ds = make_dataset(n=200, num_items=30)
        split = chronological_split(ds)
        train_items = set(ds.items[split.train_idx].tolist())
        eval_items = set(ds.items[split.valid_idx].tolist()) | set(
            ds.items[split.test_idx].tolist())
        assert set(split.warm_items.tolist()) == train_items
        assert set(split.cold_items.tolist()) == eval_items - train_items
        assert not (set(split.cold_items.tolist()) & train_items)
        assert split.warm_mask.sum() == len(split.warm_items)

    def test_degenerate_split_rejected(self):
        ds = make_dataset(n=5)
        with pytest.raises(ValueError, match="degenerate"):
            chronological_split(ds, (0.98, 0.01, 0.01))

    def test_random_mode_differs_and_is_seeded(self):
        ds = make_dataset(n=100)
        a = chronological_split(ds, mode="random", seed=1)
        b = chronological_split(ds, mode="random", seed=1)
        c = chronological_split(ds, mode="random", seed=2)
        assert np.array_equal(a.train_idx, b.train_idx)
        assert not np.array_equal(a.train_idx, c.train_idx)
        # index arrays stay ascending even in random mode
        assert np.all(np.diff(a.train_idx) > 0)

    def test_ratios_must_sum_to_one(self):
        ds = make_dataset()
        with pytest.raises(ValueError):
            chronological_split(ds, (0.5, 0.2, 0.2))
