import dataclasses
import json

import numpy as np
import pytest

from affinity_cl.data import (GenConfig, SkeletonDataset,
                              chain_plus_limbs_adjacency, generate_synthetic,
                              load_dataset, planted_partition, split_dataset,
                              write_dataset)
from affinity_cl.errors import (MagicMismatchError, TruncatedPayloadError,
                                ValidationError)

TINY = GenConfig(class_count=4, superclass_count=2, joints=5, frames=8,
                 channels=2, samples_per_class=6, overlap=0.8, noise=0.3,
                 seed=7)


class TestChainPlusLimbs:
    @pytest.mark.parametrize("joints", [1, 2, 5, 17, 23])
    def test_symmetric_connected_tree(self, joints):
        a = chain_plus_limbs_adjacency(joints)
        assert a.shape == (joints, joints)
        np.testing.assert_array_equal(a, a.T)
        assert np.all(np.diag(a) == 0)
        if joints > 1:
            # a tree on n nodes has n - 1 edges and is connected
            assert a.sum() == 2 * (joints - 1)
            reach = np.linalg.matrix_power(a + np.eye(joints), joints) > 0
            assert reach.all()


class TestGenerate:
    def test_same_seed_is_bit_identical(self):
        a = generate_synthetic(TINY)
        b = generate_synthetic(TINY)
        np.testing.assert_array_equal(a.samples, b.samples)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_different_seed_differs(self):
        a = generate_synthetic(TINY)
        b = generate_synthetic(dataclasses.replace(TINY, seed=8))
        assert not np.array_equal(a.samples, b.samples)

    def test_shapes_and_planted_partition(self):
        ds = generate_synthetic(TINY)
        assert ds.samples.shape == (24, 2, 8, 5)
        assert ds.planted_families == ((0, 1), (2, 3))
        assert sorted(np.bincount(ds.labels)) == [6, 6, 6, 6]

    def test_values_are_float32_representable(self):
        ds = generate_synthetic(TINY)
        np.testing.assert_array_equal(
            ds.samples, ds.samples.astype(np.float32).astype(np.float64))

    def test_full_overlap_makes_family_members_identical(self):
        cfg = dataclasses.replace(TINY, overlap=1.0, noise=0.0)
        ds = generate_synthetic(cfg)
        # with overlap 1 and no noise, samples differ only by phase shifts
        label = np.asarray(ds.labels)
        sibling_a = ds.samples[label == 0]
        sibling_b = ds.samples[label == 1]
        pool_a = {arr.tobytes() for arr in
                  (np.roll(sibling_a[0], s, axis=1) for s in range(8))}
        assert sibling_b[0].tobytes() in pool_a

    def test_within_family_class_means_are_closer_than_across(self):
        ds = generate_synthetic(GenConfig(seed=5))
        labels = np.asarray(ds.labels)
        means = np.stack([ds.samples[labels == i].mean(axis=0)
                          for i in range(ds.class_count)])
        family_of = {c: f for f, block in enumerate(ds.planted_families)
                     for c in block}
        within, across = [], []
        for i in range(ds.class_count):
            for j in range(i + 1, ds.class_count):
                dist = float(np.linalg.norm(means[i] - means[j]))
                (within if family_of[i] == family_of[j] else across).append(dist)
        assert max(within) < min(across)

    def test_invalid_configs_rejected(self):
        with pytest.raises(ValidationError):
            GenConfig(superclass_count=9, class_count=4)
        with pytest.raises(ValidationError):
            GenConfig(overlap=1.5)
        with pytest.raises(ValidationError):
            GenConfig(noise=-0.1)
        with pytest.raises(ValidationError):
            GenConfig.from_dict({"classcount": 4})


class TestDatasetFiles:
    def test_round_trip_is_bit_exact(self, tmp_path):
        ds = generate_synthetic(TINY)
        write_dataset(ds, tmp_path / "d")
        loaded = load_dataset(tmp_path / "d")
        np.testing.assert_array_equal(loaded.samples, ds.samples)
        np.testing.assert_array_equal(loaded.labels, ds.labels)
        assert loaded.meta == ds.meta
        assert loaded.planted_families == ds.planted_families
        np.testing.assert_array_equal(loaded.graph.adjacency,
                                      ds.graph.adjacency)

    def test_write_load_write_is_byte_identical(self, tmp_path):
        ds = generate_synthetic(TINY)
        write_dataset(ds, tmp_path / "a")
        write_dataset(load_dataset(tmp_path / "a"), tmp_path / "b")
        for name in ("meta.json", "samples.bin", "labels.bin"):
            assert (tmp_path / "a" / name).read_bytes() == \
                (tmp_path / "b" / name).read_bytes()

    def test_truncated_samples_reports_byte_counts(self, tmp_path):
        ds = generate_synthetic(TINY)
        write_dataset(ds, tmp_path / "d")
        blob = (tmp_path / "d" / "samples.bin").read_bytes()
        (tmp_path / "d" / "samples.bin").write_bytes(blob[:-8])
        with pytest.raises(TruncatedPayloadError) as err:
            load_dataset(tmp_path / "d")
        expected = 24 * 2 * 8 * 5 * 4
        assert str(expected) in str(err.value)
        assert str(expected - 8) in str(err.value)

    def test_wrong_magic_rejected(self, tmp_path):
        ds = generate_synthetic(TINY)
        write_dataset(ds, tmp_path / "d")
        path = tmp_path / "d" / "labels.bin"
        path.write_bytes(b"BADMAGIC" + path.read_bytes()[8:])
        with pytest.raises(MagicMismatchError):
            load_dataset(tmp_path / "d")

    def test_label_out_of_declared_range_rejected(self, tmp_path):
        ds = generate_synthetic(TINY)
        write_dataset(ds, tmp_path / "d")
        path = tmp_path / "d" / "labels.bin"
        blob = bytearray(path.read_bytes())
        blob[8:12] = (7).to_bytes(4, "little")  # meta declares 4 classes
        path.write_bytes(bytes(blob))
        with pytest.raises(ValidationError, match="out of range"):
            load_dataset(tmp_path / "d")

    def test_unexpected_meta_field_rejected(self, tmp_path):
        ds = generate_synthetic(TINY)
        write_dataset(ds, tmp_path / "d")
        meta_path = tmp_path / "d" / "meta.json"
        meta = json.loads(meta_path.read_text())
        meta["extra"] = 1
        meta_path.write_text(json.dumps(meta))
        with pytest.raises(ValidationError, match="expected fields"):
            load_dataset(tmp_path / "d")


class TestSplit:
    def test_even_split_is_five_five(self):
        cfg = dataclasses.replace(TINY, samples_per_class=10)
        ds = generate_synthetic(cfg)
        train, evaluation = split_dataset(ds, 0.5, seed=1)
        assert sorted(np.bincount(train.labels)) == [5] * 4
        assert sorted(np.bincount(evaluation.labels)) == [5] * 4

    def test_union_of_splits_is_the_original_multiset(self):
        ds = generate_synthetic(TINY)
        train, evaluation = split_dataset(ds, 0.7, seed=3)
        combined = np.concatenate([train.samples, evaluation.samples])
        original = {ds.samples[i].tobytes() for i in range(len(ds))}
        recovered = {combined[i].tobytes() for i in range(len(combined))}
        assert len(combined) == len(ds)
        assert recovered == original

    def test_same_seed_same_split(self):
        ds = generate_synthetic(TINY)
        a_train, _ = split_dataset(ds, 0.5, seed=9)
        b_train, _ = split_dataset(ds, 0.5, seed=9)
        np.testing.assert_array_equal(a_train.samples, b_train.samples)

    def test_class_with_single_sample_rejected(self):
        ds = generate_synthetic(TINY)
        crippled = SkeletonDataset(
            samples=ds.samples[:13], labels=ds.labels[:13], graph=ds.graph,
            class_count=ds.class_count, meta=ds.meta,
            planted_families=ds.planted_families)
        with pytest.raises(ValidationError, match="at least 2"):
            split_dataset(crippled, 0.5, seed=0)

    def test_bad_fraction_rejected(self):
        ds = generate_synthetic(TINY)
        with pytest.raises(ValidationError):
            split_dataset(ds, 1.0, seed=0)


def test_planted_partition_blocks():
    assert planted_partition(5, 2) == ((0, 1, 2), (3, 4))
    assert planted_partition(4, 4) == ((0,), (1,), (2,), (3,))
