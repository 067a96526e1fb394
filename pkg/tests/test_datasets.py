import struct
from itertools import permutations

import numpy as np
import pytest

from fedsim.core import CapacityError
from fedsim.datasets import (
    IDX_IMAGE_MAGIC,
    IDX_LABEL_MAGIC,
    TEST_POOL,
    TRAIN_POOL,
    IdxFormatError,
    compute_emd,
    generate_synthetic,
    latent_partition,
    load_csv,
    load_idx,
    pathological_partition,
    share_data,
    shuffle_targets,
    split_train_val,
)


class TestGenerateSynthetic:
    def test_construction(self):
        ds = generate_synthetic(10, 16, 100, 3.0, seed=1)
        assert ds.n_samples == 1000
        assert ds.n_features == 16
        counts = np.bincount(ds.labels)
        assert np.all(counts == 100)
        # 80/20 pools per class
        for c in range(10):
            tags = ds.split_tag[ds.labels == c]
            assert (tags == TRAIN_POOL).sum() == 80
            assert (tags == TEST_POOL).sum() == 20

    def test_determinism(self):
        a = generate_synthetic(5, 8, 50, 2.0, seed=9)
        b = generate_synthetic(5, 8, 50, 2.0, seed=9)
        assert a.features.tobytes() == b.features.tobytes()
        assert np.array_equal(a.labels, b.labels)

    def test_nearest_centroid_oracle_at_high_separation(self):
        ds = generate_synthetic(10, 16, 100, 10.0, seed=1)
        centroids = np.stack([ds.features[ds.labels == c].mean(axis=0) for c in range(10)])
        d2 = ((ds.features[:, None, :] - centroids[None]) ** 2).sum(axis=-1)
        accuracy = (np.argmin(d2, axis=1) == ds.labels).mean()
        assert accuracy >= 0.99


def _idx_fixture(tmp_path):
    """Two 2x3 images with hand-chosen pixels, written independently."""
    pixels = [[0, 51, 102, 153, 204, 255], [255, 0, 255, 0, 255, 0]]
    img = struct.pack(">iiii", IDX_IMAGE_MAGIC, 2, 2, 3) + bytes(pixels[0]) + bytes(pixels[1])
    lab = struct.pack(">ii", IDX_LABEL_MAGIC, 2) + bytes([1, 0])
    ip = tmp_path / "imgs.idx"
    lp = tmp_path / "labs.idx"
    ip.write_bytes(img)
    lp.write_bytes(lab)
    return str(ip), str(lp), pixels


class TestLoadIdx:
    def test_fixture_roundtrip(self, tmp_path):
        ip, lp, pixels = _idx_fixture(tmp_path)
        ds = load_idx(ip, lp)
        assert ds.n_samples == 2
        assert ds.n_features == 6
        assert np.array_equal(ds.labels, [1, 0])
        expected = np.array(pixels, dtype=float) / 255.0
        assert np.array_equal(ds.features, expected)

    def test_bad_magic_names_file(self, tmp_path):
        ip, lp, _ = _idx_fixture(tmp_path)
        bad = tmp_path / "bad.idx"
        bad.write_bytes(struct.pack(">iiii", 0x00000777, 2, 2, 3) + bytes(12))
        with pytest.raises(IdxFormatError, match="bad.idx"):
            load_idx(str(bad), lp)

    def test_truncated(self, tmp_path):
        ip, lp, _ = _idx_fixture(tmp_path)
        short = tmp_path / "short.idx"
        short.write_bytes(struct.pack(">iiii", IDX_IMAGE_MAGIC, 2, 2, 3) + bytes(5))
        with pytest.raises(IdxFormatError, match="expected"):
            load_idx(str(short), lp)

    def test_count_mismatch(self, tmp_path):
        ip, _, _ = _idx_fixture(tmp_path)
        labs3 = tmp_path / "labs3.idx"
        labs3.write_bytes(struct.pack(">ii", IDX_LABEL_MAGIC, 3) + bytes([0, 1, 0]))
        with pytest.raises(IdxFormatError, match="labels"):
            load_idx(ip, str(labs3))


class TestLoadCsv:
    def test_roundtrip(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text(
            "feature_0,feature_1,label,split\n"
            "0.5,-1.0,0,train\n"
            "1.5,2.0,1,test\n"
            "0.25,0.75,1,train\n"
        )
        ds = load_csv(str(path))
        assert ds.n_samples == 3
        assert np.array_equal(ds.labels, [0, 1, 1])
        assert np.array_equal(ds.split_tag, [TRAIN_POOL, TEST_POOL, TRAIN_POOL])
        assert ds.features[0, 1] == -1.0

    def test_bad_header(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text("a,b,label,split\n0,0,0,train\n")
        with pytest.raises(Exception, match="header"):
            load_csv(str(path))


class TestPathologicalPartition:
    def test_each_client_two_labels(self):
        ds = generate_synthetic(10, 8, 60, 3.0, seed=2)
        part = pathological_partition(ds, n_clients=5, classes_per_client=2, seed=0)
        for i in range(5):
            labels = set(ds.labels[part.client_train[i]].tolist())
            assert len(labels) == 2
            test_labels = set(ds.labels[part.client_test[i]].tolist())
            assert test_labels <= labels

    def test_single_client_holds_two_full_classes(self):
        ds = generate_synthetic(2, 4, 40, 3.0, seed=2)
        part = pathological_partition(ds, n_clients=1, classes_per_client=2, seed=0)
        labels = set(ds.labels[part.client_train[0]].tolist())
        assert len(labels) == 2
        assert part.client_train[0].size == (ds.split_tag == TRAIN_POOL).sum()

    def test_union_covers_assigned_shards(self):
        ds = generate_synthetic(10, 8, 60, 3.0, seed=2)
        part = pathological_partition(ds, n_clients=15, classes_per_client=2, seed=3)
        all_train = np.concatenate(part.client_train)
        assert np.unique(all_train).size == all_train.size  # no duplicates
        assert set(all_train.tolist()) == set(ds.train_pool().tolist())

    def test_infeasible_shards(self):
        ds = generate_synthetic(10, 8, 60, 3.0, seed=2)
        with pytest.raises(CapacityError):
            pathological_partition(ds, n_clients=4, classes_per_client=2, seed=0)

    def test_test_indices_come_from_test_pool(self):
        ds = generate_synthetic(6, 8, 50, 3.0, seed=2)
        part = pathological_partition(ds, n_clients=3, classes_per_client=2, seed=1)
        for idx in part.client_test:
            assert np.all(ds.split_tag[idx] == TEST_POOL)


class TestLatentPartition:
    def test_single_distribution_is_iid(self):
        ds = generate_synthetic(10, 16, 220, 4.0, seed=5)
        part = latent_partition(ds, 1, 5, pca_dims=8, seed=0)
        global_hist = np.bincount(ds.labels, minlength=10) / ds.n_samples
        for i in range(5):
            idx = part.client_train[i]
            assert idx.size >= 200
            hist = np.bincount(ds.labels[idx], minlength=10) / idx.size
            assert np.abs(hist - global_hist).sum() <= 0.15

    def test_one_cluster_per_client(self):
        ds = generate_synthetic(5, 16, 100, 8.0, seed=5)
        part = latent_partition(ds, 5, 5, pca_dims=8, seed=0)
        assert sorted(part.distribution_of_client.tolist()) == [0, 1, 2, 3, 4]

    def test_recovers_generating_blobs(self):
        ds = generate_synthetic(5, 16, 200, 10.0, seed=3)
        part = latent_partition(ds, 5, 5, pca_dims=8, seed=0)
        cluster = np.full(ds.n_samples, -1)
        for i in range(5):
            for idx in (part.client_train[i], part.client_test[i]):
                cluster[idx] = part.distribution_of_client[i]
        covered = cluster >= 0
        assert covered.mean() == 1.0
        best = 0.0
        for perm in permutations(range(5)):
            remap = np.array(perm)[cluster]
            best = max(best, float((remap == ds.labels).mean()))
        assert best >= 0.95

    def test_even_assignment(self):
        ds = generate_synthetic(10, 16, 100, 4.0, seed=5)
        part = latent_partition(ds, 4, 10, pca_dims=8, seed=0)
        counts = np.bincount(part.distribution_of_client, minlength=4)
        assert counts.max() - counts.min() <= 1

    def test_capacity_error(self):
        ds = generate_synthetic(3, 4, 10, 6.0, seed=5)
        with pytest.raises(CapacityError):
            # 3 tiny clusters cannot feed 24 clients each
            latent_partition(ds, 3, 72, pca_dims=4, seed=0)


class TestSplitTrainVal:
    def test_80_20(self):
        ds = generate_synthetic(5, 8, 125, 3.0, seed=4)
        part = latent_partition(ds, 1, 4, pca_dims=8, seed=0)
        part = split_train_val(part, 0.2, seed=1)
        for i in range(4):
            pool = part.client_train[i].size + part.client_val[i].size
            assert part.client_val[i].size == round(0.2 * pool)

    def test_round_half_to_even(self):
        ds = generate_synthetic(2, 4, 30, 3.0, seed=4)
        part = latent_partition(ds, 1, 16, pca_dims=4, seed=0)
        # each client holds 48/16 = 3 samples; round(1.5) == 2 under banker's rounding
        part = split_train_val(part, 0.5, seed=1)
        for i in range(16):
            assert part.client_val[i].size == 2
            assert part.client_train[i].size == 1

    def test_determinism(self):
        ds = generate_synthetic(5, 8, 60, 3.0, seed=4)
        base = latent_partition(ds, 2, 4, pca_dims=8, seed=0)
        a = split_train_val(base, 0.2, seed=7)
        b = split_train_val(base, 0.2, seed=7)
        for i in range(4):
            assert np.array_equal(a.client_val[i], b.client_val[i])
            assert np.array_equal(a.client_train[i], b.client_train[i])

    def test_too_small(self):
        ds = generate_synthetic(2, 4, 20, 3.0, seed=4)
        part = latent_partition(ds, 1, 32, pca_dims=4, seed=0)
        with pytest.raises(CapacityError):
            split_train_val(part, 0.5, seed=0)


def _small_split_partition(seed=0):
    ds = generate_synthetic(6, 8, 60, 4.0, seed=6)
    part = latent_partition(ds, 3, 6, pca_dims=8, seed=seed)
    return split_train_val(part, 0.2, seed=seed)


class TestShuffleTargets:
    def test_identity_permutation(self):
        part = _small_split_partition()
        out = shuffle_targets(part, seed=0, permutation=np.arange(6))
        for i in range(6):
            assert np.array_equal(out.client_val[i], part.client_val[i])
            assert np.array_equal(out.client_test[i], part.client_test[i])

    def test_two_client_swap(self):
        ds = generate_synthetic(4, 8, 60, 4.0, seed=6)
        part = split_train_val(latent_partition(ds, 2, 2, pca_dims=8, seed=0), 0.2, seed=0)
        out = shuffle_targets(part, seed=0, permutation=np.array([1, 0]))
        assert np.array_equal(out.client_val[0], part.client_val[1])
        assert np.array_equal(out.client_test[1], part.client_test[0])

    def test_inverse_composition_restores(self):
        part = _small_split_partition()
        perm = np.random.default_rng(3).permutation(6)
        inverse = np.argsort(perm)
        back = shuffle_targets(shuffle_targets(part, 0, permutation=perm), 0, permutation=inverse)
        for i in range(6):
            assert np.array_equal(back.client_val[i], part.client_val[i])
            assert np.array_equal(back.client_test[i], part.client_test[i])

    def test_preserves_pair_multiset(self):
        part = _small_split_partition()
        out = shuffle_targets(part, seed=11)
        before = sorted((tuple(v), tuple(t)) for v, t in zip(part.client_val, part.client_test))
        after = sorted((tuple(v), tuple(t)) for v, t in zip(out.client_val, out.client_test))
        assert before == after
        assert out.target_permutation is not None

    def test_records_target_distribution(self):
        part = _small_split_partition()
        out = shuffle_targets(part, seed=11)
        perm = out.target_permutation
        assert np.array_equal(
            out.target_distribution_of_client, part.distribution_of_client[perm]
        )


class TestShareData:
    def test_zero_fraction_unchanged(self):
        part = _small_split_partition()
        out = share_data(part, 0.0, seed=0)
        for i in range(6):
            assert np.array_equal(out.client_train[i], part.client_train[i])

    def test_five_percent_contribution(self):
        ds = generate_synthetic(5, 8, 100, 4.0, seed=6)
        part = latent_partition(ds, 1, 4, pca_dims=8, seed=0)  # 100 train samples each
        out = share_data(part, 0.05, seed=0)
        for i in range(4):
            gained = out.client_train[i].size - part.client_train[i].size
            assert gained == 15  # 5 contributed by each of the 3 other clients

    def test_supersets(self):
        part = _small_split_partition()
        out = share_data(part, 0.1, seed=5)
        for i in range(6):
            assert set(part.client_train[i].tolist()) <= set(out.client_train[i].tolist())
        out.validate()


class TestComputeEmd:
    def test_iid_partition_near_zero(self):
        ds = generate_synthetic(10, 8, 250, 3.0, seed=8)
        part = latent_partition(ds, 1, 5, pca_dims=8, seed=0)  # >= 200 samples per client
        report = compute_emd(part)
        assert report.mean <= 0.1

    def test_hand_computed_two_class_client(self):
        ds = generate_synthetic(10, 4, 50, 3.0, seed=8)
        part = latent_partition(ds, 1, 2, pca_dims=4, seed=0)
        zeros = np.flatnonzero((ds.labels == 0) & (ds.split_tag == TRAIN_POOL))[:20]
        ones = np.flatnonzero((ds.labels == 1) & (ds.split_tag == TRAIN_POOL))[:20]
        part.client_train[0] = np.concatenate([zeros, ones])  # 0.5/0.5 over two labels
        part.client_val[0] = np.empty(0, dtype=np.int64)
        report = compute_emd(part)
        assert abs(report.per_client[0] - 1.6) < 1e-12

    def test_range_and_ordering(self):
        ds = generate_synthetic(10, 16, 200, 6.0, seed=7)
        p5 = latent_partition(ds, 5, 15, pca_dims=16, seed=1)
        p2 = latent_partition(ds, 2, 15, pca_dims=16, seed=1)
        e5, e2 = compute_emd(p5), compute_emd(p2)
        for rep in (e5, e2):
            assert np.all(rep.per_client >= 0.0) and np.all(rep.per_client <= 2.0)
        assert e5.mean > e2.mean
        iid = compute_emd(latent_partition(ds, 1, 5, pca_dims=16, seed=1))
        path = compute_emd(pathological_partition(ds, 15, 2, seed=1))
        assert iid.mean <= path.mean
