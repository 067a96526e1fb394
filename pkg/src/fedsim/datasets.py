"""Dataset generation, ingestion, and non-IID partitioning.

Two partitioning regimes are provided: a pathological label split (each
client sees a fixed small set of classes) and a latent-distribution split
(PCA + k-means clusters define disjoint sample distributions that groups of
clients draw from). Also here: train/val splitting, target shuffling for
out-of-distribution personalization, cross-client data sharing, and the
label-histogram earth mover's distance used to quantify non-IIDness.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .core import CapacityError, FederationError, NonFiniteError

__all__ = [
    "TRAIN_POOL",
    "TEST_POOL",
    "Dataset",
    "PartitionedDataset",
    "EmdReport",
    "IdxFormatError",
    "generate_synthetic",
    "load_idx",
    "load_idx_pairs",
    "load_csv",
    "pathological_partition",
    "latent_partition",
    "split_train_val",
    "shuffle_targets",
    "share_data",
    "compute_emd",
    "partition_to_dict",
]

TRAIN_POOL = 0
TEST_POOL = 1

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class IdxFormatError(FederationError):
    """An IDX file is malformed (bad magic, truncated, or mismatched)."""


# ------------------------------------------------------------------
# Core containers
# ------------------------------------------------------------------

@dataclass
class Dataset:
    """Features, integer labels, and a train/test pool tag per sample."""

    features: np.ndarray  # (n_samples, n_features) float64
    labels: np.ndarray  # (n_samples,) int64 in [0, n_classes)
    n_classes: int
    split_tag: np.ndarray  # (n_samples,) int8, TRAIN_POOL or TEST_POOL

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.split_tag = np.asarray(self.split_tag, dtype=np.int8)
        if not np.all(np.isfinite(self.features)):
            raise NonFiniteError("dataset features contain NaN or Inf")
        if self.labels.min(initial=0) < 0 or self.labels.max(initial=0) >= self.n_classes:
            raise ValueError("labels outside [0, n_classes)")
        if self.n_samples < self.n_classes:
            raise ValueError("need at least one sample per class")
        if self.labels.shape[0] != self.features.shape[0]:
            raise ValueError("feature/label count mismatch")
        if self.split_tag.shape[0] != self.features.shape[0]:
            raise ValueError("split_tag length mismatch")

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def train_pool(self) -> np.ndarray:
        return np.flatnonzero(self.split_tag == TRAIN_POOL)

    def test_pool(self) -> np.ndarray:
        return np.flatnonzero(self.split_tag == TEST_POOL)


@dataclass
class PartitionedDataset:
    """Per-client index sets over one dataset.

    ``n_distributions`` is the number of latent distributions; 0 means the
    partition was not produced by the latent pipeline (pathological splits)
    and ``distribution_of_client`` carries no information.
    """

    dataset: Dataset
    client_train: list[np.ndarray]
    client_val: list[np.ndarray]
    client_test: list[np.ndarray]
    distribution_of_client: np.ndarray
    n_distributions: int
    # Set by shuffle_targets: client i now holds the (val, test) pair that
    # originally belonged to client target_permutation[i].
    target_permutation: np.ndarray | None = None
    target_distribution_of_client: np.ndarray | None = None

    @property
    def n_clients(self) -> int:
        return len(self.client_train)

    def validate(self) -> None:
        n = self.dataset.n_samples
        for i in range(self.n_clients):
            train = np.asarray(self.client_train[i])
            val = np.asarray(self.client_val[i])
            test = np.asarray(self.client_test[i])
            for name, idx in (("train", train), ("val", val), ("test", test)):
                if idx.size and (idx.min() < 0 or idx.max() >= n):
                    raise ValueError(f"client {i}: {name} indices out of range")
                if np.unique(idx).size != idx.size:
                    raise ValueError(f"client {i}: duplicate {name} indices")
            st, sv, ste = set(train.tolist()), set(val.tolist()), set(test.tolist())
            if st & sv or st & ste or sv & ste:
                raise ValueError(f"client {i}: train/val/test overlap")
        if self.n_distributions > 0:
            counts = np.bincount(self.distribution_of_client, minlength=self.n_distributions)
            if counts.max() - counts.min() > 1:
                raise ValueError("clients not evenly assigned to distributions")

    def copy(self) -> "PartitionedDataset":
        return PartitionedDataset(
            dataset=self.dataset,
            client_train=[a.copy() for a in self.client_train],
            client_val=[a.copy() for a in self.client_val],
            client_test=[a.copy() for a in self.client_test],
            distribution_of_client=self.distribution_of_client.copy(),
            n_distributions=self.n_distributions,
            target_permutation=None if self.target_permutation is None else self.target_permutation.copy(),
            target_distribution_of_client=None
            if self.target_distribution_of_client is None
            else self.target_distribution_of_client.copy(),
        )


@dataclass
class EmdReport:
    per_client: np.ndarray
    mean: float


# ------------------------------------------------------------------
# Sources
# ------------------------------------------------------------------

def generate_synthetic(
    n_classes: int,
    n_features: int,
    samples_per_class: int,
    class_separation: float,
    seed: int,
) -> Dataset:
    """Gaussian blobs, one unit-covariance blob per class.

    Class means are drawn from a seeded normal scaled so the root-mean-square
    pairwise distance between means equals ``class_separation`` (in units of
    the within-class standard deviation). Within each class the first 80% of
    samples are tagged train_pool, the rest test_pool.
    """
    if n_classes < 1 or n_features < 1 or samples_per_class < 1:
        raise ValueError("all counts must be positive")
    if class_separation <= 0:
        raise ValueError("class_separation must be positive")
    rng = np.random.default_rng(seed)
    scale = class_separation / np.sqrt(2.0 * n_features)
    means = scale * rng.standard_normal((n_classes, n_features))
    feats = np.empty((n_classes * samples_per_class, n_features))
    labels = np.empty(n_classes * samples_per_class, dtype=np.int64)
    tags = np.empty(n_classes * samples_per_class, dtype=np.int8)
    n_train = int(round(samples_per_class * 0.8))
    for c in range(n_classes):
        lo = c * samples_per_class
        hi = lo + samples_per_class
        feats[lo:hi] = means[c] + rng.standard_normal((samples_per_class, n_features))
        labels[lo:hi] = c
        tags[lo:hi] = TEST_POOL
        tags[lo : lo + n_train] = TRAIN_POOL
    return Dataset(features=feats, labels=labels, n_classes=n_classes, split_tag=tags)


def _read_idx_header(data: bytes, path: str, expected_magic: int, n_dims: int) -> tuple[int, ...]:
    header_len = 4 * (1 + n_dims)
    if len(data) < header_len:
        raise IdxFormatError(f"{path}: truncated header ({len(data)} bytes)")
    magic = struct.unpack(">i", data[:4])[0]
    if magic != expected_magic:
        raise IdxFormatError(
            f"{path}: bad magic number 0x{magic:08x}, expected 0x{expected_magic:08x}"
        )
    return struct.unpack(f">{n_dims}i", data[4:header_len])


def load_idx(
    images_path: str,
    labels_path: str,
    n_classes: int | None = None,
    split_tag: int = TRAIN_POOL,
) -> Dataset:
    """Load one big-endian IDX image/label file pair.

    Pixel values are scaled to [0, 1]. Bad magic numbers, truncated payloads,
    and image/label count mismatches are reported as distinct errors.
    """
    with open(images_path, "rb") as f:
        img_data = f.read()
    with open(labels_path, "rb") as f:
        lab_data = f.read()

    count, rows, cols = _read_idx_header(img_data, images_path, IDX_IMAGE_MAGIC, 3)
    expected = 16 + count * rows * cols
    if len(img_data) != expected:
        raise IdxFormatError(
            f"{images_path}: expected {expected} bytes for {count} images, got {len(img_data)}"
        )
    (lab_count,) = _read_idx_header(lab_data, labels_path, IDX_LABEL_MAGIC, 1)
    if len(lab_data) != 8 + lab_count:
        raise IdxFormatError(
            f"{labels_path}: expected {8 + lab_count} bytes for {lab_count} labels, "
            f"got {len(lab_data)}"
        )
    if lab_count != count:
        raise IdxFormatError(
            f"{images_path} has {count} images but {labels_path} has {lab_count} labels"
        )

    pixels = np.frombuffer(img_data, dtype=np.uint8, offset=16).reshape(count, rows * cols)
    labels = np.frombuffer(lab_data, dtype=np.uint8, offset=8).astype(np.int64)
    classes = n_classes if n_classes is not None else int(labels.max()) + 1
    return Dataset(
        features=pixels.astype(np.float64) / 255.0,
        labels=labels,
        n_classes=classes,
        split_tag=np.full(count, split_tag, dtype=np.int8),
    )


def load_idx_pairs(
    train_images: str, train_labels: str, test_images: str, test_labels: str
) -> Dataset:
    """Load predefined train/test IDX pairs into one pooled dataset."""
    train = load_idx(train_images, train_labels, split_tag=TRAIN_POOL)
    test = load_idx(test_images, test_labels, split_tag=TEST_POOL)
    if train.n_features != test.n_features:
        raise IdxFormatError("train and test images have different sizes")
    n_classes = max(train.n_classes, test.n_classes)
    return Dataset(
        features=np.concatenate([train.features, test.features]),
        labels=np.concatenate([train.labels, test.labels]),
        n_classes=n_classes,
        split_tag=np.concatenate([train.split_tag, test.split_tag]),
    )


def load_csv(path: str) -> Dataset:
    """Load a generic dataset from CSV.

    Expected header: feature_0,...,feature_{d-1},label,split where split is
    "train" or "test".
    """
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise FederationError(f"{path}: empty CSV file") from None
        n_feat = len(header) - 2
        expected = [f"feature_{i}" for i in range(n_feat)] + ["label", "split"]
        if header != expected:
            raise FederationError(f"{path}: bad CSV header {header!r}")
        feats, labels, tags = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise FederationError(f"{path}:{lineno}: wrong column count")
            feats.append([float(v) for v in row[:n_feat]])
            labels.append(int(row[n_feat]))
            if row[-1] == "train":
                tags.append(TRAIN_POOL)
            elif row[-1] == "test":
                tags.append(TEST_POOL)
            else:
                raise FederationError(f"{path}:{lineno}: split must be 'train' or 'test'")
    labels_arr = np.asarray(labels, dtype=np.int64)
    return Dataset(
        features=np.asarray(feats, dtype=np.float64),
        labels=labels_arr,
        n_classes=int(labels_arr.max()) + 1,
        split_tag=np.asarray(tags, dtype=np.int8),
    )


# ------------------------------------------------------------------
# Partitioners
# ------------------------------------------------------------------

def pathological_partition(
    dataset: Dataset, n_clients: int, classes_per_client: int = 2, seed: int = 0
) -> PartitionedDataset:
    """Restrict each client to at most ``classes_per_client`` labels.

    Train-pool samples are sorted by class and cut into
    n_clients * classes_per_client label-pure shards; each client is dealt
    classes_per_client shards at random. Client test sets are all test-pool
    samples whose label falls in the client's label set, so evaluation is
    personalized to the same label subset.
    """
    if n_clients < 1 or classes_per_client < 1:
        raise ValueError("counts must be positive")
    total_shards = n_clients * classes_per_client
    if total_shards < dataset.n_classes:
        raise CapacityError(
            f"{total_shards} shards cannot cover {dataset.n_classes} classes"
        )
    rng = np.random.default_rng(seed)
    train_pool = dataset.train_pool()

    # Label-pure shards, spread as evenly as possible across classes.
    base, extra = divmod(total_shards, dataset.n_classes)
    shards: list[tuple[int, np.ndarray]] = []
    for c in range(dataset.n_classes):
        n_shards_c = base + (1 if c < extra else 0)
        idx_c = train_pool[dataset.labels[train_pool] == c]
        if idx_c.size < n_shards_c:
            raise CapacityError(f"class {c}: {idx_c.size} samples for {n_shards_c} shards")
        idx_c = rng.permutation(idx_c)
        for part in np.array_split(idx_c, n_shards_c):
            shards.append((c, part))

    order = rng.permutation(total_shards)
    test_pool = dataset.test_pool()
    client_train, client_test, client_val = [], [], []
    for i in range(n_clients):
        own = [shards[j] for j in order[i * classes_per_client : (i + 1) * classes_per_client]]
        labels_i = sorted({c for c, _ in own})
        train_i = np.sort(np.concatenate([part for _, part in own]))
        test_i = test_pool[np.isin(dataset.labels[test_pool], labels_i)]
        client_train.append(train_i)
        client_val.append(np.empty(0, dtype=np.int64))
        client_test.append(np.sort(test_i))
    part = PartitionedDataset(
        dataset=dataset,
        client_train=client_train,
        client_val=client_val,
        client_test=client_test,
        distribution_of_client=np.zeros(n_clients, dtype=np.int64),
        n_distributions=0,
    )
    part.validate()
    return part


def _pca_project(features: np.ndarray, dims: int) -> np.ndarray:
    centered = features - features.mean(axis=0)
    cov = centered.T @ centered
    eigvals, eigvecs = np.linalg.eigh(cov)
    components = eigvecs[:, ::-1][:, :dims]  # descending variance
    return centered @ components


def _kmeans(points: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = 100) -> np.ndarray:
    """Lloyd's algorithm with seeded random-partition initialization.

    Converges when assignments stabilize; nearest-centroid ties break toward
    the lower centroid index; a cluster that empties keeps its old centroid.
    """
    n = points.shape[0]
    if n < k:
        raise CapacityError(f"cannot form {k} clusters from {n} points")
    assign = rng.integers(0, k, size=n)
    for j in range(k):  # guarantee a nonempty start for every cluster
        if not np.any(assign == j):
            assign[int(rng.integers(0, n))] = j
    centroids = np.empty((k, points.shape[1]))
    point_sq = (points * points).sum(axis=1)
    for _ in range(max_iter):
        for j in range(k):
            members = assign == j
            if np.any(members):
                centroids[j] = points[members].mean(axis=0)
        d2 = point_sq[:, None] - 2.0 * points @ centroids.T + (centroids * centroids).sum(axis=1)
        new_assign = np.argmin(d2, axis=1)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    return assign


def latent_partition(
    dataset: Dataset,
    n_distributions: int,
    n_clients: int,
    pca_dims: int = 16,
    seed: int = 0,
) -> PartitionedDataset:
    """Cluster samples into latent distributions and deal them to clients.

    Raw features are PCA-projected to ``pca_dims`` and k-means-clustered
    (train and test pools together, so matching samples land in the same
    cluster). Clients are assigned to clusters in contiguous, nearly equal
    blocks; each client draws its train samples without replacement from its
    cluster's train pool, and its test set is the cluster's whole test pool.
    """
    if not (1 <= n_distributions <= n_clients):
        raise ValueError("need 1 <= n_distributions <= n_clients")
    if pca_dims > dataset.n_features:
        raise ValueError("pca_dims cannot exceed n_features")
    rng = np.random.default_rng(seed)
    projected = _pca_project(dataset.features, pca_dims)
    cluster_of_sample = _kmeans(projected, n_distributions, rng)

    distribution_of_client = np.array(
        [i * n_distributions // n_clients for i in range(n_clients)], dtype=np.int64
    )
    client_train: list[np.ndarray] = [np.empty(0, dtype=np.int64) for _ in range(n_clients)]
    client_test: list[np.ndarray] = [np.empty(0, dtype=np.int64) for _ in range(n_clients)]

    train_pool = dataset.train_pool()
    test_pool = dataset.test_pool()
    for d in range(n_distributions):
        members = np.flatnonzero(distribution_of_client == d)
        d_train = train_pool[cluster_of_sample[train_pool] == d]
        d_test = test_pool[cluster_of_sample[test_pool] == d]
        if d_train.size < members.size:
            raise CapacityError(
                f"distribution {d}: {d_train.size} train samples for {members.size} clients"
            )
        slices = np.array_split(rng.permutation(d_train), members.size)
        for slot, cid in enumerate(members):
            client_train[int(cid)] = np.sort(slices[slot])
            client_test[int(cid)] = np.sort(d_test)

    part = PartitionedDataset(
        dataset=dataset,
        client_train=client_train,
        client_val=[np.empty(0, dtype=np.int64) for _ in range(n_clients)],
        client_test=client_test,
        distribution_of_client=distribution_of_client,
        n_distributions=n_distributions,
    )
    part.validate()
    return part


# ------------------------------------------------------------------
# Split manipulation
# ------------------------------------------------------------------

def split_train_val(partition: PartitionedDataset, val_fraction: float, seed: int) -> PartitionedDataset:
    """Split each client's local pool into train and validation indices.

    The validation size is round(val_fraction * pool_size) with
    round-half-to-even; any existing val indices are merged back into the
    pool first, so re-splitting is idempotent for a fixed seed.
    """
    if not (0.0 < val_fraction < 1.0):
        raise ValueError("val_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    out = partition.copy()
    for i in range(out.n_clients):
        pool = np.sort(np.concatenate([out.client_train[i], out.client_val[i]]))
        if pool.size < 2:
            raise CapacityError(f"client {i}: needs >= 2 samples to split, has {pool.size}")
        n_val = int(round(val_fraction * pool.size))
        perm = rng.permutation(pool)
        out.client_val[i] = np.sort(perm[:n_val])
        out.client_train[i] = np.sort(perm[n_val:])
    out.validate()
    return out


def shuffle_targets(
    partition: PartitionedDataset, seed: int, permutation: np.ndarray | None = None
) -> PartitionedDataset:
    """Reassign (val, test) pairs among clients, keeping train sets in place.

    After shuffling, client i holds the validation and test indices that
    belonged to client permutation[i], so its optimization target can come
    from a different latent distribution than its training data. The applied
    permutation is recorded on the partition.
    """
    k = partition.n_clients
    if k < 2:
        raise ValueError("need at least 2 clients to shuffle targets")
    if permutation is None:
        permutation = np.random.default_rng(seed).permutation(k)
    else:
        permutation = np.asarray(permutation, dtype=np.int64)
        if sorted(permutation.tolist()) != list(range(k)):
            raise ValueError("not a permutation of client ids")
    out = partition.copy()
    out.client_val = [partition.client_val[int(permutation[i])].copy() for i in range(k)]
    out.client_test = [partition.client_test[int(permutation[i])].copy() for i in range(k)]
    out.target_permutation = permutation
    if partition.n_distributions > 0:
        out.target_distribution_of_client = partition.distribution_of_client[permutation]
    out.validate()
    return out


def share_data(partition: PartitionedDataset, share_fraction: float, seed: int) -> PartitionedDataset:
    """Pool a fraction of every client's train indices and share it globally.

    Each client contributes round(share_fraction * train_size) seeded-sampled
    indices; the combined pool is appended to every client's train set,
    skipping indices the client already holds.
    """
    if not (0.0 <= share_fraction < 1.0):
        raise ValueError("share_fraction must lie in [0, 1)")
    if share_fraction == 0.0:
        return partition.copy()
    rng = np.random.default_rng(seed)
    contributions = []
    for i in range(partition.n_clients):
        train = partition.client_train[i]
        n_share = int(round(share_fraction * train.size))
        if n_share:
            contributions.append(rng.choice(train, size=n_share, replace=False))
    pool = np.concatenate(contributions) if contributions else np.empty(0, dtype=np.int64)
    out = partition.copy()
    for i in range(out.n_clients):
        have = set(out.client_train[i].tolist())
        extra = np.array([j for j in pool.tolist() if j not in have], dtype=np.int64)
        out.client_train[i] = np.concatenate([out.client_train[i], np.unique(extra)])
    out.validate()
    return out


def compute_emd(partition: PartitionedDataset) -> EmdReport:
    """L1 distance between each client's label histogram and the global one.

    Uses each client's full local pool (train plus val). Values lie in
    [0, 2]; the mean over clients summarizes how non-IID the partition is.
    """
    ds = partition.dataset
    global_hist = np.bincount(ds.labels, minlength=ds.n_classes) / ds.n_samples
    per_client = np.empty(partition.n_clients)
    for i in range(partition.n_clients):
        local = np.concatenate([partition.client_train[i], partition.client_val[i]])
        if local.size == 0:
            raise ValueError(f"client {i}: empty local pool")
        hist = np.bincount(ds.labels[local], minlength=ds.n_classes) / local.size
        per_client[i] = np.abs(hist - global_hist).sum()
    return EmdReport(per_client=per_client, mean=float(per_client.mean()))


def partition_to_dict(partition: PartitionedDataset, seed: int | None = None, config: dict | None = None) -> dict:
    """JSON-ready view of a partition (index arrays as plain lists)."""
    doc = {
        "n_distributions": partition.n_distributions,
        "distribution_of_client": partition.distribution_of_client.tolist(),
        "client_train": [a.tolist() for a in partition.client_train],
        "client_val": [a.tolist() for a in partition.client_val],
        "client_test": [a.tolist() for a in partition.client_test],
    }
    if partition.target_permutation is not None:
        doc["target_permutation"] = partition.target_permutation.tolist()
        if partition.target_distribution_of_client is not None:
            doc["target_distribution_of_client"] = partition.target_distribution_of_client.tolist()
    if seed is not None:
        doc["seed"] = seed
    if config is not None:
        doc["config"] = config
    return doc
