"""Build aggregated datasets from clean per-sample annotations.

Two aggregation rules: uniform random blocks, and recursive balanced
spherical 2-means over the feature vectors. Both record which member
contributed each group label so assignment quality can be scored later.
Also provides the synthetic clustered generator used throughout the tests.
"""

from __future__ import annotations

import numpy as np

from .core import ConfigError, SparseMatrix, make_rng, proj
from .dataio import AggregatedDataset, GroundTruthAssignment, XmcDataset
from .embeddings import LabelEmbeddings

# spawn-key name spaces so different consumers of one seed never collide
_KIND_RANDOM_GROUPING = 101
_KIND_HIER_GROUPING = 102
_KIND_SYNTH = 103


def aggregate_blocks(
    ds: XmcDataset, blocks: list[np.ndarray]
) -> tuple[AggregatedDataset, GroundTruthAssignment]:
    """Merge the label lists of each block of samples into group labels.

    Labels are list-merged: a label carried by several members of one block
    is stored once in the binary group-to-label matrix with its repetition
    count in ``label_multiplicity``. The returned ground truth maps every
    (group, label) pair to the ascending tuple of contributing members.
    """
    n = ds.num_samples
    seen = np.zeros(n, dtype=bool)
    y1_trip = []
    y2_trip = []
    multiplicity: dict[tuple[int, int], int] = {}
    carriers: dict[tuple[int, int], tuple[int, ...]] = {}
    for j, block in enumerate(blocks):
        block = np.asarray(block, dtype=np.int64)
        if block.size == 0:
            raise ConfigError(f"group {j} is empty")
        if np.any(seen[block]):
            raise ConfigError("blocks overlap: a sample appears in two groups")
        seen[block] = True
        per_label: dict[int, list[int]] = {}
        for i in sorted(int(b) for b in block):
            y1_trip.append((i, j, 1.0))
            for k in ds.labels_of(i):
                per_label.setdefault(int(k), []).append(i)
        for k, members in per_label.items():
            y2_trip.append((j, k, 1.0))
            carriers[(j, k)] = tuple(members)
            if len(members) > 1:
                multiplicity[(j, k)] = len(members)
    if not np.all(seen):
        raise ConfigError("blocks do not cover every sample")
    agg = AggregatedDataset(
        features=ds.features,
        sample_to_group=SparseMatrix.from_triplets(n, len(blocks), y1_trip),
        group_to_label=SparseMatrix.from_triplets(len(blocks), ds.num_labels, y2_trip),
        label_multiplicity=multiplicity or None,
    )
    return agg, GroundTruthAssignment(carriers)


def block_grouping(
    ds: XmcDataset, group_size: int
) -> tuple[AggregatedDataset, GroundTruthAssignment]:
    """Cut samples into consecutive blocks in index order (no shuffling)."""
    n = ds.num_samples
    if group_size < 1:
        raise ConfigError("group size must be >= 1")
    if group_size > n:
        raise ConfigError(f"group size {group_size} exceeds sample count {n}")
    blocks = [
        np.arange(s, min(s + group_size, n), dtype=np.int64)
        for s in range(0, n, group_size)
    ]
    return aggregate_blocks(ds, blocks)


def random_grouping(
    ds: XmcDataset, group_size: int, seed: int
) -> tuple[AggregatedDataset, GroundTruthAssignment]:
    """Cut a uniformly random permutation of the samples into blocks.

    Produces ceil(n / group_size) groups; the last block may be smaller when
    the group size does not divide n.
    """
    n = ds.num_samples
    if group_size < 1:
        raise ConfigError("group size must be >= 1")
    if group_size > n:
        raise ConfigError(f"group size {group_size} exceeds sample count {n}")
    perm = make_rng(seed, _KIND_RANDOM_GROUPING).permutation(n)
    blocks = [
        np.sort(perm[s:s + group_size]).astype(np.int64)
        for s in range(0, n, group_size)
    ]
    return aggregate_blocks(ds, blocks)


def _balanced_split(
    vectors: np.ndarray, subset: np.ndarray, rng: np.random.Generator, max_iters: int
) -> tuple[np.ndarray, np.ndarray]:
    """Split ``subset`` into two index sets of sizes ceil/floor(|subset|/2).

    Spherical 2-means with farthest-point seeding. After the nearest-centroid
    assignment, the surplus side gives up its smallest-margin points (the
    ones least attached to their centroid); ties move lower sample indices
    first, so the split is deterministic even for identical features.
    """
    sz = subset.size
    v = vectors[subset]
    unit0 = np.zeros(vectors.shape[1])
    unit0[0] = 1.0

    def seed_vec(idx: int) -> np.ndarray:
        w = v[idx]
        return w if (w * w).sum() > 0 else unit0

    start = int(rng.integers(sz))
    d0 = v @ seed_vec(start)
    c1_idx = int(np.argmin(d0))
    c1 = seed_vec(c1_idx)
    d1 = v @ c1
    c2_idx = int(np.argmin(d1))
    c2 = seed_vec(c2_idx)
    if c1_idx == c2_idx:  # all points identical: split by index
        half = (sz + 1) // 2
        return subset[:half], subset[half:]

    assign = np.zeros(sz, dtype=np.int8)
    for _ in range(max_iters):
        s1 = v @ c1
        s2 = v @ c2
        natural = (s2 > s1).astype(np.int8)  # ties stay with side 0
        count0 = int((natural == 0).sum())
        count1 = sz - count0
        target0 = (sz + 1) // 2 if count0 >= count1 else sz // 2
        new_assign = natural.copy()
        if count0 > target0:
            margin = s1 - s2
            cand = np.flatnonzero(natural == 0)
            order = cand[np.lexsort((subset[cand], margin[cand]))]
            new_assign[order[: count0 - target0]] = 1
        elif count0 < target0:
            margin = s2 - s1
            cand = np.flatnonzero(natural == 1)
            order = cand[np.lexsort((subset[cand], margin[cand]))]
            new_assign[order[: target0 - count0]] = 0
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        m0 = v[assign == 0].sum(axis=0)
        m1 = v[assign == 1].sum(axis=0)
        c1 = proj(m0, fallback=c1)
        c2 = proj(m1, fallback=c2)
    left = subset[assign == 0]
    right = subset[assign == 1]
    return left, right


def hierarchical_grouping(
    ds: XmcDataset,
    depth: int,
    feature_noise_sigma: float = 0.0,
    kmeans_max_iters: int = 50,
    seed: int = 0,
) -> tuple[AggregatedDataset, GroundTruthAssignment]:
    """Recursively bisect the samples into 2^depth balanced groups.

    Clustering runs on L2-normalized feature rows (dense working copy),
    optionally perturbed by Gaussian noise of scale ``feature_noise_sigma``
    to inject extra within-group heterogeneity. Each tree node gets its own
    generator split, so the grouping is reproducible regardless of traversal
    or thread schedule.
    """
    n = ds.num_samples
    if depth < 0:
        raise ConfigError("depth must be >= 0")
    if 2**depth > n:
        raise ConfigError(f"2^{depth} groups exceed {n} samples")
    if feature_noise_sigma < 0:
        raise ConfigError("feature noise must be >= 0")

    dense = ds.features.to_dense()
    norms = np.sqrt((dense * dense).sum(axis=1))
    nz = norms > 0
    dense[nz] /= norms[nz, None]
    if feature_noise_sigma > 0:
        rng_noise = make_rng(seed, _KIND_HIER_GROUPING, 0)
        dense = dense + feature_noise_sigma * rng_noise.normal(size=dense.shape)
        norms = np.sqrt((dense * dense).sum(axis=1))
        nz = norms > 0
        dense[nz] /= norms[nz, None]

    blocks: list[np.ndarray] = []

    def recurse(subset: np.ndarray, level: int, node: int) -> None:
        if level == 0:
            blocks.append(np.sort(subset))
            return
        rng = make_rng(seed, _KIND_HIER_GROUPING, node)
        left, right = _balanced_split(dense, subset, rng, kmeans_max_iters)
        recurse(left, level - 1, 2 * node)
        recurse(right, level - 1, 2 * node + 1)

    recurse(np.arange(n, dtype=np.int64), depth, 1)
    return aggregate_blocks(ds, blocks)


def separated_unit_vectors(
    num: int, dim: int, min_distance: float, rng: np.random.Generator,
    max_attempts: int = 100_000,
) -> np.ndarray:
    """Rejection-sample unit vectors with pairwise distance >= min_distance."""
    if min_distance >= 2.0:
        # the closed extreme of the unit sphere: only an antipodal pair
        # attains distance 2, which rejection sampling hits with probability 0
        if num > 2:
            raise ConfigError("at most 2 unit vectors can be pairwise 2.0 apart")
        v = rng.normal(size=dim)
        v /= np.sqrt((v * v).sum())
        return np.vstack([v, -v][:num])
    rows: list[np.ndarray] = []
    attempts = 0
    while len(rows) < num:
        attempts += 1
        if attempts > max_attempts:
            raise ConfigError(
                f"could not place {num} unit vectors at separation "
                f"{min_distance} in {dim} dims within {max_attempts} draws"
            )
        v = rng.normal(size=dim)
        nrm = np.sqrt((v * v).sum())
        if nrm == 0.0:
            continue
        v = v / nrm
        if all(np.sqrt(((v - r) ** 2).sum()) >= min_distance for r in rows):
            rows.append(v)
    return np.vstack(rows)


def synth_clustered_dataset(
    n: int, d: int, l: int, sep: float, noise: float, seed: int
) -> tuple[XmcDataset, LabelEmbeddings]:
    """Single-label dataset whose samples scatter around per-label anchors.

    Each sample draws a label uniformly and a feature equal to that label's
    unit anchor plus Gaussian noise, renormalized to the sphere. ``noise=0``
    stores the anchors themselves, exactly. Returns the dataset together
    with the ground-truth anchors.
    """
    if l < 1 or l > 1024:
        raise ConfigError("label count must be in [1, 1024]")
    if sep <= 0:
        raise ConfigError("separation must be > 0")
    if noise < 0:
        raise ConfigError("noise must be >= 0")
    rng = make_rng(seed, _KIND_SYNTH)
    anchors = separated_unit_vectors(l, d, sep, rng)
    labels = rng.integers(0, l, size=n)
    if noise == 0:
        rows = anchors[labels].copy()
    else:
        raw = anchors[labels] + rng.normal(scale=noise, size=(n, d))
        rows = np.vstack([proj(raw[i], fallback=anchors[labels[i]]) for i in range(n)])
    features = SparseMatrix.from_dense(rows)
    label_trip = [(i, int(labels[i]), 1.0) for i in range(n)]
    labels_m = SparseMatrix.from_triplets(n, l, label_trip)
    ds = XmcDataset(features=features, labels=labels_m)
    return ds, LabelEmbeddings.from_rows(anchors)


def antipodal_pairs_dataset(
    num_groups: int = 3, d: int = 2
) -> tuple[XmcDataset, AggregatedDataset, GroundTruthAssignment]:
    """The two-label cancellation instance: groups of one +x and one -x sample.

    Feature x is the first basis vector. Even samples carry label 0 with
    feature +x, odd samples carry label 1 with feature -x; every group is
    annotated with both labels, so summed label embeddings cancel to zero
    while the per-sample structure is perfectly recoverable.
    """
    x = np.zeros(d)
    x[0] = 1.0
    rows = []
    label_trip = []
    for p in range(num_groups):
        rows.append(x)
        rows.append(-x)
        label_trip.append((2 * p, 0, 1.0))
        label_trip.append((2 * p + 1, 1, 1.0))
    ds = XmcDataset(
        features=SparseMatrix.from_dense(np.vstack(rows)),
        labels=SparseMatrix.from_triplets(2 * num_groups, 2, label_trip),
    )
    agg, truth = block_grouping(ds, 2)
    return ds, agg, truth
