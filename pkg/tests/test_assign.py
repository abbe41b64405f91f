import math

import numpy as np
import pytest

from agglabel.core import (
    DatasetIntegrityError,
    InvalidInputError,
    SparseMatrix,
    make_rng,
)
from agglabel.dataio import AggregatedDataset, XmcDataset
from agglabel.embeddings import LabelEmbeddings, LearnConfig
from agglabel.grouping import (
    antipodal_pairs_dataset,
    block_grouping,
    random_grouping,
    synth_clustered_dataset,
)
from agglabel.metrics import assignment_accuracy
from agglabel.assign import assign_labels, run_pipeline, soft_assignment_mask


class TestAssign:
    def test_cancellation_instance_split(self):
        _, agg, truth = antipodal_pairs_dataset()
        emb = LabelEmbeddings.from_rows(np.array([[1.0, 0.0], [-1.0, 0.0]]))
        result = assign_labels(agg, emb)
        for j in range(3):
            assert result.choices[(j, 0)] == 2 * j
            assert result.choices[(j, 1)] == 2 * j + 1
        assert assignment_accuracy(result, truth) == 1.0

    def test_swapped_embeddings_still_perfect_up_to_permutation(self):
        _, agg, truth = antipodal_pairs_dataset()
        emb = LabelEmbeddings.from_rows(np.array([[-1.0, 0.0], [1.0, 0.0]]))
        result = assign_labels(agg, emb)
        assert assignment_accuracy(result, truth) == 0.0
        assert assignment_accuracy(result, truth, permutation_tolerant=True) == 1.0

    def test_singleton_groups_reproduce_product(self):
        rng = make_rng(100)
        rows = rng.normal(size=(6, 3))
        labs = [(i, i % 2, 1.0) for i in range(6)]
        ds = XmcDataset(
            features=SparseMatrix.from_dense(rows),
            labels=SparseMatrix.from_triplets(6, 2, labs),
        )
        agg, _ = block_grouping(ds, 1)
        emb = LabelEmbeddings.from_rows(np.eye(2, 3))
        result = assign_labels(agg, emb)
        product = agg.sample_to_group.to_dense() @ agg.group_to_label.to_dense()
        np.testing.assert_array_equal(result.filtered.to_dense(), product)

    def test_every_positive_pair_assigned_once(self):
        ds, _ = synth_clustered_dataset(60, 6, 5, sep=1.0, noise=0.4, seed=101)
        agg, _ = random_grouping(ds, 4, seed=102)
        emb = LabelEmbeddings.from_rows(
            make_rng(103).normal(size=(5, 6))
            / np.linalg.norm(make_rng(103).normal(size=(5, 6)), axis=1, keepdims=True)
        )
        result = assign_labels(agg, emb)
        pair_count = sum(agg.group_labels(j).size for j in range(agg.num_groups))
        assert len(result.choices) == pair_count
        assert result.filtered.nnz == pair_count
        for (j, k), i in result.choices.items():
            assert i in agg.group_members()[j].tolist()
            assert k in agg.group_labels(j).tolist()

    def test_feature_scale_invariance_of_choices(self):
        ds, _ = synth_clustered_dataset(40, 5, 4, sep=1.0, noise=0.4, seed=104)
        agg, _ = random_grouping(ds, 4, seed=105)
        scaled = AggregatedDataset(
            features=SparseMatrix(
                agg.features.rows,
                agg.features.cols,
                agg.features.row_offsets,
                agg.features.col_indices,
                agg.features.values * 11.0,
            ),
            sample_to_group=agg.sample_to_group,
            group_to_label=agg.group_to_label,
        )
        rows = make_rng(106).normal(size=(4, 5))
        rows /= np.linalg.norm(rows, axis=1, keepdims=True)
        emb = LabelEmbeddings.from_rows(rows)
        a = assign_labels(agg, emb, normalize_features=False)
        b = assign_labels(scaled, emb, normalize_features=False)
        assert a.choices == b.choices

    def test_permutation_equivariance(self):
        # renaming samples within groups renames the chosen samples and
        # leaves accuracy unchanged
        ds, _ = synth_clustered_dataset(24, 5, 3, sep=1.0, noise=0.4, seed=107)
        agg, truth = random_grouping(ds, 3, seed=108)
        rows = make_rng(109).normal(size=(3, 5))
        rows /= np.linalg.norm(rows, axis=1, keepdims=True)
        emb = LabelEmbeddings.from_rows(rows)
        base = assign_labels(agg, emb)
        perm = make_rng(110).permutation(24)
        inv = np.empty(24, dtype=int)
        inv[perm] = np.arange(24)
        dense = ds.features.to_dense()[perm]
        labs = []
        for i in range(24):
            for k in ds.labels_of(int(perm[i])):
                labs.append((i, int(k), 1.0))
        ds2 = XmcDataset(
            features=SparseMatrix.from_dense(dense),
            labels=SparseMatrix.from_triplets(24, 3, labs),
        )
        members = agg.group_members()
        blocks2 = [np.sort(inv[m]) for m in members]
        from agglabel.grouping import aggregate_blocks

        agg2, truth2 = aggregate_blocks(ds2, blocks2)
        moved = assign_labels(agg2, emb)
        for (j, k), i in base.choices.items():
            assert moved.choices[(j, k)] == int(inv[i])
        assert assignment_accuracy(base, truth) == pytest.approx(
            assignment_accuracy(moved, truth2)
        )

    def test_empty_embedding_falls_back_to_lowest_member(self):
        feats = SparseMatrix.from_dense(np.zeros((3, 2)))
        labs = SparseMatrix.from_triplets(3, 1, [(0, 0, 1.0), (1, 0, 1.0), (2, 0, 1.0)])
        ds = XmcDataset(features=feats, labels=labs)
        agg, _ = block_grouping(ds, 3)
        emb = LabelEmbeddings(np.zeros((1, 2)), np.array([True]))
        result = assign_labels(agg, emb)
        assert result.choices[(0, 0)] == 0
        assert result.fallback_pairs == frozenset({(0, 0)})

    def test_group_without_members_rejected(self):
        feats = SparseMatrix.from_dense(np.eye(2))
        y1 = SparseMatrix.from_triplets(2, 2, [(0, 0, 1.0), (1, 0, 1.0)])
        y2 = SparseMatrix.from_triplets(2, 1, [(0, 0, 1.0), (1, 0, 1.0)])
        agg = AggregatedDataset(features=feats, sample_to_group=y1, group_to_label=y2)
        emb = LabelEmbeddings.from_rows(np.array([[1.0, 0.0]]))
        with pytest.raises(DatasetIntegrityError):
            assign_labels(agg, emb)

    def test_dimension_mismatch(self):
        _, agg, _ = antipodal_pairs_dataset()
        emb = LabelEmbeddings.from_rows(np.eye(2, 5))
        with pytest.raises(InvalidInputError):
            assign_labels(agg, emb)
        narrow = LabelEmbeddings.from_rows(np.array([[1.0, 0.0]]))
        with pytest.raises(InvalidInputError):
            assign_labels(agg, narrow)


class TestPipeline:
    def test_no_learning_on_singletons_is_identity(self):
        rng = make_rng(111)
        rows = rng.normal(size=(8, 4))
        labs = [(i, i % 3, 1.0) for i in range(8)]
        ds = XmcDataset(
            features=SparseMatrix.from_dense(rows),
            labels=SparseMatrix.from_triplets(8, 3, labs),
        )
        agg, _ = block_grouping(ds, 1)
        result = run_pipeline(agg, LearnConfig(iters=0))
        assert result.dataset.labels == ds.labels
        assert result.dataset.features == ds.features

    def test_cancellation_instance_recovered(self):
        ds, agg, truth = antipodal_pairs_dataset()
        result = run_pipeline(agg, LearnConfig(iters=20))
        acc = assignment_accuracy(result.assignment, truth, permutation_tolerant=True)
        assert acc == 1.0
        per_sample = result.dataset.labels.to_dense()
        assert np.all(per_sample.sum(axis=1) == 1)
        assert np.array_equal(per_sample[0::2], np.tile(per_sample[0], (3, 1)))
        assert np.array_equal(per_sample[1::2], np.tile(per_sample[1], (3, 1)))
        assert not np.array_equal(per_sample[0], per_sample[1])

    def test_learning_beats_no_learning(self):
        better = 0
        for seed in range(3):
            ds, _ = synth_clustered_dataset(300, 12, 8, sep=1.0, noise=0.35, seed=112 + seed)
            agg, truth = random_grouping(ds, 4, seed=120 + seed)
            full = run_pipeline(agg, LearnConfig(iters=20))
            none = run_pipeline(agg, LearnConfig(iters=0))
            acc_full = assignment_accuracy(full.assignment, truth, permutation_tolerant=True)
            acc_none = assignment_accuracy(none.assignment, truth, permutation_tolerant=True)
            if acc_full >= acc_none:
                better += 1
        assert better >= 2


class TestSoftAssignmentMask:
    def test_zero_temperature_all_ones(self):
        rng = make_rng(130)
        rows = rng.normal(size=(3, 4))
        rows /= np.linalg.norm(rows, axis=1, keepdims=True)
        emb = LabelEmbeddings.from_rows(rows)
        feats = rng.normal(size=(5, 4))
        mask = soft_assignment_mask(feats, emb, tau=0.0)
        assert mask.shape == (5, 3)
        assert np.all(mask == 1.0)

    def test_columns_sum_to_group_size(self):
        rng = make_rng(131)
        for _ in range(100):
            g = int(rng.integers(1, 9))
            l = int(rng.integers(1, 7))
            d = int(rng.integers(2, 6))
            rows = rng.normal(size=(l, d))
            rows /= np.linalg.norm(rows, axis=1, keepdims=True)
            emb = LabelEmbeddings.from_rows(rows)
            feats = rng.normal(size=(g, d))
            tau = float(rng.uniform(0, 50))
            mask = soft_assignment_mask(feats, emb, tau)
            np.testing.assert_allclose(mask.sum(axis=0), g, atol=1e-9)

    def test_hard_limit(self):
        emb = LabelEmbeddings.from_rows(np.array([[1.0, 0.0]]))
        feats = np.array([[1.0, 0.0], [0.5, 0.5], [-1.0, 0.0]])
        mask = soft_assignment_mask(feats, emb, tau=1e6)
        np.testing.assert_allclose(mask[:, 0], [3.0, 0.0, 0.0], atol=1e-9)

    def test_two_instance_closed_form(self):
        # scores 1 and 0 at tau=1: column is [2e/(e+1), 2/(e+1)]
        emb = LabelEmbeddings.from_rows(np.array([[1.0, 0.0]]))
        feats = np.array([[1.0, 0.0], [0.0, 0.0]])
        mask = soft_assignment_mask(feats, emb, tau=1.0)
        e = math.e
        np.testing.assert_allclose(
            mask[:, 0], [2 * e / (e + 1), 2 / (e + 1)], atol=1e-12
        )

    def test_monotone_hardening(self):
        rng = make_rng(132)
        rows = rng.normal(size=(4, 6))
        rows /= np.linalg.norm(rows, axis=1, keepdims=True)
        emb = LabelEmbeddings.from_rows(rows)
        feats = rng.normal(size=(5, 6))
        scores = feats @ rows.T
        argmaxes = scores.argmax(axis=0)
        prev = np.zeros(4)
        for tau in [0.0, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0]:
            mask = soft_assignment_mask(feats, emb, tau)
            tops = mask[argmaxes, np.arange(4)]
            assert np.all(tops >= prev - 1e-12)
            prev = tops

    def test_invalid_inputs(self):
        emb = LabelEmbeddings.from_rows(np.array([[1.0, 0.0]]))
        with pytest.raises(InvalidInputError):
            soft_assignment_mask(np.array([[np.nan, 0.0]]), emb, 1.0)
        with pytest.raises(InvalidInputError):
            soft_assignment_mask(np.array([[1.0, 0.0]]), emb, -1.0)
        with pytest.raises(InvalidInputError):
            soft_assignment_mask(np.array([[1.0, 0.0, 0.0]]), emb, 1.0)
        with pytest.raises(InvalidInputError):
            soft_assignment_mask(np.empty((0, 2)), emb, 1.0)
