"""Assign each group's labels to individual member samples.

Given learned label embeddings, every (group, label) annotation goes to the
member sample with the highest inner product against that label's embedding.
The result is a per-sample binary label matrix ready for any downstream
multi-label trainer. Also provides the soft-assignment mask used to weight
multi-instance logits in neural pipelines.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    DatasetIntegrityError,
    InvalidInputError,
    SparseMatrix,
    subset_row_dots,
)
from .dataio import AggregatedDataset, XmcDataset
from .embeddings import (
    LabelEmbeddings,
    LearnConfig,
    _learning_features,
    learn_all_embeddings,
)


@dataclass(frozen=True)
class AssignmentResult:
    """Filtered per-sample labels plus the raw (group, label) -> sample map.

    ``fallback_pairs`` lists the pairs whose label embedding carried no
    information (flagged empty); those labels went to the group's lowest
    member by policy rather than by similarity.
    """

    filtered: SparseMatrix
    choices: dict[tuple[int, int], int]
    fallback_pairs: frozenset[tuple[int, int]]


def assign_labels(
    ds: AggregatedDataset,
    emb: LabelEmbeddings,
    normalize_features: bool = True,
) -> AssignmentResult:
    """Give every (group, label) annotation to the best-matching member.

    Ties resolve to the lowest sample index. ``normalize_features`` must
    match the setting the embeddings were learned with so selection operates
    on the same vectors.
    """
    if emb.num_labels < ds.num_labels:
        raise InvalidInputError(
            f"embeddings cover {emb.num_labels} labels, dataset has {ds.num_labels}"
        )
    if emb.dim != ds.features.cols:
        raise InvalidInputError(
            f"embedding dim {emb.dim} != feature dim {ds.features.cols}"
        )
    features = _learning_features(ds, LearnConfig(normalize_features=normalize_features))
    members = ds.group_members()
    choices: dict[tuple[int, int], int] = {}
    fallback: set[tuple[int, int]] = set()
    triplets = []
    for j in range(ds.num_groups):
        mem = members[j]
        labels_j = ds.group_labels(j)
        if mem.size == 0:
            if labels_j.size:
                raise DatasetIntegrityError(f"group {j} has labels but no member samples")
            continue
        for k in labels_j:
            k = int(k)
            if emb.empty_flags[k]:
                chosen = int(mem[0])
                fallback.add((j, k))
            else:
                dots = subset_row_dots(features, mem, emb.row(k))
                chosen = int(mem[int(np.argmax(dots))])
            choices[(j, k)] = chosen
            triplets.append((chosen, k, 1.0))
    filtered = SparseMatrix.from_triplets(ds.num_samples, ds.num_labels, triplets)
    return AssignmentResult(filtered, choices, frozenset(fallback))


@dataclass(frozen=True)
class PipelineResult:
    dataset: XmcDataset
    embeddings: LabelEmbeddings
    assignment: AssignmentResult


def run_pipeline(
    ds: AggregatedDataset,
    cfg: LearnConfig = LearnConfig(),
    threads: int = 1,
) -> PipelineResult:
    """Learn all label embeddings, then assign the group labels.

    ``cfg.iters = 0`` skips the iterative refinement and assigns with the
    initialization embeddings only (the no-learning baseline). The returned
    dataset pairs the original, un-normalized features with the filtered
    labels.
    """
    emb = learn_all_embeddings(ds, cfg, threads=threads)
    assignment = assign_labels(ds, emb, normalize_features=cfg.normalize_features)
    out = XmcDataset(features=ds.features, labels=assignment.filtered)
    return PipelineResult(out, emb, assignment)


def soft_assignment_mask(
    group_features: np.ndarray,
    emb: LabelEmbeddings,
    tau: float,
) -> np.ndarray:
    """Instance-affinity mask: per label column, g * softmax(tau * scores).

    ``group_features`` is a dense (group size x dim) block of instances.
    Each column of the result sums to the group size; ``tau = 0`` yields the
    exact all-ones matrix and ``tau -> inf`` approaches hard assignment of
    each label to its best instance.
    """
    g_feats = np.asarray(group_features, dtype=np.float64)
    if g_feats.ndim != 2 or g_feats.shape[0] < 1:
        raise InvalidInputError("group features must be a nonempty 2-d block")
    if not np.all(np.isfinite(g_feats)):
        raise InvalidInputError("group features contain non-finite entries")
    if not np.isfinite(tau) or tau < 0:
        raise InvalidInputError("tau must be finite and >= 0")
    if g_feats.shape[1] != emb.dim:
        raise InvalidInputError(
            f"feature dim {g_feats.shape[1]} != embedding dim {emb.dim}"
        )
    g = g_feats.shape[0]
    if tau == 0.0:
        return np.ones((g, emb.num_labels), dtype=np.float64)
    scores = tau * (g_feats @ emb.vectors.T)
    scores -= scores.max(axis=0, keepdims=True)
    w = np.exp(scores)
    return g * (w / w.sum(axis=0, keepdims=True))
