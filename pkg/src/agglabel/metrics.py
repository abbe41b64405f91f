"""Ranking precision, assignment accuracy, and a cosine scorer for checks.

The nearest-embedding scorer is a deliberately simple stand-in for a full
multi-label trainer: it ranks labels per sample by cosine against the
learned embeddings, which is enough to compare pipelines end to end on
synthetic data.
"""

from __future__ import annotations

from dataclasses import dataclass
from io import StringIO
from typing import IO

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import InvalidInputError, SparseMatrix
from .dataio import GroundTruthAssignment
from .assign import AssignmentResult
from .embeddings import LabelEmbeddings

#: Score below any cosine, used to rank information-free labels last.
EMPTY_LABEL_SCORE = -2.0

#: Exact permutation matching is used up to this many labels.
EXACT_MATCH_LABEL_LIMIT = 64


@dataclass(frozen=True)
class RankedPrediction:
    """Per-sample label rankings: (label, score) descending by score,
    ties broken by ascending label index. ``flagged`` lists samples whose
    features were zero and therefore scored all labels alike."""

    rankings: list[list[tuple[int, float]]]
    flagged: tuple[int, ...] = ()


def precision_at_k(pred: RankedPrediction, truth: SparseMatrix, k: int) -> float:
    """Mean over samples of |top-k predictions ∩ true labels| / k.

    Samples ranking fewer than k labels are padded as misses.
    """
    if k < 1:
        raise InvalidInputError("k must be >= 1")
    if not pred.rankings:
        raise InvalidInputError("empty prediction set")
    if len(pred.rankings) != truth.rows:
        raise InvalidInputError(
            f"{len(pred.rankings)} predictions vs {truth.rows} truth rows"
        )
    total = 0.0
    for i, ranking in enumerate(pred.rankings):
        true_cols, _ = truth.row_slice(i)
        true_set = set(int(c) for c in true_cols)
        hits = sum(1 for label, _ in ranking[:k] if label in true_set)
        total += hits / k
    return total / truth.rows


def assignment_accuracy(
    result: AssignmentResult,
    truth: GroundTruthAssignment,
    permutation_tolerant: bool = False,
) -> float:
    """Fraction of (group, label) choices that picked a true carrier.

    With ``permutation_tolerant`` the labels are first globally relabeled by
    the accuracy-maximizing permutation (exact matching up to
    EXACT_MATCH_LABEL_LIMIT labels, greedy above), so solutions that recover
    the structure with swapped label identities score 1.0.
    """
    pairs = list(result.choices.items())
    if not pairs:
        raise InvalidInputError("assignment has no (group, label) pairs")
    for (j, k), _ in pairs:
        if (j, k) not in truth.carriers:
            raise InvalidInputError(f"ground truth does not cover pair ({j}, {k})")
    if not permutation_tolerant:
        hits = sum(1 for (j, k), i in pairs if truth.is_correct(j, k, i))
        return hits / len(pairs)

    labels = sorted({k for (_, k) in result.choices} | {k for (_, k) in truth.carriers})
    index = {k: a for a, k in enumerate(labels)}
    l = len(labels)
    hits = np.zeros((l, l), dtype=np.int64)
    for (j, k1), i in pairs:
        for k2 in labels:
            if truth.is_correct(j, k2, i):
                hits[index[k1], index[k2]] += 1
    if l <= EXACT_MATCH_LABEL_LIMIT:
        ri, ci = linear_sum_assignment(hits, maximize=True)
        best = int(hits[ri, ci].sum())
    else:
        best = 0
        used_rows: set[int] = set()
        used_cols: set[int] = set()
        order = np.dstack(np.unravel_index(np.argsort(-hits, axis=None, kind="stable"), hits.shape))[0]
        for r, c in order:
            if int(r) in used_rows or int(c) in used_cols:
                continue
            used_rows.add(int(r))
            used_cols.add(int(c))
            best += int(hits[r, c])
    return best / len(pairs)


def nearest_embedding_classifier(
    x_test: SparseMatrix, emb: LabelEmbeddings, k: int
) -> RankedPrediction:
    """Rank every label per test sample by cosine against its embedding.

    Zero-feature samples score all labels 0 and are flagged; labels with
    empty (flagged) embeddings score EMPTY_LABEL_SCORE so they sort last.
    """
    if k < 1:
        raise InvalidInputError("k must be >= 1")
    if x_test.cols != emb.dim:
        raise InvalidInputError(
            f"feature dim {x_test.cols} != embedding dim {emb.dim}"
        )
    l = emb.num_labels
    label_order = np.arange(l)
    rankings: list[list[tuple[int, float]]] = []
    flagged: list[int] = []
    row_norms = x_test.row_norms()
    top = min(k, l)
    for i in range(x_test.rows):
        if row_norms[i] <= 0:
            flagged.append(i)
            scores = np.zeros(l)
        else:
            cols, vals = x_test.row_slice(i)
            dots = emb.vectors[:, cols] @ vals
            scores = dots / row_norms[i]
            scores = np.clip(scores, -1.0, 1.0)
            scores = np.where(emb.empty_flags, EMPTY_LABEL_SCORE, scores)
        order = np.lexsort((label_order, -scores))[:top]
        rankings.append([(int(c), float(scores[c])) for c in order])
    return RankedPrediction(rankings, tuple(flagged))


def metrics_to_csv(
    values: list[tuple[str, int, float]], sink: IO[str] | None = None
) -> str:
    """Write "metric,k,value" rows."""
    out = sink if sink is not None else StringIO()
    out.write("metric,k,value\n")
    for name, k, v in values:
        out.write(f"{name},{k},{v!r}\n")
    return out.getvalue() if sink is None else ""
