"""Dataset records, the sparse text format, and ground-truth diagnostics.

The text format (one dataset per file/stream):

    n d l
    k1,k2,...  f1:v1 f2:v2 ...
    ...                             (n data lines total)

Header: sample count, feature dimension, label count. Each data line starts
with a comma-separated 0-based label list (empty list = the line starts with
a space), followed by space-separated ``feature:value`` pairs. Values use the
shortest decimal representation that round-trips exactly, so
``parse_xmc(write_xmc(ds))`` reproduces ``ds`` bit for bit. UTF-8, "\\n" line
endings, no trailing whitespace.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from io import StringIO
from typing import IO, Iterable

import numpy as np

from .core import (
    InvalidInputError,
    ParseError,
    SparseMatrix,
    l2_norm,
)

#: Exhaustive subset enumeration for noise diagnostics is limited to this
#: many vectors (2^15 subsets).
ENUMERATION_LIMIT = 15


@dataclass(frozen=True)
class XmcDataset:
    """Per-sample features plus a binary sample-to-label matrix."""

    features: SparseMatrix
    labels: SparseMatrix

    def __post_init__(self):
        if self.features.rows != self.labels.rows:
            raise InvalidInputError(
                f"feature rows {self.features.rows} != label rows {self.labels.rows}"
            )
        if self.labels.nnz and not np.all(self.labels.values == 1.0):
            raise InvalidInputError("label matrix must be binary (all values 1.0)")

    @property
    def num_samples(self) -> int:
        return self.features.rows

    @property
    def num_features(self) -> int:
        return self.features.cols

    @property
    def num_labels(self) -> int:
        return self.labels.cols

    def labels_of(self, sample: int) -> np.ndarray:
        cols, _ = self.labels.row_slice(sample)
        return cols


@dataclass(frozen=True)
class AggregatedDataset:
    """Features plus the two-level annotation: samples -> groups -> labels.

    ``sample_to_group`` is n x m binary with exactly one nonzero per row;
    ``group_to_label`` is m x l binary. ``label_multiplicity`` optionally
    records, for (group, label) pairs, how many member samples contributed
    that label during aggregation (list-merge repetition count); pairs absent
    from the map have multiplicity 1.
    """

    features: SparseMatrix
    sample_to_group: SparseMatrix
    group_to_label: SparseMatrix
    label_multiplicity: dict[tuple[int, int], int] | None = None

    def __post_init__(self):
        y1, y2 = self.sample_to_group, self.group_to_label
        if self.features.rows != y1.rows:
            raise InvalidInputError(
                f"feature rows {self.features.rows} != membership rows {y1.rows}"
            )
        if y1.cols != y2.rows:
            raise InvalidInputError(
                f"group count mismatch: membership has {y1.cols}, labels have {y2.rows}"
            )
        counts = np.diff(y1.row_offsets)
        if y1.rows and not np.all(counts == 1):
            bad = int(np.flatnonzero(counts != 1)[0])
            raise InvalidInputError(
                f"sample {bad} belongs to {int(counts[bad])} groups (expected exactly 1)"
            )
        if y1.nnz and not np.all(y1.values == 1.0):
            raise InvalidInputError("sample-to-group matrix must be binary")
        if y2.nnz and not np.all(y2.values == 1.0):
            raise InvalidInputError("group-to-label matrix must be binary")

    @property
    def num_samples(self) -> int:
        return self.features.rows

    @property
    def num_groups(self) -> int:
        return self.sample_to_group.cols

    @property
    def num_labels(self) -> int:
        return self.group_to_label.cols

    @property
    def avg_group_size(self) -> float:
        return self.sample_to_group.nnz / self.num_groups

    def group_members(self) -> list[np.ndarray]:
        """N_j for every group j: ascending member sample indices."""
        members: list[list[int]] = [[] for _ in range(self.num_groups)]
        y1 = self.sample_to_group
        for i in range(y1.rows):
            cols, _ = y1.row_slice(i)
            members[int(cols[0])].append(i)
        return [np.asarray(m, dtype=np.int64) for m in members]

    def label_groups(self) -> list[np.ndarray]:
        """M_k for every label k: ascending group indices annotated with k."""
        out: list[list[int]] = [[] for _ in range(self.num_labels)]
        y2 = self.group_to_label
        for j in range(y2.rows):
            cols, _ = y2.row_slice(j)
            for k in cols:
                out[int(k)].append(j)
        return [np.asarray(m, dtype=np.int64) for m in out]

    def group_labels(self, group: int) -> np.ndarray:
        """L_j: ascending label indices of one group."""
        cols, _ = self.group_to_label.row_slice(group)
        return cols

    def multiplicity(self, group: int, label: int) -> int:
        if self.label_multiplicity is None:
            return 1
        return self.label_multiplicity.get((group, label), 1)


@dataclass(frozen=True)
class GroundTruthAssignment:
    """Which member sample(s) contributed each (group, label) annotation.

    ``carriers[(j, k)]`` is the ascending tuple of samples in group j that
    truly carry label k; synthetic groupers always produce at least one.
    """

    carriers: dict[tuple[int, int], tuple[int, ...]]

    def pairs(self) -> Iterable[tuple[int, int]]:
        return self.carriers.keys()

    def is_correct(self, group: int, label: int, sample: int) -> bool:
        return sample in self.carriers.get((group, label), ())


@dataclass(frozen=True)
class DatasetDiagnostics:
    """Separation / overlap / noise-influence summary of a labelled dataset.

    ``noise_influence`` is the worst subset-averaged noise norm over all
    nonempty subsets when ``noise_influence_exact`` is set; otherwise it is
    the full-set mean norm only, a lower bound on the true value.
    ``noise_influence_by_fraction`` maps each admissible subset fraction
    s/m to the exact maximum over subsets of size <= s (present only when
    enumeration was feasible).
    """

    min_separation: float
    max_group_overlap: float
    noise_influence: float
    noise_influence_exact: bool
    noise_influence_by_fraction: dict[float, float] | None


# ---------------------------------------------------------------------------
# text format


def _parse_header(line: str) -> tuple[int, int, int]:
    parts = line.split(" ")
    if len(parts) != 3:
        raise ParseError(f"header must be 'n d l', got {line!r}", line=1)
    try:
        n, d, l = (int(p) for p in parts)
    except ValueError:
        raise ParseError(f"non-integer header field in {line!r}", line=1) from None
    if n < 0 or d < 0 or l < 0:
        raise ParseError("header counts must be non-negative", line=1)
    return n, d, l


def parse_xmc(source: str | IO[str]) -> XmcDataset:
    """Parse the text format into a dataset.

    Labels are deduplicated and sorted per row; duplicate feature indices on
    one line are summed. Any index at or above its declared bound raises
    ``ParseError`` naming the offending 1-based line.
    """
    text = source if isinstance(source, str) else source.read()
    lines = text.splitlines()
    if not lines:
        raise ParseError("empty input", line=1)
    n, d, l = _parse_header(lines[0])
    if len(lines) < n + 1:
        raise ParseError(f"expected {n} data lines, found {len(lines) - 1}", line=len(lines))
    for extra in lines[n + 1:]:
        if extra.strip():
            raise ParseError("unexpected content after data lines", line=n + 2)

    label_trip: list[tuple[int, int, float]] = []
    feat_trip: list[tuple[int, int, float]] = []
    for i in range(n):
        lineno = i + 2
        line = lines[i + 1]
        if line.startswith(" "):
            label_part, feat_part = "", line[1:]
        else:
            head, _, rest = line.partition(" ")
            label_part, feat_part = head, rest
        if label_part:
            row_labels = set()
            for tok in label_part.split(","):
                try:
                    k = int(tok)
                except ValueError:
                    raise ParseError(f"bad label index {tok!r}", line=lineno) from None
                if not 0 <= k < l:
                    raise ParseError(f"label {k} out of range [0, {l})", line=lineno)
                row_labels.add(k)
            label_trip.extend((i, k, 1.0) for k in sorted(row_labels))
        if feat_part:
            for tok in feat_part.split(" "):
                if not tok:
                    raise ParseError("extra whitespace between features", line=lineno)
                f, sep, val = tok.partition(":")
                if not sep:
                    raise ParseError(f"feature token {tok!r} missing ':'", line=lineno)
                try:
                    fi = int(f)
                    fv = float(val)
                except ValueError:
                    raise ParseError(f"bad feature token {tok!r}", line=lineno) from None
                if not math.isfinite(fv):
                    raise ParseError(f"non-finite value in {tok!r}", line=lineno)
                if not 0 <= fi < d:
                    raise ParseError(f"feature {fi} out of range [0, {d})", line=lineno)
                feat_trip.append((i, fi, fv))
    features = SparseMatrix.from_triplets(n, d, feat_trip)
    labels = SparseMatrix.from_triplets(n, l, label_trip)
    return XmcDataset(features=features, labels=labels)


def _format_value(v: float) -> str:
    return repr(float(v))


def write_xmc(ds: XmcDataset, sink: IO[str] | None = None) -> str:
    """Serialize a dataset; inverse of ``parse_xmc`` on canonical-form data."""
    out = sink if sink is not None else StringIO()
    out.write(f"{ds.num_samples} {ds.num_features} {ds.num_labels}\n")
    for i in range(ds.num_samples):
        lab_cols, _ = ds.labels.row_slice(i)
        feat_cols, feat_vals = ds.features.row_slice(i)
        parts = []
        if feat_cols.size:
            parts = [f"{int(c)}:{_format_value(v)}" for c, v in zip(feat_cols, feat_vals)]
        label_str = ",".join(str(int(k)) for k in lab_cols)
        if parts:
            out.write(label_str + " " + " ".join(parts) + "\n")
        else:
            out.write(label_str + "\n")
    return out.getvalue() if sink is None else ""


def write_sparse_matrix(m: SparseMatrix, sink: IO[str] | None = None) -> str:
    """Write a bare sparse matrix using the same line syntax (zero labels)."""
    empty = SparseMatrix.from_triplets(m.rows, 0, [])
    return write_xmc(XmcDataset(features=m, labels=empty), sink)


def parse_sparse_matrix(source: str | IO[str]) -> SparseMatrix:
    return parse_xmc(source).features


# ---------------------------------------------------------------------------
# diagnostics


def _subset_maxima(noise: np.ndarray) -> dict[float, float]:
    """Exact max of (1/|S|)||sum_{i in S} eps_i|| per admissible size fraction.

    Enumerates all 2^m - 1 nonempty subsets with a shared-prefix dynamic
    program; feasible for m <= ENUMERATION_LIMIT.
    """
    m, d = noise.shape
    sums = np.zeros((1 << m, d), dtype=np.float64)
    best_by_size = np.zeros(m + 1, dtype=np.float64)
    for mask in range(1, 1 << m):
        low = (mask & -mask).bit_length() - 1
        sums[mask] = sums[mask & (mask - 1)] + noise[low]
        size = mask.bit_count()
        val = l2_norm(sums[mask]) / size
        if val > best_by_size[size]:
            best_by_size[size] = val
    running = 0.0
    out: dict[float, float] = {}
    for s in range(1, m + 1):
        running = max(running, best_by_size[s])
        out[s / m] = running
    return out


def diagnostics(
    true_embeddings: np.ndarray,
    agg: AggregatedDataset,
    noise: list[np.ndarray] | np.ndarray,
) -> DatasetDiagnostics:
    """Separation, overlap, and noise-influence diagnostics.

    ``true_embeddings`` must have unit-norm rows (one per label). ``noise``
    holds one vector per enumeration unit (typically the per-group noise of
    the relevant sample); subsets of this list are what the influence measure
    ranges over.
    """
    emb = np.asarray(true_embeddings, dtype=np.float64)
    if emb.ndim != 2:
        raise InvalidInputError("embeddings must be a 2-d array")
    norms = np.sqrt((emb * emb).sum(axis=1))
    if emb.shape[0] and np.max(np.abs(norms - 1.0)) > 1e-9:
        raise InvalidInputError("embeddings must have unit-norm rows")

    l = emb.shape[0]
    min_sep = math.inf
    for a in range(l):
        for b in range(a + 1, l):
            min_sep = min(min_sep, l2_norm(emb[a] - emb[b]))

    groups_of = agg.label_groups()
    overlap = 0.0
    for a in range(agg.num_labels):
        sa = set(groups_of[a].tolist())
        if not sa:
            continue
        for b in range(a + 1, agg.num_labels):
            sb = set(groups_of[b].tolist())
            if not sb:
                continue
            ratio = len(sa & sb) / min(len(sa), len(sb))
            overlap = max(overlap, ratio)

    eps = np.asarray(noise, dtype=np.float64)
    if eps.ndim != 2:
        raise InvalidInputError("noise must be a list of equal-length vectors")
    m = eps.shape[0]
    if m == 0:
        return DatasetDiagnostics(min_sep, overlap, 0.0, True, {})
    if m <= ENUMERATION_LIMIT:
        by_frac = _subset_maxima(eps)
        return DatasetDiagnostics(min_sep, overlap, by_frac[1.0], True, by_frac)
    lower = l2_norm(eps.sum(axis=0)) / m
    return DatasetDiagnostics(min_sep, overlap, lower, False, None)
