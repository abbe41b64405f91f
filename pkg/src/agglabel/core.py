"""Deterministic sparse/dense linear-algebra primitives shared by all modules.

Everything here is pure and single-threaded by construction: reductions never
reorder with thread count, so results are bit-reproducible for fixed inputs.
All accumulation is in float64. Norm computations go through ``(v * v).sum()``
(numpy's single-threaded pairwise reduction) rather than BLAS, which may
split work across threads for large vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

#: Norms at or below this are treated as zero (degenerate direction).
NORM_FLOOR = 1e-12


class AggLabelError(Exception):
    """Base class for all library errors."""


class InvalidInputError(AggLabelError, ValueError):
    """Operation preconditions violated (non-finite entries, zero norms, ...)."""


class BoundsError(AggLabelError, IndexError):
    """Row/column index outside the matrix shape."""


class ParseError(AggLabelError, ValueError):
    """Malformed text input. Carries a 1-based line number when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigError(AggLabelError, ValueError):
    """Invalid configuration (group size, depth, sigma lists, ...)."""


class InfeasibleError(AggLabelError, RuntimeError):
    """Requested exhaustive computation exceeds its enumeration bound."""


class EmptyLabelError(AggLabelError, ValueError):
    """Label has no positively annotated group."""


class DatasetIntegrityError(AggLabelError, ValueError):
    """Structurally broken dataset (e.g. a group with no member samples)."""


class SingularSystemError(AggLabelError, RuntimeError):
    """Least-squares system is rank deficient."""


def make_rng(seed: int, *path: int) -> np.random.Generator:
    """Return a counter-based generator for ``seed`` and a split path.

    Uses Philox keyed through ``SeedSequence(seed, spawn_key=path)``: the
    same (seed, path) yields the same stream on every platform, and distinct
    paths give statistically independent streams. All randomness in the
    library flows through this function so that parallel schedules cannot
    change results.
    """
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(path))
    return np.random.Generator(np.random.Philox(ss))


def _check_finite(a: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{what} contains non-finite entries")


def l2_norm(v: np.ndarray) -> float:
    """Deterministic L2 norm (no BLAS; pairwise single-threaded sum)."""
    v = np.asarray(v, dtype=np.float64)
    return float(np.sqrt((v * v).sum()))


def proj(v: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    """Normalize ``v`` to the unit sphere, or return ``fallback`` if degenerate.

    ``fallback`` must itself be unit norm; it makes the zero-vector policy an
    explicit, visible decision at every call site. Norms at or below
    ``NORM_FLOOR`` (including underflow) count as degenerate.
    """
    v = np.asarray(v, dtype=np.float64)
    fallback = np.asarray(fallback, dtype=np.float64)
    if v.shape != fallback.shape:
        raise InvalidInputError(
            f"proj: shape mismatch {v.shape} vs fallback {fallback.shape}"
        )
    _check_finite(v, "proj input")
    _check_finite(fallback, "proj fallback")
    if abs(l2_norm(fallback) - 1.0) > 1e-9:
        raise InvalidInputError("proj fallback must have unit norm")
    n = l2_norm(v)
    if n <= NORM_FLOOR:
        return fallback.copy()
    return v / n


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity, clamped to [-1, 1]. Zero-norm input is an error."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    _check_finite(u, "cosine input")
    _check_finite(v, "cosine input")
    nu = l2_norm(u)
    nv = l2_norm(v)
    if nu <= NORM_FLOOR or nv <= NORM_FLOOR:
        raise InvalidInputError("cosine requires nonzero-norm arguments")
    c = float((u * v).sum()) / (nu * nv)
    return min(1.0, max(-1.0, c))


@dataclass(frozen=True)
class SparseMatrix:
    """Immutable CSR matrix.

    Invariants (enforced by the constructors below):
      * ``row_offsets`` has length ``rows + 1``, is non-decreasing, and ends
        at ``len(col_indices)``.
      * Column indices are strictly increasing within each row and < cols.
      * No explicitly stored zeros after construction from triplets
        (duplicate triplets are summed; exact-zero results are dropped).
    """

    rows: int
    cols: int
    row_offsets: np.ndarray = field(repr=False)
    col_indices: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)

    @staticmethod
    def from_triplets(
        rows: int,
        cols: int,
        entries: list[tuple[int, int, float]] | np.ndarray,
    ) -> "SparseMatrix":
        """Build from (row, col, value) triplets.

        Duplicates are summed; entries that sum to exactly zero are dropped.
        """
        if rows < 0 or cols < 0:
            raise InvalidInputError("matrix dimensions must be non-negative")
        arr = np.asarray(entries, dtype=np.float64)
        if arr.size == 0:
            arr = arr.reshape(0, 3)
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise InvalidInputError("entries must be (row, col, value) triplets")
        r = arr[:, 0].astype(np.int64)
        c = arr[:, 1].astype(np.int64)
        v = arr[:, 2].astype(np.float64)
        _check_finite(v, "triplet values")
        if r.size:
            if r.min() < 0 or r.max() >= rows:
                raise BoundsError("triplet row index out of range")
            if c.min() < 0 or c.max() >= cols:
                raise BoundsError("triplet column index out of range")
        # Sort by (row, col), then sum duplicates in order.
        order = np.lexsort((c, r))
        r, c, v = r[order], c[order], v[order]
        if r.size:
            boundary = np.empty(r.size, dtype=bool)
            boundary[0] = True
            boundary[1:] = (r[1:] != r[:-1]) | (c[1:] != c[:-1])
            group_ids = np.cumsum(boundary) - 1
            summed = np.zeros(int(group_ids[-1]) + 1, dtype=np.float64)
            np.add.at(summed, group_ids, v)
            r = r[boundary]
            c = c[boundary]
            v = summed
            keep = v != 0.0
            r, c, v = r[keep], c[keep], v[keep]
        offsets = np.zeros(rows + 1, dtype=np.int64)
        np.add.at(offsets, r + 1, 1)
        offsets = np.cumsum(offsets)
        return SparseMatrix(rows, cols, offsets, c, v)

    @staticmethod
    def from_dense(a: np.ndarray) -> "SparseMatrix":
        a = np.asarray(a, dtype=np.float64)
        if a.ndim != 2:
            raise InvalidInputError("from_dense expects a 2-d array")
        r, c = np.nonzero(a)
        trip = np.column_stack([r, c, a[r, c]])
        return SparseMatrix.from_triplets(a.shape[0], a.shape[1], trip)

    @property
    def nnz(self) -> int:
        return int(self.values.size)

    def row_slice(self, row: int) -> tuple[np.ndarray, np.ndarray]:
        """(column indices, values) of one row, ascending columns."""
        if not 0 <= row < self.rows:
            raise BoundsError(f"row {row} out of range [0, {self.rows})")
        s, e = int(self.row_offsets[row]), int(self.row_offsets[row + 1])
        return self.col_indices[s:e], self.values[s:e]

    def row_dense(self, row: int) -> np.ndarray:
        cols, vals = self.row_slice(row)
        out = np.zeros(self.cols, dtype=np.float64)
        out[cols] = vals
        return out

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.rows, self.cols), dtype=np.float64)
        for i in range(self.rows):
            cols, vals = self.row_slice(i)
            out[i, cols] = vals
        return out

    def row_norms(self) -> np.ndarray:
        """L2 norm of every row."""
        sq = self.values * self.values
        out = np.zeros(self.rows, dtype=np.float64)
        lengths = np.diff(self.row_offsets)
        nonempty = np.flatnonzero(lengths > 0)
        if nonempty.size:
            out[nonempty] = np.add.reduceat(sq, self.row_offsets[nonempty])
        return np.sqrt(out)

    def transpose(self) -> "SparseMatrix":
        rows = np.repeat(np.arange(self.rows, dtype=np.int64), np.diff(self.row_offsets))
        trip = np.column_stack([self.col_indices, rows, self.values])
        return SparseMatrix.from_triplets(self.cols, self.rows, trip)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SparseMatrix):
            return NotImplemented
        return (
            self.rows == other.rows
            and self.cols == other.cols
            and np.array_equal(self.row_offsets, other.row_offsets)
            and np.array_equal(self.col_indices, other.col_indices)
            and np.array_equal(self.values, other.values)
        )


def sparse_row_dot(m: SparseMatrix, row: int, v: np.ndarray) -> float:
    """Inner product of one sparse row with a dense vector.

    Summation runs in ascending column order, sequentially, so the result is
    identical for every thread count and platform with the same inputs.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] != m.cols:
        raise InvalidInputError(f"vector dim {v.shape} does not match cols {m.cols}")
    _check_finite(v, "sparse_row_dot vector")
    cols, vals = m.row_slice(row)
    acc = 0.0
    for j in range(cols.size):
        acc += vals[j] * v[cols[j]]
    return float(acc)


def subset_row_dots(m: SparseMatrix, rows: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Vectorized ``[row . v for row in rows]`` sharing one code path.

    Deterministic (single-threaded reduceat); agrees with sparse_row_dot to
    floating-point reassociation level (tested at 1e-12 relative).
    """
    rows = np.asarray(rows, dtype=np.int64)
    starts = m.row_offsets[rows]
    ends = m.row_offsets[rows + 1]
    lengths = ends - starts
    gathered = np.concatenate(
        [np.arange(s, e) for s, e in zip(starts, ends)]
    ) if rows.size else np.empty(0, dtype=np.int64)
    prod = m.values[gathered] * v[m.col_indices[gathered]]
    out = np.zeros(rows.size, dtype=np.float64)
    nonempty = np.flatnonzero(lengths > 0)
    if nonempty.size:
        seg_starts = np.concatenate([[0], np.cumsum(lengths)])[:-1]
        out[nonempty] = np.add.reduceat(prod, seg_starts[nonempty])
    return out


def accumulate_rows(m: SparseMatrix, rows: np.ndarray) -> np.ndarray:
    """Dense sum of the given sparse rows, accumulated in the given order.

    Shared by every code path that needs "sum of member features" so that
    algebraically identical computations are also bitwise identical.
    """
    rows = np.asarray(rows, dtype=np.int64)
    acc = np.zeros(m.cols, dtype=np.float64)
    if rows.size == 0:
        return acc
    gathered = np.concatenate(
        [np.arange(int(m.row_offsets[r]), int(m.row_offsets[r + 1])) for r in rows]
    )
    np.add.at(acc, m.col_indices[gathered], m.values[gathered])
    return acc
