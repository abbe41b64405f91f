"""Per-label embedding learning from group-level annotations.

The learned embedding of a label is a unit vector that is close to at least
one member sample of every group annotated with that label. The module
provides:

  * the summed ("positive instance aggregate") embedding, whose rows are the
    plain sums of member features per label,
  * the selection objective (sum over positive groups of the best member
    cosine) and the iterative select-then-aggregate learner for it,
  * an exhaustive enumeration baseline for small instances,
  * the single pure aggregation step used by the convergence property tests,
  * a binary serialization ("LEMB") for embedding matrices.

All computations are deterministic: per-label work shares no mutable state,
selections break ties toward the lowest sample index, and reductions are
single-threaded, so any degree of label parallelism yields identical output.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import product

import numpy as np

from .core import (
    NORM_FLOOR,
    BoundsError,
    DatasetIntegrityError,
    EmptyLabelError,
    InfeasibleError,
    InvalidInputError,
    SparseMatrix,
    l2_norm,
)
from .dataio import AggregatedDataset, GroundTruthAssignment

LEMB_MAGIC = b"LEMB"
LEMB_VERSION = 1

#: Exhaustive search enumerates at most this many member combinations.
BRUTE_FORCE_LIMIT = 1_000_000


@dataclass(frozen=True)
class LabelEmbeddings:
    """Dense matrix of per-label unit vectors.

    Rows flagged in ``empty_flags`` carry no information (label had no
    positive group, or its member features summed to numerical zero) and are
    stored as zero vectors.
    """

    vectors: np.ndarray
    empty_flags: np.ndarray

    def __post_init__(self):
        v = self.vectors
        if v.ndim != 2:
            raise InvalidInputError("embedding matrix must be 2-d")
        if self.empty_flags.shape != (v.shape[0],):
            raise InvalidInputError("one empty flag per label required")
        norms = np.sqrt((v * v).sum(axis=1))
        ok = self.empty_flags | (np.abs(norms - 1.0) <= 1e-9)
        if v.shape[0] and not np.all(ok):
            bad = int(np.flatnonzero(~ok)[0])
            raise InvalidInputError(
                f"embedding row {bad} has norm {norms[bad]!r}, expected 1"
            )

    @staticmethod
    def from_rows(rows: np.ndarray, empty_flags: np.ndarray | None = None) -> "LabelEmbeddings":
        rows = np.asarray(rows, dtype=np.float64)
        if empty_flags is None:
            empty_flags = np.zeros(rows.shape[0], dtype=bool)
        return LabelEmbeddings(rows, np.asarray(empty_flags, dtype=bool))

    @property
    def num_labels(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def row(self, k: int) -> np.ndarray:
        return self.vectors[k]

    def save(self, path: str) -> None:
        """Write the binary container: magic, version, shape, rows, flags."""
        l, d = self.vectors.shape
        with open(path, "wb") as f:
            f.write(LEMB_MAGIC)
            f.write(struct.pack("<I", LEMB_VERSION))
            f.write(struct.pack("<QQ", l, d))
            f.write(np.ascontiguousarray(self.vectors, dtype="<f8").tobytes())
            f.write(self.empty_flags.astype(np.uint8).tobytes())

    @staticmethod
    def load(path: str) -> "LabelEmbeddings":
        with open(path, "rb") as f:
            blob = f.read()
        if len(blob) < 24:
            raise InvalidInputError("embedding container truncated")
        if blob[:4] != LEMB_MAGIC:
            raise InvalidInputError("not an embedding container (bad magic)")
        (version,) = struct.unpack_from("<I", blob, 4)
        if version != LEMB_VERSION:
            raise InvalidInputError(f"unsupported container version {version}")
        l, d = struct.unpack_from("<QQ", blob, 8)
        need = 24 + 8 * l * d + l
        if len(blob) != need:
            raise InvalidInputError(
                f"container size {len(blob)} does not match header ({need} expected)"
            )
        rows = np.frombuffer(blob, dtype="<f8", count=l * d, offset=24)
        rows = rows.reshape(l, d).astype(np.float64)
        flags = np.frombuffer(blob, dtype=np.uint8, count=l, offset=24 + 8 * l * d)
        return LabelEmbeddings(rows, flags.astype(bool))


@dataclass(frozen=True)
class LearnConfig:
    """Iteration budget and step size of the embedding learner.

    ``normalize_features`` rescales every feature row to unit norm before
    learning and assignment, which makes the learner's raw inner-product
    selection agree with the cosine objective.
    """

    iters: int = 20
    step: float = 0.1
    normalize_features: bool = True

    def __post_init__(self):
        if self.iters < 0:
            raise InvalidInputError("iteration count must be >= 0")
        if self.step <= 0:
            raise InvalidInputError("step size must be > 0")


@dataclass
class LearnTrace:
    """Per-iteration diagnostics of one label's embedding run.

    ``alphas[t]`` is the fraction of groups whose selected member truly
    carries the label at iteration t (requires ground truth).
    ``aggregates``/``iterates`` hold g^t and e^0..e^T when recording is on.
    """

    objectives: list[float] = field(default_factory=list)
    step_norms: list[float] = field(default_factory=list)
    alphas: list[float] | None = None
    aggregates: list[np.ndarray] | None = None
    iterates: list[np.ndarray] | None = None


class _LabelWorkspace:
    """Gathered CSR view of all member rows of one label's positive groups.

    ``rows`` concatenates the member lists of the label's groups (groups
    ascending, members ascending within each group); ``group_starts`` marks
    each group's segment. The gathered value/column arrays let one reduceat
    call compute every member's inner product with a dense vector.
    """

    def __init__(self, features: SparseMatrix, members: list[np.ndarray], groups: np.ndarray):
        self.features = features
        self.group_ids = np.asarray(groups, dtype=np.int64)
        parts = [members[int(j)] for j in self.group_ids]
        for j, p in zip(self.group_ids, parts):
            if p.size == 0:
                raise DatasetIntegrityError(f"group {int(j)} has no member samples")
        self.rows = (
            np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)
        )
        sizes = np.asarray([p.size for p in parts], dtype=np.int64)
        self.group_starts = np.concatenate([[0], np.cumsum(sizes)])[:-1]
        offs = features.row_offsets
        starts = offs[self.rows]
        ends = offs[self.rows + 1]
        self.row_lengths = ends - starts
        self.gathered = (
            np.concatenate([np.arange(s, e) for s, e in zip(starts, ends)])
            if self.rows.size
            else np.empty(0, dtype=np.int64)
        )
        self.g_cols = features.col_indices[self.gathered]
        self.g_vals = features.values[self.gathered]
        self.row_starts = np.concatenate([[0], np.cumsum(self.row_lengths)])[:-1]
        sq = np.zeros(self.rows.size, dtype=np.float64)
        nonempty = np.flatnonzero(self.row_lengths > 0)
        if nonempty.size:
            sq[nonempty] = np.add.reduceat(self.g_vals * self.g_vals, self.row_starts[nonempty])
        self.row_norms = np.sqrt(sq)

    def row_dots(self, e: np.ndarray) -> np.ndarray:
        """Inner product of every member row with ``e`` (zeros for empty rows)."""
        out = np.zeros(self.rows.size, dtype=np.float64)
        if self.gathered.size == 0:
            return out
        prod = self.g_vals * e[self.g_cols]
        nonempty = np.flatnonzero(self.row_lengths > 0)
        out[nonempty] = np.add.reduceat(prod, self.row_starts[nonempty])
        return out

    def select(self, e: np.ndarray) -> np.ndarray:
        """Per group, the roster position of the member maximizing <e, x_i>.

        Ties resolve to the lowest sample index (rosters are ascending).
        """
        dots = self.row_dots(e)
        num_groups = self.group_starts.size
        gmax = np.maximum.reduceat(dots, self.group_starts)
        rep = np.repeat(gmax, np.diff(np.concatenate([self.group_starts, [dots.size]])))
        pos = np.arange(dots.size, dtype=np.int64)
        cand = np.where(dots == rep, pos, dots.size)
        return np.minimum.reduceat(cand, self.group_starts)[:num_groups]

    def accumulate(self, roster_positions: np.ndarray) -> np.ndarray:
        """Dense sum of the given roster rows, in the given order."""
        acc = np.zeros(self.features.cols, dtype=np.float64)
        if roster_positions.size == 0:
            return acc
        idx = np.concatenate(
            [
                np.arange(self.row_starts[p], self.row_starts[p] + self.row_lengths[p])
                for p in roster_positions
            ]
        )
        np.add.at(acc, self.g_cols[idx], self.g_vals[idx])
        return acc

    def objective(self, e: np.ndarray) -> float:
        """Sum over groups of the best member cosine against unit ``e``.

        Members with zero-norm features are skipped; a group whose members
        are all zero contributes 0.
        """
        dots = self.row_dots(e)
        usable = self.row_norms > NORM_FLOOR
        safe = np.where(usable, self.row_norms, 1.0)
        cos = np.where(usable, dots / safe, -np.inf)
        gmax = np.maximum.reduceat(cos, self.group_starts)
        return float(np.where(np.isfinite(gmax), gmax, 0.0).sum())

    def fallback_vector(self, label: int) -> np.ndarray | None:
        """Unit direction used when an aggregate cancels to zero.

        Starts at position (label mod first-group-size) so that labels
        sharing identical positive groups break degeneracy differently, then
        scans forward for the first member with nonzero features. None if
        every member row is zero.
        """
        if self.rows.size == 0:
            return None
        first_size = int(
            (self.group_starts[1] if self.group_starts.size > 1 else self.rows.size)
            - self.group_starts[0]
        )
        start = label % first_size
        for shift in range(self.rows.size):
            p = (start + shift) % self.rows.size
            if self.row_norms[p] > NORM_FLOOR:
                out = np.zeros(self.features.cols, dtype=np.float64)
                s = self.row_starts[p]
                out[self.g_cols[s:s + self.row_lengths[p]]] = self.g_vals[s:s + self.row_lengths[p]]
                return out / self.row_norms[p]
        return None


def normalize_rows(m: SparseMatrix) -> SparseMatrix:
    """Rescale every row to unit L2 norm; zero rows stay zero."""
    norms = m.row_norms()
    scale = np.where(norms > NORM_FLOOR, norms, 1.0)
    per_entry = np.repeat(scale, np.diff(m.row_offsets))
    return SparseMatrix(
        m.rows, m.cols, m.row_offsets, m.col_indices, m.values / per_entry
    )


def _learning_features(ds: AggregatedDataset, cfg: LearnConfig) -> SparseMatrix:
    return normalize_rows(ds.features) if cfg.normalize_features else ds.features


def _workspace(
    ds: AggregatedDataset,
    label: int,
    features: SparseMatrix | None = None,
    members: list[np.ndarray] | None = None,
) -> _LabelWorkspace:
    if not 0 <= label < ds.num_labels:
        raise BoundsError(f"label {label} out of range [0, {ds.num_labels})")
    groups = ds.label_groups()[label]
    if groups.size == 0:
        raise EmptyLabelError(f"label {label} has no positively annotated group")
    if members is None:
        members = ds.group_members()
    return _LabelWorkspace(features if features is not None else ds.features, members, groups)


def label_feature_sums(ds: AggregatedDataset, features: SparseMatrix | None = None) -> np.ndarray:
    """Unnormalized summed embedding: row k sums the features of every sample
    in every group annotated with k (never materializes the sample-to-label
    product densely)."""
    feats = features if features is not None else ds.features
    members = ds.group_members()
    label_groups = ds.label_groups()
    out = np.zeros((ds.num_labels, feats.cols), dtype=np.float64)
    for k in range(ds.num_labels):
        if label_groups[k].size == 0:
            continue
        ws = _LabelWorkspace(feats, members, label_groups[k])
        out[k] = ws.accumulate(np.arange(ws.rows.size, dtype=np.int64))
    return out


def summed_embeddings(
    ds: AggregatedDataset, normalize_features: bool = True
) -> LabelEmbeddings:
    """Row-normalized summed embedding with degenerate rows flagged.

    A row is flagged when its label has no positive group or when the
    feature sum cancels below the norm floor (the information-free case).
    """
    feats = normalize_rows(ds.features) if normalize_features else ds.features
    sums = label_feature_sums(ds, feats)
    vectors = np.zeros_like(sums)
    flags = np.zeros(sums.shape[0], dtype=bool)
    for k in range(sums.shape[0]):
        nrm = l2_norm(sums[k])
        if nrm <= NORM_FLOOR:
            flags[k] = True
        else:
            vectors[k] = sums[k] / nrm
    return LabelEmbeddings(vectors, flags)


def selection_objective(
    e: np.ndarray, label: int, ds: AggregatedDataset
) -> float:
    """Sum over the label's groups of the best member cosine against ``e``.

    ``e`` must be unit norm. Groups whose members all have zero features
    contribute 0; a label without positive groups is an error.
    """
    e = np.asarray(e, dtype=np.float64)
    if abs(l2_norm(e) - 1.0) > 1e-9:
        raise InvalidInputError("objective requires a unit-norm embedding")
    ws = _workspace(ds, label)
    return ws.objective(e)


def _iterate(
    ws: _LabelWorkspace,
    label: int,
    cfg: LearnConfig,
    ground_truth: GroundTruthAssignment | None,
    record_iterates: bool,
) -> tuple[np.ndarray, LearnTrace, bool]:
    trace = LearnTrace()
    if ground_truth is not None:
        trace.alphas = []
    if record_iterates:
        trace.aggregates = []
        trace.iterates = []

    fallback = ws.fallback_vector(label)
    if fallback is None:
        # every member feature is zero: nothing to learn
        return np.zeros(ws.features.cols), trace, True

    init_sum = ws.accumulate(np.arange(ws.rows.size, dtype=np.int64))
    nrm = l2_norm(init_sum)
    e = fallback if nrm <= NORM_FLOOR else init_sum / nrm
    if record_iterates:
        trace.iterates.append(e.copy())

    for _ in range(cfg.iters):
        sel = ws.select(e)
        if ground_truth is not None:
            good = sum(
                1
                for j, p in zip(ws.group_ids, sel)
                if ground_truth.is_correct(int(j), label, int(ws.rows[p]))
            )
            trace.alphas.append(good / sel.size)
        agg = ws.accumulate(sel)
        nrm = l2_norm(agg)
        g = e if nrm <= NORM_FLOOR else agg / nrm
        if record_iterates:
            trace.aggregates.append(g.copy())
        if np.array_equal(g, e):
            # proj(e + step*e) == e exactly for unit e; skip the float round-trip
            e_new = e
        else:
            blended = e + cfg.step * g
            bn = l2_norm(blended)
            e_new = e if bn <= NORM_FLOOR else blended / bn
        trace.step_norms.append(l2_norm(e_new - e))
        trace.objectives.append(ws.objective(e_new))
        e = e_new
        if record_iterates:
            trace.iterates.append(e.copy())
    return e, trace, False


def learn_embedding(
    ds: AggregatedDataset,
    label: int,
    cfg: LearnConfig = LearnConfig(),
    ground_truth: GroundTruthAssignment | None = None,
    record_iterates: bool = False,
) -> tuple[np.ndarray, LearnTrace]:
    """Iteratively learn one label's unit embedding.

    Starts from the normalized sum of all member features; each iteration
    selects, per positive group, the member with the largest inner product
    against the current embedding, then steps toward the normalized sum of
    the selected members and reprojects onto the sphere. When the initial
    sum cancels to zero the run starts from a member feature direction
    instead (offset by the label index, so labels with identical groups
    start from different members).
    """
    ws = _workspace(ds, label, features=_learning_features(ds, cfg))
    e, trace, _ = _iterate(ws, label, cfg, ground_truth, record_iterates)
    return e, trace


def one_step_aggregate(
    e: np.ndarray,
    label: int,
    ds: AggregatedDataset,
    ground_truth: GroundTruthAssignment | None = None,
    cfg: LearnConfig = LearnConfig(),
) -> tuple[np.ndarray, float | None]:
    """One pure aggregation step: select per group by ``e``, return the
    normalized sum of the selections plus the fraction of ground-truth-correct
    selections (None without ground truth). No step-size blending."""
    e = np.asarray(e, dtype=np.float64)
    if abs(l2_norm(e) - 1.0) > 1e-9:
        raise InvalidInputError("aggregation step requires a unit-norm embedding")
    ws = _workspace(ds, label, features=_learning_features(ds, cfg))
    sel = ws.select(e)
    alpha = None
    if ground_truth is not None:
        good = sum(
            1
            for j, p in zip(ws.group_ids, sel)
            if ground_truth.is_correct(int(j), label, int(ws.rows[p]))
        )
        alpha = good / sel.size
    agg = ws.accumulate(sel)
    nrm = l2_norm(agg)
    g = e.copy() if nrm <= NORM_FLOOR else agg / nrm
    return g, alpha


def brute_force_embedding(
    ds: AggregatedDataset,
    label: int,
    normalize_features: bool = True,
    limit: int = BRUTE_FORCE_LIMIT,
) -> tuple[np.ndarray, float]:
    """Exhaustive baseline: best embedding over all one-member-per-group choices.

    Every combination of one representative per positive group yields the
    candidate proj(sum of chosen members); each candidate is scored by the
    full selection objective and the best is returned. For unit-norm
    features this is the exact objective optimum; otherwise it is exact over
    the candidate family only.
    """
    cfg = LearnConfig(normalize_features=normalize_features)
    ws = _workspace(ds, label, features=_learning_features(ds, cfg))
    sizes = np.diff(np.concatenate([ws.group_starts, [ws.rows.size]])).astype(np.int64)
    combos = 1
    for s in sizes:
        combos *= int(s)
        if combos > limit:
            raise InfeasibleError(
                f"label {label}: {combos}+ member combinations exceed the "
                f"enumeration bound {limit}"
            )
    fallback = ws.fallback_vector(label)
    if fallback is None:
        return np.zeros(ws.features.cols), 0.0
    best_e: np.ndarray | None = None
    best_val = -np.inf
    for combo in product(*[range(int(s)) for s in sizes]):
        positions = ws.group_starts + np.asarray(combo, dtype=np.int64)
        s = ws.accumulate(positions)
        nrm = l2_norm(s)
        cand = fallback if nrm <= NORM_FLOOR else s / nrm
        val = ws.objective(cand)
        if val > best_val:
            best_val = val
            best_e = cand
    return best_e, float(best_val)


def learn_all_embeddings(
    ds: AggregatedDataset,
    cfg: LearnConfig = LearnConfig(),
    threads: int = 1,
) -> LabelEmbeddings:
    """Run the per-label learner independently for every label.

    Labels without positive groups (or with all-zero member features) come
    back as flagged zero rows. Per-label work shares no mutable state, so
    the result is identical for any thread count.
    """
    features = _learning_features(ds, cfg)
    members = ds.group_members()
    label_groups = ds.label_groups()
    l = ds.num_labels
    vectors = np.zeros((l, features.cols), dtype=np.float64)
    flags = np.zeros(l, dtype=bool)

    def run(k: int) -> tuple[int, np.ndarray, bool]:
        if label_groups[k].size == 0:
            return k, np.zeros(features.cols), True
        ws = _LabelWorkspace(features, members, label_groups[k])
        e, _, degenerate = _iterate(ws, k, cfg, None, False)
        return k, e, degenerate

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, range(l)))
    else:
        results = [run(k) for k in range(l)]
    for k, e, degenerate in results:
        vectors[k] = e
        flags[k] = degenerate
    return LabelEmbeddings(vectors, flags)
