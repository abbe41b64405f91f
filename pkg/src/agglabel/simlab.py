"""Monte Carlo studies of learning with group-shuffled supervision.

Two worlds, both with samples partitioned into equal groups whose responses
are observed only up to an unknown within-group permutation:

  * regression: responses Z = XB + E, recover B. The pooled estimator
    ("noas") regresses group sums on group sums; the reassignment estimator
    ("as") first matches each response to the member feature with the
    smallest residual under the pooled fit, then refits on the matched
    pairs. Both are scored relative to the oracle fit that knows the true
    correspondences.

  * classification: features scatter around per-class unit anchors and group
    label composition is skewed by a softmax temperature. Nearest-centroid
    classifiers are built from pooled statistics, from residual-reassigned
    pairs, and from the true pairs, and compared by test error.

Trials derive their generators by seed splitting, so sweep tables are
byte-reproducible and independent of scheduling.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from io import StringIO
from typing import IO

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import ConfigError, SingularSystemError, make_rng

_KIND_REGRESSION = 201
_KIND_CLASSIFICATION = 202


@dataclass(frozen=True)
class RegressionSimConfig:
    n: int = 1000
    g: int = 10
    d: int = 10
    l: int = 5
    sigma1: float = 1.0
    sigma2: float = 0.0
    sigma_e: float = 1.0
    trials: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.n < 1 or self.g < 1 or self.d < 1 or self.l < 1:
            raise ConfigError("all dimensions must be >= 1")
        if self.n % self.g != 0:
            raise ConfigError(f"group size {self.g} must divide sample count {self.n}")
        if min(self.sigma1, self.sigma2, self.sigma_e) < 0:
            raise ConfigError("noise scales must be >= 0")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")


@dataclass(frozen=True)
class RegressionInstance:
    """One sampled world: features, shuffled responses, truth, permutations.

    Group j's response block equals the clean block ``X B + E`` reindexed by
    ``permutations[j]`` (row r of the observed block is clean row perm[r]).
    """

    features: np.ndarray
    responses: np.ndarray
    truth: np.ndarray
    permutations: list[np.ndarray]
    group_size: int


def gen_regression(cfg: RegressionSimConfig, trial: int = 0) -> RegressionInstance:
    """Sample one regression world.

    The coefficient matrix is Gaussian rescaled to unit spectral norm; each
    group's feature rows share a Gaussian center plus per-sample deviation,
    and each group's responses are shuffled by an independent uniform
    permutation.
    """
    rng = make_rng(cfg.seed, _KIND_REGRESSION, trial)
    m = cfg.n // cfg.g
    b = rng.normal(size=(cfg.d, cfg.l))
    b /= np.linalg.svd(b, compute_uv=False)[0]
    centers = rng.normal(scale=cfg.sigma1, size=(m, cfg.d))
    x = np.repeat(centers, cfg.g, axis=0)
    if cfg.sigma2 > 0:
        x = x + rng.normal(scale=cfg.sigma2, size=(cfg.n, cfg.d))
    noise = rng.normal(scale=cfg.sigma_e, size=(cfg.n, cfg.l)) if cfg.sigma_e > 0 else np.zeros((cfg.n, cfg.l))
    clean = x @ b + noise
    perms = [rng.permutation(cfg.g) for _ in range(m)]
    z = np.empty_like(clean)
    for j, p in enumerate(perms):
        z[j * cfg.g:(j + 1) * cfg.g] = clean[j * cfg.g:(j + 1) * cfg.g][p]
    return RegressionInstance(x, z, b, perms, cfg.g)


def lr_closed_form(x: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Ordinary least squares via a rank-revealing solve (no explicit inverse)."""
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if x.ndim != 2 or z.ndim != 2 or x.shape[0] != z.shape[0]:
        raise ConfigError("least squares needs matching 2-d inputs")
    sol, _, rank, _ = np.linalg.lstsq(x, z, rcond=None)
    if rank < x.shape[1]:
        raise SingularSystemError(
            f"design matrix rank {rank} < {x.shape[1]} columns"
        )
    return sol


def _group_sums(a: np.ndarray, g: int) -> np.ndarray:
    """Exactly rounded per-group column sums.

    fsum makes the result independent of row order within a group, so the
    pooled estimator is bitwise-invariant to the hidden permutations.
    """
    m = a.shape[0] // g
    out = np.empty((m, a.shape[1]), dtype=np.float64)
    for j in range(m):
        blk = a[j * g:(j + 1) * g]
        for c in range(a.shape[1]):
            out[j, c] = math.fsum(blk[:, c])
    return out


def estimate_noas(inst: RegressionInstance) -> np.ndarray:
    """Pooled estimator: least squares on per-group feature/response sums."""
    g = inst.group_size
    xs = _group_sums(inst.features, g)
    zs = _group_sums(inst.responses, g)
    return lr_closed_form(xs, zs)


def estimate_as(
    inst: RegressionInstance,
    pooled: np.ndarray | None = None,
    matched: bool = False,
) -> np.ndarray:
    """Reassignment estimator.

    Each response row independently picks the member feature minimizing its
    residual under the pooled fit (features may be reused). With
    ``matched=True`` the within-group pairing is instead the cost-minimizing
    one-to-one matching, provided for comparison.
    """
    if pooled is None:
        pooled = estimate_noas(inst)
    g = inst.group_size
    n = inst.features.shape[0]
    rows = np.empty_like(inst.features)
    for j in range(n // g):
        xj = inst.features[j * g:(j + 1) * g]
        zj = inst.responses[j * g:(j + 1) * g]
        pred = xj @ pooled
        cost = ((zj[:, None, :] - pred[None, :, :]) ** 2).sum(axis=2)
        if matched:
            ri, ci = linear_sum_assignment(cost)
            pick = np.empty(g, dtype=np.int64)
            pick[ri] = ci
        else:
            pick = cost.argmin(axis=1)
        rows[j * g:(j + 1) * g] = xj[pick]
    return lr_closed_form(rows, inst.responses)


def oracle_estimator(inst: RegressionInstance) -> np.ndarray:
    """Least squares with the true correspondences restored."""
    g = inst.group_size
    z = np.empty_like(inst.responses)
    for j, p in enumerate(inst.permutations):
        inv = np.empty(g, dtype=np.int64)
        inv[p] = np.arange(g)
        blk = inst.responses[j * g:(j + 1) * g]
        z[j * g:(j + 1) * g] = blk[inv]
    return lr_closed_form(inst.features, z)


def _relative(num: float, den: float) -> float:
    if den == 0.0:
        return 1.0 if num == 0.0 else float("inf")
    return num / den


@dataclass(frozen=True)
class SweepRow:
    sigma2: float
    noas_mean: float
    noas_sd: float
    as_mean: float
    as_sd: float
    excluded_trials: int


@dataclass(frozen=True)
class SweepTable:
    kind: str  # "regression" or "classification"
    rows: list[SweepRow]


def _map_trials(fn, trials: int, threads: int) -> list:
    """Run independent trial closures, in trial order, optionally threaded."""
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, range(trials)))
    return [fn(t) for t in range(trials)]


def run_regression_sweep(
    cfg: RegressionSimConfig, sigma2_list: list[float], threads: int = 1
) -> SweepTable:
    """Relative estimation error of both estimators across deviation scales.

    Per trial: rel-RMS = ||estimate - truth||_F / ||oracle - truth||_F (0/0
    counts as 1). Trials whose pooled design is singular are dropped and
    counted in ``excluded_trials``. Each trial has its own generator, so the
    table does not depend on the thread count.
    """
    rows = []
    for s2 in sigma2_list:
        if s2 < 0:
            raise ConfigError("sigma2 values must be >= 0")
        sub = replace(cfg, sigma2=float(s2))

        def one_trial(t: int) -> tuple[float, float] | None:
            inst = gen_regression(sub, trial=t)
            try:
                oracle = oracle_estimator(inst)
                pooled = estimate_noas(inst)
                reassigned = estimate_as(inst, pooled)
            except SingularSystemError:
                return None
            err_o = float(np.linalg.norm(oracle - inst.truth))
            return (
                _relative(float(np.linalg.norm(pooled - inst.truth)), err_o),
                _relative(float(np.linalg.norm(reassigned - inst.truth)), err_o),
            )

        outcomes = _map_trials(one_trial, cfg.trials, threads)
        excluded = sum(1 for o in outcomes if o is None)
        rel_noas = [o[0] for o in outcomes if o is not None]
        rel_as = [o[1] for o in outcomes if o is not None]
        rows.append(
            SweepRow(
                sigma2=float(s2),
                noas_mean=float(np.mean(rel_noas)) if rel_noas else float("nan"),
                noas_sd=float(np.std(rel_noas)) if rel_noas else float("nan"),
                as_mean=float(np.mean(rel_as)) if rel_as else float("nan"),
                as_sd=float(np.std(rel_as)) if rel_as else float("nan"),
                excluded_trials=excluded,
            )
        )
    return SweepTable("regression", rows)


# ---------------------------------------------------------------------------
# classification


@dataclass(frozen=True)
class ClassificationSimConfig:
    n: int = 1000
    g: int = 10
    d: int = 10
    l: int = 5
    sigma1: float = 0.1
    sigma2: float = 0.0
    sigma_e: float = 0.0
    trials: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.n < 1 or self.g < 1 or self.d < 1 or self.l < 2:
            raise ConfigError("need n, g, d >= 1 and at least 2 classes")
        if self.n % self.g != 0:
            raise ConfigError(f"group size {self.g} must divide sample count {self.n}")
        if min(self.sigma1, self.sigma2, self.sigma_e) < 0:
            raise ConfigError("noise scales must be >= 0")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")


def _softmax(v: np.ndarray) -> np.ndarray:
    w = np.exp(v - v.max())
    return w / w.sum()


def _nearest(centroids: np.ndarray, x: np.ndarray) -> np.ndarray:
    d2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)


def run_classification_trial(
    cfg: ClassificationSimConfig, trial: int
) -> tuple[float, float, float]:
    """(oracle, pooled, reassigned) test errors for one sampled world.

    Group label composition is skewed by softmax(sigma2) toward one random
    class per group; sigma2 = 0 is the uniform composition. With sigma_e > 0
    each observed label is re-derived as the similarity argmax perturbed by
    Gaussian noise of that scale. The pooled classifier places class
    centroids at label-count-weighted group means; the reassigned classifier
    first gives each group label instance to the member whose pooled-model
    prediction matches it (centroid distance breaks ties), then recomputes
    centroids from the matched pairs.
    """
    rng = make_rng(cfg.seed, _KIND_CLASSIFICATION, trial)
    n, g, d, l = cfg.n, cfg.g, cfg.d, cfg.l
    m = n // g
    anchors = rng.normal(size=(l, d))
    anchors /= np.sqrt((anchors * anchors).sum(axis=1, keepdims=True))
    labels = np.empty(n, dtype=np.int64)
    for j in range(m):
        k = int(rng.integers(l))
        p = _softmax(cfg.sigma2 * np.eye(l)[k])
        labels[j * g:(j + 1) * g] = rng.choice(l, size=g, p=p)
    x = anchors[labels] + rng.normal(scale=cfg.sigma1, size=(n, d))
    if cfg.sigma_e > 0:
        sims = x @ anchors.T / np.sqrt((x * x).sum(axis=1, keepdims=True))
        labels = (sims + rng.normal(scale=cfg.sigma_e, size=(n, l))).argmax(axis=1)
    test_labels = rng.integers(0, l, size=n)
    x_test = anchors[test_labels] + rng.normal(scale=cfg.sigma1, size=(n, d))

    # oracle: true per-sample pairs
    cent_oracle = np.vstack([
        x[labels == k].mean(axis=0) if np.any(labels == k) else np.zeros(d)
        for k in range(l)
    ])
    err_oracle = float(np.mean(_nearest(cent_oracle, x_test) != test_labels))

    # pooled: label-count-weighted group means
    cent_pooled = np.zeros((l, d))
    weight = np.zeros(l)
    for j in range(m):
        mu = x[j * g:(j + 1) * g].mean(axis=0)
        counts = np.bincount(labels[j * g:(j + 1) * g], minlength=l)
        cent_pooled += np.outer(counts, mu)
        weight += counts
    cent_pooled /= np.maximum(weight, 1.0)[:, None]
    err_pooled = float(np.mean(_nearest(cent_pooled, x_test) != test_labels))

    # reassigned: match label instances to members by pooled-model residual
    sum_assigned = np.zeros((l, d))
    count_assigned = np.zeros(l)
    for j in range(m):
        xj = x[j * g:(j + 1) * g]
        d2 = ((xj[:, None, :] - cent_pooled[None, :, :]) ** 2).sum(axis=2)
        pred = d2.argmin(axis=1)
        for k in labels[j * g:(j + 1) * g]:
            mismatch = (pred != k).astype(np.float64)
            tie = d2[:, k] / (1.0 + d2[:, k].max())
            i = int(np.argmin(2.0 * mismatch + tie))
            sum_assigned[k] += xj[i]
            count_assigned[k] += 1
    cent_re = np.where(
        count_assigned[:, None] > 0,
        sum_assigned / np.maximum(count_assigned, 1.0)[:, None],
        cent_pooled,
    )
    err_re = float(np.mean(_nearest(cent_re, x_test) != test_labels))
    return err_oracle, err_pooled, err_re


def run_classification_sim(
    cfg: ClassificationSimConfig, sigma2_list: list[float], threads: int = 1
) -> SweepTable:
    """Relative test error of both classifiers across skew levels.

    Relative error = (err + c) / (err_oracle + c) with c = 1/(2 n): half a
    test count of additive smoothing so that perfectly separable worlds
    (zero oracle error) still yield finite, order-preserving ratios; 0/0
    maps to 1 as in the regression sweep.
    """
    smoothing = 0.5 / cfg.n
    rows = []
    for s2 in sigma2_list:
        if s2 < 0:
            raise ConfigError("sigma2 values must be >= 0")
        sub = replace(cfg, sigma2=float(s2))
        outcomes = _map_trials(
            lambda t: run_classification_trial(sub, t), cfg.trials, threads
        )
        rel_pooled = [(p + smoothing) / (o + smoothing) for o, p, _ in outcomes]
        rel_re = [(r + smoothing) / (o + smoothing) for o, _, r in outcomes]
        rows.append(
            SweepRow(
                sigma2=float(s2),
                noas_mean=float(np.mean(rel_pooled)),
                noas_sd=float(np.std(rel_pooled)),
                as_mean=float(np.mean(rel_re)),
                as_sd=float(np.std(rel_re)),
                excluded_trials=0,
            )
        )
    return SweepTable("classification", rows)


# ---------------------------------------------------------------------------
# CSV


def sweep_to_csv(table: SweepTable, sink: IO[str] | None = None) -> str:
    """Delimited sweep output; column names depend on the metric kind."""
    out = sink if sink is not None else StringIO()
    metric = "rel_rms" if table.kind == "regression" else "rel_err"
    out.write(
        f"sigma2,{metric}_noas_mean,{metric}_noas_sd,"
        f"{metric}_as_mean,{metric}_as_sd,excluded_trials\n"
    )
    for r in table.rows:
        out.write(
            f"{r.sigma2!r},{r.noas_mean!r},{r.noas_sd!r},"
            f"{r.as_mean!r},{r.as_sd!r},{r.excluded_trials}\n"
        )
    return out.getvalue() if sink is None else ""
