"""Cross-entropy, KL divergence, calibration error and mutual information.

All estimators accept optional row ``weights``. Passing the probabilities of a
:class:`~recalx.data.FiniteJoint` support turns the sample averages into exact
population expectations, which is how the oracle checks are computed.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import numpy as np

from recalx._numeric import PROB_FLOOR
from recalx._rng import derive_seed
from recalx.data import Dataset, FiniteJoint
from recalx.perturbation import (
    Coalition,
    PerturbationStrategy,
    level_to_size,
    restricted_predict_batch,
    sample_masks,
)

MAX_GROUPS = 10_000
PROFILE_VERSION = 1


@dataclass(frozen=True)
class ConditionalEstimatorSpec:
    """How ``P(Y | f(X))`` is estimated.

    ``exact-groupby`` pools rows with identical prediction vectors and is exact
    for finite-range predictors. ``kernel`` is a Nadaraya-Watson average of
    one-hot labels with a Gaussian kernel on the simplex.
    """

    kind: str = "kernel"
    bandwidth: float = 0.05
    leave_one_out: bool = True

    def __post_init__(self) -> None:
        if self.kind not in ("kernel", "exact-groupby"):
            raise ValueError(f"unknown estimator kind {self.kind!r}")
        if self.kind == "kernel" and not self.bandwidth > 0:
            raise ValueError("kernel bandwidth must be > 0")


GROUPBY = ConditionalEstimatorSpec("exact-groupby", leave_one_out=False)


def cross_entropy(p: np.ndarray, y: int) -> float:
    return float(-np.log(max(float(p[y]), PROB_FLOOR)))


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    return float(_kl_rows(np.atleast_2d(p), np.atleast_2d(q))[0])


def _kl_rows(P: np.ndarray, Q: np.ndarray) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    Q = np.maximum(np.asarray(Q, dtype=np.float64), PROB_FLOOR)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(P > 0, P * (np.log(np.where(P > 0, P, 1.0)) - np.log(Q)), 0.0)
    return np.maximum(terms.sum(axis=1), 0.0)


def _weights(n: int, weights: np.ndarray | None) -> np.ndarray:
    if weights is None:
        return np.full(n, 1.0 / n)
    w = np.asarray(weights, dtype=np.float64)
    return w / w.sum()


def _kernel_chunk_rows(n_unique: int) -> int:
    return max(1, 4_000_000 // max(n_unique, 1))


def estimate_conditional(
    preds: np.ndarray,
    labels: np.ndarray,
    spec: ConditionalEstimatorSpec = ConditionalEstimatorSpec(),
    weights: np.ndarray | None = None,
) -> np.ndarray:
    """Row ``i`` estimates ``P(Y = . | f(X) = preds[i])``."""
    C, fallbacks = _estimate_conditional(preds, labels, spec, weights)
    if fallbacks:
        warnings.warn(f"{fallbacks} isolated row(s) fell back to self-inclusion", RuntimeWarning, stacklevel=2)
    return C


def _estimate_conditional(preds, labels, spec, weights) -> tuple[np.ndarray, int]:
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, K = preds.shape
    if n < 2:
        raise ValueError("need at least two rows")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    uniq, inverse = np.unique(preds, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    U = uniq.shape[0]
    counts = np.zeros((U, K))
    np.add.at(counts, (inverse, labels), w)
    if spec.kind == "exact-groupby":
        if U > MAX_GROUPS:
            raise ValueError(f"exact group-by needs <= {MAX_GROUPS} distinct predictions, got {U}")
        return (counts / counts.sum(axis=1, keepdims=True))[inverse], 0
    A = np.empty((U, K))
    step = _kernel_chunk_rows(U)
    sq = (uniq ** 2).sum(axis=1)
    scale = -0.5 / spec.bandwidth ** 2
    for start in range(0, U, step):
        block = uniq[start:start + step]
        dist = np.maximum(sq[start:start + step, None] + sq[None, :] - 2.0 * block @ uniq.T, 0.0)
        local = np.arange(block.shape[0])
        dist[local, start + local] = 0.0
        G = np.exp(scale * dist)
        A[start:start + step] = G @ counts
    num = A[inverse]
    fallbacks = 0
    if spec.leave_one_out:
        loo = num.copy()
        loo[np.arange(n), labels] -= w
        den = loo.sum(axis=1)
        isolated = den <= 1e-12 * np.maximum(num.sum(axis=1), 1e-300)
        fallbacks = int(isolated.sum())
        num = np.where(isolated[:, None], num, np.maximum(loo, 0.0))
    return num / num.sum(axis=1, keepdims=True), fallbacks


def calibration_error_kl(
    preds: np.ndarray,
    labels: np.ndarray,
    spec: ConditionalEstimatorSpec = ConditionalEstimatorSpec(),
    weights: np.ndarray | None = None,
) -> float:
    """Mean KL divergence from the estimated conditional to the prediction."""
    C = estimate_conditional(preds, labels, spec, weights)
    return float(np.dot(_weights(len(labels), weights), _kl_rows(C, preds)))


def label_marginal(labels: np.ndarray, n_classes: int, weights: np.ndarray | None = None) -> np.ndarray:
    w = _weights(len(labels), weights)
    return np.bincount(np.asarray(labels, dtype=np.int64), weights=w, minlength=n_classes)


def mutual_information(
    preds: np.ndarray,
    labels: np.ndarray,
    spec: ConditionalEstimatorSpec = ConditionalEstimatorSpec(),
    weights: np.ndarray | None = None,
) -> float:
    """``I(f(X); Y)`` as the mean KL from the conditional to the label marginal."""
    preds = np.asarray(preds, dtype=np.float64)
    C = estimate_conditional(preds, labels, spec, weights)
    marginal = label_marginal(labels, preds.shape[1], weights)
    return float(np.dot(_weights(len(labels), weights), _kl_rows(C, np.tile(marginal, (len(labels), 1)))))


def _population(data: Dataset | FiniteJoint) -> tuple[np.ndarray, np.ndarray, np.ndarray | None, int]:
    if isinstance(data, FiniteJoint):
        return data.support_x, data.support_y, data.probs, data.n_classes
    return data.features, data.labels, None, data.n_classes


def _mean_loss(P: np.ndarray, y: np.ndarray, weights: np.ndarray | None) -> float:
    losses = -np.log(np.maximum(P[np.arange(y.size), y], PROB_FLOOR))
    return float(np.dot(_weights(y.size, weights), losses))


def predictive_power(
    m: Any,
    calib: Any,
    data: Dataset | FiniteJoint,
    S: Coalition,
    strategy: PerturbationStrategy,
    seed: int = 0,
) -> float:
    """Expected loss with every feature perturbed minus expected loss on ``S``."""
    X, y, w, _ = _population(data)
    rows = np.arange(y.size)
    empty = restricted_predict_batch(m, calib, X, np.zeros(y.size, dtype=np.uint64), strategy, seed, rows)
    if S.kept == 0:
        return 0.0
    kept = restricted_predict_batch(m, calib, X, np.full(y.size, S.kept, dtype=np.uint64), strategy, seed, rows)
    return _mean_loss(empty, y, w) - _mean_loss(kept, y, w)


@dataclass
class DecompositionReport:
    baseline_bias: float
    mutual_info: float
    calib_error: float
    predictive_power: float
    residual: float
    mode: str
    coalition: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def decomposition_report(
    m: Any,
    data: Dataset | FiniteJoint,
    S: Coalition,
    strategy: PerturbationStrategy,
    spec: ConditionalEstimatorSpec | None = None,
    calib: Any = None,
    seed: int = 0,
) -> DecompositionReport:
    """Baseline bias, information and calibration terms of the predictive power.

    With a :class:`FiniteJoint` every term is an exact expectation over the
    support (group-by conditioning); with a :class:`Dataset` the terms are
    estimates and the residual is only reported.
    """
    X, y, w, K = _population(data)
    exact = isinstance(data, FiniteJoint)
    if exact:
        if not strategy.deterministic:
            raise ValueError("exact decomposition needs a deterministic strategy")
        spec = GROUPBY
    elif spec is None:
        spec = ConditionalEstimatorSpec()
    rows = np.arange(y.size)
    empty = restricted_predict_batch(m, calib, X, np.zeros(y.size, dtype=np.uint64), strategy, seed, rows)
    kept = restricted_predict_batch(m, calib, X, np.full(y.size, S.kept, dtype=np.uint64), strategy, seed, rows)
    marginal = label_marginal(y, K, w)
    weights = _weights(y.size, w)
    bias = float(np.dot(weights, _kl_rows(np.tile(marginal, (y.size, 1)), empty)))
    mi = mutual_information(kept, y, spec, w)
    ce = calibration_error_kl(kept, y, spec, w)
    v = 0.0 if S.kept == 0 else _mean_loss(empty, y, w) - _mean_loss(kept, y, w)
    return DecompositionReport(bias, mi, ce, v, v - (bias + mi - ce), "exact" if exact else "estimate", S.to_dict())


def exact_calibration_errors(m: Any, joint: FiniteJoint, strategy: PerturbationStrategy, calib: Any = None) -> np.ndarray:
    """Population ``CE_KL`` of the restricted model for every coalition mask."""
    n = joint.probs.size
    out = np.empty(1 << joint.d)
    for mask in range(1 << joint.d):
        P = restricted_predict_batch(m, calib, joint.support_x, np.full(n, mask, dtype=np.uint64), strategy)
        out[mask] = calibration_error_kl(P, joint.support_y, GROUPBY, joint.probs)
    return out


@dataclass
class ProfileReport:
    levels: list[float]
    ce_per_level: list[float]
    ce_avg: float
    ce_max: float
    strategy: str
    estimator: dict[str, Any]
    seed: int
    reps: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "version": PROFILE_VERSION,
            "strategy": self.strategy,
            "levels": self.levels,
            "ce_per_level": self.ce_per_level,
            "ce_avg": self.ce_avg,
            "ce_max": self.ce_max,
            "estimator": self.estimator,
            "seed": self.seed,
            "reps": self.reps,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["level", "ce"])
        for level, ce in zip(self.levels, self.ce_per_level):
            writer.writerow([repr(level), repr(ce)])
        return buf.getvalue()


def default_levels(count: int = 11) -> list[float]:
    return [i / (count - 1) for i in range(count)] if count > 1 else [0.0]


def per_level_profile(
    m: Any,
    calib: Any,
    data: Dataset,
    strategy: PerturbationStrategy,
    levels: Sequence[float] | None = None,
    reps: int = 1,
    seed: int = 0,
    spec: ConditionalEstimatorSpec = ConditionalEstimatorSpec(),
) -> ProfileReport:
    """Calibration error of the restricted model at each perturbation level.

    For level ``l`` every row receives ``reps`` random coalitions of size
    ``round((1 - l) d)``; the pooled predictions give one ``CE_KL`` value.
    """
    levels = default_levels() if levels is None else [float(v) for v in levels]
    rows = np.repeat(np.arange(data.n), reps)
    X, y = data.features[rows], data.labels[rows]
    values = []
    for i, level in enumerate(levels):
        level_to_size(level, data.d)
        level_seed = derive_seed(seed, "profile", i)
        masks = sample_masks(data.d, "fixed-level", rows.size, level_seed, level=level)
        P = restricted_predict_batch(m, calib, X, masks, strategy, level_seed, rows)
        values.append(calibration_error_kl(P, y, spec))
    return ProfileReport(
        levels,
        values,
        float(np.mean(values)),
        float(np.max(values)),
        strategy.name,
        asdict(spec),
        seed,
        reps,
    )
