"""Perturbation-based attributions with linear summary strategies.

Every method works on a cooperative game ``v(S)``: the target-class
probability of the (optionally recalibrated) model when only the features in
``S`` are kept. The ``*_game`` functions accept any :class:`ValueFunction`, the
model-level wrappers build one from a classifier and an input.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Callable, Sequence

import numpy as np

from recalx._numeric import mask_bits, popcount
from recalx._rng import derive_seed, generator
from recalx.data import Dataset
from recalx.perturbation import Coalition, PerturbationStrategy, restricted_predict_batch, sample_masks

MAX_EXACT_D = 15
METHODS = ("shapley", "kernelshap", "lime", "ablation")


class ExplainerError(ValueError):
    pass


class ValueFunction:
    """Cached set function over coalition bitmasks.

    ``batch_fn`` maps a ``uint64`` mask array to one value per mask; masks
    already in the cache are never re-evaluated. ``n_evaluations`` counts the
    masks actually passed to ``batch_fn``.
    """

    def __init__(self, d: int, batch_fn: Callable[[np.ndarray], np.ndarray]) -> None:
        self.d = d
        self._batch_fn = batch_fn
        self._cache: dict[int, float] = {}
        self.n_evaluations = 0

    @classmethod
    def from_callable(cls, fn: Callable[[int], float], d: int) -> "ValueFunction":
        return cls(d, lambda masks: np.array([fn(int(m)) for m in masks], dtype=np.float64))

    @classmethod
    def from_table(cls, table: Sequence[float], d: int) -> "ValueFunction":
        arr = np.asarray(table, dtype=np.float64)
        if arr.shape != (1 << d,):
            raise ValueError("table needs one value per coalition")
        return cls(d, lambda masks: arr[np.asarray(masks, dtype=np.int64)])

    def values(self, masks: Sequence[int] | np.ndarray) -> np.ndarray:
        masks = np.asarray(masks, dtype=np.uint64).reshape(-1)
        missing = sorted({int(m) for m in masks} - self._cache.keys())
        if missing:
            fresh = np.asarray(self._batch_fn(np.asarray(missing, dtype=np.uint64)), dtype=np.float64)
            self.n_evaluations += len(missing)
            self._cache.update(zip(missing, fresh.tolist()))
        return np.array([self._cache[int(m)] for m in masks], dtype=np.float64)

    def __call__(self, S: Coalition | int) -> float:
        mask = S.kept if isinstance(S, Coalition) else int(S)
        return float(self.values([mask])[0])


def model_value_function(
    m: Any,
    calib: Any,
    x: np.ndarray,
    target: int,
    strategy: PerturbationStrategy,
    seed: int = 0,
    index: int = 0,
) -> ValueFunction:
    x = np.asarray(x, dtype=np.float64)

    def batch(masks: np.ndarray) -> np.ndarray:
        X = np.broadcast_to(x, (masks.size, x.size))
        P = restricted_predict_batch(m, calib, X, masks, strategy, seed, np.full(masks.size, index))
        return P[:, target]

    return ValueFunction(x.size, batch)


@dataclass
class AttributionVector:
    values: np.ndarray
    target_class: int
    method: str
    base_value: float
    metadata: dict[str, Any] = field(default_factory=dict)

    @property
    def d(self) -> int:
        return int(self.values.size)


def _shapley_weights(d: int) -> np.ndarray:
    # |S|! (d - |S| - 1)! / d!, rounded once from the exact rational
    return np.array(
        [float(Fraction(math.factorial(s) * math.factorial(d - s - 1), math.factorial(d))) for s in range(d)]
    )


def shapley_exact(v: ValueFunction, d: int) -> np.ndarray:
    """Exact Shapley values from all ``2**d`` coalition values."""
    if d > MAX_EXACT_D:
        raise ExplainerError(f"exact Shapley values need d <= {MAX_EXACT_D}, got {d}")
    masks = np.arange(1 << d, dtype=np.uint64)
    vals = v.values(masks)
    sizes = popcount(masks)
    weights = _shapley_weights(d)
    phi = np.empty(d)
    for i in range(d):
        bit = np.uint64(1 << i)
        without = masks[(masks & bit) == 0]
        with_i = (without | bit).astype(np.int64)
        terms = weights[sizes[without.astype(np.int64)]] * (vals[with_i] - vals[without.astype(np.int64)])
        phi[i] = np.sum(terms)
    return phi


def shapley_kernel_weight(d: int, size: np.ndarray) -> np.ndarray:
    size = np.asarray(size, dtype=np.float64)
    binom = np.array([math.comb(d, int(s)) for s in size], dtype=np.float64)
    return (d - 1) / (binom * size * (d - size))


def kernel_shap_game(v: ValueFunction, d: int, n_samples: int, seed: int) -> tuple[np.ndarray, dict[str, Any]]:
    """Constrained weighted least squares with Shapley kernel weights.

    With ``n_samples >= 2**d`` every non-trivial coalition is used and the
    result equals the exact Shapley values. Otherwise coalition sizes are drawn
    in proportion to the kernel mass per size and duplicates are dropped.
    Efficiency is imposed by eliminating the last coefficient.
    """
    if n_samples < d + 2:
        raise ExplainerError(f"kernel SHAP needs n_samples >= d + 2 = {d + 2}")
    full = (1 << d) - 1
    v0, v1 = v.values([0, full])
    if d == 1:
        return np.array([v1 - v0]), {"n_coalitions": 0, "enumerated": True}
    enumerated = d <= 62 and n_samples >= (1 << d)
    if enumerated:
        masks = np.arange(1, full, dtype=np.uint64)
    else:
        drawn = sample_masks(d, "shapley-kernel", n_samples - 2, derive_seed(seed, "kernelshap"))
        masks = np.unique(drawn)
    Z = mask_bits(masks, d).astype(np.float64)
    sizes = Z.sum(axis=1)
    w = shapley_kernel_weight(d, sizes)
    target = v.values(masks) - v0 - Z[:, -1] * (v1 - v0)
    design = Z[:, :-1] - Z[:, -1:]
    root = np.sqrt(w)
    A = design * root[:, None]
    if np.linalg.matrix_rank(A) < d - 1:
        raise ExplainerError(
            f"singular kernel SHAP design ({masks.size} distinct coalitions for d={d}); increase n_samples"
        )
    coef, *_ = np.linalg.lstsq(A, target * root, rcond=None)
    phi = np.append(coef, (v1 - v0) - coef.sum())
    return phi, {"n_coalitions": int(masks.size), "enumerated": bool(enumerated)}


def lime_game(
    v: ValueFunction,
    d: int,
    n_samples: int,
    kernel_width: float | None = None,
    ridge_lambda: float = 1e-3,
    seed: int = 0,
) -> tuple[np.ndarray, dict[str, Any]]:
    """Weighted ridge regression of ``v`` on binary coalition vectors.

    Proximity weight is ``exp(-(d - |S|)**2 / width**2)``; the intercept is
    not penalised. ``n_samples >= 2**d`` enumerates every coalition once,
    otherwise the full coalition plus ``n_samples - 1`` uniform draws are used.
    """
    if n_samples < d + 2:
        raise ExplainerError(f"LIME needs n_samples >= d + 2 = {d + 2}")
    width = 0.75 * math.sqrt(d) if kernel_width is None else float(kernel_width)
    if d <= 20 and n_samples >= (1 << d):
        masks = np.arange(1 << d, dtype=np.uint64)
        enumerated = True
    else:
        rng = generator(seed, "lime")
        bits = rng.integers(0, 2, size=(n_samples - 1, d)).astype(bool)
        weights_bits = np.left_shift(np.uint64(1), np.arange(d, dtype=np.uint64))
        drawn = (bits.astype(np.uint64) * weights_bits).sum(axis=1, dtype=np.uint64)
        masks = np.sort(np.append(drawn, np.uint64((1 << d) - 1)))
        enumerated = False
    Z = mask_bits(masks, d).astype(np.float64)
    dist = d - Z.sum(axis=1)
    pi = np.exp(-(dist ** 2) / width ** 2)
    A = np.hstack([np.ones((Z.shape[0], 1)), Z])
    gram = A.T @ (A * pi[:, None])
    penalty = ridge_lambda * np.eye(d + 1)
    penalty[0, 0] = 0.0
    system = gram + penalty
    if ridge_lambda == 0 and np.linalg.matrix_rank(system) < d + 1:
        raise ExplainerError("singular LIME normal equations; use ridge_lambda > 0 or more samples")
    beta = np.linalg.solve(system, A.T @ (pi * v.values(masks)))
    meta = {
        "n_coalitions": int(masks.size),
        "enumerated": enumerated,
        "kernel_width": width,
        "ridge_lambda": ridge_lambda,
        "intercept": float(beta[0]),
    }
    return beta[1:], meta


def ablation_game(v: ValueFunction, d: int) -> np.ndarray:
    full = (1 << d) - 1
    masks = [full] + [full & ~(1 << i) for i in range(d)]
    vals = v.values(masks)
    return vals[0] - vals[1:]


def _attribution(v, values, target, method, meta, strategy, calib, seed) -> AttributionVector:
    meta = dict(meta)
    meta.update(
        {
            "strategy": strategy.name,
            "calibrator": None if calib is None else f"B={calib.B}",
            "seed": seed,
            "n_evaluations": v.n_evaluations,
        }
    )
    return AttributionVector(np.asarray(values, dtype=np.float64), int(target), method, v(0), meta)


def kernel_shap(m, calib, x, target, strategy, n_samples, seed) -> AttributionVector:
    v = model_value_function(m, calib, x, target, strategy, seed)
    phi, meta = kernel_shap_game(v, v.d, n_samples, seed)
    meta["n_samples"] = n_samples
    return _attribution(v, phi, target, "kernelshap", meta, strategy, calib, seed)


def lime(m, calib, x, target, strategy, n_samples, kernel_width=None, ridge_lambda=1e-3, seed=0) -> AttributionVector:
    v = model_value_function(m, calib, x, target, strategy, seed)
    phi, meta = lime_game(v, v.d, n_samples, kernel_width, ridge_lambda, seed)
    meta["n_samples"] = n_samples
    return _attribution(v, phi, target, "lime", meta, strategy, calib, seed)


def feature_ablation(m, calib, x, target, strategy, seed=0) -> AttributionVector:
    v = model_value_function(m, calib, x, target, strategy, seed)
    return _attribution(v, ablation_game(v, v.d), target, "ablation", {}, strategy, calib, seed)


def shapley(m, calib, x, target, strategy, seed=0) -> AttributionVector:
    v = model_value_function(m, calib, x, target, strategy, seed)
    return _attribution(v, shapley_exact(v, v.d), target, "shapley", {}, strategy, calib, seed)


def predicted_class(m: Any, x: np.ndarray) -> int:
    return int(np.argmax(m.logits(np.asarray(x, dtype=np.float64))))


def explain(
    m: Any,
    calib: Any,
    x: np.ndarray,
    method: str,
    strategy: PerturbationStrategy,
    seed: int = 0,
    target: int | None = None,
    n_samples: int = 256,
    kernel_width: float | None = None,
    ridge_lambda: float = 1e-3,
) -> AttributionVector:
    """Dispatch to one attribution method; the target defaults to the predicted class."""
    if target is None:
        target = predicted_class(m, x)
    if method == "shapley":
        return shapley(m, calib, x, target, strategy, seed)
    if method == "kernelshap":
        return kernel_shap(m, calib, x, target, strategy, n_samples, seed)
    if method == "lime":
        return lime(m, calib, x, target, strategy, n_samples, kernel_width, ridge_lambda, seed)
    if method == "ablation":
        return feature_ablation(m, calib, x, target, strategy, seed)
    raise ExplainerError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")


@dataclass
class GlobalImportance:
    ranking: list[int]
    mean_abs: list[float]
    method: str
    sample_ids: list[int]
    attributions: list[AttributionVector] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict[str, Any]:
        return {
            "version": 1,
            "method": self.method,
            "ranking": self.ranking,
            "mean_abs": self.mean_abs,
            "n_explain": len(self.sample_ids),
        }


def explain_rows(
    m: Any,
    calib: Any,
    data: Dataset,
    rows: Sequence[int],
    method: str,
    strategy: PerturbationStrategy,
    seed: int,
    workers: int = 1,
    **opts: Any,
) -> list[AttributionVector]:
    """Explain the given rows; each row's seed is derived from ``(seed, row)``."""

    def one(row: int) -> AttributionVector:
        return explain(m, calib, data.features[row], method, strategy, derive_seed(seed, "explain", row), **opts)

    if workers <= 1:
        return [one(int(r)) for r in rows]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, [int(r) for r in rows]))


def global_importance(
    m: Any,
    calib: Any,
    data: Dataset,
    method: str,
    strategy: PerturbationStrategy,
    n_explain: int,
    seed: int = 0,
    workers: int = 1,
    **opts: Any,
) -> GlobalImportance:
    """Mean absolute attribution over ``n_explain`` seeded rows.

    Ranking is by descending mean with ties broken by ascending feature index.
    """
    if not 1 <= n_explain <= data.n:
        raise ExplainerError(f"n_explain must lie in [1, {data.n}]")
    rows = np.sort(generator(seed, "global-rows").permutation(data.n)[:n_explain])
    attributions = explain_rows(m, calib, data, rows, method, strategy, seed, workers, **opts)
    mean_abs = np.mean(np.abs(np.stack([a.values for a in attributions])), axis=0)
    ranking = np.argsort(-mean_abs, kind="stable")
    return GlobalImportance(
        [int(i) for i in ranking], [float(v) for v in mean_abs], method, [int(r) for r in rows], attributions
    )


def attributions_csv(sample_ids: Sequence[int], attributions: Sequence[AttributionVector]) -> str:
    d = attributions[0].d if attributions else 0
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["sample_id", "target_class", "method"] + [f"feature_{j}" for j in range(d)] + ["base_value"])
    for sid, a in zip(sample_ids, attributions):
        writer.writerow([sid, a.target_class, a.method] + [repr(float(v)) for v in a.values] + [repr(float(a.base_value))])
    return buf.getvalue()
