"""Remove-and-retrain, explanation sensitivity and the local drift bound."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Callable, Sequence

import numpy as np

from recalx._rng import derive_seed, generator
from recalx.data import Dataset, FiniteJoint, SplitSpec, split
from recalx.explainers import AttributionVector, explain, model_value_function, shapley_exact
from recalx.metrics import exact_calibration_errors
from recalx.model import BayesOracle, Classifier, ScaledClassifier, TrainConfig, mean_cross_entropy, train_mlp
from recalx.perturbation import PerturbationStrategy

DEFAULT_ROAR_SPLIT = SplitSpec((0.8, 0.0, 0.2), seed=0)


@dataclass
class RoarCurve:
    k_values: list[int]
    loss_per_k: list[float]
    std_per_k: list[float]
    seed_losses: list[list[float]]
    seeds: list[int]
    ranking: list[int]

    def to_dict(self) -> dict[str, Any]:
        return {"version": 1, **asdict(self)}

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["k", "mean_loss", "std_loss"] + [f"seed_{s}" for s in self.seeds])
        for k, mean, std, losses in zip(self.k_values, self.loss_per_k, self.std_per_k, self.seed_losses):
            writer.writerow([k, repr(mean), repr(std)] + [repr(v) for v in losses])
        return buf.getvalue()


def roar(
    ds_full: Dataset,
    ranking: Sequence[int],
    k_values: Sequence[int],
    train_cfg: TrainConfig,
    retrain_seeds: Sequence[int],
    split_spec: SplitSpec = DEFAULT_ROAR_SPLIT,
) -> RoarCurve:
    """Drop the top-``k`` ranked columns, retrain from scratch, score held-out loss.

    The train/test split is fixed by ``split_spec``; only the training seed
    varies across ``retrain_seeds``.
    """
    ranking = [int(r) for r in ranking]
    if sorted(ranking) != list(range(ds_full.d)):
        raise ValueError("ranking must be a permutation of the feature indices")
    if not retrain_seeds:
        raise ValueError("need at least one retrain seed")
    if max(k_values) >= ds_full.d or min(k_values) < 0:
        raise ValueError(f"k values must lie in [0, {ds_full.d - 1}]")
    train, _, test = split(ds_full, split_spec)
    means, stds, per_k = [], [], []
    for k in k_values:
        dropped = ranking[:k]
        tr, te = train.drop_columns(dropped), test.drop_columns(dropped)
        losses = [mean_cross_entropy(train_mlp(tr, replace(train_cfg, seed=int(s))), te) for s in retrain_seeds]
        per_k.append(losses)
        means.append(float(np.mean(losses)))
        stds.append(float(np.std(losses, ddof=1)) if len(losses) > 1 else 0.0)
    return RoarCurve([int(k) for k in k_values], means, stds, per_k, [int(s) for s in retrain_seeds], ranking)


@dataclass
class SensitivityReport:
    s_avg: float
    s_max: float
    radius: float
    n_probes: int
    norm: str = "L2"
    values: list[float] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


ExplainFn = Callable[[np.ndarray, int], "AttributionVector | np.ndarray"]


def _as_vector(result: AttributionVector | np.ndarray) -> np.ndarray:
    return np.asarray(result.values if isinstance(result, AttributionVector) else result, dtype=np.float64)


def sensitivity(explain_fn: ExplainFn, x: np.ndarray, radius: float, n_probes: int, seed: int) -> SensitivityReport:
    """Attribution change under uniform probes in an L-infinity ball.

    ``explain_fn(x, seed)`` is called with one harness-derived seed for the
    reference point and every probe, so stochastic explainers are compared
    under identical sampling and only the input moves.
    """
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if n_probes < 1:
        raise ValueError("n_probes must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    explain_seed = derive_seed(seed, "sensitivity-explain")
    reference = _as_vector(explain_fn(x, explain_seed))
    offsets = generator(seed, "sensitivity-probes").uniform(-radius, radius, size=(n_probes, x.size))
    dists = [float(np.linalg.norm(_as_vector(explain_fn(x + off, explain_seed)) - reference)) for off in offsets]
    return SensitivityReport(float(np.mean(dists)), float(np.max(dists)), float(radius), int(n_probes), "L2", dists)


def make_explain_fn(m: Any, calib: Any, method: str, strategy: PerturbationStrategy, target: int, **opts: Any) -> ExplainFn:
    def fn(x: np.ndarray, seed: int) -> AttributionVector:
        return explain(m, calib, x, method, strategy, seed, target=target, **opts)

    return fn


@dataclass
class DriftReport:
    violation_rate: float
    mean_lhs: float
    bound: float
    ce_max: float
    delta: float
    n_trials: int
    vacuous: bool
    note: str
    lhs: list[float] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


MAX_LHS_PROBABILITY_GAME = 4.0


def drift_bound_check(
    joint: FiniteJoint,
    miscal: Classifier,
    strategy: PerturbationStrategy,
    delta: float,
    n_trials: int,
    seed: int,
    oracle: BayesOracle | None = None,
) -> DriftReport:
    """Compare exact Shapley attributions of ``miscal`` against the Bayes oracle.

    For each sampled ``x`` the left-hand side is ``mean((phi - phi_star)**2)``
    and the bound is ``2 * max_S CE_KL + sqrt(8 log(1/delta))``, where the
    maximum runs over every coalition. Probabilities over draws of ``x``.
    """
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    if joint.d > 4:
        raise ValueError("drift bound check enumerates all coalitions and needs d <= 4")
    oracle = oracle or BayesOracle(joint, strategy)
    ce_max = float(np.max(exact_calibration_errors(miscal, joint, strategy)))
    bound = 2.0 * ce_max + math.sqrt(8.0 * math.log(1.0 / delta))
    draws = generator(seed, "drift-trials").choice(joint.probs.size, size=n_trials, p=joint.probs)
    cache: dict[int, float] = {}
    lhs = []
    for idx in draws.tolist():
        if idx not in cache:
            x = joint.support_x[idx]
            target = int(np.argmax(oracle.logits(x)))
            phi = shapley_exact(model_value_function(miscal, None, x, target, strategy), joint.d)
            phi_star = shapley_exact(model_value_function(oracle, None, x, target, strategy), joint.d)
            cache[idx] = float(np.mean((phi - phi_star) ** 2))
        lhs.append(cache[idx])
    lhs_arr = np.asarray(lhs)
    vacuous = bound >= MAX_LHS_PROBABILITY_GAME
    note = (
        f"bound {bound:.4f} >= {MAX_LHS_PROBABILITY_GAME}, the largest value the left-hand side can take for "
        "probability-valued games, so no violation is possible"
        if vacuous
        else "bound is informative"
    )
    return DriftReport(
        float(np.mean(lhs_arr > bound)), float(lhs_arr.mean()), bound, ce_max, delta, n_trials, vacuous, note, lhs
    )


def drift_trend(
    joint: FiniteJoint,
    strategy: PerturbationStrategy,
    scales: Sequence[float] = (1.0, 2.0, 4.0, 8.0),
    delta: float = 0.1,
    n_trials: int = 200,
    seed: int = 0,
) -> dict[str, Any]:
    """Run :func:`drift_bound_check` for oracle logits multiplied by each scale."""
    oracle = BayesOracle(joint, strategy)
    reports = [drift_bound_check(joint, ScaledClassifier(oracle, c), strategy, delta, n_trials, seed, oracle) for c in scales]
    means = [r.mean_lhs for r in reports]
    corr = float(np.corrcoef(scales, means)[0, 1]) if np.std(means) > 0 else 0.0
    return {
        "scales": [float(c) for c in scales],
        "mean_lhs": means,
        "correlation": corr,
        "reports": [r.to_dict() for r in reports],
    }
