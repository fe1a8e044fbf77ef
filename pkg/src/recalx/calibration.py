"""Temperature scaling and per-perturbation-level temperature scaling (ReCalX)."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from recalx._numeric import PROB_FLOOR, popcount, softmax
from recalx._rng import derive_seed
from recalx.data import Dataset
from recalx.perturbation import Coalition, PerturbationStrategy, perturb_batch, sample_masks

T_MIN = 0.01
T_MAX = 100.0
LOG_TOL = 1e-4
CALIBRATOR_VERSION = 1
SIZE_RULE = "coalition sizes drawn uniformly among the sizes whose level falls in the bin"

_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


class CalibrationWarning(UserWarning):
    pass


def apply_temperature(z: np.ndarray, T: float) -> np.ndarray:
    if not T_MIN <= T <= T_MAX:
        raise ValueError(f"temperature {T} outside [{T_MIN}, {T_MAX}]")
    return softmax(np.asarray(z, dtype=np.float64) / T)


def _mean_ce(Z: np.ndarray, y: np.ndarray, T: float) -> float:
    P = softmax(Z / T)
    return float(np.mean(-np.log(np.maximum(P[np.arange(y.size), y], PROB_FLOOR))))


@dataclass
class TemperatureFit:
    temperature: float
    ce_before: float
    ce_after: float
    n_samples: int
    trace: list[float] = field(default_factory=list)
    clamped: bool = False


def fit_temperature_logits(Z: np.ndarray, y: np.ndarray, tol: float = LOG_TOL) -> TemperatureFit:
    """Minimise mean cross-entropy over ``log10 T`` in ``[-2, 2]``.

    The loss is convex in ``1/T`` and hence unimodal in ``log T``, so a
    golden-section search brackets the optimum. ``trace`` records the best
    objective value seen after each iteration. When ``T = 1`` is at least as
    good as the search result (flat objectives in particular), ``T = 1`` wins.
    """
    Z = np.asarray(Z, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if Z.shape[0] == 0:
        raise ValueError("cannot fit a temperature on an empty set")

    def objective(u: float) -> float:
        return _mean_ce(Z, y, 10.0 ** u)

    lo, hi = math.log10(T_MIN), math.log10(T_MAX)
    a = hi - _INV_PHI * (hi - lo)
    b = lo + _INV_PHI * (hi - lo)
    fa, fb = objective(a), objective(b)
    best_u, best = (a, fa) if fa <= fb else (b, fb)
    trace = [best]
    while hi - lo > tol:
        if fa <= fb:
            hi, b, fb = b, a, fa
            a = hi - _INV_PHI * (hi - lo)
            fa = objective(a)
            if fa < best:
                best_u, best = a, fa
        else:
            lo, a, fa = a, b, fb
            b = lo + _INV_PHI * (hi - lo)
            fb = objective(b)
            if fb < best:
                best_u, best = b, fb
        trace.append(best)
    for u in (lo, hi):
        value = objective(u)
        if value < best:
            best_u, best = u, value
    before = objective(0.0)
    T = 10.0 ** best_u
    if before <= best + 1e-12:
        T, best = 1.0, before
    T = min(max(T, T_MIN), T_MAX)
    clamped = np.unique(y).size < 2
    if clamped:
        # the objective only flattens out towards a boundary; report that boundary
        edge = T_MIN if T < 1.0 else T_MAX
        value = _mean_ce(Z, y, edge)
        if value <= best + 1e-12:
            T, best = edge, value
        warnings.warn("fit set contains a single class; temperature sits at the search boundary", CalibrationWarning, stacklevel=2)
    return TemperatureFit(T, before, best, int(y.size), trace, clamped)


def fit_temperature(m: Any, val: Dataset) -> float:
    """Single temperature fitted on the unperturbed validation set."""
    return fit_temperature_logits(m.logits(val.features), val.labels).temperature


@dataclass(frozen=True, eq=False)
class ReCalXCalibrator:
    """``B`` equal-width perturbation-level bins, one temperature each.

    Bins are left-closed and right-open except the last, which also contains
    level 1.
    """

    temperatures: tuple[float, ...]
    strategy: str = ""
    seed: int = 0
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        temps = tuple(float(t) for t in self.temperatures)
        if not temps:
            raise ValueError("need at least one bin")
        for t in temps:
            if not T_MIN <= t <= T_MAX:
                raise ValueError(f"temperature {t} outside [{T_MIN}, {T_MAX}]")
        object.__setattr__(self, "temperatures", temps)
        object.__setattr__(self, "_tables", {})

    @property
    def B(self) -> int:
        return len(self.temperatures)

    @property
    def edges(self) -> np.ndarray:
        return np.arange(self.B + 1) / self.B

    def bin_index(self, S: Coalition) -> int:
        # floor(level * B) evaluated exactly in integers
        return min((S.d - S.size) * self.B // S.d, self.B - 1)

    def _size_table(self, d: int) -> tuple[float, ...]:
        # temperature per coalition size, built once per dimension
        table = self._tables.get(d)
        if table is None:
            B = self.B
            table = tuple(self.temperatures[min((d - s) * B // d, B - 1)] for s in range(d + 1))
            self._tables[d] = table
        return table

    def select_temperature(self, S: Coalition) -> float:
        return self._size_table(S.d)[S.kept.bit_count()]

    def bins_for(self, masks: np.ndarray, d: int) -> np.ndarray:
        perturbed = d - popcount(masks)
        return np.minimum(perturbed * self.B // d, self.B - 1)

    def temperatures_for(self, masks: np.ndarray, d: int) -> np.ndarray:
        return np.asarray(self.temperatures)[self.bins_for(masks, d)]

    def to_dict(self) -> dict[str, Any]:
        return {
            "version": CALIBRATOR_VERSION,
            "B": self.B,
            "edges": [float(e) for e in self.edges],
            "temperatures": list(self.temperatures),
            "strategy": self.strategy,
            "seed": self.seed,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "ReCalXCalibrator":
        temps = [float(t) for t in doc["temperatures"]]
        if int(doc.get("B", len(temps))) != len(temps):
            raise ValueError("B does not match the number of temperatures")
        return cls(tuple(temps), doc.get("strategy", ""), int(doc.get("seed", 0)), dict(doc.get("metadata", {})))


def temperature_scaling_calibrator(T: float, strategy: str = "", seed: int = 0) -> ReCalXCalibrator:
    return ReCalXCalibrator((T,), strategy, seed, {"method": "ts"})


@dataclass
class BinFit:
    bin: int
    n_samples: int
    temperature: float
    ce_before: float
    ce_after: float
    sizes: list[int]
    inherited_from: int | None = None
    trace: list[float] = field(default_factory=list)


@dataclass
class FitReport:
    bins: list[BinFit]
    size_rule: str = SIZE_RULE

    def to_dict(self) -> dict[str, Any]:
        return {
            "size_rule": self.size_rule,
            "bins": [
                {
                    "bin": b.bin,
                    "n_samples": b.n_samples,
                    "temperature": b.temperature,
                    "ce_before": b.ce_before,
                    "ce_after": b.ce_after,
                    "sizes": b.sizes,
                    "inherited_from": b.inherited_from,
                    "trace": b.trace,
                }
                for b in self.bins
            ],
        }


def bin_sizes(d: int, B: int) -> list[list[int]]:
    """Coalition sizes whose perturbation level lands in each bin."""
    out: list[list[int]] = [[] for _ in range(B)]
    for perturbed in range(d + 1):
        out[min(perturbed * B // d, B - 1)].append(d - perturbed)
    return [sorted(s) for s in out]


def perturbed_pool(
    m: Any,
    val: Dataset,
    strategy: PerturbationStrategy,
    sizes: Sequence[int],
    reps: int,
    seed: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Logits and labels of ``reps`` perturbed copies of every validation row."""
    n = val.n * reps
    masks = sample_masks(val.d, "uniform-size", n, seed, sizes=sizes)
    rows = np.repeat(np.arange(val.n), reps)
    Xp = perturb_batch(val.features[rows], masks, strategy, seed, indices=rows)
    return m.restricted_logits(Xp, masks), val.labels[rows]


def fit_recalx(
    m: Any,
    val: Dataset,
    strategy: PerturbationStrategy,
    B: int = 10,
    reps_per_level: int = 10,
    seed: int = 0,
) -> tuple[ReCalXCalibrator, FitReport]:
    """Fit one temperature per perturbation-level bin on perturbed validation data.

    Each bin draws its own coalition stream from ``(seed, bin)``. Bins that no
    coalition size can reach (possible when ``B > d + 1``) take the
    temperature of the nearest reachable bin.
    """
    if B < 1:
        raise ValueError("B must be >= 1")
    if reps_per_level < 1:
        raise ValueError("reps_per_level must be >= 1")
    if val.n == 0:
        raise ValueError("validation set is empty")
    sizes_per_bin = bin_sizes(val.d, B)
    fits: list[BinFit | None] = [None] * B
    for b, sizes in enumerate(sizes_per_bin):
        if not sizes:
            continue
        Z, y = perturbed_pool(m, val, strategy, sizes, reps_per_level, derive_seed(seed, "recalx-bin", b))
        fit = fit_temperature_logits(Z, y)
        fits[b] = BinFit(b, fit.n_samples, fit.temperature, fit.ce_before, fit.ce_after, sizes, None, fit.trace)
    reachable = [b for b in range(B) if fits[b] is not None]
    for b in range(B):
        if fits[b] is None:
            src = min(reachable, key=lambda r: (abs(r - b), r))
            fits[b] = BinFit(b, 0, fits[src].temperature, math.nan, math.nan, [], src)
    bins = [f for f in fits if f is not None]
    calib = ReCalXCalibrator(
        tuple(f.temperature for f in bins),
        strategy.name,
        seed,
        {
            "method": "recalx",
            "validation_size": val.n,
            "reps_per_level": reps_per_level,
            "bin_counts": [f.n_samples for f in bins],
        },
    )
    return calib, FitReport(bins)


def save_calibrator(c: ReCalXCalibrator, path: str | Path) -> None:
    Path(path).write_text(json.dumps(c.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_calibrator(path: str | Path) -> ReCalXCalibrator:
    return ReCalXCalibrator.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
