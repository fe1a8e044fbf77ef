"""Coalitions, perturbation strategies and restricted prediction.

A coalition is the set of *kept* (unperturbed) feature indices, stored as a
bitmask: bit ``j`` set means feature ``j`` keeps its value. Vectorised helpers
take ``uint64`` mask arrays and therefore support ``d <= 63``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

from recalx._numeric import mask_bits, popcount, softmax
from recalx._rng import derive_seed, generator

MAX_EXHAUSTIVE_D = 20
MAX_VECTOR_D = 63

STRATEGY_KINDS = ("zero-baseline", "fixed-baseline", "mean-replacement", "gaussian-noise")
POLICIES = ("uniform-size", "shapley-kernel", "fixed-level", "exhaustive")


@dataclass(frozen=True, order=True)
class Coalition:
    kept: int
    d: int

    def __post_init__(self) -> None:
        if self.d < 1:
            raise ValueError("d must be positive")
        if self.kept < 0 or self.kept >> self.d:
            raise ValueError(f"bitmask {self.kept:#x} has bits outside 0..{self.d - 1}")

    @classmethod
    def from_indices(cls, indices: Iterable[int], d: int) -> "Coalition":
        mask = 0
        for i in indices:
            if not 0 <= int(i) < d:
                raise ValueError(f"feature index {i} outside 0..{d - 1}")
            mask |= 1 << int(i)
        return cls(mask, d)

    @classmethod
    def full(cls, d: int) -> "Coalition":
        return cls((1 << d) - 1, d)

    @classmethod
    def empty(cls, d: int) -> "Coalition":
        return cls(0, d)

    @property
    def size(self) -> int:
        return self.kept.bit_count()

    def indices(self) -> tuple[int, ...]:
        return tuple(j for j in range(self.d) if self.kept >> j & 1)

    def __contains__(self, j: int) -> bool:
        return bool(self.kept >> j & 1)

    def to_dict(self) -> dict[str, Any]:
        return {"d": self.d, "kept": hex(self.kept)}

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "Coalition":
        return cls(int(doc["kept"], 16), int(doc["d"]))


@dataclass(frozen=True)
class PerturbationStrategy:
    """Replacement rule for the features outside a coalition.

    ``baseline`` is used by the baseline and mean kinds; ``sigma`` by the
    additive Gaussian noise kind. A zero baseline without an explicit vector
    adapts to the input dimension.
    """

    kind: str
    baseline: tuple[float, ...] | None = None
    sigma: float | None = None
    name: str = field(default="", compare=False)

    def __post_init__(self) -> None:
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown strategy kind {self.kind!r}; expected one of {STRATEGY_KINDS}")
        if self.kind in ("fixed-baseline", "mean-replacement"):
            if self.baseline is None or len(self.baseline) == 0:
                raise ValueError(f"{self.kind} needs a baseline vector")
        if self.baseline is not None:
            b = tuple(float(v) for v in self.baseline)
            if not all(math.isfinite(v) for v in b):
                raise ValueError("baseline entries must be finite")
            object.__setattr__(self, "baseline", b)
        if self.kind == "gaussian-noise" and not (self.sigma is not None and self.sigma > 0):
            raise ValueError("gaussian-noise needs sigma > 0")
        if not self.name:
            object.__setattr__(self, "name", self.kind)

    @classmethod
    def zero_baseline(cls, d: int | None = None) -> "PerturbationStrategy":
        return cls("zero-baseline", None if d is None else (0.0,) * d)

    @classmethod
    def fixed_baseline(cls, b: Sequence[float]) -> "PerturbationStrategy":
        return cls("fixed-baseline", tuple(b))

    @classmethod
    def mean_replacement(cls, mu: Sequence[float]) -> "PerturbationStrategy":
        return cls("mean-replacement", tuple(mu))

    @classmethod
    def gaussian_noise(cls, sigma: float) -> "PerturbationStrategy":
        return cls("gaussian-noise", sigma=float(sigma))

    @property
    def deterministic(self) -> bool:
        return self.kind != "gaussian-noise"

    def baseline_for(self, d: int) -> np.ndarray:
        if self.baseline is None:
            return np.zeros(d)
        if len(self.baseline) != d:
            raise ValueError(f"strategy baseline has length {len(self.baseline)}, input has {d} features")
        return np.asarray(self.baseline, dtype=np.float64)

    def to_dict(self) -> dict[str, Any]:
        doc: dict[str, Any] = {"kind": self.kind}
        if self.kind == "mean-replacement":
            doc["mu"] = [repr(v) for v in self.baseline]
        elif self.kind == "fixed-baseline":
            doc["baseline"] = [repr(v) for v in self.baseline]
        elif self.kind == "zero-baseline" and self.baseline is not None:
            doc["d"] = len(self.baseline)
        elif self.kind == "gaussian-noise":
            doc["sigma"] = repr(self.sigma)
        return doc

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "PerturbationStrategy":
        kind = doc.get("kind")
        if kind == "mean-replacement":
            return cls.mean_replacement([float(v) for v in doc["mu"]])
        if kind == "fixed-baseline":
            return cls.fixed_baseline([float(v) for v in doc["baseline"]])
        if kind == "zero-baseline":
            return cls.zero_baseline(doc.get("d"))
        if kind == "gaussian-noise":
            return cls.gaussian_noise(float(doc["sigma"]))
        raise ValueError(f"unknown strategy kind {kind!r}; expected one of {STRATEGY_KINDS}")


def _noise(seed: int, index: int, mask: int, d: int) -> np.ndarray:
    # per-call stream keyed by (seed, sample index, kept-bitmask)
    return generator(derive_seed(seed, "noise", index, mask)).standard_normal(d)


def perturb(
    x: np.ndarray,
    S: Coalition,
    strategy: PerturbationStrategy,
    seed: int = 0,
    index: int = 0,
) -> np.ndarray:
    """Keep ``x`` on the coalition and replace the remaining coordinates."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != S.d:
        raise ValueError(f"input has shape {x.shape}, coalition expects d={S.d}")
    keep = np.array([S.kept >> j & 1 for j in range(S.d)], dtype=bool)
    if strategy.kind == "gaussian-noise":
        replaced = x + strategy.sigma * _noise(seed, index, S.kept, S.d)
    else:
        replaced = strategy.baseline_for(S.d)
    return np.where(keep, x, replaced)


def perturb_batch(
    X: np.ndarray,
    masks: np.ndarray,
    strategy: PerturbationStrategy,
    seed: int = 0,
    indices: np.ndarray | None = None,
) -> np.ndarray:
    """Row-wise :func:`perturb`; ``masks[r]`` is the coalition for row ``r``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n, d = X.shape
    if d > MAX_VECTOR_D:
        raise ValueError(f"batched perturbation supports d <= {MAX_VECTOR_D}")
    masks = np.broadcast_to(np.asarray(masks, dtype=np.uint64), (n,))
    keep = mask_bits(masks, d)
    if strategy.kind == "gaussian-noise":
        idx = np.arange(n) if indices is None else np.broadcast_to(np.asarray(indices), (n,))
        noise = np.stack([_noise(seed, int(i), int(m), d) for i, m in zip(idx, masks)]) if n else np.zeros((0, d))
        replaced = X + strategy.sigma * noise
    else:
        replaced = np.broadcast_to(strategy.baseline_for(d), (n, d))
    return np.where(keep, X, replaced)


def perturbation_level(S: Coalition) -> float:
    """Fraction of perturbed features, ``(d - |S|) / d``."""
    return (S.d - S.size) / S.d


def level_to_size(level: float, d: int) -> int:
    """Coalition size ``round((1 - level) * d)`` with halves rounded up."""
    if not 0.0 <= level <= 1.0:
        raise ValueError(f"perturbation level {level} outside [0, 1]")
    return int(math.floor((1.0 - level) * d + 0.5 + 1e-12))


def _masks_of_sizes(rng: np.random.Generator, sizes: np.ndarray, d: int) -> np.ndarray:
    # uniform subset of each requested size: rank d uniform keys, keep the smallest `size`
    keys = rng.random((sizes.shape[0], d))
    ranks = np.argsort(np.argsort(keys, axis=1, kind="stable"), axis=1, kind="stable")
    bits = ranks < sizes[:, None]
    weights = np.left_shift(np.uint64(1), np.arange(d, dtype=np.uint64))
    return (bits.astype(np.uint64) * weights).sum(axis=1, dtype=np.uint64)


def sample_masks(
    d: int,
    policy: str,
    count: int,
    seed: int,
    level: float | None = None,
    sizes: Sequence[int] | None = None,
) -> np.ndarray:
    """Sample coalition bitmasks as a ``uint64`` array.

    ``sizes`` restricts the uniform-size policy to the given coalition sizes,
    which is how per-bin calibration sets are drawn.
    """
    if d < 1:
        raise ValueError("d must be positive")
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}; expected one of {POLICIES}")
    if policy == "exhaustive":
        if d > MAX_EXHAUSTIVE_D:
            raise ValueError(f"exhaustive enumeration needs d <= {MAX_EXHAUSTIVE_D}, got {d}")
        return np.arange(1 << d, dtype=np.uint64)
    if d > MAX_VECTOR_D:
        raise ValueError(f"sampled coalitions support d <= {MAX_VECTOR_D}")
    rng = generator(seed, "coalitions", policy)
    if policy == "uniform-size":
        choices = np.arange(d + 1) if sizes is None else np.asarray(sorted(set(sizes)), dtype=np.int64)
        drawn = choices[rng.integers(0, choices.size, size=count)]
    elif policy == "fixed-level":
        if level is None:
            raise ValueError("fixed-level policy needs a level")
        drawn = np.full(count, level_to_size(level, d), dtype=np.int64)
    else:
        if d < 2:
            raise ValueError("shapley-kernel sampling needs d >= 2")
        s = np.arange(1, d)
        mass = (d - 1) / (s * (d - s))
        drawn = rng.choice(s, size=count, p=mass / mass.sum())
    return _masks_of_sizes(rng, np.asarray(drawn, dtype=np.int64), d)


def sample_coalitions(
    d: int,
    policy: str,
    count: int,
    seed: int,
    level: float | None = None,
) -> list[Coalition]:
    return [Coalition(int(m), d) for m in sample_masks(d, policy, count, seed, level=level)]


def restricted_predict_batch(
    m: Any,
    calib: Any,
    X: np.ndarray,
    masks: np.ndarray,
    strategy: PerturbationStrategy,
    seed: int = 0,
    indices: np.ndarray | None = None,
) -> np.ndarray:
    """Class probabilities of the model on perturbed rows, optionally recalibrated."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    masks = np.broadcast_to(np.asarray(masks, dtype=np.uint64), (X.shape[0],))
    Xp = perturb_batch(X, masks, strategy, seed, indices)
    z = m.restricted_logits(Xp, masks)
    if calib is None:
        return softmax(z)
    return softmax(z, calib.temperatures_for(masks, X.shape[1])[:, None])


def restricted_predict(
    m: Any,
    calib: Any,
    x: np.ndarray,
    S: Coalition,
    strategy: PerturbationStrategy,
    seed: int = 0,
    index: int = 0,
) -> np.ndarray:
    xp = perturb(x, S, strategy, seed, index)
    mask = np.array([S.kept], dtype=np.uint64)
    z = m.restricted_logits(xp[None, :], mask)[0]
    return softmax(z, None if calib is None else calib.select_temperature(S))


def levels_of(masks: np.ndarray, d: int) -> np.ndarray:
    return (d - popcount(masks)) / d
