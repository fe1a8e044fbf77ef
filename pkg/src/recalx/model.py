"""Classifiers that map feature vectors to logits.

All classifiers expose ``logits`` for plain inputs and ``restricted_logits``
for already-perturbed inputs together with the coalition bitmask that produced
them. Ordinary models ignore the mask; the Bayes oracle and the planted
miscalibration wrapper need it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from recalx._numeric import PROB_FLOOR, popcount, softmax
from recalx._rng import generator
from recalx.data import Dataset, FiniteJoint
from recalx.perturbation import PerturbationStrategy, perturb_batch

MODEL_VERSION = 1
_LOG_TINY = math.log(1e-300)


class TrainingError(RuntimeError):
    pass


class Classifier:
    """Base class. Subclasses implement :meth:`_logits` on 2-D input."""

    kind = "abstract"

    def __init__(self, input_dim: int, n_classes: int) -> None:
        self.input_dim = int(input_dim)
        self.n_classes = int(n_classes)

    def _check(self, X: np.ndarray) -> tuple[np.ndarray, bool]:
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise ValueError(f"expected inputs with {self.input_dim} features, got shape {np.shape(X)}")
        return X, single

    def logits(self, X: np.ndarray) -> np.ndarray:
        X, single = self._check(X)
        z = self._logits(X)
        return z[0] if single else z

    def restricted_logits(self, Xp: np.ndarray, masks: np.ndarray) -> np.ndarray:
        return self.logits(np.atleast_2d(Xp))

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return softmax(self.logits(X))

    def _logits(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def to_dict(self) -> dict[str, Any]:
        raise NotImplementedError


class ConstantClassifier(Classifier):
    kind = "constant"

    def __init__(self, logits: Sequence[float], input_dim: int) -> None:
        self.z = np.asarray(logits, dtype=np.float64)
        super().__init__(input_dim, self.z.size)

    def _logits(self, X: np.ndarray) -> np.ndarray:
        return np.tile(self.z, (X.shape[0], 1))

    def to_dict(self) -> dict[str, Any]:
        return {
            "version": MODEL_VERSION,
            "kind": self.kind,
            "input_dim": self.input_dim,
            "logits": [repr(float(v)) for v in self.z],
        }


class MLP(Classifier):
    """Fully connected ReLU network with a linear output layer.

    ``weights[l]`` has shape ``(fan_out, fan_in)``.
    """

    kind = "mlp"

    def __init__(self, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray], activation: str = "relu") -> None:
        if activation != "relu":
            raise ValueError(f"unsupported activation {activation!r}")
        self.weights = [np.asarray(W, dtype=np.float64) for W in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        self.activation = activation
        super().__init__(self.weights[0].shape[1], self.weights[-1].shape[0])

    @property
    def dims(self) -> list[int]:
        return [self.input_dim] + [W.shape[0] for W in self.weights]

    def _logits(self, X: np.ndarray) -> np.ndarray:
        h = X
        last = len(self.weights) - 1
        for layer, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W.T + b
            if layer < last:
                h = np.maximum(h, 0.0)
        return h

    def to_dict(self) -> dict[str, Any]:
        return {
            "version": MODEL_VERSION,
            "kind": self.kind,
            "dims": self.dims,
            "weights": [[repr(float(v)) for v in W.ravel()] for W in self.weights],
            "biases": [[repr(float(v)) for v in b] for b in self.biases],
            "activation": self.activation,
        }


class BayesOracle(Classifier):
    """Exact conditional ``P(Y | pi(X, S) = pi(x, S))`` for a finite joint.

    Conditional tables are built lazily per coalition by pushing the support
    through the strategy. Perturbed points with no mass fall back to ``P_Y``.
    """

    kind = "bayes-oracle"

    def __init__(self, joint: FiniteJoint, strategy: PerturbationStrategy) -> None:
        if not strategy.deterministic:
            raise ValueError("the Bayes oracle needs a deterministic strategy")
        base = strategy.baseline_for(joint.d)
        for j in range(joint.d):
            if base[j] not in set(joint.alphabet(j).tolist()):
                raise ValueError(
                    f"strategy replaces feature {j} with {base[j]!r}, which is outside its alphabet "
                    f"{joint.alphabet(j).tolist()}"
                )
        super().__init__(joint.d, joint.n_classes)
        self.joint = joint
        self.strategy = strategy
        self._marginal = joint.marginal_y()
        self._tables: dict[int, dict[tuple[float, ...], np.ndarray]] = {}

    def table(self, mask: int) -> dict[tuple[float, ...], np.ndarray]:
        mask = int(mask)
        if mask not in self._tables:
            J = self.joint
            pushed = perturb_batch(J.support_x, np.full(J.probs.size, mask, dtype=np.uint64), self.strategy)
            mass: dict[tuple[float, ...], np.ndarray] = {}
            for row, label, p in zip(pushed.tolist(), J.support_y.tolist(), J.probs.tolist()):
                acc = mass.setdefault(tuple(row), np.zeros(self.n_classes))
                acc[label] += p
            self._tables[mask] = {k: v / v.sum() for k, v in mass.items() if v.sum() > 0}
        return self._tables[mask]

    def conditional(self, Xp: np.ndarray, masks: np.ndarray) -> np.ndarray:
        Xp = np.atleast_2d(np.asarray(Xp, dtype=np.float64))
        masks = np.broadcast_to(np.asarray(masks, dtype=np.uint64), (Xp.shape[0],))
        out = np.empty((Xp.shape[0], self.n_classes))
        for r, (row, mask) in enumerate(zip(Xp.tolist(), masks.tolist())):
            out[r] = self.table(mask).get(tuple(row), self._marginal)
        return out

    def restricted_logits(self, Xp: np.ndarray, masks: np.ndarray) -> np.ndarray:
        P = self.conditional(Xp, masks)
        with np.errstate(divide="ignore"):
            return np.maximum(np.log(P), _LOG_TINY)

    def _logits(self, X: np.ndarray) -> np.ndarray:
        full = (1 << self.input_dim) - 1
        return self.restricted_logits(X, np.full(X.shape[0], full, dtype=np.uint64))

    def to_dict(self) -> dict[str, Any]:
        return {
            "version": MODEL_VERSION,
            "kind": self.kind,
            "joint": self.joint.to_dict(),
            "strategy": self.strategy.to_dict(),
        }


class ScaledClassifier(Classifier):
    """Multiplies the logits of ``base`` by a constant (sharpens when > 1)."""

    kind = "scaled"

    def __init__(self, base: Classifier, scale: float) -> None:
        super().__init__(base.input_dim, base.n_classes)
        self.base = base
        self.scale = float(scale)

    def _logits(self, X: np.ndarray) -> np.ndarray:
        return self.scale * self.base.logits(X)

    def restricted_logits(self, Xp: np.ndarray, masks: np.ndarray) -> np.ndarray:
        return self.scale * self.base.restricted_logits(Xp, masks)

    def to_dict(self) -> dict[str, Any]:
        return {"version": MODEL_VERSION, "kind": self.kind, "scale": repr(self.scale), "base": self.base.to_dict()}


class LevelScaledClassifier(Classifier):
    """Planted miscalibration: logits scaled only above a perturbation level."""

    kind = "level-scaled"

    def __init__(self, base: Classifier, scale: float = 3.0, threshold: float = 0.5) -> None:
        super().__init__(base.input_dim, base.n_classes)
        self.base = base
        self.scale = float(scale)
        self.threshold = float(threshold)

    def _logits(self, X: np.ndarray) -> np.ndarray:
        return self.base.logits(X)

    def restricted_logits(self, Xp: np.ndarray, masks: np.ndarray) -> np.ndarray:
        z = self.base.restricted_logits(Xp, masks)
        masks = np.broadcast_to(np.asarray(masks, dtype=np.uint64), (z.shape[0],))
        level = (self.input_dim - popcount(masks)) / self.input_dim
        factor = np.where(level > self.threshold, self.scale, 1.0)
        return z * factor[:, None]

    def to_dict(self) -> dict[str, Any]:
        return {
            "version": MODEL_VERSION,
            "kind": self.kind,
            "scale": repr(self.scale),
            "threshold": repr(self.threshold),
            "base": self.base.to_dict(),
        }


def logits(m: Classifier, x: np.ndarray) -> np.ndarray:
    return m.logits(x)


def predict_proba(m: Classifier, x: np.ndarray) -> np.ndarray:
    return m.predict_proba(x)


def bayes_restricted_oracle(joint: FiniteJoint, strategy: PerturbationStrategy) -> BayesOracle:
    return BayesOracle(joint, strategy)


@dataclass(frozen=True)
class TrainConfig:
    hidden_sizes: tuple[int, ...] = (32,)
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 0.05
    weight_decay: float = 0.0
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))


def init_mlp(dims: Sequence[int], seed: int) -> MLP:
    """He-uniform weights ``U(-sqrt(6/fan_in), sqrt(6/fan_in))``, zero biases."""
    rng = generator(seed, "mlp-init")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = math.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MLP(weights, biases)


def train_mlp(train: Dataset, cfg: TrainConfig) -> MLP:
    """Mini-batch SGD (optionally with momentum) on the mean cross-entropy."""
    if train.n == 0:
        raise ValueError("training set is empty")
    dims = [train.d, *cfg.hidden_sizes, train.n_classes]
    net = init_mlp(dims, cfg.seed)
    W, b = net.weights, net.biases
    vW = [np.zeros_like(w) for w in W]
    vb = [np.zeros_like(v) for v in b]
    X, y = train.features, train.labels
    Y = np.eye(train.n_classes)[y]
    last = len(W) - 1
    for epoch in range(cfg.epochs):
        order = generator(cfg.seed, "mlp-shuffle", epoch).permutation(train.n)
        for batch, start in enumerate(range(0, train.n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            acts = [X[idx]]
            for layer in range(len(W)):
                h = acts[-1] @ W[layer].T + b[layer]
                acts.append(np.maximum(h, 0.0) if layer < last else h)
            P = softmax(acts[-1])
            loss = -np.mean(np.log(np.maximum(P[np.arange(idx.size), y[idx]], PROB_FLOOR)))
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {batch}")
            delta = (P - Y[idx]) / idx.size
            for layer in range(last, -1, -1):
                gW = delta.T @ acts[layer] + cfg.weight_decay * W[layer]
                gb = delta.sum(axis=0)
                if layer > 0:
                    delta = (delta @ W[layer]) * (acts[layer] > 0)
                vW[layer] = cfg.momentum * vW[layer] - cfg.learning_rate * gW
                vb[layer] = cfg.momentum * vb[layer] - cfg.learning_rate * gb
                W[layer] = W[layer] + vW[layer]
                b[layer] = b[layer] + vb[layer]
    return MLP(W, b)


def mean_cross_entropy(m: Classifier, ds: Dataset) -> float:
    P = m.predict_proba(ds.features)
    return float(np.mean(-np.log(np.maximum(P[np.arange(ds.n), ds.labels], PROB_FLOOR))))


def accuracy(m: Classifier, ds: Dataset) -> float:
    return float(np.mean(np.argmax(m.logits(ds.features), axis=1) == ds.labels))


def classifier_from_dict(doc: dict[str, Any]) -> Classifier:
    kind = doc.get("kind")
    if kind == "mlp":
        dims = [int(v) for v in doc["dims"]]
        weights = [
            np.asarray([float(v) for v in flat], dtype=np.float64).reshape(fan_out, fan_in)
            for flat, fan_in, fan_out in zip(doc["weights"], dims[:-1], dims[1:])
        ]
        biases = [np.asarray([float(v) for v in bias], dtype=np.float64) for bias in doc["biases"]]
        return MLP(weights, biases, doc.get("activation", "relu"))
    if kind == "constant":
        return ConstantClassifier([float(v) for v in doc["logits"]], int(doc["input_dim"]))
    if kind == "bayes-oracle":
        return BayesOracle(FiniteJoint.from_dict(doc["joint"]), PerturbationStrategy.from_dict(doc["strategy"]))
    if kind == "scaled":
        return ScaledClassifier(classifier_from_dict(doc["base"]), float(doc["scale"]))
    if kind == "level-scaled":
        return LevelScaledClassifier(classifier_from_dict(doc["base"]), float(doc["scale"]), float(doc["threshold"]))
    raise ValueError(f"unknown classifier kind {kind!r}")


def save_classifier(m: Classifier, path: str | Path) -> None:
    Path(path).write_text(json.dumps(m.to_dict(), indent=1) + "\n", encoding="utf-8")


def load_classifier(path: str | Path) -> Classifier:
    return classifier_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
