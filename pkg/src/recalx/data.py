"""Datasets, CSV ingestion, splitting and synthetic generators.

Randomness comes from PCG64 generators seeded through :mod:`recalx._rng`, so a
given ``(spec, n, seed)`` always produces the same bytes.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from recalx._rng import generator

SPEC_VERSION = 1


class DataError(ValueError):
    """Raised for malformed datasets, files or generator specs."""


@dataclass(frozen=True, eq=False)
class Dataset:
    """Feature matrix plus integer labels.

    Attributes:
        features: ``(N, d)`` float64 array.
        labels: length-``N`` int64 array with values in ``[0, n_classes)``.
        feature_names: column names, one per feature.
        n_classes: number of classes ``K``.
        n_rejected: rows dropped at ingestion because of non-finite values.
    """

    features: np.ndarray
    labels: np.ndarray
    feature_names: tuple[str, ...]
    n_classes: int
    n_rejected: int = 0

    def __post_init__(self) -> None:
        X = np.ascontiguousarray(np.asarray(self.features, dtype=np.float64))
        y = np.ascontiguousarray(np.asarray(self.labels, dtype=np.int64))
        if X.ndim != 2:
            raise DataError("features must be a 2-D array")
        if y.shape != (X.shape[0],):
            raise DataError("labels must have one entry per row")
        if X.shape[1] < 1:
            raise DataError("need at least one feature")
        if len(self.feature_names) != X.shape[1]:
            raise DataError("feature_names length must equal the number of columns")
        if self.n_classes < 1:
            raise DataError("n_classes must be positive")
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise DataError("labels must lie in [0, n_classes)")
        if not np.all(np.isfinite(X)):
            raise DataError("features must be finite")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))

    @property
    def n(self) -> int:
        return int(self.features.shape[0])

    @property
    def d(self) -> int:
        return int(self.features.shape[1])

    def subset(self, index: Sequence[int] | np.ndarray) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.features[index], self.labels[index], self.feature_names, self.n_classes)

    def drop_columns(self, columns: Sequence[int]) -> "Dataset":
        keep = [j for j in range(self.d) if j not in set(int(c) for c in columns)]
        return Dataset(
            self.features[:, keep],
            self.labels,
            tuple(self.feature_names[j] for j in keep),
            self.n_classes,
        )


@dataclass(frozen=True, eq=False)
class FiniteJoint:
    """A joint distribution over finitely many ``(x, y)`` pairs.

    ``support_x[m]`` and ``support_y[m]`` carry probability ``probs[m]``.
    """

    support_x: np.ndarray
    support_y: np.ndarray
    probs: np.ndarray
    n_classes: int

    def __post_init__(self) -> None:
        X = np.ascontiguousarray(np.asarray(self.support_x, dtype=np.float64))
        y = np.ascontiguousarray(np.asarray(self.support_y, dtype=np.int64))
        p = np.ascontiguousarray(np.asarray(self.probs, dtype=np.float64))
        if X.ndim != 2 or X.shape[0] == 0:
            raise DataError("support_x must be a non-empty 2-D array")
        if y.shape != (X.shape[0],) or p.shape != (X.shape[0],):
            raise DataError("support_y and probs must match support_x rows")
        if not np.all(np.isfinite(X)):
            raise DataError("support values must be finite")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise DataError("probabilities must be finite and nonnegative")
        if abs(p.sum() - 1.0) > 1e-12:
            raise DataError(f"probabilities sum to {p.sum()!r}, not 1")
        if y.min() < 0 or y.max() >= self.n_classes:
            raise DataError("support labels must lie in [0, n_classes)")
        keys = {(tuple(row), int(label)) for row, label in zip(X.tolist(), y.tolist())}
        if len(keys) != X.shape[0]:
            raise DataError("support entries must be distinct")
        for arr in (X, y, p):
            arr.setflags(write=False)
        object.__setattr__(self, "support_x", X)
        object.__setattr__(self, "support_y", y)
        object.__setattr__(self, "probs", p)

    @property
    def d(self) -> int:
        return int(self.support_x.shape[1])

    def alphabet(self, j: int) -> np.ndarray:
        """Sorted distinct values taken by coordinate ``j``."""
        return np.unique(self.support_x[:, j])

    def marginal_y(self) -> np.ndarray:
        return np.bincount(self.support_y, weights=self.probs, minlength=self.n_classes)

    def sample(self, n: int, seed: int) -> Dataset:
        rng = generator(seed, "finite-joint")
        idx = rng.choice(self.probs.size, size=n, p=self.probs)
        names = tuple(f"x{j}" for j in range(self.d))
        return Dataset(self.support_x[idx], self.support_y[idx], names, self.n_classes)

    def to_dict(self) -> dict[str, Any]:
        return {
            "version": SPEC_VERSION,
            "kind": "finite",
            "n_classes": int(self.n_classes),
            "support": [[repr(float(v)) for v in row] for row in self.support_x],
            "labels": [int(v) for v in self.support_y],
            "probs": [repr(float(v)) for v in self.probs],
        }

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "FiniteJoint":
        probs = np.asarray([float(v) for v in doc["probs"]], dtype=np.float64)
        labels = np.asarray(doc["labels"], dtype=np.int64)
        support = np.asarray([[float(v) for v in row] for row in doc["support"]], dtype=np.float64)
        n_classes = int(doc.get("n_classes", int(labels.max()) + 1))
        if probs.sum() <= 0:
            raise DataError("degenerate joint: all probabilities are zero")
        if doc.get("normalize", False):
            probs = probs / probs.sum()
        return cls(support, labels, probs, n_classes)


@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0

    def __post_init__(self) -> None:
        if len(self.fractions) != 3:
            raise DataError("fractions must be a (train, val, test) triple")
        if any(f < 0 for f in self.fractions):
            raise DataError("fractions must be nonnegative")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise DataError(f"fractions sum to {sum(self.fractions)!r}, not 1")


def load_csv_dataset(path: str | Path, label_column: str, n_classes: int) -> Dataset:
    """Read a comma-separated file with a header row.

    Quoting is not supported. Rows containing a non-finite feature value are
    dropped and counted in ``Dataset.n_rejected``; anything that does not
    parse as a number raises :class:`DataError` naming the row and column.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].strip():
        raise DataError(f"{path}: missing header row")
    header = [h.strip() for h in lines[0].split(",")]
    if label_column not in header:
        raise DataError(f"{path}: no column named {label_column!r}")
    label_at = header.index(label_column)
    feature_cols = [j for j in range(len(header)) if j != label_at]
    rows: list[list[float]] = []
    labels: list[int] = []
    rejected = 0
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = [c.strip() for c in line.split(",")]
        if len(cells) != len(header):
            raise DataError(f"{path}: row {lineno} has {len(cells)} cells, expected {len(header)}")
        values = []
        for j in feature_cols:
            try:
                values.append(float(cells[j]))
            except ValueError:
                raise DataError(f"{path}: row {lineno}, column {header[j]!r}: cannot parse {cells[j]!r}") from None
        label = _parse_label(cells[label_at], path, lineno, label_column)
        if not all(math.isfinite(v) for v in values):
            rejected += 1
            continue
        if not 0 <= label < n_classes:
            raise DataError(f"{path}: row {lineno}: label {label} outside [0, {n_classes})")
        rows.append(values)
        labels.append(label)
    if rejected:
        warnings.warn(f"{path}: dropped {rejected} row(s) with non-finite values", stacklevel=2)
    if not rows:
        raise DataError(f"{path}: no usable rows")
    return Dataset(
        np.asarray(rows, dtype=np.float64),
        np.asarray(labels, dtype=np.int64),
        tuple(header[j] for j in feature_cols),
        n_classes,
        n_rejected=rejected,
    )


def _parse_label(cell: str, path: Path, lineno: int, column: str) -> int:
    try:
        return int(cell)
    except ValueError:
        pass
    try:
        value = float(cell)
    except ValueError:
        value = math.nan
    if not math.isfinite(value) or value != int(value):
        raise DataError(f"{path}: row {lineno}, column {column!r}: label {cell!r} is not an integer")
    return int(value)


def write_csv_dataset(ds: Dataset, path: str | Path, label_column: str = "y") -> None:
    header = ",".join(list(ds.feature_names) + [label_column])
    lines = [header]
    for row, label in zip(ds.features.tolist(), ds.labels.tolist()):
        lines.append(",".join([repr(v) for v in row] + [str(label)]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def make_synthetic(spec: dict[str, Any], n: int, seed: int) -> tuple[Dataset, FiniteJoint | None]:
    """Sample ``n`` i.i.d. rows from a generator spec.

    Supported kinds:

    * ``finite``: rows drawn from an explicit :class:`FiniteJoint`.
    * ``planted``: ``x ~ N(0, I)``; ``y ~ softmax(W x + b)``. A weight vector
      ``w`` means a binary task with logits ``(0, w.x + b)``; coordinates with
      zero weight are independent of the label.
    * ``moons``: two interleaving half circles with Gaussian noise.

    Only the ``finite`` kind returns the joint.
    """
    if n <= 0:
        raise DataError("n must be positive")
    kind = spec.get("kind")
    if kind == "finite":
        joint = FiniteJoint.from_dict(spec)
        return joint.sample(n, seed), joint
    if kind == "planted":
        return _make_planted(spec, n, seed), None
    if kind == "moons":
        return _make_moons(spec, n, seed), None
    raise DataError(f"unknown generator kind {kind!r}; expected finite, planted or moons")


def _make_planted(spec: dict[str, Any], n: int, seed: int) -> Dataset:
    W = np.asarray(spec.get("weights", []), dtype=np.float64)
    if W.size == 0:
        raise DataError("planted spec needs a non-empty 'weights' entry")
    if W.ndim == 1:
        W = np.vstack([np.zeros_like(W), W])
    bias = np.asarray(spec.get("bias", 0.0), dtype=np.float64)
    if bias.ndim == 0 and W.shape[0] == 2:
        bias = np.array([0.0, float(bias)])
    bias = np.broadcast_to(bias, (W.shape[0],))
    K, d = W.shape
    rng = generator(seed, "planted")
    X = rng.standard_normal((n, d))
    Z = X @ W.T + bias
    Z -= Z.max(axis=1, keepdims=True)
    P = np.exp(Z)
    P /= P.sum(axis=1, keepdims=True)
    u = rng.random(n)
    y = (u[:, None] > np.cumsum(P, axis=1)).sum(axis=1)
    y = np.minimum(y, K - 1)
    return Dataset(X, y, tuple(f"x{j}" for j in range(d)), K)


def _make_moons(spec: dict[str, Any], n: int, seed: int) -> Dataset:
    noise = float(spec.get("noise", 0.1))
    if noise < 0:
        raise DataError("moons noise must be nonnegative")
    rng = generator(seed, "moons")
    y = rng.integers(0, 2, size=n)
    t = rng.uniform(0.0, math.pi, size=n)
    x0 = np.where(y == 0, np.cos(t), 1.0 - np.cos(t))
    x1 = np.where(y == 0, np.sin(t), 0.5 - np.sin(t))
    X = np.column_stack([x0, x1]) + noise * rng.standard_normal((n, 2))
    return Dataset(X, y, ("x0", "x1"), 2)


def _part_sizes(n: int, fractions: Sequence[float]) -> list[int]:
    # largest remainder keeps sizes summing to n
    raw = [f * n for f in fractions]
    sizes = [int(math.floor(r + 1e-9)) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def split(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Shuffle rows with PCG64 and cut them into train/val/test parts."""
    sizes = _part_sizes(ds.n, spec.fractions)
    for name, frac, size in zip(("train", "val", "test"), spec.fractions, sizes):
        if frac > 0 and size == 0:
            raise DataError(f"{name} fraction {frac} yields an empty part for N={ds.n}")
    perm = generator(spec.seed, "split").permutation(ds.n)
    cuts = np.cumsum([0] + sizes)
    return tuple(ds.subset(np.sort(perm[cuts[i]:cuts[i + 1]])) for i in range(3))  # type: ignore[return-value]


def feature_means(ds: Dataset) -> np.ndarray:
    return ds.features.mean(axis=0)


def zscore(ds: Dataset) -> tuple[Dataset, np.ndarray, np.ndarray]:
    """Standardize every column; constant columns are only centered."""
    mu = feature_means(ds)
    sd = ds.features.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return Dataset((ds.features - mu) / sd, ds.labels, ds.feature_names, ds.n_classes), mu, sd


def fixture_joint() -> FiniteJoint:
    """Binary three-feature joint used by the oracle checks.

    Every ``(x, y)`` pair on ``{0, 1}^3 x {0, 1}`` has positive mass and the
    three features carry decreasing amounts of label information.
    """
    xs, ys, ps = [], [], []
    for code in range(8):
        x = [(code >> j) & 1 for j in range(3)]
        px = (1.0 + code) / 36.0
        p1 = 1.0 / (1.0 + math.exp(-(2.0 * x[0] - 1.0 * x[1] + 0.5 * x[2] - 0.6)))
        for label, py in ((0, 1.0 - p1), (1, p1)):
            xs.append(x)
            ys.append(label)
            ps.append(px * py)
    probs = np.asarray(ps)
    return FiniteJoint(np.asarray(xs, dtype=np.float64), np.asarray(ys), probs / probs.sum(), 2)


def load_json(path: str | Path) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))

