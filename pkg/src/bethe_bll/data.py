"""Dataset ingestion, preprocessing, seeded splits and synthetic generators.

Dataset spec files are plain ``key = value`` text::

    name = boston
    csv = boston.csv          # relative to the spec file
    target = MEDV
    task = regression         # or classification
    categorical = CHAS        # comma-separated, optional
    drop = ID                 # columns to ignore, optional
    label_order = lo, mid, hi # class order for ordinal heads, optional

Lines starting with ``#`` are comments.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import special

NZV_THRESHOLD = 1e-10


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    task: str  # "regression" | "classification"
    feature_names: list[str] = field(default_factory=list)
    label_names: list[str] = field(default_factory=list)
    name: str = "dataset"
    truth: dict = field(default_factory=dict)

    @property
    def n_classes(self) -> int:
        return len(self.label_names) if self.task == "classification" else 0

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim != 2:
            raise ValueError("X must be 2-D")
        self.y = np.ravel(self.y)
        if self.y.shape[0] != self.X.shape[0]:
            raise ValueError("X and y have different numbers of rows")
        if np.isnan(self.X).any():
            raise ValueError("X contains NaN")
        if not self.feature_names:
            self.feature_names = [f"x{i}" for i in range(self.X.shape[1])]


@dataclass
class Splits:
    """Preprocessed train/val/test folds.

    Regression targets are centred by ``y_mean``; add it back for
    original-unit predictions.
    """

    X_train: np.ndarray
    y_train: np.ndarray
    X_val: np.ndarray
    y_val: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    task: str
    n_classes: int = 0
    y_mean: float = 0.0
    x_mean: np.ndarray | None = None
    x_std: np.ndarray | None = None
    kept: np.ndarray | None = None
    name: str = "dataset"

    @property
    def d(self) -> int:
        return self.X_train.shape[1]

    def transform(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return (X[:, self.kept] - self.x_mean) / self.x_std


def _parse_float(cell: str, row: int, col: str) -> float:
    try:
        return float(cell)
    except ValueError:
        raise ValueError(f"row {row}, column {col!r}: cannot parse {cell!r} as a number") from None


def load_csv(path, target: str, categorical=(), task: str = "regression", drop=(), label_order=None, name=None) -> Dataset:
    """Read a header-row CSV into a raw :class:`Dataset`.

    Declared categorical columns are one-hot encoded (one column per level, in
    first-appearance order).  Classification labels map to 0..K-1 in
    first-appearance order unless ``label_order`` is given.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        rows = [r for r in reader if any(c.strip() for c in r)]
    if target not in header:
        raise ValueError(f"target column {target!r} not found in {path}")
    categorical = list(categorical)
    for c in categorical:
        if c not in header:
            raise ValueError(f"categorical column {c!r} not found in {path}")
    t_idx = header.index(target)

    columns: list[np.ndarray] = []
    names: list[str] = []
    for j, col in enumerate(header):
        if j == t_idx or col in drop:
            continue
        cells = [r[j].strip() for r in rows]
        if col in categorical:
            levels = list(dict.fromkeys(cells))
            for lev in levels:
                columns.append(np.array([c == lev for c in cells], dtype=np.float64))
                names.append(f"{col}={lev}")
        else:
            columns.append(np.array([_parse_float(c, i + 2, col) for i, c in enumerate(cells)]))
            names.append(col)

    raw_y = [r[t_idx].strip() for r in rows]
    if any(c == "" for c in raw_y):
        raise ValueError(f"missing target value in {path}")
    label_names: list[str] = []
    if task == "regression":
        y = np.array([_parse_float(c, i + 2, target) for i, c in enumerate(raw_y)])
    else:
        label_names = list(label_order) if label_order else list(dict.fromkeys(raw_y))
        index = {lab: k for k, lab in enumerate(label_names)}
        unknown = set(raw_y) - set(index)
        if unknown:
            raise ValueError(f"labels {sorted(unknown)} missing from label_order")
        y = np.array([index[c] for c in raw_y], dtype=int)
    X = np.column_stack(columns) if columns else np.zeros((len(rows), 0))
    return Dataset(X, y, "regression" if task == "regression" else "classification", names, label_names,
                   name or path.stem)


def read_keyvalue(path) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _list(value: str | None) -> list[str]:
    return [s.strip() for s in value.split(",") if s.strip()] if value else []


def load_spec(path) -> Dataset:
    path = Path(path)
    kv = read_keyvalue(path)
    for key in ("csv", "target"):
        if key not in kv:
            raise ValueError(f"{path}: missing required key {key!r}")
    csv_path = Path(kv["csv"])
    if not csv_path.is_absolute():
        csv_path = path.parent / csv_path
    return load_csv(
        csv_path,
        kv["target"],
        categorical=_list(kv.get("categorical")),
        task=kv.get("task", "regression"),
        drop=_list(kv.get("drop")),
        label_order=_list(kv.get("label_order")) or None,
        name=kv.get("name", path.stem),
    )


def split(n: int, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Seeded 60/20/20 partition of range(n), cut at floor(0.6 n) and floor(0.8 n)."""
    if n < 5:
        raise ValueError("need at least 5 rows to split")
    perm = np.random.default_rng(seed).permutation(n)
    a, b = int(np.floor(0.6 * n)), int(np.floor(0.8 * n))
    return perm[:a], perm[a:b], perm[b:]


def preprocess(raw: Dataset, idx: tuple[np.ndarray, np.ndarray, np.ndarray]) -> Splits:
    """Standardise features and centre regression targets using train-fold statistics only."""
    tr, va, te = idx
    Xtr = raw.X[tr]
    std = Xtr.std(axis=0)
    kept = np.flatnonzero(std >= NZV_THRESHOLD)
    if kept.size == 0:
        raise ValueError("every feature has near-zero variance on the training fold")
    mean = Xtr[:, kept].mean(axis=0)
    sd = std[kept]

    def tf(X):
        return (X[:, kept] - mean) / sd

    if raw.task == "regression":
        y = raw.y.astype(np.float64)
        y_mean = float(y[tr].mean())
        y = y - y_mean
    else:
        y = raw.y.astype(int)
        y_mean = 0.0
    return Splits(
        tf(raw.X[tr]), y[tr], tf(raw.X[va]), y[va], tf(raw.X[te]), y[te],
        raw.task, raw.n_classes, y_mean, mean, sd, kept, raw.name,
    )


def make_splits(raw: Dataset, seed: int) -> Splits:
    return preprocess(raw, split(raw.X.shape[0], seed))


# ---------------------------------------------------------------------------
# synthetic generators


def gen_linear_gaussian(n: int, d: int, alpha_true: float = 1.0, sigma_true: float = 0.5, seed: int = 0) -> Dataset:
    """w ~ N(0, I/alpha), x ~ N(0, I), y = w.x + N(0, sigma^2)."""
    rng = np.random.default_rng(seed)
    w = rng.normal(0.0, 1.0 / np.sqrt(alpha_true), size=d)
    X = rng.standard_normal((n, d))
    y = X @ w + sigma_true * rng.standard_normal(n)
    return Dataset(X, y, "regression", name="linear_gaussian",
                   truth=dict(w=w, alpha=alpha_true, sigma=sigma_true))


def gen_linear_probit(n: int, d: int, alpha_true: float = 1.0, seed: int = 0) -> Dataset:
    """w ~ N(0, I/alpha), x ~ N(0, I), P(y = 1 | x) = Phi(w.x)."""
    rng = np.random.default_rng(seed)
    w = rng.normal(0.0, 1.0 / np.sqrt(alpha_true), size=d)
    X = rng.standard_normal((n, d))
    y = (rng.uniform(size=n) < special.ndtr(X @ w)).astype(int)
    return Dataset(X, y, "classification", label_names=["0", "1"], name="linear_probit",
                   truth=dict(w=w, alpha=alpha_true))


def gen_two_moons(n: int = 200, noise: float = 0.15, seed: int = 0) -> Dataset:
    """Two interleaved unit half-circles: upper centred at (0, 0), lower centred at (1, 0.5); labels 0/1."""
    if n % 2:
        raise ValueError("n must be even")
    rng = np.random.default_rng(seed)
    m = n // 2
    t = np.linspace(0.0, np.pi, m)
    upper = np.column_stack([np.cos(t), np.sin(t)])
    lower = np.column_stack([1.0 - np.cos(t), 0.5 - np.sin(t)])
    X = np.vstack([upper, lower]) + noise * rng.standard_normal((n, 2))
    y = np.r_[np.zeros(m, int), np.ones(m, int)]
    return Dataset(X, y, "classification", ["x1", "x2"], ["0", "1"], name="two_moons")
