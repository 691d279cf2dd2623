"""Closed-form predictives, evaluation metrics and the paired t-test."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special, stats

from .losses import ordinal_probs
from .special import gauss_conv_nll

CALIB_LEVELS = np.round(np.arange(1, 20) * 0.05, 2)
ECE_BINS = 10
PROB_FLOOR = 1e-300


@dataclass
class RegressionPredictive:
    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        self.mean = np.ravel(np.asarray(self.mean, dtype=np.float64))
        self.variance = np.ravel(np.asarray(self.variance, dtype=np.float64))
        if np.any(self.variance <= 0):
            raise ValueError("predictive variance must be positive")


@dataclass
class ClassPredictive:
    probs: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.probs.shape[1]


def gaussian_nll(pred: RegressionPredictive, y) -> float:
    return float(np.mean(gauss_conv_nll(np.ravel(y), pred.mean, pred.variance)))


def rmse(pred: RegressionPredictive, y) -> float:
    return float(np.sqrt(np.mean(np.square(np.ravel(y) - pred.mean))))


def coverage(pred: RegressionPredictive, y, levels=CALIB_LEVELS) -> np.ndarray:
    """Fraction of targets inside the central interval at each nominal level."""
    z = special.ndtri(0.5 * (1.0 + np.asarray(levels)))
    dev = np.abs(np.ravel(y) - pred.mean) / np.sqrt(pred.variance)
    return (dev[None, :] <= z[:, None]).mean(axis=1)


def calib_err(pred: RegressionPredictive, y, levels=CALIB_LEVELS) -> float:
    """Mean |empirical coverage - nominal| over the 19 levels 0.05..0.95."""
    return float(np.mean(np.abs(coverage(pred, y, levels) - levels)))


def accuracy(pred: ClassPredictive, labels) -> float:
    return float(np.mean(np.argmax(pred.probs, axis=1) == np.ravel(labels)))


def class_nll(pred: ClassPredictive, labels) -> float:
    """Mean -log of the probability assigned to the realised class."""
    labels = np.ravel(labels).astype(int)
    p = pred.probs[np.arange(labels.size), labels]
    return float(np.mean(-np.log(np.maximum(p, PROB_FLOOR))))


def ece(pred: ClassPredictive, labels, n_bins: int = ECE_BINS) -> float:
    conf = pred.probs.max(axis=1)
    correct = np.argmax(pred.probs, axis=1) == np.ravel(labels)
    idx = np.minimum((conf * n_bins).astype(int), n_bins - 1)
    total = 0.0
    for b in range(n_bins):
        m = idx == b
        if m.any():
            total += m.sum() * abs(correct[m].mean() - conf[m].mean())
    return float(total / conf.size)


def reliability_table(pred: ClassPredictive, labels, n_bins: int = ECE_BINS) -> list[tuple[int, int, float, float]]:
    """(bin, count, accuracy, mean confidence) rows for external plotting."""
    conf = pred.probs.max(axis=1)
    correct = np.argmax(pred.probs, axis=1) == np.ravel(labels)
    idx = np.minimum((conf * n_bins).astype(int), n_bins - 1)
    rows = []
    for b in range(n_bins):
        m = idx == b
        if m.any():
            rows.append((b, int(m.sum()), float(correct[m].mean()), float(conf[m].mean())))
    return rows


def paired_t_test(a, b, alternative: str = "two-sided") -> float:
    """p-value for the mean of the paired differences a - b.

    ``alternative="greater"`` tests whether a - b has positive mean.
    """
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    n = d.size
    if n < 2:
        raise ValueError("paired t-test needs at least two pairs")
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0:
        if mean == 0:
            return 1.0
        if alternative == "greater":
            return 0.0 if mean > 0 else 1.0
        if alternative == "less":
            return 0.0 if mean < 0 else 1.0
        return 0.0
    t = mean / (sd / np.sqrt(n))
    if alternative == "two-sided":
        return float(2.0 * stats.t.sf(abs(t), n - 1))
    if alternative == "greater":
        return float(stats.t.sf(t, n - 1))
    if alternative == "less":
        return float(stats.t.cdf(t, n - 1))
    raise ValueError(f"unknown alternative {alternative!r}")


# ---------------------------------------------------------------------------
# class predictives from per-head messages


def _normalise(unnorm: np.ndarray) -> np.ndarray:
    s = unnorm.sum(axis=1, keepdims=True)
    out = np.full_like(unnorm, 1.0 / unnorm.shape[1])
    ok = s[:, 0] > 0
    out[ok] = unnorm[ok] / s[ok]
    return out


def predictive_binary(mu_f, v, c: float = 1.0) -> ClassPredictive:
    p1 = special.ndtr(np.ravel(mu_f) / np.sqrt(c * c + np.ravel(v)))
    return ClassPredictive(np.column_stack([1.0 - p1, p1]))


def predictive_ova(mu_fs, vs, c: float = 1.0) -> ClassPredictive:
    """Normalised per-head probit probabilities; rows that vanish entirely fall back to uniform."""
    cols = [special.ndtr(np.ravel(m) / np.sqrt(c * c + np.ravel(v))) for m, v in zip(mu_fs, vs)]
    return ClassPredictive(_normalise(np.column_stack(cols)))


def predictive_ordinal(mu_f, v, taus, c: float = 1.0) -> ClassPredictive:
    p = np.clip(ordinal_probs(mu_f, v, taus, c), 0.0, 1.0)
    return ClassPredictive(_normalise(p))
