"""Classification/count metrics, Spearman rank correlation, permutation importance."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np


class MetricError(ValueError):
    pass


def _pair(y, y_hat):
    y = np.asarray(y)
    y_hat = np.asarray(y_hat)
    if y.ndim != 1 or y.shape != y_hat.shape:
        raise MetricError(f"label arrays must be 1-D and equal length, got {y.shape} and {y_hat.shape}")
    if y.size == 0:
        raise MetricError("empty label arrays")
    return y, y_hat


def accuracy(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    return float(np.mean(y == y_hat))


def per_class_counts(y, y_hat):
    """classes, true positives, predicted counts, support."""
    y, y_hat = _pair(y, y_hat)
    classes = np.unique(np.concatenate([y, y_hat]))
    tp = np.array([np.sum((y == c) & (y_hat == c)) for c in classes])
    pred = np.array([np.sum(y_hat == c) for c in classes])
    support = np.array([np.sum(y == c) for c in classes])
    return classes, tp, pred, support


def prf1(y, y_hat, averaging: str = "weighted"):
    """Support-weighted precision, recall and F1 (``2PR/(P+R)``, 0 when P+R=0)."""
    if averaging != "weighted":
        raise MetricError(f"unsupported averaging {averaging!r}")
    classes, tp, pred, support = per_class_counts(y, y_hat)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(pred > 0, tp / np.where(pred > 0, pred, 1), 0.0)
        r = np.where(support > 0, tp / np.where(support > 0, support, 1), 0.0)
        f = np.where(p + r > 0, 2 * p * r / np.where(p + r > 0, p + r, 1), 0.0)
    w = support / support.sum()
    return float(w @ p), float(w @ r), float(w @ f)


def rmse(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    d = y.astype(float) - y_hat.astype(float)
    return float(np.sqrt(np.mean(d * d)))


def nrmse(y, y_hat) -> float:
    """RMSE divided by the largest true count."""
    y, y_hat = _pair(y, y_hat)
    top = float(np.max(y))
    if top <= 0:
        raise MetricError("NRMSE undefined: maximum ground-truth occupancy is 0")
    return rmse(y, y_hat) / top


@dataclass
class MetricReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    rmse: float
    nrmse: float | None
    support: dict

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "rmse": self.rmse,
            "nrmse": self.nrmse,
            "support": {str(k): v for k, v in self.support.items()},
        }


def metric_report(y, y_hat, counts_true=None, counts_pred=None) -> MetricReport:
    """All metrics; RMSE/NRMSE use ``counts_*`` when given (state task: occupant counts)."""
    y, y_hat = _pair(y, y_hat)
    p, r, f = prf1(y, y_hat)
    ct = y if counts_true is None else np.asarray(counts_true)
    cp = y_hat if counts_pred is None else np.asarray(counts_pred)
    classes, counts = np.unique(y, return_counts=True)
    return MetricReport(
        accuracy=accuracy(y, y_hat),
        precision=p,
        recall=r,
        f1=f,
        rmse=rmse(ct, cp),
        nrmse=nrmse(ct, cp) if np.max(ct) > 0 else None,
        support={c.item(): int(n) for c, n in zip(classes, counts)},
    )


def average_ranks(a) -> np.ndarray:
    """1-based ranks; tied values share the mean of their positions."""
    a = np.asarray(a, dtype=float)
    order = np.argsort(a, kind="mergesort")
    sorted_a = a[order]
    ranks = np.empty(a.shape[0])
    # boundaries of runs of equal values
    starts = np.flatnonzero(np.concatenate([[True], sorted_a[1:] != sorted_a[:-1]]))
    ends = np.append(starts[1:], a.shape[0])
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = 0.5 * (s + e - 1) + 1.0
    return ranks


def srocc(a, b) -> float:
    """Spearman rank correlation: Pearson correlation of tie-averaged ranks."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise MetricError("srocc needs two 1-D arrays of equal length")
    if a.size < 2:
        raise MetricError("srocc needs at least 2 observations")
    if np.all(a == a[0]) or np.all(b == b[0]):
        raise MetricError("undefined correlation: constant input")
    ra = average_ranks(a) - (a.size + 1) / 2.0
    rb = average_ranks(b) - (b.size + 1) / 2.0
    r = float(ra @ rb / np.sqrt((ra @ ra) * (rb @ rb)))
    return max(-1.0, min(1.0, r))


@dataclass
class ImportanceReport:
    names: list
    mean: np.ndarray
    sd: np.ndarray
    n_repeats: int
    baseline: float
    scores: np.ndarray  # (n_features, n_repeats) permuted accuracies

    def as_dict(self) -> dict:
        return {n: (float(m), float(s)) for n, m, s in zip(self.names, self.mean, self.sd)}

    def to_dict(self) -> dict:
        return {
            "n_repeats": self.n_repeats,
            "baseline_accuracy": self.baseline,
            "features": [
                {"feature": n, "mean_importance": float(m), "sd": float(s)}
                for n, m, s in zip(self.names, self.mean, self.sd)
            ],
        }

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["feature", "mean_importance", "sd"])
            for n, m, s in zip(self.names, self.mean, self.sd):
                w.writerow([n, repr(float(m)), repr(float(s))])


def permutation_importance(model, x, y, n_repeats: int = 5, seed: int = 0, names=None
                           ) -> ImportanceReport:
    """Accuracy drop when one column is shuffled, averaged over ``n_repeats`` shuffles.

    ``model`` needs a ``predict(x)`` method. Shuffle k of feature j uses the seed
    stream ``(seed, j, k)`` so results do not depend on evaluation order.
    """
    if n_repeats < 1:
        raise MetricError("n_repeats must be >= 1")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y)
    if names is None:
        names = [f"f{j}" for j in range(x.shape[1])]
    base = accuracy(y, model.predict(x))
    scores = np.empty((x.shape[1], n_repeats))
    for j in range(x.shape[1]):
        for k in range(n_repeats):
            rng = np.random.default_rng([seed, j, k])
            xp = x.copy()
            xp[:, j] = x[rng.permutation(x.shape[0]), j]
            scores[j, k] = accuracy(y, model.predict(xp))
    drops = base - scores
    return ImportanceReport(
        names=list(names),
        mean=drops.mean(axis=1),
        sd=drops.std(axis=1),
        n_repeats=n_repeats,
        baseline=base,
        scores=scores,
    )
