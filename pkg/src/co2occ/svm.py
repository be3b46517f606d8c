"""Weighted C-SVC with an RBF kernel, trained by sequential minimal optimization.

Binary machines solve the standard dual

    min_a  1/2 a^T Q a - e^T a    s.t.  y^T a = 0,  0 <= a_i <= C * w[y_i]

with ``Q_ij = y_i y_j K(x_i, x_j)``. The working set is the maximal violating
pair (first-order selection); ties go to the lowest index, so training is fully
deterministic. Multi-class problems are composed one-vs-one with majority vote.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from numba import njit

from .ingest import NormStats

MODEL_FORMAT_VERSION = 1
DEFAULT_CACHE_BYTES = 64 * 1024 * 1024
CACHE_ENV = "CO2OCC_CACHE_MB"
MAX_KERNEL_EVALS = 10**7
_TAU = 1e-12


class SvmError(ValueError):
    """Invalid training problem or model usage."""


@dataclass(frozen=True)
class KernelParams:
    gamma: float
    c: float

    def __post_init__(self):
        if not (self.gamma > 0 and math.isfinite(self.gamma)):
            raise SvmError(f"gamma must be > 0, got {self.gamma}")
        if not (self.c > 0 and math.isfinite(self.c)):
            raise SvmError(f"C must be > 0, got {self.c}")


def rbf_kernel(x, z, gamma: float) -> float:
    """exp(-gamma * ||x - z||^2)."""
    if not gamma > 0:
        raise SvmError(f"gamma must be > 0, got {gamma}")
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    if x.shape != z.shape:
        raise SvmError(f"dimension mismatch: {x.shape} vs {z.shape}")
    diff = x - z
    return float(math.exp(-gamma * float(np.dot(diff, diff))))


def kernel_matrix(a, b, gamma: float) -> np.ndarray:
    """Pairwise RBF kernel between the rows of ``a`` and ``b``."""
    if not gamma > 0:
        raise SvmError(f"gamma must be > 0, got {gamma}")
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    sq = (
        np.sum(a * a, axis=1)[:, None]
        + np.sum(b * b, axis=1)[None, :]
        - 2.0 * (a @ b.T)
    )
    np.maximum(sq, 0.0, out=sq)
    if a is b or (a.shape == b.shape and np.array_equal(a, b)):
        # exact zeros on the diagonal and exact symmetry
        np.fill_diagonal(sq, 0.0)
        sq = 0.5 * (sq + sq.T)
    return np.exp(-gamma * sq)


def default_cache_bytes() -> int:
    """Kernel cache budget; ``CO2OCC_CACHE_MB`` overrides the 64 MB default."""
    raw = os.environ.get(CACHE_ENV)
    if raw is None or raw == "":
        return DEFAULT_CACHE_BYTES
    try:
        mb = float(raw)
    except ValueError:
        raise SvmError(f"{CACHE_ENV} must be a number of megabytes, got {raw!r}") from None
    if not mb > 0:
        raise SvmError(f"{CACHE_ENV} must be > 0")
    return int(mb * 1024 * 1024)


def balanced_weights(y) -> dict:
    """Class weights ``n / (k * n_c)``."""
    y = np.asarray(y)
    if y.size == 0:
        raise SvmError("empty label set")
    classes, counts = np.unique(y, return_counts=True)
    if classes.size < 2:
        raise SvmError("balanced weights need at least 2 classes")
    n, k = y.size, classes.size
    return {_py(c): n / (k * int(cnt)) for c, cnt in zip(classes, counts)}


def _py(v):
    return v.item() if isinstance(v, np.generic) else v


# ---------------------------------------------------------------------------
# SMO core (numba)


@njit(cache=True)
def _kernel_row(x, i, gamma, out):
    n, d = x.shape
    for k in range(n):
        s = 0.0
        for t in range(d):
            diff = x[i, t] - x[k, t]
            s += diff * diff
        out[k] = math.exp(-gamma * s)


@njit(cache=True)
def _fetch(i, x, gamma, rows, slot_of, owner, stamp, clock):
    s = slot_of[i]
    if s < 0:
        s = 0
        for t in range(1, stamp.shape[0]):
            if stamp[t] < stamp[s]:
                s = t
        if owner[s] >= 0:
            slot_of[owner[s]] = -1
        owner[s] = i
        slot_of[i] = s
        _kernel_row(x, i, gamma, rows[s])
    stamp[s] = clock
    return rows[s]


@njit(cache=True)
def _flags(t, alpha, y, cbox, up, low):
    # membership in I_up (alpha_t may move along +y_t) and I_low
    a = alpha[t]
    if y[t] > 0:
        up[t] = a < cbox[t]
        low[t] = a > 0
    else:
        up[t] = a > 0
        low[t] = a < cbox[t]


@njit(cache=True)
def _select(grad, y, up, low):
    gmax = -np.inf
    gmin = np.inf
    i = -1
    j = -1
    for t in range(y.shape[0]):
        v = -y[t] * grad[t]
        if up[t] and v > gmax:
            gmax = v
            i = t
        if low[t] and v < gmin:
            gmin = v
            j = t
    return i, j, gmax, gmin


@njit(cache=True)
def _smo(x, gamma, rows, slot_of, owner, stamp, y, cbox, tol, max_iter):
    n = y.shape[0]
    alpha = np.zeros(n)
    grad = -np.ones(n)
    up = np.empty(n, dtype=np.bool_)
    low = np.empty(n, dtype=np.bool_)
    for t in range(n):
        _flags(t, alpha, y, cbox, up, low)
    it = 0
    clock = 0
    i, j, gmax, gmin = _select(grad, y, up, low)
    while i >= 0 and j >= 0 and gmax - gmin >= tol and it < max_iter:
        clock += 1
        ki = _fetch(i, x, gamma, rows, slot_of, owner, stamp, clock)
        # LRU never evicts the row just stamped for i (cache holds >= 2 rows)
        kj = _fetch(j, x, gamma, rows, slot_of, owner, stamp, clock)
        kij = ki[j]
        ci = cbox[i]
        cj = cbox[j]
        ai_old = alpha[i]
        aj_old = alpha[j]
        quad = ki[i] + kj[j] - 2.0 * kij
        if quad <= 0:
            quad = _TAU
        if y[i] != y[j]:
            delta = (-grad[i] - grad[j]) / quad
            diff = ai_old - aj_old
            ai = ai_old + delta
            aj = aj_old + delta
            if diff > 0:
                if aj < 0:
                    aj = 0.0
                    ai = diff
            else:
                if ai < 0:
                    ai = 0.0
                    aj = -diff
            if diff > ci - cj:
                if ai > ci:
                    ai = ci
                    aj = ci - diff
            else:
                if aj > cj:
                    aj = cj
                    ai = cj + diff
        else:
            delta = (grad[i] - grad[j]) / quad
            total = ai_old + aj_old
            ai = ai_old - delta
            aj = aj_old + delta
            if total > ci:
                if ai > ci:
                    ai = ci
                    aj = total - ci
            else:
                if aj < 0:
                    aj = 0.0
                    ai = total
            if total > cj:
                if aj > cj:
                    aj = cj
                    ai = total - cj
            else:
                if ai < 0:
                    ai = 0.0
                    aj = total
        alpha[i] = ai
        alpha[j] = aj
        _flags(i, alpha, y, cbox, up, low)
        _flags(j, alpha, y, cbox, up, low)
        dai = (ai - ai_old) * y[i]
        daj = (aj - aj_old) * y[j]
        it += 1
        # gradient update fused with the next working-set selection
        gmax = -np.inf
        gmin = np.inf
        i = -1
        j = -1
        for t in range(n):
            g = grad[t] + y[t] * (dai * ki[t] + daj * kj[t])
            grad[t] = g
            v = -y[t] * g
            if up[t] and v > gmax:
                gmax = v
                i = t
            if low[t] and v < gmin:
                gmin = v
                j = t
    return alpha, grad, it, gmax - gmin


@njit(cache=True)
def _rho(alpha, grad, y, cbox):
    ub = np.inf
    lb = -np.inf
    sum_free = 0.0
    n_free = 0
    for t in range(y.shape[0]):
        yg = y[t] * grad[t]
        if alpha[t] >= cbox[t]:
            if y[t] < 0:
                ub = min(ub, yg)
            else:
                lb = max(lb, yg)
        elif alpha[t] <= 0:
            if y[t] > 0:
                ub = min(ub, yg)
            else:
                lb = max(lb, yg)
        else:
            n_free += 1
            sum_free += yg
    if n_free > 0:
        return sum_free / n_free
    return 0.5 * (ub + lb)


# ---------------------------------------------------------------------------
# Models


@dataclass
class BinaryMachine:
    """One trained two-class machine. ``positive`` is the smaller label."""

    positive: object
    negative: object
    support: np.ndarray  # indices into the training rows
    support_vectors: np.ndarray
    dual_coef: np.ndarray  # alpha_i * y_i
    bias: float
    gamma: float
    c: float
    converged: bool = True
    iterations: int = 0
    violation: float = 0.0
    objective: float = 0.0
    alpha: np.ndarray | None = field(default=None, repr=False)

    def decision_function(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.support_vectors.shape[1]:
            raise SvmError(
                f"dimension mismatch: model has {self.support_vectors.shape[1]} "
                f"features, got {x.shape[1]}"
            )
        if self.support.size == 0:
            return np.full(x.shape[0], self.bias)
        return kernel_matrix(x, self.support_vectors, self.gamma) @ self.dual_coef + self.bias

    def predict(self, x) -> np.ndarray:
        dec = self.decision_function(x)
        # zero decision is a tie: smaller label wins
        return np.where(dec >= 0, self.positive, self.negative)


def _box(labels, weights, c):
    return np.array([c * weights[_py(lab)] for lab in labels], dtype=float)


def train_binary(
    x,
    y,
    params: KernelParams,
    weights: dict | None = None,
    tol: float = 1e-3,
    max_iter: int | None = None,
    gram: np.ndarray | None = None,
    cache_bytes: int | None = None,
) -> BinaryMachine:
    """Train one binary machine by SMO.

    ``weights`` maps class label -> box multiplier (default: all 1). ``gram`` is an
    optional precomputed kernel matrix for ``x``. If ``max_iter`` is hit the best
    iterate is returned with ``converged=False``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y)
    if x.shape[0] != y.shape[0]:
        raise SvmError("x and y lengths differ")
    classes = np.unique(y)
    if classes.size != 2:
        raise SvmError(f"binary training needs exactly 2 classes, got {classes.size}")
    if not tol > 0:
        raise SvmError("tol must be > 0")
    pos, neg = _py(classes[0]), _py(classes[1])
    if weights is None:
        weights = {pos: 1.0, neg: 1.0}
    for lab in (pos, neg):
        if lab not in weights or not weights[lab] > 0:
            raise SvmError(f"missing or non-positive weight for class {lab!r}")
    n = y.shape[0]
    if cache_bytes is None:
        cache_bytes = default_cache_bytes()
    ys = np.where(y == classes[0], 1.0, -1.0)
    cbox = _box(y, weights, params.c)
    if max_iter is None:
        # each iteration reads two kernel rows of length n
        max_iter = max(MAX_KERNEL_EVALS // (2 * n), 1000)

    if gram is not None:
        gram = np.ascontiguousarray(gram, dtype=float)
        if gram.shape != (n, n):
            raise SvmError("gram matrix shape does not match x")
        rows = gram
        slot_of = np.arange(n, dtype=np.int64)
        owner = np.arange(n, dtype=np.int64)
    elif n * n * 8 <= cache_bytes:
        rows = kernel_matrix(x, x, params.gamma)
        slot_of = np.arange(n, dtype=np.int64)
        owner = np.arange(n, dtype=np.int64)
    else:
        m = max(2, cache_bytes // (8 * n))
        rows = np.empty((m, n))
        slot_of = np.full(n, -1, dtype=np.int64)
        owner = np.full(m, -1, dtype=np.int64)
    stamp = np.zeros(rows.shape[0], dtype=np.int64)

    alpha, grad, it, gap = _smo(
        np.ascontiguousarray(x), float(params.gamma), rows, slot_of, owner, stamp,
        ys, cbox, float(tol), int(max_iter),
    )
    rho = _rho(alpha, grad, ys, cbox)
    support = np.flatnonzero(alpha > 0)
    objective = 0.5 * float(np.dot(alpha, grad - 1.0))
    return BinaryMachine(
        positive=pos,
        negative=neg,
        support=support,
        support_vectors=x[support].copy(),
        dual_coef=(alpha * ys)[support],
        bias=-float(rho),
        gamma=params.gamma,
        c=params.c,
        converged=bool(gap < tol),
        iterations=int(it),
        violation=float(gap),
        objective=objective,
        alpha=alpha,
    )


@dataclass
class SvmModel:
    """One-vs-one composition of binary machines."""

    classes: list
    params: KernelParams
    machines: list  # BinaryMachine per class pair, in combinations(classes, 2) order
    weights: dict
    n_features: int
    norm: NormStats | None = None
    feature_names: list | None = None

    @property
    def converged(self) -> bool:
        return all(m.converged for m in self.machines)

    def votes(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.n_features:
            raise SvmError(
                f"dimension mismatch: model has {self.n_features} features, got {x.shape[1]}"
            )
        index = {c: k for k, c in enumerate(self.classes)}
        votes = np.zeros((x.shape[0], len(self.classes)), dtype=np.int64)
        rows = np.arange(x.shape[0])
        for m in self.machines:
            dec = m.decision_function(x)
            winner = np.where(dec >= 0, index[m.positive], index[m.negative])
            np.add.at(votes, (rows, winner), 1)
        return votes

    def predict(self, x) -> np.ndarray:
        # argmax returns the first maximum, i.e. the smallest label on ties
        votes = self.votes(x)
        return np.asarray(self.classes)[np.argmax(votes, axis=1)]

    def predict_gram(self, k_cross) -> np.ndarray:
        """Predict from a precomputed kernel between query rows and the training rows."""
        k_cross = np.atleast_2d(k_cross)
        index = {c: k for k, c in enumerate(self.classes)}
        votes = np.zeros((k_cross.shape[0], len(self.classes)), dtype=np.int64)
        rows = np.arange(k_cross.shape[0])
        for m in self.machines:
            dec = k_cross[:, m.support] @ m.dual_coef + m.bias
            winner = np.where(dec >= 0, index[m.positive], index[m.negative])
            np.add.at(votes, (rows, winner), 1)
        return np.asarray(self.classes)[np.argmax(votes, axis=1)]

    def to_dict(self) -> dict:
        return {
            "format": "co2occ-svm",
            "version": MODEL_FORMAT_VERSION,
            "params": {"gamma": self.params.gamma, "c": self.params.c},
            "classes": list(self.classes),
            "weights": [[k, v] for k, v in self.weights.items()],
            "n_features": self.n_features,
            "feature_names": self.feature_names,
            "norm": self.norm.to_dict() if self.norm is not None else None,
            "machines": [
                {
                    "positive": m.positive,
                    "negative": m.negative,
                    "support_vectors": m.support_vectors.tolist(),
                    "dual_coef": m.dual_coef.tolist(),
                    "bias": m.bias,
                    "converged": m.converged,
                }
                for m in self.machines
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SvmModel":
        if d.get("format") != "co2occ-svm":
            raise SvmError("not a serialized SVM model")
        if d.get("version") != MODEL_FORMAT_VERSION:
            raise SvmError(f"unsupported model version {d.get('version')}")
        params = KernelParams(gamma=d["params"]["gamma"], c=d["params"]["c"])
        n_features = int(d["n_features"])
        machines = []
        for m in d["machines"]:
            sv = np.asarray(m["support_vectors"], dtype=float).reshape(-1, n_features)
            machines.append(
                BinaryMachine(
                    positive=m["positive"],
                    negative=m["negative"],
                    support=np.arange(sv.shape[0]),
                    support_vectors=sv,
                    dual_coef=np.asarray(m["dual_coef"], dtype=float),
                    bias=float(m["bias"]),
                    gamma=params.gamma,
                    c=params.c,
                    converged=bool(m.get("converged", True)),
                )
            )
        norm = NormStats.from_dict(d["norm"]) if d.get("norm") else None
        return cls(
            classes=list(d["classes"]),
            params=params,
            machines=machines,
            weights={k: v for k, v in d["weights"]},
            n_features=n_features,
            norm=norm,
            feature_names=d.get("feature_names"),
        )


def train_multiclass(
    x,
    y,
    params: KernelParams,
    weights: dict | None = None,
    tol: float = 1e-3,
    max_iter: int | None = None,
    gram: np.ndarray | None = None,
    cache_bytes: int | None = None,
) -> SvmModel:
    """Train C(k, 2) binary machines; ``weights`` defaults to balanced weights."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y)
    if x.shape[0] != y.shape[0]:
        raise SvmError("x and y lengths differ")
    if x.shape[0] < 2:
        raise SvmError("need at least 2 samples")
    classes = [_py(c) for c in np.unique(y)]
    if len(classes) < 2:
        raise SvmError("single class: need at least 2 distinct labels")
    if weights is None:
        weights = balanced_weights(y)
    machines = []
    for a, b in combinations(classes, 2):
        idx = np.flatnonzero((y == a) | (y == b))
        sub_gram = gram[np.ix_(idx, idx)] if gram is not None else None
        m = train_binary(
            x[idx], y[idx], params, weights=weights, tol=tol, max_iter=max_iter,
            gram=sub_gram, cache_bytes=cache_bytes,
        )
        m.support = idx[m.support]
        machines.append(m)
    return SvmModel(
        classes=classes,
        params=params,
        machines=machines,
        weights=dict(weights),
        n_features=x.shape[1],
    )


def predict(model, x):
    """Predict labels for a single vector or a matrix of rows."""
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 1
    out = model.predict(np.atleast_2d(arr))
    return _py(out[0]) if single else out


def dual_objective(alpha, y_signed, gram) -> float:
    q = (y_signed[:, None] * y_signed[None, :]) * gram
    return 0.5 * float(alpha @ q @ alpha) - float(np.sum(alpha))
