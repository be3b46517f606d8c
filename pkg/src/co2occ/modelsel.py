"""Cross-validated (C, gamma) grid search and the three-round split protocol."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .evaluation import ImportanceReport, metric_report, permutation_importance
from .features import FeatureMatrix, FeatureSpec, build_features
from .ingest import Dataset, NormStats, normalize
from .svm import KernelParams, SvmModel, balanced_weights, kernel_matrix, train_multiclass

TASKS = ("state", "quantity")


class ExperimentError(ValueError):
    """Data that cannot support the requested experiment (e.g. a single class)."""


@dataclass(frozen=True)
class GridSpec:
    c_lo: int = -10
    c_hi: int = 10
    gamma_lo: int = -10
    gamma_hi: int = 10
    gamma_floor: int = -10  # gamma is never expanded below 2**gamma_floor
    expansion_step: int = 2
    max_expansions: int = 5
    stride: int = 1  # exponent spacing inside the grid

    def __post_init__(self):
        if self.c_lo > self.c_hi or self.gamma_lo > self.gamma_hi:
            raise ValueError("grid bounds must satisfy lo <= hi")
        if self.expansion_step < 1 or self.stride < 1 or self.max_expansions < 0:
            raise ValueError("expansion_step and stride must be >= 1, max_expansions >= 0")
        if self.gamma_lo < self.gamma_floor:
            raise ValueError("gamma_lo below gamma_floor")

    @classmethod
    def parse(cls, text: str) -> "GridSpec":
        """'c_lo:c_hi,g_lo:g_hi' exponents, e.g. '-10:10,-10:10'."""
        try:
            c, g = text.split(",")
            c_lo, c_hi = (int(v) for v in c.split(":"))
            g_lo, g_hi = (int(v) for v in g.split(":"))
        except ValueError:
            raise ValueError(f"grid must look like 'c_lo:c_hi,g_lo:g_hi', got {text!r}") from None
        return cls(c_lo=c_lo, c_hi=c_hi, gamma_lo=g_lo, gamma_hi=g_hi,
                   gamma_floor=min(g_lo, cls.gamma_floor))


@dataclass(frozen=True)
class SplitPlan:
    rounds: int = 3
    train_fraction: float = 0.6
    seed: int = 0
    stratify_occupancy: bool = True
    stratify_season: bool = True

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must lie in (0, 1)")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")


@dataclass
class CvResult:
    scores: dict  # (c_exp, gamma_exp) -> mean CV accuracy
    c_exp: int
    gamma_exp: int
    expansions: int
    hit_max_expansions: bool
    bounds: tuple  # final (c_lo, c_hi, gamma_lo, gamma_hi)

    @property
    def c(self) -> float:
        return 2.0 ** self.c_exp

    @property
    def gamma(self) -> float:
        return 2.0 ** self.gamma_exp

    @property
    def best_score(self) -> float:
        return self.scores[(self.c_exp, self.gamma_exp)]


def kfold_indices(n: int, k: int, y=None, seed: int = 0) -> list:
    """k disjoint folds covering range(n); stratified by ``y`` when given."""
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if k > n:
        raise ValueError(f"k={k} exceeds sample count n={n}")
    rng = np.random.default_rng(seed)
    if y is None:
        order = rng.permutation(n)
    else:
        y = np.asarray(y)
        if y.shape[0] != n:
            raise ValueError("y length must equal n")
        parts = []
        for c in np.unique(y):
            idx = np.flatnonzero(y == c)
            parts.append(idx[rng.permutation(idx.shape[0])])
        order = np.concatenate(parts)
    # dealing consecutive positions round-robin keeps every class within one of n_c/k
    return [np.sort(order[f::k]) for f in range(k)]


def grid_search(x, y, grid: GridSpec = GridSpec(), k: int = 5, seed: int = 0, scorer=None,
                tol: float = 1e-3):
    """Mean k-fold CV accuracy over powers of two, expanding the grid at its boundary.

    Returns ``(C, gamma, CvResult)``. Ties go to the smaller C, then the smaller
    gamma. ``scorer(c_exp, gamma_exp) -> score`` replaces cross-validation (for
    testing the search logic).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y)
    folds = kfold_indices(x.shape[0], k, y, seed) if scorer is None else None
    scores: dict = {}

    def evaluate(cells):
        todo = [cell for cell in cells if cell not in scores]
        if scorer is not None:
            for c_exp, g_exp in todo:
                scores[(c_exp, g_exp)] = float(scorer(c_exp, g_exp))
            return
        by_gamma: dict = {}
        for c_exp, g_exp in todo:
            by_gamma.setdefault(g_exp, []).append(c_exp)
        for g_exp in sorted(by_gamma):
            gram = kernel_matrix(x, x, 2.0 ** g_exp)
            accs = {c_exp: [] for c_exp in by_gamma[g_exp]}
            for f in range(k):
                val = folds[f]
                tr = np.sort(np.concatenate([folds[h] for h in range(k) if h != f]))
                g_tr = gram[np.ix_(tr, tr)]
                g_val = gram[np.ix_(val, tr)]
                w = balanced_weights(y[tr])
                for c_exp in sorted(by_gamma[g_exp]):
                    model = train_multiclass(
                        x[tr], y[tr], KernelParams(gamma=2.0 ** g_exp, c=2.0 ** c_exp),
                        weights=w, tol=tol, gram=g_tr,
                    )
                    accs[c_exp].append(float(np.mean(model.predict_gram(g_val) == y[val])))
            for c_exp, a in accs.items():
                scores[(c_exp, g_exp)] = float(np.mean(a))

    def best():
        return min(scores, key=lambda cell: (-scores[cell], cell[0], cell[1]))

    s = grid.stride
    c_vals = list(range(grid.c_lo, grid.c_hi + 1, s))
    g_vals = list(range(grid.gamma_lo, grid.gamma_hi + 1, s))
    evaluate([(c, g) for g in g_vals for c in c_vals])
    expansions = 0
    while True:
        bc, bg = best()
        grow_c_lo = bc == c_vals[0]
        grow_c_hi = bc == c_vals[-1]
        grow_g_lo = bg == g_vals[0] and g_vals[0] - s >= grid.gamma_floor
        grow_g_hi = bg == g_vals[-1]
        if not (grow_c_lo or grow_c_hi or grow_g_lo or grow_g_hi):
            hit = False
            break
        if expansions >= grid.max_expansions:
            hit = True
            break
        ext = range(1, grid.expansion_step + 1)
        if grow_c_lo:
            c_vals = [c_vals[0] - s * t for t in reversed(ext)] + c_vals
        if grow_c_hi:
            c_vals = c_vals + [c_vals[-1] + s * t for t in ext]
        if grow_g_lo:
            g_vals = [g for g in (g_vals[0] - s * t for t in reversed(ext))
                      if g >= grid.gamma_floor] + g_vals
        if grow_g_hi:
            g_vals = g_vals + [g_vals[-1] + s * t for t in ext]
        expansions += 1
        evaluate([(c, g) for g in g_vals for c in c_vals])
    bc, bg = best()
    result = CvResult(scores=scores, c_exp=bc, gamma_exp=bg, expansions=expansions,
                      hit_max_expansions=hit,
                      bounds=(c_vals[0], c_vals[-1], g_vals[0], g_vals[-1]))
    return result.c, result.gamma, result


def _allocate(sizes: dict, total: int) -> dict:
    """Largest-remainder split of ``total`` across strata proportional to ``sizes``."""
    n = sum(sizes.values())
    exact = {key: total * size / n for key, size in sizes.items()}
    alloc = {key: math.floor(v) for key, v in exact.items()}
    rest = total - sum(alloc.values())
    order = sorted(sizes, key=lambda key: (-(exact[key] - alloc[key]), key))
    for key in order[:rest]:
        alloc[key] += 1
    return alloc


def make_splits(labels, seasons=None, plan: SplitPlan = SplitPlan()):
    """Per round a fresh stratified train/test split; returns (splits, warnings).

    Strata are (occupied, season). Round r uses seed ``plan.seed + r``. A stratum
    factor with a single level is dropped with a warning.
    """
    labels = np.asarray(labels)
    n = labels.shape[0]
    warnings = []
    keys = [[] for _ in range(n)]
    if plan.stratify_occupancy:
        occupied = labels > 0
        if occupied.all() or not occupied.any():
            warnings.append("occupancy state has a single level; not stratified by occupancy")
        else:
            for i in range(n):
                keys[i].append(int(occupied[i]))
    if plan.stratify_season:
        if seasons is None or len(set(np.asarray(seasons).tolist())) < 2:
            warnings.append("data covers a single season; not stratified by season")
        else:
            seasons = np.asarray(seasons)
            for i in range(n):
                keys[i].append(str(seasons[i]))
    strata: dict = {}
    for i, key in enumerate(keys):
        strata.setdefault(tuple(key), []).append(i)
    n_train = int(round(plan.train_fraction * n))
    if not 0 < n_train < n:
        raise ExperimentError(f"cannot split {n} rows at fraction {plan.train_fraction}")
    alloc = _allocate({key: len(v) for key, v in strata.items()}, n_train)
    splits = []
    for r in range(plan.rounds):
        rng = np.random.default_rng(plan.seed + r)
        train = []
        for key in sorted(strata):
            idx = np.asarray(strata[key])
            train.append(idx[rng.permutation(idx.shape[0])[: alloc[key]]])
        train = np.sort(np.concatenate(train))
        test = np.setdiff1d(np.arange(n), train)
        splits.append((train, test))
    return splits, warnings


def task_labels(counts, task: str) -> np.ndarray:
    if task == "state":
        return (np.asarray(counts) > 0).astype(np.int64)
    if task == "quantity":
        return np.asarray(counts, dtype=np.int64)
    raise ValueError(f"task must be one of {TASKS}, got {task!r}")


@dataclass
class RoundResult:
    round: int
    seed: int
    c: float
    gamma: float
    cv_accuracy: float
    expansions: int
    hit_max_expansions: bool
    converged: bool
    n_train: int
    n_test: int
    metrics: dict
    model: SvmModel | None = field(default=None, repr=False)
    importance: ImportanceReport | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        out = {
            "round": self.round,
            "seed": self.seed,
            "C": self.c,
            "gamma": self.gamma,
            "cv_accuracy": self.cv_accuracy,
            "expansions": self.expansions,
            "hit_max_expansions": self.hit_max_expansions,
            "converged": self.converged,
            "n_train": self.n_train,
            "n_test": self.n_test,
        }
        out.update(self.metrics)
        if self.importance is not None:
            out["importance"] = self.importance.to_dict()
        return out


SUMMARY_METRICS = ("accuracy", "precision", "recall", "f1", "rmse", "nrmse")


@dataclass
class ExperimentReport:
    room_id: str
    task: str
    features: list
    rounds: list
    plan: SplitPlan
    grid: GridSpec
    folds: int
    warnings: list = field(default_factory=list)
    manifest: dict = field(default_factory=dict)

    def values(self, metric: str) -> np.ndarray:
        return np.array([r.metrics[metric] for r in self.rounds], dtype=float)

    def mean(self, metric: str) -> float:
        return float(np.mean(self.values(metric)))

    def sd(self, metric: str) -> float:
        v = self.values(metric)
        return float(np.std(v, ddof=1)) if v.size > 1 else 0.0

    def importance(self) -> dict | None:
        """Per-feature importance averaged over rounds: name -> (mean, sd of round means)."""
        reps = [r.importance for r in self.rounds if r.importance is not None]
        if not reps:
            return None
        means = np.vstack([rep.mean for rep in reps])
        return {
            name: (float(means[:, j].mean()), float(means[:, j].std()))
            for j, name in enumerate(reps[0].names)
        }

    def to_dict(self) -> dict:
        agg = {}
        for m in SUMMARY_METRICS:
            vals = [r.metrics.get(m) for r in self.rounds]
            if any(v is None for v in vals):
                agg[m] = None
            else:
                agg[m] = {"mean": self.mean(m), "sd": self.sd(m)}
        out = {
            "tool": "co2occ",
            "tool_version": __version__,
            "room_id": self.room_id,
            "task": self.task,
            "features": list(self.features),
            "feature_set": " + ".join(self.features),
            "folds": self.folds,
            "plan": asdict(self.plan),
            "grid": asdict(self.grid),
            "seeds": [r.seed for r in self.rounds],
            "rounds": [r.to_dict() for r in self.rounds],
            "aggregate": agg,
            "warnings": list(self.warnings),
        }
        imp = self.importance()
        if imp is not None:
            out["importance"] = [
                {"feature": k, "mean_importance": v[0], "sd": v[1]} for k, v in imp.items()
            ]
        if self.manifest:
            out["manifest"] = self.manifest
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def run_matrix(
    fm: FeatureMatrix,
    task: str = "state",
    plan: SplitPlan = SplitPlan(),
    grid: GridSpec = GridSpec(),
    k: int = 5,
    room_id: str = "room",
    importance_repeats: int = 0,
    keep_models: bool = False,
) -> ExperimentReport:
    """Full protocol on a prepared feature matrix."""
    y = task_labels(fm.labels, task)
    if np.unique(y).size < 2:
        raise ExperimentError(f"single class: task {task!r} needs at least 2 distinct labels")
    splits, warnings = make_splits(fm.labels, fm.seasons, plan)
    rounds = []
    for r, (train, test) in enumerate(splits):
        seed = plan.seed + r
        if np.unique(y[train]).size < 2:
            raise ExperimentError(f"single class in the training split of round {r}")
        stats = NormStats.fit(fm.values[train], fm.names, source=f"round{r}:train")
        x_train = normalize(fm.values[train], stats)
        x_test = normalize(fm.values[test], stats)
        c, gamma, cv = grid_search(x_train, y[train], grid, k=k, seed=seed)
        model = train_multiclass(x_train, y[train], KernelParams(gamma=gamma, c=c))
        model.norm = stats
        model.feature_names = list(fm.names)
        pred = model.predict(x_test)
        rep = metric_report(y[test], pred)
        imp = None
        if importance_repeats:
            imp = permutation_importance(model, x_test, y[test], n_repeats=importance_repeats,
                                         seed=seed, names=fm.names)
        rounds.append(RoundResult(
            round=r, seed=seed, c=c, gamma=gamma, cv_accuracy=cv.best_score,
            expansions=cv.expansions, hit_max_expansions=cv.hit_max_expansions,
            converged=model.converged, n_train=int(train.size), n_test=int(test.size),
            metrics=rep.to_dict(), model=model if keep_models else None, importance=imp,
        ))
    return ExperimentReport(room_id=room_id, task=task, features=list(fm.names), rounds=rounds,
                            plan=plan, grid=grid, folds=k, warnings=warnings)


def run_experiment(
    ds: Dataset,
    spec: FeatureSpec,
    task: str = "state",
    plan: SplitPlan = SplitPlan(),
    grid: GridSpec = GridSpec(),
    k: int = 5,
    importance_repeats: int = 0,
    keep_models: bool = False,
) -> ExperimentReport:
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}, got {task!r}")
    fm = build_features(ds, spec)
    return run_matrix(fm, task, plan, grid, k, room_id=ds.room.room_id,
                      importance_repeats=importance_repeats, keep_models=keep_models)
