"""Linear probing of frozen encoder features.

Nested cross-validation, per outer fold:

1. The fold's training portion is split (stratified) into inner-train and
   inner-validation rows.
2. Each C in the grid is fit on inner-train and scored by AUC on
   inner-validation; ties go to the smaller C.
3. A final SVM with that C is fit on the whole training portion; its
   Youden-optimal threshold on the inner-validation rows sets the operating
   point for sensitivity and specificity.
4. The held-out fold is scored once.

Standardization statistics, C and the threshold only ever see the fold's
training portion.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from . import tensor as T
from .model import ModelConfig, extract_features


class LeakageError(AssertionError):
    pass


# -- feature table ----------------------------------------------------------------


@dataclass
class FeatureTable:
    ids: list[str]
    features: np.ndarray  # [n, d]
    labels: np.ndarray  # [n] ints
    source: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) != len(self.ids) or len(self.labels) != len(self.ids):
            raise ValueError("ids, features and labels must have matching lengths")

    def __len__(self) -> int:
        return len(self.ids)

    def to_csv(self, path) -> None:
        d = self.features.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "label"] + [f"f{j}" for j in range(d)])
            for i, y, f in zip(self.ids, self.labels, self.features):
                w.writerow([i, int(y)] + [repr(float(v)) for v in f])

    @classmethod
    def from_csv(cls, path, source: str = "") -> "FeatureTable":
        with open(path, newline="") as fh:
            rd = csv.reader(fh)
            header = next(rd)
            if header[:2] != ["id", "label"]:
                raise ValueError(f"feature CSV must start with id,label; got {header[:2]}")
            rows = list(rd)
        ids = [r[0] for r in rows]
        labels = [int(r[1]) for r in rows]
        feats = np.array([[float(v) for v in r[2:]] for r in rows]).reshape(len(rows), len(header) - 2)
        return cls(ids, feats, labels, source)


def build_feature_table(params, model: ModelConfig, volumes, source: str = "", batch: int = 8) -> FeatureTable:
    """CLS features of every volume, no augmentation, no masking. Raw, not standardized."""
    vols = list(volumes)
    missing = [v.id for v in vols if v.label is None]
    if missing:
        raise ValueError(f"unlabeled records: {', '.join(missing)}")
    feats = []
    for i in range(0, len(vols), batch):
        x = np.stack([v.voxels.astype(np.float64) for v in vols[i : i + batch]]) / 255.0
        feats.append(extract_features(x, params, model))
    return FeatureTable([v.id for v in vols], np.concatenate(feats), [int(v.label) for v in vols], source)


# -- metrics -------------------------------------------------------------------------


def _check_binary(labels) -> np.ndarray:
    y = np.asarray(labels)
    if not (np.any(y == 1) and np.any(y == 0)):
        raise ValueError("both classes must be present")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    return y


def auc(scores, labels) -> float:
    """Mann-Whitney AUC; tied scores count one half."""
    y = _check_binary(labels)
    s = np.asarray(scores, dtype=np.float64)
    ranks = rankdata(s)  # average ranks for ties
    n1 = int((y == 1).sum())
    n0 = len(y) - n1
    u = ranks[y == 1].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


def sensitivity_specificity(scores, labels, threshold: float) -> tuple[float, float]:
    """Predict positive when score >= threshold."""
    y = _check_binary(labels)
    pred = np.asarray(scores) >= threshold
    tp = int(np.sum(pred & (y == 1)))
    tn = int(np.sum(~pred & (y == 0)))
    return tp / int((y == 1).sum()), tn / int((y == 0).sum())


def youden_threshold(scores, labels) -> float:
    """Threshold maximizing sensitivity + specificity - 1 over the observed scores.

    Candidates are midpoints between consecutive distinct scores plus the two
    outer ends; ties in J go to the lowest threshold.
    """
    y = _check_binary(labels)
    s = np.unique(np.asarray(scores, dtype=np.float64))
    cands = np.concatenate([[s[0] - 1.0], (s[:-1] + s[1:]) / 2.0, [s[-1] + 1.0]])
    best, best_j = cands[0], -np.inf
    for t in cands:
        se, sp = sensitivity_specificity(scores, y, t)
        if se + sp - 1 > best_j:
            best, best_j = t, se + sp - 1
    return float(best)


# -- linear SVM ------------------------------------------------------------------------


@dataclass
class LinearSVM:
    w: np.ndarray
    b: float
    mean: np.ndarray
    std: np.ndarray
    C: float

    def decision(self, X) -> np.ndarray:
        return ((np.asarray(X, dtype=np.float64) - self.mean) / self.std) @ self.w + self.b


def hinge_objective(w, b, Z, s, C) -> float:
    """0.5 * |w|^2 + C * sum(max(0, 1 - s * (Z w + b))), with s in {-1, +1}."""
    return 0.5 * float(w @ w) + C * float(np.maximum(0.0, 1.0 - s * (Z @ w + b)).sum())


def _subgradient(Z, s, C, iters):
    n, d = Z.shape
    w, b = np.zeros(d), 0.0
    best = (hinge_objective(w, b, Z, s, C), w.copy(), b)
    # step size eta_t = eta0 / sqrt(t + 1) with eta0 scaled to the hinge term's Lipschitz bound
    eta0 = 1.0 / (1.0 + C * n * max(1.0, float(np.sqrt((Z * Z).sum(axis=1)).max())))
    for t in range(iters):
        margin = s * (Z @ w + b)
        act = margin < 1.0
        gw = w - C * (s[act, None] * Z[act]).sum(axis=0)
        gb = -C * float(s[act].sum())
        eta = eta0 / np.sqrt(t + 1.0)
        w = w - eta * gw
        b = b - eta * gb
        obj = hinge_objective(w, b, Z, s, C)
        if obj < best[0]:
            best = (obj, w.copy(), b)
    return best[1], best[2]


def train_linear_svm(X, y, C: float, iters: int = 2000) -> LinearSVM:
    """L2-regularized hinge loss on standardized features, full-batch subgradient
    descent for a fixed ``iters`` with step eta0 / sqrt(t + 1); returns the best
    iterate seen. Standardization uses the training rows only (zero std -> 1)."""
    if C <= 0:
        raise ValueError(f"C must be positive, got {C}")
    y = _check_binary(y)
    X = np.asarray(X, dtype=np.float64)
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    Z = (X - mean) / std
    s = np.where(y == 1, 1.0, -1.0)
    w, b = _subgradient(Z, s, C, iters)
    return LinearSVM(w, float(b), mean, std, float(C))


# -- folds ------------------------------------------------------------------------------


@dataclass
class FoldPlan:
    k: int = 5
    inner_fraction: float = 0.2
    seed: int = 0

    def outer(self, labels) -> list[np.ndarray]:
        """Stratified test index sets; classes are dealt round-robin after a seeded shuffle."""
        y = np.asarray(labels)
        counts = np.bincount(y, minlength=2)
        if counts.min() < self.k:
            raise ValueError(f"each class needs at least {self.k} samples for {self.k}-fold stratification, "
                             f"got {counts.tolist()}")
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0]))
        folds = [[] for _ in range(self.k)]
        pos = 0
        for c in (0, 1):
            idx = np.flatnonzero(y == c)
            for i in rng.permutation(idx):
                folds[pos % self.k].append(int(i))
                pos += 1
        return [np.sort(np.array(f)) for f in folds]

    def inner(self, train_idx: np.ndarray, labels, fold: int) -> tuple[np.ndarray, np.ndarray]:
        """Stratified (inner-train, inner-val) split of one fold's training rows."""
        y = np.asarray(labels)
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 1, fold]))
        val = []
        for c in (0, 1):
            idx = train_idx[y[train_idx] == c]
            m = max(1, int(np.floor(self.inner_fraction * len(idx) + 0.5)))
            if m >= len(idx):
                raise ValueError("class too small for an inner split")
            val.extend(rng.permutation(idx)[:m].tolist())
        val = np.sort(np.array(val))
        return np.setdiff1d(train_idx, val), val


@dataclass
class FoldResult:
    fold: int
    C: float
    auc: float
    sensitivity: float
    specificity: float
    threshold: float
    test_idx: list[int]
    w: list[float] = field(repr=False)
    b: float = 0.0


@dataclass
class ProbeResult:
    folds: list[FoldResult]
    mean_auc: float
    mean_sensitivity: float
    mean_specificity: float
    mode: str = "nested"
    accuracy: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_json(cls, text: str) -> "ProbeResult":
        d = json.loads(text)
        d["folds"] = [FoldResult(**f) for f in d["folds"]]
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ProbeResult":
        return cls.from_json(Path(path).read_text())


def fit_fold(X, y, train_idx, plan: FoldPlan, fold: int, c_grid, iters: int) -> tuple[LinearSVM, float, float]:
    """Inner C selection, refit and threshold for one outer fold; reads only ``train_idx`` rows."""
    X = np.asarray(X, dtype=np.float64)[train_idx]
    y = np.asarray(y)[train_idx]
    local = np.arange(len(train_idx))
    itr, ival = plan.inner(local, y, fold)
    best_c, best_auc = None, -1.0
    for C in sorted(c_grid):
        m = train_linear_svm(X[itr], y[itr], C, iters)
        a = auc(m.decision(X[ival]), y[ival])
        if a > best_auc:  # strict: ties keep the smaller C
            best_c, best_auc = C, a
    model = train_linear_svm(X, y, best_c, iters)
    thr = youden_threshold(model.decision(X[ival]), y[ival])
    return model, best_c, thr


def nested_cv(table: FeatureTable, plan: FoldPlan | None = None, c_grid=(0.01, 0.1, 1.0, 10.0),
              iters: int = 2000, check_leakage: bool = True) -> ProbeResult:
    """Stratified k-fold evaluation with inner C tuning.

    With ``check_leakage`` every fold is refit after replacing its held-out
    rows with noise; the fitted weights must come out bit-identical, else
    ``LeakageError``.
    """
    plan = plan or FoldPlan()
    X, y = table.features, table.labels
    results = []
    for f, test in enumerate(plan.outer(y)):
        train_idx = np.setdiff1d(np.arange(len(y)), test)
        model, C, thr = fit_fold(X, y, train_idx, plan, f, c_grid, iters)
        if check_leakage:
            Xp = X.copy()
            Xp[test] = np.random.default_rng(f).standard_normal(Xp[test].shape) * 1e3
            m2, c2, t2 = fit_fold(Xp, y, train_idx, plan, f, c_grid, iters)
            if not (np.array_equal(m2.w, model.w) and m2.b == model.b and c2 == C and t2 == thr):
                raise LeakageError(f"fold {f}: held-out features influenced the fitted model")
        scores = model.decision(X[test])
        se, sp = sensitivity_specificity(scores, y[test], thr)
        results.append(FoldResult(f, C, auc(scores, y[test]), se, sp, thr, test.tolist(), model.w.tolist(),
                                  model.b))
    return ProbeResult(results, float(np.mean([r.auc for r in results])),
                       float(np.mean([r.sensitivity for r in results])),
                       float(np.mean([r.specificity for r in results])))


def split_probe(table: FeatureTable, test_fraction: float = 0.2, C: float = 1.0, seed: int = 0,
                iters: int = 2000) -> ProbeResult:
    """Single stratified train/test split scored by accuracy (plus AUC)."""
    y = table.labels
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    test = []
    for c in (0, 1):
        idx = np.flatnonzero(y == c)
        m = max(1, int(np.floor(test_fraction * len(idx) + 0.5)))
        test.extend(rng.permutation(idx)[:m].tolist())
    test = np.sort(np.array(test))
    train_idx = np.setdiff1d(np.arange(len(y)), test)
    model = train_linear_svm(table.features[train_idx], y[train_idx], C, iters)
    scores = model.decision(table.features[test])
    acc = float(np.mean((scores >= 0) == (y[test] == 1)))
    se, sp = sensitivity_specificity(scores, y[test], 0.0)
    fr = FoldResult(0, C, auc(scores, y[test]), se, sp, 0.0, test.tolist(), model.w.tolist(), model.b)
    return ProbeResult([fr], fr.auc, se, sp, mode="split", accuracy=acc)


def probe_table(table: FeatureTable, cfg) -> ProbeResult:
    """Dispatch on a ProbeConfig."""
    if cfg.mode == "split":
        return split_probe(table, cfg.test_fraction, cfg.c_grid[len(cfg.c_grid) // 2], cfg.seed, cfg.svm_iters)
    return nested_cv(table, FoldPlan(cfg.folds, cfg.inner_fraction, cfg.seed), cfg.c_grid, cfg.svm_iters)


def features_for(params, model: ModelConfig, volumes, precision: str, source: str = "") -> FeatureTable:
    with T.precision(precision):
        return build_feature_table(params, model, volumes, source)
