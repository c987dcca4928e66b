"""Chi-squared K-best feature selection and a from-scratch random forest.

Trees grow on bootstrap resamples with per-node random feature subsets,
greedy Gini splits at midpoints of sorted unique values, and unbounded depth
by default. Every random draw derives from the master seed through per-tree
spawn keys, so adding trees never reshuffles earlier ones.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

MODEL_FORMAT_VERSION = 1


@dataclass(frozen=True)
class FeatureScores:
    scores: np.ndarray
    order: np.ndarray  # feature indices sorted by score desc, index asc


@dataclass
class ForestConfig:
    n_trees: int = 300
    criterion: str = "gini"
    max_depth: int | None = None
    min_samples_split: int = 2
    min_samples_leaf: int = 1
    features_per_split: int | None = None  # None -> ceil(sqrt(d))
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.criterion != "gini":
            raise ValueError(f"unsupported criterion {self.criterion!r}")


@dataclass
class Tree:
    # Flat arrays; children[i] < 0 marks node i as a leaf.
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    prob: np.ndarray  # (n_nodes, 2) class-probability vectors

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        active = self.left[node] >= 0
        while active.any():
            idx = np.flatnonzero(active)
            nodes = node[idx]
            go_left = X[idx, self.feature[nodes]] <= self.threshold[nodes]
            node[idx] = np.where(go_left, self.left[nodes], self.right[nodes])
            active = self.left[node] >= 0
        return self.prob[node, 1]


@dataclass
class ForestModel:
    trees: list[Tree]
    config: ForestConfig
    selected_features: np.ndarray | None
    feature_means: np.ndarray
    n_features: int


def chi2_feature_scores(X: np.ndarray, y: np.ndarray) -> FeatureScores:
    """Per-feature chi-squared scores from class-conditional count sums.

    Observed values are the per-class column sums; expected values spread the
    column total by class proportions. All-zero features score 0.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    if (X < 0).any():
        raise ValueError("feature counts must be non-negative")
    classes = np.unique(y)
    if len(classes) < 2:
        raise ValueError("y must contain both classes")
    observed = np.stack([X[y == c].sum(axis=0) for c in classes])
    totals = observed.sum(axis=0)
    class_fraction = np.array([(y == c).mean() for c in classes])
    expected = np.outer(class_fraction, totals)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(expected > 0, (observed - expected) ** 2 / expected, 0.0)
    scores = terms.sum(axis=0)
    order = np.lexsort((np.arange(len(scores)), -scores))
    return FeatureScores(scores, order)


def select_k_best(scores: FeatureScores, k: int = 20) -> np.ndarray:
    """Indices of the k highest-scoring features; ties keep vocabulary order."""
    d = len(scores.scores)
    if k > d:
        raise ValueError(f"k={k} exceeds {d} features")
    return np.sort(scores.order[:k])


def _gini(counts1: np.ndarray, totals: np.ndarray) -> np.ndarray:
    p = counts1 / totals
    return 1.0 - p**2 - (1.0 - p) ** 2


def _best_split(values: np.ndarray, labels: np.ndarray, min_leaf: int):
    """Best (threshold, impurity decrease) for one feature, or None."""
    order = np.argsort(values, kind="stable")
    v = values[order]
    lab = labels[order]
    n = len(v)
    boundaries = np.flatnonzero(v[:-1] != v[1:])
    if len(boundaries) == 0:
        return None
    n_left = boundaries + 1
    n_right = n - n_left
    ok = (n_left >= min_leaf) & (n_right >= min_leaf)
    if not ok.any():
        return None
    boundaries = boundaries[ok]
    n_left = n_left[ok]
    n_right = n_right[ok]
    ones_left = np.cumsum(lab)[boundaries]
    ones_total = lab.sum()
    parent = _gini(np.array([ones_total]), np.array([n]))[0]
    weighted = (
        n_left * _gini(ones_left, n_left) + n_right * _gini(ones_total - ones_left, n_right)
    ) / n
    decrease = parent - weighted
    best = int(np.argmax(decrease))
    if decrease[best] <= 1e-12:
        return None
    threshold = (v[boundaries[best]] + v[boundaries[best] + 1]) / 2.0
    return float(threshold), float(decrease[best])


def _grow_tree(X, y, rng, config: ForestConfig, m_features: int) -> Tree:
    feature, threshold, left, right, prob = [], [], [], [], []

    def add_node(labels) -> int:
        ones = labels.sum()
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        prob.append([1.0 - ones / len(labels), ones / len(labels)])
        return len(feature) - 1

    # Explicit stack instead of recursion: degenerate splits can chain to
    # depth ~n. Entries are (sample indices, depth, parent, is_left_child).
    stack = [(np.arange(len(y)), 0, -1, False)]
    while stack:
        indices, depth, parent, is_left = stack.pop()
        labels = y[indices]
        node = add_node(labels)
        if parent >= 0:
            (left if is_left else right)[parent] = node

        pure = labels.min() == labels.max()
        depth_stop = config.max_depth is not None and depth >= config.max_depth
        if pure or len(indices) < config.min_samples_split or depth_stop:
            continue

        # Evaluate a random m-subset of features; if none of them admits a
        # valid split, keep scanning the rest of the permutation.
        permuted = rng.permutation(X.shape[1])
        best = None
        for scanned, f in enumerate(permuted, start=1):
            found = _best_split(X[indices, f], labels, config.min_samples_leaf)
            if found is not None:
                thr, dec = found
                if best is None or dec > best[2]:
                    best = (int(f), thr, dec)
            if scanned >= m_features and best is not None:
                break
        if best is None:
            continue

        f, thr, _ = best
        mask = X[indices, f] <= thr
        feature[node] = f
        threshold[node] = thr
        stack.append((indices[~mask], depth + 1, node, False))
        stack.append((indices[mask], depth + 1, node, True))
    return Tree(
        np.array(feature, dtype=np.int64),
        np.array(threshold, dtype=float),
        np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64),
        np.array(prob, dtype=float),
    )


def fit_forest(
    X: np.ndarray,
    y: np.ndarray,
    config: ForestConfig | None = None,
    selected_features: np.ndarray | None = None,
) -> ForestModel:
    config = config or ForestConfig()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    if len(np.unique(y)) < 2:
        raise ValueError("y must contain both classes")
    n, d = X.shape
    m = config.features_per_split or int(np.ceil(np.sqrt(d)))
    if not 1 <= m <= d:
        raise ValueError(f"features_per_split={m} outside [1, {d}]")

    trees = []
    for t in range(config.n_trees):
        rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(t,)))
        if config.bootstrap:
            sample = rng.integers(0, n, size=n)
        else:
            sample = np.arange(n)
        trees.append(_grow_tree(X[sample], y[sample], rng, config, m))
    return ForestModel(
        trees,
        config,
        None if selected_features is None else np.asarray(selected_features),
        X.mean(axis=0),
        d,
    )


def predict_proba(model: ForestModel, X: np.ndarray) -> np.ndarray:
    """Mean positive-class probability across trees."""
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    if X.shape[1] != model.n_features:
        raise ValueError(f"expected {model.n_features} features, got {X.shape[1]}")
    total = np.zeros(len(X))
    for tree in model.trees:
        total += tree.predict_proba(X)
    p = total / len(model.trees)
    return p[0] if single else p


def predict(model: ForestModel, X: np.ndarray) -> np.ndarray:
    """Binary decision at the shared 0.5 threshold (inclusive)."""
    return (predict_proba(model, X) >= 0.5).astype(np.int64)


@dataclass
class FoldMetrics:
    fold: int
    precision: dict[str, float | None]
    recall: dict[str, float | None]
    f1: dict[str, float | None]


@dataclass
class CrossValidation:
    folds: list[FoldMetrics]
    mean: dict[str, dict[str, float]] = field(default_factory=dict)
    std: dict[str, dict[str, float]] = field(default_factory=dict)


def _fold_assignment(y: np.ndarray, k_folds: int, rng) -> np.ndarray:
    """Stratified fold ids: each class's shuffled members deal round-robin."""
    folds = np.empty(len(y), dtype=np.int64)
    for c in np.unique(y):
        members = np.flatnonzero(y == c)
        members = members[rng.permutation(len(members))]
        folds[members] = np.arange(len(members)) % k_folds
    return folds


def _binary_prf(y_true, y_pred, positive):
    tp = int(((y_true == positive) & (y_pred == positive)).sum())
    fp = int(((y_true != positive) & (y_pred == positive)).sum())
    fn = int(((y_true == positive) & (y_pred != positive)).sum())
    precision = tp / (tp + fp) if tp + fp else None
    recall = tp / (tp + fn) if tp + fn else None
    if precision and recall:
        f1 = 2 * precision * recall / (precision + recall)
    elif precision is None or recall is None:
        f1 = None
    else:
        f1 = 0.0
    return precision, recall, f1


def cross_validate(
    X: np.ndarray,
    y: np.ndarray,
    config: ForestConfig | None = None,
    k_folds: int = 5,
    runs: int = 1,
    seed: int = 0,
) -> CrossValidation:
    """Stratified k-fold validation, repeated `runs` times with derived
    seeds. Reports per-class precision/recall/F1 with mean and std across
    all validation folds."""
    if k_folds < 2:
        raise ValueError("k_folds must be >= 2")
    config = config or ForestConfig()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64)

    results = []
    fold_counter = 0
    for run in range(runs):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(run,)))
        folds = _fold_assignment(y, k_folds, rng)
        for k in range(k_folds):
            val = folds == k
            if len(np.unique(y[~val])) < 2:
                raise ValueError(f"fold {k} leaves a single-class training set")
            if len(np.unique(y[val])) < 2:
                raise ValueError(f"fold {k} holds a single class")
            run_config = ForestConfig(**{**asdict(config), "seed": config.seed + run})
            model = fit_forest(X[~val], y[~val], run_config)
            y_pred = predict(model, X[val])
            precisions, recalls, f1s = {}, {}, {}
            for name, positive in (("ward", 0), ("itu", 1)):
                p, r, f = _binary_prf(y[val], y_pred, positive)
                precisions[name], recalls[name], f1s[name] = p, r, f
            results.append(FoldMetrics(fold_counter, precisions, recalls, f1s))
            fold_counter += 1

    cv = CrossValidation(results)
    for metric in ("precision", "recall", "f1"):
        cv.mean[metric] = {}
        cv.std[metric] = {}
        for name in ("ward", "itu"):
            values = [getattr(f, metric)[name] for f in results]
            values = [v for v in values if v is not None]
            cv.mean[metric][name] = float(np.mean(values)) if values else float("nan")
            cv.std[metric][name] = float(np.std(values)) if values else float("nan")
    return cv


def save_model(model: ForestModel, path, header: dict | None = None) -> None:
    payload = {
        "format_version": MODEL_FORMAT_VERSION,
        "kind": "random_forest",
        "config": asdict(model.config),
        "selected_features": (
            None if model.selected_features is None else model.selected_features.tolist()
        ),
        "feature_means": model.feature_means.tolist(),
        "n_features": model.n_features,
        "trees": [
            {
                "feature": t.feature.tolist(),
                "threshold": t.threshold.tolist(),
                "left": t.left.tolist(),
                "right": t.right.tolist(),
                "prob": t.prob.tolist(),
            }
            for t in model.trees
        ],
    }
    if header:
        payload["lineage"] = header
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle, sort_keys=True)


def load_model(path) -> ForestModel:
    with open(path, encoding="utf-8") as handle:
        payload = json.load(handle)
    if payload.get("format_version") != MODEL_FORMAT_VERSION:
        raise ValueError(
            f"unsupported model format_version {payload.get('format_version')!r}"
        )
    trees = [
        Tree(
            np.array(t["feature"], dtype=np.int64),
            np.array(t["threshold"], dtype=float),
            np.array(t["left"], dtype=np.int64),
            np.array(t["right"], dtype=np.int64),
            np.array(t["prob"], dtype=float),
        )
        for t in payload["trees"]
    ]
    selected = payload["selected_features"]
    return ForestModel(
        trees,
        ForestConfig(**payload["config"]),
        None if selected is None else np.array(selected, dtype=np.int64),
        np.array(payload["feature_means"], dtype=float),
        payload["n_features"],
    )
