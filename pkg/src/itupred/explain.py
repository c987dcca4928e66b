"""Shapley and LIME attributions for trained classifiers.

The value of a feature coalition is the mean model output over background
rows with the coalition's features pinned to the explained input. Exact mode
enumerates every coalition (small feature counts only); sampled mode averages
marginal contributions over random feature permutations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import forest

EXACT_LIMIT = 12


def _as_predict_fn(model):
    if callable(model):
        return model
    if isinstance(model, forest.ForestModel):
        return lambda X: forest.predict_proba(model, X)
    raise TypeError(f"cannot derive a prediction function from {type(model)!r}")


@dataclass(frozen=True)
class ShapleyAttribution:
    values: np.ndarray
    baseline: float
    method: str  # "exact" or "sampled"
    n_permutations: int | None = None
    seed: int | None = None


def make_background(X_train: np.ndarray, cap: int = 100, seed: int = 0) -> np.ndarray:
    """Background rows for coalition values: the training matrix, subsampled
    to `cap` rows when larger."""
    X_train = np.asarray(X_train, dtype=float)
    if len(X_train) <= cap:
        return X_train.copy()
    rng = np.random.default_rng(seed)
    return X_train[rng.choice(len(X_train), size=cap, replace=False)]


def _coalition_values(predict_fn, x, background, subsets) -> dict[int, float]:
    """Evaluate v(S) for every subset bitmask in one batched prediction.

    Rows are background copies with the subset's features pinned to x; v(S)
    is the mean prediction per subset. Batched in chunks to bound memory.
    """
    subsets = list(subsets)
    n_bg, d = background.shape
    values: dict[int, float] = {}
    chunk = max(1, 400_000 // max(n_bg, 1))
    for start in range(0, len(subsets), chunk):
        block = subsets[start : start + chunk]
        rows = np.tile(background, (len(block), 1))
        for i, bits in enumerate(block):
            mask = [(bits >> j) & 1 for j in range(d)]
            columns = np.flatnonzero(mask)
            rows[i * n_bg : (i + 1) * n_bg, columns] = x[columns]
        predictions = np.asarray(predict_fn(rows), dtype=float).reshape(len(block), n_bg)
        for i, bits in enumerate(block):
            values[bits] = float(predictions[i].mean())
    return values


def shapley_values(
    model,
    x,
    background,
    method: str = "exact",
    n_permutations: int = 2000,
    seed: int = 0,
) -> ShapleyAttribution:
    """Per-feature attribution of f(x) relative to the background mean.

    Exact mode enumerates all 2^d coalitions and is limited to d <= 12;
    sampled mode averages marginal contributions over `n_permutations`
    random orderings, deterministic per seed.
    """
    predict_fn = _as_predict_fn(model)
    x = np.asarray(x, dtype=float)
    background = np.asarray(background, dtype=float)
    if background.ndim != 2 or len(background) == 0:
        raise ValueError("background must be a non-empty 2-D array")
    d = len(x)

    if method == "exact":
        if d > EXACT_LIMIT:
            raise ValueError(
                f"exact enumeration supports at most {EXACT_LIMIT} features "
                f"(got {d}); use method='sampled'"
            )
        values = _coalition_values(predict_fn, x, background, range(1 << d))
        factorial = [math.factorial(i) for i in range(d + 1)]
        phi = np.zeros(d)
        for bits in range(1 << d):
            size = bin(bits).count("1")
            weight = factorial[size] * factorial[d - size - 1] / factorial[d]
            for j in range(d):
                if not (bits >> j) & 1:
                    phi[j] += weight * (values[bits | (1 << j)] - values[bits])
        return ShapleyAttribution(phi, values[0], "exact")

    if method == "sampled":
        rng = np.random.default_rng(seed)
        chains = []
        needed = {0}
        for _ in range(n_permutations):
            bits = 0
            chain = []
            for j in rng.permutation(d):
                bits |= 1 << int(j)
                chain.append((int(j), bits))
                needed.add(bits)
            chains.append(chain)
        values = _coalition_values(predict_fn, x, background, sorted(needed))

        phi = np.zeros(d)
        for chain in chains:
            previous = values[0]
            for j, bits in chain:
                phi[j] += values[bits] - previous
                previous = values[bits]
        phi /= n_permutations
        return ShapleyAttribution(phi, values[0], "sampled", n_permutations, seed)

    raise ValueError(f"unknown method {method!r}")


@dataclass(frozen=True)
class GlobalShapSummary:
    order: np.ndarray  # feature indices by mean |phi| descending
    mean_abs: np.ndarray
    # per feature: (feature value, phi) pairs across samples, beeswarm-ready
    points: list[np.ndarray]


def global_summary(attributions, feature_values) -> GlobalShapSummary:
    """Mean-|phi| ranking plus raw (value, phi) pairs per feature."""
    if len(attributions) == 0:
        raise ValueError("need at least one attribution")
    phi = np.stack([a.values for a in attributions])
    feature_values = np.asarray(feature_values, dtype=float)
    if phi.shape != feature_values.shape:
        raise ValueError("attribution and feature value shapes differ")
    mean_abs = np.abs(phi).mean(axis=0)
    order = np.lexsort((np.arange(len(mean_abs)), -mean_abs))
    points = [
        np.column_stack([feature_values[:, j], phi[:, j]]) for j in range(phi.shape[1])
    ]
    return GlobalShapSummary(order, mean_abs, points)


@dataclass
class LimeConfig:
    n_perturbations: int = 5000
    kernel_width: float | None = None  # None -> 0.75 * sqrt(K)
    ridge_lambda: float = 1.0
    seed: int = 0


@dataclass(frozen=True)
class LimeExplanation:
    coefficients: np.ndarray
    importances: np.ndarray  # |coefficient|
    intercept: float
    r2: float
    kernel_width: float
    n_perturbations: int
    seed: int
    degenerate: bool = False


def lime_explain(model, x, config: LimeConfig | None = None) -> LimeExplanation:
    """Local surrogate: perturb by zeroing random feature subsets, weight by
    proximity to the intact input, fit weighted ridge on the keep/drop mask.
    """
    config = config or LimeConfig()
    predict_fn = _as_predict_fn(model)
    x = np.asarray(x, dtype=float)
    k = len(x)
    if config.n_perturbations < k + 2:
        raise ValueError(f"n_perturbations must be >= {k + 2}")
    width = config.kernel_width if config.kernel_width is not None else 0.75 * math.sqrt(k)

    rng = np.random.default_rng(config.seed)
    Z = rng.integers(0, 2, size=(config.n_perturbations, k)).astype(float)
    Z[0] = 1.0  # always include the intact input
    predictions = predict_fn(Z * x)
    distance = 1.0 - Z.mean(axis=1)  # normalized Hamming distance to all-ones
    weights = np.exp(-(distance**2) / width**2)

    if np.ptp(predictions) == 0.0:
        return LimeExplanation(
            np.zeros(k), np.zeros(k), float(predictions[0]), 0.0,
            width, config.n_perturbations, config.seed, degenerate=True,
        )

    # Weighted ridge with an unpenalized intercept via weighted centering.
    w_total = weights.sum()
    z_bar = (weights[:, None] * Z).sum(axis=0) / w_total
    f_bar = float((weights * predictions).sum() / w_total)
    Zc = Z - z_bar
    fc = predictions - f_bar
    gram = (Zc * weights[:, None]).T @ Zc + config.ridge_lambda * np.eye(k)
    coefficients = np.linalg.solve(gram, (Zc * weights[:, None]).T @ fc)
    intercept = f_bar - float(z_bar @ coefficients)

    fitted = Z @ coefficients + intercept
    ss_res = float((weights * (predictions - fitted) ** 2).sum())
    ss_tot = float((weights * fc**2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0
    return LimeExplanation(
        coefficients,
        np.abs(coefficients),
        intercept,
        r2,
        width,
        config.n_perturbations,
        config.seed,
    )
