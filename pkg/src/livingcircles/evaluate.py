"""Downstream evaluation: disease-prevalence prediction under K-fold CV,
ablations, street aggregation, similarity ranking, clustering, PCA and
correlation analysis.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Adam, Tensor, uniform_init
from .data_model import DISEASES, RunConfig, kfold_split
from .errors import ArgumentError, UndefinedMetricError
from .graph_builder import MODALITIES, build_graph, renormalized_laplacian
from . import smgcn

ABLATION_TAGS = ("full", "w/o T", "w/o V", "w/o P", "w/o top-k sc",
                 "T-only", "V-only", "P-only")

_TAG_MODALITIES = {
    "full": MODALITIES,
    "w/o T": ("visual", "poi"),
    "w/o V": ("text", "poi"),
    "w/o P": ("text", "visual"),
    "w/o top-k sc": MODALITIES,
    "T-only": ("text",),
    "V-only": ("visual",),
    "P-only": ("poi",),
}


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def metrics(y_true, y_pred):
    """(MAE, RMSE, R^2); R^2 is undefined for constant ground truth."""
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.shape != y_pred.shape or y_true.ndim != 1:
        raise ArgumentError("y_true and y_pred must be equal-length vectors")
    n = y_true.size
    if n < 2:
        raise ArgumentError("need at least 2 observations")
    ss_tot = float(np.sum((y_true - y_true.mean()) ** 2))
    if ss_tot == 0.0:
        raise UndefinedMetricError("R^2 is undefined for constant y_true")
    mae = float(np.mean(np.abs(y_pred - y_true)))
    rmse = float(np.sqrt(np.mean((y_pred - y_true) ** 2)))
    r2 = 1.0 - float(np.sum((y_true - y_pred) ** 2)) / ss_tot
    return mae, rmse, r2


# ---------------------------------------------------------------------------
# supervised regressors
# ---------------------------------------------------------------------------

def _standardize(train: np.ndarray):
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    return mu, sd


def fit_predict_mlp(x_train, y_train, x_test, seed: int,
                    hidden: int = 64, lr: float = 3e-2, epochs: int = 800,
                    weight_decay: float = 1e-3):
    """Two-layer rectifier MLP, full-batch Adam, standardized features.

    Mild weight decay keeps the fitted surface close to linear between
    training points, which matters for small held-out folds.
    """
    rng = np.random.default_rng(seed)
    mu, sd = _standardize(x_train)
    xt = (x_train - mu) / sd
    xs = (x_test - mu) / sd
    y_mu, y_sd = float(y_train.mean()), float(y_train.std())
    y_sd = y_sd if y_sd > 1e-12 else 1.0
    yt = (y_train - y_mu) / y_sd

    d = xt.shape[1]
    w1 = Tensor.param(uniform_init(rng, d, (hidden, d)))
    b1 = Tensor.param(np.zeros(hidden))
    w2 = Tensor.param(uniform_init(rng, hidden, (1, hidden)))
    b2 = Tensor.param(np.zeros(1))
    opt = Adam([w1, b1, w2, b2], lr=lr, weight_decay=weight_decay)
    xt_t = Tensor(xt)
    yt_t = Tensor(yt.reshape(-1, 1))
    for _ in range(epochs):
        pred = (xt_t @ w1.T + b1).relu() @ w2.T + b2
        loss = ((pred - yt_t) * (pred - yt_t)).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    out = (Tensor(xs) @ w1.T + b1).relu() @ w2.T + b2
    raw = out.value.reshape(-1) * y_sd + y_mu
    # clamp to the training-label envelope: a rectifier net extrapolates
    # linearly outside the hull of the training points, which can explode
    # on small held-out folds
    span = float(y_train.max() - y_train.min())
    return np.clip(raw, float(y_train.min()) - 0.5 * span,
                   float(y_train.max()) + 0.5 * span)


def fit_predict_ridge(x_train, y_train, x_test, alpha: float = 1.0):
    """Closed-form ridge regression on standardized features."""
    mu, sd = _standardize(x_train)
    xt = (x_train - mu) / sd
    xs = (x_test - mu) / sd
    y_mu = float(y_train.mean())
    yc = y_train - y_mu
    d = xt.shape[1]
    coef = np.linalg.solve(xt.T @ xt + alpha * np.eye(d), xt.T @ yc)
    return xs @ coef + y_mu


# ---------------------------------------------------------------------------
# disease prediction under K-fold CV
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    ablation: str
    k_folds: int
    per_disease: dict = field(default_factory=dict)
    config_echo: dict = field(default_factory=dict)

    def mean_r2(self) -> float:
        return float(np.mean([self.per_disease[d]["mean"]["r2"] for d in self.per_disease]))

    def to_dict(self) -> dict:
        return {"ablation": self.ablation, "k_folds": self.k_folds,
                "per_disease": self.per_disease, "config": self.config_echo}


def predict_disease(embeddings: np.ndarray, y: np.ndarray, k: int, seed: int,
                    regressor: str = "mlp"):
    """Per-fold and mean (MAE, RMSE, R^2) for one disease target."""
    n = embeddings.shape[0]
    if y.shape[0] != n:
        raise ArgumentError("labels do not align with embeddings")
    if n < k:
        raise ArgumentError(f"need at least {k} labeled circles, got {n}")
    folds = kfold_split(n, k, seed)
    per_fold = []
    for fi, test_idx in enumerate(folds):
        train_idx = np.setdiff1d(np.arange(n), test_idx)
        fold_seed = int(np.random.default_rng(
            np.random.SeedSequence([seed, fi])).integers(0, 2**31 - 1))
        if regressor == "ridge":
            pred = fit_predict_ridge(embeddings[train_idx], y[train_idx],
                                     embeddings[test_idx])
        else:
            pred = fit_predict_mlp(embeddings[train_idx], y[train_idx],
                                   embeddings[test_idx], seed=fold_seed)
        mae, rmse, r2 = metrics(y[test_idx], pred)
        per_fold.append({"mae": mae, "rmse": rmse, "r2": r2})
    mean = {key: float(np.mean([f[key] for f in per_fold]))
            for key in ("mae", "rmse", "r2")}
    return {"folds": per_fold, "mean": mean}


def evaluate_embeddings(embeddings: np.ndarray, labels_by_disease: dict,
                        config: RunConfig, tag: str = "full") -> EvalReport:
    report = EvalReport(ablation=tag, k_folds=config.cv_folds,
                        config_echo=dict(config.to_items()))
    for disease in DISEASES:
        report.per_disease[disease] = predict_disease(
            embeddings, labels_by_disease[disease], config.cv_folds,
            config.rng_seed, regressor=config.regressor)
    return report


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

def ablation_modalities(tag: str):
    if tag not in ABLATION_TAGS:
        raise ArgumentError(f"unknown ablation tag '{tag}'")
    return _TAG_MODALITIES[tag], tag != "w/o top-k sc"


def run_ablation(tag: str, projected: dict, ctx, labels_by_disease: dict,
                 circle_ids, config: RunConfig) -> EvalReport:
    """Re-run graph building, training and evaluation under one ablation."""
    modalities, include_inter = ablation_modalities(tag)
    feats = {m: projected[m] for m in modalities}
    graph = build_graph(feats, ctx, config.top_k, modalities=modalities,
                        include_inter=include_inter)
    p_tilde = renormalized_laplacian(graph)
    h0 = np.concatenate([feats[m] for m in modalities], axis=0)
    _, table, _ = smgcn.train(p_tilde, h0, ctx.S, config, modalities, circle_ids)
    return evaluate_embeddings(table.fused, labels_by_disease, config, tag=tag)


# ---------------------------------------------------------------------------
# multi-level analyses
# ---------------------------------------------------------------------------

def aggregate_streets(embeddings: np.ndarray, circle_ids, assignment: dict):
    """Mean embedding per street; streets without member circles are
    skipped with a warning."""
    index = {cid: i for i, cid in enumerate(circle_ids)}
    members = {}
    for cid, street in assignment.items():
        if cid not in index:
            warnings.warn(f"street assignment references unknown circle '{cid}'; skipped")
            continue
        members.setdefault(street, []).append(index[cid])
    streets = sorted(members)
    rows = np.stack([embeddings[members[s]].mean(axis=0) for s in streets]) \
        if streets else np.empty((0, embeddings.shape[1]))
    return streets, rows


def similar_circles(query_id: str, circle_ids, embeddings: np.ndarray, top_n: int):
    """Cosine ranking against the query, descending, ties by ascending id."""
    index = {cid: i for i, cid in enumerate(circle_ids)}
    if query_id not in index:
        raise ArgumentError(f"unknown circle id '{query_id}'")
    qi = index[query_id]
    q = embeddings[qi]
    qn = np.linalg.norm(q)
    results = []
    for cid, i in index.items():
        if i == qi:
            continue
        denom = qn * np.linalg.norm(embeddings[i])
        score = float(embeddings[i] @ q / denom) if denom > 0 else 0.0
        results.append((cid, score))
    results.sort(key=lambda t: (-t[1], t[0]))
    return results[:top_n]


def kmeans(x: np.ndarray, k: int, seed: int, max_iter: int = 100):
    """Seeded k-means++ initialization plus Lloyd iterations.

    Returns (assignments, inertia); inertia is checked to be non-increasing
    across iterations.
    """
    n = x.shape[0]
    if k > n:
        raise ArgumentError(f"k={k} exceeds {n} points")
    if k < 1:
        raise ArgumentError("k must be >= 1")
    rng = np.random.default_rng(seed)

    centers = np.empty((k, x.shape[1]))
    centers[0] = x[int(rng.integers(n))]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total == 0.0:
            centers[c] = x[int(rng.integers(n))]
        else:
            centers[c] = x[int(rng.choice(n, p=d2 / total))]
        d2 = np.minimum(d2, np.sum((x - centers[c]) ** 2, axis=1))

    assign = np.full(n, -1)
    prev_inertia = np.inf
    for _ in range(max_iter):
        dists = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = dists.argmin(axis=1)
        inertia = float(dists[np.arange(n), new_assign].sum())
        assert inertia <= prev_inertia + 1e-9, "Lloyd iteration increased inertia"
        prev_inertia = inertia
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(k):
            mask = assign == c
            if mask.any():
                centers[c] = x[mask].mean(axis=0)
            else:
                # re-seed an empty cluster on the farthest point
                centers[c] = x[int(np.argmax(dists.min(axis=1)))]
    dists = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    inertia = float(dists[np.arange(n), dists.argmin(axis=1)].sum())
    return assign, inertia


def elbow(x: np.ndarray, k_values, seed: int):
    """Inertia for each candidate k."""
    return [(int(k), kmeans(x, int(k), seed)[1]) for k in k_values]


def pca_project(x: np.ndarray, dims: int = 2):
    """Mean-centered PCA via eigendecomposition of the covariance.

    Components are ordered by descending eigenvalue; each is signed so its
    largest-magnitude loading is positive.  Returns (projected rows,
    explained-variance ratios of the kept components).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < dims:
        raise ArgumentError("need at least as many rows as components")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (x.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals, eigvecs = eigvals[order], eigvecs[:, order]
    eigvals = np.clip(eigvals, 0.0, None)
    total = eigvals.sum()
    if total <= 0.0 or np.sum(eigvals > 1e-12 * max(eigvals[0], 1e-300)) < dims:
        raise ArgumentError(f"data rank is below {dims}")
    comps = eigvecs[:, :dims]
    for j in range(dims):
        lead = np.argmax(np.abs(comps[:, j]))
        if comps[lead, j] < 0:
            comps[:, j] = -comps[:, j]
    return centered @ comps, (eigvals / total)[:dims]


# ---------------------------------------------------------------------------
# Pearson correlation with a t-test p-value
# ---------------------------------------------------------------------------

def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the regularized incomplete beta (Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 200):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-12:
            break
    return h


def _betainc_reg(a: float, b: float, x: float) -> float:
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log(1.0 - x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def pearson(x, y):
    """Pearson correlation and two-sided p-value (t approximation with
    n - 2 degrees of freedom)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ArgumentError("x and y must be equal-length vectors")
    n = x.size
    if n < 3:
        raise ArgumentError("need at least 3 observations")
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt(np.sum(xc ** 2)), np.sqrt(np.sum(yc ** 2))
    if sx == 0.0 or sy == 0.0:
        raise UndefinedMetricError("correlation undefined for constant input")
    r = float(np.clip(np.dot(xc, yc) / (sx * sy), -1.0, 1.0))
    if abs(r) == 1.0:
        return r, 0.0
    df = n - 2
    t2 = r * r * df / (1.0 - r * r)
    p = _betainc_reg(df / 2.0, 0.5, df / (df + t2))
    return r, float(p)
