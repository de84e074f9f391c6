import math
import warnings

import numpy as np
import pytest
import scipy.stats
from hypothesis import given, settings
from hypothesis import strategies as st

from livingcircles import evaluate as ev
from livingcircles.data_model import RunConfig
from livingcircles.errors import ArgumentError, UndefinedMetricError
from livingcircles.graph_builder import build_graph
from livingcircles.spatial import SpatialContext, spatial_autocorrelation


def rand(shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def test_metrics_perfect_prediction():
    y = np.array([1.0, 2.0, 5.0])
    assert ev.metrics(y, y) == (0.0, 0.0, 1.0)


def test_metrics_mean_predictor_r2_zero():
    y = np.array([1.0, 2.0, 3.0, 10.0])
    pred = np.full(4, y.mean())
    _, _, r2 = ev.metrics(y, pred)
    assert r2 == pytest.approx(0.0, abs=1e-12)


def test_metrics_hand_case():
    mae, rmse, r2 = ev.metrics([1, 2, 3], [1, 2, 4])
    assert mae == pytest.approx(1.0 / 3.0, abs=1e-9)
    assert rmse == pytest.approx(1.0 / math.sqrt(3.0), abs=1e-9)
    assert r2 == pytest.approx(0.5, abs=1e-9)


def test_metrics_constant_truth_rejected():
    with pytest.raises(UndefinedMetricError):
        ev.metrics([2.0, 2.0, 2.0], [1.0, 2.0, 3.0])


def test_metrics_permutation_invariant():
    y, p = rand(9, 1), rand(9, 2)
    perm = np.random.default_rng(3).permutation(9)
    assert np.allclose(ev.metrics(y, p), ev.metrics(y[perm], p[perm]), atol=1e-12)


@given(st.integers(0, 10_000))
@settings(max_examples=200, deadline=None)
def test_mae_never_exceeds_rmse(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 40))
    y = rng.standard_normal(n)
    if np.all(y == y[0]):
        return
    p = rng.standard_normal(n)
    mae, rmse, _ = ev.metrics(y, p)
    assert mae <= rmse + 1e-12


# ---------------------------------------------------------------------------
# disease prediction
# ---------------------------------------------------------------------------

def test_predict_recovers_exact_linear_signal():
    x = rand((60, 6), 4)
    w = rand(6, 5)
    y = x @ w + 3.0
    for regressor in ("mlp", "ridge"):
        block = ev.predict_disease(x, y, k=5, seed=1, regressor=regressor)
        assert block["mean"]["r2"] >= 0.99, regressor
        assert len(block["folds"]) == 5


def test_predict_shuffled_labels_has_no_signal():
    x = rand((60, 6), 6)
    y = x @ rand(6, 7) + 1.0
    y_shuffled = y[np.random.default_rng(8).permutation(60)]
    block = ev.predict_disease(x, y_shuffled, k=5, seed=1, regressor="ridge")
    assert block["mean"]["r2"] <= 0.1


def test_predict_requires_enough_circles():
    with pytest.raises(ArgumentError):
        ev.predict_disease(rand((3, 2)), np.arange(3.0), k=5, seed=0)


def test_per_fold_mae_rmse_ordering():
    x = rand((40, 5), 9)
    y = x @ rand(5, 10)
    block = ev.predict_disease(x, y, k=4, seed=2, regressor="ridge")
    for fold in block["folds"]:
        assert fold["mae"] <= fold["rmse"] + 1e-12


# ---------------------------------------------------------------------------
# ablation graph shapes
# ---------------------------------------------------------------------------

def make_ctx(n, seed=0):
    rng = np.random.default_rng(seed)
    d = rng.random((n, n)) * 0.8 + 0.1
    d = (d + d.T) / 2
    np.fill_diagonal(d, 0.0)
    f = rng.random((n, n))
    f = (f + f.T) / 2
    np.fill_diagonal(f, 1.0)
    return SpatialContext(n=n, D=d, F=f, S=spatial_autocorrelation(f, d), topk=[])


def test_ablation_no_topk_graph_shape():
    n = 5
    mods, include_inter = ev.ablation_modalities("w/o top-k sc")
    assert include_inter is False
    feats = {m: rand((n, 4), i) for i, m in enumerate(mods)}
    g = build_graph(feats, make_ctx(n), k=3, modalities=mods,
                    include_inter=False)
    assert g.n_nodes == 3 * n
    assert len(g.edges) == 3 * n
    assert all(kind == "intra" for *_, kind in g.edges)


def test_ablation_t_only_graph_shape():
    n = 5
    mods, include_inter = ev.ablation_modalities("T-only")
    assert mods == ("text",) and include_inter
    feats = {"text": rand((n, 4), 3)}
    g = build_graph(feats, make_ctx(n), k=2, modalities=mods)
    assert g.n_nodes == n
    assert all(kind == "inter" for *_, kind in g.edges)


def test_ablation_tag_validation():
    with pytest.raises(ArgumentError):
        ev.ablation_modalities("w/o everything")
    for tag in ev.ABLATION_TAGS:
        mods, _ = ev.ablation_modalities(tag)
        assert len(mods) >= 1


def test_run_ablation_end_to_end():
    n = 8
    ctx = make_ctx(n, seed=5)
    projected = {m: rand((n, 4), 20 + i) for i, m in enumerate(("text", "visual", "poi"))}
    labels = {d: rand(n, 30 + i) + 5.0 for i, d in
              enumerate(("mci", "hypertension", "diabetes", "mdd"))}
    cfg = RunConfig(embed_dim=4, epochs=2, gcn_layers=2, top_k=2, cv_folds=2,
                    regressor="ridge")
    report = ev.run_ablation("w/o V", projected, ctx, labels,
                             [f"c{i}" for i in range(n)], cfg)
    assert report.ablation == "w/o V"
    assert set(report.per_disease) == {"mci", "hypertension", "diabetes", "mdd"}


# ---------------------------------------------------------------------------
# street aggregation
# ---------------------------------------------------------------------------

def test_streets_single_member():
    emb = rand((3, 4), 11)
    streets, rows = ev.aggregate_streets(emb, ["a", "b", "c"],
                                         {"a": "s1", "b": "s2", "c": "s2"})
    assert streets == ["s1", "s2"]
    assert np.array_equal(rows[0], emb[0])


def test_streets_opposite_embeddings_cancel():
    emb = np.array([[1.0, -1.0], [-1.0, 1.0]])
    _, rows = ev.aggregate_streets(emb, ["a", "b"], {"a": "s", "b": "s"})
    assert np.allclose(rows[0], 0.0, atol=1e-15)


def test_streets_groupby_oracle():
    emb = rand((7, 3), 12)
    ids = [f"c{i}" for i in range(7)]
    assignment = {ids[i]: f"s{i % 3}" for i in range(7)}
    streets, rows = ev.aggregate_streets(emb, ids, assignment)
    for street, row in zip(streets, rows):
        members = [i for i in range(7) if assignment[ids[i]] == street]
        assert np.allclose(row, emb[members].mean(axis=0), atol=1e-12)


def test_streets_unknown_circle_warns():
    emb = rand((2, 3), 13)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        streets, rows = ev.aggregate_streets(emb, ["a", "b"],
                                             {"a": "s1", "ghost": "s2"})
    assert streets == ["s1"]
    assert any("ghost" in str(w.message) for w in caught)


# ---------------------------------------------------------------------------
# similarity ranking
# ---------------------------------------------------------------------------

def test_similar_duplicate_ranks_first():
    base = rand(4, 14)
    emb = np.stack([base, 2.0 * base, rand(4, 15)])
    ranked = ev.similar_circles("q", ["q", "dup", "other"], emb, top_n=2)
    assert ranked[0][0] == "dup"
    assert ranked[0][1] == pytest.approx(1.0)
    assert all(-1.0 - 1e-12 <= s <= 1.0 + 1e-12 for _, s in ranked)


def test_similar_matches_exhaustive_oracle():
    emb = rand((6, 5), 16)
    ids = [f"c{i}" for i in range(6)]
    ranked = ev.similar_circles("c2", ids, emb, top_n=5)
    q = emb[2]
    oracle = sorted(((ids[i], float(emb[i] @ q / (np.linalg.norm(emb[i]) * np.linalg.norm(q))))
                     for i in range(6) if i != 2), key=lambda t: (-t[1], t[0]))
    assert [cid for cid, _ in ranked] == [cid for cid, _ in oracle]
    for (_, a), (_, b) in zip(ranked, oracle):
        assert a == pytest.approx(b, abs=1e-12)


def test_similar_scale_invariant_ranking():
    emb = rand((5, 4), 17)
    ids = [f"c{i}" for i in range(5)]
    a = ev.similar_circles("c0", ids, emb, 4)
    b = ev.similar_circles("c0", ids, 7.5 * emb, 4)
    assert [cid for cid, _ in a] == [cid for cid, _ in b]


def test_similar_unknown_query():
    with pytest.raises(ArgumentError):
        ev.similar_circles("nope", ["a"], rand((1, 2)), 1)


# ---------------------------------------------------------------------------
# k-means and elbow
# ---------------------------------------------------------------------------

def test_kmeans_k_equals_n_zero_inertia():
    x = rand((6, 3), 18)
    _, inertia = ev.kmeans(x, k=6, seed=0)
    assert inertia == pytest.approx(0.0, abs=1e-18)


def test_kmeans_separated_blobs():
    rng = np.random.default_rng(19)
    a = rng.standard_normal((20, 2)) * 0.1
    b = rng.standard_normal((20, 2)) * 0.1 + 50.0
    x = np.vstack([a, b])
    assign, _ = ev.kmeans(x, k=2, seed=3)
    assert len(set(assign[:20])) == 1
    assert len(set(assign[20:])) == 1
    assert assign[0] != assign[20]


def test_kmeans_guards_and_determinism():
    x = rand((4, 2), 20)
    with pytest.raises(ArgumentError):
        ev.kmeans(x, k=5, seed=0)
    a1, i1 = ev.kmeans(x, k=2, seed=7)
    a2, i2 = ev.kmeans(x, k=2, seed=7)
    assert np.array_equal(a1, a2) and i1 == i2


def test_elbow_curve_shape():
    x = rand((20, 3), 21)
    curve = ev.elbow(x, range(1, 6), seed=2)
    assert [k for k, _ in curve] == [1, 2, 3, 4, 5]
    assert curve[0][1] >= curve[-1][1]


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------

def test_pca_line_explains_everything():
    t = np.linspace(-2, 2, 9)
    x = np.stack([t, 2 * t, -t], axis=1) + 5.0
    with pytest.raises(ArgumentError):
        ev.pca_project(x, dims=2)      # rank 1 < 2
    proj, ratios = ev.pca_project(x, dims=1)
    assert ratios[0] == pytest.approx(1.0, abs=1e-9)
    assert proj.shape == (9, 1)


def test_pca_rotation_invariant_spectrum():
    x = rand((30, 3), 22)
    theta = 0.7
    rot = np.array([[math.cos(theta), -math.sin(theta), 0.0],
                    [math.sin(theta), math.cos(theta), 0.0],
                    [0.0, 0.0, 1.0]])
    _, r1 = ev.pca_project(x, 2)
    _, r2 = ev.pca_project(x @ rot.T, 2)
    assert np.allclose(r1, r2, atol=1e-9)


def test_pca_against_characteristic_polynomial_oracle():
    x = rand((5, 3), 23)
    proj, ratios = ev.pca_project(x, 2)
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / 4.0
    # eigenvalues as roots of the characteristic polynomial
    coeffs = np.poly(cov)
    roots = np.sort(np.real(np.roots(coeffs)))[::-1]
    assert np.allclose(ratios, roots[:2] / roots.sum(), atol=1e-8)
    # each projection column has variance equal to its eigenvalue
    var = (proj ** 2).sum(axis=0) / 4.0
    assert np.allclose(var, roots[:2], atol=1e-8)


def test_pca_sign_convention():
    x = rand((10, 4), 24)
    proj1, _ = ev.pca_project(x, 2)
    proj2, _ = ev.pca_project(x.copy(), 2)
    assert np.array_equal(proj1, proj2)


# ---------------------------------------------------------------------------
# Pearson correlation
# ---------------------------------------------------------------------------

def test_pearson_perfect_lines():
    x = np.array([1.0, 2.0, 3.0, 4.0])
    r, p = ev.pearson(x, 2 * x + 1)
    assert r == pytest.approx(1.0)
    assert p == pytest.approx(0.0, abs=1e-12)
    r, _ = ev.pearson(x, -x)
    assert r == pytest.approx(-1.0)


def test_pearson_constant_rejected():
    with pytest.raises(UndefinedMetricError):
        ev.pearson(np.ones(5), np.arange(5.0))
    with pytest.raises(ArgumentError):
        ev.pearson(np.arange(2.0), np.arange(2.0))


def test_pearson_matches_scipy():
    rng = np.random.default_rng(25)
    for n in (5, 12, 40):
        x = rng.standard_normal(n)
        y = 0.4 * x + rng.standard_normal(n)
        r, p = ev.pearson(x, y)
        ref = scipy.stats.pearsonr(x, y)
        assert r == pytest.approx(ref.statistic, abs=1e-12)
        assert p == pytest.approx(ref.pvalue, abs=1e-10)
