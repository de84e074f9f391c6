"""Acceptance suite: one test per release criterion, each printing a
PASS line with the measured quantity.  Run with ``pytest -s`` to see them.

The heavyweight criteria (training sanity, planted-signal recovery,
determinism) drive the shipped CLI / library end to end on synthetic
cities at full feature dimension.
"""

import hashlib
import json
import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from livingcircles import data_model as dm
from livingcircles import encoders as enc
from livingcircles import evaluate as ev
from livingcircles import smgcn
from livingcircles.autodiff import Tensor, sigmoid_array
from livingcircles.encoders import ProjectionHead, project
from livingcircles.graph_builder import (MODALITIES, angular_weight,
                                         build_graph, inter_weight,
                                         renormalized_laplacian,
                                         spectral_radius)
from livingcircles.spatial import (build_spatial_context, haversine_km,
                                   spatial_autocorrelation, top_k_candidates,
                                   tfidf_vectors, functional_similarity)
from livingcircles.synthetic import SynthSpec, generate_synthetic_city

from conftest import fd_gradcheck

SINGLE_THREAD_ENV = dict(os.environ,
                         OMP_NUM_THREADS="1", MKL_NUM_THREADS="1",
                         OPENBLAS_NUM_THREADS="1")


def ok(name, detail):
    print(f"ACCEPTANCE PASS: {name} ({detail})")


def rand(shape, seed=0, scale=1.0):
    return np.random.default_rng(seed).standard_normal(shape) * scale


def cli(args, cwd):
    return subprocess.run([sys.executable, "-m", "livingcircles.cli", *map(str, args)],
                          env=SINGLE_THREAD_ENV, cwd=cwd,
                          capture_output=True, text=True)


def file_hash(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# 1. gradient correctness for every loss
# ---------------------------------------------------------------------------

def test_gradient_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = {}

    head = ProjectionHead.init(rng, 3, 2, "visual")  # 8 params
    x_np, xp_np, xn_np = rand((3, 3), 1), rand((3, 3), 2), rand((3, 3), 3)

    def triplet():   # geospatial hinge
        return enc.triplet_geo_loss_batch(project(head, x_np), project(head, xp_np),
                                          project(head, xn_np), 0.8)

    worst["triplet"] = fd_gradcheck(triplet, head.params)

    a_np, p_np = rand((4, 3), 4), rand((4, 3), 5)

    def nce():       # augmentation InfoNCE
        return enc.infonce_loss(project(head, a_np), project(head, p_np), 0.5)

    worst["infonce"] = fd_gradcheck(nce, head.params)

    def combined():  # full visual objective
        return enc.visual_encoder_loss(
            (project(head, x_np), project(head, xp_np), project(head, xn_np)),
            (project(head, a_np), project(head, p_np)), 0.8, 0.5)

    worst["visual"] = fd_gradcheck(combined, head.params)

    head_t = ProjectionHead.init(rng, 3, 2, "text")
    head_v = ProjectionHead.init(rng, 3, 2, "visual")
    t_np, v_np = rand((4, 3), 6), rand((4, 3), 7)

    def cross():     # cross-modal InfoNCE
        return enc.infonce_loss(project(head_t, t_np), project(head_v, v_np), 1.0)

    worst["cross_modal"] = fd_gradcheck(cross, head_t.params + head_v.params)

    head_p = ProjectionHead.init(rng, 3, 2, "poi")
    emb_np = rand((6, 3), 8)
    labels = np.array([1, 1, 2, 2, 3, 3])

    def supcon():    # supervised contrastive
        return enc.supcon_loss(project(head_p, emb_np), labels, 0.7)

    worst["supcon"] = fd_gradcheck(supcon, head_p.params)

    # graph objective through GCN + readout + a feature head
    n, d, layers = 2, 2, 2
    p_mat = renormalized_laplacian(build_graph(
        {m: rand((n, 2), 10 + i) for i, m in enumerate(MODALITIES)},
        build_spatial_context(
            [dm.LivingCircle(f"c{i}", 39.0 + 0.01 * i, 116.0 + 0.02 * i, 10, 10,
                             [0], 0, []) for i in range(n)],
            [], list(dm.DEFAULT_CATEGORIES), 1),
        1))
    s_mat = rand((n, n), 11)
    s_mat = (s_mat + s_mat.T) / 2
    np.fill_diagonal(s_mat, 0.0)
    g_head = ProjectionHead.init(rng, 2, d, "text")
    raw = rand((3 * n, 2), 12)
    w_k = [Tensor.param(rand((d, d), 13 + k, 0.3)) for k in range(layers)]
    mlp = smgcn.ReadoutMLP.init(rng, 3 * d, d)
    params = g_head.params + w_k + mlp.params
    assert sum(p.value.size for p in params) <= 64

    def objective():
        h0 = project(g_head, raw)
        h_last, _ = smgcn.gcn_forward(p_mat, h0, w_k, 0.2, 0.5, layers)
        emb = smgcn.fuse_readout(h_last, mlp, MODALITIES, n)
        return smgcn.objective(emb, s_mat, 0.1,
                               smgcn.modal_rows(h_last, MODALITIES, n))

    worst["graph_objective"] = fd_gradcheck(objective, params)

    elapsed = time.perf_counter() - t0
    assert elapsed < 10.0, f"gradient checks took {elapsed:.1f}s"
    assert max(worst.values()) <= 1e-4, worst
    ok("gradient correctness",
       f"max rel err {max(worst.values()):.2e} across {sorted(worst)}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. spatial oracle equivalence
# ---------------------------------------------------------------------------

def test_spatial_oracle_equivalence(tmp_path):
    t0 = time.perf_counter()
    root = generate_synthetic_city(SynthSpec(n_circles=10, dim=16), 5, tmp_path)
    ds = dm.load_dataset(root)
    k = 4
    ctx = build_spatial_context(ds.circles, ds.pois, ds.vocabulary, k)

    # brute force, written independently of the production path
    n = ds.n
    km = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            km[i, j] = haversine_km(ds.circles[i].lat, ds.circles[i].lon,
                                    ds.circles[j].lat, ds.circles[j].lon)
    d_ref = km / km.max()
    weights = tfidf_vectors(ds.circles, ds.pois, ds.vocabulary)
    f_ref = np.zeros((n, n))
    s_ref = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            f_ref[i, j] = functional_similarity(weights[i], weights[j])
            if i != j:
                dd = d_ref[i, j] if d_ref[i, j] > 0 else 1e-6
                s_ref[i, j] = f_ref[i, j] / math.log(dd + 1.0)
    topk_ref = [sorted((j for j in range(n) if j != i),
                       key=lambda j: (-s_ref[i, j], j))[:k] for i in range(n)]

    assert np.allclose(ctx.D, d_ref, atol=1e-9)
    assert np.allclose(ctx.F, f_ref, atol=1e-9)
    assert np.allclose(ctx.S, s_ref, atol=1e-9)
    assert ctx.topk == topk_ref
    elapsed = time.perf_counter() - t0
    assert elapsed < 1.0
    ok("spatial oracle equivalence", f"10 circles, k={k}, {elapsed * 1000:.0f}ms")


# ---------------------------------------------------------------------------
# 3. graph oracle equivalence
# ---------------------------------------------------------------------------

def test_graph_oracle_equivalence():
    n, k = 4, 2
    rng = np.random.default_rng(9)
    d_mat = rng.random((n, n)) * 0.8 + 0.1
    d_mat = (d_mat + d_mat.T) / 2
    np.fill_diagonal(d_mat, 0.0)
    f_mat = rng.random((n, n))
    f_mat = (f_mat + f_mat.T) / 2
    np.fill_diagonal(f_mat, 1.0)
    s_mat = spatial_autocorrelation(f_mat, d_mat)
    from livingcircles.spatial import SpatialContext
    ctx = SpatialContext(n=n, D=d_mat, F=f_mat, S=s_mat,
                         topk=top_k_candidates(s_mat, k))
    feats = {m: rng.standard_normal((n, 5)) for m in MODALITIES}
    graph = build_graph(feats, ctx, k)

    node = lambda m, i: MODALITIES.index(m) * n + i
    expected = {}
    for i in range(n):
        for a in range(3):
            for b in range(a + 1, 3):
                w = angular_weight(feats[MODALITIES[a]][i], feats[MODALITIES[b]][i])
                expected[(node(MODALITIES[a], i), node(MODALITIES[b], i))] = (w, "intra")
    for m in MODALITIES:
        for i in range(n):
            for j in ctx.topk[i]:
                lo, hi = min(i, j), max(i, j)
                key = (node(m, lo), node(m, hi))
                if key not in expected:
                    w1 = angular_weight(feats[m][lo], feats[m][hi])
                    expected[key] = (inter_weight(w1, d_mat[lo, hi]), "inter")
    got = {(u, v): (w, kind) for u, v, w, kind in graph.edges}
    assert set(got) == set(expected)
    for key, (w, kind) in expected.items():
        assert got[key] == (w, kind)

    p_tilde = renormalized_laplacian(graph)
    assert np.array_equal(p_tilde, p_tilde.T)
    rho = spectral_radius(p_tilde)
    assert rho <= 1.0 + 1e-9
    ok("graph oracle equivalence",
       f"{len(expected)} edges exact, spectral radius {rho:.9f}")


# ---------------------------------------------------------------------------
# 4. propagation degeneracies
# ---------------------------------------------------------------------------

def test_propagation_degeneracies():
    h0 = rand((6, 3), 21)
    w = [Tensor.param(rand((3, 3), 22 + i, 0.4)) for i in range(2)]

    def laplacian_like(seed):
        rng = np.random.default_rng(seed)
        a = rng.random((6, 6))
        a = (a + a.T) / 2
        np.fill_diagonal(a, 1.0)
        dinv = 1.0 / np.sqrt(a.sum(axis=1))
        return np.outer(dinv, dinv) * a

    out1, _ = smgcn.gcn_forward(laplacian_like(1), h0, w, 1.0, 0.5, 2)
    out2, _ = smgcn.gcn_forward(laplacian_like(2), h0, w, 1.0, 0.5, 2)
    assert np.array_equal(out1.value, out2.value)      # 0 ulp

    p_mat = laplacian_like(3)
    out, _ = smgcn.gcn_forward(p_mat, h0, w, 0.0, 0.0, 1)
    assert np.array_equal(out.value, sigmoid_array(p_mat @ h0))
    ok("propagation degeneracies",
       "alpha=1 operator-independent at 0 ulp; alpha=eta=0 equals sigmoid(PH)")


# ---------------------------------------------------------------------------
# 5. training sanity on the 50-circle city
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def city50_pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("city50")
    t0 = time.perf_counter()
    proc = cli(["pipeline", "--out", root / "run", "--n-circles", "50",
                "--seed", "7"], cwd=root)
    elapsed = time.perf_counter() - t0
    assert proc.returncode == 0, proc.stderr
    return root / "run", elapsed


def test_training_sanity(city50_pipeline):
    run, elapsed = city50_pipeline
    losses = json.loads((run / "train" / "train_losses.json").read_text())["objective"]
    assert len(losses) == 60
    ratio = losses[-1] / losses[0]
    assert ratio <= 0.5, f"loss ratio {ratio:.3f}"
    assert elapsed < 300.0, f"pipeline took {elapsed:.0f}s"
    ok("training sanity",
       f"50-circle default config: loss {losses[0]:.0f} -> {losses[-1]:.0f} "
       f"(ratio {ratio:.3f}), pipeline {elapsed:.0f}s single-threaded")


# ---------------------------------------------------------------------------
# 6. planted-signal recovery and ablation direction
# ---------------------------------------------------------------------------

def test_planted_signal_recovery(tmp_path):
    root = generate_synthetic_city(
        SynthSpec(n_circles=100, noise_scale=0.1), 7, tmp_path)
    ds = dm.load_dataset(root)
    cfg = dm.RunConfig()
    ctx = build_spatial_context(ds.circles, ds.pois, ds.vocabulary, cfg.top_k)
    res = enc.train_encoders(ds, cfg)
    labels = {d: np.array([getattr(ds.labels[c.id], d) for c in ds.circles])
              for d in dm.DISEASES}
    ids = [c.id for c in ds.circles]
    full = ev.run_ablation("full", res.projected, ctx, labels, ids, cfg)
    ablated = ev.run_ablation("w/o top-k sc", res.projected, ctx, labels, ids, cfg)

    per_disease = {d: full.per_disease[d]["mean"]["r2"] for d in dm.DISEASES}
    for d, r2 in per_disease.items():
        assert r2 >= 0.5, f"{d}: mean R2 {r2:.3f}"
    assert full.mean_r2() >= ablated.mean_r2(), \
        f"full {full.mean_r2():.4f} < w/o top-k sc {ablated.mean_r2():.4f}"
    ok("planted-signal recovery",
       f"per-disease R2 {({d: round(v, 3) for d, v in per_disease.items()})}; "
       f"full {full.mean_r2():.3f} >= w/o top-k sc {ablated.mean_r2():.3f}")


# ---------------------------------------------------------------------------
# 7. metric identities
# ---------------------------------------------------------------------------

def test_metric_identities():
    y = np.array([4.0, 5.0, 9.0])
    assert ev.metrics(y, y) == (0.0, 0.0, 1.0)
    _, _, r2 = ev.metrics(y, np.full(3, y.mean()))
    assert abs(r2) < 1e-12
    mae, rmse, r2 = ev.metrics([1, 2, 3], [1, 2, 4])
    assert abs(mae - 1.0 / 3.0) < 1e-9
    assert abs(rmse - 1.0 / math.sqrt(3.0)) < 1e-9
    assert abs(r2 - 0.5) < 1e-9
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(2, 30))
        yt = rng.standard_normal(n)
        if np.ptp(yt) == 0.0:
            continue
        mae, rmse, _ = ev.metrics(yt, rng.standard_normal(n))
        assert mae <= rmse + 1e-12
    ok("metric identities", "perfect/mean/hand cases + 1000 random MAE<=RMSE")


# ---------------------------------------------------------------------------
# 8. pipeline determinism
# ---------------------------------------------------------------------------

def test_pipeline_determinism(tmp_path):
    fast = ["--dim", "48", "--embed-dim", "16", "--n-circles", "12",
            "--top-k", "4", "--cv-folds", "3", "--regressor", "ridge",
            "--seed", "13"]
    for name in ("a", "b"):
        proc = cli(["pipeline", "--out", tmp_path / name, *fast], cwd=tmp_path)
        assert proc.returncode == 0, proc.stderr
    compared = []
    for rel in ("data/images.cgf", "data/circle_texts.cgf", "data/poi_reviews.cgf",
                "data/labels.jsonl", "encode/h_text.cgf", "encode/h_visual.cgf",
                "encode/h_poi.cgf", "graph/edges.csv", "graph/ptilde.cgf",
                "train/embeddings.cgf", "train/model.cgm",
                "eval/report.json", "eval/report.csv"):
        assert file_hash(tmp_path / "a" / rel) == file_hash(tmp_path / "b" / rel), rel
        compared.append(rel)
    ok("pipeline determinism", f"{len(compared)} artifacts byte-identical")


# ---------------------------------------------------------------------------
# 9. loss identities
# ---------------------------------------------------------------------------

def test_loss_identities():
    a1 = rand((1, 4), 31)
    p1 = rand((1, 4), 32)
    assert abs(enc.infonce_loss(a1, p1, 0.3).item()) < 1e-12

    n = 7
    a = np.tile(rand(5, 33), (n, 1))
    p = np.tile(rand(5, 34), (n, 1))
    got = enc.infonce_loss(a, p, 0.05).item()
    assert abs(got - math.log(n)) < 1e-9

    b = 6
    emb = np.tile(rand(4, 35), (b, 1))
    got = enc.supcon_loss(emb, np.zeros(b, dtype=int), 0.005).item()
    assert abs(got - b * math.log(b - 1)) < 1e-9

    x, other = rand(4, 36), rand(4, 37)
    assert enc.triplet_geo_loss(x, other, other, margin=1.25).item() == 1.25
    ok("loss identities",
       "InfoNCE(N=1)=0, uniform=ln N, supcon uniform=B ln(B-1), triplet=m")
