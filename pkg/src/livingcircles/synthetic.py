"""Deterministic synthetic-city generator.

A set of planted latent factors drives everything observable: the feature
vectors of every modality are linearly perturbed by the factors, the POI
category mix follows them, and the disease counts are a smooth function
``g`` of them plus optional noise.  The factors (and ``g``'s parameters)
are written to a sidecar so tests can verify the planted signal end to end.

The whole generation is a pure function of (spec, seed): two runs with the
same arguments produce byte-identical files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data_model as dm
from .errors import ArgumentError

EARTH_CENTER = (39.9, 116.4)          # city anchor for generated coordinates
KM_PER_DEG_LAT = 110.574
KM_PER_DEG_LON = 85.3                 # at ~40 deg latitude


@dataclass
class SynthSpec:
    """Size knobs for a generated city.

    The defaults balance two competing needs of the planted signal: the
    category mixes must vary smoothly (a tight functional-similarity
    spread keeps the autocorrelation matrix well conditioned for the
    reconstruction objective) while the per-modality features carry the
    latent factors strongly enough to survive the whole pipeline.
    """

    n_circles: int
    dim: int = 768
    n_latent: int = 4
    images_per_circle: tuple = (2, 4)
    pois_per_circle: tuple = (8, 14)
    reviews_per_poi: tuple = (1, 2)
    noise_scale: float = 0.1
    grid_spacing_km: float = 1.6
    signal_amp: float = 0.9
    jitter: float = 1.2
    latent_noise: float = 0.15
    category_mix_scale: float = 0.35
    rate_lo: float = 0.06
    rate_hi: float = 0.44


def _smooth_fields(rng, lat, lon, q):
    """Low-frequency sinusoidal fields of the coordinates, one per latent."""
    x = (lon - EARTH_CENTER[1]) * KM_PER_DEG_LON
    y = (lat - EARTH_CENTER[0]) * KM_PER_DEG_LAT
    z = np.zeros((lat.size, q))
    for j in range(q):
        for _ in range(2):
            fx, fy = rng.uniform(0.05, 0.25, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            z[:, j] += np.sin(fx * x + fy * y + phase)
    return z


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def generate_synthetic_city(spec: SynthSpec, seed: int, out_dir) -> Path:
    """Generate a full dataset on disk and return the directory path."""
    if spec.n_circles < 2:
        raise ArgumentError("a synthetic city needs at least 2 circles")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    n, q, F = spec.n_circles, spec.n_latent, spec.dim
    vocab = list(dm.DEFAULT_CATEGORIES)
    G = len(vocab)

    # -- geography: jittered grid, streets are 2x2 blocks of cells ---------
    side = int(np.ceil(np.sqrt(n)))
    gx, gy = np.arange(n) % side, np.arange(n) // side
    jit = rng.uniform(-0.15, 0.15, size=(n, 2))
    x_km = (gx + jit[:, 0]) * spec.grid_spacing_km
    y_km = (gy + jit[:, 1]) * spec.grid_spacing_km
    lat = EARTH_CENTER[0] + y_km / KM_PER_DEG_LAT
    lon = EARTH_CENTER[1] + x_km / KM_PER_DEG_LON
    streets = {f"c-{i:04d}": f"street-{gx[i] // 2}-{gy[i] // 2}" for i in range(n)}

    # -- planted latent factors: smooth over space + idiosyncratic ---------
    z = _smooth_fields(rng, lat, lon, q) + spec.latent_noise * rng.standard_normal((n, q))

    # -- demographics -------------------------------------------------------
    w_eld = rng.standard_normal(q) / np.sqrt(q)
    elderly = np.round(170.0 + 110.0 * np.tanh(z @ w_eld)).astype(int)
    households = np.round(elderly * rng.uniform(2.2, 2.8, size=n)).astype(int)

    # -- feature bases and latent loadings ---------------------------------
    def base_vec():
        return rng.standard_normal(F) / np.sqrt(F)

    base_v, base_t = base_vec(), base_vec()
    B_v = rng.standard_normal((F, q)) * (spec.signal_amp / np.sqrt(F))
    B_t = rng.standard_normal((F, q)) * (spec.signal_amp / np.sqrt(F))
    B_p = rng.standard_normal((F, q)) * (spec.signal_amp / np.sqrt(F))
    rating_anchor = rng.standard_normal((6, F)) / np.sqrt(F)   # index by rating 1..5
    cat_base = rng.standard_normal((G, F)) / np.sqrt(F)

    circles, pois, labels = [], [], []
    image_rows, text_rows, review_rows = [], [], []

    # category mix per circle follows the latents
    C_mix = rng.standard_normal((G, q)) * spec.category_mix_scale
    cat_logit_base = rng.standard_normal(G) * 0.2

    w_sent = rng.standard_normal(q) / np.sqrt(q)

    for i in range(n):
        cid = f"c-{i:04d}"
        m_i = int(rng.integers(spec.images_per_circle[0], spec.images_per_circle[1] + 1))
        img_ids = []
        for _ in range(m_i):
            img_ids.append(len(image_rows))
            image_rows.append(base_v + B_v @ z[i] + spec.jitter * rng.standard_normal(F) / np.sqrt(F))
        text_rows.append(base_t + B_t @ z[i] + spec.jitter * rng.standard_normal(F) / np.sqrt(F))

        o_i = int(rng.integers(spec.pois_per_circle[0], spec.pois_per_circle[1] + 1))
        probs = np.exp(C_mix @ z[i] + cat_logit_base)
        probs /= probs.sum()
        poi_ids = []
        for j in range(o_i):
            pid = f"p-{i:04d}-{j}"
            category = vocab[int(rng.choice(G, p=probs))]
            m_j = int(rng.integers(spec.reviews_per_poi[0], spec.reviews_per_poi[1] + 1))
            rows, ratings = [], []
            for _ in range(m_j):
                sentiment = z[i] @ w_sent + 0.6 * rng.standard_normal()
                rating = int(np.clip(np.round(3.0 + 1.5 * sentiment), 1, 5))
                rows.append(len(review_rows))
                review_rows.append(rating_anchor[rating] + B_p @ z[i]
                                   + spec.jitter * rng.standard_normal(F) / np.sqrt(F))
                ratings.append(rating)
            pois.append(dm.Poi(id=pid, circle_id=cid, category=category,
                               review_row_ids=rows, rating_labels=ratings))
            poi_ids.append(pid)

        circles.append(dm.LivingCircle(
            id=cid, lat=float(lat[i]), lon=float(lon[i]),
            households=int(households[i]), elderly_pop=int(elderly[i]),
            image_row_ids=img_ids, text_row_id=i, poi_ids=poi_ids))

    # -- disease counts: g(latents) + noise, clipped into [0, elderly] -----
    # each disease's latent projection is rescaled to a fixed spread so the
    # planted signal is recoverable for every target, not just lucky draws
    disease_w = {}
    for d in dm.DISEASES:
        w = rng.standard_normal(q)
        spread = float((z @ w).std())
        disease_w[d] = w * (1.2 / spread)
    disease_b = {d: float(rng.uniform(-0.4, 0.4)) for d in dm.DISEASES}
    lo, hi = spec.rate_lo, spec.rate_hi
    g_values, g_spread = {}, {}
    for d in dm.DISEASES:
        g_values[d] = elderly * (lo + (hi - lo) * _sigmoid(z @ disease_w[d] + disease_b[d]))
        g_spread[d] = float(g_values[d].std())
    # noise scales with each signal's spread: noise_scale is a 1/SNR knob
    noise = {d: rng.standard_normal(n) for d in dm.DISEASES}
    for i in range(n):
        counts = {}
        for d in dm.DISEASES:
            raw = g_values[d][i] + spec.noise_scale * g_spread[d] * noise[d][i]
            counts[d] = float(np.clip(raw, 0.0, float(elderly[i])))
        labels.append(dm.DiseaseLabels(circle_id=circles[i].id, **counts))

    # -- write everything ---------------------------------------------------
    dm.write_circles(out / dm.DATASET_FILES["circles"], circles)
    dm.write_pois(out / dm.DATASET_FILES["pois"], pois)
    dm.write_labels(out / dm.DATASET_FILES["labels"], labels)
    dm.write_matrix(out / dm.DATASET_FILES["image"], np.array(image_rows))
    dm.write_matrix(out / dm.DATASET_FILES["circle_text"], np.array(text_rows))
    dm.write_matrix(out / dm.DATASET_FILES["poi_review"], np.array(review_rows))
    dm.write_matrix(out / dm.DATASET_FILES["poi_category"], cat_base)
    (out / dm.DATASET_FILES["categories"]).write_text(
        json.dumps(vocab, ensure_ascii=False), encoding="utf-8")
    dm.write_streets(out / dm.DATASET_FILES["streets"], streets)

    sidecar = {
        "n_latent": q,
        "latents": [[float(v) for v in row] for row in z],
        "elderly_weight": [float(v) for v in w_eld],
        "rate_lo": lo,
        "rate_hi": hi,
        "noise_scale": spec.noise_scale,
        "disease_model": {d: {"w": [float(v) for v in disease_w[d]],
                              "b": disease_b[d]} for d in dm.DISEASES},
    }
    (out / "latents.json").write_text(json.dumps(sidecar), encoding="utf-8")
    return out


def planted_disease_counts(sidecar: dict, elderly: np.ndarray) -> dict:
    """Re-evaluate g from the sidecar latents (the noise-free counts)."""
    z = np.array(sidecar["latents"])
    lo, hi = sidecar["rate_lo"], sidecar["rate_hi"]
    out = {}
    for d, model in sidecar["disease_model"].items():
        w, b = np.array(model["w"]), model["b"]
        out[d] = elderly * (lo + (hi - lo) * _sigmoid(z @ w + b))
    return out
