"""Distances, functional similarity and the spatial autocorrelation matrix.

All pairwise matrices are computed once per unordered pair and mirrored,
so symmetry holds to the last bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, DegenerateGeometryError

EARTH_RADIUS_KM = 6371.0
ZERO_DISTANCE_EPS = 1e-6   # guards log(D+1) at D == 0


@dataclass
class SpatialContext:
    """Pairwise structure of a set of circles."""

    n: int
    D: np.ndarray       # normalized distances, zero diagonal
    F: np.ndarray       # TF-IDF cosine similarity of POI mixes
    S: np.ndarray       # autocorrelation coefficients, zero diagonal
    topk: list          # per circle, candidate indices ordered by S desc


def haversine_km(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    """Great-circle distance in kilometres."""
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dphi = math.radians(lat2 - lat1)
    dlam = math.radians(lon2 - lon1)
    a = math.sin(dphi / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dlam / 2) ** 2
    return 2.0 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(a)))


def distance_matrix_km(circles) -> np.ndarray:
    n = len(circles)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d = haversine_km(circles[i].lat, circles[i].lon,
                             circles[j].lat, circles[j].lon)
            out[i, j] = out[j, i] = d
    return out


def normalized_distance_matrix(circles) -> np.ndarray:
    """Pairwise distances scaled by the largest one; diagonal zero."""
    if len(circles) < 2:
        raise ArgumentError("need at least 2 circles")
    km = distance_matrix_km(circles)
    dmax = km.max()
    if dmax == 0.0:
        raise DegenerateGeometryError("all circles share one location")
    return km / dmax


def tfidf_vectors(circles, pois, vocabulary) -> np.ndarray:
    """Per-circle smoothed TF-IDF weights over POI categories.

    tf is the category share inside the circle; idf = ln((1+n)/(1+df)) + 1.
    Circles without POIs get the zero vector.
    """
    n, g = len(circles), len(vocabulary)
    index = {name: i for i, name in enumerate(vocabulary)}
    by_id = {p.id: p for p in pois}
    counts = np.zeros((n, g))
    for i, c in enumerate(circles):
        for pid in c.poi_ids:
            counts[i, index[by_id[pid].category]] += 1.0
    totals = counts.sum(axis=1)
    df = (counts > 0).sum(axis=0)
    idf = np.log((1.0 + n) / (1.0 + df)) + 1.0
    tf = np.divide(counts, totals[:, None], out=np.zeros_like(counts),
                   where=totals[:, None] > 0)
    return tf * idf


def functional_similarity(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity; zero if either vector is zero."""
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.dot(u, v) / (nu * nv))


def functional_similarity_matrix(tfidf: np.ndarray) -> np.ndarray:
    n = tfidf.shape[0]
    out = np.zeros((n, n))
    for i in range(n):
        out[i, i] = functional_similarity(tfidf[i], tfidf[i])
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = functional_similarity(tfidf[i], tfidf[j])
    return out


def log_distance_discount(d: float) -> float:
    """ln(d + 1), with d == 0 guarded by a small epsilon so the discount
    stays finite and monotone."""
    return math.log((d if d > 0.0 else ZERO_DISTANCE_EPS) + 1.0)


def spatial_autocorrelation(F: np.ndarray, D: np.ndarray) -> np.ndarray:
    """S[i, j] = F[i, j] / ln(D[i, j] + 1) off-diagonal, 0 on the diagonal."""
    if F.shape != D.shape:
        raise ArgumentError("F and D must have the same shape")
    n = F.shape[0]
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            s = F[i, j] / log_distance_discount(D[i, j])
            out[i, j] = out[j, i] = s
    return out


def top_k_candidates(S: np.ndarray, k: int) -> list:
    """For each row, the k indices with largest S (self excluded),
    descending, ties broken by ascending index."""
    if k < 1:
        raise ArgumentError("k must be >= 1")
    n = S.shape[0]
    out = []
    for i in range(n):
        others = [j for j in range(n) if j != i]
        others.sort(key=lambda j: (-S[i, j], j))
        out.append(others[:min(k, n - 1)])
    return out


def build_spatial_context(circles, pois, vocabulary, k: int) -> SpatialContext:
    D = normalized_distance_matrix(circles)
    F = functional_similarity_matrix(tfidf_vectors(circles, pois, vocabulary))
    S = spatial_autocorrelation(F, D)
    return SpatialContext(n=len(circles), D=D, F=F, S=S,
                          topk=top_k_candidates(S, k))
