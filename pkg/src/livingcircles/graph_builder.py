"""Multi-modal graph assembly.

Nodes are (circle, modality) pairs laid out modality-major: the node id of
modality block ``m`` and circle ``i`` is ``m * n + i``.  Intra-circle edges
connect differing modalities of one circle; inter-circle edges connect the
same modality of spatially correlated circles (top-K on the autocorrelation
matrix), discounted by log distance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, IntegrityError
from .spatial import SpatialContext, log_distance_discount, top_k_candidates

MODALITIES = ("text", "visual", "poi")


@dataclass
class MultiModalGraph:
    n_circles: int
    modalities: tuple
    edges: list               # (u, v, weight, kind) with u < v, stored once

    @property
    def n_nodes(self) -> int:
        return self.n_circles * len(self.modalities)

    def node_id(self, modality: str, circle: int) -> int:
        return self.modalities.index(modality) * self.n_circles + circle


def angular_weight(x_i: np.ndarray, x_j: np.ndarray) -> float:
    """1 - arccos(cosine)/pi, in [0, 1]."""
    ni, nj = np.linalg.norm(x_i), np.linalg.norm(x_j)
    if ni == 0.0 or nj == 0.0:
        raise DegenerateInputError("angular weight of a zero vector is undefined")
    cos = float(np.clip(np.dot(x_i, x_j) / (ni * nj), -1.0, 1.0))
    return 1.0 - math.acos(cos) / math.pi


def inter_weight(w1: float, d_ij: float) -> float:
    """Distance-discounted angular weight, with the same zero-distance
    guard as the autocorrelation matrix."""
    return w1 / log_distance_discount(d_ij)


def build_graph(features: dict, ctx: SpatialContext, k: int,
                modalities=MODALITIES, include_inter: bool = True) -> MultiModalGraph:
    """Assemble intra- and inter-circle edges from projected features.

    ``features`` maps each modality name to an (n, d) array; a missing or
    short matrix is an integrity error.
    """
    n = ctx.n
    modalities = tuple(modalities)
    for m in modalities:
        if m not in features:
            raise IntegrityError(f"missing feature rows for modality '{m}'")
        if features[m].shape[0] != n:
            raise IntegrityError(f"modality '{m}' has {features[m].shape[0]} rows, expected {n}")

    g = MultiModalGraph(n_circles=n, modalities=modalities, edges=[])

    for i in range(n):
        for a in range(len(modalities)):
            for b in range(a + 1, len(modalities)):
                w = angular_weight(features[modalities[a]][i], features[modalities[b]][i])
                g.edges.append((g.node_id(modalities[a], i),
                                g.node_id(modalities[b], i), w, "intra"))

    if include_inter and n > 1:
        topk = ctx.topk if ctx.topk and len(ctx.topk[0]) == min(k, n - 1) \
            else top_k_candidates(ctx.S, k)
        for m in modalities:
            seen = set()
            rows = features[m]
            for i in range(n):
                for j in topk[i]:
                    key = (min(i, j), max(i, j))
                    if key in seen:
                        continue
                    seen.add(key)
                    w1 = angular_weight(rows[key[0]], rows[key[1]])
                    w = inter_weight(w1, ctx.D[key[0], key[1]])
                    g.edges.append((g.node_id(m, key[0]), g.node_id(m, key[1]), w, "inter"))
    return g


def renormalized_laplacian(graph: MultiModalGraph) -> np.ndarray:
    """D^{-1/2} (A + I) D^{-1/2}; symmetric by construction."""
    n = graph.n_nodes
    a = np.zeros((n, n))
    for u, v, w, _ in graph.edges:
        a[u, v] += w
        a[v, u] += w
    a[np.diag_indices(n)] += 1.0
    dinv = 1.0 / np.sqrt(a.sum(axis=1))
    return np.outer(dinv, dinv) * a


def spectral_radius(mat: np.ndarray, iters: int = 200, seed: int = 0) -> float:
    """Largest absolute eigenvalue estimated by power iteration."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(mat.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = mat @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        lam = float(v @ (mat @ v))
    return abs(lam)
