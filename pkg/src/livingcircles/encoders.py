"""Trainable projection heads over frozen backbone features, and the four
contrastive objectives that train them.

Backbone fine-tuning is replaced by feature-space heads: an image encoder
and a review encoder map raw features to same-sized projected features,
while the shared-space heads map per-circle aggregates into the common
embedding dimension.  All loss math operates on autodiff tensors so exact
gradients are available everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (Adam, Tensor, as_tensor, concat, cosine_matrix,
                       logsumexp_rows, row_norms, uniform_init)
from .data_model import Dataset, RunConfig, stage_rng
from .errors import (ArgumentError, BatchCompositionError,
                     DegenerateInputError, IntegrityError,
                     TrainingDivergedError)
from .spatial import distance_matrix_km

NEGATIVE_RADIUS_KM = 1.0   # triplet negatives come from beyond the circle


# Target per-coordinate spread of shared-space head outputs at init.
# Unit-order outputs keep the sigmoid layers of the graph network in their
# active range (pretrained backbones emit unit-scale coordinates; a
# 1/sqrt(F) init on ~unit-norm inputs would collapse every node feature
# onto sigmoid(0) and starve the readout of circle-to-circle contrast).
HEAD_OUTPUT_STD = 0.5


@dataclass
class ProjectionHead:
    """Affine map W x + b with a modality tag."""

    W: Tensor
    b: Tensor
    modality: str

    @staticmethod
    def init(rng, in_dim: int, out_dim: int, modality: str,
             scale: float = None) -> "ProjectionHead":
        if scale is None:
            return ProjectionHead(
                W=Tensor.param(uniform_init(rng, in_dim, (out_dim, in_dim))),
                b=Tensor.param(uniform_init(rng, in_dim, (out_dim,))),
                modality=modality)
        return ProjectionHead(
            W=Tensor.param(rng.uniform(-scale, scale, size=(out_dim, in_dim))),
            b=Tensor.param(rng.uniform(-scale, scale, size=(out_dim,))),
            modality=modality)

    def rescale_for_inputs(self, inputs: np.ndarray, target_std: float = HEAD_OUTPUT_STD):
        """Rescale freshly drawn parameters so outputs have roughly
        ``target_std`` per coordinate on these inputs (computed once at
        init, before any training)."""
        rms = float(np.sqrt(np.mean(np.sum(inputs ** 2, axis=1))))
        if rms > 0:
            factor = target_std * np.sqrt(3.0) / rms
            self.W.value = self.W.value * factor
            self.b.value = self.b.value * factor

    @property
    def params(self):
        return [self.W, self.b]

    def arrays(self, prefix: str) -> dict:
        return {f"{prefix}.W": self.W.value, f"{prefix}.b": self.b.value}


@dataclass
class CircleModalFeatures:
    """Per-circle modality aggregates (pre shared-space projection)."""

    c_t: np.ndarray   # (n, F)
    c_v: np.ndarray   # (n, F)
    c_p: np.ndarray   # (n, 2F)


def project(head: ProjectionHead, x) -> Tensor:
    """Apply the head to a vector or a row matrix."""
    x = as_tensor(x)
    if x.value.shape[-1] != head.W.value.shape[1]:
        raise ArgumentError(f"feature dim {x.value.shape[-1]} does not match "
                            f"head input dim {head.W.value.shape[1]}")
    return x @ head.W.T + head.b


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _vec_norm(x: Tensor) -> Tensor:
    return (x * x).sum().sqrt()


def triplet_geo_loss(x, x_p, x_n, margin: float) -> Tensor:
    """Hinge on the anchor-positive vs anchor-negative distance gap."""
    if margin <= 0:
        raise ArgumentError("margin must be positive")
    x, x_p, x_n = as_tensor(x), as_tensor(x_p), as_tensor(x_n)
    return (_vec_norm(x - x_p) - _vec_norm(x - x_n) + margin).relu()


def triplet_geo_loss_batch(x: Tensor, x_p: Tensor, x_n: Tensor, margin: float) -> Tensor:
    """Mean hinge loss over rows of aligned (N, d) matrices."""
    if margin <= 0:
        raise ArgumentError("margin must be positive")
    d_pos = row_norms(x - x_p, keepdims=False)
    d_neg = row_norms(x - x_n, keepdims=False)
    return (d_pos - d_neg + margin).relu().mean()


def _check_nonzero_rows(t: Tensor, what: str):
    norms = np.linalg.norm(t.value, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateInputError(f"{what} contains a zero-norm row")


def infonce_loss(anchors, positives, tau: float) -> Tensor:
    """Softmax contrastive loss over in-batch negatives, cosine similarity,
    stabilized by max subtraction."""
    if tau <= 0:
        raise ArgumentError("temperature must be positive")
    anchors, positives = as_tensor(anchors), as_tensor(positives)
    _check_nonzero_rows(anchors, "anchors")
    _check_nonzero_rows(positives, "positives")
    n = anchors.value.shape[0]
    sims = cosine_matrix(anchors, positives) / tau
    diag = sims[np.arange(n), np.arange(n)]
    lse = logsumexp_rows(sims)
    return (lse.reshape(n) - diag).mean()


def supcon_loss(embeddings, labels, tau: float) -> Tensor:
    """Supervised contrastive loss: all same-label batch members are
    positives; denominators run over every other sample."""
    if tau <= 0:
        raise ArgumentError("temperature must be positive")
    emb = as_tensor(embeddings)
    _check_nonzero_rows(emb, "embeddings")
    labels = np.asarray(labels)
    b = emb.value.shape[0]
    if labels.shape != (b,):
        raise ArgumentError("labels must align with embedding rows")
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    pos_counts = same.sum(axis=1)
    if np.any(pos_counts == 0):
        i = int(np.argmin(pos_counts))
        raise BatchCompositionError(f"sample {i} (label {labels[i]}) has no positive in the batch")

    sims = cosine_matrix(emb, emb) / tau
    # exclude self from every denominator
    mask = np.zeros((b, b))
    np.fill_diagonal(mask, -np.inf)
    lse = logsumexp_rows(sims + mask).reshape(b)
    weights = same / pos_counts[:, None]          # rows sum to 1
    pos_term = (sims * weights).sum(axis=1)
    return (lse - pos_term).sum()


def visual_encoder_loss(triplets, aug_pairs, margin: float, tau: float) -> Tensor:
    """Mean geospatial triplet loss plus the augmentation InfoNCE term."""
    x, x_p, x_n = triplets
    anchors, positives = aug_pairs
    return (triplet_geo_loss_batch(as_tensor(x), as_tensor(x_p), as_tensor(x_n), margin)
            + infonce_loss(anchors, positives, tau))


def augment_feature(x: np.ndarray, p: float, seed: int):
    """Two independent inverted-dropout views of a raw feature vector."""
    if not 0.0 <= p < 1.0:
        raise ArgumentError("dropout rate must lie in [0, 1)")
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    views = []
    for _ in range(2):
        mask = rng.random(x.shape) >= p
        views.append(x * mask / (1.0 - p))
    return views[0], views[1]


# ---------------------------------------------------------------------------
# per-circle aggregation
# ---------------------------------------------------------------------------

def aggregate_visual(circle, image_features) -> Tensor:
    """Arithmetic mean of the circle's projected image vectors."""
    if len(circle.image_row_ids) == 0:
        raise IntegrityError(f"circle '{circle.id}' has no images")
    feats = as_tensor(image_features)
    return feats[np.asarray(circle.image_row_ids)].mean(axis=0)


def aggregate_poi(circle, pois_by_id, review_features, category_features,
                  vocab_index: dict) -> Tensor:
    """Sum over categories of the per-category mean of concatenated
    [review, category] vectors."""
    review_features = as_tensor(review_features)
    category_features = as_tensor(category_features)
    by_category = {}
    n_pois = 0
    for pid in circle.poi_ids:
        poi = pois_by_id[pid]
        n_pois += 1
        if poi.review_row_ids:
            by_category.setdefault(poi.category, []).extend(poi.review_row_ids)
    if n_pois > 0 and not by_category:
        raise IntegrityError(f"circle '{circle.id}' has POIs but no reviews")
    two_f = review_features.value.shape[1] + category_features.value.shape[1]
    total = Tensor(np.zeros(two_f))
    for category in sorted(by_category):
        rows = np.asarray(by_category[category])
        mean_rv = review_features[rows].mean(axis=0)
        cat_vec = category_features[np.asarray([vocab_index[category]])].reshape(-1)
        total = total + concat([mean_rv, cat_vec], axis=0)
    return total


# ---------------------------------------------------------------------------
# three-stage encoder training
# ---------------------------------------------------------------------------

@dataclass
class EncoderResult:
    heads: dict                      # modality -> ProjectionHead (shared space)
    stage_encoders: dict             # "visual"/"poi" -> ProjectionHead (F -> F)
    modal: CircleModalFeatures
    projected: dict                  # modality -> (n, d) ndarray
    loss_curves: dict = field(default_factory=dict)

    def checkpoint_arrays(self) -> dict:
        out = {}
        for name, head in self.stage_encoders.items():
            out.update(head.arrays(f"enc.{name}"))
        for name, head in self.heads.items():
            out.update(head.arrays(f"head.{name}"))
        return out


def _batches(order: np.ndarray, size: int):
    for start in range(0, len(order), size):
        yield order[start:start + size]


def _finite_or_raise(loss: Tensor, stage: str, step: int):
    v = loss.item()
    if not np.isfinite(v):
        raise TrainingDivergedError(stage, step, v)
    return v


def _visual_batch_loss(visual_enc, images, batch, pos_rows, neg_rows,
                       views1, views2, config) -> Tensor:
    x = project(visual_enc, images[batch])
    x_p = project(visual_enc, images[pos_rows])
    x_n = project(visual_enc, images[neg_rows])
    a1 = project(visual_enc, views1)
    a2 = project(visual_enc, views2)
    return triplet_geo_loss_batch(x, x_p, x_n, config.margin) \
        + infonce_loss(a1, a2, config.tau_visual)


def _sample_visual_batch(rng, images, batch, dataset, circle_of_image,
                         far_images, aug_p):
    pos_rows, neg_rows = [], []
    for row in batch:
        ci = circle_of_image[row]
        own = [r for r in dataset.circles[ci].image_row_ids if r != row]
        pos_rows.append(int(rng.choice(own)) if own else int(row))
        pool = far_images[ci]
        neg_rows.append(int(rng.choice(pool)) if pool.size else int(row))
    views1, views2 = [], []
    for row in batch:
        a, b = augment_feature(images[row], aug_p, int(rng.integers(0, 2**63 - 1)))
        views1.append(a)
        views2.append(b)
    return (np.asarray(pos_rows), np.asarray(neg_rows),
            np.asarray(views1), np.asarray(views2))


def _poi_batch(rng, reviews, review_rows, review_ratings, batch, aug_p):
    views, labels = [], []
    for idx in batch:
        a, b = augment_feature(reviews[review_rows[idx]], aug_p,
                               int(rng.integers(0, 2**63 - 1)))
        views.extend([a, b])
        labels.extend([review_ratings[idx]] * 2)
    return np.asarray(views), np.asarray(labels)


def train_encoders(dataset: Dataset, config: RunConfig) -> EncoderResult:
    """Run the visual, cross-modal text and POI stages in order.

    Deterministic for a fixed config (all randomness comes from the
    encode-stage generator derived from ``config.rng_seed``).  Each loss
    curve holds the stage loss evaluated on fixed canonical batches before
    the first epoch and after every epoch, so entries are comparable.
    """
    rng = stage_rng(config.rng_seed, "encode")
    n = dataset.n
    F = dataset.features["image"].dim
    d = config.embed_dim
    images = dataset.features["image"].data.astype(np.float64)
    texts = dataset.features["circle_text"].data.astype(np.float64)
    reviews = dataset.features["poi_review"].data.astype(np.float64)
    categories = dataset.features["poi_category"].data.astype(np.float64)
    vocab_index = {name: i for i, name in enumerate(dataset.vocabulary)}
    pois_by_id = dataset.poi_by_id()

    visual_enc = ProjectionHead.init(rng, F, F, "visual")
    poi_enc = ProjectionHead.init(rng, F, F, "poi")
    head_t = ProjectionHead.init(rng, F, d, "text", scale=1.0)
    head_v = ProjectionHead.init(rng, F, d, "visual", scale=1.0)
    head_p = ProjectionHead.init(rng, 2 * F, d, "poi", scale=1.0)

    curves = {"visual": [], "text": [], "poi": []}

    # ---- stage 1: visual encoder (triplets + augmentation InfoNCE) -------
    circle_of_image = np.empty(images.shape[0], dtype=int)
    for i, c in enumerate(dataset.circles):
        circle_of_image[np.asarray(c.image_row_ids)] = i
    km = distance_matrix_km(dataset.circles) if n > 1 else np.zeros((1, 1))
    far_images = []
    for i in range(n):
        far = np.flatnonzero(km[i] > NEGATIVE_RADIUS_KM)
        if far.size == 0:
            far = np.asarray([j for j in range(n) if j != i])
        pool = (np.concatenate([np.asarray(dataset.circles[j].image_row_ids) for j in far])
                if far.size else np.empty(0, dtype=int))
        far_images.append(pool)

    eval_rng = np.random.default_rng(np.random.SeedSequence([config.rng_seed, 1, 101]))
    eval_plan_v = [
        (batch, *_sample_visual_batch(eval_rng, images, batch, dataset,
                                      circle_of_image, far_images,
                                      config.aug_dropout))
        for batch in _batches(np.arange(images.shape[0]), config.batch_size)]

    def eval_visual():
        vals = [_visual_batch_loss(visual_enc, images, b, pr, nr, v1, v2, config).item()
                for b, pr, nr, v1, v2 in eval_plan_v]
        return float(np.mean(vals))

    opt = Adam(visual_enc.params, lr=config.lr_visual, weight_decay=config.weight_decay)
    step = 0
    if config.epochs > 0:
        curves["visual"].append(eval_visual())
    for _ in range(config.epochs):
        order = rng.permutation(images.shape[0])
        for batch in _batches(order, config.batch_size):
            pr, nr, v1, v2 = _sample_visual_batch(
                rng, images, batch, dataset, circle_of_image, far_images,
                config.aug_dropout)
            loss = _visual_batch_loss(visual_enc, images, batch, pr, nr, v1, v2, config)
            _finite_or_raise(loss, "visual", step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
        curves["visual"].append(eval_visual())

    # ---- aggregate visual features per circle -----------------------------
    proj_images = project(visual_enc, images).value
    c_v = np.stack([aggregate_visual(c, proj_images).value for c in dataset.circles])
    c_t = texts.copy()
    head_t.rescale_for_inputs(c_t)
    head_v.rescale_for_inputs(c_v)

    # ---- stage 2: cross-modal text alignment ------------------------------
    def eval_text():
        vals = [infonce_loss(project(head_t, c_t[batch]),
                             project(head_v, c_v[batch]), config.tau_text).item()
                for batch in _batches(np.arange(n), config.batch_size)]
        return float(np.mean(vals))

    opt = Adam(head_t.params + head_v.params, lr=config.lr_text,
               weight_decay=config.weight_decay)
    step = 0
    if config.epochs > 0:
        curves["text"].append(eval_text())
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for batch in _batches(order, config.batch_size):
            h_t = project(head_t, c_t[batch])
            h_v = project(head_v, c_v[batch])
            loss = infonce_loss(h_t, h_v, config.tau_text)
            _finite_or_raise(loss, "text", step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
        curves["text"].append(eval_text())

    # ---- stage 3: POI review encoder (supervised contrastive) -------------
    review_rows, review_ratings = [], []
    for p in dataset.pois:
        review_rows.extend(p.review_row_ids)
        review_ratings.extend(p.rating_labels)
    review_rows = np.asarray(review_rows, dtype=int)
    review_ratings = np.asarray(review_ratings, dtype=int)

    anchors_per_batch = max(1, config.batch_size // 2)
    eval_rng = np.random.default_rng(np.random.SeedSequence([config.rng_seed, 1, 303]))
    eval_plan_p = [
        _poi_batch(eval_rng, reviews, review_rows, review_ratings, batch,
                   config.aug_dropout)
        for batch in _batches(np.arange(len(review_rows)), anchors_per_batch)]

    def eval_poi():
        vals = [supcon_loss(project(poi_enc, views), labels, config.tau_poi).item()
                for views, labels in eval_plan_p]
        return float(np.mean(vals))

    opt = Adam(poi_enc.params, lr=config.lr_poi, weight_decay=config.weight_decay)
    step = 0
    if config.epochs > 0 and len(review_rows) > 0:
        curves["poi"].append(eval_poi())
    for _ in range(config.epochs if len(review_rows) > 0 else 0):
        order = rng.permutation(len(review_rows))
        for batch in _batches(order, anchors_per_batch):
            views, labels = _poi_batch(rng, reviews, review_rows, review_ratings,
                                       batch, config.aug_dropout)
            emb = project(poi_enc, views)
            loss = supcon_loss(emb, labels, config.tau_poi)
            _finite_or_raise(loss, "poi", step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
        curves["poi"].append(eval_poi())

    # ---- POI aggregation and shared-space projection ----------------------
    proj_reviews = project(poi_enc, reviews).value if len(reviews) else reviews
    two_f = 2 * F
    c_p = np.zeros((n, two_f))
    for i, c in enumerate(dataset.circles):
        if c.poi_ids:
            c_p[i] = aggregate_poi(c, pois_by_id, proj_reviews, categories,
                                   vocab_index).value

    head_p.rescale_for_inputs(c_p)
    modal = CircleModalFeatures(c_t=c_t, c_v=c_v, c_p=c_p)
    projected = {
        "text": project(head_t, c_t).value,
        "visual": project(head_v, c_v).value,
        "poi": project(head_p, c_p).value,
    }
    return EncoderResult(heads={"text": head_t, "visual": head_v, "poi": head_p},
                         stage_encoders={"visual": visual_enc, "poi": poi_enc},
                         modal=modal, projected=projected, loss_curves=curves)
