"""Residual multi-modal graph convolution with fused MLP readout.

Layer rule (sigmoid activation, initial-residual + identity-mapped weights):

    H(k) = sigmoid( ((1-a) P H(k-1) + a H(0)) ((1-b_k) I + b_k W(k)) )
    b_k  = ln(eta / k + 1)

The readout concatenates each circle's modality rows and applies a
four-layer MLP (rectifier hidden, linear output).  Training minimizes the
autocorrelation reconstruction plus the modality-alignment penalty, with
exact reverse-mode gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Adam, Tensor, as_tensor, concat, row_norms, uniform_init
from .data_model import RunConfig, stage_rng
from .errors import ArgumentError, NumericError, TrainingDivergedError


def beta(k: int, eta: float) -> float:
    """Layer-decay coefficient ln(eta/k + 1)."""
    if k < 1:
        raise ArgumentError("layer index starts at 1")
    if eta < 0:
        raise ArgumentError("eta must be non-negative")
    return math.log(eta / k + 1.0)


@dataclass
class ReadoutMLP:
    """Four affine layers; rectifier on the first three, last one linear."""

    layers: list   # [(W, b), ...] with W: (out, in)

    @staticmethod
    def init(rng, in_dim: int, out_dim: int) -> "ReadoutMLP":
        dims = [in_dim, out_dim, out_dim, out_dim, out_dim]
        layers = []
        for a, b in zip(dims[:-1], dims[1:]):
            layers.append((Tensor.param(uniform_init(rng, a, (b, a))),
                           Tensor.param(uniform_init(rng, a, (b,)))))
        return ReadoutMLP(layers)

    @property
    def params(self):
        return [t for pair in self.layers for t in pair]

    def apply(self, x: Tensor) -> Tensor:
        for idx, (w, b) in enumerate(self.layers):
            x = x @ w.T + b
            if idx < len(self.layers) - 1:
                x = x.relu()
        return x

    def arrays(self, prefix: str = "readout") -> dict:
        out = {}
        for i, (w, b) in enumerate(self.layers):
            out[f"{prefix}.{i}.W"] = w.value
            out[f"{prefix}.{i}.b"] = b.value
        return out


@dataclass
class ModelState:
    """Everything trainable plus the frozen inputs of one training run."""

    h0: np.ndarray            # (M*n, d) initial node features
    layer_weights: list       # [Tensor (d, d)] for k = 1..L
    readout: ReadoutMLP
    modalities: tuple
    n_circles: int
    step: int = 0
    optimizer: Adam = None

    @property
    def params(self):
        return list(self.layer_weights) + self.readout.params

    def checkpoint_arrays(self) -> dict:
        out = {"h0": self.h0, "step": np.array([float(self.step)])}
        for k, w in enumerate(self.layer_weights, start=1):
            out[f"gcn.W{k}"] = w.value
        out.update(self.readout.arrays())
        if self.optimizer is not None:
            out.update(self.optimizer.state_arrays())
        return out


@dataclass
class EmbeddingTable:
    """Fused per-circle embeddings plus the post-GCN modality rows."""

    circle_ids: list
    fused: np.ndarray         # (n, d)
    modal: dict = field(default_factory=dict)   # modality -> (n, d)


def init_state(rng, h0: np.ndarray, d: int, layers: int, modalities,
               n_circles: int) -> ModelState:
    weights = [Tensor.param(uniform_init(rng, d, (d, d))) for _ in range(layers)]
    readout = ReadoutMLP.init(rng, len(modalities) * d, d)
    return ModelState(h0=np.asarray(h0, dtype=np.float64), layer_weights=weights,
                      readout=readout, modalities=tuple(modalities),
                      n_circles=n_circles)


def gcn_forward(p_tilde, h0, weights, alpha: float, eta: float, layers: int,
                dropout: float = 0.0, mode: str = "eval", rng=None):
    """Run the propagation rule for ``layers`` steps.

    Returns (H_L, [H_1..H_L]); in train mode, dropout masks the input of
    each layer (seeded through ``rng``).
    """
    if mode not in ("train", "eval"):
        raise ArgumentError(f"unknown mode '{mode}'")
    if mode == "train" and dropout > 0.0 and rng is None:
        raise ArgumentError("train-mode dropout needs a generator")
    p = as_tensor(p_tilde)
    h0 = as_tensor(h0)
    d = h0.value.shape[1]
    eye = np.eye(d)
    h = h0
    cache = []
    for k in range(1, layers + 1):
        h_in = h
        if mode == "train" and dropout > 0.0:
            mask = (rng.random(h_in.value.shape) >= dropout) / (1.0 - dropout)
            h_in = h_in * mask
        bk = beta(k, eta)
        mix = (p @ h_in) * (1.0 - alpha) + h0 * alpha
        wmat = weights[k - 1] * bk + eye * (1.0 - bk)
        h = (mix @ wmat).sigmoid()
        if not np.all(np.isfinite(h.value)):
            raise NumericError(f"non-finite activations at layer {k}")
        cache.append(h)
    return h, cache


def fuse_readout(h_last: Tensor, readout: ReadoutMLP, modalities, n_circles: int) -> Tensor:
    """Concatenate each circle's modality rows and apply the MLP."""
    blocks = [h_last[m * n_circles:(m + 1) * n_circles] for m in range(len(modalities))]
    e_star = concat(blocks, axis=1)
    return readout.apply(e_star)


def modal_rows(h_last: Tensor, modalities, n_circles: int) -> dict:
    return {m: h_last[idx * n_circles:(idx + 1) * n_circles]
            for idx, m in enumerate(modalities)}


def objective(embeddings, s_matrix: np.ndarray, lam: float, modal: dict) -> Tensor:
    """Reconstruction of S over ordered pairs i != j, plus the mean
    per-circle Euclidean gap between the text rows and each other modality."""
    e = as_tensor(embeddings)
    n = e.value.shape[0]
    gram = e @ e.T
    offdiag = 1.0 - np.eye(n)
    resid = as_tensor(s_matrix) - gram
    loss = (resid * resid * offdiag).sum()
    if lam != 0.0 and "text" in modal:
        for m, rows in modal.items():
            if m == "text":
                continue
            gap = row_norms(modal["text"] - rows, keepdims=False).mean()
            loss = loss + lam * gap
    return loss


def backward(loss: Tensor):
    """Populate .grad on every parameter reachable from ``loss``."""
    loss.backward()


def train(p_tilde: np.ndarray, h0: np.ndarray, s_matrix: np.ndarray,
          config: RunConfig, modalities, circle_ids, seed_seq=None):
    """Full-graph training loop (one optimizer step per epoch).

    Returns (state, embedding table, per-epoch losses).  Bitwise
    reproducible for a fixed seed and thread count.
    """
    n = len(circle_ids)
    if h0.shape[0] != n * len(modalities):
        raise ArgumentError("initial features do not match the node layout")
    if h0.shape[1] != config.embed_dim:
        raise ArgumentError("h0 width must equal embed_dim")
    rng = (np.random.default_rng(seed_seq) if seed_seq is not None
           else stage_rng(config.rng_seed, "train"))
    state = init_state(rng, h0, config.embed_dim, config.gcn_layers,
                       modalities, n)
    opt = Adam(state.params, lr=config.lr_gcn, weight_decay=config.weight_decay)
    state.optimizer = opt
    losses = []
    for epoch in range(config.epochs):
        h_last, _ = gcn_forward(p_tilde, state.h0, state.layer_weights,
                                config.alpha, config.eta, config.gcn_layers,
                                dropout=config.dropout, mode="train", rng=rng)
        emb = fuse_readout(h_last, state.readout, modalities, n)
        loss = objective(emb, s_matrix, config.lam,
                         modal_rows(h_last, modalities, n))
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDivergedError("smgcn", epoch, value)
        losses.append(value)
        opt.zero_grad()
        loss.backward()
        opt.step()
        state.step += 1

    h_last, _ = gcn_forward(p_tilde, state.h0, state.layer_weights,
                            config.alpha, config.eta, config.gcn_layers,
                            mode="eval")
    emb = fuse_readout(h_last, state.readout, modalities, n)
    table = EmbeddingTable(
        circle_ids=list(circle_ids), fused=emb.value,
        modal={m: t.value for m, t in modal_rows(h_last, modalities, n).items()})
    return state, table, losses
