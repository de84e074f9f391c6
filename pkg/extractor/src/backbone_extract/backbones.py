"""Backbone registry.

Every backbone maps a manifest item to a float32 vector of fixed dimension
and must be deterministic in eval mode.  The ``stub`` backbone hashes the
item content into a seeded random vector: it needs no downloaded weights,
which keeps the adapter testable offline while exercising the exact same
batching and file plumbing as the hub-backed encoders.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

TARGET_DIM = 768


class BackboneUnavailable(RuntimeError):
    pass


class ItemError(RuntimeError):
    """The item could not be read or encoded."""


def _seed_from_bytes(blob: bytes) -> int:
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little")


class StubBackbone:
    """Deterministic content-hash featurizer (no model weights)."""

    name = "stub"

    def __init__(self, dim: int = TARGET_DIM):
        self.dim = dim

    def checkpoint(self) -> str:
        return f"stub-sha256-{self.dim}"

    def encode_batch(self, items) -> np.ndarray:
        rows = []
        for item in items:
            if item.kind == "text":
                blob = item.path_or_text.encode("utf-8")
            else:
                path = Path(item.path_or_text)
                if not path.is_file():
                    raise ItemError(f"unreadable image file: {path}")
                blob = path.read_bytes()
            rng = np.random.default_rng(_seed_from_bytes(blob))
            rows.append(rng.standard_normal(self.dim).astype(np.float32))
        return np.stack(rows)


class HubTextBackbone:
    """Mean-pooled hidden states of a pretrained language model."""

    name = "hub-text"

    def __init__(self, checkpoint_name: str = "sentence-transformers/all-mpnet-base-v2"):
        try:
            import torch
            from transformers import AutoModel, AutoTokenizer
        except ImportError as exc:
            raise BackboneUnavailable("install the [hub] extra for model-hub backbones") from exc
        self._torch = torch
        self.checkpoint_name = checkpoint_name
        self.tokenizer = AutoTokenizer.from_pretrained(checkpoint_name)
        self.model = AutoModel.from_pretrained(checkpoint_name).eval()
        self.dim = self.model.config.hidden_size
        if self.dim != TARGET_DIM:
            raise BackboneUnavailable(
                f"{checkpoint_name} emits {self.dim}-dim features, need {TARGET_DIM}")

    def checkpoint(self) -> str:
        return self.checkpoint_name

    def encode_batch(self, items) -> np.ndarray:
        torch = self._torch
        texts = [item.path_or_text for item in items]
        enc = self.tokenizer(texts, padding=True, truncation=True, return_tensors="pt")
        with torch.no_grad():
            hidden = self.model(**enc).last_hidden_state
        mask = enc["attention_mask"].unsqueeze(-1)
        pooled = (hidden * mask).sum(1) / mask.sum(1)
        return pooled.numpy().astype(np.float32)


class HubVisionBackbone:
    """CLS token of a pretrained vision transformer (768-dim)."""

    name = "hub-vision"

    def __init__(self, checkpoint_name: str = "google/vit-base-patch16-224-in21k"):
        try:
            import torch
            from PIL import Image                      # noqa: F401
            from transformers import AutoImageProcessor, AutoModel
        except ImportError as exc:
            raise BackboneUnavailable("install the [hub] extra for model-hub backbones") from exc
        self._torch = torch
        self.checkpoint_name = checkpoint_name
        self.processor = AutoImageProcessor.from_pretrained(checkpoint_name)
        self.model = AutoModel.from_pretrained(checkpoint_name).eval()
        self.dim = self.model.config.hidden_size
        if self.dim != TARGET_DIM:
            raise BackboneUnavailable(
                f"{checkpoint_name} emits {self.dim}-dim features, need {TARGET_DIM}")

    def checkpoint(self) -> str:
        return self.checkpoint_name

    def encode_batch(self, items) -> np.ndarray:
        torch = self._torch
        from PIL import Image
        images = []
        for item in items:
            try:
                images.append(Image.open(item.path_or_text).convert("RGB"))
            except OSError as exc:
                raise ItemError(f"unreadable image file: {item.path_or_text}") from exc
        inputs = self.processor(images=images, return_tensors="pt")
        with torch.no_grad():
            hidden = self.model(**inputs).last_hidden_state
        return hidden[:, 0, :].numpy().astype(np.float32)


REGISTRY = {
    "stub": StubBackbone,
    "hub-text": HubTextBackbone,
    "hub-vision": HubVisionBackbone,
}


def make_backbone(name: str):
    if name not in REGISTRY:
        raise BackboneUnavailable(f"unknown backbone '{name}' (choose from {sorted(REGISTRY)})")
    return REGISTRY[name]()
