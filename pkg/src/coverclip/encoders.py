"""Dual-tower backbone: a small vision transformer and a text transformer.

These two towers (plus the learned temperature) are the whole inference
path. Nothing here accepts OCR text.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .nn import LayerNorm, Linear, Module, TransformerBlock, normal, param

INIT_LOG_SCALE = math.log(1.0 / 0.07)
MAX_LOG_SCALE = math.log(100.0)

# independent RNG streams so that optional modules never shift other inits
STREAM_VISION, STREAM_TEXT, STREAM_IC, STREAM_ITM = 1, 2, 3, 4


@dataclass
class ModelConfig:
    vocab_size: int = 512
    d_model: int = 64
    d_proj: int = 32
    image_layers: int = 2
    text_layers: int = 2
    heads: int = 4
    patch_size: int = 8
    image_resolution: int = 64
    max_text_len: int = 12
    head_layers: int = 3
    head_heads: int = 4
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.d_model % self.heads or self.d_model % self.head_heads:
            raise ag.ConfigError(
                f"d_model {self.d_model} must be divisible by heads {self.heads} and {self.head_heads}")
        if self.image_resolution % self.patch_size:
            raise ag.ConfigError(
                f"image_resolution {self.image_resolution} not divisible by patch_size {self.patch_size}")
        if self.max_text_len < 1:
            raise ag.ConfigError("max_text_len must be >= 1")

    @property
    def num_patches(self) -> int:
        return (self.image_resolution // self.patch_size) ** 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


class VisionOutput(NamedTuple):
    tokens: Tensor      # b x (1+P) x d_model, last block output
    embedding: Tensor   # b x d_proj, unit rows


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """b x H x W x C -> b x P x (patch*patch*C), patches in row-major order."""
    b, h, w, c = images.shape
    x = images.reshape(b, h // patch, patch, w // patch, patch, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // patch) * (w // patch), patch * patch * c)


class VisionTransformer(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.d_model
        self.cfg = cfg
        self.patch_embed = Linear(rng, cfg.patch_size * cfg.patch_size * 3, d)
        self.cls = normal(rng, 1, 1, d)
        self.pos = normal(rng, 1 + cfg.num_patches, d)
        self.blocks = [TransformerBlock(rng, d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.image_layers)]
        self.ln_post = LayerNorm(d)
        self.proj = Linear(rng, d, cfg.d_proj, bias=False)

    def forward(self, images) -> VisionOutput:
        arr = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=ag.DTYPE)
        r = self.cfg.image_resolution
        if arr.ndim != 4 or arr.shape[1:] != (r, r, 3):
            raise ag.ShapeError(f"expected images of shape b x {r} x {r} x 3, got {arr.shape}")
        b = arr.shape[0]
        x = self.patch_embed(Tensor(patchify(arr, self.cfg.patch_size)))
        cls = ag.broadcast_to(self.cls, (b, 1, self.cfg.d_model))
        x = ag.concat([cls, x], axis=1) + self.pos
        for blk in self.blocks:
            x = blk(x)
        pooled = self.ln_post(x[:, 0, :])
        return VisionOutput(x, ag.l2_normalize(self.proj(pooled)))


class TextTransformer(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.d_model
        self.cfg = cfg
        self.tok = normal(rng, cfg.vocab_size, d)
        self.pos = normal(rng, cfg.max_text_len, d)
        self.blocks = [TransformerBlock(rng, d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.text_layers)]
        self.ln_final = LayerNorm(d)
        self.proj = Linear(rng, d, cfg.d_proj, bias=False)

    def hidden(self, ids: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
        """Pre-projection CLS state, b x d_model."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2:
            raise ag.ShapeError(f"token ids must be b x L, got {ids.shape}")
        length = ids.shape[1]
        if length > self.cfg.max_text_len:
            raise ag.ShapeError(f"sequence length {length} exceeds max_text_len {self.cfg.max_text_len}")
        if mask is None:
            mask = np.ones(ids.shape)
        x = ag.embedding(self.tok, ids) + self.pos[:length]
        for blk in self.blocks:
            x = blk(x, key_mask=mask)
        return self.ln_final(x[:, 0, :])

    def forward(self, ids: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
        return ag.l2_normalize(self.proj(self.hidden(ids, mask)))


class DualEncoder(Module):
    """Image tower, text tower and learned log inverse-temperature."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.vision = VisionTransformer(cfg, np.random.default_rng([seed, STREAM_VISION]))
        self.text = TextTransformer(cfg, np.random.default_rng([seed, STREAM_TEXT]))
        self.log_scale = param(np.array(INIT_LOG_SCALE))

    def encode_image(self, images) -> VisionOutput:
        return self.vision(images)

    def encode_text(self, ids: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
        return self.text(ids, mask)


def similarity_matrix(img: Tensor, txt: Tensor, log_scale) -> Tensor:
    """Scaled cosine logits ``(img_i . txt_j) / tau`` where ``log_scale = ln(1/tau)``.

    The log scale is clamped at ln(100), so logits of unit vectors never
    exceed 100 in magnitude.
    """
    img, txt = ag.as_tensor(img), ag.as_tensor(txt)
    if img.ndim != 2 or txt.ndim != 2 or img.shape[1] != txt.shape[1]:
        raise ag.ShapeError(f"similarity needs b x d embeddings, got {img.shape} and {txt.shape}")
    scale = ag.exp(ag.clamp(ag.as_tensor(log_scale), hi=MAX_LOG_SCALE))
    return ag.matmul(img, ag.transpose(txt)) * scale
