"""Training-only guidance heads reading the image tower's final token sequence.

* :class:`PresenceHead` answers "does this cover carry rendered text?"
* :class:`SemanticHead` answers "is this sample text the text on the cover?"

Neither head is touched by the inference path.
"""

from __future__ import annotations

import copy
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .encoders import STREAM_IC, STREAM_ITM, ModelConfig, TextTransformer
from .nn import MLP, CrossAttentionBlock, LayerNorm, Module, TransformerBlock


def _check_tokens(tokens: Tensor, d_model: int) -> None:
    if tokens.ndim != 3 or tokens.shape[-1] != d_model:
        raise ag.ShapeError(f"vision tokens must be b x L x {d_model}, got {tokens.shape}")


class PresenceHead(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng([seed, STREAM_IC])
        d = cfg.d_model
        self.d_model = d
        self.blocks = [TransformerBlock(rng, d, cfg.head_heads, cfg.mlp_ratio) for _ in range(cfg.head_layers)]
        self.ln = LayerNorm(d)
        self.classifier = MLP(rng, d, d, 1)

    def forward(self, vision_tokens: Tensor) -> Tensor:
        """One presence logit per item (mean-pooled head output -> MLP)."""
        _check_tokens(vision_tokens, self.d_model)
        x = vision_tokens
        for blk in self.blocks:
            x = blk(x)
        pooled = ag.mean(self.ln(x), axis=1)
        return ag.reshape(self.classifier(pooled), (x.shape[0],))


class SemanticHead(Module):
    """Sample-text state (a length-1 sequence) refined layer by layer against
    read-only vision tokens, then classified as match / no match."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng([seed, STREAM_ITM])
        d = cfg.d_model
        self.d_model = d
        self.layers = [CrossAttentionBlock(rng, d, cfg.head_heads, cfg.mlp_ratio) for _ in range(cfg.head_layers)]
        self.ln = LayerNorm(d)
        self.classifier = MLP(rng, d, d, 1)

    def forward(self, vision_tokens: Tensor, sample_embedding) -> Tensor:
        _check_tokens(vision_tokens, self.d_model)
        s = ag.as_tensor(sample_embedding)
        b = vision_tokens.shape[0]
        if s.shape != (b, self.d_model):
            raise ag.ShapeError(f"sample embedding must be {b} x {self.d_model}, got {s.shape}")
        x = ag.reshape(s, (b, 1, self.d_model))
        for layer in self.layers:
            x = layer(x, vision_tokens)
        return ag.reshape(self.classifier(self.ln(x)), (b,))


def ic_forward(head: PresenceHead, vision_tokens: Tensor) -> Tensor:
    return head(vision_tokens)


def itm_forward(head: SemanticHead, vision_tokens: Tensor, sample_embedding) -> Tensor:
    return head(vision_tokens, sample_embedding)


def ic_loss(logits: Tensor, presence_labels) -> Tensor:
    """Mean binary cross-entropy between presence logits and labels."""
    return ag.bce_with_logits(logits, np.asarray(presence_labels, dtype=float))


def itm_loss(logits: Tensor, match_labels) -> Tensor:
    return ag.bce_with_logits(logits, np.asarray(match_labels, dtype=float))


class AuxTextEncoder:
    """Frozen snapshot of a text tower, used to embed OCR/sample texts.

    The snapshot is a deep copy whose tensors do not require grad, so no
    optimizer can reach it. Embeddings are memoised by text.
    """

    def __init__(self, text_tower: TextTransformer, tokenizer):
        self.tower = copy.deepcopy(text_tower)
        self.tower.freeze()
        self.tokenizer = tokenizer
        self._cache: dict[str, np.ndarray] = {}

    @classmethod
    def from_state(cls, cfg: ModelConfig, state, tokenizer) -> "AuxTextEncoder":
        tower = TextTransformer(cfg, np.random.default_rng(0))
        tower.load_state_dict(state)
        return cls(tower, tokenizer)

    def state_dict(self):
        return self.tower.state_dict()

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        """n x d_model matrix of pre-projection CLS states."""
        missing = [t for t in dict.fromkeys(texts) if t not in self._cache]
        for start in range(0, len(missing), 256):
            chunk = missing[start:start + 256]
            ids, mask = self.tokenizer.encode_batch(chunk)
            with ag.no_grad():
                h = self.tower.hidden(ids, mask).data
            for t, row in zip(chunk, h):
                self._cache[t] = row.copy()
        if not texts:
            return np.zeros((0, self.tower.cfg.d_model))
        return np.stack([self._cache[t] for t in texts])


def embed_sample_text(sample_text: str, aux_encoder: AuxTextEncoder) -> np.ndarray:
    """d_model vector for one sample text under the frozen auxiliary encoder."""
    return aux_encoder.embed([sample_text])[0]
