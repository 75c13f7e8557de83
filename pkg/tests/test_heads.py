import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coverclip import autograd as ag
from coverclip.autograd import ShapeError, Tensor
from coverclip.data import Tokenizer
from coverclip.encoders import DualEncoder
from coverclip.heads import (AuxTextEncoder, PresenceHead, SemanticHead, embed_sample_text, ic_forward,
                             ic_loss, itm_forward, itm_loss)


@pytest.fixture
def setup(tiny_cfg, images):
    enc = DualEncoder(tiny_cfg, seed=0)
    return enc, enc.encode_image(images(3, 16))


def test_ic_loss_values():
    assert float(ic_loss(Tensor([0.0, 0.0]), [True, False]).data) == pytest.approx(math.log(2), abs=1e-12)
    assert float(ic_loss(Tensor([20.0]), [True]).data) < 1e-8
    # mean of log(1 + e^-1) over two items
    assert float(ic_loss(Tensor([1.0, -1.0]), [True, False]).data) == pytest.approx(0.3133, abs=1e-4)


def test_itm_loss_values():
    assert float(itm_loss(Tensor([0.0]), [False]).data) == pytest.approx(math.log(2), abs=1e-12)
    assert float(itm_loss(Tensor([30.0, -30.0]), [True, False]).data) < 1e-6
    assert float(itm_loss(Tensor([2.0, -2.0]), [True, False]).data) == pytest.approx(0.1269, abs=1e-4)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-30, 30), st.booleans()), min_size=1, max_size=8))
def test_bce_label_flip_equals_logit_negation(pairs):
    z = np.array([p[0] for p in pairs])
    y = np.array([p[1] for p in pairs])
    a = float(ic_loss(Tensor(z), ~y).data)
    b = float(ic_loss(Tensor(-z), y).data)
    assert a == pytest.approx(b, rel=1e-12, abs=1e-15)


def test_presence_head_shapes_and_duplicates(tiny_cfg, images):
    enc = DualEncoder(tiny_cfg)
    x = images(1, 16)
    out = enc.encode_image(np.concatenate([x, x, images(1, 16, seed=5)]))
    logits = ic_forward(PresenceHead(tiny_cfg), out.tokens).data
    assert logits.shape == (3,) and np.isfinite(logits).all()
    assert logits[0] == logits[1]


def test_presence_head_rejects_wrong_width(tiny_cfg):
    with pytest.raises(ShapeError):
        PresenceHead(tiny_cfg)(Tensor(np.zeros((2, 5, tiny_cfg.d_model + 1))))


def test_ic_gradient_reaches_vision_tower(tiny_cfg, images):
    enc = DualEncoder(tiny_cfg)
    head = PresenceHead(tiny_cfg)
    ic_loss(head(enc.encode_image(images(4, 16)).tokens), [True, False, True, False]).backward()
    assert np.abs(enc.vision.patch_embed.weight.grad).sum() > 0
    assert enc.text.tok.grad is None


def test_itm_gradient_reaches_patch_embedding(tiny_cfg, images):
    enc = DualEncoder(tiny_cfg)
    head = SemanticHead(tiny_cfg)
    emb = np.random.default_rng(0).normal(size=(2, tiny_cfg.d_model))
    itm_loss(itm_forward(head, enc.encode_image(images(2, 16)).tokens, emb), [True, False]).backward()
    assert np.abs(enc.vision.patch_embed.weight.grad).sum() > 0


def test_itm_zero_embedding_is_finite(setup, tiny_cfg):
    _, vis = setup
    out = SemanticHead(tiny_cfg)(vis.tokens, np.zeros((3, tiny_cfg.d_model))).data
    assert np.isfinite(out).all()


def test_itm_shape_mismatch(setup, tiny_cfg):
    _, vis = setup
    with pytest.raises(ShapeError):
        SemanticHead(tiny_cfg)(vis.tokens, np.zeros((2, tiny_cfg.d_model)))


def test_itm_permutation_equivariance(setup, tiny_cfg):
    _, vis = setup
    head = SemanticHead(tiny_cfg)
    emb = np.random.default_rng(1).normal(size=(3, tiny_cfg.d_model))
    perm = np.array([2, 0, 1])
    base = head(vis.tokens, emb).data
    permuted = head(Tensor(vis.tokens.data[perm]), emb[perm]).data
    np.testing.assert_allclose(permuted, base[perm], rtol=1e-12, atol=1e-14)


def test_semantic_head_reads_tokens_without_modifying_them(setup, tiny_cfg):
    _, vis = setup
    before = vis.tokens.data.copy()
    SemanticHead(tiny_cfg)(vis.tokens, np.ones((3, tiny_cfg.d_model)))
    assert np.array_equal(vis.tokens.data, before)


def _aux(tiny_cfg):
    tok = Tokenizer(["a", "b", "c"], tiny_cfg.max_text_len)
    enc = DualEncoder(tiny_cfg, seed=3)
    return enc, AuxTextEncoder(enc.text, tok)


def test_aux_encoder_is_frozen_snapshot(tiny_cfg):
    enc, aux = _aux(tiny_cfg)
    v1 = embed_sample_text("a b", aux).copy()
    assert v1.shape == (tiny_cfg.d_model,)
    assert np.array_equal(embed_sample_text("a b", aux), v1)
    assert aux.tower.parameters() == []
    # mutating the live tower leaves the snapshot untouched
    for p in enc.text.parameters():
        p.data += 1.0
    aux._cache.clear()
    assert np.array_equal(embed_sample_text("a b", aux), v1)


def test_aux_empty_text_is_finite(tiny_cfg):
    _, aux = _aux(tiny_cfg)
    assert np.isfinite(embed_sample_text("", aux)).all()
    assert aux.embed([]).shape == (0, tiny_cfg.d_model)


def test_aux_batched_matches_single(tiny_cfg):
    _, aux = _aux(tiny_cfg)
    texts = ["a", "b c", "c a b", "a"]
    batch = aux.embed(texts)
    for t, row in zip(texts, batch):
        np.testing.assert_allclose(AuxTextEncoder(aux.tower, aux.tokenizer).embed([t])[0], row,
                                   rtol=1e-12, atol=1e-13)
