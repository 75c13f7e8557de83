import math
import zlib
from collections import Counter

import numpy as np
import pytest

from coverclip.data import CoverSample
from coverclip.hnsw import (EmptyIndexError, HnswIndex, HnswParams, NegativeSampler, build_index,
                            build_vector_index, exact_topk, mine_negative)


def unit_rows(n, d, seed):
    x = np.random.default_rng(seed).normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


@pytest.fixture(scope="module")
def index_2000():
    vecs = unit_rows(2000, 32, 0)
    return vecs, build_vector_index(vecs, HnswParams(M=16, ef_construction=100, seed=1))


def test_params_derived_values():
    p = HnswParams(M=16)
    assert p.M0 == 32
    assert p.mL == pytest.approx(1 / math.log(16))


def test_degree_bounds_and_reachability(index_2000):
    _, idx = index_2000
    assert idx.degree_ok()
    assert idx.reachable_from_entry() == len(idx)


def test_insertion_links_both_directions():
    """Each new node's neighbours link back to it, except a neighbour whose
    list overflowed its degree cap and was re-pruned."""
    idx = HnswIndex(8, HnswParams(M=4, ef_construction=20, seed=0))
    for v in unit_rows(300, 8, 2):
        before = [[len(ls) for ls in node] for node in idx.links]
        node = idx.add(v)
        for layer, nbrs in enumerate(idx.links[node]):
            cap = idx.params.M0 if layer == 0 else idx.params.M
            for n in nbrs:
                if before[n][layer] < cap:
                    assert node in idx.links[n][layer]
        assert idx.degree_ok()


def test_self_retrieval(index_2000):
    vecs, idx = index_2000
    for i in (0, 17, 1999):
        hit = idx.search(vecs[i], 1).hits[0]
        assert hit[0] == i
        assert abs(hit[1]) <= 1e-12


def test_full_beam_equals_exact_oracle():
    vecs = unit_rows(800, 16, 3)
    idx = build_vector_index(vecs, HnswParams(M=6, ef_construction=60, seed=0))
    q = unit_rows(5, 16, 4)
    for v in q:
        got = idx.search(v, len(vecs), len(vecs))
        exact = exact_topk(vecs, v, len(vecs))
        assert [i for i, _ in got.hits] == [i for i, _ in exact]
        assert not got.truncated


def test_truncated_flag():
    vecs = unit_rows(5, 4, 0)
    res = build_vector_index(vecs).search(vecs[0], 10)
    assert res.truncated and len(res.hits) == 5


def test_exact_topk_contract():
    vecs = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    assert exact_topk(vecs, np.array([1.0, 0.0]), 0) == []
    top = exact_topk(vecs, np.array([1.0, 0.0]), 2)
    assert [i for i, _ in top] == [0, 1]
    assert [d for _, d in top] == pytest.approx([0.0, 0.0])


def test_recall_small_corpus(index_2000):
    vecs, idx = index_2000
    rec = []
    for q in unit_rows(50, 32, 9):
        truth = {i for i, _ in exact_topk(vecs, q, 10)}
        rec.append(len(truth & {i for i, _ in idx.search(q, 10, 128).hits}) / 10)
    assert np.mean(rec) >= 0.95


def test_level_distribution_bound():
    idx = build_vector_index(unit_rows(1000, 8, 5), HnswParams(M=16, ef_construction=40, seed=2))
    assert idx.max_layer <= 12


def test_deterministic_graph():
    vecs = unit_rows(300, 8, 6)
    a = build_vector_index(vecs, HnswParams(M=6, seed=4))
    b = build_vector_index(vecs, HnswParams(M=6, seed=4))
    assert a.links == b.links and a.entry_point == b.entry_point


def test_empty_index_errors():
    with pytest.raises(EmptyIndexError):
        build_vector_index(np.zeros((0, 4)))
    with pytest.raises(EmptyIndexError):
        build_index([], lambda t: np.zeros((len(t), 4)))


def test_save_load_roundtrip(tmp_path):
    vecs = unit_rows(200, 8, 7)
    idx = build_vector_index(vecs, HnswParams(M=5, seed=3))
    idx.save(tmp_path / "i.hnsw", extra={"ids": [str(i) for i in range(200)]})
    again, extra = HnswIndex.load(tmp_path / "i.hnsw")
    assert extra["ids"][5] == "5"
    q = vecs[11]
    assert again.search(q, 5).hits == idx.search(q, 5).hits


# -- text index and mining ----------------------------------------------------

def hash_embed(texts):
    """Deterministic bag-of-words embedding: texts sharing words are close."""
    out = np.zeros((len(texts), 24))
    for r, t in enumerate(texts):
        for w in t.split():
            out[r] += np.random.default_rng(zlib.crc32(w.encode())).normal(size=24)
        out[r] += 1e-3 * np.random.default_rng(len(t)).normal(size=24)
    return out


WORDS = [f"w{i}" for i in range(40)]


def random_texts(n, seed):
    rng = np.random.default_rng(seed)
    return [(f"id{i:05d}", " ".join(rng.choice(WORDS, int(rng.integers(1, 4)), replace=False)))
            for i in range(n)]


def test_duplicates_share_one_node():
    ti = build_index([("b", "ab ab"), ("a", "ab ab"), ("c", "cd")], hash_embed)
    assert len(ti) == 2
    assert ti.ids[ti.node_of["ab ab"]] == ["a", "b"]


def test_two_texts_forced_choice():
    ti = build_index([("a", "x"), ("b", "y")], hash_embed)
    s = NegativeSampler(ti, hash_embed, k=10)
    rng = np.random.default_rng(0)
    assert {s.mine("a", "x", rng).negative_text for _ in range(5)} == {"y"}


@pytest.fixture(scope="module")
def sampler():
    texts = random_texts(600, 1)
    ti = build_index(texts, hash_embed, HnswParams(M=8, ef_construction=64, seed=0))
    return texts, NegativeSampler(ti, hash_embed, k=10)


def test_mined_negative_never_equals_anchor(sampler):
    texts, s = sampler
    rng = np.random.default_rng(2)
    for sid, text in texts:
        neg = s.mine(sid, text, rng)
        assert neg.negative_text != text
        assert 0 <= neg.rank_in_topk <= 10


def test_rank_histogram_uniform(sampler):
    texts, s = sampler
    rng = np.random.default_rng(3)
    ranks = Counter()
    for i in range(10_000):
        sid, text = texts[i % len(texts)]
        ranks[s.mine(sid, text, rng).rank_in_topk] += 1
    n = sum(v for r, v in ranks.items() if r > 0)
    for r in range(1, 11):
        assert 0.05 <= ranks[r] / n <= 0.2


def test_negatives_are_nearer_than_random(sampler):
    texts, s = sampler
    rng = np.random.default_rng(4)
    emb = {t: v / np.linalg.norm(v) for (_, t), v in zip(texts, hash_embed([t for _, t in texts]))}
    mined, rand = [], []
    for sid, text in texts[:200]:
        mined.append(emb[text] @ emb[s.mine(sid, text, rng).negative_text])
        rand.append(emb[text] @ emb[s.random_text(rng, exclude=text)])
    assert np.mean(mined) > np.mean(rand) + 0.2


def test_ocr_free_sample_gets_random_negative(sampler):
    _, s = sampler
    sample = CoverSample(id="z", image=None, title="t")
    text, source = s.negative(sample, np.random.default_rng(0))
    assert source == "random_negative" and text in s.text_index.node_of
    with pytest.raises(ValueError):
        mine_negative(s, sample, np.random.default_rng(0))


def test_fallback_when_all_candidates_are_the_anchor():
    ti = build_index([("a", "same")] * 1 + [("b", "other")], hash_embed)
    s = NegativeSampler(ti, hash_embed, k=1)
    s._topk["same"] = []
    neg = s.mine("a", "same", np.random.default_rng(0))
    assert neg.rank_in_topk == 0 and neg.negative_text == "other" and s.fallbacks == 1
