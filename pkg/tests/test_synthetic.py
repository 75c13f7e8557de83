import itertools

import numpy as np
import pytest

from coverclip.data import load_manifest
from coverclip.synthetic import (GLYPH, GRADE_MIX, STRIP_ROWS, TopicSpec, decode_strip, generate_corpus,
                                 generate_eval_set, glyph_table, load_generator_config, make_topics,
                                 read_jsonl, render_cover)


@pytest.fixture(scope="module")
def corpus_1000(tmp_path_factory):
    out = tmp_path_factory.mktemp("c1000")
    manifest = generate_corpus(1000, 32, 0.33, 7, out, resolution=32, n_heldout=1000)
    return out, manifest, read_jsonl(manifest)


def test_ocr_count_matches_fraction(corpus_1000):
    _, _, recs = corpus_1000
    train = [r for r in recs if r["split"] == "train"]
    n_ocr = sum(1 for r in train if r.get("ocr_text"))
    assert abs(n_ocr - 330) <= 30


def test_zero_ocr_fraction(tmp_path):
    recs = read_jsonl(generate_corpus(40, 4, 0.0, 1, tmp_path, resolution=32))
    assert not any(r.get("ocr_text") for r in recs)


def test_invalid_fraction(tmp_path):
    with pytest.raises(ValueError):
        generate_corpus(10, 4, 1.2, 0, tmp_path)


def test_same_seed_identical_bytes(tmp_path):
    a = generate_corpus(30, 4, 0.5, 11, tmp_path / "a", resolution=32)
    b = generate_corpus(30, 4, 0.5, 11, tmp_path / "b", resolution=32)
    assert a.read_bytes() == b.read_bytes()
    for name in ("t000000.png", "t000029.png"):
        assert (tmp_path / "a" / "images" / name).read_bytes() == (tmp_path / "b" / "images" / name).read_bytes()


def test_titles_and_strips_follow_construction(corpus_1000):
    out, _, recs = corpus_1000
    topics = {t["topic_id"]: t for t in load_generator_config(out)["topics"]}
    overlap = []
    for r in recs:
        toks = r["title_tokens"]
        assert 2 <= len(toks) <= 6
        assert set(toks) <= set(topics[r["topic"]]["vocab_slice"])
        assert r["title"] == "".join(toks)
        if r.get("ocr_text"):
            strip = r["ocr_text"].split()
            assert 1 <= len(strip) <= 4
            overlap.append(set(strip) <= set(toks))
    # strips are drawn from the title with probability 0.8
    assert abs(np.mean(overlap) - 0.8) < 0.06


def test_glyph_strip_decodes_exactly(corpus_1000):
    out, manifest, recs = corpus_1000
    gen = load_generator_config(out)
    glyphs = glyph_table(gen["vocabulary"])
    primaries = {t["topic_id"]: t["palette"][0] for t in gen["topics"]}
    samples = load_manifest(manifest, resolution=32)
    for s, r in zip(samples, recs):
        assert decode_strip(s.image, primaries[r["topic"]], glyphs) == (r.get("ocr_text") or "")


def test_glyph_table_is_bijection():
    words = [f"w{i:03d}" for i in range(300)]
    table = glyph_table(words)
    codes = {g.tobytes() for g in table.values()}
    assert len(codes) == len(words)
    assert all(g.shape == (GLYPH, GLYPH) and 8 <= g.sum() <= 17 for g in table.values())
    assert all(np.array_equal(table[w], glyph_table(words[::-1])[w]) for w in words[:5])


def test_strip_band_is_small():
    assert STRIP_ROWS / 32 <= 0.25


def test_topic_palettes_are_distinct():
    topics = make_topics(32, 5)
    prim = np.array([t.palette[0] for t in topics])
    for a, b in itertools.combinations(range(len(prim)), 2):
        assert np.abs(prim[a] - prim[b]).max() >= 0.15
    assert len({t.topic_id for t in topics}) == 32
    assert all(len(t.vocab_slice) == 8 for t in topics)
    vocab = [w for t in topics for w in t.vocab_slice]
    assert len(vocab) == len(set(vocab))


def test_mean_colour_probe_predicts_topic(corpus_1000):
    """Nearest-class-mean on the mean RGB of a cover (a linear rule) recovers its topic."""
    _, manifest, recs = corpus_1000
    samples = load_manifest(manifest, resolution=32)
    x = np.array([s.image.mean(axis=(0, 1)) for s in samples])
    y = np.array([r["topic"] for r in recs])
    fit, test = np.arange(len(y)) % 2 == 0, np.arange(len(y)) % 2 == 1
    classes = np.unique(y[fit])
    means = np.array([x[fit & (y == c)].mean(axis=0) for c in classes])
    pred = classes[np.argmin(((x[test][:, None, :] - means[None]) ** 2).sum(-1), axis=1)]
    assert np.mean(pred == y[test]) > 0.9


def test_render_requires_room_for_strip():
    topic = TopicSpec(0, [[0.1, 0.1, 0.1], [0.5, 0.5, 0.5], [0.9, 0.9, 0.9]], 3, ["a"])
    with pytest.raises(ValueError):
        render_cover(topic, 16, np.random.default_rng(0))


@pytest.fixture(scope="module")
def eval_set(corpus_1000):
    out, _, recs = corpus_1000
    gen = load_generator_config(out)
    held = [r for r in recs if r["split"] == "heldout"]
    records, skipped = generate_eval_set(held, gen["topics"], 200, 7)
    return records, skipped, {r["id"]: r for r in held}, gen


def test_eval_pools_and_grades(eval_set):
    records, _, by_id, gen = eval_set
    vocab_topic = {w: t["topic_id"] for t in gen["topics"] for w in t["vocab_slice"]}
    pools = {}
    for r in records:
        pools.setdefault(r["query_id"], []).append(r)
    assert len(pools) == 200
    for qid, items in pools.items():
        assert 5 <= len(items) <= 29
        qtoks = set(items[0]["query"].split())
        q_topic = {vocab_topic[w] for w in qtoks}
        assert len(q_topic) == 1 and 2 <= len(qtoks) <= 3
        q_topic = q_topic.pop()
        for it in items:
            src = by_id[it["id"]]
            if src["topic"] != q_topic:
                assert it["relevance"] == 0
            else:
                ov = len(qtoks & set(src["title_tokens"]))
                assert it["relevance"] == (2 if ov >= 2 else 1)
                assert ov >= 1
        assert len({it["id"] for it in items}) == len(items)


def test_grade_histogram_near_target(eval_set):
    records = eval_set[0]
    hist = np.bincount([r["relevance"] for r in records], minlength=3) / len(records)
    # GRADE_MIX is (strong, weak, irrelevant); histogram index is the grade
    target = np.array([GRADE_MIX[2], GRADE_MIX[1], GRADE_MIX[0]])
    assert np.abs(hist - target).max() <= 0.08


def test_unfillable_queries_are_skipped():
    corpus = [{"id": f"x{i}", "image_path": "p", "title": "ab", "topic": 0, "title_tokens": ["ab", "cd"]}
              for i in range(3)]
    topics = [TopicSpec(0, [[0, 0, 0]] * 3, 0, ["ab", "cd", "ef", "gh", "ij", "kl", "mn", "op"]),
              TopicSpec(1, [[1, 1, 1]] * 3, 0, ["qa", "qb", "qc", "qd", "qe", "qf", "qg", "qh"])]
    records, skipped = generate_eval_set(corpus, topics, 5, 0)
    assert records == [] and skipped > 0
