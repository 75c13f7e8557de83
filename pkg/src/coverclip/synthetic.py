"""Procedural cover-image corpora with exact OCR and relevance ground truth.

Each topic owns a palette and a small word list. A cover is a palette
layout; with probability ``ocr_fraction`` it also carries a glyph strip in
its top patch row, one 5x5 binary glyph per token, so the rendered text can
be decoded exactly. Titles are token concatenations without separators and
need a segmenter to split them back.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

CONSONANTS = "bdfgklmnprstvz"
VOWELS = "aeiou"
WORDS_PER_TOPIC = 8
GLYPH = 5
STRIP_ROWS = 8          # top patch row; glyph slot i spans columns [8i, 8i+8)
MAX_STRIP_TOKENS = 4
STRIP_OVERLAP_P = 0.8
GRADE_MIX = (0.2974, 0.3080, 0.3946)   # strong, weak, irrelevant
POOL_RANGE = (5, 30)
GLYPH_TABLE_SEED = 20240101


@dataclass
class TopicSpec:
    topic_id: int
    palette: list[list[float]]
    layout_seed: int
    vocab_slice: list[str]


def _syllables() -> list[str]:
    return [c + v for c in CONSONANTS for v in VOWELS]


def make_topics(n_topics: int, seed: int) -> list[TopicSpec]:
    """Topics with distinct primary colours on a 0.2-spaced RGB grid."""
    if n_topics < 2:
        raise ValueError("n_topics must be >= 2")
    rng = np.random.default_rng([seed, 101])
    levels = np.array([0.1, 0.3, 0.5, 0.7, 0.9])
    grid = np.array([[r, g, b] for r in levels for g in levels for b in levels])
    if n_topics > len(grid):
        raise ValueError(f"at most {len(grid)} topics supported")
    primaries = grid[rng.permutation(len(grid))[:n_topics]]
    syl = _syllables()
    words = [a + b for a in syl for b in syl]
    picked = rng.choice(len(words), size=n_topics * WORDS_PER_TOPIC, replace=False)
    topics = []
    for t in range(n_topics):
        others = rng.uniform(0.0, 1.0, size=(2, 3))
        palette = [primaries[t].round(3).tolist()] + others.round(3).tolist()
        vocab = sorted(words[i] for i in picked[t * WORDS_PER_TOPIC:(t + 1) * WORDS_PER_TOPIC])
        topics.append(TopicSpec(t, palette, int(rng.integers(0, 2**31 - 1)), vocab))
    return topics


def glyph_table(tokens: Sequence[str]) -> dict[str, np.ndarray]:
    """Fixed bijection token -> 5x5 binary pattern (8..17 cells lit)."""
    rng = np.random.default_rng(GLYPH_TABLE_SEED)
    seen, table = set(), {}
    for tok in sorted(tokens):
        while True:
            bits = rng.random(GLYPH * GLYPH) < 0.5
            code = int(np.packbits(np.append(bits, np.zeros(7, bool))).view(">u4")[0])
            if 8 <= bits.sum() <= 17 and code not in seen:
                seen.add(code)
                table[tok] = bits.reshape(GLYPH, GLYPH)
                break
    return table


def ink_colour(primary) -> float:
    return 0.0 if float(np.mean(primary)) > 0.5 else 1.0


def render_cover(topic: TopicSpec, resolution: int, rng: np.random.Generator,
                 strip_tokens: Sequence[str] = (), glyphs: dict | None = None) -> np.ndarray:
    """H x W x 3 float image in [0, 1]."""
    if resolution < 32:
        raise ValueError("resolution must be >= 32 to hold the glyph strip")
    pal = np.asarray(topic.palette)
    img = np.empty((resolution, resolution, 3))
    img[:] = pal[0]
    lay = np.random.default_rng(topic.layout_seed)
    # two accent blocks below the strip band; per-sample jitter of a few pixels
    for colour in pal[1:]:
        h, w = (lay.integers(resolution // 8, resolution // 4, size=2))
        y0 = lay.integers(STRIP_ROWS, resolution - h) + rng.integers(-2, 3)
        x0 = lay.integers(0, resolution - w) + rng.integers(-2, 3)
        y0 = int(np.clip(y0, STRIP_ROWS, resolution - h))
        x0 = int(np.clip(x0, 0, resolution - w))
        img[y0:y0 + h, x0:x0 + w] = colour
    img += rng.normal(0.0, 0.015, size=img.shape)
    if strip_tokens:
        ink = ink_colour(pal[0])
        for i, tok in enumerate(strip_tokens):
            cells = glyphs[tok]
            ys, xs = np.nonzero(cells)
            img[1 + ys, 8 * i + 1 + xs] = ink
    return np.clip(img, 0.0, 1.0)


def decode_strip(image: np.ndarray, primary, glyphs: dict[str, np.ndarray]) -> str:
    """Read the glyph strip back into text ('' when the cover has none)."""
    ink = ink_colour(primary)
    bg = float(np.mean(primary))
    inverse = {g.tobytes(): tok for tok, g in glyphs.items()}
    out = []
    for i in range(MAX_STRIP_TOKENS):
        cell = image[1:1 + GLYPH, 8 * i + 1:8 * i + 1 + GLYPH].mean(axis=-1)
        bits = np.abs(cell - ink) < np.abs(cell - bg)
        if not bits.any():
            break
        tok = inverse.get(bits.tobytes())
        if tok is None:
            raise ValueError(f"undecodable glyph in slot {i}")
        out.append(tok)
    return " ".join(out)


def _to_png(img: np.ndarray, path: Path) -> None:
    Image.fromarray(np.round(img * 255.0).astype(np.uint8), mode="RGB").save(path, optimize=False)


def _sample_record(idx: int, topic: TopicSpec, rng: np.random.Generator, with_ocr: bool):
    n_title = int(rng.integers(2, 7))
    title = [topic.vocab_slice[i] for i in sorted(rng.choice(WORDS_PER_TOPIC, n_title, replace=False))]
    rng.shuffle(title)
    strip: list[str] = []
    if with_ocr:
        k = int(rng.integers(1, MAX_STRIP_TOKENS + 1))
        if rng.random() < STRIP_OVERLAP_P:
            pool = list(title)
        else:
            pool = [w for w in topic.vocab_slice if w not in title]
        strip = [pool[i] for i in rng.choice(len(pool), min(k, len(pool)), replace=False)]
    return title, strip


def generate_corpus(n_samples: int, n_topics: int, ocr_fraction: float, seed: int,
                    out_dir, resolution: int = 64, n_heldout: int = 0) -> Path:
    """Write PNG covers plus ``corpus.jsonl`` and ``generator_config.json``.

    Exactly ``round(n * ocr_fraction)`` covers of each split carry a glyph
    strip. Held-out samples share the topics but use a separate RNG stream.
    """
    if not 0.0 <= ocr_fraction <= 1.0:
        raise ValueError(f"ocr_fraction must lie in [0, 1], got {ocr_fraction}")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    topics = make_topics(n_topics, seed)
    vocab = sorted(w for t in topics for w in t.vocab_slice)
    glyphs = glyph_table(vocab)
    lines = []
    for split, n, stream in (("train", n_samples, 1), ("heldout", n_heldout, 2)):
        rng = np.random.default_rng([seed, stream])
        n_ocr = int(round(n * ocr_fraction))
        has_ocr = np.zeros(n, dtype=bool)
        has_ocr[rng.permutation(n)[:n_ocr]] = True
        for i in range(n):
            topic = topics[int(rng.integers(0, n_topics))]
            title, strip = _sample_record(i, topic, rng, bool(has_ocr[i]))
            img = render_cover(topic, resolution, rng, strip, glyphs)
            sid = f"{split[0]}{i:06d}"
            rel = f"images/{sid}.png"
            _to_png(img, out / rel)
            rec = {"id": sid, "image_path": rel, "title": "".join(title), "split": split,
                   "topic": topic.topic_id, "title_tokens": title}
            if strip:
                rec["ocr_text"] = " ".join(strip)
            lines.append(json.dumps(rec, sort_keys=True))
    manifest = out / "corpus.jsonl"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    sidecar = {
        "generator": "coverclip.synthetic.generate_corpus",
        "n_samples": n_samples, "n_heldout": n_heldout, "n_topics": n_topics,
        "ocr_fraction": ocr_fraction, "seed": seed, "resolution": resolution,
        "topics": [asdict(t) for t in topics], "vocabulary": vocab,
    }
    (out / "generator_config.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True), encoding="utf-8")
    return manifest


def load_generator_config(out_dir) -> dict:
    return json.loads((Path(out_dir) / "generator_config.json").read_text(encoding="utf-8"))


def generate_eval_set(corpus: Sequence[dict], topics: Sequence[TopicSpec] | Sequence[dict],
                      n_queries: int, seed: int, out_path=None) -> tuple[list[dict], int]:
    """Build graded query pools from corpus records (dicts as in ``corpus.jsonl``).

    Grades: 2 = same topic with >= 2 title tokens in common with the query,
    1 = same topic with exactly one, 0 = different topic. Pool sizes are
    drawn from [5, 30) and split across grades by a multinomial on
    ``GRADE_MIX``. A query whose pool cannot be filled is skipped and
    counted. Returns ``(records, skipped)``.
    """
    topics = [t if isinstance(t, TopicSpec) else TopicSpec(**t) for t in topics]
    rng = np.random.default_rng([seed, 303])
    by_topic: dict[int, list[dict]] = {}
    for rec in corpus:
        by_topic.setdefault(rec["topic"], []).append(rec)
    records, skipped, qn = [], 0, 0
    attempts = 0
    while qn < n_queries and attempts < 20 * n_queries:
        attempts += 1
        topic = topics[int(rng.integers(0, len(topics)))]
        q_len = int(rng.integers(2, 4))
        query = [topic.vocab_slice[i] for i in rng.choice(WORDS_PER_TOPIC, q_len, replace=False)]
        qset = set(query)
        same = by_topic.get(topic.topic_id, [])
        strong = [r for r in same if len(qset & set(r["title_tokens"])) >= 2]
        weak = [r for r in same if len(qset & set(r["title_tokens"])) == 1]
        other = [r for t, rs in sorted(by_topic.items()) if t != topic.topic_id for r in rs]
        size = int(rng.integers(*POOL_RANGE))
        counts = rng.multinomial(size, GRADE_MIX)
        if counts[0] > len(strong) or counts[1] > len(weak) or counts[2] > len(other):
            skipped += 1
            continue
        pool = []
        for grade, group, c in ((2, strong, counts[0]), (1, weak, counts[1]), (0, other, counts[2])):
            for i in rng.choice(len(group), int(c), replace=False):
                pool.append((group[int(i)], grade))
        qid = f"q{qn:05d}"
        for j in rng.permutation(len(pool)):
            item, grade = pool[int(j)]
            rec = {"query_id": qid, "query": " ".join(query), "relevance": grade,
                   "id": item["id"], "image_path": item["image_path"], "title": item["title"],
                   "topic": item["topic"]}
            if item.get("ocr_text"):
                rec["ocr_text"] = item["ocr_text"]
            records.append(rec)
        qn += 1
    if skipped:
        log.warning("generate_eval_set: skipped %d queries with unfillable pools", skipped)
    if out_path is not None:
        Path(out_path).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records),
                                  encoding="utf-8")
    return records, skipped


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
