"""Manifests, title segmentation, tokenization and deterministic batching."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Protocol, Sequence

import numpy as np
from PIL import Image

from .autograd import ConfigError

log = logging.getLogger(__name__)

PAD, CLS, UNK = "[PAD]", "[CLS]", "[UNK]"
SPECIALS = (PAD, CLS, UNK)
DEFAULT_MAX_TEXT_LEN = 12
ITM_POSITIVE_RATE = 0.7


class ManifestError(ValueError):
    pass


@dataclass
class CoverSample:
    id: str
    image: np.ndarray | None
    title: str
    ocr_text: str | None = None
    presence: bool = False
    relevance: int | None = None
    query: str | None = None
    query_id: str | None = None
    topic: int | None = None
    split: str | None = None
    image_path: str | None = None

    def __post_init__(self):
        self.presence = bool(self.ocr_text)


# -- segmentation -------------------------------------------------------------

class SegmentationError(ValueError):
    pass


class Segmenter(Protocol):
    def __call__(self, text: str) -> list[str]: ...


class WhitespaceSegmenter:
    """Pass-through: the title is already split on whitespace."""

    def __call__(self, text: str) -> list[str]:
        return text.split()


class DictionarySegmenter:
    """Greedy longest-match segmentation against a fixed word list.

    Raises :class:`SegmentationError` when some position matches no word.
    """

    def __init__(self, words):
        self.words = frozenset(w for w in words if w)
        self.max_len = max((len(w) for w in self.words), default=0)

    def __call__(self, text: str) -> list[str]:
        out = []
        for chunk in text.split():
            i = 0
            while i < len(chunk):
                for n in range(min(self.max_len, len(chunk) - i), 0, -1):
                    if chunk[i:i + n] in self.words:
                        out.append(chunk[i:i + n])
                        i += n
                        break
                else:
                    raise SegmentationError(f"no dictionary word at {chunk[i:]!r}")
        return out


def segment_title(title: str, segmenter: Segmenter) -> str:
    """Split a title into lexical units joined by single spaces.

    Any segmenter failure falls back to the untouched title.
    """
    try:
        units = segmenter(title)
    except Exception:
        return title
    return " ".join(units)


# -- tokenizer ----------------------------------------------------------------

class Tokenizer:
    """Whitespace/character hybrid over a closed vocabulary.

    Whitespace-separated units found in the vocabulary map to one id; other
    units fall back to per-character ids, and unknown characters to [UNK].
    """

    def __init__(self, tokens: Sequence[str], max_text_len: int = DEFAULT_MAX_TEXT_LEN):
        tokens = list(tokens)
        if tuple(tokens[:3]) != SPECIALS:
            tokens = list(SPECIALS) + [t for t in tokens if t not in SPECIALS]
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}
        self.max_text_len = max_text_len
        self.pad_id, self.cls_id, self.unk_id = 0, 1, 2
        self._memo: dict[str, list[int]] = {}

    @classmethod
    def build(cls, texts, max_text_len: int = DEFAULT_MAX_TEXT_LEN) -> "Tokenizer":
        words, chars = set(), set()
        for t in texts:
            for unit in t.split():
                words.add(unit)
                chars.update(unit)
        return cls(list(SPECIALS) + sorted(words) + sorted(chars - words), max_text_len)

    @classmethod
    def load(cls, path, max_text_len: int = DEFAULT_MAX_TEXT_LEN) -> "Tokenizer":
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line.rstrip("\n")], max_text_len)

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def vocab_size(self) -> int:
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        hit = self._memo.get(text)
        if hit is not None:
            return list(hit)
        ids = [self.cls_id]
        for unit in text.split():
            if unit in self.index:
                ids.append(self.index[unit])
            else:
                ids.extend(self.index.get(ch, self.unk_id) for ch in unit)
            if len(ids) >= self.max_text_len:
                break
        ids = ids[:self.max_text_len]
        self._memo[text] = ids
        return list(ids)

    def encode_batch(self, texts: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
        """Padded ``b x max_text_len`` id matrix and matching 0/1 mask."""
        ids = np.full((len(texts), self.max_text_len), self.pad_id, dtype=np.int64)
        mask = np.zeros((len(texts), self.max_text_len))
        for i, t in enumerate(texts):
            seq = self.encode(t)
            ids[i, :len(seq)] = seq
            mask[i, :len(seq)] = 1.0
        return ids, mask


# -- manifests ----------------------------------------------------------------

def load_image(path, resolution: int) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (resolution, resolution):
            im = im.resize((resolution, resolution), Image.BILINEAR)
        return np.asarray(im, dtype=np.float64) / 255.0


def load_manifest(path, split: str | None = None, resolution: int = 64,
                  load_images: bool = True) -> list[CoverSample]:
    """Read a JSONL manifest; decode and resize every referenced image.

    Relative ``image_path`` values resolve against the manifest's directory.
    Lines carrying a ``split`` field are kept only if it equals ``split``.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    samples, missing = [], []
    cache: dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if not isinstance(rec, dict):
                    raise ValueError("line is not a JSON object")
                sid, image_path, title = rec["id"], rec["image_path"], rec["title"]
            except (ValueError, KeyError) as exc:
                raise ManifestError(f"{path}: malformed line {lineno}: {exc}") from None
            if split is not None and rec.get("split", split) != split:
                continue
            if ("query" in rec) != ("relevance" in rec):
                raise ManifestError(f"{path}: line {lineno}: query and relevance must appear together")
            full = Path(image_path) if os.path.isabs(image_path) else path.parent / image_path
            image = None
            if load_images:
                key = str(full)
                if key not in cache:
                    if not full.is_file():
                        missing.append(sid)
                        continue
                    cache[key] = load_image(full, resolution)
                image = cache[key]
            samples.append(CoverSample(
                id=str(sid), image=image, title=title, ocr_text=rec.get("ocr_text") or None,
                relevance=rec.get("relevance"), query=rec.get("query"),
                query_id=rec.get("query_id"), topic=rec.get("topic"), split=rec.get("split"),
                image_path=str(full)))
    if missing:
        raise FileNotFoundError(f"{path}: images missing for ids {sorted(set(missing))}")
    return samples


# -- batching -----------------------------------------------------------------

class NegativeSource(Protocol):
    def negative(self, sample: CoverSample, rng: np.random.Generator) -> tuple[str, str]:
        """Return ``(text, source)`` with source 'mined_negative' or 'random_negative'."""


@dataclass
class Batch:
    ids: list[str]
    images: np.ndarray
    title_ids: np.ndarray
    title_mask: np.ndarray
    presence: np.ndarray
    itm_texts: list[str] = field(default_factory=list)
    itm_labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    itm_sources: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)


def epoch_rngs(seed: int, epoch: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Shuffle and ITM-assignment generators, keyed by (seed, epoch) only."""
    return np.random.default_rng([seed, epoch, 0]), np.random.default_rng([seed, epoch, 1])


def assign_itm(samples: Sequence[CoverSample], rng: np.random.Generator,
               sampler: NegativeSource | None,
               positive_rate: float = ITM_POSITIVE_RATE) -> list[tuple[str, bool, str]]:
    """Per sample ``(text, match_label, source)``; OCR-free items only get negatives."""
    out = []
    for s in samples:
        u = rng.random()
        if s.presence and u < positive_rate:
            out.append((s.ocr_text, True, "positive"))
        elif sampler is None:
            out.append(("", False, "random_negative"))
        else:
            text, source = sampler.negative(s, rng)
            out.append((text, False, source))
    return out


def make_batches(samples: Sequence[CoverSample], batch_size: int, seed: int,
                 sampler: NegativeSource | None, tokenizer: Tokenizer,
                 segmenter: Segmenter | None = None, epoch: int = 0,
                 start_batch: int = 0, positive_rate: float = ITM_POSITIVE_RATE,
                 with_images: bool = True) -> Iterator[Batch]:
    """Yield the batches of one epoch in a fixed order keyed by (seed, epoch).

    A trailing batch with fewer than two items is dropped (the contrastive
    loss needs at least two). ``start_batch`` skips already-consumed batches
    without perturbing any random draw.
    """
    if batch_size < 2:
        raise ConfigError(f"batch_size must be >= 2 for the contrastive loss, got {batch_size}")
    segmenter = segmenter or WhitespaceSegmenter()
    shuffle_rng, itm_rng = epoch_rngs(seed, epoch)
    order = shuffle_rng.permutation(len(samples))
    ordered = [samples[i] for i in order]
    itm = assign_itm(ordered, itm_rng, sampler, positive_rate)
    n_batches = len(ordered) // batch_size + (1 if len(ordered) % batch_size >= 2 else 0)
    for bi in range(start_batch, n_batches):
        chunk = ordered[bi * batch_size:(bi + 1) * batch_size]
        titles = [segment_title(s.title, segmenter) for s in chunk]
        tids, tmask = tokenizer.encode_batch(titles)
        extra = itm[bi * batch_size:bi * batch_size + len(chunk)]
        yield Batch(
            ids=[s.id for s in chunk],
            images=np.stack([s.image for s in chunk]) if with_images else np.zeros((len(chunk), 0, 0, 3)),
            title_ids=tids, title_mask=tmask,
            presence=np.array([s.presence for s in chunk], dtype=bool),
            itm_texts=[e[0] for e in extra],
            itm_labels=np.array([e[1] for e in extra], dtype=bool),
            itm_sources=[e[2] for e in extra],
        )
