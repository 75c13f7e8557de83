"""Score graded query pools with the dual encoder and report ranking metrics.

Only the encoders take part in retrieval; guidance heads are never loaded.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .checkpoint import load_checkpoint
from .data import CoverSample, Tokenizer, load_manifest
from .encoders import DualEncoder, ModelConfig
from .metrics import MetricReport, QueryGroup, compute_report

log = logging.getLogger(__name__)


def embed_images(encoder: DualEncoder, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
    out = []
    with ag.no_grad():
        for i in range(0, len(images), batch_size):
            out.append(encoder.encode_image(images[i:i + batch_size]).embedding.data)
    return np.concatenate(out) if out else np.zeros((0, encoder.cfg.d_proj))


def embed_texts(encoder: DualEncoder, tokenizer: Tokenizer, texts: Sequence[str],
                batch_size: int = 256) -> np.ndarray:
    out = []
    with ag.no_grad():
        for i in range(0, len(texts), batch_size):
            ids, mask = tokenizer.encode_batch(texts[i:i + batch_size])
            out.append(encoder.encode_text(ids, mask).data)
    return np.concatenate(out) if out else np.zeros((0, encoder.cfg.d_proj))


def score_groups(encoder: DualEncoder, tokenizer: Tokenizer, samples: Sequence[CoverSample],
                 batch_size: int = 128) -> list[QueryGroup]:
    """One :class:`QueryGroup` per query, scored by cosine similarity.

    Each distinct image is encoded once even when it appears in many pools.
    Query strings go to the tokenizer as is.
    """
    keys, index_of, images = [], {}, []
    for s in samples:
        key = s.image_path or s.id
        if key not in index_of:
            index_of[key] = len(images)
            images.append(s.image)
        keys.append(index_of[key])
    img = embed_images(encoder, np.stack(images), batch_size) if images else None

    by_query: dict[str, list[int]] = {}
    for i, s in enumerate(samples):
        if s.query is None or s.relevance is None:
            raise ValueError(f"sample {s.id} has no query/relevance annotation")
        by_query.setdefault(s.query_id or s.query, []).append(i)
    qids = sorted(by_query)
    queries = [samples[by_query[q][0]].query for q in qids]
    txt = embed_texts(encoder, tokenizer, queries)

    groups = []
    for qi, q in enumerate(qids):
        idx = by_query[q]
        scores = img[[keys[i] for i in idx]] @ txt[qi]
        groups.append(QueryGroup(
            query=queries[qi], item_ids=[samples[i].id for i in idx],
            grades=[samples[i].relevance for i in idx], scores=scores,
            presence=[samples[i].presence for i in idx]))
    return groups


def evaluate_model(encoder: DualEncoder, tokenizer: Tokenizer, samples: Sequence[CoverSample],
                   batch_size: int = 128, map_min_grade: int = 1) -> MetricReport:
    return compute_report(score_groups(encoder, tokenizer, samples, batch_size), map_min_grade)


def load_encoder(checkpoint) -> tuple[DualEncoder, Tokenizer, dict]:
    """Rebuild the dual encoder and tokenizer from the ``encoders`` section only."""
    header, arrays = load_checkpoint(checkpoint, sections=("encoders",))
    cfg = ModelConfig.from_dict(header["model_config"])
    encoder = DualEncoder(cfg)
    encoder.load_state_dict(arrays["encoders"])
    tokenizer = Tokenizer(header["meta"]["vocab"], cfg.max_text_len)
    return encoder, tokenizer, header


def evaluate(checkpoint, eval_manifest, batch_size: int = 128, map_min_grade: int = 1) -> MetricReport:
    encoder, tokenizer, _ = load_encoder(checkpoint)
    samples = load_manifest(Path(eval_manifest), resolution=encoder.cfg.image_resolution)
    report = evaluate_model(encoder, tokenizer, samples, batch_size, map_min_grade)
    log.info("evaluated %s on %d queries: PNR %.4f", checkpoint, report.n_queries, report.pnr)
    return report
