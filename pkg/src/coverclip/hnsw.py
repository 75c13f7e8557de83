"""Hierarchical navigable small-world graph over unit vectors (cosine distance),
an exact linear-scan oracle, and the hard-negative policy built on both.

Construction follows Malkov & Yashunin: exponentially distributed node
levels with multiplier ``1/ln(M)``, greedy descent through the upper layers,
a best-first beam of width ``ef_construction`` on each layer the node joins,
and the distance-diversity heuristic for choosing and pruning links.
"""

from __future__ import annotations

import heapq
import json
import math
import struct
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

MAGIC = b"CCLPHNSW"


class EmptyIndexError(ValueError):
    pass


@dataclass
class HnswParams:
    M: int = 16
    ef_construction: int = 200
    ef_search: int = 128
    seed: int = 0
    keep_pruned: bool = False

    @property
    def M0(self) -> int:
        return 2 * self.M

    @property
    def mL(self) -> float:
        return 1.0 / math.log(self.M)


class SearchResult(NamedTuple):
    hits: list[tuple[int, float]]
    truncated: bool


def _unit(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(n, 1e-12)


class HnswIndex:
    def __init__(self, dim: int, params: HnswParams | None = None, capacity: int = 1024):
        self.dim = dim
        self.params = params or HnswParams()
        self._rng = np.random.default_rng(self.params.seed)
        self._vectors = np.zeros((capacity, dim))
        self.levels: list[int] = []
        self.links: list[list[list[int]]] = []   # node -> layer -> neighbour ids
        self.entry_point: int | None = None
        self.max_layer = -1

    def __len__(self) -> int:
        return len(self.levels)

    @property
    def vectors(self) -> np.ndarray:
        return self._vectors[:len(self)]

    # -- distances ------------------------------------------------------------
    def _dist(self, q: np.ndarray, ids) -> np.ndarray:
        return 1.0 - self._vectors[ids] @ q

    # -- core routines --------------------------------------------------------
    def _search_layer(self, q: np.ndarray, entries: list[tuple[float, int]], ef: int,
                      layer: int) -> list[tuple[float, int]]:
        """Best-first beam search; returns up to ``ef`` (dist, id) sorted ascending."""
        visited = {i for _, i in entries}
        cand = list(entries)
        heapq.heapify(cand)
        best = [(-d, -i) for d, i in entries]     # max-heap on (dist, id)
        heapq.heapify(best)
        while len(best) > ef:
            heapq.heappop(best)
        links = self.links
        while cand:
            d, c = heapq.heappop(cand)
            worst = -best[0][0]
            if d > worst and len(best) >= ef:
                break
            fresh = [n for n in links[c][layer] if n not in visited]
            if not fresh:
                continue
            visited.update(fresh)
            dists = self._dist(q, fresh)
            for dn, n in zip(dists.tolist(), fresh):
                if len(best) < ef or (dn, n) < (-best[0][0], -best[0][1]):
                    heapq.heappush(cand, (dn, n))
                    heapq.heappush(best, (-dn, -n))
                    if len(best) > ef:
                        heapq.heappop(best)
        return sorted((-d, -i) for d, i in best)

    def _select(self, base: np.ndarray, cands: list[tuple[float, int]], m: int) -> list[int]:
        """Diversity heuristic: keep a candidate only if it is closer to the
        base than to every neighbour already kept. With ``keep_pruned`` the
        discarded candidates backfill any remaining slots, nearest first."""
        kept: list[int] = []
        pruned: list[int] = []
        for d, c in cands:
            if len(kept) >= m:
                break
            if kept:
                to_kept = 1.0 - self._vectors[kept] @ self._vectors[c]
                if np.any(to_kept < d):
                    pruned.append(c)
                    continue
            kept.append(c)
        if self.params.keep_pruned and len(kept) < m:
            kept.extend(pruned[:m - len(kept)])
        return kept

    def _shrink(self, node: int, layer: int) -> None:
        cap = self.params.M0 if layer == 0 else self.params.M
        nbrs = self.links[node][layer]
        if len(nbrs) <= cap:
            return
        d = self._dist(self._vectors[node], nbrs)
        ranked = sorted(zip(d.tolist(), nbrs))
        self.links[node][layer] = self._select(self._vectors[node], ranked, cap)

    def add(self, vector) -> int:
        q = _unit(vector)
        if q.shape != (self.dim,):
            raise ValueError(f"vector of dim {q.shape} does not match index dim {self.dim}")
        node = len(self)
        if node == self._vectors.shape[0]:
            grown = np.zeros((2 * node, self.dim))
            grown[:node] = self._vectors
            self._vectors = grown
        self._vectors[node] = q
        level = int(-math.log(1.0 - self._rng.random()) * self.params.mL)
        self.levels.append(level)
        self.links.append([[] for _ in range(level + 1)])
        if self.entry_point is None:
            self.entry_point, self.max_layer = node, level
            return node
        ep = self.entry_point
        eps = [(float(self._dist(q, [ep])[0]), ep)]
        for layer in range(self.max_layer, level, -1):
            eps = self._search_layer(q, eps, 1, layer)
        for layer in range(min(level, self.max_layer), -1, -1):
            found = self._search_layer(q, eps, self.params.ef_construction, layer)
            nbrs = self._select(q, found, self.params.M)
            self.links[node][layer] = list(nbrs)
            for n in nbrs:
                self.links[n][layer].append(node)
                self._shrink(n, layer)
            eps = found
        if level > self.max_layer:
            self.entry_point, self.max_layer = node, level
        return node

    def search(self, query_vec, k: int, ef_search: int | None = None) -> SearchResult:
        """Approximate top-k as ascending (id, cosine distance); ``truncated``
        is set when ``k`` exceeds the index size."""
        if len(self) == 0:
            raise EmptyIndexError("search on an empty index")
        ef = max(ef_search or self.params.ef_search, k)
        truncated = k > len(self)
        k = min(k, len(self))
        q = _unit(query_vec)
        ep = self.entry_point
        eps = [(float(self._dist(q, [ep])[0]), ep)]
        for layer in range(self.max_layer, 0, -1):
            eps = self._search_layer(q, eps, 1, layer)
        found = self._search_layer(q, eps, ef, 0)
        return SearchResult([(i, d) for d, i in found[:k]], truncated)

    # -- checks ---------------------------------------------------------------
    def degree_ok(self) -> bool:
        p = self.params
        return all(len(ls) <= (p.M0 if layer == 0 else p.M)
                   for node in self.links for layer, ls in enumerate(node))

    def reachable_from_entry(self) -> int:
        if self.entry_point is None:
            return 0
        seen = {self.entry_point}
        frontier = deque([self.entry_point])
        while frontier:
            for n in self.links[frontier.popleft()][0]:
                if n not in seen:
                    seen.add(n)
                    frontier.append(n)
        return len(seen)

    # -- persistence ----------------------------------------------------------
    def save(self, path, extra: dict | None = None) -> None:
        header = {"params": asdict(self.params), "count": len(self), "dim": self.dim,
                  "entry_point": self.entry_point, "max_layer": self.max_layer,
                  "levels": self.levels, "links": self.links, "extra": extra or {}}
        raw = json.dumps(header).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(MAGIC + struct.pack("<Q", len(raw)) + raw)
            fh.write(np.ascontiguousarray(self.vectors, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> tuple["HnswIndex", dict]:
        with open(path, "rb") as fh:
            if fh.read(8) != MAGIC:
                raise ValueError(f"{path}: not an HNSW index file")
            (n,) = struct.unpack("<Q", fh.read(8))
            h = json.loads(fh.read(n).decode("utf-8"))
            vecs = np.frombuffer(fh.read(), dtype="<f8").reshape(h["count"], h["dim"])
        idx = cls(h["dim"], HnswParams(**h["params"]), capacity=max(1, h["count"]))
        idx._vectors[:h["count"]] = vecs
        idx.levels, idx.links = h["levels"], h["links"]
        idx.entry_point, idx.max_layer = h["entry_point"], h["max_layer"]
        return idx, h["extra"]


def build_vector_index(vectors: np.ndarray, params: HnswParams | None = None) -> HnswIndex:
    vectors = np.asarray(vectors, dtype=np.float64)
    if len(vectors) == 0:
        raise EmptyIndexError("cannot build an index from zero vectors")
    idx = HnswIndex(vectors.shape[1], params, capacity=len(vectors))
    for v in vectors:
        idx.add(v)
    return idx


def exact_topk(vectors: np.ndarray, query_vec, k: int) -> list[tuple[int, float]]:
    """Linear scan; ascending cosine distance, ties broken by lower id."""
    if k <= 0 or len(vectors) == 0:
        return []
    d = 1.0 - _unit(vectors) @ _unit(query_vec)
    order = np.lexsort((np.arange(len(d)), d))[:k]
    return [(int(i), float(d[i])) for i in order]


# -- text index and negative mining ---------------------------------------------

@dataclass
class TextIndex:
    """HNSW over deduplicated texts; node ``n`` holds ``texts[n]`` shared by ``ids[n]``."""

    index: HnswIndex
    texts: list[str]
    ids: list[list[str]]
    node_of: dict[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.texts)


def build_index(texts: Sequence[tuple[str, str]], embed: Callable[[list[str]], np.ndarray],
                params: HnswParams | None = None) -> TextIndex:
    """Index ``(id, text)`` pairs. Identical strings share one node; nodes are
    inserted in order of their smallest id."""
    if not texts:
        raise EmptyIndexError("no texts to index")
    groups: dict[str, list[str]] = {}
    for sid, text in sorted(texts, key=lambda p: p[0]):
        groups.setdefault(text, []).append(sid)
    uniq = list(groups)        # dict order == order of first (smallest) id
    vecs = embed(uniq)
    idx = build_vector_index(vecs, params)
    return TextIndex(idx, uniq, [groups[t] for t in uniq], {t: i for i, t in enumerate(uniq)})


@dataclass
class MinedNegative:
    anchor_id: str
    negative_text: str
    rank_in_topk: int


class NegativeSampler:
    """Hard negatives for the matching task.

    For an anchor with OCR text: search the ``K`` nearest distinct texts,
    drop exact string matches, pick one uniformly. For OCR-free anchors (or
    when nothing survives the filter): a uniformly random indexed text that
    differs from the anchor's text.
    """

    def __init__(self, text_index: TextIndex, embed: Callable[[list[str]], np.ndarray],
                 k: int = 10, ef_search: int | None = None):
        self.text_index = text_index
        self.embed = embed
        self.k = k
        self.ef_search = ef_search or text_index.index.params.ef_search
        self.fallbacks = 0
        self._topk: dict[str, list[str]] = {}

    def candidates(self, text: str) -> list[str]:
        hit = self._topk.get(text)
        if hit is None:
            vec = self.embed([text])[0]
            # one extra slot covers the anchor's own (deduplicated) node
            res = self.text_index.index.search(vec, self.k + 1, max(self.ef_search, self.k + 1))
            hit = [t for t in (self.text_index.texts[i] for i, _ in res.hits) if t != text][:self.k]
            self._topk[text] = hit
        return hit

    def mine(self, anchor_id: str, anchor_text: str, rng: np.random.Generator) -> MinedNegative:
        cands = self.candidates(anchor_text)
        if cands:
            r = int(rng.integers(0, len(cands)))
            return MinedNegative(anchor_id, cands[r], r + 1)
        self.fallbacks += 1
        return MinedNegative(anchor_id, self.random_text(rng, exclude=anchor_text), 0)

    def random_text(self, rng: np.random.Generator, exclude: str | None = None) -> str:
        texts = self.text_index.texts
        if len(texts) == 1 and texts[0] == exclude:
            raise EmptyIndexError("no indexed text differs from the anchor")
        while True:
            t = texts[int(rng.integers(0, len(texts)))]
            if t != exclude:
                return t

    def negative(self, sample, rng: np.random.Generator) -> tuple[str, str]:
        if sample.presence:
            m = self.mine(sample.id, sample.ocr_text, rng)
            return m.negative_text, "mined_negative" if m.rank_in_topk else "random_negative"
        return self.random_text(rng), "random_negative"


def mine_negative(sampler: NegativeSampler, anchor, rng: np.random.Generator) -> MinedNegative:
    if not anchor.presence:
        raise ValueError(f"anchor {anchor.id} has no OCR text to mine against")
    return sampler.mine(anchor.id, anchor.ocr_text, rng)
