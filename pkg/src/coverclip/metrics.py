"""Graded-relevance retrieval metrics over per-query candidate groups.

All rankings order items by descending score with ties broken by ascending
item id. PNR follows the global-sum definition: concordant and discordant
ordered pairs are summed over all queries before dividing.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

UNDEFINED = float("nan")
INFINITE = float("inf")

# slice name -> allowed (presence of i, presence of j) orientations
SLICES = {
    "S_T,S_T": ((True, True),),
    "S_F,S_F": ((False, False),),
    "S_T,S_F": ((True, False), (False, True)),
    "All": ((True, True), (False, False), (True, False), (False, True)),
}


@dataclass
class QueryGroup:
    query: str
    item_ids: list[str]
    grades: np.ndarray
    scores: np.ndarray
    presence: np.ndarray = None

    def __post_init__(self):
        self.grades = np.asarray(self.grades, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        n = len(self.item_ids)
        self.presence = (np.zeros(n, dtype=bool) if self.presence is None
                         else np.asarray(self.presence, dtype=bool))
        if not (len(self.grades) == len(self.scores) == len(self.presence) == n):
            raise ValueError(f"query {self.query!r}: item/grade/score/presence lengths differ")

    def ranking(self) -> np.ndarray:
        """Item indices by descending score, ties by ascending item id."""
        return np.lexsort((np.asarray(self.item_ids), -self.scores))


def _ratio(num: int, den: int) -> float:
    if den == 0:
        return INFINITE if num > 0 else UNDEFINED
    return num / den


def pair_counts(group: QueryGroup, orientations=None) -> tuple[int, int, int]:
    """(concordant, discordant, graded pairs) over ordered pairs with y_i > y_j."""
    y, s, p = group.grades, group.scores, group.presence
    graded = y[:, None] > y[None, :]
    if orientations is not None:
        allowed = np.zeros_like(graded)
        for a, b in orientations:
            allowed |= (p[:, None] == a) & (p[None, :] == b)
        graded &= allowed
    conc = int((graded & (s[:, None] > s[None, :])).sum())
    disc = int((graded & (s[:, None] < s[None, :])).sum())
    return conc, disc, int(graded.sum())


def pnr(groups: Iterable[QueryGroup], slice_filter: str | None = None) -> float:
    """Concordant / discordant pair ratio; score ties count toward neither.

    Returns ``inf`` when only concordant pairs exist and ``nan`` when there is
    no decided pair at all.
    """
    orient = None if slice_filter is None else SLICES[slice_filter]
    num = den = 0
    for g in groups:
        c, d, _ = pair_counts(g, orient)
        num += c
        den += d
    return _ratio(num, den)


def recall_at_k(groups: Iterable[QueryGroup], k: int, strong_grade: int = 2) -> float:
    """Fraction of queries whose top-k holds a strongly relevant item.

    Queries without any strongly relevant item are left out.
    """
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    hits = total = 0
    for g in groups:
        if not (g.grades >= strong_grade).any():
            continue
        total += 1
        hits += bool((g.grades[g.ranking()[:k]] >= strong_grade).any())
    return hits / total if total else UNDEFINED


def mean_recall(r1: float, r5: float, r10: float) -> float:
    return (r1 + r5 + r10) / 3.0


def _dcg(gains: np.ndarray) -> float:
    disc = np.log2(np.arange(2, len(gains) + 2))
    return float((gains / disc).sum())


def ndcg_at_k(groups: Iterable[QueryGroup], k: int) -> float:
    """Mean NDCG@k with gain 2^y - 1 and discount log2(rank + 1); queries
    whose ideal DCG is zero score 1."""
    vals = []
    for g in groups:
        gains = 2.0 ** g.grades - 1.0
        ideal = _dcg(np.sort(gains)[::-1][:k])
        if ideal == 0.0:
            vals.append(1.0)
            continue
        vals.append(_dcg(gains[g.ranking()[:k]]) / ideal)
    return float(np.mean(vals)) if vals else UNDEFINED


def mean_average_precision(groups: Iterable[QueryGroup], min_grade: int = 1) -> float:
    """MAP with items of grade >= ``min_grade`` counted as relevant."""
    aps = []
    for g in groups:
        rel = (g.grades[g.ranking()] >= min_grade).astype(float)
        if not rel.any():
            continue
        prec = np.cumsum(rel) / np.arange(1, len(rel) + 1)
        aps.append(float((prec * rel).sum() / rel.sum()))
    return float(np.mean(aps)) if aps else UNDEFINED


@dataclass
class MetricReport:
    r1: float
    r5: float
    r10: float
    mr: float
    pnr: float
    ndcg1: float
    ndcg5: float
    ndcg10: float
    map: float
    slice_pnr: dict = field(default_factory=dict)
    pair_counts: dict = field(default_factory=dict)
    n_queries: int = 0

    HEADLINE = ("r1", "r5", "r10", "mr", "pnr", "ndcg1", "ndcg5", "ndcg10", "map")
    LABELS = ("R@1", "R@5", "R@10", "MR", "PNR", "NDCG@1", "NDCG@5", "NDCG@10", "MAP")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self, slices: bool = False) -> str:
        vals = [getattr(self, k) for k in self.HEADLINE]
        widths = [max(len(lbl), 7) for lbl in self.LABELS]
        lines = [" | ".join(lbl.rjust(w) for lbl, w in zip(self.LABELS, widths)),
                 " | ".join(f"{v:.3f}".rjust(w) for v, w in zip(vals, widths))]
        if slices:
            lines.append("")
            for name in ("S_T,S_T", "S_F,S_F", "S_T,S_F", "All"):
                cnt = self.pair_counts.get(name, 0)
                lines.append(f"<{name}>".ljust(12) + f"PNR {self.slice_pnr.get(name, UNDEFINED):.3f}"
                             f"  pairs {cnt}")
            lines.append(f"pairs S_T->S_F {self.pair_counts.get('S_T->S_F', 0)}, "
                         f"S_F->S_T {self.pair_counts.get('S_F->S_T', 0)}")
        return "\n".join(lines)


def compute_report(groups: Sequence[QueryGroup], map_min_grade: int = 1) -> MetricReport:
    groups = list(groups)
    r1, r5, r10 = (recall_at_k(groups, k) for k in (1, 5, 10))
    slice_pnr, counts = {}, {}
    for name, orient in SLICES.items():
        num = den = total = 0
        for g in groups:
            c, d, t = pair_counts(g, orient)
            num, den, total = num + c, den + d, total + t
        slice_pnr[name] = _ratio(num, den)
        counts[name] = total
    counts["S_T->S_F"] = sum(pair_counts(g, ((True, False),))[2] for g in groups)
    counts["S_F->S_T"] = sum(pair_counts(g, ((False, True),))[2] for g in groups)
    return MetricReport(
        r1=r1, r5=r5, r10=r10, mr=mean_recall(r1, r5, r10), pnr=slice_pnr["All"],
        ndcg1=ndcg_at_k(groups, 1), ndcg5=ndcg_at_k(groups, 5), ndcg10=ndcg_at_k(groups, 10),
        map=mean_average_precision(groups, map_min_grade),
        slice_pnr=slice_pnr, pair_counts=counts, n_queries=len(groups))


def is_better(candidate: float, incumbent: float | None) -> bool:
    """Model-selection order on PNR: nan never wins, inf beats everything finite."""
    if candidate is None or math.isnan(candidate):
        return False
    return incumbent is None or math.isnan(incumbent) or candidate > incumbent
