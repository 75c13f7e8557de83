"""Naive reference implementations of the ranking metrics.

Written with plain loops and full sorts, sharing no code with
:mod:`coverclip.metrics`, so the two can check each other.
"""

import math


def _ranked(group):
    items = list(zip(group.item_ids, group.grades.tolist(), group.scores.tolist()))
    return sorted(items, key=lambda t: (-t[2], t[0]))


def pnr(groups, orientations=None):
    num = den = 0
    for g in groups:
        n = len(g.item_ids)
        for i in range(n):
            for j in range(n):
                if i == j or not g.grades[i] > g.grades[j]:
                    continue
                if orientations is not None and (bool(g.presence[i]), bool(g.presence[j])) not in orientations:
                    continue
                if g.scores[i] > g.scores[j]:
                    num += 1
                elif g.scores[i] < g.scores[j]:
                    den += 1
    if den == 0:
        return math.inf if num else math.nan
    return num / den


def recall_at_k(groups, k):
    hit = total = 0
    for g in groups:
        if max(g.grades.tolist()) < 2:
            continue
        total += 1
        if any(grade == 2 for _, grade, _ in _ranked(g)[:k]):
            hit += 1
    return hit / total if total else math.nan


def ndcg_at_k(groups, k):
    vals = []
    for g in groups:
        ranked = _ranked(g)
        dcg = sum((2 ** grade - 1) / math.log2(pos + 2) for pos, (_, grade, _) in enumerate(ranked[:k]))
        ideal_grades = sorted(g.grades.tolist(), reverse=True)[:k]
        idcg = sum((2 ** grade - 1) / math.log2(pos + 2) for pos, grade in enumerate(ideal_grades))
        vals.append(1.0 if idcg == 0 else dcg / idcg)
    return sum(vals) / len(vals) if vals else math.nan


def mean_average_precision(groups, min_grade=1):
    aps = []
    for g in groups:
        ranked = _ranked(g)
        found, precs = 0, []
        for pos, (_, grade, _) in enumerate(ranked, start=1):
            if grade >= min_grade:
                found += 1
                precs.append(found / pos)
        if precs:
            aps.append(sum(precs) / len(precs))
    return sum(aps) / len(aps) if aps else math.nan
