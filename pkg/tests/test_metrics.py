import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coverclip import metrics as M
from coverclip import oracle
from coverclip.metrics import QueryGroup


def random_groups(n, seed, tie_heavy=False):
    rng = np.random.default_rng(seed)
    groups = []
    for q in range(n):
        size = int(rng.integers(1, 14))
        ids = [f"i{j:03d}" for j in rng.permutation(1000)[:size]]
        if tie_heavy:
            scores = rng.integers(0, 3, size) / 2.0
        else:
            scores = np.round(rng.normal(size=size), int(rng.integers(1, 4)))
        groups.append(QueryGroup(f"q{q}", ids, rng.integers(0, 3, size), scores, rng.random(size) < 0.4))
    return groups


@pytest.fixture(scope="module")
def groups_1000():
    return random_groups(1000, 42)


def g1(grades, scores, presence=None, ids=None):
    ids = ids or [f"d{i}" for i in range(len(grades))]
    return QueryGroup("q", ids, grades, scores, presence)


# -- worked examples ----------------------------------------------------------

def test_pnr_examples():
    assert M.pnr([g1([2, 1, 0], [0.9, 0.5, 0.1])]) == math.inf
    assert M.pnr([g1([2, 1, 0], [0.5, 0.9, 0.1])]) == 2.0
    assert M.pnr([g1([2, 1, 0], [0.1, 0.5, 0.9])]) == 0.0
    assert math.isnan(M.pnr([g1([1, 1], [0.2, 0.3])]))
    assert math.isnan(M.pnr([g1([2, 1], [0.4, 0.4])]))


def test_pnr_uses_global_sums():
    a = g1([2, 1, 0], [0.5, 0.9, 0.1])        # 2 conc, 1 disc
    b = g1([1, 0], [0.1, 0.2])                # 0 conc, 1 disc
    assert M.pnr([a, b]) == 1.0                # (2+0)/(1+1), not the mean of per-query ratios


def test_recall_examples():
    assert M.recall_at_k([g1([0, 2, 1], [0.1, 0.9, 0.3])], 1) == 1.0
    assert M.recall_at_k([g1([1, 1, 0], [0.1, 0.9, 0.3]), g1([2, 0], [0.1, 0.2])], 1) == 0.0
    assert M.recall_at_k([g1([1, 1, 0], [0.1, 0.9, 0.3]), g1([2, 0], [0.1, 0.2])], 2) == 1.0
    with pytest.raises(ValueError):
        M.recall_at_k([g1([2], [0.0])], 0)


def test_recall_tie_break_by_item_id():
    g = QueryGroup("q", ["b", "a"], [2, 0], [0.5, 0.5])
    assert M.recall_at_k([g], 1) == 0.0
    g = QueryGroup("q", ["a", "b"], [2, 0], [0.5, 0.5])
    assert M.recall_at_k([g], 1) == 1.0


def test_mr_matches_published_rows():
    assert M.mean_recall(0.503, 0.754, 0.820) == pytest.approx(0.692, abs=5e-4)
    assert M.mean_recall(0.471, 0.721, 0.796) == pytest.approx(0.663, abs=5e-4)


def test_ndcg_examples():
    assert M.ndcg_at_k([g1([2, 1, 0], [0.9, 0.5, 0.1])], 3) == 1.0
    # grades [1, 2] in score order: DCG = 1 + 3/log2(3); IDCG = 3 + 1/log2(3)
    val = M.ndcg_at_k([g1([1, 2], [0.9, 0.1])], 2)
    assert val == pytest.approx(0.7967, abs=1e-3)
    assert val == pytest.approx((1 + 3 / math.log2(3)) / (3 + 1 / math.log2(3)), abs=1e-12)
    assert M.ndcg_at_k([g1([1, 1, 1], [0.1, 0.7, 0.3])], 2) == 1.0
    assert M.ndcg_at_k([g1([0, 0], [0.1, 0.7])], 2) == 1.0


def test_map_examples():
    assert M.mean_average_precision([g1([1, 0, 2], [0.9, 0.5, 0.1])]) == pytest.approx((1 + 2 / 3) / 2)
    assert M.mean_average_precision([g1([1, 2, 1], [0.3, 0.2, 0.1])]) == 1.0
    assert math.isnan(M.mean_average_precision([g1([0, 0], [0.3, 0.2])]))
    assert M.mean_average_precision([g1([1, 0, 2], [0.9, 0.5, 0.1])], min_grade=2) == pytest.approx(1 / 3)


# -- oracle equivalence ---------------------------------------------------------

@pytest.mark.parametrize("tie_heavy", [False, True])
def test_oracle_equivalence_1000_groups(tie_heavy):
    groups = random_groups(1000, 42 + tie_heavy, tie_heavy)
    assert M.pnr(groups) == oracle.pnr(groups)
    for name, orient in M.SLICES.items():
        a, b = M.pnr(groups, name), oracle.pnr(groups, orient)
        assert a == b or (math.isnan(a) and math.isnan(b))
    for k in (1, 5, 10):
        assert M.recall_at_k(groups, k) == oracle.recall_at_k(groups, k)
        assert abs(M.ndcg_at_k(groups, k) - oracle.ndcg_at_k(groups, k)) <= 1e-9
    assert abs(M.mean_average_precision(groups) - oracle.mean_average_precision(groups)) <= 1e-9


def test_oracle_equivalence_per_group(groups_1000):
    for g in groups_1000[:300]:
        for k in (1, 3):
            a, b = M.recall_at_k([g], k), oracle.recall_at_k([g], k)
            assert a == b or (math.isnan(a) and math.isnan(b))
        a, b = M.pnr([g]), oracle.pnr([g])
        assert a == b or (math.isnan(a) and math.isnan(b))


# -- report -------------------------------------------------------------------

def test_report_invariants(groups_1000):
    rep = M.compute_report(groups_1000)
    assert rep.mr == (rep.r1 + rep.r5 + rep.r10) / 3
    c = rep.pair_counts
    assert c["S_T,S_T"] + c["S_F,S_F"] + c["S_T,S_F"] == c["All"]
    assert c["S_T->S_F"] + c["S_F->S_T"] == c["S_T,S_F"]
    assert rep.pnr == rep.slice_pnr["All"] == M.pnr(groups_1000)
    assert rep.n_queries == 1000
    d = rep.to_dict()
    for key in ("r1", "r5", "r10", "mr", "pnr", "ndcg1", "ndcg5", "ndcg10", "map", "slice_pnr", "pair_counts"):
        assert key in d
    table = rep.table(slices=True)
    for label in ("R@1", "MR", "PNR", "NDCG@10", "MAP", "<S_T,S_T>", "<S_F,S_F>", "<S_T,S_F>", "<All>"):
        assert label in table


def test_model_selection_order():
    assert M.is_better(1.5, None)
    assert M.is_better(2.0, 1.5)
    assert not M.is_better(1.5, 1.5)
    assert not M.is_better(float("nan"), 1.0)
    assert M.is_better(float("inf"), 1e9)
    assert M.is_better(0.5, float("nan"))


def test_group_length_validation():
    with pytest.raises(ValueError):
        QueryGroup("q", ["a", "b"], [1], [0.1, 0.2])


# -- properties ---------------------------------------------------------------

group_strategy = st.integers(2, 12).flatmap(lambda n: st.tuples(
    st.lists(st.integers(0, 2), min_size=n, max_size=n),
    # coarse grid: monotone float maps stay strictly monotone, and ties are common
    st.lists(st.integers(-40, 40).map(lambda v: v / 8), min_size=n, max_size=n),
    st.lists(st.booleans(), min_size=n, max_size=n)))


def _mk(data):
    grades, scores, presence = data
    return QueryGroup("q", [f"x{i:02d}" for i in range(len(grades))], grades, scores, presence)


@settings(max_examples=100, deadline=None)
@given(st.lists(group_strategy, min_size=1, max_size=5), st.floats(0.1, 5), st.floats(-3, 3))
def test_pnr_invariant_under_monotone_transform(data, scale, shift):
    groups = [_mk(d) for d in data]
    mapped = [QueryGroup(g.query, g.item_ids, g.grades, np.tanh(g.scores * scale + shift) * 7 + np.exp(g.scores),
                         g.presence) for g in groups]
    a, b = M.pnr(groups), M.pnr(mapped)
    assert a == b or (math.isnan(a) and math.isnan(b))


@settings(max_examples=100, deadline=None)
@given(st.lists(group_strategy, min_size=1, max_size=5))
def test_reversed_scores_invert_pnr(data):
    groups = [_mk(d) for d in data]
    rev = [QueryGroup(g.query, g.item_ids, g.grades, -g.scores, g.presence) for g in groups]
    conc = sum(M.pair_counts(g)[0] for g in groups)
    disc = sum(M.pair_counts(g)[1] for g in groups)
    if conc and disc:
        assert M.pnr(rev) == pytest.approx(1 / M.pnr(groups), rel=1e-12)
    elif conc and not disc:
        assert M.pnr(rev) == 0.0


@settings(max_examples=100, deadline=None)
@given(group_strategy, st.randoms(use_true_random=False))
def test_metrics_invariant_under_input_permutation(data, rnd):
    g = _mk(data)
    order = list(range(len(g.item_ids)))
    rnd.shuffle(order)
    p = QueryGroup("q", [g.item_ids[i] for i in order], g.grades[order], g.scores[order], g.presence[order])
    for k in (1, 5, 10):
        assert M.ndcg_at_k([g], k) == M.ndcg_at_k([p], k)
        a, b = M.recall_at_k([g], k), M.recall_at_k([p], k)
        assert a == b or (math.isnan(a) and math.isnan(b))
    a, b = M.mean_average_precision([g]), M.mean_average_precision([p])
    assert a == b or (math.isnan(a) and math.isnan(b))
    assert M.pair_counts(g) == M.pair_counts(p)


@settings(max_examples=100, deadline=None)
@given(st.lists(group_strategy, min_size=1, max_size=4))
def test_metric_ranges(data):
    groups = [_mk(d) for d in data]
    for k in (1, 5):
        v = M.ndcg_at_k(groups, k)
        assert 0.0 <= v <= 1.0 + 1e-12
    m = M.mean_average_precision(groups)
    assert math.isnan(m) or 0.0 < m <= 1.0
