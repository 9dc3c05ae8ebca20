from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from soldertree.costmodel import (
    CostError, CostNode, CostParams, cost_offline, cost_online, cost_solder, cost_tree,
    parse_matrix, profile, relative_error,
)
from soldertree.transport import make_transport
from vectors import COST_VECTORS


def _params(L, ls):
    return CostParams(Fraction(ls), tuple(tuple(Fraction(x) for x in row) for row in L))


def _tree(m, C, I):
    h = (m + 1) // 2
    ps = tuple(range(m))
    left = CostNode("l", ps[:h], C // 3 + 1, I // 2 + 1, solder_bits=I // 2 + 1)
    right = CostNode("r", ps[h:], C // 4 + 1, I // 3 + 1, solder_bits=I // 3 + 1)
    return CostNode("root", ps, C, I, children=[left, right])


@pytest.mark.parametrize("row", COST_VECTORS, ids=[f"v{k}" for k in range(len(COST_VECTORS))])
def test_frozen_vectors(row):
    m, L, ls, C, I, off, on, sol, total = row
    p = _params(L, ls)
    ps = range(m)
    assert cost_offline(C, ps, p) == Fraction(off)
    assert cost_online(C, I, ps, p) == Fraction(on)
    assert cost_solder(I, ps, p) == Fraction(sol)
    assert cost_tree(_tree(m, C, I), p).total == Fraction(total)


def test_uniform_worked_examples():
    p = CostParams.uniform(4, link=1, ls=1)
    assert cost_offline(10, range(4), p) == 80          # 3*10 + 40 + 10
    assert cost_online(10, 8, range(4), p) == 78        # 24 + 24 + 30
    p2 = CostParams.uniform(2, link=1, ls=1)
    assert cost_offline(10, range(2), p2) == 60         # 10 + 40 + 10
    assert cost_online(10, 8, range(2), p2) == 26       # 8 + 8 + 10
    assert cost_solder(64, range(4), p) == 192


def test_hand_recursion():
    p = CostParams.uniform(4, link=1, ls=1)
    kids = [CostNode("a", (0, 1), 10, 8, solder_bits=4), CostNode("b", (2, 3), 10, 8, solder_bits=4)]
    root = CostNode("root", (0, 1, 2, 3), 20, 8, children=kids)
    rep = cost_tree(root, p)
    by = rep.by_name()
    assert by["a"].total == by["b"].total == 86
    assert by["a"].solder == 12
    assert by["root"].offline == 160 and by["root"].online == 108
    assert rep.total == 86 + 12 + 160 + 108 == 366
    assert rep.lines()[-1] == "total=366"


def test_single_node_is_offline_plus_online():
    p = CostParams.uniform(3, link=2, ls=Fraction(1, 2))
    node = CostNode("only", (0, 1, 2), 50, 12, solder_bits=99)
    rep = cost_tree(node, p)
    assert rep.total == cost_offline(50, (0, 1, 2), p) + cost_online(50, 12, (0, 1, 2), p)
    assert rep.nodes[0].solder == 0


def test_evaluator_is_lowest_party():
    L = [[0, 1, 9], [1, 0, 1], [9, 1, 0]]
    p = _params(L, 1)
    # only the 1-2 link counts for the evaluator of {1, 2}
    assert p.max_eval_link((2, 1)) == 1
    assert p.max_eval_link((0, 1, 2)) == 9


@pytest.mark.parametrize("L,msg", [
    ([[0, 1], [2, 0]], "symmetric"),
    ([[1, 1], [1, 0]], "diagonal"),
    ([[0, -1], [-1, 0]], "non-negative"),
    ([[0, 1, 1], [1, 0]], "square"),
])
def test_bad_matrices_rejected(L, msg):
    with pytest.raises(CostError, match=msg):
        _params(L, 1)


def test_nonpositive_ls_rejected():
    with pytest.raises(CostError):
        CostParams.uniform(2, ls=0)


def test_parse_matrix():
    rows = parse_matrix("# lat\n0, 1/2\n1/2 0  # tail\n")
    assert rows == [[0, Fraction(1, 2)], [Fraction(1, 2), 0]]
    with pytest.raises(CostError):
        parse_matrix("0 x\n")
    with pytest.raises(CostError):
        parse_matrix("# nothing\n")


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 6), st.integers(0, 500), st.integers(0, 500), st.integers(0, 50),
       st.integers(0, 50), st.integers(1, 5))
def test_costs_monotone(m, C, I, dC, dI, scale):
    p = CostParams.uniform(m, link=Fraction(scale, 3), ls=Fraction(1, scale))
    ps = range(m)
    assert cost_offline(C + dC, ps, p) >= cost_offline(C, ps, p)
    assert cost_online(C + dC, I + dI, ps, p) >= cost_online(C, I, ps, p)
    assert cost_solder(I + dI, ps, p) >= cost_solder(I, ps, p)
    # raising every latency never lowers a cost
    q = CostParams.uniform(m, link=Fraction(scale + 1, 3), ls=Fraction(1, scale))
    assert cost_online(C, I, ps, q) >= cost_online(C, I, ps, p)
    assert cost_offline(C, ps, q) >= cost_offline(C, ps, p)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 5), st.integers(1, 200), st.integers(1, 200), st.integers(0, 100))
def test_tree_total_dominates_root(m, C, I, extra):
    p = CostParams.uniform(m, link=1, ls=1)
    bare = cost_tree(CostNode("r", tuple(range(m)), C, I), p).total
    grown = _tree(m, C, I)
    grown.children[0].and_count += extra
    assert cost_tree(grown, p).total >= bare


def test_profile_recovers_injected_latency():
    L = [[0, 3, Fraction(1, 2), 7], [3, 0, 2, 1], [Fraction(1, 2), 2, 0, 5], [7, 1, 5, 0]]
    ls = Fraction(1, 8)
    t = make_transport("inprocess", 4, L, ls)
    est = profile(t)
    for i in range(4):
        for j in range(4):
            if i != j:
                assert relative_error(est.L[i][j], L[i][j]) <= 0.05
    assert relative_error(est.ls, ls) <= 0.05


def test_profile_rejects_unknown_party():
    t = make_transport("inprocess", 2, [[0, 1], [1, 0]], 1)
    with pytest.raises(CostError):
        profile(t, parties=[0, 5])
