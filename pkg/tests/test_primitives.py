import itertools
import random

import pytest
from hypothesis import given, settings, strategies as st

import oracles as O
from soldertree.circuit import CircuitError, eval_lanes, eval_plain
from soldertree.primitives import (
    Cmp, Layout, VerSpec, balanced, build_2si, build_2si_star, build_dedup, build_dedup_agg,
    build_filter, build_merge, build_mono, build_msi_tree, build_msort, build_msu,
    build_theta_join, build_ver, eval_tree, join_list, left_deep, pad_values, prune_to_top_l,
    sentinel, split_list,
)


def run1(c, **inputs):
    return eval_plain(c, inputs).outputs


def out_list(c, n, w, **inputs):
    return split_list(run1(c, **inputs)["out"], n, w)


# -- worked examples -------------------------------------------------------------

def test_filter_example():
    c = build_filter(2, 8, Cmp("v", ">", 6))
    assert out_list(c, 2, 8, **{"in": join_list([5, 9], 8)}) == [0, 9]


def test_merge_example():
    c = build_merge(2, 2, 8)
    assert out_list(c, 4, 8, left=join_list([1, 3], 8), right=join_list([2, 4], 8)) == [1, 2, 3, 4]


def test_merge_uneven_sizes():
    c = build_merge(3, 2, 8)
    assert out_list(c, 5, 8, left=join_list([1, 5, 9], 8), right=join_list([2, 7], 8)) == [1, 2, 5, 7, 9]


def test_mono_example():
    c = build_mono(6, 8)
    assert out_list(c, 6, 8, **{"in": join_list([1, 0, 2, 3, 0, 4], 8)}) == [1, 1, 2, 3, 3, 4]


def test_mono_leading_zeros_stay_zero():
    c = build_mono(5, 8)
    assert out_list(c, 5, 8, **{"in": join_list([0, 0, 7, 0, 9], 8)}) == [0, 0, 7, 7, 9]


def test_2si_placement():
    c = build_2si(3, 8)
    got = out_list(c, 3, 8, left=join_list([1, 3, 5], 8), right=join_list([3, 5, 7], 8))
    assert got == [3, 5, 0]


def test_2si_star_multiset():
    c = build_2si_star(3, 8)
    got = out_list(c, 3, 8, left=join_list([1, 1, 2], 8), right=join_list([1, 2, 2], 8))
    assert sorted(v for v in got if v) == [1, 2]


def test_2si_star_zero_matches_nothing():
    c = build_2si_star(2, 8)
    got = out_list(c, 2, 8, left=join_list([0, 4], 8), right=join_list([0, 5], 8))
    assert got == [0, 0]


def test_dedup_example_and_all_equal():
    c = build_dedup(3, 8)
    assert out_list(c, 3, 8, **{"in": join_list([1, 1, 2], 8)}) == [0, 1, 2]
    c = build_dedup(4, 8)
    assert [v for v in out_list(c, 4, 8, **{"in": join_list([6] * 4, 8)}) if v] == [6]


def test_dedup_agg_examples():
    c = build_dedup_agg(3, 8, 8, "SUM")
    rows = [k | (v << 8) for k, v in [(1, 10), (1, 20), (2, 5)]]
    got = [(r & 255, r >> 8) for r in out_list(c, 3, 16, **{"in": join_list(rows, 16)})]
    assert got == [(0, 0), (1, 30), (2, 5)]
    c = build_dedup_agg(3, 8, 8, "COUNT")
    rows = [1, 1, 1]
    got = [(r & 255, r >> 8) for r in out_list(c, 3, 16, **{"in": join_list(rows, 16)})]
    assert [g for g in got if g[0]] == [(1, 3)]


@pytest.mark.parametrize("agg,expect", [("MIN", 3), ("MAX", 9)])
def test_dedup_agg_min_max(agg, expect):
    c = build_dedup_agg(3, 8, 8, agg)
    rows = [4 | (v << 8) for v in (9, 3, 6)]
    got = [(r & 255, r >> 8) for r in out_list(c, 3, 16, **{"in": join_list(rows, 16)})]
    assert [g for g in got if g[0]] == [(4, expect)]


def test_msort_four_by_two_balanced():
    root = build_msort([2] * 4, 8, balanced(range(4)))
    ins = {0: [5, 9], 1: [1, 7], 2: [2, 3], 3: [4, 8]}
    out = eval_tree(root, {p: join_list(v, 8) for p, v in ins.items()})["out"]
    assert split_list(out, 8, 8) == [1, 2, 3, 4, 5, 7, 8, 9]


def test_msort_shape_invariance():
    ins = {0: [5, 9], 1: [1, 7], 2: [2, 3], 3: [4, 8]}
    packed = {p: join_list(v, 8) for p, v in ins.items()}
    a = eval_tree(build_msort([2] * 4, 8, left_deep(range(4))), packed)["out"]
    b = eval_tree(build_msort([2] * 4, 8, balanced(range(4)), decompose=True), packed)["out"]
    assert a == b


def test_msi_four_balanced():
    w, n = 8, 4
    sets = [[1, 2, 3, 4], [2, 3, 4, 9], [3, 4, 5], [1, 3, 4, 6]]
    root = build_msi_tree(4, n, w, balanced(range(4)))
    res = eval_tree(root, {p: join_list(pad_values(s, n, p, w), w) for p, s in enumerate(sets)})
    assert all(res["ver"].values())
    assert O.canon(split_list(res["out"], root.out_rows, w), w) == [3, 4]


def test_msi_three_left_deep_equals_balanced():
    w, n = 8, 4
    sets = [[1, 2, 5, 7], [2, 5, 7], [5, 7, 8]]
    packed = {p: join_list(pad_values(s, n, p, w), w) for p, s in enumerate(sets)}
    a = eval_tree(build_msi_tree(3, n, w, left_deep(range(3))), packed)
    b = eval_tree(build_msi_tree(3, n, w, balanced(range(3))), packed)
    ra = O.canon(split_list(a["out"], 4, w), w)
    rb = O.canon(split_list(b["out"], 4, w), w)
    assert ra == rb == [5, 7]


def test_msu_examples():
    w = 8
    root = build_msu(2, 2, w)
    res = eval_tree(root, {0: join_list([1, 2], w), 1: join_list([2, 3], w)})
    assert O.canon(split_list(res["out"], root.out_rows, w), w) == [1, 2, 3]
    root = build_msu(2, 2, w)
    res = eval_tree(root, {0: join_list([1, 2], w), 1: join_list([3, 4], w)})
    assert O.canon(split_list(res["out"], root.out_rows, w), w) == [1, 2, 3, 4]


def test_top_l_minimum():
    root = build_msort([8], 8)
    assert root.out_rows == 8
    c = build_merge(4, 4, 8)
    top1 = prune_to_top_l(c, 1)
    vals = [17, 40, 90, 91], [3, 55, 56, 99]
    out = run1(top1, left=join_list(vals[0], 8), right=join_list(vals[1], 8))["out"]
    assert out == 3
    assert top1.and_count < c.and_count


def test_top_l_shrinks():
    # min and max of one compare-and-swap share its AND, so counts step in pairs
    c = build_merge(4, 4, 8)
    counts = [prune_to_top_l(c, l).and_count for l in range(1, 9)]
    assert counts == sorted(counts)
    assert counts[-1] == c.and_count
    for l in range(1, 7):
        assert counts[l - 1] < c.and_count
    with pytest.raises(CircuitError):
        prune_to_top_l(c, 0)


def test_theta_join_pairs():
    c = build_theta_join(3, 2, 8, "<")
    out = split_list(run1(c, left=join_list([1, 5, 0], 8), right=join_list([4, 9], 8))["out"], 6, 16)
    pairs = sorted((v & 255, v >> 8) for v in out if v)
    expect = sorted((l, r) for l in (1, 5) for r in (4, 9) if l < r)
    assert pairs == expect


def test_sentinels_distinct_and_top_bit():
    w, bound = 8, 4
    seen = {sentinel(w, p, bound, k) for p in range(3) for k in range(bound)}
    assert len(seen) == 12
    assert all(s & O.top(w) for s in seen)
    with pytest.raises(CircuitError):
        sentinel(4, 3, 4, 0)
    with pytest.raises(CircuitError):
        pad_values([1, 2, 3], 2, 0, 8)


def test_layout_rejects_duplicates_and_overflow():
    with pytest.raises(CircuitError):
        Layout((("a", 4), ("a", 4)), ("a",))
    with pytest.raises(CircuitError):
        Layout((("a", 4),), ("b",))
    lay = Layout((("a", 4), ("b", 4)), ("a",))
    assert lay.unpack(lay.pack({"a": 3, "b": 9})) == {"a": 3, "b": 9}
    with pytest.raises(CircuitError):
        lay.pack({"a": 16})


# -- verifier soundness and completeness (exhaustive, w=4) -------------------------

def _all_lists(n, w):
    return [list(t) for t in itertools.product(range(1 << w), repeat=n)]


@pytest.mark.parametrize("n", [1, 2, 3, 4])
@pytest.mark.parametrize("kind", ["sorted-strict", "sorted-nonstrict", "range"])
def test_ver_exhaustive_w4(n, kind):
    w = 4
    spec = VerSpec(kind, "v", 2, 5) if kind == "range" else VerSpec(kind)
    c = build_ver(spec, n, w)
    lists = _all_lists(n, w)
    got = eval_lanes(c, {"in": [join_list(l, w) for l in lists]}).outputs["ok"]
    if kind == "sorted-strict":
        want = [O.ver_sorted_strict(l) for l in lists]
    elif kind == "sorted-nonstrict":
        want = [O.ver_sorted_nonstrict(l) for l in lists]
    else:
        want = [O.ver_range(l, 2, 5, w) for l in lists]
    assert got == [int(x) for x in want]


def test_ver_accepts_padded_lists():
    w, n = 8, 6
    c = build_ver(VerSpec("sorted-strict"), n, w)
    for slot in range(4):
        vals = pad_values([3, 10, 60], n, slot, w)
        assert run1(c, **{"in": join_list(vals, w)})["ok"] == 1


# -- property tests ---------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(st.integers(2, 4), st.integers(1, 5), st.sampled_from([8, 16]), st.integers(0, 10**6))
def test_msi_shape_invariance(m, n, w, seed):
    rng = random.Random(seed)
    sets = O.draw_sets(rng, m, n, w)
    packed = {p: join_list(O.pad(s, n, p, w), w) for p, s in enumerate(sets)}
    results = []
    for shape in (balanced(range(m)), left_deep(range(m))):
        root = build_msi_tree(m, n, w, shape)
        res = eval_tree(root, packed)
        assert all(res["ver"].values())
        results.append(O.canon(split_list(res["out"], root.out_rows, w), w))
    assert results[0] == results[1] == O.intersect(sets)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 255), min_size=1, max_size=12))
def test_mono_property(values):
    c = build_mono(len(values), 8)
    out = out_list(c, len(values), 8, **{"in": join_list(values, 8)})
    assert out == O.monotonize(values)
    nz = [o for o in out if o]
    assert nz == sorted(nz) or values != sorted(values)
    for v, o in zip(values, out):
        if v:
            assert o == v


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6), st.integers(0, 10**6))
def test_top_l_preserves_prefix(n, seed):
    rng = random.Random(seed)
    left = sorted(rng.sample(range(1, 200), n))
    right = sorted(rng.sample(range(1, 200), n))
    c = build_merge(n, n, 8)
    full = out_list(c, 2 * n, 8, left=join_list(left, 8), right=join_list(right, 8))
    l = rng.randint(1, 2 * n)
    p = prune_to_top_l(c, l)
    assert p.and_count <= c.and_count
    got = split_list(run1(p, left=join_list(left, 8), right=join_list(right, 8))["out"], l, 8)
    assert got == full[:l]


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 4), st.integers(1, 4), st.integers(0, 10**6))
def test_msu_and_msort_shape_invariance(m, n, seed):
    rng = random.Random(seed)
    w = 8
    sets = O.draw_sets(rng, m, n, w)
    packed = {p: join_list(O.pad(s, n, p, w), w) for p, s in enumerate(sets)}
    outs = []
    for shape in (balanced(range(m)), left_deep(range(m))):
        root = build_msu(m, n, w, shape)
        outs.append(O.canon(split_list(eval_tree(root, packed)["out"], root.out_rows, w), w))
    assert outs[0] == outs[1] == O.union(sets)
    bags = O.draw_multisets(rng, m, n, w)
    packed = {p: join_list(O.pad(s, n, p, w), w) for p, s in enumerate(bags)}
    outs = []
    for shape in (balanced(range(m)), left_deep(range(m))):
        root = build_msort([n] * m, w, shape)
        outs.append(O.canon(split_list(eval_tree(root, packed)["out"], root.out_rows, w), w))
    assert outs[0] == outs[1] == O.multiset_sort(bags)
