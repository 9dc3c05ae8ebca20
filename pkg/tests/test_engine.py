import random
from types import SimpleNamespace

import numpy as np
import pytest

from soldertree import engine as en
from soldertree import planner as pl
from soldertree import sqlfront as sf
from soldertree.circuit import Builder, SolderSource
from soldertree.primitives import balanced, left_deep
from soldertree.tamper import tamper_rows
from soldertree.transport import Plaintext, ProtocolAbort, make_transport


def _plan(name="q1", m=4, n=16, ff=0.5, seed=0, **cfg):
    f = sf.fixture(name, m, n, ff, seed)
    return f, pl.make_plan(f.sql, f.schema, pl.PlannerConfig(**cfg))


def _expect(f):
    return sorted(sf.oracle(f.query, f.schema, f.data))


def test_q1_four_parties_matches_oracle():
    f, p = _plan("q1", 4, 16, 0.5, seed=3, include_monolithic=False)
    assert len(p.units) == 3
    r = en.run_tree(p, f.data, seed=5, kappa=64)
    assert r.columns == ("diag", "cnt")
    assert sorted(r.rows) == _expect(f)
    assert r.rows == sf.oracle(f.query, f.schema, f.data)      # order is part of the answer


@pytest.mark.parametrize("name", sf.FIXTURES)
def test_monolithic_and_decomposed_agree(name):
    f = sf.fixture(name, 4, 6, 0.5, seed=11)
    dec = pl.make_plan(f.sql, f.schema, pl.PlannerConfig(include_monolithic=False))
    mono = pl.make_plan(f.sql, f.schema, pl.PlannerConfig(decompose=False))
    a = en.run_tree(dec, f.data, seed=2, kappa=64).rows
    b = en.run_tree(mono, f.data, seed=2, kappa=64).rows
    assert sorted(a) == sorted(b) == _expect(f)


@pytest.mark.parametrize("shape", [left_deep(range(4)), balanced(range(4)), (0, ((1, 2), 3))])
def test_every_shape_gives_the_same_answer(shape):
    f, p = _plan("tpch_rev", 4, 8, 0.6, seed=4, shape=shape)
    assert sorted(en.run_tree(p, f.data, seed=1, kappa=64).rows) == _expect(f)


@pytest.mark.parametrize("k", range(4))
@pytest.mark.parametrize("kind", ["range", "order", "duplicate"])
def test_tampered_leaf_aborts_on_its_edge(k, kind):
    f, p = _plan("q1", 4, 16, 0.5, seed=1, include_monolithic=False)
    label = f"p{k}"

    def hook(lp, rows):
        return tamper_rows(lp, rows, kind) if lp.label == label else rows
    with pytest.raises(en.VerAbort) as e:
        en.run_tree(p, f.data, seed=0, kappa=64, tamper_local=hook)
    assert e.value.edge == label
    assert e.value.unit == ("u0-1" if k < 2 else "u2-3")


def test_abort_notifies_unit_parties():
    f, p = _plan("q1", 4, 16, 0.5, seed=1, include_monolithic=False)
    t = make_transport("inprocess", 4)
    t.log = []
    with pytest.raises(en.VerAbort):
        en.run_tree(p, f.data, t, seed=0, kappa=64,
                    tamper_local=lambda lp, rows: tamper_rows(lp, rows, "order") if lp.label == "p0" else rows)
    aborts = [fr for fr in t.log if fr.role == "abort"]
    assert {fr.receiver for fr in aborts} == {1}


@pytest.mark.parametrize("kind", ["inprocess", "socket"])
def test_serial_and_parallel_send_identical_bytes(kind):
    f, p = _plan("q3", 4, 8, 0.5, seed=6, include_monolithic=False)
    out = []
    for mode in ("serial", "parallel"):
        t = make_transport(kind, 4)
        r = en.run_tree(p, f.data, t, seed=9, kappa=64, mode=mode)
        out.append((sorted(r.rows), r.metrics.bytes, r.metrics.messages, r.metrics.rounds))
        if hasattr(t, "close"):
            t.close()
    assert out[0] == out[1]
    assert out[0][0] == _expect(f)


def test_socket_and_inprocess_agree():
    f, p = _plan("q1", 3, 6, 0.5, seed=2)
    res = []
    for kind in ("inprocess", "socket"):
        t = make_transport(kind, 3)
        r = en.run_tree(p, f.data, t, seed=3, kappa=64)
        res.append((r.rows, r.metrics.total_bytes, r.metrics.rounds))
        if hasattr(t, "close"):
            t.close()
    assert res[0] == res[1]


def test_unknown_mode_rejected():
    f, p = _plan("q1", 2, 4)
    with pytest.raises(en.EngineError):
        en.run_tree(p, f.data, mode="warp")


def test_over_bound_input_rejected_before_any_traffic():
    f, p = _plan("q1", 2, 4)
    data = dict(f.data)
    data[("diagnoses", 0)] = data[("diagnoses", 0)] * 2
    t = make_transport("inprocess", 2)
    with pytest.raises(sf.BoundError):
        en.run_tree(p, data, t)
    assert t.total_bytes == 0


def test_inputs_must_stay_wrapped():
    f, p = _plan("q1", 2, 4)
    inputs = en.local_phase(p, f.data)
    assert all(isinstance(v, Plaintext) for v in inputs.values())
    raw = {k: v.value for k, v in inputs.items()}
    with pytest.raises(en.EngineError, match="Plaintext"):
        en.execute(p.root, raw, make_transport("inprocess", 2), kappa=64)


def test_no_frame_carries_a_raw_input():
    f, p = _plan("q1", 3, 8, 0.5, seed=4)
    inputs = en.local_phase(p, f.data)
    t = make_transport("inprocess", 3)
    t.log = []
    en.execute(p.root, inputs, t, seed=1, kappa=64)
    for label, pt in inputs.items():
        width = p.local_for(label).layout.width * p.local_for(label).bound
        raw = pt.value.to_bytes((width + 7) // 8, "little")
        assert all(raw not in fr.payload for fr in t.log)


# -- hand-built two-level tree ---------------------------------------------------------

def _xor_child(name="child"):
    b = Builder(name)
    x = b.alloc_input(0, 8, "a")
    y = b.alloc_input(1, 8, "b")
    b.set_output("out", [b.XOR(i, j) for i, j in zip(x.wires, y.wires)])
    return b.finish()


def _and_parent(child_name="child"):
    b = Builder("parent")
    c = b.alloc_input(SolderSource(child_name), 8, child_name)
    d = b.alloc_input(2, 8, "d")
    b.set_output("out", [b.AND(i, j) for i, j in zip(c.wires, d.wires)])
    return b.finish()


def _tree(parent_parties=(0, 1, 2, 3)):
    child = SimpleNamespace(circuit=_xor_child(), parties=(0, 1), inputs=[("a", 0), ("b", 1)])
    root = SimpleNamespace(circuit=_and_parent(), parties=parent_parties,
                           inputs=[("child", child), ("d", 2)])
    return root


@pytest.mark.parametrize("seed", range(8))
def test_two_party_child_into_four_party_parent(seed):
    rng = random.Random(seed)
    a, b, d = (rng.randrange(256) for _ in range(3))
    t = make_transport("inprocess", 4)
    bits, metrics = en.execute(_tree(), {"a": Plaintext(a), "b": Plaintext(b), "d": Plaintext(d)},
                               t, seed=seed, kappa=64)
    assert en.bits_to_value(bits) == (a ^ b) & d
    assert metrics.rounds == t.round
    # party 3 never holds a leaf, yet takes part in the parent unit
    assert t.messages.get((3, 0), 0) > 0


def test_solder_roundtrip_unmasks_to_child_output():
    t = make_transport("inprocess", 4)
    rng = np.random.default_rng(0)
    child = en.garble_unit(_xor_child(), (0, 1), t, rng, 64)
    parent = en.garble_unit(_and_parent(), (0, 1, 2, 3), t, rng, 64)
    clear = rng.integers(0, 2, 8, dtype=np.uint8)
    bhat_v = clear ^ child.lam["out"].value()
    mv = en.solder_edge(child, bhat_v, parent, t)
    assert np.array_equal(mv.bits ^ parent.lam["child"].value(), clear)


def test_kappa_128_also_correct():
    f, p = _plan("q1", 3, 6, 0.5, seed=8)
    assert sorted(en.run_tree(p, f.data, seed=1, kappa=128).rows) == _expect(f)


def test_masks_are_uniform():
    # each wire mask and each masked input bit should look like a fair coin
    c = _xor_child()
    ones = np.zeros(16)
    hat_ones = np.zeros(8)
    trials = 400
    for s in range(trials):
        t = make_transport("inprocess", 2)
        u = en.garble_unit(c, (0, 1), t, en.unit_rng(s, "child"), 64)
        ones[:8] += u.lam["a"].value()
        ones[8:] += u.lam["out"].value()
        hat_ones += en.inject_input(u, "a", 0, Plaintext(0xFF), t).bits
    for k in list(ones) + list(hat_ones):
        assert abs(k - trials / 2) < 4 * (trials / 4) ** 0.5


def test_unit_rng_depends_on_seed_and_name():
    a = en.unit_rng(1, "u0-1").integers(0, 1 << 62)
    assert a == en.unit_rng(1, "u0-1").integers(0, 1 << 62)
    assert a != en.unit_rng(2, "u0-1").integers(0, 1 << 62)
    assert a != en.unit_rng(1, "u2-3").integers(0, 1 << 62)


# -- trace replay fuzz -----------------------------------------------------------------------

def _record(p, f, seed=1):
    t = make_transport("inprocess", p.m)
    t.log = []
    r = en.run_tree(p, f.data, t, seed=seed, kappa=64)
    return r, t.log


def test_trace_dump_and_load():
    f, p = _plan("q1", 3, 4, 0.5, seed=2)
    _, frames = _record(p, f)
    recs = en.load_trace(en.dump_trace(frames))
    assert len(recs) == len(frames)
    for rec, fr in zip(recs, frames):
        assert (rec["sender"], rec["receiver"], rec["role"], rec["edge"], rec["payload"]) == \
            (fr.sender, fr.receiver, fr.role, fr.edge, fr.payload)


def test_replayed_bit_flips_abort():
    f, p = _plan("q1", 3, 4, 0.5, seed=2)
    honest, frames = _record(p, f)
    rng = random.Random(20261015)
    targets = [k for k, fr in enumerate(frames) if fr.payload]
    aborted = inert = 0
    for _ in range(60):
        k = rng.choice(targets)
        bit = rng.randrange(8 * len(frames[k].payload))
        t = make_transport("inprocess", p.m)
        t.tamper = en.bit_flipper(k, bit)
        try:
            r = en.run_tree(p, f.data, t, seed=1, kappa=64)
        except ProtocolAbort:
            aborted += 1
            continue
        # a flipped delta multiplies an all-zero share vector and changes nothing
        assert frames[k].role == "delta", (k, frames[k].role)
        assert r.rows == honest.rows
        inert += 1
    assert aborted >= 50


def test_bit_flipper_only_touches_its_frame():
    hook = en.bit_flipper(1, 3)
    from soldertree.transport import Frame
    a = hook(Frame("e", 0, 1, "mac", b"\x00", 1))
    b = hook(Frame("e", 0, 1, "mac", b"\x00", 1))
    assert a.payload == b"\x00" and b.payload == b"\x08"
