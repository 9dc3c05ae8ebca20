import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from harness import solder_case
from soldertree.authshare import (
    PartySetError, ProtocolAbort, _times, audit, check_mac, deal_authshare, fresh_keys,
    key_deltas, keyswitch, random_words, reconstruct_verify, solder, words, xor_const, xor_shares,
)
from soldertree.engine import bit_flipper


def _deal(seed, n=16, parties=(0, 1, 2), kappa=64):
    rng = np.random.default_rng(seed)
    keys = fresh_keys(parties, kappa, rng)
    x = rng.integers(0, 2, n, dtype=np.uint8)
    return deal_authshare(x, parties, keys, rng), x, keys, rng


def test_words():
    assert words(64) == 1 and words(128) == 2
    with pytest.raises(ValueError):
        words(96)


def test_deal_reconstructs_and_audits():
    a, x, _, _ = _deal(1)
    assert audit(a)
    assert np.array_equal(reconstruct_verify(a), x)


def test_deal_needs_two_parties():
    rng = np.random.default_rng(0)
    keys = fresh_keys([0], 64, rng)
    with pytest.raises(PartySetError):
        deal_authshare([1, 0], [0], keys, rng)


def test_share_marginals_uniform():
    # chi-square on each party's share of the bit 1 over 1000 deals
    rng = np.random.default_rng(7)
    parties = (0, 1, 2)
    keys = fresh_keys(parties, 64, rng)
    a = deal_authshare(np.ones(1000, dtype=np.uint8), parties, keys, rng)
    for p in parties:
        ones = int(a.view(p).bits.sum())
        chi2 = (ones - 500) ** 2 / 500 + (500 - ones) ** 2 / 500
        assert chi2 < 10.83          # p = 0.001, one degree of freedom


@pytest.mark.parametrize("seed", range(20))
def test_xor_shares_is_local_and_correct(seed):
    a, x, keys, rng = _deal(seed)
    y = rng.integers(0, 2, 16, dtype=np.uint8)
    b = deal_authshare(y, a.parties, keys, rng)
    c = xor_shares(a, b)
    assert audit(c)
    assert np.array_equal(reconstruct_verify(c), x ^ y)
    k = rng.integers(0, 2, 16, dtype=np.uint8)
    d = xor_const(a, k)
    assert audit(d)
    assert np.array_equal(reconstruct_verify(d), x ^ k)


def test_xor_rejects_mixed_keys():
    a, _, _, rng = _deal(3)
    other = fresh_keys(a.parties, 64, rng)
    b = deal_authshare(np.zeros(16, dtype=np.uint8), a.parties, other, rng)
    with pytest.raises(PartySetError):
        xor_shares(a, b)


def test_keyswitch_identity_on_one_bit():
    a, _, keys, rng = _deal(4, n=32)
    new = fresh_keys(a.parties, 64, rng)
    s = keyswitch(a, key_deltas(keys, new, a.parties))
    assert audit(s)
    for i in a.parties:
        for j in a.parties:
            if i == j:
                continue
            vi, vj = s.view(i), s.view(j)
            ones = vi.bits == 1
            # M'_j[x^i] = K_j[x^i] xor new Delta_j wherever x^i = 1
            assert np.array_equal(vi.mac[j][ones], vj.key[i][ones] ^ new.delta[j][None, :])


def test_stale_mac_aborts():
    a, _, _, _ = _deal(5)
    a.view(1).bits[3] ^= 1
    assert not audit(a)
    with pytest.raises(ProtocolAbort):
        reconstruct_verify(a)


def test_random_forgeries_rejected():
    a, _, _, rng = _deal(6, n=1, parties=(0, 1))
    verifier = a.view(0)
    bit = a.view(1).bits ^ 1
    macs = random_words(rng, (10_000, 1, 1))
    accepted = sum(check_mac(verifier, 1, bit, m) for m in macs)
    assert accepted == 0


@pytest.mark.parametrize("extra", [1, 2, 4])
@pytest.mark.parametrize("seed", range(10))
def test_solder_transfers_value(seed, extra):
    case = solder_case(seed, 24, extra)
    out = solder("e", case.v, case.bhat_v, case.u, case.transport)
    lam_u = case.u.value()
    for p in case.p2:
        assert np.array_equal(out[p] ^ lam_u, case.b)


def test_solder_round_and_role_accounting():
    case = solder_case(11, 8, 2)
    t = case.transport
    t.log = []
    solder("e", case.v, case.bhat_v, case.u, t)
    assert t.round == 3
    roles = {(f.round, f.role) for f in t.log}
    assert {r for r, _ in roles} == {1, 2, 3}
    assert {role for r, role in roles if r == 1} == {"bhat-share", "delta", "lambda-reveal", "mac"}
    assert {role for r, role in roles if r == 2} == {"mac"}
    assert {role for r, role in roles if r == 3} == {"bhat-share"}
    assert t.pending() == 0


def test_solder_rejects_non_subset():
    case = solder_case(12, 8, 1)
    with pytest.raises(PartySetError):
        solder("e", case.u, case.bhat_v, case.v, case.transport)


def test_keyswitch_and_xor_send_nothing():
    case = solder_case(13, 8, 1)
    t = case.transport
    xor_shares(case.u, case.u)
    xor_const(case.u, 1)
    assert t.total_bytes == 0 and t.round == 0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from([1, 2, 4]), st.integers(1, 13), st.data())
def test_any_solder_bit_flip_aborts(seed, extra, n, data):
    honest = solder_case(seed, n, extra)
    honest.transport.log = []
    solder("e", honest.v, honest.bhat_v, honest.u, honest.transport)
    frames = honest.transport.log
    k = data.draw(st.integers(0, len(frames) - 1))
    bit = data.draw(st.integers(0, 8 * len(frames[k].payload) - 1))
    case = solder_case(seed, n, extra)
    case.transport.tamper = bit_flipper(k, bit)
    try:
        out = solder("e", case.v, case.bhat_v, case.u, case.transport)
    except ProtocolAbort:
        return
    # a delta is only ever multiplied by the receiver's own child shares;
    # when those are all zero the flip is inert
    f = frames[k]
    assert f.role == "delta"
    assert not case.v.view(f.receiver).bits.any()
    lam_u = case.u.value()
    assert all(np.array_equal(out[p] ^ lam_u, case.b) for p in case.p2)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 40))
def test_mac_invariant_after_operations(seed, n):
    a, x, keys, rng = _deal(seed, n=n)
    b = deal_authshare(rng.integers(0, 2, n, dtype=np.uint8), a.parties, keys, rng)
    c = xor_const(xor_shares(a, b), rng.integers(0, 2, n, dtype=np.uint8))
    assert audit(c)
    new = fresh_keys(a.parties, 64, rng)
    assert audit(keyswitch(c, key_deltas(keys, new, a.parties)))


def test_times_matches_definition():
    bits = np.array([0, 1, 1], dtype=np.uint8)
    d = np.array([0xDEADBEEF], dtype=np.uint64)
    assert _times(bits, d).tolist() == [[0], [0xDEADBEEF], [0xDEADBEEF]]
