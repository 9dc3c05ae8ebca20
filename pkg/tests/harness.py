"""Shared set-up for protocol tests and the acceptance suite."""

from dataclasses import dataclass

import numpy as np

from soldertree.authshare import AuthShare, deal_authshare, fresh_keys
from soldertree.transport import Transport


@dataclass
class SolderCase:
    v: AuthShare
    bhat_v: np.ndarray
    u: AuthShare
    b: np.ndarray
    p1: tuple
    p2: tuple
    transport: Transport


def party_sets(rng: np.random.Generator, extra: int, max_inner: int = 3):
    inner = int(rng.integers(2, max_inner + 1))
    total = inner + extra
    ids = rng.permutation(total)
    p1 = tuple(sorted(int(x) for x in ids[:inner]))
    p2 = tuple(range(total))
    return p1, p2


def solder_case(seed: int, n: int, extra: int, kappa: int = 64) -> SolderCase:
    rng = np.random.default_rng(seed)
    p1, p2 = party_sets(rng, extra)
    k1 = fresh_keys(p1, kappa, rng)
    k2 = fresh_keys(p2, kappa, rng)
    b = rng.integers(0, 2, n, dtype=np.uint8)
    lam_v = rng.integers(0, 2, n, dtype=np.uint8)
    lam_u = rng.integers(0, 2, n, dtype=np.uint8)
    v = deal_authshare(lam_v, p1, k1, rng)
    u = deal_authshare(lam_u, p2, k2, rng)
    return SolderCase(v, b ^ lam_v, u, b, p1, p2, Transport(len(p2)))
