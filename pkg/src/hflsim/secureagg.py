"""Pairwise-masking secure aggregation inside one zone (simulation).

Updates are fixed-point encoded into 64-bit words. For each client pair i < j a mask
is expanded from a shared seed; i adds it and j subtracts it, so the masks cancel
in the modular sum and the super-node only learns the total.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from hflsim.errors import IncompleteSharesError, SaturationError
from hflsim.numkit import ParamVector


@dataclass(frozen=True)
class FixedPointCodec:
    frac_bits: int = 24
    # keep |encoded| below 2**headroom_bits so sums of many shares cannot wrap
    headroom_bits: int = 56

    @property
    def scale(self) -> float:
        return float(2**self.frac_bits)

    def encode(self, values: np.ndarray) -> np.ndarray:
        scaled = np.round(np.asarray(values, dtype=np.float64) * self.scale)
        limit = float(2**self.headroom_bits)
        if not np.all(np.abs(scaled) < limit):
            worst = float(np.max(np.abs(values)))
            raise SaturationError(f"value {worst:.6g} exceeds fixed-point range +-{limit / self.scale:.6g}")
        return scaled.astype(np.int64).view(np.uint64)

    def decode(self, words: np.ndarray) -> np.ndarray:
        return np.asarray(words, dtype=np.uint64).view(np.int64).astype(np.float64) / self.scale


@dataclass(frozen=True, eq=False)
class MaskedShare:
    client_id: int
    values: np.ndarray
    roster: tuple[int, ...]


def pair_mask(seed: int, size: int) -> np.ndarray:
    return np.random.PCG64(seed).random_raw(size).astype(np.uint64)


def message_count(num_clients: int) -> int:
    return num_clients * (num_clients - 1) // 2


def mask_shares(
    client_ids: Sequence[int],
    updates: Sequence[np.ndarray | ParamVector],
    codec: FixedPointCodec,
    rng: np.random.Generator,
) -> list[MaskedShare]:
    """One masked share per client. ``rng`` supplies the pairwise seeds, pair (i, j) in sorted order."""
    ids = [int(c) for c in client_ids]
    if len(ids) != len(updates):
        raise ValueError("one update per client id")
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate client ids")
    vectors = [u.values if isinstance(u, ParamVector) else np.asarray(u, dtype=np.float64) for u in updates]
    if not vectors:
        return []
    roster = tuple(sorted(ids))
    encoded = {c: codec.encode(v) for c, v in zip(ids, vectors)}
    if len(ids) == 1:
        warnings.warn("secure aggregation with a single client reveals its update", stacklevel=2)
        return [MaskedShare(ids[0], encoded[ids[0]], roster)]
    size = vectors[0].size
    shares = {c: encoded[c].copy() for c in ids}
    for a, i in enumerate(roster):
        for j in roster[a + 1 :]:
            mask = pair_mask(int(rng.integers(0, 2**63)), size)
            shares[i] += mask
            shares[j] -= mask
    return [MaskedShare(c, shares[c], roster) for c in ids]


def unmask_sum(shares: Sequence[MaskedShare], codec: FixedPointCodec, like: Optional[ParamVector] = None) -> ParamVector:
    """Modular sum of a complete share set, decoded to reals."""
    if not shares:
        raise IncompleteSharesError("no shares")
    roster = shares[0].roster
    present = sorted(s.client_id for s in shares)
    if any(s.roster != roster for s in shares) or tuple(present) != roster:
        missing = sorted(set(roster) - set(present))
        raise IncompleteSharesError(f"share set incomplete; missing clients {missing}")
    total = np.zeros_like(shares[0].values)
    for share in shares:
        total += share.values
    decoded = codec.decode(total)
    return like.like(decoded) if like is not None else ParamVector.flat(decoded, "sum")
