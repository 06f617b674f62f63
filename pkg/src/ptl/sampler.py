"""Temperature-weighted candidate selection without replacement.

Gap scores become sampling weights exp(−gap/τ); candidates are drawn
without replacement with the marginal law of successive weighted draws
(Plackett–Luce). The draw is realized with Gumbel-perturbed keys in the
log-weight domain, so tiny temperatures never underflow: the perturbed key
is −gap/τ plus standard Gumbel noise and the top n keys win.

The generator is Philox (4x64, counter-based), keyed through numpy's
SeedSequence — a fixed, documented algorithm whose stream does not depend
on the platform, so manifests reproduce everywhere.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import EmptyPool, PoolTooLarge
from .gap import GapScore

DEFAULT_TAU = 5.0
DEFAULT_N = 100

# Exact inclusion probabilities enumerate permutation prefixes; factorial
# growth caps the pool size.
ENUMERATION_LIMIT = 12


@dataclass(frozen=True)
class SamplerConfig:
    tau: float = DEFAULT_TAU
    n: int = DEFAULT_N
    seed: int = 0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be > 0")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not (0 <= self.seed < 2**64):
            raise ValueError("seed must fit in unsigned 64 bits")


def weight(gap: float, tau: float) -> float:
    """Sampling weight exp(−gap/τ): 1 at zero gap, decaying with the gap."""
    if gap < 0:
        raise ValueError("gap must be nonnegative")
    if not tau > 0:
        raise ValueError("tau must be > 0")
    return float(np.exp(-gap / tau))


def gumbel_keys(gaps: np.ndarray, tau: float, seed: int) -> np.ndarray:
    """Perturbed log-weights −gap/τ + Gumbel(0,1) for one seeded draw."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    u = rng.random(len(gaps))
    with np.errstate(divide="ignore"):
        noise = -np.log(-np.log(u))
    return -gaps / tau + noise


def select_candidates(scores: Sequence[GapScore], cfg: SamplerConfig) -> list[int]:
    """Draw min(n, pool) distinct ids, weighted by exp(−gap/τ).

    Deterministic for a fixed seed; equal perturbed keys break toward the
    smaller instance_id. The returned list is sorted by instance_id so
    manifests are stable regardless of draw order. A pool smaller than n is
    returned whole (the caller records the shortfall).
    """
    if not scores:
        raise EmptyPool("no candidates to select from")
    ids = np.array([s.instance_id for s in scores], dtype=np.uint64)
    if len(np.unique(ids)) != len(ids):
        raise ValueError("instance_ids must be unique")
    if len(scores) <= cfg.n:
        return sorted(int(i) for i in ids)

    gaps = np.array([s.gap for s in scores], dtype=np.float64)
    keys = gumbel_keys(gaps, cfg.tau, cfg.seed)
    # lexsort: primary key last — descending perturbed key, ties by id.
    order = np.lexsort((ids, -keys))
    chosen = ids[order[: cfg.n]]
    return sorted(int(i) for i in chosen)


def inclusion_probabilities(weights: Sequence[float], n: int) -> list[float]:
    """Exact top-n inclusion probability per item under successive
    weighted draws without replacement.

    Aggregates the probability of every ordered prefix of length n (grouped
    by the set drawn so far, which is exact: the continuation only depends
    on the remaining weight mass). Serves as the independent oracle for
    :func:`select_candidates`.
    """
    m = len(weights)
    if m > ENUMERATION_LIMIT:
        raise PoolTooLarge(f"enumeration limited to {ENUMERATION_LIMIT} items, got {m}")
    if not (1 <= n <= m):
        raise ValueError(f"n must be in 1..{m}, got {n}")
    w = [float(x) for x in weights]
    if any(x <= 0 for x in w):
        raise ValueError("weights must be strictly positive")
    total = sum(w)

    prefix_prob: dict[int, float] = {0: 1.0}
    for _ in range(n):
        nxt: dict[int, float] = defaultdict(float)
        for mask, p in prefix_prob.items():
            remaining = total - sum(w[i] for i in range(m) if mask >> i & 1)
            for i in range(m):
                if not mask >> i & 1:
                    nxt[mask | (1 << i)] += p * w[i] / remaining
        prefix_prob = dict(nxt)

    included = [0.0] * m
    for mask, p in prefix_prob.items():
        for i in range(m):
            if mask >> i & 1:
                included[i] += p
    return included
