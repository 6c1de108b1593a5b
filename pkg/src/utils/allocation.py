# -*- coding: UTF-8 -*-

"""
Key-norm driven query-head allocation.

KDGQA recomputes the allocation from the key-head norms on every forward pass;
DGQA reallocates only at window boundaries from a per-layer norm cache, using
either the absolute change of the norms or an exponential moving average.
Allocation arithmetic is exact (``fractions.Fraction``) so the floor of the
proportional split never depends on float rounding.
"""

import math
import logging
from dataclasses import dataclass, replace
from fractions import Fraction
from numbers import Real
from typing import List, Optional, Sequence, Tuple

import torch

from utils.constants import DEFAULT_ALPHA, DEFAULT_WINDOW
from utils.exceptions import AllocationError, ContractError, ValidationError

DIFFERENCE = "difference"
EMA = "ema"


@dataclass(frozen=True)
class HeadNorms:
    """L2 norm of each (pooled) key head of one layer."""

    n: Tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "n", tuple(float(v) for v in self.n))
        if len(self.n) == 0:
            raise ContractError("HeadNorms needs at least one key head")
        if any(not v >= 0.0 for v in self.n):
            raise ContractError("key-head norms must be nonnegative, got {}".format(self.n))

    @property
    def G(self) -> int:
        return len(self.n)


@dataclass(frozen=True)
class AllocationVector:
    """Number of query heads served by each key-value head, left to right."""

    q: Tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "q", tuple(int(v) for v in self.q))
        if len(self.q) == 0 or min(self.q) < 1:
            raise AllocationError(
                "every key head needs at least one query head, got {}".format(self.q)
            )

    @property
    def G(self) -> int:
        return len(self.q)

    @property
    def n_q(self) -> int:
        return sum(self.q)

    @classmethod
    def uniform(cls, n_q: int, G: int) -> "AllocationVector":
        """N_q // G each, the remainder going to the lowest indices."""
        if G < 1 or n_q < G:
            raise AllocationError(
                "cannot give {} key heads at least one of {} query heads".format(G, n_q)
            )
        base, rest = divmod(n_q, G)
        return cls(tuple(base + (1 if g < rest else 0) for g in range(G)))

    def is_uniform(self) -> bool:
        return self == AllocationVector.uniform(self.n_q, self.G)

    def to_list(self) -> List[int]:
        return list(self.q)


@dataclass
class NormCache:
    """
    Cached key-head norms c_g of one layer, carried from window to window.
    ``step`` counts the window updates applied so far.
    """

    c: List[float]
    alpha: float = DEFAULT_ALPHA
    window: int = DEFAULT_WINDOW
    step: int = 0
    mode: str = EMA
    initialized: bool = False

    def __post_init__(self):
        self.c = [float(v) for v in self.c]
        if not 0.0 < self.alpha <= 1.0:
            raise ValidationError("alpha must lie in (0, 1], got {}".format(self.alpha))
        if self.window < 1:
            raise ValidationError("window must be >= 1, got {}".format(self.window))
        if self.mode not in (DIFFERENCE, EMA):
            raise ValidationError("unknown cache mode {}".format(self.mode))

    @classmethod
    def empty(cls, G: int, alpha=DEFAULT_ALPHA, window=DEFAULT_WINDOW, mode=EMA):
        return cls(c=[0.0] * G, alpha=alpha, window=window, mode=mode)

    @property
    def G(self) -> int:
        return len(self.c)

    def to_dict(self) -> dict:
        return dict(
            c=list(self.c),
            alpha=self.alpha,
            window=self.window,
            step=self.step,
            mode=self.mode,
            initialized=self.initialized,
        )

    @classmethod
    def from_dict(cls, d: dict) -> "NormCache":
        return cls(**d)


"""
KDGQA: per-pass allocation
"""


def key_head_norms(keys: torch.Tensor) -> HeadNorms:
    """
    :param keys: [batch, tokens, G, d_k]
    :return: norm of each head's key vector averaged over batch and tokens
    """
    if keys.dim() != 4 or min(keys.shape) < 1:
        raise ContractError(
            "keys must be [batch, tokens, G, d_k], got {}".format(tuple(keys.shape))
        )
    with torch.no_grad():
        pooled = keys.detach().to(torch.float64).mean(dim=(0, 1))
        norms = torch.linalg.vector_norm(pooled, dim=-1)
    return HeadNorms(tuple(norms.tolist()))


def minmax_scale(norms: HeadNorms) -> List[Fraction]:
    """Min-max scaling to [0, 1]; a constant vector maps to all ones."""
    values = [Fraction(v) for v in norms.n]
    low, high = min(values), max(values)
    if high == low:
        return [Fraction(1)] * len(values)
    return [(v - low) / (high - low) for v in values]


def raw_split(d: Sequence[Real], n_q: int) -> List[int]:
    """floor(d_g * N_q / sum(d)) before any repair; zeros when sum(d) == 0."""
    exact = [Fraction(v) for v in d]
    total = sum(exact, Fraction(0))
    if total == 0:
        return [0] * len(exact)
    return [math.floor(v * n_q / total) for v in exact]


def proportional_split(d: Sequence[Real], n_q: int) -> AllocationVector:
    """
    Proportional query split repaired into an exact partition of N_q:
    leftover queries go one at a time by descending fractional remainder, then
    every empty group takes one query from the current largest group.
    Ties always go to the lower index.
    """
    G = len(d)
    if G < 1 or n_q < G:
        raise AllocationError(
            "cannot give {} key heads at least one of {} query heads".format(G, n_q)
        )
    exact = [Fraction(v) for v in d]
    if any(v < 0 for v in exact):
        raise ContractError("importance values must be nonnegative, got {}".format(d))
    total = sum(exact, Fraction(0))
    if total == 0:
        return AllocationVector.uniform(n_q, G)

    shares = [v * n_q / total for v in exact]
    q = [math.floor(s) for s in shares]
    leftover = n_q - sum(q)
    by_remainder = sorted(range(G), key=lambda g: (-(shares[g] - q[g]), g))
    for g in by_remainder[:leftover]:
        q[g] += 1

    while 0 in q:
        donor = max(range(G), key=lambda g: (q[g], -g))
        q[donor] -= 1
        q[q.index(0)] += 1
    return AllocationVector(tuple(q))


def kdgqa_allocate(keys: torch.Tensor, n_q: int) -> AllocationVector:
    return proportional_split(minmax_scale(key_head_norms(keys)), n_q)


"""
DGQA: windowed reallocation
"""


def dgqa_update(cache: NormCache, current: HeadNorms) -> Tuple[List[float], NormCache]:
    """
    :return: importance d and the updated cache (the input cache is not modified)
    """
    if cache.G != current.G:
        raise ContractError(
            "norm cache holds {} heads but {} norms were given".format(cache.G, current.G)
        )
    n = list(current.n)
    if not cache.initialized:
        # first window: seed the cache, all-equal importance -> uniform split
        return [1.0] * current.G, replace(cache, c=n, initialized=True, step=cache.step + 1)
    if cache.mode == DIFFERENCE:
        d = [abs(n_g - c_g) for n_g, c_g in zip(n, cache.c)]
        return d, replace(cache, c=n, step=cache.step + 1)
    blended = [cache.alpha * n_g + (1.0 - cache.alpha) * c_g for n_g, c_g in zip(n, cache.c)]
    return list(blended), replace(cache, c=blended, step=cache.step + 1)


def window_scheduler(
    step: int,
    cache: NormCache,
    keys: torch.Tensor,
    last_alloc: AllocationVector,
    layer: int = 0,
) -> Tuple[AllocationVector, NormCache, Optional[dict]]:
    """
    Reallocate at window boundaries (step % W == 0), otherwise keep last_alloc.
    :return: allocation, cache, and the allocation event (None between boundaries)
    """
    if step % cache.window != 0:
        return last_alloc, cache, None
    norms = key_head_norms(keys)
    d, cache = dgqa_update(cache, norms)
    alloc = proportional_split(d, last_alloc.n_q)
    event = {
        "step": int(step),
        "layer": int(layer),
        "alloc": alloc.to_list(),
        "norms": list(norms.n),
        "importance": [float(v) for v in d],
    }
    return alloc, cache, event


class WindowScheduler(object):
    """
    DGQA allocation state of one layer. Owned by a single training loop;
    frozen schedulers (evaluation) keep returning the last training allocation.
    """

    def __init__(
        self,
        n_heads: int,
        n_kv_heads: int,
        window: int = DEFAULT_WINDOW,
        alpha: float = DEFAULT_ALPHA,
        mode: str = EMA,
        layer: int = 0,
    ):
        self.layer = layer
        self.cache = NormCache.empty(n_kv_heads, alpha=alpha, window=window, mode=mode)
        self.allocation = AllocationVector.uniform(n_heads, n_kv_heads)
        self.last_event_step = None

    def observe(self, step: int, keys: torch.Tensor) -> Tuple[AllocationVector, Optional[dict]]:
        if self.last_event_step == step:
            return self.allocation, None
        alloc, cache, event = window_scheduler(
            step, self.cache, keys, self.allocation, self.layer
        )
        self.allocation, self.cache = alloc, cache
        if event is not None:
            self.last_event_step = step
            logging.debug("layer {} reallocated at step {}: {}".format(self.layer, step, event["alloc"]))
        return alloc, event

    def state_dict(self) -> dict:
        return {
            "cache": self.cache.to_dict(),
            "alloc": self.allocation.to_list(),
            "last_event_step": self.last_event_step,
        }

    def load_state_dict(self, state: dict):
        cache = NormCache.from_dict(state["cache"])
        alloc = AllocationVector(tuple(state["alloc"]))
        if cache.G != self.cache.G or alloc.n_q != self.allocation.n_q:
            raise ContractError(
                "scheduler state for G={} / N_q={} does not fit G={} / N_q={}".format(
                    cache.G, alloc.n_q, self.cache.G, self.allocation.n_q
                )
            )
        self.cache, self.allocation = cache, alloc
        self.last_event_step = state.get("last_event_step")
