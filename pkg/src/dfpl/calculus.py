"""Irreversibility probability algebra and the high-order residual stencils.

Labels use 0 = healthy, 1 = diseased.  Because disease cannot revert, the
probability of being diseased at the horizon splits into "already diseased
now" plus "healthy now and progresses":

    P(y_T = 1) = p_cur + (1 - p_cur) * p_prog

All functions here are pure and network-free; the ``*_t`` variants apply
the same algebra to autodiff tensors so losses can backpropagate through it.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Generic, Sequence, TypeVar

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOG_CLAMP = 1e-12

V = TypeVar("V")


def _check_prob(name: str, p) -> None:
    arr = np.asarray(p, dtype=float)
    if not np.all((arr >= 0.0) & (arr <= 1.0)):
        raise ValueError(f"{name}={p!r} is not a probability in [0, 1]")


def combine_current_progression(p_cur, p_prog):
    """Works elementwise on arrays as well as on scalars."""
    _check_prob("p_cur", p_cur)
    _check_prob("p_prog", p_prog)
    return p_cur + (1.0 - p_cur) * p_prog


def current_high_order(p_cur_at_tk: float, p_fut_at_tj: Sequence[float], k: int) -> float:
    """Current-state probability from ``k`` views: f_cur at t_K and f_fut at t_1..t_{K-1}."""
    if k < 1 or len(p_fut_at_tj) != k - 1:
        raise ValueError(f"expected {k - 1} earlier-time probabilities for K={k}, got {len(p_fut_at_tj)}")
    _check_prob("p_cur_at_tk", p_cur_at_tk)
    for p in p_fut_at_tj:
        _check_prob("p_fut", p)
    return (p_cur_at_tk + float(np.sum(p_fut_at_tj))) / k


def combine_high_order(p_currentstate: float, p_prog: float) -> float:
    return combine_current_progression(p_currentstate, p_prog)


def ensemble_predict(p_combined: float, p_cur_on_generated: float, p_fut_list: Sequence[float],
                     k: int | None = None) -> float:
    """Mean of the K + 2 ensemble members; ``p_fut_list`` holds one entry per observed time."""
    if len(p_fut_list) < 1 or (k is not None and len(p_fut_list) != k):
        raise ValueError(f"expected {k or 'at least 1'} future-predictor probabilities, got {len(p_fut_list)}")
    terms = [p_combined, p_cur_on_generated, *p_fut_list]
    for p in terms:
        _check_prob("ensemble member", p)
    return float(np.sum(terms)) / len(terms)


# tensor forms used inside the losses


def combine_t(p_cur: Tensor, p_prog: Tensor) -> Tensor:
    healthy = ad.sub(Tensor(np.ones_like(p_cur.data)), p_cur)
    return ad.add(p_cur, ad.mul(healthy, p_prog))


def current_high_order_t(p_cur_at_tk: Tensor, p_fut_at_tj: Sequence[Tensor]) -> Tensor:
    total = p_cur_at_tk
    for p in p_fut_at_tj:
        total = ad.add(total, p)
    return ad.scale(total, 1.0 / (len(p_fut_at_tj) + 1))


def ensemble_t(p_combined: Tensor, p_cur_on_generated: Tensor, p_fut_list: Sequence[Tensor]) -> Tensor:
    total = ad.add(p_combined, p_cur_on_generated)
    for p in p_fut_list:
        total = ad.add(total, p)
    return ad.scale(total, 1.0 / (len(p_fut_list) + 2))


# ---------------------------------------------------------- residual stencils


@dataclass(frozen=True)
class ObservationTimes:
    times: tuple[int, ...]
    horizon: int

    def __post_init__(self):
        if not self.times:
            raise ValueError("need at least one observed time")
        if self.times[0] < 1 or any(b <= a for a, b in zip(self.times[:-1], self.times[1:])):
            raise ValueError(f"times must be strictly increasing positive integers: {self.times}")
        if self.horizon <= self.times[-1]:
            raise ValueError(f"horizon {self.horizon} must exceed last time {self.times[-1]}")

    @property
    def order(self) -> int:
        return len(self.times)

    @property
    def gap(self) -> int:
        return self.horizon - self.times[-1]


@dataclass
class ResidualSet(Generic[V]):
    """Ordered difference features; ``entries`` is a list of ``(order_j, value)``."""

    order: int
    entries: list[tuple[int, V]]

    def of_order(self, j: int) -> list[V]:
        return [v for o, v in self.entries if o == j]

    def values(self) -> list[V]:
        return [v for _, v in self.entries]


# A residual term is a difference of two differences: (A - B) - (C - D).
# Index 0 stands for the generated horizon feature; 1..K for observed times.
# None marks an absent half (order 1 terms are a single difference).


def stencil_indices(k: int) -> list[tuple[int, tuple[int, int, int | None, int | None]]]:
    """Index tuples of the order-1..K residual set, oldest first within each order.

    Terms that reference a time index below 1 are dropped.
    """
    if k < 1:
        raise ValueError(f"order K must be >= 1, got {k}")
    out = []
    # order 1: F~_T - F_{t_K} and F_{t_{K-i}} - F_{t_{K-i-1}}, i = 0..K-2
    first = [(0, k, None, None)] + [(k - i, k - i - 1, None, None) for i in range(k - 1)]
    out += [(1, term) for term in reversed(first)]
    for j in range(2, k + 1):
        terms = [(0, k + 2 - j, k, k + 1 - j)]
        for i in range(k - 1):
            terms.append((k - i, k - i + 1 - j, k - i - 1, k - i - j))
        kept = [t for t in terms if min(t[1:]) >= 1]
        out += [(j, term) for term in reversed(kept)]
    return out


def build_residual_set(f_observed: Sequence, f_generated_t, k: int) -> ResidualSet:
    """Residual set over arrays or tensors (anything supporting ``-``)."""
    if k <= 0:
        raise ValueError(f"order K must be >= 1, got {k}")
    if len(f_observed) != k:
        raise ValueError(f"expected {k} observed features, got {len(f_observed)}")
    shape = np.shape(f_generated_t.data if isinstance(f_generated_t, Tensor) else f_generated_t)
    for f in f_observed:
        s = np.shape(f.data if isinstance(f, Tensor) else f)
        if s != shape:
            raise ValueError(f"feature shape mismatch: {s} vs {shape}")
    feats = [f_generated_t, *f_observed]

    def diff(a, b):
        if isinstance(a, Tensor) or isinstance(b, Tensor):
            return ad.sub(a, b)
        return np.asarray(a) - np.asarray(b)

    entries = []
    for j, (a, b, c, d) in stencil_indices(k):
        value = diff(feats[a], feats[b])
        if c is not None:
            value = diff(value, diff(feats[c], feats[d]))
        entries.append((j, value))
    return ResidualSet(k, entries)


def residual_count(k: int) -> int:
    return len(stencil_indices(k))
