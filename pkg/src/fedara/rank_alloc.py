"""Budget schedule, triplet importance, local masks and server arbitration.

A rank mask is a list with one boolean vector per adapter site.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .adapters import Adapter
from .numerics import ContractError

RankMask = list  # list[np.ndarray[bool]], one entry per site


@dataclass(frozen=True)
class BudgetSchedule:
    """Cubic decay of the total triplet budget from ``b0`` to ``bT``.

    Constant ``b0`` for the first ``t_w`` rounds, constant ``bT`` for the
    last ``t_f`` rounds, cubic in between.
    """

    b0: int
    bT: int
    t_w: int
    t_f: int
    T: int

    def __post_init__(self):
        if not 0 <= self.bT <= self.b0:
            raise ContractError(f"need 0 <= bT <= b0, got bT={self.bT}, b0={self.b0}")
        if not 0 <= self.t_w < self.T - self.t_f:
            raise ContractError(
                f"need 0 <= t_w < T - t_f, got t_w={self.t_w}, T={self.T}, t_f={self.t_f}"
            )
        if self.t_f < 0:
            raise ContractError("t_f must be non-negative")


def budget(schedule: BudgetSchedule, t: int) -> int:
    s = schedule
    if not 0 <= t <= s.T:
        raise ContractError(f"round {t} outside [0, {s.T}]")
    if t < s.t_w:
        return s.b0
    if t >= s.T - s.t_f:
        return s.bT
    # exact integer floor of (b0 - bT) * (1 - p)^3, p = (t - t_w) / span
    span = s.T - s.t_f - s.t_w
    remaining = span - (t - s.t_w)
    return s.bT + ((s.b0 - s.bT) * remaining**3) // span**3


def triplet_importance(adapter: Adapter) -> np.ndarray:
    """Magnitude score per triplet; dead slots get ``-inf``."""
    if not adapter.has_e:
        raise ContractError("triplet importance is defined for truncated-SVD adapters")
    score = (
        np.abs(adapter.E)
        + np.abs(adapter.B).sum(axis=0) / adapter.d_out
        + np.abs(adapter.A).sum(axis=1) / adapter.d_in
    )
    return np.where(adapter.alive, score, -np.inf)


def gen_local_mask(adapters: Sequence[Adapter], t: int, schedule: BudgetSchedule) -> RankMask:
    """Keep the globally top-``budget(t)`` alive triplets across all sites.

    Ties go to the lower (site, triplet) index.
    """
    scores = np.concatenate([triplet_importance(a) for a in adapters])
    alive = np.concatenate([a.alive for a in adapters])
    k = min(budget(schedule, t), int(alive.sum()))
    keep = np.zeros(scores.size, dtype=bool)
    candidates = np.flatnonzero(alive)
    order = np.lexsort((candidates, -scores[candidates]))
    keep[candidates[order[:k]]] = True
    return split_flat(keep, [a.alive.size for a in adapters])


def arbitrate(local_masks: Sequence[RankMask], threshold: float, prev_global: RankMask) -> RankMask:
    """Vote-fraction threshold (strictly greater), ANDed with the previous global mask."""
    if len(local_masks) == 0:
        raise ContractError("arbitration needs at least one client mask")
    if not 0 <= threshold < 1:
        raise ContractError(f"threshold must be in [0, 1), got {threshold}")
    prev = flatten(prev_global)
    votes = np.zeros(prev.size, dtype=np.int64)
    for m in local_masks:
        flat = flatten(m)
        if flat.shape != prev.shape:
            raise ContractError("local mask shape differs from the global mask")
        votes += flat
    keep = prev & (votes / len(local_masks) > threshold)
    return split_flat(keep, [len(m) for m in prev_global])


def flatten(mask: RankMask) -> np.ndarray:
    return np.concatenate([np.asarray(m, dtype=bool) for m in mask])


def split_flat(flat: np.ndarray, sizes: Sequence[int]) -> RankMask:
    cuts = np.cumsum(sizes)[:-1]
    return [part.copy() for part in np.split(np.asarray(flat, dtype=bool), cuts)]


def mask_count(mask: RankMask) -> int:
    return int(sum(np.count_nonzero(m) for m in mask))


def is_submask(inner: RankMask, outer: RankMask) -> bool:
    return not np.any(flatten(inner) & ~flatten(outer))
