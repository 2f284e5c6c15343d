"""Block-selection rules: full sweep, essentially cyclic, randomized.

Index ``0`` denotes the shared variable and ``1..K`` the local blocks.  An
index set ``C^{t+1}`` is returned as a sorted tuple.  The first set
(``t = 0``) is always the full universe.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import NcadmmError


class ScheduleError(NcadmmError):
    """Malformed schedule or history."""


@dataclass(frozen=True, eq=False)
class Schedule:
    """Selection rule over ``{0..K}`` (or ``{1..K}`` when ``include_x0`` is false).

    ``kind`` is ``full``, ``cyclic`` or ``randomized``.  Cyclic schedules
    carry an explicit ``partition`` whose cells are visited in order; the
    randomized rule draws each index independently with probability
    ``p[i]`` and redraws when nothing was picked.
    """

    kind: str
    K: int
    T: int = 1
    partition: tuple = ()
    p: Optional[np.ndarray] = None
    p_min: float = 0.0
    seed: int = 0
    include_x0: bool = True

    @property
    def universe(self):
        return tuple(range(0 if self.include_x0 else 1, self.K + 1))

    def rng(self):
        return np.random.default_rng(self.seed)


def full_sweep(K, include_x0=True):
    if K < 1:
        raise ScheduleError("K must be at least 1")
    return Schedule("full", K, 1, include_x0=include_x0)


def cyclic(K, T=None, partition=None, include_x0=True):
    """Period-``T`` schedule.

    Without an explicit ``partition`` the universe is cut into ``T``
    contiguous cells of near-equal size.
    """
    if K < 1:
        raise ScheduleError("K must be at least 1")
    universe = list(range(0 if include_x0 else 1, K + 1))
    if partition is None:
        if T is None or T < 1 or T > len(universe):
            raise ScheduleError(f"period T={T} must lie in [1, {len(universe)}]")
        partition = [c.tolist() for c in np.array_split(universe, T)]
    cells = tuple(tuple(sorted(int(i) for i in cell)) for cell in partition)
    if any(len(c) == 0 for c in cells):
        raise ScheduleError("partition cells must be nonempty")
    if T is not None and T != len(cells):
        raise ScheduleError(f"partition has {len(cells)} cells, T={T}")
    covered = set().union(*map(set, cells))
    if covered != set(universe):
        raise ScheduleError(f"partition covers {sorted(covered)}, expected {universe}")
    return Schedule("cyclic", K, len(cells), cells, include_x0=include_x0)


def randomized(K, p=0.5, seed=0, p_min=None, include_x0=True):
    """Independent Bernoulli selection with per-index probabilities ``p``."""
    if K < 1:
        raise ScheduleError("K must be at least 1")
    size = K + 1 if include_x0 else K
    p = np.broadcast_to(np.asarray(p, dtype=float), (size,)).copy()
    if p_min is None:
        p_min = float(p.min())
    if not p_min > 0:
        raise ScheduleError("p_min must be positive")
    if np.any(p < p_min) or np.any(p > 1):
        raise ScheduleError(f"probabilities {p} must lie in [p_min={p_min}, 1]")
    return Schedule("randomized", K, 1, p=p, p_min=float(p_min), seed=int(seed),
                    include_x0=include_x0)


def next_blocks(schedule: Schedule, t: int, rng=None):
    """Index set ``C^{t+1}`` selected after iteration ``t``."""
    if t < 0:
        raise ScheduleError("t must be nonnegative")
    if t == 0 or schedule.kind == "full":
        return schedule.universe
    if schedule.kind == "cyclic":
        return schedule.partition[t % schedule.T]
    if schedule.kind == "randomized":
        if rng is None:
            raise ScheduleError("randomized schedules need a generator")
        universe = np.asarray(schedule.universe)
        while True:
            pick = rng.random(universe.size) < schedule.p
            if pick.any():
                return tuple(int(i) for i in universe[pick])
    raise ScheduleError(f"unknown schedule kind {schedule.kind!r}")


def last_update_index(history: Sequence, k: int, t: int):
    """Largest ``r <= t`` with ``k`` in ``C^r``; ``history[r - 1]`` is ``C^r``."""
    if t > len(history):
        raise ScheduleError(f"history has {len(history)} entries, t={t}")
    for r in range(t, 0, -1):
        if k in history[r - 1]:
            return r
    raise ScheduleError(f"index {k} was never selected up to t={t}")


def verify_essential_cyclicity(history: Sequence, T: int, indices=None):
    """True iff every window of ``T`` consecutive sets covers ``indices``.

    ``indices`` defaults to the union over the whole history, which equals
    ``{0..K}`` whenever the first set was a full sweep.
    """
    if T < 1:
        raise ScheduleError("T must be at least 1")
    if len(history) < T:
        raise ScheduleError(f"history of length {len(history)} is shorter than T={T}")
    sets = [set(c) for c in history]
    target = set(indices) if indices is not None else set().union(*sets)
    for start in range(len(sets) - T + 1):
        if set().union(*sets[start:start + T]) != target:
            return False
    return True


def fired_mask(blocks, K):
    """0/1 string over ``0..K`` marking the selected indices."""
    chars = ["0"] * (K + 1)
    for i in blocks:
        chars[i] = "1"
    return "".join(chars)
