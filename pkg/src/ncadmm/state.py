"""Iterate containers for the three solvers."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List

import numpy as np


@dataclass
class ConsensusState:
    """Shared variable ``x0``, local copies ``xs`` (K x n) and duals ``ys`` (K x n)."""

    x0: np.ndarray
    xs: np.ndarray
    ys: np.ndarray
    t: int = 0

    def copy(self):
        return ConsensusState(self.x0.copy(), self.xs.copy(), self.ys.copy(), self.t)

    @property
    def K(self):
        return self.xs.shape[0]

    def finite(self):
        return bool(np.isfinite(self.x0).all() and np.isfinite(self.xs).all()
                    and np.isfinite(self.ys).all())


@dataclass
class SharingState:
    """Local blocks ``xs``, shared variable ``x0``, dual ``y`` and cached ``s = sum A_k x_k``."""

    xs: List[np.ndarray]
    x0: np.ndarray
    y: np.ndarray
    s: np.ndarray
    t: int = 0

    def copy(self):
        return SharingState([x.copy() for x in self.xs], self.x0.copy(), self.y.copy(),
                            self.s.copy(), self.t)

    def finite(self):
        return bool(all(np.isfinite(x).all() for x in self.xs) and np.isfinite(self.x0).all()
                    and np.isfinite(self.y).all())


@dataclass
class TwoBlockState:
    x1: np.ndarray
    x2: np.ndarray
    y: np.ndarray
    t: int = 0

    def copy(self):
        return TwoBlockState(self.x1.copy(), self.x2.copy(), self.y.copy(), self.t)

    def finite(self):
        return bool(np.isfinite(self.x1).all() and np.isfinite(self.x2).all()
                    and np.isfinite(self.y).all())


@dataclass
class RunResult:
    """Final state, trace and check outcome of one solver run.

    ``status`` is ``converged``, ``max_iters`` or ``diverged``.  Unpacks as
    ``state, trace``.
    """

    state: object
    trace: object
    status: str
    checks: dict = field(default_factory=dict)
    params: object = None
    states: dict = field(default_factory=dict)
    message: str = ""

    def __iter__(self):
        return iter((self.state, self.trace))

    @property
    def converged(self):
        return self.status == "converged"

    @property
    def violations(self):
        return sum(r.failed for r in self.checks.values())
