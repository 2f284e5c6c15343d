"""Per-iteration trace storage and its CSV / npz serialization.

Row ``0`` of every trace describes the initial state (no block fired, all
steps zero); row ``t`` describes the state after iteration ``t``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

COLUMNS = ("iter", "L_value", "feas_gap", "P_value", "block_step_sq", "x0_step_sq",
           "dual_step_sq", "fired_mask", "descent_margin", "wall_ms")
_FLOATS = ("L_value", "feas_gap", "P_value", "block_step_sq", "x0_step_sq",
           "dual_step_sq", "descent_margin", "wall_ms")


@dataclass(frozen=True)
class IterationTrace:
    iter: int
    L_value: float
    feas_gap: float
    P_value: float
    block_step_sq: float
    x0_step_sq: float
    dual_step_sq: float
    fired_mask: str
    descent_margin: float
    wall_ms: float


def fmt_float(v):
    return "%.17g" % v


class Trace:
    """Columnar trace with optional per-block extras.

    ``extra`` maps a name to the trailing shape of a per-row array; the
    solvers use it for per-block squared steps (``dx_sq``, ``dy_sq``), the
    lower-bound reference values and identity residuals.
    """

    def __init__(self, width, capacity=16, extra: Optional[Dict[str, tuple]] = None):
        self.width = width
        self.n = 0
        cap = max(int(capacity), 1)
        self._iter = np.zeros(cap, dtype=np.int64)
        self._cols = {c: np.zeros(cap) for c in _FLOATS}
        self._fired = np.zeros((cap, width), dtype=bool)
        self._extra = {k: np.zeros((cap,) + tuple(s)) for k, s in (extra or {}).items()}

    def _grow(self):
        cap = 2 * self._iter.size
        self._iter = np.resize(self._iter, cap)
        self._fired = np.resize(self._fired, (cap, self.width))
        for d in (self._cols, self._extra):
            for k, a in d.items():
                d[k] = np.resize(a, (cap,) + a.shape[1:])

    def push(self, t, L_value, feas_gap, P_value, block_step_sq, x0_step_sq, dual_step_sq,
             fired, descent_margin, wall_ms=0.0, **extra):
        if self.n == self._iter.size:
            self._grow()
        i = self.n
        self._iter[i] = t
        c = self._cols
        c["L_value"][i] = L_value
        c["feas_gap"][i] = feas_gap
        c["P_value"][i] = P_value
        c["block_step_sq"][i] = block_step_sq
        c["x0_step_sq"][i] = x0_step_sq
        c["dual_step_sq"][i] = dual_step_sq
        c["descent_margin"][i] = descent_margin
        c["wall_ms"][i] = wall_ms
        self._fired[i] = False
        self._fired[i, list(fired)] = True
        for k, v in extra.items():
            self._extra[k][i] = v
        self.n += 1

    def extend(self, iters, L_value, feas_gap, P_value, block_step_sq, x0_step_sq,
               dual_step_sq, fired, descent_margin, wall_ms, **extra):
        """Append several rows at once; ``fired`` is a boolean matrix."""
        m = len(iters)
        while self.n + m > self._iter.size:
            self._grow()
        sl = slice(self.n, self.n + m)
        self._iter[sl] = iters
        c = self._cols
        c["L_value"][sl] = L_value
        c["feas_gap"][sl] = feas_gap
        c["P_value"][sl] = P_value
        c["block_step_sq"][sl] = block_step_sq
        c["x0_step_sq"][sl] = x0_step_sq
        c["dual_step_sq"][sl] = dual_step_sq
        c["descent_margin"][sl] = descent_margin
        c["wall_ms"][sl] = wall_ms
        self._fired[sl] = fired
        for k, v in extra.items():
            self._extra[k][sl] = v
        self.n += m

    def __len__(self):
        return self.n

    def column(self, name):
        if name == "iter":
            return self._iter[:self.n]
        if name == "fired":
            return self._fired[:self.n]
        if name in self._cols:
            return self._cols[name][:self.n]
        return self._extra[name][:self.n]

    def has(self, name):
        return name in self._extra

    def set_extra(self, name, values):
        values = np.asarray(values, dtype=float)
        if values.shape[0] != self.n:
            raise ValueError(f"extra {name!r} has {values.shape[0]} rows, trace has {self.n}")
        self._extra[name] = values.copy()

    @property
    def extra_names(self):
        return tuple(self._extra)

    iters = property(lambda self: self.column("iter"))
    L = property(lambda self: self.column("L_value"))
    P = property(lambda self: self.column("P_value"))
    feas = property(lambda self: self.column("feas_gap"))
    fired = property(lambda self: self.column("fired"))
    margin = property(lambda self: self.column("descent_margin"))
    x0_step_sq = property(lambda self: self.column("x0_step_sq"))

    def mask_string(self, i):
        return "".join("1" if b else "0" for b in self._fired[i])

    def row(self, i):
        c = self._cols
        return IterationTrace(int(self._iter[i]), *(float(c[k][i]) for k in _FLOATS[:6]),
                              self.mask_string(i), float(c["descent_margin"][i]),
                              float(c["wall_ms"][i]))

    def rows(self):
        return [self.row(i) for i in range(self.n)]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(",".join(COLUMNS) + "\n")
            c = self._cols
            for i in range(self.n):
                vals = [str(int(self._iter[i]))]
                vals += [fmt_float(c[k][i]) for k in _FLOATS[:6]]
                vals += [self.mask_string(i), fmt_float(c["descent_margin"][i]),
                         fmt_float(c["wall_ms"][i])]
                fh.write(",".join(vals) + "\n")

    @classmethod
    def read_csv(cls, path):
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or tuple(header) != COLUMNS:
                raise ValueError(f"{path}: unexpected trace header {header}")
            rows = list(reader)
        for r in rows:
            if len(r) != len(COLUMNS) or set(r[7]) - {"0", "1"}:
                raise ValueError(f"{path}: malformed row {r}")
        width = len(rows[0][7]) if rows else 1
        tr = cls(width, max(len(rows), 1))
        for r in rows:
            if len(r[7]) != width:
                raise ValueError(f"{path}: fired mask width changes at iter {r[0]}")
            fired = [i for i, ch in enumerate(r[7]) if ch == "1"]
            tr.push(int(r[0]), *(float(v) for v in r[1:7]), fired, float(r[8]), float(r[9]))
        return tr


def save_states(path, states: Dict[str, np.ndarray]):
    """Store recorded iterates (one leading row per trace row) as ``.npz``."""
    np.savez(path, **{k: np.asarray(v) for k, v in states.items()})


def load_states(path):
    with np.load(path) as data:
        return {k: data[k] for k in data.files}
