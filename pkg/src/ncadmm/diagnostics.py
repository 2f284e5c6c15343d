"""Augmented Lagrangians, stationarity measures and per-iteration checks.

Every ``check_*`` function is a pure function of a :class:`~ncadmm.trace.Trace`
and returns a :class:`CheckReport`; the solvers call them after a run (and
row by row at ``check_level='full'``), and the ``check`` command calls them
on a trace reloaded from disk.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import NumericalError
from .problems import finite_diff_gradient, prox_on_set  # noqa: F401  (re-export)

__all__ = [
    "CheckReport", "DescentModel", "ConsensusEval", "CertificateReport",
    "eval_lagrangian_consensus", "eval_lagrangian_sharing", "eval_lagrangian_two_block",
    "prox_gradient", "progress_measure", "stationarity_residuals_consensus",
    "stationarity_residuals_sharing", "stationarity_residuals_two_block",
    "sharing_progress", "two_block_progress", "check_dual_bound", "check_descent",
    "check_lower_bound", "check_cumulative_descent", "check_identity",
    "check_prox_gradient_bound", "check_feasibility_chain", "complexity_certificate",
    "check_tolerance", "consensus_descent_model", "sharing_descent_model",
    "two_block_descent_model", "finite_diff_gradient", "directional_probe",
]


def check_tolerance(inner_tol=1e-10):
    """Slack granted to the checked inequalities: ``10 * inner_tol + 1e-9``."""
    return 10.0 * inner_tol + 1e-9


def _rho(params):
    return np.atleast_1d(np.asarray(getattr(params, "rho", params), dtype=float))


def _finite(value, what):
    if not np.isfinite(value):
        raise NumericalError(f"non-finite {what}: {value}")
    return float(value)


# ---------------------------------------------------------------------------
# consensus

class ConsensusEval:
    """Vectorized consensus quantities for a fixed problem and penalty vector."""

    def __init__(self, problem, rho):
        self.problem = problem
        self.rho = _rho(rho) * np.ones(problem.K)
        self.rho_col = self.rho[:, None]
        self.stack = problem.stack
        self.h = problem.regularizer
        self.fset = problem.fset
        if self.stack.quadratic:
            self.Qsum = self.stack.Q.sum(axis=0)
            self.bsum = self.stack.b.sum(axis=0)
            self.csum = float(self.stack.c.sum())

    def g_sum_at(self, x0):
        """``sum_k g_k(x0)``."""
        if self.stack.quadratic:
            return 0.5 * x0 @ (self.Qsum @ x0) + self.bsum @ x0 + self.csum
        return float(self.stack.values(x0).sum())

    def objective(self, x0):
        return self.g_sum_at(x0) + self.h.value(x0)

    def lagrangian(self, x0, X, Y, V=None):
        D = X - x0
        V = self.stack.values(X) if V is None else V
        return float(V.sum() + self.h.value(x0) + np.vdot(Y, D) + 0.5 * np.vdot(self.rho_col * D, D))

    def grad_parts(self, x0, X, Y, G=None):
        """Components of the proximal gradient: ``(r0, R)`` with ``R`` of shape (K, n)."""
        D = X - x0
        G = self.stack.grads(X) if G is None else G
        g0 = -Y.sum(axis=0) - self.rho @ D
        r0 = x0 - prox_on_set(self.h, self.fset, x0 - g0, 1.0)
        return r0, G + Y + self.rho_col * D

    def h_rows(self, x0s):
        h = self.h
        if h.kind == "zero":
            return np.zeros(len(x0s))
        if h.kind == "l1":
            return h.weight * np.abs(x0s).sum(axis=1)
        return np.array([h.value(x) for x in x0s])

    def prox_rows(self, Z, weight):
        """Row-wise ``prox_{h + i_X}``; vectorized when the pair has a closed form."""
        if self.fset.kind in ("whole", "box") and self.h.kind in ("zero", "l1", "box"):
            return prox_on_set(self.h, self.fset, Z, weight)
        return np.stack([prox_on_set(self.h, self.fset, z, weight) for z in Z])

    def evaluate_rows(self, x0s, Xs, Ys):
        """Lagrangian, ``f(x0)``, squared proximal gradient and feasibility per row.

        ``x0s`` has shape (T, n) and ``Xs``, ``Ys`` shape (T, K, n).
        """
        st = self.stack
        T, K, n = Xs.shape
        if st.quadratic:
            QX = np.einsum("kij,tkj->tki", st.Q, Xs)
            G = QX + st.b
            V = ((0.5 * QX + st.b) * Xs).sum(axis=2) + st.c
            gsum = 0.5 * np.einsum("ti,ij,tj->t", x0s, self.Qsum, x0s) + x0s @ self.bsum + self.csum
        else:
            V = np.empty((T, K))
            G = np.empty((T, K, n))
            for r in range(T):
                V[r], G[r] = st.values_grads(Xs[r])
            gsum = np.array([float(st.values(x).sum()) for x in x0s])
        hx = self.h_rows(x0s)
        D = Xs - x0s[:, None, :]
        rD = self.rho[None, :, None] * D
        L = V.sum(axis=1) + hx + (Ys * D).sum(axis=(1, 2)) + 0.5 * (rD * D).sum(axis=(1, 2))
        g0 = -Ys.sum(axis=1) - rD.sum(axis=1)
        r0 = x0s - self.prox_rows(x0s - g0, 1.0)
        R = G + Ys + rD
        feas_sq = (D * D).sum(axis=2)
        gradL_sq = (r0 * r0).sum(axis=1) + (R * R).sum(axis=(1, 2))
        return {"L": L, "lower_ref": gsum + hx, "gradL_sq": gradL_sq, "feas_sq": feas_sq,
                "P": gradL_sq + feas_sq.sum(axis=1)}

    def step_rows(self, x0s, Xs, Ys):
        """Squared steps between consecutive rows (row 0 gets zeros)."""
        dX = np.diff(Xs, axis=0)
        dY = np.diff(Ys, axis=0)
        d0 = np.diff(x0s, axis=0)
        z = np.zeros((1, Xs.shape[1]))
        return {"dx_sq": np.vstack([z, (dX * dX).sum(axis=2)]),
                "dy_sq": np.vstack([z, (dY * dY).sum(axis=2)]),
                "dx0_sq": np.r_[0.0, (d0 * d0).sum(axis=1)]}

    def identity_rows(self, x0s, Xs, Ys, fired):
        """``max |grad g_k(x0) + L_k (x_k - x0) + y_k|`` over the fired blocks of each row."""
        st = self.stack
        if st.quadratic:
            Gx0 = np.einsum("kij,tj->tki", st.Q, x0s) + st.b
        else:
            Gx0 = np.stack([st.grads(x) for x in x0s])
        res = np.abs(Gx0 + self.problem.lipschitz[None, :, None] * (Xs - x0s[:, None, :]) + Ys)
        res = res.max(axis=2)
        mask = np.asarray(fired)[:, 1:]
        out = np.where(mask, res, -np.inf).max(axis=1)
        out[~mask.any(axis=1)] = np.nan
        return out

    def progress(self, x0, X, Y, G=None):
        r0, R = self.grad_parts(x0, X, Y, G)
        D = X - x0
        return float(r0 @ r0 + np.vdot(R, R) + np.vdot(D, D))


def eval_lagrangian_consensus(state, problem, params):
    """``sum g_k(x_k) + h(x0) + sum <y_k, x_k - x0> + sum rho_k/2 ||x_k - x0||^2``."""
    ev = ConsensusEval(problem, params)
    return _finite(ev.lagrangian(state.x0, state.xs, state.ys), "augmented Lagrangian")


def prox_gradient(state, problem, params):
    """Stacked proximal gradient of the augmented Lagrangian, length ``(K+1) n``.

    The ``x0`` component is ``x0 - prox_{h + i_X}(x0 - grad_{x0}(L - h))``
    with unit prox weight; the remaining components are ``grad_{x_k} L``.
    """
    r0, R = ConsensusEval(problem, params).grad_parts(state.x0, state.xs, state.ys)
    return np.concatenate([r0, R.ravel()])


def progress_measure(state, problem, params):
    """``P = ||prox-grad L||^2 + sum_k ||x_k - x0||^2``."""
    return ConsensusEval(problem, params).progress(state.x0, state.xs, state.ys)


def stationarity_residuals_consensus(state, problem):
    """Residuals of the first-order conditions of the consensus reformulation.

    ``gradient``: ``max_k ||grad g_k(x_k) + y_k||``; ``x0``: the prox residual
    ``||x0 - prox_{h + i_X}(x0 + sum_k y_k)||``; ``consensus``:
    ``max_k ||x_k - x0||``.
    """
    G = problem.stack.grads(state.xs)
    x0 = state.x0
    r0 = x0 - prox_on_set(problem.regularizer, problem.fset, x0 + state.ys.sum(axis=0), 1.0)
    return {
        "gradient": float(np.max(np.linalg.norm(G + state.ys, axis=1))),
        "x0": float(np.linalg.norm(r0)),
        "consensus": float(np.max(np.linalg.norm(state.xs - x0, axis=1))),
    }


def directional_probe(fun, x, directions, eps=1e-6):
    """One-sided directional derivatives ``fun'(x; d)`` for unit-normalized ``d``.

    Uses the second-order forward formula ``(4f(e) - f(2e) - 3f(0)) / (2e)``
    along each direction, so only points on the segment toward ``x + d``
    are evaluated.
    """
    f0 = fun(x)
    out = []
    for d in directions:
        d = d / np.linalg.norm(d)
        out.append((4 * fun(x + eps * d) - fun(x + 2 * eps * d) - 3 * f0) / (2 * eps))
    return np.array(out)


# ---------------------------------------------------------------------------
# sharing and two-block

def eval_lagrangian_sharing(state, problem, rho):
    """``sum g_k(x_k) + l(x0) + <x0 - s, y> + rho/2 ||x0 - s||^2`` with ``s = sum A_k x_k``."""
    rho = float(_rho(rho)[0])
    s = problem.shared(state.xs)
    r = state.x0 - s
    val = (sum(b.value(x) for b, x in zip(problem.blocks, state.xs))
           + problem.coupling.value(state.x0) + r @ state.y + 0.5 * rho * r @ r)
    return _finite(val, "augmented Lagrangian")


def _block_residual(blk, x, y):
    Aty = blk.A.T @ y
    if blk.kind == "smooth":
        return x - blk.fset.project(x - (blk.fn.grad(x) - Aty))
    return x - prox_on_set(blk.fn, blk.fset, x + Aty, 1.0)


def stationarity_residuals_sharing(state, problem):
    """Block, coupling and feasibility residuals of the sharing problem.

    Smooth blocks use the projected-gradient residual of ``grad g_k - A_k'y``
    over ``X_k``; prox blocks use ``||x_k - prox_{g_k + i_{X_k}}(x_k + A_k'y)||``.
    """
    s = problem.shared(state.xs)
    blocks = [float(np.linalg.norm(_block_residual(b, x, state.y)))
              for b, x in zip(problem.blocks, state.xs)]
    return {
        "blocks": blocks,
        "coupling": float(np.linalg.norm(problem.coupling.grad(state.x0) + state.y)),
        "feasibility": float(np.linalg.norm(s - state.x0)),
    }


def sharing_progress(res):
    """Sum of squared sharing residuals (the sharing analogue of ``P``)."""
    return float(np.sum(np.square(res["blocks"])) + res["coupling"] ** 2 + res["feasibility"] ** 2)


def eval_lagrangian_two_block(state, problem, rho):
    r = problem.B @ state.x1 + problem.A @ state.x2 - problem.c
    val = problem.objective(state.x1, state.x2) + r @ state.y + 0.5 * float(rho) * r @ r
    return _finite(val, "augmented Lagrangian")


def stationarity_residuals_two_block(state, problem):
    r = problem.B @ state.x1 + problem.A @ state.x2 - problem.c
    z = state.x1 - problem.B.T @ state.y
    return {
        "x1": float(np.linalg.norm(state.x1 - prox_on_set(problem.f, problem.fset, z, 1.0))),
        "x2": float(np.linalg.norm(problem.g.grad(state.x2) + problem.A.T @ state.y)),
        "feasibility": float(np.linalg.norm(r)),
    }


def two_block_progress(res):
    return float(res["x1"] ** 2 + res["x2"] ** 2 + res["feasibility"] ** 2)


# ---------------------------------------------------------------------------
# checks

@dataclass
class CheckReport:
    """Outcome of one inequality check over the rows of a trace.

    ``worst`` is the largest amount by which the inequality failed, before
    the tolerance is applied (0 when it always held).
    """

    name: str
    checked: int = 0
    failed: int = 0
    worst: float = 0.0
    first_failure: Optional[int] = None
    tol: float = 0.0

    @property
    def passed(self):
        return self.failed == 0

    def absorb(self, iters, excess, tol=None):
        """Record rows where ``excess`` (lhs - rhs) should be ``<= tol``."""
        tol = self.tol if tol is None else tol
        excess = np.asarray(excess, dtype=float)
        iters = np.asarray(iters)
        if excess.ndim > 1:
            excess = excess.max(axis=tuple(range(1, excess.ndim)))
        self.checked += excess.size
        if not excess.size:
            return self
        bad = ~(excess <= tol)  # NaN counts as a failure
        self.worst = max(self.worst, float(np.nanmax(np.r_[excess, 0.0])))
        if bad.any():
            if np.isnan(excess).any():
                self.worst = np.inf
            self.failed += int(bad.sum())
            first = int(iters[np.argmax(bad)])
            self.first_failure = first if self.first_failure is None else min(self.first_failure, first)
        return self

    def summary(self):
        status = "pass" if self.passed else "FAIL"
        first = "-" if self.first_failure is None else str(self.first_failure)
        return (f"{self.name:<22s} {status}  checked={self.checked} failed={self.failed} "
                f"worst={self.worst:.3e} first={first}")

    def as_dict(self):
        return {"name": self.name, "checked": self.checked, "failed": self.failed,
                "worst": self.worst, "first_failure": self.first_failure, "tol": self.tol}


@dataclass(frozen=True)
class DescentModel:
    """Right-hand side of a one-step descent bound.

    ``L^{t+1} - L^t <= sum_k block[k] ||dx_k||^2 + x0 ||dx_0||^2``.
    """

    block: np.ndarray
    x0: float


def consensus_descent_model(params, Ls):
    Ls = np.asarray(Ls, dtype=float)
    return DescentModel(Ls ** 2 / params.rho - params.gamma / 2, -float(params.rho.sum()) / 2)


def sharing_descent_model(params, L):
    rho = params.rho_scalar
    return DescentModel(-params.gamma / 2, -(params.gamma0 / 2 - L ** 2 / rho))


def two_block_descent_model(params, L_g, lam_min):
    """Block coefficient ``L_g^2 / (rho lam) - gamma_2 / 2`` on the ``x_2`` step.

    The ``x_1`` step never increases the Lagrangian (convex subproblem), so
    its coefficient is 0.
    """
    rho = params.rho_scalar
    return DescentModel(np.array([L_g ** 2 / (rho * lam_min) - params.gamma[0] / 2]), 0.0)


def _rows(trace, start):
    start = max(int(start), 1)
    return slice(start, len(trace)), trace.iters[start:]


def check_dual_bound(trace, coef, tol=1e-9, start=1, name="dual_bound"):
    """``||dy_k|| <= coef_k ||dx_k||`` for every row and dual block.

    Uses the trace extras ``dy_sq`` and ``dual_dx_sq`` (falls back to
    ``dx_sq``).
    """
    rep = CheckReport(name, tol=tol)
    sl, iters = _rows(trace, start)
    if not len(iters):
        return rep
    dy = np.sqrt(trace.column("dy_sq")[sl])
    key = "dual_dx_sq" if trace.has("dual_dx_sq") else "dx_sq"
    dx = np.sqrt(trace.column(key)[sl])
    return rep.absorb(iters, dy - np.asarray(coef) * dx)


def check_descent(trace, model: DescentModel, tol=1e-9, start=1):
    """Per-step descent bound and plain monotonicity of ``L``.

    Returns ``(descent, monotone)`` reports.  The left-hand side is taken
    from the ``L_value`` column, so a tampered trace is caught even though
    the stored ``descent_margin`` column is not consulted.
    """
    rep = CheckReport("descent", tol=tol)
    mono = CheckReport("monotone", tol=tol)
    sl, iters = _rows(trace, start)
    if not len(iters):
        return rep, mono
    L = trace.L
    dL = L[sl] - L[sl.start - 1:sl.stop - 1]
    rhs = trace.column("dx_sq")[sl] @ model.block + model.x0 * trace.x0_step_sq[sl]
    rep.absorb(iters, dL - rhs)
    mono.absorb(iters, dL)
    return rep, mono


def check_lower_bound(trace, tol=1e-9, start=1):
    """``L^t >= lower_ref^t`` (``f(x0)`` for consensus; the coupled bound for sharing)."""
    rep = CheckReport("lower_bound", tol=tol)
    start = max(int(start), 0)
    iters = trace.iters[start:]
    if not len(iters) or not trace.has("lower_ref"):
        return rep
    return rep.absorb(iters, trace.column("lower_ref")[start:] - trace.L[start:])


def check_cumulative_descent(trace, alpha, beta_sum, tol=1e-9, start=1):
    """``L^t - L^0 <= -sum_i (sum_k alpha_k ||dx_k^i||^2 + beta_sum ||dx_0^i||^2)``."""
    rep = CheckReport("cumulative_descent", tol=tol)
    sl, iters = _rows(trace, start)
    if not len(iters):
        return rep
    dec = trace.column("dx_sq") @ np.asarray(alpha) + beta_sum * trace.x0_step_sq
    dec[0] = 0.0
    cum = np.cumsum(dec)
    L = trace.L
    return rep.absorb(iters, (L[sl] - L[0]) + cum[sl])


def check_identity(trace, key, tol, start=1, name=None):
    """Residual stored under ``key`` stays below ``tol`` (NaN rows are skipped)."""
    rep = CheckReport(name or key, tol=tol)
    sl, iters = _rows(trace, start)
    if not len(iters) or not trace.has(key):
        return rep
    vals = trace.column(key)[sl]
    keep = ~np.isnan(vals)
    return rep.absorb(iters[keep], vals[keep])


def check_prox_gradient_bound(trace, sigma1, tol=1e-9):
    """``||prox-grad L(t)|| <= sigma1 (||dx_0^{t+1}|| + sum_k ||dx_k^{t+1}||)``.

    Valid for exact, full-sweep runs; rows ``0..n-2``.
    """
    rep = CheckReport("prox_gradient_bound", tol=tol)
    n = len(trace)
    if n < 2 or not trace.has("gradL_sq"):
        return rep
    lhs = np.sqrt(trace.column("gradL_sq")[:-1])
    steps = np.sqrt(trace.x0_step_sq[1:]) + np.sqrt(trace.column("dx_sq")[1:]).sum(axis=1)
    return rep.absorb(trace.iters[:-1], lhs - sigma1 * steps)


def check_feasibility_chain(trace, Ls, rho, tol=1e-9):
    """``sum_k ||x_k^t - x_0^t|| <= sum_k (L_k / rho_k) ||x_k^t - x_k^{t-1}||``."""
    rep = CheckReport("feasibility_chain", tol=tol)
    sl, iters = _rows(trace, 1)
    if not len(iters) or not trace.has("feas_sq"):
        return rep
    lhs = np.sqrt(trace.column("feas_sq")[sl]).sum(axis=1)
    rhs = np.sqrt(trace.column("dx_sq")[sl]) @ (np.asarray(Ls) / np.asarray(rho))
    return rep.absorb(iters, lhs - rhs)


@dataclass
class CertificateReport:
    """Trace scan of ``t * min_{j<t} P(j) <= C (L^0 - f_lower)``.

    ``table`` maps each ``eps`` to ``(T_eps, eps * T_eps, holds)``, with
    ``T_eps = None`` for unreached levels.  ``T_eps`` counts states, the
    initial one being 1.
    """

    bound: float
    max_lhs: float
    passed: bool
    table: dict = field(default_factory=dict)
    first_failure: Optional[int] = None


def complexity_certificate(trace, constants, L1, f_lower, eps_grid=None):
    """Check the iteration-complexity inequality along a trace.

    Row ``0`` is the initial state, which plays the role of the first
    iterate; ``t`` rows of states therefore give the product
    ``t * min_{j<t} P(j)``.
    """
    bound = constants.C * (L1 - f_lower)
    P = np.asarray(trace.P, dtype=float)
    n = P.size
    if n == 0:
        return CertificateReport(bound, 0.0, True)
    running = np.minimum.accumulate(P)
    t = np.arange(1, n + 1)
    lhs = t * running
    ok = lhs <= bound * (1 + 1e-12) + 1e-300
    first = None if ok.all() else int(np.argmax(~ok))
    if eps_grid is None:
        eps_grid = [10.0 ** (-e) for e in range(0, 13, 2)]
    table = {}
    for eps in eps_grid:
        hit = np.flatnonzero(P <= eps)
        if hit.size:
            T = int(hit[0]) + 1
            # the T - 1 states before T(eps) all have P > eps
            table[eps] = (T, eps * T, bool(eps * (T - 1) <= bound * (1 + 1e-12)))
        else:
            table[eps] = (None, None, True)
    passed = bool(ok.all() and all(v[2] for v in table.values()))
    return CertificateReport(float(bound), float(lhs.max()), passed, table, first)
