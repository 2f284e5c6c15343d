"""ADMM for the sharing problem and for the two-block problem with invertible ``A``.

Sharing: ``min sum_k g_k(x_k) + l(x0)`` s.t. ``x0 = sum_k A_k x_k``.  Selected
blocks are updated Gauss-Seidel in ascending order, then ``x0`` and ``y``
together when index 0 is selected.  The partial sum ``s = sum_k A_k x_k``
is maintained incrementally and recomputed from scratch every
``RECOMPUTE_EVERY`` iterations.

Two-block: ``min f(x1) + g(x2)`` s.t. ``B x1 + A x2 = c``, ``x1 in X``.
"""

from __future__ import annotations

import logging
import time

import numpy as np

from . import _inner
from .calibration import two_block_params
from .consensus import InnerConfig, SolverConfig, _first_failed, _full_check, _violation_msg
from .diagnostics import (check_descent, check_dual_bound, check_identity, check_lower_bound,
                          check_tolerance, eval_lagrangian_sharing, eval_lagrangian_two_block,
                          sharing_descent_model, sharing_progress,
                          stationarity_residuals_sharing, stationarity_residuals_two_block,
                          two_block_descent_model, two_block_progress)
from .errors import CalibrationError, CheckViolation, InnerSolverError, NumericalError
from .problems import SharingProblem, TwoBlockProblem, prox_on_set
from .schedules import full_sweep, next_blocks
from .state import RunResult, SharingState, TwoBlockState
from .trace import Trace

log = logging.getLogger(__name__)

RECOMPUTE_EVERY = 100
COUPLING_IDENTITY_TOL = 1e-8

__all__ = ["initial_state_sharing", "update_xk_sharing", "update_x0_sharing",
           "update_dual_sharing", "run_sharing", "initial_state_two_block", "run_two_block",
           "SolverConfig"]


# ---------------------------------------------------------------------------
# composite quadratic subproblems

def _bounds(fset, reg=None):
    """Box bounds of ``X`` intersected with a box regularizer, or None for non-boxes."""
    n = fset.dim
    if fset.kind == "whole":
        lo, hi = np.full(n, -np.inf), np.full(n, np.inf)
    elif fset.kind == "box":
        lo, hi = fset.lo, fset.hi
    else:
        return None
    if reg is not None and reg.kind == "box":
        lo, hi = np.maximum(lo, reg.lo), np.minimum(hi, reg.hi)
    return lo, hi


def _solve_qp(H, c, reg, fset, start, inner):
    """``argmin 0.5 x'Hx - c'x + reg(x)`` over ``fset``."""
    kind = "zero" if reg is None else reg.kind
    bnds = _bounds(fset, reg) if kind in ("zero", "l1", "box") else None
    if bnds is not None:
        lam = reg.weight if kind == "l1" else 0.0
        lo, hi = bnds
        if lam == 0 and np.all(np.isinf(lo)) and np.all(np.isinf(hi)):
            return np.linalg.solve(H, c)
        return _inner.solve_composite_qp(H, c, lam, lo, hi, x0=start)
    w = np.linalg.eigvalsh(H)

    def prox(v, step):
        return prox_on_set(reg, fset, v, step)

    return _inner.apg(lambda x: H @ x - c, float(w.max()), max(float(w.min()), 0.0), prox,
                      start, tol=inner.tol, max_iter=inner.max_iter)


# ---------------------------------------------------------------------------
# sharing

def initial_state_sharing(problem: SharingProblem):
    """``x_k = proj_{X_k}(0)``, ``x0 = sum A_k x_k``, ``y = -grad l(x0)``."""
    xs = [b.fset.project(np.zeros(b.dim)) for b in problem.blocks]
    s = problem.shared(xs)
    return SharingState(xs, s.copy(), -problem.coupling.grad(s), s.copy(), 0)


def _check_block_modulus(params, k):
    if params.gamma[k] <= 0 and not params.override:
        raise CalibrationError(f"block {k}: subproblem modulus {params.gamma[k]:.3g} <= 0")


def update_xk_sharing(state, problem, k, params, inner=None):
    """Exact Gauss-Seidel update of block ``k`` (0-based) against the cached sum ``state.s``.

    Minimizes ``g_k(x) - <y, A_k x> + rho/2 ||r - A_k x||^2`` over ``X_k`` with
    ``r = x0 - (s - A_k x_k)``.
    """
    _check_block_modulus(params, k)
    inner = inner or InnerConfig()
    blk = problem.blocks[k]
    rho = params.rho_scalar
    A, x = blk.A, state.xs[k]
    r = state.x0 - (state.s - A @ x)
    lin = A.T @ state.y + rho * (A.T @ r)
    if blk.kind == "prox":
        return _solve_qp(rho * blk.gram, lin, blk.fn, blk.fset, x, inner)
    fn = blk.fn
    if fn.quad is not None:
        H = fn.quad.Q + rho * blk.gram
        return _solve_qp(H, lin - fn.quad.b, None, blk.fset, x, inner)
    lip = fn.lipschitz + rho * float(np.linalg.eigvalsh(blk.gram).max())
    mu = max(rho * blk.lam_min - (0.0 if fn.convex else fn.lipschitz), 0.0)
    return _inner.apg(lambda z: fn.grad(z) - lin + rho * (blk.gram @ z), lip, mu,
                      lambda v, step: blk.fset.project(v), x, tol=inner.tol,
                      max_iter=inner.max_iter)


def update_x0_sharing(state, problem, params, inner=None):
    """Minimizer of ``l(x0) + <y, x0> + rho/2 ||x0 - s||^2``."""
    inner = inner or InnerConfig()
    ell = problem.coupling
    rho = params.rho_scalar
    if params.gamma0 <= 0 and not params.override:
        raise CalibrationError("x0 subproblem is not strongly convex")
    if ell.quad is not None:
        H = ell.quad.Q + rho * np.eye(problem.M)
        return np.linalg.solve(H, rho * state.s - state.y - ell.quad.b)
    mu = rho if ell.convex else max(rho - ell.lipschitz, 0.0)
    return _inner.apg(lambda z: ell.grad(z) + state.y + rho * (z - state.s), ell.lipschitz + rho,
                      mu, lambda v, step: v, state.x0, tol=inner.tol, max_iter=inner.max_iter)


def update_dual_sharing(state, rho):
    """``y + rho (x0 - s)``."""
    return state.y + rho * (state.x0 - state.s)


def sharing_checks(trace, params, L, tol, start=1):
    reports = {}
    reports["dual_bound"] = check_dual_bound(trace, [L], tol, start)
    reports["descent"], reports["monotone"] = check_descent(
        trace, sharing_descent_model(params, L), tol, start)
    reports["lower_bound"] = check_lower_bound(trace, tol, start)
    reports["coupling_identity"] = check_identity(trace, "identity", COUPLING_IDENTITY_TOL, start,
                                                  name="coupling_identity")
    return reports


def _lower_ref(problem, state, s, rho, L):
    gap = state.x0 - s
    return (sum(b.value(x) for b, x in zip(problem.blocks, state.xs))
            + problem.coupling.value(s) + 0.5 * (rho - L) * gap @ gap)


def run_sharing(problem: SharingProblem, config: SolverConfig):
    """Sharing ADMM; stops once the summed squared residuals drop to ``stop_tol``."""
    # overflow in a diverging run is detected from non-finite values below
    with np.errstate(over="ignore", invalid="ignore"):
        return _run_sharing(problem, config)


def _run_sharing(problem: SharingProblem, config: SolverConfig):
    params = config.params
    K = problem.K
    if params.K != K:
        raise CalibrationError(f"penalty vector has {params.K} entries for {K} blocks")
    if not params.calibrated and not params.override:
        raise CalibrationError("penalty is below calibration; set override to run anyway")
    schedule = config.schedule or full_sweep(K)
    if schedule.K != K:
        raise ValueError(f"schedule is for K={schedule.K}, problem has K={K}")
    rng = schedule.rng()
    rho = params.rho_scalar
    L = problem.coupling.lipschitz
    inner = config.inner
    tol = check_tolerance(inner.tol)
    for k in range(K):
        _check_block_modulus(params, k)

    st = initial_state_sharing(problem)
    extra = {"dx_sq": (K,), "dy_sq": (1,), "dual_dx_sq": (1,), "lower_ref": (), "identity": ()}
    trace = Trace(K + 1, config.max_iters + 1, extra)
    rec = {"x0": [st.x0.copy()], "xs": [np.concatenate(st.xs)], "y": [st.y.copy()]} \
        if config.record_states else None

    def evaluate(state):
        Lval = eval_lagrangian_sharing(state, problem, rho)
        res = stationarity_residuals_sharing(state, problem)
        return Lval, res, sharing_progress(res)

    Lval, res, P = evaluate(st)
    zK = np.zeros(K)
    trace.push(0, Lval, res["feasibility"], P, 0.0, 0.0, 0.0, (), 0.0, 0.0, dx_sq=zK,
               dy_sq=[0.0], dual_dx_sq=[0.0], lower_ref=_lower_ref(problem, st, st.s, rho, L),
               identity=np.nan)
    model = sharing_descent_model(params, L)
    status = "converged" if P <= config.stop_tol else "max_iters"
    message = ""
    violations = {}

    for t in range(config.max_iters if status == "max_iters" else 0):
        tic = time.perf_counter() if config.timing else 0.0
        C = next_blocks(schedule, t, rng)
        prev = st.copy()
        dx_sq = np.zeros(K)
        try:
            for i in C:
                if i == 0:
                    continue
                k = i - 1
                xk = update_xk_sharing(st, problem, k, params, inner)
                blk = problem.blocks[k]
                st.s = st.s + blk.A @ (xk - st.xs[k])
                d = xk - st.xs[k]
                dx_sq[k] = d @ d
                st.xs[k] = xk
            if (t + 1) % RECOMPUTE_EVERY == 0:
                st.s = problem.shared(st.xs)
            ident = np.nan
            if 0 in C:
                st.x0 = update_x0_sharing(st, problem, params, inner)
                st.y = update_dual_sharing(st, rho)
                ident = float(np.linalg.norm(problem.coupling.grad(st.x0) + st.y))
            if not st.finite():
                raise NumericalError(f"non-finite iterate at iteration {t + 1}", state=prev)
            Lval_new, res, P = evaluate(st)
        except (NumericalError, InnerSolverError, np.linalg.LinAlgError) as exc:
            if not params.override:
                raise
            st = prev
            status, message = "diverged", str(exc)
            break
        st.t = t + 1
        dx0 = st.x0 - prev.x0
        dy = st.y - prev.y
        dx0_sq, dy_sq = float(dx0 @ dx0), float(dy @ dy)
        margin = float(dx_sq @ model.block) + model.x0 * dx0_sq - (Lval_new - Lval)
        Lval = Lval_new
        wall = (time.perf_counter() - tic) * 1e3 if config.timing else 0.0
        fired = sorted(set(C))
        trace.push(t + 1, Lval, res["feasibility"], P, float(dx_sq.sum()), dx0_sq, dy_sq, fired,
                   margin, wall, dx_sq=dx_sq, dy_sq=[dy_sq], dual_dx_sq=[dx0_sq],
                   lower_ref=_lower_ref(problem, st, problem.shared(st.xs), rho, L),
                   identity=ident)
        if rec is not None:
            rec["x0"].append(st.x0.copy())
            rec["xs"].append(np.concatenate(st.xs))
            rec["y"].append(st.y.copy())
        if config.check_level == "full":
            reports = sharing_checks(trace, params, L, tol, start=t + 1)
            it = _full_check(reports, params, violations)
            if it is not None and not params.override:
                raise CheckViolation(_violation_msg(reports, it), iteration=it,
                                     check=_first_failed(reports), state=st.copy())
        if P <= config.stop_tol:
            status = "converged"
            break

    st.s = problem.shared(st.xs)
    checks = sharing_checks(trace, params, L, tol) if config.check_level != "off" else {}
    states = {k: np.array(v) for k, v in rec.items()} if rec is not None else {}
    if states:
        states["fired"] = trace.fired.copy()
    return RunResult(st, trace, status, checks, params, states, message)


# ---------------------------------------------------------------------------
# two-block

def initial_state_two_block(problem: TwoBlockProblem):
    """Feasible start: ``x1 = proj_X(0)``, ``x2 = A^{-1}(c - B x1)``, ``A'y = -grad g(x2)``."""
    x1 = problem.fset.project(np.zeros(problem.B.shape[1]))
    x2 = np.linalg.solve(problem.A, problem.c - problem.B @ x1)
    y = -np.linalg.solve(problem.A.T, problem.g.grad(x2))
    return TwoBlockState(x1, x2, y, 0)


def two_block_checks(trace, params, problem, tol, start=1):
    L_g = problem.g.lipschitz
    reports = {"dual_bound": check_dual_bound(trace, [L_g / np.sqrt(problem.lam_min)], tol, start)}
    reports["descent"], reports["monotone"] = check_descent(
        trace, two_block_descent_model(params, L_g, problem.lam_min), tol, start)
    return reports


def run_two_block(problem: TwoBlockProblem, config: SolverConfig):
    """Two-block ADMM: ``x1`` step, ``x2`` step, dual step, every iteration."""
    # overflow in a diverging run is detected from non-finite values below
    with np.errstate(over="ignore", invalid="ignore"):
        return _run_two_block(problem, config)


def _run_two_block(problem: TwoBlockProblem, config: SolverConfig):
    params = config.params
    if params.mode != "two-block":
        params = two_block_params(params.rho_scalar, problem, override=params.override)
    if not params.calibrated and not params.override:
        raise CalibrationError("penalty is below the two-block bound; set override to run anyway")
    rho = params.rho_scalar
    inner = config.inner
    tol = check_tolerance(inner.tol)
    A, B, c, g = problem.A, problem.B, problem.c, problem.g
    H1 = rho * (B.T @ B)
    if g.quad is not None:
        H2 = g.quad.Q + rho * (A.T @ A)
        try:
            np.linalg.cholesky(H2)
            H2_ok = True
        except np.linalg.LinAlgError:
            H2_ok = False

    st = initial_state_two_block(problem)
    extra = {"dx_sq": (1,), "dy_sq": (1,)}
    trace = Trace(2, config.max_iters + 1, extra)
    rec = {"x1": [st.x1.copy()], "x2": [st.x2.copy()], "y": [st.y.copy()]} \
        if config.record_states else None

    def evaluate(state):
        res = stationarity_residuals_two_block(state, problem)
        return eval_lagrangian_two_block(state, problem, rho), res, two_block_progress(res)

    Lval, res, P = evaluate(st)
    trace.push(0, Lval, res["feasibility"], P, 0.0, 0.0, 0.0, (), 0.0, 0.0, dx_sq=[0.0], dy_sq=[0.0])
    model = two_block_descent_model(params, g.lipschitz, problem.lam_min)
    status = "converged" if P <= config.stop_tol else "max_iters"
    message = ""
    violations = {}

    for t in range(config.max_iters if status == "max_iters" else 0):
        tic = time.perf_counter() if config.timing else 0.0
        prev = st.copy()
        try:
            c1 = -B.T @ st.y - rho * (B.T @ (A @ st.x2 - c))
            x1 = _solve_qp(H1, c1, problem.f, problem.fset, st.x1, inner)
            c2 = -A.T @ st.y - rho * (A.T @ (B @ x1 - c))
            if g.quad is not None:
                if not H2_ok:
                    raise NumericalError("x2 subproblem is not strongly convex")
                x2 = np.linalg.solve(H2, c2 - g.quad.b)
            else:
                lip = g.lipschitz + rho * float(np.linalg.eigvalsh(A.T @ A).max())
                mu = max(params.gamma[0], 0.0)
                x2 = _inner.apg(lambda z: g.grad(z) - c2 + rho * (A.T @ (A @ z)), lip, mu,
                                lambda v, step: v, st.x2, tol=inner.tol, max_iter=inner.max_iter)
            y = st.y + rho * (B @ x1 + A @ x2 - c)
            st = TwoBlockState(x1, x2, y, t + 1)
            if not st.finite():
                raise NumericalError(f"non-finite iterate at iteration {t + 1}", state=prev)
            Lnew, res, P = evaluate(st)
        except (NumericalError, InnerSolverError, np.linalg.LinAlgError) as exc:
            if not params.override:
                raise
            st = prev
            status, message = "diverged", str(exc)
            break
        d1, d2, dy = st.x1 - prev.x1, st.x2 - prev.x2, st.y - prev.y
        dx1_sq, dx2_sq, dy_sq = float(d1 @ d1), float(d2 @ d2), float(dy @ dy)
        margin = float(model.block[0] * dx2_sq) - (Lnew - Lval)
        Lval = Lnew
        wall = (time.perf_counter() - tic) * 1e3 if config.timing else 0.0
        trace.push(t + 1, Lval, res["feasibility"], P, dx2_sq, dx1_sq, dy_sq, (0, 1), margin, wall,
                   dx_sq=[dx2_sq], dy_sq=[dy_sq])
        if rec is not None:
            rec["x1"].append(st.x1.copy())
            rec["x2"].append(st.x2.copy())
            rec["y"].append(st.y.copy())
        if config.check_level == "full":
            reports = two_block_checks(trace, params, problem, tol, start=t + 1)
            it = _full_check(reports, params, violations)
            if it is not None and not params.override:
                raise CheckViolation(_violation_msg(reports, it), iteration=it,
                                     check=_first_failed(reports), state=st.copy())
        if P <= config.stop_tol:
            status = "converged"
            break

    checks = two_block_checks(trace, params, problem, tol) if config.check_level != "off" else {}
    states = {k: np.array(v) for k, v in rec.items()} if rec is not None else {}
    return RunResult(st, trace, status, checks, params, states, message)
