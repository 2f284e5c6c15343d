"""ADMM for the consensus reformulation ``min sum_k g_k(x_k) + h(x0)``, ``x_k = x0``.

Two update modes share one driver:

``exact``
    each selected ``x_k`` minimizes the augmented Lagrangian exactly
    (closed form for quadratics, accelerated prox-gradient otherwise); the
    schedule ranges over ``{0..K}`` and ``x0`` moves only when ``0`` is
    selected.
``proximal``
    ``g_k`` is linearized at the fresh ``x0`` with curvature ``L_k``, giving
    ``x_k = x0 - (grad g_k(x0) + y_k) / (rho_k + L_k)``; ``x0`` moves every
    iteration and the schedule ranges over ``{1..K}``.

Block ``k`` of the API (0-based) corresponds to schedule index ``k + 1``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _inner
from .calibration import PenaltyParams
from .diagnostics import (ConsensusEval, check_cumulative_descent, check_descent,
                          check_dual_bound, check_feasibility_chain, check_identity,
                          check_lower_bound, check_prox_gradient_bound, check_tolerance,
                          consensus_descent_model)
from .errors import CalibrationError, CheckViolation, InnerSolverError, NumericalError
from .problems import ConsensusProblem, prox_on_set
from .schedules import Schedule, full_sweep, next_blocks
from .state import ConsensusState, RunResult
from .trace import Trace

log = logging.getLogger(__name__)

CHECK_LEVELS = ("off", "cheap", "full")
IDENTITY_TOL = 1e-12


@dataclass(frozen=True)
class InnerConfig:
    """Inner-solver stopping rule ``||grad|| <= tol (1 + ||x||)`` and iteration cap."""

    tol: float = 1e-10
    max_iter: int = 100000

    def __post_init__(self):
        if not self.tol > 0 or self.max_iter < 1:
            raise ValueError("inner tolerance and cap must be positive")


@dataclass(frozen=True, eq=False)
class SolverConfig:
    """Run settings shared by the consensus, sharing and two-block drivers.

    ``stop_tol`` applies to the progress measure ``P`` (a sum of squared
    residuals).  ``timing`` fills the ``wall_ms`` trace column; it is off by
    default so traces are byte-reproducible.
    """

    params: PenaltyParams
    schedule: Optional[Schedule] = None
    mode: str = "exact"
    max_iters: int = 1000
    stop_tol: float = 1e-10
    inner: InnerConfig = field(default_factory=InnerConfig)
    check_level: str = "cheap"
    record_states: bool = False
    timing: bool = False

    def __post_init__(self):
        if self.mode not in ("exact", "proximal"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.check_level not in CHECK_LEVELS:
            raise ValueError(f"check_level must be one of {CHECK_LEVELS}")
        if self.max_iters < 0 or not self.stop_tol >= 0:
            raise ValueError("max_iters and stop_tol must be nonnegative")


def initial_state(problem: ConsensusProblem):
    """``x0 = proj_X(0)``, ``x_k = x0``, ``y_k = -grad g_k(x0)``."""
    x0 = problem.fset.project(np.zeros(problem.n))
    xs = np.tile(x0, (problem.K, 1))
    ys = -problem.stack.grads(xs)
    return ConsensusState(x0, xs, ys, 0)


def update_x0(state, problem, params, inner: Optional[InnerConfig] = None):
    """Minimize the augmented Lagrangian over ``x0 in X``.

    The minimizer is ``prox_{(h + i_X) / sum rho}`` of the weighted average
    ``v = (sum rho_k x_k + sum y_k) / sum rho_k``.
    """
    inner = inner or InnerConfig()
    rho = params.rho
    total = float(rho.sum())
    v = (rho @ state.xs + state.ys.sum(axis=0)) / total
    return prox_on_set(problem.regularizer, problem.fset, v, 1.0 / total,
                       tol=inner.tol * 1e-2, max_iter=inner.max_iter)


def _require_modulus(params, k):
    if params.gamma[k] <= 0 and not params.override:
        raise CalibrationError(f"block {k}: subproblem modulus {params.gamma[k]:.3g} <= 0")


def update_xk_exact(state, problem, k, params, inner: Optional[InnerConfig] = None):
    """Exact minimizer of ``g_k(x) + <y_k, x - x0> + rho_k/2 ||x - x0||^2``."""
    _require_modulus(params, k)
    inner = inner or InnerConfig()
    blk = problem.blocks[k]
    rho = float(params.rho[k])
    x0, y = state.x0, state.ys[k]
    if blk.quad is not None:
        H = blk.quad.Q + rho * np.eye(problem.n)
        try:
            c = np.linalg.cholesky(H)
        except np.linalg.LinAlgError:
            raise NumericalError(f"block {k}: subproblem is not strongly convex", state=state)
        rhs = rho * x0 - blk.quad.b - y
        return np.linalg.solve(c.T, np.linalg.solve(c, rhs))
    return _xk_apg(blk, x0, y, rho, state.xs[k], inner)


def _xk_apg(blk, x0, y, rho, start, inner):
    mu = rho if blk.convex else max(rho - blk.lipschitz, 0.0)
    return _inner.apg(lambda x: blk.grad(x) + y + rho * (x - x0), blk.lipschitz + rho, mu,
                      lambda v, step: v, start, tol=inner.tol, max_iter=inner.max_iter)


def update_xk_proximal(state, problem, k, params):
    """Linearized update ``x0 - (grad g_k(x0) + y_k) / (rho_k + L_k)``."""
    blk = problem.blocks[k]
    return state.x0 - (blk.grad(state.x0) + state.ys[k]) / (params.rho[k] + blk.lipschitz)


def update_dual(state, k, rho_k):
    """``y_k + rho_k (x_k - x0)``."""
    return state.ys[k] + rho_k * (state.xs[k] - state.x0)


class _BlockSolver:
    """Batched ``x_k`` updates with factorizations cached for quadratic blocks."""

    def __init__(self, problem, params, inner, mode):
        self.problem = problem
        self.params = params
        self.inner = inner
        self.mode = mode
        self.rho = params.rho
        self.Ls = problem.lipschitz
        self.stack = problem.stack
        self.bad = np.zeros(problem.K, dtype=bool)
        if mode == "exact":
            for k in range(problem.K):
                _require_modulus(params, k)
        if mode == "exact" and self.stack.quadratic:
            n = problem.n
            H = self.stack.Q + self.rho[:, None, None] * np.eye(n)
            self.Hinv = np.empty_like(H)
            for k in range(problem.K):
                try:
                    np.linalg.cholesky(H[k])
                    self.Hinv[k] = np.linalg.inv(H[k])
                except np.linalg.LinAlgError:
                    self.bad[k] = True
                    self.Hinv[k] = np.nan

    def solve(self, sel, x0, X, Y):
        """New ``x_k`` for the rows ``sel`` (a slice or an index array).

        In proximal mode the gradients at ``x0`` are kept in ``last_gx0``.
        """
        if self.mode == "proximal":
            self.last_gx0 = Gx0 = self.stack.grads(x0, None if isinstance(sel, slice) else sel)
            return x0 - (Gx0 + Y[sel]) / (self.rho[sel] + self.Ls[sel])[:, None]
        if self.stack.quadratic:
            bad = self.bad[sel]
            if bad.any():
                k = int(np.arange(self.problem.K)[sel][np.argmax(bad)])
                raise NumericalError(f"block {k}: subproblem is not strongly convex")
            rhs = self.rho[sel, None] * x0 - self.stack.b[sel] - Y[sel]
            return (self.Hinv[sel] @ rhs[:, :, None])[:, :, 0]
        ks = np.arange(self.problem.K)[sel]
        out = np.empty((ks.size, x0.size))
        for j, k in enumerate(ks):
            out[j] = _xk_apg(self.problem.blocks[k], x0, Y[k], float(self.rho[k]), X[k], self.inner)
        return out


def consensus_checks(trace, params, Ls, mode, tol, full_sweep_run=False, start=1):
    """All inequality checks that apply to a consensus trace."""
    reports = {}
    if mode == "proximal":
        reports["identity"] = check_identity(trace, "identity", IDENTITY_TOL, start)
        reports["cumulative_descent"] = check_cumulative_descent(
            trace, params.alpha, float(np.sum(params.beta)), tol, start)
        return reports
    reports["dual_bound"] = check_dual_bound(trace, Ls, tol, start)
    reports["descent"], reports["monotone"] = check_descent(
        trace, consensus_descent_model(params, Ls), tol, start)
    reports["lower_bound"] = check_lower_bound(trace, tol, start)
    if full_sweep_run and start <= 1:
        from .calibration import complexity_constants
        try:
            sigma1 = complexity_constants(params, Ls).sigma1
        except CalibrationError:
            sigma1 = None
        if sigma1 is not None:
            reports["prox_gradient_bound"] = check_prox_gradient_bound(trace, sigma1, tol)
        reports["feasibility_chain"] = check_feasibility_chain(trace, Ls, params.rho, tol)
    return reports


CHUNK = 64


def run_consensus(problem: ConsensusProblem, config: SolverConfig):
    """Run consensus ADMM; returns a :class:`RunResult` (unpacks as ``state, trace``).

    Each iteration updates ``x0`` first (when selected, or always in
    proximal mode), then the selected ``x_k`` and their duals.  Stops when
    ``P <= stop_tol`` or after ``max_iters`` iterations.

    Iterates are produced in chunks of ``CHUNK`` iterations and evaluated
    together; a run that meets the stopping rule (or fails a check at
    ``check_level='full'``) inside a chunk is cut back to that iteration, so
    the result is the same as evaluating after every iteration.
    """
    # overflow in a diverging run is detected from non-finite values below
    with np.errstate(over="ignore", invalid="ignore"):
        return _run_consensus(problem, config)


def _run_consensus(problem: ConsensusProblem, config: SolverConfig):
    params = config.params
    K, n = problem.K, problem.n
    if params.K != K:
        raise CalibrationError(f"{params.K} penalties for {K} blocks")
    if not params.calibrated and not params.override:
        raise CalibrationError("penalties are below calibration; set override to run anyway")
    if not params.calibrated:
        log.warning("running with under-calibrated penalties (override)")
    proximal = config.mode == "proximal"
    if proximal and params.alpha is None:
        raise CalibrationError("proximal mode needs proximal-mode penalties")
    schedule = config.schedule or full_sweep(K, include_x0=not proximal)
    if schedule.K != K:
        raise ValueError(f"schedule is for K={schedule.K}, problem has K={K}")
    rng = schedule.rng()
    Ls = problem.lipschitz
    inner = config.inner
    tol = check_tolerance(inner.tol)
    ev = ConsensusEval(problem, params)
    solver = _BlockSolver(problem, params, inner, config.mode)
    h, fset = problem.regularizer, problem.fset
    rho, rho_col, rho_sum = params.rho, params.rho[:, None], float(params.rho.sum())
    model = consensus_descent_model(params, Ls)
    alpha, beta_sum = (params.alpha, float(np.sum(params.beta))) if proximal else (None, 0.0)

    state = initial_state(problem)
    x0, X, Y = state.x0, state.xs, state.ys
    extra = {"dx_sq": (K,), "dy_sq": (K,), "lower_ref": (), "gradL_sq": (), "feas_sq": (K,)}
    if proximal:
        extra["identity"] = ()
    trace = Trace(K + 1, config.max_iters + 1, extra)
    rec = {"x0": [x0.copy()], "xs": [X.copy()], "ys": [Y.copy()]} if config.record_states else None

    ev0 = ev.evaluate_rows(x0[None], X[None], Y[None])
    zK = np.zeros((1, K))
    row0 = {k: ev0[k] for k in ("lower_ref", "gradL_sq", "feas_sq")}
    if proximal:
        row0["identity"] = np.array([np.nan])
    trace.extend([0], ev0["L"], np.sqrt(ev0["feas_sq"].max(axis=1)), ev0["P"], [0.0], [0.0],
                 [0.0], np.zeros((1, K + 1), bool), [0.0], [0.0], dx_sq=zK, dy_sq=zK, **row0)
    L_first = L_last = float(ev0["L"][0])
    cum_dec = 0.0
    status = "converged" if ev0["P"][0] <= config.stop_tol else "max_iters"
    message = ""
    cache = {}
    violations = {}
    t = 0

    while t < config.max_iters and status == "max_iters":
        c = min(CHUNK, config.max_iters - t)
        bx0 = np.empty((c + 1, n))
        bX = np.empty((c + 1, K, n))
        bY = np.empty((c + 1, K, n))
        fired = np.zeros((c, K + 1), dtype=bool)
        wall = np.zeros(c)
        bx0[0], bX[0], bY[0] = x0, X, Y
        done = c
        for j in range(c):
            tic = time.perf_counter() if config.timing else 0.0
            C = next_blocks(schedule, t + j, rng)
            hit = cache.get(C)
            if hit is None:
                idx = np.array([i - 1 for i in C if i > 0], dtype=int)
                fire0 = proximal or 0 in C
                mask = np.zeros(K + 1, dtype=bool)
                mask[list(C)] = True
                mask[0] = fire0
                # a slice keeps full sweeps on views instead of fancy-index copies
                sel = slice(None) if idx.size == K else idx
                hit = cache[C] = (idx.size, sel, fire0, mask)
            nfire, sel, fire0, mask = hit
            try:
                if fire0:
                    v = (rho @ X + Y.sum(axis=0)) / rho_sum
                    if not np.isfinite(v).all():
                        raise NumericalError(f"non-finite iterate at iteration {t + j}")
                    x0 = prox_on_set(h, fset, v, 1.0 / rho_sum, tol=inner.tol * 1e-2,
                                     max_iter=inner.max_iter)
                if nfire:
                    Xi = solver.solve(sel, x0, X, Y)
                    Y[sel] += rho_col[sel] * (Xi - x0)
                    X[sel] = Xi
            except (NumericalError, InnerSolverError) as exc:
                if not params.override:
                    raise
                status, message, done = "diverged", str(exc), j
                break
            bx0[j + 1], bX[j + 1], bY[j + 1] = x0, X, Y
            fired[j] = mask
            if config.timing:
                wall[j] = (time.perf_counter() - tic) * 1e3

        if done == 0:
            break
        rows = ev.evaluate_rows(bx0[1:done + 1], bX[1:done + 1], bY[1:done + 1])
        steps = ev.step_rows(bx0[:done + 1], bX[:done + 1], bY[:done + 1])
        dx_sq, dy_sq, dx0_sq = steps["dx_sq"][1:], steps["dy_sq"][1:], steps["dx0_sq"][1:]
        bad = ~np.isfinite(rows["L"]) | ~np.isfinite(rows["P"])
        cut = done
        if bad.any():
            cut = int(np.argmax(bad))
            msg = f"non-finite iterate at iteration {t + cut + 1}"
            if not params.override:
                raise NumericalError(msg, state=ConsensusState(bx0[cut], bX[cut], bY[cut], t + cut))
            status, message = "diverged", msg
        hits = np.flatnonzero(rows["P"][:cut] <= config.stop_tol)
        if hits.size:
            cut = int(hits[0]) + 1
            status = "converged"
        L = rows["L"][:cut]
        if proximal:
            dec = np.cumsum(dx_sq[:cut] @ alpha + beta_sum * dx0_sq[:cut]) + cum_dec
            margin = -dec - (L - L_first)
            cum_dec = float(dec[-1]) if cut else cum_dec
        else:
            dL = np.diff(np.r_[L_last, L])
            margin = dx_sq[:cut] @ model.block + model.x0 * dx0_sq[:cut] - dL
        ex = {k: rows[k][:cut] for k in ("lower_ref", "gradL_sq", "feas_sq")}
        if proximal:
            ex["identity"] = ev.identity_rows(bx0[1:cut + 1], bX[1:cut + 1], bY[1:cut + 1],
                                              fired[:cut])
        first = len(trace)
        trace.extend(np.arange(t + 1, t + cut + 1), L, np.sqrt(rows["feas_sq"][:cut].max(axis=1)),
                     rows["P"][:cut], dx_sq[:cut].sum(axis=1), dx0_sq[:cut],
                     dy_sq[:cut].sum(axis=1), fired[:cut], margin, wall[:cut],
                     dx_sq=dx_sq[:cut], dy_sq=dy_sq[:cut], **ex)
        if rec is not None:
            rec["x0"].extend(bx0[1:cut + 1])
            rec["xs"].extend(bX[1:cut + 1])
            rec["ys"].extend(bY[1:cut + 1])
        if config.check_level == "full" and cut:
            reports = consensus_checks(trace, params, Ls, config.mode, tol, start=first)
            it = _full_check(reports, params, violations)
            if it is not None and not params.override:
                r = it - t
                raise CheckViolation(_violation_msg(reports, it), iteration=it,
                                     check=_first_failed(reports),
                                     state=ConsensusState(bx0[r].copy(), bX[r].copy(),
                                                          bY[r].copy(), it))
        t += cut
        if cut:
            x0, X, Y = bx0[cut].copy(), bX[cut].copy(), bY[cut].copy()
            L_last = float(L[-1])

    final = ConsensusState(x0.copy(), X.copy(), Y.copy(), t)
    checks = {}
    if config.check_level != "off":
        full_sweep_run = schedule.kind == "full" and not proximal
        checks = consensus_checks(trace, params, Ls, config.mode, tol, full_sweep_run)
    states = {k: np.array(v) for k, v in rec.items()} if rec is not None else {}
    if states:
        states["fired"] = trace.fired.copy()
    return RunResult(final, trace, status, checks, params, states, message)


def _first_failed(reports):
    bad = [(r.first_failure, name) for name, r in reports.items() if r.failed]
    return min(bad)[1] if bad else None


def _violation_msg(reports, it):
    name = _first_failed(reports)
    return f"{name} check failed at iteration {it} (excess {reports[name].worst:.3e})"


def _full_check(reports, params, seen):
    """First failing iteration among ``reports`` (None if all passed).

    Override runs only log the first failure of each check.
    """
    first = None
    for name, rep in reports.items():
        if rep.failed:
            first = rep.first_failure if first is None else min(first, rep.first_failure)
            if params.override and name not in seen:
                seen[name] = rep.first_failure
                log.warning("%s check failed at iteration %d (override run continues)",
                            name, rep.first_failure)
    return first
