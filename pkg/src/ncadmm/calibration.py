"""Penalty-parameter calibration and iteration-complexity constants.

The strong-convexity modulus of a subproblem ``g(x) + (rho/2)||x - v||^2``
is never available in closed form for a general ``g``; every routine here
uses the bound that holds for any function with an ``L``-Lipschitz
gradient::

    gamma(rho) = rho - L      (nonconvex g)
    gamma(rho) = rho          (convex g)

and ``rho * lambda_min(A'A) - L`` when the quadratic term is
``(rho/2)||A x - v||^2``.  With these moduli the descent conditions become
explicit polynomial inequalities in ``rho`` whose roots are computed
directly (consensus, sharing) or by bisection (proximal mode).

The third complexity constant follows from two estimates available along
an exact full-sweep run: ``||prox-grad L|| <= sigma1 * sum of step norms``
over ``K + 1`` blocks, and ``||x_k - x_0|| <= (L_k/rho_k) ||step_k||``.
Squaring the first with Cauchy-Schwarz gives a factor ``K + 1``; squaring
the second adds ``(L_k/rho_k)^2``.  Hence
``sigma3 = sigma1^2 (K + 1) + sum_k (L_k/rho_k)^2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import CalibrationError

DEFAULT_MARGIN = 1.01


@dataclass(frozen=True, eq=False)
class PenaltyParams:
    """Penalties plus the moduli used by the descent checks.

    ``rho`` and ``gamma`` are per-block arrays; for the sharing and
    two-block solvers every block shares one ``rho`` and ``rho_scalar``
    holds it.  ``gamma0`` is the modulus of the ``x_0`` subproblem.
    """

    mode: str
    rho: np.ndarray
    gamma: np.ndarray
    gamma0: float
    margin: float = DEFAULT_MARGIN
    thresholds: np.ndarray = field(default_factory=lambda: np.zeros(0))
    alpha: Optional[np.ndarray] = None
    beta: Optional[np.ndarray] = None
    T: int = 1
    calibrated: bool = True
    override: bool = False

    @property
    def rho_scalar(self):
        return float(self.rho[0])

    @property
    def K(self):
        return self.rho.size


@dataclass(frozen=True)
class ComplexityConstants:
    sigma1: float
    sigma2: float
    sigma3: float

    @property
    def C(self):
        return self.sigma3 / self.sigma2


def rho_floor(Ls):
    """Penalty used for blocks whose ``L = 0``."""
    Ls = np.atleast_1d(np.asarray(Ls, dtype=float))
    return 1e-3 * max(1.0, float(Ls.mean()) if Ls.size else 1.0)


def modulus_lower_bound(L, rho, convex=False):
    """Strong-convexity modulus of ``g + (rho/2)||. - v||^2``; negative means none."""
    if not rho > 0:
        raise ValueError("rho must be positive")
    return float(rho) if convex else float(rho) - float(L)


def _check_Ls(Ls):
    Ls = np.atleast_1d(np.asarray(Ls, dtype=float))
    if not np.all(np.isfinite(Ls)) or np.any(Ls < 0):
        raise CalibrationError(f"Lipschitz constants must be finite and nonnegative: {Ls}")
    return Ls


def _flags(convex, K):
    if convex is None:
        return [False] * K
    if isinstance(convex, (bool, np.bool_)):
        return [bool(convex)] * K
    if len(convex) != K:
        raise CalibrationError("need one convexity flag per block")
    return [bool(c) for c in convex]


def consensus_threshold(L, convex=False):
    """Smallest ``rho`` with ``rho * gamma(rho) = 2 L^2``: ``2L`` or ``sqrt(2) L``."""
    return np.sqrt(2.0) * L if convex else 2.0 * L


def calibrate_consensus(Ls, margin=DEFAULT_MARGIN, convex=None):
    """Penalties satisfying ``rho_k gamma_k > 2 L_k^2`` and ``rho_k >= L_k``."""
    if not margin > 1:
        raise CalibrationError("margin must exceed 1 for the strict inequalities")
    Ls = _check_Ls(Ls)
    flags = _flags(convex, Ls.size)
    floor = rho_floor(Ls)
    thr = np.array([consensus_threshold(L, c) for L, c in zip(Ls, flags)])
    # the floor also guards tiny L whose squares underflow
    rho = np.maximum(np.maximum(margin * thr, Ls), floor)
    return consensus_params(rho, Ls, flags, margin=margin, thresholds=thr)


def consensus_params(rho, Ls, convex=None, margin=DEFAULT_MARGIN, thresholds=None, override=False):
    """Wrap explicit penalties; refuses under-calibrated ones unless ``override``."""
    Ls = _check_Ls(Ls)
    rho = np.broadcast_to(np.asarray(rho, dtype=float), Ls.shape).copy()
    if np.any(rho <= 0):
        raise CalibrationError("penalties must be positive")
    flags = _flags(convex, Ls.size)
    gamma = np.array([modulus_lower_bound(L, r, c) for L, r, c in zip(Ls, rho, flags)])
    ok = bool(np.all(rho * gamma > 2 * Ls ** 2) and np.all(rho >= Ls))
    if not ok and not override:
        bad = np.flatnonzero(~((rho * gamma > 2 * Ls ** 2) & (rho >= Ls)))
        raise CalibrationError(f"penalties below calibration for blocks {bad.tolist()}; "
                               "pass override=True to run anyway")
    if thresholds is None:
        thresholds = np.array([consensus_threshold(L, c) for L, c in zip(Ls, flags)])
    return PenaltyParams("consensus", rho, gamma, float(rho.sum()), margin,
                         np.asarray(thresholds, dtype=float), calibrated=ok, override=override)


def proximal_alpha(rho, L):
    return (rho - 7 * L) / 2 - (4 * L / rho ** 2 + 1 / rho) * 2 * L ** 2


def proximal_beta(rho, L, T):
    return rho / 2 - T ** 2 * (4 * L / rho ** 2 + 1 / rho) * 8 * L ** 2


def proximal_threshold(L, T, rtol=1e-13):
    """Smallest ``rho >= 5L`` with both proximal descent coefficients positive.

    Both coefficients increase with ``rho``, so the feasible set is a
    half-line found by bisection on their minimum.
    """
    def worst(r):
        return min(proximal_alpha(r, L), proximal_beta(r, L, T))

    # keep 1/r^2 finite when L is tiny
    lo = max(5.0 * L, 1e-150)
    if worst(lo) > 0:
        return lo
    hi = 1e3 * T ** 2 * max(L, 1.0)
    if worst(hi) <= 0:
        raise CalibrationError(f"bisection bracket [{lo}, {hi}] holds no feasible penalty")
    while hi - lo > rtol * hi:
        mid = 0.5 * (lo + hi)
        if worst(mid) > 0:
            hi = mid
        else:
            lo = mid
    return hi


def calibrate_proximal(Ls, T=1, margin=DEFAULT_MARGIN):
    """Penalties for the linearized (proximal) consensus updates."""
    if T < 1:
        raise CalibrationError("period T must be at least 1")
    if margin < 1:
        raise CalibrationError("margin must be at least 1")
    Ls = _check_Ls(Ls)
    floor = rho_floor(Ls)
    thr = np.array([proximal_threshold(L, T) if L > 0 else 0.0 for L in Ls])
    rho = np.maximum(margin * thr, floor)
    return proximal_params(rho, Ls, T, margin=margin, thresholds=thr)


def proximal_params(rho, Ls, T=1, margin=DEFAULT_MARGIN, thresholds=None, override=False):
    Ls = _check_Ls(Ls)
    rho = np.broadcast_to(np.asarray(rho, dtype=float), Ls.shape).copy()
    if np.any(rho <= 0):
        raise CalibrationError("penalties must be positive")
    alpha = proximal_alpha(rho, Ls)
    beta = proximal_beta(rho, Ls, T)
    ok = bool(np.all(alpha > 0) and np.all(beta > 0) and np.all(rho >= 5 * Ls))
    if not ok and not override:
        raise CalibrationError("penalties violate the proximal-mode conditions; "
                               "pass override=True to run anyway")
    if thresholds is None:
        thresholds = np.array([proximal_threshold(L, T) if L > 0 else 0.0 for L in Ls])
    return PenaltyParams("proximal", rho, rho + Ls, float(rho.sum()), margin,
                         np.asarray(thresholds, dtype=float), alpha, beta, T, ok, override)


def sharing_block_threshold(L_k, lam):
    """Smallest ``rho`` with ``rho (rho lam - L_k) >= 2 L_k^2``."""
    return L_k * (1.0 + np.sqrt(1.0 + 8.0 * lam)) / (2.0 * lam)


def calibrate_sharing(problem, margin=DEFAULT_MARGIN, L=None, coupling_convex=None):
    """Single penalty for the sharing ADMM.

    Thresholds: ``rho gamma(rho) > 2L^2`` for the ``x_0`` step (``2L`` for
    nonconvex coupling, ``sqrt(2) L`` for convex), ``rho >= L``, and for each
    nonconvex smooth block ``rho (rho lam_k - L_k) >= 2 L_k^2`` with
    ``lam_k = lambda_min(A_k'A_k)``.  When everything is convex this reduces
    to ``rho > sqrt(2) L``.
    """
    if not margin > 1:
        raise CalibrationError("margin must exceed 1 for the strict inequalities")
    lam = problem.lam_min
    if np.any(lam <= 1e-12):
        raise CalibrationError("every A_k must have full column rank")
    L = problem.coupling.lipschitz if L is None else float(L)
    _check_Ls([L])
    convex0 = problem.coupling.convex if coupling_convex is None else coupling_convex
    thr = [consensus_threshold(L, convex0), L]
    for blk, lk in zip(problem.blocks, lam):
        if not blk.convex and blk.lipschitz > 0:
            thr.append(sharing_block_threshold(blk.lipschitz, lk))
    rho_star = max(thr)
    Ls_all = [L] + [b.lipschitz for b in problem.blocks]
    rho = max(margin * rho_star, rho_floor(Ls_all))
    return sharing_params(rho, problem, margin=margin, L=L, coupling_convex=convex0,
                          thresholds=np.array(thr))


def sharing_params(rho, problem, margin=DEFAULT_MARGIN, L=None, coupling_convex=None,
                   thresholds=None, override=False):
    rho = float(rho)
    if rho <= 0:
        raise CalibrationError("penalty must be positive")
    L = problem.coupling.lipschitz if L is None else float(L)
    convex0 = problem.coupling.convex if coupling_convex is None else coupling_convex
    gamma = np.array([rho * lk - (0.0 if blk.convex else blk.lipschitz)
                      for blk, lk in zip(problem.blocks, problem.lam_min)])
    gamma0 = modulus_lower_bound(L, rho, convex0)
    ok = bool(rho * gamma0 > 2 * L ** 2 and rho >= L and np.all(gamma > 0))
    if not ok and not override:
        raise CalibrationError(f"rho={rho:.6g} violates the sharing conditions; "
                               "pass override=True to run anyway")
    if thresholds is None:
        thresholds = np.zeros(0)
    return PenaltyParams("sharing", np.full(problem.K, rho), gamma, gamma0, margin,
                         np.asarray(thresholds, dtype=float), calibrated=ok, override=override)


def two_block_threshold(L_g, A, monotone=False):
    """``L_g / lambda_min(AA')``, or twice that for guaranteed monotone descent.

    The smaller bound makes the augmented Lagrangian bounded below; per-step
    descent needs ``rho lambda_min > 2 L_g`` because the dual step can add up
    to ``L_g^2 / (rho lambda_min)`` times the squared ``x_2`` step.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    lam = float(np.linalg.eigvalsh(A @ A.T).min())
    if lam <= 1e-12:
        raise CalibrationError("A must be invertible")
    return (2.0 if monotone else 1.0) * L_g / lam


def calibrate_two_block(L_g, A, margin=DEFAULT_MARGIN, monotone=False):
    """Penalty for the two-block ADMM with an invertible ``A``."""
    if L_g < 0 or not np.isfinite(L_g):
        raise CalibrationError("L_g must be finite and nonnegative")
    if L_g == 0:
        two_block_threshold(0.0, A)  # still reject a singular A
        return rho_floor([0.0])
    A = np.atleast_2d(np.asarray(A, dtype=float))
    rho = margin * two_block_threshold(L_g, A, monotone)
    # x_2 subproblem modulus rho * lambda_min(A'A) - L_g must be positive
    lam_t = float(np.linalg.eigvalsh(A.T @ A).min())
    return float(max(rho, margin * L_g / lam_t, rho_floor([L_g])))


def two_block_params(rho, problem, override=False):
    rho = float(rho)
    L_g = problem.g.lipschitz
    gamma2 = rho * problem.lam_min_AtA - (0.0 if problem.g.convex else L_g)
    ok = bool(rho * problem.lam_min > L_g and gamma2 > 0) if L_g > 0 else gamma2 >= 0
    if not ok and not override:
        raise CalibrationError(f"rho={rho:.6g} below the two-block bound; "
                               "pass override=True to run anyway")
    return PenaltyParams("two-block", np.array([rho]), np.array([gamma2]), 0.0, 1.0,
                         np.array([L_g / problem.lam_min]), calibrated=ok, override=override)


def complexity_constants(params: PenaltyParams, Ls):
    """``sigma1``, ``sigma2``, ``sigma3`` of the iteration-complexity bound."""
    Ls = _check_Ls(Ls)
    rho = params.rho
    K = Ls.size
    gamma0 = float(rho.sum())
    sigma1 = max(2.0 + 2.0 * gamma0, float(np.max(Ls + rho)))
    sigma2 = min(float(np.min(params.gamma / 2 - Ls ** 2 / rho)), gamma0 / 2)
    if sigma2 <= 0:
        raise CalibrationError(f"sigma2 = {sigma2:.6g} <= 0: penalties are not calibrated")
    sigma3 = sigma1 ** 2 * (K + 1) + float(np.sum((Ls / rho) ** 2))
    return ComplexityConstants(sigma1, sigma2, sigma3)
