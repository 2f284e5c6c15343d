"""Inner solvers for the strongly convex ADMM subproblems."""

import numpy as np

from .errors import InnerSolverError


def apg(grad, lip, mu, prox, x0, tol=1e-10, max_iter=100000):
    """Accelerated proximal gradient for ``phi(x) + psi(x)``.

    ``grad`` is the gradient of the smooth part (``lip``-Lipschitz,
    ``mu``-strongly convex, ``mu`` may be 0) and ``prox(v, step)`` the prox
    of the nonsmooth part.  Stops once the gradient mapping satisfies
    ``||G|| <= tol * (1 + ||x||)``.
    """
    step = 1.0 / lip
    x = np.array(x0, dtype=float)
    z = x.copy()
    t = 1.0
    beta_sc = 0.0
    if mu > 0:
        q = np.sqrt(mu / lip)
        beta_sc = (1.0 - q) / (1.0 + q)
    res = np.inf
    for _ in range(max_iter):
        xn = prox(z - step * grad(z), step)
        G = (z - xn) / step
        res = np.linalg.norm(G)
        if res <= tol * (1.0 + np.linalg.norm(xn)):
            return xn
        if mu > 0:
            beta = beta_sc
        else:
            tn = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
            beta = (t - 1.0) / tn
            t = tn
        # gradient-based restart keeps the momentum from overshooting
        if np.dot(G, xn - x) > 0:
            beta, t = 0.0, 1.0
        z = xn + beta * (xn - x)
        x = xn
    raise InnerSolverError(f"accelerated prox-gradient did not converge in {max_iter} iterations",
                           residual=res)


def dykstra_prox(prox_f, prox_g, z, tol=1e-12, max_iter=10000):
    """Prox of ``f + g`` at ``z`` from the individual proxes (Dykstra-like splitting)."""
    x = np.array(z, dtype=float)
    p = np.zeros_like(x)
    q = np.zeros_like(x)
    delta = np.inf
    for _ in range(max_iter):
        y = prox_f(x + p)
        p = x + p - y
        xn = prox_g(y + q)
        q = y + q - xn
        delta = np.linalg.norm(xn - x)
        x = xn
        if delta <= tol * (1.0 + np.linalg.norm(x)):
            return x
    raise InnerSolverError("Dykstra splitting did not converge", residual=delta)


def _soft(z, t):
    return np.sign(z) * np.maximum(np.abs(z) - t, 0.0)


def solve_composite_qp(H, c, lam=0.0, lo=None, hi=None, x0=None, tol=1e-13, max_active=60):
    """Exact minimizer of ``0.5 x'Hx - c'x + lam ||x||_1`` over ``lo <= x <= hi``.

    ``H`` must be positive definite.  A primal-dual active-set iteration
    identifies which coordinates sit at zero or at a bound and solves the
    reduced linear system; it terminates in a handful of steps on small
    problems.  If the active set cycles, accelerated prox-gradient takes
    over from the last iterate.
    """
    n = c.size
    lo = np.full(n, -np.inf) if lo is None else lo
    hi = np.full(n, np.inf) if hi is None else hi
    if lam == 0 and np.all(np.isinf(lo)) and np.all(np.isinf(hi)):
        return np.linalg.solve(H, c)
    lip = float(np.linalg.eigvalsh(H).max())
    mu = float(np.linalg.eigvalsh(H).min())
    tau = 1.0 / lip

    def prox(v, step):
        return np.clip(_soft(v, step * lam), lo, hi)

    def residual(x):
        return np.linalg.norm(x - prox(x - tau * (H @ x - c), tau)) / tau

    x = np.clip(np.zeros(n) if x0 is None else np.asarray(x0, dtype=float), lo, hi)
    prev = None
    for _ in range(max_active):
        z = x - tau * (H @ x - c)
        s = _soft(z, tau * lam)
        free = (np.abs(z) > tau * lam) & (s > lo) & (s < hi)
        pattern = (free.tobytes(), np.sign(z[free]).tobytes())
        xn = prox(z, tau)
        F = np.flatnonzero(free)
        if F.size:
            A = np.flatnonzero(~free)
            rhs = c[F] - lam * np.sign(z[F]) - H[np.ix_(F, A)] @ xn[A]
            xn[F] = np.linalg.solve(H[np.ix_(F, F)], rhs)
        x = xn
        if pattern == prev and residual(x) <= tol * (1.0 + np.linalg.norm(x)) * lip:
            return x
        prev = pattern
    return apg(lambda v: H @ v - c, lip, max(mu, 0.0), prox, x, tol=tol * 100)
