"""Independent reference computations used by the tests.

Nothing here calls the solver code paths it is compared against; each
oracle is a deliberately plain reimplementation (loops, grids, bisection).
"""

import numpy as np


def central_diff(fun, x, h=1e-5):
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (fun(x + e) - fun(x - e)) / (2 * h)
    return g


def grid_min_1d(fun, lo, hi, n=10001):
    """Minimum of a scalar function over an ``n``-point grid on ``[lo, hi]``."""
    ts = np.linspace(lo, hi, n)
    vals = np.array([fun(t) for t in ts])
    i = int(np.argmin(vals))
    return ts[i], vals[i]


def refine_min_1d(fun, lo, hi, rounds=5, n=401):
    """Grid search with repeated zooming; fine for unimodal functions.

    The zoomed window never leaves the starting interval.
    """
    a, b = lo, hi
    for _ in range(rounds):
        t, _ = grid_min_1d(fun, lo, hi, n)
        w = (hi - lo) / (n - 1)
        lo, hi = max(t - 2 * w, a), min(t + 2 * w, b)
    return grid_min_1d(fun, lo, hi, n)


def bisect_derivative(fun, lo, hi, h=1e-3, iters=200):
    """Root of the central-difference derivative of a convex 1-d function."""
    def d(t):
        return fun(t + h) - fun(t - h)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if d(mid) > 0:
            hi = mid
        else:
            lo = mid
        if hi - lo < 1e-15 * max(1.0, abs(mid)):
            break
    return 0.5 * (lo + hi)


def lagrangian_consensus(problem, x0, xs, ys, rho):
    """Term-by-term augmented Lagrangian of the consensus reformulation."""
    total = problem.regularizer.value(x0)
    for k, blk in enumerate(problem.blocks):
        r = xs[k] - x0
        total += blk.value(xs[k])
        total += float(np.dot(ys[k], r))
        total += 0.5 * rho[k] * float(np.dot(r, r))
    return total


def lagrangian_sharing(problem, x0, xs, y, rho):
    s = np.zeros(problem.M)
    total = 0.0
    for blk, x in zip(problem.blocks, xs):
        s = s + blk.A @ x
        total += blk.value(x)
    r = x0 - s
    return total + problem.coupling.value(x0) + float(np.dot(r, y)) + 0.5 * rho * float(np.dot(r, r))


def fista(grad, value, lip, prox, x, iters=20000, tol=1e-13):
    """Accelerated proximal gradient with restart; returns the final point."""
    z, t = x.copy(), 1.0
    fx = value(x)
    for _ in range(iters):
        x_new = prox(z - grad(z) / lip, 1.0 / lip)
        f_new = value(x_new)
        if f_new > fx:  # restart
            z, t = x.copy(), 1.0
            continue
        t_new = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        z = x_new + (t - 1) / t_new * (x_new - x)
        if np.linalg.norm(x_new - x) <= tol * (1 + np.linalg.norm(x)):
            x = x_new
            break
        x, fx, t = x_new, f_new, t_new
    return x


def sharing_oracle(problem, iters=50000):
    """Minimize ``sum g_k(x_k) + l(sum A_k x_k)`` over boxes by projected FISTA.

    Assumes every block is a smooth convex function and every set a box.
    """
    dims = [b.dim for b in problem.blocks]
    cuts = np.cumsum(dims)[:-1]
    A = np.hstack([b.A for b in problem.blocks])
    lo = np.concatenate([b.fset.lo for b in problem.blocks])
    hi = np.concatenate([b.fset.hi for b in problem.blocks])

    def split(x):
        return np.split(x, cuts)

    def value(x):
        xs = split(x)
        return sum(b.fn.value(v) for b, v in zip(problem.blocks, xs)) + problem.coupling.value(A @ x)

    def grad(x):
        xs = split(x)
        g = np.concatenate([b.fn.grad(v) for b, v in zip(problem.blocks, xs)])
        return g + A.T @ problem.coupling.grad(A @ x)

    lip = max(b.fn.lipschitz for b in problem.blocks) + problem.coupling.lipschitz * np.linalg.norm(A, 2) ** 2
    x = fista(grad, value, lip, lambda v, s: np.clip(v, lo, hi), np.zeros(A.shape[1]), iters)
    return value(x), split(x)


def two_block_oracle(problem, iters=50000):
    """Eliminate ``x2 = A^{-1}(c - B x1)`` and run proximal FISTA on ``x1``.

    Assumes ``f = lam ||.||_1`` (or zero) and ``X`` a box; ``g`` convex.
    """
    Ainv = np.linalg.inv(problem.A)
    M = Ainv @ problem.B
    d = Ainv @ problem.c
    lam = problem.f.weight if problem.f.kind == "l1" else 0.0
    lo, hi = problem.fset.lo, problem.fset.hi

    def smooth(x1):
        return problem.g.value(d - M @ x1)

    def value(x1):
        return smooth(x1) + lam * np.abs(x1).sum()

    def grad(x1):
        return -M.T @ problem.g.grad(d - M @ x1)

    def prox(v, step):
        return np.clip(np.sign(v) * np.maximum(np.abs(v) - lam * step, 0.0), lo, hi)

    lip = problem.g.lipschitz * np.linalg.norm(M, 2) ** 2
    x1 = fista(grad, value, lip, prox, np.zeros(problem.B.shape[1]), iters)
    return value(x1), x1
