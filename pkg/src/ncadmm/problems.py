"""Problem data for the consensus, sharing and two-block formulations.

Three ingredient types cover every function the solvers touch:

``SmoothBlock``
    a smooth, possibly nonconvex function with value, gradient and the
    Lipschitz constant of its gradient.  Quadratics additionally carry their
    ``(Q, b, c)`` data so subproblems can be solved in closed form.
``Regularizer``
    a convex, possibly nonsmooth function with a closed-form proximity
    operator (zero, weighted l1 norm, indicator of a box).
``FeasibleSet``
    a closed convex set with a closed-form projection (whole space, box,
    Euclidean ball).

All containers are frozen; derived quantities (stacked quadratic data,
smallest eigenvalues) are computed once and cached.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import _inner
from .errors import NumericalError, ValidationError

__all__ = [
    "Quadratic", "SmoothBlock", "Regularizer", "FeasibleSet",
    "ConsensusProblem", "SharingBlock", "SharingProblem", "TwoBlockProblem",
    "ValidationReport", "quadratic_block", "sigmoid_block", "cosine_coupling",
    "zero_regularizer", "l1_regularizer", "box_indicator", "whole_space",
    "box", "ball", "eval_block", "apply_prox", "prox_on_set", "validate",
    "spectral_norm", "finite_diff_gradient", "BlockStack",
]


def _as_vector(x, dim=None, name="x"):
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1)
    if dim is not None and x.shape != (dim,):
        raise ValidationError(f"{name} has shape {x.shape}, expected ({dim},)")
    return x


def spectral_norm(Q):
    """Largest absolute eigenvalue of a symmetric matrix."""
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    if Q.size == 0:
        return 0.0
    w = np.linalg.eigvalsh(0.5 * (Q + Q.T))
    return float(np.max(np.abs(w)))


def finite_diff_gradient(value_fn, x, step=1e-5):
    """Central-difference gradient of ``value_fn`` at ``x``."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    e = np.zeros_like(x)
    for i in range(x.size):
        e[i] = step
        g[i] = (value_fn(x + e) - value_fn(x - e)) / (2.0 * step)
        e[i] = 0.0
    return g


# ---------------------------------------------------------------------------
# smooth blocks

@dataclass(frozen=True, eq=False)
class Quadratic:
    """``0.5 x'Qx + b'x + c`` with symmetric ``Q``."""

    Q: np.ndarray
    b: np.ndarray
    c: float = 0.0


@dataclass(frozen=True, eq=False)
class SmoothBlock:
    """A smooth function with an ``lipschitz``-Lipschitz gradient.

    ``convex`` selects the strong-convexity bookkeeping used by
    calibration; it must be ``True`` only when the function really is
    convex.  ``quad`` is set for quadratics.
    """

    dim: int
    value_fn: Callable[[np.ndarray], float]
    grad_fn: Callable[[np.ndarray], np.ndarray]
    lipschitz: float
    convex: bool = False
    quad: Optional[Quadratic] = None
    name: str = "smooth"

    def __post_init__(self):
        if self.dim < 1:
            raise ValidationError("dim must be positive")
        if not np.isfinite(self.lipschitz) or self.lipschitz < 0:
            raise ValidationError(f"invalid Lipschitz constant {self.lipschitz!r}")

    def value(self, x):
        return float(self.value_fn(x))

    def grad(self, x):
        return np.asarray(self.grad_fn(x), dtype=float)


def quadratic_block(Q, b=None, c=0.0, lipschitz=None, convex=None, name="quadratic"):
    """Build ``g(x) = 0.5 x'Qx + b'x + c``.

    The Lipschitz constant defaults to the spectral norm of ``Q`` and the
    convexity flag to ``lambda_min(Q) >= 0``.
    """
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    n = Q.shape[0]
    if Q.shape != (n, n):
        raise ValidationError(f"Q must be square, got {Q.shape}")
    Q = 0.5 * (Q + Q.T)
    b = np.zeros(n) if b is None else _as_vector(b, n, "b")
    if lipschitz is None:
        lipschitz = spectral_norm(Q)
    if convex is None:
        convex = bool(np.linalg.eigvalsh(Q).min() >= -1e-12 * max(1.0, lipschitz))
    quad = Quadratic(Q, b, float(c))

    def value_fn(x):
        return 0.5 * x @ (Q @ x) + b @ x + quad.c

    def grad_fn(x):
        return Q @ x + b

    return SmoothBlock(n, value_fn, grad_fn, float(lipschitz), bool(convex), quad, name)


# max |d^2/dz^2 1/(1+e^z)| = sqrt(3)/18
SIGMOID_CURVATURE = np.sqrt(3.0) / 18.0


def sigmoid_block(A, lipschitz=None, name="sigmoid"):
    """Nonconvex sigmoid loss ``g(x) = mean_i 1 / (1 + exp(a_i'x))``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    m, n = A.shape
    if lipschitz is None:
        lipschitz = SIGMOID_CURVATURE * np.linalg.norm(A, 2) ** 2 / m

    def value_fn(x):
        # 1/(1+e^z) = expit(-z)
        return float(np.mean(_expit(-(A @ x))))

    def grad_fn(x):
        s = _expit(A @ x)
        return -(A.T @ (s * (1.0 - s))) / m

    return SmoothBlock(n, value_fn, grad_fn, float(lipschitz), False, None, name)


def _expit(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def cosine_coupling(dim, mu, name="cosine"):
    """``l(u) = 0.5||u||^2 - mu * sum(cos(u_i))``; gradient Lipschitz ``1 + mu``."""
    mu = float(mu)

    def value_fn(u):
        return 0.5 * u @ u - mu * np.sum(np.cos(u))

    def grad_fn(u):
        return u + mu * np.sin(u)

    return SmoothBlock(dim, value_fn, grad_fn, 1.0 + abs(mu), abs(mu) <= 1.0, None, name)


class BlockStack:
    """Vectorized evaluation of equal-dimension blocks on rows of a matrix."""

    def __init__(self, blocks: Sequence[SmoothBlock]):
        self.blocks = list(blocks)
        self.quadratic = all(b.quad is not None for b in self.blocks)
        if self.quadratic and self.blocks:
            self.Q = np.stack([b.quad.Q for b in self.blocks])
            self.b = np.stack([b.quad.b for b in self.blocks])
            self.c = np.array([b.quad.c for b in self.blocks])

    def _rows(self, X, idx):
        if idx is None:
            return (X if X.ndim == 2 else np.broadcast_to(X, (len(self.blocks), X.size))), slice(None)
        idx = np.asarray(idx, dtype=int)
        return (X[idx] if X.ndim == 2 else np.broadcast_to(X, (idx.size, X.size))), idx

    def values(self, X, idx=None):
        return self.values_grads(X, idx)[0]

    def grads(self, X, idx=None):
        if self.quadratic:
            Xs, sel = self._rows(X, idx)
            return (self.Q[sel] @ Xs[:, :, None])[:, :, 0] + self.b[sel]
        return self.values_grads(X, idx)[1]

    def values_grads(self, X, idx=None):
        """Values and gradients of the selected blocks (all when ``idx`` is None).

        ``X`` holds one row per selected block, or a single vector shared by
        all of them.
        """
        Xs, sel = self._rows(X, idx)
        if self.quadratic:
            QX = (self.Q[sel] @ Xs[:, :, None])[:, :, 0]
            b = self.b[sel]
            vals = ((0.5 * QX + b) * Xs).sum(axis=1) + self.c[sel]
            return vals, QX + b
        ks = range(len(self.blocks)) if idx is None else sel
        vals = np.array([self.blocks[k].value(r) for k, r in zip(ks, Xs)])
        grads = np.stack([self.blocks[k].grad(r) for k, r in zip(ks, Xs)])
        return vals, grads


# ---------------------------------------------------------------------------
# regularizers and sets

@dataclass(frozen=True, eq=False)
class Regularizer:
    """Convex function with a proximity operator.

    ``prox_fn(z, w)`` returns ``argmin_x h(x) + ||x - z||^2 / (2w)``.
    ``kind`` is one of ``zero``, ``l1``, ``box`` or ``custom``; the named
    kinds let :func:`prox_on_set` combine them with a constraint set in
    closed form.
    """

    dim: int
    value_fn: Callable[[np.ndarray], float]
    prox_fn: Callable[[np.ndarray, float], np.ndarray]
    kind: str = "custom"
    weight: float = 0.0
    lo: Optional[np.ndarray] = None
    hi: Optional[np.ndarray] = None

    def value(self, x):
        return float(self.value_fn(x))

    def prox(self, z, w):
        return np.asarray(self.prox_fn(z, w), dtype=float)


def soft_threshold(z, t):
    return z - np.minimum(np.maximum(z, -t), t)


def zero_regularizer(dim):
    return Regularizer(dim, lambda x: 0.0, lambda z, w: np.array(z, dtype=float), "zero")


def l1_regularizer(dim, lam):
    lam = float(lam)
    if lam < 0:
        raise ValidationError("l1 weight must be nonnegative")
    if lam == 0:
        return zero_regularizer(dim)
    return Regularizer(dim, lambda x: lam * float(np.abs(x).sum()),
                       lambda z, w: soft_threshold(z, w * lam), "l1", lam)


def box_indicator(lo, hi, dim=None):
    lo, hi = _box_bounds(lo, hi, dim)

    def value_fn(x):
        return 0.0 if np.all((x >= lo) & (x <= hi)) else np.inf

    return Regularizer(lo.size, value_fn, lambda z, w: np.clip(z, lo, hi), "box", 0.0, lo, hi)


def _box_bounds(lo, hi, dim):
    if dim is None:
        dim = max(np.size(lo), np.size(hi))
    lo = np.broadcast_to(np.asarray(lo, dtype=float), (dim,)).copy()
    hi = np.broadcast_to(np.asarray(hi, dtype=float), (dim,)).copy()
    if np.any(lo > hi):
        raise ValidationError("box has lo > hi")
    return lo, hi


@dataclass(frozen=True, eq=False)
class FeasibleSet:
    """Whole space, axis-aligned box or Euclidean ball."""

    dim: int
    kind: str = "whole"
    lo: Optional[np.ndarray] = None
    hi: Optional[np.ndarray] = None
    center: Optional[np.ndarray] = None
    radius: float = np.inf

    @property
    def compact(self):
        if self.kind == "box":
            return bool(np.all(np.isfinite(self.lo)) and np.all(np.isfinite(self.hi)))
        return self.kind == "ball"

    def project(self, z):
        z = np.asarray(z, dtype=float)
        if self.kind == "whole":
            return z.copy()
        if self.kind == "box":
            return np.minimum(np.maximum(z, self.lo), self.hi)
        d = z - self.center
        nd = np.linalg.norm(d)
        if nd <= self.radius:
            return z.copy()
        return self.center + d * (self.radius / nd)

    def contains(self, x, tol=0.0):
        x = np.asarray(x, dtype=float)
        if self.kind == "whole":
            return True
        if self.kind == "box":
            return bool(np.all(x >= self.lo - tol) and np.all(x <= self.hi + tol))
        return bool(np.linalg.norm(x - self.center) <= self.radius + tol)

    def sample(self, rng, size=None, fallback_radius=10.0):
        """Uniform-ish random points of the set (bounded by ``fallback_radius``)."""
        shape = (self.dim,) if size is None else (size, self.dim)
        if self.kind == "box":
            lo = np.maximum(self.lo, -fallback_radius)
            hi = np.minimum(self.hi, fallback_radius)
            return rng.uniform(lo, hi, size=shape)
        if self.kind == "ball":
            d = rng.standard_normal(shape)
            d /= np.linalg.norm(d, axis=-1, keepdims=True)
            r = self.radius * rng.uniform(size=shape[:-1] + (1,)) ** (1.0 / self.dim)
            return self.center + d * r
        return rng.uniform(-fallback_radius, fallback_radius, size=shape)


def whole_space(dim):
    return FeasibleSet(dim)


def box(lo, hi, dim=None):
    lo, hi = _box_bounds(lo, hi, dim)
    return FeasibleSet(lo.size, "box", lo=lo, hi=hi)


def ball(center, radius):
    center = _as_vector(center)
    if radius < 0:
        raise ValidationError("ball radius must be nonnegative")
    return FeasibleSet(center.size, "ball", center=center, radius=float(radius))


def apply_prox(reg: Regularizer, z, weight):
    """``argmin_x h(x) + ||x - z||^2 / (2 weight)``."""
    if not weight > 0:
        raise ValueError("prox weight must be positive")
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise NumericalError("non-finite prox input", point=z)
    return reg.prox(z, weight)


def prox_on_set(reg: Optional[Regularizer], fset: FeasibleSet, z, weight, tol=1e-12, max_iter=10000):
    """``argmin_{x in X} h(x) + ||x - z||^2 / (2 weight)``.

    Closed form for every pairing that has one; otherwise a Dykstra-type
    splitting of the two proximity operators.
    """
    z = np.asarray(z, dtype=float)
    if reg is None or reg.kind == "zero":
        return fset.project(z)
    if fset.kind == "whole":
        return reg.prox(z, weight)
    if fset.kind == "box" and reg.kind == "l1":
        return np.minimum(np.maximum(soft_threshold(z, weight * reg.weight), fset.lo), fset.hi)
    if fset.kind == "box" and reg.kind == "box":
        lo, hi = np.maximum(fset.lo, reg.lo), np.minimum(fset.hi, reg.hi)
        if np.any(lo > hi):
            raise ValidationError("regularizer box and feasible box do not intersect")
        return np.clip(z, lo, hi)
    if fset.kind == "ball" and reg.kind == "l1" and not np.any(fset.center):
        # scaling toward the origin keeps the l1 subdifferential unchanged
        return fset.project(soft_threshold(z, weight * reg.weight))
    return _inner.dykstra_prox(lambda v: reg.prox(v, weight), fset.project, z,
                               tol=tol, max_iter=max_iter)


# ---------------------------------------------------------------------------
# problems

@dataclass(frozen=True, eq=False)
class ConsensusProblem:
    """``min sum_k g_k(x) + h(x)`` over ``x in X``, split into local copies."""

    blocks: tuple
    regularizer: Optional[Regularizer] = None
    fset: Optional[FeasibleSet] = None

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if len(self.blocks) < 1:
            raise ValidationError("consensus problem needs K >= 1 blocks")
        n = self.blocks[0].dim
        if any(b.dim != n for b in self.blocks):
            raise ValidationError("all consensus blocks must share one dimension")
        if self.regularizer is None:
            object.__setattr__(self, "regularizer", zero_regularizer(n))
        if self.fset is None:
            object.__setattr__(self, "fset", whole_space(n))
        if self.regularizer.dim != n or self.fset.dim != n:
            raise ValidationError("regularizer/set dimension differs from block dimension")

    @property
    def n(self):
        return self.blocks[0].dim

    @property
    def K(self):
        return len(self.blocks)

    @property
    def lipschitz(self):
        return np.array([b.lipschitz for b in self.blocks])

    @property
    def convex(self):
        return [b.convex for b in self.blocks]

    @cached_property
    def stack(self):
        return BlockStack(self.blocks)

    def objective(self, x):
        """``f(x) = sum_k g_k(x) + h(x)`` (``+inf`` outside ``X``)."""
        if not self.fset.contains(x, 1e-12):
            return np.inf
        return float(self.stack.values(np.asarray(x, dtype=float)).sum()) + self.regularizer.value(x)


GFunction = Union[SmoothBlock, Regularizer]


@dataclass(frozen=True, eq=False)
class SharingBlock:
    """One agent of the sharing problem: ``g_k``, ``A_k`` and ``X_k``.

    ``fn`` is a :class:`SmoothBlock` (smooth, possibly nonconvex) or a
    :class:`Regularizer` (convex, possibly nonsmooth, handled through its
    prox).
    """

    fn: GFunction
    A: np.ndarray
    fset: Optional[FeasibleSet] = None

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        object.__setattr__(self, "A", A)
        if self.fset is None:
            object.__setattr__(self, "fset", whole_space(A.shape[1]))
        if self.fn.dim != A.shape[1] or self.fset.dim != A.shape[1]:
            raise ValidationError(f"block dim {self.fn.dim} does not match A of shape {A.shape}")

    @property
    def dim(self):
        return self.A.shape[1]

    @property
    def kind(self):
        return "smooth" if isinstance(self.fn, SmoothBlock) else "prox"

    @property
    def convex(self):
        return self.kind == "prox" or self.fn.convex

    @property
    def lipschitz(self):
        return self.fn.lipschitz if self.kind == "smooth" else 0.0

    @cached_property
    def gram(self):
        return self.A.T @ self.A

    @cached_property
    def lam_min(self):
        return float(np.linalg.eigvalsh(self.gram).min())

    def value(self, x):
        return self.fn.value(x)


@dataclass(frozen=True, eq=False)
class SharingProblem:
    """``min sum_k g_k(x_k) + l(sum_k A_k x_k)`` with ``x_k in X_k``."""

    blocks: tuple
    coupling: SmoothBlock

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if len(self.blocks) < 1:
            raise ValidationError("sharing problem needs K >= 1 blocks")
        M = self.coupling.dim
        for k, blk in enumerate(self.blocks):
            if blk.A.shape[0] != M:
                raise ValidationError(f"A_{k + 1} has {blk.A.shape[0]} rows, coupling dim is {M}")

    @property
    def M(self):
        return self.coupling.dim

    @property
    def K(self):
        return len(self.blocks)

    @property
    def lam_min(self):
        return np.array([b.lam_min for b in self.blocks])

    def shared(self, xs):
        return sum(b.A @ x for b, x in zip(self.blocks, xs))

    def objective(self, xs):
        return float(sum(b.value(x) for b, x in zip(self.blocks, xs))) + self.coupling.value(self.shared(xs))


@dataclass(frozen=True, eq=False)
class TwoBlockProblem:
    """``min f(x1) + g(x2)`` s.t. ``B x1 + A x2 = c``, ``x1 in X``; ``A`` invertible."""

    f: Regularizer
    g: SmoothBlock
    B: np.ndarray
    A: np.ndarray
    c: np.ndarray
    fset: Optional[FeasibleSet] = None

    def __post_init__(self):
        B = np.atleast_2d(np.asarray(self.B, dtype=float))
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "c", _as_vector(self.c, A.shape[0], "c"))
        if self.fset is None:
            object.__setattr__(self, "fset", whole_space(B.shape[1]))
        M = A.shape[0]
        if A.shape != (M, M):
            raise ValidationError(f"A must be square, got {A.shape}")
        if B.shape[0] != M or self.g.dim != M or self.f.dim != B.shape[1] or self.fset.dim != B.shape[1]:
            raise ValidationError("two-block dimensions are inconsistent")

    @cached_property
    def lam_min(self):
        """``lambda_min(A A')``."""
        return float(np.linalg.eigvalsh(self.A @ self.A.T).min())

    @cached_property
    def lam_min_AtA(self):
        return float(np.linalg.eigvalsh(self.A.T @ self.A).min())

    def objective(self, x1, x2):
        return self.f.value(x1) + self.g.value(x2)


# ---------------------------------------------------------------------------
# evaluation and validation

def eval_block(block: SmoothBlock, x):
    """Value and gradient of ``block`` at ``x``; raises on non-finite output."""
    x = _as_vector(x, block.dim)
    v = block.value(x)
    g = block.grad(x)
    if g.shape != (block.dim,):
        raise ValidationError(f"gradient has shape {g.shape}, expected ({block.dim},)")
    if not (np.isfinite(v) and np.all(np.isfinite(g))):
        raise NumericalError(f"non-finite evaluation of {block.name}", point=x)
    return v, g


@dataclass
class ValidationReport:
    dims_ok: bool = True
    lipschitz_ok: bool = True
    gradient_ok: bool = True
    rank_ok: Optional[bool] = None
    max_lipschitz_ratio: float = 0.0
    max_gradient_error: float = 0.0
    lam_min: list = field(default_factory=list)

    @property
    def all_pass(self):
        return self.dims_ok and self.lipschitz_ok and self.gradient_ok and self.rank_ok is not False


def check_lipschitz(block: SmoothBlock, rng, n_pairs=20, radius=10.0):
    """Sampled check of ``||grad(x) - grad(z)|| <= L ||x - z||``.

    Returns the largest observed ratio over ``L``; raises with the
    offending pair as witness when the claim is violated.
    """
    worst = 0.0
    for i in range(n_pairs):
        x = rng.uniform(-radius, radius, block.dim)
        # alternate far pairs and near pairs; local curvature peaks show in near pairs
        scale = radius if i % 2 == 0 else 1e-2
        z = x + rng.uniform(-scale, scale, block.dim)
        dx = np.linalg.norm(x - z)
        if dx == 0:
            continue
        dg = np.linalg.norm(block.grad(x) - block.grad(z))
        if dg > block.lipschitz * dx * (1 + 1e-9) + 1e-12:
            raise ValidationError(
                f"{block.name}: gradient difference {dg:.6g} exceeds "
                f"L*|x-z| = {block.lipschitz * dx:.6g}",
                witness=(x, z))
        worst = max(worst, dg / (block.lipschitz * dx) if block.lipschitz > 0 else 0.0)
    return worst


def check_gradient(block: SmoothBlock, rng, n_points=20, radius=10.0, rtol=1e-5, step=1e-5):
    """Central-difference check of the gradient; returns the worst relative error.

    The error is measured relative to ``max(||grad||, 1)``.
    """
    worst = 0.0
    for _ in range(n_points):
        x = rng.uniform(-radius, radius, block.dim)
        g = block.grad(x)
        fd = finite_diff_gradient(block.value, x, step)
        err = np.linalg.norm(fd - g) / max(np.linalg.norm(g), 1.0)
        if err > rtol:
            raise ValidationError(f"{block.name}: gradient mismatch {err:.3g} > {rtol}", witness=x)
        worst = max(worst, err)
    return worst


def validate(problem, seed=0, n_samples=20, radius=None):
    """Check dimensions, Lipschitz claims, gradients and ranks.

    Dimension mismatches are caught at construction; everything else raises
    :class:`ValidationError` here.
    """
    rng = np.random.default_rng(seed)
    report = ValidationReport()
    smooth = []
    if isinstance(problem, ConsensusProblem):
        smooth = list(problem.blocks)
        r = radius or _set_radius(problem.fset)
    elif isinstance(problem, SharingProblem):
        smooth = [b.fn for b in problem.blocks if b.kind == "smooth"] + [problem.coupling]
        r = radius or 10.0
        report.lam_min = [b.lam_min for b in problem.blocks]
        if min(report.lam_min) <= 1e-12:
            k = int(np.argmin(report.lam_min))
            report.rank_ok = False
            raise ValidationError(f"A_{k + 1} is not full column rank", witness=report.lam_min)
        report.rank_ok = True
    elif isinstance(problem, TwoBlockProblem):
        smooth = [problem.g]
        r = radius or 10.0
        report.lam_min = [problem.lam_min]
        if problem.lam_min <= 1e-12:
            report.rank_ok = False
            raise ValidationError("A is singular", witness=problem.lam_min)
        report.rank_ok = True
    else:
        raise TypeError(f"cannot validate {type(problem).__name__}")
    for blk in smooth:
        report.max_lipschitz_ratio = max(report.max_lipschitz_ratio,
                                         check_lipschitz(blk, rng, n_samples, r))
        report.max_gradient_error = max(report.max_gradient_error,
                                        check_gradient(blk, rng, n_samples, r))
    return report


def _set_radius(fset):
    if fset.kind == "box":
        return float(np.max(np.minimum(np.abs(np.r_[fset.lo, fset.hi]), 10.0)))
    if fset.kind == "ball":
        return float(np.max(np.abs(fset.center)) + fset.radius)
    return 10.0
