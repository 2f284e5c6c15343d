"""Seeded benchmark instances with exact Lipschitz constants and valid lower bounds.

Every generator draws raw arrays from ``numpy.random.default_rng(seed)``
and hands them to :func:`build_instance`, which is also what
:func:`load_instance` calls, so a dumped and reloaded instance is the same
problem.

Families
--------
``nonconvex-quadratic-consensus``
    ``g_k(x) = 0.5 x'Q_k x + b_k'x`` with ``spec(Q_k)`` in ``[-nu, 1]`` (both
    ends attained), ``h = lam ||.||_1``, ``X = [-r, r]^n``.
``convex-control``
    the same with ``nu = 0``.
``sigmoid-consensus``
    ``g_k(x) = mean_i 1 / (1 + exp(a_i'x))``, same ``h`` and ``X``.
``sharing-quadratic-coupling``
    quadratic ``g_k`` on boxes ``[-r, r]^{N_k}``, ``A_k`` with smallest singular
    value at least 0.1, coupling ``0.5 ||u - b||^2`` (``mu = 0``) or
    ``0.5 ||u||^2 - mu sum cos(u_i)``.
``two-block-lasso-like``
    ``f = lam ||.||_1`` on ``[-r, r]^n``, quadratic ``g`` on ``R^M``,
    ``A = I + 0.3 N / sqrt(M)`` with smallest singular value at least 0.5.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Dict

import numpy as np

from .problems import (ConsensusProblem, SharingBlock, SharingProblem, TwoBlockProblem,
                       box, cosine_coupling, l1_regularizer, quadratic_block, sigmoid_block,
                       zero_regularizer)

FAMILIES = ("nonconvex-quadratic-consensus", "sigmoid-consensus", "convex-control",
            "sharing-quadratic-coupling", "two-block-lasso-like")

SHARING_SIGMA_MIN = 0.1
TWO_BLOCK_SIGMA_MIN = 0.5


@dataclass(frozen=True)
class GeneratorSpec:
    """Generator parameters; unused fields are ignored by a family.

    ``nu`` is the magnitude of the most negative eigenvalue of each
    quadratic, ``lam`` the l1 weight, ``radius`` the box half-width, ``mu``
    the cosine-coupling weight (0 selects the quadratic coupling) and ``m``
    the number of samples per sigmoid block.
    """

    family: str = "nonconvex-quadratic-consensus"
    K: int = 5
    n: int = 10
    M: int = 20
    N: int = 3
    seed: int = 0
    nu: float = 0.5
    lam: float = 0.1
    radius: float = 5.0
    mu: float = 0.0
    m: int = 20

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; choose from {FAMILIES}")
        if min(self.K, self.n, self.M, self.N, self.m) < 1:
            raise ValueError("dimensions must be positive")
        if self.nu < 0 or self.lam < 0 or not self.radius > 0 or self.mu < 0:
            raise ValueError("nu, lam, mu must be nonnegative and radius positive")

    def with_(self, **kw):
        return replace(self, **kw)


@dataclass(eq=False)
class Instance:
    """A generated problem plus its raw data and metadata.

    ``f_lower`` is a proven lower bound of the objective on the feasible set
    (``f_lower_kind`` says how it was obtained); ``lipschitz`` lists the
    exact gradient Lipschitz constants of the smooth parts.
    """

    family: str
    problem: object
    arrays: Dict[str, np.ndarray]
    meta: Dict[str, float]
    f_lower: float
    lipschitz: np.ndarray
    f_lower_kind: str = "analytic"
    extra: dict = field(default_factory=dict)


def random_quadratic(rng, n, nu):
    """Symmetric ``Q`` with eigenvalues in ``[-nu, 1]``, both ends attained when ``n >= 2``."""
    U, _ = np.linalg.qr(rng.standard_normal((n, n)))
    eig = rng.uniform(-nu, 1.0, n)
    eig[0] = 1.0
    if n > 1:
        eig[1] = -nu
    Q = (U * eig) @ U.T
    return 0.5 * (Q + Q.T)


def _well_conditioned(rng, shape, sigma_min, make):
    for _ in range(1000):
        A = make(rng, shape)
        if np.linalg.svd(A, compute_uv=False).min() >= sigma_min:
            return A
    raise RuntimeError(f"could not draw a matrix with sigma_min >= {sigma_min}")


def gen_consensus(spec: GeneratorSpec):
    rng = np.random.default_rng(spec.seed)
    arrays = {}
    if spec.family == "sigmoid-consensus":
        for k in range(spec.K):
            arrays[f"A{k}"] = rng.standard_normal((spec.m, spec.n))
    else:
        nu = 0.0 if spec.family == "convex-control" else spec.nu
        for k in range(spec.K):
            arrays[f"Q{k}"] = random_quadratic(rng, spec.n, nu)
            arrays[f"b{k}"] = rng.standard_normal(spec.n)
    meta = {"K": spec.K, "n": spec.n, "lam": spec.lam, "radius": spec.radius,
            "nu": 0.0 if spec.family == "convex-control" else spec.nu, "seed": spec.seed}
    return build_instance(spec.family, arrays, meta)


def gen_sharing(spec: GeneratorSpec):
    rng = np.random.default_rng(spec.seed)
    arrays = {}
    for k in range(spec.K):
        arrays[f"A{k}"] = _well_conditioned(
            rng, (spec.M, spec.N), SHARING_SIGMA_MIN,
            lambda r, s: r.standard_normal(s) / np.sqrt(s[0]))
        arrays[f"Q{k}"] = random_quadratic(rng, spec.N, spec.nu)
        arrays[f"b{k}"] = rng.standard_normal(spec.N)
    arrays["target"] = rng.standard_normal(spec.M)
    meta = {"K": spec.K, "M": spec.M, "N": spec.N, "nu": spec.nu, "radius": spec.radius,
            "mu": spec.mu, "seed": spec.seed}
    return build_instance(spec.family, arrays, meta)


def gen_two_block(spec: GeneratorSpec):
    rng = np.random.default_rng(spec.seed)
    M, n = spec.M, spec.n
    arrays = {
        "A": _well_conditioned(rng, (M, M), TWO_BLOCK_SIGMA_MIN,
                               lambda r, s: np.eye(s[0]) + 0.3 * r.standard_normal(s) / np.sqrt(s[0])),
        "B": rng.standard_normal((M, n)) / np.sqrt(M),
        "c": rng.standard_normal(M),
        "Q": random_quadratic(rng, M, spec.nu),
        "b": rng.standard_normal(M),
    }
    meta = {"M": M, "n": n, "nu": spec.nu, "lam": spec.lam, "radius": spec.radius,
            "seed": spec.seed}
    return build_instance(spec.family, arrays, meta)


def generate(spec: GeneratorSpec):
    """Dispatch on ``spec.family``."""
    if spec.family == "sharing-quadratic-coupling":
        return gen_sharing(spec)
    if spec.family == "two-block-lasso-like":
        return gen_two_block(spec)
    return gen_consensus(spec)


def quadratic_box_lower_bound(Q, b, radius):
    """Lower bound of ``0.5 x'Qx + b'x`` on ``[-r, r]^n``.

    ``0.5 x'Qx >= 0.5 min(lambda_min(Q), 0) n r^2`` and ``b'x >= -r ||b||_1``.
    """
    n = Q.shape[0]
    lam = float(np.linalg.eigvalsh(Q).min())
    return 0.5 * min(lam, 0.0) * n * radius ** 2 - radius * float(np.abs(b).sum())


def build_instance(family, arrays, meta):
    """Assemble the problem, Lipschitz constants and lower bound from raw data."""
    if family in ("nonconvex-quadratic-consensus", "convex-control", "sigmoid-consensus"):
        K, n = int(meta["K"]), int(meta["n"])
        r, lam = float(meta["radius"]), float(meta["lam"])
        if family == "sigmoid-consensus":
            blocks = [sigmoid_block(arrays[f"A{k}"]) for k in range(K)]
            f_lower = 0.0  # sigmoid values and the l1 term are nonnegative
        else:
            blocks = [quadratic_block(arrays[f"Q{k}"], arrays[f"b{k}"]) for k in range(K)]
            Qs = sum(arrays[f"Q{k}"] for k in range(K))
            bs = sum(arrays[f"b{k}"] for k in range(K))
            f_lower = quadratic_box_lower_bound(Qs, bs, r)
        reg = l1_regularizer(n, lam) if lam > 0 else zero_regularizer(n)
        prob = ConsensusProblem(blocks, reg, box(-r, r, n))
        return Instance(family, prob, arrays, dict(meta), f_lower,
                        np.array([b.lipschitz for b in blocks]))
    if family == "sharing-quadratic-coupling":
        K, M, r, mu = int(meta["K"]), int(meta["M"]), float(meta["radius"]), float(meta["mu"])
        blocks, f_lower = [], 0.0
        for k in range(K):
            Q, b = arrays[f"Q{k}"], arrays[f"b{k}"]
            blocks.append(SharingBlock(quadratic_block(Q, b), arrays[f"A{k}"],
                                       box(-r, r, Q.shape[0])))
            f_lower += quadratic_box_lower_bound(Q, b, r)
        target = arrays["target"]
        if mu > 0:
            coupling = cosine_coupling(M, mu)
            f_lower += -mu * M  # 0.5||u||^2 >= 0 and -mu cos >= -mu
        else:
            coupling = quadratic_block(np.eye(M), -target, 0.5 * target @ target, convex=True)
        prob = SharingProblem(blocks, coupling)
        Ls = np.array([coupling.lipschitz] + [b.lipschitz for b in blocks])
        return Instance(family, prob, arrays, dict(meta), f_lower, Ls)
    if family == "two-block-lasso-like":
        M, n = int(meta["M"]), int(meta["n"])
        r, lam = float(meta["radius"]), float(meta["lam"])
        A, B, c, Q, b = (arrays[k] for k in ("A", "B", "c", "Q", "b"))
        g = quadratic_block(Q, b)
        f = l1_regularizer(n, lam) if lam > 0 else zero_regularizer(n)
        prob = TwoBlockProblem(f, g, B, A, c, box(-r, r, n))
        # x2 = A^{-1}(c - B x1) is bounded because x1 lies in the box
        smin = float(np.linalg.svd(A, compute_uv=False).min())
        R2 = (np.linalg.norm(c) + np.linalg.norm(B, 2) * r * np.sqrt(n)) / smin
        lmin = float(np.linalg.eigvalsh(Q).min())
        f_lower = 0.5 * min(lmin, 0.0) * R2 ** 2 - np.linalg.norm(b) * R2
        return Instance(family, prob, arrays, dict(meta), f_lower, np.array([g.lipschitz]))
    raise ValueError(f"unknown family {family!r}")


def estimate_f_best(instance, starts=200, iters=300, seed=0):
    """Best objective found by multi-start projected gradient (consensus families).

    This is an upper estimate of the minimum, reported alongside ``f_lower``
    but never used as a lower bound.
    """
    prob = instance.problem
    rng = np.random.default_rng(seed)
    X = prob.fset.sample(rng, starts)
    step = 1.0 / max(float(np.sum(prob.lipschitz)), 1e-12)
    from .problems import prox_on_set
    for _ in range(iters):
        grads = np.stack([prob.stack.grads(x).sum(axis=0) for x in X])
        X = np.stack([prox_on_set(prob.regularizer, prob.fset, x - step * g, step)
                      for x, g in zip(X, grads)])
    vals = [prob.objective(x) for x in X]
    return float(np.min(vals))


# ---------------------------------------------------------------------------
# text dump

_HEADER = "# ncadmm instance v1"


def dump_instance(instance, path):
    """Write the raw arrays as dense row-major text with a ``dims`` header per array."""
    with open(path, "w") as fh:
        fh.write(_HEADER + "\n")
        fh.write(f"family {instance.family}\n")
        for k in sorted(instance.meta):
            fh.write(f"meta {k} {instance.meta[k]!r}\n")
        for name in sorted(instance.arrays):
            a = np.atleast_2d(np.asarray(instance.arrays[name], dtype=float))
            if np.ndim(instance.arrays[name]) == 1:
                a = a.reshape(1, -1)
            kind = "vector" if np.ndim(instance.arrays[name]) == 1 else "matrix"
            fh.write(f"array {name} {kind} dims {a.shape[0]} {a.shape[1]}\n")
            for row in a:
                fh.write(" ".join("%.17g" % v for v in row) + "\n")


def load_instance(path):
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0] != _HEADER:
        raise ValueError(f"{path}: not an instance file")
    family, meta, arrays = None, {}, {}
    i = 1
    while i < len(lines):
        parts = lines[i].split()
        i += 1
        if not parts:
            continue
        if parts[0] == "family":
            family = parts[1]
        elif parts[0] == "meta":
            meta[parts[1]] = float(parts[2])
        elif parts[0] == "array":
            name, kind, rows, cols = parts[1], parts[2], int(parts[4]), int(parts[5])
            data = np.array([[float(v) for v in lines[i + j].split()] for j in range(rows)])
            if data.shape != (rows, cols):
                raise ValueError(f"{path}: array {name} has shape {data.shape}")
            arrays[name] = data[0] if kind == "vector" else data
            i += rows
        else:
            raise ValueError(f"{path}: unexpected line {lines[i - 1]!r}")
    if family is None:
        raise ValueError(f"{path}: missing family line")
    return build_instance(family, arrays, meta)


def spec_fields():
    return [f.name for f in fields(GeneratorSpec)]
