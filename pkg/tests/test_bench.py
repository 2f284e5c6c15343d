import numpy as np
import pytest

from ncadmm.bench import (FAMILIES, GeneratorSpec, build_instance, dump_instance, estimate_f_best,
                          generate, load_instance, quadratic_box_lower_bound)
from ncadmm.calibration import calibrate_consensus
from ncadmm.consensus import SolverConfig, run_consensus
from ncadmm.problems import validate

from oracles import fista

SMALL = dict(K=3, n=4, M=6, N=2, m=8)


@pytest.mark.parametrize("family", FAMILIES)
def test_generation_is_deterministic(family, tmp_path):
    a = generate(GeneratorSpec(family, seed=5, **SMALL))
    b = generate(GeneratorSpec(family, seed=5, **SMALL))
    assert a.arrays.keys() == b.arrays.keys()
    for k in a.arrays:
        assert a.arrays[k].tobytes() == b.arrays[k].tobytes()
    dump_instance(a, tmp_path / "a.txt")
    dump_instance(b, tmp_path / "b.txt")
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()
    c = generate(GeneratorSpec(family, seed=6, **SMALL))
    assert any(a.arrays[k].tobytes() != c.arrays[k].tobytes() for k in a.arrays)


@pytest.mark.parametrize("family", FAMILIES)
def test_recorded_lipschitz_constants_validate(family):
    inst = generate(GeneratorSpec(family, seed=1, **SMALL))
    assert validate(inst.problem).all_pass


@pytest.mark.parametrize("seed", range(3))
def test_quadratic_lipschitz_exact(seed):
    inst = generate(GeneratorSpec(seed=seed, nu=0.7))
    for k, L in enumerate(inst.lipschitz):
        eig = np.linalg.eigvalsh(inst.arrays[f"Q{k}"])
        assert L == pytest.approx(max(abs(eig.min()), eig.max()), rel=1e-12)
        assert eig.min() >= -0.7 - 1e-12 and eig.max() <= 1 + 1e-12


def test_concave_single_block_lower_bound():
    n = 3
    inst = build_instance("nonconvex-quadratic-consensus", {"Q0": -np.eye(n), "b0": np.zeros(n)},
                          {"K": 1, "n": n, "lam": 0.0, "radius": 1.0})
    assert inst.f_lower == pytest.approx(-n / 2)
    # attained at any vertex
    assert inst.problem.objective(np.ones(n)) == pytest.approx(-n / 2)
    assert quadratic_box_lower_bound(-np.eye(n), np.zeros(n), 1.0) == pytest.approx(-n / 2)


@pytest.mark.parametrize("family", FAMILIES)
def test_f_lower_below_random_feasible_points(family):
    inst = generate(GeneratorSpec(family, seed=2, **SMALL))
    prob = inst.problem
    rng = np.random.default_rng(0)
    if family == "sharing-quadratic-coupling":
        vals = []
        for _ in range(10000):
            xs = [b.fset.sample(rng, 1)[0] for b in prob.blocks]
            vals.append(sum(b.value(x) for b, x in zip(prob.blocks, xs))
                        + prob.coupling.value(prob.shared(xs)))
    elif family == "two-block-lasso-like":
        X1 = prob.fset.sample(rng, 10000)
        Ainv = np.linalg.inv(prob.A)
        vals = [prob.objective(x1, Ainv @ (prob.c - prob.B @ x1)) for x1 in X1]
    else:
        vals = [prob.objective(x) for x in prob.fset.sample(rng, 10000)]
    assert inst.f_lower <= min(vals)


def test_f_best_estimate_is_not_below_lower_bound():
    inst = generate(GeneratorSpec(seed=3, K=2, n=3))
    assert inst.f_lower <= estimate_f_best(inst, starts=20, iters=100)


def test_sharing_rank_enforced():
    for seed in range(5):
        inst = generate(GeneratorSpec("sharing-quadratic-coupling", seed=seed))
        assert np.all(inst.problem.lam_min >= 0.01)


@pytest.mark.parametrize("mu, convex", [(0.4, True), (1.0, True), (2.5, False)])
def test_sharing_cosine_coupling(mu, convex):
    # Hessian I + mu diag(cos u) is PSD exactly when mu <= 1
    inst = generate(GeneratorSpec("sharing-quadratic-coupling", seed=0, mu=mu, **SMALL))
    assert inst.problem.coupling.lipschitz == pytest.approx(1 + mu)
    assert inst.problem.coupling.convex is convex


def test_two_block_conditioning():
    for seed in range(5):
        inst = generate(GeneratorSpec("two-block-lasso-like", seed=seed))
        assert inst.problem.lam_min >= 0.25
        A = inst.arrays["A"]
        assert inst.problem.lam_min == pytest.approx(np.linalg.eigvalsh(A @ A.T).min())


@pytest.mark.parametrize("family", FAMILIES)
def test_dump_load_roundtrip(family, tmp_path):
    inst = generate(GeneratorSpec(family, seed=4, **SMALL))
    path = tmp_path / "inst.txt"
    dump_instance(inst, path)
    back = load_instance(path)
    assert back.family == family
    for k, v in inst.arrays.items():
        np.testing.assert_array_equal(back.arrays[k], v)
    np.testing.assert_array_equal(back.lipschitz, inst.lipschitz)
    assert back.f_lower == inst.f_lower
    text = path.read_text().splitlines()
    assert text[0].startswith("# ncadmm instance")
    assert any(line.startswith("array") and " dims " in line for line in text)


def test_load_rejects_garbage(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("hello\n")
    with pytest.raises(ValueError):
        load_instance(p)


def test_bad_spec_rejected():
    with pytest.raises(ValueError):
        GeneratorSpec("nope")
    with pytest.raises(ValueError):
        GeneratorSpec(K=0)
    with pytest.raises(ValueError):
        GeneratorSpec(radius=0.0)


def test_convex_instance_matches_projected_gradient():
    inst = generate(GeneratorSpec("convex-control", seed=5, K=3, n=4, lam=0.0, radius=1.0))
    prob = inst.problem
    res = run_consensus(prob, SolverConfig(calibrate_consensus(inst.lipschitz, convex=True),
                                           max_iters=20000, stop_tol=1e-22))
    lo, hi = prob.fset.lo, prob.fset.hi

    def value(x):
        return sum(b.value(x) for b in prob.blocks)

    def grad(x):
        return sum(b.grad(x) for b in prob.blocks)

    x = fista(grad, value, float(np.sum(inst.lipschitz)), lambda v, s: np.clip(v, lo, hi),
              np.zeros(4))
    np.testing.assert_allclose(res.state.x0, x, atol=1e-6)
