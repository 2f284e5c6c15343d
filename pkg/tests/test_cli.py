import json

import numpy as np
import pytest

from ncadmm import cli
from ncadmm.bench import load_instance
from ncadmm.trace import Trace

CONVEX = """
[problem]
family = convex-control
K = 3
n = 4
[run]
max_iters = 5000
stop_tol = 1e-12
"""

NONCONVEX = """
[problem]
family = nonconvex-quadratic-consensus
K = 3
n = 4
[run]
max_iters = {iters}
stop_tol = 0
"""

UNDER = """
[problem]
family = nonconvex-quadratic-consensus
nu = 0.2
[penalty]
mode = explicit
rho_per_lipschitz = 0.3
[run]
max_iters = 2000
check_level = full
"""


@pytest.fixture
def write(tmp_path):
    def _write(text, name="run.ini"):
        path = tmp_path / name
        path.write_text(text)
        return str(path)
    return _write


def _run(*args):
    return cli.main(list(args))


def test_run_converged_writes_outputs(write, tmp_path):
    out = str(tmp_path / "r" / "a")
    assert _run("run", "--config", write(CONVEX), "--out", out) == cli.EXIT_OK
    report = (tmp_path / "r" / "a.report.txt").read_text()
    assert report.startswith("status: converged")
    data = json.loads(report.split("[json]\n", 1)[1])
    assert data["status"] == "converged" and data["seed"] == 0
    assert all(c["failed"] == 0 for c in data["checks"].values())
    tr = Trace.read_csv(tmp_path / "r" / "a.trace.csv")
    assert len(tr) == data["iterations"] + 1
    assert (tmp_path / "r" / "a.states.npz").exists()


def test_run_iteration_cap_exit_code(write, tmp_path):
    assert _run("run", "--config", write(NONCONVEX.format(iters=5)),
                "--out", str(tmp_path / "a")) == cli.EXIT_MAX_ITERS
    assert len(Trace.read_csv(tmp_path / "a.trace.csv")) == 6


def test_max_iters_zero(write, tmp_path):
    assert _run("run", "--config", write(NONCONVEX.format(iters=0)),
                "--out", str(tmp_path / "a")) == cli.EXIT_MAX_ITERS
    tr = Trace.read_csv(tmp_path / "a.trace.csv")
    assert len(tr) == 1 and tr.mask_string(0) == "0000"


def test_under_calibrated_needs_override(write, tmp_path, capsys):
    cfg = write(UNDER)
    assert _run("run", "--config", cfg, "--out", str(tmp_path / "a")) == cli.EXIT_ERROR
    assert "error" in capsys.readouterr().err


def test_negative_control_exit_code(write, tmp_path):
    # full checks with the override flag: violations are recorded, exit 3
    code = _run("run", "--config", write(UNDER), "--override-penalty",
                "--out", str(tmp_path / "a"))
    assert code == cli.EXIT_CHECK


def test_override_in_config_file(write, tmp_path):
    text = UNDER.replace("rho_per_lipschitz = 0.3", "rho_per_lipschitz = 0.3\noverride = true")
    assert _run("run", "--config", write(text), "--out", str(tmp_path / "a")) == cli.EXIT_CHECK


@pytest.mark.parametrize("text", [
    "[problem]\nfamily = nope\n",
    "[problem]\nfamily = convex-control\n[run]\nbogus = 1\n",
    "not an ini file",
])
def test_config_errors(write, tmp_path, text, capsys):
    assert _run("run", "--config", write(text), "--out", str(tmp_path / "a")) == cli.EXIT_ERROR
    assert "config error" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert _run("run", "--config", str(tmp_path / "absent.ini")) == cli.EXIT_ERROR


def test_unknown_command_exits():
    with pytest.raises(SystemExit):
        cli.main(["fly"])


def test_calibrate_prints_summary(write, tmp_path, capsys):
    out = str(tmp_path / "c")
    assert _run("calibrate", "--config", write(CONVEX), "--out", out) == cli.EXIT_OK
    text = capsys.readouterr().out
    assert "rho:" in text and "thresholds:" in text and "C:" in text
    data = json.loads((tmp_path / "c.calibration.txt").read_text().split("[json]\n", 1)[1])
    assert data["calibrated"] and len(data["rho"]) == 3
    assert all(r > t for r, t in zip(data["rho"], data["thresholds"]))


@pytest.mark.parametrize("family, algorithm", [
    ("sharing-quadratic-coupling", "sharing"),
    ("two-block-lasso-like", "two-block"),
    ("nonconvex-quadratic-consensus", "consensus-proximal"),
])
def test_calibrate_every_algorithm(write, tmp_path, family, algorithm):
    text = f"[problem]\nfamily = {family}\n[algorithm]\nname = {algorithm}\n"
    assert _run("calibrate", "--config", write(text), "--out", str(tmp_path / "c")) == 0


def test_check_fresh_run_passes(write, tmp_path, capsys):
    cfg = write(NONCONVEX.format(iters=200))
    out = str(tmp_path / "a")
    _run("run", "--config", cfg, "--out", out)
    capsys.readouterr()
    assert _run("check", "--config", cfg, "--out", out) == cli.EXIT_OK
    assert "monotone" in capsys.readouterr().out
    assert (tmp_path / "a.check.txt").exists()


def test_check_empty_trace(write, tmp_path):
    cfg = write(NONCONVEX.format(iters=10))
    Trace(4).write_csv(tmp_path / "e.csv")
    assert _run("check", "--config", cfg, "--trace", str(tmp_path / "e.csv"),
                "--out", str(tmp_path / "e")) == cli.EXIT_OK


def test_check_detects_tampering(write, tmp_path):
    cfg = write(NONCONVEX.format(iters=50))
    out = str(tmp_path / "a")
    _run("run", "--config", cfg, "--out", out)
    states = dict(np.load(tmp_path / "a.states.npz"))
    states["x0"][20:] += 0.5
    np.savez(tmp_path / "a.states.npz", **states)
    assert _run("check", "--config", cfg, "--out", out) == cli.EXIT_CHECK


def test_check_without_states_is_an_error(write, tmp_path):
    cfg = write(NONCONVEX.format(iters=10))
    out = str(tmp_path / "a")
    _run("run", "--config", cfg, "--out", out)
    (tmp_path / "a.states.npz").unlink()
    assert _run("check", "--config", cfg, "--out", out) == cli.EXIT_ERROR


@pytest.mark.parametrize("family", ["nonconvex-quadratic-consensus", "sharing-quadratic-coupling",
                                    "two-block-lasso-like"])
def test_gen_roundtrip(write, tmp_path, family):
    algorithm = {"sharing-quadratic-coupling": "sharing",
                 "two-block-lasso-like": "two-block"}.get(family, "consensus-exact")
    head = f"[algorithm]\nname = {algorithm}\n[run]\nmax_iters = 30\nstop_tol = 0\n"
    cfg = write(f"[problem]\nfamily = {family}\nseed = 4\n" + head)
    assert _run("gen", "--config", cfg, "--out", str(tmp_path / "g")) == cli.EXIT_OK
    dump = tmp_path / "g.instance.txt"
    assert load_instance(dump).family == family
    # a dumped instance runs exactly like the generated one
    _run("run", "--config", cfg, "--out", str(tmp_path / "p"))
    _run("run", "--config", write(f"[problem]\ninstance = {dump}\n" + head, "dump.ini"),
         "--out", str(tmp_path / "q"))
    assert (tmp_path / "p.trace.csv").read_bytes() == (tmp_path / "q.trace.csv").read_bytes()


def test_multi_seed_with_jobs(write, tmp_path):
    cfg = write(NONCONVEX.format(iters=40))
    base = str(tmp_path / "m")
    code = _run("run", "--config", cfg, "--seed", "1", "--seed", "2", "--seed", "3",
                "--jobs", "2", "--out", base)
    assert code == cli.EXIT_MAX_ITERS
    for sd in (1, 2, 3):
        assert (tmp_path / f"m.seed{sd}.trace.csv").exists()
    # threaded runs match a serial one byte for byte
    _run("run", "--config", cfg, "--seed", "2", "--out", str(tmp_path / "s"))
    assert (tmp_path / "m.seed2.trace.csv").read_bytes() == (tmp_path / "s.trace.csv").read_bytes()


def test_worst_exit_code_wins(write, tmp_path):
    cfg = write(NONCONVEX.format(iters=3))
    assert _run("run", "--config", cfg, "--seed", "1", "--seed", "2",
                "--out", str(tmp_path / "w")) == cli.EXIT_MAX_ITERS


@pytest.mark.parametrize("algorithm, family", [
    ("sharing", "sharing-quadratic-coupling"),
    ("two-block", "two-block-lasso-like"),
    ("consensus-proximal", "nonconvex-quadratic-consensus"),
])
def test_run_and_check_other_algorithms(write, tmp_path, algorithm, family):
    cfg = write(f"[problem]\nfamily = {family}\n[algorithm]\nname = {algorithm}\n"
                "[run]\nmax_iters = 60\nstop_tol = 0\n")
    out = str(tmp_path / "a")
    assert _run("run", "--config", cfg, "--out", out) in (cli.EXIT_OK, cli.EXIT_MAX_ITERS)
    assert _run("check", "--config", cfg, "--out", out) == cli.EXIT_OK
