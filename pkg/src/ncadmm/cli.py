"""Command-line front end.

``ncadmm calibrate|run|check|gen --config FILE [--seed N ...] [--out PREFIX]``

Exit codes: 0 converged (or all checks passed), 2 iteration cap reached,
3 check violation at ``check_level = full`` (or a failed offline check),
1 any error.  Set ``NCADMM_LOG`` to a logging level name for verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .bench import Instance, dump_instance, generate, load_instance
from .calibration import (calibrate_consensus, calibrate_proximal, calibrate_sharing,
                          calibrate_two_block, complexity_constants, consensus_params,
                          proximal_params, sharing_params, two_block_params)
from .config import ConfigError, RunConfig, load_config
from .consensus import InnerConfig, SolverConfig, consensus_checks, run_consensus
from .diagnostics import ConsensusEval, check_tolerance, complexity_certificate
from .errors import CheckViolation, NcadmmError
from .schedules import cyclic, full_sweep, randomized
from .sharing import run_sharing, run_two_block, sharing_checks, two_block_checks
from .trace import Trace, load_states, save_states

log = logging.getLogger("ncadmm")

EXIT_OK, EXIT_ERROR, EXIT_MAX_ITERS, EXIT_CHECK = 0, 1, 2, 3
_STATUS_EXIT = {"converged": EXIT_OK, "max_iters": EXIT_MAX_ITERS, "diverged": EXIT_ERROR}
# worst-first order when several seeds run at once
_EXIT_RANK = (EXIT_ERROR, EXIT_CHECK, EXIT_MAX_ITERS, EXIT_OK)


# ---------------------------------------------------------------------------
# assembling a run from its config

@dataclass(eq=False)
class Setup:
    config: RunConfig
    instance: Instance
    params: object
    solver: SolverConfig
    Ls: np.ndarray


_FAMILY_KIND = {"sharing-quadratic-coupling": "sharing", "two-block-lasso-like": "two-block"}


def _kind(algorithm):
    return "consensus" if algorithm.startswith("consensus") else algorithm


def load_problem(cfg: RunConfig):
    inst = load_instance(cfg.instance) if cfg.instance else generate(cfg.problem)
    want = _FAMILY_KIND.get(inst.family, "consensus")
    if _kind(cfg.algorithm) != want:
        raise ConfigError(f"instance family {inst.family} cannot run with {cfg.algorithm}")
    return inst


def make_schedule(cfg: RunConfig, K):
    s = cfg.schedule
    include_x0 = cfg.algorithm != "consensus-proximal"
    if s.kind == "full":
        return full_sweep(K, include_x0=include_x0)
    if s.kind == "cyclic":
        return cyclic(K, s.T, s.partition, include_x0=include_x0)
    p = 0.5 if s.p is None else (s.p[0] if len(s.p) == 1 else s.p)
    seed = cfg.seed if s.seed is None else s.seed
    return randomized(K, p, seed, s.p_min, include_x0=include_x0)


def make_params(cfg: RunConfig, inst: Instance, schedule):
    """Calibrated or explicit penalties for ``cfg.algorithm``."""
    pen = cfg.penalty
    prob = inst.problem
    Ls = np.asarray(inst.lipschitz, dtype=float)

    def explicit(Lref):
        if pen.rho_per_lipschitz is not None:
            return pen.rho_per_lipschitz * np.asarray(Lref, dtype=float)
        return np.asarray(pen.rho, dtype=float)

    if cfg.algorithm == "consensus-exact":
        if pen.mode == "auto":
            return calibrate_consensus(Ls, pen.margin, convex=prob.convex)
        return consensus_params(explicit(Ls), Ls, prob.convex, margin=pen.margin,
                                override=pen.override)
    if cfg.algorithm == "consensus-proximal":
        if schedule.kind == "randomized":
            log.warning("proximal calibration assumes a cyclic schedule; using T=1")
        T = schedule.T if schedule.kind == "cyclic" else 1
        if pen.mode == "auto":
            return calibrate_proximal(Ls, T, pen.margin)
        return proximal_params(explicit(Ls), Ls, T, margin=pen.margin, override=pen.override)
    if cfg.algorithm == "sharing":
        if pen.mode == "auto":
            return calibrate_sharing(prob, pen.margin)
        rho = explicit(prob.coupling.lipschitz)
        if rho.size != 1:
            raise ConfigError("sharing takes a single penalty")
        return sharing_params(float(rho.ravel()[0]), prob, margin=pen.margin,
                              override=pen.override)
    # two-block
    if pen.mode == "auto":
        rho = calibrate_two_block(prob.g.lipschitz, prob.A, pen.margin, monotone=pen.monotone)
    else:
        rho = explicit(prob.g.lipschitz)
        if rho.size != 1:
            raise ConfigError("two-block takes a single penalty")
        rho = float(rho.ravel()[0])
    return two_block_params(rho, prob, override=pen.override)


def setup(cfg: RunConfig):
    inst = load_problem(cfg)
    prob = inst.problem
    K = getattr(prob, "K", 1)
    schedule = make_schedule(cfg, K) if cfg.algorithm != "two-block" else None
    params = make_params(cfg, inst, schedule)
    solver = SolverConfig(params, schedule=schedule,
                          mode="proximal" if cfg.algorithm == "consensus-proximal" else "exact",
                          max_iters=cfg.max_iters, stop_tol=cfg.stop_tol,
                          inner=InnerConfig(cfg.inner_tol, cfg.inner_max_iter),
                          check_level=cfg.check_level, record_states=cfg.record_states,
                          timing=cfg.timing)
    return Setup(cfg, inst, params, solver, np.asarray(inst.lipschitz, dtype=float))


def execute(s: Setup):
    prob = s.instance.problem
    if s.config.algorithm == "sharing":
        return run_sharing(prob, s.solver)
    if s.config.algorithm == "two-block":
        return run_two_block(prob, s.solver)
    return run_consensus(prob, s.solver)


# ---------------------------------------------------------------------------
# reports

def _fmt_vec(v):
    return " ".join("%.6g" % x for x in np.atleast_1d(v))


def calibration_summary(s: Setup):
    p = s.params
    out = {"algorithm": s.config.algorithm, "family": s.instance.family,
           "lipschitz": np.atleast_1d(s.Ls).tolist(),
           "thresholds": np.atleast_1d(p.thresholds).tolist(),
           "rho": np.atleast_1d(p.rho).tolist(), "gamma": np.atleast_1d(p.gamma).tolist(),
           "margin": p.margin, "calibrated": p.calibrated, "override": p.override}
    if s.config.algorithm == "consensus-exact":
        try:
            cc = complexity_constants(p, s.Ls)
            out.update(sigma1=cc.sigma1, sigma2=cc.sigma2, sigma3=cc.sigma3, C=cc.C)
        except NcadmmError as exc:
            out["complexity"] = str(exc)
    if p.alpha is not None:
        out["alpha"] = np.atleast_1d(p.alpha).tolist()
        out["beta"] = np.atleast_1d(p.beta).tolist()
        out["T"] = p.T
    return out


def calibration_text(summary):
    lines = [f"algorithm: {summary['algorithm']}", f"family: {summary['family']}",
             f"L: {_fmt_vec(summary['lipschitz'])}",
             f"thresholds: {_fmt_vec(summary['thresholds'])}",
             f"rho: {_fmt_vec(summary['rho'])}", f"margin: {summary['margin']}",
             f"calibrated: {summary['calibrated']}"]
    for key in ("sigma1", "sigma2", "sigma3", "C"):
        if key in summary:
            lines.append(f"{key}: {summary[key]:.6g}")
    if "complexity" in summary:
        lines.append(f"complexity: {summary['complexity']}")
    return "\n".join(lines) + "\n"


def run_summary(s: Setup, result):
    tr = result.trace
    out = {"version": __version__, "seed": s.config.seed, "status": result.status,
           "message": result.message, "iterations": int(tr.iters[-1]) if len(tr) else 0,
           "final_L": float(tr.L[-1]) if len(tr) else None,
           "final_P": float(tr.P[-1]) if len(tr) else None,
           "final_feas": float(tr.feas[-1]) if len(tr) else None,
           "f_lower": s.instance.f_lower,
           "calibration": calibration_summary(s),
           "checks": {k: r.as_dict() for k, r in result.checks.items()}}
    cal = out["calibration"]
    if "C" in cal and s.params.calibrated and len(tr):
        cert = complexity_certificate(tr, complexity_constants(s.params, s.Ls), float(tr.L[0]),
                                      s.instance.f_lower)
        out["certificate"] = {"bound": cert.bound, "max_lhs": cert.max_lhs,
                              "passed": cert.passed}
    return out


def report_text(summary, checks):
    lines = [f"status: {summary['status']}", f"seed: {summary['seed']}",
             f"iterations: {summary['iterations']}"]
    for key in ("final_L", "final_P", "final_feas", "f_lower"):
        if summary.get(key) is not None:
            lines.append(f"{key}: {summary[key]:.17g}")
    if summary.get("message"):
        lines.append(f"message: {summary['message']}")
    if "certificate" in summary:
        c = summary["certificate"]
        lines.append(f"certificate: {'pass' if c['passed'] else 'FAIL'} "
                     f"max_lhs={c['max_lhs']:.6g} bound={c['bound']:.6g}")
    lines.append("checks:")
    lines += ["  " + r.summary() for r in checks.values()] or ["  (none)"]
    lines.append("")
    lines.append("[json]")
    lines.append(json.dumps(summary, indent=2, sort_keys=True, default=_json_default))
    return "\n".join(lines) + "\n"


def _json_default(v):
    if isinstance(v, (np.integer, np.floating, np.bool_)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(type(v).__name__)


def _write(path, text):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text)


# ---------------------------------------------------------------------------
# offline checks

def replay_extras(s: Setup, states, fired):
    """Recompute the per-row quantities the checks need from recorded iterates."""
    alg = s.config.algorithm
    prob = s.instance.problem
    if alg.startswith("consensus"):
        ev = ConsensusEval(prob, s.params)
        x0s, Xs, Ys = states["x0"], states["xs"], states["ys"]
        rows = ev.evaluate_rows(x0s, Xs, Ys)
        steps = ev.step_rows(x0s, Xs, Ys)
        ex = {"dx_sq": steps["dx_sq"], "dy_sq": steps["dy_sq"], "lower_ref": rows["lower_ref"],
              "gradL_sq": rows["gradL_sq"], "feas_sq": rows["feas_sq"]}
        if alg == "consensus-proximal":
            ident = ev.identity_rows(x0s, Xs, Ys, fired)
            ident[0] = np.nan
            ex["identity"] = ident
        return ex
    if alg == "sharing":
        rho, L = s.params.rho_scalar, prob.coupling.lipschitz
        cuts = np.cumsum([b.dim for b in prob.blocks])[:-1]
        x0s, ys = states["x0"], states["y"]
        xs = [np.split(row, cuts) for row in states["xs"]]
        n = len(x0s)
        dx = np.zeros((n, prob.K))
        for t in range(1, n):
            dx[t] = [np.sum((a - b) ** 2) for a, b in zip(xs[t], xs[t - 1])]
        d0 = np.r_[0.0, np.sum(np.diff(x0s, axis=0) ** 2, axis=1)]
        dy = np.r_[0.0, np.sum(np.diff(ys, axis=0) ** 2, axis=1)]
        lower, ident = np.zeros(n), np.full(n, np.nan)
        for t in range(n):
            sv = prob.shared(xs[t])
            gap = x0s[t] - sv
            lower[t] = (sum(b.value(x) for b, x in zip(prob.blocks, xs[t]))
                        + prob.coupling.value(sv) + 0.5 * (rho - L) * gap @ gap)
            if t and fired[t, 0]:
                ident[t] = np.linalg.norm(prob.coupling.grad(x0s[t]) + ys[t])
        return {"dx_sq": dx, "dy_sq": dy[:, None], "dual_dx_sq": d0[:, None],
                "lower_ref": lower, "identity": ident}
    x2, ys = states["x2"], states["y"]
    dx2 = np.r_[0.0, np.sum(np.diff(x2, axis=0) ** 2, axis=1)]
    dy = np.r_[0.0, np.sum(np.diff(ys, axis=0) ** 2, axis=1)]
    return {"dx_sq": dx2[:, None], "dy_sq": dy[:, None]}


def offline_checks(s: Setup, trace: Trace, states):
    """All check reports for a recorded run; ``L`` comes from the trace file itself."""
    if len(trace) == 0:
        return {}
    n = next(iter(states.values())).shape[0] if states else 0
    if n != len(trace):
        raise ConfigError(f"states hold {n} rows but the trace has {len(trace)}")
    for name, vals in replay_extras(s, states, trace.fired).items():
        trace.set_extra(name, vals)
    tol = check_tolerance(s.solver.inner.tol)
    alg = s.config.algorithm
    if alg == "sharing":
        return sharing_checks(trace, s.params, s.instance.problem.coupling.lipschitz, tol)
    if alg == "two-block":
        return two_block_checks(trace, s.params, s.instance.problem, tol)
    sched = s.solver.schedule
    full = sched.kind == "full" and alg == "consensus-exact"
    return consensus_checks(trace, s.params, s.Ls, s.solver.mode, tol, full_sweep_run=full)


# ---------------------------------------------------------------------------
# commands

def _prefix(base, seed, many):
    return f"{base}.seed{seed}" if many else base


def cmd_calibrate(cfg: RunConfig, prefix):
    s = setup(cfg)
    summary = calibration_summary(s)
    text = calibration_text(summary)
    sys.stdout.write(text)
    _write(f"{prefix}.calibration.txt",
           text + "\n[json]\n" + json.dumps(summary, indent=2, sort_keys=True,
                                            default=_json_default) + "\n")
    return EXIT_OK


def cmd_run(cfg: RunConfig, prefix):
    """One run; writes the trace, report and (optionally) states, returns the exit code."""
    s = setup(cfg)
    try:
        result = execute(s)
    except CheckViolation as exc:
        _write(f"{prefix}.report.txt",
               f"status: check-violation\nseed: {cfg.seed}\nmessage: {exc}\n"
               f"iteration: {exc.iteration}\ncheck: {exc.check}\n")
        log.error("%s", exc)
        return EXIT_CHECK
    Path(prefix).parent.mkdir(parents=True, exist_ok=True)
    result.trace.write_csv(f"{prefix}.trace.csv")
    if result.states:
        save_states(f"{prefix}.states.npz", result.states)
    summary = run_summary(s, result)
    _write(f"{prefix}.report.txt", report_text(summary, result.checks))
    code = _STATUS_EXIT[result.status]
    if cfg.check_level == "full" and result.violations:
        code = EXIT_CHECK
    log.info("seed %s: %s after %d iterations", cfg.seed, result.status, summary["iterations"])
    return code


def cmd_check(cfg: RunConfig, trace_path, states_path, prefix):
    trace = Trace.read_csv(trace_path)
    s = setup(cfg)
    if len(trace) == 0:
        reports = {}
    else:
        if states_path is None or not Path(states_path).exists():
            raise ConfigError("offline checks need the recorded states (.states.npz)")
        reports = offline_checks(s, trace, load_states(states_path))
    lines = [r.summary() for r in reports.values()] or ["(empty trace: nothing to check)"]
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    _write(f"{prefix}.check.txt", text + "\n[json]\n" + json.dumps(
        {k: r.as_dict() for k, r in reports.items()}, indent=2, sort_keys=True,
        default=_json_default) + "\n")
    return EXIT_CHECK if any(r.failed for r in reports.values()) else EXIT_OK


def cmd_gen(cfg: RunConfig, prefix):
    inst = load_problem(cfg)
    path = f"{prefix}.instance.txt"
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    dump_instance(inst, path)
    print(path)
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(prog="ncadmm", description="Nonconvex ADMM experiments.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, hlp in (("calibrate", "print penalty thresholds and chosen values"),
                      ("run", "run the solver and write trace and report"),
                      ("check", "re-run all checks on a recorded run"),
                      ("gen", "dump a generated instance as text")):
        p = sub.add_parser(name, help=hlp)
        p.add_argument("--config", required=True, help="run config file")
        p.add_argument("--seed", type=int, action="append",
                       help="problem seed (repeat for several runs)")
        p.add_argument("--out", help="output path prefix (overrides [output] prefix)")
        p.add_argument("--jobs", type=int, default=1, help="worker threads across seeds")
        p.add_argument("--override-penalty", action="store_true",
                       help="allow penalties below calibration")
        if name == "check":
            p.add_argument("--trace", help="trace CSV (default PREFIX.trace.csv)")
            p.add_argument("--states", help="states npz (default PREFIX.states.npz)")
    return ap


def _setup_logging():
    level = os.environ.get("NCADMM_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _one(args, cfg, prefix):
    try:
        if args.command == "calibrate":
            return cmd_calibrate(cfg, prefix)
        if args.command == "run":
            return cmd_run(cfg, prefix)
        if args.command == "gen":
            return cmd_gen(cfg, prefix)
        return cmd_check(cfg, args.trace or f"{prefix}.trace.csv",
                         args.states or f"{prefix}.states.npz", prefix)
    except (NcadmmError, ValueError, OSError, KeyError) as exc:
        print(f"ncadmm {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


def main(argv=None):
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
    except (ConfigError, OSError) as exc:
        print(f"ncadmm: config error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    if args.override_penalty:
        cfg = cfg.with_override()
    base = args.out or cfg.prefix
    seeds = args.seed or [cfg.seed]
    many = len(seeds) > 1
    jobs = [(cfg.with_seed(sd), _prefix(base, sd, many)) for sd in seeds]
    if args.jobs > 1 and many:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            codes = list(pool.map(lambda j: _one(args, *j), jobs))
    else:
        codes = [_one(args, *j) for j in jobs]
    return min(codes, key=_EXIT_RANK.index)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
