"""Run configuration: an INI-style file parsed with :mod:`configparser`.

Sections and keys (all optional except ``[problem] family`` or ``instance``; keys
are case-sensitive)::

    [problem]
    family = nonconvex-quadratic-consensus   ; or: instance = path/to/dump.txt
    K = 5
    n = 10
    seed = 0
    ...                                      ; any GeneratorSpec field

    [algorithm]
    name = consensus-exact                   ; consensus-proximal | sharing | two-block

    [schedule]
    kind = full                              ; cyclic | randomized
    T = 3
    partition = 0 | 1 2 | 3 4 5              ; cells separated by '|'
    p = 0.5                                  ; one value or K+1 values
    p_min = 0.1
    seed = 7                                 ; defaults to the problem seed

    [penalty]
    mode = auto                              ; explicit
    margin = 1.01
    rho = 2.0, 2.0                           ; explicit: one value or one per block
    rho_per_lipschitz = 0.3                  ; explicit: rho_k = c * L_k
    override = false
    monotone = false                         ; two-block only

    [run]
    max_iters = 1000
    stop_tol = 1e-10
    check_level = cheap                      ; off | full
    inner_tol = 1e-10
    inner_max_iter = 100000
    record_states = true
    timing = false

    [output]
    prefix = runs/demo
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from typing import Optional, Tuple

from .bench import GeneratorSpec, spec_fields
from .consensus import CHECK_LEVELS

ALGORITHMS = ("consensus-exact", "consensus-proximal", "sharing", "two-block")
SCHEDULE_KINDS = ("full", "cyclic", "randomized")

_FAMILY_ALGORITHMS = {
    "nonconvex-quadratic-consensus": ("consensus-exact", "consensus-proximal"),
    "sigmoid-consensus": ("consensus-exact", "consensus-proximal"),
    "convex-control": ("consensus-exact", "consensus-proximal"),
    "sharing-quadratic-coupling": ("sharing",),
    "two-block-lasso-like": ("two-block",),
}


class ConfigError(ValueError):
    """Malformed or inconsistent run configuration."""


@dataclass(frozen=True)
class ScheduleConfig:
    kind: str = "full"
    T: Optional[int] = None
    partition: Optional[Tuple[Tuple[int, ...], ...]] = None
    p: Optional[Tuple[float, ...]] = None
    p_min: Optional[float] = None
    seed: Optional[int] = None


@dataclass(frozen=True)
class PenaltyConfig:
    mode: str = "auto"
    margin: float = 1.01
    rho: Optional[Tuple[float, ...]] = None
    rho_per_lipschitz: Optional[float] = None
    override: bool = False
    monotone: bool = False


@dataclass(frozen=True)
class RunConfig:
    """Everything needed to reproduce one run.

    ``problem`` is a :class:`GeneratorSpec`; ``instance`` (a dump file path)
    replaces it when set.
    """

    problem: GeneratorSpec = field(default_factory=GeneratorSpec)
    instance: Optional[str] = None
    algorithm: str = "consensus-exact"
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    penalty: PenaltyConfig = field(default_factory=PenaltyConfig)
    max_iters: int = 1000
    stop_tol: float = 1e-10
    check_level: str = "cheap"
    inner_tol: float = 1e-10
    inner_max_iter: int = 100000
    record_states: bool = True
    timing: bool = False
    prefix: str = "ncadmm-run"

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.instance is None:
            allowed = _FAMILY_ALGORITHMS[self.problem.family]
            if self.algorithm not in allowed:
                raise ConfigError(f"family {self.problem.family} runs with {allowed}, "
                                  f"not {self.algorithm}")
        if self.schedule.kind not in SCHEDULE_KINDS:
            raise ConfigError(f"schedule kind must be one of {SCHEDULE_KINDS}")
        if self.algorithm == "two-block" and self.schedule.kind != "full":
            raise ConfigError("two-block runs use a fixed full sweep")
        pen = self.penalty
        if pen.mode not in ("auto", "explicit"):
            raise ConfigError("penalty mode must be 'auto' or 'explicit'")
        if pen.mode == "explicit" and (pen.rho is None) == (pen.rho_per_lipschitz is None):
            raise ConfigError("explicit penalty needs exactly one of rho, rho_per_lipschitz")
        if pen.mode == "auto" and (pen.rho is not None or pen.rho_per_lipschitz is not None):
            raise ConfigError("rho values given with penalty mode 'auto'")
        if self.check_level not in CHECK_LEVELS:
            raise ConfigError(f"check_level must be one of {CHECK_LEVELS}")
        if self.max_iters < 0:
            raise ConfigError("max_iters must be nonnegative")
        if not self.stop_tol >= 0:
            raise ConfigError("stop_tol must be nonnegative")

    @property
    def seed(self):
        return self.problem.seed

    def with_seed(self, seed):
        return replace(self, problem=self.problem.with_(seed=int(seed)))

    def with_override(self):
        return replace(self, penalty=replace(self.penalty, override=True))


def _bool(sec, key, default):
    try:
        return sec.getboolean(key, fallback=default)
    except ValueError as exc:
        raise ConfigError(f"[{sec.name}] {key}: {exc}") from None


def _num(sec, key, conv, default=None):
    if key not in sec:
        return default
    try:
        return conv(sec[key])
    except ValueError:
        raise ConfigError(f"[{sec.name}] {key}: cannot parse {sec[key]!r}") from None


def _floats(text):
    return tuple(float(v) for v in text.replace(",", " ").split())


def _partition(text):
    cells = tuple(tuple(int(v) for v in cell.replace(",", " ").split())
                  for cell in text.split("|"))
    if any(not c for c in cells):
        raise ConfigError(f"empty partition cell in {text!r}")
    return cells


_KNOWN = {
    "problem": {"family", "instance"} | set(spec_fields()),
    "algorithm": {"name"},
    "schedule": {"kind", "T", "partition", "p", "p_min", "seed"},
    "penalty": {"mode", "margin", "rho", "rho_per_lipschitz", "override", "monotone"},
    "run": {"max_iters", "stop_tol", "check_level", "inner_tol", "inner_max_iter",
            "record_states", "timing"},
    "output": {"prefix"},
}


def parse_config(text, source="<string>"):
    """Parse config text into a :class:`RunConfig`; unknown sections or keys are errors.

    Keys are case-sensitive, since the generator has both ``M`` and ``m``.
    """
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    for name in cp.sections():
        if name not in _KNOWN:
            raise ConfigError(f"unknown section [{name}]")
        extra = set(cp[name]) - _KNOWN[name]
        if extra:
            raise ConfigError(f"unknown keys in [{name}]: {sorted(extra)}")
    get = lambda name: cp[name] if cp.has_section(name) else cp[cp.default_section]  # noqa: E731

    prob = get("problem")
    kw = {}
    types = {f.name: f.type for f in fields(GeneratorSpec)}
    for key in spec_fields():
        if key in prob and key != "family":
            conv = int if types[key] in (int, "int") else float
            kw[key] = _num(prob, key, conv)
    instance = prob.get("instance")
    family = prob.get("family")
    if instance is None and family is None:
        raise ConfigError("[problem] needs family or instance")
    try:
        spec = GeneratorSpec(family=family or GeneratorSpec.family, **kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None

    algorithm = get("algorithm").get("name", "consensus-exact")

    s = get("schedule")
    schedule = ScheduleConfig(
        kind=s.get("kind", "full"),
        T=_num(s, "T", int),
        partition=_partition(s["partition"]) if "partition" in s else None,
        p=_floats(s["p"]) if "p" in s else None,
        p_min=_num(s, "p_min", float),
        seed=_num(s, "seed", int),
    )

    p = get("penalty")
    try:
        rho = _floats(p["rho"]) if "rho" in p else None
    except ValueError:
        raise ConfigError(f"[penalty] rho: cannot parse {p['rho']!r}") from None
    penalty = PenaltyConfig(
        mode=p.get("mode", "auto"),
        margin=_num(p, "margin", float, 1.01),
        rho=rho,
        rho_per_lipschitz=_num(p, "rho_per_lipschitz", float),
        override=_bool(p, "override", False),
        monotone=_bool(p, "monotone", False),
    )

    r = get("run")
    return RunConfig(
        problem=spec,
        instance=instance,
        algorithm=algorithm,
        schedule=schedule,
        penalty=penalty,
        max_iters=_num(r, "max_iters", int, 1000),
        stop_tol=_num(r, "stop_tol", float, 1e-10),
        check_level=r.get("check_level", "cheap"),
        inner_tol=_num(r, "inner_tol", float, 1e-10),
        inner_max_iter=_num(r, "inner_max_iter", int, 100000),
        record_states=_bool(r, "record_states", True),
        timing=_bool(r, "timing", False),
        prefix=get("output").get("prefix", "ncadmm-run"),
    )


def load_config(path):
    with open(path) as fh:
        return parse_config(fh.read(), source=str(path))
