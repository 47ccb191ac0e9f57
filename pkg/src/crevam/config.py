"""Key-value run configuration.

A config file is plain ``key = value`` lines (``#`` comments allowed)::

    student_id = sid
    mechanism = MNAR-t
    score_terms = gender:categorical:levels=F|M; satq:categorical:missing=none
    attendance_years = 2
    em_tol = 1e-8

Terms are ``;``-separated; each is ``name[:kind][:levels=A|B][:missing=X]``
with kind ``categorical`` (default) or ``continuous``.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace

from .data import DataError, Schema, TermSpec
from .design import AttendanceMechanism, ModelSpec
from .estimation import FitOptions

_SECTION = "run"


class ConfigError(ValueError):
    pass


def parse_term(text: str) -> TermSpec:
    parts = [p.strip() for p in text.split(":")]
    if not parts[0]:
        raise ConfigError(f"term without a name: {text!r}")
    name, kind, levels, missing = parts[0], "categorical", None, None
    for p in parts[1:]:
        if p in ("categorical", "continuous"):
            kind = p
        elif p.startswith("levels="):
            levels = tuple(v for v in p[len("levels="):].split("|") if v)
        elif p.startswith("missing="):
            missing = p[len("missing="):]
        else:
            raise ConfigError(f"term {name!r}: cannot parse {p!r}")
    try:
        return TermSpec(name, kind, levels, missing)
    except DataError as exc:
        raise ConfigError(str(exc)) from None


def parse_terms(text: str) -> tuple[TermSpec, ...]:
    return tuple(parse_term(t) for t in text.split(";") if t.strip())


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.replace(" ", "").split(",") if v)
    except ValueError:
        raise ConfigError(f"expected a comma-separated list of integers, got {text!r}") from None


@dataclass
class RunConfig:
    schema: Schema = field(default_factory=Schema)
    T: int | None = None
    mechanism: AttendanceMechanism = AttendanceMechanism.MAR
    mechanisms: tuple[str, ...] = ("MAR", "MNAR-t", "MNAR-s", "MNAR-b")
    score_terms: tuple[TermSpec, ...] = ()
    attendance_terms: tuple[TermSpec, ...] = ()
    attendance_years: tuple[int, ...] | None = None
    standardize: bool = True
    require_first_year: bool = True
    missing_teacher: str = "retain"
    options: FitOptions = field(default_factory=FitOptions)
    workers: int = 1

    def model_spec(self, mechanism=None) -> ModelSpec:
        return ModelSpec(mechanism or self.mechanism, self.score_terms, self.attendance_terms,
                         self.attendance_years)


_SCHEMA_KEYS = ("student_id", "year", "teacher_id", "score")
_FLOAT_OPTS = ("em_tol", "param_tol", "mode_tol", "monotone_slack", "se_step")
_INT_OPTS = ("max_iter", "mode_max_iter", "seed", "memory")
_BOOL_OPTS = ("compute_se", "accelerate")


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    cp.optionxform = str  # keys are case-sensitive (T)
    try:
        cp.read_string(f"[{_SECTION}]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    sec = cp[_SECTION]
    cfg = RunConfig()
    schema_kw = {k: sec[k] for k in _SCHEMA_KEYS if k in sec}
    if "covariates" in sec:
        schema_kw["covariates"] = tuple(c.strip() for c in sec["covariates"].split(",") if c.strip())
    cfg.schema = Schema(**schema_kw)
    opts = {}
    try:
        for key, raw in sec.items():
            if key in _SCHEMA_KEYS or key == "covariates":
                continue
            if key == "T":
                cfg.T = int(raw)
            elif key == "mechanism":
                cfg.mechanism = AttendanceMechanism.parse(raw)
            elif key == "mechanisms":
                cfg.mechanisms = tuple(AttendanceMechanism.parse(m.strip()).value for m in raw.split(",") if m.strip())
            elif key == "score_terms":
                cfg.score_terms = parse_terms(raw)
            elif key == "attendance_terms":
                cfg.attendance_terms = parse_terms(raw)
            elif key == "attendance_years":
                cfg.attendance_years = _ints(raw) or None
            elif key in ("standardize", "require_first_year"):
                setattr(cfg, key, sec.getboolean(key))
            elif key == "missing_teacher":
                if raw not in ("retain", "drop"):
                    raise ConfigError("missing_teacher must be 'retain' or 'drop'")
                cfg.missing_teacher = raw
            elif key == "workers":
                cfg.workers = int(raw)
            elif key in _FLOAT_OPTS:
                opts[key] = float(raw)
            elif key in _INT_OPTS:
                opts[key] = int(raw)
            elif key in _BOOL_OPTS:
                opts[key] = sec.getboolean(key)
            else:
                raise ConfigError(f"unknown config key {key!r}")
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad value in config: {exc}") from None
    cfg.options = replace(cfg.options, **opts)
    return cfg


def load_config(path: str) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
