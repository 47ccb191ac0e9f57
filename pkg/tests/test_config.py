import pytest

from crevam.config import ConfigError, RunConfig, load_config, parse_config, parse_term, parse_terms
from crevam.data import Schema, TermSpec
from crevam.design import AttendanceMechanism


def test_parse_term():
    assert parse_term("gender") == TermSpec("gender")
    assert parse_term("gpa:continuous") == TermSpec("gpa", "continuous")
    assert parse_term("satq:levels=lo|mid|hi:missing=none") == TermSpec("satq", "categorical", ("lo", "mid", "hi"),
                                                                         "none")
    assert parse_terms(" a ; b:continuous ;") == (TermSpec("a"), TermSpec("b", "continuous"))
    for bad in (":continuous", "x:ordinal", "x:bogus=1"):
        with pytest.raises(ConfigError):
            parse_term(bad)


def test_parse_config_full():
    cfg = parse_config("""
# comment
student_id = sid
teacher_id = tid
covariates = gender, gpa
T = 3
mechanism = mnar_b
mechanisms = MAR, MNAR-t
score_terms = gender; gpa:continuous
attendance_terms = gender
attendance_years = 2, 3
standardize = no
require_first_year = false
missing_teacher = drop
workers = 2
em_tol = 1e-10
max_iter = 50
compute_se = off   # inline comment
""")
    assert cfg.schema == Schema(student_id="sid", teacher_id="tid", covariates=("gender", "gpa"))
    assert cfg.T == 3 and cfg.mechanism is AttendanceMechanism.parse("MNAR-b")
    assert cfg.mechanisms == ("MAR", "MNAR-t")
    assert cfg.score_terms == (TermSpec("gender"), TermSpec("gpa", "continuous"))
    assert cfg.attendance_years == (2, 3)
    assert not cfg.standardize and not cfg.require_first_year and cfg.missing_teacher == "drop"
    assert cfg.workers == 2
    assert cfg.options.em_tol == 1e-10 and cfg.options.max_iter == 50 and not cfg.options.compute_se
    spec = cfg.model_spec()
    assert spec.attendance_years == (2, 3) and spec.score_terms == cfg.score_terms


def test_defaults():
    cfg = parse_config("")
    assert cfg == RunConfig()
    assert cfg.options.max_iter == 500 and cfg.options.em_tol == 1e-8


@pytest.mark.parametrize("text", [
    "colour = blue",
    "max_iter = many",
    "mechanism = MNAR-q",
    "missing_teacher = impute",
    "attendance_years = 2, x",
    "no equals sign here",
])
def test_bad_config(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_load_config(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("mechanism = MNAR-t\nT = 2\n")
    cfg = load_config(str(path))
    assert cfg.T == 2 and cfg.mechanism.value == "MNAR-t"
