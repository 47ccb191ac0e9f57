import io

import numpy as np
import pytest
from hypothesis import settings

from crevam.data import build_cohort
from crevam.design import ModelSpec, build_model
from crevam.simulate import SimDesign, example_params, generate

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


def simulate(mech="MAR", n=60, T=3, m=4, seed=0, **kw):
    """(cohort, truth, params) from the built-in example parameters."""
    params = example_params(T, mech, **kw)
    mm = (m,) * T if np.isscalar(m) else tuple(m)
    cohort, truth = generate(SimDesign(n, T, mm, params, mech, seed=seed))
    return cohort, truth, params


def model(mech="MAR", **kw):
    cohort, truth, params = simulate(mech, **kw)
    return build_model(cohort, ModelSpec(mech)), params


def csv_bytes(text: str) -> io.BytesIO:
    return io.BytesIO(text.encode("utf-8"))


def small_records():
    # three students, two years, two teachers per year
    rows = [
        ("a", 1, "t1", 0.5, {"sex": "F"}), ("a", 2, "u1", 1.0, {"sex": "F"}),
        ("b", 1, "t1", -0.2, {"sex": "M"}), ("b", 2, "u2", None, {"sex": "M"}),
        ("c", 1, "t2", 0.1, {"sex": "F"}), ("c", 2, "u2", 0.4, {"sex": "F"}),
    ]
    return rows


@pytest.fixture
def small_cohort():
    return build_cohort(small_records(), T=2, covariate_names=("sex",))


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
