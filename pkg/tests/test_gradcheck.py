"""Every differentiable op against central differences."""

import time

import numpy as np
import pandas as pd
import pytest

from engine import autograd as ag
from engine.autograd.gradcheck import check_gradients, numeric_gradient, relative_error
from scripts.cli import main
from validation.gradcheck_suite import SUITE, check_op, run_suite


@pytest.mark.parametrize("name", sorted(SUITE))
def test_op_within_tolerance(name):
    result = check_op(name, cases=3, seed=0)
    assert result.passed, f"{name}: max rel err {result.max_rel_error:.3e}"


def test_numeric_gradient_of_square():
    x = np.array([1.0, -2.0, 0.5])
    grad = numeric_gradient(lambda t: ag.sum_(ag.square(t[0])), [x], 0)
    assert np.allclose(grad, 2 * x, atol=1e-8)


def test_check_detects_a_wrong_rule():
    def bad_square(t):
        x = t[0]
        out = ag.Tensor._from_op(x.data ** 2, (x,), "bad_square", lambda g: (g * x.data,))
        return ag.sum_(out)

    assert check_gradients(bad_square, [np.array([1.0, -2.0, 0.5])]) == pytest.approx(0.5, rel=1e-4)


def test_relative_error_is_scale_free():
    a = np.array([1.0, 2.0])
    assert relative_error(a * 1e6, a * 1e6) == 0.0
    assert relative_error(a + 0.1, a) == pytest.approx(0.1, rel=1e-6)


def test_small_entries_are_not_hidden_by_large_ones():
    analytic = np.array([1.0, 1e-3 + 1e-5])
    numeric = np.array([1.0, 1e-3])
    assert relative_error(analytic, numeric) == pytest.approx(1e-2, rel=1e-3)
    assert relative_error(np.zeros(0), np.zeros(0)) == 0.0


def test_suite_subset_reports_each_op():
    results = run_suite(cases=2, only=["add", "jsd"])
    assert [r.name for r in results] == ["add", "jsd"]
    assert all(r.cases == 2 for r in results)


@pytest.mark.slow
def test_full_suite_from_the_command_line(tmp_path):
    out = tmp_path / "gradcheck.csv"
    start = time.perf_counter()
    assert main(["gradcheck", "--out", str(out)]) == 0
    assert time.perf_counter() - start < 120.0
    table = pd.read_csv(out)
    assert sorted(table["op"]) == sorted(SUITE)
    assert (table["cases"] == 20).all()
    assert table["passed"].all()
