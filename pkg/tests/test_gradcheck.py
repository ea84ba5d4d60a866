import numpy as np
import pytest

from src.cli import main
from src.gradcheck import (
    GradCheck, all_passed, numerical_gradient, op_checks, refine_check, results_frame, run_check,
    run_gradcheck,
)
from src.tensor import Tensor, make_result, tsum


def wrong_square(a):
    """x**2 with a deliberately doubled gradient."""
    return make_result(a.data ** 2, (a,), lambda g: (4.0 * a.data * g,))


class TestHarness:
    def test_numerical_gradient_of_square(self):
        x = Tensor(np.array([1.5, -2.0]), requires_grad=True, dtype="fp64")
        assert numerical_gradient(lambda: tsum(x * x), x, (1,)) == pytest.approx(-4.0, rel=1e-8)
        np.testing.assert_array_equal(x.data, [1.5, -2.0])

    def test_correct_gradient_passes(self, rng):
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True, dtype="fp64")
        result = run_check(GradCheck("square", lambda: tsum(x * x), [("x", x)]), rng)
        assert result.passed and result.checked == 6

    def test_wrong_gradient_fails(self, rng):
        x = Tensor(rng.uniform(1.0, 2.0, size=(5,)), requires_grad=True, dtype="fp64")
        result = run_check(GradCheck("bad square", lambda: tsum(wrong_square(x)), [("x", x)]), rng)
        assert not result.passed
        assert result.max_rel_error == pytest.approx(0.5, rel=1e-4)

    def test_results_frame(self, rng):
        x = Tensor(rng.normal(size=(2,)), requires_grad=True, dtype="fp64")
        results = [run_check(GradCheck("square", lambda: tsum(x * x), [("x", x)]), rng)]
        frame = results_frame(results)
        assert frame["status"].tolist() == ["ok"]
        assert all_passed(results)


class TestSuite:
    def test_every_op_passes(self):
        rng = np.random.default_rng(0)
        results = [run_check(check, rng) for check in op_checks(rng)]
        failed = [(r.name, r.max_rel_error) for r in results if not r.passed]
        assert not failed

    def test_refinement_passes(self):
        rng = np.random.default_rng(0)
        assert run_check(refine_check(rng), rng).passed

    @pytest.mark.slow
    def test_full_suite_including_model(self):
        assert all_passed(run_gradcheck(seed=0))

    @pytest.mark.slow
    def test_cli_exit_code(self):
        assert main(["gradcheck", "--skip-model"]) == 0
