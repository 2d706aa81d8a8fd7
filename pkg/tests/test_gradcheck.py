import numpy as np
import pytest
import torch

from orfnet.gradcheck import (END_TO_END_TOL, CheckResult, check_function, corrupted_check,
                              numeric_gradient, rel_error, run_gradcheck)


def test_numeric_gradient_of_known_function():
    x = torch.tensor([0.3, -1.2, 2.0], dtype=torch.float64)
    g = numeric_gradient(lambda v: (v ** 3).sum(), x)
    assert np.allclose(g, 3 * x.numpy() ** 2, rtol=1e-8)
    assert check_function(lambda v: torch.sin(v).sum(), x) < 1e-8


def test_rel_error_floor_and_symmetry():
    assert rel_error([1.0], [1.0]) == 0.0
    assert rel_error([1.0], [1.1]) == pytest.approx(0.1 / 1.1)
    assert rel_error([1e-9], [0.0]) == pytest.approx(1e-3)  # floor 1e-6 in the denominator
    assert rel_error([], []) == 0.0


def test_wrong_gradient_is_caught():
    x = torch.tensor([0.5, 1.5], dtype=torch.float64)
    err = check_function(lambda v: (v ** 2).sum(), x, analytic=lambda v: 2.02 * v.numpy())
    assert err == pytest.approx(0.02 / 2.02, rel=1e-6)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_suites_pass_for_several_seeds(seed):
    results = run_gradcheck(seed=seed, configs=8, model_params=6)
    names = {r.name for r in results}
    assert {"grid.sqrt", "loss.ca_pos", "loss.unl_cls_ca", "geometry.giou_loss", "model.end_to_end"} <= names
    for r in results:
        assert r.passed, r.line()


def test_corrupted_gradient_fails_and_names_operation():
    r = corrupted_check(0)
    assert not r.passed
    assert r.line().startswith("FAIL") and "loss.focal_pos[corrupted]" in r.line()


def test_check_result_line():
    r = CheckResult("x", 5e-4, 10, END_TO_END_TOL)
    assert r.passed and r.line().startswith("PASS")
