import pytest
import torch

from stylemine import numcore as nc
from stylemine.gradcheck import (CASES, KinkCrossed, check_instance, main_report, mutated,
                                 relative_error, run_case)


def test_relative_error():
    a = torch.tensor([1.0, 0.0])
    assert relative_error(a, a) == 0.0
    assert relative_error(a, torch.tensor([1.0, 1.0])) == pytest.approx(1 / 2 ** 0.5)
    assert relative_error(torch.zeros(2), torch.zeros(2)) == 0.0


def test_check_instance_on_a_polynomial():
    fn = lambda x: (x ** 3).sum()
    x = torch.tensor([0.5, -1.0, 2.0], dtype=torch.float64)
    assert check_instance(fn, [x], [0]) < 1e-8


def test_kink_crossing_is_detected():
    x = torch.tensor([5e-5, 1.0], dtype=torch.float64)
    with pytest.raises(KinkCrossed):
        check_instance(lambda t: nc.relu(t).sum(), [x], [0])


@pytest.mark.parametrize("name", sorted(CASES))
def test_every_case_passes_on_a_few_instances(name):
    res = run_case(name, instances=3, seed=11)
    assert res.instances == 3
    assert res.passed, res


def test_wrong_relu_backward_is_caught():
    with mutated("relu"):
        assert not run_case("relu", instances=5, seed=0).passed
        assert not run_case("mined_latent", instances=3, seed=0).passed
    assert run_case("relu", instances=5, seed=0).passed
    with pytest.raises(ValueError):
        with mutated("softmax"):
            pass


def test_report_lines():
    lines = []
    ok = main_report(instances=1, seed=3, out=lines.append)
    assert ok
    assert len(lines) == len(CASES) + 1 and lines[-1].startswith("elapsed")
