import numpy as np
import pytest

from cropforge import autograd as ag
from cropforge.gradcheck import CASES, check_case, relative_error, run_gradcheck


def test_relative_error_floor():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert relative_error(np.array([1.0]), np.array([1.0 + 1e-6])) == pytest.approx(1e-6 - 1e-8, rel=1e-3)


def test_zero_gradient_tolerates_rounding_noise():
    # a truly zero gradient against finite-difference noise of eps * |loss| / step
    assert relative_error(np.zeros(4), np.full(4, 2.22e-10)) == 0.0
    assert relative_error(np.array([0.0]), np.array([1e-3])) > 1e-4
    assert relative_error(np.array([1e-3]), np.array([2e-3])) > 1e-4


def test_shift_invariant_input_passes():
    # adding a per-row constant before softmax has an analytically zero gradient
    rng = np.random.default_rng(3)

    def build(t):
        return ag.softmax(ag.add(t[0], t[1]), axis=-1)

    worst = check_case([rng.normal(size=(3, 5)) * 20.0, rng.normal(size=(3, 1)) * 20.0], build, rng)
    assert worst < 1e-4


def test_every_op_passes_quick_run():
    report = run_gradcheck(seed=7, trials=3, composition_trials=1)
    assert {r.op for r in report.results} == set(CASES)
    assert report.passed, "\n".join(report.lines())


@pytest.mark.slow
def test_every_op_passes_full_run():
    report = run_gradcheck(seed=7, trials=20, composition_trials=3)
    assert report.passed, "\n".join(report.lines())


def test_wrong_backward_is_caught(monkeypatch):
    def bad_tanh(a):
        a = ag._as_tensor(a)
        y = np.tanh(a.data)
        # derivative off by a factor of two
        return ag._make("tanh", y, (a,), lambda g: (2.0 * g * (1.0 - y * y),))

    monkeypatch.setattr(ag, "tanh", bad_tanh)
    report = run_gradcheck(seed=7, trials=2, ops=["tanh", "add"])
    by_op = {r.op: r for r in report.results}
    assert not by_op["tanh"].passed
    assert by_op["add"].passed
    assert not report.passed
    assert "FAIL" in "\n".join(report.lines())


def test_check_case_subsamples_large_inputs():
    rng = np.random.default_rng(0)
    calls = []

    def build(t):
        calls.append(1)
        return ag.sum(ag.mul(t[0], t[0]))

    worst = check_case([rng.normal(size=(10, 10))], build, rng, max_entries=4)
    assert worst < 1e-4
    # one recorded pass, then two evaluations per checked entry
    assert len(calls) == 1 + 2 * 4
