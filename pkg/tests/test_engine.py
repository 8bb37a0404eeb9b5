import math

import numpy as np
import pytest

from fbgrape import controllers, errors, tasks
from fbgrape.controllers import LookupTable
from fbgrape.graddiff import engine, fdcheck
from fbgrape.graddiff.adjoint import adjoint_gradient


def _purity_oracle(measurements, nbar, cutoff):
    """Final purity of a thermal state once n mod 2^J is known exactly."""
    ratio = nbar / (nbar + 1)
    p = ratio ** np.arange(cutoff)
    p /= p.sum()
    mod = 2 ** measurements
    total = 0.0
    for r in range(mod):
        cls = p[r::mod]
        if cls.sum() > 0:
            total += np.sum(cls ** 2) / cls.sum()
    return total


def test_analytic_purification_matches_residue_oracle():
    task = tasks.build_task("purification")
    ctl = tasks.analytic_purification_strategy(4)
    r = engine.rollout(task, ctl, np.zeros(0), mode="enum", grad=False)
    assert r.mean_return == pytest.approx(_purity_oracle(4, 2.0, 40), abs=1e-12)
    assert r.weights.sum() == pytest.approx(1.0, abs=1e-13)


def test_mc_mean_agrees_with_enumeration():
    task = tasks.build_task("purification", measurements=3, cutoff=30, leakage_tol=1e-3)
    ctl = tasks.analytic_purification_strategy(3)
    exact = engine.rollout(task, ctl, np.zeros(0), mode="enum", grad=False).mean_return
    mc = engine.rollout(task, ctl, np.zeros(0), mode="mc", batch=10_000, seed=3, grad=False)
    se = mc.std_return / math.sqrt(10_000)
    assert abs(mc.mean_return - exact) < 3 * se


def test_two_outcome_gradient_exact_and_sampled():
    task = tasks.build_task("two_outcome_toy")
    ctl = LookupTable.for_task(task)
    th = np.array([1.1])
    enum = engine.rollout(task, ctl, th, mode="enum")
    assert enum.mean_return == pytest.approx(math.cos(0.55) ** 2)
    assert enum.grad[0] == pytest.approx(-math.sin(1.1) / 2)
    mc = engine.rollout(task, ctl, th, mode="mc", batch=20_000, seed=0, per_trajectory=True)
    g = np.asarray(mc.grad)[:, 0]
    assert abs(g.mean() + math.sin(1.1) / 2) < 4 * g.std() / math.sqrt(g.size)


def test_score_term_is_needed():
    task = tasks.build_task("two_outcome_toy")
    ctl = LookupTable.for_task(task)
    r = engine.rollout(task, ctl, np.array([1.1]), mode="mc", batch=200, seed=0, score=False)
    # without the likelihood term the projective readout hides the whole gradient
    assert np.all(np.asarray(r.grad) == 0)


def test_per_trajectory_gradients_average_to_batch():
    task = tasks.tiny_task("stabilize_jc")
    ctl, th = controllers.controller_init("table", task, 0)
    a = engine.rollout(task, ctl, th, mode="mc", batch=6, seed=2)
    b = engine.rollout(task, ctl, th, mode="mc", batch=6, seed=2, per_trajectory=True)
    np.testing.assert_allclose(np.asarray(b.grad).mean(axis=0), a.grad, atol=1e-12)


def test_seed_streams_are_reproducible_and_split():
    task = tasks.tiny_task("purification")
    ctl, th = controllers.controller_init("table", task, 0)
    full = engine.rollout(task, ctl, th, mode="mc", batch=8, seed=11, grad=False)
    again = engine.rollout(task, ctl, th, mode="mc", batch=8, seed=11, grad=False)
    tail = engine.rollout(task, ctl, th, mode="mc", batch=4, seed=11, start_index=4, grad=False)
    np.testing.assert_array_equal(full.outcomes, again.outcomes)
    np.testing.assert_array_equal(full.outcomes[4:], tail.outcomes)
    np.testing.assert_allclose(full.returns[4:], tail.returns, atol=1e-14)


def test_branch_cap():
    task = tasks.build_task("spin_uncertain", pulses=8, nodes=41)
    ctl, th = controllers.controller_init("table", task, 0)
    with pytest.raises(errors.BranchCapError):
        engine.rollout(task, ctl, th, mode="enum")


def test_enum_needs_discrete_outcomes():
    task = tasks.build_task("continuous_toy")
    ctl, th = controllers.controller_init("table", task, 0)
    with pytest.raises(errors.ConfigError):
        engine.rollout(task, ctl, th, mode="enum")


def test_future_and_full_coefficients():
    r = np.array([[1.0, 2.0, 3.0]])
    np.testing.assert_array_equal(engine.future_coeffs(r), [[5.0, 3.0]])
    np.testing.assert_array_equal(engine.full_coeffs(r), [[6.0, 6.0]])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
@pytest.mark.parametrize("name", ["purification", "stabilize_jc", "feedback_prep_thermal", "stabilize_snap",
                                  "spin_uncertain", "two_outcome_toy", "open_loop_jc_prep", "gkp_prep"])
def test_tape_matches_adjoint(name):
    task = tasks.tiny_task(name)
    ctl, th = controllers.controller_init("table", task, 1)
    r = engine.rollout(task, ctl, th, mode="mc", batch=5, seed=4)
    g, ret = adjoint_gradient(task, ctl, th, r.outcomes, consts=r.consts, coeffs=r.coeffs)
    np.testing.assert_allclose(ret, r.returns, atol=1e-12)
    np.testing.assert_allclose(g, r.grad, atol=1e-10 * max(1.0, np.max(np.abs(r.grad))))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
@pytest.mark.parametrize("name", ["purification", "stabilize_jc", "continuous_toy", "spin_uncertain"])
@pytest.mark.parametrize("kind", ["table", "recurrent"])
def test_finite_differences(name, kind):
    task = tasks.tiny_task(name)
    kw = {"hidden": (4,)} if kind == "recurrent" else {}
    ctl, th = controllers.controller_init(kind, task, 2, **kw)
    rep = fdcheck.finite_diff_check(task, ctl, th, h=1e-5, batch=3, seed=0)
    assert rep.max_rel_error < 1e-6, rep.line()


def test_finite_differences_dense_state_input():
    task = tasks.tiny_task("stabilize_snap")
    ctl, th = controllers.controller_init("dense", task, 0, hidden=(4,), last_bias=0.1)
    rep = fdcheck.finite_diff_check(task, ctl, th, h=1e-5, batch=2, seed=0)
    assert rep.max_rel_error < 1e-6, rep.line()


def test_h_sweep_reports_each_step():
    task = tasks.tiny_task("two_outcome_toy")
    ctl, th = controllers.controller_init("table", task, 0)
    reps = fdcheck.h_sweep(task, ctl, th, hs=(1e-3, 1e-4), mode="enum")
    assert [r.h for r in reps] == [1e-3, 1e-4]
    assert all(r.max_rel_error < 1e-5 for r in reps)
    assert "max_rel_error" in reps[0].line()


def test_vanishing_gradient_is_compared_absolutely():
    rep = fdcheck.FDReport(1e-4, np.zeros(2), np.array([1e-12, -1e-12]))
    assert rep.max_rel_error < 1e-5


def test_uncertainty_quadrature_weights():
    task = tasks.build_task("spin_uncertain", pulses=1, nodes=21)
    nodes, w = task.uncertainty.quadrature()
    assert w.sum() == pytest.approx(1.0)
    assert np.sum(w * (nodes - 1.0) ** 2) == pytest.approx(0.04, rel=1e-12)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_fd_error_shrinks_quadratically():
    # central-difference truncation: error ∝ h², so a decade in h buys two in error
    task = tasks.tiny_task("purification")
    ctl, th = controllers.controller_init("dense", task, 0, hidden=(4,))
    e3, e4 = (fdcheck.finite_diff_check(task, ctl, th, h=h, mode="enum").max_rel_error for h in (1e-3, 1e-4))
    assert 60 < e3 / e4 < 140
