import math

import numpy as np
import pytest

from fbgrape import controllers, errors, qcore, tasks
from fbgrape.controllers import LookupTable
from fbgrape.graddiff import engine
from fbgrape.program import UncertaintySpec
from fbgrape.qcore import HilbertLayout


@pytest.mark.parametrize("name", sorted(tasks.CATALOG))
def test_catalog_builds_default_and_tiny(name):
    big = tasks.build_task(name)
    small = tasks.tiny_task(name)
    assert big.name == small.name == name
    assert small.layout.fock_cutoff <= 8
    assert small.n_segments <= 3
    assert np.real(np.trace(big.rho0)) == pytest.approx(1.0)


def test_unknown_option_suggests_the_close_match():
    with pytest.raises(errors.ConfigError, match="kappa_t_m"):
        tasks.build_task("stabilize_jc", kappa_tm=0.1)
    with pytest.raises(errors.ConfigError, match="purification"):
        tasks.build_task("purificaton")


def test_task_defaults():
    p = tasks.build_task("purification")
    assert (p.params["measurements"], p.params["nbar"]) == (4, 2.0)
    assert p.default_batch == 32
    assert p.segment_depths() == [0, 1, 2, 3]


@pytest.mark.parametrize("target", ["fock:1", "fock:3", "superposition:1,3", "superposition:0,2,4"])
def test_law_eberly_replay(target):
    lay = HilbertLayout(10, 1)
    ket = qcore.state_from_spec(target, lay)
    ctrl = tasks.law_eberly_solve(ket, lay)
    psi = tasks.replay_controls(ctrl, lay)
    assert abs(np.vdot(ket.amplitudes, psi)) ** 2 == pytest.approx(1.0, abs=1e-12)


def test_law_eberly_theta_solves_the_task():
    task = tasks.build_task("open_loop_jc_prep", target="superposition:1,3", cutoff=10)
    ket = qcore.state_from_spec("superposition:1,3", task.layout)
    theta = tasks.law_eberly_theta(tasks.law_eberly_solve(ket, task.layout))
    ctl = LookupTable.for_task(task)
    r = engine.rollout(task, ctl, theta, mode="enum", grad=False)
    assert r.mean_return == pytest.approx(1.0, abs=1e-12)


def test_law_eberly_rejects_excited_qubit_and_edge():
    lay = HilbertLayout(4, 1)
    with pytest.raises(errors.StateError):
        tasks.law_eberly_solve(qcore.Ket(np.eye(8)[1].astype(complex)), lay)
    with pytest.raises(errors.TruncationError):
        tasks.law_eberly_solve(qcore.state_from_spec("fock:3", lay), lay)


def test_analytic_controls_split_residue_classes():
    assert tasks.analytic_purification_controls(()) == pytest.approx((math.pi / 2, 0.0))
    assert tasks.analytic_purification_controls((1,)) == pytest.approx((math.pi / 4, -math.pi / 2))
    assert tasks.analytic_purification_controls((1, 1)) == pytest.approx((math.pi / 8, -3 * math.pi / 4))
    # after the history (1, 1) the number is 3 mod 4: the next readout must separate 3 from 7 mod 8
    g, d = tasks.analytic_purification_controls((1, 1))
    n = np.array([3, 7, 11, 15])
    p_plus = np.cos(g * n + d / 2) ** 2
    np.testing.assert_allclose(p_plus, [1, 0, 1, 0], atol=1e-14)


def test_opposite_sign_delta_does_not_split():
    g = math.pi / 8
    n = np.array([3, 7])
    p_plus = np.cos(g * n + (3 * math.pi / 4) / 2) ** 2
    assert np.all((p_plus > 0.1) & (p_plus < 0.9))


def test_spin_closed_form_matches_enumeration():
    unc = UncertaintySpec("g", 1.0, 0.2, 21)
    task = tasks.build_task("spin_uncertain", pulses=3, nodes=21)
    taus = np.array([2.2, 1.3, 0.9])
    ctl = LookupTable.for_task(task, constrained=True)
    r = engine.rollout(task, ctl, taus, mode="enum", grad=False)
    assert r.mean_return == pytest.approx(tasks.spin_fidelity_closed_form(taus, uncertainty=unc), abs=1e-12)


def test_spin_tree_oracle_matches_full_table(rng):
    task = tasks.build_task("spin_uncertain", pulses=3, nodes=11)
    ctl = LookupTable.for_task(task)
    theta = rng.uniform(0, math.pi, ctl.n_params)

    def tau_fn(hist):
        return theta[LookupTable.global_index(hist)]

    ref = tasks.spin_fidelity_tree(tau_fn, 3, uncertainty=task.uncertainty)
    r = engine.rollout(task, ctl, theta, mode="enum", grad=False)
    assert r.mean_return == pytest.approx(ref, abs=1e-12)


def test_single_pulse_optimum_near_pi():
    unc = UncertaintySpec("g", 1.0, 0.2, 41)
    t = np.linspace(0.9 * math.pi, 1.05 * math.pi, 3001)
    f = [tasks.spin_fidelity_closed_form([x], uncertainty=unc) for x in t]
    assert t[int(np.argmax(f))] == pytest.approx(0.9617 * math.pi, abs=2e-3 * math.pi)


def test_gkp_conditioning_guard():
    with pytest.raises(errors.ConditioningError, match="cutoff"):
        tasks.gkp_stabilizer_operator(0.5, 200)


def test_gkp_stabilizer_is_unbounded_with_cutoff():
    tops = []
    for cut in (15, 20, 40):
        op = tasks.gkp_stabilizer_operator(0.5, cut)
        tops.append(np.linalg.eigvalsh(0.5 * (op + op.conj().T)).max())
    assert tops[0] < tops[1] < tops[2]
    assert tops[2] > 10


def test_gkp_reward_modes():
    t = tasks.build_task("gkp_prep", reward="fidelity")
    assert t.reward_mode == "fidelity" and t.target is not None
    with pytest.raises(errors.ConfigError):
        tasks.build_task("gkp_prep", reward="banana")
    # vacuum already overlaps strongly with the Δ = 0.5 grid state
    ctl = LookupTable.for_task(t)
    r = engine.rollout(t, ctl, np.zeros(ctl.n_params), mode="enum", grad=False)
    amps = qcore.gkp_amplitudes(0.5, 200)
    assert r.mean_return == pytest.approx(abs(amps[0]) ** 2 / np.sum(np.abs(amps) ** 2), abs=1e-6)
    assert r.mean_return > 0.6


def test_zero_controls_give_bare_decay():
    task = tasks.build_task("stabilize_jc")
    ctl = LookupTable.for_task(task)
    r = engine.rollout(task, ctl, np.zeros(ctl.n_params), mode="enum", grad=False)
    assert r.mean_return == pytest.approx(tasks.bare_decay_fidelity(task), abs=1e-7)
    assert tasks.bare_decay_fidelity(task) == pytest.approx(math.exp(-0.2))


@pytest.mark.filterwarnings("ignore:outcome with probability")
def test_parity_readout_leaves_even_kitten_alone():
    task = tasks.build_task("stabilize_snap", kappa_t_m=0.0)
    ctl = LookupTable.for_task(task)
    theta = np.zeros(ctl.n_params)
    r = engine.rollout(task, ctl, theta, mode="mc", batch=4, seed=0, grad=False)
    np.testing.assert_array_equal(r.outcomes, 0)
    np.testing.assert_allclose(r.returns, 1.0, atol=1e-12)


def test_stabilize_jc_reward_option():
    with pytest.raises(errors.ConfigError):
        tasks.build_task("stabilize_jc", reward="banana")
    assert tasks.build_task("stabilize_jc", reward="sum").reward_mode == "sum_fidelity"
