import math

import numpy as np
import pytest
import scipy.stats

from fbgrape import channels, errors, gates, qcore
from fbgrape.qcore import HilbertLayout


def _fock_dm(lay, n):
    return qcore.build_state("fock", lay, n=n).dm()


def test_decay_of_single_photon():
    lay = HilbertLayout(4, 0)
    spec = channels.DissipationSpec(1.0, 0.3)
    rho = channels.lindblad_rk4(_fock_dm(lay, 1), spec, lay)
    assert np.real(rho[1, 1]) == pytest.approx(math.exp(-0.3), abs=1e-7)
    assert np.real(np.trace(rho)) == pytest.approx(1.0, abs=1e-13)


def test_decay_keeps_poisson_shape_for_coherent_state():
    lay = HilbertLayout(30, 0)
    rho = qcore.build_state("coherent", lay, alpha=1.5).dm()
    out = channels.lindblad_rk4(rho, channels.DissipationSpec(1.0, 0.4), lay)
    ref = qcore.build_state("coherent", lay, alpha=1.5 * math.exp(-0.2))
    assert qcore.fidelity(out, ref) == pytest.approx(1.0, abs=1e-7)


def test_rk4_convergence_order():
    lay = HilbertLayout(6, 0)
    rho = _fock_dm(lay, 3)
    exact = math.exp(-3 * 1.0)
    errs = []
    for steps in (4, 8, 16):
        out = channels.lindblad_rk4(rho, channels.DissipationSpec(1.0, 1.0, rk4_steps=steps), lay)
        errs.append(abs(np.real(out[3, 3]) - exact))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders >= 3.8)


def test_substep_rule():
    assert channels.rk4_substeps(0.0, 10) == 1
    assert channels.rk4_substeps(0.05, 10) == 1
    assert channels.rk4_substeps(1.0, 40) == 80
    with pytest.raises(errors.ConfigError):
        channels.DissipationSpec(-1.0, 1.0)


def test_adjoint_map_identity(rng):
    lay = HilbertLayout(5, 1)
    d = lay.dim
    a = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    b = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    spec = channels.DissipationSpec(1.0, 0.2)
    lhs = np.vdot(a, channels.lindblad_rk4(b, spec, lay))
    rhs = np.vdot(channels.lindblad_rk4(a, spec, lay, adjoint=True), b)
    assert lhs == pytest.approx(rhs, abs=1e-12)


def test_superoperator_path_equals_loop():
    lay = HilbertLayout(4, 1)
    rho = qcore.build_state("fock", lay, n=2).dm()
    spec = channels.DissipationSpec(1.0, 0.15)
    loop = channels._rk4_loop(rho, lay, 0.15, spec.steps(4), False)
    np.testing.assert_allclose(channels.lindblad_rk4(rho, spec, lay), loop, atol=1e-14)


def test_select_outcome_boundaries():
    p = np.array([0.3, 0.7])
    assert channels.select_outcome(p, 0.0) == 0
    assert channels.select_outcome(p, 0.3) == 0      # boundary tie goes to the lower index
    assert channels.select_outcome(p, 0.3000001) == 1
    assert channels.select_outcome(p, 1.0) == 1
    with pytest.warns(RuntimeWarning):
        assert channels.select_outcome(np.array([1e-15, 1.0]), 0.0) == 1
    with pytest.raises(errors.ContractError):
        channels.select_outcome(np.zeros(2), 0.5)


def test_incomplete_family_rejected():
    with pytest.raises(errors.ContractError):
        channels.MeasurementFamily.from_diagonals((1, -1), np.array([[1.0, 0.5], [0.0, 0.5]]))
    with pytest.raises(errors.ContractError):
        channels.MeasurementFamily.from_operators((1,), np.array([[[1.0, 0.0], [0.0, 0.9]]]))


def test_measure_discrete_bayes_update():
    lay = HilbertLayout(6, 0)
    fam = gates.dispersive_povm(lay, math.pi / 2, 0.0, positive_kraus=True)
    rho = qcore.build_state("thermal", HilbertLayout(6, 0), leakage_tol=1e-1, nbar=0.5).matrix
    ev = channels.measure_discrete(rho, fam, 0.0)
    assert ev.outcome == +1
    even = np.real(np.diag(rho))[0::2].sum()
    assert ev.probability == pytest.approx(even)
    assert np.real(np.diag(ev.post_state))[1::2].sum() == pytest.approx(0.0, abs=1e-15)
    assert ev.log_prob == pytest.approx(math.log(even))


def test_reparam_sample_distribution_ks():
    pops = np.array([[0.3, 0.7]])
    sigma = np.array([1.0, -1.0])
    lat = channels.default_lattice()
    z = np.random.default_rng(5).random(100_000)
    m, cov = channels.reparam_sample(np.repeat(pops, z.size, axis=0), sigma, lat, 1.0, z)
    cdf = lambda x: 0.3 * scipy.stats.norm.cdf(x - 1.0) + 0.7 * scipy.stats.norm.cdf(x + 1.0)
    stat = scipy.stats.kstest(np.asarray(m), cdf).statistic
    assert stat < 0.01
    assert np.all(cov > 1 - 1e-6)


def test_reparam_sample_clamps_z():
    lat = channels.default_lattice()
    with pytest.warns(RuntimeWarning):
        m, _ = channels.reparam_sample(np.array([[1.0, 0.0]]), np.array([1.0, -1.0]), lat, 1.0, np.array([1.5]))
    assert float(m[0]) == pytest.approx(lat[-1] + 0.5 * (lat[1] - lat[0]))


def test_continuous_family_and_kraus():
    fam = channels.MeasurementFamily.continuous(np.array([1.0, -1.0]))
    k = channels.continuous_kraus_diag(np.array([0.3]), fam.sigma, 1.0)[0]
    np.testing.assert_allclose(k ** 2, channels.gaussian_density(0.3 - fam.sigma))
    with pytest.raises(errors.ContractError):
        channels.MeasurementFamily.continuous(np.array([0.0]), lattice=np.linspace(-1, 1, 11))


@pytest.mark.filterwarnings("ignore:outcome with probability")
def test_trajectory_step_plan():
    lay = HilbertLayout(4, 1)
    rho = qcore.build_state("ground", lay).dm()
    flip = gates.jc_qubit_drive(lay, math.pi, 0.0)[0]
    fam = channels.MeasurementFamily.from_diagonals((1, -1), gates.qubit_z_diagonals(lay))
    plan = [channels.UnitaryStep(flip), channels.MeasurementStep(fam, 0.5),
            channels.RewardTapStep(lambda r: float(np.real(r[1, 1])))]
    out, events, rewards = channels.trajectory_step(rho, plan)
    assert events[0].outcome == -1
    assert rewards == [pytest.approx(1.0)]


def test_apply_unitary_rejects_non_unitary():
    with pytest.raises(errors.ContractError):
        channels.apply_unitary(np.eye(2), 2 * np.eye(2))
