"""Task catalog and the independent oracles used to check it."""

from __future__ import annotations

import difflib
import inspect
import math
from functools import lru_cache

import numpy as np
import scipy.linalg

from . import errors, qcore
from .controllers import FunctionController
from .program import (ContinuousMeasure, Dissipate, Gate, Measure, Segment, TaskSpec, UncertaintySpec,
                      fidelity_tap, observable_tap, RewardTap)
from .qcore import HilbertLayout


def _ket_and_rho(state):
    rho = qcore.as_matrix(state)
    ket = state.amplitudes if isinstance(state, qcore.Ket) else None
    return ket, rho, getattr(state, "leakage", 0.0)


def _max_level(amps: np.ndarray, tol: float = 1e-12) -> int:
    nz = np.flatnonzero(np.abs(amps) > tol)
    return int(nz[-1]) if nz.size else 0


# -- catalog entries -------------------------------------------------------------------

def open_loop_jc_prep(target: str = "fock:2", steps: int | None = None, cutoff: int | None = None,
                      complex_controls: bool = True, leakage_tol: float = 1e-6) -> TaskSpec:
    """Ground state → target by ``steps`` rounds of qubit drive then JC interaction."""
    if cutoff is None:
        cutoff = 60 if target.startswith("kitten") else 20
    layout = HilbertLayout(cutoff, 1)
    tgt = qcore.state_from_spec(target, layout, leakage_tol)
    ket, _, leak = _ket_and_rho(tgt)
    if steps is None:
        steps = max(1, _max_level(ket[::2]))
    rho0 = qcore.as_matrix(qcore.build_state("ground", layout))
    if complex_controls:
        drive, jc, names = Gate("qubit_drive", (0, 1)), Gate("jc", (2, 3)), ("a_re", "a_im", "b_re", "b_im")
    else:
        drive, jc, names = Gate("qubit_drive", (0,)), Gate("jc", (1,)), ("a_re", "b_re")
    segs = [Segment((drive, jc)) for _ in range(steps)]
    segs[-1] = Segment((drive, jc, fidelity_tap(ket)))
    return TaskSpec("open_loop_jc_prep", layout, rho0, tuple(segs), len(names), names, "final_fidelity",
                    target=ket, params=dict(target=target, steps=steps, cutoff=cutoff,
                                            complex_controls=complex_controls), leakage=leak)


def purification(measurements: int = 4, nbar: float = 2.0, cutoff: int = 40,
                 leakage_tol: float = 1e-6) -> TaskSpec:
    layout = HilbertLayout(cutoff, 0)
    st = qcore.build_state("thermal", layout, leakage_tol, nbar=nbar)
    segs = [Segment((Measure("dispersive", (0, 1)),)) for _ in range(measurements)]
    segs[-1] = Segment((Measure("dispersive", (0, 1)), RewardTap("purity")))
    return TaskSpec("purification", layout, st.matrix, tuple(segs), 2, ("gamma", "delta"), "final_purity",
                    params=dict(measurements=measurements, nbar=nbar, cutoff=cutoff), leakage=st.leakage,
                    mode="enum")


def feedback_prep_thermal(target: str = "superposition:1,2,3", steps: int = 6, nbar: float = 1.0,
                          cutoff: int = 20, leakage_tol: float = 1e-6) -> TaskSpec:
    """Thermal cavity → target; each step is a measurement then drive + JC interaction."""
    layout = HilbertLayout(cutoff, 1)
    st = qcore.build_state("thermal", layout, leakage_tol, nbar=nbar)
    ket, _, _ = _ket_and_rho(qcore.state_from_spec(target, layout, leakage_tol))
    meas = Measure("dispersive", (2, 3))
    drive, jc = Gate("qubit_drive", (0,)), Gate("jc", (1,))
    segs = [Segment((meas,))]
    segs += [Segment((drive, jc, meas)) for _ in range(steps - 1)]
    segs.append(Segment((drive, jc, fidelity_tap(ket))))
    return TaskSpec("feedback_prep_thermal", layout, st.matrix, tuple(segs), 4,
                    ("alpha", "beta", "gamma", "delta"), "final_fidelity", target=ket,
                    params=dict(target=target, steps=steps, nbar=nbar, cutoff=cutoff),
                    leakage=st.leakage, default_batch=10)


def stabilize_jc(target: str = "fock:1", steps: int = 4, kappa_t_m: float = 0.05, kappa_t_c: float = 0.0,
                 substeps: int = 1, cutoff: int = 10, reward: str = "final",
                 leakage_tol: float = 1e-6) -> TaskSpec:
    """Hold ``target`` against cavity decay: decay, measurement, then JC control substeps."""
    if reward not in ("final", "sum"):
        raise errors.ConfigError("reward must be 'final' or 'sum'")
    layout = HilbertLayout(cutoff, 1)
    ket, rho0, leak = _ket_and_rho(qcore.state_from_spec(target, layout, leakage_tol))
    names = ["gamma", "delta"]
    for s in range(substeps):
        names += [f"alpha_{s}", f"beta_{s}"]
    control = []
    for s in range(substeps):
        if kappa_t_c > 0:
            control.append(Dissipate(kappa_t_c))
        control += [Gate("qubit_drive", (2 + 2 * s,)), Gate("jc", (3 + 2 * s,))]
    readout = [Dissipate(kappa_t_m), Measure("dispersive", (0, 1))]
    tap = [fidelity_tap(ket)]
    # each segment ends in a readout so the next segment's controls see its outcome
    segs = [Segment(tuple(readout))]
    for _ in range(steps - 1):
        segs.append(Segment(tuple(control + (tap if reward == "sum" else []) + readout)))
    segs.append(Segment(tuple(control + tap)))
    return TaskSpec("stabilize_jc", layout, rho0, tuple(segs), len(names), tuple(names),
                    "sum_fidelity" if reward == "sum" else "final_fidelity", target=ket,
                    params=dict(target=target, steps=steps, kappa_t_m=kappa_t_m, kappa_t_c=kappa_t_c,
                                substeps=substeps, cutoff=cutoff, reward=reward), leakage=leak, mode="enum")


def stabilize_snap(alpha: float = 2.0, steps: int = 10, kappa_t_m: float = 0.01, kappa_t_c: float = 0.0,
                   n_snap: int = 15, cutoff: int = 30, leakage_tol: float = 1e-6) -> TaskSpec:
    """Even two-legged kitten held by parity readout plus a displaced SNAP block."""
    layout = HilbertLayout(cutoff, 0)
    ket, rho0, leak = _ket_and_rho(qcore.build_state("kitten2", layout, leakage_tol, alpha=alpha))
    names = ("alpha_re", "alpha_im") + tuple(f"phi_{n}" for n in range(n_snap))
    block = Gate("snap_block", tuple(range(2 + n_snap)))
    readout = [Dissipate(kappa_t_m), Measure("parity")] + ([Dissipate(kappa_t_c)] if kappa_t_c > 0 else [])
    act = [block, fidelity_tap(ket, 1.0 / steps)]
    segs = [Segment(tuple(readout), uses_controls=False)]
    segs += [Segment(tuple(act + readout)) for _ in range(steps - 1)]
    segs.append(Segment(tuple(act)))
    return TaskSpec("stabilize_snap", layout, rho0, tuple(segs), len(names), names, "mean_fidelity",
                    target=ket, params=dict(alpha=alpha, steps=steps, kappa_t_m=kappa_t_m,
                                            kappa_t_c=kappa_t_c, n_snap=n_snap, cutoff=cutoff),
                    leakage=leak, default_batch=16)


def gkp_prep(delta: float = 0.5, steps: int = 4, n_snap: int = 10, cutoff: int = 40,
             guard_level: int | None = None, guard_weight: float = 0.0, reward: str = "stabilizer") -> TaskSpec:
    """Open-loop grid-state preparation scored by the mean finite-energy stabilizer.

    The stabilizer is not bounded above, so states piled into high Fock levels
    can score far above 1. ``guard_weight`` subtracts that multiple of the
    population at or above ``guard_level`` (default: half the cutoff).
    ``reward="fidelity"`` scores overlap with the grid state itself instead.
    """
    if reward not in ("stabilizer", "fidelity"):
        raise errors.ConfigError(f"gkp_prep reward must be 'stabilizer' or 'fidelity', got {reward!r}")
    layout = HilbertLayout(cutoff, 0)
    rho0 = qcore.as_matrix(qcore.build_state("ground", layout))
    names = ("alpha_re", "alpha_im") + tuple(f"phi_{n}" for n in range(n_snap))
    block = Gate("snap_block", tuple(range(2 + n_snap)))
    guard = cutoff // 2 if guard_level is None else int(guard_level)
    op = gkp_stabilizer_operator(delta, cutoff) - guard_weight * np.diag((np.arange(cutoff) >= guard).astype(float))
    segs = [Segment((block,)) for _ in range(steps)]
    target = None
    if reward == "fidelity":
        target = qcore.build_state("gkp", layout, delta=delta).amplitudes
        tap = fidelity_tap(target)
    else:
        tap = observable_tap(op)
    segs[-1] = Segment((block, tap))
    return TaskSpec("gkp_prep", layout, rho0, tuple(segs), len(names), names, reward,
                    target=target,
                    params=dict(delta=delta, steps=steps, n_snap=n_snap, cutoff=cutoff, guard_level=guard,
                                guard_weight=guard_weight, reward=reward), mode="enum")


def spin_uncertain(pulses: int = 1, sigma_rel: float = 0.2, g_mean: float = 1.0, nodes: int = 41,
                   resample: bool = True) -> TaskSpec:
    """Flip a spin with pulses of uncertain coupling; ground-state readout between pulses.

    Outcome +1 is the ground state. There are ``pulses − 1`` readouts.
    """
    layout = HilbertLayout(1, 1)
    rho0 = np.diag([1.0, 0.0]).astype(complex)
    excited = np.array([0.0, 1.0], complex)
    pulse = Gate("spin", (0,))
    segs = [Segment((pulse, Measure("qubit_z"))) for _ in range(pulses - 1)]
    segs.append(Segment((pulse, fidelity_tap(excited))))
    unc = UncertaintySpec("g", g_mean, sigma_rel * g_mean, nodes, resample)
    return TaskSpec("spin_uncertain", layout, rho0, tuple(segs), 1, ("tau",), "final_fidelity",
                    target=excited, uncertainty=unc,
                    params=dict(pulses=pulses, sigma_rel=sigma_rel, g_mean=g_mean, nodes=nodes,
                                resample=resample), mode="enum")


def two_outcome_toy() -> TaskSpec:
    """Rotate a qubit by θ, read it out once; reward 1 on outcome +1 (ground)."""
    layout = HilbertLayout(1, 1)
    rho0 = np.diag([1.0, 0.0]).astype(complex)
    ground = np.array([1.0, 0.0], complex)
    seg = Segment((Gate("spin", (0,)), Measure("qubit_z"), fidelity_tap(ground)))
    return TaskSpec("two_outcome_toy", layout, rho0, (seg,), 1, ("theta",), "final_fidelity",
                    target=ground, mode="enum")


def continuous_toy(separation: float = 1.0, noise_sd: float = 1.0, lattice_points: int = 401,
                   half_width: float = 6.0) -> TaskSpec:
    """Rotate, weakly read out with Gaussian noise, rotate again; reward is the excited population."""
    layout = HilbertLayout(1, 1)
    rho0 = np.diag([1.0, 0.0]).astype(complex)
    excited = np.array([0.0, 1.0], complex)
    meas = ContinuousMeasure((separation, -separation), lattice_points, half_width, noise_sd)
    segs = (Segment((Gate("spin", (0,)), meas)), Segment((Gate("spin", (0,)), fidelity_tap(excited))))
    return TaskSpec("continuous_toy", layout, rho0, segs, 1, ("tau",), "final_fidelity", target=excited,
                    params=dict(separation=separation, noise_sd=noise_sd, lattice_points=lattice_points,
                                half_width=half_width))


CATALOG = {
    "open_loop_jc_prep": open_loop_jc_prep,
    "purification": purification,
    "feedback_prep_thermal": feedback_prep_thermal,
    "stabilize_jc": stabilize_jc,
    "stabilize_snap": stabilize_snap,
    "gkp_prep": gkp_prep,
    "spin_uncertain": spin_uncertain,
    "two_outcome_toy": two_outcome_toy,
    "continuous_toy": continuous_toy,
}

# small instances: cutoff ≤ 8, at most three steps
TINY = {
    "open_loop_jc_prep": dict(target="superposition:1,2", steps=2, cutoff=6),
    "purification": dict(measurements=3, nbar=0.3, cutoff=8, leakage_tol=1e-3),
    "feedback_prep_thermal": dict(target="fock:1", steps=2, nbar=0.3, cutoff=6, leakage_tol=1e-3),
    "stabilize_jc": dict(steps=2, cutoff=5, kappa_t_c=0.02, substeps=2, reward="sum"),
    "stabilize_snap": dict(alpha=1.0, steps=2, n_snap=4, cutoff=8, kappa_t_c=0.005, kappa_t_m=0.005,
                           leakage_tol=1e-3),
    "gkp_prep": dict(delta=0.8, steps=2, n_snap=4, cutoff=8),
    "spin_uncertain": dict(pulses=3, nodes=5),
    "two_outcome_toy": {},
    "continuous_toy": dict(lattice_points=201),
}


# Training settings that worked at the default task sizes; every key can be overridden.
RUN_DEFAULTS = {
    "open_loop_jc_prep": dict(iterations=2000),
    "purification": dict(iterations=1500, learning_rate=0.1, lr_decay_rate=0.05),
    "feedback_prep_thermal": dict(iterations=2000),
    "stabilize_jc": dict(iterations=500, learning_rate=0.05, lr_decay_rate=0.1),
    "stabilize_snap": dict(controller="recurrent", controller_options={"last_bias": 0.1}),
    "gkp_prep": dict(iterations=1000, controller="recurrent",
                     controller_options={"input_mode": "time", "last_bias": 0.1}),
    "spin_uncertain": dict(iterations=300, learning_rate=0.05, lr_decay_rate=0.1),
    "two_outcome_toy": dict(iterations=200),
    "continuous_toy": dict(iterations=200),
}


def task_options(name: str) -> dict:
    if name not in CATALOG:
        raise errors.ConfigError(_unknown(name, CATALOG, "task"))
    sig = inspect.signature(CATALOG[name])
    return {k: p.default for k, p in sig.parameters.items()}


def _unknown(key, options, what) -> str:
    close = difflib.get_close_matches(key, list(options), n=1)
    hint = f"; did you mean '{close[0]}'?" if close else ""
    return f"unknown {what} '{key}'{hint}"


def build_task(name: str, **overrides) -> TaskSpec:
    opts = task_options(name)
    for k in overrides:
        if k not in opts:
            raise errors.ConfigError(_unknown(k, opts, f"option for task '{name}'"))
    return CATALOG[name](**overrides)


def tiny_task(name: str, **overrides) -> TaskSpec:
    kw = dict(TINY[name])
    kw.update(overrides)
    return build_task(name, **kw)


# -- Law–Eberly backward recursion -----------------------------------------------------------

def _phase(z: complex, tol: float = 1e-14) -> complex:
    return z / abs(z) if abs(z) > tol else 1.0


def law_eberly_solve(target, layout: HilbertLayout | None = None, tol: float = 1e-14):
    """Controls ``[(α_j, β_j)]`` (forward order) preparing ``target`` from ``|0, g⟩``.

    ``target`` is a cavity amplitude vector or a Ket on a one-qubit layout with
    the qubit in ``g``. Each step undoes one JC interaction and one qubit drive,
    choosing the angle that empties the top excitation. When the partner
    amplitude vanishes its phase is chosen so that the control comes out real.
    """
    if isinstance(target, qcore.Ket):
        psi = np.asarray(target.amplitudes, complex)
        if layout is None:
            raise errors.ConfigError("layout needed with a Ket target")
    else:
        amps = np.asarray(target, complex)
        if layout is None:
            layout = HilbertLayout(len(amps) + 1, 1)
        psi = layout.cavity_ket(np.pad(amps, (0, layout.fock_cutoff - len(amps))))
    if layout.qubit_slots != 1:
        raise errors.LayoutError("one qubit slot required")
    psi = psi / np.linalg.norm(psi)
    if np.linalg.norm(psi[1::2]) > 1e-10:
        raise errors.StateError("target must have the qubit in g")
    top = _max_level(psi[0::2], tol)
    if top >= layout.fock_cutoff - 1:
        raise errors.TruncationError("target needs one spare Fock level above its support", 0.0)
    from . import gates

    controls = []
    for j in range(top, 0, -1):
        ig, ie = 2 * j, 2 * (j - 1) + 1
        xg, xe = psi[ig], psi[ie]
        half = math.atan2(abs(xg), abs(xe))
        if abs(xg) <= tol:
            beta = 0.0
        else:
            ref = _phase(xe) if abs(xe) > tol else 1j * _phase(xg)
            ph = 1j * _phase(xg) * np.conj(ref)
            # ph = e^{-iφ}; θ = √j|β| = 2·half
            beta = (2 * half / math.sqrt(j)) * np.conj(ph)
        u = gates.jc_interaction(layout, np.real(beta), np.imag(beta))[0]
        psi = u.conj().T @ psi
        yg, ye = psi[2 * (j - 1)], psi[2 * (j - 1) + 1]
        half_a = math.atan2(abs(ye), abs(yg))
        if abs(ye) <= tol:
            alpha = 0.0
        else:
            ref = _phase(yg) if abs(yg) > tol else 1j * _phase(ye)
            ph = 1j * _phase(ye) * np.conj(ref)
            alpha = 2 * half_a * ph
        u = gates.jc_qubit_drive(layout, np.real(alpha), np.imag(alpha))[0]
        psi = u.conj().T @ psi
        controls.append((complex(alpha), complex(beta)))
    controls.reverse()
    return controls


def replay_controls(controls, layout: HilbertLayout) -> np.ndarray:
    """Apply ``[(α, β)]`` to ``|0, g⟩`` and return the final ket."""
    from . import gates
    psi = np.zeros(layout.dim, complex)
    psi[0] = 1.0
    for a, b in controls:
        psi = gates.jc_qubit_drive(layout, a.real, a.imag)[0] @ psi
        psi = gates.jc_interaction(layout, b.real, b.imag)[0] @ psi
    return psi


def law_eberly_theta(controls, complex_controls: bool = True) -> np.ndarray:
    """Table parameters of ``open_loop_jc_prep`` that reproduce ``controls``."""
    rows = []
    for a, b in controls:
        rows.append([a.real, a.imag, b.real, b.imag] if complex_controls else [a.real, b.real])
    return np.asarray(rows, float).ravel()


# -- purification -------------------------------------------------------------------------------

def _wrap(x: float) -> float:
    y = math.remainder(x, 2 * math.pi)
    return math.pi if y == -math.pi else y


def analytic_purification_controls(history) -> tuple[float, float]:
    """(γ, δ) for the next measurement after the outcome indices in ``history`` (0 ↔ +1)."""
    j = len(history) + 1
    n_j = sum(int(k) << i for i, k in enumerate(history))
    return math.pi / 2 ** j, _wrap(-2 * math.pi * n_j / 2 ** j)


def analytic_purification_strategy(measurements: int = 4) -> FunctionController:
    """Frozen controller that splits the surviving residue class in two at every readout."""
    def fn(segment, history):
        return analytic_purification_controls(history)
    ctl = FunctionController(2, fn, name=f"analytic_purification_{measurements}")
    return ctl


# -- spin oracles ----------------------------------------------------------------------------

def spin_fidelity_closed_form(taus, g=1.0, uncertainty: UncertaintySpec | None = None) -> float:
    """Flip probability when pulses ``taus`` are applied until the spin is found excited."""
    taus = np.asarray(taus, float)
    if uncertainty is not None:
        nodes, w = uncertainty.quadrature()
        return float(sum(wi * spin_fidelity_closed_form(taus, gi) for gi, wi in zip(nodes, w)))
    return float(1.0 - np.prod(np.cos(g * taus / 2.0) ** 2))


def spin_fidelity_tree(tau_fn, pulses: int, g=1.0, uncertainty: UncertaintySpec | None = None) -> float:
    """Mean final excited population for an arbitrary history → τ map.

    Readouts are projective, so the state after each one is classical; the
    recursion carries the branch probability.
    """
    if uncertainty is not None:
        nodes, w = uncertainty.quadrature()
        return float(sum(wi * spin_fidelity_tree(tau_fn, pulses, gi) for gi, wi in zip(nodes, w)))

    def visit(hist, excited):
        ang = g * tau_fn(hist) / 2
        p_flip = math.sin(ang) ** 2
        p_e = p_flip if not excited else 1 - p_flip
        if len(hist) == pulses - 1:
            return p_e
        # outcome index 0 ↔ ground
        return (1 - p_e) * visit(hist + (0,), False) + p_e * visit(hist + (1,), True)

    return visit((), False)


# -- grid-state stabilizers ---------------------------------------------------------------------

CONDITION_LIMIT = 1e8


@lru_cache(maxsize=16)
def _displacement_big(alpha: complex, size: int) -> np.ndarray:
    a = qcore.annihilation(size)
    return scipy.linalg.expm(alpha * a.conj().T - np.conj(alpha) * a)


def gkp_stabilizer_operator(delta: float, cutoff: int, margin: int = 60) -> np.ndarray:
    """``(S_x + S_p)/2`` restricted to the first ``cutoff`` Fock levels.

    ``E D E^{-1}`` only needs displacement matrix elements inside the cutoff;
    they are taken from a larger truncation so the edge is accurate.
    """
    amp = math.exp(delta ** 2 * (cutoff - 1))
    if amp * np.finfo(float).eps > 1.0 / CONDITION_LIMIT:
        ok = int(math.log(1.0 / (CONDITION_LIMIT * np.finfo(float).eps)) / delta ** 2)
        raise errors.ConditioningError(
            f"envelope inverse amplifies by {amp:.3g} at cutoff {cutoff}; use cutoff ≤ {ok} for Δ={delta}")
    size = cutoff + margin
    env = np.exp(-delta ** 2 * np.arange(cutoff))
    out = np.zeros((cutoff, cutoff), complex)
    for alpha in (math.sqrt(math.pi), 1j * math.sqrt(math.pi)):
        d = _displacement_big(alpha, size)[:cutoff, :cutoff]
        out += env[:, None] * d / env[None, :]
    return out / 2


def gkp_stabilizer_mean(rho, delta: float) -> float:
    rho = qcore.as_matrix(rho)
    op = gkp_stabilizer_operator(delta, rho.shape[0])
    herm = 0.5 * (op + op.conj().T)
    return float(np.real(np.trace(rho @ herm)))


# -- decay oracle ----------------------------------------------------------------------------------

def bare_decay_fidelity(task: TaskSpec) -> float:
    """Final fidelity of an uncontrolled Fock target under the task's total decay."""
    n = _max_level(np.asarray(task.target)[0::2] if task.layout.qubit_slots else np.asarray(task.target))
    p = task.params
    total = p["steps"] * (p["kappa_t_m"] + p.get("substeps", 1) * p.get("kappa_t_c", 0.0))
    return math.exp(-n * total)


# -- exact enumeration -------------------------------------------------------------------------------

def exact_enumeration_return(task: TaskSpec, controller, theta, grad: bool = True):
    """Exact mean return and its gradient by summing over every outcome branch."""
    from .graddiff.engine import rollout
    res = rollout(task, controller, theta, mode="enum", grad=grad)
    return res.mean_return, res.grad
