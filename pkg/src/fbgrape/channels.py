"""Trajectory-level dynamics: unitaries, cavity decay, discrete and continuous measurements."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from . import errors
from .graddiff import tape as ad
from .qcore import HilbertLayout, annihilation, dag

PROB_FLOOR = 1e-12


# -- measurement families --------------------------------------------------------------

@dataclass(frozen=True)
class MeasurementFamily:
    """Indexed measurement operators.

    Discrete families store full operators ``ops[k]`` (and ``diagonals`` when they
    are diagonal). Continuous families describe ``m = σ + ξ`` readout with
    Gaussian ξ on a uniform lattice; ``sigma`` assigns an eigenvalue to every
    basis state.
    """

    kind: str
    labels: tuple = ()
    ops: np.ndarray | None = None
    diagonals: np.ndarray | None = None
    lattice: np.ndarray | None = None
    sigma: np.ndarray | None = None
    noise_sd: float = 1.0
    completeness_error: float = field(default=0.0, compare=False)

    @classmethod
    def from_operators(cls, labels: Sequence, ops: np.ndarray, tol: float = 1e-10):
        ops = np.asarray(ops, dtype=complex)
        err = _completeness(np.einsum("kji,kjl->il", ops.conj(), ops))
        if err > tol:
            raise errors.ContractError(f"measurement family incomplete (deviation {err:.3g})")
        return cls("discrete", tuple(labels), ops, None, completeness_error=err)

    @classmethod
    def from_diagonals(cls, labels: Sequence, diagonals: np.ndarray, tol: float = 1e-10):
        diagonals = np.asarray(diagonals, dtype=complex)
        err = float(np.max(np.abs(np.sum(np.abs(diagonals) ** 2, axis=0) - 1.0)))
        if err > tol:
            raise errors.ContractError(f"measurement family incomplete (deviation {err:.3g})")
        ops = np.stack([np.diag(d) for d in diagonals])
        return cls("discrete", tuple(labels), ops, diagonals, completeness_error=err)

    @classmethod
    def continuous(cls, sigma: np.ndarray, lattice: np.ndarray | None = None,
                   noise_sd: float = 1.0, tol: float = 1e-4):
        if lattice is None:
            lattice = default_lattice()
        lattice = np.asarray(lattice, float)
        sigma = np.asarray(sigma, float)
        step = lattice[1] - lattice[0]
        dens = gaussian_density(lattice[:, None] - sigma[None, :], noise_sd)
        err = float(np.max(np.abs(dens.sum(axis=0) * step - 1.0)))
        if err > tol:
            raise errors.ContractError(f"continuous family incomplete on lattice (deviation {err:.3g})")
        return cls("continuous", (), None, None, lattice, sigma, noise_sd, completeness_error=err)

    def operator(self, m) -> np.ndarray:
        if self.kind == "discrete":
            return self.ops[self.labels.index(m)]
        return np.diag(np.sqrt(gaussian_density(m - self.sigma, self.noise_sd))).astype(complex)

    def probabilities(self, rho: np.ndarray) -> np.ndarray:
        if self.diagonals is not None:
            return np.real(np.abs(self.diagonals) ** 2 @ np.real(np.diagonal(rho)))
        return np.real(np.einsum("kji,kjl,li->k", self.ops.conj(), self.ops, rho))


def _completeness(total: np.ndarray) -> float:
    return float(np.max(np.abs(total - np.eye(total.shape[0]))))


def default_lattice(points: int = 401, half_width: float = 6.0) -> np.ndarray:
    return np.linspace(-half_width, half_width, points)


def gaussian_density(x, sd: float = 1.0):
    return np.exp(-0.5 * (x / sd) ** 2) / (math.sqrt(2 * math.pi) * sd)


@dataclass(frozen=True)
class MeasurementEvent:
    outcome: object
    index: int
    probability: float
    log_prob: float
    post_state: np.ndarray


# -- unitaries --------------------------------------------------------------------

def apply_unitary(rho, u, check: bool = True, tol: float = 1e-8):
    """``U ρ U†`` for a density matrix, ``U ψ`` for a ket (1-D input)."""
    uv = np.asarray(ad.value(u))
    if check:
        dev = np.max(np.abs(dag(uv) @ uv - np.eye(uv.shape[-1])))
        if dev > tol:
            raise errors.ContractError(f"operator not unitary (deviation {dev:.3g})")
    if np.ndim(ad.value(rho)) == 1:
        return u @ rho
    return ad.matmul(ad.matmul(u, rho), ad.dag(u))


# -- dissipation ------------------------------------------------------------------

def rk4_substeps(kappa_t: float, cutoff: int) -> int:
    """Substep count: κ·dt ≤ 0.05 and κ·dt·cutoff ≤ 0.5 (keeps RK4 well inside its stability region)."""
    if kappa_t <= 0:
        return 1
    h = min(0.05, 0.5 / max(cutoff, 1))
    return max(1, int(math.ceil(kappa_t / h - 1e-12)))


@dataclass(frozen=True)
class DissipationSpec:
    """Zero-temperature cavity decay for a dimensionless duration ``kappa * duration``."""

    decay_rate: float
    duration: float
    rk4_steps: int | None = None

    def __post_init__(self):
        if self.decay_rate * self.duration < 0:
            raise errors.ConfigError("κt must be non-negative")
        if self.rk4_steps is not None and self.rk4_steps < 1:
            raise errors.ConfigError("rk4_steps must be ≥ 1")

    @property
    def kappa_t(self) -> float:
        return self.decay_rate * self.duration

    def steps(self, cutoff: int) -> int:
        return self.rk4_steps if self.rk4_steps is not None else rk4_substeps(self.kappa_t, cutoff)


@lru_cache(maxsize=None)
def _decay_ops(layout: HilbertLayout):
    a = layout.embed_cavity(annihilation(layout.fock_cutoff))
    return a, a.conj().T.copy(), a.conj().T @ a


def lindblad_generator(rho, layout: HilbertLayout, adjoint: bool = False):
    """κ=1 generator ``a ρ a† − ½{a†a, ρ}`` (or its Hilbert-Schmidt adjoint)."""
    a, adag, n = _decay_ops(layout)
    if adjoint:
        jump = ad.matmul(ad.matmul(adag, rho), a)
    else:
        jump = ad.matmul(ad.matmul(a, rho), adag)
    return jump - 0.5 * (ad.matmul(n, rho) + ad.matmul(rho, n))


def _rk4_loop(rho, layout: HilbertLayout, kappa_t: float, steps: int, adjoint: bool):
    h = kappa_t / steps
    for _ in range(steps):
        k1 = lindblad_generator(rho, layout, adjoint)
        k2 = lindblad_generator(rho + (0.5 * h) * k1, layout, adjoint)
        k3 = lindblad_generator(rho + (0.5 * h) * k2, layout, adjoint)
        k4 = lindblad_generator(rho + h * k3, layout, adjoint)
        rho = rho + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return rho


SUPEROP_MAX_DIM = 64


@lru_cache(maxsize=64)
def rk4_superoperator(layout: HilbertLayout, kappa_t: float, steps: int) -> np.ndarray:
    """Matrix of the full RK4 map acting on row-major ``vec(ρ)``."""
    d = layout.dim
    basis = np.eye(d * d, dtype=complex).reshape(d * d, d, d)
    out = _rk4_loop(basis, layout, kappa_t, steps, adjoint=False)
    return out.reshape(d * d, d * d)


def lindblad_rk4(rho, spec: DissipationSpec, layout: HilbertLayout, adjoint: bool = False):
    """Evolve ``ρ̇ = κ(a ρ a† − ½{a†a, ρ})`` with fixed-step RK4.

    Batched and tape-aware. Small spaces use the cached superoperator of the
    identical RK4 map; ``adjoint=True`` applies the Hilbert-Schmidt adjoint map.
    """
    kt = spec.kappa_t
    if kt == 0:
        return rho
    steps = spec.steps(layout.fock_cutoff)
    d = layout.dim
    if d <= SUPEROP_MAX_DIM:
        sup = rk4_superoperator(layout, kt, steps)
        if adjoint:
            sup = sup.conj().T
        shape = ad.value(rho).shape
        flat = ad.reshape(rho, shape[:-2] + (d * d,))
        return ad.reshape(ad.matmul(flat, sup), shape)
    return _rk4_loop(rho, layout, kt, steps, adjoint)


# -- discrete measurement ----------------------------------------------------------

def select_outcome(probs: np.ndarray, u: float, floor: float = PROB_FLOOR) -> int:
    """Inverse-CDF over the declared label order; boundary ties go to the lower index.

    Outcomes with probability below ``floor`` are removed from the CDF.
    """
    probs = np.asarray(probs, float)
    allowed = probs >= floor
    if not allowed.any():
        raise errors.ContractError("all outcome probabilities below floor")
    if np.any((probs > 0) & ~allowed):
        warnings.warn("outcome with probability below floor excluded from sampling", RuntimeWarning,
                      stacklevel=3)
    p = np.where(allowed, probs, 0.0)
    cdf = np.cumsum(p) / p.sum()
    k = int(np.searchsorted(cdf, u, side="left"))
    idx = np.flatnonzero(allowed)
    # zero-width (excluded) outcomes can only be hit at the ends of the CDF
    if k >= len(p):
        k = int(idx[-1])
    elif not allowed[k]:
        k = int(idx[idx >= k][0]) if np.any(idx >= k) else int(idx[-1])
    return k


def measure_discrete(rho: np.ndarray, family: MeasurementFamily, rng_draw: float,
                     floor: float = PROB_FLOOR) -> MeasurementEvent:
    if family.kind != "discrete":
        raise errors.ContractError("family is not discrete")
    probs = family.probabilities(rho)
    k = select_outcome(probs, rng_draw, floor)
    op = family.ops[k]
    post = op @ rho @ dag(op) / probs[k]
    return MeasurementEvent(family.labels[k], k, float(probs[k]), math.log(probs[k]), post)


# -- continuous measurement --------------------------------------------------------

def reparam_sample(rho_diag, sigma: np.ndarray, lattice: np.ndarray, noise_sd: float, z):
    """Differentiable inverse-CDF draw of ``m = σ + ξ`` for each row.

    ``rho_diag`` holds the populations ρ_ii, shape (B, d) (array or node); ``z``
    has shape (B,). The CDF lives on cell edges ``m_n ± Δ/2`` and is inverted
    piecewise linearly. Returns ``(m, covered_mass)``.
    """
    step = float(lattice[1] - lattice[0])
    dens = gaussian_density(lattice[:, None] - sigma[None, :], noise_sd)  # (L, d)
    p = ad.matmul(rho_diag, dens.T.astype(complex)) if np.iscomplexobj(ad.value(rho_diag)) \
        else ad.matmul(rho_diag, dens.T)
    p = ad.real(p) if np.iscomplexobj(ad.value(p)) else p
    cells = p * step
    rows = ad.value(cells).shape[0]
    cdf_raw = ad.cumsum(ad.concatenate([np.zeros((rows, 1)), cells], axis=-1), axis=-1)
    total = ad.getitem(cdf_raw, (slice(None), -1))
    cdf = cdf_raw / ad.reshape(total, (-1, 1))
    covered = np.asarray(ad.value(total))
    z = np.asarray(z, float)
    if np.any(covered < 1 - 1e-6):
        warnings.warn(f"lattice covers only {covered.min():.8f} of the outcome density",
                      RuntimeWarning, stacklevel=2)
    if np.any((z < 0) | (z > 1)):
        warnings.warn("z outside [0, 1] clamped to the lattice edge", RuntimeWarning, stacklevel=2)
        z = np.clip(z, 0.0, 1.0)
    cv = ad.value(cdf)
    seg = np.array([np.searchsorted(cv[b], z[b], side="left") for b in range(rows)]) - 1
    seg = np.clip(seg, 0, len(lattice) - 1)
    r = np.arange(rows)
    lo = ad.getitem(cdf, (r, seg))
    hi = ad.getitem(cdf, (r, seg + 1))
    width = hi - lo
    safe = ad.where(ad.value(width) > 0, width, 1.0)
    edges = lattice[0] - 0.5 * step + step * seg
    m = edges + step * ((z - lo) / safe)
    return m, covered


def continuous_kraus_diag(m, sigma: np.ndarray, noise_sd: float):
    """``√q(m − σ_i)`` for each basis state, shape (B, d)."""
    x = ad.reshape(m, (-1, 1)) - sigma[None, :]
    return ad.exp(-(x * x) * (0.25 / noise_sd ** 2)) * (2 * math.pi * noise_sd ** 2) ** -0.25


def measure_continuous_reparam(rho: np.ndarray, family: MeasurementFamily, z: float) -> MeasurementEvent:
    if family.kind != "continuous":
        raise errors.ContractError("family is not continuous")
    diag = np.real(np.diagonal(rho))[None, :]
    m, _ = reparam_sample(diag, family.sigma, family.lattice, family.noise_sd, np.array([z]))
    m = float(np.asarray(m)[0])
    kd = continuous_kraus_diag(np.array([m]), family.sigma, family.noise_sd)[0]
    post = kd[:, None] * rho * kd[None, :]
    dens = float(np.real(np.trace(post)))
    return MeasurementEvent(m, -1, dens, math.log(dens), post / dens)


# -- single-trajectory plans -----------------------------------------------------

@dataclass(frozen=True)
class UnitaryStep:
    unitary: np.ndarray


@dataclass(frozen=True)
class DissipationStep:
    spec: DissipationSpec
    layout: HilbertLayout


@dataclass(frozen=True)
class MeasurementStep:
    family: MeasurementFamily
    draw: float


@dataclass(frozen=True)
class RewardTapStep:
    reward: Callable[[np.ndarray], float]


def trajectory_step(rho: np.ndarray, plan: Sequence):
    """Apply plan elements in order; returns ``(ρ', events, rewards)``."""
    events, rewards = [], []
    for el in plan:
        if isinstance(el, UnitaryStep):
            rho = apply_unitary(rho, el.unitary)
        elif isinstance(el, DissipationStep):
            rho = lindblad_rk4(rho, el.spec, el.layout)
        elif isinstance(el, MeasurementStep):
            if el.family.kind == "discrete":
                ev = measure_discrete(rho, el.family, el.draw)
            else:
                ev = measure_continuous_reparam(rho, el.family, el.draw)
            events.append(ev)
            rho = ev.post_state
        elif isinstance(el, RewardTapStep):
            rewards.append(float(el.reward(rho)))
        else:
            raise errors.ContractError(f"unknown plan element {el!r}")
    return rho, events, rewards
