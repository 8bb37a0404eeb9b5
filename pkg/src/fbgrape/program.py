"""Program model shared by tasks, the rollout engine and the adjoint backend.

A task is a list of segments. The controller is queried once at the start of
each segment (with the outcome history so far) and the segment's elements are
applied in order. Elements read their controls from that segment's control
vector by index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import errors, gates
from .channels import DissipationSpec, continuous_kraus_diag, lindblad_rk4
from .graddiff import tape as ad
from .qcore import HilbertLayout


def _cols(F, idx):
    return [ad.getitem(F, (slice(None), i)) for i in idx]


def _vals(F, idx):
    F = np.asarray(F)
    return [F[:, i] for i in idx]


# -- gates ------------------------------------------------------------------------

@dataclass(frozen=True)
class Gate:
    """Parametrized unitary.

    kind: ``qubit_drive`` (a[, b]), ``jc`` (βr[, βi]), ``snap_block``
    (αr, αi, φ_0..), ``spin`` (τ, coupling from the row constant ``g``).
    """

    kind: str
    controls: tuple

    def build(self, layout: HilbertLayout, F, consts: dict):
        c = _cols(F, self.controls)
        return self._dispatch(layout, c, consts, jac=False)

    def jac(self, layout: HilbertLayout, F, consts: dict):
        c = _vals(F, self.controls)
        return self._dispatch(layout, c, consts, jac=True)

    def _dispatch(self, layout, c, consts, jac):
        k = self.kind
        if k == "qubit_drive":
            b = c[1] if len(c) > 1 else 0.0 * ad.value(c[0])
            fn = gates.jc_qubit_drive_jac if jac else gates.jc_qubit_drive
            out = fn(layout, c[0], b)
            return (out[0], out[1][:, : len(c)]) if jac else out
        if k == "jc":
            b = c[1] if len(c) > 1 else 0.0 * ad.value(c[0])
            fn = gates.jc_interaction_jac if jac else gates.jc_interaction
            out = fn(layout, c[0], b)
            return (out[0], out[1][:, : len(c)]) if jac else out
        if k == "snap_block":
            phis = np.stack(c[2:], axis=-1) if jac else ad.stack(c[2:], axis=-1)
            fn = gates.snap_block_jac if jac else gates.snap_block
            return fn(layout, c[0], c[1], phis)
        if k == "spin":
            g = consts.get("g", 1.0)
            fn = gates.spin_rotation_jac if jac else gates.spin_rotation
            return fn(g, c[0], layout)
        raise errors.ConfigError(f"unknown gate kind '{k}'")


# -- measurements -----------------------------------------------------------------

@dataclass(frozen=True)
class Measure:
    """Discrete diagonal measurement with labels (+1, -1).

    kind: ``dispersive`` (controls γ, δ), ``parity`` (fixed projective),
    ``qubit_z`` (fixed projective readout, +1 ↔ g).
    """

    kind: str
    controls: tuple = ()
    labels: tuple = (+1, -1)

    @property
    def n_outcomes(self) -> int:
        return len(self.labels)

    def diagonals(self, layout: HilbertLayout, F, consts: dict):
        if self.kind == "dispersive":
            g, d = _cols(F, self.controls)
            return gates.dispersive_diagonals(layout, g, d)
        rows = ad.value(F).shape[0] if F is not None else 1
        return np.broadcast_to(self._fixed(layout), (rows,) + self._fixed(layout).shape)

    def jac(self, layout: HilbertLayout, F, consts: dict):
        if self.kind == "dispersive":
            g, d = _vals(F, self.controls)
            return gates.dispersive_diagonals_jac(layout, g, d)
        rows = np.asarray(F).shape[0] if F is not None else 1
        fixed = np.broadcast_to(self._fixed(layout), (rows,) + self._fixed(layout).shape)
        return fixed, np.zeros((rows, 0) + fixed.shape[1:])

    def _fixed(self, layout):
        if self.kind == "parity":
            return gates.parity_diagonals(layout)
        if self.kind == "qubit_z":
            return gates.qubit_z_diagonals(layout)
        raise errors.ConfigError(f"unknown measurement kind '{self.kind}'")


@dataclass(frozen=True)
class ContinuousMeasure:
    """Qubit readout ``m = σ + ξ`` sampled by the reparametrized inverse CDF."""

    sigma: tuple
    lattice_points: int = 401
    half_width: float = 6.0
    noise_sd: float = 1.0

    @property
    def lattice(self) -> np.ndarray:
        return np.linspace(-self.half_width, self.half_width, self.lattice_points)

    def kraus(self, m):
        return continuous_kraus_diag(m, np.asarray(self.sigma, float), self.noise_sd)


@dataclass(frozen=True)
class Dissipate:
    kappa_t: float
    rk4_steps: int | None = None

    def apply(self, rho, layout: HilbertLayout, adjoint: bool = False):
        return lindblad_rk4(rho, DissipationSpec(1.0, self.kappa_t, self.rk4_steps), layout, adjoint)


# -- rewards ----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RewardTap:
    """Reward collected at this point of the program.

    ``kind``: ``fidelity`` (pure target), ``purity``, ``observable`` (Hermitian
    operator expectation, used for the grid-state stabilizers).
    """

    kind: str
    weight: float = 1.0
    operator: np.ndarray | None = field(default=None, repr=False)

    def value(self, rho):
        if self.kind == "purity":
            r = ad.real(ad.sum_(rho * ad.swap_last(rho), axis=(-2, -1)))
        else:
            r = ad.real(ad.sum_(rho * self.operator.T, axis=(-2, -1)))
        return r * self.weight if self.weight != 1.0 else r

    def grad(self, rho: np.ndarray) -> np.ndarray:
        if self.kind == "purity":
            return 2.0 * self.weight * rho
        return np.broadcast_to(self.weight * self.operator, rho.shape)


def fidelity_tap(target_ket: np.ndarray, weight: float = 1.0) -> RewardTap:
    return RewardTap("fidelity", weight, np.outer(target_ket, target_ket.conj()))


def observable_tap(op: np.ndarray, weight: float = 1.0) -> RewardTap:
    herm = 0.5 * (op + op.conj().T)
    return RewardTap("observable", weight, herm)


# -- task description ---------------------------------------------------------------

@dataclass(frozen=True)
class Segment:
    elements: tuple
    uses_controls: bool = True


@dataclass(frozen=True)
class UncertaintySpec:
    """Gaussian model constant, averaged by Gauss-Hermite quadrature or resampled per trajectory."""

    name: str
    mean: float
    std: float
    nodes: int = 41
    resample: bool = True

    def __post_init__(self):
        if self.std < 0:
            raise errors.ConfigError("uncertainty std must be ≥ 0")

    def quadrature(self):
        if self.std == 0:
            return np.array([self.mean]), np.array([1.0])
        x, w = np.polynomial.hermite_e.hermegauss(self.nodes)
        return self.mean + self.std * x, w / w.sum()


@dataclass(frozen=True, eq=False)
class TaskSpec:
    name: str
    layout: HilbertLayout
    rho0: np.ndarray = field(repr=False)
    segments: tuple
    arity: int
    control_names: tuple
    reward_mode: str
    target: np.ndarray | None = field(default=None, repr=False)
    uncertainty: UncertaintySpec | None = None
    params: dict = field(default_factory=dict)
    leakage: float = 0.0
    n_outcomes: int = 2
    labels: tuple = (+1, -1)
    default_batch: int = 32
    mode: str = "mc"

    @property
    def n_segments(self) -> int:
        return len(self.segments)

    def segment_depths(self) -> list[int]:
        """Number of discrete measurements preceding each segment."""
        depths, h = [], 0
        for seg in self.segments:
            depths.append(h)
            h += sum(isinstance(e, Measure) for e in seg.elements)
        return depths

    @property
    def n_measurements(self) -> int:
        return sum(isinstance(e, (Measure, ContinuousMeasure)) for s in self.segments for e in s.elements)

    @property
    def has_continuous(self) -> bool:
        return any(isinstance(e, ContinuousMeasure) for s in self.segments for e in s.elements)

    def branch_count(self) -> int:
        k = 1
        for s in self.segments:
            for e in s.elements:
                if isinstance(e, Measure):
                    k *= e.n_outcomes
        if self.uncertainty is not None:
            k *= len(self.uncertainty.quadrature()[0])
        return k

    def initial_consts(self, rows: int) -> dict:
        if self.uncertainty is None:
            return {}
        return {self.uncertainty.name: np.full(rows, self.uncertainty.mean)}


def label_values(labels) -> np.ndarray:
    return np.asarray(labels, dtype=float)


def pi_multiple(x: float) -> str:
    return f"{x / math.pi:.4f}π"
