"""Dense states and operators on a truncated cavity ⊗ qubit(s) Hilbert space.

Basis ordering: cavity Fock index is the slow index, qubit slots follow, so the
flat index of ``|n, q_0, q_1⟩`` is ``n * 2**slots + q_0 * 2**(slots-1) + ...``.
Qubit level 0 is ``g`` and 1 is ``e``; ``σ+ = |e⟩⟨g|`` and ``σz = |e⟩⟨e| - |g⟩⟨g|``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from . import errors


@dataclass(frozen=True)
class HilbertLayout:
    """Cavity truncated at ``fock_cutoff`` levels times ``qubit_slots`` qubits.

    ``fock_cutoff == 1`` with at least one qubit is a bare qubit register.
    """

    fock_cutoff: int
    qubit_slots: int = 0

    def __post_init__(self):
        if self.qubit_slots not in (0, 1, 2):
            raise errors.LayoutError(f"qubit_slots must be 0, 1 or 2, got {self.qubit_slots}")
        if self.fock_cutoff < 1 or (self.fock_cutoff < 2 and self.qubit_slots == 0):
            raise errors.LayoutError(f"fock cutoff {self.fock_cutoff} too small")

    @property
    def qdim(self) -> int:
        return 2 ** self.qubit_slots

    @property
    def dim(self) -> int:
        return self.fock_cutoff * self.qdim

    def photon_numbers(self) -> np.ndarray:
        """Cavity excitation number of every basis state."""
        return np.repeat(np.arange(self.fock_cutoff), self.qdim).astype(float)

    def qubit_levels(self, slot: int = 0) -> np.ndarray:
        idx = np.arange(self.dim)
        return (idx >> (self.qubit_slots - 1 - slot)) & 1

    def embed_cavity(self, op: np.ndarray) -> np.ndarray:
        return np.kron(op, np.eye(self.qdim))

    def embed_qubit(self, op2: np.ndarray, slot: int = 0) -> np.ndarray:
        mats = [np.eye(self.fock_cutoff)]
        for s in range(self.qubit_slots):
            mats.append(op2 if s == slot else np.eye(2))
        out = mats[0]
        for m in mats[1:]:
            out = np.kron(out, m)
        return out

    def cavity_ket(self, amps: np.ndarray) -> np.ndarray:
        """Lift cavity amplitudes to the full space with all qubits in ``g``."""
        ground = np.zeros(self.qdim)
        ground[0] = 1.0
        return np.kron(amps, ground)


SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[-1, 0], [0, 1]], dtype=complex)
SIGMA_P = np.array([[0, 0], [1, 0]], dtype=complex)


@dataclass(frozen=True)
class Operators:
    layout: HilbertLayout
    a: np.ndarray | None
    adag: np.ndarray | None
    n: np.ndarray | None
    identity: np.ndarray
    sp: tuple = ()
    sm: tuple = ()
    sx: tuple = ()
    sy: tuple = ()
    sz: tuple = ()


def annihilation(cutoff: int) -> np.ndarray:
    return np.diag(np.sqrt(np.arange(1, cutoff)), 1).astype(complex)


def build_operators(layout: HilbertLayout) -> Operators:
    """Ladder, number and Pauli operators embedded on the full space."""
    if layout.fock_cutoff < 2 and layout.qubit_slots == 0:
        raise errors.LayoutError("cutoff < 2")
    a = adag = n = None
    if layout.fock_cutoff >= 2:
        a0 = annihilation(layout.fock_cutoff)
        a = layout.embed_cavity(a0)
        adag = a.conj().T.copy()
        n = layout.embed_cavity(np.diag(np.arange(layout.fock_cutoff)).astype(complex))
    slots = range(layout.qubit_slots)
    return Operators(
        layout=layout, a=a, adag=adag, n=n,
        identity=np.eye(layout.dim, dtype=complex),
        sp=tuple(layout.embed_qubit(SIGMA_P, s) for s in slots),
        sm=tuple(layout.embed_qubit(SIGMA_P.T.copy(), s) for s in slots),
        sx=tuple(layout.embed_qubit(SIGMA_X, s) for s in slots),
        sy=tuple(layout.embed_qubit(SIGMA_Y, s) for s in slots),
        sz=tuple(layout.embed_qubit(SIGMA_Z, s) for s in slots),
    )


def dag(m: np.ndarray) -> np.ndarray:
    return np.conj(np.swapaxes(m, -1, -2))


# -- state containers -----------------------------------------------------------

@dataclass(frozen=True)
class Ket:
    amplitudes: np.ndarray
    leakage: float = 0.0

    def __post_init__(self):
        norm = np.linalg.norm(self.amplitudes)
        if abs(norm - 1.0) > 1e-10:
            raise errors.StateError(f"ket norm {norm} deviates from 1")

    @property
    def dim(self) -> int:
        return self.amplitudes.shape[0]

    def dm(self) -> np.ndarray:
        v = self.amplitudes
        return np.outer(v, v.conj())


@dataclass(frozen=True)
class DensityMatrix:
    matrix: np.ndarray
    leakage: float = 0.0
    check_positive: bool = field(default=True, repr=False)

    def __post_init__(self):
        check_density(self.matrix, positive=self.check_positive)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


def check_density(rho: np.ndarray, positive: bool = True, trace_tol: float = 1e-8) -> None:
    herm = np.max(np.abs(rho - dag(rho))) if rho.size else 0.0
    if herm > 1e-10:
        raise errors.StateError(f"density matrix not Hermitian (max deviation {herm:.3g})")
    tr = np.trace(rho).real
    if abs(tr - 1.0) > trace_tol:
        raise errors.StateError(f"density matrix trace {tr} deviates from 1")
    if positive:
        lo = np.linalg.eigvalsh(rho).min()
        if lo < -1e-8:
            raise errors.StateError(f"density matrix has negative eigenvalue {lo:.3g}")


def as_matrix(state) -> np.ndarray:
    if isinstance(state, Ket):
        return state.dm()
    if isinstance(state, DensityMatrix):
        return state.matrix
    arr = np.asarray(state)
    if arr.ndim == 1:
        return np.outer(arr, arr.conj())
    return arr


# -- state construction -----------------------------------------------------------

def coherent_amplitudes(alpha: complex, size: int) -> np.ndarray:
    n = np.arange(size)
    mag = abs(alpha)
    if mag == 0:
        out = np.zeros(size, dtype=complex)
        out[0] = 1.0
        return out
    logmag = n * math.log(mag) - 0.5 * gammaln(n + 1) - 0.5 * mag ** 2
    return np.exp(logmag) * np.exp(1j * n * np.angle(alpha))


def hermite_functions(nmax: int, x: np.ndarray) -> np.ndarray:
    """Normalized oscillator eigenfunctions ψ_0..ψ_{nmax-1} at points ``x``."""
    x = np.asarray(x, dtype=float)
    out = np.zeros((nmax, x.size))
    out[0] = math.pi ** -0.25 * np.exp(-0.5 * x ** 2)
    if nmax > 1:
        out[1] = math.sqrt(2.0) * x * out[0]
    for k in range(1, nmax - 1):
        out[k + 1] = math.sqrt(2.0 / (k + 1)) * x * out[k] - math.sqrt(k / (k + 1)) * out[k - 1]
    return out


def _extended_size(cutoff: int, mean_n: float) -> int:
    return int(max(2 * cutoff, cutoff + 12 * mean_n + 12 * math.sqrt(mean_n + 1) + 60))


def gkp_amplitudes(delta: float, size: int, tail_tol: float = 1e-8) -> np.ndarray:
    """Unnormalized finite-energy grid state ``E_Δ Σ_j D(j√π)|0_x⟩`` in the Fock basis.

    ``D(j√π)`` moves the position eigenstate to ``x = j√(2π)`` without a phase,
    so the coefficients are ``e^{-Δ² n} Σ_j ψ_n(j√(2π))``.
    """
    # ψ_n(x) is negligible beyond the classical turning point by a margin;
    # the envelope kills every peak with |x| above that.
    xmax = math.sqrt(2 * size + 1) + math.sqrt(2 * abs(math.log(tail_tol))) + 2
    jmax = int(math.ceil(xmax / math.sqrt(2 * math.pi)))
    xs = np.arange(-jmax, jmax + 1) * math.sqrt(2 * math.pi)
    psi = hermite_functions(size, xs)
    return np.exp(-delta ** 2 * np.arange(size)) * psi.sum(axis=1)


def cavity_amplitudes(kind: str, size: int, **p) -> np.ndarray:
    if kind == "fock":
        n = int(p["n"])
        if n >= size:
            raise errors.TruncationError(f"Fock level {n} not representable at size {size}", 1.0)
        v = np.zeros(size, dtype=complex)
        v[n] = 1.0
        return v
    if kind == "ground":
        return cavity_amplitudes("fock", size, n=0)
    if kind == "superposition":
        levels = list(p["levels"])
        weights = np.asarray(p.get("weights", np.ones(len(levels))), dtype=complex)
        v = np.zeros(size, dtype=complex)
        for lvl, w in zip(levels, weights):
            if lvl >= size:
                raise errors.TruncationError(f"Fock level {lvl} not representable", 1.0)
            v[lvl] += w
        return v
    alpha = complex(p.get("alpha", 0.0))
    if kind == "coherent":
        return coherent_amplitudes(alpha, size)
    if kind == "kitten2":
        return coherent_amplitudes(alpha, size) + coherent_amplitudes(-alpha, size)
    if kind == "kitten4":
        return sum(coherent_amplitudes(alpha * ph, size) for ph in (1, 1j, -1, -1j))
    if kind == "gkp":
        return gkp_amplitudes(float(p["delta"]), size).astype(complex)
    raise errors.ConfigError(f"unknown state kind '{kind}'")


def _mean_photons_hint(kind: str, p: dict) -> float:
    if kind in ("coherent", "kitten2", "kitten4"):
        return abs(complex(p.get("alpha", 0.0))) ** 2
    if kind == "gkp":
        return 1.0 / (2 * float(p["delta"]) ** 2)
    if kind == "thermal":
        return float(p["nbar"])
    return float(max(p.get("levels", [p.get("n", 0)])))


def build_state(kind: str, layout: HilbertLayout, leakage_tol: float = 1e-6, **params):
    """Construct a named state; pure kinds give a :class:`Ket`, ``thermal`` a :class:`DensityMatrix`.

    The cavity part is built on an enlarged basis first so that the norm lost to
    the cutoff can be measured; it must stay below ``leakage_tol``.
    Qubit slots start in ``g``.
    """
    cutoff = layout.fock_cutoff
    if kind == "thermal":
        nbar = float(params["nbar"])
        if nbar < 0:
            raise errors.ConfigError("nbar must be non-negative")
        if nbar == 0:
            probs = np.zeros(cutoff)
            probs[0] = 1.0
            leak = 0.0
        else:
            ratio = nbar / (nbar + 1.0)
            probs = ratio ** np.arange(cutoff) / (nbar + 1.0)
            leak = ratio ** cutoff
        if leak > leakage_tol:
            raise errors.TruncationError(
                f"thermal state nbar={nbar} loses norm {leak:.3g} at cutoff {cutoff}", leak)
        probs = probs / probs.sum()
        ground = np.zeros(layout.qdim)
        ground[0] = 1.0
        rho = np.kron(np.diag(probs), np.diag(ground)).astype(complex)
        return DensityMatrix(rho, leakage=leak)
    big = _extended_size(cutoff, _mean_photons_hint(kind, params))
    amps = cavity_amplitudes(kind, big, **params)
    total = np.vdot(amps, amps).real
    if total <= 0:
        raise errors.StateError(f"state '{kind}' has zero norm")
    leak = float(np.vdot(amps[cutoff:], amps[cutoff:]).real / total)
    if leak > leakage_tol:
        raise errors.TruncationError(
            f"state '{kind}' loses norm {leak:.3g} at cutoff {cutoff} (tolerance {leakage_tol:g})", leak)
    amps = amps[:cutoff]
    amps = amps / np.linalg.norm(amps)
    return Ket(layout.cavity_ket(amps), leakage=leak)


def state_from_spec(spec, layout: HilbertLayout, leakage_tol: float = 1e-6):
    """Parse compact specs such as ``"fock:2"``, ``"superposition:1,3"``, ``"kitten4:3"``,
    ``"thermal:1"``, ``"gkp:0.5"``, ``"ground"``."""
    if not isinstance(spec, str):
        return spec
    kind, _, arg = spec.partition(":")
    kind = kind.strip()
    if kind == "ground":
        return build_state("ground", layout, leakage_tol)
    if kind == "fock":
        return build_state("fock", layout, leakage_tol, n=int(arg))
    if kind == "superposition":
        levels = [int(s) for s in arg.split(",")]
        return build_state("superposition", layout, leakage_tol, levels=levels)
    if kind in ("coherent", "kitten2", "kitten4"):
        return build_state(kind, layout, leakage_tol, alpha=complex(arg))
    if kind == "thermal":
        return build_state("thermal", layout, leakage_tol, nbar=float(arg))
    if kind == "gkp":
        return build_state("gkp", layout, leakage_tol, delta=float(arg))
    raise errors.ConfigError(f"cannot parse state spec '{spec}'")


# -- figures of merit ------------------------------------------------------------

def fidelity(rho, sigma) -> float:
    """State fidelity; pure ``sigma`` uses ⟨σ|ρ|σ⟩, mixed uses the Uhlmann form."""
    r = as_matrix(rho)
    if isinstance(sigma, Ket) or np.ndim(sigma) == 1:
        v = sigma.amplitudes if isinstance(sigma, Ket) else np.asarray(sigma)
        if v.shape[0] != r.shape[0]:
            raise errors.DimensionError(f"dims {r.shape[0]} and {v.shape[0]} differ")
        return float(np.real(np.vdot(v, r @ v)))
    s = as_matrix(sigma)
    if s.shape != r.shape:
        raise errors.DimensionError(f"dims {r.shape} and {s.shape} differ")
    lam, vec = np.linalg.eigh(s)
    root = (vec * np.sqrt(np.clip(lam, 0, None))) @ dag(vec)
    inner = root @ r @ root
    mu = np.clip(np.linalg.eigvalsh(0.5 * (inner + dag(inner))), 0, None)
    return float(min(1.0, np.sum(np.sqrt(mu)) ** 2))


def purity(rho) -> float:
    r = as_matrix(rho)
    return float(np.real(np.sum(r * r.T)))


def reduced_cavity(rho: np.ndarray, layout: HilbertLayout) -> np.ndarray:
    q = layout.qdim
    if q == 1:
        return rho
    r = rho.reshape(layout.fock_cutoff, q, layout.fock_cutoff, q)
    return np.einsum("aibi->ab", r)


def wigner_grid(rho, xvec, pvec, layout: HilbertLayout | None = None) -> np.ndarray:
    """Wigner function on the grid ``W[ip, ix]`` with α = (x + ip)/√2.

    Normalized so that ∫W dx dp = 1 and the vacuum gives 1/π at the origin.
    Qubit slots are traced out first when a layout is given.
    """
    r = as_matrix(rho)
    if layout is not None:
        r = reduced_cavity(r, layout)
    x, p = np.meshgrid(np.asarray(xvec, float), np.asarray(pvec, float))
    alpha = (x + 1j * p) / math.sqrt(2.0)
    dim = r.shape[0]
    # w[k] holds the current column of cross-Wigner functions W_{m,k};
    # rows are filled one m at a time using the Laguerre three-term relation.
    w = np.zeros((dim,) + alpha.shape, dtype=complex)
    w[0] = np.exp(-2.0 * np.abs(alpha) ** 2) / math.pi
    total = np.real(r[0, 0]) * np.real(w[0])
    for k in range(1, dim):
        w[k] = 2.0 * alpha * w[k - 1] / math.sqrt(k)
        total += 2.0 * np.real(r[0, k] * w[k])
    for m in range(1, dim):
        prev_diag = w[m].copy()
        w[m] = (2.0 * np.conj(alpha) * prev_diag - math.sqrt(m) * w[m - 1]) / math.sqrt(m)
        total += np.real(r[m, m] * w[m])
        carry = prev_diag
        for k in range(m + 1, dim):
            nxt = (2.0 * alpha * w[k - 1] - math.sqrt(m) * carry) / math.sqrt(k)
            carry = w[k].copy()
            w[k] = nxt
            total += 2.0 * np.real(r[m, k] * w[k])
    return total
