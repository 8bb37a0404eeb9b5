"""Parametrized gates and measurement families.

All builders are batched: control arguments have shape ``(B,)`` (or ``(B, k)``)
and the result has shape ``(B, d, d)``. They run on plain arrays or on tape
nodes. The ``*_jac`` companions return closed-form derivatives with respect to
each control and never touch the tape; the adjoint backend relies on them.
"""

from __future__ import annotations

import math
import warnings
from functools import lru_cache

import numpy as np

from . import errors
from .channels import MeasurementFamily
from .graddiff import tape as ad
from .graddiff.tape import _cos_sqrt, _sinc_sqrt, _sinc_sqrt_prime, _expmi_divided
from .qcore import HilbertLayout, annihilation


# -- index bookkeeping ----------------------------------------------------------------

@lru_cache(maxsize=None)
def _drive_index(layout: HilbertLayout, slot: int):
    q = layout.qdim
    bit = 1 << (layout.qubit_slots - 1 - slot)
    lows = np.array([i for i in range(layout.dim) if not (i % q) & bit])
    highs = lows + bit
    rows = np.concatenate([lows, highs, lows, highs])
    cols = np.concatenate([lows, highs, highs, lows])
    return rows, cols, lows.size


@lru_cache(maxsize=None)
def _jc_index(layout: HilbertLayout, slot: int):
    """Pairs (|n, e⟩, |n+1, g⟩) for each n plus the unpaired states."""
    q = layout.qdim
    bit = 1 << (layout.qubit_slots - 1 - slot)
    e_idx, g_idx, level = [], [], []
    for n in range(layout.fock_cutoff - 1):
        for rest in range(q):
            if rest & bit:
                e_idx.append(n * q + rest)
                g_idx.append((n + 1) * q + (rest & ~bit))
                level.append(n)
    e_idx, g_idx = np.array(e_idx, int), np.array(g_idx, int)
    paired = set(e_idx.tolist()) | set(g_idx.tolist())
    lone = np.array([i for i in range(layout.dim) if i not in paired], int)
    rows = np.concatenate([e_idx, g_idx, e_idx, g_idx, lone])
    cols = np.concatenate([e_idx, g_idx, g_idx, e_idx, lone])
    return rows, cols, np.array(level, int), lone.size


def _as_batch(x):
    v = ad.value(x)
    if np.ndim(v) == 0:
        return ad.reshape(x, (1,)) if ad.is_node(x) else np.reshape(v, (1,))
    return x


# -- Jaynes-Cummings gates -----------------------------------------------------------

def jc_qubit_drive(layout: HilbertLayout, a, b=0.0, slot: int = 0):
    """``exp[-i(α σ+ + α* σ-)/2]`` on one qubit slot, α = a + ib."""
    a = _as_batch(a)
    b = _as_batch(b) if ad.is_node(b) or np.ndim(b) else np.zeros_like(ad.value(a), float) + b
    s = a * a + b * b
    c = ad.cos_sqrt(s)
    sn = ad.sinc_sqrt(s)
    x01 = sn * (-1j * a - b)
    x10 = sn * (-1j * a + b)
    rows, cols, p = _drive_index(layout, slot)
    vals = ad.stack([c, c, x01, x10], axis=-1)
    gather = np.repeat(np.arange(4), p)
    return ad.scatter(ad.getitem(vals, (Ellipsis, gather)), (rows, cols), (layout.dim, layout.dim))


def jc_qubit_drive_jac(layout: HilbertLayout, a, b, slot: int = 0):
    a = np.atleast_1d(np.asarray(a, float))
    b = np.atleast_1d(np.asarray(b, float)) + 0 * a
    s = a * a + b * b
    c, sn, dsn = _cos_sqrt(s), _sinc_sqrt(s), _sinc_sqrt_prime(s)
    dc = -0.25 * sn
    rows, cols, p = _drive_index(layout, slot)
    d = layout.dim

    def build(cv, x01, x10):
        vals = np.stack([cv, cv, x01, x10], axis=-1)[:, np.repeat(np.arange(4), p)]
        out = np.zeros((a.size, d, d), complex)
        out[:, rows, cols] = vals
        return out

    u = build(c, sn * (-1j * a - b), sn * (-1j * a + b))
    jac = []
    for ds, lin01, lin10 in ((2 * a, -1j, -1j), (2 * b, -1.0, 1.0)):
        jac.append(build(dc * ds,
                         dsn * ds * (-1j * a - b) + sn * lin01,
                         dsn * ds * (-1j * a + b) + sn * lin10))
    return u, np.stack(jac, axis=1)


def jc_interaction(layout: HilbertLayout, br, bi=0.0, slot: int = 0):
    """``exp[-i(β a σ+ + β* a† σ-)/2]`` as closed-form 2x2 blocks, β = br + i bi."""
    br = _as_batch(br)
    bi = _as_batch(bi) if ad.is_node(bi) or np.ndim(bi) else np.zeros_like(ad.value(br), float) + bi
    rows, cols, level, nlone = _jc_index(layout, slot)
    mult = (level + 1.0)
    mag = ad.reshape(br * br + bi * bi, (-1, 1))
    s = mag * mult
    c = ad.cos_sqrt(s)
    k = ad.sinc_sqrt(s) * np.sqrt(mult)
    brc = ad.reshape(br, (-1, 1))
    bic = ad.reshape(bi, (-1, 1))
    x_eg = k * (-1j * brc + bic)
    x_ge = k * (-1j * brc - bic)
    ones = np.ones((ad.value(c).shape[0], nlone))
    vals = ad.concatenate([c, c, x_eg, x_ge, ones], axis=-1)
    return ad.scatter(vals, (rows, cols), (layout.dim, layout.dim))


def jc_interaction_jac(layout: HilbertLayout, br, bi, slot: int = 0):
    br = np.atleast_1d(np.asarray(br, float))
    bi = np.atleast_1d(np.asarray(bi, float)) + 0 * br
    rows, cols, level, nlone = _jc_index(layout, slot)
    mult = level + 1.0
    s = (br * br + bi * bi)[:, None] * mult
    c, sn, dsn = _cos_sqrt(s), _sinc_sqrt(s), _sinc_sqrt_prime(s)
    r = np.sqrt(mult)
    brc, bic = br[:, None], bi[:, None]
    d = layout.dim

    def build(cv, xeg, xge, lone):
        out = np.zeros((br.size, d, d), complex)
        out[:, rows, cols] = np.concatenate([cv, cv, xeg, xge, lone], axis=-1)
        return out

    u = build(c, r * sn * (-1j * brc + bic), r * sn * (-1j * brc - bic), np.ones((br.size, nlone)))
    jac = []
    for var, leg, lge in ((brc, -1j, -1j), (bic, 1.0, -1.0)):
        ds = 2 * var * mult
        jac.append(build(-0.25 * sn * ds,
                         r * (dsn * ds * (-1j * brc + bic) + sn * leg),
                         r * (dsn * ds * (-1j * brc - bic) + sn * lge),
                         np.zeros((br.size, nlone))))
    return u, np.stack(jac, axis=1)


# -- dispersive measurement ----------------------------------------------------------

def dispersive_diagonals(layout: HilbertLayout, gamma, delta):
    """Kraus diagonals ``cos(γn + δ/2)`` (m=+1) and ``sin(γn + δ/2)`` (m=-1), shape (B, 2, d)."""
    gamma = ad.reshape(_as_batch(gamma), (-1, 1))
    delta = ad.reshape(_as_batch(delta), (-1, 1))
    ang = gamma * layout.photon_numbers() + 0.5 * delta
    return ad.stack([ad.cos(ang), ad.sin(ang)], axis=1)


def dispersive_diagonals_jac(layout: HilbertLayout, gamma, delta):
    gamma = np.atleast_1d(np.asarray(gamma, float))[:, None]
    delta = np.atleast_1d(np.asarray(delta, float))[:, None]
    n = layout.photon_numbers()
    ang = gamma * n + 0.5 * delta
    c, s = np.cos(ang), np.sin(ang)
    diag = np.stack([c, s], axis=1)
    d_gamma = np.stack([-s * n, c * n], axis=1)
    d_delta = np.stack([-0.5 * s, 0.5 * c], axis=1)
    return diag, np.stack([d_gamma, d_delta], axis=1)


def dispersive_povm(layout: HilbertLayout, gamma: float, delta: float,
                    positive_kraus: bool = False) -> MeasurementFamily:
    """Two-outcome family with labels (+1, -1).

    ``positive_kraus`` replaces the Kraus operators by |cos| and |sin|: identical
    outcome statistics, no back-action phase.
    """
    diag = dispersive_diagonals(layout, gamma, delta)[0]
    if positive_kraus:
        diag = np.abs(diag)
    return MeasurementFamily.from_diagonals((+1, -1), diag.astype(complex))


def parity_diagonals(layout: HilbertLayout) -> np.ndarray:
    """Projective parity measurement: the positive-Kraus dispersive family at (π/2, 0)."""
    return np.abs(dispersive_diagonals(layout, math.pi / 2, 0.0)[0]).astype(complex)


def qubit_z_diagonals(layout: HilbertLayout, slot: int = 0) -> np.ndarray:
    """Projective qubit readout: label +1 ↔ g, label -1 ↔ e."""
    lv = layout.qubit_levels(slot)
    return np.stack([(lv == 0), (lv == 1)]).astype(complex)


# -- SNAP and displacement ----------------------------------------------------------

def snap_diagonal(layout: HilbertLayout, phis):
    """Diagonal of the SNAP gate; ``phis`` has shape (B, N_SNAP)."""
    v = ad.value(phis)
    if v.ndim == 1:
        phis = ad.reshape(phis, (1, -1))
        v = ad.value(phis)
    nsnap = v.shape[-1]
    if nsnap > layout.fock_cutoff:
        raise errors.ContractError(f"N_SNAP={nsnap} exceeds fock cutoff {layout.fock_cutoff}")
    phases = ad.exp(1j * phis)
    pad = np.ones((v.shape[0], layout.fock_cutoff - nsnap))
    cav = ad.concatenate([phases, pad], axis=-1)
    return ad.getitem(cav, (Ellipsis, np.repeat(np.arange(layout.fock_cutoff), layout.qdim)))


def snap(layout: HilbertLayout, phis):
    diag = snap_diagonal(layout, phis)
    idx = np.arange(layout.dim)
    return ad.scatter(diag, (idx, idx), (layout.dim, layout.dim))


@lru_cache(maxsize=None)
def _displacement_generators(layout: HilbertLayout) -> np.ndarray:
    a = layout.embed_cavity(annihilation(layout.fock_cutoff))
    ad_ = a.conj().T
    # i(α a† − α* a) = Re α · i(a† − a) − Im α · (a† + a)
    return np.stack([1j * (ad_ - a), -(ad_ + a)])


def _check_displacement_size(layout: HilbertLayout, ar, ai) -> None:
    mag2 = np.max(np.asarray(ad.value(ar)) ** 2 + np.asarray(ad.value(ai)) ** 2)
    if mag2 > layout.fock_cutoff / 4:
        warnings.warn(f"displacement |α|²={mag2:.3g} exceeds cutoff/4={layout.fock_cutoff / 4:g}; "
                      "truncation effects likely", RuntimeWarning, stacklevel=3)


def displacement(layout: HilbertLayout, ar, ai=0.0):
    """``D(α) = exp[α a† − α* a]`` through the eigendecomposition of its Hermitian generator."""
    ar = _as_batch(ar)
    ai = _as_batch(ai) if ad.is_node(ai) or np.ndim(ai) else np.zeros_like(ad.value(ar), float) + ai
    _check_displacement_size(layout, ar, ai)
    h = ad.tensordot_last(ad.stack([ar, ai], axis=-1), _displacement_generators(layout))
    u = ad.expm_herm(h)
    if not ad.is_node(u):
        u = _reunitarize(u)
    return u


def _reunitarize(u: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    eye = np.eye(u.shape[-1])
    dev = np.max(np.abs(np.conj(np.swapaxes(u, -1, -2)) @ u - eye))
    if dev <= tol:
        return u
    warnings.warn(f"displacement non-unitary by {dev:.3g}; projecting", RuntimeWarning, stacklevel=3)
    w, _, vh = np.linalg.svd(u)
    return w @ vh


def snap_block(layout: HilbertLayout, ar, ai, phis):
    """``D(α) S(φ) D(α)†``."""
    d = displacement(layout, ar, ai)
    s = snap_diagonal(layout, phis)
    right = ad.reshape(s, ad.value(s).shape + (1,)) * ad.dag(d)
    return ad.matmul(d, right)


def snap_block_jac(layout: HilbertLayout, ar, ai, phis):
    ar = np.atleast_1d(np.asarray(ar, float))
    ai = np.atleast_1d(np.asarray(ai, float)) + 0 * ar
    phis = np.atleast_2d(np.asarray(phis, float))
    gens = _displacement_generators(layout)
    h = ar[:, None, None] * gens[0] + ai[:, None, None] * gens[1]
    lam, vec = np.linalg.eigh(h)
    vh = np.conj(np.swapaxes(vec, -1, -2))
    dmat = (vec * np.exp(-1j * lam)[:, None, :]) @ vh
    loew = _expmi_divided(lam[:, :, None], lam[:, None, :])
    s = snap_diagonal(layout, phis)
    ddag = np.conj(np.swapaxes(dmat, -1, -2))
    u = dmat @ (s[:, :, None] * ddag)
    jac = []
    for g in gens:
        dd = vec @ (loew * (vh @ g @ vec)) @ vh
        jac.append(dd @ (s[:, :, None] * ddag)
                   + dmat @ (s[:, :, None] * np.conj(np.swapaxes(dd, -1, -2))))
    cav_of = np.repeat(np.arange(layout.fock_cutoff), layout.qdim)
    for n in range(phis.shape[1]):
        mask = (cav_of == n)
        ds = np.where(mask, 1j * s, 0)
        jac.append(dmat @ (ds[:, :, None] * ddag))
    return u, np.stack(jac, axis=1)


# -- spin ------------------------------------------------------------------------

def spin_rotation(g, tau, layout: HilbertLayout | None = None, slot: int = 0):
    """``exp(-i gτ σy / 2)``: real rotation with ⟨e|U|g⟩ = sin(gτ/2)."""
    layout = layout or HilbertLayout(1, 1)
    ang = _as_batch(tau) * g
    c = ad.cos(0.5 * ang)
    s = ad.sin(0.5 * ang)
    rows, cols, p = _drive_index(layout, slot)
    vals = ad.stack([c, c, -s, s], axis=-1)
    gather = np.repeat(np.arange(4), p)
    return ad.scatter(ad.getitem(vals, (Ellipsis, gather)), (rows, cols), (layout.dim, layout.dim))


def spin_rotation_jac(g, tau, layout: HilbertLayout | None = None, slot: int = 0):
    layout = layout or HilbertLayout(1, 1)
    tau = np.atleast_1d(np.asarray(tau, float))
    g = np.asarray(g, float) + 0 * tau
    ang = g * tau
    c, s = np.cos(0.5 * ang), np.sin(0.5 * ang)
    rows, cols, p = _drive_index(layout, slot)
    d = layout.dim
    gather = np.repeat(np.arange(4), p)

    def build(vals):
        out = np.zeros((tau.size, d, d), complex)
        out[:, rows, cols] = vals[:, gather]
        return out

    u = build(np.stack([c, c, -s, s], axis=-1))
    du = build(np.stack([-0.5 * g * s, -0.5 * g * s, -0.5 * g * c, 0.5 * g * c], axis=-1))
    return u, du[:, None]
