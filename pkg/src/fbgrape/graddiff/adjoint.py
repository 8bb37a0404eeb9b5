"""Adjoint-state gradient of the frozen-outcome surrogate, independent of the tape.

The forward sweep runs on plain arrays and records every step. The backward
sweep carries the co-state λ (the derivative of the surrogate with respect to
the normalized state, in the ``∂/∂Re + i∂/∂Im`` convention) from the last
reward back to the initial state:

* unitary ``ρ → UρU†``: ``λ ← U†λU``; control derivative ``2 Re⟨λUρ, ∂U⟩``;
* decay: ``λ`` goes through the adjoint of the discrete propagator;
* measurement ``ρ → MρM†/P``: with ``G = (λ − Re⟨λ, ρ'⟩ + c) / P`` the co-state
  becomes ``M†GM``. The ``c/P`` piece is the derivative of ``c·ln tr(MρM†)``,
  i.e. the log-likelihood carried by the unnormalized state.

Only the controller itself is differentiated on the tape (one small VJP per
segment for state-fed networks, a single VJP otherwise).
"""

from __future__ import annotations

import numpy as np

from .. import errors
from ..controllers import StepInput
from ..program import ContinuousMeasure, Dissipate, Gate, Measure, RewardTap, label_values
from . import tape as ad
from .engine import _coefficients


def _hdot(a, b):
    """Per-row ``Re tr(a b)`` for Hermitian ``a``."""
    return np.real(np.einsum("rij,rji->r", a, b))


def adjoint_gradient(task, controller, theta, outcomes, consts=None, coeffs="future", score=True):
    """Gradient of the mean surrogate with outcomes fixed to ``outcomes`` (rows, J).

    Returns ``(grad, returns)``.
    """
    theta = np.asarray(theta, float).reshape(1, -1)
    outcomes = np.asarray(outcomes, int)
    rows = outcomes.shape[0]
    if task.has_continuous:
        raise errors.ContractError("the adjoint backend handles discrete outcomes only")
    consts = dict(consts) if consts is not None else task.initial_consts(rows)
    layout = task.layout
    d = layout.dim
    labels = label_values(task.labels)

    rho = np.broadcast_to(task.rho0, (rows, d, d)).astype(complex)
    carry = controller.begin(theta, rows)
    hist_idx = np.zeros(rows, int)
    depth, last, jm = 0, None, 0
    records, inputs, controls = [], [], []
    rewards = [np.zeros(rows)]
    r_ = np.arange(rows)

    for j, seg in enumerate(task.segments):
        inp = StepInput(j, task.n_segments, depth, hist_idx.copy(), None if last is None else last.copy(),
                        rho.copy(), None)
        inputs.append(inp)
        F, carry = controller.step(theta, carry, inp) if seg.uses_controls else (None, carry)
        F = None if F is None else np.asarray(ad.value(F), float)
        controls.append(F)
        records.append(("segment", j))
        for el in seg.elements:
            if isinstance(el, Gate):
                U, dU = el.jac(layout, F, consts)
                U = np.broadcast_to(U, (rows, d, d))
                records.append(("gate", j, el, U, np.broadcast_to(dU, (rows,) + dU.shape[1:]), rho))
                rho = U @ rho @ np.conj(np.swapaxes(U, -1, -2))
            elif isinstance(el, Dissipate):
                records.append(("decay", el))
                rho = el.apply(rho, layout)
            elif isinstance(el, RewardTap):
                records.append(("reward", el, rho))
                rewards[-1] = rewards[-1] + np.asarray(el.value(rho), float)
            elif isinstance(el, Measure):
                diag, jac = el.jac(layout, F, consts)
                diag = np.broadcast_to(diag, (rows,) + diag.shape[1:])
                k = outcomes[:, jm]
                m = diag[r_, k]
                x = m[:, :, None] * rho * np.conj(m)[:, None, :]
                p = np.real(np.einsum("rii->r", x))
                if np.any(p <= 0):
                    raise errors.ContractError("forced outcome has zero probability")
                post = x / p[:, None, None]
                records.append(("measure", j, el, m, jac, k, rho, post, p, jm))
                rho = post
                hist_idx = hist_idx * el.n_outcomes + k
                last = labels[k]
                depth += 1
                jm += 1
                rewards.append(np.zeros(rows))
            elif isinstance(el, ContinuousMeasure):
                raise errors.ContractError("continuous readout in adjoint backend")
            else:
                raise errors.ContractError(f"unsupported element {el!r}")

    step_rewards = np.stack(rewards, axis=1)
    returns = step_rewards.sum(axis=1)
    c = _coefficients(coeffs, step_rewards, outcomes) if score else np.zeros((rows, jm))

    lam = np.zeros((rows, d, d), complex)
    gF = [None if F is None else np.zeros_like(F) for F in controls]
    grad = np.zeros(theta.size)
    eye = np.eye(d)
    for rec in reversed(records):
        kind = rec[0]
        if kind == "reward":
            lam = lam + rec[1].grad(rec[2])
        elif kind == "decay":
            lam = rec[1].apply(lam, layout, adjoint=True)
        elif kind == "gate":
            _, sj, el, U, dU, rho_in = rec
            core = lam @ U @ rho_in                           # λUρ
            for kk, col in enumerate(el.controls):
                gF[sj][:, col] += 2 * np.real(np.einsum("rij,rij->r", np.conj(core), dU[:, kk]))
            lam = np.conj(np.swapaxes(U, -1, -2)) @ lam @ U
        elif kind == "measure":
            _, sj, el, m, jac, k, rho_in, post, p, jj = rec
            G = (lam - (_hdot(lam, post) - c[:, jj])[:, None, None] * eye) / p[:, None, None]
            if jac.shape[1]:
                gm = np.einsum("ril,rl,rli->ri", G, m, rho_in)   # (G M ρ)_ii
                for kk, col in enumerate(el.controls):
                    dm = jac[r_, kk, k]
                    gF[sj][:, col] += 2 * np.real(np.sum(np.conj(gm) * dm, axis=-1))
            lam = np.conj(m)[:, :, None] * G * m[:, None, :]
        elif kind == "segment":
            seg = rec[1]
            if controller.needs_state and gF[seg] is not None:
                g_th, g_rho = _controller_vjp_state(controller, theta, inputs[seg], gF[seg])
                grad += g_th
                # ρ is Hermitian, so only the Hermitian part of its co-state matters
                lam = lam + 0.5 * (g_rho + np.conj(np.swapaxes(g_rho, -1, -2)))
    if not controller.needs_state:
        grad += _controller_vjp(controller, theta, inputs, gF, task)
    return grad / rows, returns


def _controller_vjp_state(controller, theta, inp, gF):
    tp = ad.Tape()
    th = tp.leaf(theta, "theta")
    rho = tp.leaf(inp.rho, "rho")
    local = StepInput(inp.segment, inp.n_segments, inp.depth, inp.hist_idx, inp.last_outcome, rho, None)
    F, _ = controller.step(th, controller.begin(th, inp.rho.shape[0]), local)
    tp.backward(ad.sum_(F * gF))
    g_th = np.zeros(theta.size) if th.grad is None else np.real(th.grad).ravel()
    g_rho = np.zeros_like(inp.rho) if rho.grad is None else rho.grad
    return g_th, g_rho


def _controller_vjp(controller, theta, inputs, gF, task):
    tp = ad.Tape()
    th = tp.leaf(theta, "theta")
    rows = inputs[0].hist_idx.shape[0]
    carry = controller.begin(th, rows)
    obj = None
    for j, seg in enumerate(task.segments):
        if not seg.uses_controls:
            continue
        F, carry = controller.step(th, carry, inputs[j])
        if F is None or gF[j] is None:
            continue
        term = ad.sum_(F * gF[j])
        obj = term if obj is None else obj + term
    if obj is None or not ad.is_node(obj):
        return np.zeros(theta.size)
    tp.backward(obj)
    return np.zeros(theta.size) if th.grad is None else np.real(th.grad).ravel()
