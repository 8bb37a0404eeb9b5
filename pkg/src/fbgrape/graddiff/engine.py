"""Batched rollouts of a task program on the tape.

Two modes:

* ``mc``: each row is one sampled trajectory. The differentiable objective is
  the surrogate ``R + Σ_j detach(A_j) · ln P(m_j | history)`` with outcomes held
  fixed; its gradient is the score-function corrected estimator.
* ``enum``: rows branch over every outcome at each measurement and carry the
  branch probability as a weight on the tape; the objective is the exact
  expected return, so no score terms are needed.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .. import errors
from ..channels import PROB_FLOOR, reparam_sample
from ..controllers import Controller, StepInput
from ..program import ContinuousMeasure, Dissipate, Gate, Measure, RewardTap, TaskSpec, label_values
from . import tape as ad

BRANCH_CAP = 4096


@dataclass
class Rollout:
    mode: str
    returns: np.ndarray            # (rows,)
    weights: np.ndarray            # (rows,) sampling weights (1/B in mc)
    outcomes: np.ndarray           # (rows, J) outcome indices (-1 for continuous)
    m_values: np.ndarray           # (rows, J) outcome values
    log_probs: np.ndarray          # (rows, J) ln P (discrete) or ln density (continuous)
    step_rewards: np.ndarray       # (rows, J+1) rewards between measurements
    controls: list                 # per segment (rows_at_segment, arity) arrays or None
    final_states: np.ndarray | None
    surrogate: np.ndarray | None = None
    coeffs: np.ndarray | None = None
    grad: np.ndarray | None = None
    consts: dict = field(default_factory=dict)
    row_parent: list = field(default_factory=list)
    segment_states: list = field(default_factory=list)

    @property
    def mean_return(self) -> float:
        return float(np.sum(self.weights * self.returns))

    @property
    def std_return(self) -> float:
        mu = self.mean_return
        return float(np.sqrt(max(np.sum(self.weights * (self.returns - mu) ** 2), 0.0)))


def trajectory_rngs(seed: int, count: int, start: int = 0):
    return [np.random.default_rng([int(seed), start + i]) for i in range(count)]


def future_coeffs(step_rewards: np.ndarray) -> np.ndarray:
    """A_j = Σ_{k ≥ j} r_k for measurement j = 1..J (rewards after measurement j)."""
    tail = np.cumsum(step_rewards[:, ::-1], axis=1)[:, ::-1]
    return tail[:, 1:]


def full_coeffs(step_rewards: np.ndarray) -> np.ndarray:
    J = step_rewards.shape[1] - 1
    return np.repeat(step_rewards.sum(axis=1, keepdims=True), J, axis=1)


def rollout(task: TaskSpec, controller: Controller, theta, *, mode: str = "mc", batch: int = 1,
            seed: int = 0, start_index: int = 0, outcomes: np.ndarray | None = None,
            z: np.ndarray | None = None, consts: dict | None = None, grad: bool = True,
            per_trajectory: bool = False, train: bool = False,
            coeffs: str | np.ndarray | Callable = "future", score: bool = True,
            branch_cap: int = BRANCH_CAP, keep_states: bool = False,
            floor: float = PROB_FLOOR) -> Rollout:
    """Simulate ``task`` under ``controller`` and optionally differentiate.

    ``outcomes`` (rows, J) forces discrete outcome indices (mc mode); ``z``
    (rows, J) fixes the uniform draws. ``coeffs`` selects the score
    coefficients: ``"future"``, ``"full"``, a fixed (rows, J) array, or a
    callable ``f(step_rewards, outcomes) -> (rows, J)``.
    """
    theta = np.asarray(theta, float)
    if mode not in ("mc", "enum"):
        raise errors.ConfigError(f"unknown rollout mode '{mode}'")
    if mode == "enum":
        if task.has_continuous:
            raise errors.ConfigError("exact enumeration needs discrete outcomes")
        if task.branch_count() > branch_cap:
            raise errors.BranchCapError(
                f"{task.branch_count()} branches exceed the cap of {branch_cap}")
        per_trajectory = False

    tp = ad.Tape() if grad else None
    rows = batch
    if mode == "mc" and outcomes is not None:
        rows = np.asarray(outcomes).shape[0]
    if mode == "mc" and z is not None:
        rows = np.asarray(z).shape[0]

    # per-row model constants and weights
    rngs = None
    J = task.n_measurements
    if mode == "mc":
        need_rng = (z is None and outcomes is None) or train or (
            task.uncertainty is not None and task.uncertainty.resample and consts is None)
        if need_rng:
            rngs = trajectory_rngs(seed, rows, start_index)
        row_consts = dict(consts) if consts is not None else task.initial_consts(rows)
        if task.uncertainty is not None and consts is None and task.uncertainty.resample:
            u = task.uncertainty
            row_consts[u.name] = u.mean + u.std * np.array([r.standard_normal() for r in rngs])
        if z is None and outcomes is None:
            draws = np.array([r.random(J) for r in rngs]).reshape(rows, J)
        elif z is not None:
            draws = np.asarray(z, float).reshape(rows, J)
        else:
            draws = None
        weights = np.full(rows, 1.0 / rows)
    else:
        if task.uncertainty is not None:
            nodes, w = task.uncertainty.quadrature()
            rows = len(nodes)
            row_consts = {task.uncertainty.name: nodes}
            weights = w.copy()
        else:
            rows = 1
            row_consts = task.initial_consts(1)
            weights = np.ones(1)
        draws = None

    P = controller.n_params
    if per_trajectory and mode == "mc":
        theta_rows = np.repeat(theta.reshape(1, P), rows, axis=0)
        row_map = np.arange(rows)
    else:
        theta_rows = theta.reshape(1, P)
        row_map = None
    th = tp.leaf(theta_rows, "theta") if grad else theta_rows

    d = task.layout.dim
    rho = np.broadcast_to(task.rho0, (rows, d, d)).astype(complex)
    w_node = weights if mode == "mc" else (tp.leaf(weights, "w0") if grad else weights)
    carry = controller.begin(th, rows, train=train, rngs=rngs)
    hist_idx = np.zeros(rows, int)
    depth = 0
    last_outcome = None
    labels = label_values(task.labels)

    out_idx, out_val, logp_nodes, logp_vals = [], [], [], []
    # reward nodes per interval (between measurements)
    interval_rewards: list[list] = [[]]
    controls_log, seg_states, parents = [], [], []
    row_id = np.arange(rows)

    def expand_all(idx):
        nonlocal rho, carry, hist_idx, row_consts, row_id, last_outcome, F
        rho = ad.getitem(rho, (idx,))
        if F is not None:
            F = ad.getitem(F, (idx,))
        carry = controller.expand(carry, idx)
        hist_idx = hist_idx[idx]
        row_consts = {k: np.asarray(v)[idx] for k, v in row_consts.items()}
        row_id = row_id[idx]
        if last_outcome is not None:
            last_outcome = ad.getitem(last_outcome, (idx,)) if ad.is_node(last_outcome) \
                else np.asarray(last_outcome)[idx]
        for lst in (out_idx, out_val):
            for i in range(len(lst)):
                lst[i] = lst[i][idx]
        for k in range(len(interval_rewards)):
            interval_rewards[k] = [ad.getitem(r, (idx,)) for r in interval_rewards[k]]
        for i in range(len(logp_nodes)):
            logp_nodes[i] = ad.getitem(logp_nodes[i], (idx,))
            logp_vals[i] = logp_vals[i][idx]

    th_row_map = row_map
    meas_count = 0
    F = None
    for j, seg in enumerate(task.segments):
        if keep_states:
            seg_states.append(np.asarray(ad.value(rho)).copy())
        inp = StepInput(segment=j, n_segments=task.n_segments, depth=depth, hist_idx=hist_idx,
                        last_outcome=last_outcome, rho=rho, row_map=th_row_map)
        F, carry = controller.step(th, carry, inp) if seg.uses_controls else (None, carry)
        controls_log.append(None if F is None else np.asarray(ad.value(F)).copy())
        for el in seg.elements:
            if isinstance(el, Gate):
                U = el.build(task.layout, F, row_consts)
                rho = ad.matmul(ad.matmul(U, rho), ad.dag(U))
            elif isinstance(el, Dissipate):
                rho = el.apply(rho, task.layout)
            elif isinstance(el, RewardTap):
                interval_rewards[-1].append(el.value(rho))
            elif isinstance(el, Measure):
                diag = el.diagonals(task.layout, F, row_consts)          # (rows, K, d)
                nr = ad.value(rho).shape[0]
                if not ad.is_node(diag) and diag.shape[0] != nr:
                    diag = np.broadcast_to(diag, (nr,) + diag.shape[1:])
                pops = ad.real(ad.getitem(rho, (slice(None), np.arange(d), np.arange(d))))  # (rows, d)
                mag2 = ad.real(diag * ad.conj(diag))
                probs = ad.sum_(mag2 * ad.reshape(pops, (ad.value(pops).shape[0], 1, d)), axis=-1)  # (rows, K)
                pv = np.asarray(ad.value(probs))
                K = el.n_outcomes
                if mode == "mc":
                    if outcomes is not None:
                        k = np.asarray(outcomes)[:, meas_count].astype(int)
                        bad = pv[np.arange(len(k)), k] < floor
                        if np.any(bad):
                            warnings.warn("forced outcome has probability below floor", RuntimeWarning)
                    else:
                        k = _select_rows(pv, draws[:, meas_count], floor)
                    r_ = np.arange(len(k))
                    m_sel = ad.getitem(diag, (r_, k))                      # (rows, d)
                    p_sel = ad.getitem(probs, (r_, k))
                else:
                    nrow = pv.shape[0]
                    src = np.repeat(np.arange(nrow), K)
                    k = np.tile(np.arange(K), nrow)
                    expand_all(src)
                    w_node = ad.getitem(w_node, (src,))
                    m_sel = ad.getitem(diag, (src, k))
                    p_sel = ad.getitem(probs, (src, k))
                    w_node = w_node * p_sel
                    parents.append(src)
                pvals = np.asarray(ad.value(p_sel))
                safe = ad.where(pvals < floor, 1.0, p_sel) if mode == "enum" else p_sel
                rho = _kraus_update(rho, m_sel, safe)
                logp = ad.log(ad.where(pvals < floor, 1.0, p_sel)) if mode == "enum" else ad.log(p_sel)
                logp_nodes.append(logp)
                logp_vals.append(np.log(np.maximum(pvals, 1e-300)))
                out_idx.append(k.copy())
                out_val.append(labels[k])
                last_outcome = labels[k]
                hist_idx = hist_idx * K + k
                depth += 1
                meas_count += 1
                interval_rewards.append([])
            elif isinstance(el, ContinuousMeasure):
                if mode != "mc":
                    raise errors.ConfigError("continuous outcomes need mc mode")
                zz = draws[:, meas_count]
                pops = ad.real(ad.getitem(rho, (slice(None), np.arange(d), np.arange(d))))
                m, _ = reparam_sample(pops, np.asarray(el.sigma, float), el.lattice, el.noise_sd, zz)
                kd = el.kraus(m)
                dens = ad.sum_(kd * kd * pops, axis=-1)
                rho = _kraus_update(rho, kd, dens)
                logp_nodes.append(None)
                logp_vals.append(np.log(np.asarray(ad.value(dens))))
                out_idx.append(np.full(ad.value(m).shape[0], -1))
                out_val.append(np.asarray(ad.value(m)).copy())
                last_outcome = m
                meas_count += 1
                interval_rewards.append([])
            else:
                raise errors.ContractError(f"unsupported program element {el!r}")

    nrows = ad.value(rho).shape[0]
    interval_nodes = []
    for lst in interval_rewards:
        if lst:
            tot = lst[0]
            for r in lst[1:]:
                tot = tot + r
            interval_nodes.append(tot)
        else:
            interval_nodes.append(np.zeros(nrows))
    step_rewards = np.stack([np.asarray(ad.value(r), float) for r in interval_nodes], axis=1)
    R = interval_nodes[0]
    for r in interval_nodes[1:]:
        R = R + r
    returns = np.asarray(ad.value(R), float)
    outcomes_arr = np.stack(out_idx, axis=1) if out_idx else np.zeros((nrows, 0), int)
    mvals = np.stack(out_val, axis=1) if out_val else np.zeros((nrows, 0))
    lvals = np.stack(logp_vals, axis=1) if logp_vals else np.zeros((nrows, 0))
    wvals = np.asarray(ad.value(w_node), float) if mode == "enum" else weights

    res = Rollout(mode, returns, wvals, outcomes_arr, mvals, lvals, step_rewards, controls_log,
                  np.asarray(ad.value(rho)),
                  consts=row_consts, row_parent=parents, segment_states=seg_states)
    if not np.all(np.isfinite(returns)):
        raise errors.NonFiniteError("non-finite return in rollout")

    if mode == "mc":
        c = _coefficients(coeffs, step_rewards, outcomes_arr)
        res.coeffs = c
        surrogate = R
        if score:
            for jm, node in enumerate(logp_nodes):
                if node is None:
                    continue
                surrogate = surrogate + node * c[:, jm]
        res.surrogate = np.asarray(ad.value(surrogate), float)
        if grad:
            obj = ad.sum_(surrogate) if per_trajectory else ad.mean(surrogate)
            tp.backward(obj)
            res.grad = _grad_of(th, per_trajectory)
    else:
        if grad:
            obj = ad.sum_(w_node * R)
            tp.backward(obj)
            res.grad = _grad_of(th, False)
    return res


def _grad_of(th, per_traj):
    g = th.grad
    if g is None:
        g = np.zeros_like(th.value)
    g = np.real(g)
    return g if per_traj else g.reshape(-1)


def _coefficients(coeffs, step_rewards, outcomes):
    if isinstance(coeffs, str):
        if coeffs == "future":
            return future_coeffs(step_rewards)
        if coeffs == "full":
            return full_coeffs(step_rewards)
        raise errors.ConfigError(f"unknown coefficient mode '{coeffs}'")
    if callable(coeffs):
        return np.asarray(coeffs(step_rewards, outcomes), float)
    return np.asarray(coeffs, float)


def _kraus_update(rho, diag, norm):
    """``M ρ M† / norm`` for diagonal ``M`` (rows, d)."""
    rows, d = ad.value(diag).shape
    left = ad.reshape(diag, (rows, d, 1))
    right = ad.reshape(ad.conj(diag), (rows, 1, d))
    return rho * left * right / ad.reshape(norm, (rows, 1, 1))


def _select_rows(pv: np.ndarray, u: np.ndarray, floor: float) -> np.ndarray:
    """Vectorized inverse-CDF selection with floor exclusion and lower-index ties."""
    allowed = pv >= floor
    if np.any((pv > 0) & ~allowed):
        warnings.warn("outcome with probability below floor excluded from sampling", RuntimeWarning)
    p = np.where(allowed, pv, 0.0)
    cdf = np.cumsum(p, axis=1) / p.sum(axis=1, keepdims=True)
    k = (cdf < u[:, None]).sum(axis=1)
    k = np.minimum(k, pv.shape[1] - 1)
    # a zero-width outcome can only be hit at u == 0 or by rounding at the top
    for r in np.flatnonzero(~allowed[np.arange(len(k)), k]):
        ok = np.flatnonzero(allowed[r])
        k[r] = ok[ok >= k[r]][0] if np.any(ok >= k[r]) else ok[-1]
    return k
