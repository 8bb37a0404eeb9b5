"""Central finite differences of the frozen-outcome surrogate."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import rollout, trajectory_rngs

# gradients smaller than this are compared absolutely (a vanishing gradient has no relative scale)
SCALE_FLOOR = 1e-6


@dataclass
class FDReport:
    h: float
    analytic: np.ndarray
    numeric: np.ndarray

    @property
    def max_rel_error(self) -> float:
        scale = max(np.max(np.abs(self.analytic)), np.max(np.abs(self.numeric)), SCALE_FLOOR)
        return float(np.max(np.abs(self.analytic - self.numeric)) / scale)

    def line(self) -> str:
        return f"h={self.h:.0e} max_rel_error={self.max_rel_error:.3e}"


def _frozen(task, controller, theta, batch, seed, mode):
    base = rollout(task, controller, theta, mode=mode, batch=batch, seed=seed)
    if mode == "enum":
        return base, {}
    kw = dict(consts=base.consts, coeffs=base.coeffs)
    if task.has_continuous:
        # replay the same uniforms; discrete outcomes are re-selected identically
        rngs = trajectory_rngs(seed, batch)
        if task.uncertainty is not None and task.uncertainty.resample:
            for r in rngs:
                r.standard_normal()
        kw["z"] = np.array([r.random(task.n_measurements) for r in rngs])
    else:
        kw["outcomes"] = base.outcomes
    return base, kw


def _objective(task, controller, theta, mode, kw) -> float:
    r = rollout(task, controller, theta, mode=mode, grad=False, **kw)
    if mode == "enum":
        return r.mean_return
    return float(np.mean(r.surrogate))


def finite_diff_check(task, controller, theta, h: float = 1e-5, batch: int = 3, seed: int = 0,
                      mode: str = "mc", indices=None) -> FDReport:
    """Compare the tape gradient with central differences at frozen outcomes and coefficients."""
    theta = np.asarray(theta, float)
    base, kw = _frozen(task, controller, theta, batch, seed, mode)
    idx = np.arange(theta.size) if indices is None else np.asarray(indices)
    num = np.zeros(idx.size)
    for n, i in enumerate(idx):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        num[n] = (_objective(task, controller, tp, mode, kw) - _objective(task, controller, tm, mode, kw)) / (2 * h)
    return FDReport(h, np.asarray(base.grad)[idx], num)


def h_sweep(task, controller, theta, hs=(1e-4, 1e-5, 1e-6), **kw) -> list[FDReport]:
    return [finite_diff_check(task, controller, theta, h=h, **kw) for h in hs]
