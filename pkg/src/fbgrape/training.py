"""Sampling, gradient estimation, Adam ascent, value baseline and the training loop."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import errors
from .controllers import controller_init
from .graddiff.engine import Rollout, rollout

log = logging.getLogger(__name__)


# -- sampling and estimation -------------------------------------------------------------

def sample_batch(task, controller, theta, batch_size: int, seed: int, start_index: int = 0,
                 train: bool = False, coeffs="future", grad: bool = True, per_trajectory: bool = False,
                 score: bool = True) -> Rollout:
    """One Monte-Carlo batch; trajectory ``i`` draws from the stream ``(seed, start_index + i)``."""
    if batch_size < 1:
        raise errors.ConfigError("batch_size must be ≥ 1")
    return rollout(task, controller, theta, mode="mc", batch=batch_size, seed=seed, start_index=start_index,
                   train=train, coeffs=coeffs, grad=grad, per_trajectory=per_trajectory, score=score)


def estimate_gradient(batch: Rollout) -> np.ndarray:
    """Mean surrogate gradient of a sampled batch; aborts on non-finite entries."""
    g = np.asarray(batch.grad, float)
    if g.ndim == 2:
        g = g.mean(axis=0)
    if not np.all(np.isfinite(g)):
        bad = np.flatnonzero(~np.isfinite(batch.returns))
        raise errors.NonFiniteError(
            f"non-finite gradient; outcome records of suspicious rows: {batch.outcomes[bad].tolist()}")
    return g


# -- Adam --------------------------------------------------------------------------------------

@dataclass
class AdamState:
    size: int
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7
    clipvalue: float | None = 0.5
    clipnorm: float | None = 1.0
    decay_rate: float | None = None
    decay_steps: int = 1000
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)
    t: int = 0

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.size)
        if self.v is None:
            self.v = np.zeros(self.size)

    def lr(self) -> float:
        if self.decay_rate is None:
            return self.learning_rate
        return self.learning_rate * self.decay_rate ** (self.t / self.decay_steps)

    def to_dict(self) -> dict:
        return {"m": self.m.tolist(), "v": self.v.tolist(), "t": self.t, "learning_rate": self.learning_rate,
                "beta1": self.beta1, "beta2": self.beta2, "epsilon": self.epsilon,
                "clipvalue": self.clipvalue, "clipnorm": self.clipnorm}


def clip_gradient(g: np.ndarray, clipvalue, clipnorm) -> np.ndarray:
    """Component clip first, then rescale to the global norm bound."""
    g = np.asarray(g, float)
    if clipvalue is not None:
        g = np.clip(g, -clipvalue, clipvalue)
    if clipnorm is not None:
        n = np.linalg.norm(g)
        if n > clipnorm:
            g = g * (clipnorm / n)
    return g


def adam_step(state: AdamState, theta: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Bias-corrected Adam ascent step on ``theta`` (the return is maximized)."""
    theta = np.asarray(theta, float)
    if theta.shape != state.m.shape or np.shape(g) != theta.shape:
        raise errors.ContractError("Adam state, parameters and gradient must share one shape")
    g = clip_gradient(g, state.clipvalue, state.clipnorm)
    lr = state.lr()
    state.t += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * g
    state.v = state.beta2 * state.v + (1 - state.beta2) * g * g
    lr_t = lr * math.sqrt(1 - state.beta2 ** state.t) / (1 - state.beta1 ** state.t)
    return theta + lr_t * state.m / (np.sqrt(state.v) + state.epsilon)


# -- value baseline ----------------------------------------------------------------------------

@dataclass
class ValueTable:
    """Tabular value over outcome histories; ``V(s_j)`` counts rewards from interval ``j`` on."""

    rate: float = 0.1
    discount_factor: float = 1.0
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 < self.rate <= 1:
            raise errors.ConfigError("value update rate must lie in (0, 1]")

    def get(self, hist) -> float:
        return self.values.get(tuple(int(k) for k in hist), 0.0)

    def advantages(self, step_rewards: np.ndarray, outcomes: np.ndarray) -> np.ndarray:
        """TD errors ``r_{j-1} + γV(s_j) − V(s_{j-1})`` as coefficients of ``ln P(m_j | s_{j-1})``."""
        rows, J1 = step_rewards.shape
        J = J1 - 1
        out = np.zeros((rows, J))
        for r in range(rows):
            h = tuple(int(k) for k in outcomes[r])
            for j in range(1, J + 1):
                out[r, j - 1] = (step_rewards[r, j - 1] + self.discount_factor * self.get(h[:j])
                                 - self.get(h[:j - 1]))
        return out

    def coefficient_fn(self):
        return lambda step_rewards, outcomes: self.advantages(step_rewards, outcomes)


def value_update(table: ValueTable, batch: Rollout) -> ValueTable:
    """One synchronous Bellman sweep: each visited state moves toward its batch-mean target."""
    rows, J1 = batch.step_rewards.shape
    targets: dict = {}
    for r in range(rows):
        h = tuple(int(k) for k in batch.outcomes[r])
        for j in range(J1):
            nxt = table.get(h[:j + 1]) if j + 1 < J1 else 0.0
            targets.setdefault(h[:j], []).append(batch.step_rewards[r, j] + table.discount_factor * nxt)
    new = dict(table.values)
    for s, ts in targets.items():
        v = table.get(s)
        new[s] = v + table.rate * (float(np.mean(ts)) - v)
    if not all(math.isfinite(v) for v in new.values()):
        raise errors.NonFiniteError("value table diverged")
    return ValueTable(table.rate, table.discount_factor, new)


# -- training loop ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    iterations: int = 2000
    batch_size: int | None = None
    learning_rate: float = 0.01
    seed: int = 0
    mode: str = "auto"                 # auto | mc | enum
    coefficients: str = "future"       # future | full | advantage
    discount_factor: float = 1.0
    value_rate: float = 0.1
    target_return: float | None = None
    lr_decay_rate: float | None = None
    lr_decay_steps: int = 1000
    clipvalue: float | None = 0.5
    clipnorm: float | None = 1.0
    workers: int = 1
    log_every: int = 0


@dataclass
class TrainResult:
    theta: np.ndarray
    curve: list                        # (iteration, mean_return, std_return, wall_ms)
    adam: AdamState
    value_table: ValueTable | None
    stopped: str


def _resolve_mode(task, cfg: TrainConfig) -> str:
    if cfg.mode != "auto":
        return cfg.mode
    if task.has_continuous:
        return "mc"
    if task.branch_count() == 1 or (task.mode == "enum" and task.branch_count() <= 4096):
        return "enum"
    return "mc"


def _mc_step(task, controller, theta, cfg, it, batch, coeffs):
    start = it * batch
    if cfg.workers <= 1 or batch < 2:
        return sample_batch(task, controller, theta, batch, cfg.seed, start, train=True, coeffs=coeffs)
    chunks = np.array_split(np.arange(batch), min(cfg.workers, batch))
    with ThreadPoolExecutor(max_workers=len(chunks)) as ex:
        parts = list(ex.map(lambda c: sample_batch(task, controller, theta, len(c), cfg.seed, start + int(c[0]),
                                                   train=True, coeffs=coeffs), chunks))
    return _merge(parts)


def _merge(parts):
    n = np.array([len(p.returns) for p in parts], float)
    w = n / n.sum()
    grad = sum(wi * p.grad for wi, p in zip(w, parts))          # fixed order: deterministic
    cat = lambda name: np.concatenate([getattr(p, name) for p in parts])
    out = Rollout("mc", cat("returns"), cat("weights") * 0 + 1.0 / n.sum(), cat("outcomes"), cat("m_values"),
                  cat("log_probs"), cat("step_rewards"), [], None, cat("surrogate"), cat("coeffs"), grad)
    return out


def train(task, controller, theta, config: TrainConfig | None = None, callback=None) -> TrainResult:
    cfg = config or TrainConfig()
    theta = np.asarray(theta, float).copy()
    mode = _resolve_mode(task, cfg)
    batch = cfg.batch_size or task.default_batch
    adam = AdamState(theta.size, cfg.learning_rate, clipvalue=cfg.clipvalue, clipnorm=cfg.clipnorm,
                     decay_rate=cfg.lr_decay_rate, decay_steps=cfg.lr_decay_steps)
    vt = ValueTable(cfg.value_rate, cfg.discount_factor) if cfg.coefficients == "advantage" else None
    curve, stopped = [], "iterations"
    for it in range(cfg.iterations):
        t0 = time.perf_counter()
        if mode == "enum":
            res = rollout(task, controller, theta, mode="enum")
        else:
            coeffs = vt.coefficient_fn() if vt is not None else cfg.coefficients
            res = _mc_step(task, controller, theta, cfg, it, batch, coeffs)
            if vt is not None:
                vt = value_update(vt, res)
        if not np.all(np.isfinite(res.returns)):
            raise errors.NonFiniteError(f"non-finite return at iteration {it}")
        g = estimate_gradient(res)
        theta = adam_step(adam, theta, g)
        wall = (time.perf_counter() - t0) * 1000
        curve.append((it, res.mean_return, res.std_return, wall))
        if cfg.log_every and it % cfg.log_every == 0:
            log.info("iter %d mean %.6f std %.4f", it, res.mean_return, res.std_return)
        if callback is not None:
            callback(it, theta, res)
        if cfg.target_return is not None and res.mean_return >= cfg.target_return:
            stopped = "target"
            break
    return TrainResult(theta, curve, adam, vt, stopped)


def evaluate(task, controller, theta, rollouts: int = 1000, seed: int = 0) -> tuple[float, float]:
    """Exact mean return when enumerable, otherwise a Monte-Carlo mean and its standard error."""
    if not task.has_continuous and task.branch_count() <= 4096:
        r = rollout(task, controller, theta, mode="enum", grad=False)
        return r.mean_return, 0.0
    r = rollout(task, controller, theta, mode="mc", batch=rollouts, seed=seed, grad=False)
    return r.mean_return, r.std_return / math.sqrt(rollouts)


def train_best_of(task, kind: str, seeds, config: TrainConfig | None = None, controller_kwargs=None,
                  eval_rollouts: int = 1000):
    """Train from each seed and keep the run with the best evaluated return."""
    best = None
    for s in seeds:
        ctl, th0 = controller_init(kind, task, s, **(controller_kwargs or {}))
        cfg = TrainConfig(**{**(config or TrainConfig()).__dict__, "seed": s})
        res = train(task, ctl, th0, cfg)
        score, _ = evaluate(task, ctl, res.theta, eval_rollouts, seed=10_000 + s)
        if best is None or score > best[0]:
            best = (score, s, ctl, res)
    return best
