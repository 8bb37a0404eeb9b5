"""Controllers: map outcome histories, states or time indices to control vectors.

Every controller reads a parameter array ``theta`` of shape ``(R, P)`` with
``R = 1`` (shared) or ``R = rows`` (one copy per trajectory, used to obtain
per-trajectory gradients). ``row_map`` selects the parameter row of each
simulation row.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import errors
from .graddiff import tape as ad


@dataclass
class ParameterVector:
    """Flat real parameters with named slices."""

    values: np.ndarray
    structure: dict  # name -> (start, stop, shape)

    def __post_init__(self):
        spans = sorted((s, e) for s, e, _ in self.structure.values())
        pos = 0
        for s, e in spans:
            if s != pos:
                raise errors.ConfigError("parameter slices do not partition the vector")
            pos = e
        if pos != self.values.size:
            raise errors.ConfigError("parameter slices do not cover the vector")

    def get(self, name: str) -> np.ndarray:
        s, e, shape = self.structure[name]
        return self.values[s:e].reshape(shape)


@dataclass
class StepInput:
    segment: int
    n_segments: int
    depth: int
    hist_idx: np.ndarray          # (rows,) BFS-local index of the history
    last_outcome: object          # (rows,) label value of the previous outcome, None at start
    rho: object                   # (rows, d, d)
    row_map: np.ndarray | None    # (rows,) parameter row per simulation row


def _theta_rows(theta, row_map):
    R = ad.value(theta).shape[0]
    if R == 1 or row_map is None:
        return theta
    return ad.getitem(theta, (row_map,))


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


class Controller:
    kind = "base"
    needs_state = False
    supports_continuous = True

    arity: int
    n_params: int
    structure: dict

    def init_params(self, seed: int) -> np.ndarray:
        raise NotImplementedError

    def begin(self, theta, rows: int, train: bool = False, rngs=None) -> dict:
        return {}

    def step(self, theta, carry: dict, inp: StepInput):
        raise NotImplementedError

    def expand(self, carry: dict, idx: np.ndarray) -> dict:
        return carry

    def parameter_vector(self, theta: np.ndarray) -> ParameterVector:
        return ParameterVector(np.asarray(theta, float), dict(self.structure))

    def describe(self) -> dict:
        raise NotImplementedError


# -- lookup table --------------------------------------------------------------------

class LookupTable(Controller):
    """One control vector per node of the outcome tree.

    Nodes are indexed breadth first with outcome +1 as the left child: the
    history ``(k_1..k_h)`` of outcome indices (0 ↔ +1) sits at
    ``(M^h − 1)/(M − 1) + Σ_i k_i M^{h−i}``. The table stores one block per
    controlled segment, sized ``M^h`` (``1`` when memoryless).

    ``constrained`` keeps only the all-(+1) node of every block trainable;
    every other node outputs zero controls.
    """

    kind = "table"
    # continuous readouts never branch the table: it stays open loop for them

    def __init__(self, arity: int, depths, n_outcomes: int = 2, memoryless: bool = False,
                 constrained: bool = False, init_range=(0.0, math.pi), uses=None):
        self.arity = arity
        self.depths = [int(h) for h in depths]
        self.uses = list(uses) if uses is not None else [True] * len(self.depths)
        self.M = n_outcomes
        self.memoryless = memoryless
        self.constrained = constrained
        self.init_range = tuple(init_range)
        self.offsets, self.block_nodes = [], []
        off = 0
        for h, used in zip(self.depths, self.uses):
            nodes = 0 if not used else (1 if (memoryless or constrained) else self.M ** h)
            self.offsets.append(off)
            self.block_nodes.append(nodes)
            off += nodes * arity
        self.n_params = off
        self.structure = {f"segment_{j}": (self.offsets[j], self.offsets[j] + n * arity, (n, arity))
                          for j, n in enumerate(self.block_nodes) if n}

    @classmethod
    def for_depth(cls, depth: int, arity: int = 1, **kw):
        """Table over ``depth + 1`` consecutive tree levels (0..depth)."""
        return cls(arity, list(range(depth + 1)), **kw)

    @classmethod
    def for_task(cls, task, **kw):
        uses = [s.uses_controls for s in task.segments]
        return cls(task.arity, task.segment_depths(), task.n_outcomes, uses=uses, **kw)

    @property
    def node_count(self) -> int:
        return sum(self.block_nodes)

    def init_params(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        return rng.uniform(self.init_range[0], self.init_range[1], size=self.n_params)

    @staticmethod
    def global_index(history, n_outcomes: int = 2) -> int:
        h = len(history)
        base = (n_outcomes ** h - 1) // (n_outcomes - 1)
        local = 0
        for k in history:
            local = local * n_outcomes + int(k)
        return base + local

    def entry_index(self, segment: int, hist_idx: np.ndarray) -> np.ndarray:
        hist_idx = np.asarray(hist_idx, int)
        if self.memoryless or self.constrained:
            node = np.zeros_like(hist_idx)
        else:
            node = hist_idx
        return self.offsets[segment] + node[:, None] * self.arity + np.arange(self.arity)[None, :]

    def step(self, theta, carry, inp: StepInput):
        j = inp.segment
        if j >= len(self.depths):
            raise errors.DepthError(f"segment {j} beyond table depth {len(self.depths)}")
        if inp.depth != self.depths[j]:
            raise errors.DepthError(f"history length {inp.depth} does not match table level {self.depths[j]}")
        if not self.uses[j]:
            return None, carry
        idx = self.entry_index(j, inp.hist_idx)
        rows = idx.shape[0]
        R = ad.value(theta).shape[0]
        prow = np.zeros(rows, int) if (R == 1 or inp.row_map is None) else np.asarray(inp.row_map)
        F = ad.getitem(theta, (prow[:, None], idx))
        if self.constrained:
            mask = (np.asarray(inp.hist_idx) == 0)[:, None]
            F = F * mask.astype(float)
        return F, carry

    def describe(self) -> dict:
        return {"kind": self.kind, "arity": self.arity, "depths": self.depths, "uses": self.uses,
                "n_outcomes": self.M, "memoryless": self.memoryless, "constrained": self.constrained}


# -- dense network on the state ---------------------------------------------------------

class _Layers:
    """Shared bookkeeping for named weight slices."""

    def __init__(self):
        self.structure = {}
        self.n_params = 0

    def add(self, name, shape):
        size = int(np.prod(shape))
        self.structure[name] = (self.n_params, self.n_params + size, tuple(shape))
        self.n_params += size


def _slice(theta_r, spec):
    s, e, shape = spec
    part = ad.getitem(theta_r, (slice(None), slice(s, e)))
    return ad.reshape(part, (-1,) + tuple(shape))


def _affine(x, w, b):
    """``x @ W + b`` with per-row or shared weights; x (rows, in), W (R, in, out), b (R, out)."""
    rows = ad.value(x).shape[0]
    xin = ad.reshape(x, (rows, 1, -1))
    out = ad.reshape(ad.matmul(xin, w), (rows, -1))
    return out + b


class DenseNet(Controller):
    """Feed-forward net on the flattened split state ``[Re ρ, Im ρ]``."""

    kind = "dense"
    needs_state = True

    def __init__(self, dim: int, arity: int, hidden=(30, 30), last_bias: float = math.pi):
        self.dim = dim
        self.arity = arity
        self.hidden = tuple(hidden)
        self.last_bias = last_bias
        self.widths = (2 * dim * dim,) + self.hidden + (arity,)
        lay = _Layers()
        for i, (a, b) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            lay.add(f"W{i}", (a, b))
            lay.add(f"b{i}", (b,))
        self.structure, self.n_params = lay.structure, lay.n_params

    def init_params(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        theta = np.zeros(self.n_params)
        nl = len(self.widths) - 1
        for i, (a, b) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            s, e, _ = self.structure[f"W{i}"]
            theta[s:e] = glorot(rng, a, b).ravel()
            if i == nl - 1:
                s, e, _ = self.structure[f"b{i}"]
                theta[s:e] = self.last_bias
        return theta

    def begin(self, theta, rows, train=False, rngs=None):
        return {}

    def step(self, theta, carry, inp: StepInput):
        th = _theta_rows(theta, inp.row_map)
        rho = inp.rho
        rows = ad.value(rho).shape[0]
        flat = ad.reshape(rho, (rows, self.dim * self.dim))
        x = ad.concatenate([ad.real(flat), ad.imag(flat)], axis=-1)
        nl = len(self.widths) - 1
        for i in range(nl):
            w = _slice(th, self.structure[f"W{i}"])
            b = _slice(th, self.structure[f"b{i}"])
            b = ad.reshape(b, (ad.value(b).shape[0], -1))
            x = _affine(x, w, b)
            if i < nl - 1:
                x = ad.relu(x)
        return x, carry

    def describe(self):
        return {"kind": self.kind, "dim": self.dim, "arity": self.arity, "hidden": list(self.hidden),
                "last_bias": self.last_bias}


# -- recurrent network -------------------------------------------------------------

class RecurrentNet(Controller):
    """Stacked GRU cells reading the latest outcome (or ``j/N`` in time mode).

    Cell: ``z = σ(W_z x + U_z h + b_z)``, ``r = σ(W_r x + U_r h + b_r)``,
    ``n = tanh(W_n x + U_n (r ⊙ h) + b_n)``, ``h' = z ⊙ h + (1 − z) ⊙ n``.
    """

    kind = "recurrent"

    def __init__(self, arity: int, hidden=(30,), input_mode: str = "outcome",
                 last_bias: float = math.pi, dropout: float = 0.0):
        if input_mode not in ("outcome", "time"):
            raise errors.ConfigError(f"unknown recurrent input mode '{input_mode}'")
        self.arity = arity
        self.hidden = tuple(int(h) for h in hidden)
        self.input_mode = input_mode
        self.last_bias = last_bias
        self.dropout = float(dropout)
        lay = _Layers()
        fan_in = 1
        for i, h in enumerate(self.hidden):
            for gate in "zrn":
                lay.add(f"l{i}_W{gate}", (fan_in, h))
                lay.add(f"l{i}_U{gate}", (h, h))
                lay.add(f"l{i}_b{gate}", (h,))
            fan_in = h
        lay.add("out_W", (fan_in, arity))
        lay.add("out_b", (arity,))
        self.structure, self.n_params = lay.structure, lay.n_params

    def init_params(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        theta = np.zeros(self.n_params)
        for name, (s, e, shape) in self.structure.items():
            if len(shape) == 2:
                theta[s:e] = glorot(rng, *shape).ravel()
        s, e, _ = self.structure["out_b"]
        theta[s:e] = self.last_bias
        return theta

    def begin(self, theta, rows, train=False, rngs=None):
        carry = {"h": [np.zeros((rows, h)) for h in self.hidden], "train": train, "rngs": rngs,
                 "row_origin": np.arange(rows)}
        return carry

    def expand(self, carry, idx):
        out = dict(carry)
        out["h"] = [ad.getitem(h, (idx,)) for h in carry["h"]]
        out["row_origin"] = np.asarray(carry["row_origin"])[idx]
        return out

    def _input(self, inp: StepInput, rows: int, carry):
        if self.input_mode == "time":
            x = np.full((rows, 1), inp.segment / max(inp.n_segments, 1))
        elif inp.last_outcome is None:
            x = np.zeros((rows, 1))
        else:
            x = ad.reshape(inp.last_outcome, (rows, 1))
        if carry.get("train") and self.dropout > 0:
            rngs = carry.get("rngs")
            keep = 1.0 - self.dropout
            if rngs is None:
                raise errors.ConfigError("dropout needs per-trajectory generators")
            origin = carry["row_origin"]
            draws = np.array([rngs[o].random() for o in origin])
            mask = (draws < keep).astype(float)[:, None] / keep
            x = x * mask
        return x

    def step(self, theta, carry, inp: StepInput):
        th = _theta_rows(theta, inp.row_map)
        rows = ad.value(carry["h"][0]).shape[0]
        x = self._input(inp, rows, carry)
        new_h = []
        for i, h in enumerate(carry["h"]):
            p = {k: _slice(th, self.structure[f"l{i}_{k}"]) for k in
                 ("Wz", "Uz", "Wr", "Ur", "Wn", "Un")}
            b = {k: ad.reshape(_slice(th, self.structure[f"l{i}_{k}"]), (ad.value(th).shape[0], -1))
                 for k in ("bz", "br", "bn")}
            z = ad.sigmoid(_affine(x, p["Wz"], b["bz"]) + _affine(h, p["Uz"], 0.0))
            r = ad.sigmoid(_affine(x, p["Wr"], b["br"]) + _affine(h, p["Ur"], 0.0))
            n = ad.tanh(_affine(x, p["Wn"], b["bn"]) + _affine(r * h, p["Un"], 0.0))
            h2 = z * h + (1.0 - z) * n
            new_h.append(h2)
            x = h2
        w = _slice(th, self.structure["out_W"])
        bo = ad.reshape(_slice(th, self.structure["out_b"]), (ad.value(th).shape[0], -1))
        F = _affine(x, w, bo)
        out = dict(carry)
        out["h"] = new_h
        return F, out

    def describe(self):
        return {"kind": self.kind, "arity": self.arity, "hidden": list(self.hidden),
                "input_mode": self.input_mode, "last_bias": self.last_bias, "dropout": self.dropout}


# -- frozen strategies --------------------------------------------------------------

class FunctionController(Controller):
    """Deterministic history → controls map with no trainable parameters."""

    kind = "function"
    supports_continuous = False

    def __init__(self, arity: int, fn, name: str = "function"):
        self.arity = arity
        self.fn = fn
        self.name = name
        self.n_params = 0
        self.structure = {}

    def init_params(self, seed: int) -> np.ndarray:
        return np.zeros(0)

    def begin(self, theta, rows, train=False, rngs=None):
        return {"hist": [() for _ in range(rows)]}

    def expand(self, carry, idx):
        return {"hist": [carry["hist"][i] for i in idx]}

    def step(self, theta, carry, inp: StepInput):
        rows = len(inp.hist_idx)
        hists = [_decode(int(inp.hist_idx[r]), inp.depth) for r in range(rows)]
        F = np.array([self.fn(inp.segment, h) for h in hists], float).reshape(rows, self.arity)
        return F, carry

    def describe(self):
        return {"kind": self.kind, "name": self.name, "arity": self.arity}


def _decode(local: int, depth: int, n_outcomes: int = 2) -> tuple:
    out = []
    for _ in range(depth):
        out.append(local % n_outcomes)
        local //= n_outcomes
    return tuple(reversed(out))


def controller_init(kind: str, task, seed: int, **kw):
    """Build a controller for ``task`` and its initial parameters."""
    if kind == "table":
        ctl = LookupTable.for_task(task, **kw)
    elif kind == "dense":
        ctl = DenseNet(task.layout.dim, task.arity, **kw)
    elif kind == "recurrent":
        ctl = RecurrentNet(task.arity, **kw)
    else:
        raise errors.ConfigError(f"unknown controller kind '{kind}'")
    if task.has_continuous and not ctl.supports_continuous:
        raise errors.ConfigError(f"controller '{kind}' cannot consume continuous outcomes")
    theta = ctl.init_params(seed)
    return ctl, theta


def controller_from_description(desc: dict) -> Controller:
    kind = desc["kind"]
    if kind == "table":
        return LookupTable(desc["arity"], desc["depths"], desc.get("n_outcomes", 2),
                           desc.get("memoryless", False), desc.get("constrained", False),
                           uses=desc.get("uses"))
    if kind == "dense":
        return DenseNet(desc["dim"], desc["arity"], desc["hidden"], desc["last_bias"])
    if kind == "recurrent":
        return RecurrentNet(desc["arity"], desc["hidden"], desc["input_mode"], desc["last_bias"],
                            desc.get("dropout", 0.0))
    raise errors.ConfigError(f"cannot rebuild controller of kind '{kind}'")


def controller_eval(controller: Controller, theta, inp: StepInput, carry=None):
    """Single evaluation on plain arrays (no tape)."""
    theta = np.atleast_2d(np.asarray(theta, float))
    rows = len(inp.hist_idx)
    if carry is None:
        carry = controller.begin(theta, rows)
    F, carry = controller.step(theta, carry, inp)
    return (None if F is None else np.asarray(ad.value(F))), carry
