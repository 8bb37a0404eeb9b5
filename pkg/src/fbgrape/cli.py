"""Command-line front end: ``fbgrape {train,eval,extract-tree,grad-check}``."""

from __future__ import annotations

import argparse
import dataclasses
import difflib
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import analysis, errors, plotting, qcore, tasks
from .controllers import controller_init
from .graddiff.adjoint import adjoint_gradient
from .graddiff.engine import rollout
from .graddiff.fdcheck import finite_diff_check
from .training import TrainConfig, evaluate, train

log = logging.getLogger("fbgrape")

CURVE_HEADER = "iteration,mean_return,std_return,wall_ms"
ALIASES = {"lr": "learning_rate", "batch": "batch_size", "bs": "batch_size", "iters": "iterations",
           "n_iterations": "iterations", "lr_decay": "lr_decay_rate", "controller_kind": "controller",
           "gamma_discount": "discount_factor"}
FD_TOL = 1e-6


@dataclass
class RunConfig:
    task: str | None = None
    task_options: dict = field(default_factory=dict)
    seed: int | None = None
    controller: str = "table"
    controller_options: dict = field(default_factory=dict)
    iterations: int = 2000
    batch_size: int | None = None
    learning_rate: float = 0.01
    mode: str = "auto"
    coefficients: str = "future"
    discount_factor: float = 1.0
    value_rate: float = 0.1
    lr_decay_rate: float | None = None
    lr_decay_steps: int = 1000
    clipvalue: float | None = 0.5
    clipnorm: float | None = 1.0
    target_return: float | None = None
    best_of: int = 1
    tiny: bool = False
    workers: int | None = None
    deterministic: bool = False
    out: str = "run"
    emit: dict = field(default_factory=lambda: {"curve": True, "strategy": True, "tree": True, "wigner": True})
    rollouts: int = 1000
    wigner_points: int = 81
    wigner_extent: float | None = None
    log_every: int = 0


_TYPES = {
    "task": (str, True), "task_options": (dict, False), "seed": (int, True), "controller": (str, False),
    "controller_options": (dict, False), "iterations": (int, False), "batch_size": (int, True),
    "learning_rate": (float, False), "mode": (str, False), "coefficients": (str, False),
    "discount_factor": (float, False), "value_rate": (float, False), "lr_decay_rate": (float, True),
    "lr_decay_steps": (int, False), "clipvalue": (float, True), "clipnorm": (float, True),
    "target_return": (float, True), "best_of": (int, False), "tiny": (bool, False), "workers": (int, True),
    "deterministic": (bool, False), "out": (str, False), "emit": (dict, False), "rollouts": (int, False),
    "wigner_points": (int, False), "wigner_extent": (float, True), "log_every": (int, False),
}
_CHOICES = {"mode": ("auto", "mc", "enum"), "coefficients": ("future", "full", "advantage"),
            "controller": ("table", "dense", "recurrent", "analytic")}


def _suggest(key: str, options) -> str:
    if key in ALIASES and ALIASES[key] in options:
        return f"; did you mean '{ALIASES[key]}'?"
    close = difflib.get_close_matches(key, list(options), n=1)
    return f"; did you mean '{close[0]}'?" if close else ""


def _coerce(key: str, value):
    typ, nullable = _TYPES[key]
    if value is None:
        if nullable:
            return None
        raise errors.ConfigError(f"'{key}' may not be null")
    if typ is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if typ is int and isinstance(value, float) and value.is_integer():
        return int(value)
    if typ is int and isinstance(value, bool):
        raise errors.ConfigError(f"'{key}' expects int, got bool")
    if not isinstance(value, typ):
        raise errors.ConfigError(f"'{key}' expects {typ.__name__}, got {type(value).__name__} ({value!r})")
    if key in _CHOICES and value not in _CHOICES[key]:
        raise errors.ConfigError(f"'{key}' must be one of {_CHOICES[key]}, got {value!r}")
    return value


def _parse_sets(items) -> list[tuple[str, object]]:
    out = []
    for it in items or []:
        if "=" not in it:
            raise errors.ConfigError(f"--set expects key=value, got '{it}'")
        k, v = it.split("=", 1)
        out.append((k.strip(), yaml.safe_load(v) if v.strip() else None))
    return out


def parse_config(path=None, sets=(), flags: dict | None = None) -> RunConfig:
    """Merge defaults, per-task defaults, a YAML/JSON file, ``key=value`` overrides and flags."""
    raw: dict = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        loaded = yaml.safe_load(text) or {}
        if not isinstance(loaded, dict):
            raise errors.ConfigError("config file must hold a mapping")
        raw.update(loaded)
    pairs = list(raw.items()) + list(_parse_sets(sets))
    for k, v in (flags or {}).items():
        if v is not None:
            pairs.append((k, v))

    name = next((v for k, v in reversed(pairs) if k == "task"), None)
    if name is not None and name not in tasks.CATALOG:
        raise errors.ConfigError(f"unknown task '{name}'{_suggest(name, tasks.CATALOG)}")
    task_opts = tasks.task_options(name) if name else {}

    merged = dataclasses.asdict(RunConfig())
    if name:
        for k, v in tasks.RUN_DEFAULTS.get(name, {}).items():
            merged[k] = v
    for k, v in pairs:
        head, _, sub = k.partition(".")
        if sub:
            if head not in ("task_options", "controller_options", "emit"):
                raise errors.ConfigError(f"unknown section '{head}'{_suggest(head, merged)}")
            if head == "task_options" and sub not in task_opts:
                raise errors.ConfigError(f"unknown option '{sub}' for task '{name}'{_suggest(sub, task_opts)}")
            merged[head] = {**merged[head], sub: v}
        elif k in merged:
            if k in ("task_options", "controller_options", "emit") and isinstance(v, dict):
                if k == "task_options":
                    for sk in v:
                        if sk not in task_opts:
                            raise errors.ConfigError(
                                f"unknown option '{sk}' for task '{name}'{_suggest(sk, task_opts)}")
                merged[k] = {**merged[k], **v}
            else:
                merged[k] = v
        elif k in task_opts:
            merged["task_options"] = {**merged["task_options"], k: v}
        else:
            raise errors.ConfigError(f"unknown key '{k}'{_suggest(k, list(merged) + list(task_opts))}")
    for k in list(merged):
        merged[k] = _coerce(k, merged[k])
    cfg = RunConfig(**merged)
    if cfg.seed is None:
        raise errors.ConfigError("a seed is required (config 'seed' or --seed)")
    if cfg.task is None:
        raise errors.ConfigError("no task given (config 'task' or --set task=NAME)")
    unknown_emit = set(cfg.emit) - {"curve", "strategy", "tree", "wigner"}
    if unknown_emit:
        raise errors.ConfigError(f"unknown emit flags {sorted(unknown_emit)}")
    # fill the task's own defaults so the resolved config is complete
    base = dict(tasks.TINY.get(cfg.task, {})) if cfg.tiny else {}
    cfg.task_options = {**task_opts, **base, **cfg.task_options}
    if cfg.batch_size is None:
        cfg.batch_size = build_task(cfg).default_batch
    if cfg.deterministic:
        cfg.workers = 1
    elif cfg.workers is None:
        cfg.workers = os.cpu_count() or 1
    return cfg


def build_task(cfg: RunConfig):
    return tasks.build_task(cfg.task, **cfg.task_options)


def train_config(cfg: RunConfig, task, seed: int) -> TrainConfig:
    return TrainConfig(iterations=cfg.iterations, batch_size=cfg.batch_size or task.default_batch,
                       learning_rate=cfg.learning_rate, seed=seed, mode=cfg.mode, coefficients=cfg.coefficients,
                       discount_factor=cfg.discount_factor, value_rate=cfg.value_rate,
                       target_return=cfg.target_return, lr_decay_rate=cfg.lr_decay_rate,
                       lr_decay_steps=cfg.lr_decay_steps, clipvalue=cfg.clipvalue, clipnorm=cfg.clipnorm,
                       workers=cfg.workers, log_every=cfg.log_every)


def _controller(cfg: RunConfig, task, seed: int):
    if cfg.controller == "analytic":
        if task.name != "purification":
            raise errors.ConfigError("the analytic controller exists for the purification task only")
        return tasks.analytic_purification_strategy(task.params["measurements"]), np.zeros(0)
    return controller_init(cfg.controller, task, seed, **cfg.controller_options)


# -- artifacts ---------------------------------------------------------------------------------

def _fmt(v: float) -> str:
    return repr(float(v))


def write_curve(path, curve, zero_wall: bool = False) -> None:
    lines = [CURVE_HEADER]
    for it, mu, sd, ms in curve:
        lines.append(f"{int(it)},{_fmt(mu)},{_fmt(sd)},{_fmt(0.0 if zero_wall else ms)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def write_wigner_csv(path, w, xvec, pvec) -> None:
    head = [f"# x: {_fmt(xvec[0])} {_fmt(xvec[-1])} {len(xvec)}",
            f"# p: {_fmt(pvec[0])} {_fmt(pvec[-1])} {len(pvec)}",
            "# rows: p ascending, columns: x ascending"]
    body = [",".join(f"{v:.10e}" for v in row) for row in np.asarray(w, float)]
    Path(path).write_text("\n".join(head + body) + "\n", encoding="utf-8", newline="\n")


def mean_final_state(task, controller, theta, rollouts: int, seed: int) -> np.ndarray:
    if not task.has_continuous and task.branch_count() <= 4096:
        r = rollout(task, controller, theta, mode="enum", grad=False)
    else:
        r = rollout(task, controller, theta, mode="mc", batch=rollouts, seed=seed, grad=False)
    return np.einsum("r,rij->ij", r.weights, r.final_states)


def diagnostics(task, rho: np.ndarray) -> dict:
    out = {"leakage": float(task.leakage)}
    if task.name == "gkp_prep":
        d = task.params["delta"]
        out["stabilizer_mean"] = tasks.gkp_stabilizer_mean(rho, d)
        grid = qcore.build_state("gkp", task.layout, delta=d)
        out["grid_fidelity"] = qcore.fidelity(rho, grid)
    elif task.target is not None:
        out["mean_final_fidelity"] = float(np.real(np.conj(task.target) @ rho @ task.target))
    return out


def emit_wigner(cfg: RunConfig, task, rho, out: Path) -> list[str]:
    if task.layout.fock_cutoff < 2:
        return []
    ext = cfg.wigner_extent or min(7.0, math.sqrt(2 * task.layout.fock_cutoff) + 1.0)
    xs = np.linspace(-ext, ext, cfg.wigner_points)
    written = []
    states = {"final": rho}
    if task.target is not None:
        states["target"] = np.outer(task.target, np.conj(task.target))
    for label, r in states.items():
        w = qcore.wigner_grid(r, xs, xs, task.layout)
        write_wigner_csv(out / f"wigner_{label}.csv", w, xs, xs)
        plotting.plot_wigner(w, xs, xs, out / f"wigner_{label}.png", f"{task.name}: {label}")
        written += [f"wigner_{label}.csv", f"wigner_{label}.png"]
    return written


def _tree_for(task, controller, theta, cfg: RunConfig, exact: bool | None = None):
    if task.has_continuous:
        return None
    if exact is None:
        exact = task.branch_count() <= 4096
    return analysis.extract_tree(task, controller, theta, n_rollouts=cfg.rollouts, seed=cfg.seed, exact=exact)


# -- subcommands ---------------------------------------------------------------------------------

def cmd_train(cfg: RunConfig) -> int:
    task = build_task(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    best = None
    for k in range(cfg.best_of):
        seed = cfg.seed + k
        ctl, th0 = _controller(cfg, task, seed)
        if cfg.controller == "analytic":
            raise errors.ConfigError("the analytic controller is frozen; use 'eval'")
        res = train(task, ctl, th0, train_config(cfg, task, seed))
        score, se = evaluate(task, ctl, res.theta, cfg.rollouts, seed=10_000 + seed)
        print(f"seed {seed}: final mean return {score:.8f}" + (f" ± {se:.2g}" if se else " (exact)"))
        if best is None or score > best[0]:
            best = (score, se, seed, ctl, res)
    score, se, seed, ctl, res = best
    written = []
    if cfg.emit.get("curve", True):
        write_curve(out / "curve.csv", res.curve, zero_wall=cfg.deterministic)
        plotting.plot_curve(res.curve, out / "curve.png", f"{task.name} (seed {seed})")
        written += ["curve.csv", "curve.png"]
    rho = mean_final_state(task, ctl, res.theta, cfg.rollouts, cfg.seed)
    diag = diagnostics(task, rho)
    if cfg.emit.get("strategy", True):
        extra = {"seed": seed, "mean_return": score, "stopped": res.stopped, "adam_steps": res.adam.t, **diag}
        analysis.export_strategy(analysis.Strategy(task.name, _jsonable(cfg.task_options), ctl, res.theta, extra),
                                 out / "strategy.json")
        written.append("strategy.json")
    if cfg.emit.get("tree", True):
        tree = _tree_for(task, ctl, res.theta, cfg)
        if tree is not None:
            analysis.export_tree(tree, out / "tree.json")
            written.append("tree.json")
    if cfg.emit.get("wigner", True):
        written += emit_wigner(cfg, task, rho, out)
    print(f"task {task.name}: best seed {seed}, mean return {score:.8f}")
    for k, v in diag.items():
        print(f"  {k}: {v:.6g}")
    print(f"wrote {', '.join(written)} to {out}")
    return 0


def _strategy_task(cfg: RunConfig, strat: analysis.Strategy):
    if cfg.task not in (None, strat.task):
        raise errors.ConfigError(f"strategy is for task '{strat.task}', config names '{cfg.task}'")
    return tasks.build_task(strat.task, **strat.overrides)


def cmd_eval(cfg: RunConfig, strategy_path=None) -> int:
    if strategy_path is not None:
        strat = analysis.load_strategy(strategy_path)
        task = _strategy_task(cfg, strat)
        ctl, theta = strat.controller, strat.theta
    else:
        task = build_task(cfg)
        if cfg.controller != "analytic":
            raise errors.ConfigError("eval needs --strategy FILE or controller=analytic")
        ctl, theta = _controller(cfg, task, cfg.seed)
    score, se = evaluate(task, ctl, theta, cfg.rollouts, seed=cfg.seed)
    rho = mean_final_state(task, ctl, theta, cfg.rollouts, cfg.seed)
    diag = diagnostics(task, rho)
    how = "exact enumeration" if se == 0.0 else f"{cfg.rollouts} rollouts, standard error {se:.3g}"
    print(f"task {task.name}: mean return {score:.10f} ({how})")
    if "purity" in task.reward_mode:
        print(f"  impurity: {1.0 - score:.10f}")
    for k, v in diag.items():
        print(f"  {k}: {v:.6g}")
    return 0


def cmd_extract_tree(cfg: RunConfig, strategy_path, exact: bool | None) -> int:
    strat = analysis.load_strategy(strategy_path)
    task = _strategy_task(cfg, strat)
    tree = _tree_for(task, strat.controller, strat.theta, cfg, exact)
    if tree is None:
        raise errors.ContractError("decision trees need discrete outcomes")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    analysis.export_tree(tree, out / "tree.json")
    print(analysis.render_tree(tree))
    print(f"wrote tree.json to {out}")
    return 0


def grad_check_task(name: str, kinds, seed: int, h: float, tiny: bool = True, overrides=None) -> list[dict]:
    task = tasks.tiny_task(name, **(overrides or {})) if tiny else tasks.build_task(name, **(overrides or {}))
    rows = []
    for kind in kinds:
        try:
            ctl, th = controller_init(kind, task, seed)
        except errors.ConfigError as e:
            rows.append({"task": name, "controller": kind, "skipped": str(e)})
            continue
        modes = ["mc"] + (["enum"] if not task.has_continuous and task.branch_count() <= 4096 else [])
        for mode in modes:
            rep = finite_diff_check(task, ctl, th, h=h, seed=seed, mode=mode)
            row = {"task": name, "controller": kind, "mode": mode, "fd": rep.max_rel_error}
            if mode == "mc" and not task.has_continuous:
                base = rollout(task, ctl, th, mode="mc", batch=3, seed=seed)
                g_adj, _ = adjoint_gradient(task, ctl, th, base.outcomes, base.consts, base.coeffs)
                row["adjoint"] = float(np.max(np.abs(g_adj - base.grad)))
            rows.append(row)
    return rows


def cmd_grad_check(cfg: RunConfig, all_tasks: bool, h: float, kinds) -> int:
    names = list(tasks.CATALOG) if all_tasks else [cfg.task]
    worst = 0.0
    for name in names:
        over = {} if all_tasks else {k: v for k, v in cfg.task_options.items()
                                     if tasks.task_options(name).get(k) != v}
        for row in grad_check_task(name, kinds, cfg.seed, h, tiny=cfg.tiny or all_tasks, overrides=over):
            if "skipped" in row:
                print(f"{row['task']:<22} {row['controller']:<9} skipped: {row['skipped']}")
                continue
            worst = max(worst, row["fd"])
            adj = f" adjoint_abs_diff={row['adjoint']:.2e}" if "adjoint" in row else ""
            print(f"{row['task']:<22} {row['controller']:<9} {row['mode']:<4} "
                  f"h={h:.0e} max_rel_error={row['fd']:.3e}{adj}")
    print(f"worst max_rel_error {worst:.3e} ({'ok' if worst < FD_TOL else 'ABOVE'} {FD_TOL:.0e})")
    return 0 if worst < FD_TOL else 3


def _jsonable(d: dict) -> dict:
    return json.loads(json.dumps(d, default=lambda o: o.tolist() if hasattr(o, "tolist") else str(o)))


# -- entry point ------------------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML or JSON run configuration")
    common.add_argument("--set", dest="sets", action="append", metavar="KEY=VALUE", default=[],
                        help="override one setting (repeatable); task options may be given bare")
    common.add_argument("--seed", type=int, help="base random seed (required unless in the config)")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--workers", type=int, help="worker threads for Monte-Carlo batches")
    common.add_argument("--deterministic", action="store_true", default=None,
                        help="single worker and byte-identical outputs")
    common.add_argument("--rollouts", type=int, help="trajectories for evaluation and tree extraction")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="fbgrape", description="Feedback control discovery by gradient ascent "
                                "through measurement-conditioned quantum dynamics.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train a controller and write artifacts")
    ev = sub.add_parser("eval", parents=[common], help="evaluate a saved or analytic strategy")
    ev.add_argument("--strategy", metavar="FILE")
    tr = sub.add_parser("extract-tree", parents=[common], help="decision tree of a saved strategy")
    tr.add_argument("--strategy", metavar="FILE")
    g = tr.add_mutually_exclusive_group()
    g.add_argument("--exact", dest="exact", action="store_true", default=None)
    g.add_argument("--sampled", dest="exact", action="store_false")
    gc = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient check")
    gc.add_argument("--all", action="store_true", help="every catalog task at tiny size")
    gc.add_argument("--h", type=float, default=1e-5)
    gc.add_argument("--controllers", default="table,dense,recurrent")
    return p


def main(argv=None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "extract-tree" and not args.strategy:
        parser.error("extract-tree requires --strategy FILE")
    flags = {"seed": args.seed, "out": args.out, "workers": args.workers,
             "deterministic": args.deterministic, "rollouts": args.rollouts}
    sets = list(args.sets)
    try:
        needs_task = args.command in ("train",) or (args.command == "eval" and not args.strategy) or (
            args.command == "grad-check" and not args.all)
        if not needs_task and not any(s.startswith("task=") for s in sets) and args.config is None:
            sets = sets + ["task=" + _strategy_task_name(args)]
        cfg = parse_config(args.config, sets, flags)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.strategy)
        if args.command == "extract-tree":
            return cmd_extract_tree(cfg, args.strategy, args.exact)
        kinds = [k.strip() for k in args.controllers.split(",") if k.strip()]
        return cmd_grad_check(cfg, args.all, args.h, kinds)
    except errors.ConfigError as e:
        print(f"fbgrape: configuration error: {e}", file=sys.stderr)
        return 2
    except (errors.FbgrapeError, OSError) as e:
        print(f"fbgrape: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


def _strategy_task_name(args) -> str:
    if getattr(args, "strategy", None):
        return json.loads(Path(args.strategy).read_text(encoding="utf-8")).get("task", "purification")
    return "purification"


if __name__ == "__main__":
    sys.exit(main())
