"""Command-line entry point: ``rsds <subcommand> ...``.

Exit codes: 0 success, 2 invalid input, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import data as D
from .errors import NumericalError, ValidationError
from .evaluation import as_projected, evaluate_model, stability_sweep, train_baseline
from .io import csv_text, load_checkpoint, read_json, save_checkpoint, write_csv, write_json, atomic_write_text
from .manifold import ManifoldSpec, as_tensor, fibonacci_sphere
from .model import BaselineModel, RSDSModel, TrainConfig, rollout, stack_demos, train
from .odeint import IntegrationConfig
from .schemas import validate

DEFAULTS = {
    # preprocessing
    "cutoff": 2.0,
    "base": [0.0, 0.0, 1.0],
    "scale": 0.32,
    "speed": 1.0,
    "n_demos": 3,
    "noise": 0.03,
    # training
    "epochs": 2000,
    "lr": 1e-3,
    "decay_epoch": None,
    "hidden": None,
    "step_size": 1.0 / 32,
    "num_charts": 4,
    "rbf_centers": 50,
    "holdout": 1,
    "baseline": "none",
    "checkpoint_every": 50,
    "batch_size": None,
    # evaluation
    "sweep_n": 1000,
    "conv_tol": 0.05,
    "sweep_dt": 0.04,
    "horizon": 30.0,
    "box": [-1.0, 1.0],
    "seed": 0,
}


def _vector(text):
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _resolve(args) -> dict:
    """defaults < --config file < explicit flags."""
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        extra = read_json(args.config)
        unknown = set(extra) - set(DEFAULTS)
        if unknown:
            raise ValidationError(f"unknown config keys: {', '.join(sorted(unknown))}")
        cfg.update(extra)
    for k in DEFAULTS:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    return cfg


def _load_demos(path):
    obj = read_json(path)
    validate(obj, "demos", str(path))
    return D.demos_from_dict(obj)


def _load_model(path):
    obj = read_json(path)
    validate(obj, "checkpoint", str(path))
    return load_checkpoint(path)


def _split(demos, holdout):
    holdout = int(holdout)
    if holdout < 0 or holdout >= len(demos):
        return list(demos), []
    return list(demos[: len(demos) - holdout]), list(demos[len(demos) - holdout :])


def _write_with_config(path, text, cfg):
    atomic_write_text(path, text)
    write_json(str(path) + ".run.json", cfg)


# ---------------------------------------------------------------- commands


def cmd_preprocess(args):
    cfg = _resolve(args)
    cfg.update(input=args.input, kind=args.kind)
    if args.input.startswith("synthetic:"):
        shape = args.input.split(":", 1)[1]
        rng = np.random.default_rng(cfg["seed"])
        if shape.lower() == "pose":
            raw = D.generate_pose_task(cfg["n_demos"], cfg["noise"] * 0.1, rng)
        else:
            raw = D.generate_synthetic_letters(shape, cfg["n_demos"], cfg["noise"], rng)
    else:
        raw = D.load_trajectories(args.input)
    dim = raw[0].states.shape[1]
    kind = args.kind or {2: "letters", 7: "pose"}.get(dim)
    if kind == "letters":
        if cfg["cutoff"]:
            raw = [D.lowpass_filter(t, cfg["cutoff"]) if len(t) >= 7 else t for t in raw]
        demos = D.project_letters_to_sphere(raw, base=cfg["base"], scale=cfg["scale"])
        if cfg["speed"]:
            demos = [D.retime(d, cfg["speed"]) for d in demos]
    elif kind == "pose":
        demos = D.pose_demonstrations(raw, cfg["cutoff"] or None)
    else:
        raise ValidationError(f"cannot infer the task from {dim}-dimensional states; pass --kind")
    demos = D.shift_to_common_goal(demos)
    obj = D.demos_to_dict(demos)
    obj["run_config"] = cfg
    write_json(args.out, obj)
    goal = ", ".join("%.6g" % v for v in demos[0].goal.tolist())
    print(f"{len(demos)} demonstrations on {demos[0].spec}, lengths {[len(d) for d in demos]}, goal ({goal})")
    return 0


def _integration(cfg):
    return IntegrationConfig(step_size=cfg["step_size"], num_charts=cfg["num_charts"])


def cmd_train(args):
    cfg = _resolve(args)
    cfg.update(demos=args.demos)
    demos = _load_demos(args.demos)
    train_demos, _ = _split(demos, cfg["holdout"])
    spec = demos[0].spec
    hidden = cfg["hidden"] or (32 if spec.is_single_sphere else 16)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg["seed"])
    points, _ = stack_demos(train_demos)
    if cfg["baseline"] == "none":
        model = RSDSModel.create(spec, demos[0].goal, points, rng, hidden, cfg["rbf_centers"], _integration(cfg))
    else:
        model = BaselineModel.create(
            spec, demos[0].goal, points, rng, hidden, cfg["rbf_centers"], _integration(cfg), cfg["baseline"] == "projected"
        )
    model.meta = {"epochs": cfg["epochs"], "seed": cfg["seed"]}
    tcfg = TrainConfig(epochs=cfg["epochs"], lr=cfg["lr"], decay_epoch=cfg["decay_epoch"], batch_size=cfg["batch_size"], shuffle_seed=cfg["seed"])
    history = []
    ckpt = out / "checkpoint.json"

    def on_epoch(epoch, loss):
        history.append(loss)
        if cfg["checkpoint_every"] and (epoch + 1) % cfg["checkpoint_every"] == 0:
            save_checkpoint(ckpt, model, cfg, history)

    train(model, train_demos, tcfg, callback=on_epoch)
    save_checkpoint(ckpt, model, cfg, history)
    write_csv(out / "loss.csv", ["epoch", "loss"], list(enumerate(history)))
    write_json(out / "loss.csv.run.json", cfg)
    print(f"trained {model.kind} for {len(history)} epochs: loss {history[0]:.6g} -> {history[-1]:.6g}")
    return 0


def _eval_variants(model, which):
    if not isinstance(model, BaselineModel):
        return [("rsds", model)]
    if which in ("euclidean", "projected"):
        return [(which, as_projected(model, which == "projected"))]
    return [("projected" if model.projected else "euclidean", model)]


def cmd_eval(args):
    cfg = _resolve(args)
    model, _ = _load_model(args.checkpoint)
    demos = _load_demos(args.demos) if args.demos else []
    train_demos, test_demos = _split(demos, cfg["holdout"]) if demos else ([], [])
    reports = []
    for name, m in _eval_variants(model, args.baseline):
        rep = evaluate_model(
            m, name, train_demos, test_demos, cfg["sweep_n"], cfg["seed"], cfg["conv_tol"], cfg["sweep_dt"], cfg["horizon"], tuple(cfg["box"])
        ) if train_demos else _sweep_only(m, name, cfg)
        rep.config.update(run_config={**cfg, "checkpoint": args.checkpoint, "demos": args.demos})
        validate(json.loads(rep.to_json()), "report")
        reports.append(rep)
    rep = reports[0]
    if args.out:
        atomic_write_text(args.out, rep.to_json())
        _write_with_config(Path(args.out).with_suffix(".csv"), rep.to_csv(), rep.config["run_config"])
    print(rep.to_json(), end="")
    return 0


def _sweep_only(model, name, cfg):
    from .evaluation import MetricsReport

    sw = stability_sweep(model, cfg["sweep_n"], cfg["seed"], cfg["conv_tol"], cfg["sweep_dt"], cfg["horizon"], box=tuple(cfg["box"]))
    return MetricsReport(
        model=name,
        velocity_mse=0.0,
        dtwd=[],
        dtwd_mean=None,
        success_rate=sw.success_rate,
        n_rollouts=sw.n_rollouts,
        n_converged=sw.n_converged,
        n_cut_failures=sw.n_cut_failures,
        lyapunov_violations=sw.lyapunov_violations,
        max_manifold_deviation=sw.max_manifold_deviation,
        config={"seed": cfg["seed"], "conv_tol": cfg["conv_tol"], "sweep_n": cfg["sweep_n"], "sweep_dt": cfg["sweep_dt"], "horizon": cfg["horizon"], "exclusion": 0.1},
    )


def cmd_sweep(args):
    cfg = _resolve(args)
    model, _ = _load_model(args.checkpoint)
    sw = stability_sweep(model, cfg["sweep_n"], cfg["seed"], cfg["conv_tol"], cfg["sweep_dt"], cfg["horizon"], box=tuple(cfg["box"]))
    n = model.task_spec.ambient_dim
    rows = [
        [o["index"], int(o["converged"]), o["final_distance"], o["steps"], *sw.starts[o["index"]].tolist()]
        for o in sw.outcomes()
    ]
    header = ["index", "converged", "final_distance", "steps"] + [f"x{i}" for i in range(n)]
    run = {**cfg, "checkpoint": args.checkpoint}
    _write_with_config(args.out, csv_text(header, rows), run)
    print(f"success rate {sw.success_rate:.4f} ({sw.n_converged}/{sw.n_rollouts}), lyapunov violations {sw.lyapunov_violations}")
    return 0


def cmd_rollout(args):
    cfg = _resolve(args)
    model, _ = _load_model(args.checkpoint)
    task = model.task_spec
    start = task.check_point(as_tensor(args.start), what="--start")
    perturb = None
    if args.perturb_at is not None or args.perturb_to is not None:
        if args.perturb_at is None or args.perturb_to is None:
            raise ValidationError("--perturb-at and --perturb-to must be given together")
        perturb = {int(args.perturb_at): task.check_point(as_tensor(args.perturb_to), what="--perturb-to")}
    steps = args.steps or int(math.ceil(cfg["horizon"] / args.dt))
    r = rollout(model, start, args.dt, steps, cfg["conv_tol"], perturb)
    n = task.ambient_dim
    rows = [[t, *p.tolist(), *v.tolist(), float(l)] for t, p, v, l in zip(r.times, r.points, r.velocities, r.lyapunov)]
    header = ["t"] + [f"x{i}" for i in range(n)] + [f"v{i}" for i in range(n)] + ["lyapunov"]
    run = {**cfg, "checkpoint": args.checkpoint, "start": args.start, "dt": args.dt, "perturb_at": args.perturb_at, "perturb_to": args.perturb_to}
    _write_with_config(args.out, csv_text(header, rows), run)
    print(f"{len(r.times)} points, converged={r.converged}, final distance {r.final_distance:.3g}")
    return 0 if not r.failed else 3


def field_grid(spec: ManifoldSpec, density: int, seed: int = 0, box=(-1.0, 1.0)):
    """Fibonacci lattice on S^2, a regular box grid on Euclidean spaces, seeded samples otherwise."""
    if spec.kind == "sphere" and spec.dim == 2:
        return fibonacci_sphere(density)
    if spec.kind == "euclidean":
        per = int(math.ceil(density ** (1.0 / spec.dim)))
        axes = [np.linspace(box[0], box[1], per)] * spec.dim
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, spec.dim)
        return as_tensor(grid[:density])
    return spec.sample(density, np.random.default_rng(seed), box)


def cmd_export_field(args):
    cfg = _resolve(args)
    model, _ = _load_model(args.checkpoint)
    task = model.task_spec
    grid = field_grid(task, args.grid_density, cfg["seed"], tuple(cfg["box"]))
    # the row nearest the goal is snapped onto it, so the equilibrium is visible
    nearest = int(torch.argmin(task.dist(grid, model.goal.expand_as(grid))))
    grid[nearest] = model.goal
    ev = model.evaluate(grid, raise_on_cut=False)
    scale = model.scaling(grid)
    n = task.ambient_dim
    rows = [
        [*p.tolist(), *v.tolist(), float(s), float(l)]
        for p, v, s, l in zip(grid, ev.velocity, scale, ev.lyapunov)
    ]
    header = [f"x{i}" for i in range(n)] + [f"v{i}" for i in range(n)] + ["scaling", "lyapunov"]
    _write_with_config(args.out, csv_text(header, rows), {**cfg, "checkpoint": args.checkpoint, "grid_density": args.grid_density})
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def cmd_compare(args):
    """Train RSDS and the Euclidean baseline on one dataset; report all three models."""
    cfg = _resolve(args)
    demos = _load_demos(args.demos) if args.demos else D.letter_demonstrations(args.letter, cfg["n_demos"], cfg["noise"], cfg["seed"], speed=cfg["speed"], scale=cfg["scale"])
    train_demos, test_demos = _split(demos, cfg["holdout"])
    spec = demos[0].spec
    hidden = cfg["hidden"] or (32 if spec.is_single_sphere else 16)
    tcfg = TrainConfig(epochs=cfg["epochs"], lr=cfg["lr"], decay_epoch=cfg["decay_epoch"], batch_size=cfg["batch_size"], shuffle_seed=cfg["seed"])
    from .evaluation import train_rsds

    rsds, _ = train_rsds(train_demos, hidden, tcfg, cfg["seed"], cfg["rbf_centers"], _integration(cfg))
    base, _ = train_baseline(train_demos, False, hidden, tcfg, cfg["seed"], cfg["rbf_centers"], _integration(cfg))
    models = [("rsds", rsds), ("euclidean", base), ("projected", as_projected(base, True))]
    reports = []
    for name, m in models:
        rep = evaluate_model(m, name, train_demos, test_demos, cfg["sweep_n"], cfg["seed"], cfg["conv_tol"], cfg["sweep_dt"], cfg["horizon"], tuple(cfg["box"]))
        rep.config.update(run_config={**cfg, "demos": args.demos, "letter": args.letter})
        reports.append(rep)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "compare.json", [r.to_dict() for r in reports])
    _write_with_config(out / "compare.csv", csv_text(reports[0].CSV_FIELDS, [r.csv_row() for r in reports]), reports[0].config["run_config"])
    for r in reports:
        print(f"{r.model:10s} success={r.success_rate:.3f} mse={r.velocity_mse:.4g} dtwd={r.dtwd_mean if r.dtwd_mean is None else round(r.dtwd_mean, 4)} offmanifold={r.max_manifold_deviation:.3g}")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rsds", description="Learn and evaluate stable dynamical systems on manifolds.")
    p.add_argument("--threads", type=int, default=None, help="torch intra-op threads (default: all cores)")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON file with option overrides")
        sp.add_argument("--seed", type=int)
        return sp

    def sweep_flags(sp):
        sp.add_argument("--sweep-n", dest="sweep_n", type=int)
        sp.add_argument("--conv-tol", dest="conv_tol", type=float)
        sp.add_argument("--sweep-dt", dest="sweep_dt", type=float)
        sp.add_argument("--horizon", type=float)
        sp.add_argument("--box", type=_vector, help="low,high for Euclidean factors")

    sp = common(sub.add_parser("preprocess", help="raw trajectories -> demonstration JSON"))
    sp.add_argument("input", help="CSV/JSON file, or synthetic:S|W|P|pose")
    sp.add_argument("out")
    sp.add_argument("--kind", choices=["letters", "pose"])
    sp.add_argument("--cutoff", type=float)
    sp.add_argument("--base", type=_vector)
    sp.add_argument("--scale", type=float)
    sp.add_argument("--speed", type=float)
    sp.add_argument("--n-demos", dest="n_demos", type=int)
    sp.add_argument("--noise", type=float)
    sp.set_defaults(func=cmd_preprocess)

    def train_flags(sp):
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--decay-epoch", dest="decay_epoch", type=int)
        sp.add_argument("--hidden", type=int)
        sp.add_argument("--step-size", dest="step_size", type=float)
        sp.add_argument("--num-charts", dest="num_charts", type=int)
        sp.add_argument("--rbf-centers", dest="rbf_centers", type=int)
        sp.add_argument("--batch-size", dest="batch_size", type=int, help="mini-batch size (default: full batch)")
        sp.add_argument("--holdout", type=int, help="number of trailing demos kept out of training")

    sp = common(sub.add_parser("train", help="fit a model to demonstrations"))
    sp.add_argument("demos")
    sp.add_argument("out", help="output directory")
    train_flags(sp)
    sp.add_argument("--baseline", choices=["none", "euclidean", "projected"])
    sp.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("eval", help="metrics report for a checkpoint"))
    sp.add_argument("checkpoint")
    sp.add_argument("--demos")
    sp.add_argument("--holdout", type=int)
    sp.add_argument("--baseline", choices=["euclidean", "projected"], help="evaluation mode for baseline checkpoints")
    sp.add_argument("--out")
    sweep_flags(sp)
    sp.set_defaults(func=cmd_eval)

    sp = common(sub.add_parser("sweep", help="per-start stability sweep CSV"))
    sp.add_argument("checkpoint")
    sp.add_argument("out")
    sweep_flags(sp)
    sp.set_defaults(func=cmd_sweep)

    sp = common(sub.add_parser("rollout", help="integrate the learned system from a start point"))
    sp.add_argument("checkpoint")
    sp.add_argument("out")
    sp.add_argument("--start", type=_vector, required=True)
    sp.add_argument("--dt", type=float, default=0.02)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--perturb-at", dest="perturb_at", type=int)
    sp.add_argument("--perturb-to", dest="perturb_to", type=_vector)
    sp.add_argument("--conv-tol", dest="conv_tol", type=float)
    sp.add_argument("--horizon", type=float)
    sp.set_defaults(func=cmd_rollout)

    sp = common(sub.add_parser("export-field", help="velocity, scaling and Lyapunov values on a grid"))
    sp.add_argument("checkpoint")
    sp.add_argument("out")
    sp.add_argument("--grid-density", dest="grid_density", type=int, default=400)
    sp.add_argument("--box", type=_vector)
    sp.set_defaults(func=cmd_export_field)

    sp = common(sub.add_parser("compare", help="RSDS vs EuclideanFlow vs projected EuclideanFlow"))
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--demos")
    src.add_argument("--letter")
    sp.add_argument("out", help="output directory")
    train_flags(sp)
    sweep_flags(sp)
    sp.add_argument("--n-demos", dest="n_demos", type=int)
    sp.add_argument("--noise", type=float)
    sp.add_argument("--scale", type=float)
    sp.add_argument("--speed", type=float)
    sp.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads:
        torch.set_num_threads(args.threads)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
