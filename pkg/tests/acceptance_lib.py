"""Shared fixtures for the acceptance suite.

Run as a script (``python3 tests/acceptance_lib.py OUTDIR``) it recomputes the
stability, training and baseline reports from scratch and writes them to
OUTDIR; the determinism check compares those bytes with the in-process run.
"""
from __future__ import annotations

import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np
import torch

from rsds import data as D
from rsds.evaluation import (
    as_projected,
    random_model,
    reproduction_dtwd,
    stability_sweep,
    train_baseline,
    train_rsds,
    velocity_mse,
)
from rsds.manifold import ManifoldSpec, as_tensor
from rsds.model import RSDSModel, TrainConfig, stack_demos

S2 = ManifoldSpec.sphere(2)
LETTER_IDS = ("S", "W")
EPOCHS = 500
MODEL_SEED = 1
SWEEP = dict(n=1000, seed=0, conv_tol=0.05, dt=0.04, horizon=30.0, exclusion=0.1)
RANDOM_SEEDS = (0, 1, 2, 3, 4)
GOAL = (0.0, 0.0, 1.0)

RESULTS: list = []


def record(number, ok, detail, seconds):
    RESULTS.append((number, bool(ok), detail, seconds))


def _digest(t) -> str:
    return hashlib.sha256(np.ascontiguousarray(t.detach().numpy()).tobytes()).hexdigest()[:16]


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


# ---------------------------------------------------------------- training runs


def letter_run(letter):
    demos = D.letter_demonstrations(letter, n_demos=3, noise=0.03, seed=0)
    train, held = demos[:2], demos[2:]
    t0 = time.perf_counter()
    model, history = train_rsds(train, tcfg=TrainConfig(epochs=EPOCHS), seed=MODEL_SEED)
    seconds = time.perf_counter() - t0
    zero = RSDSModel.create(S2, train[0].goal, stack_demos(train)[0], np.random.default_rng(MODEL_SEED))
    return dict(letter=letter, demos=demos, train=train, held=held, model=model, zero=zero, history=history, seconds=seconds)


def baseline_run(run):
    t0 = time.perf_counter()
    model, history = train_baseline(run["train"], projected=False, tcfg=TrainConfig(epochs=EPOCHS), seed=MODEL_SEED)
    return dict(model=model, history=history, seconds=time.perf_counter() - t0)


# ---------------------------------------------------------------- reports


def sweep_summary(model):
    sw = stability_sweep(model, **SWEEP)
    return {
        "success_rate": sw.success_rate,
        "n_rollouts": sw.n_rollouts,
        "n_converged": sw.n_converged,
        "n_cut_failures": sw.n_cut_failures,
        "lyapunov_violations": sw.lyapunov_violations,
        "max_manifold_deviation": sw.max_manifold_deviation,
        "max_steps": int(sw.steps.max()),
        "starts_sha": _digest(sw.starts),
        "final_distance_sha": _digest(sw.final_distance),
    }


def stability_report(runs):
    out = {}
    for s in RANDOM_SEEDS:
        out[f"random-{s}"] = sweep_summary(random_model(S2, as_tensor(GOAL), seed=s))
    for letter in LETTER_IDS:
        out[f"trained-{letter}"] = sweep_summary(runs[letter]["model"])
    return out


def training_report(runs):
    out = {}
    for letter in LETTER_IDS:
        r = runs[letter]
        final = velocity_mse(r["model"], r["train"])
        trained = float(np.mean(reproduction_dtwd(r["model"], r["held"])))
        zero = float(np.mean(reproduction_dtwd(r["zero"], r["held"])))
        out[letter] = {
            "initial_mse": r["history"][0],
            "final_mse": final,
            "mse_ratio": final / r["history"][0],
            "dtwd_trained": trained,
            "dtwd_zero_init": zero,
            "dtwd_ratio": trained / zero,
            "params_sha": _digest(torch.cat([p.reshape(-1) for p in r["model"].params])),
        }
    return out


def baseline_report(run, base, rsds_success):
    free = base["model"]
    rollouts = []
    from rsds.evaluation import reproduce

    for d in run["demos"]:
        r = reproduce(free, d)
        rollouts.append(r.points)
    pts = torch.cat(rollouts)
    dev = (torch.linalg.vector_norm(pts, dim=-1) - 1.0).abs()
    dev = float(dev[torch.isfinite(dev)].max()) if bool(torch.isfinite(dev).any()) else float("inf")
    proj = sweep_summary(as_projected(free, True))
    return {
        "unprojected_max_norm_deviation": dev,
        "projected": proj,
        "rsds_success_rate": rsds_success,
        "baseline_final_loss": base["history"][-1],
    }


def all_reports(runs, base):
    stab = stability_report(runs)
    return {
        "stability": stab,
        "training": training_report(runs),
        "baseline": baseline_report(runs["W"], base, stab["trained-W"]["success_rate"]),
    }


def write_reports(reports, outdir):
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    for name, obj in reports.items():
        (outdir / f"{name}.json").write_text(dumps(obj))


if __name__ == "__main__":
    torch.set_num_threads(1)
    runs = {k: letter_run(k) for k in LETTER_IDS}
    base = baseline_run(runs["W"])
    write_reports(all_reports(runs, base), sys.argv[1])
