"""Acceptance criteria, each run at its stated tolerance and reported as one PASS/FAIL line."""
import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch

import acceptance_lib as A
from rsds import data as D
from rsds.evaluation import random_model, train_rsds
from rsds.manifold import as_tensor, fibonacci_sphere, tangent_basis
from rsds.model import TrainConfig, rollout
from rsds.netfield import VectorFieldNet
from rsds.odeint import (
    IntegrationConfig,
    apply_pullback,
    flow_chartwise,
    flow_with_backward_differential,
    flow_with_forward_differential,
    flow_with_jacobians,
    solve_preimage,
)

from conftest import SPECS, random_tangent, tangent_fd

torch.set_num_threads(1)
pytestmark = pytest.mark.slow
S2 = SPECS["S2"]
CFG = IntegrationConfig()


def rel_fro(a, b):
    return float(torch.linalg.matrix_norm(a - b) / torch.linalg.matrix_norm(b))


@pytest.fixture(scope="session")
def runs():
    return {k: A.letter_run(k) for k in A.LETTER_IDS}


@pytest.fixture(scope="session")
def baseline(runs):
    return A.baseline_run(runs["W"])


@pytest.fixture(scope="session")
def stability(runs):
    t0 = time.perf_counter()
    rep = A.stability_report(runs)
    return rep, time.perf_counter() - t0


@pytest.fixture(scope="session")
def training(runs):
    return A.training_report(runs)


@pytest.fixture(scope="session")
def baseline_rep(runs, baseline, stability):
    t0 = time.perf_counter()
    rep = A.baseline_report(runs["W"], baseline, stability[0]["trained-W"]["success_rate"])
    return rep, time.perf_counter() - t0


# ---------------------------------------------------------------- 1: geometry kernel


def test_criterion_1_geometry_kernel():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = {"roundtrip": 0.0, "isometry": 0.0, "idempotency": 0.0}
    for spec in SPECS.values():
        x = spec.sample(10_000, rng)
        u = random_tangent(spec, x, rng, math.pi - 0.1)
        worst["roundtrip"] = max(worst["roundtrip"], float((spec.log(x, spec.exp(x, u)) - u).abs().max()))
        y = spec.sample(10_000, rng)
        keep = (spec.block_dist(x, y) < math.pi - 1e-3).all(-1)
        xs, ys, us = x[keep], y[keep], u[keep]
        vs = random_tangent(spec, xs, rng, 2.0)
        tu, tv = spec.transport(xs, ys, us), spec.transport(xs, ys, vs)
        worst["isometry"] = max(
            worst["isometry"],
            float((spec.norm(tu) - spec.norm(us)).abs().max()),
            float((spec.inner(ys, tu, tv) - spec.inner(xs, us, vs)).abs().max()),
        )
        w = as_tensor(rng.standard_normal(x.shape))
        p = spec.proj(x, w)
        worst["idempotency"] = max(worst["idempotency"], float((spec.proj(x, p) - p).abs().max()))
    secs = time.perf_counter() - t0
    ok = worst["roundtrip"] <= 1e-8 and worst["isometry"] <= 1e-10 and worst["idempotency"] <= 1e-12 and secs < 10
    A.record(1, ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()), secs)
    assert ok, (worst, secs)


# ---------------------------------------------------------------- 2: differentials


def test_criterion_2_differentials():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst_bwd = worst_fwd = worst_id = 0.0
    for k in range(20):
        net = VectorFieldNet.create(S2, hidden=32, rng=np.random.default_rng(100 + k), last_scale=1.0)
        x = S2.sample(1, rng)[0]
        fwd = flow_with_forward_differential(net, x, CFG)
        y = fwd.endpoint
        bwd = flow_with_backward_differential(net, y, CFG)
        bx, by = tangent_basis(S2, x), tangent_basis(S2, y)
        _, fd_psi = tangent_fd(S2, lambda p: flow_chartwise(net, p, CFG), bwd.endpoint, bx, h=1e-5)
        _, fd_inv = tangent_fd(S2, lambda q: solve_preimage(net, q, CFG), y, by, h=1e-5)
        worst_bwd = max(worst_bwd, rel_fro(bwd.linmap @ bx.T, fd_psi))
        worst_fwd = max(worst_fwd, rel_fro(fwd.linmap @ by.T, fd_inv))
        worst_id = max(worst_id, float((fwd.linmap @ bwd.linmap @ bx.T - bx.T).abs().max()))
    secs = time.perf_counter() - t0
    ok = max(worst_bwd, worst_fwd, worst_id) <= 1e-3 and secs < 120
    A.record(2, ok, f"D_x psi vs FD {worst_bwd:.1e}, pullback vs FD {worst_fwd:.1e}, composition {worst_id:.1e}", secs)
    assert ok


# ---------------------------------------------------------------- 3: pullback redundancy


def test_criterion_3_pullback_redundancy():
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    worst = 0.0
    for k in range(100):
        model = random_model(S2, as_tensor(A.GOAL), seed=1000 + k, hidden=32, n_centers=5)
        x = S2.sample(1, rng)[0]
        y, charts = flow_with_jacobians(model.diffeo, x, model.cfg)
        ydot = S2.proj(y, as_tensor(rng.standard_normal(3)))
        a = model.pullback_constrained(x, ydot)
        b = apply_pullback(S2, charts, ydot)
        worst = max(worst, float(S2.norm(a - b) / S2.norm(b)))
    secs = time.perf_counter() - t0
    ok = worst <= 1e-4 and secs < 60
    A.record(3, ok, f"max relative disagreement {worst:.1e} over 100 triples", secs)
    assert ok


# ---------------------------------------------------------------- 4: stability


def test_criterion_4_stability(stability):
    rep, secs = stability
    bad = {k: v for k, v in rep.items() if v["success_rate"] != 1.0 or v["lyapunov_violations"] != 0}
    ok = not bad and secs < 300
    rates = ", ".join(f"{k} {v['success_rate']:.3f}" for k, v in rep.items())
    A.record(4, ok, f"success {rates}; violations {sum(v['lyapunov_violations'] for v in rep.values())}", secs)
    assert ok, bad


# ---------------------------------------------------------------- 5: training


def test_criterion_5_training(runs, training):
    secs = sum(r["seconds"] for r in runs.values())
    ok = secs < 1800 and all(v["mse_ratio"] <= 0.1 and v["dtwd_ratio"] <= 0.5 for v in training.values())
    detail = "; ".join(f"{k}: mse ratio {v['mse_ratio']:.3f}, dtwd ratio {v['dtwd_ratio']:.3f}" for k, v in training.items())
    A.record(5, ok, detail, secs)
    assert ok, training


# ---------------------------------------------------------------- 6: baseline contrast


def test_criterion_6_baseline_contrast(baseline, baseline_rep):
    rep, secs = baseline_rep
    secs += baseline["seconds"]
    off = rep["unprojected_max_norm_deviation"]
    ok = off > 0.01 and rep["rsds_success_rate"] == 1.0 and rep["rsds_success_rate"] >= rep["projected"]["success_rate"] and secs < 1800
    A.record(6, ok, f"unprojected off-manifold {off:.3f}; W success rsds {rep['rsds_success_rate']:.3f} vs projected {rep['projected']['success_rate']:.3f}", secs)
    assert ok, rep


# ---------------------------------------------------------------- 7: magnitude law


def test_criterion_7_magnitude_law(runs):
    t0 = time.perf_counter()
    model = runs["W"]["model"]
    grid = fibonacci_sphere(1000)
    ev = model.evaluate(grid, raise_on_cut=False)
    moving = ~ev.cut & (model.goal_distance(grid) > 1e-9)
    k = model.scaling(grid)[moving]
    err = float(((S2.norm(ev.velocity[moving]) - k).abs() / k).max())
    ok = err <= 1e-10 and int(moving.sum()) >= 998
    A.record(7, ok, f"max relative |v| vs scaling {err:.1e} on {int(moving.sum())} points", time.perf_counter() - t0)
    assert ok


# ---------------------------------------------------------------- 8: product manifold


def test_criterion_8_pose_task():
    t0 = time.perf_counter()
    spec = SPECS["R3xS3"]
    demos = D.pose_demonstrations(D.generate_pose_task(3, 0.01, np.random.default_rng(0)))
    model, history = train_rsds(demos[:2], hidden=16, tcfg=TrainConfig(epochs=300), seed=0)
    start = demos[2].points[0]
    s3 = SPECS["S3"]
    q_push = s3.exp(start[3:], s3.proj(start[3:], as_tensor([0.0, 0.4, -0.3, 0.2])))
    push = torch.cat([start[:3] + as_tensor([0.15, -0.1, 0.1]), q_push])
    r = rollout(model, start, dt=0.05, max_steps=2000, conv_tol=0.05, perturb={20: push})
    goal_dist = float(spec.dist(r.points[-1], demos[0].goal))
    ok = r.converged and r.final_distance < 0.05 and goal_dist < 0.05 and history[-1] < history[0] and time.perf_counter() - t0 < 1200
    A.record(8, ok, f"converged={r.converged}, final distance {r.final_distance:.4f} after {len(r.times)} steps, loss {history[0]:.3f}->{history[-1]:.3f}", time.perf_counter() - t0)
    assert ok


# ---------------------------------------------------------------- 9: determinism


def test_criterion_9_determinism(stability, training, baseline_rep, tmp_path):
    t0 = time.perf_counter()
    first = {"stability": stability[0], "training": training, "baseline": baseline_rep[0]}
    A.write_reports(first, tmp_path / "a")
    script = Path(__file__).with_name("acceptance_lib.py")
    subprocess.run([sys.executable, str(script), str(tmp_path / "b")], check=True, cwd=script.parent)
    same = {n: (tmp_path / "a" / f"{n}.json").read_bytes() == (tmp_path / "b" / f"{n}.json").read_bytes() for n in first}
    ok = all(same.values())
    A.record(9, ok, ", ".join(f"{k} {'identical' if v else 'DIFFERENT'}" for k, v in same.items()), time.perf_counter() - t0)
    assert ok, same
