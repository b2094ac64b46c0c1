import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from rsds import data as D
from rsds.errors import DataError, RSDSError
from rsds.evaluation import (
    MetricsReport,
    dtwd,
    evaluate_model,
    lyapunov_violations,
    random_model,
    reproduce,
    sample_starts,
    stability_sweep,
    velocity_errors,
    velocity_mse,
)
from rsds.manifold import as_tensor
from rsds.model import RSDSModel
from rsds.schemas import validate

from conftest import SPECS

S2 = SPECS["S2"]
R2 = SPECS["S2"].euclidean(2)
GOAL = as_tensor([0.0, 0.0, 1.0])


def brute_force_dtw(cost):
    """Minimum over every monotone unit-step warping path, enumerated explicitly."""
    n, m = cost.shape
    best = math.inf
    moves = [(1, 0), (0, 1), (1, 1)]

    def walk(i, j, acc):
        nonlocal best
        acc += cost[i, j]
        if acc >= best:
            return
        if (i, j) == (n - 1, m - 1):
            best = acc
            return
        for di, dj in moves:
            if i + di < n and j + dj < m:
                walk(i + di, j + dj, acc)

    walk(0, 0, 0.0)
    return best


# ---------------------------------------------------------------- DTWD


def test_dtwd_examples():
    a = as_tensor([[0.0], [1.0], [2.0]])
    assert dtwd(a, a, R2.euclidean(1)) == 0.0
    b = as_tensor([[0.0], [1.0], [1.0], [2.0]])
    assert dtwd(a, b, R2.euclidean(1)) == 0.0
    c = as_tensor([[0.0], [1.0], [3.0]])
    assert dtwd(a, c, R2.euclidean(1)) == 1.0
    with pytest.raises(RSDSError):
        dtwd(a[:0], a, R2.euclidean(1))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 6), m=st.integers(1, 6))
def test_dtwd_matches_path_enumeration(seed, n, m):
    rng = np.random.default_rng(seed)
    a, b = S2.sample(n, rng), S2.sample(m, rng)
    cost = S2.dist(a[:, None], b[None]).numpy()
    assert abs(dtwd(a, b, S2) - brute_force_dtw(cost)) < 1e-12
    assert abs(dtwd(a, b, S2) - dtwd(b, a, S2)) < 1e-12


# ---------------------------------------------------------------- velocity errors


def test_velocity_mse_zero_for_own_field(rng):
    m = random_model(S2, GOAL, 1, hidden=8, n_centers=10)
    x = S2.sample(30, rng)
    x = x[~m.excluded_starts(x)]

    class Demo:
        points, velocities = x, m.predict_velocity(x)

    assert velocity_mse(m, [Demo]) == 0.0

    class Shifted:
        points, velocities = x, 0.0 * x

    expected = float((m.scaling(x) ** 2).mean())
    assert abs(velocity_mse(m, [Shifted]) - expected) < 1e-12


def test_velocity_errors_mark_cut_points():
    m = random_model(S2, GOAL, 2, hidden=8, n_centers=10)
    x = torch.stack([m.cut_point(), S2.retract(as_tensor([1.0, 0.0, 0.5]))])

    class Demo:
        points, velocities = x, torch.zeros_like(x)

    err, bad = velocity_errors(m, [Demo])
    assert bad.tolist() == [True, False]
    assert float(err[0]) == float(err[1])


# ---------------------------------------------------------------- stability sweep


def test_lyapunov_violation_counting():
    nan = float("nan")
    lyap = as_tensor([[3.0, 3.0, 1.0], [2.0, 3.0, 1.0 + 5e-9], [1.0, nan, 0.5], [0.5, nan, 0.6]])
    assert lyapunov_violations(lyap).tolist() == [0, 0, 1]
    assert lyapunov_violations(lyap, slack=-1e-9).tolist() == [0, 1, 2]


def test_sample_starts_deterministic_and_excluding():
    m = random_model(S2, GOAL, 3, hidden=8, n_centers=10)
    a = sample_starts(m, 300, seed=9)
    b = sample_starts(m, 300, seed=9)
    assert a.shape == (300, 3) and torch.equal(a, b)
    assert float(S2.dist(a, m.cut_point().expand_as(a)).min()) >= 0.1


def test_sweep_on_random_model():
    m = random_model(S2, GOAL, 4, hidden=16, n_centers=20)
    sw = stability_sweep(m, n=60, seed=1)
    assert sw.success_rate == 1.0
    assert sw.n_cut_failures == 0 and sw.lyapunov_violations == 0
    assert sw.max_manifold_deviation < 1e-12
    out = sw.outcomes()
    assert len(out) == 60 and all(o["converged"] and o["final_distance"] < 0.05 for o in out)


# ---------------------------------------------------------------- reports


def test_report_roundtrip_and_schema():
    demos = D.letter_demonstrations("S", n_demos=2)
    m = RSDSModel.create(S2, demos[0].goal, demos[0].points, np.random.default_rng(0), hidden=8, n_centers=10)
    rep = evaluate_model(m, "rsds", demos[:1], demos[1:], sweep_n=20)
    obj = json.loads(rep.to_json())
    validate(obj, "report")
    assert obj["dtwd_mean"] == rep.dtwd[0] and obj["n_rollouts"] == 20
    lines = rep.to_csv().strip().splitlines()
    assert lines[0].split(",") == list(MetricsReport.CSV_FIELDS)
    assert lines[1].startswith("rsds,")
    again = evaluate_model(m, "rsds", demos[:1], demos[1:], sweep_n=20)
    assert again.to_json() == rep.to_json()
    bad = dict(obj, success_rate="high")
    with pytest.raises(DataError):
        validate(bad, "report")


def test_reproduce_converges_for_untrained_model():
    demos = D.letter_demonstrations("S", n_demos=1)
    m = RSDSModel.create(S2, demos[0].goal, demos[0].points, np.random.default_rng(0), hidden=8, n_centers=10)
    r = reproduce(m, demos[0])
    assert r.converged
    assert torch.equal(r.points[0], demos[0].points[0])
