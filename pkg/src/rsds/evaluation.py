"""Metrics (velocity MSE, DTWD, sweep success rate), reports and Euclidean baselines."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .errors import RSDSError
from .io import csv_text, dump_json
from .manifold import DTYPE, ManifoldSpec, as_tensor
from .model import BaselineModel, RSDSModel, TrainConfig, rollout, rollout_batch, stack_demos, train
from .odeint import IntegrationConfig

LYAPUNOV_SLACK = 1e-8


# ---------------------------------------------------------------- accuracy metrics


def velocity_errors(model, demos):
    """Per-point squared velocity errors and a mask of points that could not be evaluated."""
    points, vels = stack_demos(demos)
    if callable(model) and not hasattr(model, "evaluate"):
        pred = as_tensor(model(points))
        bad = ~torch.isfinite(pred).all(-1)
    else:
        ev = model.evaluate(points, raise_on_cut=False)
        pred = ev.velocity
        bad = ev.cut | ~torch.isfinite(pred).all(-1)
    err = ((pred - vels) ** 2).sum(-1)
    if bool(bad.any()):
        finite = err[~bad]
        err = torch.where(bad, finite.max() if finite.numel() else torch.zeros(()), err)
    return err, bad


def velocity_mse(model, demos) -> float:
    """Mean squared velocity error over every demonstration point."""
    err, _ = velocity_errors(model, demos)
    return float(err.mean())


def dtwd(a, b, spec: ManifoldSpec) -> float:
    """Dynamic time warping distance with geodesic local cost and unit steps."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise RSDSError("dtwd needs non-empty trajectories")
    cost = spec.dist(a[:, None, :], b[None, :, :]).numpy()
    n, m = cost.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        row, prev = acc[i], acc[i - 1]
        ci = cost[i - 1]
        for j in range(1, m + 1):
            row[j] = ci[j - 1] + min(prev[j], row[j - 1], prev[j - 1])
    return float(acc[n, m])


def reproduce(model, demo, dt: Optional[float] = None, horizon_factor: float = 3.0, conv_tol: float = 0.05):
    """Roll the model out from a demonstration's first point."""
    dt = dt or demo.dt
    steps = int(math.ceil(horizon_factor * len(demo)))
    return rollout(model, demo.points[0], dt, steps, conv_tol)


def reproduction_dtwd(model, demos, dt=None, conv_tol: float = 0.05):
    spec = model.target if isinstance(model, BaselineModel) else model.spec
    out = []
    for d in demos:
        r = reproduce(model, d, dt, conv_tol=conv_tol)
        out.append(dtwd(r.points, d.points, spec))
    return out


# ---------------------------------------------------------------- stability sweep


@dataclass
class SweepResult:
    n_rollouts: int
    n_converged: int
    n_cut_failures: int
    lyapunov_violations: int
    max_manifold_deviation: float
    starts: torch.Tensor
    converged: torch.Tensor
    final_distance: torch.Tensor
    steps: torch.Tensor

    @property
    def success_rate(self) -> float:
        return self.n_converged / self.n_rollouts if self.n_rollouts else 0.0

    def outcomes(self):
        return [
            {"index": i, "converged": bool(c), "final_distance": float(d), "steps": int(s)}
            for i, (c, d, s) in enumerate(zip(self.converged, self.final_distance, self.steps))
        ]


def sample_starts(model, n: int, seed: int, exclusion: float = 0.1, box=(-1.0, 1.0)):
    """``n`` uniform starts on the task manifold, skipping the excluded region."""
    spec = model.target if isinstance(model, BaselineModel) else model.spec
    rng = np.random.default_rng(seed)
    kept = []
    count = 0
    for _ in range(100):
        x = spec.sample(n, rng, box)
        x = x[~model.excluded_starts(x, exclusion)]
        kept.append(x)
        count += x.shape[0]
        if count >= n:
            break
    return torch.cat(kept)[:n]


def lyapunov_violations(lyap: torch.Tensor, slack: float = LYAPUNOV_SLACK) -> torch.Tensor:
    """Per-rollout count of steps where the Lyapunov value failed to decrease."""
    cur, nxt = lyap[:-1], lyap[1:]
    both = torch.isfinite(cur) & torch.isfinite(nxt)
    return ((nxt - cur >= slack) & both).sum(0)


def stability_sweep(
    model,
    n: int = 1000,
    seed: int = 0,
    conv_tol: float = 0.05,
    dt: float = 0.04,
    horizon: float = 30.0,
    exclusion: float = 0.1,
    box=(-1.0, 1.0),
) -> SweepResult:
    starts = sample_starts(model, n, seed, exclusion, box)
    steps = int(math.ceil(horizon / dt))
    rb = rollout_batch(model, starts, dt, steps, conv_tol)
    task = model.target if isinstance(model, BaselineModel) else model.spec
    dev = float(task.on_manifold_residual(rb.points).max())
    viol = lyapunov_violations(rb.lyapunov) if not isinstance(model, BaselineModel) else torch.zeros(n, dtype=torch.long)
    return SweepResult(
        n_rollouts=starts.shape[0],
        n_converged=int(rb.converged.sum()),
        n_cut_failures=int(rb.failed.sum()),
        lyapunov_violations=int((viol > 0).sum()),
        max_manifold_deviation=dev,
        starts=starts,
        converged=rb.converged,
        final_distance=rb.final_distance,
        steps=rb.lengths - 1,
    )


# ---------------------------------------------------------------- reports


@dataclass
class MetricsReport:
    model: str
    velocity_mse: float
    dtwd: list
    dtwd_mean: float
    success_rate: float
    n_rollouts: int
    n_converged: int
    n_cut_failures: int
    lyapunov_violations: int
    max_manifold_deviation: float
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return dump_json(self.to_dict())

    CSV_FIELDS = (
        "model",
        "velocity_mse",
        "dtwd_mean",
        "success_rate",
        "n_rollouts",
        "n_converged",
        "n_cut_failures",
        "lyapunov_violations",
        "max_manifold_deviation",
    )

    def csv_row(self):
        return [getattr(self, k) for k in self.CSV_FIELDS]

    def to_csv(self) -> str:
        return csv_text(self.CSV_FIELDS, [self.csv_row()])


def evaluate_model(
    model,
    name: str,
    train_demos,
    test_demos,
    sweep_n: int = 1000,
    seed: int = 0,
    conv_tol: float = 0.05,
    sweep_dt: float = 0.04,
    horizon: float = 30.0,
    box=(-1.0, 1.0),
) -> MetricsReport:
    mse = velocity_mse(model, train_demos)
    dists = reproduction_dtwd(model, test_demos, conv_tol=conv_tol) if test_demos else []
    sw = stability_sweep(model, sweep_n, seed, conv_tol, sweep_dt, horizon, box=box)
    return MetricsReport(
        model=name,
        velocity_mse=mse,
        dtwd=dists,
        dtwd_mean=float(np.mean(dists)) if dists else None,
        success_rate=sw.success_rate,
        n_rollouts=sw.n_rollouts,
        n_converged=sw.n_converged,
        n_cut_failures=sw.n_cut_failures,
        lyapunov_violations=sw.lyapunov_violations,
        max_manifold_deviation=sw.max_manifold_deviation,
        config={
            "seed": seed,
            "conv_tol": conv_tol,
            "sweep_n": sweep_n,
            "sweep_dt": sweep_dt,
            "horizon": horizon,
            "exclusion": 0.1,
        },
    )


# ---------------------------------------------------------------- baselines


def train_baseline(
    demos,
    projected: bool = False,
    hidden: int = 32,
    tcfg: TrainConfig = TrainConfig(),
    seed: int = 0,
    n_centers: int = 50,
    cfg: Optional[IntegrationConfig] = None,
):
    """Fit the ambient Euclidean flow; ``projected`` only changes how it is rolled out."""
    spec = demos[0].spec
    points, _ = stack_demos(demos)
    rng = np.random.default_rng(seed)
    model = BaselineModel.create(spec, demos[0].goal, points, rng, hidden, n_centers, cfg, projected)
    history = train(model, demos, tcfg)
    return model, history


def as_projected(model: BaselineModel, projected: bool = True) -> BaselineModel:
    """Same parameters, other evaluation mode."""
    return BaselineModel(
        model.spec, model.diffeo, model.scaling, model.goal, model.cfg, dict(model.meta), model.target, projected
    )


def train_rsds(demos, hidden: int = 32, tcfg: TrainConfig = TrainConfig(), seed: int = 0, n_centers: int = 50, cfg=None):
    spec = demos[0].spec
    points, _ = stack_demos(demos)
    rng = np.random.default_rng(seed)
    model = RSDSModel.create(spec, demos[0].goal, points, rng, hidden, n_centers, cfg)
    history = train(model, demos, tcfg)
    return model, history


def random_model(spec: ManifoldSpec, goal, seed: int, hidden: int = 32, field_scale: float = 1.0, weight_std: float = 0.3, n_centers: int = 50, box=(-1.0, 1.0)):
    """Model with random diffeomorphism and scaling parameters (a stress fixture)."""
    from .netfield import ScalingNet, VectorFieldNet

    rng = np.random.default_rng(seed)
    diffeo = VectorFieldNet.create(spec, hidden, rng, last_scale=field_scale)
    for i in range(1, len(diffeo.params), 2):
        diffeo.params[i] = as_tensor(rng.normal(0.0, 0.1, size=diffeo.params[i].shape))
    pts = spec.sample(4 * n_centers, rng, box)
    scaling = ScalingNet.from_points(spec, pts, rng, n_centers)
    scaling.weights = as_tensor(rng.normal(0.0, weight_std, size=scaling.weights.shape))
    return RSDSModel(spec, diffeo, scaling, as_tensor(goal))
