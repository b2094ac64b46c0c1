"""Stable dynamical systems built from a learned diffeomorphism and a geodesic field.

A point ``x`` is mapped to latent space by the flow ``psi``. There the
normalized geodesic field points at ``y* = psi(goal)``; its pullback through
``psi`` is normalized and rescaled by the positive scaling net, giving the
velocity at ``x``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from . import odeint
from .errors import (
    CutLocusError,
    DegeneratePullbackError,
    SingularityError,
    TrainingError,
    ValidationError,
)
from .manifold import CUT_LOCUS_MARGIN, DTYPE, ManifoldSpec, as_tensor
from .netfield import AdamState, ScalingNet, VectorFieldNet, adam_step, loss_and_gradients, step_decay
from .odeint import IntegrationConfig

EQUILIBRIUM_TOL = 1e-10
DEGENERATE_TOL = 1e-12


def canonical_direction(spec: ManifoldSpec, y, y_star, check: bool = True):
    """Unit vector at ``y`` along the geodesic to ``y_star`` (zero at ``y_star``)."""
    y, y_star = as_tensor(y), as_tensor(y_star)
    v = spec.log(y, y_star.expand_as(y), check=check)
    d = torch.linalg.vector_norm(v, dim=-1, keepdim=True)
    far = d >= EQUILIBRIUM_TOL
    return torch.where(far, v / torch.where(far, d, torch.ones_like(d)), torch.zeros_like(v))


def _cut_mask(spec: ManifoldSpec, y, y_star):
    """Rows where some sphere block of ``y`` sits at the antipode of ``y_star``."""
    bd = spec.block_dist(y, y_star.expand_as(y))
    bad = torch.zeros(bd.shape[:-1], dtype=torch.bool)
    for i, b in enumerate(spec.blocks):
        if b.kind == "sphere":
            bad |= bd[..., i] >= math.pi - CUT_LOCUS_MARGIN
    return bad


@dataclass
class Evaluation:
    velocity: torch.Tensor
    latent: torch.Tensor
    latent_goal: torch.Tensor
    lyapunov: torch.Tensor
    cut: torch.Tensor


@dataclass
class RSDSModel:
    spec: ManifoldSpec
    diffeo: VectorFieldNet
    scaling: ScalingNet
    goal: torch.Tensor
    cfg: IntegrationConfig = field(default_factory=IntegrationConfig)
    meta: dict = field(default_factory=dict)

    kind = "rsds"

    def __post_init__(self):
        self.goal = self.spec.check_point(self.goal, what="goal")

    @classmethod
    def create(
        cls,
        spec: ManifoldSpec,
        goal,
        rbf_points,
        rng: np.random.Generator,
        hidden: int = 32,
        n_centers: int = 50,
        cfg: Optional[IntegrationConfig] = None,
    ) -> "RSDSModel":
        """Untrained model: identity diffeomorphism and unit scaling."""
        diffeo = VectorFieldNet.create(spec, hidden, rng)
        scaling = ScalingNet.from_points(spec, rbf_points, rng, n_centers)
        return cls(spec, diffeo, scaling, as_tensor(goal), cfg or IntegrationConfig())

    # parameters
    @property
    def params(self):
        return self.diffeo.params + self.scaling.params

    def set_params(self, params):
        k = len(self.diffeo.params)
        self.diffeo.params = list(params[:k])
        self.scaling.params = list(params[k:])

    # geometry of the task space; baselines override these
    @property
    def task_spec(self) -> ManifoldSpec:
        return self.spec

    def goal_distance(self, x):
        return self.task_spec.dist(x, self.goal.expand_as(x))

    def step(self, x, v, dt: float):
        return self.spec.exp(x, dt * v, check=False)

    def excluded_starts(self, x, radius: float = 0.1):
        """Mask of starts too close to the preimage of the latent cut locus."""
        spec = self.spec
        if not spec.has_sphere:
            return torch.zeros(x.shape[:-1], dtype=torch.bool)
        y_star = self.forward_diffeo(self.goal)
        if spec.is_single_sphere:
            x_cut = self.cut_point(y_star)
            return spec.dist(x, x_cut.expand_as(x)) < radius
        # product: a cut set, not a point; exclude by latent block distance
        y = self.forward_diffeo(x)
        bd = spec.block_dist(y, y_star.expand_as(y))
        bad = torch.zeros(x.shape[:-1], dtype=torch.bool)
        for i, b in enumerate(spec.blocks):
            if b.kind == "sphere":
                bad |= bd[..., i] > math.pi - radius
        return bad

    def cut_point(self, y_star=None):
        if y_star is None:
            y_star = self.forward_diffeo(self.goal)
        return odeint.solve_preimage(self.diffeo, -y_star, self.cfg, self.spec)

    # the composed system
    def forward_diffeo(self, x):
        return odeint.flow_chartwise(self.diffeo, self.spec.check_point(x), self.cfg, self.spec)

    def inverse_diffeo(self, y):
        return odeint.flow_inverse(self.diffeo, self.spec.check_point(y), self.cfg, self.spec)

    def evaluate(self, x, raise_on_cut: bool = True) -> Evaluation:
        spec = self.spec
        x = as_tensor(x)
        lead = x.shape[:-1]
        flat = x.reshape(-1, spec.ambient_dim)
        both = torch.cat([self.goal.reshape(1, -1), flat], dim=0)
        y_all, charts = odeint.flow_with_jacobians(self.diffeo, both, self.cfg, spec)
        y_star, y = y_all[0], y_all[1:]
        # batched GEMMs may differ from row 0 in the last bit; pin exact goal copies
        at_goal = (flat == self.goal).all(-1, keepdim=True)
        y = torch.where(at_goal, y_star, y)
        cut = _cut_mask(spec, y, y_star)
        if raise_on_cut and bool(cut.any()):
            raise CutLocusError("latent state at the antipode of the latent attractor")
        g = canonical_direction(spec, y, y_star, check=False)
        g = torch.where(cut.unsqueeze(-1), torch.zeros_like(g), g)
        pulled = odeint.apply_pullback(spec, charts, torch.cat([torch.zeros_like(g[:1]), g]))[1:]
        pulled = spec.proj(flat, pulled)
        norm = torch.linalg.vector_norm(pulled, dim=-1, keepdim=True)
        moving = torch.linalg.vector_norm(g, dim=-1, keepdim=True) > 0
        if bool((moving & (norm < DEGENERATE_TOL)).any()):
            raise DegeneratePullbackError("pullback of the latent field vanished; the diffeomorphism is locally singular")
        unit = torch.where(moving, pulled / torch.where(moving, norm, torch.ones_like(norm)), torch.zeros_like(pulled))
        vel = self.scaling(flat).unsqueeze(-1) * unit
        lyap = spec.dist(y, y_star.expand_as(y)) ** 2
        return Evaluation(
            vel.reshape(*lead, -1),
            y.reshape(*lead, -1),
            y_star,
            lyap.reshape(lead),
            cut.reshape(lead),
        )

    def predict_velocity(self, x):
        return self.evaluate(x).velocity

    def lyapunov_value(self, x):
        x = as_tensor(x)
        y = self.forward_diffeo(x)
        y_star = self.forward_diffeo(self.goal)
        if bool(_cut_mask(self.spec, y, y_star).any()):
            raise CutLocusError("latent state at the antipode of the latent attractor")
        return self.spec.dist(y, y_star.expand_as(y)) ** 2

    def pullback_constrained(self, x, y_dot):
        """Least-squares pullback using ``D_x psi`` and the unit-norm constraint (single sphere)."""
        if not self.spec.is_single_sphere:
            raise ValidationError("the constrained pullback is defined for a single sphere")
        x, y_dot = as_tensor(x), as_tensor(y_dot)
        _, d = odeint.differential(self.diffeo, x, self.cfg, self.spec)
        a = d.transpose(-1, -2) @ d + x.unsqueeze(-1) * x.unsqueeze(-2)
        cond = torch.linalg.cond(a)
        if bool((cond > 1e12).any()):
            raise SingularityError(f"augmented normal matrix is singular (condition {float(cond.max()):.3g})")
        rhs = (d.transpose(-1, -2) @ y_dot.unsqueeze(-1)).squeeze(-1)
        return torch.linalg.solve(a, rhs.unsqueeze(-1)).squeeze(-1)

    # serialization
    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "spec": self.spec.to_dict(),
            "diffeo": self.diffeo.to_dict(),
            "scaling": self.scaling.to_dict(),
            "goal": self.goal.tolist(),
            "integration": self.cfg.to_dict(),
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RSDSModel":
        if d.get("kind", "rsds") == "baseline":
            return BaselineModel.from_dict(d)
        spec = ManifoldSpec.from_dict(d["spec"])
        return cls(
            spec,
            VectorFieldNet.from_dict(spec, d["diffeo"]),
            ScalingNet.from_dict(spec, d["scaling"]),
            as_tensor(d["goal"]),
            IntegrationConfig.from_dict(d["integration"]),
            dict(d.get("meta", {})),
        )


@dataclass
class BaselineModel(RSDSModel):
    """Flow in the ambient Euclidean space, optionally projected onto the task manifold."""

    target: ManifoldSpec = None
    projected: bool = False

    kind = "baseline"

    def __post_init__(self):
        super().__post_init__()
        if self.target is None:
            self.target = self.spec

    @classmethod
    def create(cls, target: ManifoldSpec, goal, rbf_points, rng, hidden=32, n_centers=50, cfg=None, projected=False):
        spec = ManifoldSpec.euclidean(target.ambient_dim)
        diffeo = VectorFieldNet.create(spec, hidden, rng)
        scaling = ScalingNet.from_points(spec, rbf_points, rng, n_centers, metric="euclidean")
        return cls(spec, diffeo, scaling, as_tensor(goal), cfg or IntegrationConfig(), {}, target, projected)

    @property
    def task_spec(self):
        return self.target if self.projected else self.spec

    def evaluate(self, x, raise_on_cut: bool = True) -> Evaluation:
        ev = super().evaluate(x, raise_on_cut)
        if self.projected:
            ev.velocity = self.target.proj(as_tensor(x), ev.velocity)
        return ev

    def step(self, x, v, dt: float):
        if self.projected:
            return self.target.retract(x + dt * v)
        return x + dt * v

    def excluded_starts(self, x, radius: float = 0.1):
        return torch.zeros(x.shape[:-1], dtype=torch.bool)

    def to_dict(self) -> dict:
        d = super().to_dict()
        d.update(target=self.target.to_dict(), projected=self.projected)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BaselineModel":
        spec = ManifoldSpec.from_dict(d["spec"])
        return cls(
            spec,
            VectorFieldNet.from_dict(spec, d["diffeo"]),
            ScalingNet.from_dict(spec, d["scaling"]),
            as_tensor(d["goal"]),
            IntegrationConfig.from_dict(d["integration"]),
            dict(d.get("meta", {})),
            ManifoldSpec.from_dict(d["target"]),
            bool(d["projected"]),
        )


# ---------------------------------------------------------------- rollouts


@dataclass
class Rollout:
    times: list
    points: torch.Tensor
    velocities: torch.Tensor
    lyapunov: torch.Tensor
    converged: bool
    failed: bool
    final_distance: float


@dataclass
class RolloutBatch:
    points: torch.Tensor  # (steps + 1, B, n); rows freeze once finished
    lyapunov: torch.Tensor  # (steps + 1, B); nan where not evaluated
    lengths: torch.Tensor  # number of valid points per rollout
    converged: torch.Tensor
    failed: torch.Tensor
    final_distance: torch.Tensor
    velocities: torch.Tensor = None


def rollout_batch(
    model: RSDSModel,
    x0,
    dt: float,
    max_steps: int,
    conv_tol: float = 0.05,
    perturb: Optional[dict] = None,
    keep_velocities: bool = False,
) -> RolloutBatch:
    """Explicit geodesic Euler rollouts from a batch of starts.

    ``perturb`` maps a step index to a replacement state (same for every row),
    emulating an external push. Rows that hit the latent cut locus are marked
    failed instead of raising.
    """
    x = as_tensor(x0).reshape(-1, model.spec.ambient_dim).clone()
    b = x.shape[0]
    active = torch.ones(b, dtype=torch.bool)
    converged = torch.zeros(b, dtype=torch.bool)
    failed = torch.zeros(b, dtype=torch.bool)
    lengths = torch.ones(b, dtype=torch.long)
    points = [x.clone()]
    lyap = []
    vels = []
    for k in range(max_steps + 1):
        if perturb and k in perturb:
            x[active] = as_tensor(perturb[k]).expand(int(active.sum()), -1)
            points[-1] = x.clone()
        dist = model.goal_distance(x)
        newly = active & (dist < conv_tol)
        converged |= newly
        active &= ~newly
        row_lyap = torch.full((b,), float("nan"), dtype=DTYPE)
        row_vel = torch.zeros_like(x)
        if k == max_steps or not bool(active.any()):
            lyap.append(row_lyap)
            vels.append(row_vel)
            break
        idx = active.nonzero().squeeze(-1)
        ev = model.evaluate(x[idx], raise_on_cut=False)
        bad = ev.cut | ~torch.isfinite(ev.velocity).all(-1)
        failed[idx[bad]] = True
        active[idx[bad]] = False
        good = idx[~bad]
        row_lyap[idx] = ev.lyapunov
        row_vel[good] = ev.velocity[~bad]
        lyap.append(row_lyap)
        vels.append(row_vel)
        x = x.clone()
        x[good] = model.step(x[good], ev.velocity[~bad], dt)
        lengths[good] += 1
        points.append(x.clone())
    final = model.goal_distance(x)
    return RolloutBatch(
        torch.stack(points),
        torch.stack(lyap),
        lengths,
        converged,
        failed,
        final,
        torch.stack(vels) if keep_velocities else None,
    )


def rollout(model: RSDSModel, x0, dt: float, max_steps: int, conv_tol: float = 0.05, perturb: Optional[dict] = None) -> Rollout:
    x0 = model.task_spec.check_point(x0, what="start point")
    rb = rollout_batch(model, x0.reshape(1, -1), dt, max_steps, conv_tol, perturb, keep_velocities=True)
    n = int(rb.lengths[0])
    vel, lyap = rb.velocities[:n, 0].clone(), rb.lyapunov[:n, 0].clone()
    if not bool(rb.failed[0]) and not bool(torch.isfinite(lyap[-1])):
        # the loop stops before evaluating the final state; fill it in
        ev = model.evaluate(rb.points[n - 1, 0:1], raise_on_cut=False)
        vel[-1], lyap[-1] = ev.velocity[0], ev.lyapunov[0]
    return Rollout(
        times=[k * dt for k in range(n)],
        points=rb.points[:n, 0],
        velocities=vel,
        lyapunov=lyap,
        converged=bool(rb.converged[0]),
        failed=bool(rb.failed[0]),
        final_distance=float(rb.final_distance[0]),
    )


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    epochs: int = 2000
    lr: float = 1e-3
    decay_epoch: Optional[int] = None  # defaults to half the epochs
    decay_factor: float = 0.1
    train_diffeo: bool = True
    train_scaling: bool = True
    batch_size: Optional[int] = None  # None means full batch
    shuffle_seed: int = 0


def stack_demos(demos):
    points = torch.cat([as_tensor(d.points) for d in demos])
    vels = torch.cat([as_tensor(d.velocities) for d in demos])
    return points, vels


def train(model: RSDSModel, demos, tcfg: TrainConfig = TrainConfig(), callback=None):
    """Full-batch Adam on the velocity MSE; returns the per-epoch loss history.

    On a non-finite loss the model keeps its last good parameters and a
    ``TrainingError`` is raised.
    """
    points, vels = stack_demos(demos)
    model.task_spec.check_point(points, what="demonstration point")
    schedule = step_decay(tcfg.lr, tcfg.decay_epoch if tcfg.decay_epoch is not None else tcfg.epochs // 2, tcfg.decay_factor)
    k = len(model.diffeo.params)
    trainable = [tcfg.train_diffeo] * k + [tcfg.train_scaling] * len(model.scaling.params)
    if tcfg.batch_size is not None and tcfg.batch_size < 1:
        raise ValidationError("batch_size must be positive")
    n = len(points)
    rng = np.random.default_rng(tcfg.shuffle_seed)
    state = AdamState()
    history = []
    for epoch in range(tcfg.epochs):
        if tcfg.batch_size is None:
            batches = [slice(None)]
        else:
            order = torch.as_tensor(rng.permutation(n))
            batches = [order[i : i + tcfg.batch_size] for i in range(0, n, tcfg.batch_size)]
        total = 0.0
        for idx in batches:
            params = model.params
            sel = [p for p, t in zip(params, trainable) if t]
            try:
                loss, grads = loss_and_gradients(model.predict_velocity, sel, points[idx], vels[idx])
            except (TrainingError, CutLocusError, DegeneratePullbackError, odeint.ChartOverflowError) as exc:
                raise TrainingError(f"training stopped at epoch {epoch}: {exc}") from exc
            total += loss * len(points[idx])
            new = iter(adam_step(sel, grads, state, schedule(epoch)))
            model.set_params([next(new) if t else p for p, t in zip(params, trainable)])
        loss = loss if tcfg.batch_size is None else total / n
        history.append(loss)
        if callback is not None:
            callback(epoch, loss)
    return history
