"""Learnable pieces: the tangent-projected time-dependent MLP and the RBF scaling net."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import TrainingError, ValidationError
from .manifold import DTYPE, ManifoldSpec, _dot, _eye_like, _outer, as_tensor, kmeans_manifold

SCALING_EPS = 1e-8


class VectorFieldNet:
    """MLP ``eta(z, t)`` with tanh hidden layers, followed by tangent projection at ``z``."""

    def __init__(self, spec: ManifoldSpec, params):
        self.spec = spec
        self.params = [as_tensor(p) for p in params]
        if len(self.params) % 2:
            raise ValidationError("parameters must come in (weight, bias) pairs")

    @classmethod
    def create(cls, spec: ManifoldSpec, hidden: int = 32, rng=None, depth: int = 3, last_scale: float = 0.0):
        """Xavier-uniform hidden layers; the output layer is scaled by ``last_scale`` (zero: identity flow)."""
        rng = rng if rng is not None else np.random.default_rng(0)
        n = spec.ambient_dim
        widths = [n + 1] + [hidden] * depth + [n]
        params = []
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            b = np.zeros(fan_out)
            if i == len(widths) - 2:
                w = w * last_scale
            params += [w, b]
        return cls(spec, params)

    @property
    def widths(self):
        return [self.params[0].shape[1]] + [w.shape[0] for w in self.params[0::2]]

    def _forward(self, z, t, keep=False):
        t_col = torch.full((*z.shape[:-1], 1), float(t), dtype=DTYPE) if not torch.is_tensor(t) else t.expand(*z.shape[:-1], 1)
        h = torch.cat([z, t_col], dim=-1)
        acts = []
        n_layers = len(self.params) // 2
        for i in range(n_layers):
            w, b = self.params[2 * i], self.params[2 * i + 1]
            h = h @ w.T + b
            if i < n_layers - 1:
                h = torch.tanh(h)
                acts.append(h)
        return (h, acts) if keep else h

    def eta(self, z, t):
        return self._forward(as_tensor(z), t)

    def __call__(self, z, t):
        z = as_tensor(z)
        return self.spec.proj(z, self._forward(z, t))

    def eta_jacobian(self, z, t):
        z = as_tensor(z)
        eta, acts = self._forward(z, t, keep=True)
        n = z.shape[-1]
        # carry the transpose so every layer is one flat GEMM
        jt = self.params[0][:, :n].T.expand(*z.shape[:-1], -1, -1)
        for i, a in enumerate(acts):
            jt = jt * (1.0 - a * a).unsqueeze(-2)
            w = self.params[2 * (i + 1)]
            jt = (jt.reshape(-1, w.shape[1]) @ w.T).reshape(*jt.shape[:-1], w.shape[0])
        return eta, jt.transpose(-1, -2)

    def jacobian(self, z, t):
        """Ambient Jacobian of the projected field with respect to ``z``."""
        return self.value_and_jacobian(z, t)[1]

    def value_and_jacobian(self, z, t):
        z = as_tensor(z)
        eta, d_eta = self.eta_jacobian(z, t)
        spec = self.spec
        normal = spec._blockdiag(
            lambda zb, eb: _outer(zb, eb) + _dot(zb, eb).unsqueeze(-1) * _eye_like(zb),
            lambda zb, eb: torch.zeros_like(_outer(zb, eb)),
            z,
            eta,
        )
        return spec.proj(z, eta), spec.projector(z) @ d_eta - normal

    def to_dict(self) -> dict:
        return {"widths": self.widths, "params": [p.detach().tolist() for p in self.params]}

    @classmethod
    def from_dict(cls, spec: ManifoldSpec, d: dict) -> "VectorFieldNet":
        return cls(spec, [np.asarray(p, dtype=float) for p in d["params"]])


class ScalingNet:
    """Positive scale ``exp(sum_i w_i exp(-(d(x, c_i)/sigma_i)^2) + eps)``.

    ``metric`` selects the distance: ``"geodesic"`` (the manifold's own) or
    ``"euclidean"`` (ambient chordal distance, used by the baselines).
    """

    def __init__(self, spec: ManifoldSpec, centers, sigmas, weights, eps: float = SCALING_EPS, metric: str = "geodesic"):
        self.spec = spec
        self.centers = as_tensor(centers).reshape(-1, spec.ambient_dim)
        self.sigmas = as_tensor(sigmas).reshape(-1)
        self.weights = as_tensor(weights).reshape(-1)
        self.eps = float(eps)
        self.metric = metric
        if bool((self.sigmas <= 0).any()):
            raise ValidationError("RBF widths must be positive")
        if metric not in ("geodesic", "euclidean"):
            raise ValidationError(f"unknown metric {metric!r}")

    @property
    def params(self):
        return [self.weights]

    @params.setter
    def params(self, value):
        (self.weights,) = value

    @classmethod
    def from_points(cls, spec: ManifoldSpec, points, rng, n_centers: int = 50, neighbors: int = 5, metric: str = "geodesic"):
        points = as_tensor(points)
        k = min(n_centers, points.shape[0])
        centers = kmeans_manifold(spec, points, k, rng)
        d = cls._pairwise(spec, centers, centers, metric)
        if k == 1:
            sigmas = torch.ones(1, dtype=DTYPE)
        else:
            d = d + torch.diag(torch.full((k,), float("inf"), dtype=DTYPE))
            nearest = torch.sort(d, dim=1).values[:, : min(neighbors, k - 1)]
            sigmas = nearest.mean(1).clamp_min(1e-6)
        return cls(spec, centers, sigmas, torch.zeros(k, dtype=DTYPE), metric=metric)

    @staticmethod
    def _pairwise(spec, x, centers, metric):
        if metric == "euclidean":
            return torch.linalg.vector_norm(x[..., None, :] - centers, dim=-1)
        return spec.dist(x[..., None, :], centers)

    def kappa(self, x):
        x = as_tensor(x)
        r = self._pairwise(self.spec, x, self.centers, self.metric) / self.sigmas
        return (torch.exp(-r * r) * self.weights).sum(-1)

    def __call__(self, x):
        return torch.exp(self.kappa(x) + self.eps)

    def to_dict(self) -> dict:
        return {
            "centers": self.centers.tolist(),
            "sigmas": self.sigmas.tolist(),
            "weights": self.weights.detach().tolist(),
            "eps": self.eps,
            "metric": self.metric,
        }

    @classmethod
    def from_dict(cls, spec: ManifoldSpec, d: dict) -> "ScalingNet":
        return cls(spec, d["centers"], d["sigmas"], d["weights"], d.get("eps", SCALING_EPS), d.get("metric", "geodesic"))


def velocity_mse(pred, target) -> torch.Tensor:
    return ((pred - target) ** 2).sum(-1).mean()


def loss_and_gradients(predict, params, points, velocities):
    """Velocity-matching loss and its gradients with respect to ``params``.

    ``predict`` maps a batch of points to predicted velocities and must be
    built from ``params`` so autograd can reach them.
    """
    for p in params:
        p.requires_grad_(True)
    try:
        loss = velocity_mse(predict(as_tensor(points)), as_tensor(velocities))
        if not bool(torch.isfinite(loss)):
            raise TrainingError("non-finite loss; try a smaller step_size or more charts")
        grads = torch.autograd.grad(loss, params, allow_unused=True)
    finally:
        for p in params:
            p.requires_grad_(False)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    if not all(bool(torch.isfinite(g).all()) for g in grads):
        raise TrainingError("non-finite gradient")
    return float(loss.detach()), grads


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState, lr: float):
    """One Adam update; returns new parameter tensors and mutates ``state``."""
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        out.append((p - lr * m_hat / (torch.sqrt(v_hat) + state.eps)).detach())
    return out


def step_decay(lr: float, decay_epoch: int, factor: float = 0.1):
    """Learning-rate schedule: ``lr`` until ``decay_epoch``, then ``lr * factor``."""
    return lambda epoch: lr * (factor if epoch >= decay_epoch else 1.0)
